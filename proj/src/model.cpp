#include "twinseg/model.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

namespace twinseg {

ModelConfig ModelConfig::paper() {
  ModelConfig c;
  c.base_channels = 16;
  c.encoder_levels = 4;
  c.input_extent = 128;
  c.vit.patch_size = 8;
  c.vit.embed_dim = 256;
  c.vit.heads = 4;
  return c;
}

std::size_t ModelConfig::token_count() const {
  const std::size_t g = tokens_per_axis();
  return g * g * g;
}

std::size_t ModelConfig::patch_dim() const {
  const std::size_t p = vit.patch_size;
  return bottleneck_channels() * p * p * p;
}

void validate(const ModelConfig& c) {
  auto fail = [](const std::string& what) { throw std::invalid_argument("model config: " + what); };
  if (c.in_modalities == 0) fail("in_modalities must be positive");
  if (c.num_classes < 2) fail("num_classes must be at least 2");
  if (c.base_channels == 0) fail("base_channels must be positive");
  if (c.encoder_levels == 0) fail("encoder_levels must be positive");
  if (c.input_extent == 0) fail("input_extent must be positive");
  if (c.vit.patch_size == 0 || c.vit.embed_dim == 0 || c.vit.heads == 0 || c.vit.mlp_ratio == 0)
    fail("vit sizes must be positive");
  const std::size_t div = std::size_t{1} << c.encoder_levels;
  if (c.input_extent % div != 0)
    fail("input_extent " + std::to_string(c.input_extent) + " is not divisible by 2^encoder_levels = " +
         std::to_string(div));
  if (c.bottleneck_extent() % c.vit.patch_size != 0)
    fail("bottleneck extent " + std::to_string(c.bottleneck_extent()) + " is not divisible by vit.patch_size " +
         std::to_string(c.vit.patch_size));
  if (c.vit.embed_dim % c.vit.heads != 0)
    fail("vit.embed_dim " + std::to_string(c.vit.embed_dim) + " is not divisible by vit.heads " +
         std::to_string(c.vit.heads));
}

namespace {

using Init = LayerSpec::Init;

void conv_bn(std::vector<LayerSpec>& inv, const std::string& prefix, std::size_t cin, std::size_t cout) {
  inv.push_back({prefix + ".conv.weight", {cout, cin, 3, 3, 3}, Init::he_uniform, cin * 27});
  inv.push_back({prefix + ".bn.gamma", {cout}, Init::ones});
  inv.push_back({prefix + ".bn.beta", {cout}, Init::zeros});
  inv.push_back({prefix + ".bn.running_mean", {cout}, Init::buffer_zeros});
  inv.push_back({prefix + ".bn.running_var", {cout}, Init::buffer_ones});
}

void dense(std::vector<LayerSpec>& inv, const std::string& prefix, std::size_t fin, std::size_t fout) {
  inv.push_back({prefix + ".weight", {fout, fin}, Init::he_uniform, fin});
  inv.push_back({prefix + ".bias", {fout}, Init::zeros});
}

void norm(std::vector<LayerSpec>& inv, const std::string& prefix, std::size_t f) {
  inv.push_back({prefix + ".gamma", {f}, Init::ones});
  inv.push_back({prefix + ".beta", {f}, Init::zeros});
}

std::string enc(std::size_t l) { return "enc" + std::to_string(l); }
std::string dec(std::size_t l) { return "dec" + std::to_string(l); }

}  // namespace

std::vector<LayerSpec> layer_inventory(const ModelConfig& c) {
  validate(c);
  std::vector<LayerSpec> inv;
  for (std::size_t l = 0; l < c.encoder_levels; ++l) {
    const std::size_t cin = l == 0 ? c.in_modalities : c.level_channels(l - 1);
    conv_bn(inv, enc(l) + ".a", cin, c.level_channels(l));
    conv_bn(inv, enc(l) + ".b", c.level_channels(l), c.level_channels(l));
  }
  const std::size_t E = c.vit.embed_dim;
  dense(inv, "vit.embed", c.patch_dim(), E);
  inv.push_back({"vit.pos", {c.token_count(), E}, Init::normal_002});
  for (std::size_t i = 0; i < c.vit.layers; ++i) {
    const std::string p = "vit.layer" + std::to_string(i);
    norm(inv, p + ".ln1", E);
    dense(inv, p + ".attn.q", E, E);
    dense(inv, p + ".attn.k", E, E);
    dense(inv, p + ".attn.v", E, E);
    dense(inv, p + ".attn.out", E, E);
    norm(inv, p + ".ln2", E);
    dense(inv, p + ".mlp.fc1", E, E * c.vit.mlp_ratio);
    dense(inv, p + ".mlp.fc2", E * c.vit.mlp_ratio, E);
  }
  norm(inv, "vit.ln_f", E);
  dense(inv, "vit.proj", E, c.patch_dim());
  for (std::size_t l = c.encoder_levels; l-- > 0;) {
    const std::size_t cin = l + 1 == c.encoder_levels ? c.bottleneck_channels() : c.level_channels(l + 1);
    const std::size_t ch = c.level_channels(l);
    inv.push_back({dec(l) + ".up.weight", {cin, ch, 2, 2, 2}, Init::he_uniform, cin});
    inv.push_back({dec(l) + ".up.bias", {ch}, Init::zeros});
    conv_bn(inv, dec(l) + ".a", 2 * ch, ch);
    conv_bn(inv, dec(l) + ".b", ch, ch);
  }
  inv.push_back({"head.weight", {c.num_classes, c.level_channels(0), 1, 1, 1}, Init::he_uniform, c.level_channels(0)});
  inv.push_back({"head.bias", {c.num_classes}, Init::zeros});
  return inv;
}

ParameterStore build_model(const ModelConfig& config, std::uint64_t seed) {
  ParameterStore store;
  std::mt19937_64 rng(seed);
  for (const auto& spec : layer_inventory(config)) {
    Tensor t(spec.shape);
    auto v = t.mutable_values();
    EntryKind kind = EntryKind::trainable;
    switch (spec.init) {
      case Init::he_uniform: {
        const double bound = std::sqrt(6.0 / static_cast<double>(spec.fan_in));
        std::uniform_real_distribution<double> u(-bound, bound);
        for (auto& x : v) x = u(rng);
        break;
      }
      case Init::normal_002: {
        std::normal_distribution<double> n(0.0, 0.02);
        for (auto& x : v) x = n(rng);
        break;
      }
      case Init::ones:
        std::fill(v.begin(), v.end(), 1.0);
        break;
      case Init::zeros:
        break;
      case Init::buffer_zeros:
        kind = EntryKind::buffer;
        break;
      case Init::buffer_ones:
        kind = EntryKind::buffer;
        std::fill(v.begin(), v.end(), 1.0);
        break;
    }
    store.add(spec.name, std::move(t), kind);
  }
  return store;
}

namespace {

Tensor conv_bn_relu(ParameterStore& p, const std::string& prefix, const Tensor& x, NormMode mode) {
  Tensor y = conv3d(x, p.at(prefix + ".conv.weight"), Tensor(), 1, 1);
  y = batchnorm3d(y, p.at(prefix + ".bn.gamma"), p.at(prefix + ".bn.beta"), p.at(prefix + ".bn.running_mean"),
                  p.at(prefix + ".bn.running_var"), mode);
  return relu(y);
}

Tensor dense(ParameterStore& p, const std::string& prefix, const Tensor& x) {
  return linear(x, p.at(prefix + ".weight"), p.at(prefix + ".bias"));
}

Tensor norm(ParameterStore& p, const std::string& prefix, const Tensor& x) {
  return layer_norm(x, p.at(prefix + ".gamma"), p.at(prefix + ".beta"));
}

// [N,T,E] -> [N*heads,T,E/heads]
Tensor split_heads(const Tensor& x, std::size_t heads) {
  const std::size_t N = x.size(0), T = x.size(1), E = x.size(2), d = E / heads;
  Tensor y = permute(reshape(x, {N, T, heads, d}), {0, 2, 1, 3});
  return reshape(y, {N * heads, T, d});
}

Tensor merge_heads(const Tensor& x, std::size_t batch, std::size_t heads) {
  const std::size_t T = x.size(1), d = x.size(2);
  Tensor y = permute(reshape(x, {batch, heads, T, d}), {0, 2, 1, 3});
  return reshape(y, {batch, T, heads * d});
}

}  // namespace

EncoderOutput encoder_block(ParameterStore& params, const ModelConfig& config, const Tensor& x, std::size_t level,
                            NormMode mode) {
  if (level >= config.encoder_levels) throw std::invalid_argument("encoder_block: level out of range");
  if (x.dim() != 5 || x.size(2) % 2 || x.size(3) % 2 || x.size(4) % 2)
    throw std::invalid_argument("encoder_block: input must be 5-D with even extents, got " + shape_string(x.shape()));
  EncoderOutput out;
  Tensor h = conv_bn_relu(params, enc(level) + ".a", x, mode);
  out.skip = conv_bn_relu(params, enc(level) + ".b", h, mode);
  out.features = maxpool3d(out.skip).output;
  return out;
}

Tensor vit_bottleneck(ParameterStore& params, const ModelConfig& config, const Tensor& features,
                      std::vector<Tensor>* attention) {
  const std::size_t p = config.vit.patch_size;
  if (features.dim() != 5) throw std::invalid_argument("vit_bottleneck: expected [N,C,D,H,W]");
  const std::size_t N = features.size(0), C = features.size(1), e = features.size(2);
  if (features.size(3) != e || features.size(4) != e || e % p != 0)
    throw std::invalid_argument("vit_bottleneck: extent of " + shape_string(features.shape()) +
                                " is not a cube divisible by patch size " + std::to_string(p));
  const std::size_t g = e / p, T = g * g * g, P = C * p * p * p;
  const Tensor& pos = params.at("vit.pos");
  if (pos.shape() != Shape{T, config.vit.embed_dim} || C != config.bottleneck_channels())
    throw std::invalid_argument("vit_bottleneck: features " + shape_string(features.shape()) +
                                " do not match the configured bottleneck");

  Tensor tokens = reshape(features, {N, C, g, p, g, p, g, p});
  tokens = permute(tokens, {0, 2, 4, 6, 1, 3, 5, 7});
  tokens = reshape(tokens, {N, T, P});

  Tensor x = dense(params, "vit.embed", tokens);
  std::vector<Tensor> pos_batch(N, reshape(pos, {1, T, config.vit.embed_dim}));
  x = add(x, N == 1 ? pos_batch.front() : concat(pos_batch, 0));

  const std::size_t heads = config.vit.heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(config.vit.embed_dim / heads));
  for (std::size_t i = 0; i < config.vit.layers; ++i) {
    const std::string pre = "vit.layer" + std::to_string(i);
    Tensor h = norm(params, pre + ".ln1", x);
    Tensor q = split_heads(dense(params, pre + ".attn.q", h), heads);
    Tensor k = split_heads(dense(params, pre + ".attn.k", h), heads);
    Tensor v = split_heads(dense(params, pre + ".attn.v", h), heads);
    Tensor attn = softmax(mul(bmm(q, permute(k, {0, 2, 1})), scale), 2);
    if (attention) attention->push_back(attn);
    Tensor ctx = merge_heads(bmm(attn, v), N, heads);
    x = add(x, dense(params, pre + ".attn.out", ctx));
    Tensor m = gelu(dense(params, pre + ".mlp.fc1", norm(params, pre + ".ln2", x)));
    x = add(x, dense(params, pre + ".mlp.fc2", m));
  }
  x = norm(params, "vit.ln_f", x);
  Tensor y = dense(params, "vit.proj", x);
  y = reshape(y, {N, g, g, g, C, p, p, p});
  y = permute(y, {0, 4, 1, 5, 2, 6, 3, 7});
  return reshape(y, {N, C, e, e, e});
}

Tensor decoder_block(ParameterStore& params, const ModelConfig& config, const Tensor& features, const Tensor& skip,
                     std::size_t level, NormMode mode) {
  if (level >= config.encoder_levels) throw std::invalid_argument("decoder_block: level out of range");
  Tensor up = conv_transpose3d(features, params.at(dec(level) + ".up.weight"), params.at(dec(level) + ".up.bias"));
  if (up.shape() != skip.shape())
    throw std::invalid_argument("decoder_block: upsampled " + shape_string(up.shape()) + " does not match skip " +
                                shape_string(skip.shape()));
  Tensor h = concat({up, skip}, 1);
  h = conv_bn_relu(params, dec(level) + ".a", h, mode);
  return conv_bn_relu(params, dec(level) + ".b", h, mode);
}

Tensor forward(ParameterStore& params, const ModelConfig& config, const Tensor& x, NormMode mode) {
  if (x.dim() != 5 || x.size(1) != config.in_modalities)
    throw std::invalid_argument("forward: expected input [N," + std::to_string(config.in_modalities) +
                                ",S,S,S], got " + shape_string(x.shape()));
  const std::size_t S = config.input_extent;
  if (x.size(2) != S || x.size(3) != S || x.size(4) != S)
    throw std::invalid_argument("forward: spatial extent of " + shape_string(x.shape()) + " does not match " +
                                std::to_string(S));
  std::vector<Tensor> skips;
  Tensor h = x;
  for (std::size_t l = 0; l < config.encoder_levels; ++l) {
    auto e = encoder_block(params, config, h, l, mode);
    skips.push_back(std::move(e.skip));
    h = std::move(e.features);
  }
  h = vit_bottleneck(params, config, h);
  for (std::size_t l = config.encoder_levels; l-- > 0;) {
    h = decoder_block(params, config, h, skips[l], l, mode);
    skips[l] = Tensor();
  }
  return conv3d(h, params.at("head.weight"), params.at("head.bias"));
}

}  // namespace twinseg
