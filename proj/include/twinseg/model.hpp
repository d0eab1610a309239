#pragma once

#include "twinseg/ops.hpp"
#include "twinseg/parameter_store.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace twinseg {

struct VitConfig {
  std::size_t patch_size = 4;
  std::size_t embed_dim = 64;
  std::size_t heads = 2;
  std::size_t layers = 1;
  std::size_t mlp_ratio = 2;
};

/// Hyper-parameters of the hybrid conv-encoder / ViT-bottleneck / conv-decoder
/// segmentation network.
struct ModelConfig {
  std::size_t in_modalities = 4;  // T1, T1ce, T2, FLAIR
  std::size_t num_classes = 4;    // background, edema, tumor core, enhancing tumor
  std::size_t base_channels = 8;
  std::size_t encoder_levels = 2;
  std::size_t input_extent = 32;
  VitConfig vit;

  static ModelConfig desk() { return {}; }
  /// 128^3, four levels; constructible, too large to train on a desk.
  static ModelConfig paper();

  std::size_t level_channels(std::size_t level) const { return base_channels << level; }
  std::size_t bottleneck_channels() const { return level_channels(encoder_levels - 1); }
  std::size_t bottleneck_extent() const { return input_extent >> encoder_levels; }
  std::size_t tokens_per_axis() const { return bottleneck_extent() / vit.patch_size; }
  std::size_t token_count() const;
  std::size_t patch_dim() const;
};

/// Throws std::invalid_argument naming the first violated constraint.
void validate(const ModelConfig& config);

struct LayerSpec {
  std::string name;
  Shape shape;
  enum class Init { he_uniform, zeros, ones, normal_002, buffer_zeros, buffer_ones } init;
  std::size_t fan_in = 0;
};

/// Every tensor the model owns, in construction order.
std::vector<LayerSpec> layer_inventory(const ModelConfig& config);

/// Deterministic initialisation: He-uniform conv/linear weights, zero biases
/// and betas, unit gammas, N(0, 0.02) positional embeddings.
ParameterStore build_model(const ModelConfig& config, std::uint64_t seed);

struct EncoderOutput {
  Tensor features;  // pooled, half extent
  Tensor skip;      // pre-pool activations
};

EncoderOutput encoder_block(ParameterStore& params, const ModelConfig& config, const Tensor& x, std::size_t level,
                            NormMode mode);

/// Patchify -> embed -> positional add -> pre-norm transformer layers ->
/// back-projection -> un-patchify. Output shape equals input shape.
/// When `attention` is non-null it receives each layer's [N*heads,T,T]
/// attention weights.
Tensor vit_bottleneck(ParameterStore& params, const ModelConfig& config, const Tensor& features,
                      std::vector<Tensor>* attention = nullptr);

Tensor decoder_block(ParameterStore& params, const ModelConfig& config, const Tensor& features, const Tensor& skip,
                     std::size_t level, NormMode mode);

/// x[N,modalities,S,S,S] -> logits[N,classes,S,S,S].
Tensor forward(ParameterStore& params, const ModelConfig& config, const Tensor& x, NormMode mode);

}  // namespace twinseg
