#include "autograd.hpp"
#include "twinseg/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace twinseg {

using detail::attach;
using detail::grad_target;
using detail::ImplPtr;
using detail::should_record;

namespace {

struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

AxisSplit split_at(const Shape& shape, std::size_t axis, const char* op) {
  if (axis >= shape.size())
    throw std::invalid_argument(std::string(op) + ": axis " + std::to_string(axis) + " out of range for " +
                                shape_string(shape));
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

void require_finite(const char* op, const Tensor& x) {
  for (double v : x.values())
    if (!std::isfinite(v)) throw std::invalid_argument(std::string(op) + ": non-finite input");
}

template <class F>
Tensor map_unary(const Tensor& x, F f) {
  std::vector<double> out(x.numel());
  const double* xv = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(xv[i]);
  return Tensor(x.shape(), std::move(out));
}

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }
double normal_pdf(double x) { return std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi); }

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape("add", a, b);
  Tensor out(a.shape(), std::vector<double>(a.numel()));
  out.vec() = a.vec() + b.vec();
  if (should_record({&a, &b})) {
    attach(out, "add", [o = out.impl(), ga = grad_target(a), gb = grad_target(b)] {
      if (o->grad.empty()) return;
      if (ga) ga->accumulate_grad(o->grad);
      if (gb) gb->accumulate_grad(o->grad);
    });
  }
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape("sub", a, b);
  Tensor out(a.shape(), std::vector<double>(a.numel()));
  out.vec() = a.vec() - b.vec();
  if (should_record({&a, &b})) {
    attach(out, "sub", [o = out.impl(), ga = grad_target(a), gb = grad_target(b)] {
      if (o->grad.empty()) return;
      if (ga) ga->accumulate_grad(o->grad);
      if (gb) {
        auto g = gb->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] -= o->grad[i];
      }
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape("mul", a, b);
  Tensor out(a.shape(), std::vector<double>(a.numel()));
  out.vec() = a.vec().cwiseProduct(b.vec());
  if (should_record({&a, &b})) {
    attach(out, "mul", [o = out.impl(), ai = a.impl(), bi = b.impl(), ga = grad_target(a), gb = grad_target(b)] {
      if (o->grad.empty()) return;
      const auto& go = o->grad;
      if (ga) {
        auto g = ga->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i] * bi->value[i];
      }
      if (gb) {
        auto g = gb->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i] * ai->value[i];
      }
    });
  }
  return out;
}

Tensor div(const Tensor& a, const Tensor& b) {
  detail::require_same_shape("div", a, b);
  Tensor out(a.shape(), std::vector<double>(a.numel()));
  out.vec() = a.vec().cwiseQuotient(b.vec());
  if (should_record({&a, &b})) {
    attach(out, "div", [o = out.impl(), ai = a.impl(), bi = b.impl(), ga = grad_target(a), gb = grad_target(b)] {
      if (o->grad.empty()) return;
      const auto& go = o->grad;
      if (ga) {
        auto g = ga->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i] / bi->value[i];
      }
      if (gb) {
        auto g = gb->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) {
          const double bv = bi->value[i];
          g[i] -= go[i] * ai->value[i] / (bv * bv);
        }
      }
    });
  }
  return out;
}

Tensor add(const Tensor& a, double s) {
  Tensor out = map_unary(a, [s](double v) { return v + s; });
  if (should_record({&a})) {
    attach(out, "add_scalar", [o = out.impl(), ga = grad_target(a)] {
      if (!o->grad.empty()) ga->accumulate_grad(o->grad);
    });
  }
  return out;
}

Tensor mul(const Tensor& a, double s) {
  Tensor out = map_unary(a, [s](double v) { return v * s; });
  if (should_record({&a})) {
    attach(out, "mul_scalar", [o = out.impl(), ga = grad_target(a), s] {
      if (o->grad.empty()) return;
      auto g = ga->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * o->grad[i];
    });
  }
  return out;
}

Tensor relu(const Tensor& x) {
  Tensor out = map_unary(x, [](double v) { return v > 0.0 ? v : 0.0; });
  if (should_record({&x})) {
    attach(out, "relu", [o = out.impl(), xi = x.impl()] {
      if (o->grad.empty()) return;
      auto g = xi->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i)
        if (xi->value[i] > 0.0) g[i] += o->grad[i];
    });
  }
  return out;
}

Tensor gelu(const Tensor& x) {
  Tensor out = map_unary(x, [](double v) { return v * normal_cdf(v); });
  if (should_record({&x})) {
    attach(out, "gelu", [o = out.impl(), xi = x.impl()] {
      if (o->grad.empty()) return;
      auto g = xi->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double v = xi->value[i];
        g[i] += o->grad[i] * (normal_cdf(v) + v * normal_pdf(v));
      }
    });
  }
  return out;
}

Tensor exp(const Tensor& x) {
  Tensor out = map_unary(x, [](double v) { return std::exp(v); });
  if (should_record({&x})) {
    attach(out, "exp", [o = out.impl(), xi = x.impl()] {
      if (o->grad.empty()) return;
      auto g = xi->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o->grad[i] * o->value[i];
    });
  }
  return out;
}

Tensor log(const Tensor& x) {
  for (double v : x.values())
    if (!(v > 0.0)) throw std::invalid_argument("log: input must be positive");
  Tensor out = map_unary(x, [](double v) { return std::log(v); });
  if (should_record({&x})) {
    attach(out, "log", [o = out.impl(), xi = x.impl()] {
      if (o->grad.empty()) return;
      auto g = xi->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o->grad[i] / xi->value[i];
    });
  }
  return out;
}

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.values()) acc += v;
  Tensor out = Tensor::scalar(acc);
  if (should_record({&x})) {
    attach(out, "sum", [o = out.impl(), xi = x.impl()] {
      if (o->grad.empty()) return;
      const double go = o->grad[0];
      for (auto& g : xi->grad_buffer()) g += go;
    });
  }
  return out;
}

Tensor mean(const Tensor& x) { return mul(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor sum_to_axis(const Tensor& x, std::size_t axis) {
  const auto s = split_at(x.shape(), axis, "sum_to_axis");
  std::vector<double> acc(s.extent, 0.0);
  const double* xv = x.data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t c = 0; c < s.extent; ++c) {
      const double* row = xv + (o * s.extent + c) * s.inner;
      double a = acc[c];
      for (std::size_t i = 0; i < s.inner; ++i) a += row[i];
      acc[c] = a;
    }
  Tensor out(Shape{s.extent}, std::move(acc));
  if (should_record({&x})) {
    attach(out, "sum_to_axis", [o = out.impl(), xi = x.impl(), s] {
      if (o->grad.empty()) return;
      auto g = xi->grad_buffer();
      for (std::size_t ou = 0; ou < s.outer; ++ou)
        for (std::size_t c = 0; c < s.extent; ++c) {
          double* row = g.data() + (ou * s.extent + c) * s.inner;
          for (std::size_t i = 0; i < s.inner; ++i) row[i] += o->grad[c];
        }
    });
  }
  return out;
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel())
    throw std::invalid_argument("reshape: cannot view " + shape_string(x.shape()) + " as " + shape_string(shape));
  Tensor out(std::move(shape), std::vector<double>(x.values().begin(), x.values().end()));
  if (should_record({&x})) {
    attach(out, "reshape", [o = out.impl(), xi = x.impl()] {
      if (!o->grad.empty()) xi->accumulate_grad(o->grad);
    });
  }
  return out;
}

namespace {

// Maps each output flat index to its source flat index under a permutation.
std::vector<std::size_t> permutation_gather(const Shape& in_shape, const std::vector<std::size_t>& axes) {
  const std::size_t rank = in_shape.size();
  std::vector<std::size_t> in_stride(rank, 1);
  for (std::size_t i = rank; i-- > 1;) in_stride[i - 1] = in_stride[i] * in_shape[i];
  Shape out_shape(rank);
  std::vector<std::size_t> src_stride(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    out_shape[i] = in_shape[axes[i]];
    src_stride[i] = in_stride[axes[i]];
  }
  const std::size_t n = shape_numel(in_shape);
  std::vector<std::size_t> gather(n);
  std::vector<std::size_t> idx(rank, 0);
  std::size_t src = 0;
  for (std::size_t flat = 0; flat < n; ++flat) {
    gather[flat] = src;
    for (std::size_t d = rank; d-- > 0;) {
      if (++idx[d] < out_shape[d]) {
        src += src_stride[d];
        break;
      }
      src -= src_stride[d] * (out_shape[d] - 1);
      idx[d] = 0;
    }
  }
  return gather;
}

}  // namespace

Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes) {
  const std::size_t rank = x.dim();
  if (axes.size() != rank) throw std::invalid_argument("permute: axis count does not match rank");
  std::vector<bool> seen(rank, false);
  for (auto a : axes) {
    if (a >= rank || seen[a]) throw std::invalid_argument("permute: axes are not a permutation");
    seen[a] = true;
  }
  Shape out_shape(rank);
  for (std::size_t i = 0; i < rank; ++i) out_shape[i] = x.size(axes[i]);
  auto gather = permutation_gather(x.shape(), axes);
  std::vector<double> out_v(x.numel());
  const double* xv = x.data();
  for (std::size_t i = 0; i < out_v.size(); ++i) out_v[i] = xv[gather[i]];
  Tensor out(std::move(out_shape), std::move(out_v));
  if (should_record({&x})) {
    attach(out, "permute", [o = out.impl(), xi = x.impl(), gather = std::move(gather)] {
      if (o->grad.empty()) return;
      auto g = xi->grad_buffer();
      for (std::size_t i = 0; i < gather.size(); ++i) g[gather[i]] += o->grad[i];
    });
  }
  return out;
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  const Shape& ref = parts.front().shape();
  if (axis >= ref.size()) throw std::invalid_argument("concat: axis out of range");
  Shape out_shape = ref;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    bool ok = p.dim() == ref.size();
    for (std::size_t i = 0; ok && i < ref.size(); ++i) ok = (i == axis) || p.size(i) == ref[i];
    if (!ok)
      throw std::invalid_argument("concat: shape mismatch " + shape_string(ref) + " vs " + shape_string(p.shape()));
    out_shape[axis] += p.size(axis);
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= ref[i];
  for (std::size_t i = axis + 1; i < ref.size(); ++i) inner *= ref[i];
  const std::size_t out_block = out_shape[axis] * inner;
  std::vector<double> out_v(shape_numel(out_shape));
  std::size_t offset = 0;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    const std::size_t block = p.size(axis) * inner;
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(p.data() + o * block, block, out_v.data() + o * out_block + offset);
    offsets.push_back(offset);
    offset += block;
  }
  Tensor out(std::move(out_shape), std::move(out_v));
  std::vector<const Tensor*> ptrs;
  bool record = false;
  for (const auto& p : parts) record = record || should_record({&p});
  if (record) {
    std::vector<ImplPtr> targets;
    std::vector<std::size_t> blocks;
    for (const auto& p : parts) {
      targets.push_back(grad_target(p));
      blocks.push_back(p.size(axis) * inner);
    }
    attach(out, "concat", [o = out.impl(), targets, blocks, offsets, outer, out_block] {
      if (o->grad.empty()) return;
      for (std::size_t k = 0; k < targets.size(); ++k) {
        if (!targets[k]) continue;
        auto g = targets[k]->grad_buffer();
        for (std::size_t ou = 0; ou < outer; ++ou) {
          const double* src = o->grad.data() + ou * out_block + offsets[k];
          double* dst = g.data() + ou * blocks[k];
          for (std::size_t i = 0; i < blocks[k]; ++i) dst[i] += src[i];
        }
      }
    });
  }
  return out;
}

Tensor add_channel_bias(const Tensor& x, const Tensor& bias) {
  if (x.dim() < 2 || bias.dim() != 1 || bias.size(0) != x.size(1))
    throw std::invalid_argument("add_channel_bias: shape mismatch " + shape_string(x.shape()) + " vs " +
                                shape_string(bias.shape()));
  const auto s = split_at(x.shape(), 1, "add_channel_bias");
  std::vector<double> out_v(x.values().begin(), x.values().end());
  for (std::size_t n = 0; n < s.outer; ++n)
    for (std::size_t c = 0; c < s.extent; ++c) {
      double* row = out_v.data() + (n * s.extent + c) * s.inner;
      for (std::size_t i = 0; i < s.inner; ++i) row[i] += bias[c];
    }
  Tensor out(x.shape(), std::move(out_v));
  if (should_record({&x, &bias})) {
    attach(out, "add_channel_bias", [o = out.impl(), gx = grad_target(x), gb = grad_target(bias), s] {
      if (o->grad.empty()) return;
      if (gx) gx->accumulate_grad(o->grad);
      if (gb) {
        auto g = gb->grad_buffer();
        for (std::size_t n = 0; n < s.outer; ++n)
          for (std::size_t c = 0; c < s.extent; ++c) {
            const double* row = o->grad.data() + (n * s.extent + c) * s.inner;
            double acc = 0.0;
            for (std::size_t i = 0; i < s.inner; ++i) acc += row[i];
            g[c] += acc;
          }
      }
    });
  }
  return out;
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  require_finite("softmax", x);
  const auto s = split_at(x.shape(), axis, "softmax");
  std::vector<double> y(x.numel());
  const double* xv = x.data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.extent * s.inner + i;
      double m = xv[base];
      for (std::size_t c = 1; c < s.extent; ++c) m = std::max(m, xv[base + c * s.inner]);
      double z = 0.0;
      for (std::size_t c = 0; c < s.extent; ++c) {
        const double e = std::exp(xv[base + c * s.inner] - m);
        y[base + c * s.inner] = e;
        z += e;
      }
      for (std::size_t c = 0; c < s.extent; ++c) y[base + c * s.inner] /= z;
    }
  Tensor out(x.shape(), std::move(y));
  if (should_record({&x})) {
    attach(out, "softmax", [o = out.impl(), xi = x.impl(), s] {
      if (o->grad.empty()) return;
      auto g = xi->grad_buffer();
      const auto& yv = o->value;
      const auto& go = o->grad;
      for (std::size_t ou = 0; ou < s.outer; ++ou)
        for (std::size_t i = 0; i < s.inner; ++i) {
          const std::size_t base = ou * s.extent * s.inner + i;
          double dot = 0.0;
          for (std::size_t c = 0; c < s.extent; ++c) dot += go[base + c * s.inner] * yv[base + c * s.inner];
          for (std::size_t c = 0; c < s.extent; ++c) {
            const std::size_t k = base + c * s.inner;
            g[k] += yv[k] * (go[k] - dot);
          }
        }
    });
  }
  return out;
}

Tensor log_softmax(const Tensor& x, std::size_t axis) {
  require_finite("log_softmax", x);
  const auto s = split_at(x.shape(), axis, "log_softmax");
  std::vector<double> y(x.numel());
  const double* xv = x.data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.extent * s.inner + i;
      double m = xv[base];
      for (std::size_t c = 1; c < s.extent; ++c) m = std::max(m, xv[base + c * s.inner]);
      double z = 0.0;
      for (std::size_t c = 0; c < s.extent; ++c) z += std::exp(xv[base + c * s.inner] - m);
      const double lz = m + std::log(z);
      for (std::size_t c = 0; c < s.extent; ++c) y[base + c * s.inner] = xv[base + c * s.inner] - lz;
    }
  Tensor out(x.shape(), std::move(y));
  if (should_record({&x})) {
    attach(out, "log_softmax", [o = out.impl(), xi = x.impl(), s] {
      if (o->grad.empty()) return;
      auto g = xi->grad_buffer();
      const auto& yv = o->value;
      const auto& go = o->grad;
      for (std::size_t ou = 0; ou < s.outer; ++ou)
        for (std::size_t i = 0; i < s.inner; ++i) {
          const std::size_t base = ou * s.extent * s.inner + i;
          double total = 0.0;
          for (std::size_t c = 0; c < s.extent; ++c) total += go[base + c * s.inner];
          for (std::size_t c = 0; c < s.extent; ++c) {
            const std::size_t k = base + c * s.inner;
            g[k] += go[k] - std::exp(yv[k]) * total;
          }
        }
    });
  }
  return out;
}

}  // namespace twinseg
