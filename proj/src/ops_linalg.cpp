#include "autograd.hpp"
#include "twinseg/ops.hpp"

#include <cmath>

namespace twinseg {

using detail::attach;
using detail::grad_target;
using detail::should_record;

namespace {
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;
}  // namespace

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  if (weight.dim() != 2 || x.dim() < 1 || x.shape().back() != weight.size(1))
    throw std::invalid_argument("linear: input " + shape_string(x.shape()) + " incompatible with weight " +
                                shape_string(weight.shape()));
  const std::size_t f_in = weight.size(1), f_out = weight.size(0);
  if (bias.defined() && (bias.dim() != 1 || bias.size(0) != f_out))
    throw std::invalid_argument("linear: bias " + shape_string(bias.shape()) + " does not match weight " +
                                shape_string(weight.shape()));
  const std::size_t rows = x.numel() / f_in;
  Shape out_shape = x.shape();
  out_shape.back() = f_out;
  Tensor out(out_shape, std::vector<double>(rows * f_out));
  {
    ConstMap X(x.data(), rows, f_in);
    ConstMap W(weight.data(), f_out, f_in);
    MutMap Y(out.data(), rows, f_out);
    Y.noalias() = X * W.transpose();
    if (bias.defined()) Y.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bias.data(), f_out);
  }
  if (should_record({&x, &weight, &bias})) {
    attach(out, "linear",
           [o = out.impl(), xi = x.impl(), wi = weight.impl(), gx = grad_target(x), gw = grad_target(weight),
            gb = grad_target(bias), rows, f_in, f_out] {
             if (o->grad.empty()) return;
             ConstMap dY(o->grad.data(), rows, f_out);
             if (gx) {
               MutMap dX(gx->grad_buffer().data(), rows, f_in);
               dX.noalias() += dY * ConstMap(wi->value.data(), f_out, f_in);
             }
             if (gw) {
               MutMap dW(gw->grad_buffer().data(), f_out, f_in);
               dW.noalias() += dY.transpose() * ConstMap(xi->value.data(), rows, f_in);
             }
             if (gb) {
               auto g = gb->grad_buffer();
               for (std::size_t r = 0; r < rows; ++r)
                 for (std::size_t c = 0; c < f_out; ++c) g[c] += o->grad[r * f_out + c];
             }
           });
  }
  return out;
}

Tensor bmm(const Tensor& a, const Tensor& b) {
  if (a.dim() != 3 || b.dim() != 3 || a.size(0) != b.size(0) || a.size(2) != b.size(1))
    throw std::invalid_argument("bmm: incompatible shapes " + shape_string(a.shape()) + " and " +
                                shape_string(b.shape()));
  const std::size_t B = a.size(0), M = a.size(1), K = a.size(2), N = b.size(2);
  Tensor out(Shape{B, M, N}, std::vector<double>(B * M * N));
  for (std::size_t i = 0; i < B; ++i) {
    MutMap C(out.data() + i * M * N, M, N);
    C.noalias() = ConstMap(a.data() + i * M * K, M, K) * ConstMap(b.data() + i * K * N, K, N);
  }
  if (should_record({&a, &b})) {
    attach(out, "bmm", [o = out.impl(), ai = a.impl(), bi = b.impl(), ga = grad_target(a), gb = grad_target(b), B, M,
                        K, N] {
      if (o->grad.empty()) return;
      for (std::size_t i = 0; i < B; ++i) {
        ConstMap dC(o->grad.data() + i * M * N, M, N);
        if (ga) {
          MutMap dA(ga->grad_buffer().data() + i * M * K, M, K);
          dA.noalias() += dC * ConstMap(bi->value.data() + i * K * N, K, N).transpose();
        }
        if (gb) {
          MutMap dB(gb->grad_buffer().data() + i * K * N, K, N);
          dB.noalias() += ConstMap(ai->value.data() + i * M * K, M, K).transpose() * dC;
        }
      }
    });
  }
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const std::size_t F = x.shape().back();
  if (gamma.shape() != Shape{F} || beta.shape() != Shape{F})
    throw std::invalid_argument("layer_norm: affine parameters must have shape [" + std::to_string(F) + "]");
  const std::size_t rows = x.numel() / F;
  std::vector<double> xhat(x.numel()), rstd(rows), y(x.numel());
  const double* xv = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv + r * F;
    double mu = 0.0;
    for (std::size_t f = 0; f < F; ++f) mu += row[f];
    mu /= static_cast<double>(F);
    double var = 0.0;
    for (std::size_t f = 0; f < F; ++f) var += (row[f] - mu) * (row[f] - mu);
    var /= static_cast<double>(F);
    rstd[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t f = 0; f < F; ++f) {
      xhat[r * F + f] = (row[f] - mu) * rstd[r];
      y[r * F + f] = gamma[f] * xhat[r * F + f] + beta[f];
    }
  }
  Tensor out(x.shape(), std::move(y));
  if (should_record({&x, &gamma, &beta})) {
    attach(out, "layer_norm",
           [o = out.impl(), gi = gamma.impl(), gx = grad_target(x), gg = grad_target(gamma), gbeta = grad_target(beta),
            xhat = std::move(xhat), rstd = std::move(rstd), rows, F] {
             if (o->grad.empty()) return;
             const auto& dy = o->grad;
             if (gg) {
               auto g = gg->grad_buffer();
               for (std::size_t r = 0; r < rows; ++r)
                 for (std::size_t f = 0; f < F; ++f) g[f] += dy[r * F + f] * xhat[r * F + f];
             }
             if (gbeta) {
               auto g = gbeta->grad_buffer();
               for (std::size_t r = 0; r < rows; ++r)
                 for (std::size_t f = 0; f < F; ++f) g[f] += dy[r * F + f];
             }
             if (gx) {
               auto g = gx->grad_buffer();
               const double inv_f = 1.0 / static_cast<double>(F);
               for (std::size_t r = 0; r < rows; ++r) {
                 double s1 = 0.0, s2 = 0.0;
                 for (std::size_t f = 0; f < F; ++f) {
                   const double dxh = dy[r * F + f] * gi->value[f];
                   s1 += dxh;
                   s2 += dxh * xhat[r * F + f];
                 }
                 for (std::size_t f = 0; f < F; ++f) {
                   const double dxh = dy[r * F + f] * gi->value[f];
                   g[r * F + f] += rstd[r] * (dxh - inv_f * s1 - xhat[r * F + f] * inv_f * s2);
                 }
               }
             }
           });
  }
  return out;
}

}  // namespace twinseg
