#pragma once

#include "twinseg/tensor.hpp"

#include <cstddef>
#include <vector>

// Differentiable tensor operations. Every op records a backward node on the
// active tape when at least one input requires grad; otherwise it is a plain
// forward computation. Reductions run in ascending index order.
namespace twinseg {

// ---- elementwise ----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, double s);
Tensor mul(const Tensor& a, double s);

Tensor relu(const Tensor& x);  // d/dx at exactly 0 is 0
Tensor gelu(const Tensor& x);  // exact erf form
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);

// ---- reductions -------------------------------------------------------------

Tensor sum(const Tensor& x);   // shape [1]
Tensor mean(const Tensor& x);  // shape [1]
/// Sums every axis except `axis`; result has shape [x.size(axis)].
Tensor sum_to_axis(const Tensor& x, std::size_t axis);

// ---- layout -----------------------------------------------------------------

Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
/// x[N,C,...] + bias[C] broadcast over every other axis.
Tensor add_channel_bias(const Tensor& x, const Tensor& bias);

// ---- normalisation along an axis -------------------------------------------

Tensor softmax(const Tensor& x, std::size_t axis);
Tensor log_softmax(const Tensor& x, std::size_t axis);
/// Normalises over the last axis with affine gamma/beta of that extent.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

// ---- dense linear algebra ---------------------------------------------------

/// x[..., F_in] * weight[F_out, F_in]^T + bias[F_out]. bias may be undefined.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);
/// Batched product a[B,M,K] * b[B,K,N] -> [B,M,N].
Tensor bmm(const Tensor& a, const Tensor& b);

// ---- volumetric -------------------------------------------------------------

/// Cross-correlation of x[N,C_in,D,H,W] with weight[C_out,C_in,k,k,k]
/// (odd k). bias may be undefined.
Tensor conv3d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t stride = 1,
              std::size_t padding = 0);

/// Same contract as conv3d, always through im2col + GEMM. conv3d uses a
/// direct kernel for stride-1 k=1/k=3 and falls back to this otherwise.
Tensor conv3d_im2col(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t stride = 1,
                     std::size_t padding = 0);

/// Kernel-2 stride-2 transposed convolution, weight[C_in,C_out,2,2,2].
/// Output extents are exactly doubled.
Tensor conv_transpose3d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t stride = 2);

struct PoolResult {
  Tensor output;
  std::vector<std::size_t> argmax;  // flat input index per output element
};

/// 2x2x2 max pooling with stride 2; ties go to the lowest flat input index.
PoolResult maxpool3d(const Tensor& x, std::size_t window = 2, std::size_t stride = 2);

enum class NormMode { train, eval };

/// Per-channel batch normalisation of x[N,C,D,H,W]. In train mode the
/// running buffers are updated in place with the given momentum (variance
/// uses the unbiased batch estimate, normalisation the biased one).
Tensor batchnorm3d(const Tensor& x, const Tensor& gamma, const Tensor& beta, Tensor& running_mean,
                   Tensor& running_var, NormMode mode, double momentum = 0.1, double eps = 1e-5);

}  // namespace twinseg
