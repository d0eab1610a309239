#include "autograd.hpp"
#include "twinseg/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace twinseg {

using detail::attach;
using detail::grad_target;
using detail::should_record;

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

// Upper bound on im2col tile size, in doubles.
constexpr std::size_t kTileBudget = std::size_t{1} << 19;

struct ConvGeom {
  std::size_t n, cin, d, h, w;
  std::size_t cout, k, stride, pad;
  std::size_t dp, hp, wp;  // padded input extents
  std::size_t od, oh, ow;  // output extents

  std::size_t in_volume() const { return d * h * w; }
  std::size_t padded_volume() const { return dp * hp * wp; }
  std::size_t out_volume() const { return od * oh * ow; }
  std::size_t kdim() const { return cin * k * k * k; }
  std::size_t lines() const { return od * oh; }
  std::size_t tile_lines() const { return std::max<std::size_t>(1, kTileBudget / (kdim() * ow)); }
};

std::size_t output_extent(std::size_t ext, std::size_t k, std::size_t stride, std::size_t pad, const char* axis) {
  const std::size_t span = ext + 2 * pad;
  if (span < k || (span - k) % stride != 0)
    throw std::invalid_argument(std::string("conv3d: non-integer output extent along ") + axis + " (extent " +
                                std::to_string(ext) + ", kernel " + std::to_string(k) + ", stride " +
                                std::to_string(stride) + ", padding " + std::to_string(pad) + ")");
  return (span - k) / stride + 1;
}

void pad_sample(const double* src, const ConvGeom& g, std::vector<double>& padded) {
  padded.assign(g.cin * g.padded_volume(), 0.0);
  for (std::size_t c = 0; c < g.cin; ++c)
    for (std::size_t z = 0; z < g.d; ++z)
      for (std::size_t y = 0; y < g.h; ++y) {
        const double* s = src + ((c * g.d + z) * g.h + y) * g.w;
        double* t = padded.data() + ((c * g.dp + z + g.pad) * g.hp + y + g.pad) * g.wp + g.pad;
        std::copy_n(s, g.w, t);
      }
}

// cols(r, j) for r = (ci,kd,kh,kw) and j spanning output lines [line0, line0+nlines).
void im2col(const double* padded, const ConvGeom& g, std::size_t line0, std::size_t nlines, RowMat& cols) {
  const std::size_t k = g.k, s = g.stride;
  cols.resize(static_cast<Eigen::Index>(g.kdim()), static_cast<Eigen::Index>(nlines * g.ow));
  std::size_t r = 0;
  for (std::size_t c = 0; c < g.cin; ++c)
    for (std::size_t kd = 0; kd < k; ++kd)
      for (std::size_t kh = 0; kh < k; ++kh)
        for (std::size_t kw = 0; kw < k; ++kw, ++r) {
          double* dst = cols.data() + r * cols.cols();
          for (std::size_t l = 0; l < nlines; ++l) {
            const std::size_t line = line0 + l, z = line / g.oh, y = line % g.oh;
            const double* src = padded + ((c * g.dp + z * s + kd) * g.hp + y * s + kh) * g.wp + kw;
            double* out = dst + l * g.ow;
            if (s == 1) {
              std::copy_n(src, g.ow, out);
            } else {
              for (std::size_t x = 0; x < g.ow; ++x) out[x] = src[x * s];
            }
          }
        }
}

void col2im_add(const RowMat& cols, const ConvGeom& g, std::size_t line0, std::size_t nlines, double* padded) {
  const std::size_t k = g.k, s = g.stride;
  std::size_t r = 0;
  for (std::size_t c = 0; c < g.cin; ++c)
    for (std::size_t kd = 0; kd < k; ++kd)
      for (std::size_t kh = 0; kh < k; ++kh)
        for (std::size_t kw = 0; kw < k; ++kw, ++r) {
          const double* src = cols.data() + r * cols.cols();
          for (std::size_t l = 0; l < nlines; ++l) {
            const std::size_t line = line0 + l, z = line / g.oh, y = line % g.oh;
            double* dst = padded + ((c * g.dp + z * s + kd) * g.hp + y * s + kh) * g.wp + kw;
            const double* in = src + l * g.ow;
            for (std::size_t x = 0; x < g.ow; ++x) dst[x * s] += in[x];
          }
        }
}


// ---- direct stride-1 kernels (k = 1 or 3) ---------------------------------
//
// Input samples are zero-padded into rows of `wpa` doubles so that every
// 16-wide vector read stays inside its row. Weights are rearranged so the
// output-channel index is innermost (and padded to a multiple of 8).

typedef double v8 __attribute__((vector_size(64)));

inline v8 loadu(const double* p) {
  v8 v;
  std::memcpy(&v, p, sizeof v);
  return v;
}

constexpr std::size_t round_up(std::size_t v, std::size_t m) { return (v + m - 1) / m * m; }

struct DirectGeom {
  std::size_t cin, cout, coutp;  // coutp: cout rounded up to 8
  std::size_t dp, hp, wpa;       // padded input (row stride wpa)
  std::size_t od, oh, ow;
};

// out[co][z][y][x] (+)= sum_{ci,taps} w[ci][kd][kh][kw][co] * xp[ci][z+kd][y+kh][x+kw]
template <std::size_t K>
void direct_forward(const double* xp, const double* wr, const DirectGeom& g, double* out, bool accumulate) {
  alignas(64) double tmp[8][16];
  for (std::size_t co0 = 0; co0 < g.coutp; co0 += 8)
    for (std::size_t z = 0; z < g.od; ++z)
      for (std::size_t y = 0; y < g.oh; ++y)
        for (std::size_t x0 = 0; x0 < g.ow; x0 += 16) {
          v8 acc[8][2];
          for (auto& a : acc) a[0] = a[1] = v8{};
          for (std::size_t ci = 0; ci < g.cin; ++ci)
            for (std::size_t kd = 0; kd < K; ++kd)
              for (std::size_t kh = 0; kh < K; ++kh) {
                const double* row = xp + ((ci * g.dp + z + kd) * g.hp + y + kh) * g.wpa + x0;
                const double* wt = wr + ((ci * K + kd) * K + kh) * K * g.coutp + co0;
#pragma GCC unroll 3
                for (std::size_t kw = 0; kw < K; ++kw) {
                  const v8 a0 = loadu(row + kw), a1 = loadu(row + kw + 8);
                  const double* w8 = wt + kw * g.coutp;
#pragma GCC unroll 8
                  for (std::size_t c = 0; c < 8; ++c) {
                    acc[c][0] += w8[c] * a0;
                    acc[c][1] += w8[c] * a1;
                  }
                }
              }
          const std::size_t nx = std::min<std::size_t>(16, g.ow - x0);
          for (std::size_t c = 0; c < 8 && co0 + c < g.cout; ++c) {
            std::memcpy(tmp[c], &acc[c][0], sizeof(v8));
            std::memcpy(tmp[c] + 8, &acc[c][1], sizeof(v8));
            double* dst = out + (((co0 + c) * g.od + z) * g.oh + y) * g.ow + x0;
            if (accumulate) {
              for (std::size_t i = 0; i < nx; ++i) dst[i] += tmp[c][i];
            } else {
              std::copy_n(tmp[c], nx, dst);
            }
          }
        }
}

// dw[co][ci][kd][kh][kw] += sum_{z,y,x} gy[co][z][y][x] * xp[ci][z+kd][y+kh][x+kw]
// gy rows are zero-padded to `owa` (multiple of 8).
template <std::size_t K>
void direct_weight_grad(const double* xp, const double* gy, std::size_t owa, const DirectGeom& g, double* dw) {
  const std::size_t plane = g.od * g.oh * owa;
  for (std::size_t co0 = 0; co0 < g.coutp; co0 += 8)
    for (std::size_t ci = 0; ci < g.cin; ++ci)
      for (std::size_t kd = 0; kd < K; ++kd)
        for (std::size_t kh = 0; kh < K; ++kh) {
          v8 acc[8][K];
          for (auto& a : acc)
            for (auto& v : a) v = v8{};
          for (std::size_t z = 0; z < g.od; ++z)
            for (std::size_t y = 0; y < g.oh; ++y) {
              const double* xr = xp + ((ci * g.dp + z + kd) * g.hp + y + kh) * g.wpa;
              const double* gr = gy + co0 * plane + (z * g.oh + y) * owa;
              for (std::size_t x0 = 0; x0 < owa; x0 += 8) {
                v8 xv[K];
#pragma GCC unroll 3
                for (std::size_t kw = 0; kw < K; ++kw) xv[kw] = loadu(xr + x0 + kw);
#pragma GCC unroll 8
                for (std::size_t c = 0; c < 8; ++c) {
                  const v8 d = loadu(gr + c * plane + x0);
#pragma GCC unroll 3
                  for (std::size_t kw = 0; kw < K; ++kw) acc[c][kw] += d * xv[kw];
                }
              }
            }
          for (std::size_t c = 0; c < 8 && co0 + c < g.cout; ++c)
            for (std::size_t kw = 0; kw < K; ++kw) {
              double s = 0.0;
              for (std::size_t i = 0; i < 8; ++i) s += acc[c][kw][i];
              dw[((((co0 + c) * g.cin + ci) * K + kd) * K + kh) * K + kw] += s;
            }
        }
}

// Copies src[c][d][h][w] into a zero-padded [c][d+2p][h+2p][wpa] buffer.
void pad_rows(const double* src, std::size_t c, std::size_t d, std::size_t h, std::size_t w, std::size_t p,
              std::size_t wpa, std::vector<double>& dst) {
  const std::size_t dp = d + 2 * p, hp = h + 2 * p;
  dst.assign(c * dp * hp * wpa, 0.0);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t z = 0; z < d; ++z)
      for (std::size_t y = 0; y < h; ++y)
        std::copy_n(src + ((ch * d + z) * h + y) * w, w, dst.data() + ((ch * dp + z + p) * hp + y + p) * wpa + p);
}

// w[co][ci][k^3] -> wr[ci][k^3][co_padded]; with `flip`, produces the
// spatially flipped, channel-transposed kernel used for the input gradient.
std::vector<double> rearrange_weights(const double* w, std::size_t cout, std::size_t cin, std::size_t k, bool flip) {
  const std::size_t k3 = k * k * k;
  const std::size_t in_ch = flip ? cout : cin, out_ch = flip ? cin : cout;
  const std::size_t outp = round_up(out_ch, 8);
  std::vector<double> wr(in_ch * k3 * outp, 0.0);
  for (std::size_t co = 0; co < cout; ++co)
    for (std::size_t ci = 0; ci < cin; ++ci)
      for (std::size_t t = 0; t < k3; ++t) {
        const double v = w[(co * cin + ci) * k3 + t];
        if (flip)
          wr[(co * k3 + (k3 - 1 - t)) * outp + ci] = v;
        else
          wr[(ci * k3 + t) * outp + co] = v;
      }
  return wr;
}

template <std::size_t K>
Tensor conv3d_direct(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t padding) {
  const std::size_t N = x.size(0), cin = x.size(1), D = x.size(2), H = x.size(3), W = x.size(4);
  const std::size_t cout = weight.size(0);
  DirectGeom g{};
  g.cin = cin;
  g.cout = cout;
  g.coutp = round_up(cout, 8);
  g.od = output_extent(D, K, 1, padding, "depth");
  g.oh = output_extent(H, K, 1, padding, "height");
  g.ow = output_extent(W, K, 1, padding, "width");
  g.dp = D + 2 * padding;
  g.hp = H + 2 * padding;
  g.wpa = round_up(g.ow, 16) + K - 1;
  const std::size_t in_vol = D * H * W, out_vol = g.od * g.oh * g.ow;

  Tensor out(Shape{N, cout, g.od, g.oh, g.ow}, std::vector<double>(N * cout * out_vol));
  const auto wr = rearrange_weights(weight.data(), cout, cin, K, false);
  std::vector<double> xp;
  for (std::size_t n = 0; n < N; ++n) {
    pad_rows(x.data() + n * cin * in_vol, cin, D, H, W, padding, g.wpa, xp);
    double* y = out.data() + n * cout * out_vol;
    direct_forward<K>(xp.data(), wr.data(), g, y, false);
    if (bias.defined())
      for (std::size_t co = 0; co < cout; ++co)
        for (std::size_t i = 0; i < out_vol; ++i) y[co * out_vol + i] += bias[co];
  }

  if (should_record({&x, &weight, &bias})) {
    attach(out, "conv3d",
           [o = out.impl(), xi = x.impl(), wi = weight.impl(), gx = grad_target(x), gw = grad_target(weight),
            gb = grad_target(bias), g, N, D, H, W, padding, in_vol, out_vol] {
             if (o->grad.empty()) return;
             std::vector<double> buf, gpad;
             if (gw) {
               const std::size_t owa = round_up(g.ow, 8);
               double* dw = gw->grad_buffer().data();
               for (std::size_t n = 0; n < N; ++n) {
                 pad_rows(xi->value.data() + n * g.cin * in_vol, g.cin, D, H, W, padding, g.wpa, buf);
                 // gradient rows widened to owa, channels to coutp
                 gpad.assign(g.coutp * g.od * g.oh * owa, 0.0);
                 const double* gy = o->grad.data() + n * g.cout * out_vol;
                 for (std::size_t r = 0; r < g.cout * g.od * g.oh; ++r)
                   std::copy_n(gy + r * g.ow, g.ow, gpad.data() + r * owa);
                 direct_weight_grad<K>(buf.data(), gpad.data(), owa, g, dw);
               }
             }
             if (gx) {
               // input gradient = stride-1 correlation of the output gradient,
               // padded by K-1-padding, with the flipped transposed kernel
               const std::size_t q = K - 1 - padding;
               DirectGeom b{};
               b.cin = g.cout;
               b.cout = g.cin;
               b.coutp = round_up(g.cin, 8);
               b.od = D;
               b.oh = H;
               b.ow = W;
               b.dp = g.od + 2 * q;
               b.hp = g.oh + 2 * q;
               b.wpa = round_up(W, 16) + K - 1;
               const auto wf = rearrange_weights(wi->value.data(), g.cout, g.cin, K, true);
               double* dx = gx->grad_buffer().data();
               for (std::size_t n = 0; n < N; ++n) {
                 pad_rows(o->grad.data() + n * g.cout * out_vol, g.cout, g.od, g.oh, g.ow, q, b.wpa, buf);
                 direct_forward<K>(buf.data(), wf.data(), b, dx + n * g.cin * in_vol, true);
               }
             }
             if (gb) {
               auto gbias = gb->grad_buffer();
               for (std::size_t n = 0; n < N; ++n)
                 for (std::size_t co = 0; co < g.cout; ++co) {
                   const double* row = o->grad.data() + (n * g.cout + co) * out_vol;
                   double acc = 0.0;
                   for (std::size_t i = 0; i < out_vol; ++i) acc += row[i];
                   gbias[co] += acc;
                 }
             }
           });
  }
  return out;
}

Tensor conv_transpose_5d(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  const std::size_t N = x.size(0), cin = x.size(1), D = x.size(2), H = x.size(3), W = x.size(4);
  const std::size_t cout = weight.size(1);
  const std::size_t P = D * H * W, Q = 8 * P;
  const std::size_t ck = cout * 8;
  Tensor out(Shape{N, cout, 2 * D, 2 * H, 2 * W}, std::vector<double>(N * cout * Q));
  ConstMap Wm(weight.data(), cin, ck);
  RowMat Z(ck, P);
  auto scatter = [&](std::size_t n, const RowMat& z, double* y) {
    for (std::size_t co = 0; co < cout; ++co) {
      const double b = bias.defined() ? bias[co] : 0.0;
      double* yc = y + (n * cout + co) * Q;
      for (std::size_t a = 0; a < 2; ++a)
        for (std::size_t bb = 0; bb < 2; ++bb)
          for (std::size_t c = 0; c < 2; ++c) {
            const double* zr = z.data() + (co * 8 + a * 4 + bb * 2 + c) * P;
            for (std::size_t i = 0; i < D; ++i)
              for (std::size_t j = 0; j < H; ++j) {
                double* row = yc + ((2 * i + a) * 2 * H + 2 * j + bb) * 2 * W + c;
                const double* zz = zr + (i * H + j) * W;
                for (std::size_t l = 0; l < W; ++l) row[2 * l] = zz[l] + b;
              }
          }
    }
  };
  for (std::size_t n = 0; n < N; ++n) {
    Z.noalias() = Wm.transpose() * ConstMap(x.data() + n * cin * P, cin, P);
    scatter(n, Z, out.data());
  }
  if (should_record({&x, &weight, &bias})) {
    attach(out, "conv_transpose3d",
           [o = out.impl(), xi = x.impl(), wi = weight.impl(), gx = grad_target(x), gw = grad_target(weight),
            gb = grad_target(bias), N, cin, cout, D, H, W, P, Q, ck] {
             if (o->grad.empty()) return;
             RowMat dZ(ck, P);
             ConstMap Wm(wi->value.data(), cin, ck);
             for (std::size_t n = 0; n < N; ++n) {
               for (std::size_t co = 0; co < cout; ++co) {
                 const double* dyc = o->grad.data() + (n * cout + co) * Q;
                 for (std::size_t a = 0; a < 2; ++a)
                   for (std::size_t bb = 0; bb < 2; ++bb)
                     for (std::size_t c = 0; c < 2; ++c) {
                       double* zr = dZ.data() + (co * 8 + a * 4 + bb * 2 + c) * P;
                       for (std::size_t i = 0; i < D; ++i)
                         for (std::size_t j = 0; j < H; ++j) {
                           const double* row = dyc + ((2 * i + a) * 2 * H + 2 * j + bb) * 2 * W + c;
                           double* zz = zr + (i * H + j) * W;
                           for (std::size_t l = 0; l < W; ++l) zz[l] = row[2 * l];
                         }
                     }
               }
               if (gx) {
                 MutMap dX(gx->grad_buffer().data() + n * cin * P, cin, P);
                 dX.noalias() += Wm * dZ;
               }
               if (gw) {
                 MutMap dW(gw->grad_buffer().data(), cin, ck);
                 dW.noalias() += ConstMap(xi->value.data() + n * cin * P, cin, P) * dZ.transpose();
               }
             }
             if (gb) {
               auto g = gb->grad_buffer();
               for (std::size_t n = 0; n < N; ++n)
                 for (std::size_t co = 0; co < cout; ++co) {
                   const double* dyc = o->grad.data() + (n * cout + co) * Q;
                   double acc = 0.0;
                   for (std::size_t i = 0; i < Q; ++i) acc += dyc[i];
                   g[co] += acc;
                 }
             }
           });
  }
  return out;
}

}  // namespace

namespace {

void check_conv_args(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t stride) {
  if (x.dim() != 5) throw std::invalid_argument("conv3d: input must be [N,C,D,H,W], got " + shape_string(x.shape()));
  if (weight.dim() != 5 || weight.size(1) != x.size(1) || weight.size(2) != weight.size(3) ||
      weight.size(2) != weight.size(4))
    throw std::invalid_argument("conv3d: weight " + shape_string(weight.shape()) + " incompatible with input " +
                                shape_string(x.shape()));
  if (weight.size(2) % 2 == 0) throw std::invalid_argument("conv3d: kernel extent must be odd");
  if (stride == 0) throw std::invalid_argument("conv3d: stride must be positive");
  if (bias.defined() && bias.shape() != Shape{weight.size(0)})
    throw std::invalid_argument("conv3d: bias " + shape_string(bias.shape()) + " does not match output channels");
}

}  // namespace

Tensor conv3d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t stride, std::size_t padding) {
  check_conv_args(x, weight, bias, stride);
  if (stride == 1 && padding < weight.size(2)) {
    if (weight.size(2) == 3) return conv3d_direct<3>(x, weight, bias, padding);
    if (weight.size(2) == 1) return conv3d_direct<1>(x, weight, bias, padding);
  }
  return conv3d_im2col(x, weight, bias, stride, padding);
}

Tensor conv3d_im2col(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t stride,
                     std::size_t padding) {
  check_conv_args(x, weight, bias, stride);
  ConvGeom g{};
  g.n = x.size(0);
  g.cin = x.size(1);
  g.d = x.size(2);
  g.h = x.size(3);
  g.w = x.size(4);
  g.cout = weight.size(0);
  g.k = weight.size(2);
  g.stride = stride;
  g.pad = padding;
  g.od = output_extent(g.d, g.k, stride, padding, "depth");
  g.oh = output_extent(g.h, g.k, stride, padding, "height");
  g.ow = output_extent(g.w, g.k, stride, padding, "width");
  g.dp = g.d + 2 * padding;
  g.hp = g.h + 2 * padding;
  g.wp = g.w + 2 * padding;

  Tensor out(Shape{g.n, g.cout, g.od, g.oh, g.ow}, std::vector<double>(g.n * g.cout * g.out_volume()));
  ConstMap Wm(weight.data(), g.cout, g.kdim());
  std::vector<double> padded;
  RowMat cols;
  const std::size_t tl = g.tile_lines();
  for (std::size_t n = 0; n < g.n; ++n) {
    pad_sample(x.data() + n * g.cin * g.in_volume(), g, padded);
    MutMap Y(out.data() + n * g.cout * g.out_volume(), g.cout, g.out_volume());
    for (std::size_t l0 = 0; l0 < g.lines(); l0 += tl) {
      const std::size_t nl = std::min(tl, g.lines() - l0);
      im2col(padded.data(), g, l0, nl, cols);
      Y.middleCols(l0 * g.ow, nl * g.ow).noalias() = Wm * cols;
    }
    if (bias.defined())
      for (std::size_t co = 0; co < g.cout; ++co) Y.row(co).array() += bias[co];
  }

  if (should_record({&x, &weight, &bias})) {
    attach(out, "conv3d",
           [o = out.impl(), xi = x.impl(), wi = weight.impl(), gx = grad_target(x), gw = grad_target(weight),
            gb = grad_target(bias), g] {
             if (o->grad.empty()) return;
             ConstMap Wm(wi->value.data(), g.cout, g.kdim());
             std::vector<double> padded, padded_grad;
             RowMat cols, dcols;
             const std::size_t tl = g.tile_lines();
             for (std::size_t n = 0; n < g.n; ++n) {
               ConstMap dY(o->grad.data() + n * g.cout * g.out_volume(), g.cout, g.out_volume());
               pad_sample(xi->value.data() + n * g.cin * g.in_volume(), g, padded);
               if (gx) padded_grad.assign(g.cin * g.padded_volume(), 0.0);
               for (std::size_t l0 = 0; l0 < g.lines(); l0 += tl) {
                 const std::size_t nl = std::min(tl, g.lines() - l0);
                 const auto dy_tile = dY.middleCols(l0 * g.ow, nl * g.ow);
                 if (gw) {
                   im2col(padded.data(), g, l0, nl, cols);
                   MutMap dW(gw->grad_buffer().data(), g.cout, g.kdim());
                   dW.noalias() += dy_tile * cols.transpose();
                 }
                 if (gx) {
                   dcols.noalias() = Wm.transpose() * dy_tile;
                   col2im_add(dcols, g, l0, nl, padded_grad.data());
                 }
               }
               if (gx) {
                 double* dx = gx->grad_buffer().data() + n * g.cin * g.in_volume();
                 for (std::size_t c = 0; c < g.cin; ++c)
                   for (std::size_t z = 0; z < g.d; ++z)
                     for (std::size_t y = 0; y < g.h; ++y) {
                       const double* s =
                           padded_grad.data() + ((c * g.dp + z + g.pad) * g.hp + y + g.pad) * g.wp + g.pad;
                       double* t = dx + ((c * g.d + z) * g.h + y) * g.w;
                       for (std::size_t xx = 0; xx < g.w; ++xx) t[xx] += s[xx];
                     }
               }
               if (gb) {
                 auto gbias = gb->grad_buffer();
                 for (std::size_t co = 0; co < g.cout; ++co) {
                   const double* row = o->grad.data() + (n * g.cout + co) * g.out_volume();
                   double acc = 0.0;
                   for (std::size_t i = 0; i < g.out_volume(); ++i) acc += row[i];
                   gbias[co] += acc;
                 }
               }
             }
           });
  }
  return out;
}

Tensor conv_transpose3d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t stride) {
  if (x.dim() != 4 && x.dim() != 5)
    throw std::invalid_argument("conv_transpose3d: input must be 4-D or 5-D, got " + shape_string(x.shape()));
  if (stride != 2) throw std::invalid_argument("conv_transpose3d: only stride 2 is supported");
  const std::size_t cin = x.size(x.dim() - 4);
  if (weight.dim() != 5 || weight.size(0) != cin || weight.size(2) != 2 || weight.size(3) != 2 || weight.size(4) != 2)
    throw std::invalid_argument("conv_transpose3d: weight " + shape_string(weight.shape()) +
                                " must be [C_in,C_out,2,2,2] for input " + shape_string(x.shape()));
  if (bias.defined() && bias.shape() != Shape{weight.size(1)})
    throw std::invalid_argument("conv_transpose3d: bias does not match output channels");
  if (x.dim() == 5) return conv_transpose_5d(x, weight, bias);
  Shape batched{1, x.size(0), x.size(1), x.size(2), x.size(3)};
  Tensor y = conv_transpose_5d(reshape(x, batched), weight, bias);
  return reshape(y, Shape{y.size(1), y.size(2), y.size(3), y.size(4)});
}

PoolResult maxpool3d(const Tensor& x, std::size_t window, std::size_t stride) {
  if (window != 2 || stride != 2) throw std::invalid_argument("maxpool3d: only window 2, stride 2 is supported");
  if (x.dim() != 5) throw std::invalid_argument("maxpool3d: input must be [N,C,D,H,W], got " + shape_string(x.shape()));
  const std::size_t NC = x.size(0) * x.size(1), D = x.size(2), H = x.size(3), W = x.size(4);
  if (D % 2 || H % 2 || W % 2)
    throw std::invalid_argument("maxpool3d: spatial extents must be even, got " + shape_string(x.shape()));
  const std::size_t od = D / 2, oh = H / 2, ow = W / 2;
  PoolResult res;
  std::vector<double> out_v(NC * od * oh * ow);
  res.argmax.resize(out_v.size());
  const double* xv = x.data();
  std::size_t k = 0;
  for (std::size_t c = 0; c < NC; ++c)
    for (std::size_t i = 0; i < od; ++i)
      for (std::size_t j = 0; j < oh; ++j)
        for (std::size_t l = 0; l < ow; ++l, ++k) {
          std::size_t best = ((c * D + 2 * i) * H + 2 * j) * W + 2 * l;
          // window visited in ascending flat-index order; strict > keeps the first maximum
          for (std::size_t a = 0; a < 2; ++a)
            for (std::size_t b = 0; b < 2; ++b)
              for (std::size_t e = 0; e < 2; ++e) {
                const std::size_t idx = ((c * D + 2 * i + a) * H + 2 * j + b) * W + 2 * l + e;
                if (xv[idx] > xv[best]) best = idx;
              }
          res.argmax[k] = best;
          out_v[k] = xv[best];
        }
  res.output = Tensor(Shape{x.size(0), x.size(1), od, oh, ow}, std::move(out_v));
  if (should_record({&x})) {
    attach(res.output, "maxpool3d", [o = res.output.impl(), xi = x.impl(), arg = res.argmax] {
      if (o->grad.empty()) return;
      auto g = xi->grad_buffer();
      for (std::size_t i = 0; i < arg.size(); ++i) g[arg[i]] += o->grad[i];
    });
  }
  return res;
}

Tensor batchnorm3d(const Tensor& x, const Tensor& gamma, const Tensor& beta, Tensor& running_mean,
                   Tensor& running_var, NormMode mode, double momentum, double eps) {
  if (x.dim() != 5) throw std::invalid_argument("batchnorm3d: input must be [N,C,D,H,W], got " + shape_string(x.shape()));
  const std::size_t N = x.size(0), C = x.size(1), V = x.size(2) * x.size(3) * x.size(4);
  const Shape cs{C};
  if (gamma.shape() != cs || beta.shape() != cs || running_mean.shape() != cs || running_var.shape() != cs)
    throw std::invalid_argument("batchnorm3d: per-channel tensors must have shape [" + std::to_string(C) + "]");
  const std::size_t M = N * V;
  if (mode == NormMode::train && M < 2)
    throw std::invalid_argument("batchnorm3d: train mode needs at least 2 elements per channel");

  std::vector<double> mu(C), rstd(C);
  const double* xv = x.data();
  if (mode == NormMode::train) {
    for (std::size_t c = 0; c < C; ++c) {
      double s = 0.0;
      for (std::size_t n = 0; n < N; ++n) {
        const double* p = xv + (n * C + c) * V;
        for (std::size_t i = 0; i < V; ++i) s += p[i];
      }
      mu[c] = s / static_cast<double>(M);
      double ss = 0.0;
      for (std::size_t n = 0; n < N; ++n) {
        const double* p = xv + (n * C + c) * V;
        for (std::size_t i = 0; i < V; ++i) ss += (p[i] - mu[c]) * (p[i] - mu[c]);
      }
      const double var = ss / static_cast<double>(M);
      rstd[c] = 1.0 / std::sqrt(var + eps);
      auto rm = running_mean.mutable_values();
      auto rv = running_var.mutable_values();
      rm[c] = (1.0 - momentum) * rm[c] + momentum * mu[c];
      rv[c] = (1.0 - momentum) * rv[c] + momentum * ss / static_cast<double>(M - 1);
    }
  } else {
    for (std::size_t c = 0; c < C; ++c) {
      mu[c] = running_mean[c];
      rstd[c] = 1.0 / std::sqrt(running_var[c] + eps);
    }
  }

  std::vector<double> xhat(x.numel()), y(x.numel());
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t off = (n * C + c) * V;
      for (std::size_t i = 0; i < V; ++i) {
        xhat[off + i] = (xv[off + i] - mu[c]) * rstd[c];
        y[off + i] = gamma[c] * xhat[off + i] + beta[c];
      }
    }
  Tensor out(x.shape(), std::move(y));
  if (should_record({&x, &gamma, &beta})) {
    attach(out, "batchnorm3d",
           [o = out.impl(), gi = gamma.impl(), gx = grad_target(x), gg = grad_target(gamma), gb = grad_target(beta),
            xhat = std::move(xhat), rstd = std::move(rstd), N, C, V, M, train = mode == NormMode::train] {
             if (o->grad.empty()) return;
             const auto& dy = o->grad;
             std::vector<double> sum_dy(C, 0.0), sum_dy_xhat(C, 0.0);
             for (std::size_t n = 0; n < N; ++n)
               for (std::size_t c = 0; c < C; ++c) {
                 const std::size_t off = (n * C + c) * V;
                 double a = 0.0, b = 0.0;
                 for (std::size_t i = 0; i < V; ++i) {
                   a += dy[off + i];
                   b += dy[off + i] * xhat[off + i];
                 }
                 sum_dy[c] += a;
                 sum_dy_xhat[c] += b;
               }
             if (gg) {
               auto g = gg->grad_buffer();
               for (std::size_t c = 0; c < C; ++c) g[c] += sum_dy_xhat[c];
             }
             if (gb) {
               auto g = gb->grad_buffer();
               for (std::size_t c = 0; c < C; ++c) g[c] += sum_dy[c];
             }
             if (gx) {
               auto g = gx->grad_buffer();
               const double inv_m = 1.0 / static_cast<double>(M);
               for (std::size_t n = 0; n < N; ++n)
                 for (std::size_t c = 0; c < C; ++c) {
                   const std::size_t off = (n * C + c) * V;
                   const double scale = gi->value[c] * rstd[c];
                   if (train) {
                     const double m1 = sum_dy[c] * inv_m, m2 = sum_dy_xhat[c] * inv_m;
                     for (std::size_t i = 0; i < V; ++i) g[off + i] += scale * (dy[off + i] - m1 - xhat[off + i] * m2);
                   } else {
                     for (std::size_t i = 0; i < V; ++i) g[off + i] += scale * dy[off + i];
                   }
                 }
             }
           });
  }
  return out;
}

}  // namespace twinseg
