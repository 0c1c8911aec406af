#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <vector>

#include "lrnet/tensor.hpp"

namespace lrnet {

namespace detail {

template <typename Real>
using RowMatrix = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Real>
using MatrixMap = Eigen::Map<RowMatrix<Real>>;

template <typename Real>
using ConstMatrixMap = Eigen::Map<const RowMatrix<Real>>;

inline std::size_t pooled_extent(std::size_t in, std::size_t window, std::size_t stride) {
  return (in - window) / stride + 1;
}

}  // namespace detail

/// Convolution filter bank: weights (out, in, kh, kw), bias (1, out, 1, 1).
template <typename Real>
struct ConvParams {
  Tensor<Real> weights;
  Tensor<Real> bias;
  std::size_t stride = 1;
  std::size_t padding = 0;

  std::size_t out_channels() const { return weights.shape().n; }
  std::size_t in_channels() const { return weights.shape().c; }
  std::size_t kernel_h() const { return weights.shape().h; }
  std::size_t kernel_w() const { return weights.shape().w; }

  /// Output extents for an input of shape `in`; throws if the geometry is invalid.
  Shape output_shape(const Shape& in) const {
    if (in.c != in_channels())
      fail(ErrorKind::kShape, "conv2d: input " + in.str() + " has " + std::to_string(in.c) +
                                  " channels, filters expect " + std::to_string(in_channels()));
    if (stride == 0) fail(ErrorKind::kShape, "conv2d: stride must be positive");
    const std::size_t ph = in.h + 2 * padding;
    const std::size_t pw = in.w + 2 * padding;
    if (ph < kernel_h() || pw < kernel_w())
      fail(ErrorKind::kShape, "conv2d: kernel " + std::to_string(kernel_h()) + "x" +
                                  std::to_string(kernel_w()) + " larger than padded input " +
                                  in.str());
    if ((ph - kernel_h()) % stride != 0 || (pw - kernel_w()) % stride != 0)
      fail(ErrorKind::kShape, "conv2d: stride " + std::to_string(stride) +
                                  " does not tile input " + in.str());
    return {in.n, out_channels(), (ph - kernel_h()) / stride + 1,
            (pw - kernel_w()) / stride + 1};
  }
};

/// Fully connected map: weights (out, in, 1, 1), bias (1, out, 1, 1).
template <typename Real>
struct DenseParams {
  Tensor<Real> weights;
  Tensor<Real> bias;

  std::size_t out_dim() const { return weights.shape().n; }
  std::size_t in_dim() const { return weights.shape().c; }
};

/// Gradients of one layer. Parameter slots stay empty for parameter-free layers.
template <typename Real>
struct LayerGrad {
  Tensor<Real> weights;
  Tensor<Real> bias;
  Tensor<Real> input;
};

namespace detail {

// Unfolds one sample into a (in*kh*kw) x (oh*ow) patch matrix.
template <typename Real>
void im2col(std::span<const Real> x, const Shape& in, const ConvParams<Real>& p,
            const Shape& out, std::span<Real> col) {
  const std::size_t kh = p.kernel_h(), kw = p.kernel_w();
  const std::size_t cols = out.h * out.w;
  const auto pad = static_cast<std::ptrdiff_t>(p.padding);
  for (std::size_t ci = 0; ci < in.c; ++ci) {
    for (std::size_t ky = 0; ky < kh; ++ky) {
      for (std::size_t kx = 0; kx < kw; ++kx) {
        Real* dst = col.data() + ((ci * kh + ky) * kw + kx) * cols;
        for (std::size_t oy = 0; oy < out.h; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * p.stride + ky) - pad;
          for (std::size_t ox = 0; ox < out.w; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * p.stride + kx) - pad;
            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(in.h) &&
                                ix < static_cast<std::ptrdiff_t>(in.w);
            dst[oy * out.w + ox] =
                inside ? x[(ci * in.h + static_cast<std::size_t>(iy)) * in.w +
                           static_cast<std::size_t>(ix)]
                       : Real(0);
          }
        }
      }
    }
  }
}

template <typename Real>
void col2im(std::span<const Real> col, const Shape& in, const ConvParams<Real>& p,
            const Shape& out, std::span<Real> x) {
  const std::size_t kh = p.kernel_h(), kw = p.kernel_w();
  const std::size_t cols = out.h * out.w;
  const auto pad = static_cast<std::ptrdiff_t>(p.padding);
  for (std::size_t ci = 0; ci < in.c; ++ci) {
    for (std::size_t ky = 0; ky < kh; ++ky) {
      for (std::size_t kx = 0; kx < kw; ++kx) {
        const Real* src = col.data() + ((ci * kh + ky) * kw + kx) * cols;
        for (std::size_t oy = 0; oy < out.h; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * p.stride + ky) - pad;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(in.h)) continue;
          for (std::size_t ox = 0; ox < out.w; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * p.stride + kx) - pad;
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(in.w)) continue;
            x[(ci * in.h + static_cast<std::size_t>(iy)) * in.w + static_cast<std::size_t>(ix)] +=
                src[oy * out.w + ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

/// Cross-correlation with per-output-channel bias, lowered to one GEMM per sample.
template <typename Real>
Tensor<Real> conv2d_forward(const Tensor<Real>& x, const ConvParams<Real>& p) {
  const Shape& in = x.shape();
  const Shape out = p.output_shape(in);
  const std::size_t k = in.c * p.kernel_h() * p.kernel_w();
  const std::size_t cols = out.h * out.w;

  Tensor<Real> y(out);
  AlignedVector<Real> col(k * cols);
  detail::ConstMatrixMap<Real> w(p.weights.data().data(), p.out_channels(), k);
  Eigen::Map<const Eigen::Matrix<Real, Eigen::Dynamic, 1>> b(p.bias.data().data(),
                                                            p.out_channels());
  for (std::size_t n = 0; n < in.n; ++n) {
    detail::im2col<Real>(x.sample(n), in, p, out, col);
    detail::ConstMatrixMap<Real> patches(col.data(), k, cols);
    detail::MatrixMap<Real> yn(y.sample(n).data(), out.c, cols);
    yn.noalias() = w * patches;
    yn.colwise() += b;
  }
  LRNET_DEBUG_FINITE(y, "conv2d_forward");
  return y;
}

template <typename Real>
LayerGrad<Real> conv2d_backward(const Tensor<Real>& x, const ConvParams<Real>& p,
                                const Tensor<Real>& upstream) {
  const Shape& in = x.shape();
  const Shape out = p.output_shape(in);
  if (upstream.shape() != out)
    fail(ErrorKind::kShape, "conv2d_backward: upstream " + upstream.shape().str() +
                                " does not match output " + out.str());
  const std::size_t k = in.c * p.kernel_h() * p.kernel_w();
  const std::size_t cols = out.h * out.w;

  LayerGrad<Real> g{Tensor<Real>(p.weights.shape()), Tensor<Real>(p.bias.shape()),
                    Tensor<Real>(in)};
  AlignedVector<Real> col(k * cols);
  AlignedVector<Real> dcol(k * cols);
  detail::ConstMatrixMap<Real> w(p.weights.data().data(), p.out_channels(), k);
  detail::MatrixMap<Real> dw(g.weights.data().data(), p.out_channels(), k);
  Eigen::Map<Eigen::Matrix<Real, Eigen::Dynamic, 1>> db(g.bias.data().data(), p.out_channels());

  for (std::size_t n = 0; n < in.n; ++n) {
    detail::ConstMatrixMap<Real> gn(upstream.sample(n).data(), out.c, cols);
    detail::im2col<Real>(x.sample(n), in, p, out, col);
    detail::ConstMatrixMap<Real> patches(col.data(), k, cols);
    dw.noalias() += gn * patches.transpose();
    db += gn.rowwise().sum();
    detail::MatrixMap<Real> dpatches(dcol.data(), k, cols);
    dpatches.noalias() = w.transpose() * gn;
    detail::col2im<Real>(dcol, in, p, out, g.input.sample(n));
  }
  return g;
}

/// Forward state max-pool backward needs: the flat input index of every output's maximum.
struct PoolRecord {
  Shape input;
  Shape output;
  std::vector<std::size_t> argmax;
};

template <typename Real>
struct PoolResult {
  Tensor<Real> output;
  PoolRecord record;
};

/// Ties resolve to the first maximal element in row-major window order.
template <typename Real>
PoolResult<Real> maxpool_forward(const Tensor<Real>& x, std::size_t window, std::size_t stride) {
  const Shape& in = x.shape();
  if (window == 0 || stride == 0)
    fail(ErrorKind::kShape, "maxpool: window and stride must be positive");
  if (window > in.h || window > in.w)
    fail(ErrorKind::kShape, "maxpool: window " + std::to_string(window) +
                                " larger than input " + in.str());
  const Shape out{in.n, in.c, detail::pooled_extent(in.h, window, stride),
                  detail::pooled_extent(in.w, window, stride)};
  PoolResult<Real> r{Tensor<Real>(out), PoolRecord{in, out, {}}};
  r.record.argmax.resize(out.size());

  std::size_t o = 0;
  for (std::size_t n = 0; n < in.n; ++n) {
    for (std::size_t c = 0; c < in.c; ++c) {
      const std::size_t base = (n * in.c + c) * in.plane();
      for (std::size_t oy = 0; oy < out.h; ++oy) {
        for (std::size_t ox = 0; ox < out.w; ++ox, ++o) {
          std::size_t best = base + (oy * stride) * in.w + ox * stride;
          Real best_v = x[best];
          for (std::size_t dy = 0; dy < window; ++dy) {
            for (std::size_t dx = 0; dx < window; ++dx) {
              const std::size_t idx = base + (oy * stride + dy) * in.w + ox * stride + dx;
              if (x[idx] > best_v) {
                best_v = x[idx];
                best = idx;
              }
            }
          }
          r.output[o] = best_v;
          r.record.argmax[o] = best;
        }
      }
    }
  }
  return r;
}

template <typename Real>
Tensor<Real> maxpool_backward(const PoolRecord& record, const Tensor<Real>& upstream) {
  if (upstream.shape() != record.output || record.argmax.size() != upstream.size())
    fail(ErrorKind::kShape, "maxpool_backward: upstream " + upstream.shape().str() +
                                " does not match recorded output " + record.output.str());
  Tensor<Real> g(record.input);
  for (std::size_t o = 0; o < upstream.size(); ++o) g[record.argmax[o]] += upstream[o];
  return g;
}

/// y = W x + b per sample; x is flattened over (c,h,w). Output shape (n, out, 1, 1).
template <typename Real>
Tensor<Real> dense_forward(const Tensor<Real>& x, const DenseParams<Real>& p) {
  const Shape& in = x.shape();
  if (in.sample_size() != p.in_dim())
    fail(ErrorKind::kShape, "dense: input " + in.str() + " flattens to " +
                                std::to_string(in.sample_size()) + ", weights expect " +
                                std::to_string(p.in_dim()));
  Tensor<Real> y(rows(in.n, p.out_dim()));
  detail::ConstMatrixMap<Real> xm(x.data().data(), in.n, p.in_dim());
  detail::ConstMatrixMap<Real> w(p.weights.data().data(), p.out_dim(), p.in_dim());
  Eigen::Map<const Eigen::Matrix<Real, 1, Eigen::Dynamic>> b(p.bias.data().data(), p.out_dim());
  detail::MatrixMap<Real> ym(y.data().data(), in.n, p.out_dim());
  ym.noalias() = xm * w.transpose();
  ym.rowwise() += b;
  LRNET_DEBUG_FINITE(y, "dense_forward");
  return y;
}

template <typename Real>
LayerGrad<Real> dense_backward(const Tensor<Real>& x, const DenseParams<Real>& p,
                               const Tensor<Real>& upstream) {
  const Shape& in = x.shape();
  if (in.sample_size() != p.in_dim() || upstream.shape() != rows(in.n, p.out_dim()))
    fail(ErrorKind::kShape, "dense_backward: input " + in.str() + " / upstream " +
                                upstream.shape().str() + " inconsistent with weights " +
                                p.weights.shape().str());
  LayerGrad<Real> g{Tensor<Real>(p.weights.shape()), Tensor<Real>(p.bias.shape()),
                    Tensor<Real>(in)};
  detail::ConstMatrixMap<Real> xm(x.data().data(), in.n, p.in_dim());
  detail::ConstMatrixMap<Real> w(p.weights.data().data(), p.out_dim(), p.in_dim());
  detail::ConstMatrixMap<Real> gm(upstream.data().data(), in.n, p.out_dim());
  detail::MatrixMap<Real>(g.weights.data().data(), p.out_dim(), p.in_dim()).noalias() =
      gm.transpose() * xm;
  Eigen::Map<Eigen::Matrix<Real, 1, Eigen::Dynamic>>(g.bias.data().data(), p.out_dim()) =
      gm.colwise().sum();
  detail::MatrixMap<Real>(g.input.data().data(), in.n, p.in_dim()).noalias() = gm * w;
  return g;
}

/// Leaky rectifier; slope 0 is the plain ReLU.
template <typename Real>
Tensor<Real> relu_forward(const Tensor<Real>& x, Real negative_slope) {
  Tensor<Real> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > 0 ? x[i] : negative_slope * x[i];
  return y;
}

template <typename Real>
Tensor<Real> relu_backward(const Tensor<Real>& x, const Tensor<Real>& upstream,
                           Real negative_slope) {
  if (x.shape() != upstream.shape())
    fail(ErrorKind::kShape, "relu_backward: " + x.shape().str() + " vs " +
                                upstream.shape().str());
  Tensor<Real> g(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i)
    g[i] = x[i] > 0 ? upstream[i] : negative_slope * upstream[i];
  return g;
}

/// Row-wise softmax over the channel axis of an (n, k, 1, 1) logit batch.
template <typename Real>
Tensor<Real> softmax(const Tensor<Real>& logits) {
  check_finite(logits, "softmax logits");
  const Shape& s = logits.shape();
  Tensor<Real> p(s);
  const std::size_t k = s.sample_size();
  for (std::size_t n = 0; n < s.n; ++n) {
    auto z = logits.sample(n);
    auto out = p.sample(n);
    const Real m = *std::max_element(z.begin(), z.end());
    Real sum = 0;
    for (std::size_t j = 0; j < k; ++j) {
      out[j] = std::exp(z[j] - m);
      sum += out[j];
    }
    for (std::size_t j = 0; j < k; ++j) out[j] /= sum;
  }
  return p;
}

/// Pulls a gradient w.r.t. softmax outputs back to the logits:
/// dz_j = p_j (g_j - sum_k p_k g_k).
template <typename Real>
Tensor<Real> softmax_backward(const Tensor<Real>& p, const Tensor<Real>& grad_p) {
  if (p.shape() != grad_p.shape())
    fail(ErrorKind::kShape, "softmax_backward: " + p.shape().str() + " vs " +
                                grad_p.shape().str());
  const Shape& s = p.shape();
  Tensor<Real> g(s);
  for (std::size_t n = 0; n < s.n; ++n) {
    auto pn = p.sample(n);
    auto gn = grad_p.sample(n);
    Real dot = 0;
    for (std::size_t j = 0; j < pn.size(); ++j) dot += pn[j] * gn[j];
    auto out = g.sample(n);
    for (std::size_t j = 0; j < pn.size(); ++j) out[j] = pn[j] * (gn[j] - dot);
  }
  return g;
}

template <typename Real>
struct CrossEntropy {
  Real loss = 0;
  Tensor<Real> grad_logits;
};

/// Batch-mean negative log-likelihood and its gradient w.r.t. the logits
/// that produced `p` (p - onehot, divided by the batch size).
template <typename Real>
CrossEntropy<Real> cross_entropy(const Tensor<Real>& p, std::span<const int> labels) {
  const Shape& s = p.shape();
  if (labels.size() != s.n)
    fail(ErrorKind::kShape, "cross_entropy: " + std::to_string(labels.size()) +
                                " labels for batch of " + std::to_string(s.n));
  const std::size_t k = s.sample_size();
  const Real inv_n = Real(1) / static_cast<Real>(s.n);
  CrossEntropy<Real> ce{0, Tensor<Real>(s)};
  for (std::size_t n = 0; n < s.n; ++n) {
    const int y = labels[n];
    if (y < 0 || static_cast<std::size_t>(y) >= k)
      fail(ErrorKind::kData, "cross_entropy: label " + std::to_string(y) + " outside [0," +
                                 std::to_string(k) + ")");
    const Real py = std::max(p(n, static_cast<std::size_t>(y)), std::numeric_limits<Real>::min());
    ce.loss -= std::log(py);
    auto pn = p.sample(n);
    auto gn = ce.grad_logits.sample(n);
    for (std::size_t j = 0; j < k; ++j) gn[j] = pn[j] * inv_n;
    gn[static_cast<std::size_t>(y)] -= inv_n;
  }
  ce.loss *= inv_n;
  return ce;
}

}  // namespace lrnet
