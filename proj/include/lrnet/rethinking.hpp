#pragma once

// Feedback heads and emphasis layers.
//
// A feedback head maps the previous iteration's class posterior p to one
// emphasis vector per sample:
//
//   pre_i = sum_j W_ij p_j + b_i                 (affine, channel-indexed bias)
//   a_i   = C * exp(pre_i) / sum_k exp(pre_k)    (scaled softmax, mean(a) == 1)
//
// and the emphasis layer multiplies channel i of the target feature maps by a_i.
// With W = 0 and b = 0 every a_i is exactly 1, so a freshly attached head
// leaves the network it augments unchanged.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>

#include "lrnet/layers.hpp"
#include "lrnet/tensor.hpp"

namespace lrnet {

/// Largest |sum(p) - 1| accepted as a posterior row. Loose enough that a
/// finite-difference probe of the posterior is still accepted.
inline constexpr double kSimplexTolerance = 1e-3;

template <typename Real>
struct FeedbackHead {
  Tensor<Real> weights;  // (channels, classes, 1, 1)
  Tensor<Real> bias;     // (1, channels, 1, 1)
  std::string target_layer;

  static FeedbackHead zeros(std::size_t channels, std::size_t classes, std::string target) {
    return {Tensor<Real>({channels, classes, 1, 1}), Tensor<Real>(rows(1, channels)),
            std::move(target)};
  }

  std::size_t channels() const { return weights.shape().n; }
  std::size_t classes() const { return weights.shape().c; }
  std::size_t parameter_count() const { return channels() * (classes() + 1); }
};

/// Everything feedback_backward needs from the matching forward call.
template <typename Real>
struct FeedbackTrace {
  Tensor<Real> posterior;  // (n, classes, 1, 1)
  Tensor<Real> pre;        // (n, channels, 1, 1), before normalization
  Tensor<Real> emphasis;   // (n, channels, 1, 1), mean 1 per row
};

template <typename Real>
struct FeedbackGrad {
  Tensor<Real> weights;
  Tensor<Real> bias;
  Tensor<Real> posterior;
};

template <typename Real>
void check_posterior(const Tensor<Real>& p, std::size_t classes) {
  const Shape& s = p.shape();
  if (s.h != 1 || s.w != 1 || s.c != classes)
    fail(ErrorKind::kShape, "feedback: posterior " + s.str() + " is not (n," +
                                std::to_string(classes) + ",1,1)");
  check_finite(p, "feedback posterior");
  for (std::size_t n = 0; n < s.n; ++n) {
    double sum = 0;
    for (Real v : p.sample(n)) {
      if (v < -kSimplexTolerance)
        fail(ErrorKind::kNumeric, "feedback: posterior row " + std::to_string(n) +
                                      " has a negative entry");
      sum += static_cast<double>(v);
    }
    if (std::abs(sum - 1.0) > kSimplexTolerance)
      fail(ErrorKind::kNumeric, "feedback: posterior row " + std::to_string(n) + " sums to " +
                                    std::to_string(sum));
  }
}

template <typename Real>
FeedbackTrace<Real> feedback_forward(const FeedbackHead<Real>& head,
                                     const Tensor<Real>& posterior) {
  check_posterior(posterior, head.classes());
  const std::size_t batch = posterior.shape().n;
  const std::size_t ch = head.channels();
  FeedbackTrace<Real> t{posterior, Tensor<Real>(rows(batch, ch)), Tensor<Real>(rows(batch, ch))};

  detail::ConstMatrixMap<Real> pm(posterior.data().data(), batch, head.classes());
  detail::ConstMatrixMap<Real> w(head.weights.data().data(), ch, head.classes());
  Eigen::Map<const Eigen::Matrix<Real, 1, Eigen::Dynamic>> b(head.bias.data().data(), ch);
  detail::MatrixMap<Real> pre(t.pre.data().data(), batch, ch);
  pre.noalias() = pm * w.transpose();
  pre.rowwise() += b;

  const Real scale = static_cast<Real>(ch);
  for (std::size_t n = 0; n < batch; ++n) {
    auto z = t.pre.sample(n);
    auto a = t.emphasis.sample(n);
    const Real m = *std::max_element(z.begin(), z.end());
    Real sum = 0;
    for (std::size_t i = 0; i < ch; ++i) {
      a[i] = std::exp(z[i] - m);
      sum += a[i];
    }
    // C * e / S, in this order, so that equal inputs give exactly 1.
    for (std::size_t i = 0; i < ch; ++i) a[i] = scale * a[i] / sum;
  }
  check_finite(t.emphasis, "feedback emphasis");
  return t;
}

/// Chain rule through the scaled softmax (da_i/dpre_k = a_i (delta_ik - a_k / C))
/// and the affine map.
template <typename Real>
FeedbackGrad<Real> feedback_backward(const FeedbackHead<Real>& head,
                                     const FeedbackTrace<Real>& trace,
                                     const Tensor<Real>& grad_emphasis) {
  const std::size_t ch = head.channels();
  const std::size_t batch = trace.emphasis.shape().n;
  if (grad_emphasis.shape() != trace.emphasis.shape() || trace.emphasis.shape().c != ch ||
      trace.posterior.shape() != rows(batch, head.classes()))
    fail(ErrorKind::kShape, "feedback_backward: grad " + grad_emphasis.shape().str() +
                                " / trace " + trace.emphasis.shape().str() +
                                " inconsistent with head " + head.weights.shape().str());

  const Real inv_c = Real(1) / static_cast<Real>(ch);
  Tensor<Real> grad_pre(rows(batch, ch));
  for (std::size_t n = 0; n < batch; ++n) {
    auto a = trace.emphasis.sample(n);
    auto g = grad_emphasis.sample(n);
    Real dot = 0;
    for (std::size_t i = 0; i < ch; ++i) dot += g[i] * a[i];
    auto out = grad_pre.sample(n);
    for (std::size_t k = 0; k < ch; ++k) out[k] = a[k] * (g[k] - dot * inv_c);
  }

  FeedbackGrad<Real> fg{Tensor<Real>(head.weights.shape()), Tensor<Real>(head.bias.shape()),
                        Tensor<Real>(trace.posterior.shape())};
  detail::ConstMatrixMap<Real> gp(grad_pre.data().data(), batch, ch);
  detail::ConstMatrixMap<Real> pm(trace.posterior.data().data(), batch, head.classes());
  detail::ConstMatrixMap<Real> w(head.weights.data().data(), ch, head.classes());
  detail::MatrixMap<Real>(fg.weights.data().data(), ch, head.classes()).noalias() =
      gp.transpose() * pm;
  Eigen::Map<Eigen::Matrix<Real, 1, Eigen::Dynamic>>(fg.bias.data().data(), ch) =
      gp.colwise().sum();
  detail::MatrixMap<Real>(fg.posterior.data().data(), batch, head.classes()).noalias() = gp * w;
  return fg;
}

template <typename Real>
Tensor<Real> emphasis_forward(const Tensor<Real>& x, const Tensor<Real>& emphasis) {
  return channel_scale(x, emphasis);
}

template <typename Real>
struct EmphasisGrad {
  Tensor<Real> input;     // upstream * a
  Tensor<Real> emphasis;  // sum over (p,q) of upstream * x
};

/// Sabotaged variants of emphasis_backward, used to prove the gradient
/// checker catches broken gradients.
enum class EmphasisGradMutation {
  kNone,
  kDropSpatialSum,  // grad_a keeps only the first pixel's contribution
};

template <typename Real>
EmphasisGrad<Real> emphasis_backward(const Tensor<Real>& x, const Tensor<Real>& emphasis,
                                     const Tensor<Real>& upstream,
                                     EmphasisGradMutation mutation = EmphasisGradMutation::kNone) {
  const Shape& s = x.shape();
  if (upstream.shape() != s || emphasis.shape() != rows(s.n, s.c))
    fail(ErrorKind::kShape, "emphasis_backward: features " + s.str() + ", upstream " +
                                upstream.shape().str() + ", emphasis " +
                                emphasis.shape().str());
  EmphasisGrad<Real> g{channel_scale(upstream, emphasis), Tensor<Real>(rows(s.n, s.c))};
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      auto u = upstream.channel(n, c);
      auto f = x.channel(n, c);
      Real acc = 0;
      if (mutation == EmphasisGradMutation::kDropSpatialSum) {
        acc = u[0] * f[0];
      } else {
        for (std::size_t i = 0; i < u.size(); ++i) acc += u[i] * f[i];
      }
      g.emphasis(n, c) = acc;
    }
  }
  return g;
}

}  // namespace lrnet
