#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <new>
#include <span>
#include <string>
#include <vector>

#include "lrnet/error.hpp"

// Define LRNET_CHECK_EVERY_OP to police NaN/Inf after every bulk operation.
// By default the check only runs where tensors cross module boundaries.
#ifdef LRNET_CHECK_EVERY_OP
#define LRNET_DEBUG_FINITE(t, where) ::lrnet::check_finite((t), (where))
#else
#define LRNET_DEBUG_FINITE(t, where) ((void)0)
#endif

namespace lrnet {

/// Over-aligned storage so that vectorized kernels take the same code path
/// (and produce the same rounding) for every buffer.
template <typename T, std::size_t Align = 64>
struct AlignedAllocator {
  using value_type = T;

  AlignedAllocator() noexcept = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U, Align>&) noexcept {}

  T* allocate(std::size_t n) {
    return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t{Align}));
  }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, std::align_val_t{Align}); }

  template <typename U>
  struct rebind {
    using other = AlignedAllocator<U, Align>;
  };

  friend bool operator==(const AlignedAllocator&, const AlignedAllocator&) { return true; }
};

template <typename T>
using AlignedVector = std::vector<T, AlignedAllocator<T>>;

/// Extent of a 4-D tensor in (batch, channel, row, column) order.
struct Shape {
  std::size_t n = 0;
  std::size_t c = 0;
  std::size_t h = 0;
  std::size_t w = 0;

  constexpr std::size_t size() const { return n * c * h * w; }
  constexpr std::size_t sample_size() const { return c * h * w; }
  constexpr std::size_t plane() const { return h * w; }

  friend constexpr bool operator==(const Shape&, const Shape&) = default;

  std::string str() const {
    return "(" + std::to_string(n) + "," + std::to_string(c) + "," +
           std::to_string(h) + "," + std::to_string(w) + ")";
  }
};

/// Shape of a per-sample vector batch, e.g. logits or emphasis weights.
constexpr Shape rows(std::size_t n, std::size_t k) { return {n, k, 1, 1}; }

/// Dense row-major (n,c,h,w) array. A default-constructed tensor is empty
/// and only serves as a placeholder; every constructed tensor has all
/// extents >= 1.
template <typename Real>
class Tensor {
 public:
  using value_type = Real;

  Tensor() = default;

  explicit Tensor(Shape shape, Real fill = Real(0)) : shape_(shape) {
    if (shape.n == 0 || shape.c == 0 || shape.h == 0 || shape.w == 0)
      fail(ErrorKind::kShape, "tensor shape " + shape.str() + " has a zero extent");
    std::size_t total = 1;
    for (std::size_t d : {shape.n, shape.c, shape.h, shape.w}) {
      if (total > std::numeric_limits<std::size_t>::max() / sizeof(Real) / d)
        fail(ErrorKind::kShape, "tensor shape " + shape.str() + " overflows");
      total *= d;
    }
    data_.assign(total, fill);
  }

  Tensor(Shape shape, std::vector<Real> values) : Tensor(shape) {
    if (values.size() != data_.size())
      fail(ErrorKind::kShape, "tensor shape " + shape.str() + " needs " +
                                  std::to_string(data_.size()) + " values, got " +
                                  std::to_string(values.size()));
    data_.assign(values.begin(), values.end());
  }

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<Real> data() { return data_; }
  std::span<const Real> data() const { return data_; }

  Real& operator[](std::size_t i) { return data_[i]; }
  Real operator[](std::size_t i) const { return data_[i]; }

  Real& operator()(std::size_t n, std::size_t c, std::size_t h = 0, std::size_t w = 0) {
    return data_[offset(n, c, h, w)];
  }
  Real operator()(std::size_t n, std::size_t c, std::size_t h = 0, std::size_t w = 0) const {
    return data_[offset(n, c, h, w)];
  }

  std::span<Real> sample(std::size_t n) {
    return std::span<Real>(data_).subspan(n * shape_.sample_size(), shape_.sample_size());
  }
  std::span<const Real> sample(std::size_t n) const {
    return std::span<const Real>(data_).subspan(n * shape_.sample_size(), shape_.sample_size());
  }

  std::span<Real> channel(std::size_t n, std::size_t c) {
    return std::span<Real>(data_).subspan(offset(n, c, 0, 0), shape_.plane());
  }
  std::span<const Real> channel(std::size_t n, std::size_t c) const {
    return std::span<const Real>(data_).subspan(offset(n, c, 0, 0), shape_.plane());
  }

  void fill(Real v) { std::fill(data_.begin(), data_.end(), v); }

  /// Same data, new extents of equal volume.
  Tensor reshaped(Shape shape) const {
    if (shape.size() != size())
      fail(ErrorKind::kShape, "cannot reshape " + shape_.str() + " to " + shape.str());
    Tensor out = *this;
    out.shape_ = shape;
    return out;
  }

  Tensor& operator+=(const Tensor& o) {
    if (o.shape_ != shape_)
      fail(ErrorKind::kShape, "add: " + shape_.str() + " vs " + o.shape_.str());
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  std::size_t offset(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return ((n * shape_.c + c) * shape_.h + h) * shape_.w + w;
  }

  Shape shape_;
  AlignedVector<Real> data_;
};

template <typename Real>
bool all_finite(const Tensor<Real>& t) {
  for (Real v : t.data())
    if (!std::isfinite(v)) return false;
  return true;
}

template <typename Real>
void check_finite(const Tensor<Real>& t, const std::string& where) {
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (!std::isfinite(t[i]))
      fail(ErrorKind::kNumeric, where + ": non-finite value at flat index " +
                                    std::to_string(i) + " of tensor " + t.shape().str());
  }
}

/// out[n,i,p,q] = s[n,i] * x[n,i,p,q]; `s` has shape (n,c,1,1).
template <typename Real>
Tensor<Real> channel_scale(const Tensor<Real>& x, const Tensor<Real>& s) {
  const Shape& xs = x.shape();
  if (s.shape() != rows(xs.n, xs.c))
    fail(ErrorKind::kShape, "channel_scale: weights " + s.shape().str() +
                                " do not match features " + xs.str());
  Tensor<Real> out(xs);
  for (std::size_t n = 0; n < xs.n; ++n) {
    for (std::size_t c = 0; c < xs.c; ++c) {
      const Real k = s(n, c);
      auto src = x.channel(n, c);
      auto dst = out.channel(n, c);
      for (std::size_t i = 0; i < src.size(); ++i) dst[i] = k * src[i];
    }
  }
  LRNET_DEBUG_FINITE(out, "channel_scale");
  return out;
}

/// out[n,i] = sum over (p,q) of x[n,i,p,q]; result has shape (n,c,1,1).
template <typename Real>
Tensor<Real> reduce_channel_sum(const Tensor<Real>& x) {
  const Shape& xs = x.shape();
  Tensor<Real> out(rows(xs.n, xs.c));
  for (std::size_t n = 0; n < xs.n; ++n) {
    for (std::size_t c = 0; c < xs.c; ++c) {
      Real acc = 0;
      for (Real v : x.channel(n, c)) acc += v;
      out(n, c) = acc;
    }
  }
  LRNET_DEBUG_FINITE(out, "reduce_channel_sum");
  return out;
}

}  // namespace lrnet
