#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "lrnet/tensor.hpp"

namespace lrnet {

inline constexpr std::size_t kImageSide = 28;
inline constexpr std::size_t kAmatFields = kImageSide * kImageSide + 1;
inline constexpr int kMaxClasses = 10;

template <typename Real>
struct Dataset {
  Tensor<Real> images;  // (N, 1, 28, 28)
  std::vector<int> labels;
  std::string split;

  std::size_t size() const { return labels.size(); }
};

/// Reads the whitespace-separated text matrix format: one sample per line,
/// 784 row-major pixels in [0,1] followed by the label.
template <typename Real>
Dataset<Real> load_amat(const std::string& path, std::string split = {}) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::kData, "amat: cannot open '" + path + "'");
  std::vector<Real> pixels;
  std::vector<int> labels;
  std::vector<double> fields;
  fields.reserve(kAmatFields);
  std::string line;
  std::size_t lineno = 0;
  auto where = [&] { return "amat " + path + ":" + std::to_string(lineno) + ": "; };
  while (std::getline(in, line)) {
    ++lineno;
    fields.clear();
    const char* p = line.data();
    const char* end = p + line.size();
    while (true) {
      while (p < end && (*p == ' ' || *p == '\t' || *p == '\r')) ++p;
      if (p == end) break;
      double v = 0;
      auto [next, ec] = std::from_chars(p, end, v);
      if (ec != std::errc() || (next < end && *next != ' ' && *next != '\t' && *next != '\r')) {
        const char* tok_end = p;
        while (tok_end < end && *tok_end != ' ' && *tok_end != '\t') ++tok_end;
        fail(ErrorKind::kData, where() + "non-numeric token '" + std::string(p, tok_end) + "'");
      }
      fields.push_back(v);
      p = next;
    }
    if (fields.empty()) continue;
    if (fields.size() != kAmatFields)
      fail(ErrorKind::kData, where() + "expected " + std::to_string(kAmatFields) +
                                 " fields, found " + std::to_string(fields.size()));
    const double label = fields.back();
    if (!(label >= 0 && label < kMaxClasses) || label != std::floor(label))
      fail(ErrorKind::kData, where() + "label " + std::to_string(label) + " outside [0," +
                                 std::to_string(kMaxClasses) + ")");
    for (std::size_t i = 0; i + 1 < kAmatFields; ++i) {
      if (!(fields[i] >= 0.0 && fields[i] <= 1.0))
        fail(ErrorKind::kData, where() + "pixel " + std::to_string(i) + " value " +
                                   std::to_string(fields[i]) + " outside [0,1]");
      pixels.push_back(static_cast<Real>(fields[i]));
    }
    labels.push_back(static_cast<int>(label));
  }
  if (labels.empty()) fail(ErrorKind::kData, "amat: '" + path + "' holds no samples");
  Dataset<Real> d;
  d.images = Tensor<Real>({labels.size(), 1, kImageSide, kImageSide}, std::move(pixels));
  d.labels = std::move(labels);
  d.split = std::move(split);
  return d;
}

/// Writes `d` in the same format, shortest round-trip decimal for every value.
template <typename Real>
void save_amat(const Dataset<Real>& d, const std::string& path) {
  if (d.images.shape().sample_size() != kAmatFields - 1)
    fail(ErrorKind::kShape, "amat: images must be 1x28x28, got " + d.images.shape().str());
  std::ofstream out(path);
  if (!out) fail(ErrorKind::kData, "amat: cannot write '" + path + "'");
  char buf[64];
  for (std::size_t n = 0; n < d.size(); ++n) {
    for (Real v : d.images.sample(n)) {
      auto r = std::to_chars(buf, buf + sizeof buf, v);
      out.write(buf, r.ptr - buf);
      out.put(' ');
    }
    out << d.labels[n] << '\n';
  }
  if (!out) fail(ErrorKind::kData, "amat: write to '" + path + "' failed");
}

/// Per-image mean subtraction and division by max(std, epsilon).
template <typename Real>
Dataset<Real> contrast_normalize(const Dataset<Real>& d, double epsilon = 1e-6) {
  if (!(epsilon > 0)) fail(ErrorKind::kConfig, "contrast_normalize: epsilon must be positive");
  Dataset<Real> out = d;
  for (std::size_t n = 0; n < d.size(); ++n) {
    auto img = out.images.sample(n);
    // Shifted by the first pixel so that a constant image has an exact mean.
    const double ref = img[0];
    double mean = 0;
    for (Real v : img) mean += v - ref;
    mean = ref + mean / static_cast<double>(img.size());
    double var = 0;
    for (Real v : img) var += (v - mean) * (v - mean);
    const double sd = std::max(std::sqrt(var / static_cast<double>(img.size())), epsilon);
    for (Real& v : img) v = static_cast<Real>((v - mean) / sd);
  }
  return out;
}

/// Mirrors every sample whose `flip` entry is set about the vertical axis.
template <typename Real>
Tensor<Real> flip_horizontal(const Tensor<Real>& batch, std::span<const std::uint8_t> flip) {
  const Shape& s = batch.shape();
  if (flip.size() != s.n)
    fail(ErrorKind::kShape, "flip_horizontal: " + std::to_string(flip.size()) +
                                " coins for batch of " + std::to_string(s.n));
  Tensor<Real> out = batch;
  for (std::size_t n = 0; n < s.n; ++n) {
    if (!flip[n]) continue;
    for (std::size_t c = 0; c < s.c; ++c) {
      auto plane = out.channel(n, c);
      for (std::size_t y = 0; y < s.h; ++y)
        std::reverse(plane.begin() + static_cast<std::ptrdiff_t>(y * s.w),
                     plane.begin() + static_cast<std::ptrdiff_t>((y + 1) * s.w));
    }
  }
  return out;
}

/// Swaps rows and columns of every image, for files stored column by column.
template <typename Real>
Dataset<Real> transpose_images(const Dataset<Real>& d) {
  const Shape& s = d.images.shape();
  if (s.h != s.w) fail(ErrorKind::kShape, "transpose: images are not square: " + s.str());
  Dataset<Real> out = d;
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c) {
      auto src = d.images.channel(n, c);
      auto dst = out.images.channel(n, c);
      for (std::size_t y = 0; y < s.h; ++y)
        for (std::size_t x = 0; x < s.w; ++x) dst[y * s.w + x] = src[x * s.w + y];
    }
  return out;
}

/// Box-filter resampling of 28x28 images to side x side; each output pixel
/// is the area-weighted mean of the source pixels it covers.
template <typename Real>
Dataset<Real> downsample_area(const Dataset<Real>& d, std::size_t side) {
  const Shape& s = d.images.shape();
  if (s.c != 1 || s.h != kImageSide || s.w != kImageSide)
    fail(ErrorKind::kShape, "downsample: expected 1x28x28 images, got " + s.str());
  if (side == 0 || side > kImageSide)
    fail(ErrorKind::kConfig, "downsample: side must lie in [1,28]");
  const double scale = double(kImageSide) / double(side);
  auto overlap = [scale](std::size_t src, std::size_t dst) {
    const double lo = std::max(double(src), double(dst) * scale);
    const double hi = std::min(double(src + 1), double(dst + 1) * scale);
    return std::max(0.0, hi - lo);
  };
  Dataset<Real> out;
  out.labels = d.labels;
  out.split = d.split;
  out.images = Tensor<Real>({s.n, 1, side, side});
  for (std::size_t n = 0; n < s.n; ++n) {
    auto src = d.images.sample(n);
    auto dst = out.images.sample(n);
    for (std::size_t y = 0; y < side; ++y)
      for (std::size_t x = 0; x < side; ++x) {
        double acc = 0, area = 0;
        for (std::size_t sy = 0; sy < kImageSide; ++sy) {
          const double wy = overlap(sy, y);
          if (wy == 0) continue;
          for (std::size_t sx = 0; sx < kImageSide; ++sx) {
            const double w = wy * overlap(sx, x);
            acc += w * src[sy * kImageSide + sx];
            area += w;
          }
        }
        dst[y * side + x] = static_cast<Real>(acc / area);
      }
  }
  return out;
}

/// Copies the listed samples into a contiguous batch.
template <typename Real>
std::pair<Tensor<Real>, std::vector<int>> gather(const Dataset<Real>& d,
                                                 std::span<const std::size_t> indices) {
  const Shape& s = d.images.shape();
  Tensor<Real> batch({indices.size(), s.c, s.h, s.w});
  std::vector<int> labels;
  labels.reserve(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= d.size())
      fail(ErrorKind::kShape, "gather: index " + std::to_string(indices[i]) + " out of range");
    auto src = d.images.sample(indices[i]);
    std::copy(src.begin(), src.end(), batch.sample(i).begin());
    labels.push_back(d.labels[indices[i]]);
  }
  return {std::move(batch), std::move(labels)};
}

/// A fresh permutation of [0, samples) cut into batches; the last partial
/// batch is kept. Fisher-Yates on raw engine output keeps the order portable.
inline std::vector<std::vector<std::size_t>> shuffled_batches(std::size_t samples,
                                                              std::size_t batch_size,
                                                              std::mt19937_64& rng) {
  if (samples == 0 || batch_size == 0)
    fail(ErrorKind::kConfig, "batches: need samples and a positive batch size");
  std::vector<std::size_t> order(samples);
  for (std::size_t i = 0; i < samples; ++i) order[i] = i;
  for (std::size_t i = samples; i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(order[i - 1], order[j]);
  }
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t b = 0; b < samples; b += batch_size) {
    const std::size_t e = std::min(samples, b + batch_size);
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(b),
                         order.begin() + static_cast<std::ptrdiff_t>(e));
  }
  return batches;
}

/// Shuffled mini-batches with an owned engine; every epoch is a new permutation.
class BatchIterator {
 public:
  BatchIterator(std::size_t samples, std::size_t batch_size, std::uint64_t seed)
      : samples_(samples), batch_size_(batch_size), rng_(seed) {
    if (samples == 0 || batch_size == 0)
      fail(ErrorKind::kConfig, "batch iterator: need samples and a positive batch size");
  }

  std::vector<std::vector<std::size_t>> next_epoch() {
    ++epoch_;
    return shuffled_batches(samples_, batch_size_, rng_);
  }

  std::size_t epoch() const { return epoch_; }
  std::size_t batch_size() const { return batch_size_; }
  std::mt19937_64& engine() { return rng_; }
  const std::mt19937_64& engine() const { return rng_; }
  void set_epoch(std::size_t e) { epoch_ = e; }

 private:
  std::size_t samples_;
  std::size_t batch_size_;
  std::mt19937_64 rng_;
  std::size_t epoch_ = 0;
};

/// Two-class 28x28 fixture in the spirit of a 7-vs-9 confusion: both classes
/// share a top bar and a descending stem; they differ only in a short stroke
/// inside the upper-left loop region, vertical for class 1 and horizontal for
/// class 0. Both strokes light the same number of pixels, so raw mean
/// intensity carries no class information. Background is uniform noise.
template <typename Real>
Dataset<Real> synthetic_confusable(std::size_t n_per_class, std::uint64_t seed) {
  if (n_per_class == 0) fail(ErrorKind::kConfig, "synthetic: n_per_class must be >= 1");
  std::mt19937_64 rng(seed);
  auto uniform = [&rng](double lo, double hi) {
    return lo + (hi - lo) * (static_cast<double>(rng() >> 11) * 0x1.0p-53);
  };
  auto jitter = [&rng] { return static_cast<int>(rng() % 5) - 2; };

  const std::size_t total = 2 * n_per_class;
  Dataset<Real> d;
  d.images = Tensor<Real>({total, 1, kImageSide, kImageSide});
  d.split = "synthetic";
  for (std::size_t n = 0; n < total; ++n) {
    const int label = static_cast<int>(n % 2);
    d.labels.push_back(label);
    auto img = d.images.sample(n);
    const double bg = uniform(0.0, 0.3);
    for (Real& v : img) v = static_cast<Real>(bg * uniform(0.0, 1.0) + uniform(0.0, 0.1));
    const double ink = uniform(0.7, 1.0);
    const int dy = jitter(), dx = jitter();
    auto put = [&](int y, int x) {
      y += dy;
      x += dx;
      if (y < 0 || x < 0 || y >= int(kImageSide) || x >= int(kImageSide)) return;
      img[static_cast<std::size_t>(y) * kImageSide + static_cast<std::size_t>(x)] =
          static_cast<Real>(ink);
    };
    for (int x = 9; x <= 19; ++x) put(6, x);     // top bar
    for (int y = 6; y <= 22; ++y) put(y, 19);    // stem
    if (label == 1) {
      for (int y = 7; y <= 12; ++y) put(y, 9);   // closes the loop
    } else {
      for (int x = 10; x <= 15; ++x) put(12, x); // open crossbar
    }
  }
  return d;
}

}  // namespace lrnet
