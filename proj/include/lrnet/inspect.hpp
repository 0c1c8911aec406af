#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "lrnet/config.hpp"
#include "lrnet/data.hpp"
#include "lrnet/network.hpp"

namespace lrnet {

struct InspectOptions {
  int class_a = 7;
  int class_b = 9;
  double high_threshold = 0.8;  // t=1 confidence above this is "high"
  double low_threshold = 0.6;   // below this is "low"; in between is "mid"
  std::size_t batch_size = 500;
};

inline const char* confidence_bucket(double conf, const InspectOptions& opt) {
  if (conf > opt.high_threshold) return "high";
  if (conf < opt.low_threshold) return "low";
  return "mid";
}

/// Emphasis vectors at the second iteration for one sample.
struct EmphasisSample {
  std::size_t index = 0;
  int label = 0;
  double confidence_t1 = 0.0;
  std::string bucket;
  std::vector<std::vector<double>> heads;  // one vector per emphasis layer
};

struct EmphasisSummary {
  int label = 0;
  std::string bucket;
  std::string head;
  std::size_t count = 0;
  std::vector<double> mean;
  std::size_t argmax = 0;
  std::size_t argmin = 0;
};

struct EmphasisInspection {
  std::vector<std::string> head_names;
  std::vector<EmphasisSample> samples;
  std::vector<EmphasisSummary> summaries;
  /// Cosine similarity of the two classes' mean vectors, per (bucket, head).
  std::map<std::pair<std::string, std::string>, double> cosine;
};

inline double cosine_similarity(const std::vector<double>& a, const std::vector<double>& b) {
  const double ab = std::inner_product(a.begin(), a.end(), b.begin(), 0.0);
  const double aa = std::inner_product(a.begin(), a.end(), a.begin(), 0.0);
  const double bb = std::inner_product(b.begin(), b.end(), b.begin(), 0.0);
  if (aa == 0 || bb == 0) return 0.0;
  return ab / std::sqrt(aa * bb);
}

/// Collects emphasis vectors at t = 2 for every sample of the two classes,
/// tagged with the model's top-1 confidence at t = 1.
template <typename Real>
EmphasisInspection inspect_emphasis(const Model<Real>& model, const Dataset<Real>& data,
                                    const InspectOptions& opt = {}) {
  if (!model.spec.has_rethinking() || model.spec.iterations < 2)
    fail(ErrorKind::kConfig, "inspect: model has no feedback heads or runs a single iteration");
  if (!(opt.low_threshold <= opt.high_threshold))
    fail(ErrorKind::kConfig, "inspect: low threshold exceeds high threshold");
  if (opt.class_a == opt.class_b) fail(ErrorKind::kConfig, "inspect: the two classes coincide");
  std::vector<std::size_t> chosen;
  bool seen_a = false, seen_b = false;
  for (std::size_t i = 0; i < data.size(); ++i) {
    seen_a |= data.labels[i] == opt.class_a;
    seen_b |= data.labels[i] == opt.class_b;
    if (data.labels[i] == opt.class_a || data.labels[i] == opt.class_b) chosen.push_back(i);
  }
  if (!seen_a || !seen_b)
    fail(ErrorKind::kData, "inspect: class " + std::to_string(seen_a ? opt.class_b : opt.class_a) +
                               " does not occur in the dataset");

  EmphasisInspection r;
  std::vector<std::size_t> emph_layers;
  for (std::size_t i = 0; i < model.spec.layers.size(); ++i)
    if (model.spec.layers[i].kind == LayerKind::kEmphasis) {
      emph_layers.push_back(i);
      r.head_names.push_back(model.spec.layers[i].name);
    }

  for (std::size_t start = 0; start < chosen.size(); start += opt.batch_size) {
    const std::size_t end = std::min(chosen.size(), start + opt.batch_size);
    std::span<const std::size_t> idx(chosen.data() + start, end - start);
    auto [batch, labels] = gather(data, idx);
    const auto trace = unrolled_forward(model, batch);
    const auto& t1 = trace.iterations[0];
    const auto& t2 = trace.iterations[1];
    for (std::size_t n = 0; n < idx.size(); ++n) {
      EmphasisSample s;
      s.index = idx[n];
      s.label = labels[n];
      auto p = t1.posterior.sample(n);
      s.confidence_t1 = static_cast<double>(*std::max_element(p.begin(), p.end()));
      s.bucket = confidence_bucket(s.confidence_t1, opt);
      for (std::size_t li : emph_layers) {
        auto a = t2.layers[li].emphasis.sample(n);
        s.heads.emplace_back(a.begin(), a.end());
      }
      r.samples.push_back(std::move(s));
    }
  }

  for (const char* bucket : {"high", "mid", "low"}) {
    for (std::size_t h = 0; h < r.head_names.size(); ++h) {
      std::array<std::optional<std::size_t>, 2> pair;
      for (int cls : {opt.class_a, opt.class_b}) {
        EmphasisSummary sum{cls, bucket, r.head_names[h], 0, {}, 0, 0};
        for (const auto& s : r.samples) {
          if (s.label != cls || s.bucket != bucket) continue;
          if (sum.mean.empty()) sum.mean.assign(s.heads[h].size(), 0.0);
          for (std::size_t c = 0; c < sum.mean.size(); ++c) sum.mean[c] += s.heads[h][c];
          ++sum.count;
        }
        if (sum.count == 0) continue;
        for (double& v : sum.mean) v /= double(sum.count);
        sum.argmax = std::size_t(std::max_element(sum.mean.begin(), sum.mean.end()) -
                                 sum.mean.begin());
        sum.argmin = std::size_t(std::min_element(sum.mean.begin(), sum.mean.end()) -
                                 sum.mean.begin());
        r.summaries.push_back(std::move(sum));
        pair[cls == opt.class_a ? 0 : 1] = r.summaries.size() - 1;
      }
      if (pair[0] && pair[1])
        r.cosine[{bucket, r.head_names[h]}] =
            cosine_similarity(r.summaries[*pair[0]].mean, r.summaries[*pair[1]].mean);
    }
  }
  return r;
}

/// Sample rows, then class/bucket summary rows, then cosine rows. Vectors
/// are ';'-separated within a field.
inline void write_inspection_csv(const EmphasisInspection& r, std::ostream& os) {
  auto join = [](const std::vector<double>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (i) s += ';';
      s += detail::fmt_double(v[i]);
    }
    return s;
  };
  os << "kind,index,label,bucket,head,confidence_t1,count,argmax,argmin,values\n";
  for (const auto& s : r.samples)
    for (std::size_t h = 0; h < r.head_names.size(); ++h)
      os << "sample," << s.index << ',' << s.label << ',' << s.bucket << ',' << r.head_names[h]
         << ',' << detail::fmt_double(s.confidence_t1) << ",,,," << join(s.heads[h]) << '\n';
  for (const auto& m : r.summaries)
    os << "mean,," << m.label << ',' << m.bucket << ',' << m.head << ",," << m.count << ','
       << m.argmax << ',' << m.argmin << ',' << join(m.mean) << '\n';
  for (const auto& [key, c] : r.cosine)
    os << "cosine,,," << key.first << ',' << key.second << ",,,,," << detail::fmt_double(c)
       << '\n';
}

}  // namespace lrnet
