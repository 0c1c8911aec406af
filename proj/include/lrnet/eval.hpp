#pragma once

#include <algorithm>
#include <cstddef>
#include <fstream>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "lrnet/config.hpp"
#include "lrnet/data.hpp"
#include "lrnet/network.hpp"

namespace lrnet {

/// Accuracy and confidence of one posterior source (a single iteration, or
/// the average over iterations).
struct PosteriorStats {
  std::vector<double> topk_accuracy;  // percent, one per requested k
  double mean_top1_confidence = 0.0;
  double mean_loss = 0.0;

  double error_rate() const { return 100.0 - topk_accuracy.front(); }
};

struct EvalReport {
  std::vector<std::size_t> ks;
  std::vector<PosteriorStats> per_iteration;
  PosteriorStats averaged;  // posterior averaged over all iterations
  std::size_t samples = 0;

  const PosteriorStats& select(Aggregation a) const {
    return a == Aggregation::kFinal ? per_iteration.back() : averaged;
  }
};

/// Number of classes ranked strictly above the true label.
template <typename Real>
std::size_t label_rank(std::span<const Real> posterior, int label) {
  const Real p = posterior[static_cast<std::size_t>(label)];
  return static_cast<std::size_t>(
      std::count_if(posterior.begin(), posterior.end(), [p](Real q) { return q > p; }));
}

namespace detail {

struct StatsAccumulator {
  std::vector<std::size_t> hits;
  double confidence = 0.0;
  double loss = 0.0;

  explicit StatsAccumulator(std::size_t k_count) : hits(k_count, 0) {}

  template <typename Real>
  void add(std::span<const Real> posterior, int label, std::span<const std::size_t> ks) {
    const std::size_t rank = label_rank(posterior, label);
    for (std::size_t i = 0; i < ks.size(); ++i) hits[i] += rank < ks[i];
    confidence += static_cast<double>(*std::max_element(posterior.begin(), posterior.end()));
    const double py = std::max(static_cast<double>(posterior[static_cast<std::size_t>(label)]),
                               std::numeric_limits<double>::min());
    loss -= std::log(py);
  }

  PosteriorStats finish(std::size_t n) const {
    PosteriorStats s;
    for (std::size_t h : hits) s.topk_accuracy.push_back(100.0 * double(h) / double(n));
    s.mean_top1_confidence = confidence / double(n);
    s.mean_loss = loss / double(n);
    return s;
  }
};

}  // namespace detail

/// Top-k accuracy, mean top-1 posterior and mean loss at every iteration.
template <typename Real>
EvalReport evaluate(const Model<Real>& model, const Dataset<Real>& data,
                    std::vector<std::size_t> ks = {1}, std::size_t batch_size = 500) {
  if (ks.empty()) ks = {1};
  for (std::size_t k : ks)
    if (k == 0 || k > model.spec.num_classes)
      fail(ErrorKind::kConfig, "eval: k=" + std::to_string(k) + " outside [1," +
                                   std::to_string(model.spec.num_classes) + "]");
  for (int y : data.labels)
    if (y < 0 || static_cast<std::size_t>(y) >= model.spec.num_classes)
      fail(ErrorKind::kData, "eval: dataset label " + std::to_string(y) + " but model has " +
                                 std::to_string(model.spec.num_classes) + " classes");
  if (data.size() == 0) fail(ErrorKind::kData, "eval: empty dataset");

  const std::size_t steps = model.spec.iterations;
  std::vector<detail::StatsAccumulator> acc(steps, detail::StatsAccumulator(ks.size()));
  detail::StatsAccumulator avg(ks.size());
  std::vector<std::size_t> idx;
  std::vector<Real> mean_post(model.spec.num_classes);
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    const std::size_t end = std::min(data.size(), start + batch_size);
    idx.resize(end - start);
    std::iota(idx.begin(), idx.end(), start);
    auto [batch, labels] = gather(data, idx);
    const auto trace = unrolled_forward(model, batch);
    for (std::size_t n = 0; n < labels.size(); ++n) {
      std::fill(mean_post.begin(), mean_post.end(), Real(0));
      for (std::size_t t = 0; t < steps; ++t) {
        auto p = trace.iterations[t].posterior.sample(n);
        acc[t].add(p, labels[n], ks);
        for (std::size_t j = 0; j < p.size(); ++j) mean_post[j] += p[j] / Real(steps);
      }
      avg.add(std::span<const Real>(mean_post), labels[n], ks);
    }
  }
  EvalReport r;
  r.ks = ks;
  r.samples = data.size();
  for (const auto& a : acc) r.per_iteration.push_back(a.finish(data.size()));
  r.averaged = avg.finish(data.size());
  return r;
}

inline std::string format_report(const EvalReport& r) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(3);
  os << "samples " << r.samples << '\n';
  auto row = [&](const std::string& label, const PosteriorStats& s) {
    os << label << "  error " << s.error_rate() << "%  top1-conf " << s.mean_top1_confidence
       << "  loss " << s.mean_loss;
    for (std::size_t i = 0; i < r.ks.size(); ++i)
      os << "  top" << r.ks[i] << " " << s.topk_accuracy[i] << "%";
    os << '\n';
  };
  for (std::size_t t = 0; t < r.per_iteration.size(); ++t)
    row("iteration " + std::to_string(t + 1), r.per_iteration[t]);
  row("averaged   ", r.averaged);
  return os.str();
}

/// One line of the metrics file. Per-iteration fields hold one entry per
/// rethinking iteration.
struct MetricsRow {
  std::size_t phase = 1;
  std::size_t epoch = 0;
  std::string split;
  double total_loss = 0.0;
  std::vector<double> loss;
  std::vector<double> error;
  std::vector<double> top1_confidence;
  double seconds = 0.0;
};

inline constexpr const char* kMetricsHeader =
    "phase,epoch,split,iterations,total_loss,loss_per_iteration,error_per_iteration,"
    "top1_conf_per_iteration,seconds";

/// Append-only CSV; per-iteration lists are ';'-separated within a field.
class MetricsWriter {
 public:
  explicit MetricsWriter(const std::string& path, bool append = false)
      : out_(path, append ? std::ios::app : std::ios::trunc) {
    if (!out_) fail(ErrorKind::kData, "metrics: cannot open '" + path + "'");
    if (!append) out_ << kMetricsHeader << '\n';
    out_.flush();
  }

  void write(const MetricsRow& r) {
    auto list = [](const std::vector<double>& v) {
      std::string s;
      for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) s += ';';
        s += detail::fmt_double(v[i]);
      }
      return s;
    };
    out_ << r.phase << ',' << r.epoch << ',' << r.split << ',' << r.loss.size() << ','
         << detail::fmt_double(r.total_loss) << ',' << list(r.loss) << ',' << list(r.error) << ','
         << list(r.top1_confidence) << ',' << detail::fmt_double(r.seconds) << '\n';
    out_.flush();
  }

 private:
  std::ofstream out_;
};

inline MetricsRow metrics_row(std::size_t phase, std::size_t epoch, const std::string& split,
                              const EvalReport& r, double seconds) {
  MetricsRow row{phase, epoch, split, 0.0, {}, {}, {}, seconds};
  for (const auto& s : r.per_iteration) {
    row.loss.push_back(s.mean_loss);
    row.total_loss += s.mean_loss;
    row.error.push_back(s.error_rate());
    row.top1_confidence.push_back(s.mean_top1_confidence);
  }
  return row;
}

}  // namespace lrnet
