#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <random>
#include <string>
#include <vector>

#include "lrnet/network.hpp"

namespace lrnet {

struct TensorCheck {
  std::string name;
  std::size_t probed = 0;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  /// Plain relative error over entries with magnitude above 1e-6, for reporting.
  double max_rel_error_significant = 0.0;
  bool passed = true;
};

struct GradcheckReport {
  std::vector<TensorCheck> tensors;
  double tolerance = 0.0;

  bool passed() const {
    return std::all_of(tensors.begin(), tensors.end(), [](const auto& t) { return t.passed; });
  }
  double max_rel_error() const {
    double m = 0;
    for (const auto& t : tensors) m = std::max(m, t.max_rel_error);
    return m;
  }
  double max_rel_error_significant() const {
    double m = 0;
    for (const auto& t : tensors) m = std::max(m, t.max_rel_error_significant);
    return m;
  }
};

struct GradcheckOptions {
  double tolerance = 1e-5;
  double step = 1e-5;
  /// Entries probed per tensor; 0 probes every entry.
  std::size_t samples_per_tensor = 0;
  /// Differences this small in absolute terms count as agreement regardless of scale.
  double abs_floor = 1e-9;
  std::uint64_t seed = 1;
  BackwardOptions backward;
};

/// |a - b| / max(|a|, |b|), with tiny absolute disagreement treated as exact.
inline double relative_error(double analytic, double numeric, double abs_floor) {
  const double diff = std::abs(analytic - numeric);
  if (diff <= abs_floor) return 0.0;
  return diff / std::max(std::abs(analytic), std::abs(numeric));
}

/// Compares bptt_backward against central differences of total_loss for
/// every parameter tensor of a double-precision model.
inline GradcheckReport gradcheck(const Model<double>& model, const Tensor<double>& batch,
                                 std::span<const int> labels, const GradcheckOptions& opt = {}) {
  const auto trace = unrolled_forward(model, batch, labels);
  const auto grads = bptt_backward(model, trace, opt.backward);

  Model<double> probe = model;
  auto loss_at = [&]() { return total_loss(unrolled_forward(probe, batch, labels)); };

  std::mt19937_64 rng(opt.seed);
  GradcheckReport report;
  report.tolerance = opt.tolerance;
  for (auto& [name, tensor] : probe.params) {
    TensorCheck tc;
    tc.name = name;
    std::vector<std::size_t> idx(tensor.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    if (opt.samples_per_tensor != 0 && opt.samples_per_tensor < idx.size()) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(opt.samples_per_tensor);
    }
    const Tensor<double>& analytic = grads.at(name);
    for (std::size_t i : idx) {
      const double saved = tensor[i];
      tensor[i] = saved + opt.step;
      const double up = loss_at();
      tensor[i] = saved - opt.step;
      const double down = loss_at();
      tensor[i] = saved;
      const double numeric = (up - down) / (2.0 * opt.step);
      tc.max_abs_error = std::max(tc.max_abs_error, std::abs(numeric - analytic[i]));
      tc.max_rel_error =
          std::max(tc.max_rel_error, relative_error(analytic[i], numeric, opt.abs_floor));
      const double mag = std::max(std::abs(analytic[i]), std::abs(numeric));
      if (mag > 1e-6)
        tc.max_rel_error_significant =
            std::max(tc.max_rel_error_significant, std::abs(numeric - analytic[i]) / mag);
      ++tc.probed;
    }
    tc.passed = tc.max_rel_error < opt.tolerance;
    report.tensors.push_back(std::move(tc));
  }
  return report;
}

struct GradcheckCase {
  std::string name;
  GradcheckReport report;
};

/// Full-gradient checks on the tiny network: the plain baseline, then the
/// rethinking network at T = 1, 2, 3 with random (nonzero) feedback heads so
/// that every cross-iteration path carries signal. Together the cases cover
/// conv, pool, dense, leaky ReLU, emphasis and feedback-head gradients.
inline std::vector<GradcheckCase> gradcheck_suite(const GradcheckOptions& opt = {},
                                                  std::size_t batch = 4) {
  std::vector<GradcheckCase> cases;
  auto run = [&](const std::string& name, const NetworkSpec& spec) {
    std::mt19937_64 rng(opt.seed);
    Model<double> m{spec, init_parameters<double>(spec, rng)};
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (auto& [pname, t] : m.params)
      if (pname.find(".feedback.") != std::string::npos)
        for (auto& v : t.data()) v = u(rng);
    Tensor<double> x({batch, spec.in_channels, spec.in_height, spec.in_width});
    for (auto& v : x.data()) v = u(rng);
    std::vector<int> labels(batch);
    for (std::size_t i = 0; i < batch; ++i) labels[i] = static_cast<int>(i % spec.num_classes);
    cases.push_back({name, gradcheck(m, x, labels, opt)});
  };
  run("baseline", tiny_spec());
  for (std::size_t t : {1, 2, 3}) run("rethinking T=" + std::to_string(t), with_rethinking(tiny_spec(), t));
  return cases;
}

}  // namespace lrnet
