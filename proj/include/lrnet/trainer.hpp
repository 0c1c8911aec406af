#pragma once

#include <chrono>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <optional>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "lrnet/checkpoint.hpp"
#include "lrnet/config.hpp"
#include "lrnet/data.hpp"
#include "lrnet/eval.hpp"
#include "lrnet/network.hpp"
#include "lrnet/optim.hpp"

namespace lrnet {

/// Reads a dataset source: an AMAT path, or `synthetic:N[:SEED]` for N
/// samples per class of the two-class generated fixture.
template <typename Real>
Dataset<Real> load_source(const std::string& source, const std::string& split) {
  if (source.rfind("synthetic:", 0) != 0) return load_amat<Real>(source, split);
  const std::string rest = source.substr(10);
  const auto colon = rest.find(':');
  const std::string count = rest.substr(0, colon);
  const std::string seed = colon == std::string::npos ? "1" : rest.substr(colon + 1);
  auto d = synthetic_confusable<Real>(detail::parse_number<std::size_t>(source, count),
                                      detail::parse_number<std::uint64_t>(source, seed));
  d.split = split;
  return d;
}

/// Loads a split, optionally truncated to its first `max_samples` samples,
/// transposed and contrast-normalized.
template <typename Real>
Dataset<Real> load_split(const std::string& path, const std::string& split, bool normalize,
                         std::size_t max_samples = 0, bool column_major = false) {
  if (path.empty()) fail(ErrorKind::kConfig, "no " + split + " dataset given");
  Dataset<Real> d = load_source<Real>(path, split);
  if (column_major) d = transpose_images(d);
  if (max_samples > 0 && max_samples < d.size()) {
    std::vector<std::size_t> idx(max_samples);
    for (std::size_t i = 0; i < max_samples; ++i) idx[i] = i;
    auto [images, labels] = gather(d, idx);
    d.images = std::move(images);
    d.labels = std::move(labels);
  }
  return normalize ? contrast_normalize(d) : d;
}

inline NetworkSpec base_spec_for(const TrainConfig& cfg) {
  if (cfg.network == Architecture::kCompact) return compact_spec(cfg.classes);
  return lenet_spec({cfg.relu_after_conv, cfg.fc_slope, cfg.classes});
}

/// Per-iteration loss, correct count and summed top-1 confidence of one batch.
struct StepStats {
  std::vector<double> loss;
  std::vector<std::size_t> correct;
  std::vector<double> confidence;
  std::size_t samples = 0;

  void merge(const StepStats& s) {
    if (loss.empty()) {
      loss.assign(s.loss.size(), 0.0);
      correct.assign(s.loss.size(), 0);
      confidence.assign(s.loss.size(), 0.0);
    }
    for (std::size_t t = 0; t < s.loss.size(); ++t) {
      loss[t] += s.loss[t] * double(s.samples);
      correct[t] += s.correct[t];
      confidence[t] += s.confidence[t];
    }
    samples += s.samples;
  }
};

/// One SGD step on a batch: forward through all iterations, BPTT, update.
template <typename Real>
StepStats train_step(Model<Real>& model, OptimState<Real>& optim, const Tensor<Real>& batch,
                     std::span<const int> labels, const BackwardOptions& backward = {}) {
  const auto trace = unrolled_forward(model, batch, labels);
  const auto grads = bptt_backward(model, trace, backward);
  sgd_step(model.params, grads, optim);

  StepStats s;
  s.samples = labels.size();
  for (const auto& it : trace.iterations) {
    s.loss.push_back(static_cast<double>(it.loss));
    std::size_t hits = 0;
    double conf = 0;
    for (std::size_t n = 0; n < labels.size(); ++n) {
      auto p = it.posterior.sample(n);
      hits += label_rank(p, labels[n]) == 0;
      conf += static_cast<double>(*std::max_element(p.begin(), p.end()));
    }
    s.correct.push_back(hits);
    s.confidence.push_back(conf);
  }
  return s;
}

/// Everything a run needs to continue; mirrors the checkpoint contents.
template <typename Real>
struct TrainState {
  TrainConfig config;
  Model<Real> model;
  OptimState<Real> optim;
  std::uint32_t phase = 1;
  std::uint64_t epoch = 0;  // completed epochs within the phase
  std::mt19937_64 rng;
};

template <typename Real>
Checkpoint<Real> to_checkpoint(const TrainState<Real>& s) {
  return {s.model, s.optim, s.phase, s.epoch, s.rng, s.config};
}

template <typename Real>
TrainState<Real> from_checkpoint(Checkpoint<Real> ck) {
  return {std::move(ck.config), std::move(ck.model), std::move(ck.optim), ck.phase, ck.epoch,
          ck.rng};
}

/// Fresh phase-1 state: baseline network, seeded initialization.
template <typename Real>
TrainState<Real> initial_state(const TrainConfig& cfg,
                               std::optional<NetworkSpec> base = std::nullopt) {
  cfg.validate();
  TrainState<Real> s;
  s.config = cfg;
  s.rng.seed(cfg.seed);
  s.model.spec = base ? *base : base_spec_for(cfg);
  s.model.params = init_parameters<Real>(s.model.spec, s.rng);
  s.optim.learning_rate = cfg.lr;
  s.optim.momentum = cfg.momentum;
  s.optim.weight_decay = cfg.weight_decay;
  return s;
}

/// Switches a finished phase-1 state into phase 2. In rethinking mode the
/// network gains emphasis layers and zero heads, so its first forward pass
/// reproduces the baseline at every iteration; in baseline mode the network
/// is left as is and simply trains on.
template <typename Real>
void begin_phase2(TrainState<Real>& s) {
  if (s.config.phase2_mode == Phase2Mode::kRethinking) {
    NetworkSpec lr = with_rethinking(s.model.spec, s.config.iterations, s.config.placement);
    lr.detach_feedback = s.config.truncated_bptt;
    s.model.params = attach_heads(lr, std::move(s.model.params));
    s.model.spec = std::move(lr);
  }
  s.phase = 2;
  s.epoch = 0;
}

/// Learning rate for a 1-based epoch within the current phase.
inline double scheduled_lr(const TrainConfig& cfg, std::uint64_t epoch) {
  if (cfg.lr_step_epochs == 0) return cfg.lr;
  return cfg.lr * std::pow(cfg.lr_step_gamma, double((epoch - 1) / cfg.lr_step_epochs));
}

/// One pass over `train` in a fresh order drawn from the state's engine.
template <typename Real>
StepStats train_epoch(TrainState<Real>& s, const Dataset<Real>& train) {
  s.optim.learning_rate = scheduled_lr(s.config, s.epoch + 1);
  const auto batches = shuffled_batches(train.size(), s.config.batch_size, s.rng);
  StepStats total;
  std::vector<std::uint8_t> coins;
  for (const auto& idx : batches) {
    auto [batch, labels] = gather(train, idx);
    if (s.config.flip) {
      coins.resize(idx.size());
      for (auto& c : coins) c = static_cast<std::uint8_t>(s.rng() & 1u);
      batch = flip_horizontal(batch, coins);
    }
    total.merge(train_step(s.model, s.optim, batch, labels));
  }
  ++s.epoch;
  return total;
}

inline MetricsRow train_metrics_row(std::size_t phase, std::size_t epoch, const StepStats& st,
                                    double seconds) {
  MetricsRow row{phase, epoch, "train", 0.0, {}, {}, {}, seconds};
  const double n = double(st.samples);
  for (std::size_t t = 0; t < st.loss.size(); ++t) {
    row.loss.push_back(st.loss[t] / n);
    row.total_loss += st.loss[t] / n;
    row.error.push_back(100.0 - 100.0 * double(st.correct[t]) / n);
    row.top1_confidence.push_back(st.confidence[t] / n);
  }
  return row;
}

struct TrainOutcome {
  std::optional<EvalReport> phase1_test;
  std::optional<EvalReport> final_test;
};

namespace detail {

/// Runs the remaining epochs of the current phase, logging and evaluating.
template <typename Real>
std::optional<EvalReport> run_phase(TrainState<Real>& s, std::size_t epochs,
                                    const Dataset<Real>& train, const Dataset<Real>* test,
                                    MetricsWriter& metrics, std::ostream& log) {
  using Clock = std::chrono::steady_clock;
  std::optional<EvalReport> last;
  const auto elapsed = [&](Clock::time_point since) {
    return s.config.record_time ? std::chrono::duration<double>(Clock::now() - since).count()
                                : 0.0;
  };
  while (s.epoch < epochs) {
    const auto start = Clock::now();
    StepStats st;
    try {
      st = train_epoch(s, train);
    } catch (const Error& e) {
      if (e.kind() == ErrorKind::kNumeric) {
        const auto path = (std::filesystem::path(s.config.out_dir) / "diagnostic.ckpt").string();
        save_checkpoint(to_checkpoint(s), path);
        log << "numerical failure in phase " << s.phase << " epoch " << s.epoch + 1
            << "; state saved to " << path << '\n';
      }
      throw;
    }
    const auto row = train_metrics_row(s.phase, s.epoch, st, elapsed(start));
    metrics.write(row);
    log << "phase " << s.phase << " epoch " << s.epoch << "  lr " << s.optim.learning_rate
        << "  train loss " << row.total_loss << "  train error " << row.error.back() << "%\n";
    const bool eval_now = s.epoch == epochs ||
                          (s.config.eval_interval > 0 && s.epoch % s.config.eval_interval == 0);
    if (test && eval_now) {
      const auto t0 = Clock::now();
      last = evaluate(s.model, *test, {1}, s.config.eval_batch);
      metrics.write(metrics_row(s.phase, s.epoch, "test", *last, elapsed(t0)));
      log << "phase " << s.phase << " epoch " << s.epoch << "  test error "
          << last->select(s.config.eval_aggregation).error_rate() << "%\n";
    }
  }
  return last;
}

}  // namespace detail

/// Two-phase training. Phase 1 trains the baseline (T = 1, no heads); phase 2
/// continues from it with zero feedback heads and T iterations (or as a plain
/// baseline control). Writes phase1.ckpt, final.ckpt and metrics.csv to
/// config.out_dir.
template <typename Real>
TrainOutcome train(TrainState<Real>& s, const Dataset<Real>& train, const Dataset<Real>* test,
                   std::ostream& log) {
  const auto& cfg = s.config;
  std::filesystem::create_directories(cfg.out_dir);
  const std::filesystem::path dir(cfg.out_dir);
  MetricsWriter metrics((dir / "metrics.csv").string());
  if (train.size() == 0) fail(ErrorKind::kData, "train: empty training set");
  for (int y : train.labels)
    if (y < 0 || static_cast<std::size_t>(y) >= s.model.spec.num_classes)
      fail(ErrorKind::kData, "train: label " + std::to_string(y) + " outside the network's " +
                                 std::to_string(s.model.spec.num_classes) + " classes");

  TrainOutcome out;
  if (s.phase == 1) {
    out.phase1_test = detail::run_phase(s, cfg.phase1_epochs, train, test, metrics, log);
    save_checkpoint(to_checkpoint(s), (dir / "phase1.ckpt").string());
    begin_phase2(s);
    log << "phase 2: " << s.model.params.scalar_count() << " parameters, T = "
        << s.model.spec.iterations << '\n';
  }
  out.final_test = detail::run_phase(s, cfg.phase2_epochs, train, test, metrics, log);
  save_checkpoint(to_checkpoint(s), (dir / "final.ckpt").string());
  return out;
}

}  // namespace lrnet
