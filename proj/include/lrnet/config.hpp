#pragma once

#include <charconv>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "lrnet/error.hpp"
#include "lrnet/network.hpp"

namespace lrnet {

enum class Precision { kSingle, kDouble };
enum class Aggregation { kFinal, kAverage };
enum class Phase2Mode { kRethinking, kBaseline };
enum class Architecture { kLeNet, kCompact };

/// Run hyperparameters. Defaults reproduce the LeNet / MNIST-background-image
/// protocol: batch 128, lr 0.01, momentum 0.9, decay 1e-4 on weights only,
/// T = 2, 64 baseline epochs followed by 16 rethinking epochs.
struct TrainConfig {
  std::string train_path;
  std::string test_path;
  std::string out_dir = "run";
  std::size_t batch_size = 128;
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::size_t iterations = 2;
  std::size_t phase1_epochs = 64;
  std::size_t phase2_epochs = 16;
  std::uint64_t seed = 1;
  Precision precision = Precision::kSingle;
  bool normalize = true;
  bool column_major = false;  // AMAT pixels stored column by column
  EmphasisPlacement placement = EmphasisPlacement::kAfterConv;
  bool truncated_bptt = false;
  Aggregation eval_aggregation = Aggregation::kFinal;
  Phase2Mode phase2_mode = Phase2Mode::kRethinking;
  Architecture network = Architecture::kLeNet;
  std::size_t classes = 10;
  bool relu_after_conv = false;
  double fc_slope = 0.0;
  bool flip = false;
  std::size_t lr_step_epochs = 0;  // 0 keeps the rate constant within a phase
  double lr_step_gamma = 0.1;
  std::size_t eval_interval = 8;   // test-set evaluation every k epochs; phase ends always
  std::size_t eval_batch = 500;
  std::size_t max_train = 0;       // 0 uses every sample
  std::size_t max_test = 0;
  bool record_time = true;         // false writes 0 seconds, making metrics files reproducible

  void set(const std::string& key, const std::string& value);
  std::string to_text() const;
  void validate() const;
};

namespace detail {

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true" || v == "on" || v == "yes") return true;
  if (v == "0" || v == "false" || v == "off" || v == "no") return false;
  fail(ErrorKind::kConfig, "config: '" + key + "' expects a boolean, got '" + v + "'");
}

template <typename T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size())
    fail(ErrorKind::kConfig, "config: '" + key + "' expects a number, got '" + v + "'");
  return out;
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::string fmt_double(double v) {
  char buf[32];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

}  // namespace detail

inline void TrainConfig::set(const std::string& key, const std::string& value) {
  using detail::parse_bool;
  using detail::parse_number;
  const std::string& v = value;
  if (key == "train_path") train_path = v;
  else if (key == "test_path") test_path = v;
  else if (key == "out_dir") out_dir = v;
  else if (key == "batch_size") batch_size = parse_number<std::size_t>(key, v);
  else if (key == "lr") lr = parse_number<double>(key, v);
  else if (key == "momentum") momentum = parse_number<double>(key, v);
  else if (key == "weight_decay") weight_decay = parse_number<double>(key, v);
  else if (key == "iterations") iterations = parse_number<std::size_t>(key, v);
  else if (key == "phase1_epochs") phase1_epochs = parse_number<std::size_t>(key, v);
  else if (key == "phase2_epochs") phase2_epochs = parse_number<std::size_t>(key, v);
  else if (key == "seed") seed = parse_number<std::uint64_t>(key, v);
  else if (key == "precision") {
    if (v == "single" || v == "float") precision = Precision::kSingle;
    else if (v == "double") precision = Precision::kDouble;
    else fail(ErrorKind::kConfig, "config: precision must be single or double");
  } else if (key == "normalize") normalize = parse_bool(key, v);
  else if (key == "column_major") column_major = parse_bool(key, v);
  else if (key == "emphasis_placement") {
    if (v == "after_conv") placement = EmphasisPlacement::kAfterConv;
    else if (v == "after_pool") placement = EmphasisPlacement::kAfterPool;
    else fail(ErrorKind::kConfig, "config: emphasis_placement must be after_conv or after_pool");
  } else if (key == "truncated_bptt") truncated_bptt = parse_bool(key, v);
  else if (key == "eval_aggregation") {
    if (v == "final") eval_aggregation = Aggregation::kFinal;
    else if (v == "average") eval_aggregation = Aggregation::kAverage;
    else fail(ErrorKind::kConfig, "config: eval_aggregation must be final or average");
  } else if (key == "phase2_mode") {
    if (v == "rethinking") phase2_mode = Phase2Mode::kRethinking;
    else if (v == "baseline") phase2_mode = Phase2Mode::kBaseline;
    else fail(ErrorKind::kConfig, "config: phase2_mode must be rethinking or baseline");
  } else if (key == "network") {
    if (v == "lenet") network = Architecture::kLeNet;
    else if (v == "compact") network = Architecture::kCompact;
    else fail(ErrorKind::kConfig, "config: network must be lenet or compact");
  } else if (key == "classes") classes = parse_number<std::size_t>(key, v);
  else if (key == "relu_after_conv") relu_after_conv = parse_bool(key, v);
  else if (key == "fc_slope") fc_slope = parse_number<double>(key, v);
  else if (key == "flip") flip = parse_bool(key, v);
  else if (key == "lr_step_epochs") lr_step_epochs = parse_number<std::size_t>(key, v);
  else if (key == "lr_step_gamma") lr_step_gamma = parse_number<double>(key, v);
  else if (key == "eval_interval") eval_interval = parse_number<std::size_t>(key, v);
  else if (key == "eval_batch") eval_batch = parse_number<std::size_t>(key, v);
  else if (key == "max_train") max_train = parse_number<std::size_t>(key, v);
  else if (key == "max_test") max_test = parse_number<std::size_t>(key, v);
  else if (key == "record_time") record_time = parse_bool(key, v);
  else fail(ErrorKind::kConfig, "config: unknown key '" + key + "'");
}

inline std::string TrainConfig::to_text() const {
  using detail::fmt_double;
  std::ostringstream os;
  os << "train_path=" << train_path << '\n'
     << "test_path=" << test_path << '\n'
     << "out_dir=" << out_dir << '\n'
     << "batch_size=" << batch_size << '\n'
     << "lr=" << fmt_double(lr) << '\n'
     << "momentum=" << fmt_double(momentum) << '\n'
     << "weight_decay=" << fmt_double(weight_decay) << '\n'
     << "iterations=" << iterations << '\n'
     << "phase1_epochs=" << phase1_epochs << '\n'
     << "phase2_epochs=" << phase2_epochs << '\n'
     << "seed=" << seed << '\n'
     << "precision=" << (precision == Precision::kSingle ? "single" : "double") << '\n'
     << "normalize=" << (normalize ? "true" : "false") << '\n'
     << "column_major=" << (column_major ? "true" : "false") << '\n'
     << "emphasis_placement="
     << (placement == EmphasisPlacement::kAfterConv ? "after_conv" : "after_pool") << '\n'
     << "truncated_bptt=" << (truncated_bptt ? "true" : "false") << '\n'
     << "eval_aggregation=" << (eval_aggregation == Aggregation::kFinal ? "final" : "average")
     << '\n'
     << "phase2_mode=" << (phase2_mode == Phase2Mode::kRethinking ? "rethinking" : "baseline")
     << '\n'
     << "network=" << (network == Architecture::kLeNet ? "lenet" : "compact") << '\n'
     << "classes=" << classes << '\n'
     << "relu_after_conv=" << (relu_after_conv ? "true" : "false") << '\n'
     << "fc_slope=" << fmt_double(fc_slope) << '\n'
     << "flip=" << (flip ? "true" : "false") << '\n'
     << "lr_step_epochs=" << lr_step_epochs << '\n'
     << "lr_step_gamma=" << fmt_double(lr_step_gamma) << '\n'
     << "eval_interval=" << eval_interval << '\n'
     << "eval_batch=" << eval_batch << '\n'
     << "max_train=" << max_train << '\n'
     << "max_test=" << max_test << '\n'
     << "record_time=" << (record_time ? "true" : "false") << '\n';
  return os.str();
}

inline void TrainConfig::validate() const {
  auto need = [](bool ok, const char* what) {
    if (!ok) fail(ErrorKind::kConfig, std::string("config: ") + what);
  };
  need(batch_size >= 1, "batch_size must be >= 1");
  need(lr > 0, "lr must be positive");
  need(momentum >= 0 && momentum < 1, "momentum must lie in [0,1)");
  need(weight_decay >= 0, "weight_decay must be non-negative");
  need(iterations >= 1, "iterations (T) must be >= 1");
  need(classes >= 2, "classes must be >= 2");
  need(fc_slope >= 0 && fc_slope < 1, "fc_slope must lie in [0,1)");
  need(lr_step_gamma > 0, "lr_step_gamma must be positive");
  need(eval_batch >= 1, "eval_batch must be >= 1");
}

/// Applies `key=value` lines; blank lines and `#` comments are skipped.
inline void apply_config_text(TrainConfig& cfg, const std::string& text,
                              const std::string& origin = "config") {
  std::istringstream is(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      fail(ErrorKind::kConfig, origin + ":" + std::to_string(lineno) + ": expected key=value");
    cfg.set(detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
  }
}

inline TrainConfig load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::kConfig, "config: cannot open '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  TrainConfig cfg;
  apply_config_text(cfg, ss.str(), path);
  return cfg;
}

inline TrainConfig config_from_text(const std::string& text) {
  TrainConfig cfg;
  apply_config_text(cfg, text, "config snapshot");
  return cfg;
}

}  // namespace lrnet
