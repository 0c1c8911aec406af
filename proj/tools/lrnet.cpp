// Command-line driver: train, eval, gradcheck, inspect-emphasis, preview.
//
// Exit codes: 0 success, 1 usage or configuration error, 2 data error,
// 3 numerical failure (non-finite loss or failed gradient check).

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "lrnet/checkpoint.hpp"
#include "lrnet/config.hpp"
#include "lrnet/eval.hpp"
#include "lrnet/gradcheck.hpp"
#include "lrnet/inspect.hpp"
#include "lrnet/trainer.hpp"

namespace {

using namespace lrnet;

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitNumeric = 3;

int exit_code(ErrorKind k) {
  switch (k) {
    case ErrorKind::kConfig: return kExitUsage;
    case ErrorKind::kNumeric: return kExitNumeric;
    case ErrorKind::kData:
    case ErrorKind::kShape: return kExitData;
  }
  return kExitUsage;
}

struct TrainArgs {
  std::string config_file;
  std::vector<std::string> overrides;
  std::string train_path, test_path, out_dir;
  std::optional<std::uint64_t> seed;
};

TrainConfig resolve_config(const TrainArgs& a) {
  TrainConfig cfg = a.config_file.empty() ? TrainConfig{} : load_config_file(a.config_file);
  for (const auto& kv : a.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) fail(ErrorKind::kConfig, "--set expects key=value, got '" + kv + "'");
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (!a.train_path.empty()) cfg.train_path = a.train_path;
  if (!a.test_path.empty()) cfg.test_path = a.test_path;
  if (!a.out_dir.empty()) cfg.out_dir = a.out_dir;
  if (a.seed) cfg.seed = *a.seed;
  cfg.validate();
  return cfg;
}

template <typename Real>
int run_train(const TrainConfig& cfg) {
  std::cout << "# resolved config\n" << cfg.to_text() << "# seed " << cfg.seed << '\n';
  const auto train_set = load_split<Real>(cfg.train_path, "train", cfg.normalize, cfg.max_train,
                                          cfg.column_major);
  std::optional<Dataset<Real>> test_set;
  if (!cfg.test_path.empty())
    test_set = load_split<Real>(cfg.test_path, "test", cfg.normalize, cfg.max_test,
                                cfg.column_major);
  std::cout << "train samples " << train_set.size() << ", test samples "
            << (test_set ? test_set->size() : 0) << '\n';

  auto state = initial_state<Real>(cfg);
  std::filesystem::create_directories(cfg.out_dir);
  std::ofstream(std::filesystem::path(cfg.out_dir) / "config.txt") << cfg.to_text();
  const auto outcome = train(state, train_set, test_set ? &*test_set : nullptr, std::cout);
  if (outcome.phase1_test)
    std::cout << "phase 1 test error "
              << outcome.phase1_test->select(cfg.eval_aggregation).error_rate() << "%\n";
  if (outcome.final_test)
    std::cout << "final test error "
              << outcome.final_test->select(cfg.eval_aggregation).error_rate() << "%\n";
  return kExitOk;
}

struct EvalArgs {
  std::string checkpoint, data;
  std::vector<std::size_t> ks{1};
  std::string precision;
  std::optional<bool> normalize;
  std::size_t batch = 500;
  std::size_t max_samples = 0;
};

bool use_double(const std::string& flag, const std::string& checkpoint) {
  if (flag.empty()) return checkpoint_value_bytes(checkpoint) == 8;
  if (flag == "double") return true;
  if (flag == "single" || flag == "float") return false;
  fail(ErrorKind::kConfig, "--precision must be single or double");
}

template <typename Real>
int run_eval(const EvalArgs& a) {
  const auto ck = load_checkpoint<Real>(a.checkpoint);
  const bool normalize = a.normalize.value_or(ck.config.normalize);
  std::cout << "# checkpoint " << a.checkpoint << " (phase " << ck.phase << ", epoch " << ck.epoch
            << ", T = " << ck.model.spec.iterations << ")\n"
            << "# seed " << ck.config.seed << "\n# data " << a.data
            << "\n# normalize " << (normalize ? "true" : "false") << '\n';
  const auto data =
      load_split<Real>(a.data, "eval", normalize, a.max_samples, ck.config.column_major);
  const auto report = evaluate(ck.model, data, a.ks, a.batch);
  std::cout << format_report(report);
  return kExitOk;
}

struct GradcheckArgs {
  double tolerance = 1e-5;
  double step = 1e-5;
  std::uint64_t seed = 1;
  bool mutate = false;
};

int run_gradcheck(const GradcheckArgs& a) {
  GradcheckOptions opt;
  opt.tolerance = a.tolerance;
  opt.step = a.step;
  opt.seed = a.seed;
  if (a.mutate) opt.backward.mutation = EmphasisGradMutation::kDropSpatialSum;
  std::cout << "# tolerance " << a.tolerance << "  step " << a.step << "  seed " << a.seed
            << "  (absolute differences below 1e-9 count as agreement)"
            << (a.mutate ? "  (mutated backward)" : "") << '\n';
  bool ok = true;
  for (const auto& c : gradcheck_suite(opt)) {
    std::cout << c.name << '\n';
    for (const auto& t : c.report.tensors) {
      std::printf("  %-22s %-4s probed %4zu  max rel %.3e  max abs %.3e  (rel, |g| > 1e-6: %.3e)\n",
                  t.name.c_str(), t.passed ? "ok" : "FAIL", t.probed, t.max_rel_error,
                  t.max_abs_error, t.max_rel_error_significant);
    }
    ok = ok && c.report.passed();
  }
  std::cout << (ok ? "PASS" : "FAIL") << '\n';
  return ok ? kExitOk : kExitNumeric;
}

struct InspectArgs {
  std::string checkpoint, data, out;
  std::vector<int> classes{7, 9};
  double high = 0.8, low = 0.6;
  std::optional<bool> normalize;
};

template <typename Real>
int run_inspect(const InspectArgs& a) {
  if (a.classes.size() != 2) fail(ErrorKind::kConfig, "--classes expects two labels");
  const auto ck = load_checkpoint<Real>(a.checkpoint);
  const bool normalize = a.normalize.value_or(ck.config.normalize);
  std::cout << "# checkpoint " << a.checkpoint << "\n# seed " << ck.config.seed << "\n# classes "
            << a.classes[0] << ',' << a.classes[1] << "  high > " << a.high << "  low < " << a.low
            << '\n';
  const auto data = load_split<Real>(a.data, "inspect", normalize, 0, ck.config.column_major);
  InspectOptions opt{a.classes[0], a.classes[1], a.high, a.low, 500};
  const auto r = inspect_emphasis(ck.model, data, opt);
  if (a.out.empty() || a.out == "-") {
    write_inspection_csv(r, std::cout);
  } else {
    std::ofstream os(a.out);
    if (!os) fail(ErrorKind::kData, "cannot write '" + a.out + "'");
    write_inspection_csv(r, os);
    std::cout << r.samples.size() << " samples written to " << a.out << '\n';
  }
  for (const auto& [key, c] : r.cosine)
    std::cout << "# cosine " << key.first << ' ' << key.second << ' ' << c << '\n';
  return kExitOk;
}

struct PreviewArgs {
  std::string data;
  std::size_t index = 0;
  bool column_major = false;
};

int run_preview(const PreviewArgs& a) {
  const auto d = load_source<double>(a.data, "preview");
  if (a.index >= d.size())
    fail(ErrorKind::kConfig, "index " + std::to_string(a.index) + " outside [0," +
                                 std::to_string(d.size()) + ")");
  const auto img = d.images.sample(a.index);
  const auto [lo, hi] = std::minmax_element(img.begin(), img.end());
  const double range = std::max(*hi - *lo, 1e-12);
  static const char ramp[] = " .:-=+*#%@";
  std::cout << "# sample " << a.index << (a.column_major ? " (read column-major)" : "") << '\n';
  for (std::size_t y = 0; y < kImageSide; ++y) {
    for (std::size_t x = 0; x < kImageSide; ++x) {
      const std::size_t i = a.column_major ? x * kImageSide + y : y * kImageSide + x;
      const auto level = static_cast<std::size_t>((img[i] - *lo) / range * 9.0 + 0.5);
      std::cout << ramp[std::min<std::size_t>(level, 9)] << ramp[std::min<std::size_t>(level, 9)];
    }
    std::cout << '\n';
  }
  std::cout << "label " << d.labels[a.index] << '\n';
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Recurrent feedback CNN trainer"};
  app.require_subcommand(1);

  TrainArgs ta;
  auto* train_cmd = app.add_subcommand("train", "two-phase training: baseline, then rethinking");
  train_cmd->add_option("-c,--config", ta.config_file, "key=value config file");
  train_cmd->add_option("-s,--set", ta.overrides, "override a config key (key=value)");
  train_cmd->add_option("--train", ta.train_path, "training AMAT file or synthetic:N[:SEED]");
  train_cmd->add_option("--test", ta.test_path, "test AMAT file or synthetic:N[:SEED]");
  train_cmd->add_option("-o,--out", ta.out_dir, "output directory");
  train_cmd->add_option("--seed", ta.seed, "random seed");

  EvalArgs ea;
  auto* eval_cmd = app.add_subcommand("eval", "per-iteration top-k accuracy and confidence");
  eval_cmd->add_option("checkpoint", ea.checkpoint)->required();
  eval_cmd->add_option("data", ea.data, "AMAT file or synthetic:N[:SEED]")->required();
  eval_cmd->add_option("-k", ea.ks, "top-k values")->delimiter(',');
  eval_cmd->add_option("--precision", ea.precision, "single or double (default: as stored)");
  eval_cmd->add_option("--normalize", ea.normalize, "override the checkpoint's setting");
  eval_cmd->add_option("--batch", ea.batch);
  eval_cmd->add_option("--max-samples", ea.max_samples);

  GradcheckArgs ga;
  auto* grad_cmd = app.add_subcommand("gradcheck", "finite-difference check of every gradient");
  grad_cmd->add_option("--tolerance", ga.tolerance);
  grad_cmd->add_option("--step", ga.step);
  grad_cmd->add_option("--seed", ga.seed);
  grad_cmd->add_flag("--mutate", ga.mutate, "break the emphasis backward pass on purpose");

  InspectArgs ia;
  auto* insp_cmd = app.add_subcommand("inspect-emphasis", "emphasis vectors at t=2 for two classes");
  insp_cmd->add_option("checkpoint", ia.checkpoint)->required();
  insp_cmd->add_option("data", ia.data)->required();
  insp_cmd->add_option("--classes", ia.classes)->delimiter(',')->expected(2);
  insp_cmd->add_option("--high", ia.high, "t=1 confidence above this is high");
  insp_cmd->add_option("--low", ia.low, "t=1 confidence below this is low");
  insp_cmd->add_option("--normalize", ia.normalize);
  insp_cmd->add_option("-o,--out", ia.out, "CSV path (default stdout)");

  PreviewArgs pa;
  auto* prev_cmd = app.add_subcommand("preview", "ascii rendering of one sample");
  prev_cmd->add_option("data", pa.data)->required();
  prev_cmd->add_option("index", pa.index)->required();
  prev_cmd->add_flag("--column-major", pa.column_major, "read pixels column by column");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*train_cmd) {
      const auto cfg = resolve_config(ta);
      return cfg.precision == Precision::kDouble ? run_train<double>(cfg) : run_train<float>(cfg);
    }
    if (*eval_cmd)
      return use_double(ea.precision, ea.checkpoint) ? run_eval<double>(ea) : run_eval<float>(ea);
    if (*grad_cmd) return run_gradcheck(ga);
    if (*insp_cmd)
      return use_double({}, ia.checkpoint) ? run_inspect<double>(ia) : run_inspect<float>(ia);
    if (*prev_cmd) return run_preview(pa);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code(e.kind());
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  }
  return kExitUsage;
}
