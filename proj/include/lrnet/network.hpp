#pragma once

#include <cmath>
#include <cstddef>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "lrnet/layers.hpp"
#include "lrnet/rethinking.hpp"
#include "lrnet/tensor.hpp"

namespace lrnet {

enum class LayerKind { kConv, kMaxPool, kDense, kRelu, kEmphasis };

inline const char* to_string(LayerKind k) {
  switch (k) {
    case LayerKind::kConv: return "conv";
    case LayerKind::kMaxPool: return "maxpool";
    case LayerKind::kDense: return "dense";
    case LayerKind::kRelu: return "relu";
    case LayerKind::kEmphasis: return "emphasis";
  }
  return "?";
}

/// One entry of the feedforward stack. Field meaning depends on `kind`:
/// conv uses units/kernel/stride/padding, maxpool uses kernel (window) and
/// stride, dense uses units, relu uses slope, emphasis names its feedback
/// source in `target` (the conv layer whose feature maps it re-weights).
struct LayerSpec {
  LayerKind kind = LayerKind::kConv;
  std::string name;
  std::size_t units = 0;
  std::size_t kernel = 0;
  std::size_t stride = 1;
  std::size_t padding = 0;
  double slope = 0.0;
  std::string target;

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

inline LayerSpec conv_layer(std::string name, std::size_t filters, std::size_t kernel,
                            std::size_t stride = 1, std::size_t padding = 0) {
  return {LayerKind::kConv, std::move(name), filters, kernel, stride, padding, 0.0, {}};
}
inline LayerSpec maxpool_layer(std::string name, std::size_t window, std::size_t stride) {
  return {LayerKind::kMaxPool, std::move(name), 0, window, stride, 0, 0.0, {}};
}
inline LayerSpec dense_layer(std::string name, std::size_t units) {
  return {LayerKind::kDense, std::move(name), units, 0, 1, 0, 0.0, {}};
}
inline LayerSpec relu_layer(std::string name, double slope = 0.0) {
  return {LayerKind::kRelu, std::move(name), 0, 0, 1, 0, slope, {}};
}
inline LayerSpec emphasis_layer(std::string name, std::string target) {
  return {LayerKind::kEmphasis, std::move(name), 0, 0, 1, 0, 0.0, std::move(target)};
}

struct NetworkSpec {
  std::size_t in_channels = 1;
  std::size_t in_height = 28;
  std::size_t in_width = 28;
  std::vector<LayerSpec> layers;
  std::size_t num_classes = 10;
  std::size_t iterations = 1;       // rethinking iterations T
  bool detach_feedback = false;     // truncated BPTT: no gradient into earlier posteriors

  friend bool operator==(const NetworkSpec&, const NetworkSpec&) = default;

  bool has_rethinking() const {
    for (const auto& l : layers)
      if (l.kind == LayerKind::kEmphasis) return true;
    return false;
  }
};

inline std::string head_weight_name(const std::string& emphasis) {
  return emphasis + ".feedback.weight";
}
inline std::string head_bias_name(const std::string& emphasis) {
  return emphasis + ".feedback.bias";
}

/// Input shape of every layer (index i) plus the final output shape (index size()).
/// Validates geometry, emphasis targets, and the classifier width.
inline std::vector<Shape> infer_shapes(const NetworkSpec& spec, std::size_t batch = 1) {
  if (spec.iterations < 1) fail(ErrorKind::kConfig, "network: iterations must be >= 1");
  if (spec.num_classes < 2) fail(ErrorKind::kConfig, "network: need at least 2 classes");
  if (spec.layers.empty()) fail(ErrorKind::kConfig, "network: no layers");
  std::vector<Shape> shapes;
  Shape cur{batch, spec.in_channels, spec.in_height, spec.in_width};
  std::map<std::string, std::size_t> conv_channels;
  std::map<std::string, int> names;
  for (const auto& l : spec.layers) {
    if (l.name.empty() || names[l.name]++ > 0)
      fail(ErrorKind::kConfig, "network: layer names must be unique and non-empty ('" + l.name +
                                   "')");
    shapes.push_back(cur);
    switch (l.kind) {
      case LayerKind::kConv: {
        if (l.units == 0 || l.kernel == 0 || l.stride == 0)
          fail(ErrorKind::kConfig, "network: conv '" + l.name + "' needs filters, kernel, stride");
        ConvParams<float> probe{Tensor<float>({l.units, cur.c, l.kernel, l.kernel}),
                                Tensor<float>(rows(1, l.units)), l.stride, l.padding};
        cur = probe.output_shape(cur);
        conv_channels[l.name] = cur.c;
        break;
      }
      case LayerKind::kMaxPool:
        if (l.kernel == 0 || l.stride == 0 || l.kernel > cur.h || l.kernel > cur.w)
          fail(ErrorKind::kShape, "network: pool '" + l.name + "' window does not fit " +
                                      cur.str());
        cur = {cur.n, cur.c, detail::pooled_extent(cur.h, l.kernel, l.stride),
               detail::pooled_extent(cur.w, l.kernel, l.stride)};
        break;
      case LayerKind::kDense:
        if (l.units == 0) fail(ErrorKind::kConfig, "network: dense '" + l.name + "' has 0 units");
        cur = rows(cur.n, l.units);
        break;
      case LayerKind::kRelu:
        if (l.slope < 0.0 || l.slope >= 1.0)
          fail(ErrorKind::kConfig, "network: relu slope must lie in [0,1)");
        break;
      case LayerKind::kEmphasis: {
        auto it = conv_channels.find(l.target);
        if (it == conv_channels.end())
          fail(ErrorKind::kConfig, "network: emphasis '" + l.name +
                                       "' targets unknown conv layer '" + l.target + "'");
        if (it->second != cur.c)
          fail(ErrorKind::kShape, "network: emphasis '" + l.name + "' sees " +
                                      std::to_string(cur.c) + " channels, target has " +
                                      std::to_string(it->second));
        break;
      }
    }
  }
  if (spec.layers.back().kind != LayerKind::kDense || cur.c != spec.num_classes)
    fail(ErrorKind::kConfig, "network: last layer must be dense with num_classes units");
  shapes.push_back(cur);
  return shapes;
}

/// Line-oriented text form used inside checkpoints.
inline std::string to_text(const NetworkSpec& spec) {
  std::ostringstream os;
  os.precision(17);
  os << "input " << spec.in_channels << ' ' << spec.in_height << ' ' << spec.in_width << '\n'
     << "classes " << spec.num_classes << '\n'
     << "iterations " << spec.iterations << '\n'
     << "detach_feedback " << (spec.detach_feedback ? 1 : 0) << '\n';
  for (const auto& l : spec.layers) {
    os << "layer " << to_string(l.kind) << ' ' << l.name << ' ' << l.units << ' ' << l.kernel
       << ' ' << l.stride << ' ' << l.padding << ' ' << l.slope << ' '
       << (l.target.empty() ? "-" : l.target) << '\n';
  }
  return os.str();
}

inline NetworkSpec spec_from_text(const std::string& text) {
  NetworkSpec spec;
  spec.layers.clear();
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (key == "input") {
      ls >> spec.in_channels >> spec.in_height >> spec.in_width;
    } else if (key == "classes") {
      ls >> spec.num_classes;
    } else if (key == "iterations") {
      ls >> spec.iterations;
    } else if (key == "detach_feedback") {
      int v = 0;
      ls >> v;
      spec.detach_feedback = v != 0;
    } else if (key == "layer") {
      std::string kind;
      LayerSpec l;
      ls >> kind >> l.name >> l.units >> l.kernel >> l.stride >> l.padding >> l.slope >> l.target;
      if (l.target == "-") l.target.clear();
      if (kind == "conv") l.kind = LayerKind::kConv;
      else if (kind == "maxpool") l.kind = LayerKind::kMaxPool;
      else if (kind == "dense") l.kind = LayerKind::kDense;
      else if (kind == "relu") l.kind = LayerKind::kRelu;
      else if (kind == "emphasis") l.kind = LayerKind::kEmphasis;
      else fail(ErrorKind::kData, "network spec: unknown layer kind '" + kind + "'");
      spec.layers.push_back(std::move(l));
    } else {
      fail(ErrorKind::kData, "network spec: unknown key '" + key + "'");
    }
    if (ls.fail()) fail(ErrorKind::kData, "network spec: malformed line '" + line + "'");
  }
  infer_shapes(spec);
  return spec;
}

/// Where emphasis layers go relative to each conv layer.
enum class EmphasisPlacement { kAfterConv, kAfterPool };

struct LeNetOptions {
  bool relu_after_conv = false;
  double fc_slope = 0.0;
  std::size_t classes = 10;
};

/// Two conv layers (20 and 50 filters, 5x5), two 2x2/2 max pools, a 500-unit
/// hidden layer and a 10-way classifier, on 1x28x28 input.
inline NetworkSpec lenet_spec(const LeNetOptions& opt = {}) {
  NetworkSpec s;
  s.in_channels = 1;
  s.in_height = 28;
  s.in_width = 28;
  s.num_classes = opt.classes;
  s.layers.push_back(conv_layer("conv1", 20, 5));
  if (opt.relu_after_conv) s.layers.push_back(relu_layer("relu_c1"));
  s.layers.push_back(maxpool_layer("pool1", 2, 2));
  s.layers.push_back(conv_layer("conv2", 50, 5));
  if (opt.relu_after_conv) s.layers.push_back(relu_layer("relu_c2"));
  s.layers.push_back(maxpool_layer("pool2", 2, 2));
  s.layers.push_back(dense_layer("fc1", 500));
  s.layers.push_back(relu_layer("relu1", opt.fc_slope));
  s.layers.push_back(dense_layer("fc2", opt.classes));
  return s;
}

/// LeNet's layout at a fraction of the width (4 and 6 filters, 32 hidden
/// units) for quick runs on 1x28x28 input.
inline NetworkSpec compact_spec(std::size_t classes = 10) {
  NetworkSpec s;
  s.in_channels = 1;
  s.in_height = 28;
  s.in_width = 28;
  s.num_classes = classes;
  s.layers = {conv_layer("conv1", 4, 5), maxpool_layer("pool1", 2, 2), conv_layer("conv2", 6, 5),
              maxpool_layer("pool2", 2, 2), dense_layer("fc1", 32), relu_layer("relu1"),
              dense_layer("fc2", classes)};
  return s;
}

/// Small two-conv network used for gradient checks: 1x8x8 input, two conv
/// layers of 3 channels, one max pool, a hidden dense layer and the classifier.
inline NetworkSpec tiny_spec(std::size_t classes = 3) {
  NetworkSpec s;
  s.in_channels = 1;
  s.in_height = 8;
  s.in_width = 8;
  s.num_classes = classes;
  s.layers = {conv_layer("conv1", 3, 3), maxpool_layer("pool1", 2, 2), conv_layer("conv2", 3, 2),
              dense_layer("fc1", 6), relu_layer("relu1", 0.1), dense_layer("fc2", classes)};
  return s;
}

/// Inserts one emphasis layer per conv layer and sets the iteration count.
inline NetworkSpec with_rethinking(NetworkSpec base, std::size_t iterations,
                                   EmphasisPlacement placement = EmphasisPlacement::kAfterConv) {
  std::vector<LayerSpec> out;
  std::string pending;  // conv awaiting its emphasis layer (after-pool placement)
  int count = 0;
  auto emit = [&](const std::string& target) {
    out.push_back(emphasis_layer("emph" + std::to_string(++count), target));
  };
  for (const auto& l : base.layers) {
    if (l.kind == LayerKind::kEmphasis) continue;
    out.push_back(l);
    if (l.kind == LayerKind::kConv) {
      if (placement == EmphasisPlacement::kAfterConv) emit(l.name);
      else pending = l.name;
    } else if (l.kind == LayerKind::kMaxPool && !pending.empty()) {
      emit(pending);
      pending.clear();
    }
  }
  if (!pending.empty()) fail(ErrorKind::kConfig, "network: conv '" + pending + "' has no pool");
  base.layers = std::move(out);
  base.iterations = iterations;
  infer_shapes(base);
  return base;
}

/// Strips emphasis layers and resets to a single iteration.
inline NetworkSpec without_rethinking(NetworkSpec spec) {
  std::erase_if(spec.layers, [](const LayerSpec& l) { return l.kind == LayerKind::kEmphasis; });
  spec.iterations = 1;
  return spec;
}

/// Ordered, named parameter tensors.
template <typename Real>
class ParameterSet {
 public:
  using Entry = std::pair<std::string, Tensor<Real>>;

  void add(std::string name, Tensor<Real> t) {
    if (contains(name)) fail(ErrorKind::kConfig, "parameter '" + name + "' already exists");
    entries_.emplace_back(std::move(name), std::move(t));
  }

  bool contains(const std::string& name) const { return find(name) != nullptr; }

  Tensor<Real>& at(const std::string& name) {
    auto* t = const_cast<Tensor<Real>*>(find(name));
    if (!t) fail(ErrorKind::kConfig, "missing parameter '" + name + "'");
    return *t;
  }
  const Tensor<Real>& at(const std::string& name) const {
    const auto* t = find(name);
    if (!t) fail(ErrorKind::kConfig, "missing parameter '" + name + "'");
    return *t;
  }

  std::size_t size() const { return entries_.size(); }
  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  std::size_t scalar_count() const {
    std::size_t total = 0;
    for (const auto& [_, t] : entries_) total += t.size();
    return total;
  }

  ParameterSet zeros_like() const {
    ParameterSet z;
    for (const auto& [name, t] : entries_) z.add(name, Tensor<Real>(t.shape()));
    return z;
  }

  friend bool operator==(const ParameterSet&, const ParameterSet&) = default;

 private:
  const Tensor<Real>* find(const std::string& name) const {
    for (const auto& [n, t] : entries_)
      if (n == name) return &t;
    return nullptr;
  }

  std::vector<Entry> entries_;
};

template <typename Real>
struct Model {
  NetworkSpec spec;
  ParameterSet<Real> params;
};

/// Conv and dense weights uniform in +-1/sqrt(fan_in), every bias zero,
/// every feedback head zero (emphasis starts at exactly 1).
template <typename Real>
ParameterSet<Real> init_parameters(const NetworkSpec& spec, std::mt19937_64& rng) {
  const auto shapes = infer_shapes(spec);
  ParameterSet<Real> ps;
  auto uniform = [&rng](Tensor<Real>& t, double fan_in) {
    std::uniform_real_distribution<double> d(-1.0 / std::sqrt(fan_in), 1.0 / std::sqrt(fan_in));
    for (auto& v : t.data()) v = static_cast<Real>(d(rng));
  };
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const auto& l = spec.layers[i];
    const Shape& in = shapes[i];
    if (l.kind == LayerKind::kConv) {
      Tensor<Real> w({l.units, in.c, l.kernel, l.kernel});
      uniform(w, static_cast<double>(in.c * l.kernel * l.kernel));
      ps.add(l.name + ".weight", std::move(w));
      ps.add(l.name + ".bias", Tensor<Real>(rows(1, l.units)));
    } else if (l.kind == LayerKind::kDense) {
      Tensor<Real> w({l.units, in.sample_size(), 1, 1});
      uniform(w, static_cast<double>(in.sample_size()));
      ps.add(l.name + ".weight", std::move(w));
      ps.add(l.name + ".bias", Tensor<Real>(rows(1, l.units)));
    } else if (l.kind == LayerKind::kEmphasis) {
      ps.add(head_weight_name(l.name), Tensor<Real>({in.c, spec.num_classes, 1, 1}));
      ps.add(head_bias_name(l.name), Tensor<Real>(rows(1, in.c)));
    }
  }
  return ps;
}

/// Adds zero feedback heads for every emphasis layer of `lr_spec` that has
/// none yet; existing parameters are kept unchanged.
template <typename Real>
ParameterSet<Real> attach_heads(const NetworkSpec& lr_spec, ParameterSet<Real> params) {
  const auto shapes = infer_shapes(lr_spec);
  for (std::size_t i = 0; i < lr_spec.layers.size(); ++i) {
    const auto& l = lr_spec.layers[i];
    if (l.kind != LayerKind::kEmphasis || params.contains(head_weight_name(l.name))) continue;
    params.add(head_weight_name(l.name), Tensor<Real>({shapes[i].c, lr_spec.num_classes, 1, 1}));
    params.add(head_bias_name(l.name), Tensor<Real>(rows(1, shapes[i].c)));
  }
  return params;
}

/// Verifies that `params` holds exactly the tensors `spec` needs, with the right shapes.
template <typename Real>
void validate_parameters(const NetworkSpec& spec, const ParameterSet<Real>& params) {
  std::mt19937_64 rng(0);
  const auto expected = init_parameters<Real>(spec, rng);
  if (expected.size() != params.size())
    fail(ErrorKind::kShape, "parameters: expected " + std::to_string(expected.size()) +
                                " tensors, got " + std::to_string(params.size()));
  for (const auto& [name, t] : expected) {
    if (!params.contains(name)) fail(ErrorKind::kShape, "parameters: missing '" + name + "'");
    if (params.at(name).shape() != t.shape())
      fail(ErrorKind::kShape, "parameters: '" + name + "' has shape " +
                                  params.at(name).shape().str() + ", expected " + t.shape().str());
  }
}

template <typename Real>
FeedbackHead<Real> head_for(const ParameterSet<Real>& params, const LayerSpec& emphasis) {
  return {params.at(head_weight_name(emphasis.name)), params.at(head_bias_name(emphasis.name)),
          emphasis.target};
}

/// Per-layer state kept for the backward pass.
template <typename Real>
struct LayerCache {
  Tensor<Real> input;
  PoolRecord pool;
  Tensor<Real> emphasis;
};

template <typename Real>
struct IterationRecord {
  std::vector<LayerCache<Real>> layers;
  std::map<std::string, FeedbackTrace<Real>> feedback;  // keyed by emphasis layer name
  Tensor<Real> logits;
  Tensor<Real> posterior;
  Real loss = 0;
};

template <typename Real>
struct IterationTrace {
  std::vector<IterationRecord<Real>> iterations;
  std::vector<int> labels;  // empty for inference-only runs

  const Tensor<Real>& final_posterior() const { return iterations.back().posterior; }
};

namespace detail {

template <typename Real>
ConvParams<Real> conv_params(const ParameterSet<Real>& ps, const LayerSpec& l) {
  return {ps.at(l.name + ".weight"), ps.at(l.name + ".bias"), l.stride, l.padding};
}

template <typename Real>
DenseParams<Real> dense_params(const ParameterSet<Real>& ps, const LayerSpec& l) {
  return {ps.at(l.name + ".weight"), ps.at(l.name + ".bias")};
}

}  // namespace detail

/// Runs the network T times. Iteration 1 uses all-ones emphasis; iteration
/// t > 1 derives each emphasis vector from iteration t-1's posterior through
/// its feedback head. With labels, every iteration also records its mean
/// cross-entropy loss.
template <typename Real>
IterationTrace<Real> unrolled_forward(const Model<Real>& model, const Tensor<Real>& batch,
                                      std::span<const int> labels = {}) {
  const NetworkSpec& spec = model.spec;
  const Shape& in = batch.shape();
  if (in.c != spec.in_channels || in.h != spec.in_height || in.w != spec.in_width)
    fail(ErrorKind::kShape, "forward: batch " + in.str() + " does not match network input (" +
                                std::to_string(spec.in_channels) + "," +
                                std::to_string(spec.in_height) + "," +
                                std::to_string(spec.in_width) + ")");
  if (!labels.empty() && labels.size() != in.n)
    fail(ErrorKind::kShape, "forward: " + std::to_string(labels.size()) + " labels for batch of " +
                                std::to_string(in.n));
  check_finite(batch, "forward input");

  const auto& layers = spec.layers;
  std::vector<ConvParams<Real>> convs(layers.size());
  std::vector<DenseParams<Real>> denses(layers.size());
  std::vector<FeedbackHead<Real>> heads(layers.size());
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (layers[i].kind == LayerKind::kConv) convs[i] = detail::conv_params(model.params, layers[i]);
    if (layers[i].kind == LayerKind::kDense) denses[i] = detail::dense_params(model.params, layers[i]);
    if (layers[i].kind == LayerKind::kEmphasis) heads[i] = head_for(model.params, layers[i]);
  }

  IterationTrace<Real> trace;
  trace.labels.assign(labels.begin(), labels.end());
  for (std::size_t t = 0; t < spec.iterations; ++t) {
    IterationRecord<Real> rec;
    rec.layers.resize(layers.size());
    Tensor<Real> x = batch;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const LayerSpec& l = layers[i];
      LayerCache<Real>& cache = rec.layers[i];
      switch (l.kind) {
        case LayerKind::kConv: {
          Tensor<Real> y = conv2d_forward(x, convs[i]);
          cache.input = std::move(x);
          x = std::move(y);
          break;
        }
        case LayerKind::kMaxPool: {
          auto r = maxpool_forward(x, l.kernel, l.stride);
          cache.pool = std::move(r.record);
          x = std::move(r.output);
          break;
        }
        case LayerKind::kDense: {
          Tensor<Real> y = dense_forward(x, denses[i]);
          cache.input = std::move(x);
          x = std::move(y);
          break;
        }
        case LayerKind::kRelu: {
          Tensor<Real> y = relu_forward(x, static_cast<Real>(l.slope));
          cache.input = std::move(x);
          x = std::move(y);
          break;
        }
        case LayerKind::kEmphasis: {
          if (t == 0) {
            cache.emphasis = Tensor<Real>(rows(in.n, x.shape().c), Real(1));
          } else {
            auto fb = feedback_forward(heads[i], trace.iterations[t - 1].posterior);
            cache.emphasis = fb.emphasis;
            rec.feedback.emplace(l.name, std::move(fb));
          }
          Tensor<Real> y = emphasis_forward(x, cache.emphasis);
          cache.input = std::move(x);
          x = std::move(y);
          break;
        }
      }
    }
    check_finite(x, "forward logits (iteration " + std::to_string(t + 1) + ")");
    rec.logits = std::move(x);
    rec.posterior = softmax(rec.logits);
    if (!labels.empty()) {
      rec.loss = cross_entropy(rec.posterior, labels).loss;
      if (!std::isfinite(rec.loss))
        fail(ErrorKind::kNumeric, "forward: non-finite loss at iteration " + std::to_string(t + 1));
    }
    trace.iterations.push_back(std::move(rec));
  }
  return trace;
}

/// Sum of the per-iteration losses, equally weighted.
template <typename Real>
Real total_loss(const IterationTrace<Real>& trace) {
  Real sum = 0;
  for (const auto& it : trace.iterations) sum += it.loss;
  return sum;
}

struct BackwardOptions {
  EmphasisGradMutation mutation = EmphasisGradMutation::kNone;
};

/// Gradient of total_loss w.r.t. every parameter, through all iterations and
/// through the feedback path (iteration t's loss reaches iteration t-1's
/// parameters via its posterior unless the spec detaches feedback).
template <typename Real>
ParameterSet<Real> bptt_backward(const Model<Real>& model, const IterationTrace<Real>& trace,
                                 const BackwardOptions& opt = {}) {
  const NetworkSpec& spec = model.spec;
  const auto& layers = spec.layers;
  if (trace.iterations.size() != spec.iterations)
    fail(ErrorKind::kShape, "backward: trace has " + std::to_string(trace.iterations.size()) +
                                " iterations, network expects " + std::to_string(spec.iterations));
  if (trace.labels.empty()) fail(ErrorKind::kConfig, "backward: trace was recorded without labels");

  ParameterSet<Real> grads = model.params.zeros_like();
  std::vector<ConvParams<Real>> convs(layers.size());
  std::vector<DenseParams<Real>> denses(layers.size());
  std::vector<FeedbackHead<Real>> heads(layers.size());
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (layers[i].kind == LayerKind::kConv) convs[i] = detail::conv_params(model.params, layers[i]);
    if (layers[i].kind == LayerKind::kDense) denses[i] = detail::dense_params(model.params, layers[i]);
    if (layers[i].kind == LayerKind::kEmphasis) heads[i] = head_for(model.params, layers[i]);
  }

  const std::size_t steps = trace.iterations.size();
  // Gradient w.r.t. each iteration's posterior arriving from later iterations.
  std::vector<Tensor<Real>> grad_posterior(steps);

  for (std::size_t t = steps; t-- > 0;) {
    const IterationRecord<Real>& rec = trace.iterations[t];
    if (rec.layers.size() != layers.size())
      fail(ErrorKind::kShape, "backward: trace layer count does not match network");
    Tensor<Real> g = cross_entropy(rec.posterior, trace.labels).grad_logits;
    if (!grad_posterior[t].empty()) g += softmax_backward(rec.posterior, grad_posterior[t]);

    for (std::size_t i = layers.size(); i-- > 0;) {
      const LayerSpec& l = layers[i];
      const LayerCache<Real>& cache = rec.layers[i];
      switch (l.kind) {
        case LayerKind::kConv: {
          auto lg = conv2d_backward(cache.input, convs[i], g);
          grads.at(l.name + ".weight") += lg.weights;
          grads.at(l.name + ".bias") += lg.bias;
          g = std::move(lg.input);
          break;
        }
        case LayerKind::kMaxPool:
          g = maxpool_backward(cache.pool, g);
          break;
        case LayerKind::kDense: {
          auto lg = dense_backward(cache.input, denses[i], g);
          grads.at(l.name + ".weight") += lg.weights;
          grads.at(l.name + ".bias") += lg.bias;
          g = std::move(lg.input);
          break;
        }
        case LayerKind::kRelu:
          g = relu_backward(cache.input, g, static_cast<Real>(l.slope));
          break;
        case LayerKind::kEmphasis: {
          auto eg = emphasis_backward(cache.input, cache.emphasis, g, opt.mutation);
          g = std::move(eg.input);
          if (t == 0) break;  // iteration 1 uses constant emphasis
          auto fit = rec.feedback.find(l.name);
          if (fit == rec.feedback.end())
            fail(ErrorKind::kShape, "backward: missing feedback trace for '" + l.name + "'");
          auto fg = feedback_backward(heads[i], fit->second, eg.emphasis);
          grads.at(head_weight_name(l.name)) += fg.weights;
          grads.at(head_bias_name(l.name)) += fg.bias;
          if (!spec.detach_feedback) {
            if (grad_posterior[t - 1].empty()) grad_posterior[t - 1] = std::move(fg.posterior);
            else grad_posterior[t - 1] += fg.posterior;
          }
          break;
        }
      }
    }
  }
  return grads;
}

}  // namespace lrnet
