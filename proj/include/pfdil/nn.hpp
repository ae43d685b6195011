#pragma once

// Dense MLP with a shared ReLU trunk feeding two affine heads: a C-way
// classification head and a single-logit auxiliary (task membership) head.
// All parameters of one model live in a single flat buffer, laid out
// trunk -> cls_head -> aux_head, each layer as row-major weights then bias.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "pfdil/error.hpp"
#include "pfdil/rng.hpp"

namespace pfdil {

struct ArchSpec {
  std::size_t input_dim = 0;
  std::vector<std::size_t> hidden_dims{64, 32};
  std::size_t num_classes = 0;

  std::size_t trunk_depth() const noexcept { return hidden_dims.size(); }
  std::size_t feature_dim() const noexcept { return hidden_dims.empty() ? input_dim : hidden_dims.back(); }

  void validate() const {
    if (input_dim == 0) throw InputError("arch: input_dim must be positive");
    if (num_classes == 0) throw InputError("arch: num_classes must be positive");
    if (hidden_dims.empty()) throw InputError("arch: hidden_dims must be non-empty");
    for (std::size_t h : hidden_dims)
      if (h == 0) throw InputError("arch: hidden_dims entries must be positive");
  }

  friend bool operator==(const ArchSpec&, const ArchSpec&) = default;
};

struct LayerShape {
  std::size_t out_dim = 0;
  std::size_t in_dim = 0;
  std::size_t offset = 0;  // into the flat parameter buffer

  std::size_t weight_count() const noexcept { return out_dim * in_dim; }
  std::size_t size() const noexcept { return weight_count() + out_dim; }
  std::size_t end() const noexcept { return offset + size(); }
};

/// Half-open index range into the flat parameter buffer.
struct ParamRange {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t size() const noexcept { return end - begin; }
};

class Layout {
 public:
  Layout() = default;

  explicit Layout(const ArchSpec& arch) {
    std::size_t offset = 0;
    std::size_t in = arch.input_dim;
    for (std::size_t h : arch.hidden_dims) {
      layers_.push_back({h, in, offset});
      offset += layers_.back().size();
      in = h;
    }
    layers_.push_back({arch.num_classes, in, offset});
    offset += layers_.back().size();
    layers_.push_back({1, in, offset});
    offset += layers_.back().size();
    total_ = offset;
  }

  std::size_t num_layers() const noexcept { return layers_.size(); }
  std::size_t trunk_depth() const noexcept { return layers_.size() - 2; }
  const LayerShape& layer(std::size_t i) const { return layers_.at(i); }
  const LayerShape& cls_head() const { return layers_[layers_.size() - 2]; }
  const LayerShape& aux_head() const { return layers_.back(); }
  std::size_t total() const noexcept { return total_; }

  ParamRange trunk_range() const noexcept { return {0, cls_head().offset}; }
  ParamRange cls_range() const noexcept { return {cls_head().offset, cls_head().end()}; }
  ParamRange aux_range() const noexcept { return {aux_head().offset, aux_head().end()}; }

 private:
  std::vector<LayerShape> layers_;
  std::size_t total_ = 0;
};

/// Non-owning view of one affine layer's weights (out x in, row-major) and bias.
template <typename T>
struct LayerView {
  std::size_t out_dim;
  std::size_t in_dim;
  std::span<T> weights;
  std::span<T> bias;

  T& w(std::size_t row, std::size_t col) const { return weights[row * in_dim + col]; }
};

/// Flat parameter buffer with per-layer views. Base for models and gradients.
class ParameterSet {
 public:
  ParameterSet() = default;

  explicit ParameterSet(ArchSpec arch) : arch_(std::move(arch)) {
    arch_.validate();
    layout_ = Layout(arch_);
    values_.assign(layout_.total(), 0.0);
  }

  const ArchSpec& arch() const noexcept { return arch_; }
  const Layout& layout() const noexcept { return layout_; }
  std::size_t parameter_count() const noexcept { return values_.size(); }

  std::span<double> values() noexcept { return values_; }
  std::span<const double> values() const noexcept { return values_; }

  std::span<double> values(ParamRange r) noexcept { return std::span<double>(values_).subspan(r.begin, r.size()); }
  std::span<const double> values(ParamRange r) const noexcept {
    return std::span<const double>(values_).subspan(r.begin, r.size());
  }

  LayerView<double> layer(std::size_t i) { return view<double>(values_, layout_.layer(i)); }
  LayerView<const double> layer(std::size_t i) const { return view<const double>(values_, layout_.layer(i)); }

  LayerView<double> cls_head() { return layer(layout_.num_layers() - 2); }
  LayerView<const double> cls_head() const { return layer(layout_.num_layers() - 2); }
  LayerView<double> aux_head() { return layer(layout_.num_layers() - 1); }
  LayerView<const double> aux_head() const { return layer(layout_.num_layers() - 1); }

  bool congruent_with(const ParameterSet& other) const noexcept { return arch_ == other.arch_; }

  friend bool operator==(const ParameterSet& a, const ParameterSet& b) {
    return a.arch_ == b.arch_ && a.values_ == b.values_;
  }

 private:
  template <typename T, typename Buf>
  static LayerView<T> view(Buf& buf, const LayerShape& s) {
    std::span<T> all(buf);
    return {s.out_dim, s.in_dim, all.subspan(s.offset, s.weight_count()),
            all.subspan(s.offset + s.weight_count(), s.out_dim)};
  }

  ArchSpec arch_;
  Layout layout_;
  std::vector<double> values_;
};

/// Target classifier w = trunk + cls_head and auxiliary classifier
/// theta = trunk + aux_head. The trunk exists once; both heads read it.
class PersonalModel : public ParameterSet {
 public:
  using ParameterSet::ParameterSet;
};

class GradientSet : public ParameterSet {
 public:
  using ParameterSet::ParameterSet;

  static GradientSet zeros_like(const ParameterSet& p) { return GradientSet(p.arch()); }

  GradientSet& operator+=(const GradientSet& other) {
    if (!congruent_with(other)) throw InputError("gradient sets are not shape-congruent");
    auto a = values();
    auto b = other.values();
    for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
    return *this;
  }
};

/// Glorot-uniform weights, zero biases. Draw order: layers in buffer order, row-major.
inline PersonalModel init_model(const ArchSpec& arch, RngSeed seed) {
  PersonalModel model(arch);
  Rng rng(seed);
  for (std::size_t i = 0; i < model.layout().num_layers(); ++i) {
    auto layer = model.layer(i);
    const double limit = std::sqrt(6.0 / static_cast<double>(layer.in_dim + layer.out_dim));
    std::uniform_real_distribution<double> dist(-limit, limit);
    for (double& w : layer.weights) w = dist(rng);
  }
  return model;
}

inline double sigmoid(double z) noexcept {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

inline constexpr double kProbEpsilon = 1e-12;

/// Softmax with max subtraction.
inline std::vector<double> softmax(std::span<const double> logits) {
  std::vector<double> p(logits.begin(), logits.end());
  if (p.empty()) return p;
  const double m = *std::max_element(p.begin(), p.end());
  double sum = 0.0;
  for (double& v : p) {
    v = std::exp(v - m);
    sum += v;
  }
  for (double& v : p) v /= sum;
  return p;
}

inline double softmax_cross_entropy(std::span<const double> logits, int label) {
  if (label < 0 || static_cast<std::size_t>(label) >= logits.size())
    throw InputError("softmax_cross_entropy: label " + std::to_string(label) + " out of range [0, " +
                     std::to_string(logits.size()) + ")");
  const auto y = static_cast<std::size_t>(label);
  const double m = *std::max_element(logits.begin(), logits.end());
  if (logits[y] == m) {
    // log1p keeps full relative precision when the loss is near zero.
    double rest = 0.0;
    for (std::size_t k = 0; k < logits.size(); ++k)
      if (k != y) rest += std::exp(logits[k] - m);
    return std::log1p(rest);
  }
  double sum = 0.0;
  for (double v : logits) sum += std::exp(v - m);
  return std::log(sum) + m - logits[y];
}

inline double binary_cross_entropy(double score, int label) {
  if (label != 0 && label != 1) throw InputError("binary_cross_entropy: label must be 0 or 1");
  const double s = std::clamp(score, kProbEpsilon, 1.0 - kProbEpsilon);
  return label == 1 ? -std::log(s) : -std::log1p(-s);
}

/// BCE evaluated from the logit; this is what training differentiates.
inline double binary_cross_entropy_logit(double logit, int label) noexcept {
  return std::max(logit, 0.0) - logit * static_cast<double>(label) + std::log1p(std::exp(-std::abs(logit)));
}

struct ForwardCache {
  // activations[0] is the input, activations[i + 1] the post-ReLU output of trunk layer i.
  std::vector<std::vector<double>> activations;
  std::vector<std::vector<double>> pre_activations;

  std::span<const double> features() const { return activations.back(); }
};

struct ForwardResult {
  std::vector<double> class_logits;
  double aux_logit = 0.0;
  double aux_score = 0.5;  // sigmoid(aux_logit), clamped into (0, 1)
  ForwardCache cache;
};

namespace detail {

// out = W * in + b
inline void affine(LayerView<const double> layer, std::span<const double> in, std::span<double> out) {
  for (std::size_t r = 0; r < layer.out_dim; ++r) {
    const double* row = layer.weights.data() + r * layer.in_dim;
    double acc = layer.bias[r];
    for (std::size_t c = 0; c < layer.in_dim; ++c) acc += row[c] * in[c];
    out[r] = acc;
  }
}

inline void check_input(const ArchSpec& arch, std::span<const double> x) {
  if (x.size() != arch.input_dim)
    throw InputError("forward: input has " + std::to_string(x.size()) + " features, model expects " +
                     std::to_string(arch.input_dim));
}

}  // namespace detail

/// Trunk features only (no cache).
inline std::vector<double> trunk_features(const PersonalModel& model, std::span<const double> x) {
  detail::check_input(model.arch(), x);
  std::vector<double> h(x.begin(), x.end());
  for (std::size_t i = 0; i < model.layout().trunk_depth(); ++i) {
    auto layer = model.layer(i);
    std::vector<double> z(layer.out_dim);
    detail::affine(layer, h, z);
    for (double& v : z) v = std::max(v, 0.0);
    h = std::move(z);
  }
  return h;
}

inline ForwardResult forward(const PersonalModel& model, std::span<const double> x) {
  detail::check_input(model.arch(), x);
  ForwardResult out;
  auto& acts = out.cache.activations;
  auto& pre = out.cache.pre_activations;
  acts.emplace_back(x.begin(), x.end());
  for (std::size_t i = 0; i < model.layout().trunk_depth(); ++i) {
    auto layer = model.layer(i);
    std::vector<double> z(layer.out_dim);
    detail::affine(layer, acts.back(), z);
    std::vector<double> h(z.size());
    for (std::size_t j = 0; j < z.size(); ++j) h[j] = std::max(z[j], 0.0);
    pre.push_back(std::move(z));
    acts.push_back(std::move(h));
  }
  out.class_logits.resize(model.arch().num_classes);
  detail::affine(model.cls_head(), acts.back(), out.class_logits);
  double a = 0.0;
  detail::affine(model.aux_head(), acts.back(), std::span<double>(&a, 1));
  out.aux_logit = a;
  out.aux_score = std::clamp(sigmoid(a), kProbEpsilon, 1.0 - kProbEpsilon);
  return out;
}

/// Auxiliary classifier output f(x; theta) only.
inline double aux_score(const PersonalModel& model, std::span<const double> x) {
  const auto h = trunk_features(model, x);
  double a = 0.0;
  detail::affine(model.aux_head(), h, std::span<double>(&a, 1));
  return std::clamp(sigmoid(a), kProbEpsilon, 1.0 - kProbEpsilon);
}

inline std::vector<double> class_probabilities(const PersonalModel& model, std::span<const double> x) {
  const auto h = trunk_features(model, x);
  std::vector<double> logits(model.arch().num_classes);
  detail::affine(model.cls_head(), h, logits);
  return softmax(logits);
}

enum class LossSpec { cls, aux, joint };

/// One training example. A label of -1 means "not labelled for that head".
struct Example {
  std::span<const double> x;
  int cls_label = -1;
  int aux_label = -1;
};

struct LossGradient {
  double loss = 0.0;  // cls_loss + aux_loss for the requested spec
  double cls_loss = 0.0;
  double aux_loss = 0.0;
  GradientSet grads;
};

namespace detail {

struct LossCounts {
  std::size_t cls = 0;
  std::size_t aux = 0;
};

inline LossCounts count_labels(const ArchSpec& arch, std::span<const Example> batch, LossSpec spec) {
  if (batch.empty()) throw InputError("backward: empty batch");
  LossCounts n;
  for (const auto& e : batch) {
    if (e.cls_label >= 0) {
      if (static_cast<std::size_t>(e.cls_label) >= arch.num_classes)
        throw InputError("backward: class label out of range");
      ++n.cls;
    }
    if (e.aux_label >= 0) {
      if (e.aux_label > 1) throw InputError("backward: aux label must be 0 or 1");
      ++n.aux;
    }
  }
  const bool want_cls = spec != LossSpec::aux;
  const bool want_aux = spec != LossSpec::cls;
  if (want_cls && n.cls == 0 && !(spec == LossSpec::joint && n.aux > 0))
    throw InputError("backward: no class-labelled examples for the classification loss");
  if (want_aux && n.aux == 0 && !(spec == LossSpec::joint && n.cls > 0))
    throw InputError("backward: no aux-labelled examples for the auxiliary loss");
  if (!want_cls) n.cls = 0;
  if (!want_aux) n.aux = 0;
  return n;
}

}  // namespace detail

/// Mean loss over the batch: CE averaged over class-labelled examples plus
/// BCE averaged over aux-labelled examples (whichever `spec` selects).
inline double batch_loss(const PersonalModel& model, std::span<const Example> batch, LossSpec spec) {
  const auto n = detail::count_labels(model.arch(), batch, spec);
  double cls = 0.0, aux = 0.0;
  for (const auto& e : batch) {
    const bool use_cls = n.cls > 0 && e.cls_label >= 0;
    const bool use_aux = n.aux > 0 && e.aux_label >= 0;
    if (!use_cls && !use_aux) continue;
    const auto f = forward(model, e.x);
    if (use_cls) cls += softmax_cross_entropy(f.class_logits, e.cls_label);
    if (use_aux) aux += binary_cross_entropy_logit(f.aux_logit, e.aux_label);
  }
  return (n.cls ? cls / static_cast<double>(n.cls) : 0.0) + (n.aux ? aux / static_cast<double>(n.aux) : 0.0);
}

/// Analytic gradient of `batch_loss`. Under `joint` the trunk accumulates both
/// heads' backpropagated signals; each head only sees its own loss.
inline LossGradient loss_and_gradient(const PersonalModel& model, std::span<const Example> batch, LossSpec spec) {
  const auto n = detail::count_labels(model.arch(), batch, spec);
  const auto& layout = model.layout();
  const std::size_t depth = layout.trunk_depth();
  const std::size_t num_classes = model.arch().num_classes;

  LossGradient out{0.0, 0.0, 0.0, GradientSet::zeros_like(model)};
  auto& g = out.grads;
  const double cls_scale = n.cls ? 1.0 / static_cast<double>(n.cls) : 0.0;
  const double aux_scale = n.aux ? 1.0 / static_cast<double>(n.aux) : 0.0;

  std::vector<double> delta_cls(num_classes);
  std::vector<double> dh, dz;

  for (const auto& e : batch) {
    const bool use_cls = n.cls > 0 && e.cls_label >= 0;
    const bool use_aux = n.aux > 0 && e.aux_label >= 0;
    if (!use_cls && !use_aux) continue;

    const auto f = forward(model, e.x);
    const auto& acts = f.cache.activations;
    const auto& feat = acts.back();
    dh.assign(feat.size(), 0.0);

    if (use_cls) {
      out.cls_loss += softmax_cross_entropy(f.class_logits, e.cls_label) * cls_scale;
      const auto p = softmax(f.class_logits);
      for (std::size_t c = 0; c < num_classes; ++c)
        delta_cls[c] = (p[c] - (static_cast<int>(c) == e.cls_label ? 1.0 : 0.0)) * cls_scale;
      auto gh = g.cls_head();
      auto wh = model.cls_head();
      for (std::size_t c = 0; c < num_classes; ++c) {
        const double d = delta_cls[c];
        gh.bias[c] += d;
        for (std::size_t j = 0; j < feat.size(); ++j) {
          gh.w(c, j) += d * feat[j];
          dh[j] += wh.w(c, j) * d;
        }
      }
    }
    if (use_aux) {
      out.aux_loss += binary_cross_entropy_logit(f.aux_logit, e.aux_label) * aux_scale;
      const double d = (sigmoid(f.aux_logit) - static_cast<double>(e.aux_label)) * aux_scale;
      auto ga = g.aux_head();
      auto wa = model.aux_head();
      ga.bias[0] += d;
      for (std::size_t j = 0; j < feat.size(); ++j) {
        ga.w(0, j) += d * feat[j];
        dh[j] += wa.w(0, j) * d;
      }
    }

    for (std::size_t li = depth; li-- > 0;) {
      const auto& z = f.cache.pre_activations[li];
      const auto& in = acts[li];
      dz.resize(z.size());
      for (std::size_t r = 0; r < z.size(); ++r) dz[r] = z[r] > 0.0 ? dh[r] : 0.0;
      auto gl = g.layer(li);
      auto wl = model.layer(li);
      std::vector<double> dprev(in.size(), 0.0);
      for (std::size_t r = 0; r < z.size(); ++r) {
        const double d = dz[r];
        if (d == 0.0) continue;
        gl.bias[r] += d;
        double* grow = gl.weights.data() + r * gl.in_dim;
        const double* wrow = wl.weights.data() + r * wl.in_dim;
        for (std::size_t c = 0; c < in.size(); ++c) {
          grow[c] += d * in[c];
          dprev[c] += wrow[c] * d;
        }
      }
      dh = std::move(dprev);
    }
  }
  out.loss = out.cls_loss + out.aux_loss;
  return out;
}

inline GradientSet backward(const PersonalModel& model, std::span<const Example> batch, LossSpec spec) {
  return loss_and_gradient(model, batch, spec).grads;
}

/// p <- p - lr * (g + weight_decay * p), restricted to `range`.
inline void sgd_step(PersonalModel& model, const GradientSet& grads, double lr, double weight_decay, ParamRange range) {
  if (!(lr > 0.0)) throw InputError("sgd_step: lr must be positive");
  if (!(weight_decay >= 0.0)) throw InputError("sgd_step: weight_decay must be non-negative");
  if (!model.congruent_with(grads)) throw InputError("sgd_step: gradient shape does not match model");
  auto p = model.values();
  auto g = grads.values();
  for (std::size_t i = range.begin; i < range.end; ++i) p[i] -= lr * (g[i] + weight_decay * p[i]);
}

inline void sgd_step(PersonalModel& model, const GradientSet& grads, double lr, double weight_decay) {
  sgd_step(model, grads, lr, weight_decay, ParamRange{0, model.parameter_count()});
}

inline double squared_norm(std::span<const double> v) noexcept {
  double s = 0.0;
  for (double x : v) s += x * x;
  return s;
}

inline bool all_finite(std::span<const double> v) noexcept {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

}  // namespace pfdil
