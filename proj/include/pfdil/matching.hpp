#pragma once

// Auxiliary (task-membership) classifiers, knowledge matching intensity and
// the new-model / reuse decision.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pfdil/data.hpp"
#include "pfdil/error.hpp"
#include "pfdil/nn.hpp"
#include "pfdil/rng.hpp"

namespace pfdil {

/// How negatives for the auxiliary classifier are made from current-task
/// positives. A fraction `permute_fraction` get a random coordinate
/// permutation; the rest get additive Gaussian noise with per-feature sigma
/// `noise_sigma_scale * std_j` (std_j measured on the shard).
struct NegativeSynthesisSpec {
  double noise_sigma_scale = 1.5;
  double permute_fraction = 0.5;

  void validate() const {
    if (!(permute_fraction >= 0.0 && permute_fraction <= 1.0))
      throw InputError("negatives: permute_fraction must be in [0, 1]");
    if (permute_fraction < 1.0 && !(noise_sigma_scale > 0.0))
      throw InputError("negatives: noise_sigma_scale must be positive when noise negatives are used");
  }
};

/// Per-feature population standard deviation; zero-variance features get 1.
inline std::vector<double> feature_std(const Samples& s) {
  const std::size_t d = s.dim();
  std::vector<double> mean(d, 0.0), var(d, 0.0);
  if (s.empty()) return std::vector<double>(d, 1.0);
  for (std::size_t i = 0; i < s.size(); ++i) {
    auto x = s.x(i);
    for (std::size_t j = 0; j < d; ++j) mean[j] += x[j];
  }
  for (double& m : mean) m /= static_cast<double>(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) {
    auto x = s.x(i);
    for (std::size_t j = 0; j < d; ++j) var[j] += (x[j] - mean[j]) * (x[j] - mean[j]);
  }
  for (double& v : var) {
    v = std::sqrt(v / static_cast<double>(s.size()));
    if (v < 1e-8) v = 1.0;
  }
  return var;
}

class NegativeSynthesizer {
 public:
  NegativeSynthesizer(const Samples& shard, NegativeSynthesisSpec spec) : spec_(spec), std_(feature_std(shard)) {
    spec_.validate();
  }

  /// Writes one negative derived from `positive` into `out`.
  void synthesize(std::span<const double> positive, std::span<double> out, Rng& rng) const {
    std::bernoulli_distribution use_permute(spec_.permute_fraction);
    if (use_permute(rng)) {
      std::vector<std::size_t> perm(positive.size());
      std::iota(perm.begin(), perm.end(), std::size_t{0});
      std::shuffle(perm.begin(), perm.end(), rng);
      for (std::size_t j = 0; j < perm.size(); ++j) out[j] = positive[perm[j]];
    } else {
      std::normal_distribution<double> normal(0.0, 1.0);
      for (std::size_t j = 0; j < positive.size(); ++j)
        out[j] = positive[j] + spec_.noise_sigma_scale * std_[j] * normal(rng);
    }
  }

  Samples synthesize_all(const Samples& positives, Rng& rng) const {
    Samples out(positives.dim());
    out.reserve(positives.size());
    std::vector<double> buf(positives.dim());
    for (std::size_t i = 0; i < positives.size(); ++i) {
      synthesize(positives.x(i), buf, rng);
      out.push_back(buf, 0);
    }
    return out;
  }

 private:
  NegativeSynthesisSpec spec_;
  std::vector<double> std_;
};

/// A minibatch of positives plus one synthesized negative per positive.
/// `with_class_labels` attaches the class target to positives (joint training).
class BalancedBatch {
 public:
  BalancedBatch(const Samples& shard, std::span<const std::size_t> indices, const NegativeSynthesizer* negatives,
                bool with_class_labels, Rng& rng)
      : negatives_(shard.dim()) {
    if (negatives != nullptr) {
      negatives_.reserve(indices.size());
      std::vector<double> buf(shard.dim());
      for (std::size_t i : indices) {
        negatives->synthesize(shard.x(i), buf, rng);
        negatives_.push_back(buf, 0);
      }
    }
    for (std::size_t i : indices)
      examples_.push_back({shard.x(i), with_class_labels ? shard.y(i) : -1, negatives != nullptr ? 1 : -1});
    for (std::size_t i = 0; i < negatives_.size(); ++i) examples_.push_back({negatives_.x(i), -1, 0});
  }

  std::span<const Example> examples() const noexcept { return examples_; }

  std::size_t positives() const noexcept { return examples_.size() - negatives_.size(); }
  std::size_t negatives() const noexcept { return negatives_.size(); }

 private:
  Samples negatives_;
  std::vector<Example> examples_;
};

struct AuxTrainingSpec {
  std::size_t epochs = 1;
  double lr = 1e-3;
  std::size_t batch_size = 32;
  double weight_decay = 0.0;
  bool update_trunk = false;  // standalone default trains the head only
};

/// Minimizes BCE(positives = shard, negatives = synthesized) on the auxiliary
/// head. Trunk stays frozen unless `spec.update_trunk`.
inline void train_auxiliary(PersonalModel& model, const Samples& shard, const NegativeSynthesisSpec& neg_spec,
                            const AuxTrainingSpec& spec, Rng& rng) {
  if (shard.empty()) throw InputError("train_auxiliary: empty shard");
  if (spec.batch_size == 0) throw InputError("train_auxiliary: batch_size must be positive");
  if (spec.epochs == 0) return;
  const NegativeSynthesizer synth(shard, neg_spec);
  const ParamRange range = spec.update_trunk
                               ? ParamRange{0, model.parameter_count()}
                               : model.layout().aux_range();
  std::vector<std::size_t> order(shard.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t e = 0; e < spec.epochs; ++e) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += spec.batch_size) {
      const std::size_t end = std::min(order.size(), start + spec.batch_size);
      BalancedBatch batch(shard, std::span<const std::size_t>(order).subspan(start, end - start), &synth, false, rng);
      const auto grads = backward(model, batch.examples(), LossSpec::aux);
      sgd_step(model, grads, spec.lr, spec.weight_decay, range);
    }
  }
}

/// rho_i = mean over the shard of f(x; theta_i). Empty pool gives an empty vector.
inline std::vector<double> matching_intensity(std::span<const PersonalModel> pool, const Samples& shard) {
  if (pool.empty()) return {};
  if (shard.empty()) throw InputError("matching_intensity: empty shard");
  std::vector<double> rho;
  rho.reserve(pool.size());
  for (const auto& model : pool) {
    double sum = 0.0;
    for (std::size_t i = 0; i < shard.size(); ++i) sum += aux_score(model, shard.x(i));
    rho.push_back(sum / static_cast<double>(shard.size()));
  }
  return rho;
}

struct StrategyDecision {
  enum class Kind { new_model, reuse };
  Kind kind = Kind::new_model;
  std::size_t model_index = 0;  // meaningful for reuse

  static StrategyDecision new_model() { return {Kind::new_model, 0}; }
  static StrategyDecision reuse(std::size_t m) { return {Kind::reuse, m}; }
  bool is_reuse() const noexcept { return kind == Kind::reuse; }

  friend bool operator==(const StrategyDecision&, const StrategyDecision&) = default;
};

struct MatchingReport {
  std::vector<double> rho;
  double lambda = 0.0;
  StrategyDecision decision;
  bool budget_forced = false;
};

/// Lowest index among the maxima.
inline std::size_t argmax_lowest(std::span<const double> v) {
  if (v.empty()) throw InputError("argmax of empty vector");
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

/// Reuse the best-matching model when max(rho) >= lambda, otherwise start a
/// new model while the pool has room; at the budget, reuse the best match.
inline MatchingReport select_strategy(std::span<const double> rho, double lambda, std::size_t pool_size,
                                      std::size_t max_pool_size) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw InputError("select_strategy: lambda must be in [0, 1]");
  if (rho.size() != pool_size) throw InputError("select_strategy: rho length must equal pool size");
  MatchingReport report{std::vector<double>(rho.begin(), rho.end()), lambda, StrategyDecision::new_model(), false};
  if (pool_size == 0) return report;
  const std::size_t m = argmax_lowest(rho);
  if (rho[m] >= lambda) {
    report.decision = StrategyDecision::reuse(m);
  } else if (pool_size >= max_pool_size) {
    report.decision = StrategyDecision::reuse(m);
    report.budget_forced = true;
  }
  return report;
}

}  // namespace pfdil
