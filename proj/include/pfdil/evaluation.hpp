#pragma once

// Auxiliary-weighted ensemble inference over a client's pool and the
// experiment metrics built on top of it.

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include "pfdil/client.hpp"
#include "pfdil/data.hpp"
#include "pfdil/nn.hpp"

namespace pfdil {

inline constexpr double kEnsembleZeroThreshold = 1e-12;

/// alpha_i = f(theta_i; x) / sum_j f(theta_j; x), uniform when the sum vanishes.
inline std::vector<double> normalize_scores(std::span<const double> scores) {
  if (scores.empty()) throw InputError("ensemble_weights: empty pool");
  double sum = 0.0;
  for (double s : scores) sum += s;
  std::vector<double> w(scores.size());
  if (!(sum >= kEnsembleZeroThreshold)) {
    std::fill(w.begin(), w.end(), 1.0 / static_cast<double>(scores.size()));
    return w;
  }
  for (std::size_t i = 0; i < scores.size(); ++i) w[i] = scores[i] / sum;
  return w;
}

inline std::vector<double> ensemble_weights(std::span<const PersonalModel> pool, std::span<const double> x) {
  if (pool.empty()) throw InputError("ensemble_weights: empty pool");
  std::vector<double> scores;
  scores.reserve(pool.size());
  for (const auto& m : pool) scores.push_back(aux_score(m, x));
  return normalize_scores(scores);
}

/// sum_i alpha_i * softmax(cls_logits_i(x)).
inline std::vector<double> ensemble_predict(std::span<const PersonalModel> pool, std::span<const double> x) {
  if (pool.empty()) throw InputError("ensemble_predict: empty pool");
  const std::size_t c = pool.front().arch().num_classes;
  std::vector<double> scores, probs(c, 0.0);
  std::vector<std::vector<double>> per_model;
  for (const auto& m : pool) {
    const auto h = trunk_features(m, x);
    std::vector<double> logits(c);
    detail::affine(m.cls_head(), h, logits);
    double a = 0.0;
    detail::affine(m.aux_head(), h, std::span<double>(&a, 1));
    scores.push_back(std::clamp(sigmoid(a), kProbEpsilon, 1.0 - kProbEpsilon));
    per_model.push_back(softmax(logits));
  }
  const auto alpha = normalize_scores(scores);
  for (std::size_t i = 0; i < pool.size(); ++i)
    for (std::size_t k = 0; k < c; ++k) probs[k] += alpha[i] * per_model[i][k];
  return probs;
}

/// How a client turns its pool into one prediction.
enum class InferenceRule {
  ensemble,      // aux-weighted soft ensemble (pfeddil mode)
  single_model,  // pool[0] (FedAvg, Source-Only)
  task_oracle,   // model bound to the known task id (Disjoint, Sharing)
};

namespace detail {

// Model bound to `task`; falls back to the latest binding before it, then the earliest one.
inline std::size_t oracle_index(const ClientState& state, int task) {
  if (state.task_bindings.empty()) throw InvariantError("evaluate: client has no bound models");
  if (auto it = state.task_bindings.find(task); it != state.task_bindings.end()) return it->second;
  auto it = state.task_bindings.lower_bound(task);
  if (it == state.task_bindings.begin()) return it->second;
  return std::prev(it)->second;
}

}  // namespace detail

inline std::vector<double> predict_distribution(const ClientState& state, InferenceRule rule, int task,
                                                std::span<const double> x) {
  if (state.pool.empty()) throw InvariantError("evaluate: empty pool");
  switch (rule) {
    case InferenceRule::ensemble: return ensemble_predict(state.pool, x);
    case InferenceRule::single_model: return class_probabilities(state.pool.front(), x);
    case InferenceRule::task_oracle: return class_probabilities(state.pool.at(detail::oracle_index(state, task)), x);
  }
  return {};
}

inline int predict_label(const ClientState& state, InferenceRule rule, int task, std::span<const double> x) {
  const auto p = predict_distribution(state, rule, task, x);
  return static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
}

inline double accuracy(const ClientState& state, InferenceRule rule, int task, const Samples& test) {
  if (test.empty()) return 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < test.size(); ++i)
    if (predict_label(state, rule, task, test.x(i)) == test.y(i)) ++hits;
  return static_cast<double>(hits) / static_cast<double>(test.size());
}

/// Accuracy on each of the client's first tasks; `test_sets[m]` is the test
/// set of the client's m-th task.
inline std::vector<double> evaluate_client(const ClientState& state, InferenceRule rule,
                                           std::span<const Samples* const> test_sets) {
  std::vector<double> acc;
  acc.reserve(test_sets.size());
  for (std::size_t m = 0; m < test_sets.size(); ++m)
    acc.push_back(accuracy(state, rule, static_cast<int>(m), *test_sets[m]));
  return acc;
}

/// Sum of -log p(y|x) over `data` under the client's inference rule.
inline double inference_loss_sum(const ClientState& state, InferenceRule rule, int task, const Samples& data) {
  double sum = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto p = predict_distribution(state, rule, task, data.x(i));
    sum -= std::log(std::max(p[static_cast<std::size_t>(data.y(i))], std::numeric_limits<double>::min()));
  }
  return sum;
}

/// Evaluation grid of one client: accuracy[n][m] for m <= n, and the weight
/// (test-set size) of each task column.
struct ClientEvaluation {
  std::vector<std::vector<double>> accuracy;
  std::vector<double> weights;
};

struct MetricsMatrix {
  std::vector<std::vector<double>> A;  // A[n][m], m <= n
  double avg_final = 0.0;
  std::vector<double> diag;
  std::vector<double> final_row;
  std::vector<double> forgetting;
  double mean_forgetting = 0.0;  // over all tasks but the last
  double global_objective = 0.0;

  std::size_t num_tasks() const noexcept { return A.size(); }
};

inline MetricsMatrix build_metrics(std::span<const ClientEvaluation> clients) {
  if (clients.empty()) throw InvariantError("build_metrics: no clients");
  const std::size_t n_tasks = clients.front().accuracy.size();
  if (n_tasks == 0) throw InvariantError("build_metrics: empty evaluation grid");
  for (const auto& c : clients) {
    if (c.accuracy.size() != n_tasks || c.weights.size() < n_tasks)
      throw InvariantError("build_metrics: evaluation grid has missing rows");
    for (std::size_t n = 0; n < n_tasks; ++n)
      if (c.accuracy[n].size() != n + 1) throw InvariantError("build_metrics: evaluation grid has missing cells");
  }

  MetricsMatrix mm;
  mm.A.assign(n_tasks, {});
  for (std::size_t n = 0; n < n_tasks; ++n) {
    mm.A[n].assign(n + 1, 0.0);
    for (std::size_t m = 0; m <= n; ++m) {
      double num = 0.0, den = 0.0;
      for (const auto& c : clients) {
        num += c.weights[m] * c.accuracy[n][m];
        den += c.weights[m];
      }
      mm.A[n][m] = den > 0.0 ? num / den : 0.0;
    }
  }
  const std::size_t last = n_tasks - 1;
  mm.final_row = mm.A[last];
  for (std::size_t n = 0; n < n_tasks; ++n) mm.diag.push_back(mm.A[n][n]);
  double sum = 0.0;
  for (double a : mm.final_row) sum += a;
  mm.avg_final = sum / static_cast<double>(n_tasks);
  mm.forgetting.assign(n_tasks, 0.0);
  for (std::size_t m = 0; m < n_tasks; ++m) {
    double best = mm.A[m][m];
    for (std::size_t n = m; n < n_tasks; ++n) best = std::max(best, mm.A[n][m]);
    mm.forgetting[m] = best - mm.A[last][m];
  }
  if (n_tasks > 1) {
    double f = 0.0;
    for (std::size_t m = 0; m < last; ++m) f += mm.forgetting[m];
    mm.mean_forgetting = f / static_cast<double>(last);
  }
  return mm;
}

}  // namespace pfdil
