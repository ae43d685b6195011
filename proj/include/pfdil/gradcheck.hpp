#pragma once

// Central finite-difference checks of the analytic joint-loss and migration
// gradients on small random problems.

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "pfdil/client.hpp"
#include "pfdil/nn.hpp"
#include "pfdil/rng.hpp"

namespace pfdil {

struct GradcheckSpec {
  std::size_t cases = 100;
  double step = 1e-6;
  // Denominator floor of the relative error; components smaller than this
  // are compared in absolute terms.
  double scale_floor = 1e-3;
  RngSeed seed = 7;
};

struct GradcheckReport {
  std::size_t cases = 0;
  std::size_t components = 0;
  double max_rel_error = 0.0;
};

inline double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Random architectures and batches mixing class-only, aux-only and joint
/// labels; every parameter is perturbed.
inline GradcheckReport gradcheck_joint_loss(const GradcheckSpec& spec = {}) {
  GradcheckReport rep;
  Rng rng(derive_seed(spec.seed, {1}));
  std::uniform_int_distribution<std::size_t> dim(2, 6), width(2, 7), depth(1, 2), classes(2, 4), batch(1, 6);
  std::normal_distribution<double> normal(0.0, 1.0);
  const LossSpec kinds[] = {LossSpec::cls, LossSpec::aux, LossSpec::joint};
  for (std::size_t c = 0; c < spec.cases; ++c) {
    ArchSpec arch;
    arch.input_dim = dim(rng);
    arch.hidden_dims.assign(depth(rng), 0);
    for (auto& h : arch.hidden_dims) h = width(rng);
    arch.num_classes = classes(rng);
    PersonalModel model = init_model(arch, rng());
    for (double& v : model.values()) v += 0.1 * normal(rng);  // non-zero biases

    const std::size_t n = batch(rng);
    std::vector<std::vector<double>> xs(n, std::vector<double>(arch.input_dim));
    std::vector<Example> ex;
    const LossSpec kind = kinds[c % 3];
    std::uniform_int_distribution<int> label(0, static_cast<int>(arch.num_classes) - 1), bit(0, 1);
    for (std::size_t i = 0; i < n; ++i) {
      for (double& v : xs[i]) v = normal(rng);
      Example e{xs[i], label(rng), bit(rng)};
      if (kind == LossSpec::joint && i % 3 == 1) e.cls_label = -1;  // negative: aux only
      ex.push_back(e);
    }
    if (kind == LossSpec::joint) ex.front().cls_label = label(rng);

    const auto grads = backward(model, ex, kind);
    auto params = model.values();
    for (std::size_t j = 0; j < params.size(); ++j) {
      const double orig = params[j];
      params[j] = orig + spec.step;
      const double up = batch_loss(model, ex, kind);
      params[j] = orig - spec.step;
      const double down = batch_loss(model, ex, kind);
      params[j] = orig;
      const double numeric = (up - down) / (2.0 * spec.step);
      rep.max_rel_error =
          std::max(rep.max_rel_error, relative_error(grads.values()[j], numeric, spec.scale_floor));
      ++rep.components;
    }
    ++rep.cases;
  }
  return rep;
}

inline GradcheckReport gradcheck_migration(const GradcheckSpec& spec = {}) {
  GradcheckReport rep;
  Rng rng(derive_seed(spec.seed, {2}));
  std::uniform_int_distribution<std::size_t> snaps(1, 4);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (std::size_t c = 0; c < spec.cases; ++c) {
    const std::size_t p = 100;
    std::vector<double> w(p);
    for (double& v : w) v = normal(rng);
    std::vector<std::vector<double>> store(snaps(rng), std::vector<double>(p));
    std::vector<std::span<const double>> anchors;
    std::vector<double> rho;
    for (auto& s : store) {
      for (double& v : s) v = normal(rng);
      anchors.emplace_back(s);
      rho.push_back(unit(rng));
    }
    std::vector<double> grad(p, 0.0);
    add_migration_gradient(w, anchors, rho, grad);
    for (std::size_t j = 0; j < p; ++j) {
      const double orig = w[j];
      w[j] = orig + spec.step;
      const double up = migration_loss(w, anchors, rho);
      w[j] = orig - spec.step;
      const double down = migration_loss(w, anchors, rho);
      w[j] = orig;
      const double numeric = (up - down) / (2.0 * spec.step);
      rep.max_rel_error = std::max(rep.max_rel_error, relative_error(grad[j], numeric, spec.scale_floor));
      ++rep.components;
    }
    ++rep.cases;
  }
  return rep;
}

}  // namespace pfdil
