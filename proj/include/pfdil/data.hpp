#pragma once

// Synthetic domain-incremental task generation and Dirichlet non-IID
// client partitioning.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "pfdil/binary_io.hpp"
#include "pfdil/error.hpp"
#include "pfdil/rng.hpp"

namespace pfdil {

/// Feature/label pairs in flat row-major storage.
class Samples {
 public:
  Samples() = default;
  explicit Samples(std::size_t dim) : dim_(dim) {}

  std::size_t dim() const noexcept { return dim_; }
  std::size_t size() const noexcept { return labels_.size(); }
  bool empty() const noexcept { return labels_.empty(); }

  std::span<const double> x(std::size_t i) const {
    return std::span<const double>(features_).subspan(i * dim_, dim_);
  }
  std::span<double> x(std::size_t i) { return std::span<double>(features_).subspan(i * dim_, dim_); }
  int y(std::size_t i) const { return labels_[i]; }

  void push_back(std::span<const double> x, int y) {
    if (x.size() != dim_) throw InputError("Samples: feature dimension mismatch");
    features_.insert(features_.end(), x.begin(), x.end());
    labels_.push_back(y);
  }

  void reserve(std::size_t n) {
    features_.reserve(n * dim_);
    labels_.reserve(n);
  }

  Samples subset(std::span<const std::size_t> indices) const {
    Samples out(dim_);
    out.reserve(indices.size());
    for (std::size_t i : indices) out.push_back(x(i), y(i));
    return out;
  }

  std::span<const double> features() const noexcept { return features_; }
  std::span<const int> labels() const noexcept { return labels_; }

  friend bool operator==(const Samples&, const Samples&) = default;

 private:
  std::size_t dim_ = 0;
  std::vector<double> features_;
  std::vector<int> labels_;
};

// Domain transforms act on features only.
struct Identity {
  friend bool operator==(const Identity&, const Identity&) = default;
};

/// Rotation by `angle` radians in each of the coordinate planes (0,1), (2,3), ...
/// of the first `planes` pairs; planes == 0 means every available pair.
struct Rotation {
  double angle = 0.0;
  std::size_t planes = 0;
  friend bool operator==(const Rotation&, const Rotation&) = default;
};

/// x' = matrix * x + shift with a square row-major matrix.
struct Affine {
  std::vector<double> matrix;
  std::vector<double> shift;
  friend bool operator==(const Affine&, const Affine&) = default;
};

/// Additive isotropic Gaussian noise drawn fresh per sample.
struct Noise {
  double sigma = 0.0;
  friend bool operator==(const Noise&, const Noise&) = default;
};

/// x'[i] = x[permutation[i]].
struct Permute {
  std::vector<std::size_t> permutation;
  friend bool operator==(const Permute&, const Permute&) = default;
};

using DomainTransform = std::variant<Identity, Rotation, Affine, Noise, Permute>;

struct DomainSpec {
  std::string name;
  std::vector<DomainTransform> composition;  // applied in order
  friend bool operator==(const DomainSpec&, const DomainSpec&) = default;
};

struct TaskDataset {
  int task_id = 0;
  DomainSpec domain;
  std::size_t num_classes = 0;
  Samples train;
  Samples test;

  std::size_t input_dim() const noexcept { return train.dim(); }
};

struct HeterogeneityConfig {
  double alpha = 1.0;
  std::size_t num_clients = 1;
  RngSeed seed = 0;
};

struct ClientShard {
  std::size_t client_id = 0;
  std::vector<std::size_t> indices;  // into the task's train set
  Samples train;
};

/// Isotropic Gaussian clusters, one per class, with means on the sphere of
/// radius `class_separation`. Split 80/20 per class.
inline TaskDataset make_base_dataset(std::size_t num_classes, std::size_t input_dim, std::size_t samples_per_class,
                                     double class_separation, RngSeed seed, double cluster_sigma = 1.0) {
  if (num_classes < 2) throw InputError("make_base_dataset: need at least 2 classes");
  if (input_dim < 2) throw InputError("make_base_dataset: input_dim must be at least 2");
  if (samples_per_class < 2) throw InputError("make_base_dataset: need at least 2 samples per class");
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);

  std::vector<std::vector<double>> means(num_classes, std::vector<double>(input_dim));
  for (auto& mu : means) {
    double norm = 0.0;
    do {
      norm = 0.0;
      for (double& v : mu) {
        v = normal(rng);
        norm += v * v;
      }
    } while (norm < 1e-12);
    norm = std::sqrt(norm);
    for (double& v : mu) v *= class_separation / norm;
  }

  TaskDataset ds;
  ds.num_classes = num_classes;
  ds.domain = DomainSpec{"identity", {Identity{}}};
  ds.train = Samples(input_dim);
  ds.test = Samples(input_dim);

  const std::size_t train_per_class =
      std::clamp<std::size_t>(static_cast<std::size_t>(std::llround(0.8 * static_cast<double>(samples_per_class))), 1,
                              samples_per_class - 1);
  std::vector<std::pair<std::vector<double>, int>> train, test;
  std::vector<double> x(input_dim);
  for (std::size_t c = 0; c < num_classes; ++c) {
    for (std::size_t i = 0; i < samples_per_class; ++i) {
      for (std::size_t j = 0; j < input_dim; ++j) x[j] = means[c][j] + cluster_sigma * normal(rng);
      (i < train_per_class ? train : test).emplace_back(x, static_cast<int>(c));
    }
  }
  std::shuffle(train.begin(), train.end(), rng);
  std::shuffle(test.begin(), test.end(), rng);
  for (auto& [v, y] : train) ds.train.push_back(v, y);
  for (auto& [v, y] : test) ds.test.push_back(v, y);
  return ds;
}

namespace detail {

struct TransformApplier {
  std::span<double> x;
  Rng& rng;
  std::vector<double>& scratch;

  void operator()(const Identity&) const {}

  void operator()(const Rotation& r) const {
    const std::size_t max_planes = x.size() / 2;
    const std::size_t planes = r.planes == 0 ? max_planes : r.planes;
    const double c = std::cos(r.angle), s = std::sin(r.angle);
    for (std::size_t p = 0; p < planes; ++p) {
      const double a = x[2 * p], b = x[2 * p + 1];
      x[2 * p] = c * a - s * b;
      x[2 * p + 1] = s * a + c * b;
    }
  }

  void operator()(const Affine& t) const {
    const std::size_t d = x.size();
    scratch.assign(d, 0.0);
    for (std::size_t i = 0; i < d; ++i) {
      double acc = t.shift.empty() ? 0.0 : t.shift[i];
      for (std::size_t j = 0; j < d; ++j) acc += t.matrix[i * d + j] * x[j];
      scratch[i] = acc;
    }
    std::copy(scratch.begin(), scratch.end(), x.begin());
  }

  void operator()(const Noise& n) const {
    std::normal_distribution<double> normal(0.0, 1.0);
    for (double& v : x) v += n.sigma * normal(rng);
  }

  void operator()(const Permute& p) const {
    scratch.assign(x.begin(), x.end());
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = scratch[p.permutation[i]];
  }
};

struct TransformValidator {
  std::size_t dim;

  void operator()(const Identity&) const {}
  void operator()(const Rotation& r) const {
    if (r.planes * 2 > dim) throw InputError("rotation: " + std::to_string(r.planes) + " planes exceed input_dim");
    if (dim < 2) throw InputError("rotation: input_dim must be at least 2");
  }
  void operator()(const Affine& t) const {
    if (t.matrix.size() != dim * dim) throw InputError("affine: matrix must be input_dim x input_dim");
    if (!t.shift.empty() && t.shift.size() != dim) throw InputError("affine: shift must have input_dim entries");
  }
  void operator()(const Noise& n) const {
    if (!(n.sigma >= 0.0)) throw InputError("noise: sigma must be non-negative");
  }
  void operator()(const Permute& p) const {
    if (p.permutation.size() != dim) throw InputError("permute: permutation must have input_dim entries");
    std::vector<bool> seen(dim, false);
    for (std::size_t i : p.permutation) {
      if (i >= dim || seen[i]) throw InputError("permute: not a permutation");
      seen[i] = true;
    }
  }
};

inline Samples transform_samples(const Samples& in, const DomainSpec& domain, Rng& rng) {
  Samples out = in;
  std::vector<double> scratch;
  for (std::size_t i = 0; i < out.size(); ++i) {
    for (const auto& t : domain.composition) std::visit(TransformApplier{out.x(i), rng, scratch}, t);
  }
  return out;
}

}  // namespace detail

/// Applies `domain` to every train and test sample; labels unchanged. Noise
/// draws come from a stream keyed by (seed, task_id).
inline TaskDataset apply_domain(const TaskDataset& base, const DomainSpec& domain, int task_id, RngSeed seed = 0) {
  for (const auto& t : domain.composition) std::visit(detail::TransformValidator{base.input_dim()}, t);
  TaskDataset out;
  out.task_id = task_id;
  out.domain = domain;
  out.num_classes = base.num_classes;
  Rng train_rng(derive_seed(seed, Stream::domain, {static_cast<std::uint64_t>(task_id), 0}));
  Rng test_rng(derive_seed(seed, Stream::domain, {static_cast<std::uint64_t>(task_id), 1}));
  out.train = detail::transform_samples(base.train, domain, train_rng);
  out.test = detail::transform_samples(base.test, domain, test_rng);
  return out;
}

namespace detail {

/// Splits `n` items by proportions with largest-remainder rounding (ties to lower index).
inline std::vector<std::size_t> largest_remainder(std::span<const double> proportions, std::size_t n) {
  const std::size_t k = proportions.size();
  std::vector<std::size_t> counts(k, 0);
  std::vector<std::pair<double, std::size_t>> rema;
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < k; ++i) {
    const double exact = proportions[i] * static_cast<double>(n);
    counts[i] = static_cast<std::size_t>(std::floor(exact));
    assigned += counts[i];
    rema.emplace_back(exact - std::floor(exact), i);
  }
  std::stable_sort(rema.begin(), rema.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t i = 0; assigned < n; i = (i + 1) % k, ++assigned) counts[rema[i].second] += 1;
  return counts;
}

inline std::vector<double> sample_dirichlet(double alpha, std::size_t k, Rng& rng) {
  std::gamma_distribution<double> gamma(alpha, 1.0);
  std::vector<double> p(k);
  double sum = 0.0;
  for (double& v : p) {
    v = gamma(rng);
    sum += v;
  }
  if (!(sum > 0.0)) {
    // Every gamma draw underflowed (tiny alpha): all mass on one client.
    std::uniform_int_distribution<std::size_t> pick(0, k - 1);
    std::fill(p.begin(), p.end(), 0.0);
    p[pick(rng)] = 1.0;
    return p;
  }
  for (double& v : p) v /= sum;
  return p;
}

}  // namespace detail

/// Per class: p ~ Dir(alpha * 1_K), shuffle that class's indices, cut at the
/// largest-remainder counts. Returns one shard per client; shards may be empty.
inline std::vector<ClientShard> dirichlet_partition(const TaskDataset& task, const HeterogeneityConfig& cfg) {
  if (cfg.num_clients == 0) throw InputError("dirichlet_partition: need at least one client");
  if (!(cfg.alpha > 0.0)) throw InputError("dirichlet_partition: alpha must be positive");
  Rng rng(cfg.seed);
  const std::size_t k = cfg.num_clients;

  std::vector<std::vector<std::size_t>> by_class(task.num_classes);
  for (std::size_t i = 0; i < task.train.size(); ++i) {
    const int y = task.train.y(i);
    if (y < 0 || static_cast<std::size_t>(y) >= task.num_classes) throw InputError("dirichlet_partition: bad label");
    by_class[static_cast<std::size_t>(y)].push_back(i);
  }

  std::vector<ClientShard> shards(k);
  for (std::size_t c = 0; c < k; ++c) shards[c].client_id = c;
  for (auto& idx : by_class) {
    const auto p = detail::sample_dirichlet(cfg.alpha, k, rng);
    std::shuffle(idx.begin(), idx.end(), rng);
    const auto counts = detail::largest_remainder(p, idx.size());
    std::size_t pos = 0;
    for (std::size_t c = 0; c < k; ++c) {
      shards[c].indices.insert(shards[c].indices.end(), idx.begin() + static_cast<std::ptrdiff_t>(pos),
                               idx.begin() + static_cast<std::ptrdiff_t>(pos + counts[c]));
      pos += counts[c];
    }
  }
  for (auto& s : shards) {
    std::sort(s.indices.begin(), s.indices.end());
    s.train = task.train.subset(s.indices);
  }
  return shards;
}

enum class StreamMode { synchronized, shuffled };

/// Per-client ordered lists of domain indices. Each domain appears exactly once per client.
inline std::vector<std::vector<std::size_t>> build_task_stream(std::size_t num_domains, std::size_t num_clients,
                                                               StreamMode mode, RngSeed seed) {
  if (num_domains == 0) throw InputError("build_task_stream: need at least one domain");
  std::vector<std::size_t> order(num_domains);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<std::vector<std::size_t>> streams(num_clients, order);
  if (mode == StreamMode::shuffled) {
    for (std::size_t k = 0; k < num_clients; ++k) {
      Rng rng(derive_seed(seed, Stream::task_stream, {k}));
      std::shuffle(streams[k].begin(), streams[k].end(), rng);
    }
  }
  return streams;
}

// Dataset file: "PFDS" | u32 version | i32 task_id | u32 num_classes | u32 dim
//   | u64 n_train | (f64[dim] x, i32 y) * n_train | u64 n_test | same for test
inline constexpr std::uint32_t kDatasetVersion = 1;

namespace detail {

inline void write_samples(io::BinaryWriter& w, const Samples& s) {
  w.u64(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) {
    w.f64s(s.x(i));
    w.i32(s.y(i));
  }
}

inline Samples read_samples(io::BinaryReader& r, std::size_t dim, std::size_t num_classes) {
  const std::uint64_t n = r.u64();
  if (n > (1ULL << 32)) throw DataError(r.context() + ": implausible sample count");
  Samples s(dim);
  s.reserve(n);
  std::vector<double> x(dim);
  for (std::uint64_t i = 0; i < n; ++i) {
    r.f64s(x);
    const int y = r.i32();
    if (y < 0 || static_cast<std::size_t>(y) >= num_classes) throw DataError(r.context() + ": label out of range");
    for (double v : x)
      if (!std::isfinite(v)) throw DataError(r.context() + ": non-finite feature");
    s.push_back(x, y);
  }
  return s;
}

}  // namespace detail

inline void write_dataset(std::ostream& out, const TaskDataset& ds) {
  io::BinaryWriter w(out);
  w.magic("PFDS");
  w.u32(kDatasetVersion);
  w.i32(ds.task_id);
  w.u32(static_cast<std::uint32_t>(ds.num_classes));
  w.u32(static_cast<std::uint32_t>(ds.input_dim()));
  detail::write_samples(w, ds.train);
  detail::write_samples(w, ds.test);
  w.check();
}

/// Reads features and labels; the domain description lives in the JSON manifest.
inline TaskDataset read_dataset(std::istream& in, const std::string& context = "dataset") {
  io::BinaryReader r(in, context);
  r.expect_magic("PFDS");
  const auto version = r.u32();
  if (version != kDatasetVersion) throw DataError(context + ": unsupported dataset version " + std::to_string(version));
  TaskDataset ds;
  ds.task_id = r.i32();
  ds.num_classes = r.u32();
  const std::size_t dim = r.u32();
  if (ds.num_classes < 2 || dim == 0) throw DataError(context + ": bad header");
  ds.train = detail::read_samples(r, dim, ds.num_classes);
  ds.test = detail::read_samples(r, dim, ds.num_classes);
  return ds;
}

/// Fingerprint of the serialized train/test data of a task list.
inline std::uint64_t dataset_hash(std::span<const TaskDataset> tasks) {
  std::ostringstream buf(std::ios::binary);
  for (const auto& t : tasks) write_dataset(buf, t);
  return io::fnv1a64(buf.str());
}

}  // namespace pfdil
