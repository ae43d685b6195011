#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <set>
#include <sstream>
#include <vector>

#include "catch_amalgamated.hpp"
#include "pfdil/data.hpp"

using namespace pfdil;
using Catch::Matchers::WithinAbs;

namespace {

double norm(std::span<const double> x) {
  double s = 0.0;
  for (double v : x) s += v * v;
  return std::sqrt(s);
}

// Plain full-batch logistic regression, used as an independent probe.
double logistic_probe_accuracy(const TaskDataset& ds) {
  const std::size_t d = ds.input_dim();
  std::vector<double> w(d, 0.0);
  double b = 0.0;
  for (int it = 0; it < 300; ++it) {
    std::vector<double> gw(d, 0.0);
    double gb = 0.0;
    for (std::size_t i = 0; i < ds.train.size(); ++i) {
      const auto x = ds.train.x(i);
      double z = b;
      for (std::size_t j = 0; j < d; ++j) z += w[j] * x[j];
      const double err = 1.0 / (1.0 + std::exp(-z)) - ds.train.y(i);
      for (std::size_t j = 0; j < d; ++j) gw[j] += err * x[j];
      gb += err;
    }
    const double n = static_cast<double>(ds.train.size());
    for (std::size_t j = 0; j < d; ++j) w[j] -= 0.1 * gw[j] / n;
    b -= 0.1 * gb / n;
  }
  std::size_t hits = 0;
  for (std::size_t i = 0; i < ds.test.size(); ++i) {
    const auto x = ds.test.x(i);
    double z = b;
    for (std::size_t j = 0; j < d; ++j) z += w[j] * x[j];
    hits += (z > 0.0 ? 1 : 0) == ds.test.y(i);
  }
  return static_cast<double>(hits) / static_cast<double>(ds.test.size());
}

TaskDataset labelled_only(std::size_t classes, std::size_t per_class) {
  TaskDataset ds;
  ds.num_classes = classes;
  ds.train = Samples(1);
  ds.test = Samples(1);
  const std::vector<double> x{0.0};
  for (std::size_t c = 0; c < classes; ++c)
    for (std::size_t i = 0; i < per_class; ++i) ds.train.push_back(x, static_cast<int>(c));
  return ds;
}

void check_partition(const TaskDataset& ds, const std::vector<ClientShard>& shards) {
  std::vector<int> seen(ds.train.size(), 0);
  for (const auto& s : shards) {
    REQUIRE(s.indices.size() == s.train.size());
    for (std::size_t i = 0; i < s.indices.size(); ++i) {
      ++seen.at(s.indices[i]);
      CHECK(s.train.y(i) == ds.train.y(s.indices[i]));
    }
  }
  for (int c : seen) CHECK(c == 1);
}

}  // namespace

TEST_CASE("base dataset has exact class counts and a deterministic split", "[data]") {
  const auto a = make_base_dataset(5, 16, 250, 3.0, 42);
  const auto b = make_base_dataset(5, 16, 250, 3.0, 42);
  CHECK(a.train == b.train);
  CHECK(a.test == b.test);
  std::map<int, int> counts;
  for (int y : a.train.labels()) ++counts[y];
  for (int y : a.test.labels()) ++counts[y];
  REQUIRE(counts.size() == 5);
  for (const auto& [label, n] : counts) CHECK(n == 250);
  CHECK(a.train.size() == 1000);
  CHECK(a.test.size() == 250);
  const auto c = make_base_dataset(5, 16, 250, 3.0, 43);
  CHECK_FALSE(a.train == c.train);
}

TEST_CASE("well separated two-class blobs are linearly separable", "[data]") {
  const auto ds = make_base_dataset(2, 8, 500, 10.0, 3, 1.0);
  CHECK(logistic_probe_accuracy(ds) > 0.99);
}

TEST_CASE("identity domain leaves the data unchanged", "[data]") {
  const auto base = make_base_dataset(3, 4, 20, 3.0, 1);
  const auto out = apply_domain(base, DomainSpec{"id", {Identity{}}}, 2);
  CHECK(out.task_id == 2);
  CHECK(out.train == base.train);
  CHECK(out.test == base.test);
}

TEST_CASE("rotation is an invertible isometry that keeps labels", "[data]") {
  const auto base = make_base_dataset(4, 6, 30, 3.0, 5);
  const double theta = 1.234;
  const auto rot = apply_domain(base, DomainSpec{"r", {Rotation{theta, 0}}}, 1);
  const auto back = apply_domain(rot, DomainSpec{"r-1", {Rotation{-theta, 0}}}, 1);
  CHECK(rot.train.labels().size() == base.train.labels().size());
  for (std::size_t i = 0; i < base.train.size(); ++i) {
    CHECK(rot.train.y(i) == base.train.y(i));
    CHECK_THAT(norm(rot.train.x(i)), WithinAbs(norm(base.train.x(i)), 1e-9));
    for (std::size_t j = 0; j < 6; ++j) CHECK_THAT(back.train.x(i)[j], WithinAbs(base.train.x(i)[j], 1e-12));
  }
}

TEST_CASE("half-turn rotation over every plane negates the features", "[data]") {
  const auto base = make_base_dataset(2, 4, 10, 3.0, 5);
  const auto rot = apply_domain(base, DomainSpec{"r", {Rotation{std::numbers::pi, 0}}}, 1);
  for (std::size_t i = 0; i < base.test.size(); ++i)
    for (std::size_t j = 0; j < 4; ++j) CHECK_THAT(rot.test.x(i)[j], WithinAbs(-base.test.x(i)[j], 1e-12));
}

TEST_CASE("partial-plane rotation leaves the remaining coordinates alone", "[data]") {
  const auto base = make_base_dataset(2, 6, 10, 3.0, 5);
  const auto rot = apply_domain(base, DomainSpec{"r", {Rotation{0.7, 1}}}, 1);
  for (std::size_t i = 0; i < base.train.size(); ++i)
    for (std::size_t j = 2; j < 6; ++j) CHECK(rot.train.x(i)[j] == base.train.x(i)[j]);
}

TEST_CASE("every transform preserves labels", "[data]") {
  const auto base = make_base_dataset(3, 4, 20, 3.0, 9);
  Affine aff;
  aff.matrix = {2, 0, 0, 0, 0, 1, 0, 0, 0, 0, -1, 0, 1, 0, 0, 1};
  aff.shift = {1, 2, 3, 4};
  const std::vector<DomainTransform> all{Identity{}, Rotation{0.3, 0}, aff, Noise{0.5}, Permute{{3, 1, 0, 2}}};
  for (const auto& t : all) {
    const auto out = apply_domain(base, DomainSpec{"t", {t}}, 1, 4);
    CHECK(std::equal(out.train.labels().begin(), out.train.labels().end(), base.train.labels().begin()));
    CHECK(std::equal(out.test.labels().begin(), out.test.labels().end(), base.test.labels().begin()));
  }
  const auto permuted = apply_domain(base, DomainSpec{"p", {Permute{{3, 1, 0, 2}}}}, 1);
  CHECK(permuted.train.x(0)[0] == base.train.x(0)[3]);
  const auto affine = apply_domain(base, DomainSpec{"a", {aff}}, 1);
  CHECK_THAT(affine.train.x(0)[3], WithinAbs(base.train.x(0)[0] + base.train.x(0)[3] + 4.0, 1e-12));
}

TEST_CASE("noise is deterministic per task and seed", "[data]") {
  const auto base = make_base_dataset(3, 4, 20, 3.0, 9);
  const DomainSpec noisy{"n", {Noise{0.3}}};
  const auto a = apply_domain(base, noisy, 1, 7);
  const auto b = apply_domain(base, noisy, 1, 7);
  const auto c = apply_domain(base, noisy, 2, 7);
  CHECK(a.train == b.train);
  CHECK_FALSE(a.train == c.train);
  CHECK_FALSE(a.train == base.train);
}

TEST_CASE("transforms with the wrong dimension are rejected", "[data]") {
  const auto base = make_base_dataset(3, 4, 20, 3.0, 9);
  CHECK_THROWS_AS(apply_domain(base, DomainSpec{"p", {Permute{{0, 1, 2}}}}, 1), InputError);
  CHECK_THROWS_AS(apply_domain(base, DomainSpec{"p", {Permute{{0, 1, 1, 2}}}}, 1), InputError);
  CHECK_THROWS_AS(apply_domain(base, DomainSpec{"a", {Affine{{1, 0, 0, 1}, {}}}}, 1), InputError);
  CHECK_THROWS_AS(apply_domain(base, DomainSpec{"r", {Rotation{0.1, 3}}}, 1), InputError);
}

TEST_CASE("largest remainder rounding is exact", "[data]") {
  const std::vector<double> p{0.333, 0.333, 0.334};
  const auto n = detail::largest_remainder(p, 10);
  CHECK(n[0] + n[1] + n[2] == 10);
  const std::vector<double> q{0.05, 0.95};
  const auto m = detail::largest_remainder(q, 7);
  CHECK(m[0] + m[1] == 7);
  CHECK(m[1] == 7);
}

TEST_CASE("single client holds the whole task", "[data]") {
  const auto ds = make_base_dataset(3, 4, 20, 3.0, 9);
  const auto shards = dirichlet_partition(ds, HeterogeneityConfig{0.5, 1, 3});
  REQUIRE(shards.size() == 1);
  CHECK(shards[0].train.size() == ds.train.size());
  check_partition(ds, shards);
}

TEST_CASE("Dirichlet shards partition the task for any alpha", "[data]") {
  const auto ds = make_base_dataset(5, 4, 100, 3.0, 9);
  for (double alpha : {0.1, 1.0, 10.0})
    for (RngSeed seed = 0; seed < 10; ++seed) {
      const auto shards = dirichlet_partition(ds, HeterogeneityConfig{alpha, 7, seed});
      REQUIRE(shards.size() == 7);
      check_partition(ds, shards);
      CHECK(dirichlet_partition(ds, HeterogeneityConfig{alpha, 7, seed})[3].indices == shards[3].indices);
    }
}

TEST_CASE("Dirichlet concentration controls skew", "[data]") {
  const auto ds = labelled_only(1, 1000);
  auto median_max_share = [&](double alpha) {
    std::vector<double> shares;
    for (RngSeed seed = 0; seed < 100; ++seed) {
      const auto shards = dirichlet_partition(ds, HeterogeneityConfig{alpha, 2, seed});
      shares.push_back(static_cast<double>(std::max(shards[0].train.size(), shards[1].train.size())) / 1000.0);
    }
    std::sort(shares.begin(), shares.end());
    return 0.5 * (shares[49] + shares[50]);
  };
  CHECK(median_max_share(0.1) > 0.9);
  CHECK(median_max_share(10.0) < 0.65);
}

TEST_CASE("synchronized streams are identical, shuffled ones are permutations", "[data]") {
  const auto sync = build_task_stream(4, 6, StreamMode::synchronized, 1);
  for (const auto& s : sync) CHECK(s == std::vector<std::size_t>{0, 1, 2, 3});
  const auto shuf = build_task_stream(4, 100, StreamMode::shuffled, 1);
  std::set<std::vector<std::size_t>> seen;
  for (auto s : shuf) {
    seen.insert(s);
    std::sort(s.begin(), s.end());
    CHECK(s == std::vector<std::size_t>{0, 1, 2, 3});
  }
  CHECK(seen.size() == 24);
}

TEST_CASE("dataset files round-trip and hash by content", "[data][io]") {
  const auto base = make_base_dataset(3, 4, 20, 3.0, 9);
  const auto ds = apply_domain(base, DomainSpec{"r", {Rotation{0.5, 0}, Noise{0.1}}}, 2, 1);
  std::stringstream ss;
  write_dataset(ss, ds);
  CHECK(ss.str().substr(0, 4) == "PFDS");
  const auto back = read_dataset(ss);
  CHECK(back.task_id == 2);
  CHECK(back.num_classes == 3);
  CHECK(back.train == ds.train);
  CHECK(back.test == ds.test);

  std::vector<TaskDataset> one{ds}, other{base};
  CHECK(dataset_hash(one) == dataset_hash(one));
  CHECK(dataset_hash(one) != dataset_hash(other));

  std::stringstream bad("PFDX1234");
  CHECK_THROWS_AS(read_dataset(bad), DataError);
}
