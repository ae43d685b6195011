#pragma once

// Strict JSON experiment configuration. Unknown keys are rejected and every
// constraint violation names its field.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "pfdil/data.hpp"
#include "pfdil/error.hpp"
#include "pfdil/federation.hpp"
#include "pfdil/nn.hpp"

namespace pfdil {

using Json = nlohmann::ordered_json;

struct DataSpec {
  std::size_t num_classes = 5;
  std::size_t input_dim = 16;
  std::size_t samples_per_class = 250;
  double class_separation = 3.0;
  double cluster_sigma = 1.0;
  std::vector<DomainSpec> domains;

  friend bool operator==(const DataSpec&, const DataSpec&) = default;
};

/// Rotations of the feature space by 0, 60, 120 and 180 degrees, each with
/// additive noise of sigma 0.3.
inline std::vector<DomainSpec> default_domains() {
  std::vector<DomainSpec> out;
  for (int deg : {0, 60, 120, 180}) {
    DomainSpec d;
    d.name = "rot" + std::to_string(deg);
    d.composition.push_back(Rotation{deg * std::numbers::pi / 180.0, 0});
    d.composition.push_back(Noise{0.3});
    out.push_back(std::move(d));
  }
  return out;
}

struct ExperimentConfig {
  FederationConfig federation;
  std::vector<std::size_t> hidden_dims{64, 32};
  DataSpec data{5, 16, 250, 3.0, 1.0, default_domains()};

  ArchSpec arch() const { return ArchSpec{data.input_dim, hidden_dims, data.num_classes}; }
};

namespace detail {

class ObjectReader {
 public:
  ObjectReader(const Json& obj, std::string path) : obj_(obj), path_(std::move(path)) {
    if (!obj_.is_object()) throw ConfigError(path_.empty() ? "<root>" : path_, field_name("") + "expected an object");
  }

  template <typename Fn>
  void optional(const char* key, Fn&& fn) {
    known_.push_back(key);
    if (auto it = obj_.find(key); it != obj_.end()) fn(*it, qualified(key));
  }

  void number(const char* key, double& out) {
    optional(key, [&](const Json& v, const std::string& f) {
      if (!v.is_number()) throw ConfigError(f, f + ": expected a number");
      out = v.get<double>();
      if (!std::isfinite(out)) throw ConfigError(f, f + ": must be finite");
    });
  }

  void count(const char* key, std::size_t& out) {
    optional(key, [&](const Json& v, const std::string& f) {
      if (!v.is_number_integer() || v.get<long long>() < 0)
        throw ConfigError(f, f + ": expected a non-negative integer");
      out = v.get<std::size_t>();
    });
  }

  void seed(const char* key, std::uint64_t& out) {
    optional(key, [&](const Json& v, const std::string& f) {
      if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() && v.get<long long>() < 0))
        throw ConfigError(f, f + ": expected a non-negative integer");
      out = v.get<std::uint64_t>();
    });
  }

  void boolean(const char* key, bool& out) {
    optional(key, [&](const Json& v, const std::string& f) {
      if (!v.is_boolean()) throw ConfigError(f, f + ": expected true or false");
      out = v.get<bool>();
    });
  }

  void reject_unknown() const {
    for (auto it = obj_.begin(); it != obj_.end(); ++it) {
      if (std::find(known_.begin(), known_.end(), it.key()) == known_.end()) {
        const auto f = qualified(it.key());
        throw ConfigError(f, "unknown key \"" + f + "\"");
      }
    }
  }

  std::string qualified(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

 private:
  std::string field_name(const std::string& key) const { return qualified(key).empty() ? "" : qualified(key) + ": "; }

  const Json& obj_;
  std::string path_;
  std::vector<std::string> known_;
};

inline DomainTransform parse_transform(const Json& j, const std::string& path, std::size_t dim) {
  ObjectReader r(j, path);
  std::string kind;
  r.optional("kind", [&](const Json& v, const std::string& f) {
    if (!v.is_string()) throw ConfigError(f, f + ": expected a string");
    kind = v.get<std::string>();
  });
  DomainTransform out;
  if (kind == "identity") {
    out = Identity{};
  } else if (kind == "rotation") {
    Rotation rot;
    double degrees = NAN, radians = NAN;
    r.number("degrees", degrees);
    r.number("radians", radians);
    r.count("planes", rot.planes);
    if (std::isnan(degrees) == std::isnan(radians))
      throw ConfigError(r.qualified("radians"), path + ": rotation needs exactly one of degrees or radians");
    rot.angle = std::isnan(radians) ? degrees * std::numbers::pi / 180.0 : radians;
    if (rot.planes * 2 > dim) throw ConfigError(r.qualified("planes"), path + ".planes: exceeds input_dim / 2");
    out = rot;
  } else if (kind == "noise") {
    Noise n;
    r.number("sigma", n.sigma);
    if (n.sigma < 0.0) throw ConfigError(r.qualified("sigma"), path + ".sigma: must be non-negative");
    out = n;
  } else if (kind == "affine") {
    Affine a;
    auto read_vec = [&](const char* key, std::vector<double>& v) {
      r.optional(key, [&](const Json& arr, const std::string& f) {
        if (!arr.is_array()) throw ConfigError(f, f + ": expected an array of numbers");
        for (const auto& e : arr) {
          if (!e.is_number()) throw ConfigError(f, f + ": expected an array of numbers");
          v.push_back(e.get<double>());
        }
      });
    };
    read_vec("matrix", a.matrix);
    read_vec("shift", a.shift);
    if (a.matrix.size() != dim * dim)
      throw ConfigError(r.qualified("matrix"), path + ".matrix: needs input_dim^2 entries (row-major)");
    if (!a.shift.empty() && a.shift.size() != dim)
      throw ConfigError(r.qualified("shift"), path + ".shift: needs input_dim entries");
    out = a;
  } else if (kind == "permute") {
    Permute p;
    r.optional("permutation", [&](const Json& arr, const std::string& f) {
      if (!arr.is_array()) throw ConfigError(f, f + ": expected an array of indices");
      for (const auto& e : arr) {
        if (!e.is_number_unsigned()) throw ConfigError(f, f + ": expected an array of indices");
        p.permutation.push_back(e.get<std::size_t>());
      }
    });
    try {
      TransformValidator{dim}(p);
    } catch (const InputError& e) {
      throw ConfigError(r.qualified("permutation"), path + ".permutation: " + e.what());
    }
    out = p;
  } else {
    throw ConfigError(r.qualified("kind"),
                      r.qualified("kind") + ": must be one of identity, rotation, noise, affine, permute");
  }
  r.reject_unknown();
  return out;
}

struct TransformWriter {
  Json operator()(const Identity&) const { return Json{{"kind", "identity"}}; }
  Json operator()(const Rotation& r) const {
    return Json{{"kind", "rotation"}, {"radians", r.angle}, {"planes", r.planes}};
  }
  Json operator()(const Noise& n) const { return Json{{"kind", "noise"}, {"sigma", n.sigma}}; }
  Json operator()(const Affine& a) const {
    Json j{{"kind", "affine"}, {"matrix", a.matrix}};
    if (!a.shift.empty()) j["shift"] = a.shift;
    return j;
  }
  Json operator()(const Permute& p) const { return Json{{"kind", "permute"}, {"permutation", p.permutation}}; }
};

inline std::string describe_parse_error(const std::string& text, std::size_t byte) {
  std::size_t line = 1, col = 1;
  for (std::size_t i = 0; i + 1 < byte && i < text.size(); ++i) {
    if (text[i] == '\n') {
      ++line;
      col = 1;
    } else {
      ++col;
    }
  }
  std::size_t begin = text.rfind('\n', byte > 0 ? byte - 1 : 0);
  begin = begin == std::string::npos ? 0 : begin + 1;
  if (begin > text.size()) begin = text.size();
  std::size_t end = text.find('\n', begin);
  const std::string snippet = text.substr(begin, end == std::string::npos ? std::string::npos : end - begin);
  return "line " + std::to_string(line) + ", column " + std::to_string(col) + ": " + snippet;
}

}  // namespace detail

inline void validate(const ExperimentConfig& cfg) {
  const auto& f = cfg.federation;
  auto bad = [](const char* field, const std::string& why) { throw ConfigError(field, std::string(field) + ": " + why); };
  if (f.num_clients == 0) bad("clients", "must be at least 1");
  if (!(f.active_fraction > 0.0 && f.active_fraction <= 1.0)) bad("active_fraction", "must be in (0, 1]");
  if (f.rounds_per_task == 0) bad("rounds_per_task", "must be at least 1");
  if (f.batch_size == 0) bad("batch_size", "must be at least 1");
  if (!(f.lr > 0.0)) bad("lr", "must be positive");
  if (!(f.weight_decay >= 0.0)) bad("weight_decay", "must be non-negative");
  if (!(f.lambda >= 0.0 && f.lambda <= 1.0)) bad("lambda", "must be in [0, 1], got " + std::to_string(f.lambda));
  if (!(f.alpha > 0.0)) bad("alpha", "must be positive");
  if (f.max_pool_size == 0) bad("max_pool_size", "must be at least 1");
  if (!(f.negatives.permute_fraction >= 0.0 && f.negatives.permute_fraction <= 1.0))
    bad("negatives.permute_fraction", "must be in [0, 1]");
  if (f.negatives.permute_fraction < 1.0 && !(f.negatives.noise_sigma_scale > 0.0))
    bad("negatives.noise_sigma_scale", "must be positive unless permute_fraction is 1");
  if (cfg.hidden_dims.empty()) bad("arch.hidden_dims", "must be non-empty");
  for (std::size_t h : cfg.hidden_dims)
    if (h == 0) bad("arch.hidden_dims", "entries must be positive");
  const auto& d = cfg.data;
  if (d.num_classes < 2) bad("data.num_classes", "must be at least 2");
  if (d.input_dim < 2) bad("data.input_dim", "must be at least 2");
  if (d.samples_per_class < 2) bad("data.samples_per_class", "must be at least 2");
  if (!(d.class_separation >= 0.0)) bad("data.class_separation", "must be non-negative");
  if (!(d.cluster_sigma >= 0.0)) bad("data.cluster_sigma", "must be non-negative");
  if (d.domains.empty()) bad("data.domains", "must list at least one domain");
}

inline ExperimentConfig config_from_json(const Json& root) {
  ExperimentConfig cfg;
  auto& f = cfg.federation;
  detail::ObjectReader r(root, "");
  r.optional("mode", [&](const Json& v, const std::string& name) {
    const auto m = v.is_string() ? parse_mode(v.get<std::string>()) : std::nullopt;
    if (!m) throw ConfigError(name, "mode: must be one of pfeddil, fedavg, source_only, disjoint, sharing");
    f.mode = *m;
  });
  r.seed("seed", f.seed);
  r.count("clients", f.num_clients);
  r.number("active_fraction", f.active_fraction);
  r.count("rounds_per_task", f.rounds_per_task);
  r.count("local_epochs", f.local_epochs);
  r.number("lambda", f.lambda);
  r.number("alpha", f.alpha);
  r.count("batch_size", f.batch_size);
  r.number("lr", f.lr);
  r.number("weight_decay", f.weight_decay);
  r.count("max_pool_size", f.max_pool_size);
  r.boolean("km_include_self", f.km_include_self);
  r.optional("stream_mode", [&](const Json& v, const std::string& name) {
    const std::string s = v.is_string() ? v.get<std::string>() : "";
    if (s == "synchronized") f.stream_mode = StreamMode::synchronized;
    else if (s == "shuffled") f.stream_mode = StreamMode::shuffled;
    else throw ConfigError(name, "stream_mode: must be synchronized or shuffled");
  });
  r.optional("negatives", [&](const Json& v, const std::string& path) {
    detail::ObjectReader n(v, path);
    n.number("noise_sigma_scale", f.negatives.noise_sigma_scale);
    n.number("permute_fraction", f.negatives.permute_fraction);
    n.reject_unknown();
  });
  r.optional("arch", [&](const Json& v, const std::string& path) {
    detail::ObjectReader a(v, path);
    a.optional("hidden_dims", [&](const Json& arr, const std::string& name) {
      if (!arr.is_array()) throw ConfigError(name, name + ": expected an array of positive integers");
      cfg.hidden_dims.clear();
      for (const auto& e : arr) {
        if (!e.is_number_unsigned()) throw ConfigError(name, name + ": expected an array of positive integers");
        cfg.hidden_dims.push_back(e.get<std::size_t>());
      }
    });
    a.reject_unknown();
  });
  r.optional("data", [&](const Json& v, const std::string& path) {
    detail::ObjectReader d(v, path);
    d.count("num_classes", cfg.data.num_classes);
    d.count("input_dim", cfg.data.input_dim);
    d.count("samples_per_class", cfg.data.samples_per_class);
    d.number("class_separation", cfg.data.class_separation);
    d.number("cluster_sigma", cfg.data.cluster_sigma);
    d.optional("domains", [&](const Json& arr, const std::string& name) {
      if (!arr.is_array()) throw ConfigError(name, name + ": expected an array of domains");
      cfg.data.domains.clear();
      for (std::size_t i = 0; i < arr.size(); ++i) {
        const std::string dp = name + "[" + std::to_string(i) + "]";
        detail::ObjectReader dr(arr[i], dp);
        DomainSpec spec;
        spec.name = "domain" + std::to_string(i);
        dr.optional("name", [&](const Json& s, const std::string& fn) {
          if (!s.is_string()) throw ConfigError(fn, fn + ": expected a string");
          spec.name = s.get<std::string>();
        });
        dr.optional("transforms", [&](const Json& ts, const std::string& fn) {
          if (!ts.is_array()) throw ConfigError(fn, fn + ": expected an array of transforms");
          for (std::size_t t = 0; t < ts.size(); ++t)
            spec.composition.push_back(
                detail::parse_transform(ts[t], fn + "[" + std::to_string(t) + "]", cfg.data.input_dim));
        });
        dr.reject_unknown();
        if (spec.composition.empty()) spec.composition.push_back(Identity{});
        cfg.data.domains.push_back(std::move(spec));
      }
    });
    d.reject_unknown();
  });
  r.reject_unknown();
  validate(cfg);
  return cfg;
}

inline ExperimentConfig parse_config(const std::string& text) {
  Json root;
  try {
    root = Json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("<syntax>", "config parse error at " + detail::describe_parse_error(text, e.byte));
  }
  return config_from_json(root);
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("<file>", "cannot open config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

inline Json to_json(const ExperimentConfig& cfg) {
  const auto& f = cfg.federation;
  Json j;
  j["mode"] = to_string(f.mode);
  j["seed"] = f.seed;
  j["clients"] = f.num_clients;
  j["active_fraction"] = f.active_fraction;
  j["rounds_per_task"] = f.rounds_per_task;
  j["local_epochs"] = f.local_epochs;
  j["lambda"] = f.lambda;
  j["alpha"] = f.alpha;
  j["batch_size"] = f.batch_size;
  j["lr"] = f.lr;
  j["weight_decay"] = f.weight_decay;
  j["max_pool_size"] = f.max_pool_size;
  j["km_include_self"] = f.km_include_self;
  j["stream_mode"] = f.stream_mode == StreamMode::synchronized ? "synchronized" : "shuffled";
  j["negatives"] = {{"noise_sigma_scale", f.negatives.noise_sigma_scale},
                    {"permute_fraction", f.negatives.permute_fraction}};
  j["arch"] = {{"hidden_dims", cfg.hidden_dims}};
  Json domains = Json::array();
  for (const auto& d : cfg.data.domains) {
    Json ts = Json::array();
    for (const auto& t : d.composition) ts.push_back(std::visit(detail::TransformWriter{}, t));
    domains.push_back({{"name", d.name}, {"transforms", ts}});
  }
  j["data"] = {{"num_classes", cfg.data.num_classes},
               {"input_dim", cfg.data.input_dim},
               {"samples_per_class", cfg.data.samples_per_class},
               {"class_separation", cfg.data.class_separation},
               {"cluster_sigma", cfg.data.cluster_sigma},
               {"domains", domains}};
  return j;
}

/// Deterministic data for a config: base clusters, one task per domain,
/// Dirichlet shards per task and each client's domain order.
inline ExperimentData build_experiment_data(const ExperimentConfig& cfg) {
  const auto& f = cfg.federation;
  const auto& d = cfg.data;
  ExperimentData data;
  const auto base = make_base_dataset(d.num_classes, d.input_dim, d.samples_per_class, d.class_separation,
                                      derive_seed(f.seed, Stream::base_data), d.cluster_sigma);
  for (std::size_t t = 0; t < d.domains.size(); ++t) {
    data.domains.push_back(apply_domain(base, d.domains[t], static_cast<int>(t), f.seed));
    data.shards.push_back(dirichlet_partition(
        data.domains.back(), HeterogeneityConfig{f.alpha, f.num_clients, derive_seed(f.seed, Stream::partition, {t})}));
  }
  data.streams = build_task_stream(d.domains.size(), f.num_clients, f.stream_mode, f.seed);
  return data;
}

}  // namespace pfdil
