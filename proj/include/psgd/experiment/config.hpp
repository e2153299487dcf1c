#pragma once

// Experiment configuration: strict YAML parsing with line-numbered
// diagnostics, a canonical re-emission that covers every setting, and its
// SHA-256 hash.

#include "psgd/tensor.hpp"

#include <openssl/evp.h>
#include <yaml-cpp/yaml.h>

#include <array>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace psgd::experiment {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct NoiseSpec {
  std::string kind = "none";  // none | additive | multiplicative | composite
  double sigma2 = 0.0;
  double M = 0.0;
};

struct ProblemSpec {
  std::string kind;  // quadratic | classification
  // quadratic
  Index dim = 10;
  double condition = 10.0;
  double L = 1.0;
  bool offset = true;
  NoiseSpec noise;
  double init_scale = 1.0;  // x0 = x* + init_scale N(0, I)
  // classification
  Index samples = 2000;
  Index features = 10;
  Index classes = 3;
  double separation = 1.0;
  double spread = 1.0;
  double validation_fraction = 0.2;
  Index batch_size = 32;
};

struct ModelSpec {
  std::string kind = "mlp";  // mlp | lfc | low_rank | wide_deep
  std::vector<Index> hidden{32};
  std::string activation = "tanh";
  std::string loss = "cross_entropy";  // cross_entropy | mse
  double rank_ratio = 0.5;
};

struct OptimizerSpec {
  std::string scheme = "partial_sgd";  // partial_sgd | ats
  Index steps = 0;
  std::optional<double> gamma_base;
  std::optional<double> epsilon;
  std::string alpha = "constant";  // constant | theoretical
  double alpha_constant = 1.0;
  bool exact_gradients = true;
  bool evaluate_loss = true;
};

struct MaskSpec {
  // all_ones | dropout | neuron_dropout | tensor_dropout | top_k | alternating | disjoint | core
  std::string kind = "all_ones";
  double keep = 0.5;
  Index k = 1;
  Index workers = 2;
  Index local_steps = 1;
  Index count = 3;  // alternating: number of random Bernoulli(keep) masks
};

struct PerturbationSpec {
  std::string kind = "none";  // none | zero_complement | extragradient
  std::optional<double> eta;
  std::optional<double> eta_over_L;
  std::string sign = "ascent";
};

struct CoreSpec {
  double ratio = 0.5;  // slim width ratio for dense networks
};

struct MeasureSpec {
  std::string scenario;  // dropout | ats
  double keep = 0.5;
  bool exact = false;
  double tail = 0.2;  // fraction of final steps summarised
};

struct SweepSpec {
  std::vector<std::pair<std::string, std::vector<std::string>>> grid;
  std::vector<std::uint64_t> seeds;
  std::optional<double> threshold;
  int threads = 0;
};

struct ExperimentConfig {
  std::string name;
  std::uint64_t seed = 0;
  ProblemSpec problem;
  ModelSpec model;
  OptimizerSpec optimizer;
  MaskSpec mask;
  PerturbationSpec perturbation;
  CoreSpec core;
  std::optional<MeasureSpec> measure;
  std::optional<SweepSpec> sweep;

  bool classification() const { return problem.kind == "classification"; }
  bool uses_core() const {
    return optimizer.scheme == "ats" || mask.kind == "core" || (measure && measure->scenario == "ats");
  }
};

namespace detail {

inline std::string where(const YAML::Node& n) {
  const auto m = n.Mark();
  if (m.line < 0) return "";
  return " (line " + std::to_string(m.line + 1) + ", column " + std::to_string(m.column + 1) + ")";
}

inline std::string join(const std::string& path, const std::string& key) {
  return path.empty() ? key : path + "." + key;
}

class Section {
 public:
  Section(const YAML::Node& node, std::string path) : node_(node), path_(std::move(path)) {
    if (!node_.IsMap()) throw ConfigError("'" + path_ + "' must be a mapping" + where(node_));
  }

  // Rejects keys that no getter asked for.
  void finish() const {
    for (const auto& kv : node_) {
      const auto key = kv.first.as<std::string>();
      if (!seen_.count(key)) throw ConfigError("unknown key '" + join(path_, key) + "'" + where(kv.first));
    }
  }

  bool has(const std::string& key) {
    seen_.insert(key);
    return static_cast<bool>(node_[key]);
  }

  YAML::Node child(const std::string& key) {
    seen_.insert(key);
    return node_[key];
  }

  template <typename T>
  T required(const std::string& key) {
    if (!has(key)) throw ConfigError("missing required key '" + join(path_, key) + "'" + where(node_));
    return convert<T>(node_[key], key);
  }

  template <typename T>
  void optional(const std::string& key, T& out) {
    if (has(key)) out = convert<T>(node_[key], key);
  }

  template <typename T>
  void optional(const std::string& key, std::optional<T>& out) {
    if (has(key)) out = convert<T>(node_[key], key);
  }

  template <typename T>
  T convert(const YAML::Node& v, const std::string& key) const {
    try {
      if constexpr (std::is_same_v<T, std::vector<Index>>) {
        if (!v.IsSequence()) throw YAML::Exception(v.Mark(), "expected a list");
      }
      return v.as<T>();
    } catch (const YAML::Exception&) {
      throw ConfigError("invalid value for '" + join(path_, key) + "'" + where(v));
    }
  }

  const std::string& path() const { return path_; }

 private:
  YAML::Node node_;
  std::string path_;
  std::set<std::string> seen_;
};

inline void one_of(const std::string& value, std::initializer_list<const char*> allowed, const std::string& key) {
  for (const char* a : allowed) {
    if (value == a) return;
  }
  std::string list;
  for (const char* a : allowed) list += (list.empty() ? "" : ", ") + std::string(a);
  throw ConfigError("'" + key + "' must be one of " + list + ", got '" + value + "'");
}

inline void positive(double v, const std::string& key) {
  if (!(v > 0.0)) throw ConfigError("'" + key + "' must be positive");
}

inline void unit_interval(double v, const std::string& key) {
  if (!(v > 0.0 && v <= 1.0)) throw ConfigError("'" + key + "' must be in (0, 1]");
}

inline std::string number(double v) {
  std::array<char, 64> buf{};
  const auto r = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  std::string s(buf.data(), r.ptr);
  if (s.find_first_of(".eEn") == std::string::npos) s += ".0";
  return s;
}

}  // namespace detail

inline ExperimentConfig parse_config(const YAML::Node& root) {
  if (!root || root.IsNull()) throw ConfigError("config is empty");
  detail::Section top(root, "");
  ExperimentConfig c;
  c.name = top.required<std::string>("name");
  if (c.name.empty() || c.name.find_first_of("/\\ ") != std::string::npos) {
    throw ConfigError("'name' must be non-empty and contain no spaces or slashes");
  }
  c.seed = top.required<std::uint64_t>("seed");

  {
    if (!top.has("problem")) throw ConfigError("missing required key 'problem'");
    detail::Section s(top.child("problem"), "problem");
    auto& p = c.problem;
    p.kind = s.required<std::string>("kind");
    detail::one_of(p.kind, {"quadratic", "classification"}, "problem.kind");
    if (p.kind == "quadratic") {
      p.dim = s.required<Index>("dim");
      s.optional("condition", p.condition);
      s.optional("L", p.L);
      s.optional("offset", p.offset);
      s.optional("init_scale", p.init_scale);
      if (s.has("noise")) {
        detail::Section n(s.child("noise"), "problem.noise");
        p.noise.kind = n.required<std::string>("kind");
        detail::one_of(p.noise.kind, {"none", "additive", "multiplicative", "composite"}, "problem.noise.kind");
        n.optional("sigma2", p.noise.sigma2);
        n.optional("M", p.noise.M);
        n.finish();
        if (p.noise.sigma2 < 0.0 || p.noise.M < 0.0) throw ConfigError("noise constants must be nonnegative");
      }
      if (p.dim < 1) throw ConfigError("'problem.dim' must be at least 1");
      if (!(p.condition >= 1.0)) throw ConfigError("'problem.condition' must be at least 1");
      detail::positive(p.L, "problem.L");
      detail::positive(p.init_scale, "problem.init_scale");
    } else {
      s.optional("samples", p.samples);
      s.optional("features", p.features);
      s.optional("classes", p.classes);
      s.optional("separation", p.separation);
      s.optional("spread", p.spread);
      s.optional("validation_fraction", p.validation_fraction);
      s.optional("batch_size", p.batch_size);
      if (p.samples < 2 || p.features < 1 || p.classes < 2) throw ConfigError("classification sizes are too small");
      if (p.batch_size < 1) throw ConfigError("'problem.batch_size' must be at least 1");
      if (!(p.validation_fraction > 0.0 && p.validation_fraction < 1.0)) {
        throw ConfigError("'problem.validation_fraction' must be in (0, 1)");
      }
    }
    s.finish();
  }

  if (top.has("model")) {
    if (!c.classification()) throw ConfigError("'model' applies to classification problems only");
    detail::Section s(top.child("model"), "model");
    auto& m = c.model;
    s.optional("kind", m.kind);
    detail::one_of(m.kind, {"mlp", "lfc", "low_rank", "wide_deep"}, "model.kind");
    s.optional("hidden", m.hidden);
    s.optional("activation", m.activation);
    detail::one_of(m.activation, {"tanh", "relu"}, "model.activation");
    s.optional("loss", m.loss);
    detail::one_of(m.loss, {"cross_entropy", "mse"}, "model.loss");
    s.optional("rank_ratio", m.rank_ratio);
    detail::unit_interval(m.rank_ratio, "model.rank_ratio");
    for (Index h : m.hidden) {
      if (h < 1) throw ConfigError("'model.hidden' widths must be positive");
    }
    s.finish();
  }

  {
    if (!top.has("optimizer")) throw ConfigError("missing required key 'optimizer'");
    detail::Section s(top.child("optimizer"), "optimizer");
    auto& o = c.optimizer;
    s.optional("scheme", o.scheme);
    detail::one_of(o.scheme, {"partial_sgd", "ats"}, "optimizer.scheme");
    o.steps = s.required<Index>("steps");
    s.optional("gamma_base", o.gamma_base);
    s.optional("epsilon", o.epsilon);
    s.optional("alpha", o.alpha);
    detail::one_of(o.alpha, {"constant", "theoretical"}, "optimizer.alpha");
    s.optional("alpha_constant", o.alpha_constant);
    s.optional("exact_gradients", o.exact_gradients);
    s.optional("evaluate_loss", o.evaluate_loss);
    s.finish();
    if (o.steps < 1) throw ConfigError("'optimizer.steps' must be at least 1");
    if (!o.gamma_base && !o.epsilon) {
      throw ConfigError("missing required key 'optimizer.gamma_base' (or 'optimizer.epsilon' to derive it)");
    }
    if (!o.gamma_base && c.classification()) {
      throw ConfigError("'optimizer.gamma_base' is required for classification problems");
    }
    if (o.gamma_base) detail::positive(*o.gamma_base, "optimizer.gamma_base");
    if (o.epsilon) detail::positive(*o.epsilon, "optimizer.epsilon");
    detail::unit_interval(o.alpha_constant, "optimizer.alpha_constant");
    if (o.alpha == "theoretical" && !o.exact_gradients) {
      throw ConfigError("'optimizer.alpha: theoretical' needs 'optimizer.exact_gradients: true'");
    }
  }

  if (top.has("mask")) {
    detail::Section s(top.child("mask"), "mask");
    auto& m = c.mask;
    m.kind = s.required<std::string>("kind");
    detail::one_of(m.kind,
                   {"all_ones", "dropout", "neuron_dropout", "tensor_dropout", "top_k", "alternating", "disjoint", "core"},
                   "mask.kind");
    s.optional("keep", m.keep);
    s.optional("k", m.k);
    s.optional("workers", m.workers);
    s.optional("local_steps", m.local_steps);
    s.optional("count", m.count);
    s.finish();
    detail::unit_interval(m.keep, "mask.keep");
    if (m.k < 1 || m.workers < 1 || m.local_steps < 1 || m.count < 1) {
      throw ConfigError("mask counts must be at least 1");
    }
    if ((m.kind == "neuron_dropout" || m.kind == "tensor_dropout" || m.kind == "disjoint" || m.kind == "core") &&
        !c.classification()) {
      throw ConfigError("'mask.kind: " + m.kind + "' needs a classification problem");
    }
  }

  if (top.has("perturbation")) {
    detail::Section s(top.child("perturbation"), "perturbation");
    auto& p = c.perturbation;
    p.kind = s.required<std::string>("kind");
    detail::one_of(p.kind, {"none", "zero_complement", "extragradient"}, "perturbation.kind");
    s.optional("eta", p.eta);
    s.optional("eta_over_L", p.eta_over_L);
    s.optional("sign", p.sign);
    detail::one_of(p.sign, {"ascent", "descent"}, "perturbation.sign");
    s.finish();
    if (p.kind == "extragradient") {
      if (!p.eta && !p.eta_over_L) throw ConfigError("missing required key 'perturbation.eta' (or 'eta_over_L')");
      if (p.eta && p.eta_over_L) throw ConfigError("give only one of 'perturbation.eta' and 'perturbation.eta_over_L'");
      if (p.eta_over_L && c.classification()) throw ConfigError("'perturbation.eta_over_L' needs a known L");
      detail::positive(p.eta ? *p.eta : *p.eta_over_L, "perturbation.eta");
    }
  }

  if (top.has("core")) {
    detail::Section s(top.child("core"), "core");
    s.optional("ratio", c.core.ratio);
    s.finish();
    detail::unit_interval(c.core.ratio, "core.ratio");
  }

  if (top.has("measure")) {
    detail::Section s(top.child("measure"), "measure");
    MeasureSpec m;
    m.scenario = s.required<std::string>("scenario");
    detail::one_of(m.scenario, {"dropout", "ats"}, "measure.scenario");
    s.optional("keep", m.keep);
    s.optional("exact", m.exact);
    s.optional("tail", m.tail);
    s.finish();
    detail::unit_interval(m.keep, "measure.keep");
    detail::unit_interval(m.tail, "measure.tail");
    if (!c.classification()) throw ConfigError("'measure' needs a classification problem");
    c.measure = m;
  }

  if (top.has("sweep")) {
    detail::Section s(top.child("sweep"), "sweep");
    SweepSpec w;
    const auto grid = s.child("grid");
    if (!grid || !grid.IsMap() || grid.size() == 0) {
      throw ConfigError("missing required key 'sweep.grid' (a mapping of dotted keys to lists)" + detail::where(grid));
    }
    for (const auto& kv : grid) {
      const auto key = kv.first.as<std::string>();
      if (key == "seed" || key.rfind("sweep", 0) == 0 || key == "name") {
        throw ConfigError("'sweep.grid' cannot vary '" + key + "'");
      }
      if (!kv.second.IsSequence() || kv.second.size() == 0) {
        throw ConfigError("'sweep.grid." + key + "' must be a non-empty list" + detail::where(kv.second));
      }
      std::vector<std::string> values;
      for (const auto& v : kv.second) {
        if (!v.IsScalar()) throw ConfigError("'sweep.grid." + key + "' values must be scalars" + detail::where(v));
        values.push_back(v.Scalar());
      }
      w.grid.emplace_back(key, std::move(values));
    }
    w.seeds = s.required<std::vector<std::uint64_t>>("seeds");
    if (w.seeds.empty()) throw ConfigError("'sweep.seeds' must not be empty");
    s.optional("threshold", w.threshold);
    s.optional("threads", w.threads);
    s.finish();
    if (w.threshold) detail::positive(*w.threshold, "sweep.threshold");
    if (w.threads < 0) throw ConfigError("'sweep.threads' must be nonnegative");
    c.sweep = std::move(w);
  }
  top.finish();
  return c;
}

inline YAML::Node load_yaml_text(const std::string& text) {
  try {
    return YAML::Load(text);
  } catch (const YAML::ParserException& e) {
    throw ConfigError("YAML syntax error at line " + std::to_string(e.mark.line + 1) + ": " + e.msg);
  }
}

inline ExperimentConfig parse_config_text(const std::string& text) { return parse_config(load_yaml_text(text)); }

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Every setting the run depends on, in a fixed order, so that equal runs get
// equal text and equal hashes.
inline std::string canonical_yaml(const ExperimentConfig& c) {
  using detail::number;
  YAML::Emitter e;
  e << YAML::BeginMap;
  e << YAML::Key << "name" << YAML::Value << c.name;
  e << YAML::Key << "seed" << YAML::Value << c.seed;

  const auto& p = c.problem;
  e << YAML::Key << "problem" << YAML::Value << YAML::BeginMap;
  e << YAML::Key << "kind" << YAML::Value << p.kind;
  if (p.kind == "quadratic") {
    e << YAML::Key << "dim" << YAML::Value << p.dim;
    e << YAML::Key << "condition" << YAML::Value << number(p.condition);
    e << YAML::Key << "L" << YAML::Value << number(p.L);
    e << YAML::Key << "offset" << YAML::Value << p.offset;
    e << YAML::Key << "init_scale" << YAML::Value << number(p.init_scale);
    e << YAML::Key << "noise" << YAML::Value << YAML::BeginMap;
    e << YAML::Key << "kind" << YAML::Value << p.noise.kind;
    e << YAML::Key << "sigma2" << YAML::Value << number(p.noise.sigma2);
    e << YAML::Key << "M" << YAML::Value << number(p.noise.M);
    e << YAML::EndMap;
  } else {
    e << YAML::Key << "samples" << YAML::Value << p.samples;
    e << YAML::Key << "features" << YAML::Value << p.features;
    e << YAML::Key << "classes" << YAML::Value << p.classes;
    e << YAML::Key << "separation" << YAML::Value << number(p.separation);
    e << YAML::Key << "spread" << YAML::Value << number(p.spread);
    e << YAML::Key << "validation_fraction" << YAML::Value << number(p.validation_fraction);
    e << YAML::Key << "batch_size" << YAML::Value << p.batch_size;
  }
  e << YAML::EndMap;

  if (c.classification()) {
    const auto& m = c.model;
    e << YAML::Key << "model" << YAML::Value << YAML::BeginMap;
    e << YAML::Key << "kind" << YAML::Value << m.kind;
    e << YAML::Key << "hidden" << YAML::Value << YAML::Flow << YAML::BeginSeq;
    for (Index h : m.hidden) e << h;
    e << YAML::EndSeq;
    e << YAML::Key << "activation" << YAML::Value << m.activation;
    e << YAML::Key << "loss" << YAML::Value << m.loss;
    e << YAML::Key << "rank_ratio" << YAML::Value << number(m.rank_ratio);
    e << YAML::EndMap;
  }

  const auto& o = c.optimizer;
  e << YAML::Key << "optimizer" << YAML::Value << YAML::BeginMap;
  e << YAML::Key << "scheme" << YAML::Value << o.scheme;
  e << YAML::Key << "steps" << YAML::Value << o.steps;
  if (o.gamma_base) e << YAML::Key << "gamma_base" << YAML::Value << number(*o.gamma_base);
  if (o.epsilon) e << YAML::Key << "epsilon" << YAML::Value << number(*o.epsilon);
  e << YAML::Key << "alpha" << YAML::Value << o.alpha;
  e << YAML::Key << "alpha_constant" << YAML::Value << number(o.alpha_constant);
  e << YAML::Key << "exact_gradients" << YAML::Value << o.exact_gradients;
  e << YAML::Key << "evaluate_loss" << YAML::Value << o.evaluate_loss;
  e << YAML::EndMap;

  const auto& k = c.mask;
  e << YAML::Key << "mask" << YAML::Value << YAML::BeginMap;
  e << YAML::Key << "kind" << YAML::Value << k.kind;
  e << YAML::Key << "keep" << YAML::Value << number(k.keep);
  e << YAML::Key << "k" << YAML::Value << k.k;
  e << YAML::Key << "workers" << YAML::Value << k.workers;
  e << YAML::Key << "local_steps" << YAML::Value << k.local_steps;
  e << YAML::Key << "count" << YAML::Value << k.count;
  e << YAML::EndMap;

  const auto& q = c.perturbation;
  e << YAML::Key << "perturbation" << YAML::Value << YAML::BeginMap;
  e << YAML::Key << "kind" << YAML::Value << q.kind;
  if (q.eta) e << YAML::Key << "eta" << YAML::Value << number(*q.eta);
  if (q.eta_over_L) e << YAML::Key << "eta_over_L" << YAML::Value << number(*q.eta_over_L);
  e << YAML::Key << "sign" << YAML::Value << q.sign;
  e << YAML::EndMap;

  if (c.uses_core()) {
    e << YAML::Key << "core" << YAML::Value << YAML::BeginMap;
    e << YAML::Key << "ratio" << YAML::Value << number(c.core.ratio);
    e << YAML::EndMap;
  }

  if (c.measure) {
    const auto& m = *c.measure;
    e << YAML::Key << "measure" << YAML::Value << YAML::BeginMap;
    e << YAML::Key << "scenario" << YAML::Value << m.scenario;
    e << YAML::Key << "keep" << YAML::Value << number(m.keep);
    e << YAML::Key << "exact" << YAML::Value << m.exact;
    e << YAML::Key << "tail" << YAML::Value << number(m.tail);
    e << YAML::EndMap;
  }

  if (c.sweep) {
    const auto& w = *c.sweep;
    e << YAML::Key << "sweep" << YAML::Value << YAML::BeginMap;
    e << YAML::Key << "grid" << YAML::Value << YAML::BeginMap;
    for (const auto& [key, values] : w.grid) {
      e << YAML::Key << key << YAML::Value << YAML::Flow << YAML::BeginSeq;
      for (const auto& v : values) e << v;
      e << YAML::EndSeq;
    }
    e << YAML::EndMap;
    e << YAML::Key << "seeds" << YAML::Value << YAML::Flow << YAML::BeginSeq;
    for (auto s : w.seeds) e << s;
    e << YAML::EndSeq;
    if (w.threshold) e << YAML::Key << "threshold" << YAML::Value << number(*w.threshold);
    e << YAML::Key << "threads" << YAML::Value << w.threads;
    e << YAML::EndMap;
  }
  e << YAML::EndMap;
  return std::string(e.c_str()) + "\n";
}

inline std::string sha256_hex(const std::string& data) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), md.data(), &len, EVP_sha256(), nullptr) != 1) {
    throw std::runtime_error("SHA-256 failed");
  }
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[md[i] >> 4];
    out += hex[md[i] & 0xf];
  }
  return out;
}

struct ResolvedConfig {
  ExperimentConfig config;
  std::string canonical;
  std::string hash;
};

inline ResolvedConfig resolve(ExperimentConfig c, std::optional<std::uint64_t> seed_override = std::nullopt) {
  if (seed_override) c.seed = *seed_override;
  ResolvedConfig r{std::move(c), {}, {}};
  r.canonical = canonical_yaml(r.config);
  r.hash = sha256_hex(r.canonical);
  return r;
}

namespace detail {

inline void set_path(YAML::Node node, const std::vector<std::string>& parts, std::size_t i, const YAML::Node& value) {
  if (i + 1 == parts.size()) {
    node[parts[i]] = value;
    return;
  }
  if (!node[parts[i]].IsMap()) node[parts[i]] = YAML::Node(YAML::NodeType::Map);
  set_path(node[parts[i]], parts, i + 1, value);
}

}  // namespace detail

// Sets a dotted key such as "optimizer.epsilon" in a config tree.
inline void set_dotted(YAML::Node root, const std::string& dotted, const std::string& value) {
  std::vector<std::string> parts;
  std::stringstream ss(dotted);
  for (std::string part; std::getline(ss, part, '.');) {
    if (part.empty()) throw ConfigError("malformed sweep key '" + dotted + "'");
    parts.push_back(part);
  }
  if (parts.empty()) throw ConfigError("empty sweep key");
  detail::set_path(root, parts, 0, load_yaml_text(value));
}

}  // namespace psgd::experiment
