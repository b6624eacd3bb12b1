#pragma once

// Experiment configuration: one JSON document, every field optional in the
// input (missing fields take their defaults), unknown keys rejected at every
// level. Serialization writes every field, so a snapshot of a resolved config
// parses back to the same config and the same text.
//
// Recipe fields under "train" that depend on the objective ("optimizer",
// "base_lr", "weight_decay", "lookahead") accept "auto" / null and resolve
// to the objective's default recipe.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "cliplite/binary_io.hpp"
#include "cliplite/checkpoint.hpp"
#include "cliplite/eval.hpp"
#include "cliplite/grounding.hpp"
#include "cliplite/mi_bench.hpp"
#include "cliplite/rng.hpp"
#include "cliplite/synth_data.hpp"
#include "cliplite/training.hpp"

namespace cliplite {

using Json = nlohmann::ordered_json;

/// Invalid or unknown configuration content.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DataSection {
  std::size_t n = 4096;
  double synonym_rate = 0.5;
  double noise = 0.03;
  double test_fraction = 0.1;
  std::string split = "random";  // "random" or "unseen_combination"
  std::string unseen_color = "red";
  std::string unseen_shape = "square";

  bool operator==(const DataSection&) const = default;
};

struct TrainSection {
  std::string objective = "jsd_single_neg";
  std::size_t batch_size = 64;
  std::size_t total_steps = 3000;
  std::string optimizer = "auto";
  std::optional<double> base_lr;
  std::optional<double> weight_decay;
  std::optional<bool> lookahead;
  double momentum = 0.9;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double lookahead_alpha = 0.5;
  std::size_t lookahead_k = 5;
  std::size_t warmup_steps = 100;
  std::size_t eval_every = 0;
  std::size_t checkpoint_every = 0;
  std::size_t log_every = 1;
  bool log_wall_time = false;  // off by default so metrics CSVs are byte-reproducible
  std::string resume_from;

  bool operator==(const TrainSection&) const = default;
};

struct EvalSection {
  std::vector<std::size_t> ks{1, 5, 10};
  std::vector<std::string> templates{"a photo of a {}", "a picture of a {}", "a {}"};
  std::string probe_target = "shape";
  double probe_lr = 0.5;
  double probe_l2 = 1e-4;
  std::size_t probe_max_iters = 2000;
  double probe_tol = 1e-7;
  bool probe_random_baseline = true;

  bool operator==(const EvalSection&) const = default;
};

struct MiBenchSection {
  std::vector<std::string> estimators{"jsd", "infonce", "dv"};
  std::vector<std::size_t> batch_sizes{8, 64};
  std::vector<double> rhos{0.0, 0.3, 0.6, 0.9};
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::size_t d = 1;
  std::size_t steps = 2000;
  double lr = 2e-3;
  std::size_t width = 32;
  std::size_t eval_samples = 2048;

  bool operator==(const MiBenchSection&) const = default;
};

struct EditSection {
  std::size_t k = 1;
  std::size_t top_n = 10;

  bool operator==(const EditSection&) const = default;
};

struct GroundSection {
  std::size_t n_images = 500;
  double mass_fraction = 0.5;
  std::size_t dump = 4;
  std::string upsample = "nearest";

  bool operator==(const GroundSection&) const = default;
};

struct GradcheckSection {
  double epsilon = 1e-5;
  double tolerance = 1e-4;

  bool operator==(const GradcheckSection&) const = default;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::string out_dir;     // empty: runs/<config hash>-<seed>
  std::string checkpoint;  // model checkpoint read by eval, edit and ground commands
  DataSection data;
  TrainSection train;
  EvalSection eval;
  MiBenchSection mi_bench;
  EditSection edit;
  GroundSection ground;
  GradcheckSection gradcheck;

  bool operator==(const ExperimentConfig&) const = default;
};

// ---------------------------------------------------------------------------
// Serialization

inline Json to_json(const ExperimentConfig& c) {
  auto opt = [](const auto& o) { return o ? Json(*o) : Json(nullptr); };
  Json j;
  j["seed"] = c.seed;
  j["out_dir"] = c.out_dir;
  j["checkpoint"] = c.checkpoint;
  j["data"] = {{"n", c.data.n},
               {"synonym_rate", c.data.synonym_rate},
               {"noise", c.data.noise},
               {"test_fraction", c.data.test_fraction},
               {"split", c.data.split},
               {"unseen_color", c.data.unseen_color},
               {"unseen_shape", c.data.unseen_shape}};
  const auto& t = c.train;
  j["train"] = {{"objective", t.objective},
                {"batch_size", t.batch_size},
                {"total_steps", t.total_steps},
                {"optimizer", t.optimizer},
                {"base_lr", opt(t.base_lr)},
                {"weight_decay", opt(t.weight_decay)},
                {"lookahead", opt(t.lookahead)},
                {"momentum", t.momentum},
                {"beta1", t.beta1},
                {"beta2", t.beta2},
                {"eps", t.eps},
                {"lookahead_alpha", t.lookahead_alpha},
                {"lookahead_k", t.lookahead_k},
                {"warmup_steps", t.warmup_steps},
                {"eval_every", t.eval_every},
                {"checkpoint_every", t.checkpoint_every},
                {"log_every", t.log_every},
                {"log_wall_time", t.log_wall_time},
                {"resume_from", t.resume_from}};
  const auto& e = c.eval;
  j["eval"] = {{"ks", e.ks},
               {"templates", e.templates},
               {"probe_target", e.probe_target},
               {"probe_lr", e.probe_lr},
               {"probe_l2", e.probe_l2},
               {"probe_max_iters", e.probe_max_iters},
               {"probe_tol", e.probe_tol},
               {"probe_random_baseline", e.probe_random_baseline}};
  const auto& m = c.mi_bench;
  j["mi_bench"] = {{"estimators", m.estimators}, {"batch_sizes", m.batch_sizes},
                   {"rhos", m.rhos},             {"seeds", m.seeds},
                   {"d", m.d},                   {"steps", m.steps},
                   {"lr", m.lr},                 {"width", m.width},
                   {"eval_samples", m.eval_samples}};
  j["edit"] = {{"k", c.edit.k}, {"top_n", c.edit.top_n}};
  j["ground"] = {{"n_images", c.ground.n_images},
                 {"mass_fraction", c.ground.mass_fraction},
                 {"dump", c.ground.dump},
                 {"upsample", c.ground.upsample}};
  j["gradcheck"] = {{"epsilon", c.gradcheck.epsilon}, {"tolerance", c.gradcheck.tolerance}};
  return j;
}

namespace detail {

/// Reads the members of one JSON object and rejects any it was not asked for.
class ObjectReader {
 public:
  ObjectReader(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + " must be a JSON object");
  }

  template <class T>
  void get(const char* key, T& dst) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    read(j_.at(key), dst, where(key));
  }

  ObjectReader sub(const char* key) {
    seen_.insert(key);
    static const Json empty = Json::object();
    return ObjectReader(j_.contains(key) ? j_.at(key) : empty, where(key));
  }

  void finish() const {
    for (const auto& item : j_.items()) {
      if (!seen_.count(item.key())) throw ConfigError("unknown config key '" + where(item.key()) + "'");
    }
  }

 private:
  std::string where(const std::string& key = "") const {
    if (key.empty()) return path_.empty() ? "config" : path_;
    return path_.empty() ? key : path_ + "." + key;
  }

  static void read(const Json& v, std::uint64_t& dst, const std::string& at) {
    if (!v.is_number_unsigned()) throw ConfigError(at + " must be a non-negative integer");
    dst = v.get<std::uint64_t>();
  }
  static void read(const Json& v, double& dst, const std::string& at) {
    if (!v.is_number()) throw ConfigError(at + " must be a number");
    dst = v.get<double>();
  }
  static void read(const Json& v, bool& dst, const std::string& at) {
    if (!v.is_boolean()) throw ConfigError(at + " must be true or false");
    dst = v.get<bool>();
  }
  static void read(const Json& v, std::string& dst, const std::string& at) {
    if (!v.is_string()) throw ConfigError(at + " must be a string");
    dst = v.get<std::string>();
  }
  template <class T>
  static void read(const Json& v, std::optional<T>& dst, const std::string& at) {
    if (v.is_null() || (v.is_string() && v.get<std::string>() == "auto")) {
      dst.reset();
      return;
    }
    T x{};
    read(v, x, at);
    dst = x;
  }
  template <class T>
  static void read(const Json& v, std::vector<T>& dst, const std::string& at) {
    if (!v.is_array()) throw ConfigError(at + " must be an array");
    dst.clear();
    for (std::size_t i = 0; i < v.size(); ++i) {
      T x{};
      read(v[i], x, at + "[" + std::to_string(i) + "]");
      dst.push_back(x);
    }
  }

  const Json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

}  // namespace detail

/// Strict parse: defaults for missing keys, ConfigError for unknown keys or
/// wrongly typed values. Does not validate value ranges; see validate().
inline ExperimentConfig config_from_json(const Json& j) {
  ExperimentConfig c;
  detail::ObjectReader r(j, "");
  r.get("seed", c.seed);
  r.get("out_dir", c.out_dir);
  r.get("checkpoint", c.checkpoint);
  {
    auto s = r.sub("data");
    s.get("n", c.data.n);
    s.get("synonym_rate", c.data.synonym_rate);
    s.get("noise", c.data.noise);
    s.get("test_fraction", c.data.test_fraction);
    s.get("split", c.data.split);
    s.get("unseen_color", c.data.unseen_color);
    s.get("unseen_shape", c.data.unseen_shape);
    s.finish();
  }
  {
    auto s = r.sub("train");
    auto& t = c.train;
    s.get("objective", t.objective);
    s.get("batch_size", t.batch_size);
    s.get("total_steps", t.total_steps);
    s.get("optimizer", t.optimizer);
    s.get("base_lr", t.base_lr);
    s.get("weight_decay", t.weight_decay);
    s.get("lookahead", t.lookahead);
    s.get("momentum", t.momentum);
    s.get("beta1", t.beta1);
    s.get("beta2", t.beta2);
    s.get("eps", t.eps);
    s.get("lookahead_alpha", t.lookahead_alpha);
    s.get("lookahead_k", t.lookahead_k);
    s.get("warmup_steps", t.warmup_steps);
    s.get("eval_every", t.eval_every);
    s.get("checkpoint_every", t.checkpoint_every);
    s.get("log_every", t.log_every);
    s.get("log_wall_time", t.log_wall_time);
    s.get("resume_from", t.resume_from);
    s.finish();
  }
  {
    auto s = r.sub("eval");
    auto& e = c.eval;
    s.get("ks", e.ks);
    s.get("templates", e.templates);
    s.get("probe_target", e.probe_target);
    s.get("probe_lr", e.probe_lr);
    s.get("probe_l2", e.probe_l2);
    s.get("probe_max_iters", e.probe_max_iters);
    s.get("probe_tol", e.probe_tol);
    s.get("probe_random_baseline", e.probe_random_baseline);
    s.finish();
  }
  {
    auto s = r.sub("mi_bench");
    auto& m = c.mi_bench;
    s.get("estimators", m.estimators);
    s.get("batch_sizes", m.batch_sizes);
    s.get("rhos", m.rhos);
    s.get("seeds", m.seeds);
    s.get("d", m.d);
    s.get("steps", m.steps);
    s.get("lr", m.lr);
    s.get("width", m.width);
    s.get("eval_samples", m.eval_samples);
    s.finish();
  }
  {
    auto s = r.sub("edit");
    s.get("k", c.edit.k);
    s.get("top_n", c.edit.top_n);
    s.finish();
  }
  {
    auto s = r.sub("ground");
    s.get("n_images", c.ground.n_images);
    s.get("mass_fraction", c.ground.mass_fraction);
    s.get("dump", c.ground.dump);
    s.get("upsample", c.ground.upsample);
    s.finish();
  }
  {
    auto s = r.sub("gradcheck");
    s.get("epsilon", c.gradcheck.epsilon);
    s.get("tolerance", c.gradcheck.tolerance);
    s.finish();
  }
  r.finish();
  return c;
}

inline std::string config_to_string(const ExperimentConfig& c) { return to_json(c).dump(2) + "\n"; }

inline ExperimentConfig parse_config(const std::string& text) {
  Json j;
  try {
    j = Json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  return config_from_json(j);
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ConfigError("missing config file '" + path.string() + "'");
  return parse_config(io::read_file(path));
}

/// Applies one "dotted.key=value" override. The value is read as JSON when it
/// parses as JSON and as a plain string otherwise. The key must name an
/// existing leaf.
inline ExperimentConfig apply_override(const ExperimentConfig& c, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos || eq == 0) {
    throw ConfigError("override '" + std::string(assignment) + "' must look like key=value");
  }
  const std::string key(assignment.substr(0, eq));
  const std::string text(assignment.substr(eq + 1));
  Json j = to_json(c);
  Json* node = &j;
  std::size_t start = 0;
  for (;;) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (!node->is_object() || !node->contains(part)) throw ConfigError("unknown config key '" + key + "'");
    node = &(*node)[part];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  if (node->is_object()) throw ConfigError("override '" + key + "' names a section, not a value");
  Json value = Json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  *node = value;
  return config_from_json(j);
}

// ---------------------------------------------------------------------------
// Resolution into module configs

inline Objective train_objective(const ExperimentConfig& c) { return parse_objective(c.train.objective); }

inline TrainConfig resolve_train_config(const ExperimentConfig& c) {
  const auto& t = c.train;
  TrainConfig r = default_train_config(parse_objective(t.objective));
  r.batch_size = t.batch_size;
  r.total_steps = t.total_steps;
  r.seed = c.seed;
  if (t.optimizer != "auto") {
    r.optimizer.kind = parse_optimizer_kind(t.optimizer);
    r.optimizer.lookahead.enabled = r.optimizer.kind == OptimizerKind::sgd_momentum;
  }
  if (t.base_lr) r.schedule.base_lr = *t.base_lr;
  if (t.weight_decay) r.optimizer.weight_decay = *t.weight_decay;
  if (t.lookahead) r.optimizer.lookahead.enabled = *t.lookahead;
  r.optimizer.momentum = t.momentum;
  r.optimizer.beta1 = t.beta1;
  r.optimizer.beta2 = t.beta2;
  r.optimizer.eps = t.eps;
  r.optimizer.lookahead.alpha = t.lookahead_alpha;
  r.optimizer.lookahead.k = t.lookahead_k;
  r.schedule.warmup_steps = t.warmup_steps;
  r.eval_every = t.eval_every;
  r.checkpoint_every = t.checkpoint_every;
  r.log_every = t.log_every;
  r.log_wall_time = t.log_wall_time;
  return r;
}

inline ShapesCorpusSpec corpus_spec(const ExperimentConfig& c) {
  return {c.data.n, c.seed, c.data.synonym_rate, c.data.noise};
}

inline ProbeTarget parse_probe_target(std::string_view s) {
  if (s == "shape") return ProbeTarget::shape;
  if (s == "color") return ProbeTarget::color;
  if (s == "texture") return ProbeTarget::texture;
  if (s == "cell") return ProbeTarget::cell;
  throw ConfigError("unknown probe target '" + std::string(s) + "'");
}

inline ProbeConfig probe_config(const ExperimentConfig& c) {
  return {c.eval.probe_lr, c.eval.probe_l2, c.eval.probe_max_iters, c.eval.probe_tol};
}

inline MiBenchConfig mi_bench_config(const ExperimentConfig& c) {
  MiBenchConfig m;
  m.estimators.clear();
  for (const auto& e : c.mi_bench.estimators) m.estimators.push_back(parse_bound_kind(e));
  m.batch_sizes = c.mi_bench.batch_sizes;
  m.rhos = c.mi_bench.rhos;
  m.seeds = c.mi_bench.seeds;
  m.d = c.mi_bench.d;
  m.steps = c.mi_bench.steps;
  m.lr = c.mi_bench.lr;
  m.width = c.mi_bench.width;
  m.eval_samples = c.mi_bench.eval_samples;
  return m;
}

inline Upsample parse_upsample(std::string_view s) {
  if (s == "nearest") return Upsample::nearest;
  if (s == "bilinear") return Upsample::bilinear;
  throw ConfigError("unknown upsample mode '" + std::string(s) + "'");
}

inline int index_of(std::span<const std::string_view> names, std::string_view s, const char* what) {
  for (std::size_t i = 0; i < names.size(); ++i)
    if (names[i] == s) return static_cast<int>(i);
  throw ConfigError(std::string("unknown ") + what + " '" + std::string(s) + "'");
}

/// Held-out split selected by data.split.
inline Split resolve_split(const ExperimentConfig& c, const ShapesCorpus& corpus) {
  if (c.data.split == "random") {
    return train_test_split(corpus.size(), c.data.test_fraction, c.seed);
  }
  return unseen_combination_split(corpus, index_of(grammar::kColors, c.data.unseen_color, "color"),
                                  index_of(grammar::kShapes, c.data.unseen_shape, "shape"));
}

/// Range checks across sections. Throws ConfigError naming the field.
inline void validate(const ExperimentConfig& c) {
  auto check = [](bool ok, const std::string& msg) {
    if (!ok) throw ConfigError(msg);
  };
  auto wrap = [](auto&& fn) {
    try {
      fn();
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception& e) {
      throw ConfigError(e.what());
    }
  };
  check(c.data.n >= 2, "data.n must be >= 2");
  check(c.data.synonym_rate >= 0.0 && c.data.synonym_rate <= 1.0, "data.synonym_rate must lie in [0, 1]");
  check(c.data.noise >= 0.0, "data.noise must be >= 0");
  check(c.data.test_fraction > 0.0 && c.data.test_fraction < 1.0, "data.test_fraction must lie in (0, 1)");
  check(c.data.split == "random" || c.data.split == "unseen_combination",
        "data.split must be \"random\" or \"unseen_combination\"");
  index_of(grammar::kColors, c.data.unseen_color, "color");
  index_of(grammar::kShapes, c.data.unseen_shape, "shape");
  check(c.train.optimizer == "auto" || c.train.optimizer == "sgd_momentum" || c.train.optimizer == "adamw",
        "train.optimizer must be \"auto\", \"sgd_momentum\" or \"adamw\"");
  wrap([&] { resolve_train_config(c).validate(); });
  check(!c.eval.ks.empty(), "eval.ks must not be empty");
  for (std::size_t k : c.eval.ks) check(k >= 1, "eval.ks entries must be >= 1");
  check(!c.eval.templates.empty(), "eval.templates must not be empty");
  wrap([&] {
    for (const auto& t : c.eval.templates) fill_prompt(t, "square");
  });
  parse_probe_target(c.eval.probe_target);
  check(c.eval.probe_lr > 0.0 && c.eval.probe_l2 >= 0.0, "eval.probe_lr must be > 0 and probe_l2 >= 0");
  wrap([&] { mi_bench_config(c).validate(); });
  check(c.edit.k >= 1, "edit.k must be >= 1");
  check(c.edit.top_n >= 1, "edit.top_n must be >= 1");
  check(c.ground.mass_fraction > 0.0 && c.ground.mass_fraction <= 1.0, "ground.mass_fraction must lie in (0, 1]");
  check(c.ground.n_images >= 1, "ground.n_images must be >= 1");
  parse_upsample(c.ground.upsample);
  check(c.gradcheck.epsilon > 0.0 && c.gradcheck.tolerance > 0.0, "gradcheck epsilon and tolerance must be > 0");
}

// ---------------------------------------------------------------------------
// Identity

/// Hash of everything that determines results. Paths (out_dir, checkpoint,
/// train.resume_from) and the periodic checkpoint/eval cadence are excluded,
/// so a resumed or relocated run keeps its hash.
inline std::string config_hash(const ExperimentConfig& c) {
  Json j = to_json(c);
  j.erase("out_dir");
  j.erase("checkpoint");
  j["train"].erase("resume_from");
  j["train"].erase("checkpoint_every");
  j["train"].erase("eval_every");
  return hex64(fnv1a64(j.dump())).substr(0, 12);
}

inline std::filesystem::path default_out_dir(const ExperimentConfig& c) {
  return std::filesystem::path("runs") / (config_hash(c) + "-" + std::to_string(c.seed));
}

}  // namespace cliplite
