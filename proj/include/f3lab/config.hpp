// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "f3lab/attacks.hpp"
#include "f3lab/binary_io.hpp"
#include "f3lab/data.hpp"
#include "f3lab/model.hpp"
#include "f3lab/purify.hpp"
#include "f3lab/train.hpp"
#include "json.hpp"

namespace f3lab {

using Json = nlohmann::json;

inline constexpr std::uint32_t kConfigVersion = 1;
inline constexpr const char* kCodeVersion = "f3lab 0.1.0";

// ---------------------------------------------------------------------------
// Canonical JSON

namespace detail {

inline void dump_canonical(const Json& j, std::string& out, int depth) {
  const std::string pad(2 * static_cast<std::size_t>(depth + 1), ' ');
  const std::string close(2 * static_cast<std::size_t>(depth), ' ');
  switch (j.type()) {
    case Json::value_t::object: {
      if (j.empty()) {
        out += "{}";
        return;
      }
      out += "{\n";
      bool first = true;
      for (const auto& [key, value] : j.items()) {
        if (!first) out += ",\n";
        first = false;
        out += pad + Json(key).dump() + ": ";
        dump_canonical(value, out, depth + 1);
      }
      out += "\n" + close + "}";
      return;
    }
    case Json::value_t::array: {
      if (j.empty()) {
        out += "[]";
        return;
      }
      out += "[\n";
      for (std::size_t i = 0; i < j.size(); ++i) {
        if (i) out += ",\n";
        out += pad;
        dump_canonical(j[i], out, depth + 1);
      }
      out += "\n" + close + "]";
      return;
    }
    case Json::value_t::number_float: {
      const double v = j.get<double>();
      if (!std::isfinite(v)) throw ConfigError("non-finite number in report");
      out += format_double(v);
      return;
    }
    default:
      out += j.dump();
  }
}

}  // namespace detail

/// Sorted keys, two-space indent, doubles as %.17g; stable across platforms.
inline std::string canonical_json(const Json& j) {
  std::string out;
  detail::dump_canonical(j, out, 0);
  out += "\n";
  return out;
}

inline std::string json_hash(const Json& j) { return hex64(fnv1a64(canonical_json(j))); }

// ---------------------------------------------------------------------------
// Scalar helpers

/// Accepts a number or a string "p/q" (e.g. "16/255").
inline double parse_fraction(const Json& j, const std::string& what) {
  if (j.is_number()) return j.get<double>();
  if (j.is_string()) {
    const std::string s = j.get<std::string>();
    try {
      std::size_t used = 0;
      const auto slash = s.find('/');
      if (slash == std::string::npos) {
        const double v = std::stod(s, &used);
        if (used == s.size()) return v;
      } else {
        const double p = std::stod(s.substr(0, slash), &used);
        if (used == slash) {
          const std::string den = s.substr(slash + 1);
          const double q = std::stod(den, &used);
          if (used == den.size() && q != 0.0) return p / q;
        }
      }
    } catch (const std::logic_error&) {
    }
  }
  throw ConfigError(what + ": expected a number or a fraction like \"16/255\", got " + j.dump());
}

/// Renders a pixel bound in 1/255 units: 16/255 -> "16/255".
inline std::string fmt255(double v) {
  const double u = v * 255.0;
  char buf[40];
  if (std::abs(u - std::round(u)) < 1e-9) {
    std::snprintf(buf, sizeof buf, "%.0f/255", std::round(u));
  } else {
    std::snprintf(buf, sizeof buf, "%.6g/255", u);
  }
  return buf;
}

namespace detail {

inline void check_keys(const Json& j, const std::string& where, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  const std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& [key, _] : j.items()) {
    if (!ok.count(key)) throw ConfigError("unknown key \"" + key + "\" in " + where);
  }
}

template <class T>
void read(const Json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const Json::exception&) {
    throw ConfigError(where + "." + key + " has the wrong type");
  }
}

inline void read_fraction(const Json& j, const char* key, double& out, const std::string& where) {
  if (j.contains(key)) out = parse_fraction(j.at(key), where + "." + key);
}

inline std::vector<Json> as_list(const Json& j) {
  if (j.is_array()) {
    if (j.empty()) throw ConfigError("grid axis lists must be nonempty");
    return {j.begin(), j.end()};
  }
  return {j};
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Experiment configuration

struct DatasetSpec {
  std::size_t n = 0;
  std::uint64_t seed = 0;
};

enum class InputKind { Adversarial, Clean };

/// One evaluated condition: a purifier applied to adversarial or clean inputs,
/// optionally under an adaptive (EOT) attack against that purifier.
struct ConditionSpec {
  std::string label;
  InputKind input = InputKind::Adversarial;
  bool adaptive = false;
  PurifyConfig purify;
  std::size_t seeds = 1;
  std::string match_l1;  // calibrate beta_inf so the mean l1 matches this condition's
};

struct HeatmapSpec {
  std::vector<std::size_t> samples;
  std::vector<std::string> conditions;
};

struct ExperimentConfig {
  std::string name = "experiment";
  std::uint64_t seed = 0;
  std::size_t workers = 1;
  std::string output_dir = "runs/experiment";
  DatasetSpec train{2000, 1};
  DatasetSpec eval{400, 2};
  QTypeMix mix;
  std::size_t attack_samples = 200;
  std::string checkpoint;  // load this model instead of training
  ModelConfig model;
  TrainConfig training;
  AttackConfig attack = AttackConfig::pgd();
  AttackConfig adaptive_attack = AttackConfig::eot_pgd();
  std::vector<ConditionSpec> conditions;
  HeatmapSpec heatmaps;

  void validate() const;
};

inline std::string variant_params(const PurifyConfig& p) {
  std::string s = to_string(p.variant);
  switch (p.variant) {
    case Variant::V1:
      s += " a=" + fmt255(p.alpha_inf);
      break;
    case Variant::V2:
    case Variant::V3:
      s += " a=" + fmt255(p.alpha_inf) + " b=" + fmt255(p.beta_inf);
      break;
    case Variant::V3Multistep:
      s += " K=" + std::to_string(p.steps) + " a=" + fmt255(p.alpha_inf) + " b=" + fmt255(p.beta_inf) +
           " eps=" + fmt255(p.eps_inf_total);
      break;
    case Variant::Oracle:
      s += " g=" + fmt255(p.gamma_inf);
      break;
    case Variant::RandomResizePad: {
      char buf[32];
      std::snprintf(buf, sizeof buf, " s=%g", p.rp_min_scale);
      s += buf;
      break;
    }
  }
  const bool uses_distance = p.variant != Variant::V1 && p.variant != Variant::RandomResizePad;
  if (uses_distance && p.distance == Distance::Kl) s += " kl";
  return s;
}

inline std::string default_label(const ConditionSpec& c) {
  std::string prefix = c.adaptive ? "eot: " : c.input == InputKind::Clean ? "clean: " : "";
  if (!c.match_l1.empty()) {
    PurifyConfig p = c.purify;
    std::string s = variant_params(p);
    const auto pos = s.find(" b=");
    if (pos != std::string::npos) {
      const auto end = s.find(' ', pos + 1);
      s = s.substr(0, pos) + " b=l1-matched" + (end == std::string::npos ? "" : s.substr(end));
    }
    return prefix + s;
  }
  return prefix + variant_params(c.purify);
}

inline std::vector<ConditionSpec> expand_conditions(const Json& entry, const std::string& where) {
  detail::check_keys(entry, where,
                     {"label", "input", "adaptive", "variant", "alpha", "beta", "gamma", "steps", "eps_total",
                      "distance", "rp_min_scale", "seeds", "match_l1"});
  const PurifyConfig defaults;
  auto axis = [&](const char* key, Json fallback) { return detail::as_list(entry.value(key, fallback)); };
  const auto variants = axis("variant", "v3");
  const auto alphas = axis("alpha", defaults.alpha_inf);
  const auto betas = axis("beta", defaults.beta_inf);
  const auto gammas = axis("gamma", defaults.gamma_inf);
  const auto steps = axis("steps", defaults.steps);
  const auto eps = axis("eps_total", defaults.eps_inf_total);
  const auto distances = axis("distance", "mse");

  ConditionSpec base;
  const std::string input = entry.value("input", std::string("adversarial"));
  if (input == "clean") {
    base.input = InputKind::Clean;
  } else if (input != "adversarial") {
    throw ConfigError(where + ".input must be \"adversarial\" or \"clean\"");
  }
  detail::read(entry, "adaptive", base.adaptive, where);
  detail::read(entry, "seeds", base.seeds, where);
  detail::read(entry, "match_l1", base.match_l1, where);
  if (entry.contains("rp_min_scale")) base.purify.rp_min_scale = parse_fraction(entry["rp_min_scale"], where);
  if (base.seeds == 0) throw ConfigError(where + ".seeds must be >= 1");
  if (base.adaptive && base.input == InputKind::Clean) throw ConfigError(where + ": adaptive conditions attack clean inputs themselves");

  std::vector<ConditionSpec> out;
  for (const auto& v : variants)
    for (const auto& a : alphas)
      for (const auto& b : betas)
        for (const auto& g : gammas)
          for (const auto& k : steps)
            for (const auto& e : eps)
              for (const auto& d : distances) {
                ConditionSpec c = base;
                try {
                  c.purify.variant = parse_variant(v.get<std::string>());
                  c.purify.distance = parse_distance(d.get<std::string>());
                  c.purify.steps = k.get<std::size_t>();
                } catch (const Json::exception&) {
                  throw ConfigError(where + ": variant/distance must be strings and steps an integer");
                }
                c.purify.alpha_inf = parse_fraction(a, where + ".alpha");
                c.purify.beta_inf = parse_fraction(b, where + ".beta");
                c.purify.gamma_inf = parse_fraction(g, where + ".gamma");
                c.purify.eps_inf_total = parse_fraction(e, where + ".eps_total");
                c.purify.validate();
                if (c.adaptive && c.purify.variant == Variant::Oracle) {
                  throw ConfigError(where + ": the oracle cannot be attacked adaptively");
                }
                out.push_back(std::move(c));
              }
  if (entry.contains("label")) {
    if (out.size() != 1) throw ConfigError(where + ": an explicit label needs a single-condition entry");
    out[0].label = entry["label"].get<std::string>();
  } else {
    for (auto& c : out) c.label = default_label(c);
  }
  return out;
}

namespace detail {

inline AttackConfig parse_attack(const Json& j, AttackConfig cfg, const std::string& where) {
  check_keys(j, where, {"method", "steps", "step_size", "eps_inf", "c", "eot_samples", "seed"});
  if (j.contains("method")) {
    const AttackMethod m = parse_attack_method(j["method"].get<std::string>());
    if (m != cfg.method) {
      cfg = m == AttackMethod::Pgd ? AttackConfig::pgd() : m == AttackMethod::CarliniWagner ? AttackConfig::cw()
                                                                                             : AttackConfig::eot_pgd();
    }
  }
  read(j, "steps", cfg.steps, where);
  read_fraction(j, "step_size", cfg.step_size, where);
  read_fraction(j, "eps_inf", cfg.eps_inf, where);
  read_fraction(j, "c", cfg.c, where);
  read(j, "eot_samples", cfg.eot_samples, where);
  read(j, "seed", cfg.seed, where);
  cfg.validate();
  return cfg;
}

inline Json attack_json(const AttackConfig& a) {
  return {{"method", to_string(a.method)}, {"steps", a.steps},         {"step_size", a.step_size},
          {"eps_inf", a.eps_inf},         {"c", a.c},                 {"eot_samples", a.eot_samples},
          {"seed", a.seed}};
}

}  // namespace detail

inline Json purify_json(const PurifyConfig& p) {
  return {{"variant", to_string(p.variant)}, {"alpha_inf", p.alpha_inf}, {"beta_inf", p.beta_inf},
          {"gamma_inf", p.gamma_inf},       {"steps", p.steps},         {"eps_inf_total", p.eps_inf_total},
          {"distance", to_string(p.distance)}, {"rp_min_scale", p.rp_min_scale}};
}

inline Json condition_json(const ConditionSpec& c) {
  return {{"label", c.label},
          {"input", c.input == InputKind::Clean ? "clean" : "adversarial"},
          {"adaptive", c.adaptive},
          {"seeds", c.seeds},
          {"match_l1", c.match_l1},
          {"purify", purify_json(c.purify)}};
}

inline void ExperimentConfig::validate() const {
  if (train.n == 0 && checkpoint.empty()) throw ConfigError("data.train.n must be >= 1 when training");
  if (eval.n == 0) throw ConfigError("data.eval.n must be >= 1");
  if (attack_samples == 0 || attack_samples > eval.n) throw ConfigError("data.attack_samples must be in [1, eval.n]");
  if (conditions.empty()) throw ConfigError("the condition grid is empty");
  if (workers == 0) throw ConfigError("workers must be >= 1");
  model.validate();
  attack.validate();
  adaptive_attack.validate();
  std::set<std::string> labels = {"held-out", "clean", "adversarial"};
  for (const auto& c : conditions) {
    if (c.label.empty()) throw ConfigError("condition labels must be nonempty");
    if (c.label.find_first_of(",\"\n") != std::string::npos) {
      throw ConfigError("condition label \"" + c.label + "\" contains a comma, quote or newline");
    }
    if (!labels.insert(c.label).second) throw ConfigError("duplicate condition label \"" + c.label + "\"");
  }
  for (const auto& c : conditions) {
    if (!c.match_l1.empty() && !labels.count(c.match_l1)) {
      throw ConfigError("match_l1 target \"" + c.match_l1 + "\" is not a condition");
    }
  }
  for (const auto& h : heatmaps.conditions) {
    if (!labels.count(h)) throw ConfigError("heatmap condition \"" + h + "\" is not a condition");
  }
  for (auto s : heatmaps.samples) {
    if (s >= attack_samples) throw ConfigError("heatmap sample index out of range");
  }
}

inline ExperimentConfig parse_experiment_config(const Json& j) {
  detail::check_keys(j, "config",
                     {"config_version", "name", "seed", "workers", "output_dir", "data", "model", "training",
                      "attack", "adaptive_attack", "conditions", "heatmaps"});
  if (!j.contains("config_version")) throw ConfigError("config_version is required");
  const auto version = j["config_version"].get<std::uint32_t>();
  if (version != kConfigVersion) {
    throw VersionError("config version " + std::to_string(version) + " is not supported (expected " +
                       std::to_string(kConfigVersion) + ")");
  }
  ExperimentConfig cfg;
  detail::read(j, "name", cfg.name, "config");
  detail::read(j, "seed", cfg.seed, "config");
  detail::read(j, "workers", cfg.workers, "config");
  detail::read(j, "output_dir", cfg.output_dir, "config");

  if (j.contains("data")) {
    const Json& d = j["data"];
    detail::check_keys(d, "data", {"train", "eval", "mix", "attack_samples"});
    for (auto [key, spec] : {std::pair{"train", &cfg.train}, std::pair{"eval", &cfg.eval}}) {
      if (!d.contains(key)) continue;
      detail::check_keys(d[key], std::string("data.") + key, {"n", "seed"});
      detail::read(d[key], "n", spec->n, std::string("data.") + key);
      detail::read(d[key], "seed", spec->seed, std::string("data.") + key);
    }
    if (d.contains("mix")) {
      detail::check_keys(d["mix"], "data.mix", {"yes_no", "number", "other"});
      detail::read(d["mix"], "yes_no", cfg.mix.yes_no, "data.mix");
      detail::read(d["mix"], "number", cfg.mix.number, "data.mix");
      detail::read(d["mix"], "other", cfg.mix.other, "data.mix");
    }
    detail::read(d, "attack_samples", cfg.attack_samples, "data");
  }
  if (j.contains("model")) {
    const Json& m = j["model"];
    detail::check_keys(m, "model",
                       {"checkpoint", "image_height", "image_width", "channels", "patch", "vocab", "answers",
                        "layers", "heads", "width", "ffn_width", "max_question_len", "seed"});
    detail::read(m, "checkpoint", cfg.checkpoint, "model");
    detail::read(m, "image_height", cfg.model.image_height, "model");
    detail::read(m, "image_width", cfg.model.image_width, "model");
    detail::read(m, "channels", cfg.model.channels, "model");
    detail::read(m, "patch", cfg.model.patch, "model");
    detail::read(m, "vocab", cfg.model.vocab, "model");
    detail::read(m, "answers", cfg.model.answers, "model");
    detail::read(m, "layers", cfg.model.layers, "model");
    detail::read(m, "heads", cfg.model.heads, "model");
    detail::read(m, "width", cfg.model.width, "model");
    detail::read(m, "ffn_width", cfg.model.ffn_width, "model");
    detail::read(m, "max_question_len", cfg.model.max_question_len, "model");
    detail::read(m, "seed", cfg.model.seed, "model");
  }
  if (j.contains("training")) {
    const Json& t = j["training"];
    detail::check_keys(t, "training",
                       {"epochs", "learning_rate", "final_lr_fraction", "batch_size", "clip_norm", "noise_augment",
                        "seed"});
    detail::read(t, "epochs", cfg.training.epochs, "training");
    detail::read(t, "learning_rate", cfg.training.learning_rate, "training");
    detail::read(t, "final_lr_fraction", cfg.training.final_lr_fraction, "training");
    detail::read(t, "batch_size", cfg.training.batch_size, "training");
    detail::read(t, "clip_norm", cfg.training.clip_norm, "training");
    detail::read_fraction(t, "noise_augment", cfg.training.noise_augment, "training");
    detail::read(t, "seed", cfg.training.seed, "training");
  }
  if (j.contains("attack")) cfg.attack = detail::parse_attack(j["attack"], cfg.attack, "attack");
  if (j.contains("adaptive_attack")) {
    cfg.adaptive_attack = detail::parse_attack(j["adaptive_attack"], cfg.adaptive_attack, "adaptive_attack");
  }
  if (j.contains("conditions")) {
    if (!j["conditions"].is_array()) throw ConfigError("conditions must be a list");
    for (std::size_t i = 0; i < j["conditions"].size(); ++i) {
      auto expanded = expand_conditions(j["conditions"][i], "conditions[" + std::to_string(i) + "]");
      cfg.conditions.insert(cfg.conditions.end(), expanded.begin(), expanded.end());
    }
  }
  if (j.contains("heatmaps")) {
    detail::check_keys(j["heatmaps"], "heatmaps", {"samples", "conditions"});
    detail::read(j["heatmaps"], "samples", cfg.heatmaps.samples, "heatmaps");
    detail::read(j["heatmaps"], "conditions", cfg.heatmaps.conditions, "heatmaps");
  }
  cfg.training.workers = cfg.workers;
  cfg.validate();
  return cfg;
}

inline ExperimentConfig load_experiment_config(const std::string& path) {
  Json j;
  try {
    j = Json::parse(read_file(path));
  } catch (const Json::parse_error& e) {
    throw ConfigError("cannot parse " + path + ": " + e.what());
  }
  return parse_experiment_config(j);
}

/// Fully expanded configuration, excluding worker count and output location,
/// which never affect results.
inline Json config_echo(const ExperimentConfig& c) {
  Json conditions = Json::array();
  for (const auto& cond : c.conditions) conditions.push_back(condition_json(cond));
  const ModelConfig& m = c.model;
  const TrainConfig& t = c.training;
  return {
      {"config_version", kConfigVersion},
      {"name", c.name},
      {"seed", c.seed},
      {"data",
       {{"train", {{"n", c.train.n}, {"seed", c.train.seed}}},
        {"eval", {{"n", c.eval.n}, {"seed", c.eval.seed}}},
        {"mix", {{"yes_no", c.mix.yes_no}, {"number", c.mix.number}, {"other", c.mix.other}}},
        {"attack_samples", c.attack_samples}}},
      {"model",
       {{"checkpoint", c.checkpoint},
        {"image_height", m.image_height},
        {"image_width", m.image_width},
        {"channels", m.channels},
        {"patch", m.patch},
        {"vocab", m.vocab},
        {"answers", m.answers},
        {"layers", m.layers},
        {"heads", m.heads},
        {"width", m.width},
        {"ffn_width", m.ffn_width},
        {"max_question_len", m.max_question_len},
        {"seed", m.seed}}},
      {"training",
       {{"epochs", t.epochs},
        {"learning_rate", t.learning_rate},
        {"final_lr_fraction", t.final_lr_fraction},
        {"batch_size", t.batch_size},
        {"clip_norm", t.clip_norm},
        {"noise_augment", t.noise_augment},
        {"seed", t.seed}}},
      {"attack", detail::attack_json(c.attack)},
      {"adaptive_attack", detail::attack_json(c.adaptive_attack)},
      {"conditions", conditions},
      {"heatmaps", {{"samples", c.heatmaps.samples}, {"conditions", c.heatmaps.conditions}}},
  };
}

}  // namespace f3lab
