// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <string>

#include "f3lab/data.hpp"
#include "f3lab/model.hpp"
#include "f3lab/rng.hpp"

namespace f3lab {

enum class AttackMethod { Pgd, CarliniWagner, EotPgd };

inline std::string to_string(AttackMethod m) {
  switch (m) {
    case AttackMethod::Pgd:
      return "pgd";
    case AttackMethod::CarliniWagner:
      return "cw";
    case AttackMethod::EotPgd:
      return "eot_pgd";
  }
  return "?";
}

inline AttackMethod parse_attack_method(const std::string& s) {
  if (s == "pgd") return AttackMethod::Pgd;
  if (s == "cw") return AttackMethod::CarliniWagner;
  if (s == "eot_pgd") return AttackMethod::EotPgd;
  throw ConfigError("unknown attack method: " + s);
}

/// Step sizes and budgets are in [0, 1] pixel units.
struct AttackConfig {
  AttackMethod method = AttackMethod::Pgd;
  std::size_t steps = 20;
  double step_size = 2.0 / 255.0;
  double eps_inf = 8.0 / 255.0;
  double c = 0.005;
  std::size_t eot_samples = 10;
  std::uint64_t seed = 0;

  static AttackConfig pgd() { return {}; }
  static AttackConfig cw() { return {AttackMethod::CarliniWagner, 50, 0.01, 0.0, 0.005, 1, 0}; }
  static AttackConfig eot_pgd() { return {AttackMethod::EotPgd, 20, 2.0 / 255.0, 8.0 / 255.0, 0.0, 10, 0}; }

  void validate() const {
    if (!(step_size > 0.0)) throw ConfigError("attack step_size must be > 0");
    if (method != AttackMethod::CarliniWagner && !(eps_inf > 0.0)) throw ConfigError("attack eps_inf must be > 0");
    if (c < 0.0) throw ConfigError("attack c must be >= 0");
    if (method == AttackMethod::EotPgd && eot_samples == 0) throw ConfigError("eot_samples must be >= 1");
  }
};

/// A randomized input transformation applied before inference.
using Purifier = std::function<Tensor(const Model&, const Tensor& image, const TokenSeq&, Rng&)>;

inline void clamp01(Tensor& x) {
  for (double& v : x.data()) v = std::clamp(v, 0.0, 1.0);
}

/// Clamps v to [center - eps, center + eps] such that the computed |v - center|
/// does not exceed eps, then to [0, 1].
inline double clamp_within(double v, double center, double eps) {
  v = std::clamp(v, center - eps, center + eps);
  while (std::abs(v - center) > eps) v = std::nextafter(v, center);
  return std::clamp(v, 0.0, 1.0);
}

/// Projects onto {y : ||y - center||_inf <= eps} intersected with [0, 1].
inline void project_linf(Tensor& x, const Tensor& center, double eps) {
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = clamp_within(x[i], center[i], eps);
}

inline void sign_step(Tensor& x, const Tensor& grad, double step) {
  for (std::size_t i = 0; i < x.size(); ++i) x[i] += step * ad::sign_of(grad[i]);
}

/// Untargeted l_inf PGD ascending the answer loss; starts at the clean image.
inline Tensor pgd_attack(const Model& model, const Sample& sample, const AttackConfig& cfg) {
  cfg.validate();
  Tensor x = sample.image;
  const LossSpec spec = loss::lvlm(sample.answer_label);
  for (std::size_t t = 0; t < cfg.steps; ++t) {
    sign_step(x, input_grad(model, x, sample.question, spec), cfg.step_size);
    project_linf(x, sample.image, cfg.eps_inf);
  }
  return x;
}

/// Sign-gradient ascent on lvlm_loss(x') - c * ||x - x'||_2, clamped to [0, 1] only.
inline Tensor cw_attack(const Model& model, const Sample& sample, const AttackConfig& cfg) {
  cfg.validate();
  Tensor x = sample.image;
  const LossSpec spec = loss::carlini_wagner(sample.answer_label, sample.image, cfg.c);
  for (std::size_t t = 0; t < cfg.steps; ++t) {
    sign_step(x, input_grad(model, x, sample.question, spec), cfg.step_size);
    clamp01(x);
  }
  return x;
}

/// PGD against a randomized purifier. Each step averages, over eot_samples
/// purifier draws, the answer-loss gradient at the purified image. The purifier
/// is differentiated straight-through: its noise is treated as a constant offset
/// and its final [0, 1] clamp passes gradient only where the output is interior.
inline Tensor eot_pgd_adaptive(const Model& model, const Purifier& purifier, const Sample& sample,
                               const AttackConfig& cfg, Rng& rng) {
  cfg.validate();
  Tensor x = sample.image;
  const LossSpec spec = loss::lvlm(sample.answer_label);
  for (std::size_t t = 0; t < cfg.steps; ++t) {
    Tensor avg(x.shape());
    for (std::size_t e = 0; e < cfg.eot_samples; ++e) {
      const Tensor purified = purifier(model, x, sample.question, rng);
      const Tensor g = input_grad(model, purified, sample.question, spec);
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (purified[i] > 0.0 && purified[i] < 1.0) avg[i] += g[i];
      }
    }
    for (double& v : avg.data()) v /= static_cast<double>(cfg.eot_samples);
    sign_step(x, avg, cfg.step_size);
    project_linf(x, sample.image, cfg.eps_inf);
  }
  return x;
}

/// Fraction of positions whose answer changed.
inline double attack_success_rate(std::span<const std::size_t> before, std::span<const std::size_t> after) {
  if (before.size() != after.size()) throw ConfigError("answer lists differ in length");
  if (before.empty()) return 0.0;
  std::size_t changed = 0;
  for (std::size_t i = 0; i < before.size(); ++i) changed += before[i] != after[i];
  return static_cast<double>(changed) / static_cast<double>(before.size());
}

}  // namespace f3lab
