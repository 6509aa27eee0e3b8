// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "f3lab/attacks.hpp"
#include "f3lab/autodiff.hpp"
#include "f3lab/model.hpp"
#include "f3lab/rng.hpp"

namespace f3lab {

enum class Distance { Mse, Kl };

inline std::string to_string(Distance d) { return d == Distance::Mse ? "mse" : "kl"; }

inline Distance parse_distance(const std::string& s) {
  if (s == "mse") return Distance::Mse;
  if (s == "kl") return Distance::Kl;
  throw ConfigError("unknown attention distance: " + s);
}

inline constexpr double kKlSmoothing = 1e-9;

// ---------------------------------------------------------------------------
// Attention distances

namespace detail {

// Row-normalize, add kKlSmoothing to every entry and renormalize.
inline ad::Var smoothed_distribution(const ad::Var& rows) {
  const double m = static_cast<double>(rows.value().cols());
  return ad::scale(ad::add_scalar(ad::normalize_rows(rows), kKlSmoothing), 1.0 / (1.0 + m * kKlSmoothing));
}

}  // namespace detail

/// Distance between reference rows `ref` and `att`, both (L*H, M).
/// mse: mean squared difference over all entries.
/// kl:  mean over rows of KL(normalize(ref) || normalize(att)).
inline ad::Var attention_distance(const ad::Var& ref, const ad::Var& att, Distance kind) {
  if (ref.shape() != att.shape()) throw ShapeError("attention_distance shape mismatch");
  if (kind == Distance::Mse) return ad::mean(ad::square(ad::sub(att, ref)));
  const double rows = static_cast<double>(ref.value().rows());
  ad::Var terms = ad::kl_terms(detail::smoothed_distribution(ref), detail::smoothed_distribution(att));
  return ad::scale(ad::sum(terms), 1.0 / rows);
}

inline double attention_distance(const AttentionTensor& a1, const AttentionTensor& a2, Distance kind) {
  if (a1.values().shape() != a2.values().shape()) throw ShapeError("attention tensors differ in shape");
  const std::size_t m = a1.tokens();
  const std::size_t r = a1.layers() * a1.heads();
  ad::Tape tape;
  ad::Var v1 = tape.constant(a1.values().reshaped({r, m}));
  ad::Var v2 = tape.constant(a2.values().reshaped({r, m}));
  return attention_distance(v1, v2, kind).value().item();
}

/// Loss pulling the input's attention toward fixed reference rows (L*H, M).
inline LossSpec attention_loss(Tensor reference_rows, Distance kind) {
  return [ref = std::move(reference_rows), kind](ad::Tape& t, const ForwardVars& f, const ad::Var&) {
    return attention_distance(t.constant(ref), f.attention, kind);
  };
}

// ---------------------------------------------------------------------------
// Configuration

enum class Variant { V1, V2, V3, V3Multistep, Oracle, RandomResizePad };

inline std::string to_string(Variant v) {
  switch (v) {
    case Variant::V1:
      return "v1";
    case Variant::V2:
      return "v2";
    case Variant::V3:
      return "v3";
    case Variant::V3Multistep:
      return "v3_multistep";
    case Variant::Oracle:
      return "oracle";
    case Variant::RandomResizePad:
      return "rp";
  }
  return "?";
}

inline Variant parse_variant(const std::string& s) {
  for (Variant v : {Variant::V1, Variant::V2, Variant::V3, Variant::V3Multistep, Variant::Oracle,
                    Variant::RandomResizePad}) {
    if (to_string(v) == s) return v;
  }
  throw ConfigError("unknown purification variant: " + s);
}

/// Bounds are in [0, 1] pixel units.
struct PurifyConfig {
  Variant variant = Variant::V3;
  double alpha_inf = 16.0 / 255.0;
  double beta_inf = 32.0 / 255.0;
  double gamma_inf = 32.0 / 255.0;
  std::size_t steps = 1;  // K, multistep only
  double eps_inf_total = 16.0 / 255.0;
  Distance distance = Distance::Mse;
  double rp_min_scale = 0.8;
  std::uint64_t seed = 0;

  void validate() const {
    if (alpha_inf < 0 || beta_inf < 0 || gamma_inf < 0 || eps_inf_total < 0) {
      throw ConfigError("purification bounds must be >= 0");
    }
    if (steps == 0) throw ConfigError("purification steps K must be >= 1");
    if (variant == Variant::V3Multistep && beta_inf > eps_inf_total) {
      throw ConfigError("multistep per-step bound exceeds the total budget");
    }
    if (!(rp_min_scale > 0.0 && rp_min_scale <= 1.0)) throw ConfigError("rp_min_scale must be in (0, 1]");
  }
};

struct PurifyResult {
  Tensor purified;
  Tensor reference;  // x^R when drawn
  Tensor grad;       // g when computed (last step for multistep)
  double l1 = 0.0;   // sum |x^p - x'|
  double linf = 0.0;
  std::vector<double> draws;  // scalar random draws (beta, gamma, R&P parameters)
};

inline void finish(PurifyResult& r, const Tensor& input) {
  r.l1 = sum_abs_diff(r.purified, input);
  r.linf = max_abs_diff(r.purified, input);
}

// ---------------------------------------------------------------------------
// F3 building blocks

/// x^R = clamp(x' - a), a ~ U[-alpha, alpha] per pixel.
inline Tensor random_perturb(const Tensor& x, double alpha_inf, Rng& rng) {
  Tensor out = x;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = clamp_within(x[i] - rng.uniform(-alpha_inf, alpha_inf), x[i], alpha_inf);
  return out;
}

/// Gradient w.r.t. x' of the distance between A(x') and the reference A(x^R).
/// The reference is a constant target. `reference_out` receives x^R.
inline Tensor f3_grad(const Model& model, const Tensor& x, const TokenSeq& q, double alpha_inf, Distance kind,
                      Rng& rng, Tensor* reference_out = nullptr) {
  Tensor reference = random_perturb(x, alpha_inf, rng);
  const Prediction ref = predict(model, reference, q);
  const std::size_t rows = ref.attention.layers() * ref.attention.heads();
  Tensor g = input_grad(model, x, q, attention_loss(ref.attention.values().reshaped({rows, ref.attention.tokens()}), kind));
  if (reference_out) *reference_out = std::move(reference);
  return g;
}

/// Per-pixel magnitude beta * max(0, min(g_norm / mean(g_norm), 1)) with
/// g_norm = (g - g_min) / (g_max - g_min) over the whole tensor.
/// Constant g gives g_norm = 1; a vanishing mean gives magnitude 0.
inline Tensor f3_scale(const Tensor& g, double beta_inf) {
  const auto [lo, hi] = std::minmax_element(g.data().begin(), g.data().end());
  const double g_min = *lo, g_max = *hi;
  Tensor out(g.shape());
  if (g_max - g_min < 1e-12) {
    for (double& v : out.data()) v = beta_inf;
    return out;
  }
  const double range = g_max - g_min;
  double total = 0.0;
  for (std::size_t i = 0; i < g.size(); ++i) {
    out[i] = (g[i] - g_min) / range;
    total += out[i];
  }
  const double avg = total / static_cast<double>(g.size());
  for (std::size_t i = 0; i < g.size(); ++i) {
    out[i] = avg < 1e-12 ? 0.0 : beta_inf * std::max(0.0, std::min(out[i] / avg, 1.0));
  }
  return out;
}

inline PurifyResult f3_v1(const Tensor& x, double alpha_inf, Rng& rng) {
  PurifyResult r;
  r.purified = random_perturb(x, alpha_inf, rng);
  r.reference = r.purified;
  finish(r, x);
  return r;
}

/// x^p = clamp(x' - beta * sign(g)), one scalar beta ~ U[0, beta_inf] per call.
inline PurifyResult f3_v2(const Model& model, const Tensor& x, const TokenSeq& q, double alpha_inf,
                          double beta_inf, Distance kind, Rng& rng) {
  PurifyResult r;
  r.grad = f3_grad(model, x, q, alpha_inf, kind, rng, &r.reference);
  const double beta = rng.uniform(0.0, beta_inf);
  r.draws.push_back(beta);
  r.purified = x;
  for (std::size_t i = 0; i < x.size(); ++i) r.purified[i] = clamp_within(x[i] - beta * ad::sign_of(r.grad[i]), x[i], beta);
  finish(r, x);
  return r;
}

/// x^p = clamp(x' - f3_scale(g, beta_inf) * sign(g)).
inline PurifyResult f3_v3(const Model& model, const Tensor& x, const TokenSeq& q, double alpha_inf,
                          double beta_inf, Distance kind, Rng& rng) {
  PurifyResult r;
  r.grad = f3_grad(model, x, q, alpha_inf, kind, rng, &r.reference);
  const Tensor magnitude = f3_scale(r.grad, beta_inf);
  r.purified = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    r.purified[i] = clamp_within(x[i] - magnitude[i] * ad::sign_of(r.grad[i]), x[i], magnitude[i]);
  }
  finish(r, x);
  return r;
}

/// K rounds of f3_v3, redrawing x^R from the current iterate each round and
/// projecting onto the eps_inf_total ball around the input after each round.
inline PurifyResult f3_multistep(const Model& model, const Tensor& x, const TokenSeq& q, double alpha_inf,
                                 double beta_inf_step, std::size_t steps, double eps_inf_total, Distance kind,
                                 Rng& rng) {
  if (steps == 0) throw ConfigError("multistep purification needs K >= 1");
  PurifyResult r;
  Tensor current = x;
  for (std::size_t k = 0; k < steps; ++k) {
    PurifyResult step = f3_v3(model, current, q, alpha_inf, beta_inf_step, kind, rng);
    current = std::move(step.purified);
    project_linf(current, x, eps_inf_total);
    r.reference = std::move(step.reference);
    r.grad = std::move(step.grad);
  }
  r.purified = std::move(current);
  finish(r, x);
  return r;
}

/// Alignment toward the true clean attention; analysis only.
inline PurifyResult oracle_purify(const Model& model, const Tensor& x, const Tensor& clean, const TokenSeq& q,
                                  double gamma_inf, Distance kind, Rng& rng) {
  PurifyResult r;
  const Prediction target = predict(model, clean, q);
  const std::size_t rows = target.attention.layers() * target.attention.heads();
  r.grad = input_grad(model, x, q,
                      attention_loss(target.attention.values().reshaped({rows, target.attention.tokens()}), kind));
  const double gamma = rng.uniform(0.0, gamma_inf);
  r.draws.push_back(gamma);
  r.purified = x;
  for (std::size_t i = 0; i < x.size(); ++i) r.purified[i] = clamp_within(x[i] - gamma * ad::sign_of(r.grad[i]), x[i], gamma);
  finish(r, x);
  return r;
}

// ---------------------------------------------------------------------------
// Random resizing and padding

/// Bilinear resize of an (H, W, C) image by `scale`, pasted at (top, left) on a
/// zero canvas of the original size. Sampling positions follow the continuous
/// scale; the pasted extent is the rounded size.
inline Tensor resize_pad(const Tensor& x, double scale, std::size_t top, std::size_t left) {
  if (x.rank() != 3) throw ShapeError("resize_pad expects an (H, W, C) image");
  if (!(scale > 0.0 && scale <= 1.0)) throw ConfigError("resize scale must be in (0, 1]");
  const std::size_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
  const auto nh = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(scale * static_cast<double>(h))), 1, h);
  const auto nw = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(scale * static_cast<double>(w))), 1, w);
  if (top + nh > h || left + nw > w) throw ShapeError("resize_pad offset places the image off the canvas");
  const double sy = 1.0 / scale, sx = 1.0 / scale;
  Tensor out(x.shape());
  for (std::size_t i = 0; i < nh; ++i) {
    const double fy = std::clamp((static_cast<double>(i) + 0.5) * sy - 0.5, 0.0, static_cast<double>(h - 1));
    const auto y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, h - 1);
    const double wy = fy - static_cast<double>(y0);
    for (std::size_t j = 0; j < nw; ++j) {
      const double fx = std::clamp((static_cast<double>(j) + 0.5) * sx - 0.5, 0.0, static_cast<double>(w - 1));
      const auto x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, w - 1);
      const double wx = fx - static_cast<double>(x0);
      for (std::size_t k = 0; k < c; ++k) {
        auto px = [&](std::size_t yy, std::size_t xx) { return x[(yy * w + xx) * c + k]; };
        const double top_row = (1.0 - wx) * px(y0, x0) + wx * px(y0, x1);
        const double bottom_row = (1.0 - wx) * px(y1, x0) + wx * px(y1, x1);
        out[((top + i) * w + (left + j)) * c + k] = (1.0 - wy) * top_row + wy * bottom_row;
      }
    }
  }
  return out;
}

inline PurifyResult rp_baseline(const Tensor& x, Rng& rng, double min_scale = 0.8) {
  PurifyResult r;
  const double scale = rng.uniform(min_scale, 1.0);
  const std::size_t h = x.dim(0), w = x.dim(1);
  const auto nh = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(scale * static_cast<double>(h))), 1, h);
  const auto nw = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(scale * static_cast<double>(w))), 1, w);
  const std::size_t top = rng.index(h - nh + 1);
  const std::size_t left = rng.index(w - nw + 1);
  r.draws = {scale, static_cast<double>(top), static_cast<double>(left)};
  r.purified = resize_pad(x, scale, top, left);
  finish(r, x);
  return r;
}

// ---------------------------------------------------------------------------
// Dispatch

/// Applies the configured purifier. `clean` is required only by the oracle.
inline PurifyResult purify(const Model& model, const PurifyConfig& cfg, const Tensor& x, const TokenSeq& q, Rng& rng,
                           const Tensor* clean = nullptr) {
  cfg.validate();
  switch (cfg.variant) {
    case Variant::V1:
      return f3_v1(x, cfg.alpha_inf, rng);
    case Variant::V2:
      return f3_v2(model, x, q, cfg.alpha_inf, cfg.beta_inf, cfg.distance, rng);
    case Variant::V3:
      return f3_v3(model, x, q, cfg.alpha_inf, cfg.beta_inf, cfg.distance, rng);
    case Variant::V3Multistep:
      return f3_multistep(model, x, q, cfg.alpha_inf, cfg.beta_inf, cfg.steps, cfg.eps_inf_total, cfg.distance, rng);
    case Variant::Oracle:
      if (!clean) throw ConfigError("oracle purification requires the clean image");
      return oracle_purify(model, x, *clean, q, cfg.gamma_inf, cfg.distance, rng);
    case Variant::RandomResizePad:
      return rp_baseline(x, rng, cfg.rp_min_scale);
  }
  throw ConfigError("unhandled purification variant");
}

inline Purifier make_purifier(const PurifyConfig& cfg) {
  if (cfg.variant == Variant::Oracle) throw ConfigError("the oracle cannot serve as a deployable purifier");
  cfg.validate();
  return [cfg](const Model& model, const Tensor& x, const TokenSeq& q, Rng& rng) {
    return purify(model, cfg, x, q, rng).purified;
  };
}

}  // namespace f3lab
