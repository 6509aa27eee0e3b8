// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "f3lab/attacks.hpp"
#include "f3lab/config.hpp"
#include "f3lab/data.hpp"
#include "f3lab/heatmap.hpp"
#include "f3lab/model.hpp"
#include "f3lab/parallel.hpp"
#include "f3lab/purify.hpp"
#include "f3lab/train.hpp"

namespace f3lab {

struct StageError : Error {
  using Error::Error;
};

// ---------------------------------------------------------------------------
// Per-sample records

struct SampleRecord {
  std::string condition;
  std::size_t seed = 0;
  std::size_t sample = 0;
  std::size_t label = 0;
  std::size_t answer = 0;
  std::size_t clean_answer = 0;
  double mse = 0.0;  // against the clean attention of the same sample
  double kl = 0.0;
  double l1 = 0.0;  // sum |x_eval - x_input| over pixels
  double linf = 0.0;
  friend bool operator==(const SampleRecord&, const SampleRecord&) = default;
};

inline constexpr const char* kRecordsHeader = "condition,seed,sample,label,answer,clean_answer,correct,mse,kl,l1,linf";

inline std::string records_csv(const std::vector<SampleRecord>& records) {
  std::string out = std::string(kRecordsHeader) + "\n";
  for (const auto& r : records) {
    out += r.condition + "," + std::to_string(r.seed) + "," + std::to_string(r.sample) + "," +
           std::to_string(r.label) + "," + std::to_string(r.answer) + "," + std::to_string(r.clean_answer) + "," +
           (r.answer == r.label ? "1" : "0") + "," + format_double(r.mse) + "," + format_double(r.kl) + "," +
           format_double(r.l1) + "," + format_double(r.linf) + "\n";
  }
  return out;
}

inline std::vector<SampleRecord> parse_records_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kRecordsHeader) throw CorruptFileError("records: unexpected header");
  std::vector<SampleRecord> out;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != 11) throw CorruptFileError("records: line " + std::to_string(lineno) + " has the wrong arity");
    try {
      SampleRecord r;
      r.condition = f[0];
      r.seed = std::stoull(f[1]);
      r.sample = std::stoull(f[2]);
      r.label = std::stoull(f[3]);
      r.answer = std::stoull(f[4]);
      r.clean_answer = std::stoull(f[5]);
      r.mse = std::stod(f[7]);
      r.kl = std::stod(f[8]);
      r.l1 = std::stod(f[9]);
      r.linf = std::stod(f[10]);
      out.push_back(std::move(r));
    } catch (const std::logic_error&) {
      throw CorruptFileError("records: bad value on line " + std::to_string(lineno));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Aggregation

struct ReportRow {
  std::string label;
  double accuracy = 0.0;  // x100
  double asr = 0.0;       // fraction of answers differing from the clean answer
  double mse = 0.0;
  double kl = 0.0;
  double l1_sum = 0.0;   // mean over records of the per-image l1 sum
  double l1_mean = 0.0;  // the same per pixel
  double linf = 0.0;
  std::size_t n = 0;
  std::size_t seeds = 0;
};

/// One row per label, in the given order; sums run in record order.
inline std::vector<ReportRow> aggregate_records(const std::vector<SampleRecord>& records,
                                                const std::vector<std::string>& labels, std::size_t pixels) {
  std::vector<ReportRow> rows;
  for (const auto& label : labels) {
    ReportRow row;
    row.label = label;
    std::size_t correct = 0, changed = 0, max_seed = 0;
    for (const auto& r : records) {
      if (r.condition != label) continue;
      ++row.n;
      correct += r.answer == r.label;
      changed += r.answer != r.clean_answer;
      row.mse += r.mse;
      row.kl += r.kl;
      row.l1_sum += r.l1;
      row.linf += r.linf;
      max_seed = std::max(max_seed, r.seed);
    }
    if (row.n == 0) throw CorruptFileError("no records for condition \"" + label + "\"");
    const double n = static_cast<double>(row.n);
    row.accuracy = 100.0 * static_cast<double>(correct) / n;
    row.asr = static_cast<double>(changed) / n;
    row.mse /= n;
    row.kl /= n;
    row.l1_sum /= n;
    row.l1_mean = row.l1_sum / static_cast<double>(pixels);
    row.linf /= n;
    row.seeds = max_seed + 1;
    rows.push_back(row);
  }
  return rows;
}

inline Json row_json(const ReportRow& r) {
  return {{"label", r.label},     {"accuracy", r.accuracy}, {"asr", r.asr},   {"mse", r.mse},
          {"kl", r.kl},           {"l1_sum", r.l1_sum},     {"l1_mean", r.l1_mean}, {"linf", r.linf},
          {"n", r.n},             {"seeds", r.seeds}};
}

// ---------------------------------------------------------------------------
// Reports

struct EvalReport {
  Json provenance;              // config echo, hashes, resolved conditions
  std::vector<ReportRow> rows;  // held-out, clean, adversarial, then conditions in config order
  std::vector<SampleRecord> records;

  const ReportRow& row(const std::string& label) const {
    for (const auto& r : rows) {
      if (r.label == label) return r;
    }
    throw ConfigError("no report row \"" + label + "\"");
  }
};

inline Json report_json(const EvalReport& rep) {
  Json rows = Json::array();
  for (const auto& r : rep.rows) rows.push_back(row_json(r));
  return {{"format", "f3lab-report"}, {"version", 1}, {"provenance", rep.provenance}, {"rows", rows}};
}

inline std::vector<std::string> report_labels(const Json& provenance) {
  std::vector<std::string> labels = {"held-out", "clean", "adversarial"};
  for (const auto& c : provenance.at("conditions")) labels.push_back(c.at("label").get<std::string>());
  return labels;
}

inline std::size_t report_pixels(const Json& provenance) {
  const Json& m = provenance.at("config").at("model");
  return m.at("image_height").get<std::size_t>() * m.at("image_width").get<std::size_t>() *
         m.at("channels").get<std::size_t>();
}

/// Rebuilds a report from persisted per-sample records and provenance.
inline EvalReport recompute_report(const Json& provenance, const std::vector<SampleRecord>& records) {
  EvalReport rep;
  rep.provenance = provenance;
  rep.records = records;
  rep.rows = aggregate_records(records, report_labels(provenance), report_pixels(provenance));
  return rep;
}

namespace detail {

inline std::string cell(double v, int prec = 2) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.*f", prec, v);
  return buf;
}

inline std::string sci(double v) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.3e", v);
  return buf;
}

inline std::string pad(const std::string& s, std::size_t w) { return s + std::string(s.size() < w ? w - s.size() : 1, ' '); }

struct Cond {
  ConditionSpec spec;
  const ReportRow* row;
};

inline std::vector<Cond> conditions_of(const EvalReport& rep) {
  std::vector<Cond> out;
  for (const auto& c : rep.provenance.at("conditions")) {
    ConditionSpec spec;
    spec.label = c.at("label").get<std::string>();
    spec.input = c.at("input") == "clean" ? InputKind::Clean : InputKind::Adversarial;
    spec.adaptive = c.at("adaptive").get<bool>();
    spec.seeds = c.at("seeds").get<std::size_t>();
    spec.match_l1 = c.at("match_l1").get<std::string>();
    const Json& p = c.at("purify");
    spec.purify.variant = parse_variant(p.at("variant").get<std::string>());
    spec.purify.alpha_inf = p.at("alpha_inf").get<double>();
    spec.purify.beta_inf = p.at("beta_inf").get<double>();
    spec.purify.gamma_inf = p.at("gamma_inf").get<double>();
    spec.purify.steps = p.at("steps").get<std::size_t>();
    spec.purify.eps_inf_total = p.at("eps_inf_total").get<double>();
    spec.purify.distance = parse_distance(p.at("distance").get<std::string>());
    spec.purify.rp_min_scale = p.at("rp_min_scale").get<double>();
    out.push_back({spec, &rep.row(spec.label)});
  }
  return out;
}

}  // namespace detail

/// Human-readable tables: summary, variant grids, ordering flags, clean impact
/// and multi-step comparison, each emitted when the grid has the conditions.
inline std::string render_tables(const EvalReport& rep) {
  using detail::cell;
  using detail::pad;
  std::ostringstream out;
  const Json& prov = rep.provenance;
  out << "# " << prov.at("config").at("name").get<std::string>() << "  config " << prov.at("config_hash").get<std::string>()
      << "  seed " << prov.at("config").at("seed") << "\n";
  out << "# regenerate: f3lab eval --config <config file>\n\n";

  out << "## Summary\n";
  out << pad("condition", 44) << pad("acc", 8) << pad("ASR", 8) << pad("MSE", 11) << pad("KL", 11) << pad("l1(sum)", 10)
      << pad("l1(mean)", 10) << pad("linf", 8) << "n\n";
  for (const auto& r : rep.rows) {
    out << pad(r.label, 44) << pad(cell(r.accuracy), 8) << pad(cell(100 * r.asr), 8) << pad(detail::sci(r.mse), 11)
        << pad(detail::sci(r.kl), 11) << pad(cell(r.l1_sum), 10) << pad(cell(r.l1_mean * 255, 3) + "/255", 10)
        << pad(cell(r.linf * 255, 1) + "/255", 8) << r.n << "\n";
  }

  const auto conds = detail::conditions_of(rep);
  auto plain = [](const ConditionSpec& s) {
    return s.input == InputKind::Adversarial && !s.adaptive && s.match_l1.empty() && s.purify.distance == Distance::Mse;
  };

  // Variant grids (rows alpha, columns beta).
  std::map<double, const ReportRow*> v1;
  std::map<Variant, std::map<double, std::map<double, const ReportRow*>>> grid;
  for (const auto& c : conds) {
    if (!plain(c.spec)) continue;
    if (c.spec.purify.variant == Variant::V1) v1[c.spec.purify.alpha_inf] = c.row;
    if (c.spec.purify.variant == Variant::V2 || c.spec.purify.variant == Variant::V3) {
      grid[c.spec.purify.variant][c.spec.purify.alpha_inf][c.spec.purify.beta_inf] = c.row;
    }
  }
  if (!v1.empty() || !grid.empty()) {
    out << "\n## Accuracy by variant (rows alpha, columns beta; adversarial " << cell(rep.row("adversarial").accuracy)
        << ")\n";
    if (!v1.empty()) {
      out << "v1     ";
      for (const auto& [a, r] : v1) out << "  a=" << pad(fmt255(a), 8) << pad(cell(r->accuracy), 7);
      out << "\n";
    }
    for (const auto& [variant, rows] : grid) {
      std::set<double> betas;
      for (const auto& [a, cols] : rows)
        for (const auto& [b, r] : cols) betas.insert(b);
      out << pad(to_string(variant), 12);
      for (double b : betas) out << pad("b=" + fmt255(b), 10);
      out << "\n";
      for (const auto& [a, cols] : rows) {
        out << pad("  a=" + fmt255(a), 12);
        for (double b : betas) out << pad(cols.count(b) ? cell(cols.at(b)->accuracy) : "-", 10);
        out << "\n";
      }
    }
    out << "\n## Ordering v3 >= v2 >= v1\n";
    bool any = false;
    if (grid.count(Variant::V2) && grid.count(Variant::V3)) {
      for (const auto& [a, cols] : grid.at(Variant::V3)) {
        for (const auto& [b, r3] : cols) {
          const auto it2 = grid.at(Variant::V2).find(a);
          if (it2 == grid.at(Variant::V2).end() || !it2->second.count(b) || !v1.count(a)) continue;
          const double acc3 = r3->accuracy, acc2 = it2->second.at(b)->accuracy, acc1 = v1.at(a)->accuracy;
          any = true;
          out << "a=" << pad(fmt255(a), 8) << " b=" << pad(fmt255(b), 8) << " v3 " << cell(acc3) << "  v2 " << cell(acc2)
              << "  v1 " << cell(acc1) << "  " << (acc3 >= acc2 && acc2 >= acc1 ? "ok" : "VIOLATED") << "\n";
        }
      }
    }
    if (!any) out << "(no cell with v1, v2 and v3 at the same alpha)\n";
  }

  // Clean-input impact, by beta.
  std::vector<const detail::Cond*> clean;
  for (const auto& c : conds) {
    if (c.spec.input == InputKind::Clean) clean.push_back(&c);
  }
  if (!clean.empty()) {
    out << "\n## Purification of clean inputs (unpurified clean " << cell(rep.row("clean").accuracy) << ")\n";
    for (const auto* c : clean) out << pad(c->spec.label, 44) << cell(c->row->accuracy) << "\n";
  }

  // Multi-step comparison.
  std::vector<const detail::Cond*> multi;
  for (const auto& c : conds) {
    const auto v = c.spec.purify.variant;
    if (c.spec.input == InputKind::Adversarial && !c.spec.adaptive &&
        (v == Variant::V3Multistep || (!c.spec.match_l1.empty() && v == Variant::V3))) {
      multi.push_back(&c);
    }
  }
  if (!multi.empty()) {
    out << "\n## Single-step vs multi-step\n";
    out << pad("condition", 44) << pad("K", 4) << pad("beta", 12) << pad("alpha", 9) << pad("eps", 9)
        << pad("l1(sum)", 10) << pad("l1(mean)", 12) << "acc\n";
    for (const auto* c : multi) {
      const auto& p = c->spec.purify;
      const bool ms = p.variant == Variant::V3Multistep;
      out << pad(c->spec.label, 44) << pad(std::to_string(ms ? p.steps : 1), 4) << pad(fmt255(p.beta_inf), 12)
          << pad(fmt255(p.alpha_inf), 9) << pad(ms ? fmt255(p.eps_inf_total) : "-", 9) << pad(cell(c->row->l1_sum), 10)
          << pad(cell(c->row->l1_mean * 255, 3) + "/255", 12) << cell(c->row->accuracy) << "\n";
    }
  }

  // Adaptive attack.
  std::vector<const detail::Cond*> adaptive;
  for (const auto& c : conds) {
    if (c.spec.adaptive) adaptive.push_back(&c);
  }
  if (!adaptive.empty()) {
    out << "\n## Adaptive attack (undefended under attack " << cell(rep.row("adversarial").accuracy) << ")\n";
    for (const auto* c : adaptive) out << pad(c->spec.label, 44) << cell(c->row->accuracy) << "\n";
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// Pipeline

inline std::filesystem::path resolve_output_dir(const std::string& dir) {
  std::filesystem::path p(dir);
  if (p.is_relative()) {
    if (const char* root = std::getenv("F3LAB_OUTPUT_ROOT"); root && *root) p = std::filesystem::path(root) / p;
  }
  return p;
}

inline std::string slug(const std::string& label) {
  std::string s;
  for (char c : label) s += std::isalnum(static_cast<unsigned char>(c)) ? c : '_';
  return s;
}

inline std::string model_hash(const Model& m) { return hex64(fnv1a64(serialize_model(m))); }

struct RunOptions {
  bool write_files = true;
  bool verbose = false;
};

namespace detail {

struct Stage {
  std::string name;
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  }
};

template <class F>
void for_samples(const std::string& stage, std::size_t n, std::size_t workers, F&& fn) {
  parallel_for(n, workers, [&](std::size_t i) {
    try {
      fn(i);
    } catch (const StageError&) {
      throw;
    } catch (const std::exception& e) {
      throw StageError("stage " + stage + ", sample " + std::to_string(i) + ": " + e.what());
    }
  });
}

inline std::uint64_t label_key(const std::string& label) { return fnv1a64(label); }

}  // namespace detail

/// Shared state of an experiment after the model, data and attack stages.
struct ExperimentContext {
  ExperimentConfig config;
  std::filesystem::path out_dir;
  Model model = Model::init(ModelConfig{});
  Dataset eval;         // full held-out set
  Dataset adversarial;  // first attack_samples of eval, attacked
  std::vector<Prediction> clean_predictions;  // on eval
  Json provenance;
  Json timing = Json::object();
};

inline Dataset take_prefix(const Dataset& d, std::size_t n) {
  Dataset out = d;
  out.samples.resize(n);
  return out;
}

/// Trains (or loads) the model and attacks the evaluation prefix, using the
/// stage caches under <out>/cache.
inline ExperimentContext prepare_experiment(const ExperimentConfig& cfg, const RunOptions& opt = {}) {
  cfg.validate();
  ExperimentContext ctx;
  ctx.config = cfg;
  ctx.out_dir = resolve_output_dir(cfg.output_dir);
  const auto cache = ctx.out_dir / "cache";
  if (opt.write_files) std::filesystem::create_directories(cache);
  const Json echo = config_echo(cfg);
  const ImageGeometry geometry = ImageGeometry::from(cfg.model);

  // Data.
  detail::Stage data_stage{"data"};
  ctx.eval = generate(cfg.eval.n, cfg.eval.seed, cfg.mix, Split::Eval, geometry);
  ctx.timing["data_seconds"] = data_stage.seconds();

  // Model.
  detail::Stage model_stage{"model"};
  Json model_prov;
  if (!cfg.checkpoint.empty()) {
    ctx.model = load_model(cfg.checkpoint);
    if (!(ctx.model.config() == cfg.model)) throw StageError("stage model: checkpoint does not match model config");
    ctx.timing["model_source"] = "checkpoint";
  } else {
    const Dataset train_set = generate(cfg.train.n, cfg.train.seed, cfg.mix, Split::Train, geometry);
    const std::string train_key =
        json_hash(Json{{"model", echo["model"]}, {"training", echo["training"]}, {"train", dataset_hash(train_set)}});
    const auto path = cache / ("model_" + train_key + ".bin");
    if (opt.write_files && std::filesystem::exists(path)) {
      ctx.model = load_model(path.string());
      ctx.timing["model_source"] = "cache";
    } else {
      try {
        TrainConfig tc = cfg.training;
        tc.workers = cfg.workers;
        ctx.model = train(Model::init(cfg.model), train_set, tc).model;
      } catch (const std::exception& e) {
        throw StageError(std::string("stage train: ") + e.what());
      }
      if (opt.write_files) save_model(ctx.model, path.string());
      ctx.timing["model_source"] = "trained";
    }
    model_prov["train_dataset_hash"] = dataset_hash(train_set);
  }
  model_prov["model_hash"] = model_hash(ctx.model);
  ctx.timing["model_seconds"] = model_stage.seconds();
  if (opt.verbose) std::fprintf(stderr, "[f3lab] model ready (%s)\n", ctx.timing["model_source"].get<std::string>().c_str());

  ctx.clean_predictions.resize(ctx.eval.size());
  detail::for_samples("predict", ctx.eval.size(), cfg.workers, [&](std::size_t i) {
    ctx.clean_predictions[i] = predict(ctx.model, ctx.eval.samples[i].image, ctx.eval.samples[i].question);
  });

  // Attack.
  detail::Stage attack_stage{"attack"};
  const Dataset subset = take_prefix(ctx.eval, cfg.attack_samples);
  const Json attack_meta = {{"source_dataset", dataset_hash(subset)},
                            {"model", model_prov["model_hash"]},
                            {"attack", echo["attack"]}};
  const auto adv_path = cache / ("adv_" + json_hash(attack_meta) + ".bin");
  if (opt.write_files && std::filesystem::exists(adv_path)) {
    ctx.adversarial = load_dataset(adv_path.string());
  } else {
    ctx.adversarial = subset;
    ctx.adversarial.kind = "adversarial";
    ctx.adversarial.metadata = canonical_json(attack_meta);
    detail::for_samples("attack", subset.size(), cfg.workers, [&](std::size_t i) {
      const Sample& s = subset.samples[i];
      AttackConfig ac = cfg.attack;
      Tensor x = ac.method == AttackMethod::CarliniWagner ? cw_attack(ctx.model, s, ac) : pgd_attack(ctx.model, s, ac);
      Sample& out = ctx.adversarial.samples[i];
      out.l1 = sum_abs_diff(x, s.image);
      out.linf = max_abs_diff(x, s.image);
      out.image = std::move(x);
    });
    if (opt.write_files) save_dataset(ctx.adversarial, adv_path.string());
  }
  ctx.timing["attack_seconds"] = attack_stage.seconds();

  ctx.provenance = {{"code_version", kCodeVersion},
                    {"config", echo},
                    {"config_hash", json_hash(echo)},
                    {"model", model_prov},
                    {"eval_dataset_hash", dataset_hash(ctx.eval)},
                    {"adversarial_dataset_hash", dataset_hash(ctx.adversarial)},
                    {"records", "records.csv"}};
  return ctx;
}

/// Runs one condition for one seed over every attacked sample.
inline std::vector<SampleRecord> run_condition(const ExperimentContext& ctx, const ConditionSpec& cond, std::size_t seed,
                                               std::vector<PurifyResult>* results = nullptr) {
  const ExperimentConfig& cfg = ctx.config;
  const std::size_t n = ctx.adversarial.size();
  std::vector<SampleRecord> records(n);
  if (results) results->assign(n, {});
  const Purifier purifier = cond.purify.variant == Variant::Oracle ? Purifier{} : make_purifier(cond.purify);
  detail::for_samples("purify[" + cond.label + "]", n, cfg.workers, [&](std::size_t i) {
    const Sample& clean = ctx.eval.samples[i];
    const Prediction& clean_pred = ctx.clean_predictions[i];
    Rng rng(derive_seed(cfg.seed, {detail::label_key(cond.label), seed, i}));
    Tensor input;
    if (cond.adaptive) {
      Rng attack_rng(derive_seed(cfg.seed, {detail::label_key(cond.label), seed, i, 0x454f54ull}));
      input = eot_pgd_adaptive(ctx.model, purifier, clean, cfg.adaptive_attack, attack_rng);
    } else {
      input = cond.input == InputKind::Clean ? clean.image : ctx.adversarial.samples[i].image;
    }
    PurifyResult r = purify(ctx.model, cond.purify, input, clean.question, rng, &clean.image);
    const Prediction p = predict(ctx.model, r.purified, clean.question);
    SampleRecord& rec = records[i];
    rec.condition = cond.label;
    rec.seed = seed;
    rec.sample = i;
    rec.label = clean.answer_label;
    rec.answer = p.answer;
    rec.clean_answer = clean_pred.answer;
    rec.mse = attention_distance(clean_pred.attention, p.attention, Distance::Mse);
    rec.kl = attention_distance(clean_pred.attention, p.attention, Distance::Kl);
    rec.l1 = r.l1;
    rec.linf = r.linf;
    if (results) (*results)[i] = std::move(r);
  });
  return records;
}

/// Bisection on beta_inf so that the seed-0 mean l1 equals `target`.
inline double calibrate_beta_for_l1(const ExperimentContext& ctx, ConditionSpec cond, double target,
                                    std::size_t iterations = 40) {
  auto mean_l1 = [&](double beta) {
    cond.purify.beta_inf = beta;
    if (cond.purify.variant == Variant::V3Multistep) cond.purify.eps_inf_total = std::max(cond.purify.eps_inf_total, beta);
    double total = 0.0;
    for (const auto& r : run_condition(ctx, cond, 0)) total += r.l1;
    return total / static_cast<double>(ctx.adversarial.size());
  };
  double lo = 0.0, hi = std::max(cond.purify.beta_inf, 1.0 / 255.0);
  while (mean_l1(hi) < target) {
    lo = hi;
    hi *= 2.0;
    if (hi > 1.0) throw StageError("stage calibrate[" + cond.label + "]: target l1 is out of reach");
  }
  for (std::size_t it = 0; it < iterations; ++it) {
    const double mid = 0.5 * (lo + hi);
    (mean_l1(mid) < target ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

/// Baseline records: held-out predictions, clean and adversarial rows.
inline std::vector<SampleRecord> baseline_records(const ExperimentContext& ctx) {
  std::vector<SampleRecord> out;
  for (std::size_t i = 0; i < ctx.eval.size(); ++i) {
    const auto& p = ctx.clean_predictions[i];
    out.push_back({"held-out", 0, i, ctx.eval.samples[i].answer_label, p.answer, p.answer, 0, 0, 0, 0});
  }
  for (std::size_t i = 0; i < ctx.adversarial.size(); ++i) {
    const auto& p = ctx.clean_predictions[i];
    out.push_back({"clean", 0, i, ctx.eval.samples[i].answer_label, p.answer, p.answer, 0, 0, 0, 0});
  }
  std::vector<SampleRecord> adv(ctx.adversarial.size());
  detail::for_samples("adversarial", adv.size(), ctx.config.workers, [&](std::size_t i) {
    const Sample& s = ctx.adversarial.samples[i];
    const Prediction& c = ctx.clean_predictions[i];
    const Prediction p = predict(ctx.model, s.image, s.question);
    adv[i] = {"adversarial",
              0,
              i,
              s.answer_label,
              p.answer,
              c.answer,
              attention_distance(c.attention, p.attention, Distance::Mse),
              attention_distance(c.attention, p.attention, Distance::Kl),
              s.l1,
              s.linf};
  });
  out.insert(out.end(), adv.begin(), adv.end());
  return out;
}

inline void export_heatmaps(const ExperimentContext& ctx, const std::vector<ConditionSpec>& conditions) {
  const auto& hm = ctx.config.heatmaps;
  if (hm.samples.empty()) return;
  const auto dir = ctx.out_dir / "heatmaps";
  std::filesystem::create_directories(dir);
  for (std::size_t i : hm.samples) {
    const std::string base = (dir / ("s" + std::to_string(i) + "_")).string();
    const Sample& s = ctx.eval.samples[i];
    heatmap_export(ctx.clean_predictions[i].attention, base + "clean");
    heatmap_export(predict(ctx.model, ctx.adversarial.samples[i].image, s.question).attention, base + "adversarial");
  }
  for (const auto& label : hm.conditions) {
    const auto it = std::find_if(conditions.begin(), conditions.end(), [&](const auto& c) { return c.label == label; });
    if (it == conditions.end()) continue;
    std::vector<PurifyResult> results;
    run_condition(ctx, *it, 0, &results);
    for (std::size_t i : hm.samples) {
      heatmap_export(predict(ctx.model, results[i].purified, ctx.eval.samples[i].question).attention,
                     (dir / ("s" + std::to_string(i) + "_" + slug(label))).string());
    }
  }
}

inline void write_report_files(const EvalReport& rep, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_file((dir / "provenance.json").string(), canonical_json(rep.provenance));
  write_file((dir / "records.csv").string(), records_csv(rep.records));
  write_file((dir / "report.json").string(), canonical_json(report_json(rep)));
  write_file((dir / "tables.txt").string(), render_tables(rep));
}

/// Full pipeline: data, model, attack, condition grid, report, heatmaps.
/// Report files are a pure function of the configuration; wall-clock data goes
/// to timing.json only.
inline EvalReport run_experiment(const ExperimentConfig& cfg, const RunOptions& opt = {}) {
  const auto t0 = std::chrono::system_clock::now();
  ExperimentContext ctx = prepare_experiment(cfg, opt);
  std::vector<SampleRecord> records = baseline_records(ctx);
  std::map<std::string, double> mean_l1;
  std::vector<ConditionSpec> resolved;
  detail::Stage grid_stage{"grid"};
  for (ConditionSpec cond : cfg.conditions) {
    if (!cond.match_l1.empty()) {
      if (!mean_l1.count(cond.match_l1)) {
        throw StageError("stage calibrate[" + cond.label + "]: target \"" + cond.match_l1 + "\" must come earlier");
      }
      cond.purify.beta_inf = calibrate_beta_for_l1(ctx, cond, mean_l1.at(cond.match_l1));
    }
    double total = 0.0;
    std::size_t count = 0;
    for (std::size_t seed = 0; seed < cond.seeds; ++seed) {
      for (auto& r : run_condition(ctx, cond, seed)) {
        total += r.l1;
        ++count;
        records.push_back(std::move(r));
      }
    }
    mean_l1[cond.label] = total / static_cast<double>(count);
    resolved.push_back(cond);
    if (opt.verbose) std::fprintf(stderr, "[f3lab] %s done\n", cond.label.c_str());
  }
  ctx.timing["grid_seconds"] = grid_stage.seconds();

  Json conditions = Json::array();
  for (const auto& c : resolved) conditions.push_back(condition_json(c));
  ctx.provenance["conditions"] = conditions;
  EvalReport rep = recompute_report(ctx.provenance, records);

  if (opt.write_files) {
    write_report_files(rep, ctx.out_dir);
    export_heatmaps(ctx, resolved);
    const auto t1 = std::chrono::system_clock::now();
    ctx.timing["started_unix"] = std::chrono::duration<double>(t0.time_since_epoch()).count();
    ctx.timing["finished_unix"] = std::chrono::duration<double>(t1.time_since_epoch()).count();
    ctx.timing["workers"] = cfg.workers;
    ctx.timing["output_dir"] = ctx.out_dir.string();
    write_file((ctx.out_dir / "timing.json").string(), ctx.timing.dump(2) + "\n");
  }
  return rep;
}

/// Reads records.csv and provenance.json from a run directory and rebuilds the report.
inline EvalReport load_and_recompute(const std::filesystem::path& dir) {
  Json prov;
  try {
    prov = Json::parse(read_file((dir / "provenance.json").string()));
  } catch (const Json::parse_error& e) {
    throw CorruptFileError(std::string("provenance.json: ") + e.what());
  }
  return recompute_report(prov, parse_records_csv(read_file((dir / "records.csv").string())));
}

// ---------------------------------------------------------------------------
// Stand-alone reports

struct AttentionRow {
  std::string label;
  double mse = 0.0;
  double kl = 0.0;
  std::vector<double> per_sample_mse;
  std::vector<double> per_sample_kl;
};

/// Mean MSE/KL between the clean attention and each variant set's attention.
inline std::vector<AttentionRow> attention_report(const Model& model, const Dataset& clean,
                                                  const std::vector<std::pair<std::string, std::vector<Tensor>>>& sets,
                                                  std::size_t workers = 1) {
  if (clean.samples.empty()) throw ConfigError("attention_report needs a nonempty clean set");
  std::vector<Prediction> ref(clean.size());
  parallel_for(clean.size(), workers, [&](std::size_t i) {
    ref[i] = predict(model, clean.samples[i].image, clean.samples[i].question);
  });
  std::vector<AttentionRow> rows;
  for (const auto& [label, images] : sets) {
    if (images.size() != clean.size()) throw ConfigError("attention_report: set \"" + label + "\" is misaligned");
    AttentionRow row{label, 0, 0, std::vector<double>(images.size()), std::vector<double>(images.size())};
    parallel_for(images.size(), workers, [&](std::size_t i) {
      const Prediction p = predict(model, images[i], clean.samples[i].question);
      row.per_sample_mse[i] = attention_distance(ref[i].attention, p.attention, Distance::Mse);
      row.per_sample_kl[i] = attention_distance(ref[i].attention, p.attention, Distance::Kl);
    });
    for (std::size_t i = 0; i < images.size(); ++i) {
      row.mse += row.per_sample_mse[i];
      row.kl += row.per_sample_kl[i];
    }
    row.mse /= static_cast<double>(images.size());
    row.kl /= static_cast<double>(images.size());
    rows.push_back(std::move(row));
  }
  return rows;
}

struct CleanImpactRow {
  double beta_inf = 0.0;
  double accuracy = 0.0;
};

/// Accuracy of a purifier applied to clean inputs, per beta_inf, plus the
/// unpurified clean accuracy. Seeds are derived from (seed, beta index, sample).
inline std::pair<double, std::vector<CleanImpactRow>> clean_impact_report(const Model& model, const Dataset& clean,
                                                                          PurifyConfig base,
                                                                          const std::vector<double>& betas,
                                                                          std::uint64_t seed, std::size_t workers = 1) {
  const double unpurified = accuracy(model, clean, workers);
  std::vector<CleanImpactRow> rows;
  for (std::size_t b = 0; b < betas.size(); ++b) {
    base.beta_inf = betas[b];
    std::vector<char> ok(clean.size());
    parallel_for(clean.size(), workers, [&](std::size_t i) {
      const Sample& s = clean.samples[i];
      Rng rng(derive_seed(seed, {b, i}));
      const PurifyResult r = purify(model, base, s.image, s.question, rng, &s.image);
      ok[i] = predict(model, r.purified, s.question).answer == s.answer_label;
    });
    std::size_t hits = 0;
    for (char c : ok) hits += c;
    rows.push_back({betas[b], 100.0 * static_cast<double>(hits) / static_cast<double>(clean.size())});
  }
  return {unpurified, rows};
}

}  // namespace f3lab
