// SPDX-License-Identifier: Apache-2.0
// Acceptance run: one PASS/FAIL line per criterion.
//
//   acceptance [config] [scratch-dir]
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "f3lab/experiment.hpp"
#include "test_support.hpp"

using namespace f3lab;
using ad::Tape;
using ad::Var;
using f3lab::testing::away_from_zero;
using f3lab::testing::random_tensor;
namespace fs = std::filesystem;

namespace {

int failures = 0;

void verdict(int id, bool ok, const std::string& what, const std::string& detail) {
  std::printf("criterion %2d %s  %s: %s\n", id, ok ? "PASS" : "FAIL", what.c_str(), detail.c_str());
  std::fflush(stdout);
  if (!ok) ++failures;
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// ---------------------------------------------------------------------------
// 1: reverse mode vs central differences

struct OpCase {
  std::string name;
  std::function<Tensor(Rng&)> input;
  std::function<Var(Tape&, Var, int)> op;
};

Var constant_like(Tape& t, int seed, std::uint64_t tag, Shape shape, double lo = -1.0, double hi = 1.0) {
  Rng r(derive_seed(static_cast<std::uint64_t>(seed), {tag}));
  return t.constant(random_tensor(r, std::move(shape), lo, hi));
}

std::vector<OpCase> op_cases() {
  auto m34 = [](Rng& r) { return random_tensor(r, {3, 4}); };
  auto m25 = [](Rng& r) { return random_tensor(r, {2, 5}, -2, 2); };
  auto m45 = [](Rng& r) { return random_tensor(r, {4, 5}); };
  auto pos = [](Rng& r) { return random_tensor(r, {3, 5}, 0.1, 1.0); };
  auto nz = [](Rng& r) { return away_from_zero(r, {2, 5}); };
  return {
      {"matmul", m34, [](Tape& t, Var v, int s) { return ad::matmul(v, constant_like(t, s, 1, {4, 2})); }},
      {"matmul_nt", m34, [](Tape& t, Var v, int s) { return ad::matmul_nt(v, constant_like(t, s, 2, {5, 4})); }},
      {"add", m34, [](Tape& t, Var v, int s) { return ad::add(v, constant_like(t, s, 3, {3, 4})); }},
      {"sub", m34, [](Tape& t, Var v, int s) { return ad::sub(constant_like(t, s, 3, {3, 4}), v); }},
      {"mul", m34, [](Tape& t, Var v, int s) { return ad::mul(v, constant_like(t, s, 3, {3, 4})); }},
      {"add broadcast", [](Rng& r) { return random_tensor(r, {4}); },
       [](Tape& t, Var v, int s) { return ad::add(constant_like(t, s, 4, {3, 4}), v); }},
      {"mul broadcast", [](Rng& r) { return random_tensor(r, {4}); },
       [](Tape& t, Var v, int s) { return ad::mul(constant_like(t, s, 4, {3, 4}), v); }},
      {"scale", m25, [](Tape&, Var v, int) { return ad::scale(v, -1.7); }},
      {"add_scalar", m25, [](Tape&, Var v, int) { return ad::add_scalar(v, 0.3); }},
      {"tanh", m25, [](Tape&, Var v, int) { return ad::tanh(v); }},
      {"square", m25, [](Tape&, Var v, int) { return ad::square(v); }},
      {"abs", nz, [](Tape&, Var v, int) { return ad::abs(v); }},
      {"sign", nz, [](Tape&, Var v, int) { return ad::sign(v); }},
      {"clamp",
       [](Rng& r) {
         Tensor t({10});
         for (double& v : t.data()) {
           const double u = r.uniform();
           v = u < 0.3 ? r.uniform(-2.0, -0.55) : (u < 0.7 ? r.uniform(-0.45, 0.45) : r.uniform(0.55, 2.0));
         }
         return t;
       },
       [](Tape&, Var v, int) { return ad::clamp(v, -0.5, 0.5); }},
      {"sum", m34, [](Tape&, Var v, int) { return ad::sum(ad::square(v)); }},
      {"mean", m34, [](Tape&, Var v, int) { return ad::mean(ad::square(v)); }},
      {"l2_norm", nz, [](Tape&, Var v, int) { return ad::l2_norm(v); }},
      {"softmax", m25, [](Tape&, Var v, int) { return ad::softmax(v, 1); }},
      {"softmax axis 0", m25, [](Tape&, Var v, int) { return ad::softmax(v, 0); }},
      {"normalize_rows", pos, [](Tape&, Var v, int) { return ad::normalize_rows(v); }},
      {"kl_terms", pos, [](Tape& t, Var v, int s) { return ad::kl_terms(constant_like(t, s, 5, {3, 5}, 0.1, 1), v); }},
      {"cross_entropy", [](Rng& r) { return random_tensor(r, {1, 8}, -3, 3); },
       [](Tape&, Var v, int s) { return ad::cross_entropy(v, static_cast<std::size_t>(s) % 8); }},
      {"slice", m45, [](Tape&, Var v, int) { return ad::slice(v, 1, 3, 2, 5); }},
      {"concat_rows", m45, [](Tape&, Var v, int) { return ad::concat_rows({ad::slice(v, 2, 4, 0, 5), v}); }},
      {"concat_cols", m45, [](Tape&, Var v, int) { return ad::concat_cols({ad::slice(v, 0, 4, 3, 5), ad::tanh(v)}); }},
      {"gather", m45, [](Tape&, Var v, int) { return ad::gather(v, {19, 0, 3, 3, 7, 12}, {2, 3}); }},
      {"gather_rows", m45, [](Tape&, Var v, int) { return ad::gather_rows(v, {3, 1, 1}); }},
      {"reshape", m45, [](Tape&, Var v, int) { return ad::tanh(ad::reshape(v, {2, 10})); }},
  };
}

void criterion_gradients() {
  double worst = 0.0;
  std::string worst_name;
  auto track = [&](double err, const std::string& name) {
    if (!(err <= worst)) {
      worst = err;
      worst_name = name;
    }
  };
  const auto cases = op_cases();
  for (const auto& c : cases) {
    for (int s = 0; s < 20; ++s) {
      Rng rng(derive_seed(2024, {static_cast<std::uint64_t>(s)}));
      const Tensor x = c.input(rng);
      track(ad::grad_check(
                [&](Tape& t, Var v) {
                  const Var y = c.op(t, v, s);
                  return ad::sum(ad::mul(y, constant_like(t, s, 99, y.shape(), 0.5, 1.5)));
                },
                x),
            c.name);
    }
  }
  ModelConfig mc;
  mc.image_height = 8;
  mc.image_width = 8;
  mc.seed = 5;
  const Model model = Model::init(mc);
  const std::size_t rows = mc.layers * mc.heads, m = mc.visual_tokens();
  for (Distance kind : {Distance::Mse, Distance::Kl}) {
    for (int s = 0; s < 20; ++s) {
      Rng rng(derive_seed(77, {static_cast<std::uint64_t>(s)}));
      const Tensor img = random_tensor(rng, {8, 8, 3}, 0.05, 0.95);
      const Sample probe = generate(1, static_cast<std::uint64_t>(s), {}, Split::Eval, ImageGeometry::from(mc)).samples[0];
      const Tensor ref = predict(model, random_tensor(rng, {8, 8, 3}, 0, 1), probe.question)
                             .attention.values()
                             .reshaped({rows, m});
      track(ad::grad_check(
                [&](Tape& t, Var x) {
                  const BoundParams bp = bind(t, model.params(), false);
                  return attention_distance(t.constant(ref), forward(mc, bp, x, probe.question).attention, kind);
                },
                img),
            "end-to-end " + to_string(kind));
    }
  }
  verdict(1, worst <= 1e-4, "gradient correctness",
          fmt("%zu ops x 20 seeds + end-to-end MSE/KL x 20 on 8x8x3; max rel err %.3g (%s)", cases.size(), worst,
              worst_name.c_str()));
}

// ---------------------------------------------------------------------------
// 2: magnitude map against the scalar-loop oracle

void criterion_scale_oracle() {
  std::size_t exact = 0;
  double worst = 0.0;
  Rng rng(31337);
  for (int k = 0; k < 100; ++k) {
    const std::size_t n = 1 + rng.index(768);
    const double lo = -rng.uniform(0, 3);
    const double hi = rng.uniform(0, 3);
    const Tensor g = random_tensor(rng, {n}, lo, hi);
    const double beta = rng.uniform(0.0, 64.0 / 255.0);
    const Tensor got = f3_scale(g, beta);
    const auto want = f3lab::testing::brute_force_scale({g.data().begin(), g.data().end()}, beta);
    bool same = true;
    for (std::size_t i = 0; i < n; ++i) {
      same = same && got[i] == want[i];
      worst = std::max(worst, std::abs(got[i] - want[i]));
    }
    exact += same;
  }
  verdict(2, worst <= 1e-12, "magnitude-map oracle",
          fmt("%zu/100 vectors bitwise equal, max abs diff %.3g", exact, worst));
}

// ---------------------------------------------------------------------------
// 3: purification budgets

void criterion_budgets() {
  const Model model = Model::init(ModelConfig{});
  const Dataset data = generate(64, 404, {}, Split::Eval);
  const std::vector<double> grid = {2 / 255.0, 4 / 255.0, 8 / 255.0, 16 / 255.0, 32 / 255.0};
  Rng rng(909);
  std::size_t violations = 0, trials = 0;
  std::string first;
  auto check = [&](bool ok, const std::string& what) {
    if (!ok && violations++ == 0) first = what;
  };
  for (; trials < 10000; ++trials) {
    PurifyConfig p;
    const Variant variants[] = {Variant::V1, Variant::V2, Variant::V3, Variant::V3Multistep};
    p.variant = variants[rng.index(4)];
    p.alpha_inf = grid[rng.index(5)];
    p.beta_inf = grid[rng.index(5)];
    p.distance = rng.uniform() < 0.5 ? Distance::Mse : Distance::Kl;
    if (p.variant == Variant::V3Multistep) {
      p.steps = 1 + rng.index(8);
      p.eps_inf_total = std::max(p.beta_inf, grid[rng.index(5)]);
    }
    const Sample& s = data.samples[rng.index(data.size())];
    Tensor x = s.image;
    if (rng.uniform() < 0.5) {
      for (double& v : x.data()) v = std::clamp(v + rng.uniform(-8 / 255.0, 8 / 255.0), 0.0, 1.0);
    }
    Rng prng(derive_seed(trials, {1}));
    const PurifyResult r = purify(model, p, x, s.question, prng);
    const std::string tag = "trial " + std::to_string(trials) + " " + variant_params(p);
    bool in_range = true;
    for (double v : r.purified.data()) in_range = in_range && v >= 0.0 && v <= 1.0;
    check(in_range, tag + ": output outside [0, 1]");
    const double moved = max_abs_diff(r.purified, x);
    switch (p.variant) {
      case Variant::V1:
        check(moved <= p.alpha_inf, tag + ": v1 step exceeds alpha");
        break;
      case Variant::V2:
      case Variant::V3:
        check(max_abs_diff(r.reference, x) <= p.alpha_inf, tag + ": reference exceeds alpha");
        check(moved <= p.beta_inf, tag + ": step exceeds beta");
        break;
      case Variant::V3Multistep:
        check(moved <= p.eps_inf_total, tag + ": total exceeds eps");
        break;
      default:
        break;
    }
  }
  verdict(3, violations == 0, "budget invariants",
          fmt("%zu violations in %zu trials%s", violations, trials, violations ? (" (first: " + first + ")").c_str() : ""));
}

// ---------------------------------------------------------------------------
// 4-10: the experiment report

void criteria_report(const EvalReport& rep, const std::string& tables) {
  const ReportRow& held = rep.row("held-out");
  const ReportRow& adv = rep.row("adversarial");
  const ReportRow& v3 = rep.row("v3 a=16/255 b=32/255");
  const ReportRow& v2 = rep.row("v2 a=16/255 b=32/255");
  const ReportRow& v1 = rep.row("v1 a=16/255");

  const bool acc_ok = held.accuracy >= 90.0 && adv.accuracy <= 40.0 && v3.accuracy >= adv.accuracy + 15.0;
  const bool mse_ok = v3.mse < adv.mse;
  verdict(4, acc_ok && mse_ok && v3.n >= 1000, "pipeline phenomenon",
          fmt("held-out %.2f (>=90), adversarial %.2f (<=40), v3 %.2f (>= %.2f); MSE v3 %.4g vs adversarial %.4g "
              "(must be lower); n=%zu",
              held.accuracy, adv.accuracy, v3.accuracy, adv.accuracy + 15.0, v3.mse, adv.mse, v3.n));

  std::size_t cells = 0;
  for (const char* v : {"v2", "v3"})
    for (int a : {2, 4, 8, 16, 32})
      for (int b : {2, 4, 8, 16, 32}) {
        try {
          rep.row(fmt("%s a=%d/255 b=%d/255", v, a, b));
          ++cells;
        } catch (const ConfigError&) {
        }
      }
  for (int a : {2, 4, 8, 16, 32}) {
    try {
      rep.row(fmt("v1 a=%d/255", a));
      ++cells;
    } catch (const ConfigError&) {
    }
  }
  const bool order_reported = tables.find("## Ordering v3 >= v2 >= v1") != std::string::npos;
  std::size_t flagged = 0;
  for (std::size_t pos = 0; (pos = tables.find("VIOLATED", pos)) != std::string::npos; ++pos) ++flagged;
  verdict(5, cells == 55 && order_reported && v3.accuracy >= v2.accuracy - 2.0 && v2.accuracy > v1.accuracy &&
                 v3.accuracy > v1.accuracy,
          "variant ordering",
          fmt("grid %zu/55 cells; at a=16 b=32: v3 %.2f, v2 %.2f, v1 %.2f; ordering table %s, %zu cells flagged", cells,
              v3.accuracy, v2.accuracy, v1.accuracy, order_reported ? "emitted" : "missing", flagged));

  const ReportRow& oracle = rep.row("oracle g=32/255");
  verdict(6, oracle.accuracy >= v2.accuracy && oracle.seeds == 5 && v2.seeds == 5, "oracle superiority",
          fmt("oracle %.2f vs v2 %.2f over %zu seeds", oracle.accuracy, v2.accuracy, oracle.seeds));

  std::vector<double> drift;
  std::string series;
  bool v1_flat = true;
  for (int a : {2, 4, 8, 16, 32}) {
    const ReportRow& r = rep.row(fmt("v1 a=%d/255", a));
    drift.push_back(r.mse);
    series += fmt("%s%d:%.4g", series.empty() ? "" : " ", a, r.mse);
    if (a <= 8) v1_flat = v1_flat && std::abs(r.accuracy - adv.accuracy) < 5.0;
  }
  std::size_t inversions = 0;
  for (std::size_t i = 1; i < drift.size(); ++i) inversions += drift[i] > drift[i - 1];
  std::string v1_acc;
  for (int a : {2, 4, 8}) v1_acc += fmt(" %.2f", rep.row(fmt("v1 a=%d/255", a)).accuracy);
  verdict(7, inversions <= 1 && drift.back() < adv.mse && v1_flat, "reference-attention drift",
          fmt("MSE(A_clean, A(x^R)) by alpha/255 [%s], %zu inversions (<=1), largest %.4g vs adversarial %.4g "
              "(must be lower); v1 accuracy at alpha<=8/255:%s vs adversarial %.2f (<5 change)",
              series.c_str(), inversions, drift.back(), adv.mse, v1_acc.c_str(), adv.accuracy));

  const ReportRow& ms = rep.row("v3_multistep K=8 a=16/255 b=4/255 eps=16/255");
  const ReportRow& k1 = rep.row("v3 a=16/255 b=l1-matched");
  const double l1_gap = std::abs(k1.l1_sum - ms.l1_sum) / ms.l1_sum;
  const bool table8 = tables.find("## Single-step vs multi-step") != std::string::npos &&
                      tables.find("l1(sum)") != std::string::npos && tables.find("l1(mean)") != std::string::npos;
  verdict(8, l1_gap <= 0.05 && ms.accuracy >= k1.accuracy - 2.0 && table8, "multi-step comparison",
          fmt("K=8 %.2f vs K=1 %.2f; mean l1 %.3f vs %.3f (gap %.2g%%); table %s", ms.accuracy, k1.accuracy,
              ms.l1_sum, k1.l1_sum, 100.0 * l1_gap, table8 ? "emitted" : "missing"));

  std::string parity;
  bool parity_ok = true;
  for (int a : {8, 16}) {
    const double mse_acc = rep.row(fmt("v3 a=%d/255 b=32/255", a)).accuracy;
    const double kl_acc = rep.row(fmt("v3 a=%d/255 b=32/255 kl", a)).accuracy;
    parity_ok = parity_ok && std::abs(mse_acc - kl_acc) <= 10.0;
    parity += fmt("%sa=%d: MSE %.2f KL %.2f", parity.empty() ? "" : ", ", a, mse_acc, kl_acc);
  }
  verdict(9, parity_ok, "KL/MSE parity", parity + " (<=10 apart)");

  const ReportRow& eot = rep.row("eot: v3 a=16/255 b=32/255");
  verdict(10, eot.accuracy > adv.accuracy && eot.n == adv.n, "adaptive attack",
          fmt("v3 under EOT-PGD %.2f vs undefended under PGD %.2f (n=%zu)", eot.accuracy, adv.accuracy, eot.n));
}

// ---------------------------------------------------------------------------
// 11: reruns

const std::vector<std::string> kReportFiles = {"provenance.json", "records.csv", "report.json", "tables.txt"};

std::vector<std::string> report_diff(const fs::path& a, const fs::path& b) {
  std::vector<std::string> diff;
  std::vector<fs::path> files;
  for (const auto& f : kReportFiles) files.emplace_back(f);
  if (fs::exists(a / "heatmaps")) {
    for (const auto& e : fs::directory_iterator(a / "heatmaps")) files.push_back(fs::path("heatmaps") / e.path().filename());
  }
  for (const auto& f : files) {
    if (!fs::exists(b / f) || read_file((a / f).string()) != read_file((b / f).string())) diff.push_back(f.string());
  }
  return diff;
}

ExperimentConfig small_config(const ExperimentConfig& full) {
  ExperimentConfig c = full;
  c.model.image_height = 8;
  c.model.image_width = 8;
  c.train = {120, 7};
  c.eval = {40, 8};
  c.attack_samples = 16;
  c.training.epochs = 3;
  c.adaptive_attack.steps = 3;
  c.adaptive_attack.eot_samples = 2;
  for (auto& cond : c.conditions) cond.seeds = std::min<std::size_t>(cond.seeds, 2);
  return c;
}

void criterion_rerun(const ExperimentConfig& cfg, const fs::path& first, const fs::path& scratch) {
  std::vector<std::string> problems;
  // Whole pipeline from scratch twice, on a reduced copy of the config.
  ExperimentConfig small = small_config(cfg);
  small.workers = 1;
  small.output_dir = (scratch / "small_w1").string();
  run_experiment(small);
  small.workers = 3;
  small.output_dir = (scratch / "small_w3").string();
  run_experiment(small);
  for (const auto& f : report_diff(scratch / "small_w1", scratch / "small_w3")) problems.push_back("small:" + f);

  // Full config again with another worker count; only the trained model is reused.
  const fs::path second = scratch / "full_w2";
  fs::create_directories(second / "cache");
  for (const auto& e : fs::directory_iterator(first / "cache")) {
    if (e.path().filename().string().rfind("model_", 0) == 0) fs::copy_file(e.path(), second / "cache" / e.path().filename());
  }
  ExperimentConfig again = cfg;
  again.workers = 2;
  again.output_dir = second.string();
  run_experiment(again);
  for (const auto& f : report_diff(first, second)) problems.push_back("full:" + f);

  // Rebuilding the report from records.csv gives the same bytes.
  const EvalReport rebuilt = load_and_recompute(first);
  if (canonical_json(report_json(rebuilt)) != read_file((first / "report.json").string())) problems.push_back("recompute:report.json");
  if (render_tables(rebuilt) != read_file((first / "tables.txt").string())) problems.push_back("recompute:tables.txt");

  std::string detail = problems.empty() ? "all report files and heatmaps byte-identical" : "differs:";
  for (const auto& p : problems) detail += " " + p;
  verdict(11, problems.empty(), "determinism",
          "small config from scratch with 1 vs 3 workers, full config with 1 vs 2 workers, recompute from records; " +
              detail);
}

}  // namespace

int main(int argc, char** argv) {
  const std::string config_path = argc > 1 ? argv[1] : F3LAB_SOURCE_DIR "/configs/default.json";
  const fs::path scratch = argc > 2 ? fs::path(argv[2]) : fs::temp_directory_path() / "f3lab_acceptance";
  try {
    fs::remove_all(scratch);
    fs::create_directories(scratch);
    const auto t0 = std::chrono::steady_clock::now();
    auto elapsed = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(); };

    criterion_gradients();
    criterion_scale_oracle();
    criterion_budgets();
    std::fprintf(stderr, "[acceptance] properties done at %.0fs\n", elapsed());

    ExperimentConfig cfg = load_experiment_config(config_path);
    cfg.workers = 1;
    cfg.output_dir = (scratch / "full_w1").string();
    const EvalReport rep = run_experiment(cfg, {true, true});
    std::fprintf(stderr, "[acceptance] experiment done at %.0fs\n", elapsed());
    criteria_report(rep, render_tables(rep));

    criterion_rerun(cfg, scratch / "full_w1", scratch);
    std::fprintf(stderr, "[acceptance] reruns done at %.0fs\n", elapsed());
    std::printf("tables: %s\n", (scratch / "full_w1" / "tables.txt").c_str());
  } catch (const std::exception& e) {
    std::printf("acceptance aborted: %s\n", e.what());
    return 2;
  }
  std::printf("acceptance finished: %d of 11 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
