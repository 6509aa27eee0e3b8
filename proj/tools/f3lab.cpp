// SPDX-License-Identifier: Apache-2.0
// f3lab command-line front end.
#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "f3lab/experiment.hpp"

using namespace f3lab;
namespace fs = std::filesystem;

namespace {

struct Common {
  std::string config;
  std::optional<std::size_t> workers;
  std::optional<std::string> output;
  std::optional<std::string> checkpoint;
  bool verbose = false;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("-c,--config", c.config, "experiment config file (JSON)")->required()->check(CLI::ExistingFile);
  app->add_option("-w,--workers", c.workers, "worker threads (never changes results)");
  app->add_option("-o,--output", c.output, "output directory (relative paths resolve under $F3LAB_OUTPUT_ROOT)");
  app->add_option("--checkpoint", c.checkpoint, "load this model checkpoint instead of training");
  app->add_flag("-v,--verbose", c.verbose, "progress on stderr");
}

ExperimentConfig load(const Common& c) {
  ExperimentConfig cfg = load_experiment_config(c.config);
  if (c.workers) cfg.workers = *c.workers;
  if (c.output) cfg.output_dir = *c.output;
  if (c.checkpoint) cfg.checkpoint = *c.checkpoint;
  cfg.training.workers = cfg.workers;
  cfg.validate();
  return cfg;
}

RunOptions options(const Common& c) { return {true, c.verbose}; }

const ConditionSpec& find_condition(const ExperimentConfig& cfg, const std::string& label) {
  for (const auto& c : cfg.conditions) {
    if (c.label == label) return c;
  }
  throw ConfigError("no condition labelled \"" + label + "\"");
}

double percent(std::size_t hits, std::size_t n) { return 100.0 * static_cast<double>(hits) / static_cast<double>(n); }

int cmd_gen_data(const Common& c) {
  const ExperimentConfig cfg = load(c);
  const auto dir = resolve_output_dir(cfg.output_dir) / "data";
  fs::create_directories(dir);
  const ImageGeometry g = ImageGeometry::from(cfg.model);
  for (auto [name, spec, split] : {std::tuple{"train", cfg.train, Split::Train}, std::tuple{"eval", cfg.eval, Split::Eval}}) {
    if (spec.n == 0) continue;
    const Dataset ds = generate(spec.n, spec.seed, cfg.mix, split, g);
    const auto path = dir / (std::string(name) + ".bin");
    save_dataset(ds, path.string());
    std::printf("%s: %zu samples, hash %s -> %s\n", name, ds.size(), dataset_hash(ds).c_str(), path.c_str());
  }
  return 0;
}

int cmd_train(const Common& c) {
  ExperimentConfig cfg = load(c);
  const auto out = resolve_output_dir(cfg.output_dir);
  fs::create_directories(out);
  const ImageGeometry g = ImageGeometry::from(cfg.model);
  const Dataset train_set = generate(cfg.train.n, cfg.train.seed, cfg.mix, Split::Train, g);
  const Dataset eval_set = generate(cfg.eval.n, cfg.eval.seed, cfg.mix, Split::Eval, g);
  const TrainResult r = [&] {
    try {
      return train(Model::init(cfg.model), train_set, cfg.training);
    } catch (const std::exception& e) {
      throw StageError(std::string("stage train: ") + e.what());
    }
  }();
  const auto path = out / "model.bin";
  save_model(r.model, path.string());
  std::printf("final loss %.6f, train accuracy %.2f, held-out accuracy %.2f\n", r.final_loss,
              100.0 * r.train_accuracy, accuracy(r.model, eval_set, cfg.workers));
  std::printf("model %s -> %s\n", model_hash(r.model).c_str(), path.c_str());
  return 0;
}

int cmd_attack(const Common& c) {
  const ExperimentConfig cfg = load(c);
  const ExperimentContext ctx = prepare_experiment(cfg, options(c));
  const auto path = ctx.out_dir / "adversarial.bin";
  save_dataset(ctx.adversarial, path.string());
  std::vector<std::size_t> before, after;
  std::size_t clean_hits = 0, adv_hits = 0;
  for (std::size_t i = 0; i < ctx.adversarial.size(); ++i) {
    const Sample& s = ctx.adversarial.samples[i];
    before.push_back(ctx.clean_predictions[i].answer);
    after.push_back(predict(ctx.model, s.image, s.question).answer);
    clean_hits += before.back() == s.answer_label;
    adv_hits += after.back() == s.answer_label;
  }
  const std::size_t n = ctx.adversarial.size();
  std::printf("%s on %zu samples: clean %.2f, adversarial %.2f, ASR %.2f\n", to_string(cfg.attack.method).c_str(), n,
              percent(clean_hits, n), percent(adv_hits, n), 100.0 * attack_success_rate(before, after));
  std::printf("adversarial set -> %s\n", path.c_str());
  return 0;
}

int cmd_purify(const Common& c, const std::string& label, std::size_t seed) {
  const ExperimentConfig cfg = load(c);
  const ConditionSpec& cond = label.empty() ? cfg.conditions.front() : find_condition(cfg, label);
  if (!cond.match_l1.empty()) throw ConfigError("l1-matched conditions need the full grid; use eval");
  const ExperimentContext ctx = prepare_experiment(cfg, options(c));
  std::vector<PurifyResult> results;
  const auto records = run_condition(ctx, cond, seed, &results);
  Dataset out = ctx.adversarial;
  out.kind = "purified";
  out.metadata = canonical_json(Json{{"condition", condition_json(cond)}, {"seed", seed}});
  std::size_t hits = 0;
  for (std::size_t i = 0; i < records.size(); ++i) {
    out.samples[i].image = results[i].purified;
    out.samples[i].l1 = results[i].l1;
    out.samples[i].linf = results[i].linf;
    hits += records[i].answer == records[i].label;
  }
  const auto path = ctx.out_dir / ("purified_" + slug(cond.label) + ".bin");
  save_dataset(out, path.string());
  std::printf("%s (seed %zu): accuracy %.2f on %zu samples -> %s\n", cond.label.c_str(), seed,
              percent(hits, records.size()), records.size(), path.c_str());
  return 0;
}

int cmd_eval(const Common& c) {
  const ExperimentConfig cfg = load(c);
  const EvalReport rep = run_experiment(cfg, options(c));
  std::fputs(render_tables(rep).c_str(), stdout);
  std::printf("report -> %s\n", resolve_output_dir(cfg.output_dir).c_str());
  return 0;
}

int cmd_report(const std::string& run_dir) {
  const fs::path dir = resolve_output_dir(run_dir);
  const EvalReport rep = load_and_recompute(dir);
  write_file((dir / "report.json").string(), canonical_json(report_json(rep)));
  write_file((dir / "tables.txt").string(), render_tables(rep));
  std::fputs(render_tables(rep).c_str(), stdout);
  return 0;
}

int cmd_heatmap(const Common& c) {
  const ExperimentConfig cfg = load(c);
  if (cfg.heatmaps.samples.empty()) throw ConfigError("heatmaps.samples is empty");
  const ExperimentContext ctx = prepare_experiment(cfg, options(c));
  export_heatmaps(ctx, cfg.conditions);
  std::printf("heatmaps -> %s\n", (ctx.out_dir / "heatmaps").c_str());
  return 0;
}

int exit_code(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return 2;
  if (dynamic_cast<const FormatError*>(&e) || dynamic_cast<const IoError*>(&e)) return 3;
  if (dynamic_cast<const StageError*>(&e)) return 4;
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"f3lab: toy vision-language model, attacks and attention-guided purification"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kCodeVersion);

  Common common;
  std::string label, run_dir;
  std::size_t seed = 0;

  auto* gen = app.add_subcommand("gen-data", "generate the train and eval datasets");
  auto* trn = app.add_subcommand("train", "train the model and report held-out accuracy");
  auto* atk = app.add_subcommand("attack", "attack the evaluation prefix");
  auto* pur = app.add_subcommand("purify", "purify the adversarial set under one condition");
  auto* evl = app.add_subcommand("eval", "run the full experiment and write the report");
  auto* rep = app.add_subcommand("report", "rebuild report.json and tables.txt from records.csv");
  auto* hm = app.add_subcommand("heatmap", "export attention heatmaps");
  for (auto* sc : {gen, trn, atk, pur, evl, hm}) add_common(sc, common);
  pur->add_option("-l,--condition", label, "condition label (default: the first)");
  pur->add_option("-s,--seed", seed, "purification seed");
  rep->add_option("run_dir", run_dir, "run directory holding records.csv and provenance.json")->required();

  CLI11_PARSE(app, argc, argv);
  try {
    if (*gen) return cmd_gen_data(common);
    if (*trn) return cmd_train(common);
    if (*atk) return cmd_attack(common);
    if (*pur) return cmd_purify(common, label, seed);
    if (*evl) return cmd_eval(common);
    if (*rep) return cmd_report(run_dir);
    if (*hm) return cmd_heatmap(common);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "f3lab: error: %s\n", e.what());
    return exit_code(e);
  }
  return 1;
}
