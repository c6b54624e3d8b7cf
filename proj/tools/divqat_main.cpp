// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end: train, quantize, defend, attack, evaluate,
// run (full pipeline), sweep, report. Every subcommand is driven by a
// JSON experiment config; --seed and --out override the config. Exit
// codes: 0 success, 1 configuration or validation error, 2 runtime
// failure.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "divqat/attacks.hpp"
#include "divqat/checkpoint.hpp"
#include "divqat/errors.hpp"
#include "divqat/experiment.hpp"
#include "divqat/rng.hpp"

namespace fs = std::filesystem;
using namespace divqat;
using nlohmann::json;

namespace {

struct CommonArgs {
  std::string config_path;
  int seed = -1;           // -1: first seed of the config
  std::string out;         // empty: config out_dir
};

ExperimentConfig load_config(const CommonArgs& a) {
  if (a.config_path.empty()) throw ConfigError("--config is required");
  ExperimentConfig cfg = ExperimentConfig::from_json_file(a.config_path);
  if (!a.out.empty()) cfg.out_dir = a.out;
  if (a.seed >= 0) cfg.seeds = {a.seed};
  return cfg;
}

int first_seed(const ExperimentConfig& cfg) { return cfg.seeds.front(); }

std::string seed_scope(const char* phase, int seed) {
  return std::string(phase) + "|seed" + std::to_string(seed);
}

SplitDataset make_data(const ExperimentConfig& cfg, int seed) {
  TaskSpec task = cfg.task;
  task.seed = Rng::derive(cfg.master_seed, seed_scope("data", seed));
  return generate(task);
}

fs::path cell_dir(const ExperimentConfig& cfg, const std::string& cell, int seed) {
  fs::path dir = fs::path(cfg.out_dir) / cell / std::to_string(seed);
  fs::create_directories(dir / "checkpoints");
  return dir;
}

void write_json_file(const fs::path& path, const json& j) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw UsageError("cannot open for writing: " + path.string());
  f << j.dump(2) << "\n";
}

json read_json_file(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw UsageError("cannot open: " + path.string());
  try {
    return json::parse(std::string((std::istreambuf_iterator<char>(f)),
                                   std::istreambuf_iterator<char>()));
  } catch (const json::exception& e) {
    throw ParseError(path.string() + ": invalid JSON: " + e.what());
  }
}

// Trains the float victim for one seed and writes float.dqck + history.
int cmd_train(const CommonArgs& a) {
  ExperimentConfig cfg = load_config(a);
  const int seed = first_seed(cfg);
  SplitDataset data = make_data(cfg, seed);
  Rng frng(Rng::derive(cfg.master_seed, seed_scope("float", seed)));
  Model m = make_model(cfg.victim_arch, cfg.task.input_shape, cfg.task.num_classes, frng);
  TrainHistory hist = train_model(m, data, cfg.train, frng);
  const fs::path dir = cell_dir(cfg, "large", seed);
  save_checkpoint((dir / "checkpoints" / "float.dqck").string(), m);
  write_history_jsonl(hist, (dir / "history.jsonl").string());
  std::printf("trained %s: eval error %.2f%%\n", cfg.victim_arch.c_str(),
              100.0 * hist.epochs.back().eval_err);
  std::printf("wrote %s\n", (dir / "checkpoints" / "float.dqck").string().c_str());
  return 0;
}

// Produces the quantized victim for one cell of the config (ptq, qat or
// divqat) starting from the float pipeline, and writes victim.dqck.
int cmd_quantize(const CommonArgs& a, const std::string& in_path) {
  ExperimentConfig cfg = load_config(a);
  const int seed = first_seed(cfg);
  SplitDataset data = make_data(cfg, seed);

  Model float_m;
  if (!in_path.empty()) {
    float_m = load_model_file(in_path);
  } else {
    Rng frng(Rng::derive(cfg.master_seed, seed_scope("float", seed)));
    float_m = make_model(cfg.victim_arch, cfg.task.input_shape, cfg.task.num_classes, frng);
    train_model(float_m, data, cfg.train, frng);
  }

  const MethodCell cell = cfg.cells.front();
  Model victim;
  TrainHistory hist;
  switch (cell.method) {
    case QuantMethod::Large:
      victim = float_m;
      break;
    case QuantMethod::Ptq: {
      std::vector<Tensor> batches;
      const int64_t n = std::min<int64_t>(data.train.size(), 256);
      const int64_t w = row_width(data.train.inputs);
      for (int64_t s = 0; s < n; s += cfg.finetune.batch_size) {
        const int64_t take = std::min<int64_t>(cfg.finetune.batch_size, n - s);
        std::vector<int> shape = data.train.inputs.shape();
        shape[0] = static_cast<int>(take);
        Tensor b(shape);
        std::copy_n(data.train.inputs.data() + s * w, take * w, b.data());
        batches.push_back(std::move(b));
      }
      victim = ptq(float_m, cfg.quant, batches);
      break;
    }
    case QuantMethod::Qat:
    case QuantMethod::DivQat: {
      victim = prepare_qat(float_m, cfg.quant);
      Rng ft(Rng::derive(cfg.master_seed, seed_scope("finetune", seed)));
      DivQatConfig c = cfg.finetune;
      c.alpha = cell.method == QuantMethod::DivQat ? cell.alpha : 0.0;
      hist = train_divqat(victim, float_m, data, c, ft);
      break;
    }
  }
  const fs::path dir = cell_dir(cfg, cell.cell_id(), seed);
  save_checkpoint((dir / "checkpoints" / "victim.dqck").string(), victim);
  if (!hist.epochs.empty()) write_history_jsonl(hist, (dir / "history.jsonl").string());
  victim.set_train(false);
  std::printf("%s victim: test error %.2f%%\n", cell.cell_id().c_str(),
              100.0 * error_rate(victim, data.test));
  std::printf("wrote %s\n", (dir / "checkpoints" / "victim.dqck").string().c_str());
  return 0;
}

int cmd_defend(const CommonArgs& a, const std::string& victim_path) {
  ExperimentConfig cfg = load_config(a);
  if (cfg.defense_kind == DefenseKind::None)
    throw ConfigError("defend: config selects no defense kind");
  const int seed = first_seed(cfg);
  SplitDataset data = make_data(cfg, seed);
  const MethodCell cell = cfg.cells.front();
  const fs::path dir = cell_dir(cfg, cell.cell_id(), seed);
  const fs::path vp = victim_path.empty() ? dir / "checkpoints" / "victim.dqck"
                                          : fs::path(victim_path);
  Model victim = load_model_file(vp.string());
  CalibratedDefense cal =
      calibrate_to_budget(cfg.defense_kind, victim, data.test.inputs, cfg.defense_budget,
                          Rng::derive(cfg.master_seed, seed_scope("defense", seed)));
  json dj;
  dj["kind"] = defense_kind_name(cal.config.kind);
  dj["beta"] = cal.config.beta;
  dj["gamma"] = cal.config.gamma;
  dj["strength"] = cal.config.strength;
  dj["eps"] = cal.config.eps;
  dj["k"] = cal.config.k;
  dj["l1_budget"] = cal.config.l1_budget;
  dj["achieved_mean_l1"] = cal.achieved_mean_l1;
  dj["achieved_max_l1"] = cal.achieved_max_l1;
  write_json_file(dir / "defense.json", dj);
  std::printf("calibrated %s: mean l1 %.4f, max l1 %.4f\n",
              defense_kind_name(cal.config.kind).c_str(), cal.achieved_mean_l1,
              cal.achieved_max_l1);
  std::printf("wrote %s\n", (dir / "defense.json").string().c_str());
  return 0;
}

DefenseConfig defense_from_json(const json& dj) {
  DefenseConfig d;
  d.kind = parse_defense_kind(dj.at("kind").get<std::string>());
  d.beta = dj.at("beta").get<double>();
  d.gamma = dj.at("gamma").get<double>();
  d.strength = dj.at("strength").get<double>();
  d.eps = dj.at("eps").get<double>();
  d.k = dj.at("k").get<int>();
  d.l1_budget = dj.at("l1_budget").get<double>();
  return d;
}

int cmd_attack(const CommonArgs& a, const std::string& victim_path) {
  ExperimentConfig cfg = load_config(a);
  if (cfg.attack.kind == AttackKind::None)
    throw ConfigError("attack: config selects no attack kind");
  const int seed = first_seed(cfg);
  SplitDataset data = make_data(cfg, seed);
  const MethodCell cell = cfg.cells.front();
  const fs::path dir = cell_dir(cfg, cell.cell_id(), seed);
  const fs::path vp = victim_path.empty() ? dir / "checkpoints" / "victim.dqck"
                                          : fs::path(victim_path);
  Model victim = load_model_file(vp.string());

  DefenseConfig dcfg;
  if (fs::is_regular_file(dir / "defense.json"))
    dcfg = defense_from_json(read_json_file(dir / "defense.json"));

  VictimOracle oracle(victim, dcfg, Rng::derive(cfg.master_seed, seed_scope("oracle", seed)),
                      cfg.attack.budget);
  Rng atk(Rng::derive(cfg.master_seed, seed_scope("attack", seed)));
  Model student;
  if (cfg.attack.kind == AttackKind::Knockoff) {
    Tensor surrogate = adversary_variant(
        data.task, cfg.attack.relation, Rng::derive(cfg.master_seed, seed_scope("surrogate", seed)),
        static_cast<int>(std::max<int64_t>(1, cfg.attack.budget)), data);
    DivQatConfig scfg;
    scfg.epochs = cfg.attack.epochs;
    scfg.optimizer.nesterov = true;
    KnockoffResult res = knockoff_attack(oracle, surrogate, cfg.attack.student_arch,
                                         AttackBudget{cfg.attack.budget}, scfg, atk);
    student = std::move(res.student);
    save_transfer_set((dir / "checkpoints" / "transfer.dqds").string(), res.transfer);
  } else {
    DatafreeResult res = datafree_attack(oracle, cfg.attack.student_arch,
                                         AttackBudget{cfg.attack.budget}, cfg.attack.datafree, atk);
    student = std::move(res.student);
    if (res.truncated) std::printf("attack truncated by the query budget\n");
  }
  save_checkpoint((dir / "checkpoints" / "student.dqck").string(), student);
  std::printf("attack spent %lld queries\n", static_cast<long long>(oracle.query_count()));
  std::printf("wrote %s\n", (dir / "checkpoints" / "student.dqck").string().c_str());
  return 0;
}

int cmd_evaluate(const CommonArgs& a, const std::string& victim_path,
                 const std::string& student_path) {
  ExperimentConfig cfg = load_config(a);
  const int seed = first_seed(cfg);
  SplitDataset data = make_data(cfg, seed);
  const MethodCell cell = cfg.cells.front();
  const fs::path dir = cell_dir(cfg, cell.cell_id(), seed);
  const fs::path vp = victim_path.empty() ? dir / "checkpoints" / "victim.dqck"
                                          : fs::path(victim_path);
  Model victim = load_model_file(vp.string());
  victim.set_train(false);
  json out;
  out["defender_error_pct"] = 100.0 * error_rate(victim, data.test);
  const fs::path sp = student_path.empty() ? dir / "checkpoints" / "student.dqck"
                                           : fs::path(student_path);
  if (fs::is_regular_file(sp)) {
    Model student = load_model_file(sp.string());
    ExtractionMetrics em = evaluate_extraction(victim, student, data.test);
    out["adversary_error_pct"] = em.adversary_error_pct;
    out["disagreement_pct"] = em.disagreement_pct;
  }
  std::printf("%s\n", out.dump(2).c_str());
  return 0;
}

int cmd_run(const CommonArgs& a) {
  ExperimentConfig cfg = load_config(a);
  std::vector<MetricsReport> rows = run_experiment(cfg);
  emit_report(rows, "csv", (fs::path(cfg.out_dir) / "report.csv").string());
  emit_report(rows, "json", (fs::path(cfg.out_dir) / "report.json").string());
  int failed = 0;
  for (const auto& r : rows)
    if (!r.error.empty()) ++failed;
  std::printf("ran %zu cell-seed pairs (%d failed); reports under %s\n", rows.size(), failed,
              cfg.out_dir.c_str());
  return failed == 0 ? 0 : 2;
}

int cmd_sweep(const CommonArgs& a, std::vector<double> grid) {
  ExperimentConfig cfg = load_config(a);
  if (grid.empty()) {
    grid = {};
    for (const auto& c : cfg.cells)
      if (c.method == QuantMethod::DivQat) grid.push_back(c.alpha);
    if (grid.empty()) grid = {0.0, 0.1, 0.5, 1.0};
  }
  SweepResult res = sweep_alpha(cfg, grid);
  emit_report(res.reports, "csv", (fs::path(cfg.out_dir) / "sweep.csv").string());
  std::ofstream f(fs::path(cfg.out_dir) / "sweep_series.json", std::ios::binary);
  f << sweep_series_json(res.series);
  std::printf("alpha     defender%%  adversary%%  final_kl\n");
  for (const auto& p : res.series)
    std::printf("%-9g %-10.2f %-11s %.6f\n", p.alpha, p.defender_error_pct,
                p.adversary_error_pct ? std::to_string(*p.adversary_error_pct).c_str() : "-",
                p.final_kl);
  return 0;
}

int cmd_report(const CommonArgs& a, const std::string& format) {
  ExperimentConfig cfg = load_config(a);
  std::vector<MetricsReport> rows = collect_reports(cfg.out_dir);
  const std::string ext = format == "json" ? "json" : "csv";
  const fs::path out = fs::path(cfg.out_dir) / ("report." + ext);
  emit_report(rows, ext, out.string());
  std::printf("aggregated %zu records into %s\n", rows.size(), out.string().c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"DivQAT: divergence-regularized quantization-aware training, "
               "output-perturbation defenses, and model-extraction evaluation"};
  app.require_subcommand(1);

  CommonArgs common;
  std::string in_path, student_path, format = "csv";
  std::vector<double> grid;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config_path, "experiment config JSON")->required();
    sub->add_option("--seed", common.seed, "override: run this single seed");
    sub->add_option("--out", common.out, "override: output directory");
  };

  CLI::App* train = app.add_subcommand("train", "train the float victim");
  add_common(train);
  CLI::App* quantize = app.add_subcommand("quantize", "produce the quantized victim");
  add_common(quantize);
  quantize->add_option("--in", in_path, "float checkpoint to start from");
  CLI::App* defend = app.add_subcommand("defend", "calibrate the defense to its l1 budget");
  add_common(defend);
  defend->add_option("--victim", in_path, "victim checkpoint");
  CLI::App* attack = app.add_subcommand("attack", "run the extraction attack");
  add_common(attack);
  attack->add_option("--victim", in_path, "victim checkpoint");
  CLI::App* evaluate = app.add_subcommand("evaluate", "score victim and stolen student");
  add_common(evaluate);
  evaluate->add_option("--victim", in_path, "victim checkpoint");
  evaluate->add_option("--student", student_path, "student checkpoint");
  CLI::App* run = app.add_subcommand("run", "full pipeline over all cells and seeds");
  add_common(run);
  CLI::App* sweep = app.add_subcommand("sweep", "alpha ablation sweep");
  add_common(sweep);
  sweep->add_option("--grid", grid, "alpha grid (defaults to the config's divqat cells)");
  CLI::App* report = app.add_subcommand("report", "aggregate per-cell reports");
  add_common(report);
  report->add_option("--format", format, "csv or json")->check(CLI::IsMember({"csv", "json"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;  // bad usage is a validation error
  }

  try {
    if (app.got_subcommand(train)) return cmd_train(common);
    if (app.got_subcommand(quantize)) return cmd_quantize(common, in_path);
    if (app.got_subcommand(defend)) return cmd_defend(common, in_path);
    if (app.got_subcommand(attack)) return cmd_attack(common, in_path);
    if (app.got_subcommand(evaluate)) return cmd_evaluate(common, in_path, student_path);
    if (app.got_subcommand(run)) return cmd_run(common);
    if (app.got_subcommand(sweep)) return cmd_sweep(common, grid);
    if (app.got_subcommand(report)) return cmd_report(common, format);
    std::fprintf(stderr, "error: no subcommand\n");
    return 1;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
}
