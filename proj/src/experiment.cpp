// SPDX-License-Identifier: Apache-2.0
#include "divqat/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <thread>
#include <utility>

#include <json.hpp>

#include "divqat/checkpoint.hpp"
#include "divqat/errors.hpp"
#include "divqat/losses.hpp"
#include "divqat/rng.hpp"

namespace divqat {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string gshort(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw UsageError("cannot open for writing: " + path);
  f.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!f) throw UsageError("write failed: " + path);
}

std::string read_text_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw UsageError("cannot open: " + path);
  return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

// ---- strict JSON helpers ------------------------------------------------

void expect_object(const json& j, const std::string& where) {
  if (!j.is_object()) throw ConfigError("config: " + where + " must be a JSON object");
}

void check_keys(const json& j, std::initializer_list<const char*> allowed,
                const std::string& where) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || it.key() == a;
    if (!ok) throw ConfigError("config: unknown field '" + it.key() + "' in " + where);
  }
}

template <class T>
T get_field(const json& j, const char* key, const std::string& where) {
  auto it = j.find(key);
  if (it == j.end()) throw ConfigError("config: missing field '" + std::string(key) + "' in " + where);
  try {
    return it->get<T>();
  } catch (const json::exception&) {
    throw ConfigError("config: field '" + std::string(key) + "' in " + where + " has the wrong type");
  }
}

template <class T>
T get_opt(const json& j, const char* key, T fallback, const std::string& where) {
  auto it = j.find(key);
  if (it == j.end()) return fallback;
  try {
    return it->get<T>();
  } catch (const json::exception&) {
    throw ConfigError("config: field '" + std::string(key) + "' in " + where + " has the wrong type");
  }
}

DivQatConfig parse_train_block(const json& j, const DivQatConfig& base, const std::string& where) {
  expect_object(j, where);
  check_keys(j,
             {"epochs", "batch_size", "lr", "momentum", "weight_decay", "nesterov", "cosine",
              "observer_freeze_frac"},
             where);
  DivQatConfig c = base;
  c.epochs = get_opt<int>(j, "epochs", c.epochs, where);
  c.batch_size = get_opt<int>(j, "batch_size", c.batch_size, where);
  c.optimizer.lr = get_opt<float>(j, "lr", c.optimizer.lr, where);
  c.optimizer.momentum = get_opt<float>(j, "momentum", c.optimizer.momentum, where);
  c.optimizer.weight_decay = get_opt<float>(j, "weight_decay", c.optimizer.weight_decay, where);
  c.optimizer.nesterov = get_opt<bool>(j, "nesterov", c.optimizer.nesterov, where);
  c.cosine = get_opt<bool>(j, "cosine", c.cosine, where);
  c.observer_freeze_frac = get_opt<double>(j, "observer_freeze_frac", c.observer_freeze_frac, where);
  return c;
}

void append_method(std::vector<MethodCell>& cells, const json& e) {
  if (e.is_string()) {
    const auto s = e.get<std::string>();
    if (s == "large") cells.push_back({QuantMethod::Large, 0.0});
    else if (s == "ptq") cells.push_back({QuantMethod::Ptq, 0.0});
    else if (s == "qat") cells.push_back({QuantMethod::Qat, 0.0});
    else if (s == "divqat")
      throw ConfigError("config: divqat requires an object with alpha or alpha_grid");
    else
      throw ConfigError("config: unknown quant_method '" + s + "'");
    return;
  }
  expect_object(e, "quant_method entry");
  check_keys(e, {"divqat"}, "quant_method entry");
  auto it = e.find("divqat");
  if (it == e.end()) throw ConfigError("config: quant_method object must hold 'divqat'");
  expect_object(*it, "divqat");
  check_keys(*it, {"alpha", "alpha_grid"}, "divqat");
  const bool has_a = it->contains("alpha");
  const bool has_g = it->contains("alpha_grid");
  if (has_a == has_g)
    throw ConfigError("config: divqat needs exactly one of alpha, alpha_grid");
  if (has_a) {
    cells.push_back({QuantMethod::DivQat, get_field<double>(*it, "alpha", "divqat")});
  } else {
    const auto grid = get_field<std::vector<double>>(*it, "alpha_grid", "divqat");
    if (grid.empty()) throw ConfigError("config: alpha_grid must not be empty");
    for (double a : grid) cells.push_back({QuantMethod::DivQat, a});
  }
}

}  // namespace

std::string quant_method_name(QuantMethod m) {
  switch (m) {
    case QuantMethod::Large: return "large";
    case QuantMethod::Ptq: return "ptq";
    case QuantMethod::Qat: return "qat";
    case QuantMethod::DivQat: return "divqat";
  }
  return "?";
}

std::string MethodCell::cell_id() const {
  if (method == QuantMethod::DivQat) return "divqat-a" + gshort(alpha);
  return quant_method_name(method);
}

void ExperimentConfig::validate() const {
  if (name.empty()) throw ConfigError("config: name must not be empty");
  if (out_dir.empty()) throw ConfigError("config: out_dir must not be empty");
  if (seeds.empty()) throw ConfigError("config: seeds must not be empty");
  if (jobs < 1) throw ConfigError("config: jobs must be >= 1");
  if (victim_arch.empty()) throw ConfigError("config: victim_arch must not be empty");
  if (cells.empty()) throw ConfigError("config: at least one quant_method cell");
  task.validate();
  quant.validate();
  train.validate();
  finetune.validate();
  for (const auto& c : cells)
    if (c.method == QuantMethod::DivQat && !(c.alpha >= 0.0))
      throw ConfigError("config: divqat alpha must be >= 0");
  if (!(defense_budget >= 0.0)) throw ConfigError("config: defense l1_budget must be >= 0");
  if (attack.kind != AttackKind::None) {
    if (attack.budget < 0) throw ConfigError("config: attack budget must be >= 0");
    if (attack.student_arch.empty()) throw ConfigError("config: attack student_arch empty");
    if (attack.kind == AttackKind::Knockoff && attack.epochs < 1)
      throw ConfigError("config: knockoff epochs must be >= 1");
    if (attack.kind == AttackKind::Datafree) attack.datafree.validate();
  }
}

ExperimentConfig ExperimentConfig::from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: invalid JSON: ") + e.what());
  }
  expect_object(j, "top level");
  check_keys(j,
             {"version", "name", "out_dir", "master_seed", "seeds", "jobs", "task",
              "victim_arch", "quant", "train", "finetune", "quant_method", "defense", "attack"},
             "top level");
  if (get_field<int>(j, "version", "top level") != 1)
    throw ConfigError("config: unsupported version (expected 1)");

  ExperimentConfig c;
  c.name = get_opt<std::string>(j, "name", c.name, "top level");
  c.out_dir = get_opt<std::string>(j, "out_dir", c.out_dir, "top level");
  c.master_seed = get_opt<uint64_t>(j, "master_seed", c.master_seed, "top level");
  c.seeds = get_opt<std::vector<int>>(j, "seeds", c.seeds, "top level");
  c.jobs = get_opt<int>(j, "jobs", c.jobs, "top level");
  c.victim_arch = get_opt<std::string>(j, "victim_arch", c.victim_arch, "top level");

  if (auto it = j.find("task"); it != j.end()) {
    expect_object(*it, "task");
    check_keys(*it, {"kind", "num_classes", "input_shape", "train_samples", "test_samples", "spread"},
               "task");
    if (it->contains("kind")) c.task.kind = parse_task_kind(get_field<std::string>(*it, "kind", "task"));
    c.task.num_classes = get_opt<int>(*it, "num_classes", c.task.num_classes, "task");
    c.task.input_shape = get_opt<std::vector<int>>(*it, "input_shape", c.task.input_shape, "task");
    c.task.train_samples = get_opt<int>(*it, "train_samples", c.task.train_samples, "task");
    c.task.test_samples = get_opt<int>(*it, "test_samples", c.task.test_samples, "task");
    c.task.spread = get_opt<double>(*it, "spread", c.task.spread, "task");
  }
  if (auto it = j.find("quant"); it != j.end()) {
    expect_object(*it, "quant");
    check_keys(*it, {"bit_width", "profile"}, "quant");
    c.quant.bit_width = get_opt<int>(*it, "bit_width", c.quant.bit_width, "quant");
    if (it->contains("profile"))
      c.quant.profile = parse_profile(get_field<std::string>(*it, "profile", "quant"));
  }
  if (auto it = j.find("train"); it != j.end()) c.train = parse_train_block(*it, c.train, "train");
  c.finetune = c.train;
  if (auto it = j.find("finetune"); it != j.end())
    c.finetune = parse_train_block(*it, c.finetune, "finetune");

  if (auto it = j.find("quant_method"); it != j.end()) {
    c.cells.clear();
    if (it->is_array()) {
      for (const auto& e : *it) append_method(c.cells, e);
    } else {
      append_method(c.cells, *it);
    }
  } else {
    c.cells = {MethodCell{QuantMethod::Qat, 0.0}};
  }

  if (auto it = j.find("defense"); it != j.end()) {
    expect_object(*it, "defense");
    check_keys(*it, {"kind", "l1_budget"}, "defense");
    if (it->contains("kind"))
      c.defense_kind = parse_defense_kind(get_field<std::string>(*it, "kind", "defense"));
    c.defense_budget = get_opt<double>(*it, "l1_budget", c.defense_budget, "defense");
  }
  if (auto it = j.find("attack"); it != j.end()) {
    expect_object(*it, "attack");
    check_keys(*it,
               {"kind", "budget", "student_arch", "relation", "shift", "epochs", "rounds",
                "gen_batch", "student_batch", "student_steps_per_round", "latent_dim", "gen_lr",
                "spsa_h", "final_epochs", "student_lr"},
               "attack");
    const auto kind = get_opt<std::string>(*it, "kind", std::string("none"), "attack");
    if (kind == "none") c.attack.kind = AttackKind::None;
    else if (kind == "knockoff") c.attack.kind = AttackKind::Knockoff;
    else if (kind == "datafree") c.attack.kind = AttackKind::Datafree;
    else throw ConfigError("config: unknown attack kind '" + kind + "'");
    c.attack.budget = get_opt<int64_t>(*it, "budget", c.attack.budget, "attack");
    c.attack.student_arch =
        get_opt<std::string>(*it, "student_arch", c.attack.student_arch, "attack");
    if (it->contains("relation"))
      c.attack.relation.relation = parse_relation(get_field<std::string>(*it, "relation", "attack"));
    c.attack.relation.shift = get_opt<double>(*it, "shift", c.attack.relation.shift, "attack");
    c.attack.epochs = get_opt<int>(*it, "epochs", c.attack.epochs, "attack");
    c.attack.datafree.rounds = get_opt<int>(*it, "rounds", c.attack.datafree.rounds, "attack");
    c.attack.datafree.gen_batch =
        get_opt<int>(*it, "gen_batch", c.attack.datafree.gen_batch, "attack");
    c.attack.datafree.student_batch =
        get_opt<int>(*it, "student_batch", c.attack.datafree.student_batch, "attack");
    c.attack.datafree.student_steps_per_round = get_opt<int>(
        *it, "student_steps_per_round", c.attack.datafree.student_steps_per_round, "attack");
    c.attack.datafree.latent_dim =
        get_opt<int>(*it, "latent_dim", c.attack.datafree.latent_dim, "attack");
    c.attack.datafree.gen_lr = get_opt<float>(*it, "gen_lr", c.attack.datafree.gen_lr, "attack");
    c.attack.datafree.spsa_h = get_opt<float>(*it, "spsa_h", c.attack.datafree.spsa_h, "attack");
    c.attack.datafree.final_epochs =
        get_opt<int>(*it, "final_epochs", c.attack.datafree.final_epochs, "attack");
    c.attack.datafree.student_opt.lr =
        get_opt<float>(*it, "student_lr", c.attack.datafree.student_opt.lr, "attack");
  }
  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::from_json_file(const std::string& path) {
  return from_json_text(read_text_file(path));
}

void MetricsReport::check_ranges() const {
  if (!error.empty()) return;  // failure records carry no metric guarantees
  auto pct = [](double v) { return v >= 0.0 && v <= 100.0; };
  if (!pct(defender_error_pct)) throw UsageError("report: defender error outside [0,100]");
  if (adversary_error_pct && !pct(*adversary_error_pct))
    throw UsageError("report: adversary error outside [0,100]");
  if (disagreement_pct && !pct(*disagreement_pct))
    throw UsageError("report: disagreement outside [0,100]");
  auto l1ok = [](double v) { return v >= 0.0 && v <= 2.0; };
  if (mean_l1 && !l1ok(*mean_l1)) throw UsageError("report: mean l1 outside [0,2]");
  if (max_l1 && !l1ok(*max_l1)) throw UsageError("report: max l1 outside [0,2]");
}

// ---- per-seed pipeline ----------------------------------------------------

namespace {

std::string seed_scope(const char* phase, int seed) {
  return std::string(phase) + "|seed" + std::to_string(seed);
}

struct SeedContext {
  SplitDataset data;
  Model float_model;
  TrainHistory float_history;
};

SeedContext build_seed_context(const ExperimentConfig& cfg, int seed) {
  TaskSpec task = cfg.task;
  task.seed = Rng::derive(cfg.master_seed, seed_scope("data", seed));
  SeedContext ctx;
  ctx.data = generate(task);
  Rng frng(Rng::derive(cfg.master_seed, seed_scope("float", seed)));
  ctx.float_model = make_model(cfg.victim_arch, task.input_shape, task.num_classes, frng);
  ctx.float_history = train_model(ctx.float_model, ctx.data, cfg.train, frng);
  return ctx;
}

std::vector<Tensor> calibration_batches(const SplitDataset& data, int batch_size) {
  std::vector<Tensor> out;
  const int64_t n = data.train.size();
  const int64_t limit = std::min<int64_t>(n, 256);
  const int64_t w = row_width(data.train.inputs);
  for (int64_t start = 0; start < limit; start += batch_size) {
    const int64_t take = std::min<int64_t>(batch_size, limit - start);
    std::vector<int> shape = data.train.inputs.shape();
    shape[0] = static_cast<int>(take);
    Tensor b(shape);
    std::copy_n(data.train.inputs.data() + start * w, take * w, b.data());
    out.push_back(std::move(b));
  }
  return out;
}

struct VictimOut {
  Model model;
  TrainHistory history;
};

VictimOut make_victim(const ExperimentConfig& cfg, const MethodCell& cell,
                      const SeedContext& ctx, int seed) {
  switch (cell.method) {
    case QuantMethod::Large:
      return {ctx.float_model, ctx.float_history};
    case QuantMethod::Ptq:
      return {ptq(ctx.float_model, cfg.quant, calibration_batches(ctx.data, cfg.finetune.batch_size)),
              ctx.float_history};
    case QuantMethod::Qat:
    case QuantMethod::DivQat: {
      Model q = prepare_qat(ctx.float_model, cfg.quant);
      // Same stream for qat and every divqat cell: matched methods see
      // identical draws, and divqat alpha=0 reproduces qat exactly.
      Rng ft(Rng::derive(cfg.master_seed, seed_scope("finetune", seed)));
      DivQatConfig c = cfg.finetune;
      c.alpha = cell.method == QuantMethod::DivQat ? cell.alpha : 0.0;
      TrainHistory h = train_divqat(q, ctx.float_model, ctx.data, c, ft);
      return {std::move(q), std::move(h)};
    }
  }
  throw UsageError("unreachable quant method");
}

double defense_param_of(const DefenseConfig& d) {
  switch (d.kind) {
    case DefenseKind::ReverseSigmoid: return d.beta;
    case DefenseKind::Deception: return d.strength;
    case DefenseKind::RandomNoise: return d.eps;
    case DefenseKind::TopK: return static_cast<double>(d.k);
    case DefenseKind::None: return 0.0;
  }
  return 0.0;
}

double defended_error_pct(const Model& victim, const DefenseConfig& d, const Dataset& test,
                          uint64_t serve_seed) {
  Rng rng(Rng::derive(serve_seed, "serving"));
  const int64_t n = test.size();
  const int K = test.num_classes;
  const int64_t bs = 256;
  const int64_t w = row_width(test.inputs);
  int64_t wrong = 0;
  for (int64_t start = 0; start < n; start += bs) {
    const int64_t take = std::min(bs, n - start);
    std::vector<int> shape = test.inputs.shape();
    shape[0] = static_cast<int>(take);
    Tensor batch(shape);
    std::copy_n(test.inputs.data() + start * w, take * w, batch.data());
    Tensor served = apply_defense(victim.predict_proba(batch), d, &rng);
    for (int64_t r = 0; r < take; ++r)
      if (argmax_row(served.data() + r * K, K) != test.labels[static_cast<size_t>(start + r)])
        ++wrong;
  }
  return 100.0 * static_cast<double>(wrong) / static_cast<double>(n);
}

json row_to_json(const MetricsReport& r) {
  json j;
  j["cell"] = r.cell;
  j["method"] = r.method;
  j["alpha"] = r.alpha ? json(*r.alpha) : json(nullptr);
  j["seed"] = r.seed;
  j["defender_error_pct"] = r.defender_error_pct;
  j["adversary_error_pct"] = r.adversary_error_pct ? json(*r.adversary_error_pct) : json(nullptr);
  j["disagreement_pct"] = r.disagreement_pct ? json(*r.disagreement_pct) : json(nullptr);
  j["mean_l1"] = r.mean_l1 ? json(*r.mean_l1) : json(nullptr);
  j["max_l1"] = r.max_l1 ? json(*r.max_l1) : json(nullptr);
  j["defense_kind"] = r.defense_kind;
  j["defense_param"] = r.defense_param ? json(*r.defense_param) : json(nullptr);
  j["query_count"] = r.query_count ? json(*r.query_count) : json(nullptr);
  j["kl_to_float"] = r.kl_to_float;
  j["error"] = r.error.empty() ? json(nullptr) : json(r.error);
  return j;
}

MetricsReport row_from_json(const json& j);

MetricsReport run_cell(const ExperimentConfig& cfg, const MethodCell& cell,
                       const SeedContext& ctx, int seed) {
  const auto t0 = std::chrono::steady_clock::now();
  MetricsReport r;
  r.cell = cell.cell_id();
  r.method = quant_method_name(cell.method);
  if (cell.method == QuantMethod::DivQat) r.alpha = cell.alpha;
  r.seed = seed;

  const fs::path dir = fs::path(cfg.out_dir) / r.cell / std::to_string(seed);
  fs::create_directories(dir / "checkpoints");

  VictimOut v = make_victim(cfg, cell, ctx, seed);
  write_history_jsonl(v.history, (dir / "history.jsonl").string());
  save_checkpoint((dir / "checkpoints" / "victim.dqck").string(), v.model);
  r.kl_to_float = mean_kl_between(v.model, ctx.float_model, ctx.data.test.inputs);

  if (cell.method == QuantMethod::DivQat && cfg.defense_kind == DefenseKind::None) {
    // Output-perturbation budget of the divergence itself, measured against
    // the plain qat baseline. The alpha=0 fine-tune replays the qat cell's
    // stream exactly, so no cross-cell artifact is read.
    MethodCell base;
    base.method = QuantMethod::Qat;
    VictimOut ref = make_victim(cfg, base, ctx, seed);
    const Tensor ours = v.model.predict_proba(ctx.data.test.inputs);
    const Tensor theirs = ref.model.predict_proba(ctx.data.test.inputs);
    r.mean_l1 = mean_row_l1(ours, theirs);
    r.max_l1 = max_row_l1(ours, theirs);
  }

  DefenseConfig dcfg;
  if (cfg.defense_kind != DefenseKind::None) {
    CalibratedDefense cal =
        calibrate_to_budget(cfg.defense_kind, v.model, ctx.data.test.inputs, cfg.defense_budget,
                            Rng::derive(cfg.master_seed, seed_scope("defense", seed)));
    dcfg = cal.config;
    r.mean_l1 = cal.achieved_mean_l1;
    r.max_l1 = cal.achieved_max_l1;
    r.defense_param = defense_param_of(dcfg);
  }
  r.defense_kind = defense_kind_name(dcfg.kind);
  r.defender_error_pct = defended_error_pct(
      v.model, dcfg, ctx.data.test, Rng::derive(cfg.master_seed, seed_scope("serve", seed)));

  if (cfg.attack.kind != AttackKind::None) {
    const uint64_t before = v.model.param_checksum();
    VictimOracle oracle(v.model, dcfg, Rng::derive(cfg.master_seed, seed_scope("oracle", seed)),
                        cfg.attack.budget);
    Rng atk(Rng::derive(cfg.master_seed, seed_scope("attack", seed)));
    Model student;
    if (cfg.attack.kind == AttackKind::Knockoff) {
      Tensor surrogate = adversary_variant(
          ctx.data.task, cfg.attack.relation,
          Rng::derive(cfg.master_seed, seed_scope("surrogate", seed)),
          static_cast<int>(std::max<int64_t>(1, cfg.attack.budget)), ctx.data);
      DivQatConfig scfg;
      scfg.epochs = cfg.attack.epochs;
      scfg.optimizer.nesterov = true;
      KnockoffResult kres = knockoff_attack(oracle, surrogate, cfg.attack.student_arch,
                                            AttackBudget{cfg.attack.budget}, scfg, atk);
      student = std::move(kres.student);
    } else {
      DatafreeResult dres = datafree_attack(oracle, cfg.attack.student_arch,
                                            AttackBudget{cfg.attack.budget}, cfg.attack.datafree,
                                            atk);
      student = std::move(dres.student);
    }
    if (v.model.param_checksum() != before)
      throw UsageError("victim parameters changed during the attack phase");
    save_checkpoint((dir / "checkpoints" / "student.dqck").string(), student);
    if (ctx.data.test.size() > 0) {
      ExtractionMetrics em = evaluate_extraction(v.model, student, ctx.data.test);
      r.adversary_error_pct = em.adversary_error_pct;
      r.disagreement_pct = em.disagreement_pct;
    }
    r.query_count = oracle.query_count();
  }

  r.wall_clock_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  r.check_ranges();
  write_text_file((dir / "report.json").string(), row_to_json(r).dump(2) + "\n");
  return r;
}

std::vector<MetricsReport> run_seed(const ExperimentConfig& cfg, int seed) {
  std::vector<MetricsReport> rows;
  rows.reserve(cfg.cells.size());
  SeedContext ctx;
  std::string ctx_error;
  try {
    ctx = build_seed_context(cfg, seed);
  } catch (const std::exception& e) {
    ctx_error = e.what();
  }
  for (const MethodCell& cell : cfg.cells) {
    MetricsReport r;
    r.cell = cell.cell_id();
    r.method = quant_method_name(cell.method);
    if (cell.method == QuantMethod::DivQat) r.alpha = cell.alpha;
    r.seed = seed;
    if (!ctx_error.empty()) {
      r.error = ctx_error;
    } else {
      try {
        r = run_cell(cfg, cell, ctx, seed);
      } catch (const std::exception& e) {
        r.error = e.what();  // this cell failed; the others continue
      }
    }
    if (!r.error.empty()) {
      const fs::path dir = fs::path(cfg.out_dir) / r.cell / std::to_string(seed);
      fs::create_directories(dir);
      write_text_file((dir / "report.json").string(), row_to_json(r).dump(2) + "\n");
    }
    rows.push_back(std::move(r));
  }
  return rows;
}

}  // namespace

std::vector<MetricsReport> run_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  const size_t n_seeds = cfg.seeds.size();
  std::vector<std::vector<MetricsReport>> per_seed(n_seeds);

  std::atomic<size_t> next{0};
  auto worker = [&]() {
    for (;;) {
      const size_t i = next.fetch_add(1);
      if (i >= n_seeds) return;
      per_seed[i] = run_seed(cfg, cfg.seeds[i]);
    }
  };
  const int jobs = std::min<int>(cfg.jobs, static_cast<int>(n_seeds));
  if (jobs <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < jobs; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  std::vector<MetricsReport> rows;
  rows.reserve(n_seeds * cfg.cells.size());
  for (size_t c = 0; c < cfg.cells.size(); ++c)
    for (size_t s = 0; s < n_seeds; ++s) rows.push_back(per_seed[s][c]);
  return rows;
}

AlphaSelection select_alpha_by_budget(const std::vector<double>& grid,
                                      const std::vector<const Model*>& divqat_models,
                                      const Model& qat_reference, const Tensor& heldout,
                                      double budget) {
  if (grid.empty() || grid.size() != divqat_models.size())
    throw UsageError("alpha selection: grid and model list must match and be non-empty");
  if (batch_rows(heldout) == 0) throw UsageError("alpha selection: empty held-out set");
  const Tensor ref = qat_reference.predict_proba(heldout);
  bool found = false;
  AlphaSelection best;
  for (size_t i = 0; i < grid.size(); ++i) {
    const double l1 = mean_row_l1(divqat_models[i]->predict_proba(heldout), ref);
    if (l1 <= budget && (!found || grid[i] > best.alpha)) {
      best = {grid[i], l1};
      found = true;
    }
  }
  if (!found) throw CalibrationError("alpha selection: no grid point within the l1 budget");
  return best;
}

SweepResult sweep_alpha(const ExperimentConfig& cfg, const std::vector<double>& grid) {
  if (grid.empty()) throw UsageError("alpha sweep: empty grid");
  ExperimentConfig sweep_cfg = cfg;
  sweep_cfg.cells.clear();
  for (double a : grid) sweep_cfg.cells.push_back({QuantMethod::DivQat, a});
  SweepResult res;
  res.reports = run_experiment(sweep_cfg);

  for (double a : grid) {
    const std::string id = MethodCell{QuantMethod::DivQat, a}.cell_id();
    std::vector<double> de, ae, da, kl;
    for (const auto& r : res.reports) {
      if (r.cell != id || !r.error.empty()) continue;
      de.push_back(r.defender_error_pct);
      kl.push_back(r.kl_to_float);
      if (r.adversary_error_pct) ae.push_back(*r.adversary_error_pct);
      if (r.disagreement_pct) da.push_back(*r.disagreement_pct);
    }
    SweepPoint p;
    p.alpha = a;
    if (!de.empty()) p.defender_error_pct = median_of(de);
    if (!kl.empty()) p.final_kl = median_of(kl);
    if (!ae.empty()) p.adversary_error_pct = median_of(ae);
    if (!da.empty()) p.disagreement_pct = median_of(da);
    res.series.push_back(p);
  }
  return res;
}

double median_of(std::vector<double> v) {
  if (v.empty()) throw UsageError("median of an empty list");
  std::sort(v.begin(), v.end());
  const size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// ---- report emission ------------------------------------------------------

namespace {

const char* kCsvHeader =
    "cell,method,alpha,seed,defender_error_pct,adversary_error_pct,disagreement_pct,"
    "mean_l1,max_l1,defense_kind,defense_param,query_count,kl_to_float,error";

std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char ch : s) {
    if (ch == '"') out += "\"\"";
    else out.push_back(ch);
  }
  out += "\"";
  return out;
}

std::string opt_g17(const std::optional<double>& v) { return v ? g17(*v) : std::string(); }

void csv_row(std::string& out, const MetricsReport& r, const std::string& seed_text) {
  out += csv_escape(r.cell);
  out += ',';
  out += r.method;
  out += ',';
  out += opt_g17(r.alpha);
  out += ',';
  out += seed_text;
  out += ',';
  out += g17(r.defender_error_pct);
  out += ',';
  out += opt_g17(r.adversary_error_pct);
  out += ',';
  out += opt_g17(r.disagreement_pct);
  out += ',';
  out += opt_g17(r.mean_l1);
  out += ',';
  out += opt_g17(r.max_l1);
  out += ',';
  out += r.defense_kind;
  out += ',';
  out += opt_g17(r.defense_param);
  out += ',';
  out += r.query_count ? std::to_string(*r.query_count) : std::string();
  out += ',';
  out += g17(r.kl_to_float);
  out += ',';
  out += csv_escape(r.error);
  out += '\n';
}

/// Median-aggregate row per cell over its non-error seed rows, cells in
/// first-appearance order. Optional metrics aggregate over the rows
/// where they are present.
std::vector<MetricsReport> aggregate_rows(const std::vector<MetricsReport>& rows) {
  std::vector<std::string> order;
  for (const auto& r : rows)
    if (std::find(order.begin(), order.end(), r.cell) == order.end()) order.push_back(r.cell);

  std::vector<MetricsReport> out;
  for (const auto& id : order) {
    MetricsReport agg;
    agg.cell = id;
    std::vector<double> de, ae, da, m1, x1, dp, kl, qc;
    for (const auto& r : rows) {
      if (r.cell != id) continue;
      if (agg.method.empty()) {
        agg.method = r.method;
        agg.alpha = r.alpha;
        agg.defense_kind = r.defense_kind;
      }
      if (!r.error.empty()) continue;
      de.push_back(r.defender_error_pct);
      kl.push_back(r.kl_to_float);
      if (r.adversary_error_pct) ae.push_back(*r.adversary_error_pct);
      if (r.disagreement_pct) da.push_back(*r.disagreement_pct);
      if (r.mean_l1) m1.push_back(*r.mean_l1);
      if (r.max_l1) x1.push_back(*r.max_l1);
      if (r.defense_param) dp.push_back(*r.defense_param);
      if (r.query_count) qc.push_back(static_cast<double>(*r.query_count));
    }
    if (de.empty()) {
      agg.error = "all seeds failed";
    } else {
      agg.defender_error_pct = median_of(de);
      agg.kl_to_float = median_of(kl);
      if (!ae.empty()) agg.adversary_error_pct = median_of(ae);
      if (!da.empty()) agg.disagreement_pct = median_of(da);
      if (!m1.empty()) agg.mean_l1 = median_of(m1);
      if (!x1.empty()) agg.max_l1 = median_of(x1);
      if (!dp.empty()) agg.defense_param = median_of(dp);
      if (!qc.empty()) agg.query_count = static_cast<int64_t>(median_of(qc));
    }
    out.push_back(std::move(agg));
  }
  return out;
}

MetricsReport row_from_json(const json& j) {
  if (!j.is_object()) throw ParseError("report: record is not a JSON object");
  try {
    MetricsReport r;
    r.cell = j.at("cell").get<std::string>();
    r.method = j.at("method").get<std::string>();
    if (!j.at("alpha").is_null()) r.alpha = j.at("alpha").get<double>();
    r.seed = j.at("seed").get<int>();
    r.defender_error_pct = j.at("defender_error_pct").get<double>();
    if (!j.at("adversary_error_pct").is_null())
      r.adversary_error_pct = j.at("adversary_error_pct").get<double>();
    if (!j.at("disagreement_pct").is_null())
      r.disagreement_pct = j.at("disagreement_pct").get<double>();
    if (!j.at("mean_l1").is_null()) r.mean_l1 = j.at("mean_l1").get<double>();
    if (!j.at("max_l1").is_null()) r.max_l1 = j.at("max_l1").get<double>();
    r.defense_kind = j.at("defense_kind").get<std::string>();
    if (!j.at("defense_param").is_null()) r.defense_param = j.at("defense_param").get<double>();
    if (!j.at("query_count").is_null()) r.query_count = j.at("query_count").get<int64_t>();
    r.kl_to_float = j.at("kl_to_float").get<double>();
    if (!j.at("error").is_null()) r.error = j.at("error").get<std::string>();
    return r;
  } catch (const json::exception& e) {
    throw ParseError(std::string("report: missing or mistyped field: ") + e.what());
  }
}

}  // namespace

std::string report_csv(const std::vector<MetricsReport>& rows) {
  std::string out = kCsvHeader;
  out += '\n';
  for (const auto& r : rows) csv_row(out, r, std::to_string(r.seed));
  for (const auto& a : aggregate_rows(rows)) csv_row(out, a, "median");
  return out;
}

namespace {

/// Quote-aware split of one CSV record. ParseError on an unterminated quote.
std::vector<std::string> split_csv_record(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  for (size_t i = 0; i < line.size(); ++i) {
    const char ch = line[i];
    if (quoted) {
      if (ch == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur.push_back('"');
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cur.push_back(ch);
      }
    } else if (ch == '"') {
      quoted = true;
    } else if (ch == ',') {
      fields.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(ch);
    }
  }
  if (quoted) throw ParseError("report csv: unterminated quote");
  fields.push_back(std::move(cur));
  return fields;
}

double csv_num(const std::string& s, const char* what) {
  size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    throw ParseError(std::string("report csv: bad ") + what + " value '" + s + "'");
  }
  if (used != s.size())
    throw ParseError(std::string("report csv: bad ") + what + " value '" + s + "'");
  return v;
}

std::optional<double> csv_opt(const std::string& s, const char* what) {
  if (s.empty()) return std::nullopt;
  return csv_num(s, what);
}

}  // namespace

std::vector<MetricsReport> reports_from_csv_text(const std::string& text) {
  std::vector<std::string> lines;
  std::string cur;
  for (char ch : text) {
    if (ch == '\n') {
      lines.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(ch);
    }
  }
  if (!cur.empty()) lines.push_back(std::move(cur));
  if (lines.empty() || lines[0] != kCsvHeader)
    throw ParseError("report csv: missing or unexpected header");

  std::vector<MetricsReport> rows;
  for (size_t li = 1; li < lines.size(); ++li) {
    if (lines[li].empty()) continue;
    const auto f = split_csv_record(lines[li]);
    if (f.size() != 14)
      throw ParseError("report csv: row " + std::to_string(li) + " has " +
                       std::to_string(f.size()) + " fields, expected 14");
    if (f[3] == "median") continue;  // aggregate rows are derived, not data
    MetricsReport r;
    r.cell = f[0];
    r.method = f[1];
    r.alpha = csv_opt(f[2], "alpha");
    r.seed = static_cast<int>(csv_num(f[3], "seed"));
    r.defender_error_pct = csv_num(f[4], "defender_error_pct");
    r.adversary_error_pct = csv_opt(f[5], "adversary_error_pct");
    r.disagreement_pct = csv_opt(f[6], "disagreement_pct");
    r.mean_l1 = csv_opt(f[7], "mean_l1");
    r.max_l1 = csv_opt(f[8], "max_l1");
    r.defense_kind = f[9];
    r.defense_param = csv_opt(f[10], "defense_param");
    if (!f[11].empty()) r.query_count = static_cast<int64_t>(csv_num(f[11], "query_count"));
    r.kl_to_float = csv_num(f[12], "kl_to_float");
    r.error = f[13];
    rows.push_back(std::move(r));
  }
  return rows;
}

std::string report_json(const std::vector<MetricsReport>& rows) {
  json j;
  j["rows"] = json::array();
  for (const auto& r : rows) j["rows"].push_back(row_to_json(r));
  j["aggregates"] = json::array();
  for (const auto& a : aggregate_rows(rows)) {
    json aj = row_to_json(a);
    aj["seed"] = "median";
    j["aggregates"].push_back(std::move(aj));
  }
  return j.dump(2) + "\n";
}

std::string sweep_series_json(const std::vector<SweepPoint>& series) {
  json alpha = json::array(), de = json::array(), ae = json::array(), da = json::array(),
       kl = json::array();
  for (const auto& p : series) {
    alpha.push_back(p.alpha);
    de.push_back(p.defender_error_pct);
    ae.push_back(p.adversary_error_pct ? json(*p.adversary_error_pct) : json(nullptr));
    da.push_back(p.disagreement_pct ? json(*p.disagreement_pct) : json(nullptr));
    kl.push_back(p.final_kl);
  }
  json j;
  j["alpha"] = std::move(alpha);
  j["defender_error_pct"] = std::move(de);
  j["adversary_error_pct"] = std::move(ae);
  j["disagreement_pct"] = std::move(da);
  j["final_kl"] = std::move(kl);
  return j.dump(2) + "\n";
}

void emit_report(const std::vector<MetricsReport>& rows, const std::string& format,
                 const std::string& path) {
  if (format == "csv") {
    write_text_file(path, report_csv(rows));
  } else if (format == "json") {
    write_text_file(path, report_json(rows));
  } else {
    throw ConfigError("report format must be csv or json");
  }
}

std::vector<MetricsReport> collect_reports(const std::string& out_dir) {
  if (!fs::is_directory(out_dir)) throw UsageError("not a directory: " + out_dir);
  std::vector<fs::path> files;
  for (const auto& cell : fs::directory_iterator(out_dir)) {
    if (!cell.is_directory()) continue;
    for (const auto& seed : fs::directory_iterator(cell.path())) {
      if (!seed.is_directory()) continue;
      const fs::path p = seed.path() / "report.json";
      if (fs::is_regular_file(p)) files.push_back(p);
    }
  }
  std::sort(files.begin(), files.end());
  std::vector<MetricsReport> rows;
  rows.reserve(files.size());
  for (const auto& p : files) rows.push_back(report_from_json_text(read_text_file(p.string())));
  return rows;
}

MetricsReport report_from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ParseError(std::string("report: invalid JSON: ") + e.what());
  }
  return row_from_json(j);
}

}  // namespace divqat
