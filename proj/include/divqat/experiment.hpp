// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "divqat/attacks.hpp"
#include "divqat/datasets.hpp"
#include "divqat/defenses.hpp"
#include "divqat/nn.hpp"
#include "divqat/quant.hpp"
#include "divqat/train.hpp"

namespace divqat {

enum class QuantMethod { Large, Ptq, Qat, DivQat };

std::string quant_method_name(QuantMethod m);

/// One experiment cell: a quantization method, with its alpha when the
/// method is DivQat.
struct MethodCell {
  QuantMethod method = QuantMethod::Qat;
  double alpha = 0.0;

  std::string cell_id() const;
};

enum class AttackKind { None, Knockoff, Datafree };

struct AttackSpec {
  AttackKind kind = AttackKind::None;
  int64_t budget = 5000;
  std::string student_arch = "mlp";
  // knockoff
  DistributionRelation relation{Relation::OutOfDistribution, 2.0};
  int epochs = 8;
  // datafree
  DatafreeConfig datafree;
};

/// Declarative description of a full run: task, victim, quantization
/// cells, defense, attack, seeds. Parsed from strict JSON (required
/// `version`, unknown fields rejected at every level).
struct ExperimentConfig {
  std::string name = "experiment";
  std::string out_dir = "runs";
  uint64_t master_seed = 1;
  std::vector<int> seeds = {1, 2, 3};
  int jobs = 1;

  TaskSpec task;
  std::string victim_arch = "miniconv";
  QuantSpec quant;
  DivQatConfig train;     // float victim training
  DivQatConfig finetune;  // quantized fine-tuning (qat / divqat cells)
  std::vector<MethodCell> cells;
  DefenseKind defense_kind = DefenseKind::None;
  double defense_budget = 0.6;
  AttackSpec attack;

  void validate() const;

  static ExperimentConfig from_json_text(const std::string& text);
  static ExperimentConfig from_json_file(const std::string& path);
};

/// One evaluation record per (cell, seed). Optional fields stay empty
/// when the phase that produces them is disabled (attack none, defense
/// none). `wall_clock_seconds` is measured but never emitted: report
/// bytes must be identical across reruns of the same (config, seed).
struct MetricsReport {
  std::string cell;
  std::string method;
  std::optional<double> alpha;
  int seed = 0;
  double defender_error_pct = 0.0;
  std::optional<double> adversary_error_pct;
  std::optional<double> disagreement_pct;
  std::optional<double> mean_l1;
  std::optional<double> max_l1;
  std::string defense_kind = "none";
  std::optional<double> defense_param;
  std::optional<int64_t> query_count;
  double kl_to_float = 0.0;
  std::string error;  // nonempty marks a failed cell; other cells continue
  double wall_clock_seconds = 0.0;

  void check_ranges() const;  // UsageError when a percentage or ell-1 leaves its range
};

/// Runs every (cell, seed) of the config: train victim, quantize,
/// calibrate the defense to its ell-1 budget, attack, evaluate. Artifacts
/// land under <out>/<cell>/<seed>/{checkpoints,history.jsonl,report.json}.
/// Randomness derives from (master seed, phase, seed) so a deleted cell
/// re-runs to byte-identical artifacts; phase streams are shared across
/// cells so matched methods (qat vs divqat) see identical draws.
std::vector<MetricsReport> run_experiment(const ExperimentConfig& cfg);

struct AlphaSelection {
  double alpha = 0.0;
  double mean_l1 = 0.0;  // against the plain-QAT reference predictions
};

/// Largest grid alpha whose model stays within `budget` mean ell-1 of
/// the plain-QAT reference on held-out inputs. CalibrationError when no
/// grid point is feasible.
AlphaSelection select_alpha_by_budget(const std::vector<double>& grid,
                                      const std::vector<const Model*>& divqat_models,
                                      const Model& qat_reference, const Tensor& heldout,
                                      double budget);

struct SweepPoint {
  double alpha = 0.0;
  double defender_error_pct = 0.0;
  std::optional<double> adversary_error_pct;
  std::optional<double> disagreement_pct;
  double final_kl = 0.0;
};

struct SweepResult {
  std::vector<MetricsReport> reports;      // every (alpha, seed)
  std::vector<SweepPoint> series;          // per alpha, median over seeds
};

/// run_experiment over divqat cells only, one per grid alpha, plus the
/// plot-ready median series. UsageError on an empty grid.
SweepResult sweep_alpha(const ExperimentConfig& cfg, const std::vector<double>& grid);

/// Stable column order, one row per (cell, seed) in input order, then a
/// median-aggregate row per cell (seed column "median"). Deterministic
/// bytes for deterministic inputs; %.17g so values round-trip exactly.
std::string report_csv(const std::vector<MetricsReport>& rows);
std::string report_json(const std::vector<MetricsReport>& rows);
std::string sweep_series_json(const std::vector<SweepPoint>& series);

void emit_report(const std::vector<MetricsReport>& rows, const std::string& format,
                 const std::string& path);

/// Reads every <out>/<cell>/<seed>/report.json under a run directory,
/// in lexicographic order. ParseError on malformed records.
std::vector<MetricsReport> collect_reports(const std::string& out_dir);

/// Median with the usual even-count mean-of-middle-two convention.
double median_of(std::vector<double> v);

MetricsReport report_from_json_text(const std::string& text);

/// Inverse of report_csv for the per-seed rows; aggregate rows (seed
/// column "median") are skipped. ParseError on a header or field
/// mismatch. Numeric fields round-trip exactly.
std::vector<MetricsReport> reports_from_csv_text(const std::string& text);

}  // namespace divqat
