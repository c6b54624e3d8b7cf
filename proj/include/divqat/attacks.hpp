// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "divqat/datasets.hpp"
#include "divqat/defenses.hpp"
#include "divqat/nn.hpp"
#include "divqat/optim.hpp"
#include "divqat/rng.hpp"
#include "divqat/train.hpp"

namespace divqat {

struct AttackBudget {
  int64_t max_queries = 5000;
  void validate() const;  // nonnegative (0 models a query-less adversary)
};

/// Black-box soft-label serving interface. The only path from attack
/// code to the victim: exposes predictions, class count, and input
/// shape, never parameters or gradients. Every query batch is counted
/// up front; a batch that would cross the budget throws
/// BudgetExhaustedError before anything is served or counted.
class VictimOracle {
public:
  /// budget < 0 means unlimited.
  VictimOracle(Model victim, DefenseConfig defense, uint64_t seed, int64_t budget = -1);

  /// Defended probability rows for a batch of inputs.
  Tensor query(const Tensor& inputs);

  int64_t query_count() const { return count_; }
  int64_t budget() const { return budget_; }
  int64_t remaining() const;
  int num_classes() const { return victim_.num_classes; }
  const std::vector<int>& input_shape() const { return victim_.input_shape; }

private:
  Model victim_;
  DefenseConfig defense_;
  Rng rng_;
  int64_t count_ = 0;
  int64_t budget_ = -1;
};

/// Attacker's dataset: queried inputs with the victim's (defended)
/// probability rows, in query order.
struct TransferSet {
  Tensor inputs;
  Tensor soft_labels;  // [N, K]

  int64_t size() const { return batch_rows(inputs); }
};

void save_transfer_set(const std::string& path, const TransferSet& ts);
TransferSet load_transfer_set(const std::string& path);

struct KnockoffResult {
  Model student;
  TrainHistory history;
  TransferSet transfer;
};

/// Labels up to budget.max_queries surrogate inputs through the oracle,
/// then distills the student on the full soft-label rows (soft
/// cross-entropy). An oracle-side budget stop keeps the prefix already
/// collected; an empty transfer set returns the untrained student.
KnockoffResult knockoff_attack(VictimOracle& oracle, const Tensor& surrogate_inputs,
                               const std::string& student_arch, const AttackBudget& budget,
                               const DivQatConfig& train_cfg, Rng& rng);

struct DatafreeConfig {
  int rounds = 30;
  int gen_batch = 16;
  int student_steps_per_round = 4;
  int student_batch = 32;
  int latent_dim = 16;
  float gen_lr = 0.05f;
  float spsa_h = 0.02f;
  int final_epochs = 2;  // replay-buffer passes after the query loop
  SgdConfig student_opt{0.01f, 0.9f, 5e-4f, true, std::nullopt};

  void validate() const;
};

struct DatafreeResult {
  Model student;
  Model generator;
  TrainHistory history;  // one record per round: kl, disagreement
  bool truncated = false;
  int64_t queries_spent = 0;
};

/// Generator-driven extraction without data. Each round spends
/// 4 * gen_batch queries probing two random parameter directions of the
/// generator (central differences on the student-victim ell-1 gap,
/// normalized ascent step), then student_steps_per_round KL steps on
/// freshly generated, oracle-labeled batches. All probe and training
/// queries are charged; running out of budget sets `truncated` and
/// returns the current student. Queried pairs feed a replay buffer
/// replayed for final_epochs at the end.
DatafreeResult datafree_attack(VictimOracle& oracle, const std::string& student_arch,
                               const AttackBudget& budget, const DatafreeConfig& cfg,
                               Rng& rng);

struct ExtractionMetrics {
  double adversary_error_pct = 0.0;  // student top-1 error on true labels
  double disagreement_pct = 0.0;     // student argmax != victim argmax
};

/// Scores a stolen model against the undefended victim on labeled test
/// data. UsageError on an empty test set.
ExtractionMetrics evaluate_extraction(const Model& victim, const Model& student,
                                      const Dataset& test_set);

}  // namespace divqat
