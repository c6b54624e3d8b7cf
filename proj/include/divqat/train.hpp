// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "divqat/datasets.hpp"
#include "divqat/nn.hpp"
#include "divqat/optim.hpp"
#include "divqat/rng.hpp"

namespace divqat {

struct DivQatConfig {
  double alpha = 0.0;  // weight on the divergence term; 0 is plain QAT
  int epochs = 10;
  int batch_size = 64;
  SgdConfig optimizer{0.01f, 0.9f, 5e-4f, false, std::nullopt};
  bool cosine = true;  // anneal lr over the full run
  float epsilon_floor = 1e-7f;
  /// Activation observers lock after this fraction of total steps.
  double observer_freeze_frac = 0.2;

  void validate() const;  // ConfigError on alpha<0, epochs<1, batch<1
};

struct EpochStats {
  int epoch = 0;       // 1-based
  double ce = 0.0;     // mean over the epoch's batches
  double kl = 0.0;     // 0 when no divergence term is active
  double lr = 0.0;     // rate used by the epoch's last step
  double train_err = 0.0;
  double eval_err = 0.0;
  uint64_t param_checksum = 0;  // not emitted to history files
};

struct TrainHistory {
  std::vector<EpochStats> epochs;
};

/// One JSON object per epoch with fields epoch, ce, kl, lr, train_err,
/// eval_err; %.17g doubles so identical runs write identical bytes.
void write_history_jsonl(const TrainHistory& h, const std::string& path);
std::string history_jsonl(const TrainHistory& h);

/// Fraction of rows whose argmax prediction mismatches the label.
/// Ties resolve to the lowest class index. Runs in eval mode.
double error_rate(const Model& m, const Dataset& data, int batch_size = 256);

int argmax_row(const float* row, int64_t width);

/// Cross-entropy SGD over shuffled minibatches; works for float and
/// quant-aware models alike (STE through any fake-quant sites).
TrainHistory train_model(Model& m, const SplitDataset& data, const DivQatConfig& cfg, Rng& rng);

/// train_model with the precondition that `m` came from prepare_qat.
TrainHistory train_qat(Model& m, const SplitDataset& data, const DivQatConfig& cfg, Rng& rng);

/// QAT driven by cross-entropy minus alpha times KL(quant || large),
/// the reference model frozen and forwarded without gradients. With
/// alpha == 0 this runs the identical code path as train_qat.
TrainHistory train_divqat(Model& m, const Model& large, const SplitDataset& data,
                          const DivQatConfig& cfg, Rng& rng);

/// Mean KL(softmax(m) || softmax(reference)) over a dataset, eval mode.
double mean_kl_between(const Model& m, const Model& reference, const Tensor& inputs,
                       int batch_size = 256);

}  // namespace divqat
