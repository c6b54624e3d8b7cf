// SPDX-License-Identifier: Apache-2.0
#include "divqat/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "divqat/errors.hpp"
#include "divqat/losses.hpp"

namespace divqat {

void DivQatConfig::validate() const {
  if (alpha < 0.0) throw ConfigError("divqat: alpha must be nonnegative");
  if (epochs < 1) throw ConfigError("divqat: epochs must be positive");
  if (batch_size < 1) throw ConfigError("divqat: batch_size must be positive");
  if (!(observer_freeze_frac >= 0.0 && observer_freeze_frac <= 1.0))
    throw ConfigError("divqat: observer_freeze_frac must lie in [0,1]");
  optimizer.validate();
}

int argmax_row(const float* row, int64_t width) {
  int best = 0;
  for (int64_t i = 1; i < width; ++i)
    if (row[i] > row[best]) best = static_cast<int>(i);
  return best;
}

double error_rate(const Model& m, const Dataset& data, int batch_size) {
  const int64_t n = data.size();
  if (n == 0) throw UsageError("error_rate: empty dataset");
  const int64_t w = row_width(data.inputs);
  int64_t wrong = 0;
  for (int64_t start = 0; start < n; start += batch_size) {
    const int64_t stop = std::min<int64_t>(start + batch_size, n);
    std::vector<int> shape = data.inputs.shape();
    shape[0] = static_cast<int>(stop - start);
    Tensor batch(shape);
    std::copy(data.inputs.data() + start * w, data.inputs.data() + stop * w, batch.data());
    const Tensor logits = m.logits(batch);
    const int64_t k = row_width(logits);
    for (int64_t r = 0; r < stop - start; ++r)
      if (argmax_row(logits.data() + r * k, k) != data.labels[static_cast<size_t>(start + r)])
        ++wrong;
  }
  return static_cast<double>(wrong) / static_cast<double>(n);
}

namespace {

std::string format_stats_line(const EpochStats& s) {
  char buf[320];
  std::snprintf(buf, sizeof buf,
                "{\"epoch\":%d,\"ce\":%.17g,\"kl\":%.17g,\"lr\":%.17g,"
                "\"train_err\":%.17g,\"eval_err\":%.17g}\n",
                s.epoch, s.ce, s.kl, s.lr, s.train_err, s.eval_err);
  return buf;
}

/// Shared loop. `teacher` null (or alpha 0) trains on cross-entropy
/// alone and records kl = 0; these cases must stay on one code path so
/// the alpha=0 reduction is bit-exact.
TrainHistory train_loop(Model& m, const Model* teacher, const SplitDataset& data,
                        const DivQatConfig& cfg, Rng& rng) {
  cfg.validate();
  if (teacher && teacher->num_classes != m.num_classes)
    throw ConfigError("divqat: reference model classifies " +
                      std::to_string(teacher->num_classes) + " classes, student " +
                      std::to_string(m.num_classes));
  const bool use_kl = teacher != nullptr && cfg.alpha > 0.0;
  const int64_t n = data.train.size();
  if (n == 0) throw UsageError("train: empty training set");
  const int64_t steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  const int64_t total_steps = steps_per_epoch * cfg.epochs;

  SgdConfig opt_cfg = cfg.optimizer;
  if (cfg.cosine) opt_cfg.cosine = CosineSchedule{opt_cfg.lr, total_steps};
  std::vector<Parameter*> trainable;
  for (auto& p : m.params) trainable.push_back(&p);
  SgdOptimizer opt(trainable, opt_cfg);

  const bool has_observers = [&m] {
    for (const auto& L : m.layers)
      if (L.act.present && !L.act.frozen) return true;
    return false;
  }();
  const int64_t freeze_step =
      std::max<int64_t>(1, static_cast<int64_t>(cfg.observer_freeze_frac *
                                                static_cast<double>(total_steps)));

  const int64_t w = row_width(data.train.inputs);
  TrainHistory hist;
  m.set_train(true);
  int64_t step = 0;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto perm = rng.permutation(n);
    double ce_sum = 0.0, kl_sum = 0.0;
    int64_t batches = 0, wrong = 0;
    for (int64_t start = 0; start < n; start += cfg.batch_size) {
      const int64_t stop = std::min<int64_t>(start + cfg.batch_size, n);
      const int64_t bs = stop - start;
      std::vector<int> shape = data.train.inputs.shape();
      shape[0] = static_cast<int>(bs);
      Tensor batch(shape);
      std::vector<int> labels(static_cast<size_t>(bs));
      for (int64_t i = 0; i < bs; ++i) {
        const int64_t src = perm[static_cast<size_t>(start + i)];
        std::copy(data.train.inputs.data() + src * w, data.train.inputs.data() + (src + 1) * w,
                  batch.data() + i * w);
        labels[static_cast<size_t>(i)] = data.train.labels[static_cast<size_t>(src)];
      }

      Tape t;
      const TensorId x = t.constant(std::move(batch));
      const TensorId logits = m.forward(t, x);
      const Tensor& z = t.value(logits);
      const int64_t k = row_width(z);
      for (int64_t r = 0; r < bs; ++r)
        if (argmax_row(z.data() + r * k, k) != labels[static_cast<size_t>(r)]) ++wrong;

      const TensorId ce = ce_from_logits(t, logits, labels);
      TensorId loss = ce;
      if (use_kl) {
        const Tensor teacher_logits = teacher->logits(t.value(x));
        const TensorId kl = kl_from_logits(t, logits, t.constant(teacher_logits));
        kl_sum += t.scalar_value(kl);
        loss = t.add_scaled(ce, kl, static_cast<float>(-cfg.alpha));
      }
      ce_sum += t.scalar_value(ce);
      ++batches;

      m.zero_grad();
      t.backward(loss);
      opt.step();
      ++step;
      if (has_observers && step == freeze_step) freeze_observers(m);
    }

    EpochStats s;
    s.epoch = epoch;
    s.ce = ce_sum / static_cast<double>(batches);
    s.kl = use_kl ? kl_sum / static_cast<double>(batches) : 0.0;
    s.lr = opt.lr_at(step - 1);
    s.train_err = static_cast<double>(wrong) / static_cast<double>(n);
    m.set_train(false);
    s.eval_err = error_rate(m, data.test);
    m.set_train(true);
    s.param_checksum = m.param_checksum();
    hist.epochs.push_back(s);
  }
  m.set_train(false);
  return hist;
}

}  // namespace

TrainHistory train_model(Model& m, const SplitDataset& data, const DivQatConfig& cfg, Rng& rng) {
  return train_loop(m, nullptr, data, cfg, rng);
}

TrainHistory train_qat(Model& m, const SplitDataset& data, const DivQatConfig& cfg, Rng& rng) {
  if (!m.quantized)
    throw UsageError("train_qat: model has no fake-quant sites; call prepare_qat first");
  return train_loop(m, nullptr, data, cfg, rng);
}

TrainHistory train_divqat(Model& m, const Model& large, const SplitDataset& data,
                          const DivQatConfig& cfg, Rng& rng) {
  return train_loop(m, cfg.alpha > 0.0 ? &large : nullptr, data, cfg, rng);
}

std::string history_jsonl(const TrainHistory& h) {
  std::string out;
  for (const auto& s : h.epochs) out += format_stats_line(s);
  return out;
}

void write_history_jsonl(const TrainHistory& h, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw UsageError("history: cannot write '" + path + "'");
  const std::string s = history_jsonl(h);
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

double mean_kl_between(const Model& m, const Model& reference, const Tensor& inputs,
                       int batch_size) {
  const int64_t n = batch_rows(inputs);
  if (n == 0) throw UsageError("mean_kl_between: empty input");
  const int64_t w = row_width(inputs);
  double total = 0.0;
  for (int64_t start = 0; start < n; start += batch_size) {
    const int64_t stop = std::min<int64_t>(start + batch_size, n);
    std::vector<int> shape = inputs.shape();
    shape[0] = static_cast<int>(stop - start);
    Tensor batch(shape);
    std::copy(inputs.data() + start * w, inputs.data() + stop * w, batch.data());
    const Tensor pq = softmax(m.logits(batch));
    const Tensor pl = softmax(reference.logits(batch));
    total += kl_divergence(pq, pl) * static_cast<double>(stop - start);
  }
  return total / static_cast<double>(n);
}

}  // namespace divqat
