// SPDX-License-Identifier: Apache-2.0
#include "divqat/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <utility>

#include "divqat/errors.hpp"
#include "divqat/losses.hpp"

namespace divqat {

namespace {

std::vector<int> with_rows(const std::vector<int>& sample_shape, int64_t n) {
  std::vector<int> s;
  s.reserve(sample_shape.size() + 1);
  s.push_back(static_cast<int>(n));
  s.insert(s.end(), sample_shape.begin(), sample_shape.end());
  return s;
}

void check_sample_shape(const Tensor& batch, const std::vector<int>& sample_shape,
                        const char* who) {
  const auto& s = batch.shape();
  bool ok = s.size() == sample_shape.size() + 1;
  for (size_t i = 0; ok && i < sample_shape.size(); ++i) ok = s[i + 1] == sample_shape[i];
  if (!ok)
    throw UsageError(std::string(who) + ": input shape " + batch.shape_str() +
                     " does not match the victim's per-sample shape");
}

Tensor slice_rows(const Tensor& t, int64_t start, int64_t count) {
  const int64_t w = row_width(t);
  std::vector<int> shape = t.shape();
  shape[0] = static_cast<int>(count);
  Tensor out(std::move(shape));
  std::copy_n(t.data() + start * w, count * w, out.data());
  return out;
}

}  // namespace

void AttackBudget::validate() const {
  if (max_queries < 0) throw ConfigError("attack budget: max_queries must be nonnegative");
}

VictimOracle::VictimOracle(Model victim, DefenseConfig defense, uint64_t seed, int64_t budget)
    : victim_(std::move(victim)),
      defense_(std::move(defense)),
      rng_(Rng::derive(seed, "victim-oracle")),
      budget_(budget) {
  victim_.set_train(false);
  defense_.validate(victim_.num_classes);
}

Tensor VictimOracle::query(const Tensor& inputs) {
  const int64_t b = batch_rows(inputs);
  if (b == 0) throw UsageError("oracle query: empty batch");
  check_sample_shape(inputs, victim_.input_shape, "oracle query");
  if (budget_ >= 0 && count_ + b > budget_) {
    char msg[160];
    std::snprintf(msg, sizeof msg,
                  "query budget exhausted: %lld served, batch of %lld exceeds limit %lld",
                  static_cast<long long>(count_), static_cast<long long>(b),
                  static_cast<long long>(budget_));
    throw BudgetExhaustedError(msg);
  }
  Tensor probs = victim_.predict_proba(inputs);
  Tensor out = apply_defense(probs, defense_, &rng_);
  count_ += b;
  return out;
}

int64_t VictimOracle::remaining() const {
  return budget_ < 0 ? std::numeric_limits<int64_t>::max() : budget_ - count_;
}

void save_transfer_set(const std::string& path, const TransferSet& ts) {
  Container c;
  c.kind = ContainerKind::SoftLabeled;
  c.inputs = ts.inputs;
  c.soft_labels = ts.soft_labels;
  c.num_classes = ts.soft_labels.rank() == 2 ? ts.soft_labels.dim(1) : 0;
  save_container(path, c);
}

TransferSet load_transfer_set(const std::string& path) {
  Container c = load_container(path);
  if (c.kind != ContainerKind::SoftLabeled)
    throw ParseError("transfer set: container is not soft-labeled");
  return TransferSet{std::move(c.inputs), std::move(c.soft_labels)};
}

namespace {

/// Distills `student` on soft rows with SGD; mirrors the supervised
/// trainer's bookkeeping so histories are comparable.
TrainHistory distill_on_transfer(Model& student, const TransferSet& ts,
                                 const DivQatConfig& cfg, Rng& rng) {
  const int64_t n = ts.size();
  const int K = ts.soft_labels.dim(1);
  std::vector<int> hard(static_cast<size_t>(n));
  for (int64_t r = 0; r < n; ++r)
    hard[static_cast<size_t>(r)] = argmax_row(ts.soft_labels.data() + r * K, K);

  const int64_t bs = cfg.batch_size;
  const int64_t steps_per_epoch = (n + bs - 1) / bs;
  SgdConfig opt_cfg = cfg.optimizer;
  if (cfg.cosine)
    opt_cfg.cosine = CosineSchedule{opt_cfg.lr, steps_per_epoch * cfg.epochs};
  std::vector<Parameter*> ps;
  ps.reserve(student.params.size());
  for (auto& p : student.params) ps.push_back(&p);
  SgdOptimizer opt(std::move(ps), opt_cfg);

  Dataset eval_view{ts.inputs, hard, K};
  TrainHistory hist;
  student.set_train(true);
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto perm = rng.permutation(n);
    double ce_sum = 0.0;
    int64_t wrong = 0;
    for (int64_t start = 0; start < n; start += bs) {
      const int64_t take = std::min(bs, n - start);
      std::vector<int64_t> idx(perm.begin() + start, perm.begin() + start + take);
      Tensor bx = gather_rows(ts.inputs, idx);
      Tensor bt = gather_rows(ts.soft_labels, idx);

      Tape t;
      TensorId logits = student.forward(t, t.constant(std::move(bx)));
      TensorId loss = soft_ce_from_logits(t, logits, bt);
      student.zero_grad();
      t.backward(loss);
      opt.step();

      ce_sum += static_cast<double>(t.scalar_value(loss)) * static_cast<double>(take);
      const Tensor& lv = t.value(logits);
      for (int64_t r = 0; r < take; ++r)
        if (argmax_row(lv.data() + r * K, K) != argmax_row(bt.data() + r * K, K)) ++wrong;
    }
    student.set_train(false);
    EpochStats st;
    st.epoch = epoch;
    st.ce = ce_sum / static_cast<double>(n);
    st.kl = 0.0;
    st.lr = static_cast<double>(opt.lr_at(opt.steps_taken() - 1));
    st.train_err = static_cast<double>(wrong) / static_cast<double>(n);
    st.eval_err = error_rate(student, eval_view);
    st.param_checksum = student.param_checksum();
    hist.epochs.push_back(st);
    student.set_train(true);
  }
  student.set_train(false);
  return hist;
}

}  // namespace

KnockoffResult knockoff_attack(VictimOracle& oracle, const Tensor& surrogate_inputs,
                               const std::string& student_arch, const AttackBudget& budget,
                               const DivQatConfig& train_cfg, Rng& rng) {
  budget.validate();
  train_cfg.validate();
  const auto& shape = oracle.input_shape();
  if (batch_rows(surrogate_inputs) > 0)
    check_sample_shape(surrogate_inputs, shape, "knockoff");

  const int64_t avail = batch_rows(surrogate_inputs);
  const int64_t want = std::min<int64_t>(budget.max_queries, avail);
  const int K = oracle.num_classes();
  const int64_t chunk = std::max<int64_t>(1, train_cfg.batch_size);

  std::vector<float> xs, ys;
  int64_t got = 0;
  while (got < want) {
    const int64_t take = std::min(chunk, want - got);
    Tensor batch = slice_rows(surrogate_inputs, got, take);
    Tensor soft;
    try {
      soft = oracle.query(batch);
    } catch (const BudgetExhaustedError&) {
      break;  // keep the prefix already collected
    }
    xs.insert(xs.end(), batch.values().begin(), batch.values().end());
    ys.insert(ys.end(), soft.values().begin(), soft.values().end());
    got += take;
  }

  KnockoffResult res{make_model(student_arch, shape, K, rng),
                     TrainHistory{},
                     TransferSet{Tensor(with_rows(shape, got), std::move(xs)),
                                 Tensor({static_cast<int>(got), K}, std::move(ys))}};
  res.student.set_train(false);
  if (got == 0) return res;  // nothing to learn from

  res.history = distill_on_transfer(res.student, res.transfer, train_cfg, rng);
  return res;
}

void DatafreeConfig::validate() const {
  if (rounds < 1) throw ConfigError("datafree: rounds must be >= 1");
  if (gen_batch < 1 || student_batch < 1)
    throw ConfigError("datafree: batch sizes must be >= 1");
  if (student_steps_per_round < 1)
    throw ConfigError("datafree: student_steps_per_round must be >= 1");
  if (latent_dim < 1) throw ConfigError("datafree: latent_dim must be >= 1");
  if (!(gen_lr >= 0.0f) || !(spsa_h > 0.0f))
    throw ConfigError("datafree: gen_lr must be >= 0 and spsa_h > 0");
  if (final_epochs < 0) throw ConfigError("datafree: final_epochs must be >= 0");
  student_opt.validate();
}

DatafreeResult datafree_attack(VictimOracle& oracle, const std::string& student_arch,
                               const AttackBudget& budget, const DatafreeConfig& cfg,
                               Rng& rng) {
  budget.validate();
  cfg.validate();
  const std::vector<int> shape = oracle.input_shape();
  const int K = oracle.num_classes();
  int64_t flat = 1;
  for (int d : shape) flat *= d;

  Rng gen_rng = rng.fork("generator-init");
  Rng stu_rng = rng.fork("student-init");
  DatafreeResult res;
  res.generator = make_generator(cfg.latent_dim, static_cast<int>(flat), gen_rng);
  res.student = make_model(student_arch, shape, K, stu_rng);
  const int64_t count_at_start = oracle.query_count();

  std::vector<Parameter*> sps;
  for (auto& p : res.student.params) sps.push_back(&p);
  SgdOptimizer sopt(std::move(sps), cfg.student_opt);

  const int64_t gen_dim = res.generator.param_count();

  auto sample_latent = [&](int n) {
    Tensor z({n, cfg.latent_dim});
    for (int64_t i = 0; i < z.numel(); ++i) z[i] = static_cast<float>(rng.normal());
    return z;
  };
  auto generate = [&](const Tensor& z) {
    return res.generator.logits(z).reshaped(with_rows(shape, batch_rows(z)));
  };
  auto add_flat = [&](const std::vector<float>& dir, float h) {
    int64_t off = 0;
    for (auto& p : res.generator.params)
      for (auto& v : p.value.values()) v += h * dir[static_cast<size_t>(off++)];
  };
  // Student-victim ell-1 gap on a generated batch; one charged query.
  auto gap = [&](const Tensor& x) {
    Tensor v = oracle.query(x);
    return mean_row_l1(res.student.predict_proba(x), v);
  };
  // One KL descent step on (x, defended victim rows); returns batch KL
  // and the disagreement count. log(v) stands in for reference logits:
  // softmax recovers v exactly since rows are normalized.
  auto student_step = [&](const Tensor& x, const Tensor& v, int64_t* wrong) {
    Tensor ref(v.shape());
    for (int64_t i = 0; i < v.numel(); ++i)
      ref[i] = std::log(std::max(v[i], kEpsilonFloor));
    Tape t;
    TensorId logits = res.student.forward(t, t.constant(x));
    TensorId kl = kl_from_logits(t, logits, t.constant(std::move(ref)));
    res.student.zero_grad();
    t.backward(kl);
    sopt.step();
    if (wrong) {
      const Tensor& lv = t.value(logits);
      for (int64_t r = 0; r < batch_rows(x); ++r)
        if (argmax_row(lv.data() + r * K, K) != argmax_row(v.data() + r * K, K)) ++*wrong;
    }
    return static_cast<double>(t.scalar_value(kl));
  };

  std::vector<float> buf_x, buf_v;
  int64_t buf_rows = 0;
  const int64_t probe_cost = 4LL * cfg.gen_batch;
  // Queries left for this attack: the tighter of the oracle's own budget
  // and the attack's allowance.
  auto left = [&]() {
    const int64_t spent = oracle.query_count() - count_at_start;
    return std::min(oracle.remaining(), budget.max_queries - spent);
  };
  res.student.set_train(true);

  for (int round = 1; round <= cfg.rounds && !res.truncated; ++round) {
    if (left() < probe_cost) {
      res.truncated = true;
      break;
    }
    // Two-direction central-difference probe of the generator, common
    // latent batch across all four evaluations.
    const Tensor z = sample_latent(cfg.gen_batch);
    std::vector<float> g(static_cast<size_t>(gen_dim), 0.0f);
    for (int d = 0; d < 2; ++d) {
      std::vector<float> u(static_cast<size_t>(gen_dim));
      double norm2 = 0.0;
      for (auto& ui : u) {
        ui = static_cast<float>(rng.normal());
        norm2 += static_cast<double>(ui) * ui;
      }
      const float inv = static_cast<float>(1.0 / std::sqrt(std::max(norm2, 1e-30)));
      for (auto& ui : u) ui *= inv;

      add_flat(u, cfg.spsa_h);
      const double jp = gap(generate(z));
      add_flat(u, -2.0f * cfg.spsa_h);
      const double jm = gap(generate(z));
      add_flat(u, cfg.spsa_h);  // back to the base point

      const float slope = static_cast<float>((jp - jm) / (2.0 * cfg.spsa_h));
      for (int64_t i = 0; i < gen_dim; ++i)
        g[static_cast<size_t>(i)] += slope * u[static_cast<size_t>(i)];
    }
    double gnorm2 = 0.0;
    for (float gi : g) gnorm2 += static_cast<double>(gi) * gi;
    if (gnorm2 > 1e-24) {
      const float step = static_cast<float>(cfg.gen_lr / std::sqrt(gnorm2));
      add_flat(g, step);  // ascent: widen the gap the student then closes
    }

    double kl_sum = 0.0;
    int64_t wrong = 0, seen = 0;
    int steps_done = 0;
    for (int s = 0; s < cfg.student_steps_per_round; ++s) {
      if (left() < cfg.student_batch) {
        res.truncated = true;
        break;
      }
      Tensor x = generate(sample_latent(cfg.student_batch));
      Tensor v = oracle.query(x);
      buf_x.insert(buf_x.end(), x.values().begin(), x.values().end());
      buf_v.insert(buf_v.end(), v.values().begin(), v.values().end());
      buf_rows += batch_rows(x);
      kl_sum += student_step(x, v, &wrong);
      seen += batch_rows(x);
      ++steps_done;
    }
    if (steps_done > 0) {
      EpochStats st;
      st.epoch = round;
      st.kl = kl_sum / steps_done;
      st.lr = static_cast<double>(sopt.lr_at(sopt.steps_taken() - 1));
      st.train_err = static_cast<double>(wrong) / static_cast<double>(seen);
      st.param_checksum = res.student.param_checksum();
      res.history.epochs.push_back(st);
    }
  }

  // Replay passes spend no queries.
  if (buf_rows > 0 && cfg.final_epochs > 0) {
    Tensor all_x(with_rows(shape, buf_rows), std::move(buf_x));
    Tensor all_v({static_cast<int>(buf_rows), K}, std::move(buf_v));
    for (int e = 1; e <= cfg.final_epochs; ++e) {
      const auto perm = rng.permutation(buf_rows);
      double kl_sum = 0.0;
      int64_t wrong = 0, batches = 0;
      for (int64_t start = 0; start < buf_rows; start += cfg.student_batch) {
        const int64_t take = std::min<int64_t>(cfg.student_batch, buf_rows - start);
        std::vector<int64_t> idx(perm.begin() + start, perm.begin() + start + take);
        kl_sum += student_step(gather_rows(all_x, idx), gather_rows(all_v, idx), &wrong);
        ++batches;
      }
      EpochStats st;
      st.epoch = cfg.rounds + e;
      st.kl = kl_sum / static_cast<double>(batches);
      st.lr = static_cast<double>(sopt.lr_at(sopt.steps_taken() - 1));
      st.train_err = static_cast<double>(wrong) / static_cast<double>(buf_rows);
      st.param_checksum = res.student.param_checksum();
      res.history.epochs.push_back(st);
    }
  }

  res.student.set_train(false);
  res.generator.set_train(false);
  res.queries_spent = oracle.query_count() - count_at_start;
  return res;
}

ExtractionMetrics evaluate_extraction(const Model& victim, const Model& student,
                                      const Dataset& test_set) {
  const int64_t n = test_set.size();
  if (n == 0) throw UsageError("evaluate_extraction: empty test set");
  if (victim.num_classes != student.num_classes)
    throw UsageError("evaluate_extraction: class count mismatch");
  const int K = victim.num_classes;

  int64_t err = 0, dis = 0;
  const int64_t bs = 256;
  for (int64_t start = 0; start < n; start += bs) {
    const int64_t take = std::min(bs, n - start);
    Tensor batch = slice_rows(test_set.inputs, start, take);
    Tensor sl = student.logits(batch);
    Tensor vl = victim.logits(batch);
    for (int64_t r = 0; r < take; ++r) {
      const int sa = argmax_row(sl.data() + r * K, K);
      const int va = argmax_row(vl.data() + r * K, K);
      if (sa != test_set.labels[static_cast<size_t>(start + r)]) ++err;
      if (sa != va) ++dis;
    }
  }
  return ExtractionMetrics{100.0 * static_cast<double>(err) / static_cast<double>(n),
                           100.0 * static_cast<double>(dis) / static_cast<double>(n)};
}

}  // namespace divqat
