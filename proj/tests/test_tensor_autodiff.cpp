// SPDX-License-Identifier: Apache-2.0
// Tensor shape accounting, softmax stability, tape forward values, and
// hand-derived backward rules for every primitive op.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstdint>
#include <vector>

#include "divqat/autodiff.hpp"
#include "divqat/errors.hpp"
#include "divqat/optim.hpp"
#include "divqat/rng.hpp"
#include "divqat/tensor.hpp"

using namespace divqat;

namespace {

doctest::Approx near(double v, double eps = 1e-6) {
  return doctest::Approx(v).epsilon(eps).scale(1.0);
}

}  // namespace

TEST_CASE("tensor shape and element accounting") {
  Tensor t({2, 3});
  CHECK(t.rank() == 2);
  CHECK(t.numel() == 6);
  for (int64_t i = 0; i < t.numel(); ++i) CHECK(t[i] == 0.0f);

  Tensor f = Tensor::full({4}, 2.5f);
  CHECK(f[3] == 2.5f);
  CHECK(Tensor::scalar(7.0f).numel() == 1);

  Tensor m({2, 2}, {1.0f, 2.0f, 3.0f, 4.0f});
  CHECK(m.at(1, 0) == 3.0f);
  Tensor r = m.reshaped({4});
  CHECK(r[2] == 3.0f);
  CHECK_THROWS_AS(m.reshaped({3}), UsageError);
  CHECK_THROWS_AS(Tensor({2, 2}, {1.0f}), UsageError);

  // Zero-extent tensors are legal and carry no elements.
  Tensor empty({0, 3});
  CHECK(empty.numel() == 0);
  CHECK(empty.empty());
  CHECK(batch_rows(empty) == 0);
  CHECK(row_width(empty) == 0);

  CHECK(batch_rows(m) == 2);
  CHECK(row_width(m) == 2);
  CHECK(m.shape_str() == "2x2");
}

TEST_CASE("softmax matches closed forms and never overflows") {
  // Uniform logits map to the uniform distribution.
  Tensor u = softmax(Tensor({1, 4}, {3.0f, 3.0f, 3.0f, 3.0f}));
  for (int i = 0; i < 4; ++i) CHECK(u[i] == near(0.25));

  // Logits (ln 1, ln 3) put 3x the mass on the second class.
  Tensor p = softmax(Tensor({1, 2}, {0.0f, std::log(3.0f)}));
  CHECK(p[0] == near(0.25));
  CHECK(p[1] == near(0.75));

  // Max subtraction keeps huge logits finite.
  Tensor big = softmax(Tensor({1, 2}, {1000.0f, 0.0f}));
  CHECK(big.all_finite());
  CHECK(big[0] == near(1.0));
  CHECK(big[1] == near(0.0));

  // Property: rows sum to one and log_softmax agrees with log(softmax).
  Rng rng(123);
  Tensor logits({50, 7});
  for (auto& v : logits.values()) v = rng.uniform_f(-8.0f, 8.0f);
  Tensor sm = softmax(logits);
  Tensor lsm = log_softmax(logits);
  for (int r = 0; r < 50; ++r) {
    double s = 0.0;
    for (int c = 0; c < 7; ++c) {
      s += sm.at(r, c);
      CHECK(lsm.at(r, c) == near(std::log(static_cast<double>(sm.at(r, c))), 1e-4));
    }
    CHECK(s == near(1.0, 1e-6));
  }
}

TEST_CASE("gather_rows picks whole rows in index order") {
  Tensor t({3, 2}, {1.0f, 2.0f, 3.0f, 4.0f, 5.0f, 6.0f});
  Tensor g = gather_rows(t, {2, 0});
  CHECK(g.dim(0) == 2);
  CHECK(g.at(0, 0) == 5.0f);
  CHECK(g.at(0, 1) == 6.0f);
  CHECK(g.at(1, 0) == 1.0f);
}

TEST_CASE("matmul forward matches the hand-computed product") {
  Tape t;
  TensorId x = t.constant(Tensor({1, 2}, {1.0f, 1.0f}));
  TensorId w = t.constant(Tensor({2, 2}, {1.0f, 2.0f, 3.0f, 4.0f}));
  TensorId y = t.matmul(x, w);
  CHECK(t.value(y).at(0, 0) == near(4.0));
  CHECK(t.value(y).at(0, 1) == near(6.0));

  // Identity weight passes the input through unchanged.
  TensorId eye = t.constant(Tensor({2, 2}, {1.0f, 0.0f, 0.0f, 1.0f}));
  TensorId same = t.matmul(x, eye);
  CHECK(t.value(same).at(0, 0) == 1.0f);
  CHECK(t.value(same).at(0, 1) == 1.0f);

  // Property: random [2,3]x[3,4] against a triple loop.
  Rng rng(7);
  Tensor a({2, 3});
  Tensor b({3, 4});
  for (auto& v : a.values()) v = rng.uniform_f(-2.0f, 2.0f);
  for (auto& v : b.values()) v = rng.uniform_f(-2.0f, 2.0f);
  Tape t2;
  const Tensor& prod = t2.value(t2.matmul(t2.constant(a), t2.constant(b)));
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 4; ++j) {
      double acc = 0.0;
      for (int k = 0; k < 3; ++k) acc += static_cast<double>(a.at(i, k)) * b.at(k, j);
      CHECK(prod.at(i, j) == near(acc, 1e-5));
    }
}

TEST_CASE("matmul backward follows the outer-product rule") {
  Parameter pa(Tensor({1, 2}, {2.0f, -1.0f}), "a");
  Parameter pb(Tensor({2, 2}, {1.0f, 2.0f, 3.0f, 4.0f}), "b");
  Tape t;
  TensorId y = t.matmul(t.leaf(pa), t.leaf(pb));
  t.backward(t.sum_all(y));
  // d(sum)/da_k = sum_j b_kj, d(sum)/db_kj = a_k.
  CHECK(pa.grad[0] == near(3.0));
  CHECK(pa.grad[1] == near(7.0));
  CHECK(pb.grad.at(0, 0) == near(2.0));
  CHECK(pb.grad.at(0, 1) == near(2.0));
  CHECK(pb.grad.at(1, 0) == near(-1.0));
  CHECK(pb.grad.at(1, 1) == near(-1.0));
}

TEST_CASE("add_rows broadcasts the bias and its gradient sums over rows") {
  Parameter bias(Tensor({2}, {0.5f, -0.5f}), "b");
  Tape t;
  TensorId x = t.constant(Tensor({2, 2}, {1.0f, 2.0f, 3.0f, 4.0f}));
  TensorId y = t.add_rows(x, t.leaf(bias));
  CHECK(t.value(y).at(0, 0) == near(1.5));
  CHECK(t.value(y).at(1, 1) == near(3.5));
  t.backward(t.sum_all(y));
  CHECK(bias.grad[0] == near(2.0));
  CHECK(bias.grad[1] == near(2.0));
}

TEST_CASE("relu kills gradient in the dead zone and passes it above zero") {
  Parameter p(Tensor({1, 3}, {-2.0f, 0.5f, 3.0f}), "x");
  Tape t;
  TensorId y = t.relu(t.leaf(p));
  CHECK(t.value(y)[0] == 0.0f);
  CHECK(t.value(y)[1] == 0.5f);
  CHECK(t.value(y)[2] == 3.0f);
  t.backward(t.sum_all(y));
  CHECK(p.grad[0] == 0.0f);
  CHECK(p.grad[1] == 1.0f);
  CHECK(p.grad[2] == 1.0f);
}

TEST_CASE("sigmoid forward and derivative at zero") {
  Parameter p(Tensor({1, 1}, {0.0f}), "x");
  Tape t;
  TensorId y = t.sigmoid(t.leaf(p));
  CHECK(t.value(y)[0] == near(0.5));
  t.backward(t.sum_all(y));
  CHECK(p.grad[0] == near(0.25));
}

TEST_CASE("one-by-one identity convolution reproduces its input") {
  Tensor x({1, 2, 2, 1}, {0.1f, 0.2f, 0.3f, 0.4f});
  Tape t;
  TensorId w = t.constant(Tensor({1, 1, 1, 1}, {1.0f}));
  TensorId b = t.constant(Tensor({1}, {0.0f}));
  TensorId y = t.conv2d(t.constant(x), w, b, 0);
  CHECK(t.value(y).same_shape(x));
  for (int64_t i = 0; i < x.numel(); ++i) CHECK(t.value(y)[i] == near(x[i]));
}

TEST_CASE("padded delta-kernel convolution is the identity map") {
  // 3x3 kernel with a single centered one, pad 1, stride 1.
  Tensor x({1, 3, 3, 1});
  Rng rng(11);
  for (auto& v : x.values()) v = rng.uniform_f(0.0f, 1.0f);
  Tensor w({3, 3, 1, 1});
  w[4] = 1.0f;
  Tape t;
  TensorId y = t.conv2d(t.constant(x), t.constant(w), t.constant(Tensor({1}, {0.0f})), 1);
  CHECK(t.value(y).same_shape(x));
  for (int64_t i = 0; i < x.numel(); ++i) CHECK(t.value(y)[i] == near(x[i]));
}

TEST_CASE("conv2d bias gradient counts every output position") {
  Parameter bias(Tensor({2}, {0.0f, 0.0f}), "b");
  Tape t;
  TensorId x = t.constant(Tensor::full({1, 3, 3, 1}, 1.0f));
  TensorId w = t.constant(Tensor::full({2, 2, 1, 2}, 0.5f));
  TensorId y = t.conv2d(x, w, t.leaf(bias), 0);
  CHECK(t.value(y).dim(1) == 2);
  CHECK(t.value(y).dim(3) == 2);
  t.backward(t.sum_all(y));
  // 2x2 output positions, each contributing 1 per channel.
  CHECK(bias.grad[0] == near(4.0));
  CHECK(bias.grad[1] == near(4.0));
}

TEST_CASE("unused parameters keep a zero gradient") {
  Parameter used(Tensor::scalar(2.0f), "used");
  Parameter unused(Tensor::scalar(5.0f), "unused");
  Tape t;
  TensorId a = t.leaf(used);
  (void)t.leaf(unused);
  t.backward(t.sum_all(t.square(a)));
  CHECK(used.grad[0] == near(4.0));
  CHECK(unused.grad[0] == 0.0f);
}

TEST_CASE("gradients accumulate across sweeps until cleared") {
  Parameter p(Tensor::scalar(3.0f), "p");
  for (int sweep = 0; sweep < 2; ++sweep) {
    Tape t;
    t.backward(t.sum_all(t.scale(t.leaf(p), 2.0f)));
  }
  CHECK(p.grad[0] == near(4.0));
  p.zero_grad();
  CHECK(p.grad[0] == 0.0f);
}

TEST_CASE("scalar combinators compute their closed forms") {
  Parameter a(Tensor({2}, {1.0f, 2.0f}), "a");
  Parameter b(Tensor({2}, {3.0f, 5.0f}), "b");

  Tape t;
  TensorId ia = t.leaf(a);
  TensorId ib = t.leaf(b);
  CHECK(t.value(t.add(ia, ib))[1] == near(7.0));
  CHECK(t.value(t.sub(ia, ib))[0] == near(-2.0));
  CHECK(t.value(t.mul(ia, ib))[1] == near(10.0));
  CHECK(t.value(t.square(ib))[1] == near(25.0));
  CHECK(t.value(t.scale(ia, -2.0f))[0] == near(-2.0));
  CHECK(t.value(t.add_scaled(ia, ib, 0.5f))[1] == near(4.5));
  CHECK(t.scalar_value(t.sum_all(ib)) == near(8.0));
  CHECK(t.scalar_value(t.mean_all(ib)) == near(4.0));

  // add_scaled backward: d/da = 1, d/db = coeff.
  Tape t2;
  TensorId root = t2.sum_all(t2.add_scaled(t2.leaf(a), t2.leaf(b), -0.25f));
  a.zero_grad();
  b.zero_grad();
  t2.backward(root);
  CHECK(a.grad[0] == near(1.0));
  CHECK(b.grad[0] == near(-0.25));

  // mean_all backward spreads 1/n.
  Tape t3;
  a.zero_grad();
  t3.backward(t3.mean_all(t3.leaf(a)));
  CHECK(a.grad[0] == near(0.5));
  CHECK(a.grad[1] == near(0.5));
}

TEST_CASE("reshape preserves values and routes gradients through") {
  Parameter p(Tensor({2, 2}, {1.0f, 2.0f, 3.0f, 4.0f}), "p");
  Tape t;
  TensorId y = t.reshape(t.leaf(p), {4});
  CHECK(t.value(y).rank() == 1);
  CHECK(t.value(y)[3] == 4.0f);
  t.backward(t.sum_all(t.square(y)));
  CHECK(p.grad.at(1, 1) == near(8.0));
}

TEST_CASE("backward demands a scalar root") {
  Tape t;
  TensorId v = t.constant(Tensor({2}, {1.0f, 2.0f}));
  CHECK_THROWS_AS(t.backward(v), UsageError);
}

TEST_CASE("backward_with_grad seeds the sweep with the supplied gradient") {
  Parameter p(Tensor({2}, {1.0f, 1.0f}), "p");
  Tape t;
  TensorId y = t.scale(t.leaf(p), 3.0f);
  t.backward_with_grad(y, Tensor({2}, {2.0f, -1.0f}));
  CHECK(p.grad[0] == near(6.0));
  CHECK(p.grad[1] == near(-3.0));
}

TEST_CASE("sgd leaves parameters alone when the gradient is zero") {
  Parameter p(Tensor::scalar(1.5f), "p");
  SgdConfig cfg;
  cfg.lr = 0.1f;
  cfg.momentum = 0.0f;
  cfg.weight_decay = 0.0f;
  cfg.cosine.reset();
  SgdOptimizer opt({&p}, cfg);
  opt.step();
  CHECK(p.value[0] == 1.5f);
}

TEST_CASE("one plain sgd step moves by minus lr times grad") {
  Parameter p(Tensor::scalar(0.0f), "p");
  p.grad[0] = 1.0f;
  SgdConfig cfg;
  cfg.lr = 0.1f;
  cfg.momentum = 0.0f;
  cfg.weight_decay = 0.0f;
  cfg.cosine.reset();
  SgdOptimizer opt({&p}, cfg);
  opt.step();
  CHECK(p.value[0] == near(-0.1, 1e-7));
  CHECK(opt.steps_taken() == 1);
}

TEST_CASE("weight decay pulls parameters toward zero without a data gradient") {
  Parameter p(Tensor::scalar(2.0f), "p");
  SgdConfig cfg;
  cfg.lr = 0.1f;
  cfg.momentum = 0.0f;
  cfg.weight_decay = 0.5f;
  cfg.cosine.reset();
  SgdOptimizer opt({&p}, cfg);
  opt.step();
  // Effective gradient 0.5 * 2.0 = 1.0, step -0.1.
  CHECK(p.value[0] == near(1.9, 1e-6));
}

TEST_CASE("cosine schedule anneals from the initial rate to zero") {
  SgdConfig cfg;
  cfg.lr = 0.2f;
  cfg.cosine = CosineSchedule{0.2f, 100};
  SgdOptimizer opt({}, cfg);
  CHECK(opt.lr_at(0) == near(0.2, 1e-7));
  CHECK(opt.lr_at(50) == near(0.1, 1e-6));
  CHECK(opt.lr_at(100) == near(0.0, 1e-7));
}

TEST_CASE("sgd config validation rejects out-of-range values") {
  SgdConfig bad;
  bad.lr = -0.1f;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = SgdConfig{};
  bad.momentum = 1.0f;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = SgdConfig{};
  bad.weight_decay = -1e-6f;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  CHECK_NOTHROW(SgdConfig{}.validate());
}

TEST_CASE("momentum accelerates repeated identical gradients") {
  Parameter p(Tensor::scalar(0.0f), "p");
  SgdConfig cfg;
  cfg.lr = 0.1f;
  cfg.momentum = 0.9f;
  cfg.weight_decay = 0.0f;
  cfg.cosine.reset();
  SgdOptimizer opt({&p}, cfg);
  p.grad[0] = 1.0f;
  opt.step();
  CHECK(p.value[0] == near(-0.1, 1e-6));
  p.grad[0] = 1.0f;
  opt.step();
  // Velocity 0.9 * 1 + 1 = 1.9, so the second step is -0.19.
  CHECK(p.value[0] == near(-0.29, 1e-6));
}

TEST_CASE("rng streams are deterministic and scope derivation is pure") {
  Rng a(42);
  Rng b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());

  CHECK(Rng::derive(7, "data|seed1") == Rng::derive(7, "data|seed1"));
  CHECK(Rng::derive(7, "data|seed1") != Rng::derive(7, "data|seed2"));
  CHECK(Rng::derive(7, "data|seed1") != Rng::derive(8, "data|seed1"));

  Rng c(9);
  auto perm = c.permutation(64);
  std::vector<bool> seen(64, false);
  for (auto v : perm) {
    REQUIRE(v >= 0);
    REQUIRE(v < 64);
    CHECK(!seen[static_cast<size_t>(v)]);
    seen[static_cast<size_t>(v)] = true;
  }

  // Uniform and normal stay in sane ranges.
  Rng d(5);
  for (int i = 0; i < 1000; ++i) {
    double u = d.uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
    CHECK(d.uniform_int(10) < 10);
  }
}
