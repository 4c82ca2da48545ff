#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "civsf/numerics/gradcheck.hpp"
#include "civsf/numerics/nn.hpp"
#include "civsf/numerics/ops.hpp"
#include "civsf/numerics/optim.hpp"
#include "civsf/numerics/rng.hpp"

using namespace civsf;

namespace {

Tensor<double> random_tensor(Shape shape, RngStream& rng, double sd = 1.0) {
  Tensor<double> t(std::move(shape));
  for (auto& v : t.vec()) v = rng.normal(0.0, sd);
  return t;
}

Var<double> param(Tensor<double> t) { return Var<double>(std::move(t), true); }

// Tape gradient of every leaf in `leaves` vs central differences on `f`.
double check_leaves(const std::function<Var<double>()>& f,
                    std::vector<Var<double>> leaves, double eps = 1e-5) {
  for (auto& l : leaves) l.zero_grad();
  backward(f());
  double worst = 0;
  for (auto& l : leaves) {
    const Tensor<double> g = l.grad();
    for (std::size_t i = 0; i < l.numel(); ++i) {
      auto& x = l.mutable_value();
      const double x0 = x[i];
      x[i] = x0 + eps;
      const double fp = f().value()[0];
      x[i] = x0 - eps;
      const double fm = f().value()[0];
      x[i] = x0;
      worst = std::max(worst, relative_error(g[i], (fp - fm) / (2 * eps)));
    }
  }
  return worst;
}

}  // namespace

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  auto eye = constant(Tensor<double>::matrix(2, 2, {1, 0, 0, 1}));
  auto m = constant(Tensor<double>::matrix(2, 2, {1, 2, 3, 4}));
  EXPECT_EQ(matmul(eye, m).value().vec(), (std::vector<double>{1, 2, 3, 4}));
}

TEST(Matmul, Annihilation) {
  auto a = constant(Tensor<double>::matrix(1, 2, {1, 0}));
  auto b = constant(Tensor<double>::matrix(2, 1, {0, 5}));
  EXPECT_EQ(matmul(a, b).value().vec(), (std::vector<double>{0}));
}

TEST(Matmul, MatchesTripleLoop) {
  RngStream rng(7, "mm");
  auto a = random_tensor({3, 4}, rng);
  auto b = random_tensor({4, 2}, rng);
  auto c = matmul(constant(a), constant(b)).value();
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 2; ++j) {
      double acc = 0;
      for (std::size_t k = 0; k < 4; ++k) acc += a.at(i, k) * b.at(k, j);
      EXPECT_NEAR(c.at(i, j), acc, 1e-6);
    }
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  auto a = constant(Tensor<double>({3, 4}));
  auto b = constant(Tensor<double>({3, 2}));
  try {
    matmul(a, b);
    FAIL();
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("[3x4]"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("[3x2]"), std::string::npos);
  }
}

TEST(Attention, SinglePositionReturnsValue) {
  RngStream rng(1, "a");
  auto q = constant(random_tensor({1, 8}, rng));
  auto k = constant(random_tensor({1, 8}, rng));
  auto v = constant(random_tensor({1, 8}, rng));
  auto out = attention(q, k, v, 1, 1, 2, true);
  for (std::size_t i = 0; i < 8; ++i) EXPECT_DOUBLE_EQ(out.value()[i], v.value()[i]);
}

TEST(Attention, EqualLogitsAverageVisiblePositions) {
  RngStream rng(2, "a");
  auto q = constant(Tensor<double>({3, 4}));
  auto k = constant(random_tensor({3, 4}, rng));
  auto v = constant(random_tensor({3, 4}, rng));
  auto out = attention(q, k, v, 1, 3, 1, true).value();
  for (std::size_t c = 0; c < 4; ++c) {
    const double mean = (v.value().at(0, c) + v.value().at(1, c) + v.value().at(2, c)) / 3;
    EXPECT_NEAR(out.at(2, c), mean, 1e-12);
  }
}

TEST(Attention, LaterPositionsDoNotLeakBackwards) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    RngStream rng(seed, "leak");
    auto q = random_tensor({8, 8}, rng), k = random_tensor({8, 8}, rng),
         v = random_tensor({8, 8}, rng);
    auto base = attention(constant(q), constant(k), constant(v), 2, 4, 2, true).value();
    for (std::size_t c = 0; c < 8; ++c) {
      v.at(3, c) += 1.0;
      k.at(3, c) -= 2.0;
      q.at(3, c) *= 3.0;
    }
    auto pert = attention(constant(q), constant(k), constant(v), 2, 4, 2, true).value();
    for (std::size_t r = 0; r < 3; ++r)
      for (std::size_t c = 0; c < 8; ++c)
        EXPECT_EQ(std::memcmp(&base.at(r, c), &pert.at(r, c), sizeof(double)), 0);
    // The other group is untouched entirely.
    for (std::size_t r = 4; r < 8; ++r)
      for (std::size_t c = 0; c < 8; ++c) EXPECT_EQ(base.at(r, c), pert.at(r, c));
  }
}

TEST(Attention, HeadsMustDivideHidden) {
  auto x = constant(Tensor<double>({2, 6}));
  EXPECT_THROW(attention(x, x, x, 1, 2, 4, true), ConfigError);
}

TEST(Softmax, RowsSumToOne) {
  RngStream rng(3, "s");
  auto p = softmax_rows(constant(random_tensor({16, 9}, rng, 5.0).cast<float>())).value();
  for (std::size_t r = 0; r < 16; ++r) {
    double s = 0;
    for (float x : p.row(r)) s += x;
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(Backward, SumOfSquares) {
  auto x = param(Tensor<double>::matrix(1, 2, {1, 2}));
  backward(sum(mul(x, x)));
  EXPECT_EQ(x.grad().vec(), (std::vector<double>{2, 4}));
}

TEST(Backward, DisconnectedParameterHasZeroGradient) {
  ParamStore<double> store;
  auto used = store.add("used", Tensor<double>::matrix(1, 2, {1, 2}));
  auto unused = store.add("unused", Tensor<double>::matrix(1, 2, {3, 4}));
  store.zero_grad();
  backward(sum(used));
  EXPECT_EQ(unused.grad().vec(), (std::vector<double>{0, 0}));
}

TEST(Backward, NonScalarLossIsContractError) {
  auto x = param(Tensor<double>({2, 2}));
  EXPECT_THROW(backward(x), ContractError);
}

TEST(Backward, TwoLayerNetMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    RngStream rng(seed, "net");
    ParamStore<double> store;
    Linear<double> l1(store, "l1", 4, 6, rng), l2(store, "l2", 6, 1, rng);
    auto x = constant(random_tensor({5, 4}, rng));
    auto y = constant(random_tensor({5, 1}, rng));
    auto res = grad_check_params(
        store, [&] { return mse(l2(tanh(l1(x))), y); }, 1e-5, 0, rng.sub("pick"));
    EXPECT_LE(res.max_rel_error, 1e-4) << res.worst_name;
  }
}

TEST(GradCheck, LinearFunctionIsExact) {
  auto f = [](std::span<const double> x) { return 3 * x[0] - 2 * x[1] + 0.5; };
  auto g = [](std::span<const double>) { return std::vector<double>{3, -2}; };
  EXPECT_LE(grad_check(f, g, {0.3, -1.2}, 1e-5).max_rel_error, 1e-10);
}

TEST(GradCheck, TanhChain) {
  auto f = [](std::span<const double> x) {
    return std::tanh(std::tanh(std::tanh(x[0])));
  };
  auto g = [](std::span<const double> x) {
    const double a = std::tanh(x[0]), b = std::tanh(a), c = std::tanh(b);
    return std::vector<double>{(1 - c * c) * (1 - b * b) * (1 - a * a)};
  };
  EXPECT_LE(grad_check(f, g, {0.4}, 1e-5).max_rel_error, 1e-6);
}

TEST(GradCheck, NonFiniteValueIsReported) {
  auto f = [](std::span<const double> x) { return std::log(x[0]); };
  auto g = [](std::span<const double> x) { return std::vector<double>{1 / x[0]}; };
  EXPECT_THROW(grad_check(f, g, {1e-7}, 1e-5), NumericError);
}

// Every building block used by the model, over 20 seeds.
TEST(GradFidelity, BuildingBlocks) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    RngStream rng(seed, "blocks");
    ParamStore<double> store;
    TransformerBlock<double> blk(store, "blk", 8, 2, 2, rng);
    Lstm<double> lstm_layer(store, "lstm", 3, 4, rng);
    LayerNorm<double> ln(store, "ln", 8);
    auto x = param(random_tensor({6, 8}, rng));
    auto w = param(random_tensor({2, 3}, rng));
    auto seq = param(random_tensor({8, 3}, rng));
    auto probe = constant(random_tensor({6, 8}, rng));
    auto probe4 = constant(random_tensor({8, 4}, rng));
    std::vector<Var<double>> leaves{x, w, seq};
    for (auto& [_, p] : store.entries()) leaves.push_back(p);
    auto f = [&] {
      auto h = blk(ln(x), 2, 3, true);
      auto hs = lstm_layer(seq, 2, 4);
      auto pooled = group_weighted_sum(softmax_rows(w), h);
      auto g = gather_rows(h, {5, -1, 0, 2});
      auto p = permute_elems(g, {31, 0, 7, 12, 3, 9, 22, 1}, {2, 4});
      auto loss = add(sum(mul(h, probe)), sum(mul(hs, probe4)));
      loss = add(loss, sum(mul(mean_groups(pooled, 2), mean_groups(pooled, 2))));
      loss = add(loss, sum(sigmoid(p)));
      loss = add(loss, sum(relu(add_scalar(gelu(p), 0.1))));
      return loss;
    };
    EXPECT_LE(check_leaves(f, leaves), 1e-4) << "seed " << seed;
  }
}

TEST(GradFidelity, Losses) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    RngStream rng(seed, "loss");
    auto logits = param(random_tensor({5, 3}, rng));
    auto pred = param(random_tensor({4, 2}, rng));
    auto target = constant(random_tensor({4, 2}, rng));
    std::vector<int> labels{0, 2, 1, 1, 0};
    auto f = [&] {
      return add(add(cross_entropy(logits, labels), mse(pred, target)),
                 mae(pred, target));
    };
    EXPECT_LE(check_leaves(f, {logits, pred}), 1e-4) << "seed " << seed;
  }
}

TEST(Optimizer, SgdUnitStepSubtractsGradient) {
  auto p = param(Tensor<double>::matrix(1, 2, {1.0, -1.0}));
  p.mutable_grad() = Tensor<double>::matrix(1, 2, {0.25, 0.5});
  Optimizer<double> opt({OptimizerKind::Sgd, 1.0}, {{"p", p}});
  opt.step();
  EXPECT_DOUBLE_EQ(p.value()[0], 0.75);
  EXPECT_DOUBLE_EQ(p.value()[1], -1.5);
}

TEST(Optimizer, SgdZeroGradientLeavesParams) {
  auto p = param(Tensor<double>::matrix(1, 2, {1.0, -1.0}));
  p.zero_grad();
  Optimizer<double> opt({OptimizerKind::Sgd, 0.1}, {{"p", p}});
  opt.step();
  EXPECT_EQ(p.value().vec(), (std::vector<double>{1.0, -1.0}));
}

TEST(Optimizer, AdamFirstStepIsSignedLearningRate) {
  auto p = param(Tensor<double>::matrix(1, 3, {0.0, 0.0, 0.0}));
  p.mutable_grad() = Tensor<double>::matrix(1, 3, {3.0, -0.02, 1e-3});
  const double lr = 1e-3;
  Optimizer<double> opt({OptimizerKind::Adam, lr}, {{"p", p}});
  opt.step();
  // m_hat = g, v_hat = g^2, so the update is lr * g / (|g| + eps).
  for (std::size_t i = 0; i < 3; ++i) {
    const double g = p.grad()[i];
    EXPECT_NEAR(p.value()[i], -lr * g / (std::abs(g) + 1e-8), 1e-12);
  }
  EXPECT_EQ(opt.steps(), 1);
}

TEST(Optimizer, AdamWDecouplesDecay) {
  auto p = param(Tensor<double>::matrix(1, 1, {2.0}));
  p.zero_grad();
  Optimizer<double> opt({OptimizerKind::AdamW, 0.1, 0.5}, {{"p", p}});
  opt.step();
  EXPECT_DOUBLE_EQ(p.value()[0], 2.0 - 0.1 * 0.5 * 2.0);
}

TEST(Optimizer, NanGradientNamesParameter) {
  auto a = param(Tensor<double>::matrix(1, 1, {1.0}));
  auto b = param(Tensor<double>::matrix(1, 1, {1.0}));
  a.mutable_grad()[0] = 1.0;
  b.mutable_grad()[0] = std::numeric_limits<double>::quiet_NaN();
  Optimizer<double> opt({OptimizerKind::Adam, 0.1}, {{"enc.a", a}, {"dec.b", b}});
  try {
    opt.step();
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("dec.b"), std::string::npos);
  }
  EXPECT_EQ(a.value()[0], 1.0);
}

TEST(Rng, SameSeedAndLabelReproduce) {
  RngStream a(42, "x"), b(42, "x"), c(42, "y");
  bool differs = false;
  for (int i = 0; i < 100; ++i) {
    const auto va = a.next_u64();
    EXPECT_EQ(va, b.next_u64());
    differs = differs || va != c.next_u64();
  }
  EXPECT_TRUE(differs);
  EXPECT_NE(derive_seed(1, 2, 3), derive_seed(1, 3, 2));
  EXPECT_EQ(derive_seed(1, 2, 3), derive_seed(1, 2, 3));
}

TEST(Determinism, RepeatedTrainingIsBitwiseIdentical) {
  auto run = [] {
    RngStream rng(11, "det");
    ParamStore<float> store;
    TransformerBlock<float> blk(store, "b", 8, 2, 2, rng);
    Optimizer<float> opt({OptimizerKind::Adam, 1e-2}, store.entries());
    Tensor<float> x({8, 8});
    for (auto& v : x.vec()) v = static_cast<float>(rng.normal());
    std::vector<float> losses;
    for (int i = 0; i < 5; ++i) {
      store.zero_grad();
      auto loss = mean(mul(blk(constant(x), 2, 4, true), blk(constant(x), 2, 4, true)));
      backward(loss);
      opt.step();
      losses.push_back(loss.value()[0]);
    }
    return std::make_pair(losses, store.get("b.fc1.weight").value());
  };
  auto a = run();
  auto b = run();
  EXPECT_EQ(a.first, b.first);
  EXPECT_TRUE(bitwise_equal(a.second, b.second));
}
