#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "enat/checkpoint.hpp"
#include "enat/gradcheck.hpp"
#include "enat/ops.hpp"
#include "enat/optim.hpp"

using namespace enat;

namespace {

Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(element_count(shape));
  for (auto& x : v) x = u(rng);
  return Tensor(std::move(shape), std::move(v), true);
}

// Fixed projection so non-scalar ops reduce to a scalar with non-uniform weights.
Tensor probe(const Tensor& y) {
  std::vector<double> w(y.size());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = std::sin(0.7 * static_cast<double>(i) + 0.3);
  return weighted_sum(y, w);
}

void expect_gradients(const std::function<Tensor()>& f, const std::vector<Tensor>& inputs) {
  const auto r = check_gradients(f, inputs);
  EXPECT_LT(r.max_relative_error, 1e-3) << r.worst;
  EXPECT_GT(r.coordinates, 0u);
}

}  // namespace

TEST(Matmul, HandExample) {
  Tensor a({2, 2}, {1, 2, 3, 4});
  Tensor b({2, 2}, {5, 6, 7, 8});
  const Tensor c = matmul(a, b);
  EXPECT_EQ(c.shape(), (Shape{2, 2}));
  EXPECT_EQ(std::vector<double>(c.values().begin(), c.values().end()), (std::vector<double>{19, 22, 43, 50}));
}

TEST(Matmul, IdentityIsNeutral) {
  std::mt19937_64 rng(3);
  const Tensor a = random_tensor({3, 4}, rng);
  Tensor eye({4, 4});
  for (std::size_t i = 0; i < 4; ++i) eye.mutable_values()[i * 4 + i] = 1.0;
  const Tensor c = matmul(a, eye);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_DOUBLE_EQ(c[i], a[i]);
}

TEST(Matmul, GradientOfSumIsOnesTimesBTransposed) {
  std::mt19937_64 rng(4);
  Tensor a = random_tensor({2, 3}, rng);
  const Tensor b = random_tensor({3, 4}, rng).detach();
  backward(sum(matmul(a, b)));
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t k = 0; k < 3; ++k) {
      double row_sum = 0.0;
      for (std::size_t j = 0; j < 4; ++j) row_sum += b[k * 4 + j];
      EXPECT_NEAR(a.grad()[i * 3 + k], row_sum, 1e-12);
    }
}

TEST(Matmul, DimensionMismatchThrows) {
  EXPECT_THROW(matmul(Tensor({2, 3}), Tensor({2, 3})), ShapeError);
}

TEST(Softmax, Examples) {
  const Tensor half = softmax(Tensor({2}, {0.0, 0.0}), 0);
  EXPECT_DOUBLE_EQ(half[0], 0.5);
  EXPECT_DOUBLE_EQ(half[1], 0.5);
  const Tensor s = softmax(Tensor({3}, {1.0, 2.0, 3.0}), 0);
  // direct evaluation oracle
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  EXPECT_NEAR(s[0], std::exp(1.0) / z, 1e-12);
  EXPECT_NEAR(s[0], 0.0900, 1e-4);
  EXPECT_NEAR(s[1], 0.2447, 1e-4);
  EXPECT_NEAR(s[2], 0.6652, 1e-4);
}

TEST(Softmax, ShiftInvariantAndNormalized) {
  std::mt19937_64 rng(5);
  const Tensor x = random_tensor({4, 6}, rng, -5, 5).detach();
  const Tensor a = softmax(x, 1);
  const Tensor b = softmax(add_scalar(x, 123.0), 1);
  for (std::size_t r = 0; r < 4; ++r) {
    double total = 0.0;
    for (std::size_t c = 0; c < 6; ++c) {
      EXPECT_NEAR(a[r * 6 + c], b[r * 6 + c], 1e-12);
      EXPECT_GE(a[r * 6 + c], 0.0);
      total += a[r * 6 + c];
    }
    EXPECT_NEAR(total, 1.0, 1e-9);
  }
}

TEST(Softmax, LargeInputsStayFinite) {
  const Tensor s = softmax(Tensor({3}, {1000.0, 1001.0, 1002.0}), 0);
  EXPECT_TRUE(s.all_finite());
  EXPECT_NEAR(s[2], 0.6652, 1e-4);
}

TEST(Softmax, BadAxisThrows) { EXPECT_THROW(softmax(Tensor({2, 2}), 2), ShapeError); }

TEST(LayerNorm, Examples) {
  const Tensor gain({2}, 1.0), bias({2}, 0.0);
  const Tensor y = layer_norm(Tensor({1, 2}, {1.0, 3.0}), gain, bias, 1e-12);
  EXPECT_NEAR(y[0], -1.0, 1e-9);
  EXPECT_NEAR(y[1], 1.0, 1e-9);
  const Tensor c = layer_norm(Tensor({1, 2}, {4.0, 4.0}), gain, bias, 1e-5);
  EXPECT_EQ(c[0], 0.0);
  EXPECT_EQ(c[1], 0.0);
  EXPECT_THROW(layer_norm(Tensor({1, 2}), gain, bias, 0.0), ContractError);
}

TEST(LayerNorm, RowsHaveZeroMean) {
  std::mt19937_64 rng(6);
  const Tensor x = random_tensor({5, 7}, rng, -3, 3).detach();
  const Tensor y = layer_norm(x, Tensor({7}, 1.0), Tensor({7}, 0.0));
  for (std::size_t r = 0; r < 5; ++r) {
    double m = 0.0;
    for (std::size_t c = 0; c < 7; ++c) m += y[r * 7 + c];
    EXPECT_LT(std::abs(m / 7.0), 1e-9);
  }
}

TEST(Backward, PolynomialAndAccumulation) {
  Tensor x = Tensor::scalar(3.0, true);
  backward(square(x));
  EXPECT_DOUBLE_EQ(x.grad()[0], 6.0);
  Tensor y = Tensor::scalar(1.5, true);
  backward(add(y, y));
  EXPECT_DOUBLE_EQ(y.grad()[0], 2.0);
}

TEST(Backward, NonScalarLossThrows) {
  Tensor x({2}, 1.0, true);
  EXPECT_THROW(backward(scale(x, 2.0)), ContractError);
  Tape::active().clear();
}

TEST(Backward, EachEntryReplayedOnce) {
  Tensor x({3}, {1, 2, 3}, true);
  const Tensor loss = sum(mul(relu(x), x));
  const std::size_t recorded = Tape::active().size();
  backward(loss);
  EXPECT_EQ(Tape::active().last_replay_count(), recorded);
  EXPECT_EQ(Tape::active().size(), 0u);
}

TEST(Backward, NoGradGuardRecordsNothing) {
  Tensor x({3}, 1.0, true);
  {
    NoGradGuard g;
    const Tensor y = sum(square(x));
    EXPECT_FALSE(y.requires_grad());
  }
  EXPECT_EQ(Tape::active().size(), 0u);
}

TEST(GradientCheck, ElementwiseFamily) {
  std::mt19937_64 rng(11);
  for (int point = 0; point < 10; ++point) {
    Tensor a = random_tensor({3, 4}, rng), b = random_tensor({3, 4}, rng), row = random_tensor({4}, rng);
    Tensor pos = random_tensor({3, 4}, rng, 0.5, 2.0);
    expect_gradients([&] { return probe(add(a, row)); }, {a, row});
    expect_gradients([&] { return probe(sub(a, b)); }, {a, b});
    expect_gradients([&] { return probe(mul(a, row)); }, {a, row});
    expect_gradients([&] { return probe(scale(a, -1.7)); }, {a});
    expect_gradients([&] { return probe(add_scalar(a, 0.4)); }, {a});
    expect_gradients([&] { return probe(sigmoid(a)); }, {a});
    expect_gradients([&] { return probe(log_sigmoid(scale(a, 4.0))); }, {a});
    expect_gradients([&] { return probe(log(pos)); }, {pos});
    expect_gradients([&] { return probe(exp(a)); }, {a});
    expect_gradients([&] { return probe(square(a)); }, {a});
    expect_gradients([&] { return mean(mul(a, b)); }, {a, b});
    expect_gradients([&] { return sum(square(a)); }, {a});
  }
}

TEST(GradientCheck, ReluAwayFromKink) {
  std::mt19937_64 rng(12);
  for (int point = 0; point < 10; ++point) {
    Tensor a = random_tensor({12}, rng);
    for (auto& v : a.mutable_values())
      if (std::abs(v) < 0.05) v = 0.3;
    expect_gradients([&] { return probe(relu(a)); }, {a});
  }
}

TEST(GradientCheck, StructuralOps) {
  std::mt19937_64 rng(13);
  const std::vector<int> ids{2, 0, 2, 1};
  for (int point = 0; point < 10; ++point) {
    Tensor a = random_tensor({2, 3, 4}, rng), m = random_tensor({4, 5}, rng), m2 = random_tensor({5, 4}, rng);
    Tensor batched = random_tensor({2, 4, 5}, rng), table = random_tensor({3, 4}, rng), x4 = random_tensor({2, 3, 2, 2}, rng);
    Tensor logits = random_tensor({4, 3}, rng, -2, 2);
    expect_gradients([&] { return probe(matmul(a, m)); }, {a, m});
    expect_gradients([&] { return probe(matmul(a, batched)); }, {a, batched});
    expect_gradients([&] { return probe(matmul_nt(a, m2)); }, {a, m2});
    expect_gradients([&] { return probe(l2_norm(a)); }, {a});
    expect_gradients([&] { return probe(reshape(a, {6, 4})); }, {a});
    expect_gradients([&] { return probe(swap_axes_12(x4)); }, {x4});
    expect_gradients([&] { return probe(concat({a, a})); }, {a});
    expect_gradients([&] { return probe(gather_rows(table, ids)); }, {table});
    expect_gradients([&] { return probe(embedding(table, ids, {2, 2})); }, {table});
    expect_gradients([&] { return probe(pick(logits, std::vector<int>{0, 2, 1, 1})); }, {logits});
  }
}

TEST(GradientCheck, Normalizations) {
  std::mt19937_64 rng(14);
  std::vector<std::uint8_t> keep(2 * 3 * 4, 1);
  keep[3] = keep[7] = keep[13] = 0;
  for (int point = 0; point < 10; ++point) {
    Tensor x = random_tensor({3, 5}, rng, -3, 3), scores = random_tensor({2, 2, 3, 4}, rng, -2, 2);
    Tensor gain = random_tensor({5}, rng, 0.5, 1.5), bias = random_tensor({5}, rng);
    expect_gradients([&] { return probe(softmax(x, 1)); }, {x});
    expect_gradients([&] { return probe(softmax(x, 0)); }, {x});
    expect_gradients([&] { return probe(log_softmax(x)); }, {x});
    expect_gradients([&] { return probe(masked_softmax(scores, keep)); }, {scores});
    expect_gradients([&] { return probe(layer_norm(x, gain, bias)); }, {x, gain, bias});
  }
}

TEST(MaskedSoftmax, MaskedEntriesAreExactlyZero) {
  std::vector<std::uint8_t> keep{1, 0, 1, 0, 0, 0};
  const Tensor p = masked_softmax(Tensor({1, 1, 2, 3}, {1, 50, 2, 3, 4, 5}), keep);
  EXPECT_EQ(p[1], 0.0);
  EXPECT_NEAR(p[0] + p[2], 1.0, 1e-12);
  for (std::size_t i = 3; i < 6; ++i) EXPECT_EQ(p[i], 0.0);
}

TEST(Dropout, RateZeroIsIdentityAndNoGradGuardDisablesIt) {
  std::mt19937_64 rng(1);
  Tensor x({100}, 1.0);
  const Tensor same = dropout(x, 0.0, rng);
  for (std::size_t i = 0; i < 100; ++i) EXPECT_EQ(same[i], 1.0);
  const Tensor dropped = dropout(x, 0.5, rng);
  std::size_t zeros = 0;
  for (std::size_t i = 0; i < 100; ++i) {
    if (dropped[i] == 0.0) ++zeros;
    else EXPECT_DOUBLE_EQ(dropped[i], 2.0);
  }
  EXPECT_GT(zeros, 20u);
  EXPECT_LT(zeros, 80u);
}

TEST(Determinism, SameInputsGiveBitIdenticalGradients) {
  auto run = [] {
    std::mt19937_64 rng(99);
    Tensor a = random_tensor({4, 5}, rng), b = random_tensor({5, 3}, rng);
    backward(sum(log_softmax(matmul(a, b))));
    std::vector<double> out(a.grad().begin(), a.grad().end());
    out.insert(out.end(), b.grad().begin(), b.grad().end());
    return out;
  };
  EXPECT_EQ(run(), run());
}

TEST(Adam, ZeroGradientLeavesParameters) {
  Tensor w({3}, {1, 2, 3}, true);
  ParameterList params{{"w", w}};
  backward(scale(sum(w), 0.0));
  OptimizerState state;
  state.schedule = {0.1, 0};
  adam_step(params, state);
  EXPECT_EQ(w[0], 1.0);
  EXPECT_EQ(w[2], 3.0);
}

TEST(Adam, FirstStepWithUnitGradientMovesByLearningRate) {
  Tensor w({1}, {0.5}, true);
  ParameterList params{{"w", w}};
  backward(sum(w));
  OptimizerState state;
  state.schedule = {0.1, 0};
  adam_step(params, state);
  // m_hat = 1, v_hat = 1 after bias correction
  EXPECT_NEAR(w[0] - 0.5, -0.1 / (1.0 + 1e-9), 1e-12);
}

TEST(Adam, StepReducesQuadratic) {
  Tensor w({1}, {2.0}, true);
  ParameterList params{{"w", w}};
  OptimizerState state;
  state.schedule = {0.01, 0};
  const double before = w[0] * w[0];
  backward(square(w));
  adam_step(params, state);
  EXPECT_LT(w[0] * w[0], before);
}

TEST(Adam, NonFiniteGradientNamesParameter) {
  Tensor w({1}, {0.0}, true);
  ParameterList params{{"decoder.bias", w}};
  backward(log(w));
  OptimizerState state;
  try {
    adam_step(params, state);
    FAIL() << "expected TrainingError";
  } catch (const TrainingError& e) {
    EXPECT_NE(std::string(e.what()).find("decoder.bias"), std::string::npos);
  }
}

TEST(Schedule, WarmupThenInverseSqrt) {
  const LearningRateSchedule s{1.0, 100};
  EXPECT_DOUBLE_EQ(s.rate(50), 0.5);
  EXPECT_DOUBLE_EQ(s.rate(100), 1.0);
  EXPECT_DOUBLE_EQ(s.rate(400), 0.5);
  EXPECT_DOUBLE_EQ((LearningRateSchedule{0.3, 0}.rate(1000)), 0.3);
}

TEST(Clip, GlobalNormIsCapped) {
  Tensor a({2}, {0.0, 0.0}, true), b({1}, {0.0}, true);
  backward(add(sum(scale(a, 3.0)), sum(scale(b, 4.0))));
  ParameterList params{{"a", a}, {"b", b}};
  EXPECT_NEAR(global_grad_norm(params), std::sqrt(9.0 + 9.0 + 16.0), 1e-12);
  const double before = clip_grad_norm(params, 1.0);
  EXPECT_NEAR(before, std::sqrt(34.0), 1e-12);
  EXPECT_NEAR(global_grad_norm(params), 1.0, 1e-12);
}

TEST(Checkpoint, RoundTripIncludingOptimizer) {
  Tensor w({2, 2}, {1, 2, 3, 4}, true);
  ParameterList params{{"w", w}};
  backward(sum(square(w)));
  OptimizerState state;
  state.schedule = {0.05, 10};
  adam_step(params, state);
  Checkpoint ckpt;
  ckpt.metadata["kind"] = "unit";
  ckpt.tensors = params;
  ckpt.optimizer = state;
  const std::string path = ::testing::TempDir() + "/round.ckpt";
  save_checkpoint(path, ckpt);
  const Checkpoint back = load_checkpoint(path);
  EXPECT_EQ(back.meta("kind"), "unit");
  ASSERT_TRUE(back.has_tensor("w"));
  const Tensor& loaded = back.tensor("w");
  EXPECT_EQ(loaded.shape(), w.shape());
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(loaded[i], w[i]);
  ASSERT_TRUE(back.optimizer.has_value());
  EXPECT_EQ(back.optimizer->step, 1u);
  EXPECT_EQ(back.optimizer->first_moment, state.first_moment);
  EXPECT_EQ(back.optimizer->second_moment, state.second_moment);
  EXPECT_EQ(back.optimizer->schedule.warmup_steps, 10u);
}

TEST(Checkpoint, CorruptFileRejected) {
  const std::string path = ::testing::TempDir() + "/bad.ckpt";
  {
    std::ofstream os(path, std::ios::binary);
    os << "not a checkpoint";
  }
  EXPECT_THROW(load_checkpoint(path), std::runtime_error);
}
