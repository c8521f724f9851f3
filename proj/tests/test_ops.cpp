#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <random>

#include "alpkd/errors.hpp"
#include "alpkd/ops.hpp"
#include "alpkd/optim.hpp"
#include "support.hpp"

using namespace alpkd;
using alpkd::testing::check_gradients;
using alpkd::testing::random_tensor;
using alpkd::testing::weighted_sum;

namespace {

constexpr double kTol = 1e-4;

#define CHECK_GRADS(inputs, ...)                                  \
  do {                                                            \
    const auto gc = check_gradients(inputs, __VA_ARGS__);         \
    INFO(gc.worst);                                               \
    CHECK(gc.max_rel_error <= kTol);                              \
    CHECK(gc.checked > 0);                                        \
  } while (0)

// Values bounded away from zero so relu's kink is never straddled.
Tensor away_from_zero(Shape shape, std::mt19937_64& rng) {
  auto t = random_tensor(std::move(shape), rng);
  for (auto& v : t.data()) v = v >= 0 ? v + 0.05 : v - 0.05;
  return t;
}

}  // namespace

TEST_CASE("finite differences: elementwise and linear ops") {
  std::mt19937_64 rng(1);
  auto a = random_tensor({3, 4}, rng);
  auto b = random_tensor({3, 4}, rng);
  auto m = random_tensor({4, 5}, rng);
  auto bias = random_tensor({4}, rng);
  auto col = random_tensor({3, 1}, rng);

  CHECK_GRADS((std::vector{a, m}), [&] { return weighted_sum(ops::matmul(a, m)); });
  CHECK_GRADS((std::vector{a, b}), [&] { return weighted_sum(ops::add(a, b)); });
  CHECK_GRADS((std::vector{a, b}), [&] { return weighted_sum(ops::sub(a, b)); });
  CHECK_GRADS((std::vector{a, b}), [&] { return weighted_sum(ops::mul(a, b)); });
  CHECK_GRADS((std::vector{a}), [&] { return weighted_sum(ops::scale(a, -2.5)); });
  CHECK_GRADS((std::vector{a, bias}), [&] { return weighted_sum(ops::add_bias(a, bias)); });
  CHECK_GRADS((std::vector{a, col}), [&] { return weighted_sum(ops::mul_col(a, col)); });
  CHECK_GRADS((std::vector{a}), [&] { return ops::sum(ops::mul(a, a)); });
  CHECK_GRADS((std::vector{a}), [&] { return ops::mean(ops::mul(a, a)); });
  CHECK_GRADS((std::vector{a}), [&] { return weighted_sum(ops::reshape(a, {2, 6})); });
  CHECK_GRADS((std::vector{a}), [&] { return weighted_sum(ops::slice_cols(a, 1, 3)); });
  CHECK_GRADS((std::vector{a, b}), [&] { return weighted_sum(ops::row_dot(a, b)); });
  CHECK_GRADS((std::vector{a, b}), [&] { return ops::mse(a, b); });
}

TEST_CASE("finite differences: nonlinearities and normalization") {
  std::mt19937_64 rng(2);
  auto x = away_from_zero({4, 6}, rng);
  auto gamma = random_tensor({6}, rng);
  auto beta = random_tensor({6}, rng);
  auto x3 = random_tensor({2, 3, 4}, rng);

  CHECK_GRADS((std::vector{x}), [&] { return weighted_sum(ops::relu(x)); });
  CHECK_GRADS((std::vector{x}), [&] { return weighted_sum(ops::gelu(x)); });
  CHECK_GRADS((std::vector{x, gamma, beta}),
              [&] { return weighted_sum(ops::layer_norm(x, gamma, beta)); });
  CHECK_GRADS((std::vector{x}), [&] { return weighted_sum(ops::softmax(x, 1)); });
  CHECK_GRADS((std::vector{x}), [&] { return weighted_sum(ops::softmax(x, 0)); });
  CHECK_GRADS((std::vector{x3}), [&] { return weighted_sum(ops::softmax(x3, 1)); });
  CHECK_GRADS((std::vector{x}), [&] { return weighted_sum(ops::log_softmax(x)); });
  CHECK_GRADS((std::vector{x}), [&] { return weighted_sum(ops::l2_normalize_rows(x)); });
}

TEST_CASE("finite differences: gathers, concatenation, losses, dropout") {
  std::mt19937_64 rng(3);
  auto table = random_tensor({7, 3}, rng);
  auto x = random_tensor({4, 3}, rng);
  auto y = random_tensor({4, 2}, rng);
  auto z = random_tensor({2, 3}, rng);
  const std::vector<std::int32_t> ids{0, 3, 3, 6, 1};
  const std::vector<std::size_t> rows{2, 0, 2};

  CHECK_GRADS((std::vector{table}), [&] { return weighted_sum(ops::embedding(table, ids)); });
  CHECK_GRADS((std::vector{x}), [&] { return weighted_sum(ops::gather_rows(x, rows)); });
  CHECK_GRADS((std::vector{x, y}), [&] {
    const std::vector parts{x, y};
    return weighted_sum(ops::concat(parts, 1));
  });
  CHECK_GRADS((std::vector{x, z}), [&] {
    const std::vector parts{x, z};
    return weighted_sum(ops::concat(parts, 0));
  });

  auto targets = ops::softmax(random_tensor({4, 3}, rng, 1.0, false), 1);
  CHECK_GRADS((std::vector{x}), [&] { return ops::cross_entropy_with_soft_targets(x, targets); });

  // A fresh generator per evaluation keeps the mask fixed across probes.
  CHECK_GRADS((std::vector{x}), [&] {
    std::mt19937_64 drop(5);
    return weighted_sum(ops::dropout(x, 0.3, drop));
  });
}

TEST_CASE("finite differences: masked multi-head attention") {
  std::mt19937_64 rng(4);
  const std::size_t batch = 2, seq = 4, d = 6;
  auto q = random_tensor({batch * seq, d}, rng);
  auto k = random_tensor({batch * seq, d}, rng);
  auto v = random_tensor({batch * seq, d}, rng);
  const std::vector<std::uint8_t> mask{1, 1, 1, 0, 1, 1, 0, 0};
  for (std::size_t heads : {1u, 2u, 3u}) {
    CAPTURE(heads);
    CHECK_GRADS((std::vector{q, k, v}),
                [&] { return weighted_sum(ops::attention(q, k, v, mask, batch, seq, heads)); });
  }
}

TEST_CASE("attention matches a direct softmax(QK^T/sqrt(d))V") {
  std::mt19937_64 rng(6);
  const std::size_t seq = 3, d = 4;
  auto q = random_tensor({seq, d}, rng, 1.0, false);
  auto k = random_tensor({seq, d}, rng, 1.0, false);
  auto v = random_tensor({seq, d}, rng, 1.0, false);
  const std::vector<std::uint8_t> mask{1, 1, 0};
  const auto out = ops::attention(q, k, v, mask, 1, seq, 1);
  for (std::size_t i = 0; i < seq; ++i) {
    double s[2], z = 0;
    for (std::size_t j = 0; j < 2; ++j) {
      s[j] = 0;
      for (std::size_t c = 0; c < d; ++c) s[j] += q.at(i * d + c) * k.at(j * d + c);
      s[j] = std::exp(s[j] / 2.0);
      z += s[j];
    }
    for (std::size_t c = 0; c < d; ++c) {
      const double expect = (s[0] * v.at(c) + s[1] * v.at(d + c)) / z;
      CHECK(out.at(i * d + c) == doctest::Approx(expect).epsilon(1e-13));
    }
  }
}

TEST_CASE("softmax of [1,2,3] matches the closed form") {
  const auto p = ops::softmax(Tensor::from({3}, {1, 2, 3}), 0);
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  CHECK(p.at(0) == doctest::Approx(std::exp(1.0) / z).epsilon(1e-15));
  CHECK(p.at(1) == doctest::Approx(std::exp(2.0) / z).epsilon(1e-15));
  CHECK(p.at(2) == doctest::Approx(std::exp(3.0) / z).epsilon(1e-15));
  CHECK(p.at(0) == doctest::Approx(0.09003057317038046).epsilon(1e-15));

  // Shift invariance keeps huge logits finite.
  const auto big = ops::softmax(Tensor::from({3}, {1001, 1002, 1003}), 0);
  for (int i = 0; i < 3; ++i) CHECK(big.at(i) == doctest::Approx(p.at(i)).epsilon(1e-14));
}

TEST_CASE("gelu uses the exact erf form") {
  const auto y = ops::gelu(Tensor::from({3}, {-1.0, 0.0, 1.5}));
  CHECK(y.at(0) == doctest::Approx(-1.0 * 0.5 * (1 + std::erf(-1.0 / std::sqrt(2.0)))));
  CHECK(y.at(1) == 0.0);
  CHECK(y.at(2) == doctest::Approx(1.5 * 0.5 * (1 + std::erf(1.5 / std::sqrt(2.0)))));
}

TEST_CASE("layer norm output has zero mean and unit variance per row") {
  std::mt19937_64 rng(7);
  auto x = random_tensor({3, 8}, rng, 3.0, false);
  const auto y = ops::layer_norm(x, Tensor::full({8}, 1.0), Tensor::zeros({8}));
  for (std::size_t r = 0; r < 3; ++r) {
    double m = 0, v = 0;
    for (std::size_t c = 0; c < 8; ++c) m += y.at(r * 8 + c);
    m /= 8;
    for (std::size_t c = 0; c < 8; ++c) v += (y.at(r * 8 + c) - m) * (y.at(r * 8 + c) - m);
    CHECK(std::abs(m) < 1e-12);
    CHECK(v / 8 == doctest::Approx(1.0).epsilon(1e-9));
  }
}

TEST_CASE("shape mismatches raise DimensionError naming both shapes") {
  const auto a = Tensor::zeros({2, 3});
  const auto b = Tensor::zeros({3, 2});
  CHECK_THROWS_AS(ops::add(a, b), DimensionError);
  CHECK_THROWS_WITH(ops::mul(a, b), doctest::Contains("[2,3]"));
  CHECK_THROWS_AS(ops::matmul(a, a), DimensionError);
  CHECK_THROWS_AS(ops::softmax(a, 2), DimensionError);
  CHECK_THROWS_AS(ops::reshape(a, {4}), DimensionError);
  const std::vector<std::int32_t> bad{9};
  CHECK_THROWS_AS(ops::embedding(Tensor::zeros({4, 2}), bad), InputError);
}

TEST_CASE("gradients accumulate across backward calls and reuse") {
  auto x = Tensor::from({2}, {1.0, -2.0}, true);
  // x used twice in one graph: d/dx sum(x*x + x) = 2x + 1
  ops::sum(ops::add(ops::mul(x, x), x)).backward();
  CHECK(x.grad()[0] == doctest::Approx(3.0));
  CHECK(x.grad()[1] == doctest::Approx(-3.0));
  ops::sum(x).backward();
  CHECK(x.grad()[0] == doctest::Approx(4.0));
  CHECK(x.grad()[1] == doctest::Approx(-2.0));
}

TEST_CASE("no-grad mode records nothing and detach cuts the graph") {
  auto x = Tensor::from({2}, {1.0, 2.0}, true);
  {
    NoGradGuard guard;
    const auto y = ops::scale(x, 2.0);
    CHECK_FALSE(y.requires_grad());
  }
  CHECK(grad_mode_enabled());
  const auto y = ops::mul(x.detach(), x);
  ops::sum(y).backward();
  CHECK(x.grad()[0] == doctest::Approx(1.0));
  CHECK(x.grad()[1] == doctest::Approx(2.0));
  CHECK(x.detach().node_id() != x.node_id());
}

TEST_CASE("node ids increase from parents to children") {
  auto a = Tensor::from({1}, {1.0}, true);
  auto b = ops::scale(a, 2.0);
  auto c = ops::add(b, a);
  CHECK(a.node_id() < b.node_id());
  CHECK(b.node_id() < c.node_id());
}

TEST_CASE("dropout is identity at rate 0 and inverted-scaled otherwise") {
  std::mt19937_64 rng(1);
  const auto x = Tensor::full({1000}, 1.0);
  const auto same = ops::dropout(x, 0.0, rng);
  CHECK(alpkd::testing::values(same) == alpkd::testing::values(x));
  const auto y = ops::dropout(x, 0.25, rng);
  std::size_t zeros = 0;
  for (double v : y.data()) {
    if (v == 0.0) {
      ++zeros;
    } else {
      CHECK(v == doctest::Approx(1.0 / 0.75));
    }
  }
  CHECK(zeros > 180);
  CHECK(zeros < 320);
  CHECK_THROWS_AS(ops::dropout(x, 1.0, rng), ConfigError);
}

TEST_CASE("Adam first steps match a hand trace") {
  // Constant gradient g: m_t = (1-b1^t) g, v_t = (1-b2^t) g^2, so each bias
  // corrected step is lr * g / (|g| + eps).
  auto p = Tensor::from({2}, {1.0, -1.0}, true);
  std::vector params{p};
  Optimizer opt(OptimizerKind::Adam, 0.1);
  for (int t = 1; t <= 3; ++t) {
    p.zero_grad();
    p.grad()[0] = 0.5;
    p.grad()[1] = -2.0;
    opt.step(params);
    CHECK(p.at(0) == doctest::Approx(1.0 - 0.1 * t * 0.5 / (0.5 + 1e-8)).epsilon(1e-12));
    CHECK(p.at(1) == doctest::Approx(-1.0 + 0.1 * t * 2.0 / (2.0 + 1e-8)).epsilon(1e-12));
  }
  CHECK(opt.steps_taken() == 3);

  // Changing gradient: replay the recurrences directly.
  auto q = Tensor::from({1}, {0.0}, true);
  std::vector qs{q};
  Optimizer opt2(OptimizerKind::Adam, 0.01);
  double m = 0, v = 0, x = 0;
  const double grads[] = {1.0, -3.0, 0.5, 2.0};
  for (int t = 1; t <= 4; ++t) {
    const double g = grads[t - 1];
    q.zero_grad();
    q.grad()[0] = g;
    opt2.step(qs);
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    const double mh = m / (1 - std::pow(0.9, t));
    const double vh = v / (1 - std::pow(0.999, t));
    x -= 0.01 * mh / (std::sqrt(vh) + 1e-8);
    CHECK(q.at(0) == doctest::Approx(x).epsilon(1e-12));
  }
}

TEST_CASE("SGD step and parameters without gradients") {
  auto p = Tensor::from({1}, {2.0}, true);
  auto frozen = Tensor::from({1}, {5.0}, true);
  std::vector params{p, frozen};
  p.zero_grad();
  p.grad()[0] = 4.0;
  Optimizer opt(OptimizerKind::Sgd, 0.25);
  opt.step(params);
  CHECK(p.at(0) == 1.0);
  CHECK(frozen.at(0) == 5.0);
}
