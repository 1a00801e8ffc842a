#include <cmath>
#include <random>
#include <set>
#include <stdexcept>
#include <vector>

#include "doctest.h"
#include "lowbit/quant.hpp"
#include "oracles.hpp"
#include "quant_checks.hpp"

using namespace lowbit;
using checks::to_matrix;

namespace {

ActQuantState<double> act_state(QuantKind kind, double alpha) {
  ActQuantState<double> s;
  s.alpha = alpha;
  s.scheme = QuantScheme::of(kind);
  return s;
}

std::vector<int> levels_of(const QuantizedTensor<double>& q) {
  std::vector<int> out;
  for (Index i = 0; i < q.levels.size(); ++i) out.push_back(q.levels.data()[i]);
  return out;
}

Matrix row(std::initializer_list<double> v) { return to_matrix(std::vector<double>(v)); }

}  // namespace

TEST_CASE("schemes use per-row scales for weights and per-tensor for activations") {
  for (auto k : {QuantKind::TernaryWeight, QuantKind::BinaryWeight, QuantKind::BaselineTWN,
                 QuantKind::BaselineBWN, QuantKind::Int8Weight}) {
    CHECK(QuantScheme::of(k).granularity == Granularity::PerRow);
  }
  for (auto k : {QuantKind::TernaryActNonNeg, QuantKind::TernaryActSigned,
                 QuantKind::BinaryActNonNeg, QuantKind::BinaryActSigned}) {
    CHECK(QuantScheme::of(k).granularity == Granularity::PerTensor);
  }
}

TEST_CASE("twn_ternarize") {
  auto q = twn_ternarize(row({1.0, 0.2, -0.8, 0.05}));
  CHECK(levels_of(q) == std::vector<int>{1, 0, -1, 0});
  CHECK(q.alpha[0] == doctest::Approx(0.9).epsilon(1e-15));
  CHECK(q.mu[0] == 0.0);
  Matrix dq = q.dequantize();
  CHECK(dq(0, 0) == doctest::Approx(0.9));
  CHECK(dq(0, 2) == doctest::Approx(-0.9));

  auto zero = twn_ternarize(row({0, 0, 0, 0}));
  CHECK(levels_of(zero) == std::vector<int>{0, 0, 0, 0});
  CHECK(zero.alpha[0] == kAlphaEpsilon);

  auto c = twn_ternarize(row({0.4, 0.4, 0.4, 0.4}));
  CHECK(levels_of(c) == std::vector<int>{1, 1, 1, 1});
  CHECK(c.alpha[0] == doctest::Approx(0.4));
}

TEST_CASE("twn threshold matches the scalar formula") {
  // 0.7 * 2.05 / 4
  const std::vector<double> w{1.0, 0.2, -0.8, 0.05};
  const double delta = 0.7 * oracle::mean_abs_dev(w, 0.0);
  CHECK(delta == doctest::Approx(0.35875));
}

TEST_CASE("bwn_binarize") {
  auto a = bwn_binarize(row({0.5, -0.5}));
  CHECK(a.alpha[0] == doctest::Approx(0.5));
  CHECK(levels_of(a) == std::vector<int>{1, -1});

  auto b = bwn_binarize(row({1.0, 2.0, -3.0}));
  CHECK(b.alpha[0] == doctest::Approx(2.0));
  Matrix dq = b.dequantize();
  CHECK(dq(0, 0) == doctest::Approx(2.0));
  CHECK(dq(0, 1) == doctest::Approx(2.0));
  CHECK(dq(0, 2) == doctest::Approx(-2.0));

  auto z = bwn_binarize(row({0.0}));
  CHECK(z.levels(0, 0) == 1);
  CHECK(z.alpha[0] == kAlphaEpsilon);
}

TEST_CASE("isometric_ternarize") {
  auto q = isometric_ternarize(row({0.9, -0.9, 0.3, -0.3, 0, 0}));
  CHECK(q.mu[0] == doctest::Approx(0.0));
  CHECK(q.alpha[0] == doctest::Approx(8.0 / 15.0).epsilon(1e-15));
  CHECK(levels_of(q) == std::vector<int>{1, -1, 1, -1, 0, 0});

  auto c = isometric_ternarize(row({2.5, 2.5, 2.5}));
  CHECK(levels_of(c) == std::vector<int>{0, 0, 0});
  CHECK(c.alpha[0] == kAlphaEpsilon);
}

TEST_CASE("isometric_binarize") {
  auto q = isometric_binarize(row({1.0, 3.0}));
  CHECK(q.mu[0] == doctest::Approx(2.0));
  CHECK(q.alpha[0] == doctest::Approx(1.0));
  CHECK(levels_of(q) == std::vector<int>{-1, 1});
  Matrix dq = q.dequantize();
  CHECK(dq(0, 0) == doctest::Approx(-1.0));
  CHECK(dq(0, 1) == doctest::Approx(1.0));

  auto s = isometric_binarize(row({-0.7, 0.7}));
  CHECK(s.alpha[0] == doctest::Approx(0.7));

  auto c = isometric_binarize(row({-4, -4, -4}));
  CHECK(levels_of(c) == std::vector<int>{1, 1, 1});
  CHECK(c.alpha[0] == kAlphaEpsilon);
}

TEST_CASE("weight_backward") {
  // (w - mu) / alpha = [0.5, -2.0] for mu = 2, alpha = 1
  auto q = isometric_binarize(row({1.0, 3.0}));
  q.mu[0] = 0.0;
  q.alpha[0] = 1.0;
  Matrix g = weight_backward(row({0.5, -2.0}), row({1, 1}), q);
  CHECK(g(0, 0) == 1.0);
  CHECK(g(0, 1) == 0.0);

  auto t = isometric_ternarize(row({0.9, -0.9, 0.3, -0.3, 0, 0}));
  Matrix zero = weight_backward(row({0.9, -0.9, 0.3, -0.3, 0, 0}), Matrix::Zero(1, 6), t);
  CHECK(zero.isZero());

  CHECK_THROWS_AS(weight_backward(row({1, 2}), row({1, 2, 3}), q), std::invalid_argument);
}

TEST_CASE("ternary weight STE passes the clip boundary, binary does not") {
  QuantizedTensor<double> t = isometric_ternarize(row({1, -1}));
  t.mu[0] = 0;
  t.alpha[0] = 1;
  CHECK(weight_backward(row({1.0, -1.0}), row({1, 1}), t).sum() == 2.0);
  QuantizedTensor<double> b = isometric_binarize(row({1, -1}));
  b.mu[0] = 0;
  b.alpha[0] = 1;
  CHECK(weight_backward(row({1.0, -1.0}), row({1, 1}), b).sum() == 0.0);
}

TEST_CASE("elastic ternary activations") {
  auto pos = act_state(QuantKind::TernaryActNonNeg, 1.0);
  auto q = elastic_ternarize(row({0, 0.6, 1.3, 5.0}), pos);
  CHECK(levels_of(q) == std::vector<int>{0, 1, 1, 2});
  Matrix dq = q.dequantize();
  CHECK(dq(0, 3) == 2.0);

  const double g = elastic_ternarize_grad_alpha(row({0, 0.6, 1.3, 5.0}), pos, row({1, 1, 1, 1}));
  CHECK(g == doctest::Approx(2.1));
  CHECK(elastic_ternarize_grad_alpha(row({0, 0.6, 1.3, 5.0}), pos, Matrix::Zero(1, 4)) == 0.0);

  auto zero = elastic_ternarize(Matrix::Zero(1, 5), pos);
  CHECK(zero.levels.isZero());

  auto signed_state = act_state(QuantKind::TernaryActSigned, 1.0);
  auto dead = elastic_ternarize(row({2.1, 1.9, 2.2, 1.8}), signed_state);
  CHECK(dead.levels.isZero());
  CHECK(dead.mu[0] == doctest::Approx(2.0));
}

TEST_CASE("elastic binary activations") {
  auto pos = act_state(QuantKind::BinaryActNonNeg, 0.5);
  auto q = elastic_binarize(row({0.3, 0.9}), pos);
  CHECK(levels_of(q) == std::vector<int>{1, 1});
  Matrix dq = q.dequantize();
  CHECK(dq(0, 0) == 0.5);
  CHECK(dq(0, 1) == 0.5);
  CHECK(elastic_binarize_grad_alpha(row({0.3, 0.9}), pos, row({1, 1})) == doctest::Approx(1.4));
  CHECK(elastic_binarize(row({0.0}), pos).levels(0, 0) == 0);

  auto sgn = act_state(QuantKind::BinaryActSigned, 1.0);
  auto s = elastic_binarize(row({-1, 3}), sgn);
  CHECK(s.mu[0] == doctest::Approx(1.0));
  CHECK(levels_of(s) == std::vector<int>{-1, 1});
  // x' = [-2, 2] here; partials are sign(x')
  CHECK(elastic_binarize_grad_alpha(row({-1, 3}), sgn, row({1, 1})) == 0.0);
  CHECK(elastic_binarize_grad_alpha(row({-1, 3}), sgn, row({2, 1})) == -1.0);
}

TEST_CASE("act_grad_input") {
  auto pos = act_state(QuantKind::TernaryActNonNeg, 1.0);
  Matrix g = act_grad_input(row({0.5, 3.0}), pos, row({1, 1}));
  CHECK(g(0, 0) == 1.0);
  CHECK(g(0, 1) == 0.0);
  CHECK(act_grad_input(row({0.5, 3.0}), pos, Matrix::Zero(1, 2)).isZero());

  auto sgn = act_state(QuantKind::BinaryActSigned, 1.0);
  Matrix gs = act_grad_input(row({-1.0, 0.0, 2.0}), sgn, row({1, 1, 1}));
  // mean 1/3: x' = [-4/3, -1/3, 5/3]
  CHECK(gs(0, 0) == 0.0);
  CHECK(gs(0, 1) == 1.0);
  CHECK(gs(0, 2) == 0.0);
}

TEST_CASE("activation quantizer input validation") {
  CHECK_THROWS_AS(quantize_activation(row({0.5, -0.1}), act_state(QuantKind::TernaryActNonNeg, 1)),
                  std::domain_error);
  CHECK_THROWS_AS(quantize_activation(row({0.5, -0.1}), act_state(QuantKind::BinaryActNonNeg, 1)),
                  std::domain_error);
  CHECK_THROWS_AS(quantize_activation(row({1.0}), act_state(QuantKind::TernaryActSigned, 0.0)),
                  std::invalid_argument);
  CHECK_THROWS_AS(quantize_activation(row({1.0}), act_state(QuantKind::TernaryWeight, 1.0)),
                  std::invalid_argument);
  CHECK_THROWS_AS(elastic_binarize(row({1.0}), act_state(QuantKind::TernaryActSigned, 1.0)),
                  std::invalid_argument);
  CHECK_THROWS_AS(isometric_ternarize(Matrix(1, 0)), std::invalid_argument);
  CHECK_THROWS_AS(quantize_weight(row({1.0}), QuantKind::TernaryActSigned), std::invalid_argument);
}

TEST_CASE("rounding is half away from zero") {
  auto pos = act_state(QuantKind::TernaryActNonNeg, 1.0);
  CHECK(levels_of(quantize_activation(row({0.5, 1.5}), pos)) == std::vector<int>{1, 2});
  auto sgn = act_state(QuantKind::TernaryActSigned, 1.0);
  CHECK(levels_of(quantize_activation(row({-0.5, 0.5}), sgn)) == std::vector<int>{-1, 1});
}

TEST_CASE("int8 helper") {
  auto q = int8_weight_quantize(row({-2.54, 1.0, 0.0}));
  CHECK(q.alpha[0] == doctest::Approx(0.02));
  CHECK(levels_of(q) == std::vector<int>{-127, 50, 0});
  auto s = act_state(QuantKind::Int8ActNonNeg, 0.01);
  CHECK(levels_of(quantize_activation(row({0.0, 1.0, 9.0}), s)) == std::vector<int>{0, 100, 255});
  CHECK(calibrate_alpha(row({-3.81, 1.0}), QuantKind::Int8ActSigned) == doctest::Approx(0.03));
}

TEST_CASE("calibrate_alpha mirrors the weight statistics") {
  const Matrix x = row({1.0, 3.0, -2.0, 6.0});  // mean 2, mean|x'| = 2.5
  CHECK(calibrate_alpha(x, QuantKind::TernaryActSigned) == doctest::Approx(10.0 / 3.0));
  CHECK(calibrate_alpha(x, QuantKind::BinaryActSigned) == doctest::Approx(2.5));
  CHECK(calibrate_alpha(Matrix::Constant(2, 2, 1.0), QuantKind::BinaryActSigned) == kAlphaEpsilon);
}

TEST_CASE("quant_entropy") {
  QuantizedTensor<double> q = isometric_ternarize(row({0.9, -0.9, 0.3, -0.3, 0, 0}));
  CHECK(quant_entropy(q) == doctest::Approx(std::log(3.0)));
  q.levels = LevelMatrix::Zero(1, 4);
  CHECK(quant_entropy(q) == 0.0);
  q.levels.resize(1, 4);
  q.levels << 0, 0, 1, -1;
  CHECK(quant_entropy(q) == doctest::Approx(1.0397).epsilon(1e-4));
  double total = 0;
  for (const auto& [l, p] : level_proportions(q)) total += p;
  CHECK(total == doctest::Approx(1.0));
}

// ---------------------------------------------------------------------------
// Properties.

TEST_CASE("forward quantizers match the scalar oracles") {
  const auto s = checks::forward_suite(200, 11);
  CHECK(s.rows == 200 * 8);
  CHECK(s.level_mismatches == 0);
  CHECK(s.max_abs_err <= 1e-12);
}

TEST_CASE("level-set closure on random and extreme inputs") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const double scale = std::pow(10.0, trial % 13 - 6);
    Matrix w = Matrix::Random(4, 37) * scale;
    for (auto k : {QuantKind::TernaryWeight, QuantKind::BaselineTWN}) {
      auto q = quantize_weight(w, k);
      CHECK(q.levels.minCoeff() >= -1);
      CHECK(q.levels.maxCoeff() <= 1);
    }
    for (auto k : {QuantKind::BinaryWeight, QuantKind::BaselineBWN}) {
      auto q = quantize_weight(w, k);
      CHECK((q.levels.array().abs() == 1).all());
    }
    for (auto k : {QuantKind::TernaryActSigned, QuantKind::BinaryActSigned,
                   QuantKind::TernaryActNonNeg, QuantKind::BinaryActNonNeg}) {
      const Matrix x = is_non_negative(k) ? Matrix(w.cwiseAbs()) : w;
      auto q = quantize_activation(x, act_state(k, 0.3 * scale));
      const auto r = level_range(k);
      CHECK(q.levels.minCoeff() >= r.min);
      CHECK(q.levels.maxCoeff() <= r.max);
      if (is_binary(k) && !is_non_negative(k)) CHECK((q.levels.array() != 0).all());
    }
    CHECK(quantize_weight(w, QuantKind::TernaryWeight).alpha.minCoeff() > 0);
  }
}

TEST_CASE("isometric outputs stay within alpha and binary levels are idempotent") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    const auto w = to_matrix(oracle::normal_row(rng, 64, 0.2, 1.5));
    for (auto k : {QuantKind::TernaryWeight, QuantKind::BinaryWeight}) {
      auto q = quantize_weight(w, k);
      CHECK(q.dequantize().cwiseAbs().maxCoeff() <= q.alpha[0]);
    }
    auto b = isometric_binarize(w);
    CHECK(isometric_binarize(b.dequantize()).levels == b.levels);
  }
}

TEST_CASE("isometric ternary round trip on balanced rows reproduces the dequantized row") {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 50; ++trial) {
    // Symmetric rows keep the mean at zero after quantization.
    auto half = oracle::normal_row(rng, 32);
    std::vector<double> w = half;
    for (double v : half) w.push_back(-v);
    auto q = isometric_ternarize(to_matrix(w));
    const Matrix dq = q.dequantize();
    auto again = isometric_ternarize(dq);
    CHECK(again.levels == q.levels);
    CHECK((again.dequantize() * (q.alpha[0] / again.alpha[0]) - dq).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("scale equivariance and shift invariance") {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(0.1, 10.0);
  for (int trial = 0; trial < 100; ++trial) {
    const Matrix w = to_matrix(oracle::normal_row(rng, 97));
    const double c = u(rng);
    for (auto k : {QuantKind::TernaryWeight, QuantKind::BinaryWeight}) {
      auto q = quantize_weight(w, k);
      auto scaled = quantize_weight(Matrix(w * c), k);
      CHECK(scaled.levels == q.levels);
      CHECK(scaled.alpha[0] == doctest::Approx(q.alpha[0] * c).epsilon(1e-12));
      // Shifts by a power of two keep the centred values exact.
      auto shifted = quantize_weight(Matrix(w.array() + 0.25), k);
      CHECK(shifted.levels == q.levels);
    }
  }
}

TEST_CASE("isometric binarization is balanced on continuous input") {
  std::mt19937_64 rng(8);
  const auto q = isometric_binarize(to_matrix(oracle::normal_row(rng, 100000, 3.0, 2.0)));
  const auto p = level_proportions(q);
  CHECK(std::fabs(p.at(1) - 0.5) < 0.01);
}

TEST_CASE("isometric ternary splits uniform rows into thirds") {
  const auto s = checks::uniform_proportions(100000, 9);
  CHECK(s.max_dev < 0.02);
}

TEST_CASE("isometric ternary entropy exceeds TWN on gaussian rows") {
  const auto s = checks::entropy_trials(100, 4096, 10);
  CHECK(s.mean_iso >= s.mean_twn);
  CHECK(s.wins >= 95);
}
