#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "beard/losses.hpp"
#include "gradcheck.hpp"
#include "support.hpp"

#include <cmath>

using namespace beard;

namespace {

FrameMask random_mask(std::size_t n, double p, std::mt19937_64& g) {
  FrameMask m(n);
  std::bernoulli_distribution b(p);
  for (std::size_t i = 0; i < n; ++i) m[i] = b(g);
  return m;
}

std::vector<int> random_labels(std::size_t n, int v, std::mt19937_64& g) {
  std::vector<int> out(n);
  for (auto& x : out) x = static_cast<int>(g() % static_cast<std::uint64_t>(v));
  return out;
}

// Per-frame softmax cross-entropy written out term by term.
double ce_oracle(const Matrix& logits, const std::vector<int>& labels, const FrameMask& mask) {
  double total = 0;
  int count = 0;
  for (Eigen::Index t = 0; t < logits.rows(); ++t) {
    if (!mask[t]) continue;
    long double mx = logits(t, 0);
    for (Eigen::Index j = 1; j < logits.cols(); ++j) mx = std::max<long double>(mx, logits(t, j));
    long double z = 0;
    for (Eigen::Index j = 0; j < logits.cols(); ++j) z += std::exp(static_cast<long double>(logits(t, j)) - mx);
    total += static_cast<double>(std::log(z) + mx - logits(t, labels[t]));
    ++count;
  }
  return total / count;
}

}  // namespace

TEST_CASE("prediction loss examples") {
  SUBCASE("saturated correct logits") {
    Matrix logits = Matrix::Zero(3, 5);
    const std::vector<int> labels{1, 4, 0};
    for (int t = 0; t < 3; ++t) logits(t, labels[t]) = 20.0;
    const double l = prediction_loss(logits, labels, {true, true, false});
    CHECK(l >= 0.0);
    CHECK(l < 1e-8);
  }

  SUBCASE("uniform logits give ln V") {
    const Matrix logits = Matrix::Constant(4, 2048, 0.37);
    CHECK(prediction_loss(logits, {0, 5, 9, 2047}, {true, false, true, true}) == doctest::Approx(std::log(2048.0)).epsilon(1e-12));
    CHECK(std::abs(std::log(2048.0) - 7.6246) < 1e-4);
  }

  SUBCASE("random instances match the per-frame oracle") {
    std::mt19937_64 g(4);
    for (int trial = 0; trial < 50; ++trial) {
      const Matrix logits = test::random_matrix(30, 17, trial, 3.0);
      const auto labels = random_labels(30, 17, g);
      auto mask = random_mask(30, 0.3, g);
      mask[trial % 30] = true;
      CHECK(prediction_loss(logits, labels, mask) == doctest::Approx(ce_oracle(logits, labels, mask)).epsilon(1e-12));
    }
  }

  SUBCASE("errors") {
    const Matrix logits = Matrix::Zero(2, 3);
    CHECK_THROWS_AS(prediction_loss(logits, {0, 1}, {false, false}), std::invalid_argument);
    CHECK_THROWS_AS(prediction_loss(logits, {0}, {true, true}), std::invalid_argument);
    CHECK_THROWS_AS(prediction_loss(logits, {0, 3}, {true, true}), std::invalid_argument);
  }
}

TEST_CASE("distillation loss examples") {
  const Matrix t = test::random_matrix(6, 5, 1);
  const FrameMask mask{false, true, false, false, true, false};
  CHECK(std::abs(distill_loss(t, t, mask)) < 1e-15);
  CHECK(distill_loss(-t, t, mask) == doctest::Approx(2.0).epsilon(1e-14));
  for (double c : {1e-3, 0.5, 7.0, 1e4}) CHECK(std::abs(distill_loss(c * t, t, mask)) < 1e-14);
  const Matrix s = test::random_matrix(6, 5, 2);
  const double l = distill_loss(s, t, mask);
  CHECK(l >= 0.0);
  CHECK(l <= 2.0);
  // Zero vectors fall back to the epsilon denominator: cosine 0, loss 1.
  CHECK(distill_loss(Matrix::Zero(6, 5), t, mask) == doctest::Approx(1.0));
  CHECK_THROWS_AS(distill_loss(s, t, FrameMask(6, true)), std::invalid_argument);
  CHECK_THROWS_AS(distill_loss(s, Matrix::Zero(5, 5), mask), std::invalid_argument);
}

TEST_CASE("combine") {
  const auto b = combine(1.0, 2.0, 3.0, {0.5, 0.1});
  CHECK(std::abs(b.total - 2.15) <= 1e-9);
  CHECK(b.l_q == 1.0);
  CHECK(b.l_d_ell == 2.0);
  CHECK(b.l_d_n == 3.0);
  CHECK(combine(1.25, 2.0, 3.0, {0.0, 0.1}).total == 1.25);
  std::mt19937_64 g(8);
  std::uniform_real_distribution<double> u(0.0, 10.0);
  for (int i = 0; i < 100; ++i) {
    const double q = u(g), a = u(g), n = u(g);
    CHECK(std::abs(combine(q, a, n, {1.0, 0.1}).total - (q + a + 0.1 * n)) <= 1e-12);
  }
  CHECK_THROWS_AS(combine(std::nan(""), 0, 0, {}), std::invalid_argument);
  CHECK_THROWS_AS(combine(1, INFINITY, 0, {}), std::invalid_argument);
  CHECK_THROWS_AS(combine(1, 0, 0, {-1.0, 0.1}), std::invalid_argument);
}

TEST_CASE("mask locality is exact") {
  std::mt19937_64 g(21);
  for (int trial = 0; trial < 100; ++trial) {
    auto mask = random_mask(20, 0.35, g);
    mask[0] = true;
    mask[1] = false;
    const Matrix s = test::random_matrix(20, 8, 1000 + trial);
    Matrix t = test::random_matrix(20, 8, 2000 + trial);
    const double before = distill_loss(s, t, mask);
    Matrix t2 = t;
    Matrix s2 = s;
    for (int r = 0; r < 20; ++r)
      if (mask[r]) t2.row(r) = test::random_matrix(1, 8, 3000 + trial * 20 + r, 10.0), s2.row(r) *= -3.0;
    CHECK(distill_loss(s, t2, mask) == before);
    CHECK(distill_loss(s2, t2, mask) == before);

    const Matrix logits = test::random_matrix(20, 11, 4000 + trial);
    const auto labels = random_labels(20, 11, g);
    const double lq = prediction_loss(logits, labels, mask);
    Matrix logits2 = logits;
    for (int r = 0; r < 20; ++r)
      if (!mask[r]) logits2.row(r) = test::random_matrix(1, 11, 5000 + trial * 20 + r, 50.0);
    CHECK(prediction_loss(logits2, labels, mask) == lq);
  }
}

TEST_CASE("tape versions agree with values and finite differences") {
  std::mt19937_64 g(2);
  auto mask = random_mask(9, 0.4, g);
  mask[0] = true;
  mask[1] = false;
  const auto labels = random_labels(9, 6, g);
  ParameterSet ps;
  ps.add("logits", test::random_matrix(9, 6, 1));
  ps.add("s", test::random_matrix(9, 4, 2));
  ps.add("t", test::random_matrix(9, 4, 3));
  {
    Tape tape;
    CHECK(prediction_loss(tape.param(ps.at("logits")), labels, mask).scalar() == prediction_loss(ps.at("logits").value, labels, mask));
    CHECK(distill_loss(tape.param(ps.at("s")), tape.param(ps.at("t")), mask).scalar() ==
          distill_loss(ps.at("s").value, ps.at("t").value, mask));
  }
  const auto r = test::finite_difference_check(ps, [&](Tape& tape, ParameterSet& p) {
    return add(prediction_loss(tape.param(p.at("logits")), labels, mask),
               distill_loss(tape.param(p.at("s")), tape.param(p.at("t")), mask));
  });
  CHECK(r.max_rel_error < 1e-6);
}

TEST_CASE("loss csv row") {
  CHECK(loss_csv_header() == "step,l_q,l_d_ell,l_d_n,total");
  const auto b = combine(0.1, 0.2, 0.3, {});
  const std::string row = loss_csv_row(7, b);
  CHECK(row.starts_with("7,0.10000000000000001,"));
  double vals[4];
  CHECK(std::sscanf(row.c_str(), "7,%lf,%lf,%lf,%lf", &vals[0], &vals[1], &vals[2], &vals[3]) == 4);
  CHECK(vals[3] == b.total);
}
