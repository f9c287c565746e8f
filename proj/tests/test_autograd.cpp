#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "beard/autograd.hpp"
#include "beard/quantizer.hpp"
#include "gradcheck.hpp"
#include "support.hpp"

using namespace beard;

namespace {

// Contracts an op's output with fixed random weights so every output entry matters.
Var probe(Var out, std::uint64_t seed) {
  const Matrix w = test::random_matrix(out.rows(), out.cols(), seed);
  return sum(mul(out, out.tape()->constant(w)));
}

double check_unary(const std::function<Var(Var)>& op, Eigen::Index r, Eigen::Index c, std::uint64_t seed,
                   double input_scale = 1.0) {
  ParameterSet ps;
  ps.add("x", test::random_matrix(r, c, seed, input_scale));
  return test::finite_difference_check(ps, [&](Tape& t, ParameterSet& p) { return probe(op(t.param(p.at("x"))), seed + 1); })
      .max_rel_error;
}

double check_binary(const std::function<Var(Var, Var)>& op, Eigen::Index r1, Eigen::Index c1, Eigen::Index r2,
                    Eigen::Index c2, std::uint64_t seed) {
  ParameterSet ps;
  ps.add("a", test::random_matrix(r1, c1, seed));
  ps.add("b", test::random_matrix(r2, c2, seed + 7));
  return test::finite_difference_check(
             ps, [&](Tape& t, ParameterSet& p) { return probe(op(t.param(p.at("a")), t.param(p.at("b"))), seed + 1); })
      .max_rel_error;
}

constexpr double kTol = 1e-6;

}  // namespace

TEST_CASE("elementwise and matrix ops match finite differences") {
  CHECK(check_binary([](Var a, Var b) { return matmul(a, b); }, 3, 4, 4, 5, 1) < kTol);
  CHECK(check_binary([](Var a, Var b) { return matmul_nt(a, b); }, 3, 4, 5, 4, 2) < kTol);
  CHECK(check_binary([](Var a, Var b) { return add(a, b); }, 3, 4, 3, 4, 3) < kTol);
  CHECK(check_binary([](Var a, Var b) { return sub(a, b); }, 3, 4, 3, 4, 4) < kTol);
  CHECK(check_binary([](Var a, Var b) { return mul(a, b); }, 3, 4, 3, 4, 5) < kTol);
  CHECK(check_binary([](Var a, Var b) { return add_row(a, b); }, 3, 4, 1, 4, 6) < kTol);
  CHECK(check_binary([](Var a, Var b) { return mul_row(a, b); }, 3, 4, 1, 4, 7) < kTol);
  CHECK(check_unary([](Var a) { return scale(a, -2.5); }, 3, 4, 8) < kTol);
  CHECK(check_unary([](Var a) { return add_const(a, Matrix::Constant(3, 4, 0.3)); }, 3, 4, 9) < kTol);
  CHECK(check_unary([](Var a) { return mean(a); }, 3, 4, 10) < kTol);
}

TEST_CASE("nonlinear ops match finite differences") {
  CHECK(check_unary([](Var a) { return gelu(a); }, 4, 5, 11, 2.0) < 1e-5);
  CHECK(check_unary([](Var a) { return softmax_rows(a); }, 4, 5, 12) < 1e-5);
  CHECK(check_unary([](Var a) { return layer_norm_rows(a); }, 4, 6, 13) < 1e-5);
  CHECK(check_unary([](Var a) { return standardize_rows(a); }, 4, 6, 14) < 1e-5);
}

TEST_CASE("structural ops match finite differences") {
  CHECK(check_unary([](Var a) { return slice_cols(a, 1, 3); }, 4, 5, 20) < kTol);
  CHECK(check_unary([](Var a) { return slice_rows(a, 1, 2); }, 4, 5, 21) < kTol);
  CHECK(check_unary([](Var a) { return concat_cols({a, scale(a, 2.0)}); }, 3, 2, 22) < kTol);
  CHECK(check_unary([](Var a) { return concat_rows({a, gelu(a)}); }, 3, 2, 23) < 1e-5);
  CHECK(check_unary([](Var a) { return gather_rows(a, {2, 0, 2, 1}); }, 3, 4, 24) < kTol);
  CHECK(check_unary([](Var a) { return im2col(a, 3, 2, 1); }, 7, 3, 25) < kTol);
  CHECK(check_unary([](Var a) { return im2col(a, 3, 1, 1); }, 5, 2, 26) < kTol);
}

TEST_CASE("im2col layout") {
  Tape t;
  Matrix x(3, 1);
  x << 1, 2, 3;
  const Matrix cols = im2col(t.constant(x), 3, 2, 1).value();
  Matrix expect(2, 3);
  expect << 0, 1, 2, 2, 3, 0;
  CHECK(cols == expect);
}

TEST_CASE("standardize_rows forward equals normalize_vector") {
  Tape t;
  Matrix x = test::random_matrix(5, 7, 3, 4.0);
  x.row(2).setConstant(3.0);
  const Matrix y = standardize_rows(t.constant(x)).value();
  for (Eigen::Index r = 0; r < 5; ++r) CHECK(y.row(r) == normalize_vector(RowVector(x.row(r))));
}

TEST_CASE("sum of one matrix has an all-ones gradient and nothing elsewhere") {
  ParameterSet ps;
  ps.add("w", test::random_matrix(3, 4, 1));
  ps.add("other", test::random_matrix(2, 2, 2));
  ps.zero_grad();
  Tape t;
  const Var w = t.param(ps.at("w"));
  const Var o = t.param(ps.at("other"));
  (void)matmul(o, o);  // on the tape, not on the loss path
  t.backward(sum(w));
  CHECK(ps.at("w").grad == Matrix::Ones(3, 4));
  CHECK(ps.at("other").grad == Matrix::Zero(2, 2));
}

TEST_CASE("gradients accumulate over repeated uses") {
  ParameterSet ps;
  ps.add("w", test::random_matrix(2, 2, 5));
  ps.zero_grad();
  Tape t;
  const Var w = t.param(ps.at("w"));
  t.backward(sum(add(w, add(w, w))));
  CHECK(ps.at("w").grad == Matrix::Constant(2, 2, 3.0));
}

TEST_CASE("constants receive no gradient and opaque nodes throw") {
  ParameterSet ps;
  ps.add("w", test::random_matrix(2, 2, 5));
  ps.zero_grad();
  Tape t;
  const Var w = t.param(ps.at("w"));
  const Var c = t.constant(Matrix::Ones(2, 2));
  CHECK_FALSE(c.requires_grad());
  CHECK(w.requires_grad());
  const Var opaque = t.custom("mystery", w.value() * 2.0, {w}, nullptr);
  try {
    t.backward(sum(opaque));
    FAIL("expected UnsupportedOp");
  } catch (const UnsupportedOp& e) {
    CHECK(std::string(e.what()).find("mystery") != std::string::npos);
  }
  // An opaque node that only sees constants never needs a gradient rule.
  Tape t2;
  const Var w2 = t2.param(ps.at("w"));
  const Var frozen = t2.custom("frozen", Matrix::Ones(2, 2), {t2.constant(Matrix::Ones(2, 2))}, nullptr);
  CHECK_NOTHROW(t2.backward(sum(mul(w2, frozen))));
}

TEST_CASE("shape errors are reported") {
  Tape t;
  const Var a = t.constant(Matrix::Ones(2, 3));
  CHECK_THROWS_AS(matmul(a, a), std::invalid_argument);
  CHECK_THROWS_AS(add(a, t.constant(Matrix::Ones(3, 2))), std::invalid_argument);
  CHECK_THROWS_AS(slice_cols(a, 2, 2), std::invalid_argument);
  CHECK_THROWS_AS(gather_rows(a, {5}), std::invalid_argument);
}

TEST_CASE("parameter set copies are deep and hashes track content") {
  ParameterSet a;
  a.add("x", Matrix::Ones(2, 2));
  ParameterSet b = a;
  CHECK(a.content_hash() == b.content_hash());
  b.at("x").value(0, 0) = 2.0;
  CHECK(a.at("x").value(0, 0) == 1.0);
  CHECK(a.content_hash() != b.content_hash());
  CHECK_THROWS(a.add("x", Matrix::Ones(1, 1)));
  CHECK(a.scalar_count() == 4);
}
