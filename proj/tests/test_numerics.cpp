#include "doctest.h"

#include "discon/gradcheck.hpp"
#include "discon/nn.hpp"
#include "discon/numerics.hpp"
#include "discon/rng.hpp"

#include <cmath>
#include <numbers>

using namespace discon;

namespace {

Matrix random_matrix(Rng& rng, Index r, Index c) {
  Matrix m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
  return m;
}

Matrix row(std::initializer_list<double> v) {
  Matrix m(1, static_cast<Index>(v.size()));
  Index i = 0;
  for (double x : v) m(0, i++) = x;
  return m;
}

}  // namespace

TEST_CASE("softmax of uniform logits is uniform") {
  Graph g;
  Var y = softmax(g.constant(Matrix::Zero(1, 4)));
  for (Index i = 0; i < 4; ++i) CHECK(y.value()(0, i) == doctest::Approx(0.25).epsilon(1e-15));
}

TEST_CASE("identity matmul returns the operand") {
  Rng rng(1);
  Graph g;
  const Matrix a = random_matrix(rng, 3, 7);
  Var y = matmul(g.constant(Matrix::Identity(3, 3)), g.constant(a));
  CHECK(y.value() == a);
}

TEST_CASE("cross entropy of uniform logits is log V") {
  Graph g;
  const std::vector<int> t{5};
  Var y = cross_entropy(g.constant(Matrix::Zero(1, 16)), t);
  CHECK(y.value()(0, 0) == doctest::Approx(std::log(16.0)).epsilon(1e-14));
  CHECK(y.value()(0, 0) == doctest::Approx(2.7726).epsilon(1e-4));
}

TEST_CASE("shape mismatch names both shapes") {
  Graph g;
  Var a = g.constant(Matrix::Zero(2, 3));
  Var b = g.constant(Matrix::Zero(4, 5));
  try {
    matmul(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
    CHECK(msg.find("[4x5]") != std::string::npos);
  }
  CHECK_THROWS_AS(add(a, b), ShapeError);
  CHECK_THROWS_AS(mse(a, b), ShapeError);
}

TEST_CASE("non-finite output names the op") {
  Graph g;
  Var a = g.constant(Matrix::Constant(1, 2, 1e200));
  try {
    mul(a, a);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("'mul'") != std::string::npos);
  }
}

TEST_CASE("backward of sum of squares") {
  Graph g;
  Var x = g.variable(row({1, 2, 3}));
  Var loss = sum(mul(x, x));
  const auto grads = g.backward(loss);
  CHECK(grads[x] == row({2, 4, 6}));
}

TEST_CASE("mse of a variable with itself has zero gradient") {
  Graph g;
  Var x = g.variable(row({1, -2, 3}));
  const auto grads = g.backward(mse(x, x));
  CHECK(grads[x].isZero(0.0));
}

TEST_CASE("backward contract") {
  SUBCASE("non-scalar loss is rejected") {
    Graph g;
    Var x = g.variable(row({1, 2}));
    CHECK_THROWS_AS(g.backward(mul(x, x)), ShapeError);
  }
  SUBCASE("graph is consumed") {
    Graph g;
    Var x = g.variable(row({1, 2}));
    Var loss = sum(x);
    g.backward(loss);
    CHECK(g.consumed());
    CHECK_THROWS(g.backward(loss));
    CHECK_THROWS(scale(x, 2.0));
  }
  SUBCASE("every requires_grad leaf gets a gradient of matching shape") {
    Graph g;
    Var x = g.variable(Matrix::Ones(2, 3));
    Var unused = g.variable(Matrix::Ones(4, 1));
    const auto grads = g.backward(sum(x));
    CHECK(grads[x].rows() == 2);
    CHECK(grads[unused].rows() == 4);
    CHECK(grads[unused].isZero(0.0));
  }
}

TEST_CASE("two-layer MLP matches central differences") {
  Rng rng(7);
  std::vector<Matrix> params{random_matrix(rng, 4, 6), random_matrix(rng, 1, 6),
                             random_matrix(rng, 6, 3), random_matrix(rng, 1, 3)};
  const Matrix input = random_matrix(rng, 5, 4);
  const Matrix target = random_matrix(rng, 5, 3);
  auto loss = [&](const BoundParams& p) {
    Graph& g = p.graph();
    Var h = gelu(add(matmul(g.constant(input), p[0]), p[1]));
    return mse(add(matmul(h, p[2]), p[3]), g.constant(target));
  };
  CHECK(grad_check_params(loss, params, 1e-5) < 1e-6);
}

TEST_CASE("grad_check") {
  SUBCASE("x squared at 3") {
    const double err = grad_check([](Graph&, Var x) { return sum(mul(x, x)); }, row({3.0}), 1e-5);
    CHECK(err < 1e-9);
  }
  SUBCASE("cross entropy of a linear layer") {
    Rng rng(11);
    const Matrix input = random_matrix(rng, 4, 3);
    const std::vector<int> targets{0, 4, 2, 2};
    const double err = grad_check(
        [&](Graph& g, Var w) { return cross_entropy(matmul(g.constant(input), w), targets); },
        random_matrix(rng, 3, 5), 1e-5);
    CHECK(err < 1e-6);
  }
  SUBCASE("wrong backward rule is caught") {
    // y = x^2 with a backward that forgets the factor 2.
    auto bad_square = [](Graph& g, Var x) {
      Matrix v = x.value().cwiseProduct(x.value());
      Var y = g.record("bad_square", std::move(v), {x}, [x](const Matrix& go, Graph::GradSink& s) {
        s.add(0, go.cwiseProduct(x.value()));
      });
      return sum(y);
    };
    CHECK(grad_check(bad_square, row({1.5, -0.5, 2.0}), 1e-5) > 1e-2);
  }
  SUBCASE("step outside (0, 1e-2] is rejected") {
    auto f = [](Graph&, Var x) { return sum(x); };
    CHECK_THROWS_AS(grad_check(f, row({1.0}), 0.0), std::invalid_argument);
    CHECK_THROWS_AS(grad_check(f, row({1.0}), 0.1), std::invalid_argument);
  }
  SUBCASE("non-finite value at a perturbed point is an error") {
    auto sqrt_sum = [](Graph& g, Var x) {
      Matrix v = x.value().array().sqrt();
      return sum(g.record("sqrt", std::move(v), {x}, [x](const Matrix& go, Graph::GradSink& s) {
        s.add(0, go.cwiseQuotient(2.0 * x.value().cwiseSqrt()));
      }));
    };
    CHECK_THROWS_AS(grad_check(sqrt_sum, row({1e-7}), 1e-5), NumericError);
  }
}

TEST_CASE("every op passes the finite-difference oracle") {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    for (const auto& entry : op_gradcheck_suite(seed)) {
      INFO(entry.name << " seed " << seed);
      CHECK(entry.max_rel_error < 1e-6);
    }
  }
}

TEST_CASE("softmax rows are positive and sum to one") {
  Rng rng(5);
  Graph g;
  Var y = softmax(g.constant(5.0 * random_matrix(rng, 20, 9)));
  for (Index r = 0; r < 20; ++r) {
    CHECK(std::abs(y.value().row(r).sum() - 1.0) < 1e-12);
    CHECK(y.value().row(r).minCoeff() > 0.0);
  }
}

TEST_CASE("layer norm standardizes rows before the affine") {
  Rng rng(6);
  Graph g;
  Matrix x = 3.0 * random_matrix(rng, 10, 16);
  x.array() += 4.0;
  Var y = layer_norm(g.constant(x), 1e-14);
  for (Index r = 0; r < 10; ++r) {
    const double m = y.value().row(r).mean();
    const double var = (y.value().row(r).array() - m).square().mean();
    CHECK(std::abs(m) < 1e-10);
    CHECK(std::abs(var - 1.0) < 1e-10);
  }
}

TEST_CASE("backward is bitwise deterministic across rebuilt graphs") {
  auto run = [] {
    Rng rng(99);
    ParamSet ps;
    Rng init = rng.split(1);
    auto block = make_transformer_block(ps, "b", 8, 2, 2, init);
    const Matrix x = random_matrix(rng, 12, 8);
    Graph g;
    BoundParams p(g, ps, true);
    Var y = apply(block, p, g.constant(x), 4, causal_mask(4));
    return p.gradients(g.backward(mean(mul(y, y))));
  };
  const auto a = run();
  const auto b = run();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("attention respects the causal mask") {
  Rng rng(3);
  const Matrix q = random_matrix(rng, 8, 4);
  Matrix k = random_matrix(rng, 8, 4);
  Matrix v = random_matrix(rng, 8, 4);
  auto run = [&](const Matrix& kk, const Matrix& vv) {
    Graph g;
    return Matrix(attention(g.constant(q), g.constant(kk), g.constant(vv), 4, 2, causal_mask(4)).value());
  };
  const Matrix base = run(k, v);
  // Perturb position 2 of the first sequence: rows 0 and 1 must not move.
  k.row(2).array() += 1.0;
  v.row(2).array() += 1.0;
  const Matrix moved = run(k, v);
  CHECK(moved.topRows(2) == base.topRows(2));
  CHECK((moved.row(2) - base.row(2)).norm() > 0.0);
  CHECK(moved.bottomRows(4) == base.bottomRows(4));
}

TEST_CASE("rng") {
  SUBCASE("streams are reproducible and splits differ") {
    Rng a(42), b(42);
    for (int i = 0; i < 10; ++i) CHECK(a.next_u64() == b.next_u64());
    Rng s1 = a.split(1), s2 = a.split(2);
    CHECK(s1.next_u64() != s2.next_u64());
  }
  SUBCASE("restoring (key, counter) resumes the stream") {
    Rng a(5);
    a.normal();
    Rng b(a.key(), a.counter());
    CHECK(a.normal() == b.normal());
  }
  SUBCASE("normal moments") {
    Rng r(8);
    double s = 0, s2 = 0;
    const int n = 200000;
    for (int i = 0; i < n; ++i) {
      const double x = r.normal();
      s += x;
      s2 += x * x;
    }
    CHECK(std::abs(s / n) < 4.0 / std::sqrt(n));
    CHECK(std::abs(s2 / n - 1.0) < 0.02);
  }
  SUBCASE("uniform_int stays in range and covers it") {
    Rng r(9);
    std::vector<int> hits(7, 0);
    for (int i = 0; i < 7000; ++i) ++hits[r.uniform_int(7)];
    for (int h : hits) CHECK(h > 800);
  }
}
