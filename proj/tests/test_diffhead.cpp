#include "doctest.h"

#include "discon/backbone.hpp"
#include "discon/diffhead.hpp"
#include "discon/gradcheck.hpp"
#include "discon/train.hpp"
#include "head_fixture.hpp"
#include "test_util.hpp"

#include <cmath>

using namespace discon;
using namespace discon::testing;

TEST_CASE("cosine schedule invariants") {
  const auto s = NoiseSchedule::cosine(100);
  CHECK(s.steps() == 100);
  CHECK(s.alpha_bar(1) > 0.99);
  CHECK(s.alpha_bar(100) < 0.05);
  double prod = 1.0;
  for (int t = 1; t <= 100; ++t) {
    CHECK(s.beta(t) > 0.0);
    if (t > 1) CHECK(s.alpha_bar(t) < s.alpha_bar(t - 1));
    prod *= 1.0 - s.beta(t);
    CHECK(std::abs(prod - s.alpha_bar(t)) < 1e-12);
  }
  CHECK_THROWS_AS(s.beta(0), std::out_of_range);
  CHECK_THROWS_AS(s.alpha_bar(101), std::out_of_range);
}

TEST_CASE("q_sample") {
  const auto s = NoiseSchedule::cosine(100);
  Rng rng(1);
  const Matrix x0 = random_matrix(rng, 3, 2);
  const Matrix eps = random_matrix(rng, 3, 2);
  SUBCASE("alpha_bar of one leaves x0 untouched") { CHECK(q_sample(x0, 1.0, eps) == x0); }
  SUBCASE("zero signal with a unit noise vector") {
    Matrix e1 = Matrix::Zero(1, 2);
    e1(0, 0) = 1.0;
    const Matrix xt = q_sample(Matrix::Zero(1, 2), 40, e1, s);
    CHECK(xt(0, 0) == doctest::Approx(std::sqrt(1.0 - s.alpha_bar(40))).epsilon(1e-15));
    CHECK(xt(0, 1) == 0.0);
  }
  SUBCASE("timestep outside [1, T] is rejected") {
    CHECK_THROWS_AS(q_sample(x0, 0, eps, s), std::out_of_range);
    CHECK_THROWS_AS(q_sample(x0, 101, eps, s), std::out_of_range);
  }
  SUBCASE("Monte Carlo moments") {
    const int n = 100000;
    const int t = 50;
    Matrix point(1, 2);
    point << 1.5, -2.0;
    Matrix noise(n, 2);
    for (Index i = 0; i < noise.size(); ++i) noise.data()[i] = rng.normal();
    const Matrix xt = q_sample(point.replicate(n, 1), t, noise, s);
    const RowVector mu = xt.colwise().mean();
    const Matrix centered = xt.rowwise() - mu;
    const Matrix cov = centered.transpose() * centered / (n - 1);
    const double ab = s.alpha_bar(t);
    const double var = 1.0 - ab;
    for (Index k = 0; k < 2; ++k) {
      CHECK(std::abs(mu(k) - std::sqrt(ab) * point(0, k)) < 3.0 * std::sqrt(var / n));
      CHECK(std::abs(cov(k, k) / var - 1.0) < 0.02);
    }
    CHECK(std::abs(cov(0, 1)) < 0.02 * var);
  }
}

TEST_CASE("diffusion loss under stub predictors") {
  const auto s = NoiseSchedule::cosine(100);
  Rng data_rng(2);
  const Matrix x0 = random_matrix(data_rng, 2500, 2);
  SUBCASE("a predictor returning the true noise has zero loss") {
    Graph g;
    Rng rng(3);
    auto oracle = [&](Var x_t, std::span<const int> t, Var) {
      // Recover eps from x_t = sqrt(ab) x0 + sqrt(1 - ab) eps, rows repeated per batch_mul.
      Matrix e(x_t.rows(), x_t.cols());
      for (Index r = 0; r < x_t.rows(); ++r) {
        const double ab = s.alpha_bar(t[static_cast<std::size_t>(r)]);
        e.row(r) = (x_t.value().row(r) - std::sqrt(ab) * x0.row(r % x0.rows())) / std::sqrt(1.0 - ab);
      }
      return g.constant(e);
    };
    const double loss = diffusion_loss(oracle, g.constant(Matrix::Zero(2500, 1)), x0, s, rng, 2).value()(0, 0);
    CHECK(loss < 1e-20);
  }
  SUBCASE("a predictor returning zero has loss near one per element") {
    Graph g;
    Rng rng(4);
    auto zero = [&](Var x_t, std::span<const int>, Var) { return g.constant(Matrix::Zero(x_t.rows(), x_t.cols())); };
    // 2500 rows x 2 dims x batch_mul 2 = 10^4 squared normals.
    const double loss = diffusion_loss(zero, g.constant(Matrix::Zero(2500, 1)), x0, s, rng, 2).value()(0, 0);
    CHECK(std::abs(loss - 1.0) < 0.05);
  }
}

TEST_CASE("diffusion loss gradient matches finite differences") {
  HeadFixture f(5, 8, 2, 3);
  randomize(f.params, 6);
  Rng data(7);
  const Matrix x0 = random_matrix(data, 5, 2);
  const Matrix z = random_matrix(data, 5, 3);
  auto values = f.params.values();
  const double err = grad_check_params(
      [&](const BoundParams& p) {
        Rng rng(8);
        return diffusion_loss(f.head, p, p.graph().constant(z), x0, f.schedule, rng, 2);
      },
      values, 1e-5);
  CHECK(err < 1e-6);
}

TEST_CASE("sampling is deterministic under seed") {
  HeadFixture f(9);
  randomize(f.params, 10, 0.1);
  Rng data(11);
  const Matrix z = random_matrix(data, 1, 4);
  const Matrix a = sample_token(f.head, f.params.values(), z, f.schedule, 0.7, 12);
  const Matrix b = sample_token(f.head, f.params.values(), z, f.schedule, 0.7, 12);
  CHECK(a == b);
  const Matrix c = sample_token(f.head, f.params.values(), z, f.schedule, 0.7, 13);
  CHECK(a != c);
}

TEST_CASE("head fitted to a point mass returns the point at near-zero temperature") {
  HeadFixture f(14);
  Matrix c(1, 2);
  c << 0.7, -1.2;
  fit_unconditional(f, [&](Rng&, int n) { return Matrix(c.replicate(n, 1)); }, 4000, 256, 3e-3);
  const Matrix x = sample_many(f, 8, 1e-9, 15);
  for (Index r = 0; r < x.rows(); ++r) CHECK((x.row(r) - c).norm() < 1e-3);
}

TEST_CASE("head fitted to a Gaussian matches its moments and orders variance by temperature") {
  HeadFixture f(16);
  RowVector mu(2);
  mu << 1.0, -0.5;
  const double sigma = 0.5;
  fit_unconditional(
      f,
      [&](Rng& rng, int n) {
        Matrix x(n, 2);
        for (Index i = 0; i < x.size(); ++i) x.data()[i] = sigma * rng.normal();
        return Matrix(x.rowwise() + mu);
      },
      4000, 256, 2e-3);

  const int n = 10000;
  const Matrix x = sample_many(f, n, 1.0, 17);
  const RowVector m = x.colwise().mean();
  const RowVector var = (x.rowwise() - m).array().square().colwise().sum() / (n - 1);
  for (Index k = 0; k < 2; ++k) {
    INFO("dim " << k << " mean " << m(k) << " var " << var(k));
    CHECK(std::abs(m(k) - mu(k)) < 3.0 * sigma / std::sqrt(n));
    CHECK(std::abs(var(k) / (sigma * sigma) - 1.0) < 0.10);
  }

  double prev = 0.0;
  for (double tau : {0.2, 0.6, 1.0}) {
    const Matrix y = sample_many(f, 1000, tau, 18);
    const RowVector ym = y.colwise().mean();
    const double v = (y.rowwise() - ym).array().square().sum() / (2.0 * 999);
    INFO("tau " << tau << " variance " << v);
    CHECK(v >= prev);
    prev = v;
  }
}

TEST_CASE("training halves the held-out diffusion loss on the default task") {
  const auto data = discon::testing::default_data(1200, 31);
  DisConConfig cfg;
  cfg.layers = 2;
  cfg.width = 32;
  cfg.heads = 2;
  cfg.z_dim = 32;
  cfg.head_width = 32;
  cfg.head_blocks = 2;
  DisConModel model(cfg, 32);
  TrainConfig tc;
  tc.epochs = 6;
  tc.batch_size = 32;
  tc.learning_rate = 2e-3;
  tc.warmup_steps = 20;
  tc.ema_decay = 0.99;
  const double before = evaluate_loss(model, model.params().values(), data.val_tokens, 64, 33);
  auto state = init_train_state(model, tc);
  train(model, state, data.train_tokens, nullptr, tc);
  const double after = evaluate_loss(model, state.ema.values(), data.val_tokens, 64, 33);
  INFO("before " << before << " after " << after);
  CHECK(after < 0.5 * before);
}
