#include "discon/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace discon {

namespace {

void check_step(double step) {
  if (!(step > 0.0 && step <= 1e-2)) {
    throw std::invalid_argument("grad_check: step must lie in (0, 1e-2], got " + std::to_string(step));
  }
}

double eval_scalar(const Var& v, const char* where) {
  const Matrix& m = v.value();
  if (m.size() != 1) throw ShapeError(std::string(where) + ": function must return a scalar");
  const double y = m(0, 0);
  if (!std::isfinite(y)) throw NumericError(std::string(where) + ": non-finite function value");
  return y;
}

double rel_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(1.0, std::abs(numeric));
}

}  // namespace

double grad_check(const ScalarFunction& f, const Matrix& point, double step) {
  check_step(step);
  Matrix analytic;
  {
    Graph g;
    Var x = g.variable(point);
    Var y = f(g, x);
    eval_scalar(y, "grad_check");
    analytic = g.backward(y)[x];
  }
  auto value_at = [&](const Matrix& p) {
    Graph g;
    Var x = g.constant(p);
    return eval_scalar(f(g, x), "grad_check");
  };
  double worst = 0.0;
  Matrix p = point;
  for (Index i = 0; i < p.size(); ++i) {
    const double orig = p.data()[i];
    p.data()[i] = orig + step;
    const double fp = value_at(p);
    p.data()[i] = orig - step;
    const double fm = value_at(p);
    p.data()[i] = orig;
    worst = std::max(worst, rel_error(analytic.data()[i], (fp - fm) / (2.0 * step)));
  }
  return worst;
}

double grad_check_params(const ParamLoss& f, std::vector<Matrix>& params, double step,
                         std::size_t max_coords, std::uint64_t seed) {
  check_step(step);
  std::vector<Matrix> analytic;
  {
    Graph g;
    BoundParams p(g, params, true);
    Var y = f(p);
    eval_scalar(y, "grad_check_params");
    analytic = p.gradients(g.backward(y));
  }
  auto value = [&] {
    Graph g;
    BoundParams p(g, params, false);
    return eval_scalar(f(p), "grad_check_params");
  };

  std::vector<std::pair<std::size_t, Index>> coords;
  for (std::size_t k = 0; k < params.size(); ++k) {
    for (Index i = 0; i < params[k].size(); ++i) coords.emplace_back(k, i);
  }
  if (max_coords > 0 && coords.size() > max_coords) {
    Rng rng(seed);
    rng.shuffle(coords);
    coords.resize(max_coords);
  }

  double worst = 0.0;
  for (auto [k, i] : coords) {
    double& slot = params[k].data()[i];
    const double orig = slot;
    slot = orig + step;
    const double fp = value();
    slot = orig - step;
    const double fm = value();
    slot = orig;
    worst = std::max(worst, rel_error(analytic[k].data()[i], (fp - fm) / (2.0 * step)));
  }
  return worst;
}

std::vector<GradCheckEntry> op_gradcheck_suite(std::uint64_t seed, double step) {
  Rng rng(seed);
  auto random = [&](Index r, Index c) {
    Matrix m(r, c);
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
    return m;
  };
  std::vector<GradCheckEntry> out;
  auto run = [&](std::string name, const ScalarFunction& f, const Matrix& point) {
    out.push_back({std::move(name), grad_check(f, point, step)});
  };
  // Fixed random weights turn each op into a scalar function of one input.
  const Matrix w34 = random(3, 4);
  const Matrix w35 = random(3, 5);
  const Matrix row5 = random(1, 5);
  const Matrix proj = random(5, 1);
  const Matrix w55 = random(5, 5);
  const Matrix row5b = random(1, 5);
  auto readout = [proj](Graph& g, Var y) {
    Var w = g.constant(Matrix::Ones(y.cols(), 1));
    if (y.cols() == proj.rows()) w = g.constant(proj);
    return sum(mul(matmul(y, w), matmul(y, w)));
  };

  run("matmul", [&](Graph& g, Var x) { return readout(g, matmul(x, g.constant(w55))); },
      random(3, 5));
  run("add", [&](Graph& g, Var x) { return readout(g, add(x, g.constant(w35))); }, random(3, 5));
  run("add_broadcast", [&](Graph& g, Var x) { return readout(g, add(g.constant(w35), x)); }, random(1, 5));
  run("sub", [&](Graph& g, Var x) { return readout(g, sub(g.constant(w35), x)); }, random(3, 5));
  run("mul", [&](Graph& g, Var x) { return readout(g, mul(x, g.constant(w35))); }, random(3, 5));
  run("mul_broadcast", [&](Graph& g, Var x) { return readout(g, mul(g.constant(w35), x)); }, random(1, 5));
  run("scale", [&](Graph& g, Var x) { return readout(g, scale(x, -1.7)); }, random(3, 5));
  run("transpose", [&](Graph& g, Var x) { return readout(g, transpose(x)); }, random(5, 3));
  {
    const std::vector<int> rows{2, 0, 2, 1};
    run("gather_rows", [&](Graph& g, Var x) { return readout(g, gather_rows(x, rows)); }, random(3, 5));
    run("embedding", [&](Graph& g, Var x) { return readout(g, embedding(x, rows)); }, random(3, 5));
  }
  run("concat_rows", [&](Graph& g, Var x) { return readout(g, concat_rows({x, g.constant(w35), x})); },
      random(2, 5));
  run("concat_cols", [&](Graph& g, Var x) { return readout(g, concat_cols({x, g.constant(w34)})); },
      random(3, 1));
  run("split", [&](Graph& g, Var x) {
    auto parts = split_cols(x, 2);
    return readout(g, mul(parts[0], parts[1]));
  }, random(3, 10));
  run("softmax", [&](Graph& g, Var x) { return readout(g, softmax(x)); }, random(3, 5));
  run("layer_norm", [&](Graph& g, Var x) {
    return readout(g, layer_norm(x, g.constant(row5), g.constant(row5b)));
  }, random(3, 5));
  run("layer_norm_affine", [&](Graph& g, Var x) {
    return readout(g, layer_norm(g.constant(w35), x, g.constant(row5)));
  }, random(1, 5));
  run("gelu", [&](Graph& g, Var x) { return readout(g, gelu(x)); }, random(3, 5));
  run("mse", [&](Graph& g, Var x) { return mse(x, g.constant(w35)); }, random(3, 5));
  {
    const std::vector<int> targets{4, 0, 2};
    run("cross_entropy", [&](Graph&, Var x) { return cross_entropy(x, targets); }, random(3, 5));
  }
  {
    const Matrix mask = causal_mask(3);
    const Matrix kfix = random(6, 4);
    const Matrix vfix = random(6, 4);
    run("attention", [&](Graph& g, Var x) {
      return readout(g, attention(x, g.constant(kfix), g.constant(vfix), 3, 2, mask));
    }, random(6, 4));
    run("attention_kv", [&](Graph& g, Var x) {
      return readout(g, attention(g.constant(kfix), x, x, 3, 2, Matrix()));
    }, random(6, 4));
  }
  return out;
}

}  // namespace discon
