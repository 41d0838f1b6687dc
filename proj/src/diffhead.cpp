#include "discon/diffhead.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <stdexcept>

namespace discon {

NoiseSchedule NoiseSchedule::cosine(int steps, double offset, double max_beta) {
  if (steps < 1) throw std::invalid_argument("noise schedule needs at least one step");
  auto f = [&](double t) {
    const double c = std::cos((t / steps + offset) / (1.0 + offset) * std::numbers::pi / 2.0);
    return c * c;
  };
  NoiseSchedule s;
  double prod = 1.0;
  for (int t = 1; t <= steps; ++t) {
    const double beta = std::min(1.0 - f(t) / f(t - 1), max_beta);
    prod *= 1.0 - beta;
    s.betas_.push_back(beta);
    s.alpha_bars_.push_back(prod);
  }
  return s;
}

double NoiseSchedule::beta(int t) const {
  if (t < 1 || t > steps()) throw std::out_of_range("timestep " + std::to_string(t) + " outside [1, T]");
  return betas_[static_cast<std::size_t>(t - 1)];
}

double NoiseSchedule::alpha_bar(int t) const {
  if (t == 0) return 1.0;
  if (t < 0 || t > steps()) throw std::out_of_range("timestep " + std::to_string(t) + " outside [0, T]");
  return alpha_bars_[static_cast<std::size_t>(t - 1)];
}

double NoiseSchedule::posterior_variance(int t) const {
  if (t < 2 || t > steps()) throw std::out_of_range("posterior variance needs t in [2, T]");
  return beta(t) * (1.0 - alpha_bar(t - 1)) / (1.0 - alpha_bar(t));
}

Matrix q_sample(const Matrix& x0, double alpha_bar, const Matrix& eps) {
  if (x0.rows() != eps.rows() || x0.cols() != eps.cols()) {
    throw ShapeError("q_sample: x0 " + shape_string(x0) + " vs eps " + shape_string(eps));
  }
  if (!(alpha_bar >= 0.0 && alpha_bar <= 1.0)) throw std::out_of_range("alpha_bar outside [0, 1]");
  return std::sqrt(alpha_bar) * x0 + std::sqrt(1.0 - alpha_bar) * eps;
}

Matrix q_sample(const Matrix& x0, int t, const Matrix& eps, const NoiseSchedule& schedule) {
  if (t < 1 || t > schedule.steps()) throw std::out_of_range("timestep " + std::to_string(t) + " outside [1, T]");
  return q_sample(x0, schedule.alpha_bar(t), eps);
}

DiffHead::DiffHead(ParamSet& params, const std::string& name, const DiffHeadConfig& config, Rng& rng)
    : config_(config) {
  if (config.token_dim < 1 || config.cond_dim < 1 || config.width < 1 || config.blocks < 0) {
    throw std::invalid_argument("diffusion head: dims must be positive");
  }
  const Index w = config.width;
  time_fc1_ = make_linear(params, name + ".time_fc1", w, w, rng);
  time_fc2_ = make_linear(params, name + ".time_fc2", w, w, rng);
  cond_proj_ = make_linear(params, name + ".cond_proj", config.cond_dim, w, rng);
  in_proj_ = make_linear(params, name + ".in_proj", config.token_dim, w, rng);
  for (int b = 0; b < config.blocks; ++b) {
    const std::string n = name + ".block" + std::to_string(b);
    Block blk;
    blk.norm = make_layer_norm(params, n + ".norm", w);
    blk.modulation = make_linear(params, n + ".modulation", w, 3 * w, rng);
    blk.fc1 = make_linear(params, n + ".fc1", w, w, rng);
    blk.fc2 = make_linear(params, n + ".fc2", w, w, rng);
    blocks_.push_back(blk);
  }
  final_modulation_ = make_linear(params, name + ".final_modulation", w, 2 * w, rng);
  out_ = make_linear(params, name + ".out", w, config.token_dim, rng);
  params.value(out_.weight).setZero();
}

Var DiffHead::predict(const BoundParams& p, Var x_t, std::span<const int> t, Var z) const {
  Graph& g = p.graph();
  const Index n = x_t.rows();
  if (static_cast<Index>(t.size()) != n || z.rows() != n) {
    throw ShapeError("diffusion head: x_t " + shape_string(x_t.value()) + ", z " + shape_string(z.value()) +
                     ", " + std::to_string(t.size()) + " timesteps");
  }
  // The time MLP runs once per distinct timestep.
  std::map<int, int> slot;
  for (int s : t) slot.emplace(s, 0);
  std::vector<int> distinct;
  for (auto& [s, i] : slot) {
    i = static_cast<int>(distinct.size());
    distinct.push_back(s);
  }
  std::vector<int> rows(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) rows[i] = slot[t[i]];
  Var temb = g.constant(timestep_features(distinct, config_.width));
  temb = apply(time_fc2_, p, gelu(apply(time_fc1_, p, temb)));
  Var c = gelu(add(gather_rows(temb, rows), apply(cond_proj_, p, z)));

  Var ones = g.constant(Matrix::Ones(1, config_.width));
  Var h = apply(in_proj_, p, x_t);
  for (const auto& blk : blocks_) {
    auto mod = split_cols(apply(blk.modulation, p, c), 3);
    Var u = add(mul(apply(blk.norm, p, h), add(mod[1], ones)), mod[0]);
    u = apply(blk.fc2, p, gelu(apply(blk.fc1, p, u)));
    h = add(h, mul(mod[2], u));
  }
  auto mod = split_cols(apply(final_modulation_, p, c), 2);
  Var u = add(mul(layer_norm(h), add(mod[1], ones)), mod[0]);
  return apply(out_, p, u);
}

Var diffusion_loss(const EpsPredictor& predict, Var z, const Matrix& x0, const NoiseSchedule& schedule,
                   Rng& rng, int batch_mul) {
  if (batch_mul < 1) throw std::invalid_argument("batch_mul must be >= 1");
  if (z.rows() != x0.rows()) {
    throw ShapeError("diffusion_loss: z " + shape_string(z.value()) + " vs x0 " + shape_string(x0));
  }
  Graph& g = *z.graph;
  const Index n = x0.rows() * batch_mul;
  const Index d = x0.cols();
  std::vector<int> src(static_cast<std::size_t>(n));
  std::vector<int> t(static_cast<std::size_t>(n));
  Matrix eps(n, d), x_t(n, d);
  for (Index r = 0; r < n; ++r) {
    const Index i = r % x0.rows();
    src[static_cast<std::size_t>(r)] = static_cast<int>(i);
    const int step = 1 + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(schedule.steps())));
    t[static_cast<std::size_t>(r)] = step;
    for (Index k = 0; k < d; ++k) eps(r, k) = rng.normal();
    const double ab = schedule.alpha_bar(step);
    x_t.row(r) = std::sqrt(ab) * x0.row(i) + std::sqrt(1.0 - ab) * eps.row(r);
  }
  Var z_rep = batch_mul == 1 ? z : gather_rows(z, src);
  Var pred = predict(g.constant(std::move(x_t)), t, z_rep);
  Var loss = mse(pred, g.constant(std::move(eps)));
  if (!std::isfinite(loss.value()(0, 0))) throw NumericError("diffusion_loss: non-finite loss");
  return loss;
}

Var diffusion_loss(const DiffHead& head, const BoundParams& p, Var z, const Matrix& x0,
                   const NoiseSchedule& schedule, Rng& rng, int batch_mul) {
  return diffusion_loss([&](Var x_t, std::span<const int> t, Var zz) { return head.predict(p, x_t, t, zz); }, z,
                        x0, schedule, rng, batch_mul);
}

Matrix sample_tokens(const DiffHead& head, const std::vector<Matrix>& weights, const Matrix& z,
                     const NoiseSchedule& schedule, double temperature, std::span<Rng> streams) {
  if (!(temperature > 0.0)) throw std::invalid_argument("temperature must be > 0");
  const Index n = z.rows();
  const Index d = head.config().token_dim;
  if (static_cast<Index>(streams.size()) != n) throw std::invalid_argument("sample_tokens: one stream per row");
  Matrix x(n, d);
  for (Index r = 0; r < n; ++r) {
    for (Index k = 0; k < d; ++k) x(r, k) = temperature * streams[static_cast<std::size_t>(r)].normal();
  }
  if (n == 0) return x;
  std::vector<int> t(static_cast<std::size_t>(n));
  for (int step = schedule.steps(); step >= 1; --step) {
    std::fill(t.begin(), t.end(), step);
    Graph g;
    BoundParams p(g, weights, false);
    const Matrix eps = head.predict(p, g.constant(x), t, g.constant(z)).value();
    const double beta = schedule.beta(step);
    const double ab = schedule.alpha_bar(step);
    x = (x - beta / std::sqrt(1.0 - ab) * eps) / std::sqrt(1.0 - beta);
    if (step > 1) {
      const double sd = temperature * std::sqrt(schedule.beta(step));
      for (Index r = 0; r < n; ++r) {
        for (Index k = 0; k < d; ++k) x(r, k) += sd * streams[static_cast<std::size_t>(r)].normal();
      }
    }
  }
  return x;
}

Matrix sample_token(const DiffHead& head, const std::vector<Matrix>& weights, const Matrix& z_row,
                    const NoiseSchedule& schedule, double temperature, std::uint64_t seed) {
  Rng stream(seed);
  return sample_tokens(head, weights, z_row, schedule, temperature, std::span<Rng>(&stream, 1));
}

}  // namespace discon
