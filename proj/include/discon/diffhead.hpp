#pragma once

// Per-token denoising diffusion head: predicts the injected noise of a
// corrupted token given its timestep and a conditioning vector z.

#include "discon/nn.hpp"

#include <functional>
#include <span>
#include <vector>

namespace discon {

class NoiseSchedule {
 public:
  // Cosine alpha-bar schedule; alpha_bar is recomputed as the running product
  // of the clipped betas so the two stay exactly consistent.
  static NoiseSchedule cosine(int steps, double offset = 0.008, double max_beta = 0.5);

  int steps() const { return static_cast<int>(betas_.size()); }
  // 1-based; t in [1, T].
  double beta(int t) const;
  // t in [0, T]; alpha_bar(0) == 1.
  double alpha_bar(int t) const;
  // Variance of q(x_{t-1} | x_t, x_0), t in [2, T].
  double posterior_variance(int t) const;
  const std::vector<double>& betas() const { return betas_; }
  const std::vector<double>& alpha_bars() const { return alpha_bars_; }

 private:
  std::vector<double> betas_;
  std::vector<double> alpha_bars_;
};

Matrix q_sample(const Matrix& x0, double alpha_bar, const Matrix& eps);
Matrix q_sample(const Matrix& x0, int t, const Matrix& eps, const NoiseSchedule& schedule);

struct DiffHeadConfig {
  int token_dim = 2;
  int cond_dim = 128;
  int width = 128;
  int blocks = 3;
};

class DiffHead {
 public:
  DiffHead() = default;
  DiffHead(ParamSet& params, const std::string& name, const DiffHeadConfig& config, Rng& rng);

  const DiffHeadConfig& config() const { return config_; }

  // eps_hat for rows of x_t [N, d] at timesteps t (size N) under z [N, cond_dim].
  Var predict(const BoundParams& p, Var x_t, std::span<const int> t, Var z) const;

 private:
  struct Block {
    LayerNorm norm;
    Linear modulation;  // -> shift | scale | gate
    Linear fc1, fc2;
  };
  DiffHeadConfig config_;
  Linear time_fc1_, time_fc2_, cond_proj_, in_proj_;
  std::vector<Block> blocks_;
  Linear final_modulation_;  // -> shift | scale
  Linear out_;
};

using EpsPredictor = std::function<Var(Var x_t, std::span<const int> t, Var z)>;

// Mean squared noise-prediction error. Each row of (z, x0) is repeated
// `batch_mul` times with its own timestep and noise.
Var diffusion_loss(const EpsPredictor& predict, Var z, const Matrix& x0, const NoiseSchedule& schedule,
                   Rng& rng, int batch_mul = 1);
Var diffusion_loss(const DiffHead& head, const BoundParams& p, Var z, const Matrix& x0,
                   const NoiseSchedule& schedule, Rng& rng, int batch_mul = 1);

// Ancestral reverse diffusion, one row per z row, row i drawing from streams[i].
// Temperature scales the initial and every injected noise term.
Matrix sample_tokens(const DiffHead& head, const std::vector<Matrix>& weights, const Matrix& z,
                     const NoiseSchedule& schedule, double temperature, std::span<Rng> streams);
Matrix sample_token(const DiffHead& head, const std::vector<Matrix>& weights, const Matrix& z_row,
                    const NoiseSchedule& schedule, double temperature, std::uint64_t seed);

}  // namespace discon
