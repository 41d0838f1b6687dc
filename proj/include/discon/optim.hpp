#pragma once

#include "discon/nn.hpp"

#include <vector>

namespace discon {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

// Decoupled weight decay applies to weight matrices only (names ending in
// ".w"); embeddings, biases and norm parameters are not decayed.
class AdamW {
 public:
  AdamW() = default;
  AdamW(const ParamSet& params, const AdamWConfig& config);

  void step(ParamSet& params, const std::vector<Matrix>& grads, double lr);

  const AdamWConfig& config() const { return config_; }
  std::uint64_t steps() const { return steps_; }
  std::vector<Matrix>& first_moment() { return m_; }
  std::vector<Matrix>& second_moment() { return v_; }
  const std::vector<Matrix>& first_moment() const { return m_; }
  const std::vector<Matrix>& second_moment() const { return v_; }
  void set_steps(std::uint64_t s) { steps_ = s; }

 private:
  AdamWConfig config_;
  std::vector<Matrix> m_, v_;
  std::vector<char> decay_;
  std::uint64_t steps_ = 0;
};

// Linear warmup over `warmup` steps, then constant.
double warmup_lr(double base, int warmup, std::uint64_t step);

// Rescales grads in place so their global L2 norm is at most max_norm.
// Returns the norm before clipping.
double clip_grad_norm(std::vector<Matrix>& grads, double max_norm);

// EMA decay used after `step` completed updates: the nominal decay, capped
// early on so the shadow does not stay anchored to the initialization.
double ema_decay_at(double decay, std::uint64_t step);

// Exponential moving average of parameters.
class Ema {
 public:
  Ema() = default;
  explicit Ema(const std::vector<Matrix>& init) : shadow_(init) {}

  void update(const std::vector<Matrix>& params, double decay);
  const std::vector<Matrix>& values() const { return shadow_; }
  std::vector<Matrix>& values() { return shadow_; }
  // Global L2 distance to `params`.
  double distance(const std::vector<Matrix>& params) const;

 private:
  std::vector<Matrix> shadow_;
};

}  // namespace discon
