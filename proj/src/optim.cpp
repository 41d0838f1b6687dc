#include "discon/optim.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace discon {

AdamW::AdamW(const ParamSet& params, const AdamWConfig& config) : config_(config) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Matrix& v = params.value(i);
    m_.push_back(Matrix::Zero(v.rows(), v.cols()));
    v_.push_back(Matrix::Zero(v.rows(), v.cols()));
    const std::string& n = params.name(i);
    decay_.push_back(n.size() >= 2 && n.compare(n.size() - 2, 2, ".w") == 0);
  }
}

void AdamW::step(ParamSet& params, const std::vector<Matrix>& grads, double lr) {
  if (grads.size() != params.size() || m_.size() != params.size()) {
    throw std::invalid_argument("AdamW: parameter/gradient count mismatch");
  }
  ++steps_;
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(steps_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Matrix& p = params.value(i);
    m_[i] = b1 * m_[i] + (1.0 - b1) * grads[i];
    v_[i] = b2 * v_[i] + (1.0 - b2) * grads[i].cwiseAbs2();
    if (decay_[i] && config_.weight_decay > 0.0) p *= 1.0 - lr * config_.weight_decay;
    p.array() -= lr * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + config_.eps);
  }
}

double warmup_lr(double base, int warmup, std::uint64_t step) {
  if (warmup <= 0 || step >= static_cast<std::uint64_t>(warmup)) return base;
  return base * static_cast<double>(step + 1) / warmup;
}

double ema_decay_at(double decay, std::uint64_t step) {
  const double t = static_cast<double>(step);
  return std::min(decay, (1.0 + t) / (10.0 + t));
}

double clip_grad_norm(std::vector<Matrix>& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& g : grads) sq += g.squaredNorm();
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) throw NumericError("gradient norm is not finite");
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& g : grads) g *= s;
  }
  return norm;
}

void Ema::update(const std::vector<Matrix>& params, double decay) {
  if (params.size() != shadow_.size()) throw std::invalid_argument("Ema: parameter count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (decay == 0.0) {
      shadow_[i] = params[i];
    } else {
      shadow_[i] = decay * shadow_[i] + (1.0 - decay) * params[i];
    }
  }
}

double Ema::distance(const std::vector<Matrix>& params) const {
  double sq = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i) sq += (shadow_[i] - params[i]).squaredNorm();
  return std::sqrt(sq);
}

}  // namespace discon
