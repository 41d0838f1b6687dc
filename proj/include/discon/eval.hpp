#pragma once

// Distribution-distance metrics on token sets: a Frechet distance between
// Gaussian moment fits, and a mode-level report against known centers.

#include "discon/numerics.hpp"

#include <Eigen/Eigenvalues>

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace discon {

template <typename Scalar>
struct GaussianMoments {
  RowVectorR<Scalar> mean;
  MatrixR<Scalar> covariance;
};

// Sample mean and unbiased covariance of the rows of `points`.
template <typename Derived>
GaussianMoments<typename Derived::Scalar> fit_moments(const Eigen::MatrixBase<Derived>& points) {
  using Scalar = typename Derived::Scalar;
  const Index n = points.rows();
  const Index d = points.cols();
  if (n < d + 1) {
    throw std::invalid_argument("fit_moments: need at least d+1 = " + std::to_string(d + 1) +
                                " points, got " + std::to_string(n));
  }
  GaussianMoments<Scalar> m;
  m.mean = points.colwise().mean();
  const MatrixR<Scalar> centered = points.rowwise() - m.mean;
  m.covariance = (centered.transpose() * centered) / static_cast<Scalar>(n - 1);
  m.covariance = Scalar(0.5) * (m.covariance + m.covariance.transpose()).eval();
  return m;
}

// Moments of a finite mixture given its component moments and weights.
template <typename Scalar>
GaussianMoments<Scalar> mixture_moments(const std::vector<GaussianMoments<Scalar>>& parts,
                                        const std::vector<Scalar>& weights) {
  if (parts.empty() || parts.size() != weights.size()) {
    throw std::invalid_argument("mixture_moments: components and weights must be non-empty and aligned");
  }
  const Index d = parts.front().mean.cols();
  GaussianMoments<Scalar> out;
  out.mean = RowVectorR<Scalar>::Zero(d);
  MatrixR<Scalar> second = MatrixR<Scalar>::Zero(d, d);
  Scalar total = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Scalar w = weights[k];
    total += w;
    out.mean += w * parts[k].mean;
    second += w * (parts[k].covariance + parts[k].mean.transpose() * parts[k].mean);
  }
  out.mean /= total;
  second /= total;
  out.covariance = second - out.mean.transpose() * out.mean;
  return out;
}

// ||mu_a - mu_b||^2 + Tr(Sa + Sb - 2 (Sa Sb)^{1/2}) with both covariances
// regularized by `reg` * I. The trace of the square root is taken from the
// eigenvalues of the symmetric product Sa^{1/2} Sb Sa^{1/2}, negatives clamped.
template <typename Scalar>
Scalar frechet_distance(const GaussianMoments<Scalar>& a, const GaussianMoments<Scalar>& b,
                        Scalar reg = Scalar(1e-6)) {
  if (a.mean.cols() != b.mean.cols()) throw ShapeError("frechet_distance: dimension mismatch");
  const Index d = a.mean.cols();
  const MatrixR<Scalar> eye = MatrixR<Scalar>::Identity(d, d);
  const MatrixR<Scalar> sa = a.covariance + reg * eye;
  const MatrixR<Scalar> sb = b.covariance + reg * eye;

  Eigen::SelfAdjointEigenSolver<MatrixR<Scalar>> ea(sa);
  const auto ev = ea.eigenvalues().cwiseMax(Scalar(0)).cwiseSqrt();
  const MatrixR<Scalar> sqrt_a = ea.eigenvectors() * ev.asDiagonal() * ea.eigenvectors().transpose();
  MatrixR<Scalar> inner = sqrt_a * sb * sqrt_a;
  inner = Scalar(0.5) * (inner + inner.transpose()).eval();
  Eigen::SelfAdjointEigenSolver<MatrixR<Scalar>> ei(inner, Eigen::EigenvaluesOnly);
  const Scalar tr_sqrt = ei.eigenvalues().cwiseMax(Scalar(0)).cwiseSqrt().sum();

  const Scalar mean_term = (a.mean - b.mean).squaredNorm();
  const Scalar fd = mean_term + sa.trace() + sb.trace() - Scalar(2) * tr_sqrt;
  return std::max(fd, Scalar(0));
}

template <typename DerivedA, typename DerivedB>
typename DerivedA::Scalar frechet_distance(const Eigen::MatrixBase<DerivedA>& a,
                                           const Eigen::MatrixBase<DerivedB>& b,
                                           typename DerivedA::Scalar reg = 1e-6) {
  if (a.cols() != b.cols()) throw ShapeError("frechet_distance: token sets differ in dimension");
  return frechet_distance(fit_moments(a), fit_moments(b), reg);
}

struct ModeReport {
  std::vector<std::size_t> hits;  // tokens within 3 sigma, per mode
  double coverage = 0.0;          // fraction of modes with at least one hit
  double purity = 0.0;            // fraction of tokens within 3 sigma of some center
  double ood_rate = 0.0;          // fraction farther than 6 sigma from every center
  std::size_t n_tokens = 0;
};

inline constexpr double kInModeRadius = 3.0;
inline constexpr double kArtifactRadius = 6.0;

ModeReport mode_report(const Matrix& tokens, const Matrix& centers, double sigma);

}  // namespace discon
