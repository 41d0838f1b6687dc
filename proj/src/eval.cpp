#include "discon/eval.hpp"

namespace discon {

ModeReport mode_report(const Matrix& tokens, const Matrix& centers, double sigma) {
  if (tokens.rows() > 0 && tokens.cols() != centers.cols()) {
    throw ShapeError("mode_report: token dim " + std::to_string(tokens.cols()) + " vs center dim " +
                     std::to_string(centers.cols()));
  }
  ModeReport r;
  r.hits.assign(static_cast<std::size_t>(centers.rows()), 0);
  r.n_tokens = static_cast<std::size_t>(tokens.rows());
  std::size_t pure = 0, ood = 0;
  for (Index i = 0; i < tokens.rows(); ++i) {
    Index best = 0;
    double best_d2 = (centers.row(0) - tokens.row(i)).squaredNorm();
    for (Index m = 1; m < centers.rows(); ++m) {
      const double d2 = (centers.row(m) - tokens.row(i)).squaredNorm();
      if (d2 < best_d2) {
        best_d2 = d2;
        best = m;
      }
    }
    const double dist = std::sqrt(best_d2);
    if (dist <= kInModeRadius * sigma) {
      ++pure;
      ++r.hits[static_cast<std::size_t>(best)];
    }
    if (dist > kArtifactRadius * sigma) ++ood;
  }
  std::size_t covered = 0;
  for (auto h : r.hits) covered += h > 0;
  r.coverage = centers.rows() > 0 ? static_cast<double>(covered) / static_cast<double>(centers.rows()) : 0.0;
  if (r.n_tokens > 0) {
    r.purity = static_cast<double>(pure) / static_cast<double>(r.n_tokens);
    r.ood_rate = static_cast<double>(ood) / static_cast<double>(r.n_tokens);
  }
  return r;
}

}  // namespace discon
