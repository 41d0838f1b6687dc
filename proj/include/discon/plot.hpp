#pragma once

// Minimal, byte-stable SVG renderings with their CSV data: token scatters
// coloured by nearest mode, and metric-versus-step curves.

#include "discon/numerics.hpp"

#include <string>
#include <vector>

namespace discon {

struct PlotFiles {
  std::string svg;
  std::string csv;
};

// `points` is n x 2 (extra columns ignored); `centers` may be empty, in which
// case every point takes the first colour.
PlotFiles scatter_plot(const Matrix& points, const Matrix& centers, const std::string& title);

struct CurvePoint {
  std::string series;
  double x = 0.0;
  double y = 0.0;
};

// One polyline per series, in order of first appearance. The CSV holds one
// row per point.
PlotFiles curve_plot(const std::vector<CurvePoint>& points, const std::string& x_label, const std::string& title);

}  // namespace discon
