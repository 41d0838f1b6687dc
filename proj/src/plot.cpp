#include "discon/plot.hpp"

#include "discon/config.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <sstream>

namespace discon {

namespace {

constexpr double kWidth = 640, kHeight = 480, kMargin = 56;
constexpr const char* kPalette[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
                                    "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};
constexpr std::size_t kColours = sizeof(kPalette) / sizeof(kPalette[0]);

std::string fixed(double v) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

struct Range {
  double lo = 0, hi = 1;
  void include(double v) {
    if (!std::isfinite(v)) return;
    if (empty) {
      lo = hi = v;
      empty = false;
    } else {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  }
  void pad() {
    if (empty) {
      lo = 0;
      hi = 1;
    }
    if (hi - lo < 1e-12) {
      lo -= 0.5;
      hi += 0.5;
    }
    const double p = 0.05 * (hi - lo);
    lo -= p;
    hi += p;
  }
  bool empty = true;
};

class Canvas {
 public:
  Canvas(Range x, Range y, const std::string& title, const std::string& x_label, const std::string& y_label)
      : x_(x), y_(y) {
    os_ << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\"" << kHeight
        << "\" viewBox=\"0 0 " << kWidth << ' ' << kHeight << "\">\n"
        << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
        << "<text x=\"" << fixed(kWidth / 2) << "\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" "
        << "font-size=\"16\">" << escape(title) << "</text>\n";
    const double x0 = kMargin, x1 = kWidth - kMargin / 2, y0 = kHeight - kMargin, y1 = kMargin;
    os_ << "<g stroke=\"black\" stroke-width=\"1\">\n"
        << "<line x1=\"" << fixed(x0) << "\" y1=\"" << fixed(y0) << "\" x2=\"" << fixed(x1) << "\" y2=\"" << fixed(y0) << "\"/>\n"
        << "<line x1=\"" << fixed(x0) << "\" y1=\"" << fixed(y0) << "\" x2=\"" << fixed(x0) << "\" y2=\"" << fixed(y1) << "\"/>\n"
        << "</g>\n";
    os_ << "<g font-family=\"sans-serif\" font-size=\"11\">\n";
    for (int i = 0; i <= 4; ++i) {
      const double fx = x_.lo + (x_.hi - x_.lo) * i / 4.0;
      const double fy = y_.lo + (y_.hi - y_.lo) * i / 4.0;
      os_ << "<text x=\"" << fixed(px(fx)) << "\" y=\"" << fixed(y0 + 16) << "\" text-anchor=\"middle\">"
          << escape(format_tick(fx)) << "</text>\n"
          << "<text x=\"" << fixed(x0 - 6) << "\" y=\"" << fixed(py(fy) + 4) << "\" text-anchor=\"end\">"
          << escape(format_tick(fy)) << "</text>\n";
    }
    os_ << "<text x=\"" << fixed((x0 + x1) / 2) << "\" y=\"" << fixed(kHeight - 12) << "\" text-anchor=\"middle\">"
        << escape(x_label) << "</text>\n"
        << "<text x=\"14\" y=\"" << fixed((y0 + y1) / 2) << "\" text-anchor=\"middle\" transform=\"rotate(-90 14 "
        << fixed((y0 + y1) / 2) << ")\">" << escape(y_label) << "</text>\n</g>\n";
  }

  double px(double x) const { return kMargin + (x - x_.lo) / (x_.hi - x_.lo) * (kWidth - 1.5 * kMargin); }
  double py(double y) const { return kHeight - kMargin - (y - y_.lo) / (y_.hi - y_.lo) * (kHeight - 2 * kMargin); }
  std::ostringstream& out() { return os_; }
  std::string finish() {
    os_ << "</svg>\n";
    return os_.str();
  }

 private:
  static std::string format_tick(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3g", v);
    return buf;
  }
  Range x_, y_;
  std::ostringstream os_;
};

}  // namespace

PlotFiles scatter_plot(const Matrix& points, const Matrix& centers, const std::string& title) {
  if (points.rows() > 0 && points.cols() < 2) throw ShapeError("scatter_plot: points need two columns");
  Range xr, yr;
  for (Index i = 0; i < points.rows(); ++i) {
    xr.include(points(i, 0));
    yr.include(points(i, 1));
  }
  for (Index i = 0; i < centers.rows(); ++i) {
    xr.include(centers(i, 0));
    yr.include(centers(i, 1));
  }
  xr.pad();
  yr.pad();
  Canvas canvas(xr, yr, title, "x0", "x1");
  std::ostringstream csv;
  csv << "x0,x1,mode\n";
  auto& svg = canvas.out();
  svg << "<g fill-opacity=\"0.6\">\n";
  for (Index i = 0; i < points.rows(); ++i) {
    int mode = 0;
    if (centers.rows() > 0) {
      (centers.leftCols(2).rowwise() - points.row(i).leftCols(2)).rowwise().squaredNorm().minCoeff(&mode);
    }
    csv << format_real(points(i, 0)) << ',' << format_real(points(i, 1)) << ',' << mode << '\n';
    svg << "<circle cx=\"" << fixed(canvas.px(points(i, 0))) << "\" cy=\"" << fixed(canvas.py(points(i, 1)))
        << "\" r=\"1.5\" fill=\"" << kPalette[static_cast<std::size_t>(mode) % kColours] << "\"/>\n";
  }
  svg << "</g>\n<g fill=\"none\" stroke=\"black\">\n";
  for (Index i = 0; i < centers.rows(); ++i) {
    svg << "<circle cx=\"" << fixed(canvas.px(centers(i, 0))) << "\" cy=\"" << fixed(canvas.py(centers(i, 1)))
        << "\" r=\"4\"/>\n";
  }
  svg << "</g>\n";
  return {canvas.finish(), csv.str()};
}

PlotFiles curve_plot(const std::vector<CurvePoint>& points, const std::string& x_label, const std::string& title) {
  std::vector<std::string> order;
  std::map<std::string, std::vector<const CurvePoint*>> series;
  Range xr, yr;
  for (const auto& p : points) {
    if (series.find(p.series) == series.end()) order.push_back(p.series);
    series[p.series].push_back(&p);
    xr.include(p.x);
    yr.include(p.y);
  }
  xr.pad();
  yr.pad();
  Canvas canvas(xr, yr, title, x_label, "value");
  std::ostringstream csv;
  csv << "series," << x_label << ",value\n";
  for (const auto& p : points) csv << p.series << ',' << format_real(p.x) << ',' << format_real(p.y) << '\n';
  auto& svg = canvas.out();
  for (std::size_t s = 0; s < order.size(); ++s) {
    const char* colour = kPalette[s % kColours];
    svg << "<polyline fill=\"none\" stroke=\"" << colour << "\" stroke-width=\"1.5\" points=\"";
    bool first = true;
    for (const CurvePoint* p : series[order[s]]) {
      if (!std::isfinite(p->x) || !std::isfinite(p->y)) continue;
      svg << (first ? "" : " ") << fixed(canvas.px(p->x)) << ',' << fixed(canvas.py(p->y));
      first = false;
    }
    svg << "\"/>\n<text x=\"" << fixed(kWidth - kMargin) << "\" y=\"" << fixed(kMargin + 14.0 * static_cast<double>(s))
        << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\" fill=\"" << colour << "\">"
        << escape(order[s]) << "</text>\n";
  }
  return {canvas.finish(), csv.str()};
}

}  // namespace discon
