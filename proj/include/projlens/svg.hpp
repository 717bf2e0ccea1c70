#pragma once

#include <string>
#include <vector>

#include "projlens/common.hpp"

namespace projlens {

struct SvgSeries {
  std::string name;
  std::vector<std::pair<double, double>> points;
};

// Minimal static line chart. The CSVs are the data contract; these figures
// exist so a run directory can be eyeballed without extra tooling.
inline std::string svg_line_chart(const std::string& title, const std::string& x_label,
                                  const std::string& y_label, const std::vector<SvgSeries>& series) {
  const int width = 640, height = 420;
  const double left = 70, right = 610, top = 50, bottom = 360;
  double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
  for (const auto& s : series)
    for (const auto& [x, y] : s.points) {
      xmin = std::min(xmin, x);
      xmax = std::max(xmax, x);
      ymin = std::min(ymin, y);
      ymax = std::max(ymax, y);
    }
  if (xmin > xmax) {
    xmin = 0;
    xmax = 1;
  }
  if (ymin > ymax) {
    ymin = 0;
    ymax = 1;
  }
  if (xmax == xmin) xmax = xmin + 1;
  if (ymax == ymin) ymax = ymin + 1;
  const double ypad = 0.05 * (ymax - ymin);
  ymin -= ypad;
  ymax += ypad;

  auto sx = [&](double x) { return left + (x - xmin) / (xmax - xmin) * (right - left); };
  auto sy = [&](double y) { return bottom - (y - ymin) / (ymax - ymin) * (bottom - top); };

  static const char* palette[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728",
                                  "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"};
  std::string out;
  out += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(width) +
         "\" height=\"" + std::to_string(height) + "\">\n";
  out += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  out += "<text x=\"320\" y=\"28\" text-anchor=\"middle\" font-size=\"16\">" + title + "</text>\n";
  out += "<line x1=\"70\" y1=\"360\" x2=\"610\" y2=\"360\" stroke=\"black\"/>\n";
  out += "<line x1=\"70\" y1=\"50\" x2=\"70\" y2=\"360\" stroke=\"black\"/>\n";
  out += "<text x=\"340\" y=\"400\" text-anchor=\"middle\" font-size=\"12\">" + x_label + "</text>\n";
  out += "<text x=\"18\" y=\"205\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 18 205)\">" +
         y_label + "</text>\n";
  for (int t = 0; t <= 4; ++t) {
    const double xv = xmin + t * (xmax - xmin) / 4;
    const double yv = ymin + t * (ymax - ymin) / 4;
    out += "<text x=\"" + format_fixed(sx(xv), 1) + "\" y=\"378\" text-anchor=\"middle\" font-size=\"10\">" +
           format_fixed(xv, 2) + "</text>\n";
    out += "<text x=\"62\" y=\"" + format_fixed(sy(yv) + 3, 1) +
           "\" text-anchor=\"end\" font-size=\"10\">" + format_fixed(yv, 2) + "</text>\n";
  }
  for (size_t i = 0; i < series.size(); ++i) {
    const char* color = palette[i % 8];
    std::string pts;
    for (const auto& [x, y] : series[i].points)
      pts += format_fixed(sx(x), 2) + "," + format_fixed(sy(y), 2) + " ";
    out += "<polyline fill=\"none\" stroke=\"" + std::string(color) + "\" stroke-width=\"1.5\" points=\"" +
           pts + "\"/>\n";
    out += "<text x=\"480\" y=\"" + std::to_string(60 + 16 * i) + "\" font-size=\"11\" fill=\"" + color +
           "\">" + series[i].name + "</text>\n";
  }
  out += "</svg>\n";
  return out;
}

}  // namespace projlens
