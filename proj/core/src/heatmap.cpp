#include "mmtl/heatmap.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>

#include "mmtl/fsio.hpp"

namespace mmtl {

namespace {

// Linear white -> #b31b1b ramp; t in [0, 1].
std::string ramp_color(double t) {
  t = std::clamp(t, 0.0, 1.0);
  const int r = static_cast<int>(std::lround(255.0 + t * (0xb3 - 255.0)));
  const int g = static_cast<int>(std::lround(255.0 + t * (0x1b - 255.0)));
  const int b = static_cast<int>(std::lround(255.0 + t * (0x1b - 255.0)));
  char buf[24];
  std::snprintf(buf, sizeof(buf), "rgb(%d,%d,%d)", r, g, b);
  return buf;
}

std::string fmt_num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

}  // namespace

std::string heatmap_svg(const std::vector<std::vector<double>>& matrix,
                        const HeatmapOptions& opt) {
  if (matrix.empty() || matrix[0].empty())
    throw std::invalid_argument("heatmap_svg: empty matrix");
  const size_t rows = matrix.size();
  const size_t cols = matrix[0].size();
  for (const auto& row : matrix)
    if (row.size() != cols) throw std::invalid_argument("heatmap_svg: ragged matrix");

  double lo = matrix[0][0], hi = matrix[0][0];
  for (const auto& row : matrix)
    for (double v : row) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }

  const int cs = opt.cell_size;
  const int left = 46, top = opt.title.empty() ? 18 : 34, right = 18;
  const int legend_h = 40;
  const int width = left + static_cast<int>(cols) * cs + right;
  const int height = top + static_cast<int>(rows) * cs + legend_h;

  std::string s;
  s += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(width) +
       "\" height=\"" + std::to_string(height) + "\" font-family=\"monospace\" font-size=\"9\">\n";
  s += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  if (!opt.title.empty())
    s += "<text x=\"" + std::to_string(left) + "\" y=\"14\" font-size=\"11\">" + opt.title +
         "</text>\n";

  for (size_t i = 0; i < rows; ++i) {
    for (size_t j = 0; j < cols; ++j) {
      const double v = matrix[i][j];
      const double t = hi > lo ? (v - lo) / (hi - lo) : 1.0;
      s += "<rect class=\"cell\" x=\"" + std::to_string(left + static_cast<int>(j) * cs) +
           "\" y=\"" + std::to_string(top + static_cast<int>(i) * cs) + "\" width=\"" +
           std::to_string(cs) + "\" height=\"" + std::to_string(cs) + "\" fill=\"" +
           ramp_color(t) + "\"><title>" + opt.y_label + " " + std::to_string(i) + ", " +
           opt.x_label + " " + std::to_string(j) + ": " + fmt_num(v) + "</title></rect>\n";
    }
  }

  // Axis labels: x ticks under the grid, y ticks on the left edge.
  const int grid_bottom = top + static_cast<int>(rows) * cs;
  s += "<text x=\"" + std::to_string(left) + "\" y=\"" + std::to_string(grid_bottom + 10) +
       "\">" + opt.x_label + " 0.." + std::to_string(cols - 1) + "</text>\n";
  s += "<text x=\"4\" y=\"" + std::to_string(top + 8) + "\">" + opt.y_label + "</text>\n";
  s += "<text x=\"4\" y=\"" + std::to_string(top + 18) + "\">0.." +
       std::to_string(rows - 1) + "</text>\n";

  // Legend: the two ramp endpoints with their values.
  const int ly = grid_bottom + 18;
  s += "<rect class=\"legend-min\" x=\"" + std::to_string(left) + "\" y=\"" +
       std::to_string(ly) + "\" width=\"10\" height=\"10\" stroke=\"black\" fill=\"" +
       ramp_color(hi > lo ? 0.0 : 1.0) + "\"/>\n";
  s += "<text x=\"" + std::to_string(left + 14) + "\" y=\"" + std::to_string(ly + 9) +
       "\">min " + fmt_num(lo) + "</text>\n";
  s += "<rect class=\"legend-max\" x=\"" + std::to_string(left + 110) + "\" y=\"" +
       std::to_string(ly) + "\" width=\"10\" height=\"10\" stroke=\"black\" fill=\"" +
       ramp_color(1.0) + "\"/>\n";
  s += "<text x=\"" + std::to_string(left + 124) + "\" y=\"" + std::to_string(ly + 9) +
       "\">max " + fmt_num(hi) + "</text>\n";
  s += "</svg>\n";
  return s;
}

void emit_heatmap(const std::vector<std::vector<double>>& matrix, const std::string& path,
                  const HeatmapOptions& options) {
  atomic_write_file(path, heatmap_svg(matrix, options));
}

}  // namespace mmtl
