#pragma once

#include <string>
#include <vector>

namespace mmtl {

struct HeatmapOptions {
  std::string title;
  std::string x_label = "layer";
  std::string y_label = "position";
  int cell_size = 14;  // pixels per cell
};

/// SVG heatmap of a row-major matrix. Values map linearly onto a
/// white -> #b31b1b ramp between the matrix minimum and maximum (a constant
/// matrix renders at the maximum color); the legend prints both endpoints.
/// Cells carry class="cell", row index = matrix row, column index = column.
std::string heatmap_svg(const std::vector<std::vector<double>>& matrix,
                        const HeatmapOptions& options = {});

/// heatmap_svg + atomic write.
void emit_heatmap(const std::vector<std::vector<double>>& matrix, const std::string& path,
                  const HeatmapOptions& options = {});

}  // namespace mmtl
