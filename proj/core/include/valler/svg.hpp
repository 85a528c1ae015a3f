#pragma once

#include <string>
#include <vector>

namespace valler::svg {

struct Series {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;
};

/// Standalone SVG line chart with one polyline and legend entry per series.
std::string line_chart(const std::string& title, const std::string& x_label,
                       const std::string& y_label, const std::vector<Series>& series);

/// Grayscale heatmap of a row-major matrix; darker is larger. An optional
/// path (one column index per row) is drawn as red dots.
std::string heatmap(const std::string& title, const std::vector<std::vector<double>>& rows,
                    const std::vector<int>& path = {});

}  // namespace valler::svg
