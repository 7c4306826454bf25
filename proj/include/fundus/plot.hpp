#pragma once

#include "fundus/image.hpp"

#include <string>
#include <vector>

namespace fundus {

struct PlotSeries {
  std::string label;
  std::vector<double> x, y;
};

/// Small self-contained line-plot renderer (for ROC curves). Axes span [0,1]
/// on both dimensions; text uses an embedded 5x7 bitmap font.
void render_line_plot(const std::string& path, const std::string& title,
                      const std::string& xlabel, const std::string& ylabel,
                      const std::vector<PlotSeries>& series, int width = 640,
                      int height = 520);

}  // namespace fundus
