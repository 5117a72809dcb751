#pragma once

#include <string>
#include <vector>

namespace gidd {

struct PlotSeries {
    std::string label;
    std::vector<double> xs;
    std::vector<double> ys;
    bool lines = true;
    bool markers = true;
};

struct PlotSpec {
    std::string title;
    std::string x_label;
    std::string y_label;
    bool log_x = false;
    bool log_y = false;
    double width = 640.0;
    double height = 420.0;
    std::vector<PlotSeries> series;
};

// Static SVG with axes, ticks, one colour per series and a legend. Non-finite
// points, and non-positive points on log axes, are dropped.
std::string render_svg(const PlotSpec& spec);

} // namespace gidd
