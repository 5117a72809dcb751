#include "gidd/svg_plot.hpp"

#include "gidd/error.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

namespace gidd {

namespace {

constexpr std::array<const char*, 8> kPalette{"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
                                              "#9467bd", "#8c564b", "#e377c2", "#17becf"};

std::string escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
        case '<':
            out += "&lt;";
            break;
        case '>':
            out += "&gt;";
            break;
        case '&':
            out += "&amp;";
            break;
        case '"':
            out += "&quot;";
            break;
        default:
            out += c;
        }
    }
    return out;
}

std::string num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return buf;
}

std::string tick_label(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3g", v);
    return buf;
}

struct Axis {
    bool log = false;
    double lo = 0.0;
    double hi = 1.0;

    double t(double v) const { return log ? std::log10(v) : v; }

    std::vector<double> ticks() const {
        std::vector<double> out;
        if (log) {
            for (double e = std::ceil(lo); e <= hi + 1e-9; e += 1.0) {
                out.push_back(std::pow(10.0, e));
            }
            if (out.size() >= 2) {
                return out;
            }
            out.clear();
        }
        const double span = hi - lo;
        const double raw = span / 5.0;
        const double mag = std::pow(10.0, std::floor(std::log10(raw)));
        double step = mag;
        for (double m : {1.0, 2.0, 5.0, 10.0}) {
            if (raw <= m * mag) {
                step = m * mag;
                break;
            }
        }
        for (double v = std::ceil(lo / step) * step; v <= hi + 1e-9 * span; v += step) {
            out.push_back(log ? std::pow(10.0, v) : v);
        }
        return out;
    }
};

bool usable(double v, bool log) { return std::isfinite(v) && (!log || v > 0.0); }

} // namespace

std::string render_svg(const PlotSpec& spec) {
    if (!(spec.width > 100.0) || !(spec.height > 100.0)) {
        throw RangeError("render_svg: canvas too small");
    }
    Axis ax{spec.log_x, std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity()};
    Axis ay{spec.log_y, std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity()};
    for (const PlotSeries& s : spec.series) {
        for (std::size_t i = 0; i < std::min(s.xs.size(), s.ys.size()); ++i) {
            if (usable(s.xs[i], ax.log) && usable(s.ys[i], ay.log)) {
                ax.lo = std::min(ax.lo, ax.t(s.xs[i]));
                ax.hi = std::max(ax.hi, ax.t(s.xs[i]));
                ay.lo = std::min(ay.lo, ay.t(s.ys[i]));
                ay.hi = std::max(ay.hi, ay.t(s.ys[i]));
            }
        }
    }
    for (Axis* a : {&ax, &ay}) {
        if (!(a->lo <= a->hi)) {
            a->lo = 0.0;
            a->hi = 1.0;
        }
        const double pad = a->hi > a->lo ? 0.04 * (a->hi - a->lo) : 0.5;
        a->lo -= pad;
        a->hi += pad;
    }

    const double left = 70.0;
    const double right = 150.0;
    const double top = 36.0;
    const double bottom = 50.0;
    const double pw = spec.width - left - right;
    const double ph = spec.height - top - bottom;
    const auto px = [&](double v) { return left + (ax.t(v) - ax.lo) / (ax.hi - ax.lo) * pw; };
    const auto py = [&](double v) { return top + ph - (ay.t(v) - ay.lo) / (ay.hi - ay.lo) * ph; };

    std::ostringstream o;
    o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << num(spec.width) << "\" height=\""
      << num(spec.height) << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
    o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    o << "<text x=\"" << num(left + pw / 2) << "\" y=\"20\" text-anchor=\"middle\" font-size=\"13\">"
      << escape(spec.title) << "</text>\n";
    o << "<rect x=\"" << num(left) << "\" y=\"" << num(top) << "\" width=\"" << num(pw) << "\" height=\""
      << num(ph) << "\" fill=\"none\" stroke=\"black\"/>\n";
    for (double v : ax.ticks()) {
        const double x = px(v);
        o << "<line x1=\"" << num(x) << "\" y1=\"" << num(top + ph) << "\" x2=\"" << num(x) << "\" y2=\""
          << num(top + ph + 4) << "\" stroke=\"black\"/>";
        o << "<text x=\"" << num(x) << "\" y=\"" << num(top + ph + 16) << "\" text-anchor=\"middle\">"
          << tick_label(v) << "</text>\n";
    }
    for (double v : ay.ticks()) {
        const double y = py(v);
        o << "<line x1=\"" << num(left - 4) << "\" y1=\"" << num(y) << "\" x2=\"" << num(left) << "\" y2=\""
          << num(y) << "\" stroke=\"black\"/>";
        o << "<text x=\"" << num(left - 6) << "\" y=\"" << num(y + 4) << "\" text-anchor=\"end\">" << tick_label(v)
          << "</text>\n";
    }
    o << "<text x=\"" << num(left + pw / 2) << "\" y=\"" << num(spec.height - 12) << "\" text-anchor=\"middle\">"
      << escape(spec.x_label) << "</text>\n";
    o << "<text transform=\"translate(16," << num(top + ph / 2) << ") rotate(-90)\" text-anchor=\"middle\">"
      << escape(spec.y_label) << "</text>\n";

    for (std::size_t k = 0; k < spec.series.size(); ++k) {
        const PlotSeries& s = spec.series[k];
        const char* colour = kPalette[k % kPalette.size()];
        std::string path;
        for (std::size_t i = 0; i < std::min(s.xs.size(), s.ys.size()); ++i) {
            if (!usable(s.xs[i], ax.log) || !usable(s.ys[i], ay.log)) {
                continue;
            }
            const double x = px(s.xs[i]);
            const double y = py(s.ys[i]);
            path += (path.empty() ? "M" : " L") + num(x) + " " + num(y);
            if (s.markers) {
                o << "<circle cx=\"" << num(x) << "\" cy=\"" << num(y) << "\" r=\"2.5\" fill=\"" << colour
                  << "\"/>\n";
            }
        }
        if (s.lines && !path.empty()) {
            o << "<path d=\"" << path << "\" fill=\"none\" stroke=\"" << colour << "\" stroke-width=\"1.5\"/>\n";
        }
        const double ly = top + 12.0 + 16.0 * static_cast<double>(k);
        o << "<rect x=\"" << num(left + pw + 10) << "\" y=\"" << num(ly - 8) << "\" width=\"10\" height=\"10\" fill=\""
          << colour << "\"/>";
        o << "<text x=\"" << num(left + pw + 26) << "\" y=\"" << num(ly + 1) << "\">" << escape(s.label)
          << "</text>\n";
    }
    o << "</svg>\n";
    return o.str();
}

} // namespace gidd
