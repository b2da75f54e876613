#include "hrtse/svgplot.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "hrtse/common.hpp"

namespace hrtse::svg {

namespace {

constexpr int kWidth = 640;
constexpr int kHeight = 400;
constexpr int kLeft = 64;
constexpr int kRight = 24;
constexpr int kTop = 40;
constexpr int kBottom = 48;

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c",
                          "#9467bd", "#ff7f0e", "#8c564b"};

std::string escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
            case '&': out += "&amp;"; break;
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '"': out += "&quot;"; break;
            default: out += c;
        }
    }
    return out;
}

std::string num(double v) {
    std::ostringstream os;
    os.precision(6);
    os << v;
    return os.str();
}

// largest of {1,2,5}*10^k not above `raw`, for readable axis ticks
double nice_step(double raw) {
    double mag = std::pow(10.0, std::floor(std::log10(raw)));
    double n = raw / mag;
    if (n >= 5.0) return 5.0 * mag;
    if (n >= 2.0) return 2.0 * mag;
    return mag;
}

struct Range {
    double lo = 0.0, hi = 1.0;
    double span() const { return hi - lo; }
};

Range y_range(double lo, double hi) {
    if (!std::isfinite(lo) || !std::isfinite(hi)) throw ValueError("chart: non-finite values");
    if (lo > hi) std::swap(lo, hi);
    if (hi - lo < 1e-12) {
        lo -= 0.5;
        hi += 0.5;
    }
    double pad = 0.06 * (hi - lo);
    return {lo - pad, hi + pad};
}

void open_doc(std::ostringstream& os, const std::string& title) {
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth
       << "\" height=\"" << kHeight << "\" viewBox=\"0 0 " << kWidth << " "
       << kHeight << "\">\n";
    os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    os << "<text x=\"" << kWidth / 2 << "\" y=\"22\" text-anchor=\"middle\" "
          "font-family=\"sans-serif\" font-size=\"15\">"
       << escape(title) << "</text>\n";
}

void axes(std::ostringstream& os, const Range& yr, const std::string& x_label,
          const std::string& y_label) {
    int x0 = kLeft, x1 = kWidth - kRight;
    int y0 = kHeight - kBottom, y1 = kTop;
    os << "<line x1=\"" << x0 << "\" y1=\"" << y0 << "\" x2=\"" << x1
       << "\" y2=\"" << y0 << "\" stroke=\"#333\"/>\n";
    os << "<line x1=\"" << x0 << "\" y1=\"" << y0 << "\" x2=\"" << x0
       << "\" y2=\"" << y1 << "\" stroke=\"#333\"/>\n";

    double step = nice_step(yr.span() / 5.0);
    double first = std::ceil(yr.lo / step) * step;
    for (double v = first; v <= yr.hi + 1e-12; v += step) {
        double fy = y0 - (v - yr.lo) / yr.span() * (y0 - y1);
        os << "<line x1=\"" << x0 - 4 << "\" y1=\"" << num(fy) << "\" x2=\""
           << x1 << "\" y2=\"" << num(fy)
           << "\" stroke=\"#ddd\" stroke-width=\"0.7\"/>\n";
        os << "<text x=\"" << x0 - 8 << "\" y=\"" << num(fy + 4)
           << "\" text-anchor=\"end\" font-family=\"sans-serif\" "
              "font-size=\"11\">"
           << num(std::abs(v) < step * 1e-9 ? 0.0 : v) << "</text>\n";
    }
    os << "<text x=\"" << (x0 + x1) / 2 << "\" y=\"" << kHeight - 12
       << "\" text-anchor=\"middle\" font-family=\"sans-serif\" "
          "font-size=\"12\">"
       << escape(x_label) << "</text>\n";
    os << "<text x=\"16\" y=\"" << (y0 + y1) / 2
       << "\" text-anchor=\"middle\" font-family=\"sans-serif\" "
          "font-size=\"12\" transform=\"rotate(-90 16 "
       << (y0 + y1) / 2 << ")\">" << escape(y_label) << "</text>\n";
}

void save(const std::string& path, const std::string& body) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot write chart: " + path);
    os << body;
    if (!os) throw IoError("chart write failed: " + path);
}

}  // namespace

void write_line_chart(const std::string& path, const std::string& title,
                      const std::string& x_label, const std::string& y_label,
                      const std::vector<Series>& series) {
    if (series.empty()) throw ValueError("chart: no series");
    size_t n = 0;
    double lo = 1e300, hi = -1e300;
    for (const auto& s : series) {
        if (s.values.empty()) throw ValueError("chart: empty series " + s.label);
        n = std::max(n, s.values.size());
        for (double v : s.values) {
            if (!std::isfinite(v)) throw ValueError("chart: non-finite value");
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
    }
    Range yr = y_range(lo, hi);

    std::ostringstream os;
    open_doc(os, title);
    axes(os, yr, x_label, y_label);

    int x0 = kLeft, x1 = kWidth - kRight;
    int y0 = kHeight - kBottom, y1 = kTop;
    for (size_t si = 0; si < series.size(); ++si) {
        const auto& s = series[si];
        const char* color = kPalette[si % 6];
        std::ostringstream pts;
        for (size_t i = 0; i < s.values.size(); ++i) {
            double fx = s.values.size() == 1
                            ? (x0 + x1) / 2.0
                            : x0 + double(i) / double(s.values.size() - 1) *
                                       (x1 - x0);
            double fy = y0 - (s.values[i] - yr.lo) / yr.span() * (y0 - y1);
            pts << (i ? " " : "") << num(fx) << "," << num(fy);
        }
        os << "<polyline fill=\"none\" stroke=\"" << color
           << "\" stroke-width=\"1.8\" points=\"" << pts.str() << "\"/>\n";
        int ly = kTop + 14 + int(si) * 16;
        os << "<line x1=\"" << x1 - 130 << "\" y1=\"" << ly - 4 << "\" x2=\""
           << x1 - 110 << "\" y2=\"" << ly - 4 << "\" stroke=\"" << color
           << "\" stroke-width=\"2\"/>\n";
        os << "<text x=\"" << x1 - 104 << "\" y=\"" << ly
           << "\" font-family=\"sans-serif\" font-size=\"11\">"
           << escape(s.label) << "</text>\n";
    }
    os << "</svg>\n";
    save(path, os.str());
}

void write_bar_chart(const std::string& path, const std::string& title,
                     const std::string& y_label, const std::vector<Bar>& bars) {
    if (bars.empty()) throw ValueError("chart: no bars");
    double lo = 0.0, hi = 0.0;
    for (const auto& b : bars) {
        if (!std::isfinite(b.value)) throw ValueError("chart: non-finite value");
        lo = std::min(lo, b.value);
        hi = std::max(hi, b.value);
    }
    Range yr = y_range(lo, hi);

    std::ostringstream os;
    open_doc(os, title);
    axes(os, yr, "", y_label);

    int x0 = kLeft, x1 = kWidth - kRight;
    int y0 = kHeight - kBottom, y1 = kTop;
    double slot = double(x1 - x0) / double(bars.size());
    double zero_y = y0 - (0.0 - yr.lo) / yr.span() * (y0 - y1);
    zero_y = std::clamp(zero_y, double(y1), double(y0));
    for (size_t i = 0; i < bars.size(); ++i) {
        double cx = x0 + slot * (double(i) + 0.5);
        double w = slot * 0.56;
        double vy = y0 - (bars[i].value - yr.lo) / yr.span() * (y0 - y1);
        double top = std::min(vy, zero_y), bot = std::max(vy, zero_y);
        os << "<rect x=\"" << num(cx - w / 2) << "\" y=\"" << num(top)
           << "\" width=\"" << num(w) << "\" height=\""
           << num(std::max(0.5, bot - top)) << "\" fill=\""
           << kPalette[i % 6] << "\"/>\n";
        os << "<text x=\"" << num(cx) << "\" y=\"" << y0 + 16
           << "\" text-anchor=\"middle\" font-family=\"sans-serif\" "
              "font-size=\"11\">"
           << escape(bars[i].label) << "</text>\n";
        os << "<text x=\"" << num(cx) << "\" y=\"" << num(top - 4)
           << "\" text-anchor=\"middle\" font-family=\"sans-serif\" "
              "font-size=\"10\">"
           << num(bars[i].value) << "</text>\n";
    }
    os << "</svg>\n";
    save(path, os.str());
}

}  // namespace hrtse::svg
