#pragma once

#include <string>
#include <vector>

namespace hrtse::svg {

// Minimal deterministic SVG charts for training logs and metric tables.
// The whole document is built in memory first, so a failed write never
// leaves a truncated file with a valid header behind.

struct Series {
    std::string label;
    std::vector<double> values;  // plotted against their index
};

struct Bar {
    std::string label;
    double value = 0.0;
};

void write_line_chart(const std::string& path, const std::string& title,
                      const std::string& x_label, const std::string& y_label,
                      const std::vector<Series>& series);

void write_bar_chart(const std::string& path, const std::string& title,
                     const std::string& y_label, const std::vector<Bar>& bars);

}  // namespace hrtse::svg
