#include "patchkit/errors.hpp"
#include "patchkit/runner.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <set>
#include <sstream>

namespace patchkit {

namespace {

// Diverging blue-white-red scale centered at 0, t in [-1, 1].
std::string diverging_color(double t) {
    t = std::clamp(t, -1.0, 1.0);
    // Endpoints: #2166ac (blue) and #b2182b (red).
    int r, g, b;
    if (t < 0) {
        const double u = -t;
        r = static_cast<int>(std::lround(255 + (0x21 - 255) * u));
        g = static_cast<int>(std::lround(255 + (0x66 - 255) * u));
        b = static_cast<int>(std::lround(255 + (0xac - 255) * u));
    } else {
        r = static_cast<int>(std::lround(255 + (0xb2 - 255) * t));
        g = static_cast<int>(std::lround(255 + (0x18 - 255) * t));
        b = static_cast<int>(std::lround(255 + (0x2b - 255) * t));
    }
    char buf[8];
    std::snprintf(buf, sizeof buf, "#%02x%02x%02x", r, g, b);
    return buf;
}

struct GridSpec {
    std::vector<std::string> row_labels;
    std::vector<std::string> col_labels;
    std::string x_title;
    std::string y_title;
    // row index, col index per target (or -1 when the target has no cell).
    std::vector<std::pair<int, int>> cell_of;
};

// Lays the targets out on a 2-D grid based on which descriptor fields the
// sweep used.
GridSpec plan_grid(const EffectMatrix& matrix) {
    GridSpec grid;
    bool any_head = false, any_pos = false, any_window = false;
    for (const TargetDesc& t : matrix.targets) {
        any_head |= t.head >= 0;
        any_pos |= t.position >= 0;
        any_window |= t.window_center >= 0;
    }

    const auto ordered = [](std::set<int>& s) {
        return std::vector<int>(s.begin(), s.end());
    };

    if (any_head && !any_pos) {
        // layers x heads
        std::set<int> layers, heads;
        for (const TargetDesc& t : matrix.targets) {
            layers.insert(t.layer);
            heads.insert(t.head);
        }
        const auto ls = ordered(layers), hs = ordered(heads);
        grid.x_title = "head";
        grid.y_title = "layer";
        for (const int l : ls) grid.row_labels.push_back(std::to_string(l));
        for (const int h : hs) grid.col_labels.push_back(std::to_string(h));
        for (const TargetDesc& t : matrix.targets) {
            const int r = static_cast<int>(std::find(ls.begin(), ls.end(), t.layer) - ls.begin());
            const int c = static_cast<int>(std::find(hs.begin(), hs.end(), t.head) - hs.begin());
            grid.cell_of.push_back({r, c});
        }
        return grid;
    }
    if (any_head && any_pos) {
        // (layer.head) x positions
        std::set<std::pair<int, int>> rows;
        std::set<int> cols;
        for (const TargetDesc& t : matrix.targets) {
            rows.insert({t.layer, t.head});
            cols.insert(t.position);
        }
        std::vector<std::pair<int, int>> rs(rows.begin(), rows.end());
        std::vector<int> cs(cols.begin(), cols.end());
        grid.x_title = "position";
        grid.y_title = "layer.head";
        for (const auto& [l, h] : rs)
            grid.row_labels.push_back(std::to_string(l) + "." + std::to_string(h));
        for (const int c : cs) grid.col_labels.push_back(std::to_string(c));
        for (const TargetDesc& t : matrix.targets) {
            const int r = static_cast<int>(
                std::find(rs.begin(), rs.end(), std::make_pair(t.layer, t.head)) - rs.begin());
            const int c = static_cast<int>(std::find(cs.begin(), cs.end(), t.position) - cs.begin());
            grid.cell_of.push_back({r, c});
        }
        return grid;
    }
    // MLP sweeps: rows = centers (or layers), cols = positions or one column.
    std::set<int> rows, cols;
    for (const TargetDesc& t : matrix.targets) {
        rows.insert(t.window_center >= 0 ? t.window_center : t.layer);
        cols.insert(t.position); // may be just {-1}
    }
    std::vector<int> rs(rows.begin(), rows.end());
    std::vector<int> cs(cols.begin(), cols.end());
    grid.x_title = any_pos ? "position" : "";
    grid.y_title = "mlp layer";
    for (const int r : rs) grid.row_labels.push_back(std::to_string(r));
    for (const int c : cs) grid.col_labels.push_back(c < 0 ? "effect" : std::to_string(c));
    for (const TargetDesc& t : matrix.targets) {
        const int rv = t.window_center >= 0 ? t.window_center : t.layer;
        const int r = static_cast<int>(std::find(rs.begin(), rs.end(), rv) - rs.begin());
        const int c = static_cast<int>(std::find(cs.begin(), cs.end(), t.position) - cs.begin());
        grid.cell_of.push_back({r, c});
    }
    return grid;
}

std::string escape_xml(const std::string& s) {
    std::string out;
    for (const char c : s) {
        switch (c) {
            case '&': out += "&amp;"; break;
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            default: out.push_back(c);
        }
    }
    return out;
}

} // namespace

std::string svg_heatmap(const EffectMatrix& matrix, Metric metric, const std::string& title) {
    const int m = matrix.metric_index(metric);
    const GridSpec grid = plan_grid(matrix);
    const int n_rows = static_cast<int>(grid.row_labels.size());
    const int n_cols = static_cast<int>(grid.col_labels.size());

    double vmax = 0.0;
    for (size_t t = 0; t < matrix.targets.size(); ++t)
        vmax = std::max(vmax, std::abs(matrix.effects[t][static_cast<size_t>(m)]));
    if (vmax == 0.0) vmax = 1.0;

    const int cell = n_cols > 40 ? 10 : 18;
    const int left = 64, top = 40, right = 24, bottom = 44;
    const int width = left + n_cols * cell + right;
    const int height = top + n_rows * cell + bottom;

    std::ostringstream svg;
    svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\""
        << height << "\" viewBox=\"0 0 " << width << " " << height << "\">\n";
    svg << "<rect width=\"" << width << "\" height=\"" << height << "\" fill=\"white\"/>\n";
    svg << "<text x=\"" << width / 2 << "\" y=\"18\" text-anchor=\"middle\" "
        << "font-family=\"sans-serif\" font-size=\"13\">" << escape_xml(title) << "</text>\n";

    for (size_t t = 0; t < matrix.targets.size(); ++t) {
        const auto [r, c] = grid.cell_of[t];
        const double v = matrix.effects[t][static_cast<size_t>(m)];
        svg << "<rect x=\"" << left + c * cell << "\" y=\"" << top + r * cell << "\" width=\""
            << cell << "\" height=\"" << cell << "\" fill=\"" << diverging_color(v / vmax)
            << "\"><title>" << escape_xml(matrix.targets[t].label()) << " = " << v
            << "</title></rect>\n";
    }

    // Axis labels (thinned when dense).
    const int row_step = n_rows > 30 ? (n_rows + 29) / 30 : 1;
    for (int r = 0; r < n_rows; r += row_step)
        svg << "<text x=\"" << left - 6 << "\" y=\"" << top + r * cell + cell / 2 + 4
            << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"10\">"
            << escape_xml(grid.row_labels[static_cast<size_t>(r)]) << "</text>\n";
    const int col_step = n_cols > 30 ? (n_cols + 29) / 30 : 1;
    for (int c = 0; c < n_cols; c += col_step)
        svg << "<text x=\"" << left + c * cell + cell / 2 << "\" y=\"" << top + n_rows * cell + 14
            << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"10\">"
            << escape_xml(grid.col_labels[static_cast<size_t>(c)]) << "</text>\n";

    svg << "<text x=\"" << left + (n_cols * cell) / 2 << "\" y=\"" << height - 8
        << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">"
        << escape_xml(grid.x_title) << "</text>\n";
    svg << "<text x=\"14\" y=\"" << top + (n_rows * cell) / 2
        << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\" "
        << "transform=\"rotate(-90 14 " << top + (n_rows * cell) / 2 << ")\">"
        << escape_xml(grid.y_title) << "</text>\n";

    // Scale annotation.
    svg << "<text x=\"" << width - right << "\" y=\"" << height - 8
        << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"10\">" << "\xc2\xb1"
        << vmax << "</text>\n";
    svg << "</svg>\n";
    return svg.str();
}

} // namespace patchkit
