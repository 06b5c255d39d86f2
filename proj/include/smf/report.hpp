#pragma once

// CSV and SVG emission. Numbers use 6 significant digits ("%.6g").

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "flow.hpp"
#include "metrics.hpp"

namespace smf {

inline std::string format_number(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6g", v);
    return buf;
}

using CsvCell = std::variant<std::string, double, std::uint64_t>;

struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<CsvCell>> rows;
};

namespace detail {

inline std::string csv_escape(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) out += c == '"' ? std::string("\"\"") : std::string(1, c);
    return out + "\"";
}

inline std::string cell_text(const CsvCell& c) {
    if (auto s = std::get_if<std::string>(&c)) return csv_escape(*s);
    if (auto d = std::get_if<double>(&c)) return format_number(*d);
    return std::to_string(std::get<std::uint64_t>(c));
}

}  // namespace detail

inline std::string render_csv(const CsvTable& t) {
    std::string out;
    for (std::size_t i = 0; i < t.header.size(); ++i) out += (i ? "," : "") + detail::csv_escape(t.header[i]);
    out += "\n";
    for (const auto& row : t.rows) {
        if (row.size() != t.header.size())
            throw std::invalid_argument("emit_report: row has " + std::to_string(row.size()) + " cells, header has " +
                                        std::to_string(t.header.size()));
        for (std::size_t i = 0; i < row.size(); ++i) out += (i ? "," : "") + detail::cell_text(row[i]);
        out += "\n";
    }
    return out;
}

inline void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
    out << text;
    if (!out) throw std::runtime_error("write failed: " + path);
}

inline void emit_report(const CsvTable& t, const std::string& path) { write_text(path, render_csv(t)); }

inline CsvTable loss_table(const std::vector<LossRecord>& records) {
    CsvTable t{{"iteration", "component", "value"}, {}};
    for (const auto& r : records) t.rows.push_back({r.iteration, r.tag, r.value});
    return t;
}

/// Per-seed rows (metric, seed, value), then per metric two summary rows
/// (metric, mean, value) and (metric, std, value).
inline CsvTable metric_table(const MetricReport& rep) {
    CsvTable t{{"metric", "seed", "value"}, {}};
    for (const auto& [name, m] : rep.metrics)
        for (const auto& [seed, v] : m.per_seed) t.rows.push_back({name, seed, v});
    for (const auto& [name, m] : rep.metrics) {
        t.rows.push_back({name, std::string("mean"), m.mean});
        t.rows.push_back({name, std::string("std"), m.std});
    }
    return t;
}

// ---------------------------------------------------------------- SVG

/// Line plot of loss curves, one polyline per component tag. Values are
/// plotted on a log10 axis when all are positive.
inline std::string render_loss_svg(const std::vector<LossRecord>& records, const std::string& title) {
    const double W = 640, H = 400, L = 60, R = 150, T = 30, B = 40;
    std::map<std::string, std::vector<std::pair<double, double>>> series;
    bool positive = true;
    for (const auto& r : records) {
        if (!std::isfinite(r.value)) continue;
        series[r.tag].emplace_back(static_cast<double>(r.iteration), r.value);
        positive = positive && r.value > 0.0;
    }
    double x0 = 0, x1 = 1, y0 = 0, y1 = 1;
    bool first = true;
    auto ty = [&](double v) { return positive ? std::log10(v) : v; };
    for (const auto& [tag, pts] : series)
        for (const auto& [x, y] : pts) {
            if (first) {
                x0 = x1 = x;
                y0 = y1 = ty(y);
                first = false;
            }
            x0 = std::min(x0, x), x1 = std::max(x1, x), y0 = std::min(y0, ty(y)), y1 = std::max(y1, ty(y));
        }
    if (x1 == x0) x1 = x0 + 1;
    if (y1 == y0) y1 = y0 + 1;
    auto px = [&](double x) { return L + (x - x0) / (x1 - x0) * (W - L - R); };
    auto py = [&](double y) { return H - B - (ty(y) - y0) / (y1 - y0) * (H - T - B); };
    static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"};

    std::ostringstream s;
    s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n";
    s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    s << "<text x=\"" << L << "\" y=\"20\" font-family=\"sans-serif\" font-size=\"14\">" << title << "</text>\n";
    s << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
    s << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
    s << "<text x=\"" << L << "\" y=\"" << H - 12 << "\" font-family=\"sans-serif\" font-size=\"11\">iteration "
      << format_number(x0) << " .. " << format_number(x1) << "</text>\n";
    s << "<text x=\"4\" y=\"" << T + 10 << "\" font-family=\"sans-serif\" font-size=\"11\">"
      << (positive ? "1e" : "") << format_number(y1) << "</text>\n";
    s << "<text x=\"4\" y=\"" << H - B << "\" font-family=\"sans-serif\" font-size=\"11\">" << (positive ? "1e" : "")
      << format_number(y0) << "</text>\n";
    std::size_t k = 0;
    for (const auto& [tag, pts] : series) {
        const char* c = colors[k % 8];
        s << "<polyline fill=\"none\" stroke=\"" << c << "\" stroke-width=\"1\" points=\"";
        // thin very long curves to at most ~2000 points
        const std::size_t stride = std::max<std::size_t>(1, pts.size() / 2000);
        for (std::size_t i = 0; i < pts.size(); i += stride)
            s << format_number(px(pts[i].first)) << "," << format_number(py(pts[i].second)) << " ";
        s << "\"/>\n";
        s << "<text x=\"" << W - R + 10 << "\" y=\"" << T + 16 * (k + 1) << "\" font-family=\"sans-serif\" font-size=\"11\" fill=\""
          << c << "\">" << tag << "</text>\n";
        ++k;
    }
    s << "</svg>\n";
    return s.str();
}

}  // namespace smf
