#pragma once

#include "rnn_dynamo/common.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

namespace rnn_dynamo {

/// Shortest decimal text that reads back to the same double.
inline std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  return fmt::format("{}", v);
}

inline std::string format_number(long v) { return std::to_string(v); }
inline std::string format_number(int v) { return std::to_string(v); }

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  void add_row(std::vector<std::string> row) {
    if (row.size() != header.size()) {
      throw Error("csv row has " + std::to_string(row.size()) + " fields, header has " +
                  std::to_string(header.size()));
    }
    rows.push_back(std::move(row));
  }

  std::size_t column(std::string_view name) const {
    for (std::size_t i = 0; i < header.size(); ++i) {
      if (header[i] == name) return i;
    }
    throw Error("csv has no column '" + std::string(name) + "'");
  }
};

namespace detail {

inline bool needs_quotes(std::string_view field) {
  return field.find_first_of(",\"\r\n") != std::string_view::npos;
}

inline void append_field(std::string& out, std::string_view field) {
  if (!needs_quotes(field)) {
    out.append(field);
    return;
  }
  out.push_back('"');
  for (char c : field) {
    if (c == '"') out.push_back('"');
    out.push_back(c);
  }
  out.push_back('"');
}

inline void append_record(std::string& out, const std::vector<std::string>& fields) {
  for (std::size_t i = 0; i < fields.size(); ++i) {
    if (i) out.push_back(',');
    append_field(out, fields[i]);
  }
  out.push_back('\n');
}

}  // namespace detail

/// RFC 4180 style: comma separated, "\n" record ends, fields quoted only when
/// they contain a comma, quote or line break.
inline std::string to_csv(const CsvTable& t) {
  std::string out;
  detail::append_record(out, t.header);
  for (const auto& r : t.rows) detail::append_record(out, r);
  return out;
}

inline CsvTable parse_csv(std::string_view text) {
  std::vector<std::vector<std::string>> records;
  std::vector<std::string> fields;
  std::string field;
  bool quoted = false;
  bool in_record = false;
  std::size_t i = 0;
  while (i < text.size()) {
    const char c = text[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field.push_back('"');
          i += 2;
          continue;
        }
        quoted = false;
      } else {
        field.push_back(c);
      }
      ++i;
      continue;
    }
    in_record = true;
    if (c == '"' && field.empty()) {
      quoted = true;
    } else if (c == ',') {
      fields.push_back(std::move(field));
      field.clear();
    } else if (c == '\n') {
      fields.push_back(std::move(field));
      field.clear();
      records.push_back(std::move(fields));
      fields.clear();
      in_record = false;
    } else if (c != '\r') {
      field.push_back(c);
    }
    ++i;
  }
  if (quoted) throw Error("csv: unterminated quoted field");
  if (in_record) {
    fields.push_back(std::move(field));
    records.push_back(std::move(fields));
  }
  if (records.empty()) throw Error("csv: missing header row");
  CsvTable t;
  t.header = std::move(records.front());
  for (std::size_t r = 1; r < records.size(); ++r) {
    if (records[r].size() != t.header.size()) {
      throw Error("csv: record " + std::to_string(r + 1) + " has " + std::to_string(records[r].size()) +
                  " fields, expected " + std::to_string(t.header.size()));
    }
    t.rows.push_back(std::move(records[r]));
  }
  return t;
}

inline std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_text_file(const std::filesystem::path& path, std::string_view content) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!out) throw Error("write failed for " + path.string());
}

// ---------------------------------------------------------------------------
// SVG

inline std::string_view palette(std::size_t i) {
  static constexpr std::string_view kColors[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
                                                 "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};
  return kColors[i % std::size(kColors)];
}

inline std::string xml_escape(std::string_view s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out.push_back(c);
    }
  }
  return out;
}

/// Minimal SVG writer; coordinates are printed with two decimals so the
/// output is stable text.
class SvgDocument {
 public:
  SvgDocument(double width, double height) : width_(width), height_(height) {}

  void line(double x1, double y1, double x2, double y2, std::string_view stroke, double width = 1.0,
            std::string_view dash = {}) {
    body_ += fmt::format(R"(<line x1="{:.2f}" y1="{:.2f}" x2="{:.2f}" y2="{:.2f}" stroke="{}" stroke-width="{:.2f}")",
                         x1, y1, x2, y2, stroke, width);
    if (!dash.empty()) body_ += fmt::format(R"( stroke-dasharray="{}")", dash);
    body_ += "/>\n";
  }

  void circle(double cx, double cy, double r, std::string_view fill, double opacity = 1.0) {
    body_ += fmt::format(R"(<circle cx="{:.2f}" cy="{:.2f}" r="{:.2f}" fill="{}" fill-opacity="{:.2f}"/>)", cx, cy,
                         r, fill, opacity);
    body_ += "\n";
  }

  void rect(double x, double y, double w, double h, std::string_view fill, std::string_view stroke = "none") {
    body_ += fmt::format(R"(<rect x="{:.2f}" y="{:.2f}" width="{:.2f}" height="{:.2f}" fill="{}" stroke="{}"/>)", x,
                         y, w, h, fill, stroke);
    body_ += "\n";
  }

  void polyline(const std::vector<std::pair<double, double>>& pts, std::string_view stroke, double width = 1.5) {
    body_ += R"(<polyline fill="none" stroke=")" + std::string(stroke) + fmt::format(R"(" stroke-width="{:.2f}" points=")", width);
    for (std::size_t i = 0; i < pts.size(); ++i) {
      if (i) body_.push_back(' ');
      body_ += fmt::format("{:.2f},{:.2f}", pts[i].first, pts[i].second);
    }
    body_ += "\"/>\n";
  }

  void text(double x, double y, std::string_view s, double size = 12.0, std::string_view anchor = "start",
            std::string_view fill = "#000000") {
    body_ += fmt::format(R"(<text x="{:.2f}" y="{:.2f}" font-family="sans-serif" font-size="{:.1f}" text-anchor="{}" fill="{}">{}</text>)",
                         x, y, size, anchor, fill, xml_escape(s));
    body_ += "\n";
  }

  /// Fixed-point markers: black ring for stable points, open diamond for
  /// saddles, open square otherwise.
  void marker(double cx, double cy, std::string_view kind) {
    if (kind == "stable") {
      circle(cx, cy, 6.0, "#000000");
      circle(cx, cy, 2.5, "#ffffff");
    } else if (kind == "saddle") {
      body_ += fmt::format(R"(<polygon points="{:.2f},{:.2f} {:.2f},{:.2f} {:.2f},{:.2f} {:.2f},{:.2f}" fill="#ffffff" stroke="#000000" stroke-width="1.50"/>)",
                           cx, cy - 6, cx + 6, cy, cx, cy + 6, cx - 6, cy);
      body_ += "\n";
    } else {
      rect(cx - 5, cy - 5, 10, 10, "#ffffff", "#000000");
    }
  }

  std::string str() const {
    return fmt::format(R"(<svg xmlns="http://www.w3.org/2000/svg" width="{:.0f}" height="{:.0f}" viewBox="0 0 {:.0f} {:.0f}">)",
                       width_, height_, width_, height_) +
           "\n" + fmt::format(R"(<rect width="{:.0f}" height="{:.0f}" fill="#ffffff"/>)", width_, height_) + "\n" +
           body_ + "</svg>\n";
  }

 private:
  double width_;
  double height_;
  std::string body_;
};

namespace detail {

struct Frame {
  double left = 70, top = 40, width = 480, height = 360;
  double x0 = 0, x1 = 1, y0 = 0, y1 = 1;

  double sx(double x) const { return left + (x - x0) / (x1 - x0) * width; }
  double sy(double y) const { return top + height - (y - y0) / (y1 - y0) * height; }
};

inline void expand(double& lo, double& hi, double margin) {
  if (!(hi > lo)) {
    lo -= 1.0;
    hi += 1.0;
  }
  const double pad = (hi - lo) * margin;
  lo -= pad;
  hi += pad;
}

inline void draw_axes(SvgDocument& svg, const Frame& f, std::string_view title, std::string_view xlabel,
                      std::string_view ylabel, int ticks = 5) {
  svg.rect(f.left, f.top, f.width, f.height, "none", "#333333");
  for (int i = 0; i <= ticks; ++i) {
    const double tx = f.x0 + (f.x1 - f.x0) * i / ticks;
    const double ty = f.y0 + (f.y1 - f.y0) * i / ticks;
    svg.line(f.sx(tx), f.top + f.height, f.sx(tx), f.top + f.height + 4, "#333333");
    svg.text(f.sx(tx), f.top + f.height + 17, fmt::format("{:.2f}", tx), 10, "middle");
    svg.line(f.left - 4, f.sy(ty), f.left, f.sy(ty), "#333333");
    svg.text(f.left - 7, f.sy(ty) + 3, fmt::format("{:.2f}", ty), 10, "end");
  }
  svg.text(f.left + f.width / 2, f.top - 14, title, 14, "middle");
  svg.text(f.left + f.width / 2, f.top + f.height + 36, xlabel, 12, "middle");
  svg.text(16, f.top + f.height / 2, ylabel, 12, "start");
}

}  // namespace detail

/// Cumulative explained variance against the number of components, with the
/// threshold line and the resulting dimensionality marked.
inline std::string variance_curve_svg(const VectorXd& ratios, double threshold, int id, std::string_view title) {
  SvgDocument svg(620, 460);
  detail::Frame f;
  f.x0 = 1;
  f.x1 = std::max<double>(2, static_cast<double>(ratios.size()));
  f.y0 = 0;
  f.y1 = 1;
  detail::draw_axes(svg, f, title, "principal components", "cum. var.", std::min<int>(5, static_cast<int>(f.x1 - 1)));
  std::vector<std::pair<double, double>> pts;
  double cumulative = 0.0;
  for (Eigen::Index k = 0; k < ratios.size(); ++k) {
    cumulative += ratios(k);
    pts.emplace_back(f.sx(static_cast<double>(k + 1)), f.sy(std::min(1.0, cumulative)));
  }
  svg.line(f.left, f.sy(threshold), f.left + f.width, f.sy(threshold), "#d62728", 1.0, "6,4");
  svg.text(f.left + f.width - 4, f.sy(threshold) - 5, fmt::format("{:.0f}% variance", 100 * threshold), 10, "end",
           "#d62728");
  svg.polyline(pts, palette(0), 2.0);
  for (const auto& [x, y] : pts) svg.circle(x, y, 3, palette(0));
  if (id >= 1 && id <= ratios.size()) {
    svg.line(f.sx(id), f.top, f.sx(id), f.top + f.height, "#2ca02c", 1.0, "3,3");
    svg.text(f.sx(id) + 4, f.top + 14, fmt::format("id = {}", id), 11, "start", "#2ca02c");
  }
  return svg.str();
}

struct ScatterPlot {
  std::string title;
  MatrixXd points;              // S x 2
  std::vector<int> labels;      // colour index per point
  std::vector<std::string> names;
  MatrixXd centroids;           // optional, k x 2
  MatrixXd arrows;              // optional readout directions, N x 2, drawn from `arrow_origin`
  Eigen::Vector2d arrow_origin = Eigen::Vector2d::Zero();
  MatrixXd fixed_points;        // optional, F x 2
  std::vector<std::string> fixed_kinds;
};

inline std::string scatter_svg(const ScatterPlot& plot) {
  SvgDocument svg(760, 480);
  detail::Frame f;
  f.width = 480;
  double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
  auto include = [&](const MatrixXd& m) {
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      x0 = std::min(x0, m(i, 0));
      x1 = std::max(x1, m(i, 0));
      y0 = std::min(y0, m(i, 1));
      y1 = std::max(y1, m(i, 1));
    }
  };
  include(plot.points);
  include(plot.fixed_points);
  include(plot.centroids);
  if (!std::isfinite(x0)) x0 = x1 = y0 = y1 = 0.0;
  double arrow_scale = 0.0;
  if (plot.arrows.rows() > 0) {
    const double span = std::max(x1 - x0, y1 - y0);
    const double longest = plot.arrows.rowwise().norm().maxCoeff();
    arrow_scale = longest > 0.0 ? 0.45 * span / longest : 0.0;
    MatrixXd tips = (plot.arrows * arrow_scale).rowwise() + plot.arrow_origin.transpose();
    include(tips);
  }
  detail::expand(x0, x1, 0.05);
  detail::expand(y0, y1, 0.05);
  f.x0 = x0;
  f.x1 = x1;
  f.y0 = y0;
  f.y1 = y1;
  detail::draw_axes(svg, f, plot.title, "PC 1", "PC 2");
  for (Eigen::Index i = 0; i < plot.points.rows(); ++i) {
    const auto l = static_cast<std::size_t>(i) < plot.labels.size() ? plot.labels[static_cast<std::size_t>(i)] : 0;
    svg.circle(f.sx(plot.points(i, 0)), f.sy(plot.points(i, 1)), 2.2, palette(static_cast<std::size_t>(l)), 0.6);
  }
  for (Eigen::Index i = 0; i < plot.centroids.rows(); ++i) {
    svg.circle(f.sx(plot.centroids(i, 0)), f.sy(plot.centroids(i, 1)), 4.5, "#000000");
  }
  for (Eigen::Index i = 0; i < plot.arrows.rows(); ++i) {
    const double ox = plot.arrow_origin(0), oy = plot.arrow_origin(1);
    const double tx = ox + arrow_scale * plot.arrows(i, 0), ty = oy + arrow_scale * plot.arrows(i, 1);
    svg.line(f.sx(ox), f.sy(oy), f.sx(tx), f.sy(ty), palette(static_cast<std::size_t>(i)), 2.0);
    svg.text(f.sx(tx), f.sy(ty) - 4, fmt::format("r{}", i), 10, "middle", palette(static_cast<std::size_t>(i)));
  }
  for (Eigen::Index i = 0; i < plot.fixed_points.rows(); ++i) {
    const std::string kind =
        static_cast<std::size_t>(i) < plot.fixed_kinds.size() ? plot.fixed_kinds[static_cast<std::size_t>(i)] : "";
    svg.marker(f.sx(plot.fixed_points(i, 0)), f.sy(plot.fixed_points(i, 1)), kind);
  }
  double ly = f.top + 10;
  for (std::size_t i = 0; i < plot.names.size(); ++i, ly += 18) {
    svg.circle(f.left + f.width + 24, ly - 4, 5, palette(i));
    svg.text(f.left + f.width + 34, ly, plot.names[i], 11);
  }
  if (plot.fixed_points.rows() > 0) {
    ly += 8;
    for (std::string_view kind : {"stable", "saddle", "other"}) {
      svg.marker(f.left + f.width + 24, ly - 4, kind);
      svg.text(f.left + f.width + 34, ly, kind == "other" ? "unstable / marginal" : kind, 11);
      ly += 18;
    }
  }
  return svg.str();
}

/// Heatmap of m(i, j); cells above `label_min` carry their value.
inline std::string heatmap_svg(const MatrixXd& m, const std::vector<std::string>& row_names,
                               const std::vector<std::string>& col_names, std::string_view title,
                               double label_min = 0.5) {
  const double cell = 44.0;
  const double left = 150.0, top = 60.0;
  const double width = left + cell * static_cast<double>(m.cols()) + 40;
  const double height = top + cell * static_cast<double>(m.rows()) + 120;
  SvgDocument svg(width, height);
  svg.text(width / 2, 28, title, 14, "middle");
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      const double v = std::clamp(m(i, j), -1.0, 1.0);
      // blue for negative, red for positive
      const int shade = static_cast<int>(std::lround(255 * (1.0 - std::abs(v))));
      const std::string fill = v >= 0 ? fmt::format("#ff{:02x}{:02x}", shade, shade)
                                      : fmt::format("#{:02x}{:02x}ff", shade, shade);
      const double x = left + cell * static_cast<double>(j), y = top + cell * static_cast<double>(i);
      svg.rect(x, y, cell, cell, fill, "#ffffff");
      if (m(i, j) > label_min) svg.text(x + cell / 2, y + cell / 2 + 4, fmt::format("{:.2f}", m(i, j)), 10, "middle");
    }
    const auto name = static_cast<std::size_t>(i) < row_names.size() ? row_names[static_cast<std::size_t>(i)]
                                                                      : std::to_string(i);
    svg.text(left - 8, top + cell * static_cast<double>(i) + cell / 2 + 4, name, 11, "end");
  }
  for (Eigen::Index j = 0; j < m.cols(); ++j) {
    const auto name = static_cast<std::size_t>(j) < col_names.size() ? col_names[static_cast<std::size_t>(j)]
                                                                      : std::to_string(j);
    svg.text(left + cell * static_cast<double>(j) + cell / 2, top + cell * static_cast<double>(m.rows()) + 16, name,
             10, "middle");
  }
  return svg.str();
}

}  // namespace rnn_dynamo
