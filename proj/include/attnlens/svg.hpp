#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "attnlens/common.hpp"
#include "attnlens/tensor.hpp"

namespace attnlens {

// Sequential scale for nonnegative magnitudes (attention, norms); diverging
// for signed quantities centered on zero (cosine).
enum class ColorScale { Sequential, Diverging };

namespace svg_detail {

inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

inline std::string escape(const std::string& s) {
  std::string out;
  out.reserve(s.size());
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      case '\'': out += "&apos;"; break;
      default: out += c;
    }
  }
  return out;
}

inline std::string rgb(double r, double g, double b) {
  char buf[8];
  auto ch = [](double x) {
    return static_cast<int>(std::lround(std::clamp(x, 0.0, 255.0)));
  };
  std::snprintf(buf, sizeof(buf), "#%02x%02x%02x", ch(r), ch(g), ch(b));
  return buf;
}

// white -> deep blue
inline std::string sequential_color(double t) {
  t = std::clamp(t, 0.0, 1.0);
  return rgb(255.0 + t * (8.0 - 255.0), 255.0 + t * (48.0 - 255.0),
             255.0 + t * (107.0 - 255.0));
}

// red <- white -> blue, t in [-1, 1]
inline std::string diverging_color(double t) {
  t = std::clamp(t, -1.0, 1.0);
  if (t < 0.0)
    return rgb(255.0 - t * (178.0 - 255.0), 255.0 - t * (24.0 - 255.0),
               255.0 - t * (43.0 - 255.0));
  return rgb(255.0 + t * (33.0 - 255.0), 255.0 + t * (102.0 - 255.0),
             255.0 + t * (172.0 - 255.0));
}

inline std::size_t max_len(const std::vector<std::string>& v) {
  std::size_t n = 0;
  for (const auto& s : v) n = std::max(n, s.size());
  return n;
}

}  // namespace svg_detail

// Heatmap with token labels on both axes. Every numeric choice is a pure
// function of the inputs, so output bytes are reproducible.
inline std::string svg_heatmap(const Tensor& m, const std::vector<std::string>& row_labels,
                               const std::vector<std::string>& col_labels, ColorScale scale,
                               const std::string& title = "") {
  using namespace svg_detail;
  if (m.empty()) throw DataError("svg_heatmap: empty matrix");
  if (row_labels.size() != m.rows() || col_labels.size() != m.cols())
    throw DataError("svg_heatmap: label counts must match the matrix");

  double amax = 0.0;
  for (std::size_t i = 0; i < m.size(); ++i) amax = std::max(amax, std::abs(m.raw()[i]));
  if (amax == 0.0) amax = 1.0;

  const int cell = 28;
  const int left = 12 + 8 * static_cast<int>(max_len(row_labels));
  const int top = (title.empty() ? 8 : 30) + 12 + 7 * static_cast<int>(max_len(col_labels));
  const int width = left + cell * static_cast<int>(m.cols()) + 12;
  const int height = top + cell * static_cast<int>(m.rows()) + 30;

  std::string s;
  s += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(width) +
       "\" height=\"" + std::to_string(height) + "\" font-family=\"monospace\" font-size=\"12\">\n";
  if (!title.empty())
    s += "<text x=\"" + std::to_string(left) + "\" y=\"20\" font-size=\"14\">" + escape(title) +
         "</text>\n";
  for (std::size_t c = 0; c < m.cols(); ++c) {
    const int x = left + static_cast<int>(c) * cell + cell / 2 + 4;
    s += "<text x=\"" + std::to_string(x) + "\" y=\"" + std::to_string(top - 6) +
         "\" transform=\"rotate(-90 " + std::to_string(x) + " " + std::to_string(top - 6) +
         ")\">" + escape(col_labels[c]) + "</text>\n";
  }
  for (std::size_t r = 0; r < m.rows(); ++r) {
    const int y = top + static_cast<int>(r) * cell;
    s += "<text x=\"" + std::to_string(left - 6) + "\" y=\"" + std::to_string(y + cell / 2 + 4) +
         "\" text-anchor=\"end\">" + escape(row_labels[r]) + "</text>\n";
    for (std::size_t c = 0; c < m.cols(); ++c) {
      const double v = m(r, c);
      const std::string fill = scale == ColorScale::Sequential
                                   ? sequential_color(v / amax)
                                   : diverging_color(v / amax);
      const int x = left + static_cast<int>(c) * cell;
      s += "<rect x=\"" + std::to_string(x) + "\" y=\"" + std::to_string(y) + "\" width=\"" +
           std::to_string(cell) + "\" height=\"" + std::to_string(cell) + "\" fill=\"" + fill +
           "\" stroke=\"#ffffff\"><title>" + escape(row_labels[r]) + " / " +
           escape(col_labels[c]) + ": " + fmt(v) + "</title></rect>\n";
    }
  }
  const std::string scale_name =
      scale == ColorScale::Sequential ? "sequential [0, " + fmt(amax) + "]"
                                      : "diverging [-" + fmt(amax) + ", " + fmt(amax) + "]";
  s += "<text x=\"" + std::to_string(left) + "\" y=\"" + std::to_string(height - 10) +
       "\" font-size=\"10\">scale: " + scale_name + "</text>\n";
  s += "</svg>\n";
  return s;
}

// Horizontal bar chart; bar lengths scale to the largest magnitude.
inline std::string svg_bars(const std::vector<double>& values,
                            const std::vector<std::string>& labels,
                            const std::string& title = "") {
  using namespace svg_detail;
  if (values.empty()) throw DataError("svg_bars: no values");
  if (labels.size() != values.size()) throw DataError("svg_bars: label count mismatch");

  double amax = 0.0;
  for (double v : values) amax = std::max(amax, std::abs(v));
  if (amax == 0.0) amax = 1.0;

  const int bar_h = 18, gap = 6, bar_w = 260;
  const int left = 12 + 8 * static_cast<int>(max_len(labels));
  const int top = title.empty() ? 10 : 32;
  const int width = left + bar_w + 90;
  const int height = top + static_cast<int>(values.size()) * (bar_h + gap) + 10;

  std::string s;
  s += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(width) +
       "\" height=\"" + std::to_string(height) + "\" font-family=\"monospace\" font-size=\"12\">\n";
  if (!title.empty())
    s += "<text x=\"" + std::to_string(left) + "\" y=\"20\" font-size=\"14\">" + escape(title) +
         "</text>\n";
  for (std::size_t i = 0; i < values.size(); ++i) {
    const int y = top + static_cast<int>(i) * (bar_h + gap);
    const int w = static_cast<int>(std::lround(std::abs(values[i]) / amax * bar_w));
    s += "<text x=\"" + std::to_string(left - 6) + "\" y=\"" + std::to_string(y + bar_h - 4) +
         "\" text-anchor=\"end\">" + escape(labels[i]) + "</text>\n";
    s += "<rect x=\"" + std::to_string(left) + "\" y=\"" + std::to_string(y) + "\" width=\"" +
         std::to_string(w) + "\" height=\"" + std::to_string(bar_h) +
         "\" fill=\"" + sequential_color(std::abs(values[i]) / amax) + "\"/>\n";
    s += "<text x=\"" + std::to_string(left + w + 6) + "\" y=\"" + std::to_string(y + bar_h - 4) +
         "\">" + fmt(values[i]) + "</text>\n";
  }
  s += "</svg>\n";
  return s;
}

}  // namespace attnlens
