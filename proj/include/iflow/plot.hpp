#pragma once

// Dependency-free SVG figures.
//
// Segment palette: segment s of M gets hue 360*s/M at saturation 65% and
// lightness 50%, written as #rrggbb.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "iflow/common.hpp"
#include "iflow/error.hpp"
#include "iflow/eval.hpp"
#include "iflow/report.hpp"

namespace iflow::plot {

inline std::string hsl_hex(double hue, double sat, double light) {
  const double c = (1.0 - std::abs(2.0 * light - 1.0)) * sat;
  const double hp = std::fmod(hue, 360.0) / 60.0;
  const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
  double r = 0, g = 0, b = 0;
  if (hp < 1) { r = c; g = x; }
  else if (hp < 2) { r = x; g = c; }
  else if (hp < 3) { g = c; b = x; }
  else if (hp < 4) { g = x; b = c; }
  else if (hp < 5) { r = x; b = c; }
  else { r = c; b = x; }
  const double m = light - c / 2.0;
  auto ch = [m](double v) { return static_cast<int>(std::lround((v + m) * 255.0)); };
  char buf[8];
  std::snprintf(buf, sizeof buf, "#%02x%02x%02x", ch(r), ch(g), ch(b));
  return buf;
}

inline std::vector<std::string> segment_palette(std::size_t segments) {
  std::vector<std::string> out;
  for (std::size_t s = 0; s < segments; ++s) {
    out.push_back(hsl_hex(360.0 * static_cast<double>(s) / static_cast<double>(segments), 0.65, 0.5));
  }
  return out;
}

inline std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

inline std::string escape(const std::string& s) {
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

inline std::string header(double w, double h, const std::string& fp, const std::string& title) {
  std::string s = "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  s += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + num(w) + "\" height=\"" + num(h) +
       "\" viewBox=\"0 0 " + num(w) + " " + num(h) + "\">\n";
  s += "<!-- fingerprint: " + escape(fp) + " -->\n";
  s += "<title>" + escape(title) + "</title>\n";
  s += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  return s;
}

struct Range {
  double lo = 0.0, hi = 1.0;
  double map(double v, double out_lo, double out_hi) const {
    const double t = hi > lo ? (v - lo) / (hi - lo) : 0.5;
    return out_lo + t * (out_hi - out_lo);
  }
};

inline Range range_of(const std::vector<double>& v) {
  Range r;
  bool any = false;
  for (double x : v) {
    if (!std::isfinite(x)) continue;
    r.lo = any ? std::min(r.lo, x) : x;
    r.hi = any ? std::max(r.hi, x) : x;
    any = true;
  }
  if (!any) return {0.0, 1.0};
  const double pad = r.hi > r.lo ? 0.05 * (r.hi - r.lo) : 0.5;
  return {r.lo - pad, r.hi + pad};
}

// One scatter panel in local coordinates [0, size]^2; one <path> per segment.
inline std::string scatter_panel(const Matrix& pts, const std::vector<std::size_t>& segment,
                                 const std::vector<std::string>& palette, double size, const std::string& title) {
  const Range rx = range_of(std::vector<double>(pts.col(0).begin(), pts.col(0).end()));
  const Range ry = range_of(std::vector<double>(pts.col(1).begin(), pts.col(1).end()));
  std::vector<std::string> paths(palette.size());
  for (Eigen::Index r = 0; r < pts.rows(); ++r) {
    const double x = rx.map(pts(r, 0), 0.0, size);
    const double y = ry.map(pts(r, 1), size, 0.0);
    paths[segment[static_cast<std::size_t>(r)]] += "M" + num(x - 1.5) + " " + num(y) + "a1.5 1.5 0 1 0 3 0a1.5 1.5 0 1 0 -3 0";
  }
  std::string s = "<text x=\"" + num(size / 2) + "\" y=\"-8\" text-anchor=\"middle\" font-size=\"14\">" +
                  escape(title) + "</text>\n";
  s += "<rect width=\"" + num(size) + "\" height=\"" + num(size) + "\" fill=\"none\" stroke=\"#999\"/>\n";
  for (std::size_t k = 0; k < paths.size(); ++k) {
    if (paths[k].empty()) continue;
    s += "<path class=\"segment\" data-segment=\"" + std::to_string(k) + "\" fill=\"" + palette[k] +
         "\" fill-opacity=\"0.7\" d=\"" + paths[k] + "\"/>\n";
  }
  return s;
}

// Sources, observations and recovered latents side by side, coloured by segment.
inline std::string scatter_triple(const Matrix& z_true, const Matrix& x, const Matrix& z_hat,
                                  const std::vector<std::size_t>& segment, std::size_t segments,
                                  const std::string& fp) {
  if (z_true.cols() != 2 || x.cols() != 2 || z_hat.cols() != 2) {
    throw ConfigError("scatter plots need n = 2 (got n = " + std::to_string(z_true.cols()) + ")");
  }
  const auto palette = segment_palette(segments);
  const double size = 300.0, gap = 60.0;
  std::string s = header(3 * size + 4 * gap, size + 2 * gap, fp, "sources, observations, recovered latents");
  const Matrix* panels[3] = {&z_true, &x, &z_hat};
  const char* titles[3] = {"sources", "observations", "recovered latents"};
  for (int p = 0; p < 3; ++p) {
    s += "<g class=\"panel\" transform=\"translate(" + num(gap + p * (size + gap)) + "," + num(gap) + ")\">\n";
    s += scatter_panel(*panels[p], segment, palette, size, titles[p]);
    s += "</g>\n";
  }
  s += "</svg>\n";
  return s;
}

struct Series {
  std::string label;
  std::vector<double> x, y;
};

inline std::string line_panel(const std::vector<Series>& series, double w, double h, const std::string& title,
                              const std::string& ylabel) {
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};
  std::vector<double> xs, ys;
  for (const auto& sr : series) {
    xs.insert(xs.end(), sr.x.begin(), sr.x.end());
    ys.insert(ys.end(), sr.y.begin(), sr.y.end());
  }
  const Range rx = range_of(xs), ry = range_of(ys);
  std::string s = "<text x=\"" + num(w / 2) + "\" y=\"-8\" text-anchor=\"middle\" font-size=\"14\">" + escape(title) +
                  "</text>\n";
  s += "<rect width=\"" + num(w) + "\" height=\"" + num(h) + "\" fill=\"none\" stroke=\"#999\"/>\n";
  s += "<text x=\"-8\" y=\"" + num(h / 2) + "\" text-anchor=\"end\" font-size=\"11\">" + escape(ylabel) + "</text>\n";
  s += "<text x=\"-4\" y=\"" + num(h) + "\" text-anchor=\"end\" font-size=\"10\">" + num(ry.lo) + "</text>\n";
  s += "<text x=\"-4\" y=\"10\" text-anchor=\"end\" font-size=\"10\">" + num(ry.hi) + "</text>\n";
  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto& sr = series[k];
    std::string d;
    for (std::size_t i = 0; i < sr.x.size(); ++i) {
      if (!std::isfinite(sr.y[i])) continue;
      d += (d.empty() ? "M" : "L") + num(rx.map(sr.x[i], 0.0, w)) + " " + num(ry.map(sr.y[i], h, 0.0));
    }
    const std::string col = colors[k % 6];
    s += "<path class=\"series\" fill=\"none\" stroke=\"" + col + "\" stroke-width=\"1.5\" d=\"" + d + "\"/>\n";
    s += "<text x=\"" + num(w - 4) + "\" y=\"" + num(14.0 * static_cast<double>(k + 1)) +
         "\" text-anchor=\"end\" font-size=\"11\" fill=\"" + col + "\">" + escape(sr.label) + "</text>\n";
  }
  return s;
}

// MCC and energy against seed, one line per sweep.
inline std::string sweep_charts(const std::vector<SweepSummary>& sweeps, const std::string& fp) {
  if (sweeps.empty()) throw ConfigError("no sweep summaries to plot");
  const double w = 420.0, h = 260.0, gap = 70.0;
  std::vector<Series> m, e;
  for (const auto& sw : sweeps) {
    Series sm{sw.activation, {}, {}}, se{sw.activation, {}, {}};
    for (const auto& r : sw.runs) {
      sm.x.push_back(static_cast<double>(r.seed));
      sm.y.push_back(r.mcc);
      se.x.push_back(static_cast<double>(r.seed));
      se.y.push_back(r.energy);
    }
    m.push_back(std::move(sm));
    e.push_back(std::move(se));
  }
  std::string s = header(2 * w + 3 * gap, h + 2 * gap, fp, "MCC and energy by seed");
  s += "<g class=\"panel\" transform=\"translate(" + num(gap) + "," + num(gap) + ")\">\n" +
       line_panel(m, w, h, "MCC by seed", "MCC") + "</g>\n";
  s += "<g class=\"panel\" transform=\"translate(" + num(2 * gap + w) + "," + num(gap) + ")\">\n" +
       line_panel(e, w, h, "energy by seed", "energy") + "</g>\n";
  s += "</svg>\n";
  return s;
}

// One panel per source dimension: the true source and its matched, sign
// corrected latent, both standardised, over the first max_points samples.
inline std::string dimension_panels(const std::vector<DimensionSeries>& dims, const std::string& fp,
                                    std::size_t max_points = 500) {
  const double w = 640.0, h = 140.0, gap = 50.0;
  std::string s = header(w + 2 * gap, static_cast<double>(dims.size()) * (h + gap) + gap, fp,
                         "per-dimension recovery");
  for (std::size_t d = 0; d < dims.size(); ++d) {
    const auto& ds = dims[d];
    const std::size_t count = std::min(max_points, ds.truth.size());
    Series t{"source", {}, {}}, r{"recovered", {}, {}};
    for (std::size_t i = 0; i < count; ++i) {
      t.x.push_back(static_cast<double>(i));
      t.y.push_back(ds.truth[i]);
      r.x.push_back(static_cast<double>(i));
      r.y.push_back(ds.recovered[i]);
    }
    char title[128];
    std::snprintf(title, sizeof title, "source %zu vs latent %zu (corr %.3f)", ds.source + 1, ds.latent + 1, ds.corr);
    s += "<g class=\"panel\" transform=\"translate(" + num(gap) + "," +
         num(gap + static_cast<double>(d) * (h + gap)) + ")\">\n" + line_panel({t, r}, w, h, title, "") + "</g>\n";
  }
  s += "</svg>\n";
  return s;
}

}  // namespace iflow::plot
