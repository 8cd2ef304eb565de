#include "figures.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>
#include <stdexcept>

namespace cem::cli {

namespace {

using json = nlohmann::ordered_json;

constexpr double kSize = 400;
constexpr double kMargin = 40;

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::string rgb(const std::array<double, 3>& c) {
  char buf[32];
  auto byte = [](double v) { return static_cast<int>(std::lround(std::clamp(v, 0.0, 1.0) * 255)); };
  std::snprintf(buf, sizeof buf, "#%02x%02x%02x", byte(c[0]), byte(c[1]), byte(c[2]));
  return buf;
}

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '<') out += "&lt;";
    else if (c == '>') out += "&gt;";
    else if (c == '&') out += "&amp;";
    else out += c;
  }
  return out;
}

// Axis-aligned plot frame mapping data ranges onto the canvas.
struct Frame {
  double x0, x1, y0, y1;
  double px(double x) const { return kMargin + (x - x0) / (x1 - x0) * (kSize - 2 * kMargin); }
  double py(double y) const { return kSize - kMargin - (y - y0) / (y1 - y0) * (kSize - 2 * kMargin); }
};

Frame padded(double x0, double x1, double y0, double y1) {
  if (!(x1 > x0)) x0 -= 0.5, x1 += 0.5;
  if (!(y1 > y0)) y0 -= 0.5, y1 += 0.5;
  return {x0, x1, y0, y1};
}

std::string open_svg(const std::string& title) {
  std::string s = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + num(kSize) + "\" height=\"" +
                  num(kSize) + "\" viewBox=\"0 0 " + num(kSize) + " " + num(kSize) + "\">\n";
  s += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s += "<text x=\"" + num(kSize / 2) + "\" y=\"20\" text-anchor=\"middle\" font-size=\"13\">" + escape(title) +
       "</text>\n";
  return s;
}

std::string axes(const Frame& f, const std::string& xlabel, const std::string& ylabel) {
  const double l = kMargin, r = kSize - kMargin, t = kMargin, b = kSize - kMargin;
  std::string s = "<g stroke=\"black\" fill=\"none\"><rect x=\"" + num(l) + "\" y=\"" + num(t) + "\" width=\"" +
                  num(r - l) + "\" height=\"" + num(b - t) + "\"/></g>\n";
  s += "<g font-size=\"10\">";
  s += "<text x=\"" + num(l) + "\" y=\"" + num(b + 14) + "\">" + num(f.x0) + "</text>";
  s += "<text x=\"" + num(r) + "\" y=\"" + num(b + 14) + "\" text-anchor=\"end\">" + num(f.x1) + "</text>";
  s += "<text x=\"" + num(l - 4) + "\" y=\"" + num(b) + "\" text-anchor=\"end\">" + num(f.y0) + "</text>";
  s += "<text x=\"" + num(l - 4) + "\" y=\"" + num(t + 8) + "\" text-anchor=\"end\">" + num(f.y1) + "</text>";
  s += "<text x=\"" + num(kSize / 2) + "\" y=\"" + num(b + 28) + "\" text-anchor=\"middle\">" + escape(xlabel) +
       "</text>";
  s += "<text x=\"12\" y=\"" + num(kSize / 2) + "\" transform=\"rotate(-90 12 " + num(kSize / 2) +
       ")\" text-anchor=\"middle\">" + escape(ylabel) + "</text>";
  s += "</g>\n";
  return s;
}

std::string polyline(const std::vector<std::pair<double, double>>& pts, const std::string& stroke) {
  std::string s = "<polyline fill=\"none\" stroke=\"" + stroke + "\" points=\"";
  for (const auto& [x, y] : pts) s += num(x) + "," + num(y) + " ";
  return s + "\"/>\n";
}

std::string entity_mark(double x, double y, const std::array<double, 3>& color, int shape, double r) {
  const std::string fill = "fill=\"" + rgb(color) + "\" stroke=\"black\"";
  if (shape == 1)
    return "<rect x=\"" + num(x - r) + "\" y=\"" + num(y - r) + "\" width=\"" + num(2 * r) + "\" height=\"" +
           num(2 * r) + "\" " + fill + "/>\n";
  if (shape == 2)
    return "<polygon points=\"" + num(x) + "," + num(y - r) + " " + num(x - r) + "," + num(y + r) + " " +
           num(x + r) + "," + num(y + r) + "\" " + fill + "/>\n";
  return "<circle cx=\"" + num(x) + "\" cy=\"" + num(y) + "\" r=\"" + num(r) + "\" " + fill + "/>\n";
}

double to_double(const std::string& s) {
  std::size_t used = 0;
  const double v = std::stod(s, &used);
  if (used != s.size()) throw std::invalid_argument("not a number: '" + s + "'");
  return v;
}

const std::array<const char*, 3> kKindColors{"#1f77b4", "#d62728", "#7f7f7f"};

}  // namespace

std::string trajectory_to_json(const Trajectory& t) {
  json j;
  j["colors"] = t.colors;
  j["shapes"] = t.shapes;
  j["frames"] = t.frames;
  j["energy"] = t.energy;
  return j.dump() + "\n";
}

Trajectory trajectory_from_json(const std::string& text) {
  const json j = json::parse(text);
  Trajectory t;
  t.colors = j.at("colors").get<std::vector<std::array<double, 3>>>();
  t.shapes = j.at("shapes").get<std::vector<int>>();
  t.frames = j.at("frames").get<std::vector<std::vector<std::array<double, 2>>>>();
  if (j.contains("energy")) t.energy = j.at("energy").get<std::vector<double>>();
  if (t.shapes.size() != t.colors.size()) throw std::invalid_argument("trajectory: shapes and colors differ in length");
  for (const auto& f : t.frames)
    if (f.size() != t.colors.size()) throw std::invalid_argument("trajectory: frame entity count mismatch");
  return t;
}

Trajectory sampler_trajectory(const Event& event, const std::vector<Tensor>& iterates) {
  event.validate();
  Trajectory t;
  const State& last = event.states.back();
  for (const auto& e : last) {
    t.colors.push_back(e.color);
    t.shapes.push_back(e.shape);
  }
  const int n = event.entities();
  for (const Tensor& it : iterates) {
    std::vector<std::array<double, 2>> frame;
    for (const auto& e : last) frame.push_back(e.pos);
    // Free rows are the generated frames in order; show the last one.
    const Index offset = it.rows() - n;
    if (offset >= 0 && it.cols() == 2)
      for (int i = 0; i < n; ++i) frame[static_cast<std::size_t>(i)] = {it(offset + i, 0), it(offset + i, 1)};
    t.frames.push_back(std::move(frame));
  }
  return t;
}

int Table::column(const std::string& name) const {
  const auto it = std::find(header.begin(), header.end(), name);
  return it == header.end() ? -1 : static_cast<int>(it - header.begin());
}

Table parse_csv(const std::string& text) {
  Table t;
  std::stringstream ss(text);
  std::string line;
  bool first = true;
  while (std::getline(ss, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (first) {
      t.header = std::move(cells);
      first = false;
    } else {
      if (cells.size() != t.header.size())
        throw std::invalid_argument("csv: row " + std::to_string(t.rows.size() + 1) + " has " +
                                    std::to_string(cells.size()) + " cells, header has " +
                                    std::to_string(t.header.size()));
      t.rows.push_back(std::move(cells));
    }
  }
  return t;
}

std::string trajectory_svg(const Trajectory& t) {
  const Frame f{-kPositionBound, kPositionBound, -kPositionBound, kPositionBound};
  std::string s = open_svg("trajectory (" + std::to_string(t.frames.size()) + " frames)") + axes(f, "x", "y");
  if (t.frames.empty()) return s + "</svg>\n";
  for (std::size_t i = 0; i < t.colors.size(); ++i) {
    std::vector<std::pair<double, double>> pts;
    for (const auto& fr : t.frames) pts.emplace_back(f.px(fr[i][0]), f.py(fr[i][1]));
    s += polyline(pts, rgb(t.colors[i]));
  }
  for (std::size_t i = 0; i < t.colors.size(); ++i) {
    const auto& p = t.frames.back()[i];
    s += entity_mark(f.px(p[0]), f.py(p[1]), t.colors[i], t.shapes[i], 6);
  }
  return s + "</svg>\n";
}

std::string series_svg(const Table& t, const std::string& x, const std::string& y) {
  const int cx = t.column(x), cy = t.column(y);
  if (cx < 0 || cy < 0) throw std::invalid_argument("csv: missing column '" + (cx < 0 ? x : y) + "'");
  std::vector<std::pair<double, double>> data;
  for (const auto& r : t.rows) data.emplace_back(to_double(r[static_cast<std::size_t>(cx)]), to_double(r[static_cast<std::size_t>(cy)]));
  double x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  if (!data.empty()) {
    x0 = x1 = data.front().first;
    y0 = y1 = data.front().second;
    for (const auto& [a, b] : data) {
      x0 = std::min(x0, a), x1 = std::max(x1, a);
      y0 = std::min(y0, b), y1 = std::max(y1, b);
    }
  }
  const Frame f = padded(x0, x1, y0, y1);
  std::string s = open_svg(y + " vs " + x) + axes(f, x, y);
  std::vector<std::pair<double, double>> pts;
  for (const auto& [a, b] : data) pts.emplace_back(f.px(a), f.py(b));
  if (!pts.empty()) s += polyline(pts, kKindColors[0]);
  return s + "</svg>\n";
}

std::string histogram_svg(const Table& t) {
  const int ck = t.column("kind"), ce = t.column("energy");
  if (ck < 0 || ce < 0) throw std::invalid_argument("csv: expected kind and energy columns");
  const std::array<std::string, 3> kinds{"positive", "sampled", "random"};
  constexpr int kBins = 30;
  std::map<std::string, std::vector<double>> values;
  double lo = 0, hi = 1;
  bool any = false;
  for (const auto& r : t.rows) {
    const double e = to_double(r[static_cast<std::size_t>(ce)]);
    values[r[static_cast<std::size_t>(ck)]].push_back(e);
    lo = any ? std::min(lo, e) : e;
    hi = any ? std::max(hi, e) : e;
    any = true;
  }
  if (!(hi > lo)) hi = lo + 1;
  std::map<std::string, std::vector<int>> counts;
  int peak = 1;
  for (const auto& [k, vs] : values) {
    auto& c = counts[k];
    c.assign(kBins, 0);
    for (double v : vs) {
      const int b = std::min(kBins - 1, static_cast<int>((v - lo) / (hi - lo) * kBins));
      peak = std::max(peak, ++c[static_cast<std::size_t>(b)]);
    }
  }
  const Frame f{lo, hi, 0, static_cast<double>(peak)};
  std::string s = open_svg("energy histogram") + axes(f, "energy", "count");
  for (std::size_t k = 0; k < kinds.size(); ++k) {
    const auto it = counts.find(kinds[k]);
    if (it == counts.end()) continue;
    std::vector<std::pair<double, double>> pts;
    for (int b = 0; b < kBins; ++b) {
      const double xa = lo + (hi - lo) * b / kBins, xb = lo + (hi - lo) * (b + 1) / kBins;
      const double c = it->second[static_cast<std::size_t>(b)];
      pts.emplace_back(f.px(xa), f.py(c));
      pts.emplace_back(f.px(xb), f.py(c));
    }
    s += polyline(pts, kKindColors[k]);
    s += "<text x=\"" + num(kSize - kMargin - 4) + "\" y=\"" + num(kMargin + 14 + 12 * k) +
         "\" text-anchor=\"end\" font-size=\"10\" fill=\"" + kKindColors[k] + "\">" + kinds[k] + "</text>\n";
  }
  return s + "</svg>\n";
}

std::string projection_svg(const Table& t) {
  const int cl = t.column("label"), cr = t.column("role"), cx = t.column("x"), cy = t.column("y");
  if (cl < 0 || cr < 0 || cx < 0 || cy < 0) throw std::invalid_argument("csv: expected label,role,x,y columns");
  std::map<std::string, int> label_index;
  for (const auto& r : t.rows) label_index.emplace(r[static_cast<std::size_t>(cl)], 0);
  int next = 0;
  for (auto& [label, i] : label_index) i = next++;
  double x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    const double x = to_double(t.rows[i][static_cast<std::size_t>(cx)]), y = to_double(t.rows[i][static_cast<std::size_t>(cy)]);
    x0 = i ? std::min(x0, x) : x, x1 = i ? std::max(x1, x) : x;
    y0 = i ? std::min(y0, y) : y, y1 = i ? std::max(y1, y) : y;
  }
  const Frame f = padded(x0, x1, y0, y1);
  std::string s = open_svg("concept codes") + axes(f, "component 1", "component 2");
  for (const auto& r : t.rows) {
    const int li = label_index[r[static_cast<std::size_t>(cl)]];
    const double hue = next > 0 ? static_cast<double>(li) / next : 0;
    const std::array<double, 3> color{0.5 + 0.5 * std::cos(6.2832 * hue), 0.5 + 0.5 * std::cos(6.2832 * (hue - 1.0 / 3)),
                                      0.5 + 0.5 * std::cos(6.2832 * (hue - 2.0 / 3))};
    const int shape = r[static_cast<std::size_t>(cr)] == "w_a" ? 2 : 0;
    s += entity_mark(f.px(to_double(r[static_cast<std::size_t>(cx)])), f.py(to_double(r[static_cast<std::size_t>(cy)])),
                     color, shape, 4);
  }
  return s + "</svg>\n";
}

std::string heatmap_svg(const Heatmap& h) {
  const int n = h.resolution;
  if (static_cast<int>(h.values.size()) != n * n) throw std::invalid_argument("heatmap: value count mismatch");
  const Frame f{h.lo, h.hi, h.lo, h.hi};
  std::string s = open_svg("energy over entity " + std::to_string(h.swept) + " position") + axes(f, "x", "y");
  const auto [mn, mx] = std::minmax_element(h.values.begin(), h.values.end());
  const double span = *mx > *mn ? *mx - *mn : 1.0;
  const double cell = (h.hi - h.lo) / n;
  const double w = f.px(h.lo + cell) - f.px(h.lo);
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < n; ++c) {
      const double v = (h.values[static_cast<std::size_t>(r * n + c)] - *mn) / span;
      const double x = h.lo + c * cell, y = h.hi - r * cell;
      s += "<rect x=\"" + num(f.px(x)) + "\" y=\"" + num(f.py(y)) + "\" width=\"" + num(w + 0.3) + "\" height=\"" +
           num(w + 0.3) + "\" fill=\"" + rgb({v, v * 0.6, 1.0 - v}) + "\"/>\n";
    }
  for (std::size_t i = 0; i < h.scene.size(); ++i) {
    if (static_cast<int>(i) == h.swept) continue;
    const auto& e = h.scene[i];
    s += entity_mark(f.px(e.pos[0]), f.py(e.pos[1]), e.color, e.shape, 6);
  }
  s += axes(f, "", "");
  return s + "</svg>\n";
}

}  // namespace cem::cli
