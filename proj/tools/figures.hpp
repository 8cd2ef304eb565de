#pragma once

// Figure data exchanged between commands (trajectory JSON, CSV tables) and the SVG
// renderers that consume them.

#include "cem/evalharness.hpp"

#include <array>
#include <filesystem>
#include <string>
#include <vector>

namespace cem::cli {

// Entity positions over a sequence of frames: sampler iterates or a control rollout.
struct Trajectory {
  std::vector<std::array<double, 3>> colors;  // per entity
  std::vector<int> shapes;
  std::vector<std::vector<std::array<double, 2>>> frames;
  std::vector<double> energy;  // per frame when known, else empty
};

std::string trajectory_to_json(const Trajectory& t);
Trajectory trajectory_from_json(const std::string& text);

// Frames of a generation run: the event's generated frame with the free rows of each
// sampler iterate filled in.
Trajectory sampler_trajectory(const Event& event, const std::vector<Tensor>& iterates);

// Header plus rows of a numeric CSV.
struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
  int column(const std::string& name) const;  // -1 when absent
};
Table parse_csv(const std::string& text);

// Value grid of one entity's position sweep.
struct Heatmap {
  int resolution = 64;
  double lo = -kPositionBound, hi = kPositionBound;
  std::vector<double> values;  // row-major, y outer (top row = hi)
  State scene;                 // entities drawn on top
  int swept = 0;
};

std::string trajectory_svg(const Trajectory& t);
// Line plot of column `y` against column `x`.
std::string series_svg(const Table& t, const std::string& x, const std::string& y);
// Per-kind histograms of an energy CSV (kind,concept,context,energy).
std::string histogram_svg(const Table& t);
// Scatter of a projection CSV (label,role,x,y).
std::string projection_svg(const Table& t);
std::string heatmap_svg(const Heatmap& h);

}  // namespace cem::cli
