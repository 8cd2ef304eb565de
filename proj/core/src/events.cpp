#include "cem/events.hpp"

#include "cem/parallel.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdio>
#include <fstream>
#include <functional>
#include <numbers>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

namespace cem {

namespace {

using Rng = std::mt19937_64;
using Vec2 = std::array<double, 2>;

constexpr int kMaxRejections = 1000;
constexpr double kMinSeparation = 0.15;
constexpr double kColorTolerance = 0.05;
constexpr double kPointTolerance = 0.1;
constexpr double kRegionTolerance = 0.05;
constexpr double kCircleRadius = 0.4;
constexpr double kRelationOffset = 0.2;
constexpr double kRelationLateral = 0.1;
constexpr double kShapeTolerance = 0.05;
constexpr double kCollinearTolerance = 0.02;
constexpr double kLineSpacing = 0.15;
constexpr double kJoinDistance = 0.1;
constexpr double kProximityMargin = 0.05;
constexpr double kMoveSpeed = 0.05;
// Distractors keep this clearance from the region/relation they must not satisfy.
constexpr double kClearance = 0.2;

constexpr std::array<const char*, kFamilyCount> kFamilyNames = {
    "color", "region", "placement", "shape", "proximity", "quantity", "temporal"};
constexpr std::array<const char*, kPaletteSize> kPaletteNames = {"red",  "green",   "blue",
                                                                 "yellow", "magenta", "cyan"};
constexpr std::array<std::array<double, 3>, kPaletteSize> kPalette = {
    {{1, 0, 0}, {0, 1, 0}, {0, 0, 1}, {1, 1, 0}, {1, 0, 1}, {0, 1, 1}}};

const std::vector<std::string>& variants(Family f) {
  static const std::array<std::vector<std::string>, kFamilyCount> table = {{
      {"red", "green", "blue", "yellow", "magenta", "cyan"},
      {"point", "line", "circle", "square"},
      {"north", "south", "east", "west", "between"},
      {"join", "line", "triangle", "square"},
      {"closest", "farthest"},
      {"1", "2", "3", "many"},
      {"after"},
  }};
  return table[static_cast<std::size_t>(f)];
}

double dist(const Vec2& a, const Vec2& b) { return std::hypot(a[0] - b[0], a[1] - b[1]); }

double uniform(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }
int uniform_int(Rng& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

std::vector<std::size_t> attended(std::span<const int> mask) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask[i]) out.push_back(i);
  return out;
}

bool color_near(const std::array<double, 3>& c, const std::array<double, 3>& target) {
  for (int k = 0; k < 3; ++k)
    if (std::abs(c[static_cast<std::size_t>(k)] - target[static_cast<std::size_t>(k)]) > kColorTolerance)
      return false;
  return true;
}

// ---------------------------------------------------------------------------------------
// Geometry predicates on a single state.

bool relation_holds(const std::string& dir, const Vec2& p, const Vec2& ref) {
  const double dx = p[0] - ref[0], dy = p[1] - ref[1];
  if (dir == "north") return dy >= kRelationOffset && std::abs(dx) <= kRelationLateral;
  if (dir == "south") return -dy >= kRelationOffset && std::abs(dx) <= kRelationLateral;
  if (dir == "east") return dx >= kRelationOffset && std::abs(dy) <= kRelationLateral;
  if (dir == "west") return -dx >= kRelationOffset && std::abs(dy) <= kRelationLateral;
  return false;
}

double region_distance(const ConceptSpec& s, const Vec2& p) {
  const auto& v = s.values;
  if (s.variant == "point") return dist(p, {v[0], v[1]});
  if (s.variant == "line") return std::abs(p[v[0] == 0.0 ? 1 : 0] - v[1]);
  if (s.variant == "circle") return std::abs(dist(p, {v[0], v[1]}) - kCircleRadius);
  double best = 1e300;  // square: nearest corner
  const double h = v[2] / 2;
  for (double sx : {-1.0, 1.0})
    for (double sy : {-1.0, 1.0}) best = std::min(best, dist(p, {v[0] + sx * h, v[1] + sy * h}));
  return best;
}

double region_tolerance(const ConceptSpec& s) {
  return s.variant == "point" ? kPointTolerance : kRegionTolerance;
}

int square_corner(const ConceptSpec& s, const Vec2& p) {
  const double h = s.values[2] / 2;
  int best = -1;
  double bd = 1e300;
  for (int c = 0; c < 4; ++c) {
    const Vec2 q{s.values[0] + (c & 1 ? h : -h), s.values[1] + (c & 2 ? h : -h)};
    if (dist(p, q) < bd) bd = dist(p, q), best = c;
  }
  return best;
}

// Max vertex residual of the best equilateral triangle through three points, and its side.
std::pair<double, double> equilateral_fit(std::vector<Vec2> pts) {
  using C = std::complex<double>;
  C centroid{0, 0};
  for (const auto& p : pts) centroid += C(p[0], p[1]);
  centroid /= 3.0;
  const C omega = std::polar(1.0, 2 * std::numbers::pi / 3);
  std::vector<int> order{0, 1, 2};
  double best = 1e300, side = 0;
  do {
    C alpha{0, 0};
    for (int k = 0; k < 3; ++k) {
      const auto& p = pts[static_cast<std::size_t>(order[static_cast<std::size_t>(k)])];
      alpha += (C(p[0], p[1]) - centroid) * std::pow(omega, -k);
    }
    alpha /= 3.0;
    double r = 0;
    for (int k = 0; k < 3; ++k) {
      const auto& p = pts[static_cast<std::size_t>(order[static_cast<std::size_t>(k)])];
      r = std::max(r, std::abs(C(p[0], p[1]) - centroid - alpha * std::pow(omega, k)));
    }
    if (r < best) best = r, side = std::abs(alpha) * std::sqrt(3.0);
  } while (std::next_permutation(order.begin(), order.end()));
  return {best, side};
}

// Max vertex residual of the best axis-aligned square through four points, and its side.
std::pair<double, double> square_fit(const std::vector<Vec2>& pts) {
  Vec2 c{0, 0};
  for (const auto& p : pts) c[0] += p[0] / 4, c[1] += p[1] / 4;
  double h = 0;
  std::set<int> quadrants;
  for (const auto& p : pts) {
    h += (std::abs(p[0] - c[0]) + std::abs(p[1] - c[1])) / 8;
    quadrants.insert((p[0] > c[0] ? 1 : 0) + (p[1] > c[1] ? 2 : 0));
  }
  if (quadrants.size() != 4) return {1e300, 0};
  double r = 0;
  for (const auto& p : pts) {
    const Vec2 q{c[0] + (p[0] > c[0] ? h : -h), c[1] + (p[1] > c[1] ? h : -h)};
    r = std::max(r, dist(p, q));
  }
  return {r, 2 * h};
}

bool collinear_spaced(const std::vector<Vec2>& pts) {
  const auto n = static_cast<double>(pts.size());
  Vec2 c{0, 0};
  for (const auto& p : pts) c[0] += p[0] / n, c[1] += p[1] / n;
  double sxx = 0, sxy = 0, syy = 0;
  for (const auto& p : pts) {
    const double dx = p[0] - c[0], dy = p[1] - c[1];
    sxx += dx * dx, sxy += dx * dy, syy += dy * dy;
  }
  // Principal direction of the scatter matrix.
  const double theta = 0.5 * std::atan2(2 * sxy, sxx - syy);
  const Vec2 u{std::cos(theta), std::sin(theta)};
  std::vector<double> along;
  for (const auto& p : pts) {
    const double dx = p[0] - c[0], dy = p[1] - c[1];
    if (std::abs(-u[1] * dx + u[0] * dy) >= kCollinearTolerance) return false;
    along.push_back(u[0] * dx + u[1] * dy);
  }
  std::sort(along.begin(), along.end());
  for (std::size_t i = 1; i < along.size(); ++i)
    if (along[i] - along[i - 1] < kLineSpacing) return false;
  return true;
}

std::vector<std::size_t> with_shape(const State& s, int shape) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < s.size(); ++i)
    if (s[i].shape == shape) out.push_back(i);
  return out;
}

constexpr int kCross = static_cast<int>(ShapeTag::Cross);

// Proximity: index of the strict extreme non-reference entity, or -1 when the margin fails.
int proximity_winner(const State& s, std::size_t ref, bool closest) {
  std::vector<std::pair<double, std::size_t>> d;
  for (std::size_t i = 0; i < s.size(); ++i)
    if (s[i].shape != kCross) d.push_back({dist(s[i].pos, s[ref].pos), i});
  if (d.size() < 2) return -1;
  std::sort(d.begin(), d.end());
  if (closest) return d[1].first - d[0].first >= kProximityMargin ? static_cast<int>(d[0].second) : -1;
  const auto n = d.size();
  return d[n - 1].first - d[n - 2].first >= kProximityMargin ? static_cast<int>(d[n - 1].second) : -1;
}

bool state_satisfies(const ConceptSpec& spec, const State& s, std::span<const int> mask) {
  const auto att = attended(mask);
  auto is_attended = [&](std::size_t i) { return mask[i] != 0; };
  switch (spec.family) {
    case Family::Color: {
      const auto target = kPalette[static_cast<std::size_t>(*parse_palette(spec.variant))];
      for (std::size_t i = 0; i < s.size(); ++i)
        if (color_near(s[i].color, target) != is_attended(i)) return false;
      if (spec.context == Context::Generation)
        for (std::size_t i = 0; i < s.size(); ++i)
          if ((s[i].shape == spec.argument) != is_attended(i)) return false;
      return true;
    }
    case Family::Region: {
      const double tol = region_tolerance(spec);
      for (std::size_t i = 0; i < s.size(); ++i)
        if ((region_distance(spec, s[i].pos) <= tol) != is_attended(i)) return false;
      if (spec.variant == "square") {
        std::set<int> corners;
        for (auto i : att) corners.insert(square_corner(spec, s[i].pos));
        if (corners.size() != att.size()) return false;
      }
      return true;
    }
    case Family::Placement: {
      const auto refs = with_shape(s, kCross);
      if (att.size() != 1 || s[att[0]].shape == kCross) return false;
      auto holds = [&](std::size_t i) {
        if (spec.variant == "between") {
          const Vec2 mid{(s[refs[0]].pos[0] + s[refs[1]].pos[0]) / 2, (s[refs[0]].pos[1] + s[refs[1]].pos[1]) / 2};
          return dist(s[i].pos, mid) <= kRegionTolerance;
        }
        return relation_holds(spec.variant, s[i].pos, s[refs[0]].pos);
      };
      if (refs.size() != (spec.variant == "between" ? 2u : 1u)) return false;
      for (std::size_t i = 0; i < s.size(); ++i)
        if (s[i].shape != kCross && holds(i) != is_attended(i)) return false;
      return true;
    }
    case Family::Shape: {
      std::vector<Vec2> pts;
      for (auto i : att) pts.push_back(s[i].pos);
      if (spec.variant == "join") {
        if (pts.size() < 2) return false;
        for (std::size_t i = 0; i < pts.size(); ++i)
          for (std::size_t j = i + 1; j < pts.size(); ++j)
            if (dist(pts[i], pts[j]) >= kJoinDistance) return false;
        return true;
      }
      if (spec.variant == "line") return pts.size() >= 3 && collinear_spaced(pts);
      if (spec.variant == "triangle") {
        if (pts.size() != 3) return false;
        const auto [r, side] = equilateral_fit(pts);
        return r <= kShapeTolerance && side >= 2 * kJoinDistance;
      }
      if (pts.size() != 4) return false;
      const auto [r, side] = square_fit(pts);
      return r <= kShapeTolerance && side >= 2 * kJoinDistance;
    }
    case Family::Proximity: {
      const auto refs = with_shape(s, kCross);
      if (refs.size() != 1 || att.size() != 1) return false;
      return proximity_winner(s, refs[0], spec.variant == "closest") == static_cast<int>(att[0]);
    }
    case Family::Quantity: {
      const auto k = att.size();
      if (spec.variant == "many") return k >= 4 && k <= s.size() - 1;
      return k == static_cast<std::size_t>(std::stoi(spec.variant));
    }
    case Family::Temporal:
      return false;  // needs the trajectory
  }
  return false;
}

bool temporal_satisfies(const Event& e, std::span<const int> mask) {
  if (e.steps() != 3) return false;
  const auto att = attended(mask);
  if (att.size() != 1) return false;
  auto speed = [&](std::size_t i, int t) {
    return dist(e.states[static_cast<std::size_t>(t)][i].pos, e.states[static_cast<std::size_t>(t - 1)][i].pos);
  };
  const auto m = att[0];
  if (speed(m, 1) > kMoveSpeed || speed(m, 2) <= kMoveSpeed) return false;
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (i != m && speed(i, 1) > kMoveSpeed) return true;
  return false;
}

// ---------------------------------------------------------------------------------------
// Generation.

Vec2 random_point(Rng& rng, double extent) { return {uniform(rng, -extent, extent), uniform(rng, -extent, extent)}; }

int other_palette(Rng& rng, std::initializer_list<int> excluded) {
  for (;;) {
    const int c = uniform_int(rng, 0, kPaletteSize - 1);
    if (std::find(excluded.begin(), excluded.end(), c) == excluded.end()) return c;
  }
}

int plain_shape(Rng& rng) { return uniform_int(rng, 0, 1) ? static_cast<int>(ShapeTag::Square) : static_cast<int>(ShapeTag::Circle); }

EntityState make_entity(const Vec2& p, int palette, int shape) {
  return {p, kPalette[static_cast<std::size_t>(palette)], shape};
}

// Position at least kMinSeparation from `taken`, satisfying `ok`; nullopt if none found.
std::optional<Vec2> free_point(Rng& rng, const std::vector<Vec2>& taken,
                               const std::function<bool(const Vec2&)>& ok, double extent = 1.0) {
  for (int tries = 0; tries < 200; ++tries) {
    const Vec2 p = random_point(rng, extent);
    if (!ok(p)) continue;
    bool clear = true;
    for (const auto& q : taken) clear = clear && dist(p, q) >= kMinSeparation;
    if (clear) return p;
  }
  return std::nullopt;
}

struct Draft {
  std::vector<State> states;
  std::vector<int> mask;
};

bool in_bounds(const Vec2& p, double bound = kPositionBound) { return std::abs(p[0]) <= bound && std::abs(p[1]) <= bound; }

// Fills `s` with `count` extra entities (colors avoiding `avoid`) placed where `ok` holds.
bool add_distractors(Rng& rng, State& s, int count, std::initializer_list<int> avoid,
                     const std::function<bool(const Vec2&)>& ok, bool allow_cross = false) {
  std::vector<Vec2> taken;
  for (const auto& e : s) taken.push_back(e.pos);
  for (int k = 0; k < count; ++k) {
    const auto p = free_point(rng, taken, ok);
    if (!p) return false;
    taken.push_back(*p);
    const int shape = allow_cross && uniform_int(rng, 0, 3) == 0 ? kCross : plain_shape(rng);
    s.push_back(make_entity(*p, other_palette(rng, avoid), shape));
  }
  return true;
}

void shuffle_entities(Rng& rng, Draft& d) {
  std::vector<std::size_t> perm(d.mask.size());
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  Draft out;
  for (const auto& s : d.states) {
    State t;
    for (auto i : perm) t.push_back(s[i]);
    out.states.push_back(std::move(t));
  }
  for (auto i : perm) out.mask.push_back(d.mask[i]);
  d = std::move(out);
}

std::optional<Draft> draft_color(const ConceptSpec& spec, Rng& rng, int n) {
  const int target = *parse_palette(spec.variant);
  State s;
  std::vector<int> mask;
  std::vector<Vec2> taken;
  const int k = uniform_int(rng, 1, n - 1);
  for (int i = 0; i < n; ++i) {
    const auto p = free_point(rng, taken, [](const Vec2&) { return true; });
    if (!p) return std::nullopt;
    taken.push_back(*p);
    const bool att = i < k;
    if (spec.context == Context::Generation) {
      const int shape = att ? spec.argument : (spec.argument == 0 ? 2 : 0);
      s.push_back(make_entity(*p, other_palette(rng, {target}), shape));
    } else {
      s.push_back(make_entity(*p, att ? target : other_palette(rng, {target}), plain_shape(rng)));
    }
    mask.push_back(att ? 1 : 0);
  }
  Draft d{{s, s}, mask};
  if (spec.context == Context::Generation)
    for (int i = 0; i < n; ++i)
      if (mask[static_cast<std::size_t>(i)]) d.states[1][static_cast<std::size_t>(i)].color = kPalette[static_cast<std::size_t>(target)];
  return d;
}

std::optional<Draft> draft_region(const ConceptSpec& spec, Rng& rng, int n) {
  const int max_k = spec.variant == "point" ? 1 : spec.variant == "line" ? 2 : spec.variant == "circle" ? 3 : 4;
  const int k = uniform_int(rng, 1, std::min(max_k, n - 1));
  const auto& v = spec.values;
  auto target = [&](int idx, const Vec2& from) -> Vec2 {
    if (spec.variant == "point") return {v[0], v[1]};
    if (spec.variant == "line") {
      Vec2 p = v[0] == 0.0 ? Vec2{from[0], v[1]} : Vec2{v[1], from[1]};
      return p;
    }
    if (spec.variant == "circle") {
      const double ang = std::atan2(from[1] - v[1], from[0] - v[0]);
      return {v[0] + kCircleRadius * std::cos(ang), v[1] + kCircleRadius * std::sin(ang)};
    }
    const double h = v[2] / 2;
    return {v[0] + (idx & 1 ? h : -h), v[1] + (idx & 2 ? h : -h)};
  };
  std::vector<int> corners{0, 1, 2, 3};
  std::shuffle(corners.begin(), corners.end(), rng);
  const double clear = spec.variant == "point" ? 0.3 : kClearance + region_tolerance(spec);
  auto outside = [&](const Vec2& p) { return region_distance(spec, p) > clear; };
  State s0;
  std::vector<int> mask;
  std::vector<Vec2> taken;
  for (int i = 0; i < k; ++i) {
    std::optional<Vec2> p;
    if (spec.context == Context::Generation) {
      p = free_point(rng, taken, outside);
    } else {
      p = target(corners[static_cast<std::size_t>(i)], random_point(rng, 1.0));
      for (const auto& q : taken)
        if (dist(*p, q) < kMinSeparation) return std::nullopt;
    }
    if (!p) return std::nullopt;
    taken.push_back(*p);
    const int color = spec.context == Context::Generation ? spec.argument : other_palette(rng, {});
    s0.push_back(make_entity(*p, color, plain_shape(rng)));
    mask.push_back(1);
  }
  if (!add_distractors(rng, s0, n - k, {spec.argument}, outside)) return std::nullopt;
  mask.resize(static_cast<std::size_t>(n), 0);
  Draft d{{s0, s0}, mask};
  if (spec.context == Context::Generation)
    for (int i = 0; i < k; ++i) {
      auto& e = d.states[1][static_cast<std::size_t>(i)];
      e.pos = target(corners[static_cast<std::size_t>(i)], e.pos);
      if (!in_bounds(e.pos)) return std::nullopt;
    }
  return d;
}

std::optional<Draft> draft_placement(const ConceptSpec& spec, Rng& rng, int n) {
  const bool between = spec.variant == "between";
  const int refs = between ? 2 : 1;
  if (n < refs + 2) return std::nullopt;
  State s0;
  std::vector<Vec2> taken;
  for (int r = 0; r < refs; ++r) {
    const auto p = free_point(rng, taken, [](const Vec2&) { return true; }, 0.7);
    if (!p) return std::nullopt;
    taken.push_back(*p);
    s0.push_back(make_entity(*p, other_palette(rng, {spec.argument}), kCross));
  }
  if (between && dist(s0[0].pos, s0[1].pos) < 0.5) return std::nullopt;
  Vec2 goal;
  if (between) {
    goal = {(s0[0].pos[0] + s0[1].pos[0]) / 2, (s0[0].pos[1] + s0[1].pos[1]) / 2};
  } else {
    const double along = uniform(rng, 0.25, 0.45), lateral = uniform(rng, -0.05, 0.05);
    const Vec2& r = s0[0].pos;
    if (spec.variant == "north") goal = {r[0] + lateral, r[1] + along};
    if (spec.variant == "south") goal = {r[0] + lateral, r[1] - along};
    if (spec.variant == "east") goal = {r[0] + along, r[1] + lateral};
    if (spec.variant == "west") goal = {r[0] - along, r[1] + lateral};
  }
  auto holds = [&](const Vec2& p) {
    if (between) return dist(p, goal) <= kRegionTolerance + kClearance;
    return relation_holds(spec.variant, p, s0[0].pos) ||
           dist(p, goal) <= kClearance;  // keep the goal area clear as well
  };
  const bool gen = spec.context == Context::Generation;
  std::optional<Vec2> start = gen ? free_point(rng, taken, [&](const Vec2& p) { return !holds(p); }) : goal;
  if (!start) return std::nullopt;
  for (const auto& q : taken)
    if (dist(*start, q) < kMinSeparation) return std::nullopt;
  s0.push_back(make_entity(*start, gen ? spec.argument : other_palette(rng, {}), plain_shape(rng)));
  if (!add_distractors(rng, s0, n - refs - 1, {spec.argument}, [&](const Vec2& p) { return !holds(p); }))
    return std::nullopt;
  std::vector<int> mask(static_cast<std::size_t>(n), 0);
  mask[static_cast<std::size_t>(refs)] = 1;
  Draft d{{s0, s0}, mask};
  if (gen) d.states[1][static_cast<std::size_t>(refs)].pos = goal;
  return d;
}

std::vector<Vec2> shape_points(const std::string& variant, Rng& rng, int count) {
  const Vec2 c = random_point(rng, 0.6);
  std::vector<Vec2> pts;
  if (variant == "join") {
    for (int i = 0; i < count; ++i) {
      const double a = uniform(rng, 0, 2 * std::numbers::pi), r = uniform(rng, 0, 0.03);
      pts.push_back({c[0] + r * std::cos(a), c[1] + r * std::sin(a)});
    }
  } else if (variant == "line") {
    const double th = uniform(rng, 0, std::numbers::pi), gap = uniform(rng, 0.2, 0.3);
    for (int i = 0; i < count; ++i) {
      const double t = (i - (count - 1) / 2.0) * gap;
      pts.push_back({c[0] + t * std::cos(th), c[1] + t * std::sin(th)});
    }
  } else if (variant == "triangle") {
    const double th = uniform(rng, 0, 2 * std::numbers::pi), r = uniform(rng, 0.2, 0.35);
    for (int i = 0; i < 3; ++i)
      pts.push_back({c[0] + r * std::cos(th + 2 * std::numbers::pi * i / 3), c[1] + r * std::sin(th + 2 * std::numbers::pi * i / 3)});
  } else {
    const double h = uniform(rng, 0.15, 0.3);
    for (int i = 0; i < 4; ++i) pts.push_back({c[0] + (i & 1 ? h : -h), c[1] + (i & 2 ? h : -h)});
  }
  std::shuffle(pts.begin(), pts.end(), rng);
  return pts;
}

std::optional<Draft> draft_shape(const ConceptSpec& spec, Rng& rng, int n) {
  const int count = spec.variant == "join" ? uniform_int(rng, 2, 3)
                    : spec.variant == "line" ? uniform_int(rng, 3, 4)
                    : spec.variant == "triangle" ? 3
                                                 : 4;
  if (n < count + 1) return std::nullopt;
  const auto pts = shape_points(spec.variant, rng, count);
  const bool gen = spec.context == Context::Generation;
  State s0;
  std::vector<Vec2> taken;
  for (int i = 0; i < count; ++i) {
    std::optional<Vec2> p = gen ? free_point(rng, taken, [](const Vec2&) { return true; }) : pts[static_cast<std::size_t>(i)];
    if (!p) return std::nullopt;
    taken.push_back(*p);
    s0.push_back(make_entity(*p, gen ? spec.argument : other_palette(rng, {}), plain_shape(rng)));
  }
  auto away = [&](const Vec2& p) {
    for (const auto& q : pts)
      if (dist(p, q) < kClearance) return false;
    return true;
  };
  if (!add_distractors(rng, s0, n - count, {spec.argument}, away)) return std::nullopt;
  std::vector<int> mask(static_cast<std::size_t>(n), 0);
  std::fill(mask.begin(), mask.begin() + count, 1);
  Draft d{{s0, s0}, mask};
  if (gen)
    for (int i = 0; i < count; ++i) d.states[1][static_cast<std::size_t>(i)].pos = pts[static_cast<std::size_t>(i)];
  return d;
}

std::optional<Draft> draft_proximity(const ConceptSpec& spec, Rng& rng, int n) {
  const bool closest = spec.variant == "closest";
  State s0;
  const Vec2 ref = random_point(rng, 0.6);
  s0.push_back(make_entity(ref, other_palette(rng, {spec.argument}), kCross));
  const bool gen = spec.context == Context::Generation;
  // Mover first, then the others; identification uses colors freely.
  if (!add_distractors(rng, s0, n - 1, {spec.argument}, [](const Vec2&) { return true; })) return std::nullopt;
  for (std::size_t i = 1; i < s0.size(); ++i) s0[i].shape = plain_shape(rng);
  std::vector<int> mask(static_cast<std::size_t>(n), 0);
  Draft d{{s0, s0}, mask};
  if (!gen) {
    const int w = proximity_winner(s0, 0, closest);
    if (w < 0) return std::nullopt;
    d.mask[static_cast<std::size_t>(w)] = 1;
    return d;
  }
  const std::size_t mover = 1;
  d.states[0][mover].color = kPalette[static_cast<std::size_t>(spec.argument)];
  d.states[1][mover].color = d.states[0][mover].color;
  d.mask[mover] = 1;
  if (proximity_winner(d.states[0], 0, closest) == static_cast<int>(mover)) return std::nullopt;
  double dmin = 1e300, dmax = 0;
  for (std::size_t i = 2; i < s0.size(); ++i) {
    dmin = std::min(dmin, dist(s0[i].pos, ref));
    dmax = std::max(dmax, dist(s0[i].pos, ref));
  }
  const double r = closest ? uniform(rng, kMinSeparation, dmin - 2 * kProximityMargin)
                           : uniform(rng, dmax + 2 * kProximityMargin, dmax + 0.6);
  if (closest && dmin - 2 * kProximityMargin <= kMinSeparation) return std::nullopt;
  const double a = uniform(rng, 0, 2 * std::numbers::pi);
  const Vec2 goal{ref[0] + r * std::cos(a), ref[1] + r * std::sin(a)};
  if (!in_bounds(goal, 1.4)) return std::nullopt;
  d.states[1][mover].pos = goal;
  return d;
}

std::optional<Draft> draft_quantity(const ConceptSpec& spec, Rng& rng, int n) {
  int k;
  if (spec.variant == "many") {
    if (n < 5) return std::nullopt;
    k = uniform_int(rng, 4, n - 1);
  } else {
    k = std::stoi(spec.variant);
    if (n < k + 1) return std::nullopt;
  }
  State s0;
  if (!add_distractors(rng, s0, n, {}, [](const Vec2&) { return true; })) return std::nullopt;
  std::vector<int> mask(static_cast<std::size_t>(n), 0);
  std::fill(mask.begin(), mask.begin() + k, 1);
  return Draft{{s0, s0}, mask};
}

std::optional<Draft> draft_temporal(const ConceptSpec& spec, Rng& rng, int n) {
  State s0;
  if (!add_distractors(rng, s0, n, {spec.argument}, [](const Vec2&) { return true; })) return std::nullopt;
  const std::size_t mover = 0, trigger = 1;
  if (spec.context == Context::Generation) s0[mover].color = kPalette[static_cast<std::size_t>(spec.argument)];
  auto step = [&](const Vec2& p) {
    const double a = uniform(rng, 0, 2 * std::numbers::pi), r = uniform(rng, 0.15, 0.3);
    return Vec2{p[0] + r * std::cos(a), p[1] + r * std::sin(a)};
  };
  State s1 = s0, s2 = s0;
  s1[trigger].pos = step(s0[trigger].pos);
  s2[trigger].pos = step(s1[trigger].pos);
  s2[mover].pos = step(s0[mover].pos);
  for (const auto* s : {&s1, &s2})
    for (const auto& e : *s)
      if (!in_bounds(e.pos)) return std::nullopt;
  std::vector<int> mask(static_cast<std::size_t>(n), 0);
  mask[mover] = 1;
  return Draft{{s0, s1, s2}, mask};
}

std::optional<Draft> draft(const ConceptSpec& spec, Rng& rng, int n) {
  switch (spec.family) {
    case Family::Color: return draft_color(spec, rng, n);
    case Family::Region: return draft_region(spec, rng, n);
    case Family::Placement: return draft_placement(spec, rng, n);
    case Family::Shape: return draft_shape(spec, rng, n);
    case Family::Proximity: return draft_proximity(spec, rng, n);
    case Family::Quantity: return draft_quantity(spec, rng, n);
    case Family::Temporal: return draft_temporal(spec, rng, n);
  }
  return std::nullopt;
}

int min_entities(const ConceptSpec& spec) {
  switch (spec.family) {
    case Family::Placement: return spec.variant == "between" ? 4 : 3;
    case Family::Shape: return spec.variant == "join" ? 3 : spec.variant == "square" ? 5 : 4;
    case Family::Quantity: return spec.variant == "many" ? 5 : std::stoi(spec.variant) + 1;
    default: return kMinEntities;
  }
}

Event finalize(Draft d) {
  Event e;
  for (auto& s : d.states) {
    for (auto& ent : s) {
      for (double& p : ent.pos) p = quantize(p);
      for (double& c : ent.color) c = quantize(c);
    }
    e.states.push_back(std::move(s));
  }
  e.mask = std::move(d.mask);
  return e;
}

}  // namespace

const char* family_name(Family f) { return kFamilyNames[static_cast<std::size_t>(f)]; }

std::optional<Family> parse_family(const std::string& s) {
  for (int i = 0; i < kFamilyCount; ++i)
    if (s == kFamilyNames[static_cast<std::size_t>(i)]) return static_cast<Family>(i);
  return std::nullopt;
}

const char* context_name(Context c) { return c == Context::Generation ? "generation" : "identification"; }

std::optional<Context> parse_context(const std::string& s) {
  if (s == "generation") return Context::Generation;
  if (s == "identification") return Context::Identification;
  return std::nullopt;
}

const char* palette_name(int i) { return kPaletteNames.at(static_cast<std::size_t>(i)); }
std::array<double, 3> palette_color(int i) { return kPalette.at(static_cast<std::size_t>(i)); }

std::optional<int> parse_palette(const std::string& s) {
  for (int i = 0; i < kPaletteSize; ++i)
    if (s == kPaletteNames[static_cast<std::size_t>(i)]) return i;
  return std::nullopt;
}

std::string ConceptSpec::name() const { return std::string(family_name(family)) + "/" + variant; }

void ConceptSpec::validate() const {
  const auto& allowed = variants(family);
  if (std::find(allowed.begin(), allowed.end(), variant) == allowed.end())
    throw std::invalid_argument("unknown variant '" + variant + "' for family " + family_name(family));
  if (family == Family::Color) {
    if (argument != static_cast<int>(ShapeTag::Circle) && argument != static_cast<int>(ShapeTag::Square))
      throw std::invalid_argument("color concepts select by circle or square shape");
  } else if (argument < 0 || argument >= kPaletteSize) {
    throw std::invalid_argument("argument color out of palette");
  }
  std::size_t expected = 0;
  if (family == Family::Region)
    expected = variant == "square" ? 3 : 2;
  if (values.size() != expected)
    throw std::invalid_argument(name() + " expects " + std::to_string(expected) + " values");
  if (family == Family::Region && variant == "line" && values[0] != 0.0 && values[0] != 1.0)
    throw std::invalid_argument("line axis must be 0 (horizontal) or 1 (vertical)");
  if (family == Family::Region && variant == "square" && (values[2] < 0.4 || values[2] > 0.8))
    throw std::invalid_argument("square side must lie in [0.4, 0.8]");
}

bool changes_color(const ConceptSpec& spec) { return spec.family == Family::Color; }

double quantize(double v) {
  if (v == 0.0 || !std::isfinite(v)) return v;
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return std::strtod(buf, nullptr);
}

ConceptSpec sample_concept(Family family, std::uint64_t seed, const std::string& variant,
                           std::optional<Context> context) {
  Rng rng(diff::mix_seed(seed, 0xC0C));
  ConceptSpec s;
  s.family = family;
  const auto& allowed = variants(family);
  s.variant = variant.empty() ? allowed[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(allowed.size()) - 1))] : variant;
  s.context = context.value_or(uniform_int(rng, 0, 1) ? Context::Identification : Context::Generation);
  s.argument = family == Family::Color ? (uniform_int(rng, 0, 1) ? 2 : 0) : uniform_int(rng, 0, kPaletteSize - 1);
  if (family == Family::Region) {
    if (s.variant == "point") s.values = {uniform(rng, -0.8, 0.8), uniform(rng, -0.8, 0.8)};
    if (s.variant == "line") s.values = {static_cast<double>(uniform_int(rng, 0, 1)), uniform(rng, -0.6, 0.6)};
    if (s.variant == "circle") s.values = {uniform(rng, -0.4, 0.4), uniform(rng, -0.4, 0.4)};
    if (s.variant == "square") s.values = {uniform(rng, -0.4, 0.4), uniform(rng, -0.4, 0.4), uniform(rng, 0.4, 0.8)};
  }
  for (double& v : s.values) v = quantize(v);
  s.validate();
  return s;
}

Episode generate_episode(const ConceptSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng(diff::mix_seed(seed, 0xE915));
  Episode ep;
  ep.spec = spec;
  const int lo = std::max(kMinEntities, min_entities(spec));
  std::set<int> sizes;
  for (int k = 0; k < kDemoEvents + kTrainEvents; ++k) {
    int n = uniform_int(rng, lo, kMaxEntities);
    // Guarantee the episode mixes entity counts.
    if (k == kDemoEvents + kTrainEvents - 1 && sizes.size() == 1 && sizes.count(n)) n = n == lo ? n + 1 : lo;
    int rejections = 0;
    for (;;) {
      auto d = draft(spec, rng, n);
      if (d) {
        shuffle_entities(rng, *d);
        Event e = finalize(std::move(*d));
        if (verify_event(spec, e, e.mask)) {
          ep.events.push_back(std::move(e));
          sizes.insert(n);
          break;
        }
      }
      if (++rejections >= kMaxRejections)
        throw GeneratorError("generator for " + spec.name() + " rejected " + std::to_string(kMaxRejections) +
                             " candidate events in a row");
    }
  }
  return ep;
}

bool verify_event(const ConceptSpec& spec, const Event& event, std::span<const int> mask) {
  try {
    spec.validate();
    event.validate();
  } catch (const std::exception&) {
    return false;
  }
  const auto n = static_cast<std::size_t>(event.entities());
  if (mask.size() != n) return false;
  const auto k = attended(mask).size();
  if (k == 0 || k == n) return false;
  if (spec.family == Family::Temporal) return temporal_satisfies(event, mask);
  if (event.steps() != 2) return false;
  if (spec.context == Context::Identification && !(event.states[0] == event.states[1])) return false;
  return state_satisfies(spec, event.states[1], mask);
}

std::vector<ConceptFilter> parse_concepts(const std::string& list) {
  std::vector<ConceptFilter> out;
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    if (item == "all") {
      for (int i = 0; i < kFamilyCount; ++i) out.push_back({static_cast<Family>(i), ""});
      continue;
    }
    if (item == "absolute_position") {
      out.push_back({Family::Region, "point"});
      continue;
    }
    const auto colon = item.find(':');
    const auto fam = parse_family(item.substr(0, colon));
    if (!fam) throw std::invalid_argument("unknown concept family '" + item.substr(0, colon) + "'");
    ConceptFilter f{*fam, colon == std::string::npos ? "" : item.substr(colon + 1)};
    if (!f.variant.empty()) {
      const auto& allowed = variants(f.family);
      if (std::find(allowed.begin(), allowed.end(), f.variant) == allowed.end())
        throw std::invalid_argument("unknown variant '" + f.variant + "' for family " + family_name(f.family));
    }
    out.push_back(f);
  }
  if (out.empty()) throw std::invalid_argument("empty concept list");
  return out;
}

std::vector<Episode> generate_dataset(std::span<const ConceptFilter> filters, int count,
                                      std::uint64_t seed, std::optional<Context> context) {
  if (count < 0) throw std::invalid_argument("episode count must be >= 0");
  if (filters.empty()) throw std::invalid_argument("no concept families selected");
  std::vector<Episode> out(static_cast<std::size_t>(count));
  parallel_for(out.size(), [&](std::size_t i) {
    const auto& f = filters[i % filters.size()];
    const std::uint64_t s = diff::mix_seed(seed, i);
    out[i] = generate_episode(sample_concept(f.family, s, f.variant, context), s);
  });
  return out;
}

// ---------------------------------------------------------------------------------------
// Serialization.

namespace {

void put(std::string& out, double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  out += buf;
}

template <class Seq>
void put_array(std::string& out, const Seq& values) {
  out += '[';
  bool first = true;
  for (double v : values) {
    if (!first) out += ',';
    first = false;
    put(out, v);
  }
  out += ']';
}

using nlohmann::json;

struct Reader {
  std::size_t line;

  [[noreturn]] void fail(const std::string& field, const std::string& what) const {
    throw DatasetError("record " + std::to_string(line) + ", field '" + field + "': " + what, line, field);
  }
  const json& at(const json& j, const char* key, const std::string& path) const {
    if (!j.is_object()) fail(path, "expected an object");
    const auto it = j.find(key);
    if (it == j.end()) fail(path + "." + key, "missing");
    return *it;
  }
  double number(const json& j, const std::string& path) const {
    if (!j.is_number()) fail(path, "expected a number");
    return j.get<double>();
  }
  int integer(const json& j, const std::string& path) const {
    if (!j.is_number_integer()) fail(path, "expected an integer");
    return j.get<int>();
  }
  std::string string(const json& j, const std::string& path) const {
    if (!j.is_string()) fail(path, "expected a string");
    return j.get<std::string>();
  }
  const json& array(const json& j, const std::string& path, std::size_t size = 0) const {
    if (!j.is_array()) fail(path, "expected an array");
    if (size && j.size() != size) fail(path, "expected " + std::to_string(size) + " entries");
    return j;
  }
};

}  // namespace

std::string episode_to_json(const Episode& e) {
  std::string out = "{\"concept\":{\"family\":\"";
  out += family_name(e.spec.family);
  out += "\",\"variant\":\"" + e.spec.variant + "\",\"context\":\"" + context_name(e.spec.context) +
         "\",\"argument\":" + std::to_string(e.spec.argument) + ",\"values\":";
  put_array(out, e.spec.values);
  out += "},\"events\":[";
  for (std::size_t k = 0; k < e.events.size(); ++k) {
    if (k) out += ',';
    out += "{\"states\":[";
    const auto& ev = e.events[k];
    for (std::size_t t = 0; t < ev.states.size(); ++t) {
      if (t) out += ',';
      out += '[';
      for (std::size_t i = 0; i < ev.states[t].size(); ++i) {
        if (i) out += ',';
        const auto& ent = ev.states[t][i];
        out += "{\"pos\":";
        put_array(out, ent.pos);
        out += ",\"color\":";
        put_array(out, ent.color);
        out += ",\"shape\":" + std::to_string(ent.shape) + "}";
      }
      out += ']';
    }
    out += "],\"mask\":[";
    for (std::size_t i = 0; i < ev.mask.size(); ++i) {
      if (i) out += ',';
      out += std::to_string(ev.mask[i]);
    }
    out += "]}";
  }
  out += "]}";
  return out;
}

Episode episode_from_json(const std::string& line, std::size_t line_number) {
  const Reader r{line_number};
  json j;
  try {
    j = json::parse(line);
  } catch (const json::parse_error& e) {
    r.fail("<record>", std::string("malformed JSON: ") + e.what());
  }
  Episode ep;
  const auto& c = r.at(j, "concept", "");
  const auto fam = parse_family(r.string(r.at(c, "family", "concept"), "concept.family"));
  if (!fam) r.fail("concept.family", "unknown family");
  ep.spec.family = *fam;
  ep.spec.variant = r.string(r.at(c, "variant", "concept"), "concept.variant");
  const auto ctx = parse_context(r.string(r.at(c, "context", "concept"), "concept.context"));
  if (!ctx) r.fail("concept.context", "unknown context");
  ep.spec.context = *ctx;
  ep.spec.argument = r.integer(r.at(c, "argument", "concept"), "concept.argument");
  const auto& vals = r.array(r.at(c, "values", "concept"), "concept.values");
  for (std::size_t i = 0; i < vals.size(); ++i)
    ep.spec.values.push_back(r.number(vals[i], "concept.values[" + std::to_string(i) + "]"));
  try {
    ep.spec.validate();
  } catch (const std::invalid_argument& e) {
    r.fail("concept", e.what());
  }
  const auto& events = r.array(r.at(j, "events", ""), "events", kDemoEvents + kTrainEvents);
  for (std::size_t k = 0; k < events.size(); ++k) {
    const std::string ep_path = "events[" + std::to_string(k) + "]";
    Event ev;
    const auto& states = r.array(r.at(events[k], "states", ep_path), ep_path + ".states");
    for (std::size_t t = 0; t < states.size(); ++t) {
      const std::string st_path = ep_path + ".states[" + std::to_string(t) + "]";
      State s;
      const auto& ents = r.array(states[t], st_path);
      for (std::size_t i = 0; i < ents.size(); ++i) {
        const std::string en = st_path + "[" + std::to_string(i) + "]";
        EntityState ent;
        const auto& pos = r.array(r.at(ents[i], "pos", en), en + ".pos", 2);
        for (std::size_t q = 0; q < 2; ++q) ent.pos[q] = r.number(pos[q], en + ".pos");
        const auto& col = r.array(r.at(ents[i], "color", en), en + ".color", 3);
        for (std::size_t q = 0; q < 3; ++q) ent.color[q] = r.number(col[q], en + ".color");
        ent.shape = r.integer(r.at(ents[i], "shape", en), en + ".shape");
        s.push_back(ent);
      }
      ev.states.push_back(std::move(s));
    }
    const auto& mask = r.array(r.at(events[k], "mask", ep_path), ep_path + ".mask");
    for (std::size_t i = 0; i < mask.size(); ++i) ev.mask.push_back(r.integer(mask[i], ep_path + ".mask"));
    try {
      ev.validate();
    } catch (const EventError& e) {
      r.fail(ep_path, e.what());
    }
    ep.events.push_back(std::move(ev));
  }
  return ep;
}

void save_dataset(const std::filesystem::path& path, std::span<const Episode> episodes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DatasetError("cannot open " + path.string() + " for writing", 0, "");
  for (const auto& e : episodes) out << episode_to_json(e) << '\n';
  if (!out) throw DatasetError("write failed for " + path.string(), 0, "");
}

std::vector<Episode> load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DatasetError("cannot open dataset " + path.string(), 0, "");
  std::vector<Episode> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    out.push_back(episode_from_json(line, n));
  }
  return out;
}

}  // namespace cem
