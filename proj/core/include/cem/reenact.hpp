#pragma once

// Reuse of a frozen energy as the terminal cost of receding-horizon control of
// point masses (double integrators) standing in for the scene's entities.

#include "cem/sampler.hpp"

#include <functional>
#include <vector>

namespace cem {

struct MPCConfig {
  int horizon = 8;
  double control_penalty = 0.01;  // lambda on sum |u|^2
  double u_max = 0.2;             // per-axis force bound
  double v_max = 0.3;             // per-axis velocity clip
  double dt = 1.0;
  int iterations = 20;            // gradient steps per replan
  double step_size = 0.05;
  int total_steps = 100;

  void validate() const;
};

// Controlled entities' positions and velocities; the rest of the scene is static.
struct PointMassState {
  std::vector<std::array<double, 2>> pos;
  std::vector<std::array<double, 2>> vel;
  bool operator==(const PointMassState&) const = default;
};

using Control = std::vector<std::array<double, 2>>;

// v' = clip(v + u dt, +-v_max), p' = clip(p + v' dt, +-kPositionBound); a mass that
// hits the workspace bound stops there.
// Throws std::invalid_argument if |u| exceeds u_max on any axis.
PointMassState step_dynamics(const PointMassState& s, const Control& u, const MPCConfig& cfg);

// Scalar cost of the controlled entities' positions (m x 2).
using TerminalCost = std::function<Expr(const Expr& positions)>;

// E(x0 -> x) of `scene` (its first state) with the controlled entities moved to the
// given positions; shape and color are copied from the scene.
TerminalCost energy_cost(const Event& scene, std::vector<int> controlled, std::span<const double> attention,
                         std::span<const double> w_x, const EnergyParams& params);

struct Rollout {
  std::vector<PointMassState> states;  // total_steps + 1
  std::vector<Control> controls;       // total_steps
  double initial_cost = 0;
  std::vector<double> costs;           // terminal cost of the state after each step
};

// Shooting MPC: per step, gradient descent on cost(p_H) + lambda sum |u|^2 over the
// horizon of the unclipped double integrator (projected onto the force box, Armijo
// backtracking from step_size),
// warm-started from the previous plan shifted by one; the first control is applied. Throws DivergenceError on a non-finite cost.
Rollout mpc_rollout(const PointMassState& init, const TerminalCost& cost, const MPCConfig& cfg);

// Scene state at rest with the listed entities controlled.
PointMassState rest_state(const State& s, std::span<const int> controlled);
// The scene's first state with controlled positions replaced.
State place(const State& s, std::span<const int> controlled, const PointMassState& pm);

}  // namespace cem
