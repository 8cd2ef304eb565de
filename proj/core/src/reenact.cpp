#include "cem/reenact.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace cem {

using namespace diff;

void MPCConfig::validate() const {
  if (horizon < 1) throw std::invalid_argument("mpc: horizon must be >= 1");
  if (!(control_penalty >= 0)) throw std::invalid_argument("mpc: control penalty must be >= 0");
  if (!(u_max > 0) || !(v_max > 0) || !(dt > 0)) throw std::invalid_argument("mpc: u_max, v_max and dt must be > 0");
  if (iterations < 0 || total_steps < 0) throw std::invalid_argument("mpc: iterations and total steps must be >= 0");
  if (!(step_size >= 0)) throw std::invalid_argument("mpc: step size must be >= 0");
}

PointMassState step_dynamics(const PointMassState& s, const Control& u, const MPCConfig& cfg) {
  if (u.size() != s.pos.size() || s.vel.size() != s.pos.size())
    throw std::invalid_argument("step_dynamics: control count does not match entity count");
  PointMassState out = s;
  for (std::size_t i = 0; i < s.pos.size(); ++i) {
    for (int c = 0; c < 2; ++c) {
      if (!(std::abs(u[i][c]) <= cfg.u_max)) throw std::invalid_argument("step_dynamics: control exceeds u_max");
      out.vel[i][c] = std::clamp(s.vel[i][c] + u[i][c] * cfg.dt, -cfg.v_max, cfg.v_max);
      const double p = s.pos[i][c] + out.vel[i][c] * cfg.dt;
      out.pos[i][c] = std::clamp(p, -kPositionBound, kPositionBound);
      if (p != out.pos[i][c]) out.vel[i][c] = 0.0;  // inelastic wall
    }
  }
  return out;
}

PointMassState rest_state(const State& s, std::span<const int> controlled) {
  PointMassState out;
  for (int i : controlled) {
    if (i < 0 || i >= static_cast<int>(s.size())) throw std::out_of_range("rest_state: entity index out of range");
    out.pos.push_back(s[static_cast<std::size_t>(i)].pos);
    out.vel.push_back({0.0, 0.0});
  }
  return out;
}

State place(const State& s, std::span<const int> controlled, const PointMassState& pm) {
  State out = s;
  for (std::size_t k = 0; k < controlled.size(); ++k) out[static_cast<std::size_t>(controlled[k])].pos = pm.pos[k];
  return out;
}

TerminalCost energy_cost(const Event& scene, std::vector<int> controlled, std::span<const double> attention,
                         std::span<const double> w_x, const EnergyParams& params) {
  scene.validate();
  const int n = scene.entities();
  if (static_cast<int>(attention.size()) != n)
    throw ShapeError("energy_cost: attention length does not match entity count");
  if (static_cast<int>(w_x.size()) != params.config.code_dim)
    throw ShapeError("energy_cost: code length does not match code_dim");
  for (int i : controlled)
    if (i < 0 || i >= n) throw std::out_of_range("energy_cost: controlled entity out of range");
  Event e;
  e.states = {scene.states.front(), scene.states.front()};
  e.mask = scene.mask;
  auto batch = std::make_shared<SceneBatch>();
  batch->add(generation_view(e), 0);
  // Rows of the single generated frame are the entities in order.
  Tensor base = batch->positions();
  for (int i : controlled) base(i, 0) = base(i, 1) = 0.0;
  const Expr base_pos = constant(base);
  const Expr colors = constant(batch->colors());
  const Expr att = constant(Tensor::column({attention.begin(), attention.end()}));
  const Expr code = constant(Tensor::row({w_x.begin(), w_x.end()}));
  const auto ps = std::make_shared<ParamExprs>(param_constants(params));
  const ModelConfig model = params.config;
  const IndexList rows = make_index({controlled.begin(), controlled.end()});
  return [=](const Expr& positions) {
    const Expr full = add(base_pos, scatter(positions, rows, batch->rows()));
    return sum(energy(*batch, {full, colors, att, code}, *ps, model));
  };
}

namespace {

constexpr int kMaxHalvings = 30;
constexpr double kArmijo = 1e-4;

// Plans on the unclipped double integrator: the velocity and workspace clips are flat
// almost everywhere and would stall gradient descent at the bounds.
Expr plan_cost(const Tensor& p0, const Tensor& v0, const Expr& plan, const TerminalCost& cost, const MPCConfig& cfg) {
  const Index m = p0.rows();
  Expr p = constant(p0);
  Expr v = constant(v0);
  for (int k = 0; k < cfg.horizon; ++k) {
    std::vector<Index> idx;
    for (Index j = 0; j < m; ++j) idx.push_back(k * m + j);
    const Expr u = gather(plan, make_index(std::move(idx)));
    v = add(v, scale(u, cfg.dt));
    p = add(p, scale(v, cfg.dt));
  }
  return add(cost(p), scale(sum(square(plan)), cfg.control_penalty));
}

Tensor to_tensor(const std::vector<std::array<double, 2>>& v) {
  Tensor t(static_cast<Index>(v.size()), 2);
  for (std::size_t i = 0; i < v.size(); ++i) {
    t(static_cast<Index>(i), 0) = v[i][0];
    t(static_cast<Index>(i), 1) = v[i][1];
  }
  return t;
}

double terminal_cost(const PointMassState& s, const TerminalCost& cost) { return cost(constant(to_tensor(s.pos))).value().item(); }

}  // namespace

Rollout mpc_rollout(const PointMassState& init, const TerminalCost& cost, const MPCConfig& cfg) {
  cfg.validate();
  if (init.pos.size() != init.vel.size()) throw std::invalid_argument("mpc_rollout: malformed state");
  const Index m = static_cast<Index>(init.pos.size());
  Rollout out;
  out.states.push_back(init);
  out.initial_cost = terminal_cost(init, cost);
  if (!std::isfinite(out.initial_cost)) throw DivergenceError("mpc: non-finite initial cost", 0);
  Tensor plan(cfg.horizon * m, 2);
  for (int step = 0; step < cfg.total_steps; ++step) {
    const PointMassState& s = out.states.back();
    const Tensor p0 = to_tensor(s.pos);
    const Tensor v0 = to_tensor(s.vel);
    for (int it = 0; it < cfg.iterations; ++it) {
      const Expr u = input(plan);
      const Expr c = plan_cost(p0, v0, u, cost, cfg);
      const double f0 = c.value().item();
      const Tensor g = derivative(c, u).value();
      if (!std::isfinite(f0) || !g.all_finite()) throw DivergenceError("mpc: non-finite plan cost", step);
      // Projected gradient step with Armijo backtracking from the nominal step size.
      double eta = cfg.step_size;
      for (int halving = 0; halving <= kMaxHalvings; ++halving, eta *= 0.5) {
        Tensor trial(Mat((plan.mat() - eta * g.mat()).cwiseMax(-cfg.u_max).cwiseMin(cfg.u_max)));
        const double f = plan_cost(p0, v0, constant(trial), cost, cfg).value().item();
        const double decrease = (g.mat().array() * (trial.mat() - plan.mat()).array()).sum();
        if (f <= f0 + kArmijo * decrease) {
          plan = std::move(trial);
          break;
        }
      }
    }
    Control u(static_cast<std::size_t>(m));
    for (Index j = 0; j < m; ++j) u[static_cast<std::size_t>(j)] = {plan(j, 0), plan(j, 1)};
    out.controls.push_back(u);
    out.states.push_back(step_dynamics(s, u, cfg));
    const double c = terminal_cost(out.states.back(), cost);
    if (!std::isfinite(c)) throw DivergenceError("mpc: non-finite cost", step);
    out.costs.push_back(c);
    // Warm start: shift by one control, repeat the last.
    Tensor next(plan.rows(), 2);
    for (Index r = 0; r < plan.rows(); ++r) {
      const Index src = std::min(r + m, plan.rows() - m + r % m);
      next(r, 0) = plan(src, 0);
      next(r, 1) = plan(src, 1);
    }
    plan = std::move(next);
  }
  return out;
}

}  // namespace cem
