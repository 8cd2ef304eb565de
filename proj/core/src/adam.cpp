#include "cem/diff/adam.hpp"

#include <cmath>
#include <string>

namespace cem::diff {

AdamState AdamState::zeros_like(std::span<const Tensor> params) {
  AdamState s;
  for (const auto& p : params) {
    s.m.emplace_back(p.rows(), p.cols());
    s.v.emplace_back(p.rows(), p.cols());
  }
  return s;
}

AdamResult adam_update(std::span<const Tensor> params, std::span<const Tensor> grads,
                       const AdamState& state, const AdamConfig& cfg) {
  if (params.size() != grads.size() || params.size() != state.m.size() ||
      params.size() != state.v.size())
    throw ShapeError("adam_update: params/grads/state count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].same_shape(grads[i]) || !params[i].same_shape(state.m[i]) ||
        !params[i].same_shape(state.v[i]))
      throw ShapeError("adam_update: shape mismatch in tensor " + std::to_string(i));
    if (!grads[i].all_finite())
      throw NonFiniteError("adam_update: non-finite gradient in tensor " + std::to_string(i));
  }

  AdamResult out;
  out.state.step = state.step + 1;
  const double t = static_cast<double>(out.state.step);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto g = grads[i].mat().array();
    Mat m = (cfg.beta1 * state.m[i].mat().array() + (1.0 - cfg.beta1) * g).matrix();
    Mat v = (cfg.beta2 * state.v[i].mat().array() + (1.0 - cfg.beta2) * g.square()).matrix();
    Mat p = (params[i].mat().array() -
             cfg.lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + cfg.eps))
                .matrix();
    out.params.emplace_back(std::move(p));
    out.state.m.emplace_back(std::move(m));
    out.state.v.emplace_back(std::move(v));
  }
  return out;
}

double clip_global_norm(std::span<Tensor> grads, double max_norm) {
  double sq = 0.0;
  for (const auto& g : grads) sq += g.mat().squaredNorm();
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const double s = max_norm / norm;
    for (auto& g : grads) g.mat() *= s;
  }
  return norm;
}

}  // namespace cem::diff
