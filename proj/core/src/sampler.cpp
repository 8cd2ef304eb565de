#include "cem/sampler.hpp"

#include <atomic>
#include <cmath>

namespace cem {

using namespace diff;

namespace {

constexpr std::uint64_t kAttentionInitStream = 0xA77E;
constexpr std::uint64_t kCodeInitStream = 0xC0DE;

Expr weighted_total(const Expr& energies, const Tensor& weights) {
  return sum(mul(energies, constant(weights)));
}

std::atomic<std::uint64_t> g_x_runs{0}, g_a_runs{0}, g_w_runs{0};

Tensor group_weights(const SceneBatch& scene, int groups) {
  std::vector<double> count(static_cast<std::size_t>(groups), 0.0);
  const auto& codes = *scene.event_code();
  for (Index c : codes) count[static_cast<std::size_t>(c)] += 1.0;
  Tensor w(scene.events(), 1);
  for (Index b = 0; b < scene.events(); ++b) w[b] = 1.0 / count[static_cast<std::size_t>(codes[static_cast<std::size_t>(b)])];
  return w;
}

}  // namespace

bool SamplerConfig::noisy_step(int k) const {
  if (!noise) return false;
  if (!anneal) return true;
  const int quiet = (steps + 1) / 2;
  return k <= steps - quiet;
}

void SamplerConfig::validate() const {
  if (steps < 0) throw std::invalid_argument("sampler steps must be >= 0");
  if (!(x_step() >= 0.0 && a_step() >= 0.0 && w_step() >= 0.0))
    throw std::invalid_argument("sampler step sizes must be >= 0");
  if (!(position_lo < position_hi)) throw std::invalid_argument("empty position bounds");
}

LangevinResult langevin(const Expr& init, const std::function<Expr(const Expr&)>& total_energy,
                        double step_size, const SamplerConfig& cfg, std::uint64_t seed,
                        bool create_graph, std::optional<Bounds> bounds) {
  cfg.validate();
  LangevinResult out;
  // A constant start has to become a leaf so the first step can differentiate through it.
  Expr v = create_graph && init.differentiable() ? init : input(init.value());
  out.iterates.reserve(static_cast<std::size_t>(cfg.steps) + 1);
  out.iterates.push_back(v.value());
  const double sign = cfg.descent ? -1.0 : 1.0;
  for (int k = 1; k <= cfg.steps; ++k) {
    const Expr e = total_energy(v);
    if (!e.value().all_finite()) throw DivergenceError("non-finite energy during sampling", k);
    const Expr g = derivative(e, v);
    if (!g.value().all_finite()) throw DivergenceError("non-finite energy gradient during sampling", k);
    Expr next = add(v, scale(g, sign * 0.5 * step_size));
    if (cfg.noisy_step(k))
      next = add(next, noise(v.rows(), v.cols(), mix_seed(seed, static_cast<std::uint64_t>(k)),
                             std::sqrt(step_size)));
    if (bounds) next = clamp(next, bounds->lo, bounds->hi);
    v = create_graph ? next : input(next.value());
    out.iterates.push_back(v.value());
  }
  out.sample = v;
  return out;
}

Expr assemble_channel(const SceneBatch& scene, Channel channel, const Expr& free_values) {
  Tensor base = channel == Channel::Position ? scene.positions() : scene.colors();
  if (free_values.rows() != scene.free_row_count() || free_values.cols() != base.cols())
    throw ShapeError("assemble_channel: free values have shape " + free_values.value().shape_str());
  for (Index r : *scene.free_rows()) base.mat().row(r).setZero();
  return add(constant(std::move(base)), scatter(free_values, scene.free_rows(), scene.rows()));
}

LangevinResult langevin_x(const SceneBatch& scene, Channel channel, const Expr& attention,
                          const Expr& codes, const ParamExprs& params, const ModelConfig& model,
                          const SamplerConfig& cfg, std::uint64_t seed, bool create_graph) {
  ++g_x_runs;
  const bool pos = channel == Channel::Position;
  const Expr init = constant(pos ? scene.free_origin_positions() : scene.free_origin_colors());
  const Expr fixed_positions = constant(scene.positions());
  const Expr fixed_colors = constant(scene.colors());
  auto total = [&](const Expr& v) {
    EnergyArgs args{pos ? assemble_channel(scene, channel, v) : fixed_positions,
                    pos ? fixed_colors : assemble_channel(scene, channel, v), attention, codes};
    return sum(energy(scene, args, params, model));
  };
  const Bounds b = pos ? Bounds{cfg.position_lo, cfg.position_hi} : Bounds{0.0, 1.0};
  return langevin(init, total, cfg.x_step(), cfg, seed, create_graph, b);
}

LangevinResult langevin_a(const SceneBatch& scene, const Expr& codes, const ParamExprs& params,
                          const ModelConfig& model, const SamplerConfig& cfg, std::uint64_t seed,
                          bool create_graph) {
  ++g_a_runs;
  const Expr init =
      constant(gaussian(scene.attention_rows(), 1, mix_seed(seed, kAttentionInitStream)));
  const Expr positions = constant(scene.positions());
  const Expr colors = constant(scene.colors());
  auto total = [&](const Expr& v) {
    return sum(energy(scene, {positions, colors, v, codes}, params, model));
  };
  return langevin(init, total, cfg.a_step(), cfg, mix_seed(seed, 1), create_graph);
}

void DemoBatch::add(const Event& event, int group) {
  if (event.mask.empty()) throw EventError("demonstration events need a ground-truth mask");
  event.validate();
  generation.add(generation_view(event), group, &event.states.front());
  identification.add(identification_view(event), group);
  const auto logits = mask_logits(event.mask);
  auto append = [&logits](Tensor& t) {
    Tensor next(t.rows() + static_cast<Index>(logits.size()), 1);
    for (Index i = 0; i < t.rows(); ++i) next[i] = t[i];
    for (std::size_t i = 0; i < logits.size(); ++i) next[t.rows() + static_cast<Index>(i)] = logits[i];
    t = std::move(next);
  };
  if (generation_attention.cols() == 0) generation_attention = Tensor(0, 1);
  if (identification_attention.cols() == 0) identification_attention = Tensor(0, 1);
  append(generation_attention);
  append(identification_attention);
  groups = std::max(groups, group + 1);
}

LangevinResult infer_code(const SceneBatch& scene, const Tensor& attention, int groups,
                          const ParamExprs& params, const ModelConfig& model,
                          const SamplerConfig& cfg, std::uint64_t seed, bool create_graph) {
  if (groups <= 0 || scene.events() == 0) throw std::invalid_argument("infer_code: empty demonstration set");
  ++g_w_runs;
  const Tensor weights = group_weights(scene, groups);
  const Expr positions = constant(scene.positions());
  const Expr colors = constant(scene.colors());
  const Expr att = constant(attention);
  auto total = [&](const Expr& w) {
    return weighted_total(energy(scene, {positions, colors, att, w}, params, model), weights);
  };
  const Expr init = constant(gaussian(groups, model.code_dim, diff::mix_seed(seed, kCodeInitStream)));
  return langevin(init, total, cfg.w_step(), cfg, diff::mix_seed(seed, 1), create_graph);
}

CodeInference infer_codes(const DemoBatch& demos, const ParamExprs& params,
                          const ModelConfig& model, const SamplerConfig& cfg, std::uint64_t seed,
                          bool create_graph) {
  CodeInference out;
  auto x = infer_code(demos.generation, demos.generation_attention, demos.groups, params, model, cfg,
                      mix_seed(seed, 2), create_graph);
  auto a = infer_code(demos.identification, demos.identification_attention, demos.groups, params, model,
                      cfg, mix_seed(seed, 3), create_graph);
  out.w_x = x.sample;
  out.w_x_iterates = std::move(x.iterates);
  out.w_a = a.sample;
  out.w_a_iterates = std::move(a.iterates);
  return out;
}

SamplerCounters sampler_counters() { return {g_x_runs.load(), g_a_runs.load(), g_w_runs.load()}; }

ConceptCode infer_codes(std::span<const Event> demos, const EnergyParams& params,
                        const SamplerConfig& cfg, std::uint64_t seed, CodeInference* trace) {
  if (demos.empty()) throw std::invalid_argument("infer_codes: empty demonstration set");
  DemoBatch batch;
  for (const auto& e : demos) batch.add(e, 0);
  auto inf = infer_codes(batch, param_constants(params), params.config, cfg, seed, false);
  ConceptCode code{inf.w_x.value().to_vector(), inf.w_a.value().to_vector()};
  if (trace) *trace = std::move(inf);
  return code;
}

GenerationSample generate(const Event& event, std::span<const double> attention,
                          std::span<const double> w_x, const EnergyParams& params,
                          const SamplerConfig& cfg, std::uint64_t seed, Channel channel) {
  event.validate();
  if (static_cast<int>(attention.size()) != event.entities())
    throw ShapeError("generate: attention length does not match entity count");
  if (static_cast<int>(w_x.size()) != params.config.code_dim)
    throw ShapeError("generate: code length does not match code_dim");
  SceneBatch scene;
  const EventView view = generation_view(event);
  scene.add(view, 0, &event.states.front());
  auto r = langevin_x(scene, channel, constant(Tensor::column({attention.begin(), attention.end()})),
                      constant(Tensor::row({w_x.begin(), w_x.end()})), param_constants(params),
                      params.config, cfg, seed, false);
  GenerationSample out{event, std::move(r.iterates)};
  const Tensor& v = out.iterates.back();
  const int n = event.entities();
  const int first_state = event.steps() == 2 ? 1 : view.first_free_frame;
  Index row = 0;
  for (int t = first_state; t < event.steps(); ++t) {
    for (int i = 0; i < n; ++i, ++row) {
      auto& e = out.event.states[static_cast<std::size_t>(t)][static_cast<std::size_t>(i)];
      if (channel == Channel::Position) {
        e.pos = {v(row, 0), v(row, 1)};
      } else {
        e.color = {v(row, 0), v(row, 1), v(row, 2)};
      }
    }
  }
  return out;
}

AttentionSample identify(const Event& event, std::span<const double> w_a,
                         const EnergyParams& params, const SamplerConfig& cfg, std::uint64_t seed) {
  event.validate();
  if (static_cast<int>(w_a.size()) != params.config.code_dim)
    throw ShapeError("identify: code length does not match code_dim");
  SceneBatch scene;
  scene.add(identification_view(event), 0);
  auto r = langevin_a(scene, constant(Tensor::row({w_a.begin(), w_a.end()})),
                      param_constants(params), params.config, cfg, seed, false);
  AttentionSample out;
  out.logits = r.iterates.back().to_vector();
  out.iterates = std::move(r.iterates);
  return out;
}

}  // namespace cem
