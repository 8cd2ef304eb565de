#pragma once

// Truncated Langevin dynamics  v <- v - (alpha/2) dE/dv + w,  w ~ N(0, alpha)
// over entity states (generation), attention logits (identification) and concept codes
// (execution-time inference). Every sampler can keep the unrolled graph so the result
// stays differentiable w.r.t. the energy parameters.

#include "cem/model.hpp"

#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace cem {

struct SamplerConfig {
  int steps = 10;
  double step_size = 0.1;
  bool noise = true;
  // Disable noise on the final ceil(K/2) steps for a deterministic readout.
  bool anneal = false;
  // Per-variable overrides of step_size.
  std::optional<double> step_x, step_a, step_w;
  double position_lo = -kPositionBound;
  double position_hi = kPositionBound;
  // Descend the energy. Setting false follows the gradient sign as printed in the
  // original update rule (ascent); kept only for experimentation.
  bool descent = true;

  double x_step() const { return step_x.value_or(step_size); }
  double a_step() const { return step_a.value_or(step_size); }
  double w_step() const { return step_w.value_or(step_size); }
  // Whether step k (1-based) adds noise.
  bool noisy_step(int k) const;
  void validate() const;
};

class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& what, int step)
      : std::runtime_error(what + " (step " + std::to_string(step) + ")"), step_(step) {}
  int step() const { return step_; }

 private:
  int step_;
};

struct LangevinResult {
  Expr sample;
  std::vector<Tensor> iterates;  // K + 1 values, iterates[0] is the initialization
};

struct Bounds {
  double lo;
  double hi;
};

// Generic truncated Langevin loop. `total_energy` maps the current iterate to a scalar.
// With create_graph the iterates stay connected to everything `total_energy` depends on;
// otherwise each iterate is re-rooted as a fresh leaf.
LangevinResult langevin(const Expr& init, const std::function<Expr(const Expr&)>& total_energy,
                        double step_size, const SamplerConfig& cfg, std::uint64_t seed,
                        bool create_graph, std::optional<Bounds> bounds = std::nullopt);

// Which entity channel generation optimizes.
enum class Channel { Position, Color };

// Positions/colors of every scene row with the free rows replaced by `free_values`.
Expr assemble_channel(const SceneBatch& scene, Channel channel, const Expr& free_values);

// Optimizes the free rows of `scene` starting from their origin values.
LangevinResult langevin_x(const SceneBatch& scene, Channel channel, const Expr& attention,
                          const Expr& codes, const ParamExprs& params, const ModelConfig& model,
                          const SamplerConfig& cfg, std::uint64_t seed, bool create_graph);

// Optimizes attention logits starting from a unit Gaussian draw.
LangevinResult langevin_a(const SceneBatch& scene, const Expr& codes, const ParamExprs& params,
                          const ModelConfig& model, const SamplerConfig& cfg, std::uint64_t seed,
                          bool create_graph);

// Demo views for code inference. Events sharing a code row form one group; its code
// minimizes the mean energy of the group.
struct DemoBatch {
  SceneBatch generation;      // x1 views, code row = group
  SceneBatch identification;  // x0 views, code row = group
  Tensor generation_attention;
  Tensor identification_attention;
  int groups = 0;

  void add(const Event& event, int group);
};

struct CodeInference {
  Expr w_x;  // groups x code_dim
  Expr w_a;
  std::vector<Tensor> w_x_iterates;
  std::vector<Tensor> w_a_iterates;
};

// Code for one branch: minimizes the per-group mean energy of `scene` under `attention`.
LangevinResult infer_code(const SceneBatch& scene, const Tensor& attention, int groups,
                          const ParamExprs& params, const ModelConfig& model,
                          const SamplerConfig& cfg, std::uint64_t seed, bool create_graph);

CodeInference infer_codes(const DemoBatch& demos, const ParamExprs& params,
                          const ModelConfig& model, const SamplerConfig& cfg, std::uint64_t seed,
                          bool create_graph);

// Value-level conveniences for a single concept.
struct ConceptCode {
  std::vector<double> w_x;
  std::vector<double> w_a;
  bool operator==(const ConceptCode&) const = default;
};

ConceptCode infer_codes(std::span<const Event> demos, const EnergyParams& params,
                        const SamplerConfig& cfg, std::uint64_t seed,
                        CodeInference* trace = nullptr);

// Channel that generation optimizes for an event family flag.
struct GenerationSample {
  Event event;  // copy of the input with generated frames filled in
  std::vector<Tensor> iterates;
};

GenerationSample generate(const Event& event, std::span<const double> attention,
                          std::span<const double> w_x, const EnergyParams& params,
                          const SamplerConfig& cfg, std::uint64_t seed,
                          Channel channel = Channel::Position);

struct AttentionSample {
  std::vector<double> logits;
  std::vector<Tensor> iterates;
};

// Process-wide counts of sampler runs, for auditing which branches a computation used.
struct SamplerCounters {
  std::uint64_t position_runs = 0;
  std::uint64_t attention_runs = 0;
  std::uint64_t code_runs = 0;
};
SamplerCounters sampler_counters();

AttentionSample identify(const Event& event, std::span<const double> w_a,
                         const EnergyParams& params, const SamplerConfig& cfg, std::uint64_t seed);

}  // namespace cem
