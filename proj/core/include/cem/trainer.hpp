#pragma once

// Meta-level training: per step, infer codes from demonstrations, sample negatives on
// training events through the unrolled sampler, and update the energy with Adam.

#include "cem/objectives.hpp"

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace cem {

enum class ContextMode { Both, GenerationOnly, IdentificationOnly };
const char* context_mode_name(ContextMode m);
std::optional<ContextMode> parse_context_mode(const std::string& s);  // both | gen | ident (or long forms)

struct TrainConfig {
  std::string profile = "desk";
  int steps = 3000;
  int batch_size = 64;
  double lr = 1e-3;
  double clip_norm = 10.0;
  int checkpoint_every = 500;
  std::uint64_t seed = 0;
  ContextMode context_mode = ContextMode::Both;
  bool use_kl = true;
  ModelConfig model{64, 2, 16, 0, Variant::Relational};
  SamplerConfig sampler;

  // Named profiles: "desk" (hidden 64, batch 64, 3000 steps) and "paper" (hidden 128,
  // batch 1024, 10000 steps).
  static TrainConfig profile_config(const std::string& name);
  void validate() const;
  bool operator==(const TrainConfig&) const;
};

// Flat key=value text; unknown keys and malformed values are errors.
std::string config_to_string(const TrainConfig& cfg);
TrainConfig config_from_string(const std::string& text);
void save_config(const std::filesystem::path& path, const TrainConfig& cfg);
TrainConfig load_config(const std::filesystem::path& path);

struct StepMetrics {
  std::int64_t step = 0;
  double loss_ml = 0, loss_kl = 0;
  double e_pos_x = 0, e_neg_x = 0, e_pos_a = 0, e_neg_a = 0;
  double grad_norm = 0;
  bool non_finite = false;  // step aborted, parameters left unchanged
};

struct StepResult {
  EnergyParams params;
  diff::AdamState optimizer;
  StepMetrics metrics;
};

// Episodes eligible for a context mode: generation-only and identification-only
// training see only episodes of their own context.
std::vector<std::size_t> eligible_episodes(std::span<const Episode> data, ContextMode mode);

LossConfig loss_config(const TrainConfig& cfg);

// The training batch of step `step` (deterministic in cfg.seed and step).
EpisodeBatch sample_batch(std::span<const Episode> data, std::span<const std::size_t> eligible,
                          const TrainConfig& cfg, std::int64_t step);

StepResult train_step(const EnergyParams& params, const diff::AdamState& optimizer,
                      std::span<const Episode> data, std::span<const std::size_t> eligible,
                      const TrainConfig& cfg, std::int64_t step);

class TrainingAborted : public std::runtime_error {
 public:
  TrainingAborted(const std::string& what, std::int64_t step) : std::runtime_error(what), step_(step) {}
  std::int64_t step() const { return step_; }

 private:
  std::int64_t step_;
};

struct TrainOptions {
  std::filesystem::path checkpoint;        // final checkpoint; empty = none
  std::filesystem::path log;               // metrics CSV; empty = none
  bool periodic_checkpoints = true;        // <checkpoint stem>.step<N>.json every cfg.checkpoint_every
  std::optional<Checkpoint> resume;        // continue from this state
  std::function<void(const StepMetrics&)> on_step;
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<StepMetrics> metrics;
};

// Runs cfg.steps total steps (counting any resumed ones). Throws TrainingAborted on a
// non-finite step after writing the log so far.
TrainResult train(std::span<const Episode> data, const TrainConfig& cfg, const TrainOptions& opts = {});

// CSV header and row of the metrics log; loss_kl is omitted without the KL objective.
std::string metrics_header(bool use_kl);
std::string metrics_row(const StepMetrics& m, bool use_kl);

}  // namespace cem
