#pragma once

// Few-shot evaluation metrics and the experiment drivers built on them: context
// transfer, sampler/architecture ablations, energy histograms and code projections.

#include "cem/trainer.hpp"

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace cem {

// Offset applied to a training seed to obtain disjoint evaluation episodes.
inline constexpr std::uint64_t kHeldOutOffset = 1'000'000;
inline std::uint64_t held_out_seed(std::uint64_t seed) { return seed + kHeldOutOffset; }

class EvalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct EvalConfig {
  SamplerConfig sampler = annealed();
  std::uint64_t seed = 0;
  // Rejects checkpoints whose code_dim or variant differ from this, when set.
  std::optional<ModelConfig> expect;

  static SamplerConfig annealed() {
    SamplerConfig s;
    s.anneal = true;
    return s;
  }
};

struct MetricSums {
  double generation_error = 0;  // mean over generation-context events
  double attention_error = 0;   // mean over identification-context events
  double success_rate = 0;      // over all events
  int generation_events = 0;
  int identification_events = 0;
};

struct EvalReport : MetricSums {
  std::map<std::string, MetricSums> per_concept;  // keyed by "family/variant"
};

// Mean distance between the changed channel (positions, or colors for recoloring
// concepts) of attended entities in the generated frames of `sampled` and `truth`.
double generation_error(const ConceptSpec& spec, const Event& sampled, const Event& truth);
// Mean |sigmoid(logit) - mask| over entities.
double attention_error(std::span<const double> logits, std::span<const int> mask);

// Infers codes from each episode's demonstrations, then generates (generation context)
// or identifies (identification context) every training event with annealed noise.
EvalReport evaluate(const EnergyParams& params, std::span<const Episode> episodes, const EvalConfig& cfg);
std::string report_to_json(const EvalReport& r);

// Trains `cfg` on `data`, reusing <cache_dir>/<key>.json when a previous run with the
// same configuration and dataset left one. Empty cache_dir disables caching.
struct CachedTraining {
  Checkpoint checkpoint;
  bool from_cache = false;
  std::filesystem::path path;
};
CachedTraining train_cached(std::span<const Episode> data, const TrainConfig& cfg,
                            const std::filesystem::path& cache_dir,
                            const std::function<void(const StepMetrics&)>& on_step = {});
// Stable 64-bit key of (configuration, dataset).
std::string training_key(std::span<const Episode> data, const TrainConfig& cfg);

struct TransferRow {
  std::string label;  // untrained | generation-only | identification-only | both
  EvalReport report;
};

// Trains the three context modes of `base` on `train_data` and evaluates them, together
// with the untrained initialization, on `eval_data`.
std::vector<TransferRow> transfer_experiment(std::span<const Episode> train_data,
                                             std::span<const Episode> eval_data, const TrainConfig& base,
                                             const EvalConfig& eval,
                                             const std::filesystem::path& cache_dir = {});

struct AblationRow {
  std::string label;
  TrainConfig config;
  EvalReport report;
};

// One training per (sampler steps, variant) combination; the same K is used at readout.
std::vector<AblationRow> ablation(std::span<const Episode> train_data, std::span<const Episode> eval_data,
                                  const TrainConfig& base, const EvalConfig& eval,
                                  std::span<const int> sampler_steps, std::span<const Variant> variants,
                                  const std::filesystem::path& cache_dir = {});

enum class EnergyKind { Positive, Sampled, Random };
const char* energy_kind_name(EnergyKind k);

struct EnergyRecord {
  EnergyKind kind;
  std::string concept_name;
  Context context;
  double energy;
};

// Per-event energies under inferred codes: demonstrations (positive), sampler outputs on
// the training events, and events drawn from the sampler's initial distribution
// (uniform positions/colors in generation, unit-Gaussian logits in identification).
std::vector<EnergyRecord> energy_histograms(const EnergyParams& params, std::span<const Episode> episodes,
                                            const EvalConfig& cfg);
std::string energy_csv(std::span<const EnergyRecord> records);
double median_energy(std::span<const EnergyRecord> records, EnergyKind kind);

struct LabeledCode {
  std::string label;
  ConceptCode code;
};

struct ProjectedPoint {
  std::string label;
  std::string role;  // w_x | w_a
  double x = 0, y = 0;
};

struct CodeProjection {
  std::vector<ProjectedPoint> points;
  std::vector<double> mean;
  std::vector<std::vector<double>> components;  // two unit-length principal axes
  double residual = 0;                          // sum of squared reconstruction errors
};

// Top-2 principal components of all w_x and w_a vectors after centering.
CodeProjection code_projection(std::span<const LabeledCode> codes);
std::string projection_csv(const CodeProjection& p);

// Fraction of w_a codes whose nearest w_x code (Euclidean) carries the same label.
double code_sharing_accuracy(std::span<const LabeledCode> codes);

}  // namespace cem
