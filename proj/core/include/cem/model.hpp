#pragma once

// Relation-network energy E(x, a, w) = f( sum_{t,i,j} s(a_i) s(a_j) g(x_i^t, x_j^t, w), w )^2
// and its unary ablation, evaluated over a SceneBatch so a whole minibatch is one graph.

#include "cem/diff/adam.hpp"
#include "cem/diff/expr.hpp"
#include "cem/scene.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace cem {

enum class Variant { Relational, Unary };

const char* variant_name(Variant v);
Variant parse_variant(const std::string& s);

struct ModelConfig {
  int hidden = 128;
  int layers = 2;        // hidden layers in each of f and g
  int code_dim = 16;
  int relation_dim = 0;  // width of g's output; 0 means `hidden`
  Variant variant = Variant::Relational;

  int relation_width() const { return relation_dim > 0 ? relation_dim : hidden; }
  bool operator==(const ModelConfig&) const = default;
};

struct ParamSpec {
  std::string name;
  Index rows = 0;
  Index cols = 0;
};

// Layer manifest in storage order.
std::vector<ParamSpec> param_layout(const ModelConfig& cfg);

struct EnergyParams {
  ModelConfig config;
  std::vector<Tensor> tensors;  // aligned with param_layout(config)

  std::size_t parameter_count() const;
  std::vector<double> flatten() const;
  bool operator==(const EnergyParams& o) const { return config == o.config && tensors == o.tensors; }
};

// Weights uniform in +-sqrt(6 / (fan_in + fan_out)), biases zero. Deterministic in seed.
EnergyParams init_params(std::uint64_t seed, const ModelConfig& cfg);

// Graph handles for the parameter tensors.
using ParamExprs = std::vector<Expr>;
ParamExprs param_inputs(const EnergyParams& p);
ParamExprs param_constants(const EnergyParams& p);
ParamExprs stop_gradients(const ParamExprs& p);

// Graph arguments of a batched energy evaluation over `scene`.
struct EnergyArgs {
  Expr positions;  // rows x 2
  Expr colors;     // rows x 3
  Expr attention;  // attention_rows x 1 logits
  Expr codes;      // code_rows x code_dim
};

// Energies of every event in the batch as an events x 1 column, each >= 0.
Expr energy(const SceneBatch& scene, const EnergyArgs& args, const ParamExprs& params,
            const ModelConfig& cfg);

// Single-event convenience over the whole trajectory.
Expr energy(const Event& event, std::span<const double> attention, std::span<const double> code,
            const EnergyParams& params);

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  EnergyParams params;
  std::optional<diff::AdamState> optimizer;
  std::int64_t step = 0;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);
std::string checkpoint_to_string(const Checkpoint& ckpt);
Checkpoint checkpoint_from_string(const std::string& text);

}  // namespace cem
