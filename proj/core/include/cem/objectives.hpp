#pragma once

// Contrastive maximum-likelihood loss, the sampler (KL) loss, and the joint objective
// over a batch of episodes.

#include "cem/events.hpp"
#include "cem/sampler.hpp"

namespace cem {

// softplus(E_pos - E_neg), elementwise for column inputs. Callers pass a detached
// negative; the value is computed in the overflow-free form max(z,0) + log1p(exp(-|z|)).
Expr contrastive_loss(const Expr& e_pos, const Expr& e_neg);

// Energy of the samples under gradient-stopped parameters and codes. The value equals a
// plain energy evaluation; gradients reach the parameters only through the samples.
Expr kl_sample_loss(const SceneBatch& scene, const EnergyArgs& sampled,
                    const ParamExprs& params, const ModelConfig& model);

// One batch of training episodes: element b contributes a demonstration event (code
// inference) and a training event (loss), both under code row b.
class EpisodeBatch {
 public:
  void add(const Episode& episode, int demo_index, int train_index);

  int size() const { return size_; }
  const DemoBatch& demos() const { return demos_; }

  struct Generation {
    Channel channel;
    SceneBatch scene;  // x1 (or full trajectory), free rows seeded from x0
    Tensor attention;  // ground-truth logits
  };
  // Generation views grouped by the channel that generation changes.
  const std::vector<Generation>& generation() const { return generation_; }
  const SceneBatch& identification() const { return identification_; }
  const Tensor& identification_attention() const { return identification_attention_; }

 private:
  int size_ = 0;
  DemoBatch demos_;
  std::vector<Generation> generation_;
  SceneBatch identification_;
  Tensor identification_attention_{0, 1};
};

struct LossConfig {
  SamplerConfig sampler;
  bool use_kl = true;
  bool x_branch = true;  // generation terms
  bool a_branch = true;  // identification terms
};

// Scalar Exprs (gradients flow to the parameter leaves) plus batch-mean diagnostics.
struct LossBundle {
  Expr total;
  Expr loss_ml;
  Expr loss_kl;
  double e_pos_x = 0, e_neg_x = 0, e_pos_a = 0, e_neg_a = 0;
};

// Infers codes from the demonstrations (kept differentiable), samples negatives on the
// training events through the unrolled sampler and forms loss_ml + loss_kl.
LossBundle joint_loss(const EpisodeBatch& batch, const ParamExprs& params,
                      const ModelConfig& model, const LossConfig& cfg, std::uint64_t seed);

}  // namespace cem
