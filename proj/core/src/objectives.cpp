#include "cem/objectives.hpp"

namespace cem {

using namespace diff;

namespace {

void append_logits(Tensor& t, std::span<const int> mask) {
  const auto logits = mask_logits(mask);
  Tensor next(t.rows() + static_cast<Index>(logits.size()), 1);
  for (Index i = 0; i < t.rows(); ++i) next[i] = t[i];
  for (std::size_t i = 0; i < logits.size(); ++i) next[t.rows() + static_cast<Index>(i)] = logits[i];
  t = std::move(next);
}

double mean_value(const Expr& column) { return column.rows() ? column.value().mat().mean() : 0.0; }

}  // namespace

Expr contrastive_loss(const Expr& e_pos, const Expr& e_neg) { return softplus(sub(e_pos, e_neg)); }

Expr kl_sample_loss(const SceneBatch& scene, const EnergyArgs& sampled, const ParamExprs& params,
                    const ModelConfig& model) {
  const EnergyArgs args{sampled.positions, sampled.colors, sampled.attention, stop_gradient(sampled.codes)};
  return energy(scene, args, stop_gradients(params), model);
}

void EpisodeBatch::add(const Episode& episode, int demo_index, int train_index) {
  const auto demos = episode.demos();
  const auto train = episode.train();
  if (demo_index < 0 || demo_index >= static_cast<int>(demos.size()) || train_index < 0 ||
      train_index >= static_cast<int>(train.size()))
    throw std::out_of_range("episode event index out of range");
  const int b = size_++;
  demos_.add(demos[static_cast<std::size_t>(demo_index)], b);
  const Event& e = train[static_cast<std::size_t>(train_index)];
  e.validate();
  const Channel channel = changes_color(episode.spec) ? Channel::Color : Channel::Position;
  auto it = std::find_if(generation_.begin(), generation_.end(),
                         [channel](const Generation& g) { return g.channel == channel; });
  if (it == generation_.end()) {
    generation_.push_back({channel, SceneBatch{}, Tensor(0, 1)});
    it = std::prev(generation_.end());
  }
  it->scene.add(generation_view(e), b, &e.states.front());
  append_logits(it->attention, e.mask);
  identification_.add(identification_view(e), b);
  append_logits(identification_attention_, e.mask);
}

LossBundle joint_loss(const EpisodeBatch& batch, const ParamExprs& params, const ModelConfig& model,
                      const LossConfig& cfg, std::uint64_t seed) {
  if (batch.size() == 0) throw std::invalid_argument("joint_loss: empty batch");
  if (!cfg.x_branch && !cfg.a_branch) throw std::invalid_argument("joint_loss: both branches disabled");
  const auto& demos = batch.demos();
  const bool graph = cfg.use_kl;
  std::vector<Expr> ml_terms, kl_terms;
  LossBundle out;

  if (cfg.x_branch) {
    const Expr w_x = infer_code(demos.generation, demos.generation_attention, demos.groups, params, model,
                                cfg.sampler, mix_seed(seed, 2), true)
                         .sample;
    const Expr w_bar = stop_gradient(w_x);
    Expr ml, kl;
    double pos_sum = 0, neg_sum = 0;
    Index events = 0;
    for (std::size_t g = 0; g < batch.generation().size(); ++g) {
      const auto& gen = batch.generation()[g];
      const Expr att = constant(gen.attention);
      const auto r = langevin_x(gen.scene, gen.channel, att, w_bar, params, model, cfg.sampler,
                                mix_seed(seed, 10 + g), graph);
      const Expr positions = constant(gen.scene.positions());
      const Expr colors = constant(gen.scene.colors());
      const bool pos = gen.channel == Channel::Position;
      const Expr neg_free = assemble_channel(gen.scene, gen.channel, stop_gradient(r.sample));
      const Expr e_pos = energy(gen.scene, {positions, colors, att, w_x}, params, model);
      const Expr e_neg = energy(gen.scene, {pos ? neg_free : positions, pos ? colors : neg_free, att, w_x},
                                params, model);
      const Expr term = sum(contrastive_loss(e_pos, e_neg));
      ml = ml.get() ? add(ml, term) : term;
      if (cfg.use_kl) {
        const Expr live = assemble_channel(gen.scene, gen.channel, r.sample);
        const Expr k = sum(kl_sample_loss(gen.scene, {pos ? live : positions, pos ? colors : live, att, w_bar},
                                          params, model));
        kl = kl.get() ? add(kl, k) : k;
      }
      pos_sum += e_pos.value().mat().sum();
      neg_sum += e_neg.value().mat().sum();
      events += gen.scene.events();
    }
    const double inv = 1.0 / static_cast<double>(events);
    ml_terms.push_back(scale(ml, inv));
    if (cfg.use_kl) kl_terms.push_back(scale(kl, inv));
    out.e_pos_x = pos_sum * inv;
    out.e_neg_x = neg_sum * inv;
  }

  if (cfg.a_branch) {
    const Expr w_a = infer_code(demos.identification, demos.identification_attention, demos.groups, params,
                                model, cfg.sampler, mix_seed(seed, 3), true)
                         .sample;
    const Expr w_bar = stop_gradient(w_a);
    const auto& scene = batch.identification();
    const auto r = langevin_a(scene, w_bar, params, model, cfg.sampler, mix_seed(seed, 20), graph);
    const Expr positions = constant(scene.positions());
    const Expr colors = constant(scene.colors());
    const Expr e_pos = energy(scene, {positions, colors, constant(batch.identification_attention()), w_a},
                              params, model);
    const Expr e_neg = energy(scene, {positions, colors, stop_gradient(r.sample), w_a}, params, model);
    const double inv = 1.0 / static_cast<double>(scene.events());
    ml_terms.push_back(scale(sum(contrastive_loss(e_pos, e_neg)), inv));
    if (cfg.use_kl)
      kl_terms.push_back(scale(sum(kl_sample_loss(scene, {positions, colors, r.sample, w_bar}, params, model)), inv));
    out.e_pos_a = mean_value(e_pos);
    out.e_neg_a = mean_value(e_neg);
  }

  auto total_of = [](const std::vector<Expr>& terms) {
    if (terms.empty()) return constant(0.0);
    Expr t = terms.front();
    for (std::size_t i = 1; i < terms.size(); ++i) t = add(t, terms[i]);
    return t;
  };
  out.loss_ml = total_of(ml_terms);
  out.loss_kl = total_of(kl_terms);
  out.total = cfg.use_kl ? add(out.loss_ml, out.loss_kl) : out.loss_ml;
  return out;
}

}  // namespace cem
