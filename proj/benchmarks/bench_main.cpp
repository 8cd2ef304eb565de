#include "cem/trainer.hpp"

#include <benchmark/benchmark.h>

using namespace cem;

namespace {

const std::vector<Episode>& dataset() {
  static const auto data = [] {
    const auto filters = parse_concepts("absolute_position");
    return generate_dataset(filters, 64, 1);
  }();
  return data;
}

void BM_EnergyForward(benchmark::State& state) {
  TrainConfig cfg;
  cfg.batch_size = static_cast<int>(state.range(0));
  const auto params = init_params(1, cfg.model);
  const auto eligible = eligible_episodes(dataset(), cfg.context_mode);
  const auto batch = sample_batch(dataset(), eligible, cfg, 0);
  const auto& scene = batch.identification();
  const auto p = param_constants(params);
  const Expr codes = constant(Tensor(batch.size(), cfg.model.code_dim, 0.1));
  for (auto _ : state) {
    const Expr e = energy(scene, {constant(scene.positions()), constant(scene.colors()),
                                  constant(batch.identification_attention()), codes},
                          p, cfg.model);
    benchmark::DoNotOptimize(e.value().data());
  }
}
BENCHMARK(BM_EnergyForward)->Arg(1)->Arg(64)->Unit(benchmark::kMillisecond);

void BM_EnergyGradient(benchmark::State& state) {
  TrainConfig cfg;
  const auto params = init_params(1, cfg.model);
  const auto eligible = eligible_episodes(dataset(), cfg.context_mode);
  const auto batch = sample_batch(dataset(), eligible, cfg, 0);
  const auto& scene = batch.identification();
  const auto p = param_inputs(params);
  const Expr codes = constant(Tensor(batch.size(), cfg.model.code_dim, 0.1));
  for (auto _ : state) {
    const Expr e = sum(energy(scene, {constant(scene.positions()), constant(scene.colors()),
                                      constant(batch.identification_attention()), codes},
                              p, cfg.model));
    auto g = derivative(e, p);
    benchmark::DoNotOptimize(g.front().value().data());
  }
}
BENCHMARK(BM_EnergyGradient)->Unit(benchmark::kMillisecond);

void BM_TrainStep(benchmark::State& state) {
  TrainConfig cfg;
  cfg.batch_size = static_cast<int>(state.range(0));
  cfg.use_kl = state.range(1) != 0;
  const auto params = init_params(1, cfg.model);
  const auto opt = diff::AdamState::zeros_like(params.tensors);
  const auto eligible = eligible_episodes(dataset(), cfg.context_mode);
  std::int64_t step = 0;
  for (auto _ : state) {
    auto r = train_step(params, opt, dataset(), eligible, cfg, step++);
    benchmark::DoNotOptimize(r.metrics.loss_ml);
  }
}
BENCHMARK(BM_TrainStep)->Args({8, 1})->Args({64, 1})->Args({64, 0})->Unit(benchmark::kMillisecond);

}  // namespace
BENCHMARK_MAIN();
