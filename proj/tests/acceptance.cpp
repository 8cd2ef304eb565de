// Acceptance run: one PASS/FAIL line per criterion A1..A7. Trainings are cached under
// --cache so a rerun only re-evaluates.

#include "cem/evalharness.hpp"
#include "cem/reenact.hpp"
#include "cem/trainer.hpp"
#include "fd_oracle.hpp"
#include "test_support.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <numeric>
#include <set>
#include <sstream>

using namespace cem;
using namespace cem::diff;
using cem::testing::numeric_gradient;
using cem::testing::random_event;
using cem::testing::random_tensor;
using cem::testing::relative_error;
namespace fs = std::filesystem;

namespace {

// Pinned tolerances and budgets.
constexpr int kFuzzInputs = 1000;
constexpr double kPermutationTol = 1e-10;
constexpr double kGradientTol = 1e-5;
constexpr double kMetaGradientTol = 1e-3;
constexpr double kLn2Tol = 1e-12;
constexpr double kQuadraticOracleTol = 1e-10;
constexpr double kA2MaxError = 0.05;
constexpr double kA2MinUntrained = 0.4;
constexpr double kA3Fraction = 1.0 / 3.0;
constexpr double kA4NoKlMinRatio = 5.0;
constexpr double kA4KlMaxRatio = 2.0;
constexpr int kA5Seeds = 3;
constexpr double kA5MinRelational = 0.5;
constexpr int kA6Scenes = 10;
constexpr int kA6MinSuccesses = 8;
constexpr double kA6EnergyFraction = 0.2;
constexpr double kA6RegulationTol = 0.05;

constexpr int kTrainEpisodes = 4000;
constexpr int kEvalEpisodes = 100;

struct Outcome {
  bool pass = true;
  std::string detail;
  void require(bool ok, const std::string& what) {
    pass = pass && ok;
    detail += (detail.empty() ? "" : "; ") + what + (ok ? "" : " [x]");
  }
};

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

struct Run {
  fs::path cache;
  bool verbose = false;
};

void progress(const Run& ctx, const std::string& msg) {
  if (ctx.verbose) std::cerr << "[acceptance] " << msg << std::endl;
}

std::function<void(const StepMetrics&)> reporter(const Run& ctx, const std::string& tag) {
  if (!ctx.verbose) return {};
  return [tag](const StepMetrics& m) {
    if ((m.step + 1) % 250 == 0)
      std::cerr << "[acceptance] " << tag << " step " << m.step + 1 << " loss_ml " << fmt(m.loss_ml) << std::endl;
  };
}

TrainConfig desk() { return TrainConfig::profile_config("desk"); }

EnergyParams trained(const Run& ctx, std::span<const Episode> data, const TrainConfig& cfg, const std::string& tag) {
  progress(ctx, "training " + tag + " (" + std::to_string(cfg.steps) + " steps)");
  auto r = train_cached(data, cfg, ctx.cache, reporter(ctx, tag));
  progress(ctx, tag + (r.from_cache ? " reused from " : " written to ") + r.path.string());
  return r.checkpoint.params;
}

// Absolute-position episodes shared by A2, A3 and A4.
const std::vector<Episode>& position_train() {
  static const auto d = generate_dataset(parse_concepts("absolute_position"), kTrainEpisodes, 0);
  return d;
}
const std::vector<Episode>& position_eval() {
  static const auto d = generate_dataset(parse_concepts("absolute_position"), kEvalEpisodes, held_out_seed(0));
  return d;
}

// ---------------------------------------------------------------------------------------
// A1: property suite.

ModelConfig small_model(Variant v = Variant::Relational) {
  ModelConfig m;
  m.hidden = 8;
  m.code_dim = 4;
  m.variant = v;
  return m;
}

std::vector<double> random_vector(std::size_t n, std::mt19937_64& rng, double lo = -1, double hi = 1) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(n);
  for (double& x : v) x = u(rng);
  return v;
}

Outcome a1() {
  Outcome o;
  std::mt19937_64 rng(101);

  bool nonneg = true;
  for (int trial = 0; trial < kFuzzInputs; ++trial) {
    const Variant v = trial % 2 ? Variant::Unary : Variant::Relational;
    const auto params = init_params(static_cast<std::uint64_t>(trial), small_model(v));
    const int n = 2 + trial % 7;
    const Event e = random_event(rng, n, 1 + trial % 3, 1.5);
    const double en = energy(e, random_vector(static_cast<std::size_t>(n), rng, -10, 10), random_vector(4, rng, -5, 5),
                             params).value().item();
    nonneg = nonneg && en >= 0.0 && std::isfinite(en);
  }
  o.require(nonneg, "E>=0 on " + std::to_string(kFuzzInputs) + " fuzzed inputs");

  double worst_perm = 0;
  for (Variant v : {Variant::Relational, Variant::Unary}) {
    const auto params = init_params(4, small_model(v));
    for (int trial = 0; trial < 20; ++trial) {
      const int n = 2 + trial % 7;
      const Event e = random_event(rng, n, 2);
      const auto att = random_vector(static_cast<std::size_t>(n), rng);
      const auto w = random_vector(4, rng);
      std::vector<int> perm(static_cast<std::size_t>(n));
      std::iota(perm.begin(), perm.end(), 0);
      std::shuffle(perm.begin(), perm.end(), rng);
      Event pe = e;
      std::vector<double> patt(att.size());
      for (int i = 0; i < n; ++i) {
        const auto src = static_cast<std::size_t>(perm[static_cast<std::size_t>(i)]);
        for (std::size_t t = 0; t < e.states.size(); ++t) pe.states[t][static_cast<std::size_t>(i)] = e.states[t][src];
        patt[static_cast<std::size_t>(i)] = att[src];
      }
      worst_perm = std::max(worst_perm, std::abs(energy(e, att, w, params).value().item() -
                                                 energy(pe, patt, w, params).value().item()));
    }
  }
  o.require(worst_perm < kPermutationTol, "permutation |dE|=" + fmt(worst_perm));

  double worst_grad = 0;
  for (Variant v : {Variant::Relational, Variant::Unary}) {
    const auto model = small_model(v);
    const auto params = init_params(5, model);
    SceneBatch scene;
    scene.add(generation_view(random_event(rng, 3, 2)), 0);
    scene.add(generation_view(random_event(rng, 4, 2)), 1);
    const Expr pos = input(scene.positions());
    const Expr col = input(scene.colors());
    const Expr att = input(random_tensor(scene.attention_rows(), 1, rng, -2, 2));
    const Expr codes = input(random_tensor(2, 4, rng));
    const ParamExprs p = param_inputs(params);
    const Expr root = sum(energy(scene, {pos, col, att, codes}, p, model));
    std::vector<Expr> wrt{pos, col, att, codes};
    wrt.insert(wrt.end(), p.begin(), p.end());
    const auto grads = derivative(root, wrt);
    for (std::size_t k = 0; k < wrt.size(); ++k) {
      const auto f = [&](const Tensor& val) {
        Bindings b{{wrt[k].get(), val}};
        return evaluate(root, b).item();
      };
      worst_grad = std::max(worst_grad, relative_error(grads[k].value(), numeric_gradient(f, wrt[k].value()), 1e-9));
    }
  }
  o.require(worst_grad < kGradientTol, "first-order grad rel.err=" + fmt(worst_grad));

  {
    const auto model = small_model();
    const auto params = init_params(10, model);
    Event e = random_event(rng, 2, 2, 0.5);
    SceneBatch scene;
    scene.add(generation_view(e), 0, &e.states[0]);
    const Tensor att = Tensor::column({1.0, -0.5});
    const Tensor code = random_tensor(1, 4, rng);
    const Tensor probe = random_tensor(2, 2, rng);
    SamplerConfig cfg;
    cfg.steps = 3;
    const auto loss_of = [&](const ParamExprs& p, bool graph) {
      auto r = langevin_x(scene, Channel::Position, constant(att), constant(code), p, model, cfg, 77, graph);
      return sum(mul(r.sample, constant(probe)));
    };
    const ParamExprs inputs = param_inputs(params);
    const auto grads = derivative(loss_of(inputs, true), inputs);
    double worst = 0;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      const auto f = [&](const Tensor& v) {
        auto q = params;
        q.tensors[i] = v;
        return loss_of(param_constants(q), false).value().item();
      };
      worst = std::max(worst, relative_error(grads[i].value(), numeric_gradient(f, params.tensors[i]), 1e-8));
    }
    o.require(worst < kMetaGradientTol, "meta-grad rel.err=" + fmt(worst));
  }

  const double ln2 = contrastive_loss(constant(Tensor::scalar(1.0)), constant(Tensor::scalar(1.0))).value().item();
  o.require(std::abs(ln2 - std::log(2.0)) < kLn2Tol, "softplus(0)-ln2=" + fmt(ln2 - std::log(2.0)));

  {
    // A stop-gradient negative drawn by the live sampler must leave exactly the parameter
    // gradient of a constant negative: no derivative leaks back through the sample.
    const auto model = small_model();
    const auto params = init_params(12, model);
    const Event e = random_event(rng, 3, 2);
    SceneBatch scene;
    scene.add(identification_view(e), 0);
    const ParamExprs p = param_inputs(params);
    const Expr w = constant(random_tensor(1, 4, rng));
    const Expr pos = constant(scene.positions()), col = constant(scene.colors());
    const Expr e_pos = energy(scene, {pos, col, constant(Tensor::column(mask_logits(e.mask))), w}, p, model);
    SamplerConfig sc;
    sc.steps = 3;
    const auto r = langevin_a(scene, w, p, model, sc, 4, true);
    const auto live = derivative(sum(contrastive_loss(e_pos, energy(scene, {pos, col, stop_gradient(r.sample), w}, p, model))), p);
    const auto frozen = derivative(
        sum(contrastive_loss(e_pos, energy(scene, {pos, col, constant(r.sample.value()), w}, p, model))), p);
    double audit = 0;
    for (std::size_t i = 0; i < p.size(); ++i)
      audit = std::max(audit, (live[i].value().mat() - frozen[i].value().mat()).cwiseAbs().maxCoeff());
    o.require(audit == 0.0, "stop-gradient audit=" + fmt(audit));
  }

  {
    const Tensor x0 = random_tensor(4, 3, rng);
    const Tensor c = random_tensor(4, 3, rng);
    const double alpha = 0.1;
    SamplerConfig cfg;
    cfg.steps = 10;
    cfg.step_size = alpha;
    cfg.noise = false;
    const auto r = langevin(constant(x0), [&](const Expr& v) { return sum(square(sub(v, constant(c)))); }, alpha, cfg,
                            3, false);
    double worst = 0;
    for (int s = 0; s <= cfg.steps; ++s)
      for (Index i = 0; i < x0.size(); ++i)
        worst = std::max(worst, std::abs(r.iterates[static_cast<std::size_t>(s)][i] -
                                         (c[i] + std::pow(1.0 - alpha, s) * (x0[i] - c[i]))));
    o.require(worst < kQuadraticOracleTol, "Langevin quadratic oracle err=" + fmt(worst));
  }
  return o;
}

// ---------------------------------------------------------------------------------------
// A2..A6: desk-scale trainings.

Outcome a2(const Run& ctx) {
  Outcome o;
  const EvalConfig ec;
  const auto untrained = evaluate(init_params(desk().seed, desk().model), position_eval(), ec);
  const auto model = trained(ctx, position_train(), desk(), "A2 both");
  const auto r = evaluate(model, position_eval(), ec);
  o.require(r.generation_error <= kA2MaxError, "generation_error=" + fmt(r.generation_error));
  o.require(r.attention_error <= kA2MaxError, "attention_error=" + fmt(r.attention_error));
  o.require(untrained.generation_error >= kA2MinUntrained, "untrained generation_error=" + fmt(untrained.generation_error));
  o.require(untrained.attention_error >= kA2MinUntrained, "untrained attention_error=" + fmt(untrained.attention_error));
  return o;
}

Outcome a3(const Run& ctx) {
  Outcome o;
  progress(ctx, "transfer trainings");
  const auto rows = transfer_experiment(position_train(), position_eval(), desk(), EvalConfig{}, ctx.cache);
  std::map<std::string, EvalReport> by;
  for (const auto& r : rows) by[r.label] = r.report;
  const auto& u = by.at("untrained");
  const auto& gen = by.at("generation-only");
  const auto& ident = by.at("identification-only");
  const auto& both = by.at("both");
  o.require(ident.generation_error < kA3Fraction * u.generation_error,
            "ident-only generation_error=" + fmt(ident.generation_error) + " vs untrained " + fmt(u.generation_error));
  o.require(gen.attention_error < kA3Fraction * u.attention_error,
            "gen-only attention_error=" + fmt(gen.attention_error) + " vs untrained " + fmt(u.attention_error));
  o.require(both.generation_error <= gen.generation_error,
            "both generation_error=" + fmt(both.generation_error) + " <= gen-only " + fmt(gen.generation_error));
  o.require(both.attention_error <= ident.attention_error,
            "both attention_error=" + fmt(both.attention_error) + " <= ident-only " + fmt(ident.attention_error));
  return o;
}

Outcome a4(const Run& ctx) {
  Outcome o;
  TrainConfig nokl = desk();
  nokl.use_kl = false;
  for (const auto& [cfg, tag] : {std::pair{desk(), std::string("KL")}, std::pair{nokl, std::string("no-KL")}}) {
    const auto model = trained(ctx, position_train(), cfg, "A4 " + tag);
    const auto rec = energy_histograms(model, position_eval(), EvalConfig{});
    const double pos = median_energy(rec, EnergyKind::Positive);
    const double smp = median_energy(rec, EnergyKind::Sampled);
    const double rnd = median_energy(rec, EnergyKind::Random);
    const double ratio = smp / pos;
    if (cfg.use_kl) o.require(ratio <= kA4KlMaxRatio, "KL sampled/positive=" + fmt(ratio));
    else o.require(ratio >= kA4NoKlMinRatio, "no-KL sampled/positive=" + fmt(ratio));
    o.require(rnd > pos, tag + " random median " + fmt(rnd) + " > positive " + fmt(pos));
  }
  return o;
}

Outcome a5(const Run& ctx) {
  Outcome o;
  const auto filters = parse_concepts("shape:line");
  int wins = 0;
  double relational_sum = 0;
  std::string rates;
  for (int s = 0; s < kA5Seeds; ++s) {
    const auto seed = static_cast<std::uint64_t>(s);
    const auto train = generate_dataset(filters, kTrainEpisodes, seed, Context::Generation);
    const auto eval = generate_dataset(filters, kEvalEpisodes, held_out_seed(seed), Context::Generation);
    double rate[2];
    for (Variant v : {Variant::Relational, Variant::Unary}) {
      TrainConfig cfg = desk();
      cfg.seed = seed;
      cfg.context_mode = ContextMode::GenerationOnly;
      cfg.model.variant = v;
      const auto model = trained(ctx, train, cfg, std::string("A5 ") + variant_name(v) + " seed " + std::to_string(s));
      EvalConfig ec;
      ec.seed = seed;
      rate[v == Variant::Unary] = evaluate(model, eval, ec).success_rate;
    }
    wins += rate[1] < rate[0];
    relational_sum += rate[0];
    rates += (s ? " " : "") + fmt(rate[0]) + "/" + fmt(rate[1]);
  }
  o.require(2 * wins > kA5Seeds, "unary < relational on " + std::to_string(wins) + "/" + std::to_string(kA5Seeds) +
                                     " seeds (relational/unary " + rates + ")");
  const double mean = relational_sum / kA5Seeds;
  o.require(mean >= kA5MinRelational, "relational success_rate=" + fmt(mean));
  return o;
}

Outcome a6(const Run& ctx) {
  Outcome o;
  {
    MPCConfig cfg;
    const Tensor target = Tensor::row({0.5, -0.3});
    const TerminalCost bowl = [target](const Expr& p) { return sum(square(sub(p, constant(target)))); };
    PointMassState s;
    s.pos = {{-0.8, 0.9}};
    s.vel = {{0.0, 0.0}};
    const auto r = mpc_rollout(s, bowl, cfg);
    const auto& p = r.states.back().pos[0];
    const double miss = std::hypot(p[0] - 0.5, p[1] + 0.3);
    o.require(miss <= kA6RegulationTol, "quadratic regulation miss=" + fmt(miss));
  }
  const auto filters = parse_concepts("placement:between");
  const auto train = generate_dataset(filters, kTrainEpisodes, 0, Context::Generation);
  TrainConfig cfg = desk();
  cfg.context_mode = ContextMode::GenerationOnly;
  const auto model = trained(ctx, train, cfg, "A6 between");
  const auto scenes = generate_dataset(filters, kA6Scenes, held_out_seed(0), Context::Generation);
  int ok = 0;
  std::string ratios;
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    const Episode& ep = scenes[i];
    const auto code = infer_codes(ep.demos(), model, EvalConfig::annealed(), mix_seed(0, i));
    const Event& scene = ep.train()[0];
    std::vector<int> controlled;
    for (int k = 0; k < scene.entities(); ++k)
      if (scene.mask[static_cast<std::size_t>(k)]) controlled.push_back(k);
    const auto cost = energy_cost(scene, controlled, mask_logits(scene.mask), code.w_x, model);
    const auto r = mpc_rollout(rest_state(scene.states.front(), controlled), cost, MPCConfig{});
    const double ratio = r.costs.back() / r.initial_cost;
    ok += ratio <= kA6EnergyFraction;
    ratios += (i ? " " : "") + fmt(ratio);
  }
  o.require(ok >= kA6MinSuccesses, std::to_string(ok) + "/" + std::to_string(kA6Scenes) +
                                        " scenes reach <=20% energy (final/initial " + ratios + ")");
  return o;
}

// ---------------------------------------------------------------------------------------
// A7: determinism and formats.

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Outcome a7() {
  Outcome o;
  const auto dir = fs::temp_directory_path() / "cem_acceptance_a7";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const auto filters = parse_concepts("all");
  const auto data = generate_dataset(filters, 40, 21);
  save_dataset(dir / "a.jsonl", data);
  save_dataset(dir / "b.jsonl", generate_dataset(filters, 40, 21));
  o.require(slurp(dir / "a.jsonl") == slurp(dir / "b.jsonl"), "dataset bytes");
  o.require(load_dataset(dir / "a.jsonl") == data, "dataset round trip");

  TrainConfig cfg;
  cfg.steps = 3;
  cfg.batch_size = 4;
  cfg.model.hidden = 8;
  cfg.model.code_dim = 4;
  cfg.sampler.steps = 2;
  cfg.seed = 3;
  for (const char* run : {"r1", "r2"}) {
    TrainOptions opts;
    opts.checkpoint = dir / (std::string(run) + ".json");
    opts.log = dir / (std::string(run) + ".csv");
    opts.periodic_checkpoints = false;
    train(data, cfg, opts);
  }
  o.require(slurp(dir / "r1.json") == slurp(dir / "r2.json"), "checkpoint bytes");
  o.require(slurp(dir / "r1.csv") == slurp(dir / "r2.csv"), "metrics bytes");
  const auto ck = load_checkpoint(dir / "r1.json");
  o.require(checkpoint_to_string(checkpoint_from_string(checkpoint_to_string(ck))) == checkpoint_to_string(ck) &&
                checkpoint_from_string(checkpoint_to_string(ck)).params == ck.params,
            "checkpoint round trip");
  fs::remove_all(dir);
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria A1-A7", "cem_acceptance"};
  Run ctx;
  std::string cache = "acceptance_cache";
  std::string only;
  app.add_option("--cache", cache, "Directory for cached trainings")->capture_default_str();
  app.add_option("--only", only, "Comma list of criteria to run (default: all)");
  app.add_flag("-v,--verbose", ctx.verbose, "Training progress on stderr");
  CLI11_PARSE(app, argc, argv);
  ctx.cache = cache;
  fs::create_directories(ctx.cache);

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"A1", [] { return a1(); }},
      {"A2", [&] { return a2(ctx); }},
      {"A3", [&] { return a3(ctx); }},
      {"A4", [&] { return a4(ctx); }},
      {"A5", [&] { return a5(ctx); }},
      {"A6", [&] { return a6(ctx); }},
      {"A7", [] { return a7(); }},
  };
  std::set<std::string> selected;
  std::stringstream ss(only);
  for (std::string item; std::getline(ss, item, ',');)
    if (!item.empty()) selected.insert(item);

  bool all = true;
  for (const auto& [id, run] : criteria) {
    if (!selected.empty() && !selected.count(id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome r;
    try {
      r = run();
    } catch (const std::exception& e) {
      r.pass = false;
      r.detail = std::string("error: ") + e.what();
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::cout << id << " " << (r.pass ? "PASS" : "FAIL") << "  " << r.detail << "  (" << fmt(secs) << " s)"
              << std::endl;
    all = all && r.pass;
  }
  return all ? 0 : 1;
}
