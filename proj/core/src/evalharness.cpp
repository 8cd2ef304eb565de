#include "cem/evalharness.hpp"
#include "cem/parallel.hpp"

#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <random>

namespace cem {

using namespace diff;

namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

double sigmoid(double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

// First state that generation writes (matches sampler::generate).
int first_generated_state(const Event& e) { return e.steps() == 2 ? 1 : generation_view(e).first_free_frame; }

double view_energy(const EventView& view, const std::vector<double>& logits, const std::vector<double>& code,
                   const EnergyParams& p) {
  SceneBatch s;
  s.add(view, 0);
  const EnergyArgs args{constant(s.positions()), constant(s.colors()), constant(Tensor::column(logits)),
                        constant(Tensor::row(code))};
  return energy(s, args, param_constants(p), p.config).value().item();
}

void check_model(const EnergyParams& params, const EvalConfig& cfg) {
  if (!cfg.expect) return;
  const auto& m = params.config;
  if (m.code_dim != cfg.expect->code_dim)
    throw EvalError("checkpoint code_dim " + std::to_string(m.code_dim) + " does not match expected " +
                    std::to_string(cfg.expect->code_dim));
  if (m.variant != cfg.expect->variant)
    throw EvalError(std::string("checkpoint variant ") + variant_name(m.variant) + " does not match expected " +
                    variant_name(cfg.expect->variant));
}

struct EventOutcome {
  Context context;
  double error;
  bool success;
};

void accumulate(MetricSums& s, const EventOutcome& o) {
  if (o.context == Context::Generation) {
    s.generation_error += o.error;
    ++s.generation_events;
  } else {
    s.attention_error += o.error;
    ++s.identification_events;
  }
  s.success_rate += o.success ? 1.0 : 0.0;
}

void finish(MetricSums& s) {
  const int total = s.generation_events + s.identification_events;
  if (s.generation_events) s.generation_error /= s.generation_events;
  if (s.identification_events) s.attention_error /= s.identification_events;
  if (total) s.success_rate /= total;
}

std::string sums_json(const MetricSums& s) {
  return "{\"generation_error\":" + fmt(s.generation_error) + ",\"attention_error\":" + fmt(s.attention_error) +
         ",\"success_rate\":" + fmt(s.success_rate) + ",\"generation_events\":" +
         std::to_string(s.generation_events) + ",\"identification_events\":" +
         std::to_string(s.identification_events);
}

std::uint64_t fnv1a(std::uint64_t h, const std::string& s) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return h;
}

}  // namespace

double generation_error(const ConceptSpec& spec, const Event& sampled, const Event& truth) {
  sampled.validate();
  truth.validate();
  if (sampled.steps() != truth.steps() || sampled.entities() != truth.entities())
    throw EventError("generation_error: sampled and ground-truth events differ in shape");
  const bool color = changes_color(spec);
  const int n = truth.entities();
  std::vector<int> chosen;
  for (int i = 0; i < n; ++i)
    if (truth.mask.empty() || truth.mask[static_cast<std::size_t>(i)]) chosen.push_back(i);
  if (chosen.empty())
    for (int i = 0; i < n; ++i) chosen.push_back(i);
  double total = 0;
  int count = 0;
  for (int t = first_generated_state(truth); t < truth.steps(); ++t) {
    for (int i : chosen) {
      const auto& a = sampled.states[static_cast<std::size_t>(t)][static_cast<std::size_t>(i)];
      const auto& b = truth.states[static_cast<std::size_t>(t)][static_cast<std::size_t>(i)];
      double d2 = 0;
      if (color) {
        for (int c = 0; c < 3; ++c) d2 += (a.color[c] - b.color[c]) * (a.color[c] - b.color[c]);
      } else {
        for (int c = 0; c < 2; ++c) d2 += (a.pos[c] - b.pos[c]) * (a.pos[c] - b.pos[c]);
      }
      total += std::sqrt(d2);
      ++count;
    }
  }
  return count ? total / count : 0.0;
}

double attention_error(std::span<const double> logits, std::span<const int> mask) {
  if (logits.size() != mask.size()) throw EventError("attention_error: logits and mask differ in length");
  if (mask.empty()) return 0.0;
  double total = 0;
  for (std::size_t i = 0; i < mask.size(); ++i) total += std::abs(sigmoid(logits[i]) - mask[i]);
  return total / static_cast<double>(mask.size());
}

EvalReport evaluate(const EnergyParams& params, std::span<const Episode> episodes, const EvalConfig& cfg) {
  check_model(params, cfg);
  cfg.sampler.validate();
  std::vector<std::vector<EventOutcome>> outcomes(episodes.size());
  parallel_for(episodes.size(), [&](std::size_t i) {
    const Episode& ep = episodes[i];
    const std::uint64_t s = mix_seed(cfg.seed, i);
    const ConceptCode code = infer_codes(ep.demos(), params, cfg.sampler, mix_seed(s, 0));
    const Channel channel = changes_color(ep.spec) ? Channel::Color : Channel::Position;
    std::uint64_t j = 0;
    for (const Event& e : ep.train()) {
      const std::uint64_t es = mix_seed(s, ++j);
      if (ep.spec.context == Context::Generation) {
        const auto logits = mask_logits(e.mask);
        const auto g = generate(e, logits, code.w_x, params, cfg.sampler, es, channel);
        outcomes[i].push_back({Context::Generation, generation_error(ep.spec, g.event, e),
                               verify_event(ep.spec, g.event, e.mask)});
      } else {
        const auto a = identify(e, code.w_a, params, cfg.sampler, es);
        std::vector<int> picked;
        for (double l : a.logits) picked.push_back(l > 0.0 ? 1 : 0);
        outcomes[i].push_back({Context::Identification, attention_error(a.logits, e.mask),
                               verify_event(ep.spec, e, picked)});
      }
    }
  });
  EvalReport r;
  for (std::size_t i = 0; i < episodes.size(); ++i) {
    auto& per = r.per_concept[episodes[i].spec.name()];
    for (const auto& o : outcomes[i]) {
      accumulate(r, o);
      accumulate(per, o);
    }
  }
  finish(r);
  for (auto& [_, s] : r.per_concept) finish(s);
  return r;
}

std::string report_to_json(const EvalReport& r) {
  std::string s = sums_json(r) + ",\"per_concept\":{";
  bool first = true;
  for (const auto& [name, m] : r.per_concept) {
    if (!first) s += ",";
    first = false;
    s += "\"" + name + "\":" + sums_json(m) + "}";
  }
  return s + "}}";
}

std::string training_key(std::span<const Episode> data, const TrainConfig& cfg) {
  std::uint64_t h = fnv1a(0xCBF29CE484222325ULL, config_to_string(cfg));
  for (const auto& e : data) h = fnv1a(h, episode_to_json(e));
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

CachedTraining train_cached(std::span<const Episode> data, const TrainConfig& cfg,
                            const std::filesystem::path& cache_dir,
                            const std::function<void(const StepMetrics&)>& on_step) {
  CachedTraining out;
  TrainOptions opts;
  opts.periodic_checkpoints = false;
  opts.on_step = on_step;
  if (!cache_dir.empty()) {
    std::filesystem::create_directories(cache_dir);
    const std::string key = training_key(data, cfg);
    out.path = cache_dir / (key + ".json");
    if (std::filesystem::exists(out.path)) {
      out.checkpoint = load_checkpoint(out.path);
      if (out.checkpoint.step == cfg.steps && out.checkpoint.params.config == cfg.model) {
        out.from_cache = true;
        return out;
      }
    }
    save_config(cache_dir / (key + ".cfg"), cfg);
    opts.log = cache_dir / (key + ".csv");
  }
  out.checkpoint = train(data, cfg, opts).checkpoint;
  if (!out.path.empty()) {
    const auto tmp = std::filesystem::path(out.path.string() + ".tmp");
    save_checkpoint(tmp, out.checkpoint);
    std::filesystem::rename(tmp, out.path);
  }
  return out;
}

std::vector<TransferRow> transfer_experiment(std::span<const Episode> train_data,
                                             std::span<const Episode> eval_data, const TrainConfig& base,
                                             const EvalConfig& eval, const std::filesystem::path& cache_dir) {
  std::vector<TransferRow> rows;
  rows.push_back({"untrained", evaluate(init_params(base.seed, base.model), eval_data, eval)});
  const std::pair<const char*, ContextMode> modes[] = {{"generation-only", ContextMode::GenerationOnly},
                                                       {"identification-only", ContextMode::IdentificationOnly},
                                                       {"both", ContextMode::Both}};
  for (const auto& [label, mode] : modes) {
    TrainConfig c = base;
    c.context_mode = mode;
    const auto t = train_cached(train_data, c, cache_dir);
    rows.push_back({label, evaluate(t.checkpoint.params, eval_data, eval)});
  }
  return rows;
}

std::vector<AblationRow> ablation(std::span<const Episode> train_data, std::span<const Episode> eval_data,
                                  const TrainConfig& base, const EvalConfig& eval,
                                  std::span<const int> sampler_steps, std::span<const Variant> variants,
                                  const std::filesystem::path& cache_dir) {
  std::vector<AblationRow> rows;
  for (int k : sampler_steps) {
    for (Variant v : variants) {
      TrainConfig c = base;
      c.sampler.steps = k;
      c.model.variant = v;
      EvalConfig e = eval;
      e.sampler.steps = k;
      e.expect.reset();
      const auto t = train_cached(train_data, c, cache_dir);
      rows.push_back({"K=" + std::to_string(k) + " " + variant_name(v), c,
                      evaluate(t.checkpoint.params, eval_data, e)});
    }
  }
  return rows;
}

const char* energy_kind_name(EnergyKind k) {
  switch (k) {
    case EnergyKind::Positive: return "positive";
    case EnergyKind::Sampled: return "sampled";
    case EnergyKind::Random: return "random";
  }
  return "?";
}

std::vector<EnergyRecord> energy_histograms(const EnergyParams& params, std::span<const Episode> episodes,
                                            const EvalConfig& cfg) {
  check_model(params, cfg);
  std::vector<std::vector<EnergyRecord>> per(episodes.size());
  parallel_for(episodes.size(), [&](std::size_t i) {
    const Episode& ep = episodes[i];
    const std::uint64_t s = mix_seed(cfg.seed, i);
    const ConceptCode code = infer_codes(ep.demos(), params, cfg.sampler, mix_seed(s, 0));
    const bool gen = ep.spec.context == Context::Generation;
    const Channel channel = changes_color(ep.spec) ? Channel::Color : Channel::Position;
    const std::string name = ep.spec.name();
    auto& out = per[i];
    auto record = [&](EnergyKind k, double e) { out.push_back({k, name, ep.spec.context, e}); };
    for (const Event& d : ep.demos()) {
      const auto logits = mask_logits(d.mask);
      record(EnergyKind::Positive, gen ? view_energy(generation_view(d), logits, code.w_x, params)
                                       : view_energy(identification_view(d), logits, code.w_a, params));
    }
    std::mt19937_64 rng(mix_seed(s, 0xEE));
    std::uniform_real_distribution<double> pos(-1.0, 1.0), col(0.0, 1.0);
    std::uint64_t j = 0;
    for (const Event& e : ep.train()) {
      const std::uint64_t es = mix_seed(s, ++j);
      const auto logits = mask_logits(e.mask);
      if (gen) {
        const auto g = generate(e, logits, code.w_x, params, cfg.sampler, es, channel);
        record(EnergyKind::Sampled, view_energy(generation_view(g.event), logits, code.w_x, params));
        Event r = e;
        for (int t = first_generated_state(e); t < e.steps(); ++t)
          for (auto& ent : r.states[static_cast<std::size_t>(t)]) {
            if (channel == Channel::Position) ent.pos = {pos(rng), pos(rng)};
            else ent.color = {col(rng), col(rng), col(rng)};
          }
        record(EnergyKind::Random, view_energy(generation_view(r), logits, code.w_x, params));
      } else {
        const auto a = identify(e, code.w_a, params, cfg.sampler, es);
        record(EnergyKind::Sampled, view_energy(identification_view(e), a.logits, code.w_a, params));
        const auto noise = gaussian(e.entities(), 1, mix_seed(es, 0xEE)).to_vector();
        record(EnergyKind::Random, view_energy(identification_view(e), noise, code.w_a, params));
      }
    }
  });
  std::vector<EnergyRecord> all;
  for (auto& v : per) all.insert(all.end(), v.begin(), v.end());
  return all;
}

std::string energy_csv(std::span<const EnergyRecord> records) {
  std::string s = "kind,concept,context,energy\n";
  for (const auto& r : records)
    s += std::string(energy_kind_name(r.kind)) + "," + r.concept_name + "," + context_name(r.context) + "," +
         fmt(r.energy) + "\n";
  return s;
}

double median_energy(std::span<const EnergyRecord> records, EnergyKind kind) {
  std::vector<double> v;
  for (const auto& r : records)
    if (r.kind == kind) v.push_back(r.energy);
  if (v.empty()) return std::nan("");
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

CodeProjection code_projection(std::span<const LabeledCode> codes) {
  CodeProjection out;
  if (codes.empty()) return out;
  const auto dim = static_cast<Index>(codes.front().code.w_x.size());
  const auto n = static_cast<Index>(codes.size()) * 2;
  Eigen::MatrixXd data(n, dim);
  for (std::size_t i = 0; i < codes.size(); ++i) {
    const auto& c = codes[i].code;
    if (static_cast<Index>(c.w_x.size()) != dim || static_cast<Index>(c.w_a.size()) != dim)
      throw std::invalid_argument("code_projection: codes differ in dimension");
    for (Index d = 0; d < dim; ++d) {
      data(2 * static_cast<Index>(i), d) = c.w_x[static_cast<std::size_t>(d)];
      data(2 * static_cast<Index>(i) + 1, d) = c.w_a[static_cast<std::size_t>(d)];
    }
  }
  const Eigen::RowVectorXd mean = data.colwise().mean();
  const Eigen::MatrixXd centered = data.rowwise() - mean;
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(centered, Eigen::ComputeThinV);
  const Index k = std::min<Index>(2, svd.matrixV().cols());
  Eigen::MatrixXd axes = Eigen::MatrixXd::Zero(dim, 2);
  for (Index c = 0; c < k; ++c) {
    Eigen::VectorXd v = svd.matrixV().col(c);
    Index arg;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;  // deterministic sign
    axes.col(c) = v;
  }
  const Eigen::MatrixXd coords = centered * axes;
  out.residual = (centered - coords * axes.transpose()).squaredNorm();
  out.mean.assign(mean.data(), mean.data() + dim);
  for (Index c = 0; c < 2; ++c) out.components.emplace_back(axes.col(c).data(), axes.col(c).data() + dim);
  for (Index r = 0; r < n; ++r)
    out.points.push_back({codes[static_cast<std::size_t>(r / 2)].label, r % 2 ? "w_a" : "w_x", coords(r, 0),
                          coords(r, 1)});
  return out;
}

std::string projection_csv(const CodeProjection& p) {
  std::string s = "label,role,x,y\n";
  for (const auto& pt : p.points) s += pt.label + "," + pt.role + "," + fmt(pt.x) + "," + fmt(pt.y) + "\n";
  return s;
}

double code_sharing_accuracy(std::span<const LabeledCode> codes) {
  if (codes.empty()) return 0.0;
  auto dist2 = [](const std::vector<double>& a, const std::vector<double>& b) {
    double d = 0;
    for (std::size_t i = 0; i < a.size(); ++i) d += (a[i] - b[i]) * (a[i] - b[i]);
    return d;
  };
  int hits = 0;
  for (const auto& q : codes) {
    std::size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < codes.size(); ++j) {
      const double d = dist2(q.code.w_a, codes[j].code.w_x);
      if (d < best_d) {
        best_d = d;
        best = j;
      }
    }
    hits += codes[best].label == q.label ? 1 : 0;
  }
  return static_cast<double>(hits) / static_cast<double>(codes.size());
}

}  // namespace cem
