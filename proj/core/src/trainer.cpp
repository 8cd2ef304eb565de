#include "cem/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <random>
#include <sstream>

namespace cem {

using namespace diff;

namespace {

constexpr std::uint64_t kBatchStream = 0xBA7C;
constexpr std::uint64_t kSamplerStream = 0x5A3B;

std::string fmt(double v, const char* spec = "%.17g") {
  char buf[40];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

bool all_finite(const std::vector<Tensor>& ts) {
  for (const auto& t : ts)
    if (!t.all_finite()) return false;
  return true;
}

std::filesystem::path periodic_path(const std::filesystem::path& final_path, std::int64_t step) {
  auto p = final_path;
  char buf[32];
  std::snprintf(buf, sizeof buf, ".step%06lld", static_cast<long long>(step));
  p.replace_filename(final_path.stem().string() + buf + final_path.extension().string());
  return p;
}

}  // namespace

const char* context_mode_name(ContextMode m) {
  switch (m) {
    case ContextMode::Both: return "both";
    case ContextMode::GenerationOnly: return "gen";
    case ContextMode::IdentificationOnly: return "ident";
  }
  return "both";
}

std::optional<ContextMode> parse_context_mode(const std::string& s) {
  if (s == "both") return ContextMode::Both;
  if (s == "gen" || s == "generation" || s == "generation_only") return ContextMode::GenerationOnly;
  if (s == "ident" || s == "identification" || s == "identification_only") return ContextMode::IdentificationOnly;
  return std::nullopt;
}

TrainConfig TrainConfig::profile_config(const std::string& name) {
  TrainConfig c;
  if (name == "desk") return c;
  if (name == "paper") {
    c.profile = "paper";
    c.steps = 10000;
    c.batch_size = 1024;
    c.model.hidden = 128;
    return c;
  }
  throw std::invalid_argument("unknown training profile '" + name + "' (expected desk or paper)");
}

void TrainConfig::validate() const {
  if (steps < 0) throw std::invalid_argument("steps must be >= 0");
  if (batch_size <= 0) throw std::invalid_argument("batch_size must be positive");
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw std::invalid_argument("lr must be a finite value >= 0");
  if (!(clip_norm > 0.0)) throw std::invalid_argument("clip_norm must be positive");
  if (checkpoint_every <= 0) throw std::invalid_argument("checkpoint_every must be positive");
  param_layout(model);
  sampler.validate();
}

bool TrainConfig::operator==(const TrainConfig& o) const { return config_to_string(*this) == config_to_string(o); }

std::string config_to_string(const TrainConfig& c) {
  std::ostringstream out;
  out << "profile=" << c.profile << '\n'
      << "steps=" << c.steps << '\n'
      << "batch_size=" << c.batch_size << '\n'
      << "lr=" << fmt(c.lr) << '\n'
      << "clip_norm=" << fmt(c.clip_norm) << '\n'
      << "checkpoint_every=" << c.checkpoint_every << '\n'
      << "seed=" << c.seed << '\n'
      << "context_mode=" << context_mode_name(c.context_mode) << '\n'
      << "use_kl=" << (c.use_kl ? "true" : "false") << '\n'
      << "hidden=" << c.model.hidden << '\n'
      << "layers=" << c.model.layers << '\n'
      << "code_dim=" << c.model.code_dim << '\n'
      << "relation_dim=" << c.model.relation_dim << '\n'
      << "variant=" << variant_name(c.model.variant) << '\n'
      << "sampler_steps=" << c.sampler.steps << '\n'
      << "step_size=" << fmt(c.sampler.step_size) << '\n'
      << "noise=" << (c.sampler.noise ? "true" : "false") << '\n'
      << "anneal=" << (c.sampler.anneal ? "true" : "false") << '\n';
  if (c.sampler.step_x) out << "step_x=" << fmt(*c.sampler.step_x) << '\n';
  if (c.sampler.step_a) out << "step_a=" << fmt(*c.sampler.step_a) << '\n';
  if (c.sampler.step_w) out << "step_w=" << fmt(*c.sampler.step_w) << '\n';
  return out.str();
}

TrainConfig config_from_string(const std::string& text) {
  TrainConfig c;
  std::istringstream in(text);
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    ++n;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("config line " + std::to_string(n) + ": expected key=value");
    auto trim = [](std::string s) {
      const auto a = s.find_first_not_of(" \t\r"), b = s.find_last_not_of(" \t\r");
      return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    auto bad = [&](const char* what) {
      return std::invalid_argument("config line " + std::to_string(n) + " (" + key + "): " + what);
    };
    auto as_int = [&]() {
      std::size_t pos = 0;
      int v = 0;
      try {
        v = std::stoi(value, &pos);
      } catch (const std::exception&) {
        throw bad("expected an integer");
      }
      if (pos != value.size()) throw bad("expected an integer");
      return v;
    };
    auto as_double = [&]() {
      std::size_t pos = 0;
      double v = 0;
      try {
        v = std::stod(value, &pos);
      } catch (const std::exception&) {
        throw bad("expected a number");
      }
      if (pos != value.size()) throw bad("expected a number");
      return v;
    };
    auto as_bool = [&]() {
      if (value == "true" || value == "1") return true;
      if (value == "false" || value == "0") return false;
      throw bad("expected true or false");
    };
    if (key == "profile") c.profile = value;
    else if (key == "steps") c.steps = as_int();
    else if (key == "batch_size") c.batch_size = as_int();
    else if (key == "lr") c.lr = as_double();
    else if (key == "clip_norm") c.clip_norm = as_double();
    else if (key == "checkpoint_every") c.checkpoint_every = as_int();
    else if (key == "seed") {
      try {
        c.seed = std::stoull(value);
      } catch (const std::exception&) {
        throw bad("expected an unsigned integer");
      }
    } else if (key == "context_mode") {
      const auto m = parse_context_mode(value);
      if (!m) throw bad("expected both, gen or ident");
      c.context_mode = *m;
    } else if (key == "use_kl") c.use_kl = as_bool();
    else if (key == "hidden") c.model.hidden = as_int();
    else if (key == "layers") c.model.layers = as_int();
    else if (key == "code_dim") c.model.code_dim = as_int();
    else if (key == "relation_dim") c.model.relation_dim = as_int();
    else if (key == "variant") {
      try {
        c.model.variant = parse_variant(value);
      } catch (const std::invalid_argument&) {
        throw bad("expected relational or unary");
      }
    } else if (key == "sampler_steps") c.sampler.steps = as_int();
    else if (key == "step_size") c.sampler.step_size = as_double();
    else if (key == "noise") c.sampler.noise = as_bool();
    else if (key == "anneal") c.sampler.anneal = as_bool();
    else if (key == "step_x") c.sampler.step_x = as_double();
    else if (key == "step_a") c.sampler.step_a = as_double();
    else if (key == "step_w") c.sampler.step_w = as_double();
    else throw bad("unknown key");
  }
  c.validate();
  return c;
}

void save_config(const std::filesystem::path& path, const TrainConfig& cfg) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write config " + path.string());
  out << config_to_string(cfg);
}

TrainConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return config_from_string(ss.str());
}

std::vector<std::size_t> eligible_episodes(std::span<const Episode> data, ContextMode mode) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto ctx = data[i].spec.context;
    if (mode == ContextMode::Both || (mode == ContextMode::GenerationOnly && ctx == Context::Generation) ||
        (mode == ContextMode::IdentificationOnly && ctx == Context::Identification))
      out.push_back(i);
  }
  return out;
}

LossConfig loss_config(const TrainConfig& cfg) {
  LossConfig l;
  l.sampler = cfg.sampler;
  l.use_kl = cfg.use_kl;
  l.x_branch = cfg.context_mode != ContextMode::IdentificationOnly;
  l.a_branch = cfg.context_mode != ContextMode::GenerationOnly;
  return l;
}

EpisodeBatch sample_batch(std::span<const Episode> data, std::span<const std::size_t> eligible,
                          const TrainConfig& cfg, std::int64_t step) {
  if (eligible.empty()) throw std::invalid_argument("no training episodes for context mode " +
                                                    std::string(context_mode_name(cfg.context_mode)));
  std::mt19937_64 rng(mix_seed(mix_seed(cfg.seed, kBatchStream), static_cast<std::uint64_t>(step)));
  std::uniform_int_distribution<std::size_t> pick(0, eligible.size() - 1);
  std::uniform_int_distribution<int> demo(0, kDemoEvents - 1), train(0, kTrainEvents - 1);
  EpisodeBatch batch;
  for (int b = 0; b < cfg.batch_size; ++b) {
    const auto& ep = data[eligible[pick(rng)]];
    const int d = demo(rng);
    batch.add(ep, d, train(rng));
  }
  return batch;
}

StepResult train_step(const EnergyParams& params, const AdamState& optimizer, std::span<const Episode> data,
                      std::span<const std::size_t> eligible, const TrainConfig& cfg, std::int64_t step) {
  StepResult out{params, optimizer, {}};
  out.metrics.step = step;
  const EpisodeBatch batch = sample_batch(data, eligible, cfg, step);
  const ParamExprs p = param_inputs(params);
  LossBundle loss;
  try {
    loss = joint_loss(batch, p, cfg.model, loss_config(cfg),
                      mix_seed(mix_seed(cfg.seed, kSamplerStream), static_cast<std::uint64_t>(step)));
  } catch (const DivergenceError&) {
    out.metrics.non_finite = true;
    return out;
  }
  auto& m = out.metrics;
  m.loss_ml = loss.loss_ml.value().item();
  m.loss_kl = loss.loss_kl.value().item();
  m.e_pos_x = loss.e_pos_x;
  m.e_neg_x = loss.e_neg_x;
  m.e_pos_a = loss.e_pos_a;
  m.e_neg_a = loss.e_neg_a;
  if (!std::isfinite(loss.total.value().item())) {
    m.non_finite = true;
    return out;
  }
  std::vector<Tensor> grads;
  for (const auto& g : derivative(loss.total, p)) grads.push_back(g.value());
  if (!all_finite(grads)) {
    m.non_finite = true;
    return out;
  }
  m.grad_norm = clip_global_norm(grads, cfg.clip_norm);
  auto updated = adam_update(params.tensors, grads, optimizer, {cfg.lr});
  out.params.tensors = std::move(updated.params);
  out.optimizer = std::move(updated.state);
  return out;
}

std::string metrics_header(bool use_kl) {
  return use_kl ? "step,loss_ml,loss_kl,E_pos_x,E_neg_x,E_pos_a,E_neg_a"
                : "step,loss_ml,E_pos_x,E_neg_x,E_pos_a,E_neg_a";
}

std::string metrics_row(const StepMetrics& m, bool use_kl) {
  std::string s = std::to_string(m.step) + "," + fmt(m.loss_ml, "%.9g");
  if (use_kl) s += "," + fmt(m.loss_kl, "%.9g");
  for (double v : {m.e_pos_x, m.e_neg_x, m.e_pos_a, m.e_neg_a}) s += "," + fmt(v, "%.9g");
  return s;
}

TrainResult train(std::span<const Episode> data, const TrainConfig& cfg, const TrainOptions& opts) {
  cfg.validate();
  TrainResult result;
  Checkpoint& ck = result.checkpoint;
  if (opts.resume) {
    ck = *opts.resume;
    if (!(ck.params.config == cfg.model)) throw CheckpointError("resume checkpoint model config differs from the training config");
  } else {
    ck.params = init_params(cfg.seed, cfg.model);
    ck.step = 0;
  }
  AdamState state = ck.optimizer ? *ck.optimizer : AdamState::zeros_like(ck.params.tensors);
  const auto eligible = cfg.steps > ck.step ? eligible_episodes(data, cfg.context_mode) : std::vector<std::size_t>{};

  std::ofstream log;
  if (!opts.log.empty()) {
    const bool append = opts.resume && std::filesystem::exists(opts.log);
    log.open(opts.log, append ? std::ios::app : std::ios::trunc);
    if (!log) throw std::runtime_error("cannot open metrics log " + opts.log.string());
    if (!append) log << metrics_header(cfg.use_kl) << '\n';
  }
  auto write_checkpoint = [&](const std::filesystem::path& path) {
    ck.optimizer = state;
    save_checkpoint(path, ck);
  };

  for (std::int64_t step = ck.step; step < cfg.steps; ++step) {
    auto r = train_step(ck.params, state, data, eligible, cfg, step);
    result.metrics.push_back(r.metrics);
    if (log.is_open()) log << metrics_row(r.metrics, cfg.use_kl) << '\n' << std::flush;
    if (opts.on_step) opts.on_step(r.metrics);
    if (r.metrics.non_finite)
      throw TrainingAborted("non-finite loss or gradient at step " + std::to_string(step), step);
    ck.params = std::move(r.params);
    state = std::move(r.optimizer);
    ck.step = step + 1;
    if (!opts.checkpoint.empty() && opts.periodic_checkpoints && ck.step % cfg.checkpoint_every == 0 &&
        ck.step != cfg.steps)
      write_checkpoint(periodic_path(opts.checkpoint, ck.step));
  }
  ck.optimizer = state;
  if (!opts.checkpoint.empty()) write_checkpoint(opts.checkpoint);
  return result;
}

}  // namespace cem
