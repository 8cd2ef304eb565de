#include "cli.hpp"

#include "cem/evalharness.hpp"
#include "cem/reenact.hpp"
#include "cem/trainer.hpp"
#include "figures.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>

namespace cem::cli {

namespace {

namespace fs = std::filesystem;

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Options {
  // Shared.
  std::string data, out, ckpt;
  std::uint64_t seed = 0;
  // gen-data
  std::string concepts = "all";
  int episodes = 0;
  std::string context = "any";
  // train / transfer
  std::string profile = "desk";
  std::string mode = "both";
  bool no_kl = false;
  std::optional<int> steps;
  std::optional<int> batch;
  std::optional<int> hidden;
  std::optional<int> code_dim;
  std::optional<double> lr;
  std::string variant;
  std::string log;
  std::string eval_data;
  std::string cache;
  // sampler / inference
  int sampler_steps = 10;
  int episode = 0;
  int event = 0;
  // reenact
  std::string trace;
  int horizon = 8;
  // render
  std::string kind, input, x = "step", y = "energy";
  int entity = -1;
};

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot read " + p.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw IoError("cannot write " + p.string());
  out << text;
  if (!out) throw IoError("write failed for " + p.string());
}

void require_writable(const fs::path& p) {
  std::ofstream out(p, std::ios::binary | std::ios::app);
  if (!out) throw IoError("cannot write " + p.string());
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

std::string join(std::span<const double> v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? " " : "") + fmt(v[i]);
  return s;
}

TrainConfig train_config(const Options& o) {
  TrainConfig c = TrainConfig::profile_config(o.profile);
  const auto mode = parse_context_mode(o.mode);
  if (!mode) throw CLI::ValidationError("--context", "expected both, gen or ident");
  c.context_mode = *mode;
  c.use_kl = !o.no_kl;
  c.seed = o.seed;
  if (o.steps) c.steps = *o.steps;
  if (o.batch) c.batch_size = *o.batch;
  if (o.hidden) c.model.hidden = *o.hidden;
  if (o.code_dim) c.model.code_dim = *o.code_dim;
  if (o.lr) c.lr = *o.lr;
  if (!o.variant.empty()) c.model.variant = parse_variant(o.variant);
  c.sampler.steps = o.sampler_steps;
  c.validate();
  return c;
}

EvalConfig eval_config(const Options& o) {
  EvalConfig e;
  e.sampler.steps = o.sampler_steps;
  e.seed = o.seed;
  return e;
}

const Episode& pick_episode(const std::vector<Episode>& data, int index) {
  if (index < 0 || index >= static_cast<int>(data.size()))
    throw CLI::ValidationError("--episode", "index " + std::to_string(index) + " out of range (dataset has " +
                                                std::to_string(data.size()) + " episodes)");
  return data[static_cast<std::size_t>(index)];
}

const Event& pick_event(const Episode& ep, int index) {
  if (index < 0 || index >= kTrainEvents)
    throw CLI::ValidationError("--event", "expected 0.." + std::to_string(kTrainEvents - 1));
  return ep.train()[static_cast<std::size_t>(index)];
}

Channel channel_of(const ConceptSpec& spec) { return changes_color(spec) ? Channel::Color : Channel::Position; }

// ---------------------------------------------------------------------------------------

int gen_data(const Options& o, std::ostream& out) {
  const auto filters = parse_concepts(o.concepts);
  std::optional<Context> ctx;
  if (o.context != "any") {
    ctx = parse_context(o.context == "gen" ? "generation" : o.context == "ident" ? "identification" : o.context);
    if (!ctx) throw CLI::ValidationError("--context", "expected any, gen or ident");
  }
  const auto data = generate_dataset(filters, o.episodes, o.seed, ctx);
  save_dataset(o.out, data);
  std::map<int, int> counts;
  for (const auto& e : data) ++counts[static_cast<int>(e.spec.family)];
  for (const auto& [f, n] : counts) out << family_name(static_cast<Family>(f)) << " " << n << "\n";
  out << "total " << data.size() << "\n";
  return kExitOk;
}

int train_cmd(const Options& o, std::ostream& out) {
  const TrainConfig cfg = train_config(o);
  const auto data = load_dataset(o.data);
  TrainOptions opts;
  opts.checkpoint = o.out;
  opts.log = o.log.empty() ? fs::path(o.out).replace_extension(".csv") : fs::path(o.log);
  require_writable(opts.checkpoint);
  require_writable(opts.log);
  opts.on_step = [&](const StepMetrics& m) {
    if ((m.step + 1) % 100 == 0 || m.step + 1 == cfg.steps)
      out << "step " << m.step + 1 << " loss_ml " << fmt(m.loss_ml) << " loss_kl " << fmt(m.loss_kl) << "\n"
          << std::flush;
  };
  const auto r = train(data, cfg, opts);
  out << "wrote " << o.out << " (" << r.checkpoint.step << " steps) and " << opts.log.string() << "\n";
  return kExitOk;
}

int eval_cmd(const Options& o, std::ostream& out) {
  const auto ck = load_checkpoint(o.ckpt);
  const auto data = load_dataset(o.data);
  const std::string report = report_to_json(evaluate(ck.params, data, eval_config(o))) + "\n";
  if (o.out.empty()) out << report;
  else write_text(o.out, report);
  return kExitOk;
}

int transfer_cmd(const Options& o, std::ostream& out) {
  const TrainConfig base = train_config(o);
  const auto train_data = load_dataset(o.data);
  const auto eval_data = load_dataset(o.eval_data);
  const auto rows = transfer_experiment(train_data, eval_data, base, eval_config(o), o.cache);
  std::string s = "[";
  for (std::size_t i = 0; i < rows.size(); ++i) {
    s += (i ? "," : "") + std::string("{\"label\":\"") + rows[i].label + "\",\"report\":" + report_to_json(rows[i].report) + "}";
    out << rows[i].label << " generation_error " << fmt(rows[i].report.generation_error) << " attention_error "
        << fmt(rows[i].report.attention_error) << "\n";
  }
  s += "]\n";
  if (!o.out.empty()) write_text(o.out, s);
  return kExitOk;
}

int infer_cmd(const Options& o, std::ostream& out) {
  const auto ck = load_checkpoint(o.ckpt);
  const auto data = load_dataset(o.data);
  const Episode& ep = pick_episode(data, o.episode);
  const EvalConfig ec = eval_config(o);
  const auto code = infer_codes(ep.demos(), ck.params, ec.sampler, diff::mix_seed(o.seed, 0));
  out << "concept " << ep.spec.name() << " (" << context_name(ep.spec.context) << ")\n";
  out << "w_x " << join(code.w_x) << "\n";
  out << "w_a " << join(code.w_a) << "\n";
  std::optional<Trajectory> traj;
  for (int j = 0; j < kTrainEvents; ++j) {
    const Event& e = ep.train()[static_cast<std::size_t>(j)];
    const std::uint64_t es = diff::mix_seed(o.seed, static_cast<std::uint64_t>(j) + 1);
    if (ep.spec.context == Context::Generation) {
      const auto g = generate(e, mask_logits(e.mask), code.w_x, ck.params, ec.sampler, es, channel_of(ep.spec));
      out << "event " << j << " generated";
      for (int i = 0; i < e.entities(); ++i) {
        if (!e.mask[static_cast<std::size_t>(i)]) continue;
        const auto& ent = g.event.states.back()[static_cast<std::size_t>(i)];
        out << " [" << i << ": " << fmt(ent.pos[0]) << " " << fmt(ent.pos[1]) << " | " << fmt(ent.color[0]) << " "
            << fmt(ent.color[1]) << " " << fmt(ent.color[2]) << "]";
      }
      out << " error " << fmt(generation_error(ep.spec, g.event, e)) << "\n";
      if (j == o.event && channel_of(ep.spec) == Channel::Position) traj = sampler_trajectory(e, g.iterates);
    } else {
      const auto a = identify(e, code.w_a, ck.params, ec.sampler, es);
      out << "event " << j << " attention " << join(a.logits) << " error "
          << fmt(attention_error(a.logits, e.mask)) << "\n";
    }
  }
  if (!o.out.empty()) {
    if (!traj) throw CLI::ValidationError("--out", "iterate export needs a position-generation episode");
    write_text(o.out, trajectory_to_json(*traj));
  }
  return kExitOk;
}

int reenact_cmd(const Options& o, std::ostream& out) {
  const auto ck = load_checkpoint(o.ckpt);
  const std::string before = read_text(o.ckpt);
  const auto data = load_dataset(o.data);
  const Episode& ep = pick_episode(data, o.episode);
  const Event& scene = pick_event(ep, o.event);
  std::vector<int> controlled;
  for (int i = 0; i < scene.entities(); ++i)
    if (scene.mask[static_cast<std::size_t>(i)]) controlled.push_back(i);
  if (controlled.empty()) throw CLI::ValidationError("--event", "event has no attended entity to control");
  require_writable(o.trace);
  const EvalConfig ec = eval_config(o);
  const auto code = infer_codes(ep.demos(), ck.params, ec.sampler, diff::mix_seed(o.seed, 0));
  const auto cost = energy_cost(scene, controlled, mask_logits(scene.mask), code.w_x, ck.params);
  MPCConfig mpc;
  mpc.horizon = o.horizon;
  if (o.steps) mpc.total_steps = *o.steps;
  mpc.validate();
  const auto r = mpc_rollout(rest_state(scene.states.front(), controlled), cost, mpc);

  std::string csv = "step,energy\n";
  for (std::size_t k = 0; k < r.costs.size(); ++k) csv += std::to_string(k + 1) + "," + fmt(r.costs[k]) + "\n";
  write_text(o.trace, csv);
  if (!o.out.empty()) {
    Trajectory t;
    for (const auto& e : scene.states.front()) {
      t.colors.push_back(e.color);
      t.shapes.push_back(e.shape);
    }
    t.energy.push_back(r.initial_cost);
    t.energy.insert(t.energy.end(), r.costs.begin(), r.costs.end());
    for (const auto& s : r.states) {
      std::vector<std::array<double, 2>> frame;
      for (const auto& e : place(scene.states.front(), controlled, s)) frame.push_back(e.pos);
      t.frames.push_back(std::move(frame));
    }
    write_text(o.out, trajectory_to_json(t));
  }
  if (read_text(o.ckpt) != before) throw IoError("checkpoint changed during reenactment: " + o.ckpt);
  const double final_cost = r.costs.empty() ? r.initial_cost : r.costs.back();
  out << "concept " << ep.spec.name() << " energy " << fmt(r.initial_cost) << " -> " << fmt(final_cost) << " ("
      << r.costs.size() << " steps)\n";
  return kExitOk;
}

Heatmap heatmap(const Options& o) {
  const auto ck = load_checkpoint(o.ckpt);
  const auto data = load_dataset(o.data);
  const Episode& ep = pick_episode(data, o.episode);
  const Event& e = pick_event(ep, o.event);
  const EvalConfig ec = eval_config(o);
  const auto code = infer_codes(ep.demos(), ck.params, ec.sampler, diff::mix_seed(o.seed, 0));
  Heatmap h;
  h.swept = o.entity;
  if (h.swept < 0) {
    const auto it = std::find(e.mask.begin(), e.mask.end(), 1);
    h.swept = it == e.mask.end() ? 0 : static_cast<int>(it - e.mask.begin());
  }
  if (h.swept >= e.entities()) throw CLI::ValidationError("--entity", "entity index out of range");
  h.scene = e.states.back();
  const auto logits = mask_logits(e.mask);
  const bool identification = ep.spec.context == Context::Identification;
  const auto& w = identification ? code.w_a : code.w_x;
  Event probe = e;
  const double cell = (h.hi - h.lo) / h.resolution;
  for (int r = 0; r < h.resolution; ++r)
    for (int c = 0; c < h.resolution; ++c) {
      probe.states.back()[static_cast<std::size_t>(h.swept)].pos = {h.lo + (c + 0.5) * cell, h.hi - (r + 0.5) * cell};
      h.values.push_back(energy(probe, logits, w, ck.params).value().item());
    }
  return h;
}

int render_cmd(const Options& o, std::ostream& out) {
  std::string svg;
  if (o.kind == "heatmap") {
    if (o.ckpt.empty() || o.data.empty()) throw CLI::ValidationError("--kind", "heatmap needs --ckpt and --data");
    svg = heatmap_svg(heatmap(o));
  } else {
    if (o.input.empty()) throw CLI::ValidationError("--in", "required for --kind " + o.kind);
    const std::string text = read_text(o.input);
    if (o.kind == "trajectory") svg = trajectory_svg(trajectory_from_json(text));
    else if (o.kind == "series") svg = series_svg(parse_csv(text), o.x, o.y);
    else if (o.kind == "histogram") svg = histogram_svg(parse_csv(text));
    else svg = projection_svg(parse_csv(text));
  }
  write_text(o.out, svg);
  out << "wrote " << o.out << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------------------

void add_train_flags(CLI::App* c, Options& o) {
  c->add_option("--profile", o.profile, "Training profile")->check(CLI::IsMember({"desk", "paper"}))->capture_default_str();
  c->add_option("--context", o.mode, "Training contexts")->check(CLI::IsMember({"both", "gen", "ident"}))->capture_default_str();
  c->add_flag("--no-kl", o.no_kl, "Drop the sampler (KL) loss");
  c->add_option("--steps", o.steps, "Training steps (default: profile)")->check(CLI::NonNegativeNumber);
  c->add_option("--batch", o.batch, "Batch size (default: profile)")->check(CLI::PositiveNumber);
  c->add_option("--hidden", o.hidden, "Hidden units per layer (default: profile)")->check(CLI::PositiveNumber);
  c->add_option("--code-dim", o.code_dim, "Concept code length (default: profile)")->check(CLI::PositiveNumber);
  c->add_option("--lr", o.lr, "Adam learning rate (default: profile)")->check(CLI::NonNegativeNumber);
  c->add_option("--variant", o.variant, "Energy architecture")->check(CLI::IsMember({"relational", "unary"}));
}

void add_sampler_flags(CLI::App* c, Options& o) {
  c->add_option("--seed", o.seed, "Random seed")->capture_default_str();
  c->add_option("--sampler-steps", o.sampler_steps, "Langevin steps K")->check(CLI::NonNegativeNumber)->capture_default_str();
}

struct Cli {
  CLI::App app{"Energy-based concept learning: data, training, evaluation and reenactment", "cem"};
  Options o;
  std::map<std::string, CLI::App*> commands;

  Cli() {
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all", "Help for every command");

    auto* g = add("gen-data", "Generate a JSONL dataset of concept episodes");
    g->add_option("--concepts", o.concepts, "Comma list of families, family:variant, absolute_position or all")->capture_default_str();
    g->add_option("--episodes", o.episodes, "Episode count")->required()->check(CLI::NonNegativeNumber);
    g->add_option("--context", o.context, "Restrict episodes to one context")->check(CLI::IsMember({"any", "gen", "ident"}))->capture_default_str();
    g->add_option("--seed", o.seed, "Random seed")->capture_default_str();
    g->add_option("--out", o.out, "Output dataset (JSONL)")->required();

    auto* t = add("train", "Train an energy model; writes a checkpoint and a metrics CSV");
    t->add_option("--data", o.data, "Training dataset (JSONL)")->required();
    add_train_flags(t, o);
    add_sampler_flags(t, o);
    t->add_option("--out", o.out, "Output checkpoint (JSON)")->required();
    t->add_option("--log", o.log, "Metrics CSV (default: checkpoint path with .csv)");

    auto* e = add("eval", "Few-shot evaluation of a checkpoint on a dataset");
    e->add_option("--ckpt", o.ckpt, "Checkpoint")->required();
    e->add_option("--data", o.data, "Evaluation dataset (JSONL)")->required();
    add_sampler_flags(e, o);
    e->add_option("--out", o.out, "Report JSON (default: stdout)");

    auto* x = add("transfer", "Train per context mode and compare generation/identification errors");
    x->add_option("--data", o.data, "Training dataset (JSONL)")->required();
    x->add_option("--eval-data", o.eval_data, "Evaluation dataset (JSONL)")->required();
    add_train_flags(x, o);
    add_sampler_flags(x, o);
    x->add_option("--cache", o.cache, "Directory for cached trainings");
    x->add_option("--out", o.out, "Report JSON");

    auto* i = add("infer", "Infer concept codes from an episode's demonstrations and run the sampler");
    i->add_option("--ckpt", o.ckpt, "Checkpoint")->required();
    i->add_option("--data", o.data, "Dataset (JSONL)")->required();
    i->add_option("--episode", o.episode, "Episode index")->capture_default_str();
    i->add_option("--event", o.event, "Training event whose iterates are exported")->capture_default_str();
    add_sampler_flags(i, o);
    i->add_option("--out", o.out, "Sampler iterates as trajectory JSON");

    auto* r = add("reenact", "Drive point masses with MPC on a frozen energy");
    r->add_option("--ckpt", o.ckpt, "Checkpoint (read only)")->required();
    r->add_option("--data", o.data, "Dataset with the demonstration episode (JSONL)")->required();
    r->add_option("--episode", o.episode, "Episode index")->capture_default_str();
    r->add_option("--event", o.event, "Training event giving the scene and controlled entities")->capture_default_str();
    add_sampler_flags(r, o);
    r->add_option("--steps", o.steps, "Control steps (default 100)")->check(CLI::NonNegativeNumber);
    r->add_option("--horizon", o.horizon, "Planning horizon")->check(CLI::PositiveNumber)->capture_default_str();
    r->add_option("--trace", o.trace, "Energy trace CSV (step,energy)")->required();
    r->add_option("--out", o.out, "Rollout as trajectory JSON");

    auto* v = add("render", "Render figure data as SVG");
    v->add_option("--kind", o.kind, "Figure kind")
        ->required()
        ->check(CLI::IsMember({"trajectory", "series", "histogram", "projection", "heatmap"}));
    v->add_option("--in", o.input, "Input JSON/CSV (all kinds but heatmap)");
    v->add_option("--x", o.x, "Series x column")->capture_default_str();
    v->add_option("--y", o.y, "Series y column")->capture_default_str();
    v->add_option("--ckpt", o.ckpt, "Checkpoint (heatmap)");
    v->add_option("--data", o.data, "Dataset (heatmap)");
    v->add_option("--episode", o.episode, "Episode index (heatmap)")->capture_default_str();
    v->add_option("--event", o.event, "Training event (heatmap)")->capture_default_str();
    v->add_option("--entity", o.entity, "Swept entity (heatmap; default first attended)")->capture_default_str();
    add_sampler_flags(v, o);
    v->add_option("--out", o.out, "Output SVG")->required();
  }

  CLI::App* add(const std::string& name, const std::string& desc) {
    auto* c = app.add_subcommand(name, desc);
    commands[name] = c;
    return c;
  }

  int dispatch(std::ostream& out) {
    for (const auto& [name, c] : commands) {
      if (!c->parsed()) continue;
      if (name == "gen-data") return gen_data(o, out);
      if (name == "train") return train_cmd(o, out);
      if (name == "eval") return eval_cmd(o, out);
      if (name == "transfer") return transfer_cmd(o, out);
      if (name == "infer") return infer_cmd(o, out);
      if (name == "reenact") return reenact_cmd(o, out);
      if (name == "render") return render_cmd(o, out);
    }
    return kExitUsage;
  }
};

}  // namespace

std::string help(const std::string& command) {
  Cli cli;
  if (command.empty()) return cli.app.help();
  const auto it = cli.commands.find(command);
  if (it == cli.commands.end()) throw std::invalid_argument("unknown command '" + command + "'");
  return it->second->help();
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  Cli cli;
  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    cli.app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    const auto* sub = cli.app.get_subcommands().empty() ? &cli.app : cli.app.get_subcommands().front();
    out << sub->help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << cli.app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "cem: " << e.what() << "\n";
    return kExitUsage;
  }
  try {
    return cli.dispatch(out);
  } catch (const CLI::ValidationError& e) {
    err << "cem: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::invalid_argument& e) {
    err << "cem: " << e.what() << "\n";
    return kExitUsage;
  } catch (const DatasetError& e) {
    err << "cem: " << e.what();
    if (e.line() > 0) err << " (record " << e.line() << (e.field().empty() ? "" : ", field " + e.field()) << ")";
    err << "\n";
    return kExitIo;
  } catch (const CheckpointError& e) {
    err << "cem: " << e.what() << "\n";
    return kExitIo;
  } catch (const IoError& e) {
    err << "cem: " << e.what() << "\n";
    return kExitIo;
  } catch (const TrainingAborted& e) {
    err << "cem: " << e.what() << " (step " << e.step() << ")\n";
    return kExitDiverged;
  } catch (const DivergenceError& e) {
    err << "cem: " << e.what() << "\n";
    return kExitDiverged;
  } catch (const std::exception& e) {
    err << "cem: " << e.what() << "\n";
    return kExitError;
  }
}

}  // namespace cem::cli
