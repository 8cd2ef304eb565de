#include "cem/model.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

namespace cem {

using namespace diff;

const char* variant_name(Variant v) { return v == Variant::Relational ? "relational" : "unary"; }

Variant parse_variant(const std::string& s) {
  if (s == "relational") return Variant::Relational;
  if (s == "unary") return Variant::Unary;
  throw std::invalid_argument("unknown model variant '" + s + "'");
}

std::vector<ParamSpec> param_layout(const ModelConfig& cfg) {
  if (cfg.hidden <= 0 || cfg.layers <= 0 || cfg.code_dim <= 0 || cfg.relation_dim < 0)
    throw std::invalid_argument("model sizes must be positive");
  const Index e = kEntityFeatures;
  const Index h = cfg.hidden;
  const Index d = cfg.code_dim;
  const Index g = cfg.relation_width();
  std::vector<ParamSpec> out;
  if (cfg.variant == Variant::Relational) {
    out.push_back({"g.0.w_first", e, h});
    out.push_back({"g.0.w_second", e, h});
  } else {
    out.push_back({"g.0.w_entity", e, h});
  }
  out.push_back({"g.0.w_code", d, h});
  out.push_back({"g.0.b", 1, h});
  for (int l = 1; l < cfg.layers; ++l) {
    out.push_back({"g." + std::to_string(l) + ".w", h, h});
    out.push_back({"g." + std::to_string(l) + ".b", 1, h});
  }
  out.push_back({"g.out.w", h, g});
  out.push_back({"g.out.b", 1, g});
  out.push_back({"f.0.w", g + d, h});
  out.push_back({"f.0.b", 1, h});
  for (int l = 1; l < cfg.layers; ++l) {
    out.push_back({"f." + std::to_string(l) + ".w", h, h});
    out.push_back({"f." + std::to_string(l) + ".b", 1, h});
  }
  out.push_back({"f.out.w", h, 1});
  out.push_back({"f.out.b", 1, 1});
  return out;
}

std::size_t EnergyParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& t : tensors) n += static_cast<std::size_t>(t.size());
  return n;
}

std::vector<double> EnergyParams::flatten() const {
  std::vector<double> out;
  out.reserve(parameter_count());
  for (const auto& t : tensors) out.insert(out.end(), t.data(), t.data() + t.size());
  return out;
}

EnergyParams init_params(std::uint64_t seed, const ModelConfig& cfg) {
  const auto layout = param_layout(cfg);
  const Index first_fan_in = (cfg.variant == Variant::Relational ? 2 : 1) * kEntityFeatures + cfg.code_dim;
  EnergyParams p;
  p.config = cfg;
  std::mt19937_64 rng(mix_seed(seed, 0x1417));
  for (const auto& spec : layout) {
    Tensor t(spec.rows, spec.cols);
    const bool is_bias = spec.name.ends_with(".b");
    if (!is_bias) {
      const bool first_g = spec.name.starts_with("g.0.");
      const Index fan_in = first_g ? first_fan_in : spec.rows;
      const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + spec.cols));
      std::uniform_real_distribution<double> u(-bound, bound);
      for (Index i = 0; i < t.size(); ++i) t[i] = u(rng);
    }
    p.tensors.push_back(std::move(t));
  }
  return p;
}

ParamExprs param_inputs(const EnergyParams& p) {
  const auto layout = param_layout(p.config);
  ParamExprs out;
  for (std::size_t i = 0; i < p.tensors.size(); ++i) out.push_back(input(p.tensors[i], layout[i].name));
  return out;
}

ParamExprs param_constants(const EnergyParams& p) {
  ParamExprs out;
  for (const auto& t : p.tensors) out.push_back(constant(t));
  return out;
}

ParamExprs stop_gradients(const ParamExprs& p) {
  ParamExprs out;
  for (const auto& e : p) out.push_back(stop_gradient(e));
  return out;
}

Expr energy(const SceneBatch& scene, const EnergyArgs& args, const ParamExprs& params,
            const ModelConfig& cfg) {
  const Index rows = scene.rows();
  if (args.positions.rows() != rows || args.positions.cols() != 2)
    throw ShapeError("energy: positions must be " + std::to_string(rows) + "x2");
  if (args.colors.rows() != rows || args.colors.cols() != 3)
    throw ShapeError("energy: colors must be " + std::to_string(rows) + "x3");
  if (args.attention.rows() != scene.attention_rows() || args.attention.cols() != 1)
    throw ShapeError("energy: attention length does not match entity count");
  if (args.codes.cols() != cfg.code_dim || args.codes.rows() < scene.code_rows())
    throw ShapeError("energy: code matrix has wrong shape " + args.codes.value().shape_str());
  if (params.size() != param_layout(cfg).size()) throw ShapeError("energy: parameter count mismatch");

  std::size_t k = 0;
  auto next = [&]() -> const Expr& { return params[k++]; };

  const Expr feats = concat_cols({args.positions, args.colors, constant(scene.static_features())});
  const Expr sig = sigmoid(args.attention);
  Expr pre;
  Expr weights;
  IndexList pool_index;
  if (cfg.variant == Variant::Relational) {
    const Expr& w_first = next();
    const Expr& w_second = next();
    const Expr& w_code = next();
    const Expr& b0 = next();
    const Expr code_term = affine(args.codes, w_code, b0);
    pre = gather(matmul(feats, w_first), scene.pair_first()) +
          gather(matmul(feats, w_second), scene.pair_second()) +
          gather(code_term, scene.pair_code());
    weights = gather(sig, scene.pair_first_attention()) * gather(sig, scene.pair_second_attention()) *
              constant(scene.pair_norm());
    pool_index = scene.pair_event();
  } else {
    const Expr& w_entity = next();
    const Expr& w_code = next();
    const Expr& b0 = next();
    pre = matmul(feats, w_entity) + gather(affine(args.codes, w_code, b0), scene.row_code());
    weights = gather(sig, scene.row_attention()) * constant(scene.row_norm());
    pool_index = scene.row_event();
  }
  Expr h = tanh(pre);
  for (int l = 1; l < cfg.layers; ++l) {
    const Expr& w = next();
    const Expr& b = next();
    h = tanh(affine(h, w, b));
  }
  {
    const Expr& w = next();
    const Expr& b = next();
    h = affine(h, w, b);
  }
  const Expr pooled = scatter(row_scale(h, weights), pool_index, scene.events());
  const Expr event_codes = gather(args.codes, scene.event_code());
  Expr z = concat_cols({pooled, event_codes});
  for (int l = 0; l < cfg.layers; ++l) {
    const Expr& w = next();
    const Expr& b = next();
    z = tanh(affine(z, w, b));
  }
  const Expr& w_out = next();
  const Expr& b_out = next();
  return square(affine(z, w_out, b_out));
}

Expr energy(const Event& event, std::span<const double> attention, std::span<const double> code,
            const EnergyParams& params) {
  event.validate();
  if (static_cast<int>(attention.size()) != event.entities())
    throw ShapeError("energy: attention length does not match entity count");
  if (static_cast<int>(code.size()) != params.config.code_dim)
    throw ShapeError("energy: code length does not match code_dim");
  SceneBatch scene;
  scene.add({event.states, event.steps()}, 0);
  EnergyArgs args{constant(scene.positions()), constant(scene.colors()),
                  constant(Tensor::column({attention.begin(), attention.end()})),
                  constant(Tensor::row({code.begin(), code.end()}))};
  return energy(scene, args, param_constants(params), params.config);
}

namespace {

using json = nlohmann::ordered_json;

std::vector<Tensor> tensors_from_flat(const std::vector<double>& flat,
                                      const std::vector<ParamSpec>& layout, const char* what) {
  std::size_t need = 0;
  for (const auto& s : layout) need += static_cast<std::size_t>(s.rows * s.cols);
  if (flat.size() != need)
    throw CheckpointError(std::string(what) + ": expected " + std::to_string(need) +
                          " values, found " + std::to_string(flat.size()));
  std::vector<Tensor> out;
  std::size_t off = 0;
  for (const auto& s : layout) {
    Tensor t(s.rows, s.cols);
    for (Index i = 0; i < t.size(); ++i) t[i] = flat[off++];
    out.push_back(std::move(t));
  }
  return out;
}

std::vector<double> flat(const std::vector<Tensor>& ts) {
  std::vector<double> out;
  for (const auto& t : ts) out.insert(out.end(), t.data(), t.data() + t.size());
  return out;
}

}  // namespace

std::string checkpoint_to_string(const Checkpoint& ckpt) {
  const auto& cfg = ckpt.params.config;
  const auto layout = param_layout(cfg);
  json j;
  j["format_version"] = kCheckpointVersion;
  j["code_dim"] = cfg.code_dim;
  j["hidden"] = cfg.hidden;
  j["layers"] = cfg.layers;
  j["relation_dim"] = cfg.relation_dim;
  j["variant"] = variant_name(cfg.variant);
  j["step"] = ckpt.step;
  json manifest = json::array();
  std::size_t off = 0;
  for (const auto& s : layout) {
    manifest.push_back({{"name", s.name}, {"rows", s.rows}, {"cols", s.cols}, {"offset", off}});
    off += static_cast<std::size_t>(s.rows * s.cols);
  }
  j["layer_manifest"] = std::move(manifest);
  j["parameters"] = ckpt.params.flatten();
  if (ckpt.optimizer) {
    j["optimizer"] = {{"kind", "adam"},
                      {"step", ckpt.optimizer->step},
                      {"m", flat(ckpt.optimizer->m)},
                      {"v", flat(ckpt.optimizer->v)}};
  }
  return j.dump() + "\n";
}

Checkpoint checkpoint_from_string(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw CheckpointError(std::string("checkpoint is not valid JSON: ") + e.what());
  }
  try {
    if (j.at("format_version").get<int>() != kCheckpointVersion)
      throw CheckpointError("unsupported checkpoint format_version " + j.at("format_version").dump());
    Checkpoint c;
    auto& cfg = c.params.config;
    cfg.code_dim = j.at("code_dim").get<int>();
    cfg.hidden = j.at("hidden").get<int>();
    cfg.layers = j.at("layers").get<int>();
    cfg.relation_dim = j.at("relation_dim").get<int>();
    cfg.variant = parse_variant(j.at("variant").get<std::string>());
    c.step = j.value("step", std::int64_t{0});
    const auto layout = param_layout(cfg);
    const auto& manifest = j.at("layer_manifest");
    if (manifest.size() != layout.size()) throw CheckpointError("layer manifest does not match config");
    for (std::size_t i = 0; i < layout.size(); ++i) {
      if (manifest[i].at("name").get<std::string>() != layout[i].name ||
          manifest[i].at("rows").get<Index>() != layout[i].rows ||
          manifest[i].at("cols").get<Index>() != layout[i].cols)
        throw CheckpointError("layer manifest entry " + std::to_string(i) + " does not match config");
    }
    c.params.tensors = tensors_from_flat(j.at("parameters").get<std::vector<double>>(), layout, "parameters");
    if (j.contains("optimizer")) {
      const auto& o = j.at("optimizer");
      diff::AdamState s;
      s.step = o.at("step").get<std::int64_t>();
      s.m = tensors_from_flat(o.at("m").get<std::vector<double>>(), layout, "optimizer.m");
      s.v = tensors_from_flat(o.at("v").get<std::vector<double>>(), layout, "optimizer.v");
      c.optimizer = std::move(s);
    }
    return c;
  } catch (const json::exception& e) {
    throw CheckpointError(std::string("malformed checkpoint: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(std::string("malformed checkpoint: ") + e.what());
  }
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError("cannot open checkpoint for writing: " + path.string());
  out << checkpoint_to_string(ckpt);
  if (!out) throw CheckpointError("failed writing checkpoint: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint: " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return checkpoint_from_string(ss.str());
  } catch (const CheckpointError& e) {
    throw CheckpointError(path.string() + ": " + e.what());
  }
}

}  // namespace cem
