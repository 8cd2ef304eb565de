#include "cem/model.hpp"
#include "doctest.h"
#include "fd_oracle.hpp"
#include "test_support.hpp"

#include <algorithm>
#include <filesystem>
#include <numeric>

using namespace cem;
using namespace cem::diff;
using cem::testing::numeric_gradient;
using cem::testing::random_event;
using cem::testing::random_tensor;
using cem::testing::relative_error;

namespace {

ModelConfig small_model(Variant v, int hidden = 8, int relation = 0) {
  ModelConfig m;
  m.hidden = hidden;
  m.layers = 2;
  m.code_dim = 4;
  m.relation_dim = relation;
  m.variant = v;
  return m;
}

std::vector<double> random_vector(std::size_t n, std::mt19937_64& rng, double lo = -2.0, double hi = 2.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(n);
  for (double& x : v) x = u(rng);
  return v;
}

// Direct per-event evaluation of the relation network, written with plain loops.
double reference_energy(const Event& e, const std::vector<double>& att, const std::vector<double>& w,
                        const EnergyParams& p) {
  const auto& cfg = p.config;
  const auto layout = param_layout(cfg);
  auto get = [&](const std::string& name) -> const Tensor& {
    for (std::size_t i = 0; i < layout.size(); ++i)
      if (layout[i].name == name) return p.tensors[i];
    throw std::logic_error(name);
  };
  const int n = e.entities();
  const int t_count = e.steps();
  auto features = [&](int t, int i) {
    const auto& s = e.states[static_cast<std::size_t>(t)][static_cast<std::size_t>(i)];
    Eigen::RowVectorXd f = Eigen::RowVectorXd::Zero(kEntityFeatures);
    f << s.pos[0], s.pos[1], s.color[0], s.color[1], s.color[2], 0, 0, 0, static_cast<double>(t) / t_count;
    f(5 + s.shape) = 1.0;
    return f;
  };
  const Eigen::RowVectorXd code = Eigen::Map<const Eigen::RowVectorXd>(w.data(), static_cast<Index>(w.size()));
  auto mlp_tail = [&](Eigen::RowVectorXd h, const std::string& prefix) {
    for (int l = 1; l < cfg.layers; ++l) {
      const std::string k = prefix + "." + std::to_string(l);
      h = (h * get(k + ".w").mat() + get(k + ".b").mat()).array().tanh().matrix();
    }
    return Eigen::RowVectorXd(h * get(prefix + ".out.w").mat() + get(prefix + ".out.b").mat());
  };
  const auto sig = [](double a) { return 1.0 / (1.0 + std::exp(-a)); };
  Eigen::RowVectorXd pooled = Eigen::RowVectorXd::Zero(cfg.relation_width());
  for (int t = 0; t < t_count; ++t) {
    for (int i = 0; i < n; ++i) {
      if (cfg.variant == Variant::Unary) {
        Eigen::RowVectorXd h = features(t, i) * get("g.0.w_entity").mat() + code * get("g.0.w_code").mat() +
                               get("g.0.b").mat();
        pooled += sig(att[static_cast<std::size_t>(i)]) * mlp_tail(h.array().tanh().matrix(), "g") /
                  static_cast<double>(n * t_count);
        continue;
      }
      for (int j = 0; j < n; ++j) {
        Eigen::RowVectorXd h = features(t, i) * get("g.0.w_first").mat() +
                               features(t, j) * get("g.0.w_second").mat() +
                               code * get("g.0.w_code").mat() + get("g.0.b").mat();
        pooled += sig(att[static_cast<std::size_t>(i)]) * sig(att[static_cast<std::size_t>(j)]) *
                  mlp_tail(h.array().tanh().matrix(), "g") / static_cast<double>(n * n * t_count);
      }
    }
  }
  Eigen::RowVectorXd in(pooled.size() + code.size());
  in << pooled, code;
  Eigen::RowVectorXd h = (in * get("f.0.w").mat() + get("f.0.b").mat()).array().tanh().matrix();
  const double out = mlp_tail(h, "f")(0);
  return out * out;
}

}  // namespace

TEST_CASE("energy: matches an independent loop implementation") {
  std::mt19937_64 rng(1);
  for (Variant v : {Variant::Relational, Variant::Unary}) {
    for (int relation : {0, 5}) {
      const auto params = init_params(3, small_model(v, 8, relation));
      for (int t : {1, 2, 3}) {
        const Event e = random_event(rng, 4, t);
        const auto att = random_vector(4, rng);
        const auto w = random_vector(4, rng);
        const double got = energy(e, att, w, params).value().item();
        CHECK(got == doctest::Approx(reference_energy(e, att, w, params)).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("energy: non-negative on fuzzed inputs") {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    const Variant v = trial % 2 ? Variant::Unary : Variant::Relational;
    const auto params = init_params(static_cast<std::uint64_t>(trial), small_model(v));
    const int n = 2 + trial % 7;
    const Event e = random_event(rng, n, 1 + trial % 3, 1.5);
    const double en = energy(e, random_vector(static_cast<std::size_t>(n), rng, -10, 10),
                             random_vector(4, rng, -5, 5), params)
                          .value()
                          .item();
    CHECK(en >= 0.0);
    CHECK(std::isfinite(en));
  }
}

TEST_CASE("energy: invariant to entity permutation") {
  std::mt19937_64 rng(3);
  for (Variant v : {Variant::Relational, Variant::Unary}) {
    const auto params = init_params(4, small_model(v));
    for (int trial = 0; trial < 10; ++trial) {
      const int n = 2 + trial % 6;
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
      const double a = energy(e, att, w, params).value().item();
      const double b = energy(pe, patt, w, params).value().item();
      CHECK(std::abs(a - b) < 1e-10);
    }
  }
}

TEST_CASE("energy: gradients match finite differences") {
  std::mt19937_64 rng(4);
  for (Variant v : {Variant::Relational, Variant::Unary}) {
    const auto model = small_model(v);
    const auto params = init_params(5, model);
    SceneBatch scene;
    scene.add(generation_view(random_event(rng, 3, 2)), 0);
    scene.add(generation_view(random_event(rng, 4, 3)), 1);
    const Expr pos = input(scene.positions());
    const Expr col = input(scene.colors());
    const Expr att = input(random_tensor(scene.attention_rows(), 1, rng, -2, 2));
    const Expr codes = input(random_tensor(2, 4, rng));
    const ParamExprs p = param_inputs(params);
    const Tensor probe = random_tensor(2, 1, rng, 0.5, 1.5);
    const Expr root = sum(mul(energy(scene, {pos, col, att, codes}, p, model), constant(probe)));
    std::vector<Expr> wrt{pos, col, att, codes};
    wrt.insert(wrt.end(), p.begin(), p.end());
    const auto grads = derivative(root, wrt);
    for (std::size_t k = 0; k < wrt.size(); ++k) {
      const auto f = [&](const Tensor& val) {
        Bindings b{{wrt[k].get(), val}};
        return evaluate(root, b).item();
      };
      CAPTURE(k);
      CHECK(relative_error(grads[k].value(), numeric_gradient(f, wrt[k].value()), 1e-9) < 1e-5);
    }
  }
}

TEST_CASE("energy: strongly negative logits switch every entity off") {
  std::mt19937_64 rng(5);
  for (Variant v : {Variant::Relational, Variant::Unary}) {
    const auto params = init_params(6, small_model(v));
    const auto w = random_vector(4, rng);
    double lo = 1e300, hi = -1e300;
    for (int trial = 0; trial < 20; ++trial) {
      const int n = 2 + trial % 5;
      const Event e = random_event(rng, n, 2, 1.5);
      const double en = energy(e, std::vector<double>(static_cast<std::size_t>(n), -20.0), w, params).value().item();
      lo = std::min(lo, en);
      hi = std::max(hi, en);
    }
    CHECK(hi - lo < 1e-6);
  }
}

TEST_CASE("energy: one batch holds events of different sizes") {
  std::mt19937_64 rng(6);
  const auto model = small_model(Variant::Relational);
  const auto params = init_params(7, model);
  SceneBatch scene;
  std::vector<Event> events;
  std::vector<double> att;
  for (int n = 2; n <= 8; ++n) {
    events.push_back(random_event(rng, n, 2));
    scene.add(generation_view(events.back()), 0);
    const auto a = random_vector(static_cast<std::size_t>(n), rng);
    att.insert(att.end(), a.begin(), a.end());
  }
  const auto w = random_vector(4, rng);
  const Expr batch = energy(scene, {constant(scene.positions()), constant(scene.colors()),
                                    constant(Tensor::column(att)), constant(Tensor::row(w))},
                            param_constants(params), model);
  REQUIRE(batch.rows() == 7);
  std::size_t off = 0;
  for (int k = 0; k < 7; ++k) {
    const auto n = static_cast<std::size_t>(k + 2);
    const std::vector<double> a(att.begin() + static_cast<long>(off), att.begin() + static_cast<long>(off + n));
    Event x1{{events[static_cast<std::size_t>(k)].states[1]}, {}};
    CHECK(batch.value()[k] == doctest::Approx(energy(x1, a, w, params).value().item()).epsilon(1e-13));
    off += n;
  }
}

TEST_CASE("init: deterministic, Glorot-bounded, zero biases") {
  const auto cfg = small_model(Variant::Relational, 16);
  const auto a = init_params(11, cfg);
  CHECK(a == init_params(11, cfg));
  CHECK_FALSE(a == init_params(12, cfg));
  const auto layout = param_layout(cfg);
  for (std::size_t i = 0; i < layout.size(); ++i) {
    const auto& t = a.tensors[i];
    if (layout[i].name.ends_with(".b")) {
      CHECK(t.mat().isZero(0.0));
      continue;
    }
    const double fan_in = layout[i].name.starts_with("g.0.") ? 2 * 9 + 4 : static_cast<double>(t.rows());
    CHECK(t.mat().cwiseAbs().maxCoeff() <= std::sqrt(6.0 / (fan_in + static_cast<double>(t.cols()))));
  }
}

TEST_CASE("init: parameter count follows the closed form") {
  for (Variant v : {Variant::Relational, Variant::Unary}) {
    for (int h : {8, 64, 128}) {
      for (int layers : {1, 2, 3}) {
        for (int g : {0, 32}) {
          ModelConfig cfg;
          cfg.hidden = h;
          cfg.layers = layers;
          cfg.code_dim = 16;
          cfg.relation_dim = g;
          cfg.variant = v;
          const long G = g ? g : h, D = 16, E = 9, H = h, L = layers;
          const long entity_in = (v == Variant::Relational ? 2 : 1) * E;
          const long g_net = entity_in * H + D * H + H + (L - 1) * (H * H + H) + H * G + G;
          const long f_net = (G + D) * H + H + (L - 1) * (H * H + H) + H + 1;
          CHECK(init_params(1, cfg).parameter_count() == static_cast<std::size_t>(g_net + f_net));
        }
      }
    }
  }
}

TEST_CASE("checkpoint: round trip is bit-exact") {
  const auto cfg = small_model(Variant::Unary, 8, 6);
  Checkpoint c{init_params(13, cfg), std::nullopt, 42};
  const auto back = checkpoint_from_string(checkpoint_to_string(c));
  CHECK(back.params == c.params);
  CHECK(back.step == 42);
  CHECK_FALSE(back.optimizer.has_value());

  AdamState st = AdamState::zeros_like(c.params.tensors);
  std::mt19937_64 rng(14);
  for (auto& m : st.m) m = random_tensor(m.rows(), m.cols(), rng);
  for (auto& v : st.v) v = random_tensor(v.rows(), v.cols(), rng, 0.0, 1e-3);
  st.step = 17;
  c.optimizer = st;
  const auto dir = std::filesystem::temp_directory_path() / "cem_test_model";
  std::filesystem::create_directories(dir);
  save_checkpoint(dir / "c.json", c);
  const auto loaded = load_checkpoint(dir / "c.json");
  CHECK(loaded.params == c.params);
  REQUIRE(loaded.optimizer.has_value());
  CHECK(*loaded.optimizer == st);
  std::filesystem::remove_all(dir);
}

TEST_CASE("checkpoint: malformed input is rejected") {
  CHECK_THROWS_AS(checkpoint_from_string("{"), CheckpointError);
  CHECK_THROWS_AS(checkpoint_from_string("{\"format_version\": 99}"), CheckpointError);
  auto text = checkpoint_to_string({init_params(1, small_model(Variant::Unary)), std::nullopt, 0});
  text.replace(text.find("\"hidden\""), 12, "\"hidden\": 9,");
  CHECK_THROWS_AS(checkpoint_from_string(text), CheckpointError);
  CHECK_THROWS_AS(load_checkpoint("/nonexistent/ckpt.json"), CheckpointError);
}

TEST_CASE("energy: shape errors are reported") {
  const auto model = small_model(Variant::Relational);
  const auto params = init_params(1, model);
  std::mt19937_64 rng(7);
  const Event e = random_event(rng, 3);
  CHECK_THROWS_AS(energy(e, std::vector<double>{0, 0}, std::vector<double>(4), params), ShapeError);
  CHECK_THROWS_AS(energy(e, std::vector<double>(3), std::vector<double>(5), params), ShapeError);
}
