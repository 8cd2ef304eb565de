#include "cem/evalharness.hpp"
#include "doctest.h"

#include <nlohmann/json.hpp>

#include <cmath>
#include <filesystem>
#include <random>

using namespace cem;
using namespace cem::diff;

namespace {

ModelConfig small_model() {
  ModelConfig m;
  m.hidden = 8;
  m.code_dim = 4;
  return m;
}

EvalConfig quick_eval() {
  EvalConfig e;
  e.sampler.steps = 3;
  e.seed = 4;
  return e;
}

// Cyclic Jacobi eigenvalues of a symmetric matrix, written out independently of Eigen.
std::vector<double> jacobi_eigenvalues(std::vector<std::vector<double>> a) {
  const std::size_t n = a.size();
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) off += a[p][q] * a[p][q];
    if (off < 1e-30) break;
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        if (std::abs(a[p][q]) < 1e-300) continue;
        const double theta = (a[q][q] - a[p][p]) / (2 * a[p][q]);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1));
        const double c = 1 / std::sqrt(t * t + 1), s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a[k][p], akq = a[k][q];
          a[k][p] = c * akp - s * akq;
          a[k][q] = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a[p][k], aqk = a[q][k];
          a[p][k] = c * apk - s * aqk;
          a[q][k] = s * apk + c * aqk;
        }
      }
    }
  }
  std::vector<double> ev;
  for (std::size_t i = 0; i < n; ++i) ev.push_back(a[i][i]);
  std::sort(ev.rbegin(), ev.rend());
  return ev;
}

std::vector<LabeledCode> random_codes(int n, int dim, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0, 1);
  std::vector<LabeledCode> out;
  for (int i = 0; i < n; ++i) {
    LabeledCode c{"c" + std::to_string(i % 3), {}};
    for (int d = 0; d < dim; ++d) {
      c.code.w_x.push_back(g(rng) * (d + 1));
      c.code.w_a.push_back(g(rng) * (d + 1));
    }
    out.push_back(c);
  }
  return out;
}

}  // namespace

TEST_CASE("a perfect sample has zero generation error") {
  const auto eps = generate_dataset(parse_concepts("region:point,color,temporal"), 6, 2, Context::Generation);
  for (const auto& ep : eps)
    for (const auto& e : ep.train()) CHECK(generation_error(ep.spec, e, e) == 0.0);
  // Moving one attended entity by (0.3, 0.4) gives distance 0.5 over the attended set.
  const auto& ep = eps[0];
  Event e = ep.train()[0];
  Event moved = e;
  int attended = 0, first = -1;
  for (int i = 0; i < e.entities(); ++i)
    if (e.mask[static_cast<std::size_t>(i)]) {
      ++attended;
      if (first < 0) first = i;
    }
  moved.states[1][static_cast<std::size_t>(first)].pos[0] += 0.3;
  moved.states[1][static_cast<std::size_t>(first)].pos[1] += 0.4;
  CHECK(generation_error(ep.spec, moved, e) == doctest::Approx(0.5 / attended).epsilon(1e-12));
}

TEST_CASE("attention error at saturated logits is the Hamming error") {
  const std::vector<int> mask{1, 0, 1, 1, 0};
  const std::vector<double> logits{20, 20, -20, 20, -20};
  CHECK(std::abs(attention_error(logits, mask) - 2.0 / 5.0) < 1e-8);
  const std::vector<double> half(5, 0.0);
  CHECK(attention_error(half, mask) == doctest::Approx(0.5));
  CHECK_THROWS_AS(attention_error(half, std::vector<int>{1}), EventError);
}

TEST_CASE("evaluation is deterministic, bounded, and checks the model") {
  const auto eps = generate_dataset(parse_concepts("absolute_position"), 6, held_out_seed(0));
  const auto p = init_params(1, small_model());
  const auto a = evaluate(p, eps, quick_eval());
  const auto b = evaluate(p, eps, quick_eval());
  CHECK(report_to_json(a) == report_to_json(b));
  CHECK(a.generation_error >= 0);
  CHECK(a.attention_error >= 0);
  CHECK(a.success_rate >= 0);
  CHECK(a.success_rate <= 1);
  CHECK(a.generation_events + a.identification_events == 6 * kTrainEvents);
  const auto j = nlohmann::json::parse(report_to_json(a));
  CHECK(j.at("generation_error").get<double>() == doctest::Approx(a.generation_error));
  CHECK(j.at("per_concept").contains("region/point"));

  EvalConfig strict = quick_eval();
  strict.expect = small_model();
  CHECK_NOTHROW(evaluate(p, eps, strict));
  strict.expect->code_dim = 5;
  CHECK_THROWS_AS(evaluate(p, eps, strict), EvalError);
  strict.expect = small_model();
  strict.expect->variant = Variant::Unary;
  CHECK_THROWS_AS(evaluate(p, eps, strict), EvalError);

  const auto empty = evaluate(p, std::vector<Episode>{}, quick_eval());
  CHECK(empty.generation_events == 0);
  CHECK(empty.success_rate == 0.0);
}

TEST_CASE("held-out episodes are disjoint from training episodes") {
  const auto f = parse_concepts("absolute_position");
  const auto train = generate_dataset(f, 20, 0);
  const auto test = generate_dataset(f, 20, held_out_seed(0));
  for (const auto& a : train)
    for (const auto& b : test) CHECK_FALSE(a == b);
}

TEST_CASE("energy histograms: three kinds per event and header-only CSV when empty") {
  CHECK(energy_csv(std::vector<EnergyRecord>{}) == "kind,concept,context,energy\n");
  const auto eps = generate_dataset(parse_concepts("absolute_position"), 4, 9);
  const auto p = init_params(2, small_model());
  const auto recs = energy_histograms(p, eps, quick_eval());
  CHECK(recs.size() == 4u * (kDemoEvents + 2 * kTrainEvents));
  for (const auto& r : recs) CHECK(r.energy >= 0.0);
  const auto csv = energy_csv(recs);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == static_cast<long>(recs.size()) + 1);
  const std::vector<EnergyRecord> odd{{EnergyKind::Positive, "x", Context::Generation, 3},
                                      {EnergyKind::Positive, "x", Context::Generation, 1},
                                      {EnergyKind::Random, "x", Context::Generation, 7},
                                      {EnergyKind::Positive, "x", Context::Generation, 2}};
  CHECK(median_energy(odd, EnergyKind::Positive) == 2.0);
  CHECK(median_energy(odd, EnergyKind::Random) == 7.0);
  CHECK(std::isnan(median_energy(odd, EnergyKind::Sampled)));
}

TEST_CASE("projection of 2-D codes is a rigid motion") {
  const auto codes = random_codes(7, 2, 3);
  const auto proj = code_projection(codes);
  REQUIRE(proj.points.size() == 14);
  std::vector<std::array<double, 2>> orig;
  for (const auto& c : codes) {
    orig.push_back({c.code.w_x[0], c.code.w_x[1]});
    orig.push_back({c.code.w_a[0], c.code.w_a[1]});
  }
  for (std::size_t i = 0; i < orig.size(); ++i)
    for (std::size_t j = 0; j < orig.size(); ++j) {
      const double d0 = std::hypot(orig[i][0] - orig[j][0], orig[i][1] - orig[j][1]);
      const double d1 = std::hypot(proj.points[i].x - proj.points[j].x, proj.points[i].y - proj.points[j].y);
      CHECK(std::abs(d0 - d1) < 1e-9);
    }
  CHECK(proj.residual < 1e-20);
  CHECK(proj.points[0].role == "w_x");
  CHECK(proj.points[1].role == "w_a");
}

TEST_CASE("duplicated codes project to identical coordinates") {
  auto codes = random_codes(4, 6, 8);
  auto doubled = codes;
  doubled.insert(doubled.end(), codes.begin(), codes.end());
  const auto proj = code_projection(doubled);
  for (std::size_t i = 0; i < 8; ++i) {
    CHECK(proj.points[i].x == doctest::Approx(proj.points[i + 8].x).epsilon(1e-12));
    CHECK(proj.points[i].y == doctest::Approx(proj.points[i + 8].y).epsilon(1e-12));
  }
}

TEST_CASE("projection residual matches an independent covariance eigendecomposition") {
  const int dim = 5;
  const auto codes = random_codes(9, dim, 21);
  const auto proj = code_projection(codes);
  std::vector<std::vector<double>> rows;
  for (const auto& c : codes) {
    rows.push_back(c.code.w_x);
    rows.push_back(c.code.w_a);
  }
  std::vector<double> mean(dim, 0.0);
  for (const auto& r : rows)
    for (int d = 0; d < dim; ++d) mean[static_cast<std::size_t>(d)] += r[static_cast<std::size_t>(d)] / rows.size();
  std::vector<std::vector<double>> scatter(dim, std::vector<double>(dim, 0.0));
  for (const auto& r : rows)
    for (int i = 0; i < dim; ++i)
      for (int j = 0; j < dim; ++j)
        scatter[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] +=
            (r[static_cast<std::size_t>(i)] - mean[static_cast<std::size_t>(i)]) *
            (r[static_cast<std::size_t>(j)] - mean[static_cast<std::size_t>(j)]);
  const auto ev = jacobi_eigenvalues(scatter);
  double tail = 0;
  for (std::size_t i = 2; i < ev.size(); ++i) tail += ev[i];
  CHECK(proj.residual == doctest::Approx(tail).epsilon(1e-9));
  for (int d = 0; d < dim; ++d) CHECK(proj.mean[static_cast<std::size_t>(d)] == doctest::Approx(mean[static_cast<std::size_t>(d)]));
  // Components are orthonormal.
  double dot = 0, n0 = 0, n1 = 0;
  for (int d = 0; d < dim; ++d) {
    dot += proj.components[0][static_cast<std::size_t>(d)] * proj.components[1][static_cast<std::size_t>(d)];
    n0 += proj.components[0][static_cast<std::size_t>(d)] * proj.components[0][static_cast<std::size_t>(d)];
    n1 += proj.components[1][static_cast<std::size_t>(d)] * proj.components[1][static_cast<std::size_t>(d)];
  }
  CHECK(std::abs(dot) < 1e-12);
  CHECK(n0 == doctest::Approx(1.0));
  CHECK(n1 == doctest::Approx(1.0));
  CHECK(code_projection(std::vector<LabeledCode>{}).points.empty());
}

TEST_CASE("code sharing accuracy counts nearest-neighbour label matches") {
  std::vector<LabeledCode> codes{{"red", {{0, 0}, {0.1, 0}}}, {"blue", {{5, 5}, {5, 5.2}}}, {"green", {{-5, 2}, {-4.9, 2}}}};
  CHECK(code_sharing_accuracy(codes) == 1.0);
  codes[2].code.w_a = {5, 5};  // nearest w_x is now blue's
  CHECK(code_sharing_accuracy(codes) == doctest::Approx(2.0 / 3.0));
  CHECK(code_sharing_accuracy(std::vector<LabeledCode>{}) == 0.0);
}

TEST_CASE("cached training reuses checkpoints keyed by config and data") {
  const auto dir = std::filesystem::temp_directory_path() / "cem_test_eval_cache";
  std::filesystem::remove_all(dir);
  const auto data = generate_dataset(parse_concepts("absolute_position"), 6, 1);
  TrainConfig c;
  c.steps = 2;
  c.batch_size = 2;
  c.model = small_model();
  c.sampler.steps = 2;
  const auto a = train_cached(data, c, dir);
  CHECK_FALSE(a.from_cache);
  const auto b = train_cached(data, c, dir);
  CHECK(b.from_cache);
  CHECK(b.checkpoint.params == a.checkpoint.params);
  TrainConfig d = c;
  d.seed = 1;
  CHECK(training_key(data, d) != training_key(data, c));
  CHECK(training_key(std::span(data).first(5), c) != training_key(data, c));

  const auto rows = transfer_experiment(data, data, c, quick_eval(), dir);
  REQUIRE(rows.size() == 4);
  CHECK(rows[0].label == "untrained");
  CHECK(report_to_json(rows[0].report) == report_to_json(evaluate(init_params(c.seed, c.model), data, quick_eval())));
  CHECK(rows[3].label == "both");
  CHECK(report_to_json(rows[3].report) == report_to_json(evaluate(a.checkpoint.params, data, quick_eval())));

  const std::vector<int> ks{1, 3};
  const std::vector<Variant> vs{Variant::Relational, Variant::Unary};
  const auto abl = ablation(data, data, c, quick_eval(), ks, vs, dir);
  REQUIRE(abl.size() == 4);
  CHECK(abl[1].config.model.variant == Variant::Unary);
  CHECK(abl[2].config.sampler.steps == 3);
  std::filesystem::remove_all(dir);
}
