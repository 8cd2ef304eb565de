#include "cem/model.hpp"
#include "cem/trainer.hpp"
#include "cli.hpp"
#include "doctest.h"
#include "figures.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

using namespace cem;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result cem_run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path scratch(const std::string& name) {
  // Fresh per process: a resumed training appends to an existing log.
  static const fs::path dir = [] {
    const auto d = fs::temp_directory_path() / "cem_test_cli";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir / name;
}

const fs::path kSource = CEM_TEST_SOURCE_DIR;

std::vector<std::string> lines(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string l;
  while (std::getline(ss, l))
    if (!l.empty()) out.push_back(l);
  return out;
}

bool well_formed_svg(const std::string& s) {
  return s.rfind("<svg", 0) == 0 && s.find("</svg>") != std::string::npos;
}

// A tiny dataset of "between" generation episodes shared by several cases.
const fs::path& between_data() {
  static const fs::path p = [] {
    const auto path = scratch("between.jsonl");
    REQUIRE(cem_run({"gen-data", "--concepts", "placement:between", "--context", "gen", "--episodes", "3", "--seed",
                     "4", "--out", path.string()})
                .code == 0);
    return path;
  }();
  return p;
}

const fs::path& tiny_ckpt() {
  static const fs::path p = [] {
    const auto path = scratch("tiny.json");
    REQUIRE(cem_run({"train", "--data", between_data().string(), "--steps", "0", "--hidden", "8", "--code-dim", "4",
                     "--out", path.string()})
                .code == 0);
    return path;
  }();
  return p;
}

}  // namespace

TEST_CASE("--help output matches the golden files and lists every flag") {
  const std::vector<std::pair<std::string, std::vector<std::string>>> commands{
      {"", {"--help-all"}},
      {"gen-data", {"--concepts", "--episodes", "--context", "--seed", "--out"}},
      {"train", {"--data", "--profile", "--context", "--no-kl", "--steps", "--batch", "--hidden", "--code-dim", "--lr",
                 "--variant", "--seed", "--sampler-steps", "--out", "--log"}},
      {"eval", {"--ckpt", "--data", "--seed", "--sampler-steps", "--out"}},
      {"transfer", {"--data", "--eval-data", "--profile", "--context", "--no-kl", "--steps", "--cache", "--out"}},
      {"infer", {"--ckpt", "--data", "--episode", "--event", "--seed", "--out"}},
      {"reenact", {"--ckpt", "--data", "--episode", "--event", "--steps", "--horizon", "--trace", "--out"}},
      {"render", {"--kind", "--in", "--x", "--y", "--ckpt", "--data", "--episode", "--entity", "--out"}},
  };
  for (const auto& [cmd, flags] : commands) {
    CAPTURE(cmd);
    const std::string text = cli::help(cmd);
    CHECK(text == slurp(kSource / "golden" / ("help_" + (cmd.empty() ? std::string("cem") : cmd) + ".txt")));
    for (const auto& f : flags) CHECK_MESSAGE(text.find(f) != std::string::npos, f);
    std::vector<std::string> args;
    if (!cmd.empty()) args.push_back(cmd);
    args.push_back("--help");
    const auto r = cem_run(args);
    CHECK(r.code == 0);
    CHECK(r.out == text);
  }
}

TEST_CASE("bad flags exit 2, unreadable inputs exit 3") {
  CHECK(cem_run({}).code == cli::kExitUsage);
  CHECK(cem_run({"frobnicate"}).code == cli::kExitUsage);
  CHECK(cem_run({"gen-data", "--episodes", "2", "--out", scratch("x.jsonl").string(), "--bogus"}).code ==
        cli::kExitUsage);
  CHECK(cem_run({"gen-data", "--episodes", "-1", "--out", scratch("x.jsonl").string()}).code == cli::kExitUsage);
  CHECK(cem_run({"gen-data", "--episodes", "2", "--concepts", "nonsense", "--out", scratch("x.jsonl").string()})
            .code == cli::kExitUsage);
  CHECK(cem_run({"train", "--data", between_data().string(), "--profile", "huge", "--out", scratch("c.json").string()})
            .code == cli::kExitUsage);

  const auto missing = cem_run({"eval", "--ckpt", "/nonexistent/ckpt.json", "--data", between_data().string()});
  CHECK(missing.code == cli::kExitIo);
  CHECK(missing.err.find("/nonexistent/ckpt.json") != std::string::npos);
  CHECK(cem_run({"gen-data", "--episodes", "1", "--out", "/nonexistent/dir/d.jsonl"}).code == cli::kExitIo);

  const auto bad = scratch("bad.jsonl");
  std::ofstream(bad) << "{\"not\":\"an episode\"}\n";
  const auto r = cem_run({"eval", "--ckpt", tiny_ckpt().string(), "--data", bad.string()});
  CHECK(r.code == cli::kExitIo);
  CHECK(r.err.find("record 1") != std::string::npos);
}

TEST_CASE("gen-data: empty dataset, determinism, family filter") {
  const auto empty = scratch("empty.jsonl");
  const auto r0 = cem_run({"gen-data", "--episodes", "0", "--out", empty.string()});
  REQUIRE(r0.code == 0);
  CHECK(slurp(empty).empty());
  CHECK(load_dataset(empty).empty());

  const auto a = scratch("a.jsonl"), b = scratch("b.jsonl");
  const std::vector<std::string> args{"gen-data", "--concepts", "proximity,quantity", "--episodes", "14", "--seed", "9"};
  auto with_out = [&](const fs::path& p) {
    auto v = args;
    v.insert(v.end(), {"--out", p.string()});
    return cem_run(v);
  };
  const auto ra = with_out(a);
  REQUIRE(ra.code == 0);
  REQUIRE(with_out(b).code == 0);
  CHECK(slurp(a) == slurp(b));

  // Scan the file independently of the loader: every record's family field.
  std::set<std::string> families;
  int records = 0;
  for (const auto& line : lines(slurp(a))) {
    const auto j = nlohmann::json::parse(line);
    families.insert(j.at("concept").at("family").get<std::string>());
    ++records;
  }
  CHECK(records == 14);
  CHECK(families == std::set<std::string>{"proximity", "quantity"});
  CHECK(ra.out == "proximity 7\nquantity 7\ntotal 14\n");
}

TEST_CASE("train: steps 0 is the initialization, --no-kl drops loss_kl, NaN exits 4") {
  const auto ckpt = scratch("init.json");
  REQUIRE(cem_run({"train", "--data", between_data().string(), "--steps", "0", "--hidden", "8", "--code-dim", "4",
                   "--seed", "11", "--out", ckpt.string()})
              .code == 0);
  ModelConfig m;
  m.hidden = 8;
  m.code_dim = 4;
  CHECK(load_checkpoint(ckpt).params == init_params(11, m));

  const auto nokl = scratch("nokl.json"), log = scratch("nokl_metrics.csv");
  const auto r = cem_run({"train", "--data", between_data().string(), "--steps", "2", "--batch", "2", "--hidden", "8",
                          "--code-dim", "4", "--sampler-steps", "2", "--no-kl", "--out", nokl.string(), "--log",
                          log.string()});
  REQUIRE(r.code == 0);
  const auto rows = lines(slurp(log));
  REQUIRE(rows.size() == 3);
  CHECK(rows[0] == metrics_header(false));
  CHECK(rows[0].find("loss_kl") == std::string::npos);
  CHECK(load_checkpoint(nokl).step == 2);

  const auto diverged = cem_run({"train", "--data", between_data().string(), "--steps", "4", "--batch", "2",
                                 "--hidden", "8", "--code-dim", "4", "--sampler-steps", "2", "--lr", "1e300",
                                 "--out", scratch("nan.json").string()});
  CHECK(diverged.code == cli::kExitDiverged);
  CHECK(diverged.err.find("step") != std::string::npos);
}

TEST_CASE("eval on the shipped untrained fixture reproduces the stored report") {
  const auto out = scratch("report.json");
  const auto r = cem_run({"eval", "--ckpt", (kSource / "data" / "untrained.json").string(), "--data",
                          (kSource / "data" / "fixture.jsonl").string(), "--seed", "5", "--out", out.string()});
  REQUIRE(r.code == 0);
  CHECK(slurp(out) == slurp(kSource / "data" / "untrained_report.json"));
}

TEST_CASE("infer prints codes and samples; reenact writes one trace row per step") {
  const auto iters = scratch("iterates.json");
  const auto r = cem_run({"infer", "--ckpt", tiny_ckpt().string(), "--data", between_data().string(), "--sampler-steps",
                          "3", "--out", iters.string()});
  REQUIRE(r.code == 0);
  CHECK(r.out.find("w_x ") != std::string::npos);
  CHECK(r.out.find("w_a ") != std::string::npos);
  CHECK(r.out.find("event 4 generated") != std::string::npos);
  const auto traj = cli::trajectory_from_json(slurp(iters));
  CHECK(traj.frames.size() == 4);

  const auto trace = scratch("trace.csv"), roll = scratch("rollout.json");
  const std::string before = slurp(tiny_ckpt());
  const auto re = cem_run({"reenact", "--ckpt", tiny_ckpt().string(), "--data", between_data().string(), "--steps",
                           "7", "--trace", trace.string(), "--out", roll.string()});
  REQUIRE(re.code == 0);
  const auto rows = lines(slurp(trace));
  REQUIRE(rows.size() == 8);
  CHECK(rows[0] == "step,energy");
  CHECK(rows[7].rfind("7,", 0) == 0);
  CHECK(cli::trajectory_from_json(slurp(roll)).frames.size() == 8);
  CHECK(slurp(tiny_ckpt()) == before);
}

TEST_CASE("render emits SVG for every kind, including an empty trace") {
  const auto empty = scratch("empty_trace.json");
  std::ofstream(empty) << cli::trajectory_to_json({});
  const auto svg = scratch("empty.svg");
  REQUIRE(cem_run({"render", "--kind", "trajectory", "--in", empty.string(), "--out", svg.string()}).code == 0);
  const std::string text = slurp(svg);
  CHECK(well_formed_svg(text));
  CHECK(text.find("<polyline") == std::string::npos);

  const auto csv = scratch("series.csv");
  std::ofstream(csv) << "step,energy\n";
  REQUIRE(cem_run({"render", "--kind", "series", "--in", csv.string(), "--out", svg.string()}).code == 0);
  CHECK(well_formed_svg(slurp(svg)));

  const auto hist = scratch("hist.csv");
  std::ofstream(hist) << "kind,concept,context,energy\npositive,a,generation,0.5\nsampled,a,generation,2\n"
                         "random,a,generation,3\n";
  REQUIRE(cem_run({"render", "--kind", "histogram", "--in", hist.string(), "--out", svg.string()}).code == 0);
  CHECK(well_formed_svg(slurp(svg)));

  const auto proj = scratch("proj.csv");
  std::ofstream(proj) << "label,role,x,y\nred,w_x,0.1,0.2\nred,w_a,-0.3,0.4\n";
  REQUIRE(cem_run({"render", "--kind", "projection", "--in", proj.string(), "--out", svg.string()}).code == 0);
  CHECK(well_formed_svg(slurp(svg)));

  REQUIRE(cem_run({"render", "--kind", "heatmap", "--ckpt", tiny_ckpt().string(), "--data", between_data().string(),
                   "--out", svg.string()})
              .code == 0);
  const std::string heat = slurp(svg);
  CHECK(well_formed_svg(heat));
  std::size_t cells = 0;
  for (std::size_t at = heat.find("<rect x="); at != std::string::npos; at = heat.find("<rect x=", at + 1)) ++cells;
  CHECK(cells >= 64 * 64);

  CHECK(cem_run({"render", "--kind", "heatmap", "--out", svg.string()}).code == cli::kExitUsage);
  CHECK(cem_run({"render", "--kind", "series", "--in", "/nonexistent.csv", "--out", svg.string()}).code ==
        cli::kExitIo);
}
