#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "dupguard/cli.hpp"
#include "dupguard/feature_store.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using dupguard::run_cli;

namespace {

struct Outcome {
  int code = 0;
  std::string out;
  std::string err;
};

Outcome cli(std::vector<std::string> args) {
  args.insert(args.begin(), "dupguard");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

fs::path fresh_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "dupguard_cli_tests" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

nlohmann::json read_json(const fs::path& p) { return nlohmann::json::parse(slurp(p)); }

}  // namespace

TEST_CASE("gen is replayable and records a manifest") {
  const auto a = fresh_dir("gen_a");
  const auto b = fresh_dir("gen_b");
  REQUIRE(cli({"--out", a.string(), "-q", "gen"}).code == 0);
  REQUIRE(cli({"--out", b.string(), "-q", "gen"}).code == 0);
  for (const char* f : {"synthetic/calib.ftrj", "synthetic/valid.ftrj", "synthetic/test.ftrj", "task.json"}) {
    CHECK(slurp(a / f) == slurp(b / f));
  }
  const auto manifest = read_json(a / "manifest.json");
  for (const auto& [path, entry] : manifest.at("files").items()) {
    CHECK(entry.at("bytes").get<std::uintmax_t>() == fs::file_size(a / path));
  }
  CHECK(manifest.at("files").contains("synthetic/test.ftrj"));
  CHECK(manifest.at("files").at("config.json").at("seed") == 2025);

  const auto c = fresh_dir("gen_c");
  REQUIRE(cli({"--out", c.string(), "--seed", "7", "-q", "gen"}).code == 0);
  CHECK(slurp(a / "synthetic/test.ftrj") != slurp(c / "synthetic/test.ftrj"));
  CHECK(read_json(c / "config.json").at("seed") == 7);
}

TEST_CASE("config errors name the field") {
  const auto dir = fresh_dir("schema");
  const auto cfg = dir / "cfg.json";
  std::ofstream(cfg) << R"({"seed": 3})";
  auto r = cli({"--config", cfg.string(), "--out", (dir / "run").string(), "gen"});
  CHECK(r.code == 1);
  CHECK(r.err.find("error[E_SCHEMA]") != std::string::npos);
  CHECK(r.err.find("\"scenario\"") != std::string::npos);

  std::ofstream(cfg) << R"({"scenario": {"shift_magnitude": 3.0}, "detector": {"kk": 3}})";
  r = cli({"--config", cfg.string(), "--out", (dir / "run").string(), "gen"});
  CHECK(r.code == 1);
  CHECK(r.err.find("detector.kk") != std::string::npos);

  std::ofstream(cfg) << "{ not json";
  r = cli({"--config", cfg.string(), "--out", (dir / "run").string(), "gen"});
  CHECK(r.code == 1);
  CHECK(r.err.find("error[E_FORMAT]") != std::string::npos);

  CHECK(cli({"--out", (dir / "run").string()}).code != 0);
  CHECK(cli({"--out", (dir / "run").string(), "bogus"}).code != 0);
}

TEST_CASE("fit and detect on synthetic trajectories") {
  const auto dir = fresh_dir("synthetic");
  REQUIRE(cli({"--out", dir.string(), "-q", "gen"}).code == 0);
  auto r = cli({"--out", dir.string(), "fit", "--source", "synthetic"});
  REQUIRE(r.code == 0);
  const auto det = read_json(dir / "synthetic/detector.json");
  CHECK(det.at("config").at("k") == 3);
  CHECK(det.at("fusion_alpha") == 0.9);
  CHECK(det.at("target_frr") == 0.05);
  CHECK(r.out.find("selected layers") != std::string::npos);

  const auto first = slurp(dir / "synthetic/detector.json");
  REQUIRE(cli({"--out", dir.string(), "-q", "fit", "--source", "synthetic"}).code == 0);
  CHECK(slurp(dir / "synthetic/detector.json") == first);

  REQUIRE(cli({"--out", dir.string(), "-q", "detect", "--source", "synthetic"}).code == 0);
  const auto csv = slurp(dir / "synthetic/verdicts.csv");
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 1001);
  const auto dp = dupguard::read_trajectories(dir / "synthetic/d_p.ftrj");
  const auto dc = dupguard::read_trajectories(dir / "synthetic/d_c.ftrj");
  CHECK(dp.size() + dc.size() == 1000);
  const auto metrics = read_json(dir / "synthetic/metrics.json");
  CHECK(metrics.at("detection").contains("auc"));
  CHECK(metrics.at("n") == 1000);

  // An all-clean input stays within the calibrated rate plus finite-n slack.
  fs::copy_file(dir / "synthetic/valid.ftrj", dir / "synthetic/test.ftrj", fs::copy_options::overwrite_existing);
  REQUIRE(cli({"--out", dir.string(), "-q", "detect", "--source", "synthetic"}).code == 0);
  const auto clean = read_json(dir / "synthetic/metrics.json");
  CHECK(clean.at("flagged").get<double>() / clean.at("n").get<double>() <= 0.05 + 2.0 / 500.0);

  fs::remove(dir / "synthetic/valid.ftrj");
  r = cli({"--out", dir.string(), "fit", "--source", "synthetic"});
  CHECK(r.code == 1);
  CHECK(r.err.find("error[E_IO]") != std::string::npos);
  CHECK(r.err.find("valid.ftrj") != std::string::npos);

  r = cli({"--out", dir.string(), "fit", "--source", "nowhere"});
  CHECK(r.code == 1);
  CHECK(r.err.find("--source") != std::string::npos);
}

TEST_CASE("purify requires a detector partition") {
  const auto dir = fresh_dir("order");
  REQUIRE(cli({"--out", dir.string(), "-q", "gen"}).code == 0);
  REQUIRE(cli({"--out", dir.string(), "-q", "implant"}).code == 0);
  const auto r = cli({"--out", dir.string(), "purify"});
  CHECK(r.code == 1);
  CHECK(r.err.find("dupguard detect") != std::string::npos);
}

TEST_CASE("full pipeline is byte-identical across runs") {
  const std::vector<std::vector<std::string>> steps{{"gen"}, {"implant"}, {"fit"}, {"detect"}, {"purify"}, {"eval"},
                                                    {"report"}};
  std::vector<fs::path> dirs{fresh_dir("full_a"), fresh_dir("full_b")};
  std::string eval_out;
  for (const auto& dir : dirs) {
    for (const auto& step : steps) {
      std::vector<std::string> args{"--out", dir.string()};
      args.insert(args.end(), step.begin(), step.end());
      const auto r = cli(args);
      REQUIRE_MESSAGE(r.code == 0, r.err);
      if (step.front() == "eval") eval_out = r.out;
    }
  }
  std::size_t compared = 0;
  for (const auto& entry : fs::recursive_directory_iterator(dirs[0])) {
    if (!entry.is_regular_file()) continue;
    const auto rel = fs::relative(entry.path(), dirs[0]);
    CHECK_MESSAGE(slurp(entry.path()) == slurp(dirs[1] / rel), rel.string());
    ++compared;
  }
  CHECK(compared >= 15);

  // Teacher and purified metrics side by side.
  CHECK(eval_out.find("teacher") != std::string::npos);
  CHECK(eval_out.find("purified") != std::string::npos);
  const auto ev = read_json(dirs[0] / "eval.json");
  CHECK(ev.at("models").contains("teacher"));
  CHECK(ev.at("models").contains("purified"));
  const auto report = read_json(dirs[0] / "report.json");
  CHECK(report.contains("purification"));
}
