#include "dupguard/cli.hpp"

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "dupguard/error.hpp"
#include "dupguard/pipeline.hpp"
#include "dupguard/rng.hpp"
#include "json.hpp"

namespace dupguard {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Options {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out_dir = "dupguard-run";
  bool quiet = false;
  std::string source = "toy";
};

class Session {
 public:
  Session(const Options& opt, std::ostream& out) : opt_(opt), out_(out), root_(opt.out_dir) {}

  const fs::path& root() const { return root_; }
  std::ostream& log() { return opt_.quiet ? null_ : out_; }

  /// --config wins over <out>/config.json, which wins over the defaults.
  ExperimentConfig config(bool require_scenario) const {
    json j = json::object();
    if (!opt_.config_path.empty()) {
      j = read_json(opt_.config_path);
      if (!j.is_object()) fail(ErrorCode::kSchema, "config: top level must be an object");
      if (require_scenario && !j.contains("scenario")) {
        fail(ErrorCode::kSchema, "config: missing required field \"scenario\"");
      }
    } else if (fs::exists(root_ / "config.json")) {
      j = read_json(root_ / "config.json");
    }
    if (opt_.seed) j["seed"] = *opt_.seed;
    return ExperimentConfig::from_json(j);
  }

  static json read_json(const fs::path& path) {
    std::ifstream is(path);
    if (!is) fail(ErrorCode::kIo, "cannot open for reading: " + path.string());
    try {
      return json::parse(is);
    } catch (const json::parse_error& e) {
      fail(ErrorCode::kFormat, path.string() + ": " + e.what());
    }
  }

  std::uint64_t write_json(const fs::path& rel, const json& j, std::optional<std::uint64_t> seed = std::nullopt) {
    const auto text = j.dump(2) + "\n";
    return write_text(rel, text, seed);
  }

  std::uint64_t write_text(const fs::path& rel, const std::string& text, std::optional<std::uint64_t> seed = std::nullopt) {
    const auto path = prepare(rel);
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) fail(ErrorCode::kIo, "cannot open for writing: " + path.string());
    os << text;
    if (!os) fail(ErrorCode::kIo, "write failed: " + path.string());
    record(rel, text.size(), seed);
    return text.size();
  }

  std::uint64_t write_ftrj(const fs::path& rel, const TrajectoryDataset& ds, std::optional<std::uint64_t> seed = std::nullopt) {
    const auto bytes = write_trajectories(ds, prepare(rel));
    record(rel, bytes, seed);
    return bytes;
  }

  void remove(const fs::path& rel) {
    std::error_code ec;
    fs::remove(root_ / rel, ec);
    files_.erase(rel.generic_string());
    removed_.push_back(rel.generic_string());
  }

  /// Merges this command's outputs into <out>/manifest.json.
  void flush_manifest(std::uint64_t global_seed) {
    json manifest{{"format", "dupguard.manifest"}, {"files", json::object()}};
    if (fs::exists(root_ / "manifest.json")) manifest = read_json(root_ / "manifest.json");
    manifest["seed"] = global_seed;
    for (const auto& name : removed_) manifest["files"].erase(name);
    for (const auto& [name, entry] : files_.items()) manifest["files"][name] = entry;
    const auto text = manifest.dump(2) + "\n";
    std::ofstream os(root_ / "manifest.json", std::ios::binary | std::ios::trunc);
    if (!os) fail(ErrorCode::kIo, "cannot write manifest in " + root_.string());
    os << text;
  }

  fs::path need(const fs::path& rel, const std::string& hint) const {
    const auto path = root_ / rel;
    if (!fs::exists(path)) fail(ErrorCode::kIo, "missing " + path.string() + "; " + hint);
    return path;
  }

 private:
  fs::path prepare(const fs::path& rel) {
    const auto path = root_ / rel;
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
    if (ec) fail(ErrorCode::kIo, "cannot create directory " + path.parent_path().string() + ": " + ec.message());
    return path;
  }

  void record(const fs::path& rel, std::uint64_t bytes, std::optional<std::uint64_t> seed) {
    json entry{{"bytes", bytes}};
    entry["seed"] = seed ? json(*seed) : json(nullptr);
    files_[rel.generic_string()] = entry;
  }

  Options opt_;
  std::ostream& out_;
  std::ostringstream null_;
  fs::path root_;
  json files_ = json::object();
  std::vector<std::string> removed_;
};

fs::path source_dir(const std::string& source) {
  if (source != "toy" && source != "synthetic") {
    fail(ErrorCode::kInvalidArgument, "--source must be \"toy\" or \"synthetic\", got \"" + source + "\"");
  }
  return source;
}

ToyTask load_task(const Session& s) {
  return ToyTask::from_json(Session::read_json(s.need("task.json", "run `dupguard gen` first")));
}

ToyClassifier load_model(const Session& s, const fs::path& rel, const std::string& hint) {
  return ToyClassifier::from_json(Session::read_json(s.need(rel, hint)));
}

std::string fmt(double v, int precision = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(precision) << v;
  return os.str();
}

void cmd_gen(Session& s, const ExperimentConfig& cfg) {
  const auto sets = gen_synthetic_sets(cfg);
  const auto ref_seed = derive_seed(cfg.scenario.seed, "reference");
  s.write_ftrj("synthetic/calib.ftrj", sets.calib, ref_seed);
  s.write_ftrj("synthetic/valid.ftrj", sets.valid, ref_seed);
  s.write_ftrj("synthetic/test.ftrj", sets.test, derive_seed(cfg.scenario.seed, "test"));
  const auto task = gen_toy_task(cfg.scenario);
  s.write_json("task.json", task.to_json(), cfg.scenario.seed);
  s.write_json("config.json", cfg.to_json(), cfg.seed);
  s.log() << "synthetic: calib " << sets.calib.size() << ", valid " << sets.valid.size() << ", test "
          << sets.test.size() << " trajectories (L=" << sets.test.layers() << ", d=" << sets.test.dim() << ")\n"
          << "toy task: train " << task.train.size() << ", reserve " << task.reserve.size() << ", stream "
          << task.stream.size() << ", clean_test " << task.clean_test.size() << ", poison_test "
          << task.poison_test.size() << "\n";
}

void cmd_implant(Session& s, const ExperimentConfig& cfg) {
  const auto task = load_task(s);
  const auto teacher = build_teacher(cfg, task);
  const auto& model = teacher.implant.model;
  s.write_json("model.json", model.to_json(), cfg.model_seed());
  s.write_json("implant_report.json",
               {{"pretrain_loss_log", teacher.pretrain_log}, {"implant", teacher.implant.to_json()},
                {"adaptive_reg_alpha", cfg.scenario.adaptive_reg_alpha}},
               cfg.attack.seed);
  const auto sets = calibration_sets(model, task, cfg.split);
  s.write_ftrj("toy/calib.ftrj", sets.calib, cfg.split.seed);
  s.write_ftrj("toy/valid.ftrj", sets.valid, cfg.split.seed);
  s.write_ftrj("toy/test.ftrj", stream_trajectories(model, task), cfg.scenario.seed);
  s.log() << "implant: CACC " << fmt(teacher.implant.post.cacc) << ", ASR " << fmt(teacher.implant.post.asr)
          << " (before: CACC " << fmt(teacher.implant.pre.cacc) << ", ASR " << fmt(teacher.implant.pre.asr) << ")\n";
}

void cmd_fit(Session& s, const ExperimentConfig& cfg, const fs::path& dir) {
  const auto calib = read_trajectories(s.need(dir / "calib.ftrj", "run `dupguard gen` (synthetic) or `dupguard implant` (toy) first"));
  const auto valid = read_trajectories(s.need(dir / "valid.ftrj", "a validation set is required to calibrate the threshold"));
  const auto model = fit_detector(calib, valid, cfg.detector);
  s.write_json(dir / "detector.json", model.to_json());
  auto& log = s.log();
  log << "detector: k=" << cfg.detector.k << ", alpha=" << cfg.detector.fusion_alpha
      << ", target FRR=" << cfg.detector.target_frr << ", aggregate=" << to_string(cfg.detector.aggregate) << "\n"
      << "selected layers:";
  for (auto l : model.selected_layers) log << ' ' << l;
  log << "\nthreshold tau=" << std::setprecision(17) << model.threshold << "\n";
}

void cmd_detect(Session& s, const fs::path& dir) {
  const auto model = DetectorModel::from_json(Session::read_json(s.need(dir / "detector.json", "run `dupguard fit` first")));
  const auto data = read_trajectories(s.need(dir / "test.ftrj", "run `dupguard gen` or `dupguard implant` first"));
  const auto det = detect_batch(data, model);

  std::ostringstream csv;
  write_verdict_csv(csv, det.verdicts, data.poison_mask);
  s.write_text(dir / "verdicts.csv", csv.str());
  for (const auto& [name, part] : {std::pair{"d_p.ftrj", &det.poisoned}, std::pair{"d_c.ftrj", &det.clean}}) {
    if (part->empty()) {
      s.remove(dir / name);
    } else {
      s.write_ftrj(dir / name, *part);
    }
  }
  s.write_json(dir / "partition.json", {{"format", "dupguard.partition"},
                                        {"n", data.size()},
                                        {"poisoned_indices", det.poisoned_indices},
                                        {"clean_indices", det.clean_indices}});

  json metrics{{"n", data.size()}, {"flagged", det.poisoned_indices.size()}, {"threshold", model.threshold}};
  auto& log = s.log();
  log << "flagged " << det.poisoned_indices.size() << " of " << data.size() << "\n";
  if (data.poison_mask) {
    const auto m = detection_metrics(det.verdicts, *data.poison_mask);
    metrics["detection"] = m.to_json();
    log << "AUC " << fmt(m.auc) << ", FAR " << (m.far ? fmt(*m.far) : "n/a") << ", FRR "
        << (m.frr ? fmt(*m.frr) : "n/a") << "\n";
  }
  s.write_json(dir / "metrics.json", metrics);
}

void cmd_purify(Session& s, const ExperimentConfig& cfg) {
  const auto part_path = s.root() / "toy" / "partition.json";
  if (!fs::exists(part_path)) {
    fail(ErrorCode::kInvalidArgument,
         "purify needs a detector partition (" + part_path.string() + "); run `dupguard detect --source toy` first");
  }
  const auto pj = Session::read_json(part_path);
  const auto task = load_task(s);
  const auto teacher = load_model(s, "model.json", "run `dupguard implant` first");
  Partition part;
  try {
    part = partition_stream(task, pj.at("poisoned_indices").get<std::vector<std::size_t>>(),
                            pj.at("clean_indices").get<std::vector<std::size_t>>());
  } catch (const json::exception& e) {
    fail(ErrorCode::kSchema, std::string("partition.json: ") + e.what());
  }
  const auto report = run_purify(teacher, task, part, cfg.unlearn);
  s.write_json("purified.json", merge_adapters(report.student_base, report.adapters).to_json());
  s.write_json("adapters.json", report.adapters.to_json(), derive_seed(cfg.unlearn.train.seed, "unlearn.adapters"));
  auto rj = report.to_json();
  rj["lambda_asr"] = cfg.unlearn.lambda_asr;
  rj["lambda_acc"] = cfg.unlearn.lambda_acc;
  rj["d_p"] = part.poisoned_indices.size();
  rj["d_c"] = part.clean_indices.size();
  s.write_json("purify_report.json", rj, cfg.unlearn.train.seed);
  s.log() << "purify: " << report.epochs.size() << " epochs" << (report.stopped_early ? " (early stop)" : "")
          << "; CACC " << fmt(report.pre->cacc) << " -> " << fmt(report.post->cacc) << ", ASR " << fmt(report.pre->asr)
          << " -> " << fmt(report.post->asr) << "\n";
}

json eval_all(const Session& s) {
  json j{{"models", json::object()}, {"detectors", json::object()}};
  if (fs::exists(s.root() / "task.json") && fs::exists(s.root() / "model.json")) {
    const auto task = load_task(s);
    for (const auto& [name, file] : {std::pair{"teacher", "model.json"}, std::pair{"purified", "purified.json"}}) {
      if (!fs::exists(s.root() / file)) continue;
      const auto model = load_model(s, file, "");
      j["models"][name] = eval_attack(model, task.clean_test, task.poison_test, task.target_label).to_json();
    }
  }
  for (const std::string source : {"synthetic", "toy"}) {
    const auto dir = s.root() / source;
    if (!fs::exists(dir / "detector.json") || !fs::exists(dir / "test.ftrj")) continue;
    const auto model = DetectorModel::from_json(Session::read_json(dir / "detector.json"));
    const auto data = read_trajectories(dir / "test.ftrj");
    if (!data.poison_mask) continue;
    const auto det = detect_batch(data, model);
    j["detectors"][source] = detection_metrics(det.verdicts, *data.poison_mask).to_json();
  }
  return j;
}

void cmd_eval(Session& s) {
  const auto j = eval_all(s);
  if (j["models"].empty() && j["detectors"].empty()) {
    fail(ErrorCode::kIo, "nothing to evaluate in " + s.root().string() + "; run `dupguard implant` or `dupguard fit` first");
  }
  s.write_json("eval.json", j);
  auto& log = s.log();
  if (!j["models"].empty()) {
    log << std::left << std::setw(10) << "model" << std::setw(10) << "CACC" << "ASR\n";
    for (const auto& [name, m] : j["models"].items()) {
      log << std::setw(10) << name << std::setw(10) << fmt(m["cacc"].get<double>()) << fmt(m["asr"].get<double>()) << "\n";
    }
  }
  if (!j["detectors"].empty()) {
    log << std::left << std::setw(10) << "detector" << std::setw(10) << "AUC" << std::setw(10) << "FAR" << "FRR\n";
    for (const auto& [name, m] : j["detectors"].items()) {
      const auto show = [](const json& v) { return v.is_null() ? std::string("n/a") : fmt(v.get<double>()); };
      log << std::setw(10) << name << std::setw(10) << show(m["auc"]) << std::setw(10) << show(m["far"]) << show(m["frr"])
          << "\n";
    }
  }
}

void cmd_report(Session& s) {
  json r{{"format", "dupguard.report"}};
  const auto take = [&](const fs::path& rel, const std::string& key, auto&& extract) {
    if (fs::exists(s.root() / rel)) r[key] = extract(Session::read_json(s.root() / rel));
  };
  take("config.json", "config", [](const json& j) { return j; });
  take("implant_report.json", "implant", [](const json& j) {
    return json{{"pre_attack", j.at("implant").at("pre_attack")}, {"post_attack", j.at("implant").at("post_attack")}};
  });
  take("synthetic/metrics.json", "synthetic_detection", [](const json& j) { return j; });
  take("toy/metrics.json", "toy_detection", [](const json& j) { return j; });
  take("purify_report.json", "purification", [](const json& j) {
    json p{{"epochs_run", j.at("epochs_run")}, {"stopped_early", j.at("stopped_early")}, {"checksums", j.at("checksums")}};
    for (const auto* key : {"pre_purification", "post_purification"}) {
      if (j.contains(key)) p[key] = j.at(key);
    }
    return p;
  });
  take("eval.json", "eval", [](const json& j) { return j; });
  if (r.size() == 1) fail(ErrorCode::kIo, "no results found in " + s.root().string());
  s.write_json("report.json", r);
  s.log() << r.dump(2) << "\n";
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Backdoor input detection and adapter-based purification toolkit"};
  app.name("dupguard");
  app.require_subcommand(1, 1);
  app.fallthrough();
  Options opt;
  std::uint64_t seed = 0;
  app.add_option("--config", opt.config_path, "JSON experiment config")->check(CLI::ExistingFile);
  auto* seed_opt = app.add_option("--seed", seed, "Override the global seed");
  app.add_option("--out", opt.out_dir, "Working directory for inputs and outputs")->capture_default_str();
  app.add_flag("--quiet,-q", opt.quiet, "Suppress progress output");

  auto* gen = app.add_subcommand("gen", "Generate synthetic trajectories and the toy task");
  auto* implant = app.add_subcommand("implant", "Train the toy classifier and implant the backdoor");
  auto* fit = app.add_subcommand("fit", "Fit the detector on calibration and validation trajectories");
  auto* detect = app.add_subcommand("detect", "Score a trajectory set and partition it");
  auto* purify = app.add_subcommand("purify", "Unlearn the backdoor on the detected partition");
  auto* eval = app.add_subcommand("eval", "Evaluate models and detectors side by side");
  auto* report = app.add_subcommand("report", "Aggregate every result into report.json");
  for (auto* sub : {fit, detect}) {
    sub->add_option("--source", opt.source, "Trajectory set: toy or synthetic")->capture_default_str();
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err);
  }
  if (*seed_opt) opt.seed = seed;

  try {
    Session s(opt, out);
    const auto cfg = s.config(gen->parsed());
    if (gen->parsed()) cmd_gen(s, cfg);
    if (implant->parsed()) cmd_implant(s, cfg);
    if (fit->parsed()) cmd_fit(s, cfg, source_dir(opt.source));
    if (detect->parsed()) cmd_detect(s, source_dir(opt.source));
    if (purify->parsed()) cmd_purify(s, cfg);
    if (eval->parsed()) cmd_eval(s);
    if (report->parsed()) cmd_report(s);
    s.flush_manifest(cfg.seed);
  } catch (const Error& e) {
    err << "error[" << error_code_name(e.code()) << "]: " << e.what() << "\n";
    return 1;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "error[" << error_code_name(ErrorCode::kIo) << "]: " << e.what() << "\n";
    return 1;
  } catch (const nlohmann::json::exception& e) {
    err << "error[" << error_code_name(ErrorCode::kSchema) << "]: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace dupguard
