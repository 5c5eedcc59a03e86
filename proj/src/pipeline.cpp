#include "dupguard/pipeline.hpp"

#include <algorithm>
#include <set>

#include "dupguard/error.hpp"
#include "dupguard/rng.hpp"

namespace dupguard {

ExperimentConfig::ExperimentConfig() {
  pretrain.epochs = 10;
  attack.epochs = 10;
  reseed(seed);
}

void ExperimentConfig::reseed(std::uint64_t global_seed) {
  seed = global_seed;
  scenario.seed = derive_seed(seed, "scenario");
  pretrain.seed = derive_seed(seed, "pretrain");
  attack.seed = derive_seed(seed, "attack");
  split.seed = derive_seed(seed, "split");
  unlearn.train.seed = derive_seed(seed, "unlearn");
}

std::uint64_t ExperimentConfig::model_seed() const { return derive_seed(seed, "model"); }

std::vector<std::size_t> ExperimentConfig::model_dims() const {
  std::vector<std::size_t> dims{scenario.input_dim};
  dims.insert(dims.end(), scenario.hidden_layers, scenario.hidden_dim);
  dims.push_back(scenario.classes);
  return dims;
}

nlohmann::json detector_config_to_json(const DetectorConfig& c) {
  return {{"k", c.k},
          {"aggregate", to_string(c.aggregate)},
          {"shrinkage_gamma", c.shrinkage_gamma},
          {"fusion_alpha", c.fusion_alpha},
          {"target_frr", c.target_frr},
          {"jitter", c.jitter},
          {"singular_value_rel_tol", c.singular_value_rel_tol}};
}

namespace {

void reject_unknown(const nlohmann::json& j, const nlohmann::json& known, const std::string& section) {
  if (!j.is_object()) fail(ErrorCode::kSchema, "config: section \"" + section + "\" must be an object");
  for (const auto& [key, value] : j.items()) {
    if (!known.contains(key)) fail(ErrorCode::kSchema, "config: unknown field \"" + section + "." + key + "\"");
  }
}

void reject_seed(const nlohmann::json& j, const std::string& section) {
  if (j.is_object() && j.contains("seed")) {
    fail(ErrorCode::kSchema, "config: field \"" + section + ".seed\" is not allowed; seeds derive from the top-level seed");
  }
}

}  // namespace

DetectorConfig detector_config_from_json(const nlohmann::json& j, DetectorConfig c) {
  reject_unknown(j, detector_config_to_json(c), "detector");
  try {
    c.k = j.value("k", c.k);
    if (j.contains("aggregate")) c.aggregate = aggregate_from_string(j.at("aggregate").get<std::string>());
    c.shrinkage_gamma = j.value("shrinkage_gamma", c.shrinkage_gamma);
    c.fusion_alpha = j.value("fusion_alpha", c.fusion_alpha);
    c.target_frr = j.value("target_frr", c.target_frr);
    c.jitter = j.value("jitter", c.jitter);
    c.singular_value_rel_tol = j.value("singular_value_rel_tol", c.singular_value_rel_tol);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kSchema, std::string("config: detector: ") + e.what());
  }
  return c;
}

nlohmann::json ExperimentConfig::to_json() const {
  auto scen = scenario.to_json();
  scen.erase("seed");
  auto pre = pretrain.to_json();
  pre.erase("seed");
  auto att = attack.to_json();
  att.erase("seed");
  auto unl = unlearn.to_json();
  unl["train"].erase("seed");
  return {{"seed", seed},
          {"n_reference", n_reference},
          {"residual", residual},
          {"scenario", scen},
          {"pretrain", pre},
          {"attack", att},
          {"detector", detector_config_to_json(detector)},
          {"split", {{"calib_fraction", split.calib_fraction}}},
          {"unlearn", unl}};
}

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  reject_unknown(j, c.to_json(), "<root>");
  try {
    c.reseed(j.value("seed", c.seed));
    c.n_reference = j.value("n_reference", c.n_reference);
    c.residual = j.value("residual", c.residual);
    if (j.contains("scenario")) {
      reject_seed(j.at("scenario"), "scenario");
      auto merged = c.scenario.to_json();
      for (const auto& [key, value] : j.at("scenario").items()) {
        if (!merged.contains(key)) fail(ErrorCode::kSchema, "config: unknown field \"scenario." + key + "\"");
        merged[key] = value;
      }
      c.scenario = ScenarioSpec::from_json(merged);
    }
    for (const char* name : {"pretrain", "attack"}) {
      if (!j.contains(name)) continue;
      reject_seed(j.at(name), name);
      TrainConfig& t = std::string(name) == "pretrain" ? c.pretrain : c.attack;
      reject_unknown(j.at(name), t.to_json(), name);
      t = TrainConfig::from_json(j.at(name), t);
    }
    if (j.contains("detector")) c.detector = detector_config_from_json(j.at("detector"), c.detector);
    if (j.contains("split")) {
      reject_seed(j.at("split"), "split");
      reject_unknown(j.at("split"), {{"calib_fraction", 0.5}}, "split");
      c.split.calib_fraction = j.at("split").value("calib_fraction", c.split.calib_fraction);
    }
    if (j.contains("unlearn")) {
      const auto& u = j.at("unlearn");
      reject_unknown(u, c.unlearn.to_json(), "unlearn");
      if (u.contains("train")) {
        reject_seed(u.at("train"), "unlearn.train");
        reject_unknown(u.at("train"), c.unlearn.train.to_json(), "unlearn.train");
      }
      const auto seed_keep = c.unlearn.train.seed;
      c.unlearn = UnlearnConfig::from_json(u);
      c.unlearn.train.seed = seed_keep;
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kSchema, std::string("config: ") + e.what());
  }
  require(c.n_reference >= 4, "config: n_reference must be at least 4");
  require(c.split.calib_fraction > 0.0 && c.split.calib_fraction < 1.0, "config: split.calib_fraction must lie in (0, 1)");
  c.scenario.validate();
  c.detector.validate(c.scenario.hidden_layers);
  return c;
}

SyntheticSets gen_synthetic_sets(const ExperimentConfig& cfg) {
  ScenarioSpec ref = cfg.scenario;
  ref.n_clean = cfg.n_reference;
  ref.n_poison = 0;
  ref.seed = derive_seed(cfg.scenario.seed, "reference");
  auto [calib, valid] = split_calib_valid(gen_synthetic_trajectories(ref), cfg.split);
  // The reference set is clean by construction; the mask adds nothing.
  calib.poison_mask.reset();
  valid.poison_mask.reset();

  ScenarioSpec test = cfg.scenario;
  test.seed = derive_seed(cfg.scenario.seed, "test");
  return {std::move(calib), std::move(valid), gen_synthetic_trajectories(test)};
}

Teacher build_teacher(const ExperimentConfig& cfg, const ToyTask& task) {
  const auto init = init_model(cfg.model_dims(), cfg.model_seed(), cfg.residual);
  auto pre = pretrain_clean(init, task, cfg.pretrain);
  Teacher t;
  t.pretrain_log = std::move(pre.loss_log);
  t.implant = implant_backdoor(pre.model, task, cfg.attack, cfg.scenario.adaptive_reg_alpha);
  return t;
}

CalibrationSets calibration_sets(const ToyClassifier& model, const ToyTask& task, const SplitConfig& split) {
  auto ref = extract_trajectories(model, task.reserve.x, std::nullopt, task.reserve.y);
  auto [calib, valid] = split_calib_valid(ref, split);
  return {std::move(calib), std::move(valid)};
}

TrajectoryDataset stream_trajectories(const ToyClassifier& model, const ToyTask& task) {
  return extract_trajectories(model, task.stream.x, task.stream_poison, task.stream.y);
}

Partition partition_stream(const ToyTask& task, std::vector<std::size_t> poisoned_indices,
                           std::vector<std::size_t> clean_indices) {
  std::set<std::size_t> seen;
  for (auto i : poisoned_indices) {
    require(i < task.stream.size(), "partition index out of range");
    require(seen.insert(i).second, "partition indices must be disjoint");
  }
  for (auto i : clean_indices) {
    require(i < task.stream.size(), "partition index out of range");
    require(seen.insert(i).second, "partition indices must be disjoint");
  }
  Partition p;
  p.d_p = task.stream.subset(poisoned_indices).x;
  p.d_c = task.stream.subset(clean_indices);
  p.poisoned_indices = std::move(poisoned_indices);
  p.clean_indices = std::move(clean_indices);
  return p;
}

PurifyReport run_purify(const ToyClassifier& teacher, const ToyTask& task, const Partition& part,
                        const UnlearnConfig& cfg) {
  return purify(teacher, part.d_p, part.d_c, cfg, EvalSets{&task.clean_test, &task.poison_test, task.target_label});
}

EndToEnd run_end_to_end(const ExperimentConfig& cfg) {
  EndToEnd run;
  run.task = gen_toy_task(cfg.scenario);
  run.teacher = build_teacher(cfg, run.task);
  const auto& model = run.teacher.implant.model;
  const auto sets = calibration_sets(model, run.task, cfg.split);
  run.detector = fit_detector(sets.calib, sets.valid, cfg.detector);
  const auto stream = stream_trajectories(model, run.task);
  run.detection = detect_batch(stream, run.detector);
  run.detection_metrics = detection_metrics(run.detection.verdicts, *stream.poison_mask);
  run.partition = partition_stream(run.task, run.detection.poisoned_indices, run.detection.clean_indices);
  run.purify = run_purify(model, run.task, run.partition, cfg.unlearn);
  return run;
}

PurifyReport repurify(const EndToEnd& run, const UnlearnConfig& cfg) {
  return run_purify(run.teacher.implant.model, run.task, run.partition, cfg);
}

}  // namespace dupguard
