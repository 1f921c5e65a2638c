#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "flowsense/backbone.hpp"
#include "flowsense/ingest.hpp"
#include "flowsense/interpret.hpp"
#include "flowsense/sae.hpp"
#include "flowsense/stats.hpp"
#include "flowsense/synth.hpp"
#include "flowsense/train.hpp"

namespace flowsense::pipeline {

inline constexpr std::string_view kVersion = "0.1.0";
inline constexpr std::string_view kRunManifest = "run_manifest.json";

struct Paths {
  std::string flows;    // empty: stages read the synthetic cohort under out_dir/synth
  std::string surveys;  // empty with real flows: stats is skipped, probes use calendar weeks
  std::string hosts = "data/sample_dictionary/hosts.csv";
  std::string apps = "data/sample_dictionary/apps.csv";
  std::string out_dir = "run";
};

struct FeaturizeParams {
  std::size_t min_windows = featurize::kMinWindowsPerUser;
};

struct InterpretParams {
  std::size_t generality_top_n = 50;
  double generality_fraction = 0.40;
  double label_high = 1.5;
  double label_low = 0.7;
  std::size_t label_top_n = 100;
  std::size_t reference_codes = 256;
  double perturbation_multiplier = 5.0;
};

struct StatsParams {
  double fdr_alpha = 0.05;
  std::string sign_rule = "outcome_agreement";  // or "prediction_majority"
  double delta_rmse_pct = 0.5;
  double sign_pct = 60.0;
  double gee_tol = 1e-8;
  int gee_max_iter = 100;
  std::size_t min_pre_survey_hours = stats::kMinPreSurveyHours;
};

struct RunConfig {
  Paths paths;
  int tz_offset_minutes = 0;
  std::uint64_t seed = 42;
  int threads = 1;
  backbone::ModelShape model;
  train::TrainConfig train;
  sae::SaeConfig sae;
  ingest::SelectionThresholds selection;
  FeaturizeParams featurize;
  InterpretParams interpret;
  StatsParams stats;
  synth::SynthConfig synth = synth::SynthConfig::bundled();

  // Validation gathers every violation before throwing one ConfigError. Relative paths are
  // resolved against `base_dir`.
  static RunConfig from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
  static RunConfig load(const std::string& path);
  nlohmann::json to_json() const;
  void validate() const;
  // Component seeds all follow the run seed.
  void apply_seed(std::uint64_t s);
  interpret::InterpretConfig interpret_config() const;
  stats::StatsConfig stats_config() const;
};

// The config written by `init`: every hyperparameter spelled out at its default.
nlohmann::json default_config_json();

// JSON pointers whose values differ from the defaults.
std::vector<std::string> overrides(const nlohmann::json& effective);

std::string sha256_file(const std::string& path);
std::string sha256_text(const std::string& text);

struct StageReport {
  std::string stage;
  std::vector<std::string> outputs;
  bool nonconverged = false;  // stats: at least one GEE fit hit the iteration cap
  nlohmann::json summary;
};

// Each stage reads its inputs from files, writes outputs under out_dir/<stage>/ and a run
// manifest with config hash, seed, versions and input/output checksums.
StageReport run_synth(const RunConfig& cfg);
StageReport run_ingest(const RunConfig& cfg);
StageReport run_featurize(const RunConfig& cfg);
StageReport run_classical(const RunConfig& cfg);
StageReport run_train(const RunConfig& cfg);
StageReport run_sae(const RunConfig& cfg);
StageReport run_interpret(const RunConfig& cfg);
StageReport run_stats(const RunConfig& cfg);
StageReport run_probe(const RunConfig& cfg);

// Chains every stage; generates the synthetic cohort first when no flow file is configured.
std::vector<StageReport> run_all(const RunConfig& cfg, std::ostream* progress = nullptr);

// Artifact locations shared by producers and consumers.
std::filesystem::path stage_dir(const RunConfig& cfg, std::string_view stage);
std::filesystem::path artifact(const RunConfig& cfg, std::string_view stage, std::string_view file);

}  // namespace flowsense::pipeline
