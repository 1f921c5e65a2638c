#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "flowsense/ingest.hpp"
#include "flowsense/stats.hpp"

namespace flowsense::synth {

inline constexpr int kManifestVersion = 1;

// A category-heavy routine injected into a band of hours. `between` patterns hold a per-user
// constant prevalence; `within` patterns vary week to week around a common mean.
struct PlantedPattern {
  std::string name;
  std::string category;
  int band_start = 19;  // hour of day, inclusive
  int band_end = 22;    // inclusive, no wrap
  std::string kind = "between";
  double prevalence_min = 0.1;  // between: per-user prevalence stratified over [min, max]
  double prevalence_max = 0.9;
  double prevalence_mean = 0.5;  // within: weekly prevalence ~ mean + U(-jitter, jitter)
  double jitter = 0.35;
  double boost_flows = 8.0;  // mean extra flows per planted hour
  std::string outcome = "stress";
  double beta = 1.0;  // per pooled SD of the realized weekly prevalence
};

struct SynthConfig {
  int n_users = 10;
  int weeks = 3;
  std::uint64_t seed = 42;
  int tz_offset_minutes = -300;
  std::string start_date = "2025-01-06";  // local midnight, first day of data
  double dropout_rate = 0.0;              // per user-day probability of a 2-6 hour gap
  double mean_flows_per_hour = 6.0;
  double baseline_spread = 0.8;  // log-scale spread of per-user category mixes
  double morning_sd = 0.35;      // log-scale SD of the weekly morning activity factor
  double noise_sd = 1.0;
  std::map<std::string, double> outcome_mean = {{"sleep", 12.0}, {"stress", 12.0},
                                                {"loneliness", 6.0}};
  std::vector<PlantedPattern> patterns;

  // Enumerates every violation, including effect sizes too large for the instrument range.
  void validate() const;
  nlohmann::json to_json() const;
  static SynthConfig from_json(const nlohmann::json& j);
  // Config used by the bundled examples: one between and one within pattern.
  static SynthConfig bundled(int n_users = 10, int weeks = 3);
};

struct Cohort {
  std::vector<ingest::FlowRecord> flows;
  std::vector<stats::SurveyResponse> surveys;
  nlohmann::json manifest;
};

Cohort generate_cohort(const SynthConfig& cfg, const ingest::Dictionary& dict);

// Writes flows.csv, surveys.csv and ground_truth.json into `dir` (created if needed).
void write_cohort(const std::string& dir, const Cohort& cohort);

// Instrument totals rebuilt from the manifest alone (noiseless value + recorded noise, rounded
// and clipped), keyed by (user, survey_ts_ms); each entry is sleep, stress, loneliness.
std::map<std::pair<std::string, std::int64_t>, std::array<int, 3>> outcomes_from_manifest(
    const nlohmann::json& manifest);

// Item responses whose scored totals equal the requested instrument totals.
stats::SurveyResponse backfill_items(const std::string& user_id, std::int64_t ts,
                                     const std::array<int, 3>& totals);

}  // namespace flowsense::synth
