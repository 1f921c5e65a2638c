#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "flowsense/common.hpp"
#include "flowsense/ingest.hpp"

namespace flowsense::featurize {

using FeatureVec = std::array<double, kFeatureDim>;

struct HourlyFeature {
  std::string user_id;
  LocalHour hour;
  FeatureVec values{};
  std::int64_t flow_count = 0;

  double frac(std::size_t c) const { return values[c]; }
  double activity_pct() const { return values[kActivityDim]; }
  double circ_sin() const { return values[kCircSinDim]; }
  double circ_cos() const { return values[kCircCosDim]; }
};

// bytes_c / total_bytes over the canonical categories; all zero when total is zero.
std::array<double, kNumModelCategories> category_fractions(const ingest::HourlyTraffic& h);

// Tie-averaged ranks scaled to (rank - 1) / (n - 1); a single observation maps to 0.5.
std::vector<double> activity_percentile(std::span<const std::int64_t> flow_counts);

// (sin(2 pi h / 24), cos(2 pi h / 24)); throws std::out_of_range unless 0 <= h <= 23.
std::pair<double, double> circadian_encoding(int hour);

// Feature rows for every materialized hour, sorted by (user, hour). Percentiles are per user
// over that user's full observation period.
std::vector<HourlyFeature> build_features(const std::vector<ingest::HourlyTraffic>& hourly);

// Features grouped by user, each sorted by hour.
std::map<std::string, std::vector<HourlyFeature>> group_by_user(
    const std::vector<HourlyFeature>& features);

struct Window {
  std::string user_id;
  int block_id = 0;
  int start_offset = 0;  // within the block
  LocalHour start;
  std::vector<FeatureVec> rows;  // kWindowHours consecutive hours

  LocalHour hour_at(int pos) const { return start + pos; }
};

// Splits into maximal runs of consecutive hours; a run of length L yields max(0, L - 48)
// windows at stride 1 starting at offsets 0 .. L-49.
std::vector<Window> build_windows(std::span<const HourlyFeature> user_features);

inline constexpr std::size_t kMinWindowsPerUser = 20;

// Users whose window count reaches the minimum, in input (sorted) order.
std::vector<std::string> eligibility_filter(const std::map<std::string, std::size_t>& window_counts,
                                            std::size_t min_windows = kMinWindowsPerUser);

struct UserSplit {
  std::vector<Window> train;
  std::vector<Window> test;
};
using SplitPlan = std::map<std::string, UserSplit>;

// First ceil(train_frac * n) windows by start hour train; the rest test.
UserSplit chronological_split(std::vector<Window> windows, double train_frac = 0.7);

void write_features(std::ostream& out, const std::vector<HourlyFeature>& features);
std::vector<HourlyFeature> read_features(std::istream& in);

// Window index: user_id, block_id, start_offset, start_hour, split.
void write_window_index(std::ostream& out, const SplitPlan& plan);

}  // namespace flowsense::featurize
