#pragma once

#include <array>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "flowsense/common.hpp"

namespace flowsense::classical {

// Consecutive hourly activity values a_h with their hour-of-day and weekday labels.
struct HourlySeries {
  std::vector<double> values;
  std::vector<int> hour_of_day;
  std::vector<bool> weekend;

  std::size_t size() const { return values.size(); }

  // Labels derived from local hour stamps. Throws ConfigError on length mismatch.
  static HourlySeries from_hours(std::span<const LocalHour> hours, std::span<const double> values);
};

// Cross-day mean per hour of day; undefined for hours of day that never occur.
std::array<MaybeReal, 24> hour_profile(const HourlySeries& s);

MaybeReal interdaily_stability(const HourlySeries& s);
MaybeReal intradaily_variability(const HourlySeries& s);

// (M10 - L5) / (M10 + L5) over rolling windows on the whole series.
MaybeReal relative_amplitude(const HourlySeries& s);

struct BandMeans {
  MaybeReal night;      // 0-5
  MaybeReal morning;    // 6-11
  MaybeReal afternoon;  // 12-17
  MaybeReal evening;    // 18-23
  MaybeReal night_morning_ratio;
};
BandMeans band_means(const HourlySeries& s);

MaybeReal activity_centroid(const HourlySeries& s);

// (offset - onset) mod 24.
int span_hours(int onset, int offset);

struct ActiveWindow {
  int onset = 0;
  int offset = 0;
  int span = 0;
};
// Active hours of day are those whose profile is at or above the 25th percentile (linear
// interpolation) of the nonzero profile values. Onset and offset bound the active set once the
// longest circular run of inactive hours is removed; ties prefer a run touching midnight, then
// the earliest start. When the chosen run touches midnight this is the first and last active
// hour of the day; otherwise the window wraps (e.g. onset 22, offset 2).
std::optional<ActiveWindow> active_window(const HourlySeries& s);
MaybeReal active_span(const HourlySeries& s);

MaybeReal weekday_weekend_diff(const HourlySeries& s);

struct CircadianMetrics {
  MaybeReal is;
  MaybeReal iv;
  MaybeReal ra;
  BandMeans bands;
  MaybeReal activity_centroid;
  MaybeReal active_span_hours;
  MaybeReal weekday_weekend_diff;
};

CircadianMetrics compute_metrics(const HourlySeries& s);

inline constexpr std::array<std::string_view, 11> kMetricNames = {
    "is",        "iv",      "ra",
    "night",     "morning", "afternoon",
    "evening",   "night_morning_ratio", "activity_centroid",
    "active_span", "weekday_weekend_diff"};

std::array<MaybeReal, kMetricNames.size()> as_array(const CircadianMetrics& m);

}  // namespace flowsense::classical
