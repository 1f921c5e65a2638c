#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace flowsense {

// Behavioral categories fed to the model, in canonical column order.
inline constexpr std::size_t kNumModelCategories = 5;
inline constexpr std::array<std::string_view, kNumModelCategories> kModelCategories = {
    "communication", "social_media", "streaming", "productivity", "system"};
inline constexpr std::size_t kSystemCategory = 4;

// 5 category fractions + activity percentile + sin/cos of hour-of-day.
inline constexpr std::size_t kFeatureDim = 8;
inline constexpr std::size_t kActivityDim = 5;
inline constexpr std::size_t kCircSinDim = 6;
inline constexpr std::size_t kCircCosDim = 7;
inline constexpr std::array<std::string_view, kFeatureDim> kFeatureNames = {
    "frac_communication", "frac_social_media", "frac_streaming", "frac_productivity",
    "frac_system",        "activity_pct",      "circ_sin",       "circ_cos"};

inline constexpr int kWindowHours = 48;

// Input is malformed or a configuration is invalid. Maps to exit code 1.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Data-dependent failure at run time (singular design, divergence, ...).
class RuntimeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Hour label in participant-local time: whole hours since 1970-01-01T00:00 local.
struct LocalHour {
  std::int64_t index = 0;

  int hour_of_day() const { return static_cast<int>(((index % 24) + 24) % 24); }
  std::int64_t day() const { return index >= 0 ? index / 24 : (index - 23) / 24; }
  // 0 = Monday ... 6 = Sunday.
  int weekday() const { return static_cast<int>(((day() + 3) % 7 + 7) % 7); }
  bool is_weekend() const { return weekday() >= 5; }

  friend auto operator<=>(const LocalHour&, const LocalHour&) = default;
  LocalHour operator+(std::int64_t h) const { return {index + h}; }
  std::int64_t operator-(const LocalHour& o) const { return index - o.index; }
};

// Real value that may be undefined (degenerate denominator, missing data).
using MaybeReal = std::optional<double>;

}  // namespace flowsense
