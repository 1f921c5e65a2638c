#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

#include "flowsense/common.hpp"

namespace flowsense::timeutil {

inline constexpr std::int64_t kMsPerHour = 3'600'000;
inline constexpr std::int64_t kMsPerMinute = 60'000;
inline constexpr int kMaxTzOffsetMinutes = 14 * 60;

// Floor division that rounds toward negative infinity.
constexpr std::int64_t floor_div(std::int64_t a, std::int64_t b) {
  std::int64_t q = a / b;
  if ((a % b != 0) && ((a < 0) != (b < 0))) --q;
  return q;
}

// UTC epoch milliseconds to the local hour label under a fixed offset.
// DST transitions are not modeled.
constexpr LocalHour to_local_hour(std::int64_t utc_ms, int tz_offset_minutes) {
  return {floor_div(utc_ms + tz_offset_minutes * kMsPerMinute, kMsPerHour)};
}

// Local epoch milliseconds (wall-clock ms since local 1970-01-01T00:00).
constexpr std::int64_t to_local_ms(std::int64_t utc_ms, int tz_offset_minutes) {
  return utc_ms + tz_offset_minutes * kMsPerMinute;
}

// Days since 1970-01-01 for a proleptic Gregorian date.
std::int64_t days_from_civil(int year, unsigned month, unsigned day);
void civil_from_days(std::int64_t days, int& year, unsigned& month, unsigned& day);

// "YYYY-MM-DDTHH:00" in local time.
std::string format_hour(LocalHour h);
std::optional<LocalHour> parse_hour(std::string_view s);

void validate_tz_offset(int tz_offset_minutes);

}  // namespace flowsense::timeutil
