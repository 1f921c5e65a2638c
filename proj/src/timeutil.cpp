#include "flowsense/timeutil.hpp"

#include <cstdio>

#include "flowsense/csv.hpp"

namespace flowsense::timeutil {

// Howard Hinnant's civil calendar algorithms.
std::int64_t days_from_civil(int year, unsigned month, unsigned day) {
  year -= month <= 2;
  const std::int64_t era = (year >= 0 ? year : year - 399) / 400;
  const unsigned yoe = static_cast<unsigned>(year - era * 400);
  const unsigned doy = (153 * (month + (month > 2 ? -3 : 9)) + 2) / 5 + day - 1;
  const unsigned doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
  return era * 146097 + static_cast<std::int64_t>(doe) - 719468;
}

void civil_from_days(std::int64_t z, int& year, unsigned& month, unsigned& day) {
  z += 719468;
  const std::int64_t era = (z >= 0 ? z : z - 146096) / 146097;
  const unsigned doe = static_cast<unsigned>(z - era * 146097);
  const unsigned yoe = (doe - doe / 1460 + doe / 36524 - doe / 146096) / 365;
  const unsigned doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
  const unsigned mp = (5 * doy + 2) / 153;
  day = doy - (153 * mp + 2) / 5 + 1;
  month = mp < 10 ? mp + 3 : mp - 9;
  year = static_cast<int>(yoe + era * 400) + (month <= 2);
}

std::string format_hour(LocalHour h) {
  int y;
  unsigned m, d;
  civil_from_days(h.day(), y, m, d);
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%04d-%02u-%02uT%02d:00", y, m, d, h.hour_of_day());
  return buf;
}

std::optional<LocalHour> parse_hour(std::string_view s) {
  // YYYY-MM-DDTHH:00
  if (s.size() != 16 || s[4] != '-' || s[7] != '-' || s[10] != 'T' || s[13] != ':') {
    return std::nullopt;
  }
  auto y = csv::parse_int(s.substr(0, 4));
  auto mo = csv::parse_int(s.substr(5, 2));
  auto d = csv::parse_int(s.substr(8, 2));
  auto hh = csv::parse_int(s.substr(11, 2));
  if (!y || !mo || !d || !hh || *mo < 1 || *mo > 12 || *d < 1 || *d > 31 || *hh < 0 || *hh > 23) {
    return std::nullopt;
  }
  const auto days = days_from_civil(static_cast<int>(*y), static_cast<unsigned>(*mo),
                                    static_cast<unsigned>(*d));
  return LocalHour{days * 24 + *hh};
}

void validate_tz_offset(int tz_offset_minutes) {
  if (tz_offset_minutes < -kMaxTzOffsetMinutes || tz_offset_minutes > kMaxTzOffsetMinutes) {
    throw ConfigError("timezone offset " + std::to_string(tz_offset_minutes) +
                      " min is outside [-840, 840]");
  }
}

}  // namespace flowsense::timeutil
