#include "flowsense/classical.hpp"

#include <algorithm>
#include <cmath>

namespace flowsense::classical {

namespace {

double mean(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

double sum_sq_dev(std::span<const double> v, double m) {
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return s;
}

// Exact check; a rounded mean would leave a tiny nonzero variance on e.g. a flat 0.4 series.
bool is_constant(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [&](double x) { return x == v.front(); });
}

double quantile_linear(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return v[lo] + frac * (v[hi] - v[lo]);
}

MaybeReal band_mean(const HourlySeries& s, int first, int last) {
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s.hour_of_day[i] >= first && s.hour_of_day[i] <= last) {
      sum += s.values[i];
      ++n;
    }
  }
  if (n == 0) return std::nullopt;
  return sum / static_cast<double>(n);
}

// Minimum (or maximum) mean over all windows of `width` consecutive hours.
double extreme_window_mean(std::span<const double> v, std::size_t width, bool want_max) {
  double best = 0.0;
  for (std::size_t i = 0; i + width <= v.size(); ++i) {
    double sum = 0.0;
    for (std::size_t k = 0; k < width; ++k) sum += v[i + k];
    const double m = sum / static_cast<double>(width);
    if (i == 0 || (want_max ? m > best : m < best)) best = m;
  }
  return best;
}

}  // namespace

HourlySeries HourlySeries::from_hours(std::span<const LocalHour> hours,
                                      std::span<const double> values) {
  if (hours.size() != values.size()) throw ConfigError("series hours/values length mismatch");
  HourlySeries s;
  s.values.assign(values.begin(), values.end());
  for (const auto& h : hours) {
    s.hour_of_day.push_back(h.hour_of_day());
    s.weekend.push_back(h.is_weekend());
  }
  return s;
}

std::array<MaybeReal, 24> hour_profile(const HourlySeries& s) {
  std::array<double, 24> sum{};
  std::array<std::size_t, 24> count{};
  for (std::size_t i = 0; i < s.size(); ++i) {
    sum[s.hour_of_day[i]] += s.values[i];
    ++count[s.hour_of_day[i]];
  }
  std::array<MaybeReal, 24> out;
  for (int h = 0; h < 24; ++h) {
    if (count[h]) out[h] = sum[h] / static_cast<double>(count[h]);
  }
  return out;
}

MaybeReal interdaily_stability(const HourlySeries& s) {
  const std::size_t n = s.size();
  if (n < 24 || is_constant(s.values)) return std::nullopt;
  const double m = mean(s.values);
  const double denom = 24.0 * sum_sq_dev(s.values, m);
  if (denom == 0.0) return std::nullopt;
  const auto profile = hour_profile(s);
  double num = 0.0;
  for (const auto& p : profile) {
    if (p) num += (*p - m) * (*p - m);
  }
  return static_cast<double>(n) * num / denom;
}

MaybeReal intradaily_variability(const HourlySeries& s) {
  const std::size_t n = s.size();
  if (n < 2 || is_constant(s.values)) return std::nullopt;
  const double m = mean(s.values);
  const double ss = sum_sq_dev(s.values, m);
  if (ss == 0.0) return std::nullopt;
  double diff = 0.0;
  for (std::size_t i = 1; i < n; ++i) {
    const double d = s.values[i] - s.values[i - 1];
    diff += d * d;
  }
  return static_cast<double>(n) * diff / (static_cast<double>(n - 1) * ss);
}

MaybeReal relative_amplitude(const HourlySeries& s) {
  if (s.size() < 10) return std::nullopt;
  // Window means of a flat series can differ in the last bit; the amplitude is exactly 0.
  if (is_constant(s.values)) return s.values.front() == 0.0 ? MaybeReal{} : MaybeReal{0.0};
  const double l5 = extreme_window_mean(s.values, 5, false);
  const double m10 = extreme_window_mean(s.values, 10, true);
  if (m10 + l5 == 0.0) return std::nullopt;
  return (m10 - l5) / (m10 + l5);
}

BandMeans band_means(const HourlySeries& s) {
  BandMeans b;
  b.night = band_mean(s, 0, 5);
  b.morning = band_mean(s, 6, 11);
  b.afternoon = band_mean(s, 12, 17);
  b.evening = band_mean(s, 18, 23);
  if (b.night && b.morning && *b.morning != 0.0) b.night_morning_ratio = *b.night / *b.morning;
  return b;
}

MaybeReal activity_centroid(const HourlySeries& s) {
  const auto profile = hour_profile(s);
  double num = 0.0, den = 0.0;
  for (int h = 0; h < 24; ++h) {
    if (!profile[h]) continue;
    num += h * *profile[h];
    den += *profile[h];
  }
  if (den == 0.0) return std::nullopt;
  return num / den;
}

int span_hours(int onset, int offset) { return ((offset - onset) % 24 + 24) % 24; }

std::optional<ActiveWindow> active_window(const HourlySeries& s) {
  const auto profile = hour_profile(s);
  std::vector<double> nonzero;
  for (const auto& p : profile) {
    if (p && *p != 0.0) nonzero.push_back(*p);
  }
  if (nonzero.empty()) return std::nullopt;
  const double threshold = quantile_linear(nonzero, 0.25);
  std::array<bool, 24> active{};
  int n_active = 0;
  for (int h = 0; h < 24; ++h) {
    active[h] = profile[h] && *profile[h] != 0.0 && *profile[h] >= threshold;
    n_active += active[h];
  }
  if (n_active == 0) return std::nullopt;
  if (n_active == 24) return ActiveWindow{0, 23, 23};

  // Longest circular run of inactive hours.
  int best_start = -1, best_len = 0;
  bool best_wraps = false;
  for (int start = 0; start < 24; ++start) {
    // Only consider maximal runs: start must follow an active hour.
    if (active[start] || !active[(start + 23) % 24]) continue;
    int len = 0;
    while (!active[(start + len) % 24]) ++len;
    const bool wraps = start == 0 || start + len >= 24;
    const bool better = len > best_len || (len == best_len && wraps && !best_wraps);
    if (better) {
      best_start = start;
      best_len = len;
      best_wraps = wraps;
    }
  }
  ActiveWindow w;
  w.onset = (best_start + best_len) % 24;
  w.offset = (best_start + 23) % 24;
  w.span = span_hours(w.onset, w.offset);
  return w;
}

MaybeReal active_span(const HourlySeries& s) {
  const auto w = active_window(s);
  if (!w) return std::nullopt;
  return static_cast<double>(w->span);
}

MaybeReal weekday_weekend_diff(const HourlySeries& s) {
  double wd = 0.0, we = 0.0;
  std::size_t nwd = 0, nwe = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s.weekend[i]) {
      we += s.values[i];
      ++nwe;
    } else {
      wd += s.values[i];
      ++nwd;
    }
  }
  if (nwd == 0 || nwe == 0) return std::nullopt;
  return wd / static_cast<double>(nwd) - we / static_cast<double>(nwe);
}

CircadianMetrics compute_metrics(const HourlySeries& s) {
  CircadianMetrics m;
  m.is = interdaily_stability(s);
  m.iv = intradaily_variability(s);
  m.ra = relative_amplitude(s);
  m.bands = band_means(s);
  m.activity_centroid = activity_centroid(s);
  m.active_span_hours = active_span(s);
  m.weekday_weekend_diff = weekday_weekend_diff(s);
  return m;
}

std::array<MaybeReal, kMetricNames.size()> as_array(const CircadianMetrics& m) {
  return {m.is,
          m.iv,
          m.ra,
          m.bands.night,
          m.bands.morning,
          m.bands.afternoon,
          m.bands.evening,
          m.bands.night_morning_ratio,
          m.activity_centroid,
          m.active_span_hours,
          m.weekday_weekend_diff};
}

}  // namespace flowsense::classical
