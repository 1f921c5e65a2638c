#include <cmath>

#include "doctest.h"

#include "flowsense/classical.hpp"
#include "flowsense/rng.hpp"
#include "oracles.hpp"

using namespace flowsense;
using namespace flowsense::classical;

namespace {

// Consecutive hours starting Monday 00:00 local (1970-01-05 is a Monday).
constexpr std::int64_t kMonday = 4 * 24;

HourlySeries series(const std::vector<double>& v, std::int64_t first = kMonday) {
  std::vector<LocalHour> h;
  for (std::size_t i = 0; i < v.size(); ++i) h.push_back(LocalHour{first + static_cast<std::int64_t>(i)});
  return HourlySeries::from_hours(h, v);
}

oracle::Series as_oracle(const HourlySeries& s) { return {s.values, s.hour_of_day, s.weekend}; }

void check_same(const MaybeReal& got, const oracle::Maybe& want) {
  REQUIRE(got.has_value() == want.has_value());
  if (got) CHECK(*got == doctest::Approx(*want).epsilon(1e-12));
}

std::vector<double> by_hour(std::size_t n, double (*f)(int)) {
  std::vector<double> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = f(static_cast<int>(i % 24));
  return v;
}

}  // namespace

TEST_CASE("from_hours labels hour of day and weekend") {
  const auto s = series(std::vector<double>(24 * 7, 1.0));
  CHECK(s.hour_of_day[0] == 0);
  CHECK(s.hour_of_day[25] == 1);
  CHECK_FALSE(s.weekend[0]);
  CHECK(s.weekend[5 * 24]);
  CHECK(s.weekend[6 * 24 + 23]);
  std::vector<LocalHour> h = {LocalHour{0}};
  std::vector<double> v = {1.0, 2.0};
  CHECK_THROWS_AS(HourlySeries::from_hours(h, v), ConfigError);
}

TEST_CASE("interdaily stability") {
  const auto rep = series(by_hour(72, [](int h) { return std::sin(h * 0.4) + 2.0; }));
  CHECK(*interdaily_stability(rep) == doctest::Approx(1.0));
  CHECK_FALSE(interdaily_stability(series(std::vector<double>(48, 3.0))).has_value());
  CHECK_FALSE(interdaily_stability(series(std::vector<double>(23, 1.0))).has_value());

  Rng rng(1);
  std::vector<double> noise(168);
  for (auto& x : noise) x = rng.normal();
  const auto s = series(noise);
  check_same(interdaily_stability(s), oracle::interdaily_stability(as_oracle(s)));
}

TEST_CASE("intradaily variability") {
  std::vector<double> alt(100);
  for (std::size_t i = 0; i < alt.size(); ++i) alt[i] = static_cast<double>(i % 2);
  // H * (H-1) / ((H-1) * H/4) = 4.
  CHECK(*intradaily_variability(series(alt)) == doctest::Approx(4.0));
  CHECK_FALSE(intradaily_variability(series(std::vector<double>(30, 2.0))).has_value());

  std::vector<double> ramp(60);
  for (std::size_t i = 0; i < ramp.size(); ++i) ramp[i] = static_cast<double>(i);
  const auto s = series(ramp);
  check_same(intradaily_variability(s), oracle::intradaily_variability(as_oracle(s)));
}

TEST_CASE("relative amplitude") {
  std::vector<double> v(48, 1.0);
  for (int i = 10; i < 15; ++i) v[i] = 0.0;
  CHECK(*relative_amplitude(series(v)) == doctest::Approx(1.0));
  CHECK(*relative_amplitude(series(std::vector<double>(48, 0.7))) == doctest::Approx(0.0));
  CHECK_FALSE(relative_amplitude(series(std::vector<double>(48, 0.0))).has_value());
  CHECK_FALSE(relative_amplitude(series(std::vector<double>(9, 1.0))).has_value());

  Rng rng(2);
  std::vector<double> r(48);
  for (auto& x : r) x = rng.uniform();
  const auto s = series(r);
  check_same(relative_amplitude(s), oracle::relative_amplitude(as_oracle(s)));
}

TEST_CASE("band means") {
  auto b = band_means(series(by_hour(48, [](int h) { return h <= 5 ? 1.0 : 0.0; })));
  CHECK(*b.night == doctest::Approx(1.0));
  CHECK(*b.morning == 0.0);
  CHECK(*b.afternoon == 0.0);
  CHECK(*b.evening == 0.0);
  CHECK_FALSE(b.night_morning_ratio.has_value());

  b = band_means(series(std::vector<double>(48, 0.4)));
  CHECK(*b.night == doctest::Approx(*b.evening));
  CHECK(*b.night_morning_ratio == doctest::Approx(1.0));

  // Starting at 12:00 with 6 hours leaves night and morning unobserved.
  b = band_means(series(std::vector<double>(6, 1.0), kMonday + 12));
  CHECK(b.afternoon.has_value());
  CHECK_FALSE(b.night.has_value());
  CHECK_FALSE(b.night_morning_ratio.has_value());
}

TEST_CASE("activity centroid") {
  CHECK(*activity_centroid(series(by_hour(48, [](int h) { return h == 12 ? 1.0 : 0.0; }))) == doctest::Approx(12.0));
  CHECK(*activity_centroid(series(by_hour(48, [](int h) { return h == 0 || h == 2 ? 1.0 : 0.0; }))) ==
        doctest::Approx(1.0));
  CHECK(*activity_centroid(series(std::vector<double>(48, 0.3))) == doctest::Approx(11.5));
  CHECK_FALSE(activity_centroid(series(std::vector<double>(48, 0.0))).has_value());
}

TEST_CASE("active span") {
  auto w = active_window(series(by_hour(72, [](int h) { return h >= 8 && h <= 20 ? 1.0 : 0.0; })));
  REQUIRE(w);
  CHECK(w->onset == 8);
  CHECK(w->offset == 20);
  CHECK(w->span == 12);

  CHECK(*active_span(series(by_hour(48, [](int h) { return h == 15 ? 2.0 : 0.0; }))) == 0.0);

  w = active_window(series(by_hour(48, [](int h) { return h >= 22 || h <= 2 ? 1.0 : 0.0; })));
  REQUIRE(w);
  CHECK(w->onset == 22);
  CHECK(w->offset == 2);
  CHECK(w->span == 4);
  CHECK(span_hours(22, 2) == 4);

  CHECK_FALSE(active_span(series(std::vector<double>(48, 0.0))).has_value());
}

TEST_CASE("weekday minus weekend") {
  CHECK(*weekday_weekend_diff(series(std::vector<double>(24 * 7, 0.5))) == doctest::Approx(0.0));
  std::vector<double> v(24 * 7);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = i < 5 * 24 ? 1.0 : 0.0;
  CHECK(*weekday_weekend_diff(series(v)) == doctest::Approx(1.0));
  CHECK_FALSE(weekday_weekend_diff(series(std::vector<double>(48, 1.0))).has_value());
}

TEST_CASE("every metric matches its oracle on random series") {
  Rng rng(1234);
  for (int trial = 0; trial < 1000; ++trial) {
    const auto n = static_cast<std::size_t>(1 + rng.below(24 * 10));
    const auto first = static_cast<std::int64_t>(rng.below(24 * 7));
    std::vector<double> v(n);
    const int style = static_cast<int>(rng.below(3));
    for (std::size_t i = 0; i < n; ++i) {
      const int hod = static_cast<int>((first + static_cast<std::int64_t>(i)) % 24);
      if (style == 0) v[i] = rng.uniform();
      if (style == 1) v[i] = rng.bernoulli(0.3) ? rng.uniform() : 0.0;
      if (style == 2) v[i] = (hod >= 7 && hod <= 22 ? 0.6 : 0.05) + 0.1 * rng.uniform();
    }
    const auto s = series(v, kMonday + first);
    const auto o = as_oracle(s);
    const auto m = compute_metrics(s);
    check_same(m.is, oracle::interdaily_stability(o));
    check_same(m.iv, oracle::intradaily_variability(o));
    check_same(m.ra, oracle::relative_amplitude(o));
    check_same(m.bands.night, oracle::band_mean(o, 0, 5));
    check_same(m.bands.morning, oracle::band_mean(o, 6, 11));
    check_same(m.bands.afternoon, oracle::band_mean(o, 12, 17));
    check_same(m.bands.evening, oracle::band_mean(o, 18, 23));
    check_same(m.activity_centroid, oracle::activity_centroid(o));
    check_same(m.active_span_hours, oracle::active_span(o));
    check_same(m.weekday_weekend_diff, oracle::weekday_weekend_diff(o));
    // The bound needs every hour of day equally represented.
    if (m.is && n % 24 == 0) {
      CHECK(*m.is >= 0.0);
      CHECK(*m.is <= 1.0 + 1e-12);
    }
    if (m.ra) {
      CHECK(*m.ra >= 0.0);
      CHECK(*m.ra <= 1.0 + 1e-12);
    }
    if (m.active_span_hours) {
      CHECK(*m.active_span_hours >= 0.0);
      CHECK(*m.active_span_hours <= 24.0);
    }
  }
}

TEST_CASE("rhythm metrics are scale invariant") {
  Rng rng(8);
  std::vector<double> v(120), scaled(120);
  for (std::size_t i = 0; i < v.size(); ++i) {
    v[i] = rng.uniform();
    scaled[i] = 3.5 * v[i];
  }
  const auto a = compute_metrics(series(v)), b = compute_metrics(series(scaled));
  CHECK(*a.is == doctest::Approx(*b.is));
  CHECK(*a.iv == doctest::Approx(*b.iv));
  CHECK(*a.ra == doctest::Approx(*b.ra));
}
