#include <cmath>
#include <sstream>

#include "doctest.h"

#include "flowsense/featurize.hpp"
#include "flowsense/rng.hpp"
#include "oracles.hpp"

using namespace flowsense;
using namespace flowsense::featurize;

namespace {

ingest::HourlyTraffic traffic(std::int64_t total, std::map<std::string, std::int64_t> cats) {
  ingest::HourlyTraffic h;
  h.user_id = "u";
  h.total_bytes = total;
  std::int64_t mapped = 0;
  for (const auto& [c, b] : cats) mapped += b;
  h.unmapped_bytes = total - mapped;
  h.category_bytes = std::move(cats);
  h.flow_count = 1;
  return h;
}

// Hourly rows for user `u` covering each [first, last] hour range.
std::vector<HourlyFeature> hours(const std::vector<std::pair<std::int64_t, std::int64_t>>& ranges,
                                 const std::string& u = "u") {
  std::vector<ingest::HourlyTraffic> in;
  for (const auto& [a, b] : ranges) {
    for (std::int64_t i = a; i <= b; ++i) {
      auto h = traffic(100, {{"communication", 60}});
      h.user_id = u;
      h.hour = LocalHour{i};
      h.flow_count = 1 + (i % 5);
      in.push_back(h);
    }
  }
  return build_features(in);
}

}  // namespace

TEST_CASE("category_fractions") {
  auto f = category_fractions(traffic(0, {}));
  for (double x : f) CHECK(x == 0.0);

  f = category_fractions(traffic(1000, {{"streaming", 1000}}));
  CHECK(f[2] == 1.0);
  CHECK(f[0] == 0.0);
  CHECK(f[4] == 0.0);

  f = category_fractions(traffic(1000, {{"communication", 300}}));
  CHECK(f[0] == doctest::Approx(0.3));

  // Non-model categories count toward the total but get no column.
  f = category_fractions(traffic(1000, {{"gaming", 500}, {"system", 250}}));
  CHECK(f[kSystemCategory] == doctest::Approx(0.25));
}

TEST_CASE("activity_percentile") {
  const std::vector<std::int64_t> one = {5}, three = {1, 2, 3}, tie = {2, 2};
  CHECK(activity_percentile(one) == std::vector<double>{0.5});
  CHECK(activity_percentile(three) == std::vector<double>{0.0, 0.5, 1.0});
  CHECK(activity_percentile(tie) == std::vector<double>{0.5, 0.5});

  Rng rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<std::int64_t> c(1 + rng.below(60));
    for (auto& x : c) x = static_cast<std::int64_t>(rng.below(8));
    const auto got = activity_percentile(c);
    const auto want = oracle::percentile(std::vector<double>(c.begin(), c.end()));
    REQUIRE(got.size() == want.size());
    for (std::size_t i = 0; i < got.size(); ++i) {
      CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-12));
      CHECK(got[i] >= 0.0);
      CHECK(got[i] <= 1.0);
      for (std::size_t j = 0; j < got.size(); ++j) {
        if (c[j] > c[i]) CHECK(got[j] >= got[i]);
      }
    }
  }
}

TEST_CASE("circadian_encoding") {
  auto [s0, c0] = circadian_encoding(0);
  CHECK(s0 == doctest::Approx(0.0));
  CHECK(c0 == doctest::Approx(1.0));
  auto [s6, c6] = circadian_encoding(6);
  CHECK(s6 == doctest::Approx(1.0));
  CHECK(std::abs(c6) < 1e-12);
  auto [s3, c3] = circadian_encoding(3);
  CHECK(std::round(s3 * 1e5) / 1e5 == 0.70711);
  CHECK(std::round(c3 * 1e5) / 1e5 == 0.70711);
  CHECK_THROWS_AS(circadian_encoding(24), std::out_of_range);
  CHECK_THROWS_AS(circadian_encoding(-1), std::out_of_range);
}

TEST_CASE("build_features rows are well formed") {
  const auto f = hours({{0, 99}, {150, 170}});
  CHECK(f.size() == 121);
  for (const auto& r : f) {
    CHECK(r.circ_sin() * r.circ_sin() + r.circ_cos() * r.circ_cos() == doctest::Approx(1.0).epsilon(1e-9));
    for (std::size_t c = 0; c < kNumModelCategories; ++c) {
      CHECK(r.frac(c) >= 0.0);
      CHECK(r.frac(c) <= 1.0);
    }
    const auto [s, c] = circadian_encoding(r.hour.hour_of_day());
    CHECK(r.circ_sin() == s);
    CHECK(r.circ_cos() == c);
  }
}

TEST_CASE("build_windows follows contiguous blocks") {
  CHECK(build_windows(hours({{0, 47}})).empty());

  auto w = build_windows(hours({{0, 49}}));
  REQUIRE(w.size() == 2);
  CHECK(w[0].start_offset == 0);
  CHECK(w[1].start_offset == 1);
  CHECK(w[0].rows.size() == static_cast<std::size_t>(kWindowHours));

  w = build_windows(hours({{0, 48}, {60, 108}}));
  REQUIRE(w.size() == 2);
  CHECK(w[0].block_id != w[1].block_id);
  for (const auto& win : w) {
    CHECK((win.hour_at(kWindowHours - 1) <= LocalHour{48} || win.start >= LocalHour{60}));
  }

  // Random gap patterns against the block-partition count.
  Rng rng(9);
  for (int trial = 0; trial < 30; ++trial) {
    std::vector<std::pair<std::int64_t, std::int64_t>> ranges;
    std::int64_t at = 0, expected = 0;
    for (int b = 0; b < 4; ++b) {
      const auto len = static_cast<std::int64_t>(1 + rng.below(120));
      ranges.push_back({at, at + len - 1});
      expected += std::max<std::int64_t>(0, len - kWindowHours);
      at += len + 1 + static_cast<std::int64_t>(rng.below(5));
    }
    const auto f = hours(ranges);
    const auto got = build_windows(f);
    CHECK(static_cast<std::int64_t>(got.size()) == expected);
    for (const auto& win : got) {
      // Every hour inside the window was observed.
      for (int k = 0; k < kWindowHours; ++k) {
        const auto h = win.hour_at(k).index;
        bool seen = false;
        for (const auto& [a, b] : ranges) seen = seen || (h >= a && h <= b);
        CHECK(seen);
      }
    }
  }
}

TEST_CASE("eligibility_filter") {
  const auto n68 = build_windows(hours({{0, 67}})).size();
  const auto n67 = build_windows(hours({{0, 66}})).size();
  CHECK(n68 == 20);
  CHECK(n67 == 19);
  const auto kept = eligibility_filter({{"a", n68}, {"b", n67}, {"c", 0}});
  CHECK(kept == std::vector<std::string>{"a"});
}

TEST_CASE("chronological_split") {
  auto all = build_windows(hours({{0, 57}}));
  REQUIRE(all.size() == 10);
  auto s = chronological_split(all);
  CHECK(s.train.size() == 7);
  CHECK(s.test.size() == 3);

  s = chronological_split({all[0]});
  CHECK(s.train.size() == 1);
  CHECK(s.test.empty());

  Rng rng(21);
  for (int trial = 0; trial < 30; ++trial) {
    auto w = build_windows(hours({{0, 48 + static_cast<std::int64_t>(rng.below(40))},
                                  {200, 260 + static_cast<std::int64_t>(rng.below(40))}}));
    rng.shuffle(w);
    const auto n = w.size();
    const auto split = chronological_split(w);
    CHECK(split.train.size() == static_cast<std::size_t>(std::ceil(0.7 * static_cast<double>(n) - 1e-9)));
    LocalHour max_train{INT64_MIN};
    for (const auto& x : split.train) max_train = std::max(max_train, x.start);
    for (const auto& x : split.test) CHECK(x.start > max_train);
  }
}

TEST_CASE("features round-trip through csv") {
  const auto f = hours({{10, 70}});
  std::stringstream ss;
  write_features(ss, f);
  const auto back = read_features(ss);
  REQUIRE(back.size() == f.size());
  for (std::size_t i = 0; i < f.size(); ++i) {
    CHECK(back[i].user_id == f[i].user_id);
    CHECK(back[i].hour == f[i].hour);
    CHECK(back[i].flow_count == f[i].flow_count);
    for (std::size_t k = 0; k < kFeatureDim; ++k) CHECK(back[i].values[k] == doctest::Approx(f[i].values[k]).epsilon(1e-12));
  }
}
