#include "flowsense/featurize.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <numbers>
#include <numeric>
#include <ostream>
#include <stdexcept>

#include "flowsense/csv.hpp"
#include "flowsense/timeutil.hpp"

namespace flowsense::featurize {

std::array<double, kNumModelCategories> category_fractions(const ingest::HourlyTraffic& h) {
  std::array<double, kNumModelCategories> out{};
  if (h.total_bytes <= 0) return out;
  for (std::size_t c = 0; c < kNumModelCategories; ++c) {
    out[c] = static_cast<double>(h.bytes_of(std::string(kModelCategories[c]))) /
             static_cast<double>(h.total_bytes);
  }
  return out;
}

std::vector<double> activity_percentile(std::span<const std::int64_t> flow_counts) {
  const std::size_t n = flow_counts.size();
  std::vector<double> out(n, 0.5);
  if (n <= 1) return out;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return flow_counts[a] < flow_counts[b]; });
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && flow_counts[order[j + 1]] == flow_counts[order[i]]) ++j;
    // Ordinal ranks i+1 .. j+1 share their mean.
    const double rank = 0.5 * static_cast<double>(i + 1 + j + 1);
    for (std::size_t k = i; k <= j; ++k) {
      out[order[k]] = (rank - 1.0) / static_cast<double>(n - 1);
    }
    i = j + 1;
  }
  return out;
}

std::pair<double, double> circadian_encoding(int hour) {
  if (hour < 0 || hour > 23) {
    throw std::out_of_range("hour of day " + std::to_string(hour) + " outside 0..23");
  }
  const double angle = 2.0 * std::numbers::pi * static_cast<double>(hour) / 24.0;
  return {std::sin(angle), std::cos(angle)};
}

std::vector<HourlyFeature> build_features(const std::vector<ingest::HourlyTraffic>& hourly) {
  std::map<std::string, std::vector<const ingest::HourlyTraffic*>> by_user;
  for (const auto& h : hourly) by_user[h.user_id].push_back(&h);
  std::vector<HourlyFeature> out;
  out.reserve(hourly.size());
  for (auto& [user, hours] : by_user) {
    std::sort(hours.begin(), hours.end(),
              [](const auto* a, const auto* b) { return a->hour < b->hour; });
    std::vector<std::int64_t> counts;
    counts.reserve(hours.size());
    for (const auto* h : hours) counts.push_back(h->flow_count);
    const auto pct = activity_percentile(counts);
    for (std::size_t i = 0; i < hours.size(); ++i) {
      HourlyFeature f;
      f.user_id = user;
      f.hour = hours[i]->hour;
      f.flow_count = hours[i]->flow_count;
      const auto frac = category_fractions(*hours[i]);
      std::copy(frac.begin(), frac.end(), f.values.begin());
      f.values[kActivityDim] = pct[i];
      const auto [s, c] = circadian_encoding(f.hour.hour_of_day());
      f.values[kCircSinDim] = s;
      f.values[kCircCosDim] = c;
      out.push_back(std::move(f));
    }
  }
  return out;
}

std::map<std::string, std::vector<HourlyFeature>> group_by_user(
    const std::vector<HourlyFeature>& features) {
  std::map<std::string, std::vector<HourlyFeature>> out;
  for (const auto& f : features) out[f.user_id].push_back(f);
  for (auto& [u, v] : out) {
    std::sort(v.begin(), v.end(), [](const auto& a, const auto& b) { return a.hour < b.hour; });
  }
  return out;
}

std::vector<Window> build_windows(std::span<const HourlyFeature> user_features) {
  std::vector<Window> out;
  std::size_t block_start = 0;
  int block_id = 0;
  const std::size_t n = user_features.size();
  for (std::size_t i = 1; i <= n; ++i) {
    const bool block_ends = i == n || user_features[i].hour - user_features[i - 1].hour != 1;
    if (!block_ends) continue;
    const std::size_t len = i - block_start;
    if (len > static_cast<std::size_t>(kWindowHours)) {
      for (std::size_t off = 0; off < len - kWindowHours; ++off) {
        Window w;
        w.user_id = user_features[block_start].user_id;
        w.block_id = block_id;
        w.start_offset = static_cast<int>(off);
        w.start = user_features[block_start + off].hour;
        w.rows.reserve(kWindowHours);
        for (int k = 0; k < kWindowHours; ++k) {
          w.rows.push_back(user_features[block_start + off + k].values);
        }
        out.push_back(std::move(w));
      }
    }
    ++block_id;
    block_start = i;
  }
  return out;
}

std::vector<std::string> eligibility_filter(const std::map<std::string, std::size_t>& window_counts,
                                            std::size_t min_windows) {
  std::vector<std::string> out;
  for (const auto& [user, count] : window_counts) {
    if (count >= min_windows) out.push_back(user);
  }
  return out;
}

UserSplit chronological_split(std::vector<Window> windows, double train_frac) {
  std::stable_sort(windows.begin(), windows.end(),
                   [](const Window& a, const Window& b) { return a.start < b.start; });
  const auto n = windows.size();
  auto n_train = static_cast<std::size_t>(std::ceil(train_frac * static_cast<double>(n) - 1e-9));
  n_train = std::min(n_train, n);
  UserSplit s;
  s.train.assign(std::make_move_iterator(windows.begin()),
                 std::make_move_iterator(windows.begin() + static_cast<std::ptrdiff_t>(n_train)));
  s.test.assign(std::make_move_iterator(windows.begin() + static_cast<std::ptrdiff_t>(n_train)),
                std::make_move_iterator(windows.end()));
  return s;
}

void write_features(std::ostream& out, const std::vector<HourlyFeature>& features) {
  csv::Writer w(out);
  std::vector<std::string> header = {"user_id", "local_hour", "flow_count"};
  for (auto n : kFeatureNames) header.emplace_back(n);
  w.row(header);
  for (const auto& f : features) {
    std::vector<std::string> row = {f.user_id, timeutil::format_hour(f.hour),
                                    std::to_string(f.flow_count)};
    for (double v : f.values) row.push_back(csv::format_double(v));
    w.row(row);
  }
}

std::vector<HourlyFeature> read_features(std::istream& in) {
  const auto t = csv::Table::read(in);
  std::vector<std::string> cols = {"user_id", "local_hour", "flow_count"};
  for (auto n : kFeatureNames) cols.emplace_back(n);
  const auto idx = t.require_columns(cols);
  std::vector<HourlyFeature> out;
  out.reserve(t.size());
  for (std::size_t r = 0; r < t.size(); ++r) {
    const auto& row = t.row(r);
    auto bad = [&] {
      return ConfigError("feature file line " + std::to_string(t.line_number(r)) + " malformed");
    };
    if (row.size() != t.header().size()) throw bad();
    HourlyFeature f;
    f.user_id = row[idx[0]];
    auto hour = timeutil::parse_hour(row[idx[1]]);
    auto fc = csv::parse_int(row[idx[2]]);
    if (!hour || !fc) throw bad();
    f.hour = *hour;
    f.flow_count = *fc;
    for (std::size_t d = 0; d < kFeatureDim; ++d) {
      auto v = csv::parse_double(row[idx[3 + d]]);
      if (!v) throw bad();
      f.values[d] = *v;
    }
    out.push_back(std::move(f));
  }
  return out;
}

void write_window_index(std::ostream& out, const SplitPlan& plan) {
  csv::Writer w(out);
  w.row({"user_id", "block_id", "start_offset", "start_hour", "split"});
  for (const auto& [user, split] : plan) {
    for (const auto* part : {&split.train, &split.test}) {
      const char* name = part == &split.train ? "train" : "test";
      for (const auto& win : *part) {
        w.row({user, std::to_string(win.block_id), std::to_string(win.start_offset),
               timeutil::format_hour(win.start), name});
      }
    }
  }
}

}  // namespace flowsense::featurize
