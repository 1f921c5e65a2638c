#include "flowsense/ingest.hpp"

#include <algorithm>
#include <fstream>
#include <istream>
#include <ostream>
#include <set>
#include <tuple>

#include "flowsense/csv.hpp"
#include "flowsense/timeutil.hpp"

namespace flowsense::ingest {

namespace {

const std::vector<std::string> kFlowColumns = {"user_id",    "start_ts_ms", "hostname", "up_bytes",
                                               "down_bytes", "up_pkts",     "down_pkts"};

std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && (s[b] == ' ' || s[b] == '\t')) ++b;
  while (e > b && (s[e - 1] == ' ' || s[e - 1] == '\t')) --e;
  return std::string(s.substr(b, e - b));
}

}  // namespace

std::string normalize_hostname(std::string_view host) {
  std::string out = trim(host);
  for (char& c : out) {
    if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
  }
  if (!out.empty() && out.back() == '.') out.pop_back();
  return out;
}

ParseResult parse_flow_records(std::istream& in) {
  const auto table = csv::Table::read(in);
  const auto idx = table.require_columns(kFlowColumns);
  ParseResult result;
  for (std::size_t r = 0; r < table.size(); ++r) {
    const auto& row = table.row(r);
    auto field = [&](std::size_t k) -> std::string_view {
      return idx[k] < row.size() ? std::string_view(row[idx[k]]) : std::string_view();
    };
    FlowRecord f;
    f.user_id = trim(field(0));
    const auto ts = csv::parse_int(field(1));
    f.hostname = normalize_hostname(field(2));
    const auto ub = csv::parse_int(field(3));
    const auto db = csv::parse_int(field(4));
    const auto up = csv::parse_int(field(5));
    const auto dp = csv::parse_int(field(6));
    const bool ok = row.size() == table.header().size() && !f.user_id.empty() && ts && *ts > 0 &&
                    ub && *ub >= 0 && db && *db >= 0 && up && *up >= 0 && dp && *dp >= 0;
    if (!ok) {
      ++result.skipped;
      result.skipped_lines.push_back(table.line_number(r));
      continue;
    }
    f.start_ts_ms = *ts;
    f.up_bytes = *ub;
    f.down_bytes = *db;
    f.up_pkts = *up;
    f.down_pkts = *dp;
    result.records.push_back(std::move(f));
  }
  return result;
}

void write_flow_records(std::ostream& out, const std::vector<FlowRecord>& flows) {
  csv::Writer w(out);
  w.row(kFlowColumns);
  for (const auto& f : flows) {
    w.row({f.user_id, std::to_string(f.start_ts_ms), f.hostname, std::to_string(f.up_bytes),
           std::to_string(f.down_bytes), std::to_string(f.up_pkts), std::to_string(f.down_pkts)});
  }
}

Dictionary::Dictionary(std::unordered_map<std::string, std::string> host_to_app,
                       std::unordered_map<std::string, std::string> app_to_category)
    : app_to_category_(std::move(app_to_category)) {
  for (auto& [host, app] : host_to_app) host_to_app_[normalize_hostname(host)] = app;
  std::string orphans;
  for (const auto& [host, app] : host_to_app_) {
    if (!app_to_category_.count(app)) orphans += (orphans.empty() ? "" : ", ") + app;
  }
  if (!orphans.empty()) throw ConfigError("apps without a category: " + orphans);

  std::set<std::string> others;
  for (const auto& [app, cat] : app_to_category_) others.insert(cat);
  for (auto c : kModelCategories) {
    categories_.emplace_back(c);
    others.erase(std::string(c));
  }
  categories_.insert(categories_.end(), others.begin(), others.end());
}

Dictionary Dictionary::parse(std::istream& hosts, std::istream& apps) {
  const auto ht = csv::Table::read(hosts);
  const auto hi = ht.require_columns({"hostname", "app"});
  std::unordered_map<std::string, std::string> h2a;
  for (std::size_t r = 0; r < ht.size(); ++r) {
    const auto& row = ht.row(r);
    if (row.size() < ht.header().size()) {
      throw ConfigError("hosts dictionary line " + std::to_string(ht.line_number(r)) +
                        " has too few fields");
    }
    h2a[normalize_hostname(row[hi[0]])] = trim(row[hi[1]]);
  }
  const auto at = csv::Table::read(apps);
  const auto ai = at.require_columns({"app", "category"});
  std::unordered_map<std::string, std::string> a2c;
  for (std::size_t r = 0; r < at.size(); ++r) {
    const auto& row = at.row(r);
    if (row.size() < at.header().size()) {
      throw ConfigError("apps dictionary line " + std::to_string(at.line_number(r)) +
                        " has too few fields");
    }
    a2c[trim(row[ai[0]])] = trim(row[ai[1]]);
  }
  return Dictionary(std::move(h2a), std::move(a2c));
}

Dictionary Dictionary::load(const std::string& hosts_csv, const std::string& apps_csv) {
  std::ifstream h(hosts_csv);
  if (!h) throw ConfigError("cannot open dictionary " + hosts_csv);
  std::ifstream a(apps_csv);
  if (!a) throw ConfigError("cannot open dictionary " + apps_csv);
  return parse(h, a);
}

HostMapping Dictionary::map_hostname(std::string_view hostname) const {
  const std::string host = normalize_hostname(hostname);
  if (host.empty()) return {};
  // Candidate suffixes from longest (the full name) to shortest (the TLD).
  std::size_t pos = 0;
  while (true) {
    auto it = host_to_app_.find(host.substr(pos));
    if (it != host_to_app_.end()) {
      return {it->second, app_to_category_.at(it->second)};
    }
    const auto dot = host.find('.', pos);
    if (dot == std::string::npos) break;
    pos = dot + 1;
  }
  return {};
}

std::vector<TrafficBin> bin_10s(const std::vector<FlowRecord>& flows) {
  std::map<std::tuple<std::string, std::int64_t, std::string>, TrafficBin> bins;
  for (const auto& f : flows) {
    const std::int64_t b = timeutil::floor_div(f.start_ts_ms, kBinMs);
    auto& bin = bins[{f.user_id, b, f.hostname}];
    bin.user_id = f.user_id;
    bin.bin_index = b;
    bin.hostname = f.hostname;
    bin.up_bytes += f.up_bytes;
    bin.down_bytes += f.down_bytes;
    bin.up_pkts += f.up_pkts;
    bin.down_pkts += f.down_pkts;
    bin.flow_count += 1;
  }
  std::vector<TrafficBin> out;
  out.reserve(bins.size());
  for (auto& [k, v] : bins) out.push_back(std::move(v));
  return out;
}

namespace {

struct HourAccumulator {
  std::map<std::pair<std::string, std::int64_t>, HourlyTraffic> hours;
  std::unordered_map<std::string, HostMapping> cache;

  void add(const Dictionary& dict, const std::string& user, LocalHour hour,
           const std::string& host, std::int64_t bytes, std::int64_t flows) {
    auto& h = hours[{user, hour.index}];
    h.user_id = user;
    h.hour = hour;
    auto it = cache.find(host);
    if (it == cache.end()) it = cache.emplace(host, dict.map_hostname(host)).first;
    const HostMapping& m = it->second;
    if (m.mapped()) {
      h.category_bytes[m.category] += bytes;
      h.app_bytes[m.app] += bytes;
    } else {
      h.unmapped_bytes += bytes;
    }
    h.total_bytes += bytes;
    h.flow_count += flows;
  }

  std::vector<HourlyTraffic> finish() {
    std::vector<HourlyTraffic> out;
    out.reserve(hours.size());
    for (auto& [k, v] : hours) out.push_back(std::move(v));
    return out;
  }
};

}  // namespace

std::vector<HourlyTraffic> aggregate_hourly(const std::vector<TrafficBin>& bins,
                                            const Dictionary& dict, int tz_offset_minutes) {
  timeutil::validate_tz_offset(tz_offset_minutes);
  HourAccumulator acc;
  for (const auto& b : bins) {
    const LocalHour hour = timeutil::to_local_hour(b.bin_index * kBinMs, tz_offset_minutes);
    acc.add(dict, b.user_id, hour, b.hostname, b.up_bytes + b.down_bytes, b.flow_count);
  }
  return acc.finish();
}

std::vector<HourlyTraffic> aggregate_hourly(const std::vector<FlowRecord>& flows,
                                            const Dictionary& dict, int tz_offset_minutes) {
  timeutil::validate_tz_offset(tz_offset_minutes);
  HourAccumulator acc;
  for (const auto& f : flows) {
    const LocalHour hour = timeutil::to_local_hour(f.start_ts_ms, tz_offset_minutes);
    acc.add(dict, f.user_id, hour, f.hostname, f.up_bytes + f.down_bytes, 1);
  }
  return acc.finish();
}

std::vector<CategorySelection> category_selection_report(
    const std::vector<HourlyTraffic>& hourly, const std::vector<std::string>& candidates,
    const SelectionThresholds& thresholds) {
  if (hourly.empty()) throw RuntimeError("category selection needs at least one participant-week");
  std::int64_t total = 0;
  std::map<std::string, std::int64_t> first_day;
  for (const auto& h : hourly) {
    total += h.total_bytes;
    auto [it, inserted] = first_day.emplace(h.user_id, h.hour.day());
    if (!inserted) it->second = std::min(it->second, h.hour.day());
  }
  if (total <= 0) throw RuntimeError("category selection: total traffic is zero");

  // Per user: observed weeks and per-category bytes per week.
  std::map<std::string, std::map<std::int64_t, std::map<std::string, std::int64_t>>> weekly;
  for (const auto& h : hourly) {
    const std::int64_t week = timeutil::floor_div(h.hour.day() - first_day[h.user_id], 7);
    auto& w = weekly[h.user_id][week];
    for (const auto& [cat, bytes] : h.category_bytes) w[cat] += bytes;
  }

  std::vector<CategorySelection> out;
  for (const auto& cat : candidates) {
    CategorySelection s;
    s.category = cat;
    std::int64_t cat_bytes = 0;
    for (const auto& h : hourly) cat_bytes += h.bytes_of(cat);
    s.traffic_share = static_cast<double>(cat_bytes) / static_cast<double>(total);
    std::size_t covered = 0;
    for (const auto& [user, weeks] : weekly) {
      std::size_t nonzero = 0;
      for (const auto& [wk, bytes] : weeks) {
        auto it = bytes.find(cat);
        if (it != bytes.end() && it->second > 0) ++nonzero;
      }
      if (static_cast<double>(nonzero) >=
          thresholds.min_week_fraction * static_cast<double>(weeks.size())) {
        ++covered;
      }
    }
    s.participant_coverage = static_cast<double>(covered) / static_cast<double>(weekly.size());
    s.pass = s.participant_coverage >= thresholds.min_coverage &&
             s.traffic_share >= thresholds.min_share;
    out.push_back(s);
  }
  return out;
}

void write_hourly(std::ostream& out, const std::vector<HourlyTraffic>& hourly,
                  const std::vector<std::string>& categories) {
  csv::Writer w(out);
  std::vector<std::string> header = {"user_id", "local_hour", "flow_count", "total_bytes",
                                     "unmapped_bytes"};
  header.insert(header.end(), categories.begin(), categories.end());
  w.row(header);
  for (const auto& h : hourly) {
    std::vector<std::string> row = {h.user_id, timeutil::format_hour(h.hour),
                                    std::to_string(h.flow_count), std::to_string(h.total_bytes),
                                    std::to_string(h.unmapped_bytes)};
    for (const auto& c : categories) row.push_back(std::to_string(h.bytes_of(c)));
    w.row(row);
  }
}

void write_hourly_apps(std::ostream& out, const std::vector<HourlyTraffic>& hourly) {
  csv::Writer w(out);
  w.row({"user_id", "local_hour", "app", "bytes"});
  for (const auto& h : hourly) {
    for (const auto& [app, bytes] : h.app_bytes) {
      w.row({h.user_id, timeutil::format_hour(h.hour), app, std::to_string(bytes)});
    }
  }
}

std::vector<HourlyTraffic> read_hourly(std::istream& traffic, std::istream* apps) {
  const auto t = csv::Table::read(traffic);
  const auto idx =
      t.require_columns({"user_id", "local_hour", "flow_count", "total_bytes", "unmapped_bytes"});
  std::vector<std::pair<std::size_t, std::string>> cat_cols;
  for (std::size_t c = 0; c < t.header().size(); ++c) {
    if (std::find(idx.begin(), idx.end(), c) == idx.end()) cat_cols.emplace_back(c, t.header()[c]);
  }
  std::vector<HourlyTraffic> out;
  std::map<std::pair<std::string, std::int64_t>, std::size_t> pos;
  for (std::size_t r = 0; r < t.size(); ++r) {
    const auto& row = t.row(r);
    if (row.size() != t.header().size()) {
      throw ConfigError("hourly traffic line " + std::to_string(t.line_number(r)) + " malformed");
    }
    HourlyTraffic h;
    h.user_id = row[idx[0]];
    auto hour = timeutil::parse_hour(row[idx[1]]);
    auto fc = csv::parse_int(row[idx[2]]);
    auto tb = csv::parse_int(row[idx[3]]);
    auto ub = csv::parse_int(row[idx[4]]);
    if (!hour || !fc || !tb || !ub) {
      throw ConfigError("hourly traffic line " + std::to_string(t.line_number(r)) + " malformed");
    }
    h.hour = *hour;
    h.flow_count = *fc;
    h.total_bytes = *tb;
    h.unmapped_bytes = *ub;
    for (const auto& [c, name] : cat_cols) {
      auto v = csv::parse_int(row[c]);
      if (!v) throw ConfigError("hourly traffic line " + std::to_string(t.line_number(r)) + " malformed");
      if (*v != 0) h.category_bytes[name] = *v;
    }
    pos[{h.user_id, h.hour.index}] = out.size();
    out.push_back(std::move(h));
  }
  if (apps) {
    const auto a = csv::Table::read(*apps);
    const auto ai = a.require_columns({"user_id", "local_hour", "app", "bytes"});
    for (std::size_t r = 0; r < a.size(); ++r) {
      const auto& row = a.row(r);
      auto hour = timeutil::parse_hour(row.at(ai[1]));
      auto bytes = csv::parse_int(row.at(ai[3]));
      if (!hour || !bytes) throw ConfigError("hourly app line " + std::to_string(a.line_number(r)) + " malformed");
      auto it = pos.find({row[ai[0]], hour->index});
      if (it == pos.end()) continue;
      out[it->second].app_bytes[row[ai[2]]] = *bytes;
    }
  }
  return out;
}

}  // namespace flowsense::ingest
