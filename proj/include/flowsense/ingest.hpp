#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "flowsense/common.hpp"

namespace flowsense::ingest {

inline constexpr std::string_view kUnmapped = "UNMAPPED";
inline constexpr std::int64_t kBinMs = 10'000;

struct FlowRecord {
  std::string user_id;
  std::int64_t start_ts_ms = 0;  // UTC
  std::string hostname;          // normalized; may be empty
  std::int64_t up_bytes = 0;
  std::int64_t down_bytes = 0;
  std::int64_t up_pkts = 0;
  std::int64_t down_pkts = 0;
};

struct ParseResult {
  std::vector<FlowRecord> records;
  std::size_t skipped = 0;
  std::vector<std::size_t> skipped_lines;
};

// Lowercase and strip one trailing dot.
std::string normalize_hostname(std::string_view host);

// Reads flow CSV with header user_id,start_ts_ms,hostname,up_bytes,down_bytes,up_pkts,down_pkts.
// Missing columns throw ConfigError; malformed lines are skipped and counted.
ParseResult parse_flow_records(std::istream& in);
void write_flow_records(std::ostream& out, const std::vector<FlowRecord>& flows);

struct HostMapping {
  std::string app = std::string(kUnmapped);
  std::string category = std::string(kUnmapped);
  bool mapped() const { return app != kUnmapped; }
};

// Two-stage hostname -> app -> category map with longest-suffix matching on labels.
class Dictionary {
 public:
  Dictionary() = default;
  // Throws ConfigError if an app has no category.
  Dictionary(std::unordered_map<std::string, std::string> host_to_app,
             std::unordered_map<std::string, std::string> app_to_category);

  // hosts.csv: hostname,app   apps.csv: app,category
  static Dictionary load(const std::string& hosts_csv, const std::string& apps_csv);
  static Dictionary parse(std::istream& hosts, std::istream& apps);

  HostMapping map_hostname(std::string_view hostname) const;

  // Canonical model categories first, then every other category sorted by name.
  const std::vector<std::string>& categories() const { return categories_; }
  const std::unordered_map<std::string, std::string>& host_to_app() const { return host_to_app_; }
  const std::unordered_map<std::string, std::string>& app_to_category() const {
    return app_to_category_;
  }

 private:
  std::unordered_map<std::string, std::string> host_to_app_;
  std::unordered_map<std::string, std::string> app_to_category_;
  std::vector<std::string> categories_;
};

struct TrafficBin {
  std::string user_id;
  std::int64_t bin_index = 0;  // floor(start_ts_ms / 10000)
  std::string hostname;
  std::int64_t up_bytes = 0;
  std::int64_t down_bytes = 0;
  std::int64_t up_pkts = 0;
  std::int64_t down_pkts = 0;
  std::int64_t flow_count = 0;
};

// Sorted by (user, bin, hostname).
std::vector<TrafficBin> bin_10s(const std::vector<FlowRecord>& flows);

struct HourlyTraffic {
  std::string user_id;
  LocalHour hour;
  std::map<std::string, std::int64_t> category_bytes;  // only categories with traffic
  std::map<std::string, std::int64_t> app_bytes;       // mapped apps only
  std::int64_t total_bytes = 0;
  std::int64_t unmapped_bytes = 0;
  std::int64_t flow_count = 0;

  std::int64_t bytes_of(const std::string& category) const {
    auto it = category_bytes.find(category);
    return it == category_bytes.end() ? 0 : it->second;
  }
};

// A flow belongs entirely to the hour of its start timestamp. Output sorted by (user, hour);
// hours without flows are not materialized.
std::vector<HourlyTraffic> aggregate_hourly(const std::vector<TrafficBin>& bins,
                                            const Dictionary& dict, int tz_offset_minutes);
std::vector<HourlyTraffic> aggregate_hourly(const std::vector<FlowRecord>& flows,
                                            const Dictionary& dict, int tz_offset_minutes);

struct CategorySelection {
  std::string category;
  double participant_coverage = 0.0;
  double traffic_share = 0.0;
  bool pass = false;
};

struct SelectionThresholds {
  double min_coverage = 0.40;
  double min_share = 0.01;
  double min_week_fraction = 0.50;
};

// Weeks are counted per user from the local day of the user's first observed hour.
std::vector<CategorySelection> category_selection_report(
    const std::vector<HourlyTraffic>& hourly, const std::vector<std::string>& candidates,
    const SelectionThresholds& thresholds = {});

// Hourly traffic file: one row per (user, hour), dictionary categories as columns in
// categories() order. Per-app bytes go to a separate long-format file.
void write_hourly(std::ostream& out, const std::vector<HourlyTraffic>& hourly,
                  const std::vector<std::string>& categories);
void write_hourly_apps(std::ostream& out, const std::vector<HourlyTraffic>& hourly);
std::vector<HourlyTraffic> read_hourly(std::istream& traffic, std::istream* apps);

}  // namespace flowsense::ingest
