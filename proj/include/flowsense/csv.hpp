#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "flowsense/common.hpp"

namespace flowsense::csv {

// Splits one CSV line. Double-quoted fields may contain commas and "" escapes.
std::vector<std::string> split_line(std::string_view line);

// Quotes a field only when needed.
std::string escape(std::string_view field);

// Header-indexed reader over a whole stream. Blank lines are skipped.
class Table {
 public:
  static Table read(std::istream& in);
  static Table read_file(const std::string& path);

  const std::vector<std::string>& header() const { return header_; }
  std::optional<std::size_t> column(std::string_view name) const;
  // Throws ConfigError naming every missing column.
  std::vector<std::size_t> require_columns(const std::vector<std::string>& names) const;

  std::size_t size() const { return rows_.size(); }
  const std::vector<std::string>& row(std::size_t i) const { return rows_[i]; }
  // Line number in the source (1-based, header is line 1).
  std::size_t line_number(std::size_t i) const { return line_numbers_[i]; }

 private:
  std::vector<std::string> header_;
  std::unordered_map<std::string, std::size_t> index_;
  std::vector<std::vector<std::string>> rows_;
  std::vector<std::size_t> line_numbers_;
};

std::optional<std::int64_t> parse_int(std::string_view s);
std::optional<double> parse_double(std::string_view s);

// Shortest text that round-trips the value exactly; empty for nullopt.
std::string format_double(double v);
std::string format_float(float v);
std::string format_maybe(const MaybeReal& v);

class Writer {
 public:
  explicit Writer(std::ostream& out) : out_(out) {}
  void row(const std::vector<std::string>& fields);

 private:
  std::ostream& out_;
};

}  // namespace flowsense::csv
