// SPDX-License-Identifier: Apache-2.0
//
// Plain-text key=value configuration. Lines starting with '#' are comments.
// Lists are written as "a,b,c" with optional surrounding brackets.

#pragma once

#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "tapct/common.hpp"

namespace tapct {

class Config {
 public:
  Config() = default;

  static Config parse(const std::string& text, const std::string& origin = "<string>");
  static Config load(const std::filesystem::path& path);

  /// Parses "key=value" and stores it; later assignments win.
  void set_assignment(const std::string& assignment);
  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  void merge(const Config& overrides);

  [[nodiscard]] bool has(const std::string& key) const { return values_.count(key) != 0; }
  [[nodiscard]] const std::map<std::string, std::string>& values() const { return values_; }

  [[nodiscard]] std::string get_string(const std::string& key, const std::string& fallback) const;
  [[nodiscard]] double get_double(const std::string& key, double fallback) const;
  [[nodiscard]] long long get_int(const std::string& key, long long fallback) const;
  [[nodiscard]] bool get_bool(const std::string& key, bool fallback) const;
  [[nodiscard]] std::pair<double, double> get_range(const std::string& key,
                                                    std::pair<double, double> fallback) const;
  [[nodiscard]] Extent3 get_extent(const std::string& key, Extent3 fallback) const;
  [[nodiscard]] std::vector<double> get_doubles(const std::string& key) const;

  /// Throws ValidationError naming the first key not in `known`.
  void reject_unknown(const std::set<std::string>& known) const;

  [[nodiscard]] std::string to_text() const;

 private:
  std::map<std::string, std::string> values_;
};

std::vector<double> parse_number_list(const std::string& text);
Extent3 parse_extent(const std::string& text);

/// Shortest text that parses back to exactly `v`.
std::string format_number(double v);
std::string format_range(std::pair<double, double> r);
std::string format_extent(const Extent3& e);

}  // namespace tapct
