// SPDX-License-Identifier: Apache-2.0

#include "tapct/config.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <fstream>
#include <sstream>

namespace tapct {

namespace {

std::string trim(const std::string& s) {
  auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

double to_double(const std::string& key, const std::string& text) {
  const std::string t = trim(text);
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (ec != std::errc{} || ptr != t.data() + t.size() || t.empty()) {
    throw ValidationError("config key '" + key + "': expected a number, got '" + text + "'");
  }
  return v;
}

}  // namespace

std::vector<double> parse_number_list(const std::string& text) {
  std::string t = trim(text);
  if (!t.empty() && t.front() == '[') t.erase(t.begin());
  if (!t.empty() && t.back() == ']') t.pop_back();
  std::vector<double> out;
  std::stringstream ss(t);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (trim(item).empty()) continue;
    out.push_back(to_double(text, item));
  }
  return out;
}

Extent3 parse_extent(const std::string& text) {
  const auto v = parse_number_list(text);
  if (v.size() != 3) {
    throw ValidationError("expected three comma-separated integers, got '" + text + "'");
  }
  Extent3 e{static_cast<int>(v[0]), static_cast<int>(v[1]), static_cast<int>(v[2])};
  for (int a = 0; a < 3; ++a) {
    if (static_cast<double>(e[a]) != v[static_cast<std::size_t>(a)]) {
      throw ValidationError("expected integers, got '" + text + "'");
    }
  }
  return e;
}

std::string format_number(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  if (ec != std::errc{}) throw ValidationError("cannot format number");
  return std::string(buf, ptr);
}

std::string format_range(std::pair<double, double> r) {
  return format_number(r.first) + "," + format_number(r.second);
}

std::string format_extent(const Extent3& e) {
  return std::to_string(e.z) + "," + std::to_string(e.y) + "," + std::to_string(e.x);
}

Config Config::parse(const std::string& text, const std::string& origin) {
  Config cfg;
  std::stringstream ss(text);
  std::string line;
  int lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.find('=') == std::string::npos) {
      throw ValidationError(origin + ":" + std::to_string(lineno) + ": expected key=value");
    }
    cfg.set_assignment(line);
  }
  return cfg;
}

Config Config::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) {
    throw ValidationError("cannot open config file " + path.string());
  }
  std::stringstream buf;
  buf << in.rdbuf();
  return parse(buf.str(), path.string());
}

void Config::set_assignment(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) {
    throw ValidationError("expected key=value, got '" + assignment + "'");
  }
  const std::string key = trim(assignment.substr(0, eq));
  if (key.empty()) {
    throw ValidationError("empty key in '" + assignment + "'");
  }
  values_[key] = trim(assignment.substr(eq + 1));
}

void Config::merge(const Config& overrides) {
  for (const auto& [k, v] : overrides.values_) values_[k] = v;
}

std::string Config::get_string(const std::string& key, const std::string& fallback) const {
  auto it = values_.find(key);
  return it == values_.end() ? fallback : it->second;
}

double Config::get_double(const std::string& key, double fallback) const {
  auto it = values_.find(key);
  return it == values_.end() ? fallback : to_double(key, it->second);
}

long long Config::get_int(const std::string& key, long long fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  const double v = to_double(key, it->second);
  const auto i = static_cast<long long>(v);
  if (static_cast<double>(i) != v) {
    throw ValidationError("config key '" + key + "': expected an integer, got '" + it->second + "'");
  }
  return i;
}

bool Config::get_bool(const std::string& key, bool fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  std::string v = it->second;
  std::transform(v.begin(), v.end(), v.begin(), [](unsigned char c) { return std::tolower(c); });
  if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
  if (v == "0" || v == "false" || v == "no" || v == "off") return false;
  throw ValidationError("config key '" + key + "': expected a boolean, got '" + it->second + "'");
}

std::pair<double, double> Config::get_range(const std::string& key,
                                            std::pair<double, double> fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  const auto v = parse_number_list(it->second);
  if (v.size() != 2) {
    throw ValidationError("config key '" + key + "': expected [min,max], got '" + it->second + "'");
  }
  return {v[0], v[1]};
}

Extent3 Config::get_extent(const std::string& key, Extent3 fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  try {
    return parse_extent(it->second);
  } catch (const ValidationError& e) {
    throw ValidationError("config key '" + key + "': " + e.what());
  }
}

std::vector<double> Config::get_doubles(const std::string& key) const {
  auto it = values_.find(key);
  return it == values_.end() ? std::vector<double>{} : parse_number_list(it->second);
}

void Config::reject_unknown(const std::set<std::string>& known) const {
  for (const auto& [k, v] : values_) {
    if (!known.count(k)) {
      throw ValidationError("unknown config key '" + k + "'");
    }
  }
}

std::string Config::to_text() const {
  std::string out;
  for (const auto& [k, v] : values_) out += k + "=" + v + "\n";
  return out;
}

}  // namespace tapct
