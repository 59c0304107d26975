#pragma once

#include <charconv>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace bmfact {

// Flat key=value configuration files: one pair per line, '#' starts a
// comment, whitespace around keys and values is ignored.
using KvMap = std::map<std::string, std::string>;

namespace detail {

inline std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return {};
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

}  // namespace detail

inline KvMap read_kv(std::istream& in) {
  KvMap kv;
  std::string line;
  while (std::getline(in, line)) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config: expected key=value, got: " + line);
    kv[detail::trim(line.substr(0, eq))] = detail::trim(line.substr(eq + 1));
  }
  return kv;
}

inline void write_kv(std::ostream& out, const KvMap& kv) {
  for (const auto& [k, v] : kv) out << k << " = " << v << '\n';
}

inline bool kv_has(const KvMap& kv, const std::string& key) { return kv.count(key) > 0; }

inline std::string kv_get(const KvMap& kv, const std::string& key, const std::string& fallback) {
  const auto it = kv.find(key);
  return it == kv.end() ? fallback : it->second;
}

inline double kv_get(const KvMap& kv, const std::string& key, double fallback) {
  const auto it = kv.find(key);
  if (it == kv.end()) return fallback;
  try {
    std::size_t pos = 0;
    const double v = std::stod(it->second, &pos);
    if (pos != it->second.size()) throw std::invalid_argument("");
    return v;
  } catch (const std::exception&) {
    throw std::invalid_argument("config: key '" + key + "' is not a number: " + it->second);
  }
}

inline long long kv_get(const KvMap& kv, const std::string& key, long long fallback) {
  const auto it = kv.find(key);
  if (it == kv.end()) return fallback;
  long long v = 0;
  const auto* first = it->second.data();
  const auto* last = first + it->second.size();
  const auto res = std::from_chars(first, last, v);
  if (res.ec != std::errc{} || res.ptr != last)
    throw std::invalid_argument("config: key '" + key + "' is not an integer: " + it->second);
  return v;
}

inline int kv_get(const KvMap& kv, const std::string& key, int fallback) {
  return static_cast<int>(kv_get(kv, key, static_cast<long long>(fallback)));
}

inline bool kv_get(const KvMap& kv, const std::string& key, bool fallback) {
  const auto it = kv.find(key);
  if (it == kv.end()) return fallback;
  const std::string& v = it->second;
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw std::invalid_argument("config: key '" + key + "' is not a boolean: " + v);
}

/// Comma-separated list of reals, e.g. "0.01,0.02,0.03".
inline std::vector<double> kv_get_list(const KvMap& kv, const std::string& key,
                                       const std::vector<double>& fallback) {
  const auto it = kv.find(key);
  if (it == kv.end()) return fallback;
  std::vector<double> out;
  std::stringstream ss(it->second);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    tok = detail::trim(tok);
    if (tok.empty()) continue;
    out.push_back(std::stod(tok));
  }
  if (out.empty())
    throw std::invalid_argument("config: key '" + key + "' is an empty list");
  return out;
}

}  // namespace bmfact
