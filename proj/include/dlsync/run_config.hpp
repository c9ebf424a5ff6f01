#pragma once

// Flat "key = value" run configuration. Keys mirror long command-line flag
// names; '#' starts a comment line. Parsing only checks syntax: whether a
// key is known, and whether its value converts, is up to the consumer.

#include <filesystem>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "dlsync/error.hpp"
#include "dlsync/io_util.hpp"

namespace dlsync {

struct RunConfig {
  std::vector<std::pair<std::string, std::string>> entries;  // file order

  bool has(const std::string& key) const {
    for (const auto& e : entries)
      if (e.first == key) return true;
    return false;
  }
};

inline RunConfig parse_run_config(std::istream& in, const std::string& origin) {
  RunConfig cfg;
  std::set<std::string> seen;
  std::string line;
  for (int lineno = 1; std::getline(in, line); ++lineno) {
    const std::string t = io::trim(line);
    if (t.empty() || t.front() == '#') continue;
    const auto eq = t.find('=');
    const std::string where = origin + ":" + std::to_string(lineno);
    if (eq == std::string::npos) throw FormatError(where + ": expected key = value");
    std::string key = io::trim(t.substr(0, eq));
    std::string value = io::trim(t.substr(eq + 1));
    if (key.empty()) throw FormatError(where + ": empty key");
    if (key.find_first_of(" \t") != std::string::npos) throw FormatError(where + ": key contains whitespace");
    if (value.empty()) throw FormatError(where + ": key '" + key + "' has no value");
    if (!seen.insert(key).second) throw FormatError(where + ": duplicate key '" + key + "'");
    cfg.entries.emplace_back(std::move(key), std::move(value));
  }
  return cfg;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  auto in = io::open_in(path);
  return parse_run_config(in, path.string());
}

}  // namespace dlsync
