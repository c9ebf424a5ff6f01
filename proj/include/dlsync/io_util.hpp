#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "dlsync/error.hpp"

namespace dlsync::io {

static_assert(std::endian::native == std::endian::little,
              "binary formats assume a little-endian host");

inline std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return in;
}

inline std::ofstream open_out(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  return out;
}

template <class T>
void write_le(std::ostream& out, T value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <class T>
T read_le(std::istream& in, const char* what) {
  T value{};
  if (!in.read(reinterpret_cast<char*>(&value), sizeof(T)))
    throw FormatError(std::string("truncated payload while reading ") + what);
  return value;
}

/// Reads one '\n'-terminated line; throws on EOF.
inline std::string read_line(std::istream& in, const char* what) {
  std::string line;
  if (!std::getline(in, line)) throw FormatError(std::string("missing ") + what);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  return line;
}

inline std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(first, last - first + 1));
}

inline std::vector<std::string> split(std::string_view line, char sep = ',') {
  std::vector<std::string> fields;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(sep, start);
    fields.push_back(trim(line.substr(start, pos == std::string_view::npos ? pos : pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return fields;
}

/// Strict numeric parse: the whole field must be consumed.
inline double parse_double(const std::string& field, const char* what) {
  if (field.empty()) throw FormatError(std::string("empty numeric field in ") + what);
  std::size_t used = 0;
  double v = 0;
  try {
    v = std::stod(field, &used);
  } catch (const std::exception&) {
    throw FormatError("malformed number '" + field + "' in " + what);
  }
  if (used != field.size()) throw FormatError("malformed number '" + field + "' in " + what);
  return v;
}

inline long long parse_int(const std::string& field, const char* what) {
  if (field.empty()) throw FormatError(std::string("empty integer field in ") + what);
  std::size_t used = 0;
  long long v = 0;
  try {
    v = std::stoll(field, &used);
  } catch (const std::exception&) {
    throw FormatError("malformed integer '" + field + "' in " + what);
  }
  if (used != field.size()) throw FormatError("malformed integer '" + field + "' in " + what);
  return v;
}

inline std::uint64_t parse_u64(const std::string& field, const char* what) {
  if (field.empty() || field.front() == '-') throw FormatError("malformed unsigned integer '" + field + "' in " + what);
  std::size_t used = 0;
  unsigned long long v = 0;
  try {
    v = std::stoull(field, &used);
  } catch (const std::exception&) {
    throw FormatError("malformed unsigned integer '" + field + "' in " + what);
  }
  if (used != field.size()) throw FormatError("malformed unsigned integer '" + field + "' in " + what);
  return v;
}

/// Reads a headerless numeric CSV: one vector per non-empty line.
/// Lines starting with '#' are comments.
inline std::vector<std::vector<double>> read_numeric_csv(const std::filesystem::path& path) {
  auto in = open_in(path);
  std::vector<std::vector<double>> rows;
  std::string line;
  const std::string what = path.string();
  while (std::getline(in, line)) {
    const auto t = trim(line);
    if (t.empty() || t.front() == '#') continue;
    std::vector<double> row;
    for (const auto& f : split(t)) row.push_back(parse_double(f, what.c_str()));
    rows.push_back(std::move(row));
  }
  return rows;
}

/// Shortest round-trippable text form of a double.
inline std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  std::string s(buf);
  // %.17g can carry noise digits; prefer the shortest repr that round-trips.
  for (int prec = 6; prec < 17; ++prec) {
    std::snprintf(buf, sizeof buf, "%.*g", prec, v);
    if (std::strtod(buf, nullptr) == v) return buf;
  }
  return s;
}

}  // namespace dlsync::io
