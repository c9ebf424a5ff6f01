#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <vector>

#include "dlsync/error.hpp"
#include "dlsync/io_util.hpp"

namespace dlsync {

/// Bins [e_i, e_{i+1}). Values below the first edge land in the first bin and
/// values at or above the last edge in the last bin, so the total count
/// always equals the number of inputs.
struct Histogram {
  std::vector<double> edges;
  std::vector<long long> counts;

  long long mass() const {
    long long m = 0;
    for (auto c : counts) m += c;
    return m;
  }
};

inline std::vector<double> uniform_edges(double lo, double hi, int bins) {
  if (bins < 1 || !(hi > lo)) throw DomainError("histogram needs bins >= 1 and hi > lo");
  std::vector<double> e(bins + 1);
  for (int i = 0; i <= bins; ++i) e[i] = lo + (hi - lo) * i / bins;
  return e;
}

inline std::size_t bin_index(const std::vector<double>& edges, double v) {
  const std::size_t bins = edges.size() - 1;
  if (v < edges[1]) return 0;
  if (v >= edges[bins - 1]) return bins - 1;
  return static_cast<std::size_t>(std::upper_bound(edges.begin(), edges.end(), v) - edges.begin()) - 1;
}

inline Histogram make_histogram(const std::vector<double>& values, std::vector<double> edges) {
  if (edges.size() < 2) throw DomainError("histogram needs at least two edges");
  for (std::size_t i = 1; i < edges.size(); ++i)
    if (!(edges[i] > edges[i - 1])) throw DomainError("histogram edges must be strictly increasing");
  Histogram h{std::move(edges), {}};
  h.counts.assign(h.edges.size() - 1, 0);
  for (double v : values) {
    if (std::isnan(v)) throw DomainError("cannot bin NaN");
    ++h.counts[bin_index(h.edges, v)];
  }
  return h;
}

inline void write_histogram_csv(const Histogram& h, const std::filesystem::path& path) {
  auto out = io::open_out(path);
  out << "bin_lo,bin_hi,count\n";
  for (std::size_t i = 0; i < h.counts.size(); ++i)
    out << io::format_double(h.edges[i]) << ',' << io::format_double(h.edges[i + 1]) << ',' << h.counts[i] << '\n';
}

}  // namespace dlsync
