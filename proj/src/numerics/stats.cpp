// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <map>

#include "shortlens/error.hpp"
#include "shortlens/numerics/numerics.hpp"

namespace shortlens::numerics {

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) {
  // splitmix64 finalizer over (seed, index)
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

std::uint64_t derive_seed(std::uint64_t seed, std::string_view stage) {
  std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
  for (unsigned char c : stage) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return derive_seed(seed, h);
}

double entropy(std::span<const double> counts) {
  double total = 0.0;
  for (double c : counts) {
    if (c < 0.0 || !std::isfinite(c)) {
      throw InvalidInput("entropy: counts must be finite and >= 0");
    }
    total += c;
  }
  if (total <= 0.0) throw InvalidInput("entropy: all counts are zero");
  double h = 0.0;
  for (double c : counts) {
    if (c == 0.0) continue;
    const double p = c / total;
    h -= p * std::log(p);
  }
  return h;
}

double entropy(std::span<const std::size_t> counts) {
  std::vector<double> c(counts.begin(), counts.end());
  return entropy(c);
}

double label_entropy(std::span<const int> labels) {
  std::map<int, double> counts;
  for (int l : labels) counts[l] += 1.0;
  std::vector<double> c;
  for (const auto& [_, v] : counts) c.push_back(v);
  return entropy(c);
}

double conditional_entropy(std::span<const int> labels,
                           std::span<const std::size_t> assignment) {
  if (labels.size() != assignment.size() || labels.empty()) {
    throw InvalidInput("conditional_entropy: length mismatch or empty input");
  }
  std::map<std::size_t, std::map<int, double>> per_cluster;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    per_cluster[assignment[i]][labels[i]] += 1.0;
  }
  const double n = static_cast<double>(labels.size());
  double h = 0.0;
  for (const auto& [_, counts] : per_cluster) {
    std::vector<double> c;
    double size = 0.0;
    for (const auto& [__, v] : counts) {
      c.push_back(v);
      size += v;
    }
    h += size / n * entropy(c);
  }
  return h;
}

double brier(std::span<const double> probs, std::span<const int> outcomes) {
  if (probs.empty()) throw InvalidInput("brier: empty input");
  if (probs.size() != outcomes.size()) {
    throw InvalidInput("brier: length mismatch");
  }
  double s = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const double d = probs[i] - static_cast<double>(outcomes[i]);
    s += d * d;
  }
  return s / static_cast<double>(probs.size());
}

}  // namespace shortlens::numerics
