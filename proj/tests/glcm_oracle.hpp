#pragma once

// Brute-force co-occurrence oracle: enumerates every ordered pair of pixel
// positions and counts those whose displacement equals an offset.

#include "sklp/ingest.hpp"

#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <vector>

namespace oracle {

inline sklp::ingest::GlcmFeatures glcm(std::span<const std::uint8_t> px, int w, int h, int levels,
                                       std::span<const sklp::ingest::Offset> offsets) {
  sklp::ingest::GlcmFeatures out;
  for (const auto& [dr, dc] : offsets) {
    std::map<std::pair<int, int>, long> counts;
    long total = 0;
    for (int p = 0; p < w * h; ++p) {
      for (int q = 0; q < w * h; ++q) {
        if (q / w - p / w != dr || q % w - p % w != dc) continue;
        const int a = static_cast<int>(px[p]) * levels / 256;
        const int b = static_cast<int>(px[q]) * levels / 256;
        counts[{a, b}] += 1;
        counts[{b, a}] += 1;
        total += 2;
      }
    }
    double contrast = 0, energy = 0, homogeneity = 0, entropy = 0;
    for (int i = 0; i < levels; ++i) {
      for (int j = 0; j < levels; ++j) {
        const auto it = counts.find({i, j});
        if (it == counts.end()) continue;
        const double pij = static_cast<double>(it->second) / static_cast<double>(total);
        contrast += (i - j) * (i - j) * pij;
        energy += pij * pij;
        homogeneity += pij / (1.0 + std::abs(i - j));
        entropy += -pij * std::log(pij);
      }
    }
    out.contrast += contrast;
    out.energy += energy;
    out.homogeneity += homogeneity;
    out.entropy += entropy;
  }
  const double n = static_cast<double>(offsets.size());
  out.contrast /= n;
  out.energy /= n;
  out.homogeneity /= n;
  out.entropy /= n;
  return out;
}

}  // namespace oracle
