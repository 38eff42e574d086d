// SPDX-License-Identifier: Apache-2.0
#include "kmae/sampling.hpp"

#include <algorithm>
#include <cmath>

#include "kmae/rng.hpp"

namespace kmae {

int SamplingMask::frame_budget() const {
  return static_cast<int>(std::ceil(static_cast<double>(num_lines) / acceleration));
}

int default_acs_count(int num_lines, double acceleration) {
  const int budget = static_cast<int>(
      std::ceil(static_cast<double>(num_lines) / acceleration));
  int acs = std::max(2, (num_lines / 8) & ~1);
  while (acs > budget) acs -= 2;
  // leave room for density-sampled lines so interleaving still happens
  if (acs == budget && acs > 2) acs -= 2;
  return std::max(acs, 2);
}

SamplingMask make_mask(int num_lines, int frames, double acceleration,
                       int acs_count, uint64_t seed) {
  if (num_lines <= 0 || frames <= 0)
    throw ConfigError("make_mask: H and T must be positive");
  if (acceleration < 1.0)
    throw ConfigError("make_mask: acceleration must be >= 1");
  if (acs_count <= 0 || acs_count % 2 != 0)
    throw ConfigError("make_mask: acs_count must be a positive even number");
  const int budget = static_cast<int>(
      std::ceil(static_cast<double>(num_lines) / acceleration));
  if (acs_count > budget)
    throw ConfigError("make_mask: acs_count " + std::to_string(acs_count) +
                      " exceeds per-frame budget " + std::to_string(budget));

  SamplingMask m;
  m.frames = frames;
  m.num_lines = num_lines;
  m.acceleration = acceleration;
  m.acs_count = acs_count;
  m.seed = seed;
  m.lines.assign(static_cast<size_t>(frames) * num_lines, 0);

  const int center = num_lines / 2;
  const int acs_lo = center - acs_count / 2;
  const int acs_hi = acs_lo + acs_count;  // exclusive

  // Gaussian density over line index, sigma = H/4
  const double sigma = static_cast<double>(num_lines) / 4.0;
  std::vector<double> density(static_cast<size_t>(num_lines));
  for (int k = 0; k < num_lines; ++k) {
    const double d = static_cast<double>(k - center);
    density[static_cast<size_t>(k)] = std::exp(-d * d / (2.0 * sigma * sigma));
  }

  Rng rng(mix_seed(seed, 0x5A3D11E5ULL));
  std::vector<uint8_t> used(static_cast<size_t>(num_lines), 0);

  for (int t = 0; t < frames; ++t) {
    uint8_t* frame = m.lines.data() + static_cast<size_t>(t) * num_lines;
    for (int k = acs_lo; k < acs_hi; ++k) frame[k] = 1;

    // draw the remaining budget without replacement; lines already used in
    // earlier frames are down-weighted until every line has appeared once
    for (int draw = acs_count; draw < budget; ++draw) {
      double total = 0;
      for (int k = 0; k < num_lines; ++k) {
        if (frame[k]) continue;
        total += density[static_cast<size_t>(k)] * (used[static_cast<size_t>(k)] ? 0.25 : 1.0);
      }
      double u = rng.uniform() * total;
      int chosen = -1;
      for (int k = 0; k < num_lines; ++k) {
        if (frame[k]) continue;
        u -= density[static_cast<size_t>(k)] * (used[static_cast<size_t>(k)] ? 0.25 : 1.0);
        if (u <= 0) {
          chosen = k;
          break;
        }
      }
      if (chosen < 0) {  // numerical tail; take the last free line
        for (int k = num_lines - 1; k >= 0; --k)
          if (!frame[k]) {
            chosen = k;
            break;
          }
      }
      frame[chosen] = 1;
    }

    for (int k = 0; k < num_lines; ++k)
      if (frame[k]) used[static_cast<size_t>(k)] = 1;
    if (std::all_of(used.begin(), used.end(), [](uint8_t v) { return v != 0; }))
      std::fill(used.begin(), used.end(), 0);
  }
  return m;
}

MaskStats mask_stats(const SamplingMask& mask) {
  MaskStats s;
  const int budget = mask.frame_budget();
  s.achieved_r = static_cast<double>(mask.num_lines) / budget;
  const int center = mask.num_lines / 2;
  const int acs_lo = center - mask.acs_count / 2;
  const int acs_hi = acs_lo + mask.acs_count;
  int frames_with_acs = 0;
  std::vector<int> counts(static_cast<size_t>(mask.num_lines), 0);
  for (int t = 0; t < mask.frames; ++t) {
    bool all_acs = true;
    for (int k = acs_lo; k < acs_hi; ++k)
      if (!mask.sampled(t, k)) all_acs = false;
    frames_with_acs += all_acs;
    for (int k = 0; k < mask.num_lines; ++k)
      counts[static_cast<size_t>(k)] += mask.sampled(t, k);
  }
  s.center_coverage = static_cast<double>(frames_with_acs) / mask.frames;
  int covered = 0;
  s.per_line_frequency.resize(static_cast<size_t>(mask.num_lines));
  for (int k = 0; k < mask.num_lines; ++k) {
    covered += counts[static_cast<size_t>(k)] > 0;
    s.per_line_frequency[static_cast<size_t>(k)] =
        static_cast<double>(counts[static_cast<size_t>(k)]) / mask.frames;
  }
  s.union_coverage = static_cast<double>(covered) / mask.num_lines;
  return s;
}

std::vector<double> binned_frequency_by_center_distance(
    const std::vector<double>& per_line_frequency, int bin_width) {
  const int h = static_cast<int>(per_line_frequency.size());
  const int center = h / 2;
  const int nbins = (center + bin_width) / bin_width;
  std::vector<double> sums(static_cast<size_t>(nbins), 0);
  std::vector<int> counts(static_cast<size_t>(nbins), 0);
  for (int k = 0; k < h; ++k) {
    const int d = std::abs(k - center);
    const int b = std::min(nbins - 1, d / bin_width);
    sums[static_cast<size_t>(b)] += per_line_frequency[static_cast<size_t>(k)];
    counts[static_cast<size_t>(b)] += 1;
  }
  for (int b = 0; b < nbins; ++b)
    if (counts[static_cast<size_t>(b)]) sums[static_cast<size_t>(b)] /= counts[static_cast<size_t>(b)];
  return sums;
}

}  // namespace kmae
