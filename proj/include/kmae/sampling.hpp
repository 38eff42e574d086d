// SPDX-License-Identifier: Apache-2.0
//
// Cartesian undersampling masks in the VISTA style: variable-density
// phase-encode line selection with an always-sampled central ACS band and
// temporal interleaving via a reuse penalty across frames.
#pragma once

#include <cstdint>
#include <vector>

#include "kmae/kspace.hpp"

namespace kmae {

struct SamplingMask {
  int frames = 0;        // T
  int num_lines = 0;     // H
  double acceleration = 1.0;
  int acs_count = 0;
  uint64_t seed = 0;
  std::vector<uint8_t> lines;  // [T][H], 1 = sampled

  bool sampled(int t, int k) const {
    return lines[static_cast<size_t>(t) * num_lines + k] != 0;
  }
  int frame_budget() const;
  int lines_in_frame(int t) const {
    int n = 0;
    for (int k = 0; k < num_lines; ++k) n += sampled(t, k);
    return n;
  }
};

struct MaskStats {
  double achieved_r = 0;
  double center_coverage = 0;  // fraction of frames containing all ACS lines
  double union_coverage = 0;   // fraction of lines sampled in >= 1 frame
  std::vector<double> per_line_frequency;  // [H], fraction of frames
};

// Default ACS width: H/8 rounded to even, halved when the per-frame budget
// would otherwise leave no room for density-sampled lines.
int default_acs_count(int num_lines, double acceleration);

SamplingMask make_mask(int num_lines, int frames, double acceleration,
                       int acs_count, uint64_t seed);

MaskStats mask_stats(const SamplingMask& mask);

// Mean sampling frequency binned by distance to the central line; bin width
// defaults to H/8. Variable density means this is non-increasing.
std::vector<double> binned_frequency_by_center_distance(
    const std::vector<double>& per_line_frequency, int bin_width);

// sampled lines copied verbatim, unsampled lines zeroed
template <class T>
ComplexSeriesT<T> apply_mask(const ComplexSeriesT<T>& k,
                             const SamplingMask& mask) {
  if (k.domain != Domain::kspace)
    throw ContractError("apply_mask: input must be k-space domain");
  if (k.frames != mask.frames || k.height != mask.num_lines)
    throw DimensionError(
        "apply_mask: series " + std::to_string(k.frames) + "x" +
        std::to_string(k.height) + " vs mask " + std::to_string(mask.frames) +
        "x" + std::to_string(mask.num_lines));
  ComplexSeriesT<T> out = k;
  for (int t = 0; t < k.frames; ++t)
    for (int h = 0; h < k.height; ++h)
      if (!mask.sampled(t, h))
        for (int w = 0; w < k.width; ++w)
          out.at(t, h, w) = std::complex<T>(0, 0);
  return out;
}

// Zero-filled reconstruction: unsampled lines zeroed, inverse FFT, magnitude.
// The canonical degradation baseline.
template <class T>
std::vector<T> zero_fill_reconstruct(const ComplexSeriesT<T>& k_masked,
                                     const SamplingMask& mask) {
  ComplexSeriesT<T> img = ifft2_centered(apply_mask(k_masked, mask));
  std::vector<T> mag(img.data.size());
  for (size_t i = 0; i < mag.size(); ++i) mag[i] = std::abs(img.data[i]);
  return mag;
}

}  // namespace kmae
