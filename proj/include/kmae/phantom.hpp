// SPDX-License-Identifier: Apache-2.0
//
// Synthetic 2D+t beating-heart subjects with exact ground truth: a
// contracting blood cavity inside a wall-area-conserving myocardium annulus,
// soft logistic boundaries, analytic phenotype scalars and per-frame masks.
#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "kmae/common.hpp"

namespace kmae {

struct PhantomParams {
  int grid_size = 32;  // H = W
  int frames = 8;      // T
  int slices = 3;      // S
  double center_x = 16.0;
  double center_y = 16.0;
  double base_cavity_radius = 8.0;  // pixels, end-diastolic
  double contraction = 0.25;        // c in [0, 1)
  double wall_area = 190.0;         // pixels^2, conserved across frames
  double intensity_blood = 0.55;
  double intensity_myo = 0.90;  // brightest tissue; see phantom defaults note
  double intensity_background = 0.05;
  double noise_std = 0.02;
  uint64_t seed = 0;

  void validate() const;
};

// ef threshold separating normal from dysfunction labels
inline constexpr double kDysfunctionTau = 0.35;

enum class ClassLabel : uint8_t { normal = 0, dysfunction = 1 };

struct PhantomRecord {
  PhantomParams params;
  std::vector<float> images;            // [S][T][H][W], roughly [0, 1]
  std::vector<uint8_t> myocardium_masks;  // [S][T][H][W], 0/1
  double ef_analog = 0;
  double edv_analog = 0;
  ClassLabel class_label = ClassLabel::normal;

  size_t frame_size() const {
    return static_cast<size_t>(params.grid_size) * params.grid_size;
  }
  const float* image_frame(int slice, int frame) const {
    return images.data() +
           (static_cast<size_t>(slice) * params.frames + frame) * frame_size();
  }
  const uint8_t* mask_frame(int slice, int frame) const {
    return myocardium_masks.data() +
           (static_cast<size_t>(slice) * params.frames + frame) * frame_size();
  }
};

// Apical slices shrink slightly; slice 0 is the base slice the phenotypes
// refer to.
double slice_scale(int slice, int slices);

// cavity radius at frame t: r_base * (1 - c * (1 - cos(2 pi t / T)) / 2)
double cavity_radius_at(const PhantomParams& p, int frame, int slice = 0);

// (ef_analog, edv_analog); closed forms ef = 1 - (1-c)^2, edv = pi r_base^2
std::pair<double, double> phenotypes(const PhantomParams& p);

PhantomRecord synth_subject(const PhantomParams& p);

// soft-occupancy cavity area (inside the inner boundary) for one frame;
// oracle surface for mask/phenotype consistency checks
double measured_cavity_area(const PhantomParams& p, int slice, int frame);

// soft-occupancy myocardium area; conserved across frames by construction
double measured_annulus_area(const PhantomParams& p, int slice, int frame);

struct Cohort {
  std::vector<PhantomRecord> records;
  std::vector<uint8_t> split;  // 0 train, 1 val, 2 test
  bool classification_mode = true;
  double class_balance = 0.5;
  uint64_t seed = 0;

  std::vector<int> indices_of_split(int which) const {
    std::vector<int> out;
    for (size_t i = 0; i < split.size(); ++i)
      if (split[i] == which) out.push_back(static_cast<int>(i));
    return out;
  }
};

// Cohort generation. Classification mode draws ef from two separated ranges
// (normal [0.45, 0.75], dysfunction [0.10, 0.30]) in proportion
// class_balance; regression mode draws ef uniform on [0.10, 0.75]. The
// 70/15/15 split is deterministic from the seed and stratified by class in
// classification mode.
Cohort make_cohort(int n, double class_balance, bool regression_mode,
                   uint64_t seed, const PhantomParams& base = PhantomParams{});

uint64_t subject_seed(uint64_t cohort_seed, int subject_index);

}  // namespace kmae
