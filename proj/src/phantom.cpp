// SPDX-License-Identifier: Apache-2.0
#include "kmae/phantom.hpp"

#include <algorithm>
#include <array>
#include <cmath>

#include "kmae/rng.hpp"

namespace kmae {

namespace {

constexpr double kPi = 3.14159265358979323846;
// logistic scale; the 10-90% transition spans ~1.1 px
constexpr double kBoundaryWidth = 0.25;
constexpr double kBoundaryMargin = 1.5;  // px, soft tail kept inside the FOV

double logistic(double z) { return 1.0 / (1.0 + std::exp(-z)); }

double outer_radius(double r_in, double wall_area) {
  return std::sqrt(r_in * r_in + wall_area / kPi);
}

}  // namespace

void PhantomParams::validate() const {
  if (!is_power_of_two(grid_size) || grid_size < 8)
    throw ConfigError("phantom: grid_size must be a power of two >= 8, got " +
                      std::to_string(grid_size));
  if (frames < 2) throw ConfigError("phantom: frames must be >= 2");
  if (slices < 1) throw ConfigError("phantom: slices must be >= 1");
  if (!(contraction >= 0.0 && contraction < 1.0))
    throw ConfigError("phantom: contraction must be in [0, 1)");
  if (!(base_cavity_radius > 0) || !(wall_area > 0))
    throw ConfigError("phantom: radius and wall_area must be positive");
  if (noise_std < 0) throw ConfigError("phantom: noise_std must be >= 0");
  const double i0 = intensity_blood, i1 = intensity_myo, i2 = intensity_background;
  if (i0 == i1 || i0 == i2 || i1 == i2)
    throw ConfigError("phantom: intensities must be pairwise distinct");
  // clipping invariant: the annulus plus its soft tail never leaves the FOV
  const double r_out_max = outer_radius(base_cavity_radius, wall_area);
  const double edge = std::min(std::min(center_x, center_y),
                               std::min(grid_size - 1 - center_x,
                                        grid_size - 1 - center_y));
  if (r_out_max + kBoundaryMargin >= grid_size / 2.0 || r_out_max + 1.0 >= edge)
    throw ConfigError("phantom: annulus clips the field of view (outer radius " +
                      std::to_string(r_out_max) + " + margin vs edge distance " +
                      std::to_string(edge) + ")");
}

double slice_scale(int slice, int slices) {
  if (slices <= 1) return 1.0;
  return 1.0 - 0.1 * static_cast<double>(slice) / (slices - 1);
}

double cavity_radius_at(const PhantomParams& p, int frame, int slice) {
  const double phase = 2.0 * kPi * frame / p.frames;
  const double r = p.base_cavity_radius *
                   (1.0 - p.contraction * (1.0 - std::cos(phase)) / 2.0);
  return r * slice_scale(slice, p.slices);
}

std::pair<double, double> phenotypes(const PhantomParams& p) {
  p.validate();
  // A(t) = pi r_in(t)^2; max at t = 0, min at mid-cycle
  const double ef = 1.0 - (1.0 - p.contraction) * (1.0 - p.contraction);
  const double edv = kPi * p.base_cavity_radius * p.base_cavity_radius;
  return {ef, edv};
}

PhantomRecord synth_subject(const PhantomParams& p) {
  p.validate();
  const int g = p.grid_size;
  const size_t frame_px = static_cast<size_t>(g) * g;

  PhantomRecord rec;
  rec.params = p;
  rec.images.resize(static_cast<size_t>(p.slices) * p.frames * frame_px);
  rec.myocardium_masks.resize(rec.images.size());

  Rng noise_rng(mix_seed(p.seed, 0x11A6E5ULL));
  for (int s = 0; s < p.slices; ++s) {
    const double scale = slice_scale(s, p.slices);
    const double wall = p.wall_area * scale * scale;
    for (int t = 0; t < p.frames; ++t) {
      const double r_in = cavity_radius_at(p, t, s);
      const double r_out = outer_radius(r_in, wall);
      float* img = rec.images.data() +
                   (static_cast<size_t>(s) * p.frames + t) * frame_px;
      uint8_t* msk = rec.myocardium_masks.data() +
                     (static_cast<size_t>(s) * p.frames + t) * frame_px;
      for (int y = 0; y < g; ++y) {
        for (int x = 0; x < g; ++x) {
          const double d = std::hypot(y - p.center_y, x - p.center_x);
          const double u_in = logistic((r_in - d) / kBoundaryWidth);
          const double u_out = logistic((r_out - d) / kBoundaryWidth);
          const double annulus = u_out - u_in;
          double v = p.intensity_blood * u_in + p.intensity_myo * annulus +
                     p.intensity_background * (1.0 - u_out);
          if (p.noise_std > 0) v += noise_rng.normal(0.0, p.noise_std);
          // magnitude images are non-negative
          img[static_cast<size_t>(y) * g + x] =
              static_cast<float>(std::max(0.0, v));
          msk[static_cast<size_t>(y) * g + x] = annulus >= 0.5 ? 1 : 0;
        }
      }
    }
  }

  auto [ef, edv] = phenotypes(p);
  rec.ef_analog = ef;
  rec.edv_analog = edv;
  rec.class_label =
      ef < kDysfunctionTau ? ClassLabel::dysfunction : ClassLabel::normal;
  return rec;
}

// Soft occupancy integration: each pixel contributes its cavity fraction.
// Unbiased to within ~pi^3 w^2 / 3 (< 1 px^2 at the 0.25 px boundary scale).
double measured_cavity_area(const PhantomParams& p, int slice, int frame) {
  const int g = p.grid_size;
  const double r_in = cavity_radius_at(p, frame, slice);
  double area = 0;
  for (int y = 0; y < g; ++y)
    for (int x = 0; x < g; ++x) {
      const double d = std::hypot(y - p.center_y, x - p.center_x);
      area += logistic((r_in - d) / kBoundaryWidth);
    }
  return area;
}

double measured_annulus_area(const PhantomParams& p, int slice, int frame) {
  const int g = p.grid_size;
  const double scale = slice_scale(slice, p.slices);
  const double r_in = cavity_radius_at(p, frame, slice);
  const double r_out = outer_radius(r_in, p.wall_area * scale * scale);
  double area = 0;
  for (int y = 0; y < g; ++y)
    for (int x = 0; x < g; ++x) {
      const double d = std::hypot(y - p.center_y, x - p.center_x);
      area += logistic((r_out - d) / kBoundaryWidth) -
              logistic((r_in - d) / kBoundaryWidth);
    }
  return area;
}

uint64_t subject_seed(uint64_t cohort_seed, int subject_index) {
  return mix_seed(cohort_seed, 0x5EED5 + static_cast<uint64_t>(subject_index));
}

namespace {

double ef_to_contraction(double ef) { return 1.0 - std::sqrt(1.0 - ef); }

// per-class 70/15/15 allocation that hits the global targets exactly:
// floor allocations first, remaining slots filled by largest fractional
// remainder (ties resolved by class then bucket order)
std::vector<std::array<int, 3>> stratified_counts(
    const std::vector<int>& class_sizes) {
  const double frac[3] = {0.70, 0.15, 0.15};
  int n = 0;
  for (int m : class_sizes) n += m;
  int target[3];
  target[0] = static_cast<int>(std::lround(frac[0] * n));
  target[1] = static_cast<int>(std::lround(frac[1] * n));
  target[2] = n - target[0] - target[1];

  std::vector<std::array<int, 3>> alloc(class_sizes.size());
  std::vector<std::pair<double, std::pair<size_t, int>>> remainders;
  int given[3] = {0, 0, 0};
  for (size_t c = 0; c < class_sizes.size(); ++c) {
    for (int b = 0; b < 3; ++b) {
      const double exact = frac[b] * class_sizes[c];
      alloc[c][static_cast<size_t>(b)] = static_cast<int>(std::floor(exact));
      given[b] += alloc[c][static_cast<size_t>(b)];
      remainders.push_back({exact - std::floor(exact), {c, b}});
    }
  }
  std::stable_sort(remainders.begin(), remainders.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  // class totals must also be respected
  std::vector<int> class_left(class_sizes.size());
  for (size_t c = 0; c < class_sizes.size(); ++c) {
    int got = alloc[c][0] + alloc[c][1] + alloc[c][2];
    class_left[c] = class_sizes[c] - got;
  }
  for (const auto& r : remainders) {
    auto [c, b] = r.second;
    if (class_left[c] <= 0) continue;
    if (given[b] >= target[b]) continue;
    alloc[c][static_cast<size_t>(b)] += 1;
    given[b] += 1;
    class_left[c] -= 1;
  }
  // any leftovers go to train
  for (size_t c = 0; c < class_sizes.size(); ++c)
    while (class_left[c] > 0) {
      alloc[c][0] += 1;
      class_left[c] -= 1;
    }
  return alloc;
}

}  // namespace

Cohort make_cohort(int n, double class_balance, bool regression_mode,
                   uint64_t seed, const PhantomParams& base) {
  if (n < 10) throw DataError("cohort: need at least 10 subjects, got " +
                              std::to_string(n));
  if (!(class_balance > 0.0 && class_balance < 1.0) && !regression_mode)
    throw DataError("cohort: class_balance must be in (0, 1)");

  Cohort cohort;
  cohort.classification_mode = !regression_mode;
  cohort.class_balance = class_balance;
  cohort.seed = seed;

  const int n_normal =
      regression_mode ? n : static_cast<int>(std::lround(class_balance * n));
  if (!regression_mode) {
    const int n_dys = n - n_normal;
    if (std::min(n_normal, n_dys) < 7)
      throw DataError("cohort: too few subjects per class for a stratified "
                      "70/15/15 split");
  }

  cohort.records.reserve(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    const uint64_t sseed = subject_seed(seed, i);
    Rng rng(mix_seed(sseed, 0xC0B0A7ULL));
    PhantomParams p = base;
    p.seed = sseed;
    // population geometry scales with the field of view
    const double g = base.grid_size;
    p.base_cavity_radius = g * rng.uniform(0.17, 0.22);
    const double thickness = g * rng.uniform(0.08, 0.10);
    p.wall_area = kPi * (2.0 * p.base_cavity_radius * thickness +
                         thickness * thickness);
    const double jitter = 0.04 * g;
    p.center_x = g / 2.0 + rng.uniform(-jitter, jitter);
    p.center_y = g / 2.0 + rng.uniform(-jitter, jitter);
    double ef;
    if (regression_mode) {
      ef = rng.uniform(0.10, 0.75);
    } else {
      const bool normal = i < n_normal;
      ef = normal ? rng.uniform(0.45, 0.75) : rng.uniform(0.10, 0.30);
    }
    p.contraction = ef_to_contraction(ef);
    cohort.records.push_back(synth_subject(p));
  }

  // deterministic stratified split
  cohort.split.assign(static_cast<size_t>(n), 0);
  std::vector<std::vector<int>> by_class;
  if (regression_mode) {
    std::vector<int> all(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) all[static_cast<size_t>(i)] = i;
    by_class.push_back(std::move(all));
  } else {
    by_class.resize(2);
    for (int i = 0; i < n; ++i)
      by_class[cohort.records[static_cast<size_t>(i)].class_label ==
                       ClassLabel::dysfunction
                   ? 1
                   : 0]
          .push_back(i);
  }
  std::vector<int> class_sizes;
  for (const auto& c : by_class) class_sizes.push_back(static_cast<int>(c.size()));
  const auto alloc = stratified_counts(class_sizes);

  Rng split_rng(mix_seed(seed, 0x5B117ULL));
  for (size_t c = 0; c < by_class.size(); ++c) {
    auto idx = by_class[c];
    split_rng.shuffle(idx);
    size_t pos = 0;
    for (int b = 0; b < 3; ++b)
      for (int j = 0; j < alloc[c][static_cast<size_t>(b)]; ++j)
        cohort.split[static_cast<size_t>(idx[pos++])] = static_cast<uint8_t>(b);
  }
  return cohort;
}

}  // namespace kmae
