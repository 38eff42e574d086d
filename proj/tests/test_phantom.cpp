// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>

#include "kmae/phantom.hpp"

using namespace kmae;

namespace {
constexpr double kPi = 3.14159265358979323846;
}

TEST_CASE("no contraction: identical frames, ef 0, identical masks") {
  PhantomParams p;
  p.contraction = 0.0;
  p.noise_std = 0.0;
  p.seed = 4;
  auto rec = synth_subject(p);
  CHECK(rec.ef_analog == 0.0);
  const size_t fsz = rec.frame_size();
  for (int t = 1; t < p.frames; ++t) {
    CHECK(std::memcmp(rec.image_frame(0, 0), rec.image_frame(0, t),
                      fsz * sizeof(float)) == 0);
    CHECK(std::memcmp(rec.mask_frame(0, 0), rec.mask_frame(0, t), fsz) == 0);
  }
}

TEST_CASE("diastolic cavity area within 3% of pi r^2 (pixel-count oracle)") {
  PhantomParams p;
  p.noise_std = 0.0;
  p.base_cavity_radius = 8.0;
  p.seed = 5;
  auto rec = synth_subject(p);
  // hard pixel count of the soft cavity indicator >= 0.5, i.e. d <= r
  double count = 0;
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 32; ++x)
      if (std::hypot(y - p.center_y, x - p.center_x) <= 8.0) count += 1;
  const double analytic = kPi * 64.0;
  CHECK(std::abs(count - analytic) / analytic < 0.03);
  // the module's soft-occupancy measurement is tighter still
  CHECK(std::abs(measured_cavity_area(p, 0, 0) - analytic) / analytic < 0.01);
  (void)rec;
}

TEST_CASE("determinism: same params give byte-identical records") {
  PhantomParams p;
  p.seed = 1234;
  auto a = synth_subject(p);
  auto b = synth_subject(p);
  CHECK(std::memcmp(a.images.data(), b.images.data(),
                    a.images.size() * sizeof(float)) == 0);
  CHECK(a.myocardium_masks == b.myocardium_masks);
  CHECK(a.ef_analog == b.ef_analog);
}

TEST_CASE("phenotype closed forms") {
  PhantomParams p;
  p.contraction = 0.0;
  auto [ef0, edv0] = phenotypes(p);
  CHECK(ef0 == 0.0);
  CHECK(edv0 == doctest::Approx(kPi * 64.0).epsilon(1e-12));

  p.contraction = 0.5;
  CHECK(phenotypes(p).first == doctest::Approx(0.75).epsilon(1e-12));

  p.contraction = 0.2;
  auto [ef2, edv2] = phenotypes(p);
  CHECK(ef2 == doctest::Approx(0.36).epsilon(1e-12));
  CHECK(ef2 >= kDysfunctionTau);  // classified normal at tau = 0.35
  (void)edv2;
}

TEST_CASE("parameter validation") {
  PhantomParams p;
  p.base_cavity_radius = 14.0;  // annulus would clip the FOV
  CHECK_THROWS_AS(p.validate(), ConfigError);

  PhantomParams q;
  q.grid_size = 33;
  CHECK_THROWS_AS(q.validate(), ConfigError);

  PhantomParams r;
  r.contraction = 1.0;
  CHECK_THROWS_AS(r.validate(), ConfigError);

  PhantomParams s;
  s.intensity_blood = s.intensity_myo;
  CHECK_THROWS_AS(s.validate(), ConfigError);
}

TEST_CASE("mask and phenotype consistency on cohort subjects") {
  auto cohort = make_cohort(24, 0.5, false, 99);
  for (const auto& rec : cohort.records) {
    const auto& p = rec.params;

    // measured cavity area tracks the analytic area within 3% wherever the
    // cavity radius stays above the pixel-quantization floor
    for (int t = 0; t < p.frames; ++t) {
      const double r = cavity_radius_at(p, t, 0);
      if (r < 5.0) continue;
      const double analytic = kPi * r * r;
      CHECK(std::abs(measured_cavity_area(p, 0, t) - analytic) / analytic <
            0.03);
    }

    // ef re-measured from per-frame areas within 2 percentage points
    double amax = 0, amin = 1e18;
    for (int t = 0; t < p.frames; ++t) {
      const double a = measured_cavity_area(p, 0, t);
      amax = std::max(amax, a);
      amin = std::min(amin, a);
    }
    CHECK(std::abs((amax - amin) / amax - rec.ef_analog) < 0.02);

    // wall-area conservation: soft-occupancy annulus area spread below 5%;
    // the binary mask count carries lattice quantization of a few percent on
    // top, so it only gets a sanity bound here
    for (int s = 0; s < p.slices; ++s) {
      double amin = 1e18, amax = 0;
      double cmin = 1e18, cmax = 0, csum = 0;
      for (int t = 0; t < p.frames; ++t) {
        const double a = measured_annulus_area(p, s, t);
        amin = std::min(amin, a);
        amax = std::max(amax, a);
        double cnt = 0;
        const uint8_t* m = rec.mask_frame(s, t);
        for (size_t i = 0; i < rec.frame_size(); ++i) cnt += m[i];
        cmin = std::min(cmin, cnt);
        cmax = std::max(cmax, cnt);
        csum += cnt;
      }
      CHECK((amax - amin) / amax < 0.05);
      CHECK((cmax - cmin) / (csum / p.frames) < 0.20);
      CHECK(cmin > 0);
    }

    // label correctness
    const bool dys = rec.ef_analog < kDysfunctionTau;
    CHECK((rec.class_label == ClassLabel::dysfunction) == dys);
  }
}

TEST_CASE("cohort of 100 at balance 0.5: 50/50 labels, 70/15/15 split") {
  auto cohort = make_cohort(100, 0.5, false, 7);
  int normal = 0, dys = 0;
  int counts[3] = {0, 0, 0};
  for (size_t i = 0; i < cohort.records.size(); ++i) {
    (cohort.records[i].class_label == ClassLabel::normal ? normal : dys) += 1;
    counts[cohort.split[i]] += 1;
  }
  CHECK(normal == 50);
  CHECK(dys == 50);
  CHECK(counts[0] == 70);
  CHECK(counts[1] == 15);
  CHECK(counts[2] == 15);

  // stratified: each split contains both classes
  for (int which = 0; which < 3; ++which) {
    int n = 0, d = 0;
    for (size_t i = 0; i < cohort.records.size(); ++i)
      if (cohort.split[i] == which)
        (cohort.records[i].class_label == ClassLabel::normal ? n : d) += 1;
    CHECK(n > 0);
    CHECK(d > 0);
  }

  // classification ranges are separated
  for (const auto& rec : cohort.records) {
    if (rec.class_label == ClassLabel::normal) {
      CHECK(rec.ef_analog >= 0.45);
      CHECK(rec.ef_analog <= 0.75);
    } else {
      CHECK(rec.ef_analog >= 0.10);
      CHECK(rec.ef_analog <= 0.30);
    }
  }
}

TEST_CASE("cohort determinism") {
  auto a = make_cohort(16, 0.5, false, 5);
  auto b = make_cohort(16, 0.5, false, 5);
  CHECK(a.split == b.split);
  for (size_t i = 0; i < a.records.size(); ++i) {
    CHECK(std::memcmp(a.records[i].images.data(), b.records[i].images.data(),
                      a.records[i].images.size() * sizeof(float)) == 0);
    CHECK(a.records[i].ef_analog == b.records[i].ef_analog);
  }
}

TEST_CASE("regression cohort: ef uniform on [0.1, 0.75]") {
  PhantomParams base;
  base.frames = 2;
  base.slices = 1;
  auto cohort = make_cohort(1000, 0.5, true, 31, base);
  double mean = 0;
  for (const auto& rec : cohort.records) {
    CHECK(rec.ef_analog >= 0.10);
    CHECK(rec.ef_analog <= 0.75);
    mean += rec.ef_analog;
  }
  mean /= 1000.0;
  CHECK(std::abs(mean - 0.425) < 0.03);
}

TEST_CASE("cohort too small is rejected") {
  CHECK_THROWS_AS(make_cohort(5, 0.5, false, 1), DataError);
  CHECK_THROWS_AS(make_cohort(12, 0.05, false, 1), DataError);
}
