// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <complex>
#include <cstring>

#include "kmae/kspace.hpp"
#include "kmae/phantom.hpp"
#include "kmae/rng.hpp"
#include "kmae/sampling.hpp"

using namespace kmae;

namespace {

// naive O(N^4) centered DFT, the oracle
template <class T>
ComplexSeriesT<T> naive_centered_dft(const ComplexSeriesT<T>& x) {
  ComplexSeriesT<T> out = ComplexSeriesT<T>::make(Domain::kspace, x.frames,
                                                  x.height, x.width);
  const double norm = 1.0 / std::sqrt(static_cast<double>(x.height) * x.width);
  for (int t = 0; t < x.frames; ++t)
    for (int u = 0; u < x.height; ++u)
      for (int v = 0; v < x.width; ++v) {
        std::complex<double> acc(0, 0);
        for (int y = 0; y < x.height; ++y)
          for (int xx = 0; xx < x.width; ++xx) {
            const double ang =
                -2.0 * 3.14159265358979323846 *
                ((u - x.height / 2) * static_cast<double>(y - x.height / 2) /
                     x.height +
                 (v - x.width / 2) * static_cast<double>(xx - x.width / 2) /
                     x.width);
            acc += std::complex<double>(x.at(t, y, xx)) *
                   std::polar(1.0, ang);
          }
        out.at(t, u, v) = std::complex<T>(acc * norm);
      }
  return out;
}

template <class T>
ComplexSeriesT<T> random_image(int frames, int h, int w, uint64_t seed) {
  auto s = ComplexSeriesT<T>::make(Domain::image, frames, h, w);
  Rng rng(seed);
  for (auto& z : s.data)
    z = std::complex<T>(static_cast<T>(rng.normal()), static_cast<T>(rng.normal()));
  return s;
}

template <class T>
double energy(const ComplexSeriesT<T>& s) {
  double e = 0;
  for (const auto& z : s.data) e += std::norm(std::complex<double>(z));
  return e;
}

ComplexSeriesT<double> phantom_frame_as_series(const PhantomRecord& rec,
                                               int slice) {
  const auto& p = rec.params;
  auto s = ComplexSeriesT<double>::make(Domain::image, p.frames, p.grid_size,
                                        p.grid_size);
  for (int t = 0; t < p.frames; ++t) {
    const float* img = rec.image_frame(slice, t);
    for (int i = 0; i < p.grid_size * p.grid_size; ++i)
      s.data[static_cast<size_t>(t) * s.frame_size() + i] = {img[i], 0.0};
  }
  return s;
}

}  // namespace

TEST_CASE("constant image concentrates at DC with magnitude sqrt(HW)") {
  auto x = ComplexSeriesT<double>::make(Domain::image, 1, 16, 16);
  for (auto& z : x.data) z = {1.0, 0.0};
  auto k = fft2_centered(x);
  CHECK(k.domain == Domain::kspace);
  const double dc = std::abs(k.at(0, 8, 8));
  CHECK(dc == doctest::Approx(16.0).epsilon(1e-12));
  double off = 0;
  for (int u = 0; u < 16; ++u)
    for (int v = 0; v < 16; ++v)
      if (u != 8 || v != 8) off = std::max(off, std::abs(k.at(0, u, v)));
  CHECK(off < 1e-12);
}

TEST_CASE("unit impulse at center gives flat spectrum 1/sqrt(HW)") {
  auto x = ComplexSeriesT<double>::make(Domain::image, 1, 8, 8);
  x.at(0, 4, 4) = {1.0, 0.0};
  auto k = fft2_centered(x);
  for (const auto& z : k.data) {
    CHECK(z.real() == doctest::Approx(1.0 / 8).epsilon(1e-12));
    CHECK(std::abs(z.imag()) < 1e-14);
  }
}

TEST_CASE("random 16x16 frame matches the naive DFT oracle within 1e-10") {
  auto x = random_image<double>(2, 16, 16, 99);
  auto fast = fft2_centered(x);
  auto slow = naive_centered_dft(x);
  double maxdiff = 0;
  for (size_t i = 0; i < fast.data.size(); ++i)
    maxdiff = std::max(maxdiff, std::abs(fast.data[i] - slow.data[i]));
  CHECK(maxdiff < 1e-10);
}

TEST_CASE("roundtrip identity, both precisions") {
  auto xd = random_image<double>(3, 32, 32, 5);
  auto backd = ifft2_centered(fft2_centered(xd));
  double maxd = 0;
  for (size_t i = 0; i < xd.data.size(); ++i)
    maxd = std::max(maxd, std::abs(backd.data[i] - xd.data[i]));
  CHECK(maxd < 1e-10);

  auto xf = random_image<float>(3, 32, 32, 6);
  auto backf = ifft2_centered(fft2_centered(xf));
  double maxf = 0;
  for (size_t i = 0; i < xf.data.size(); ++i)
    maxf = std::max(maxf, static_cast<double>(std::abs(backf.data[i] - xf.data[i])));
  CHECK(maxf < 1e-5);
  CHECK(backf.domain == Domain::image);
}

TEST_CASE("DC-only spike inverts to a constant image") {
  auto k = ComplexSeriesT<double>::make(Domain::kspace, 1, 16, 16);
  k.at(0, 8, 8) = {4.0, 0.0};
  auto img = ifft2_centered(k);
  for (const auto& z : img.data)
    CHECK(z.real() == doctest::Approx(4.0 / 16.0).epsilon(1e-12));
}

TEST_CASE("Parseval and linearity") {
  auto x = random_image<double>(2, 32, 32, 7);
  auto y = random_image<double>(2, 32, 32, 8);
  auto kx = fft2_centered(x), ky = fft2_centered(y);
  CHECK(std::abs(energy(kx) - energy(x)) / energy(x) < 1e-6);

  auto combo = x;
  for (size_t i = 0; i < combo.data.size(); ++i)
    combo.data[i] = 2.5 * x.data[i] + y.data[i];
  auto kc = fft2_centered(combo);
  double num = 0, den = 0;
  for (size_t i = 0; i < kc.data.size(); ++i) {
    num += std::norm(kc.data[i] - (2.5 * kx.data[i] + ky.data[i]));
    den += std::norm(kc.data[i]);
  }
  CHECK(std::sqrt(num / den) < 1e-6);
}

TEST_CASE("non power of two sizes rejected") {
  CHECK_THROWS_AS(ComplexSeriesT<float>::make(Domain::image, 1, 24, 32),
                  DimensionError);
}

TEST_CASE("b0 field contracts") {
  auto f = make_b0_field<double>(32, 32, 4.0, 1.5707963267948966, 11);
  double mx = 0;
  for (double v : f.phase) mx = std::max(mx, std::abs(v));
  CHECK(mx == 1.5707963267948966);  // argmax maps to exactly +/- amplitude

  auto f2 = make_b0_field<double>(32, 32, 4.0, 1.5707963267948966, 11);
  CHECK(std::memcmp(f.phase.data(), f2.phase.data(),
                    f.phase.size() * sizeof(double)) == 0);

  // smoothness: spectral energy above Nyquist/4 below 1%
  auto img = ComplexSeriesT<double>::make(Domain::image, 1, 32, 32);
  for (size_t i = 0; i < img.data.size(); ++i) img.data[i] = {f.phase[i], 0.0};
  auto k = fft2_centered(img);
  double high = 0, total = 0;
  for (int u = 0; u < 32; ++u)
    for (int v = 0; v < 32; ++v) {
      const double fy = u - 16, fx = v - 16;
      const double e = std::norm(k.at(0, u, v));
      total += e;
      if (std::hypot(fy, fx) > 4.0) high += e;
    }
  CHECK(high / total < 0.01);

  CHECK_THROWS_AS(make_b0_field<double>(32, 32, 4.0, 0.0, 1), ConfigError);
  CHECK_THROWS_AS(make_b0_field<double>(32, 32, 0.5, 1.0, 1), ConfigError);
}

TEST_CASE("apply_b0_phase preserves magnitude; zero field is the identity") {
  auto x = random_image<double>(2, 16, 16, 12);
  B0FieldT<double> zero;
  zero.height = 16;
  zero.width = 16;
  zero.phase.assign(256, 0.0);
  auto same = apply_b0_phase(x, zero);
  for (size_t i = 0; i < x.data.size(); ++i) CHECK(same.data[i] == x.data[i]);

  auto f = make_b0_field<double>(16, 16, 2.0, 1.2, 3);
  auto rot = apply_b0_phase(x, f);
  for (size_t i = 0; i < x.data.size(); ++i)
    CHECK(std::abs(rot.data[i]) ==
          doctest::Approx(std::abs(x.data[i])).epsilon(1e-12));
}

TEST_CASE("hermitian asymmetry") {
  // real image -> ~0
  auto x = random_image<double>(1, 32, 32, 21);
  for (auto& z : x.data) z = {z.real(), 0.0};
  auto asym = hermitian_asymmetry(fft2_centered(x));
  CHECK(asym[0] < 1e-6);

  // i * real image -> still ~0 (global phase does not break the symmetry)
  auto xi = x;
  for (auto& z : xi.data) z = {0.0, z.real()};
  auto asym_i = hermitian_asymmetry(fft2_centered(xi));
  CHECK(asym_i[0] < 1e-6);

  // random complex k-space: typical value in (0.5, 1.5), matches the direct
  // formula evaluated independently
  auto kr = random_image<double>(1, 16, 16, 22);
  kr.domain = Domain::kspace;
  auto a = hermitian_asymmetry(kr);
  CHECK(a[0] > 0.5);
  CHECK(a[0] < 1.5);
  double norm2 = 0;
  std::complex<double> corr(0, 0);
  for (int u = 0; u < 16; ++u)
    for (int v = 0; v < 16; ++v) {
      auto K = kr.at(0, u, v);
      auto R = kr.at(0, (16 - u) % 16, (16 - v) % 16);
      norm2 += std::norm(K);
      corr += R * K;
    }
  const double direct =
      std::sqrt(2.0 * (norm2 - std::abs(corr)) / norm2);
  CHECK(std::abs(a[0] - direct) < 1e-10);
}

TEST_CASE("phantom frame: b0 phase raises asymmetry from ~0 to >= 0.05") {
  PhantomParams p;
  p.seed = 31;
  p.noise_std = 0.02;
  auto rec = synth_subject(p);
  auto img = phantom_frame_as_series(rec, 0);
  auto before = hermitian_asymmetry(fft2_centered(img));
  for (double v : before) CHECK(v < 1e-6);

  auto field = make_b0_field<double>(32, 32, 4.0, 1.5707963267948966, p.seed);
  auto after = hermitian_asymmetry(fft2_centered(apply_b0_phase(img, field)));
  for (double v : after) CHECK(v >= 0.05);

  // the property already holds at half the default amplitude
  auto quarter = make_b0_field<double>(32, 32, 4.0, 0.7853981633974483, p.seed);
  auto after_q = hermitian_asymmetry(fft2_centered(apply_b0_phase(img, quarter)));
  for (double v : after_q) CHECK(v >= 0.05);
}

TEST_CASE("psnr") {
  std::vector<float> ref(100, 0.5f);
  ref[3] = 1.0f;  // peak 1
  std::vector<float> same = ref;
  CHECK(psnr(ref, same) == 99.0);

  // rmse exactly 0.1 against peak 1 -> 20 dB
  std::vector<float> test = ref;
  for (auto& v : test) v += 0.1f;
  CHECK(psnr(ref, test) == doctest::Approx(20.0).epsilon(1e-6));

  std::vector<float> zeros(100, 0.0f);
  CHECK_THROWS_AS(psnr(zeros, same), DataError);

  // direct formula oracle on arbitrary arrays
  Rng rng(17);
  std::vector<float> a(64), b(64);
  for (auto& v : a) v = static_cast<float>(rng.uniform(0.1, 1.0));
  for (size_t i = 0; i < b.size(); ++i)
    b[i] = a[i] + static_cast<float>(rng.normal(0.0, 0.05));
  double peak = 0, se = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    peak = std::max(peak, static_cast<double>(a[i]));
    se += (static_cast<double>(a[i]) - b[i]) * (static_cast<double>(a[i]) - b[i]);
  }
  const double want = 20.0 * std::log10(peak / std::sqrt(se / 64.0));
  CHECK(psnr(a, b) == doctest::Approx(want).epsilon(1e-9));
}

TEST_CASE("zero-filled reconstruction") {
  PhantomParams p;
  p.seed = 77;
  auto rec = synth_subject(p);
  auto img = phantom_frame_as_series(rec, 0);
  auto k = fft2_centered(img);

  SUBCASE("full mask reproduces the original magnitudes") {
    auto full = make_mask(32, p.frames, 1.0, 4, 1);
    auto mag = zero_fill_reconstruct(k, full);
    for (size_t i = 0; i < mag.size(); ++i)
      CHECK(mag[i] == doctest::Approx(std::abs(img.data[i])).epsilon(1e-9));
  }

  SUBCASE("DC-line-only sampling is constant along phase encode") {
    SamplingMask dc;
    dc.frames = p.frames;
    dc.num_lines = 32;
    dc.acceleration = 32;
    dc.acs_count = 2;
    dc.lines.assign(static_cast<size_t>(p.frames) * 32, 0);
    for (int t = 0; t < p.frames; ++t)
      dc.lines[static_cast<size_t>(t) * 32 + 16] = 1;
    auto mag = zero_fill_reconstruct(k, dc);
    for (int t = 0; t < p.frames; ++t)
      for (int x = 0; x < 32; ++x)
        for (int y = 1; y < 32; ++y)
          CHECK(mag[(static_cast<size_t>(t) * 32 + y) * 32 + x] ==
                doctest::Approx(mag[static_cast<size_t>(t) * 32 * 32 + x])
                    .epsilon(1e-6));
  }

  SUBCASE("R=4 strictly degrades PSNR versus R=1") {
    std::vector<float> ref(rec.images.begin(),
                           rec.images.begin() + p.frames * 1024);
    auto full = make_mask(32, p.frames, 1.0, 4, 1);
    auto r4 = make_mask(32, p.frames, 4.0, 4, 1);
    auto mag_full = zero_fill_reconstruct(k, full);
    auto mag_r4 = zero_fill_reconstruct(k, r4);
    std::vector<float> f_full(mag_full.begin(), mag_full.end());
    std::vector<float> f_r4(mag_r4.begin(), mag_r4.end());
    CHECK(psnr(ref, f_r4) < psnr(ref, f_full));
  }
}
