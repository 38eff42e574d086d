// SPDX-License-Identifier: Apache-2.0
//
// Complex-valued signal chain: centered orthonormal 2D FFT, synthetic phase
// fields that break conjugate symmetry, Hermitian diagnostics, zero-filled
// reconstruction and PSNR.
#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <span>
#include <vector>

#include "kmae/common.hpp"
#include "kmae/rng.hpp"

namespace kmae {

enum class Domain { image, kspace };

// 2D+t complex series, [T][H][W] row-major. H and W must be powers of two.
template <class T>
struct ComplexSeriesT {
  Domain domain = Domain::image;
  int frames = 0, height = 0, width = 0;
  std::vector<std::complex<T>> data;

  static ComplexSeriesT make(Domain d, int t, int h, int w) {
    if (!is_power_of_two(h) || !is_power_of_two(w))
      throw DimensionError("complex series: H and W must be powers of two, got " +
                           std::to_string(h) + "x" + std::to_string(w));
    ComplexSeriesT s;
    s.domain = d;
    s.frames = t;
    s.height = h;
    s.width = w;
    s.data.assign(static_cast<size_t>(t) * h * w, std::complex<T>(0, 0));
    return s;
  }

  std::complex<T>& at(int t, int h, int w) {
    return data[(static_cast<size_t>(t) * height + h) * width + w];
  }
  const std::complex<T>& at(int t, int h, int w) const {
    return data[(static_cast<size_t>(t) * height + h) * width + w];
  }
  size_t frame_size() const { return static_cast<size_t>(height) * width; }
};

using ComplexSeries = ComplexSeriesT<float>;

namespace detail {

// In-place iterative radix-2 Cooley-Tukey over a strided sequence.
template <class T>
void fft_radix2(std::complex<T>* x, int n, int stride, bool inverse) {
  // bit-reversal permutation
  for (int i = 1, j = 0; i < n; ++i) {
    int bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(x[static_cast<size_t>(i) * stride],
                         x[static_cast<size_t>(j) * stride]);
  }
  const T sign = inverse ? T(1) : T(-1);
  for (int len = 2; len <= n; len <<= 1) {
    const double ang = sign * 2.0 * 3.14159265358979323846 / len;
    const std::complex<T> wlen(static_cast<T>(std::cos(ang)),
                               static_cast<T>(std::sin(ang)));
    for (int i = 0; i < n; i += len) {
      std::complex<T> w(1, 0);
      for (int j = 0; j < len / 2; ++j) {
        std::complex<T>& u = x[static_cast<size_t>(i + j) * stride];
        std::complex<T>& v = x[static_cast<size_t>(i + j + len / 2) * stride];
        const std::complex<T> t = v * w;
        v = u - t;
        u = u + t;
        w *= wlen;
      }
    }
  }
}

// circular shift by (H/2, W/2); self-inverse for even sizes
template <class T>
void half_shift_2d(std::complex<T>* frame, int h, int w) {
  std::vector<std::complex<T>> tmp(static_cast<size_t>(h) * w);
  const int hh = h / 2, hw = w / 2;
  for (int y = 0; y < h; ++y) {
    const int sy = (y + hh) % h;
    for (int x = 0; x < w; ++x)
      tmp[static_cast<size_t>(y) * w + x] =
          frame[static_cast<size_t>(sy) * w + (x + hw) % w];
  }
  std::copy(tmp.begin(), tmp.end(), frame);
}

template <class T>
void fft2_frame(std::complex<T>* frame, int h, int w, bool inverse) {
  half_shift_2d(frame, h, w);
  for (int y = 0; y < h; ++y)
    fft_radix2(frame + static_cast<size_t>(y) * w, w, 1, inverse);
  for (int x = 0; x < w; ++x) fft_radix2(frame + x, h, w, inverse);
  const T norm = T(1) / std::sqrt(static_cast<T>(h) * static_cast<T>(w));
  for (size_t i = 0; i < static_cast<size_t>(h) * w; ++i) frame[i] *= norm;
  half_shift_2d(frame, h, w);
}

}  // namespace detail

// Per-frame centered orthonormal 2D FFT; DC lands at (H/2, W/2) and
// Parseval holds exactly up to rounding.
template <class T>
ComplexSeriesT<T> fft2_centered(const ComplexSeriesT<T>& x) {
  if (x.domain != Domain::image)
    throw ContractError("fft2_centered: input must be image domain");
  ComplexSeriesT<T> out = x;
  out.domain = Domain::kspace;
  for (int t = 0; t < x.frames; ++t)
    detail::fft2_frame(out.data.data() + t * x.frame_size(), x.height, x.width,
                       /*inverse=*/false);
  return out;
}

template <class T>
ComplexSeriesT<T> ifft2_centered(const ComplexSeriesT<T>& k) {
  if (k.domain != Domain::kspace)
    throw ContractError("ifft2_centered: input must be k-space domain");
  ComplexSeriesT<T> out = k;
  out.domain = Domain::image;
  for (int t = 0; t < k.frames; ++t)
    detail::fft2_frame(out.data.data() + t * k.frame_size(), k.height, k.width,
                       /*inverse=*/true);
  return out;
}

// raw-plane transforms used by the autograd FFT op (no domain bookkeeping)
template <class T>
void fft2_frame_raw(std::complex<T>* frame, int h, int w) {
  detail::fft2_frame(frame, h, w, false);
}
template <class T>
void ifft2_frame_raw(std::complex<T>* frame, int h, int w) {
  detail::fft2_frame(frame, h, w, true);
}

// Smooth spatial phase perturbation modeling B0 inhomogeneity: white noise
// blurred with a circular Gaussian kernel, rescaled so max|phase| equals
// amplitude exactly.
template <class T>
struct B0FieldT {
  int height = 0, width = 0;
  T smoothing_sigma = 0, amplitude = 0;
  uint64_t seed = 0;
  std::vector<T> phase;  // radians, [H][W]
};

using B0Field = B0FieldT<float>;

template <class T>
B0FieldT<T> make_b0_field(int h, int w, double smoothing_sigma,
                          double amplitude, uint64_t seed) {
  if (!(amplitude > 0)) throw ConfigError("b0 field: amplitude must be > 0");
  if (!(smoothing_sigma >= 1)) throw ConfigError("b0 field: sigma must be >= 1");
  Rng rng(mix_seed(seed, 0xB0F1E1DULL));
  std::vector<double> noise(static_cast<size_t>(h) * w);
  for (auto& v : noise) v = rng.normal();

  // separable circular Gaussian blur, kernel truncated at 3 sigma
  const int radius = static_cast<int>(std::ceil(3.0 * smoothing_sigma));
  std::vector<double> kernel(static_cast<size_t>(2 * radius + 1));
  double ksum = 0;
  for (int i = -radius; i <= radius; ++i) {
    kernel[static_cast<size_t>(i + radius)] =
        std::exp(-0.5 * i * i / (smoothing_sigma * smoothing_sigma));
    ksum += kernel[static_cast<size_t>(i + radius)];
  }
  for (auto& k : kernel) k /= ksum;

  std::vector<double> tmp(noise.size());
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double acc = 0;
      for (int i = -radius; i <= radius; ++i)
        acc += kernel[static_cast<size_t>(i + radius)] *
               noise[static_cast<size_t>(y) * w + ((x + i) % w + w) % w];
      tmp[static_cast<size_t>(y) * w + x] = acc;
    }
  for (int x = 0; x < w; ++x)
    for (int y = 0; y < h; ++y) {
      double acc = 0;
      for (int i = -radius; i <= radius; ++i)
        acc += kernel[static_cast<size_t>(i + radius)] *
               tmp[static_cast<size_t>(((y + i) % h + h) % h) * w + x];
      noise[static_cast<size_t>(y) * w + x] = acc;
    }

  double maxabs = 0;
  for (double v : noise) maxabs = std::max(maxabs, std::abs(v));
  if (maxabs == 0) noise[0] = maxabs = 1.0;  // degenerate draw

  B0FieldT<T> f;
  f.height = h;
  f.width = w;
  f.smoothing_sigma = static_cast<T>(smoothing_sigma);
  f.amplitude = static_cast<T>(amplitude);
  f.seed = seed;
  f.phase.resize(noise.size());
  // divide first: the argmax maps to exactly +/- amplitude
  for (size_t i = 0; i < noise.size(); ++i)
    f.phase[i] = static_cast<T>((noise[i] / maxabs) * amplitude);
  return f;
}

// elementwise multiply by exp(i * phase); per-pixel magnitude is preserved
template <class T>
ComplexSeriesT<T> apply_b0_phase(const ComplexSeriesT<T>& x,
                                 const B0FieldT<T>& field) {
  if (x.domain != Domain::image)
    throw ContractError("apply_b0_phase: input must be image domain");
  if (x.height != field.height || x.width != field.width)
    throw DimensionError("apply_b0_phase: series " + std::to_string(x.height) +
                         "x" + std::to_string(x.width) + " vs field " +
                         std::to_string(field.height) + "x" +
                         std::to_string(field.width));
  ComplexSeriesT<T> out = x;
  std::vector<std::complex<T>> rot(field.phase.size());
  for (size_t i = 0; i < rot.size(); ++i)
    rot[i] = std::complex<T>(std::cos(field.phase[i]), std::sin(field.phase[i]));
  for (int t = 0; t < x.frames; ++t) {
    std::complex<T>* fr = out.data.data() + t * x.frame_size();
    for (size_t i = 0; i < x.frame_size(); ++i) fr[i] *= rot[i];
  }
  return out;
}

// Conjugate-symmetry violation per frame. The raw mismatch
// ||K - conj(K reflected through DC)|| is insensitive to the signal but not
// to a global phase, so the measure aligns the best global phase first:
//   asym^2 = 2 (||K||^2 - |sum_f K(refl f) K(f)|) / ||K||^2.
// Real images (any shift) and globally phase-rotated real images score ~0;
// spatially varying phase scores well above.
template <class T>
std::vector<double> hermitian_asymmetry(const ComplexSeriesT<T>& k) {
  if (k.domain != Domain::kspace)
    throw ContractError("hermitian_asymmetry: input must be k-space domain");
  std::vector<double> out(static_cast<size_t>(k.frames));
  for (int t = 0; t < k.frames; ++t) {
    const std::complex<T>* fr = k.data.data() + t * k.frame_size();
    double norm2 = 0;
    std::complex<double> corr(0, 0);
    for (int y = 0; y < k.height; ++y) {
      const int ry = (k.height - y) % k.height;
      for (int x = 0; x < k.width; ++x) {
        const int rx = (k.width - x) % k.width;
        const std::complex<double> a(fr[static_cast<size_t>(y) * k.width + x]);
        const std::complex<double> b(fr[static_cast<size_t>(ry) * k.width + rx]);
        norm2 += std::norm(a);
        corr += b * a;
      }
    }
    out[static_cast<size_t>(t)] =
        norm2 > 0 ? std::sqrt(std::max(0.0, 2.0 * (norm2 - std::abs(corr))) /
                              norm2)
                  : 0.0;
  }
  return out;
}

// 20 log10(max(reference) / RMSE), capped at 99 dB
inline double psnr(std::span<const float> reference, std::span<const float> test) {
  if (reference.size() != test.size())
    throw DimensionError("psnr: size mismatch " +
                         std::to_string(reference.size()) + " vs " +
                         std::to_string(test.size()));
  double peak = 0, se = 0;
  for (size_t i = 0; i < reference.size(); ++i) {
    peak = std::max(peak, static_cast<double>(reference[i]));
    const double d = static_cast<double>(reference[i]) - test[i];
    se += d * d;
  }
  if (peak <= 0) throw DataError("psnr: reference is identically zero");
  const double rmse = std::sqrt(se / static_cast<double>(reference.size()));
  if (rmse == 0) return 99.0;
  return std::min(99.0, 20.0 * std::log10(peak / rmse));
}

}  // namespace kmae
