// Copyright 2026 The jneeg Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Causal streaming DSP: Butterworth band-pass / band-stop filters as
// cascaded biquads, band power, complex Morlet scalograms and epoching.

#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <numbers>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "jneeg/error.hpp"
#include "jneeg/types.hpp"

namespace jneeg {

// ---------------------------------------------------------------------------
// Filter design

enum class FilterKind { bandpass, notch };

struct FilterSpec {
  FilterKind kind = FilterKind::bandpass;
  double low_hz = 1.0;
  double high_hz = 40.0;
  /// Total filter order; the band transform doubles the prototype order,
  /// so `order` / 2 biquads are produced.
  int order = 4;
  double fs = 250.0;
};

inline FilterSpec bandpass_spec(double low_hz, double high_hz, double fs = 250.0, int order = 4) {
  return {FilterKind::bandpass, low_hz, high_hz, order, fs};
}

inline FilterSpec notch_spec(double low_hz, double high_hz, double fs = 250.0, int order = 2) {
  return {FilterKind::notch, low_hz, high_hz, order, fs};
}

/// Second-order section, a0 normalised to 1:
/// y = b0 x + b1 x[-1] + b2 x[-2] - a1 y[-1] - a2 y[-2]
struct Biquad {
  double b0 = 1, b1 = 0, b2 = 0;
  double a1 = 0, a2 = 0;
};

using SosCoefficients = std::vector<Biquad>;

inline void validate(const FilterSpec& spec) {
  if (!(spec.fs > 0)) throw Error(ErrorCode::design, "fs must be positive");
  if (!(spec.low_hz > 0 && spec.low_hz < spec.high_hz && spec.high_hz < spec.fs / 2)) {
    throw Error(ErrorCode::design, "need 0 < low_hz < high_hz < fs/2");
  }
  if (spec.order != 2 && spec.order != 4 && spec.order != 6 && spec.order != 8) {
    throw Error(ErrorCode::design, "order must be one of 2, 4, 6, 8");
  }
}

inline std::complex<double> frequency_response(const SosCoefficients& sos, double f_hz, double fs) {
  const std::complex<double> z1 = std::polar(1.0, -2.0 * std::numbers::pi * f_hz / fs);
  const std::complex<double> z2 = z1 * z1;
  std::complex<double> h{1.0, 0.0};
  for (const auto& s : sos) h *= (s.b0 + s.b1 * z1 + s.b2 * z2) / (1.0 + s.a1 * z1 + s.a2 * z2);
  return h;
}

namespace detail {

using cplx = std::complex<double>;

inline std::vector<cplx> butterworth_prototype(int n) {
  std::vector<cplx> poles;
  for (int k = 1; k <= n; ++k) {
    poles.push_back(std::polar(1.0, std::numbers::pi * (2.0 * k + n - 1) / (2.0 * n)));
  }
  return poles;
}

inline double prewarp(double f_hz, double fs) { return 2.0 * fs * std::tan(std::numbers::pi * f_hz / fs); }

inline cplx bilinear(cplx s, double fs) { return (2.0 * fs + s) / (2.0 * fs - s); }

/// Groups z-plane poles into conjugate pairs (or pairs of real poles).
inline std::vector<std::pair<double, double>> pole_pairs(std::vector<cplx> poles) {
  constexpr double eps = 1e-12;
  std::vector<std::pair<double, double>> out;  // (a1, a2)
  std::vector<double> reals;
  for (const auto& p : poles) {
    if (p.imag() > eps) {
      out.emplace_back(-2.0 * p.real(), std::norm(p));
    } else if (std::abs(p.imag()) <= eps) {
      reals.push_back(p.real());
    }
  }
  std::sort(reals.begin(), reals.end());
  for (std::size_t i = 0; i + 1 < reals.size(); i += 2) {
    out.emplace_back(-(reals[i] + reals[i + 1]), reals[i] * reals[i + 1]);
  }
  return out;
}

inline void normalize_gain(SosCoefficients& sos, double f_hz, double fs) {
  const double g = std::abs(frequency_response(sos, f_hz, fs));
  const double per_section = std::pow(g, 1.0 / static_cast<double>(sos.size()));
  for (auto& s : sos) {
    s.b0 /= per_section;
    s.b1 /= per_section;
    s.b2 /= per_section;
  }
}

}  // namespace detail

/// Butterworth band-pass via analog low-pass prototype, low-pass to
/// band-pass transform on pre-warped edges, and the bilinear transform.
/// The -3 dB points land exactly on low_hz and high_hz.
inline SosCoefficients design_bandpass(const FilterSpec& spec) {
  validate(spec);
  if (spec.kind != FilterKind::bandpass) throw Error(ErrorCode::design, "design_bandpass needs a bandpass spec");
  using detail::cplx;
  const double w1 = detail::prewarp(spec.low_hz, spec.fs);
  const double w2 = detail::prewarp(spec.high_hz, spec.fs);
  const double bw = w2 - w1;
  const double w0sq = w1 * w2;

  std::vector<cplx> zpoles;
  for (const cplx& p : detail::butterworth_prototype(spec.order / 2)) {
    const cplx disc = std::sqrt(p * p * bw * bw - 4.0 * w0sq);
    for (const cplx s : {(p * bw + disc) / 2.0, (p * bw - disc) / 2.0}) zpoles.push_back(detail::bilinear(s, spec.fs));
  }
  SosCoefficients sos;
  for (auto [a1, a2] : detail::pole_pairs(zpoles)) sos.push_back({1.0, 0.0, -1.0, a1, a2});
  // Digital image of the analog centre frequency sqrt(w1 * w2).
  const double fc = spec.fs / std::numbers::pi * std::atan(std::sqrt(w0sq) / (2.0 * spec.fs));
  detail::normalize_gain(sos, fc, spec.fs);
  return sos;
}

/// Butterworth band-stop; unity gain at DC, transmission zeros at the
/// geometric centre of the stop band.
inline SosCoefficients design_notch(const FilterSpec& spec) {
  validate(spec);
  if (spec.kind != FilterKind::notch) throw Error(ErrorCode::design, "design_notch needs a notch spec");
  using detail::cplx;
  const double w1 = detail::prewarp(spec.low_hz, spec.fs);
  const double w2 = detail::prewarp(spec.high_hz, spec.fs);
  const double bw = w2 - w1;
  const double w0sq = w1 * w2;
  const double theta0 = 2.0 * std::atan(std::sqrt(w0sq) / (2.0 * spec.fs));

  std::vector<cplx> zpoles;
  for (const cplx& p : detail::butterworth_prototype(spec.order / 2)) {
    const cplx q = bw / p;
    const cplx disc = std::sqrt(q * q - 4.0 * w0sq);
    for (const cplx s : {(q + disc) / 2.0, (q - disc) / 2.0}) zpoles.push_back(detail::bilinear(s, spec.fs));
  }
  SosCoefficients sos;
  for (auto [a1, a2] : detail::pole_pairs(zpoles)) sos.push_back({1.0, -2.0 * std::cos(theta0), 1.0, a1, a2});
  detail::normalize_gain(sos, 0.0, spec.fs);
  return sos;
}

inline SosCoefficients design(const FilterSpec& spec) {
  return spec.kind == FilterKind::bandpass ? design_bandpass(spec) : design_notch(spec);
}

// ---------------------------------------------------------------------------
// Streaming filter

/// How a fresh cascade treats the time before its first sample: silence, or
/// the first sample held forever (no step transient from a DC offset).
enum class FilterStart { zero, steady };

/// Per-channel biquad cascade in transposed direct form II. Chunked and
/// whole-stream processing give bit-identical output.
class FilterState {
 public:
  FilterState() = default;
  FilterState(SosCoefficients sos, std::size_t channels, double fs, FilterStart start = FilterStart::zero)
      : sos_(std::move(sos)),
        channels_(channels),
        fs_(fs),
        start_(start),
        z_(channels * sos_.size() * 2, 0.0),
        fresh_(channels, start == FilterStart::steady) {}
  FilterState(const FilterSpec& spec, std::size_t channels, FilterStart start = FilterStart::zero)
      : FilterState(design(spec), channels, spec.fs, start) {}

  std::size_t channels() const noexcept { return channels_; }
  double sample_rate() const noexcept { return fs_; }
  const SosCoefficients& coefficients() const noexcept { return sos_; }

  void reset() {
    std::fill(z_.begin(), z_.end(), 0.0);
    std::fill(fresh_.begin(), fresh_.end(), start_ == FilterStart::steady);
  }

  /// Sets channel `c` to the state reached after `x0` has been applied
  /// forever.
  void prime(std::size_t c, double x0) {
    double* z = z_.data() + c * sos_.size() * 2;
    double v = x0;
    for (std::size_t k = 0; k < sos_.size(); ++k) {
      const Biquad& s = sos_[k];
      const double y = v * (s.b0 + s.b1 + s.b2) / (1.0 + s.a1 + s.a2);
      z[2 * k] = y - s.b0 * v;
      z[2 * k + 1] = s.b2 * v - s.a2 * y;
      v = y;
    }
    fresh_[c] = false;
  }

  /// Filters one channel in place.
  void process_channel(std::size_t c, std::span<double> x) {
    if (x.empty()) return;
    if (fresh_[c]) prime(c, x.front());
    double* z = z_.data() + c * sos_.size() * 2;
    for (double& sample : x) {
      double v = sample;
      for (std::size_t k = 0; k < sos_.size(); ++k) {
        const Biquad& s = sos_[k];
        double& z0 = z[2 * k];
        double& z1 = z[2 * k + 1];
        const double y = s.b0 * v + z0;
        z0 = s.b1 * v - s.a1 * y + z1;
        z1 = s.b2 * v - s.a2 * y;
        v = y;
      }
      sample = v;
    }
  }

  void process_in_place(SignalChunk& chunk) {
    check(chunk);
    for (std::size_t c = 0; c < channels_; ++c) process_channel(c, chunk.channel(c));
  }

 private:
  void check(const SignalChunk& chunk) const {
    if (chunk.channels() != channels_) throw Error(ErrorCode::shape, "channel count does not match filter state");
    if (chunk.sample_rate() != fs_) throw Error(ErrorCode::config, "chunk sample rate does not match filter design");
  }

  SosCoefficients sos_;
  std::size_t channels_ = 0;
  double fs_ = 0;
  FilterStart start_ = FilterStart::zero;
  std::vector<double> z_;
  std::vector<bool> fresh_;
};

inline SignalChunk filter_process(FilterState& state, const SignalChunk& chunk) {
  SignalChunk out = chunk;
  state.process_in_place(out);
  return out;
}

// ---------------------------------------------------------------------------
// Band power

inline constexpr double kBandPowerSettleS = 0.5;

/// Mean square of the band-filtered window (order-4 Butterworth), skipping
/// the first half second while the filter settles. One value per channel.
inline std::vector<double> band_power(const SignalChunk& window, std::pair<double, double> band) {
  const double fs = window.sample_rate();
  if (window.samples() < static_cast<std::size_t>(std::llround(fs))) {
    throw Error(ErrorCode::size, "band power needs at least one second of samples");
  }
  FilterState state(bandpass_spec(band.first, band.second, fs), window.channels());
  SignalChunk filtered = filter_process(state, window);
  const auto settle = static_cast<std::size_t>(std::llround(kBandPowerSettleS * fs));
  std::vector<double> out(window.channels(), 0.0);
  for (std::size_t c = 0; c < window.channels(); ++c) {
    auto x = filtered.channel(c);
    double acc = 0.0;
    for (std::size_t i = settle; i < x.size(); ++i) acc += x[i] * x[i];
    out[c] = acc / static_cast<double>(x.size() - settle);
  }
  return out;
}

/// Continuous variant: filters the stream without restarting and emits the
/// mean square of each complete, contiguous window.
class BandPowerTracker {
 public:
  struct Window {
    std::uint64_t start = 0;
    std::uint64_t end = 0;  // exclusive
    std::vector<double> power;
  };

  BandPowerTracker(std::pair<double, double> band, std::size_t channels, double fs, double window_s = 1.0)
      : filter_(bandpass_spec(band.first, band.second, fs), channels, FilterStart::steady),
        window_samples_(static_cast<std::size_t>(std::llround(window_s * fs))),
        acc_(channels, 0.0) {
    if (window_samples_ == 0) throw Error(ErrorCode::size, "window must hold at least one sample");
  }

  /// Feeds a chunk; completed windows are appended to `out`.
  void push(const SignalChunk& chunk, std::vector<Window>& out) {
    SignalChunk filtered = filter_process(filter_, chunk);
    if (!started_) {
      window_start_ = chunk.start();
      started_ = true;
    }
    for (std::size_t i = 0; i < filtered.samples(); ++i) {
      for (std::size_t c = 0; c < acc_.size(); ++c) {
        const double v = filtered.at(c, i);
        acc_[c] += v * v;
      }
      if (++count_ == window_samples_) {
        Window w{window_start_, window_start_ + count_, acc_};
        for (auto& p : w.power) p /= static_cast<double>(count_);
        out.push_back(std::move(w));
        window_start_ += count_;
        count_ = 0;
        std::fill(acc_.begin(), acc_.end(), 0.0);
      }
    }
  }

  std::size_t window_samples() const noexcept { return window_samples_; }

 private:
  FilterState filter_;
  std::size_t window_samples_;
  std::vector<double> acc_;
  std::size_t count_ = 0;
  std::uint64_t window_start_ = 0;
  bool started_ = false;
};

// ---------------------------------------------------------------------------
// Continuous wavelet transform

/// Frequency x time magnitude matrix. `valid` is false inside the cone of
/// influence (within one e-folding time of either window edge).
struct Scalogram {
  std::vector<double> freqs_hz;
  std::uint64_t start = 0;
  std::size_t samples = 0;
  double fs = 0;
  std::vector<double> magnitude;
  std::vector<std::uint8_t> valid;

  double at(std::size_t f, std::size_t t) const { return magnitude[f * samples + t]; }
  bool is_valid(std::size_t f, std::size_t t) const { return valid[f * samples + t] != 0; }

  /// Index of the strongest frequency at column `t`, valid cells only.
  std::optional<std::size_t> argmax_freq(std::size_t t) const {
    std::optional<std::size_t> best;
    for (std::size_t f = 0; f < freqs_hz.size(); ++f) {
      if (!is_valid(f, t)) continue;
      if (!best || at(f, t) > at(*best, t)) best = f;
    }
    return best;
  }

  /// Mean magnitude per frequency over valid cells in [t0, t1).
  std::vector<double> mean_spectrum(std::size_t t0, std::size_t t1) const {
    std::vector<double> out(freqs_hz.size(), 0.0);
    for (std::size_t f = 0; f < freqs_hz.size(); ++f) {
      double acc = 0.0;
      std::size_t n = 0;
      for (std::size_t t = t0; t < std::min(t1, samples); ++t) {
        if (!is_valid(f, t)) continue;
        acc += at(f, t);
        ++n;
      }
      out[f] = n ? acc / static_cast<double>(n) : 0.0;
    }
    return out;
  }
};

inline constexpr double kMorletOmega0 = 6.0;

inline std::vector<double> frequency_grid(double low_hz, double high_hz, double step_hz) {
  if (!(step_hz > 0) || high_hz < low_hz) throw Error(ErrorCode::range, "bad frequency grid");
  std::vector<double> out;
  const auto n = static_cast<std::size_t>(std::floor((high_hz - low_hz) / step_hz + 1e-9)) + 1;
  for (std::size_t i = 0; i < n; ++i) out.push_back(low_hz + static_cast<double>(i) * step_hz);
  return out;
}

/// Complex Morlet transform, psi_f(t) = exp(i 2 pi f t) exp(-t^2 / 2 s^2)
/// with s = omega0 / (2 pi f). Magnitudes are scaled by 2 / sum(envelope)
/// so a sinusoid of amplitude A at an analysis frequency reads A.
inline Scalogram cwt_morlet(std::span<const double> x, double fs, std::span<const double> freqs_hz,
                            std::uint64_t start = 0, double omega0 = kMorletOmega0) {
  if (freqs_hz.empty()) throw Error(ErrorCode::range, "empty frequency grid");
  for (double f : freqs_hz) {
    if (!(f > 0 && f < fs / 2)) throw Error(ErrorCode::range, "analysis frequency outside (0, fs/2)");
  }
  const double fmin = *std::min_element(freqs_hz.begin(), freqs_hz.end());
  if (static_cast<double>(x.size()) < 2.0 * fs / fmin) {
    throw Error(ErrorCode::size, "window shorter than two cycles of the lowest frequency");
  }
  const std::size_t n = x.size();
  Scalogram out;
  out.freqs_hz.assign(freqs_hz.begin(), freqs_hz.end());
  out.start = start;
  out.samples = n;
  out.fs = fs;
  out.magnitude.assign(freqs_hz.size() * n, 0.0);
  out.valid.assign(freqs_hz.size() * n, 0);

  std::vector<std::complex<double>> kernel;
  for (std::size_t fi = 0; fi < freqs_hz.size(); ++fi) {
    const double f = freqs_hz[fi];
    const double sigma = omega0 / (2.0 * std::numbers::pi * f) * fs;  // in samples
    const auto half = static_cast<std::ptrdiff_t>(std::ceil(5.0 * sigma));
    kernel.resize(static_cast<std::size_t>(2 * half + 1));
    double envelope_sum = 0.0;
    for (std::ptrdiff_t k = -half; k <= half; ++k) {
      const double g = std::exp(-0.5 * (static_cast<double>(k) / sigma) * (static_cast<double>(k) / sigma));
      envelope_sum += g;
      // conj(psi(k)) for correlation
      kernel[static_cast<std::size_t>(k + half)] = g * std::polar(1.0, -2.0 * std::numbers::pi * f * k / fs);
    }
    const double scale = 2.0 / envelope_sum;
    const auto coi = static_cast<std::size_t>(std::ceil(std::numbers::sqrt2 * sigma));

    for (std::size_t t = 0; t < n; ++t) {
      std::complex<double> acc{0.0, 0.0};
      const auto ti = static_cast<std::ptrdiff_t>(t);
      const std::ptrdiff_t k0 = std::max<std::ptrdiff_t>(-half, -ti);
      const std::ptrdiff_t k1 = std::min<std::ptrdiff_t>(half, static_cast<std::ptrdiff_t>(n) - 1 - ti);
      for (std::ptrdiff_t k = k0; k <= k1; ++k) {
        acc += x[static_cast<std::size_t>(ti + k)] * kernel[static_cast<std::size_t>(k + half)];
      }
      out.magnitude[fi * n + t] = std::abs(acc) * scale;
      out.valid[fi * n + t] = (t >= coi && t + coi < n) ? 1 : 0;
    }
  }
  return out;
}

/// Scalogram of one channel of `window`.
inline Scalogram cwt_morlet(const SignalChunk& window, std::span<const double> freqs_hz, std::size_t channel = 0) {
  if (channel >= window.channels()) throw Error(ErrorCode::shape, "channel out of range");
  return cwt_morlet(window.channel(channel), window.sample_rate(), freqs_hz, window.start());
}

// ---------------------------------------------------------------------------
// Epochs

struct Epoch {
  SignalChunk data;
  /// First marker falling inside the window, if any.
  std::optional<Marker> label;
  std::vector<Marker> markers;

  std::uint64_t start() const noexcept { return data.start(); }
};

/// Sliding windows over `stream`; every marker inside a window is attached
/// to it. Windows that would run past the end are not emitted.
inline std::vector<Epoch> epoch_extract(const SignalChunk& stream, std::span<const Marker> markers, double window_s,
                                        double hop_s) {
  if (!(hop_s > 0) || window_s < hop_s) throw Error(ErrorCode::range, "need window_s >= hop_s > 0");
  const double fs = stream.sample_rate();
  const auto win = static_cast<std::size_t>(std::llround(window_s * fs));
  const auto hop = static_cast<std::size_t>(std::llround(hop_s * fs));
  std::vector<Epoch> out;
  if (win == 0 || hop == 0 || stream.samples() < win) return out;
  for (std::size_t off = 0; off + win <= stream.samples(); off += hop) {
    Epoch e{stream.slice(off, win), std::nullopt, {}};
    const std::uint64_t lo = stream.start() + off;
    const std::uint64_t hi = lo + win;
    for (const auto& m : markers) {
      if (m.sample >= lo && m.sample < hi) e.markers.push_back(m);
    }
    if (!e.markers.empty()) e.label = e.markers.front();
    out.push_back(std::move(e));
  }
  return out;
}

}  // namespace jneeg
