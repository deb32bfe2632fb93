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

// Contact impedance from AC lead-off injection.

#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <string_view>

#include "jneeg/error.hpp"
#include "jneeg/protocol.hpp"
#include "jneeg/types.hpp"

namespace jneeg {

enum class ContactQuality { good, acceptable, poor, open };

inline std::string_view to_string(ContactQuality q) {
  switch (q) {
    case ContactQuality::good: return "good";
    case ContactQuality::acceptable: return "acceptable";
    case ContactQuality::poor: return "poor";
    case ContactQuality::open: return "open";
  }
  return "?";
}

/// Upper bounds (inclusive) of the good / acceptable / poor tiers.
struct QualityTiers {
  double good_ohms = 10e3;
  double acceptable_ohms = 50e3;
  double poor_ohms = 200e3;
};

inline ContactQuality classify_quality(double ohms, const QualityTiers& t = {}) {
  if (ohms <= t.good_ohms) return ContactQuality::good;
  if (ohms <= t.acceptable_ohms) return ContactQuality::acceptable;
  if (ohms <= t.poor_ohms) return ContactQuality::poor;
  return ContactQuality::open;
}

struct LeadoffDrive {
  double current_amps = 24e-9;  // peak-to-peak
  double frequency_hz = 31.2;
  bool active = true;
};

inline LeadoffDrive drive_for(const DeviceConfig& cfg, std::size_t channel) {
  LeadoffDrive d;
  d.current_amps = cfg.leadoff.current_amps;
  d.frequency_hz = leadoff_frequency_hz(cfg.leadoff.frequency);
  d.active = channel < kChannels && ((cfg.leadoff.channels >> channel) & 1u) && d.frequency_hz > 0;
  return d;
}

struct ImpedanceReading {
  std::size_t channel = 0;
  double ohms = 0.0;
  double frequency_hz = 0.0;
  ContactQuality quality = ContactQuality::good;
};

namespace detail {

/// Amplitude of the `f_hz` component of x, from a least-squares fit of
/// offset + linear drift + sin + cos. For a record of T seconds this is a
/// matched filter of roughly 1/T Hz bandwidth with no settling time.
inline double tone_amplitude(std::span<const double> x, double f_hz, double fs) {
  const std::size_t n = x.size();
  constexpr int K = 4;
  double m[K][K] = {};
  double r[K] = {};
  const double w = 2.0 * std::numbers::pi * f_hz / fs;
  const double mid = 0.5 * static_cast<double>(n - 1);
  for (std::size_t i = 0; i < n; ++i) {
    const double ti = static_cast<double>(i);
    const double b[K] = {1.0, (ti - mid) / static_cast<double>(n), std::sin(w * ti), std::cos(w * ti)};
    for (int a = 0; a < K; ++a) {
      r[a] += b[a] * x[i];
      for (int c = 0; c < K; ++c) m[a][c] += b[a] * b[c];
    }
  }
  // Gauss-Jordan with partial pivoting on the 4x4 normal equations.
  for (int p = 0; p < K; ++p) {
    int piv = p;
    for (int q = p + 1; q < K; ++q) {
      if (std::abs(m[q][p]) > std::abs(m[piv][p])) piv = q;
    }
    for (int c = 0; c < K; ++c) std::swap(m[p][c], m[piv][c]);
    std::swap(r[p], r[piv]);
    for (int q = 0; q < K; ++q) {
      if (q == p) continue;
      const double k = m[q][p] / m[p][p];
      for (int c = p; c < K; ++c) m[q][c] -= k * m[p][c];
      r[q] -= k * r[p];
    }
  }
  return std::hypot(r[2] / m[2][2], r[3] / m[3][3]);
}

}  // namespace detail

/// Z = V_pp / I_pp with V_pp = 2 sqrt(2) * RMS of the extracted tone, that
/// is twice its fitted amplitude.
inline ImpedanceReading measure_impedance(const SignalChunk& window, std::size_t channel, const LeadoffDrive& drive,
                                          const QualityTiers& tiers = {}) {
  const double fs = window.sample_rate();
  if (channel >= window.channels()) throw Error(ErrorCode::range, "channel out of range");
  if (!(drive.frequency_hz > 0) || drive.frequency_hz >= fs / 2) {
    throw Error(ErrorCode::config, "drive frequency must lie in (0, fs/2)");
  }
  if (!drive.active || !(drive.current_amps > 0)) {
    throw Error(ErrorCode::state, "lead-off injection is not active on this channel");
  }
  if (window.samples() < static_cast<std::size_t>(std::llround(fs))) {
    throw Error(ErrorCode::size, "impedance needs at least one second of samples");
  }
  const double amp_uv = detail::tone_amplitude(window.channel(channel), drive.frequency_hz, fs);
  const double vpp = 2.0 * amp_uv * 1e-6;
  ImpedanceReading r;
  r.channel = channel;
  r.ohms = vpp / drive.current_amps;
  r.frequency_hz = drive.frequency_hz;
  r.quality = classify_quality(r.ohms, tiers);
  return r;
}

}  // namespace jneeg
