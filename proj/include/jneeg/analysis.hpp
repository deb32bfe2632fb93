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

// Offline analyses over a whole recording: band-power series, alpha state
// labelling and artifact detection as used by `jneeg analyze`.

#pragma once

#include <cstdint>
#include <vector>

#include "jneeg/detect.hpp"
#include "jneeg/dsp.hpp"
#include "jneeg/types.hpp"

namespace jneeg {

/// Contiguous windows of band power on one channel, filtered continuously
/// over the whole record.
inline std::vector<PowerWindow> band_power_series(const SignalChunk& data, std::pair<double, double> band,
                                                  std::size_t channel, double window_s = 1.0) {
  if (channel >= data.channels()) throw Error(ErrorCode::range, "channel out of range");
  BandPowerTracker tracker(band, data.channels(), data.sample_rate(), window_s);
  std::vector<BandPowerTracker::Window> w;
  tracker.push(data, w);
  std::vector<PowerWindow> out;
  out.reserve(w.size());
  for (const auto& x : w) out.push_back({x.start, x.end, x.power[channel]});
  return out;
}

struct AlphaAnalysis {
  double baseline_uv2 = 0.0;
  std::vector<AlphaStateWindow> windows;
  double closed_mean_uv2 = 0.0;
  double open_mean_uv2 = 0.0;
  std::size_t closed_windows = 0;
  std::size_t open_windows = 0;

  /// closed / open mean power; 0 when either side is empty.
  double ratio() const { return closed_windows && open_windows && open_mean_uv2 > 0 ? closed_mean_uv2 / open_mean_uv2 : 0.0; }
};

/// Labels 1 s windows of 8-12 Hz power on `channel` against a baseline taken
/// from [window, baseline_s) of the record (the first window is settling).
inline AlphaAnalysis analyze_alpha(const SignalChunk& data, std::size_t channel, double baseline_s = 8.0,
                                   double ratio = kDefaultAlphaRatio, double window_s = 1.0,
                                   std::pair<double, double> band = {8.0, 12.0}) {
  const auto series = band_power_series(data, band, channel, window_s);
  const double fs = data.sample_rate();
  const auto win = static_cast<std::uint64_t>(std::llround(window_s * fs));
  AlphaAnalysis a;
  a.baseline_uv2 = alpha_baseline(series, data.start() + win,
                                  data.start() + static_cast<std::uint64_t>(std::llround(baseline_s * fs)));
  a.windows = classify_alpha(series, a.baseline_uv2, ratio);
  for (const auto& w : a.windows) {
    if (w.state == EyeState::closed) {
      a.closed_mean_uv2 += w.power_uv2;
      ++a.closed_windows;
    } else {
      a.open_mean_uv2 += w.power_uv2;
      ++a.open_windows;
    }
  }
  if (a.closed_windows) a.closed_mean_uv2 /= static_cast<double>(a.closed_windows);
  if (a.open_windows) a.open_mean_uv2 /= static_cast<double>(a.open_windows);
  return a;
}

/// 1-40 Hz causal filter over the whole record.
inline SignalChunk display_filter(const SignalChunk& data, std::pair<double, double> band = {1.0, 40.0}) {
  FilterState st(bandpass_spec(band.first, band.second, data.sample_rate()), data.channels(), FilterStart::steady);
  return filter_process(st, data);
}

}  // namespace jneeg
