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

// Online detectors: threshold/refractory artifact events, blink vs chew
// clustering, burst grouping and alpha eyes-open/eyes-closed labelling.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <set>
#include <span>
#include <string_view>
#include <vector>

#include "jneeg/error.hpp"
#include "jneeg/types.hpp"

namespace jneeg {

// ---------------------------------------------------------------------------
// Threshold crossings

inline constexpr double kDefaultThresholdUv = 75.0;
inline constexpr double kDefaultRefractoryS = 0.5;

enum class ArtifactClass { blink, chew, generic };

inline std::string_view to_string(ArtifactClass k) {
  switch (k) {
    case ArtifactClass::blink: return "blink";
    case ArtifactClass::chew: return "chew";
    case ArtifactClass::generic: return "generic";
  }
  return "?";
}

struct ArtifactEvent {
  ArtifactClass kind = ArtifactClass::generic;
  std::vector<std::size_t> channels;  // sorted, unique
  std::uint64_t onset = 0;
  double peak_uv = 0.0;

  friend bool operator==(const ArtifactEvent&, const ArtifactEvent&) = default;
};

/// Single-channel streaming detector. An event starts when |x| rises
/// through the threshold; the peak is tracked over the refractory span and
/// the event is reported once that span has elapsed.
class ArtifactDetector {
 public:
  ArtifactDetector(std::size_t channel, double fs, double threshold_uv = kDefaultThresholdUv,
                   double refractory_s = kDefaultRefractoryS)
      : channel_(channel),
        threshold_(threshold_uv),
        refractory_(static_cast<std::uint64_t>(std::llround(refractory_s * fs))) {
    if (!(threshold_uv > 0)) throw Error(ErrorCode::config, "threshold must be positive");
    if (refractory_s < 0) throw Error(ErrorCode::config, "refractory must be >= 0");
  }

  /// Consumes samples starting at absolute index `start`.
  void push(std::span<const double> x, std::uint64_t start, std::vector<ArtifactEvent>& out) {
    for (std::size_t i = 0; i < x.size(); ++i) {
      const std::uint64_t idx = start + i;
      const double a = std::abs(x[i]);
      if (open_ && idx >= open_->onset + std::max<std::uint64_t>(refractory_, 1)) {
        out.push_back(*open_);
        open_.reset();
      }
      if (open_) {
        open_->peak_uv = std::max(open_->peak_uv, a);
      } else if (a >= threshold_ && prev_ < threshold_) {
        open_ = ArtifactEvent{ArtifactClass::generic, {channel_}, idx, a};
      }
      prev_ = a;
    }
  }

  /// Reports an event whose refractory span is still open.
  void flush(std::vector<ArtifactEvent>& out) {
    if (open_) out.push_back(*open_);
    open_.reset();
  }

  std::size_t channel() const noexcept { return channel_; }

 private:
  std::size_t channel_;
  double threshold_;
  std::uint64_t refractory_;
  double prev_ = 0.0;
  std::optional<ArtifactEvent> open_;
};

/// Batch form over one (already band-filtered) channel of `stream`.
inline std::vector<ArtifactEvent> detect_artifacts(const SignalChunk& stream, std::size_t channel,
                                                   double threshold_uv = kDefaultThresholdUv,
                                                   double refractory_s = kDefaultRefractoryS) {
  if (channel >= stream.channels()) throw Error(ErrorCode::range, "channel out of range");
  ArtifactDetector det(channel, stream.sample_rate(), threshold_uv, refractory_s);
  std::vector<ArtifactEvent> out;
  det.push(stream.channel(channel), stream.start(), out);
  det.flush(out);
  return out;
}

// ---------------------------------------------------------------------------
// Blink / chew classification

struct ClassifierConfig {
  /// Crossings closer than this (onset to onset) join one cluster.
  double link_s = 0.75;
  /// Chew: at least `chew_min_crossings` within `chew_span_s` on at least
  /// `chew_min_channels` distinct channels.
  double chew_span_s = 1.5;
  std::size_t chew_min_crossings = 3;
  std::size_t chew_min_channels = 4;
};

inline bool is_frontal(std::size_t c) { return c == site::F7 || c == site::Fz || c == site::F8; }

/// Groups per-channel crossings into clusters and labels each one.
class ArtifactClassifier {
 public:
  ArtifactClassifier(double fs, ClassifierConfig cfg = {}) : fs_(fs), cfg_(cfg) {}

  void push(std::span<const ArtifactEvent> crossings, std::vector<ArtifactEvent>& out) {
    for (const auto& e : crossings) {
      if (!pending_.empty() && gap(pending_.back().onset, e.onset) > cfg_.link_s) close(out);
      pending_.push_back(e);
    }
  }

  /// Closes the open cluster if no crossing can join it any more. Pass the
  /// index of the newest sample that every detector has finished with.
  void advance(std::uint64_t settled, std::vector<ArtifactEvent>& out) {
    if (!pending_.empty() && settled > pending_.back().onset && gap(pending_.back().onset, settled) > cfg_.link_s) {
      close(out);
    }
  }

  void flush(std::vector<ArtifactEvent>& out) { close(out); }

 private:
  double gap(std::uint64_t a, std::uint64_t b) const {
    return (static_cast<double>(b) - static_cast<double>(a)) / fs_;
  }

  void close(std::vector<ArtifactEvent>& out) {
    if (pending_.empty()) return;
    std::sort(pending_.begin(), pending_.end(), [](const auto& a, const auto& b) { return a.onset < b.onset; });
    ArtifactEvent ev;
    ev.onset = pending_.front().onset;
    std::set<std::size_t> chans;
    for (const auto& e : pending_) {
      chans.insert(e.channels.begin(), e.channels.end());
      ev.peak_uv = std::max(ev.peak_uv, e.peak_uv);
    }
    ev.channels.assign(chans.begin(), chans.end());

    bool chew = false;
    for (std::size_t i = 0; i < pending_.size() && !chew; ++i) {
      std::set<std::size_t> win;
      std::size_t n = 0;
      for (std::size_t j = i; j < pending_.size() && gap(pending_[i].onset, pending_[j].onset) <= cfg_.chew_span_s;
           ++j) {
        ++n;
        win.insert(pending_[j].channels.begin(), pending_[j].channels.end());
      }
      chew = n >= cfg_.chew_min_crossings && win.size() >= cfg_.chew_min_channels;
    }
    if (chew) {
      ev.kind = ArtifactClass::chew;
    } else if (std::any_of(chans.begin(), chans.end(), is_frontal)) {
      ev.kind = ArtifactClass::blink;
    } else {
      ev.kind = ArtifactClass::generic;
    }
    out.push_back(std::move(ev));
    pending_.clear();
  }

  double fs_;
  ClassifierConfig cfg_;
  std::vector<ArtifactEvent> pending_;
};

/// Runs a detector on every channel of `stream` and classifies the result.
inline std::vector<ArtifactEvent> classify_artifacts(const SignalChunk& stream,
                                                     double threshold_uv = kDefaultThresholdUv,
                                                     double refractory_s = kDefaultRefractoryS,
                                                     ClassifierConfig cfg = {}) {
  std::vector<ArtifactEvent> crossings;
  for (std::size_t c = 0; c < stream.channels(); ++c) {
    auto ev = detect_artifacts(stream, c, threshold_uv, refractory_s);
    crossings.insert(crossings.end(), ev.begin(), ev.end());
  }
  std::stable_sort(crossings.begin(), crossings.end(), [](const auto& a, const auto& b) { return a.onset < b.onset; });
  ArtifactClassifier cls(stream.sample_rate(), cfg);
  std::vector<ArtifactEvent> out;
  cls.push(crossings, out);
  cls.flush(out);
  return out;
}

/// Events closer than this belong to one burst (1 s spacing inside a
/// burst, >= 3 s between bursts in the scripted scenarios).
inline constexpr double kBurstGapS = 2.0;

/// Sizes of runs of events whose inter-onset gap is <= gap_s.
inline std::vector<std::size_t> group_bursts(std::span<const ArtifactEvent> events, double gap_s = kBurstGapS,
                                             double fs = 250.0) {
  std::vector<std::size_t> counts;
  for (std::size_t i = 0; i < events.size(); ++i) {
    if (i == 0 || static_cast<double>(events[i].onset - events[i - 1].onset) / fs > gap_s) {
      counts.push_back(1);
    } else {
      ++counts.back();
    }
  }
  return counts;
}

inline std::vector<ArtifactEvent> filter_kind(std::span<const ArtifactEvent> events, ArtifactClass kind) {
  std::vector<ArtifactEvent> out;
  for (const auto& e : events) {
    if (e.kind == kind) out.push_back(e);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Alpha state

enum class EyeState { open, closed };

inline std::string_view to_string(EyeState s) { return s == EyeState::open ? "eyes-open" : "eyes-closed"; }

struct PowerWindow {
  std::uint64_t start = 0;
  std::uint64_t end = 0;  // exclusive
  double power_uv2 = 0.0;
};

struct AlphaStateWindow {
  std::uint64_t start = 0;
  std::uint64_t end = 0;
  double power_uv2 = 0.0;
  EyeState state = EyeState::open;
};

inline constexpr double kDefaultAlphaRatio = 2.0;

/// Mean power of the windows lying entirely inside [from, to).
inline double alpha_baseline(std::span<const PowerWindow> windows, std::uint64_t from, std::uint64_t to) {
  double acc = 0.0;
  std::size_t n = 0;
  for (const auto& w : windows) {
    if (w.start >= from && w.end <= to) {
      acc += w.power_uv2;
      ++n;
    }
  }
  if (n == 0) throw Error(ErrorCode::calibration, "no complete window inside the calibration span");
  return acc / static_cast<double>(n);
}

inline EyeState classify_window(double power_uv2, double baseline_uv2, double ratio) {
  return power_uv2 > ratio * baseline_uv2 ? EyeState::closed : EyeState::open;
}

inline std::vector<AlphaStateWindow> classify_alpha(std::span<const PowerWindow> windows, double baseline_uv2,
                                                    double ratio = kDefaultAlphaRatio) {
  if (!(baseline_uv2 > 0)) throw Error(ErrorCode::calibration, "alpha baseline must be positive");
  if (!(ratio > 1)) throw Error(ErrorCode::config, "ratio threshold must exceed 1");
  std::vector<AlphaStateWindow> out;
  out.reserve(windows.size());
  for (const auto& w : windows) {
    out.push_back({w.start, w.end, w.power_uv2, classify_window(w.power_uv2, baseline_uv2, ratio)});
  }
  return out;
}

}  // namespace jneeg
