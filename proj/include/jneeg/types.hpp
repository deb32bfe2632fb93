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

#pragma once

#include <algorithm>
#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "jneeg/error.hpp"

namespace jneeg {

inline constexpr std::size_t kChannels = 8;

using Montage = std::array<std::string, kChannels>;

/// 10-20 sites wired to ADC channels 1..8.
inline Montage default_montage() {
  return {"F7", "Fz", "F8", "C3", "C4", "T5", "Pz", "T6"};
}

/// Channel index for a montage label, or nullopt.
inline std::optional<std::size_t> channel_index(const Montage& montage, std::string_view label) {
  for (std::size_t i = 0; i < montage.size(); ++i) {
    if (montage[i] == label) return i;
  }
  return std::nullopt;
}

namespace site {
inline constexpr std::size_t F7 = 0;
inline constexpr std::size_t Fz = 1;
inline constexpr std::size_t F8 = 2;
inline constexpr std::size_t C3 = 3;
inline constexpr std::size_t C4 = 4;
inline constexpr std::size_t T5 = 5;
inline constexpr std::size_t Pz = 6;
inline constexpr std::size_t T6 = 7;
}  // namespace site

/// Channel-major block of calibrated samples (microvolts).
class SignalChunk {
 public:
  SignalChunk() = default;
  SignalChunk(std::size_t channels, std::size_t samples, double fs, std::uint64_t start = 0)
      : channels_(channels), samples_(samples), fs_(fs), start_(start), data_(channels * samples, 0.0) {}

  std::size_t channels() const noexcept { return channels_; }
  std::size_t samples() const noexcept { return samples_; }
  double sample_rate() const noexcept { return fs_; }
  std::uint64_t start() const noexcept { return start_; }
  void set_start(std::uint64_t start) noexcept { start_ = start; }
  bool empty() const noexcept { return samples_ == 0; }

  std::span<double> channel(std::size_t c) { return {data_.data() + c * samples_, samples_}; }
  std::span<const double> channel(std::size_t c) const { return {data_.data() + c * samples_, samples_}; }

  double& at(std::size_t c, std::size_t i) { return data_[c * samples_ + i]; }
  double at(std::size_t c, std::size_t i) const { return data_[c * samples_ + i]; }

  /// Samples [offset, offset+count) as a new chunk.
  SignalChunk slice(std::size_t offset, std::size_t count) const {
    if (offset + count > samples_) throw Error(ErrorCode::range, "slice past end of chunk");
    SignalChunk out(channels_, count, fs_, start_ + offset);
    for (std::size_t c = 0; c < channels_; ++c) {
      auto src = channel(c).subspan(offset, count);
      std::copy(src.begin(), src.end(), out.channel(c).begin());
    }
    return out;
  }

  /// Appends `other`, which must continue this chunk's timeline.
  void append(const SignalChunk& other) {
    if (samples_ == 0 && channels_ == 0) {
      *this = other;
      return;
    }
    if (other.channels_ != channels_) throw Error(ErrorCode::shape, "channel count mismatch on append");
    std::vector<double> merged(channels_ * (samples_ + other.samples_));
    for (std::size_t c = 0; c < channels_; ++c) {
      auto a = channel(c);
      auto b = other.channel(c);
      auto dst = merged.begin() + static_cast<std::ptrdiff_t>(c * (samples_ + other.samples_));
      dst = std::copy(a.begin(), a.end(), dst);
      std::copy(b.begin(), b.end(), dst);
    }
    data_ = std::move(merged);
    samples_ += other.samples_;
  }

  /// One channel as a single-channel chunk.
  SignalChunk select(std::size_t c) const {
    SignalChunk out(1, samples_, fs_, start_);
    auto src = channel(c);
    std::copy(src.begin(), src.end(), out.channel(0).begin());
    return out;
  }

  static SignalChunk from_channel(std::span<const double> values, double fs, std::uint64_t start = 0) {
    SignalChunk out(1, values.size(), fs, start);
    std::copy(values.begin(), values.end(), out.channel(0).begin());
    return out;
  }

 private:
  std::size_t channels_ = 0;
  std::size_t samples_ = 0;
  double fs_ = 0.0;
  std::uint64_t start_ = 0;
  std::vector<double> data_;
};

enum class MarkerKind { user, blink, chew, state_change, protocol };

inline std::string_view to_string(MarkerKind kind) {
  switch (kind) {
    case MarkerKind::user: return "user";
    case MarkerKind::blink: return "blink";
    case MarkerKind::chew: return "chew";
    case MarkerKind::state_change: return "state-change";
    case MarkerKind::protocol: return "protocol";
  }
  return "user";
}

inline MarkerKind marker_kind_from_string(std::string_view s) {
  if (s == "user") return MarkerKind::user;
  if (s == "blink") return MarkerKind::blink;
  if (s == "chew") return MarkerKind::chew;
  if (s == "state-change") return MarkerKind::state_change;
  if (s == "protocol") return MarkerKind::protocol;
  throw Error(ErrorCode::parse, "unknown marker kind '" + std::string(s) + "'");
}

struct Marker {
  std::uint64_t sample = 0;
  MarkerKind kind = MarkerKind::user;
  std::string text;

  friend bool operator==(const Marker&, const Marker&) = default;
};

}  // namespace jneeg
