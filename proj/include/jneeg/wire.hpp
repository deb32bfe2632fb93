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

// Data-plane binary messages. Little-endian, 19-byte header:
//
//   off  size  field
//     0     2  magic 'N' 'R'
//     2     1  version (1)
//     3     1  kind: 1 samples, 2 event, 3 impedance, 4 status
//     4     4  u32 sequence (one counter per server; a gap means drops)
//     8     8  u64 first sample index
//    16     2  u16 n_samples
//    18     1  u8 n_channels
//    19        kind 1: n_samples x n_channels f32 uV, sample-major
//              kinds 2-4: u32 length + UTF-8 JSON

#pragma once

#include <bit>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "jneeg/error.hpp"
#include "jneeg/types.hpp"

namespace jneeg::wire {

inline constexpr std::uint8_t kMagic0 = 'N';
inline constexpr std::uint8_t kMagic1 = 'R';
inline constexpr std::uint8_t kVersion = 1;
inline constexpr std::size_t kHeaderBytes = 19;

enum class Kind : std::uint8_t { samples = 1, event = 2, impedance = 3, status = 4 };

struct Message {
  Kind kind = Kind::samples;
  std::uint32_t sequence = 0;
  std::uint64_t first_sample = 0;
  std::uint16_t n_samples = 0;
  std::uint8_t n_channels = 0;
  std::vector<float> samples;  // kind 1, sample-major
  std::string json;            // kinds 2-4

  friend bool operator==(const Message&, const Message&) = default;
};

namespace detail {

template <typename T>
void put(std::vector<std::uint8_t>& out, T v) {
  auto u = static_cast<std::make_unsigned_t<T>>(v);
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<std::uint8_t>(u >> (8 * i)));
}

template <typename T>
T get(std::span<const std::uint8_t> b, std::size_t off) {
  std::make_unsigned_t<T> u = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) u |= static_cast<std::make_unsigned_t<T>>(b[off + i]) << (8 * i);
  return static_cast<T>(u);
}

}  // namespace detail

inline std::vector<std::uint8_t> encode(const Message& m) {
  std::vector<std::uint8_t> out;
  out.reserve(kHeaderBytes + 4 + m.samples.size() * 4 + m.json.size());
  out.push_back(kMagic0);
  out.push_back(kMagic1);
  out.push_back(kVersion);
  out.push_back(static_cast<std::uint8_t>(m.kind));
  detail::put(out, m.sequence);
  detail::put(out, m.first_sample);
  detail::put(out, m.n_samples);
  out.push_back(m.n_channels);
  if (m.kind == Kind::samples) {
    if (m.samples.size() != static_cast<std::size_t>(m.n_samples) * m.n_channels) {
      throw Error(ErrorCode::shape, "sample payload does not match n_samples x n_channels");
    }
    for (float v : m.samples) detail::put(out, std::bit_cast<std::uint32_t>(v));
  } else {
    detail::put(out, static_cast<std::uint32_t>(m.json.size()));
    out.insert(out.end(), m.json.begin(), m.json.end());
  }
  return out;
}

inline Message decode(std::span<const std::uint8_t> b) {
  if (b.size() < kHeaderBytes) throw Error(ErrorCode::framing, "message shorter than header");
  if (b[0] != kMagic0 || b[1] != kMagic1) throw Error(ErrorCode::parse, "bad magic");
  if (b[2] != kVersion) throw Error(ErrorCode::parse, "unsupported wire version");
  Message m;
  const std::uint8_t kind = b[3];
  if (kind < 1 || kind > 4) throw Error(ErrorCode::parse, "unknown message kind");
  m.kind = static_cast<Kind>(kind);
  m.sequence = detail::get<std::uint32_t>(b, 4);
  m.first_sample = detail::get<std::uint64_t>(b, 8);
  m.n_samples = detail::get<std::uint16_t>(b, 16);
  m.n_channels = b[18];
  if (m.kind == Kind::samples) {
    const std::size_t n = static_cast<std::size_t>(m.n_samples) * m.n_channels;
    if (b.size() != kHeaderBytes + n * 4) throw Error(ErrorCode::framing, "sample payload length mismatch");
    m.samples.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      m.samples[i] = std::bit_cast<float>(detail::get<std::uint32_t>(b, kHeaderBytes + 4 * i));
    }
  } else {
    if (b.size() < kHeaderBytes + 4) throw Error(ErrorCode::framing, "missing JSON length");
    const auto len = detail::get<std::uint32_t>(b, kHeaderBytes);
    if (b.size() != kHeaderBytes + 4 + len) throw Error(ErrorCode::framing, "JSON payload length mismatch");
    m.json.assign(b.begin() + kHeaderBytes + 4, b.end());
  }
  return m;
}

/// Samples message for a calibrated chunk (channel-major in, sample-major out).
inline Message samples_message(const SignalChunk& chunk, std::uint32_t sequence) {
  if (chunk.samples() > 0xFFFF || chunk.channels() > 0xFF) throw Error(ErrorCode::size, "chunk too large for one message");
  Message m;
  m.kind = Kind::samples;
  m.sequence = sequence;
  m.first_sample = chunk.start();
  m.n_samples = static_cast<std::uint16_t>(chunk.samples());
  m.n_channels = static_cast<std::uint8_t>(chunk.channels());
  m.samples.reserve(chunk.samples() * chunk.channels());
  for (std::size_t i = 0; i < chunk.samples(); ++i) {
    for (std::size_t c = 0; c < chunk.channels(); ++c) m.samples.push_back(static_cast<float>(chunk.at(c, i)));
  }
  return m;
}

inline Message json_message(Kind kind, std::string json, std::uint64_t sample, std::uint32_t sequence) {
  Message m;
  m.kind = kind;
  m.sequence = sequence;
  m.first_sample = sample;
  m.json = std::move(json);
  return m;
}

}  // namespace jneeg::wire
