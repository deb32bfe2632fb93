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

// Session recording (.neurec + markers.jsonl), CSV export and replay.
//
// .neurec layout, all integers little-endian:
//
//   "NREC" | u16 version | u32 meta_len | meta_len bytes of JSON | u32 crc
//   block*: u64 first_index | u32 n | n x 8 f32 (sample-major) | u32 crc
//
// The header crc covers every byte before it; a block crc covers the block
// from first_index through the last sample.

#pragma once

#include <zlib.h>

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "jneeg/device.hpp"
#include "jneeg/error.hpp"
#include "jneeg/protocol.hpp"
#include "jneeg/types.hpp"

namespace jneeg {

inline constexpr std::array<char, 4> kNeurecMagic{'N', 'R', 'E', 'C'};
inline constexpr std::uint16_t kNeurecVersion = 1;
inline constexpr const char* kRecordingFile = "recording.neurec";
inline constexpr const char* kMarkerFile = "markers.jsonl";

struct SessionMetadata {
  std::string session_id;
  std::string start_time;  // ISO-8601, advisory
  DeviceConfig config{};
  Montage montage = default_montage();
  std::string electrode_type = "dry Ag/AgCl";
  std::string operator_note;
  std::string source;  // "emu:<scenario>", "replay:<file>", ...

  friend bool operator==(const SessionMetadata&, const SessionMetadata&) = default;
};

inline void to_json(nlohmann::json& j, const SessionMetadata& m) {
  j = {{"session_id", m.session_id},   {"start_time", m.start_time},
       {"config", m.config},           {"montage", m.montage},
       {"electrode_type", m.electrode_type}, {"operator", m.operator_note},
       {"source", m.source}};
}

inline void from_json(const nlohmann::json& j, SessionMetadata& m) {
  m.session_id = j.value("session_id", "");
  m.start_time = j.value("start_time", "");
  if (j.contains("config")) m.config = j.at("config").get<DeviceConfig>();
  if (j.contains("montage")) m.montage = j.at("montage").get<Montage>();
  m.electrode_type = j.value("electrode_type", "dry Ag/AgCl");
  m.operator_note = j.value("operator", "");
  m.source = j.value("source", "");
  for (std::size_t a = 0; a < m.montage.size(); ++a) {
    for (std::size_t b = a + 1; b < m.montage.size(); ++b) {
      if (m.montage[a] == m.montage[b]) throw Error(ErrorCode::config, "montage labels must be unique");
    }
  }
}

inline void to_json(nlohmann::json& j, const Marker& m) {
  j = {{"sample", m.sample}, {"kind", to_string(m.kind)}, {"text", m.text}};
}

inline void from_json(const nlohmann::json& j, Marker& m) {
  m.sample = j.at("sample").get<std::uint64_t>();
  m.kind = marker_kind_from_string(j.at("kind").get<std::string>());
  m.text = j.value("text", "");
}

/// `path` may name a session directory or the .neurec file inside one.
inline std::filesystem::path recording_path(const std::filesystem::path& path) {
  if (std::filesystem::is_directory(path)) return path / kRecordingFile;
  return path;
}

inline std::filesystem::path marker_path(const std::filesystem::path& path) {
  return recording_path(path).parent_path() / kMarkerFile;
}

namespace detail {

inline std::uint32_t crc32_of(const std::uint8_t* p, std::size_t n, std::uint32_t crc = 0) {
  return static_cast<std::uint32_t>(::crc32(crc, p, static_cast<uInt>(n)));
}

template <typename T>
void put_le(std::vector<std::uint8_t>& out, T v) {
  using U = std::make_unsigned_t<T>;
  auto u = static_cast<U>(v);
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<std::uint8_t>(u >> (8 * i)));
}

inline void put_f32(std::vector<std::uint8_t>& out, float f) { put_le(out, std::bit_cast<std::uint32_t>(f)); }

template <typename T>
T get_le(const std::uint8_t* p) {
  std::make_unsigned_t<T> u = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) u |= static_cast<std::make_unsigned_t<T>>(p[i]) << (8 * i);
  return static_cast<T>(u);
}

inline float get_f32(const std::uint8_t* p) { return std::bit_cast<float>(get_le<std::uint32_t>(p)); }

}  // namespace detail

// ---------------------------------------------------------------------------
// Writer

/// Single-writer session. Samples are buffered into blocks of one second
/// and each complete block is written and flushed, so a crash loses at most
/// the block in progress.
class SessionWriter {
 public:
  SessionWriter(const std::filesystem::path& dir, SessionMetadata meta, std::size_t block_samples = 0)
      : dir_(dir), meta_(std::move(meta)) {
    validate(meta_.config);
    block_samples_ = block_samples ? block_samples : static_cast<std::size_t>(meta_.config.sample_rate);
    std::error_code ec;
    std::filesystem::create_directories(dir_, ec);
    if (ec) throw Error(ErrorCode::session, "cannot create session directory " + dir_.string() + ": " + ec.message());
    data_.open(dir_ / kRecordingFile, std::ios::binary | std::ios::trunc);
    markers_.open(dir_ / kMarkerFile, std::ios::trunc);
    if (!data_ || !markers_) throw Error(ErrorCode::session, "cannot open session files in " + dir_.string());

    const std::string meta_text = nlohmann::json(meta_).dump();
    std::vector<std::uint8_t> hdr(kNeurecMagic.begin(), kNeurecMagic.end());
    detail::put_le(hdr, kNeurecVersion);
    detail::put_le(hdr, static_cast<std::uint32_t>(meta_text.size()));
    hdr.insert(hdr.end(), meta_text.begin(), meta_text.end());
    detail::put_le(hdr, detail::crc32_of(hdr.data(), hdr.size()));
    write(hdr);
  }

  SessionWriter(const SessionWriter&) = delete;
  SessionWriter& operator=(const SessionWriter&) = delete;

  ~SessionWriter() {
    try {
      close();
    } catch (...) {
    }
  }

  /// Appends a chunk continuing the recording's timeline.
  void append(const SignalChunk& chunk) {
    if (closed_) throw Error(ErrorCode::session, "append after close");
    if (chunk.channels() != kChannels) throw Error(ErrorCode::shape, "session chunks must have 8 channels");
    if (chunk.empty()) return;
    if (started_ && chunk.start() != next_index_) {
      throw Error(ErrorCode::session, "non-contiguous sample index " + std::to_string(chunk.start()) +
                                          " (expected " + std::to_string(next_index_) + ")");
    }
    if (!started_) {
      started_ = true;
      block_first_ = chunk.start();
      next_index_ = chunk.start();
    }
    for (std::size_t i = 0; i < chunk.samples(); ++i) {
      for (std::size_t c = 0; c < kChannels; ++c) pending_.push_back(static_cast<float>(chunk.at(c, i)));
      ++next_index_;
      if (pending_.size() == block_samples_ * kChannels) write_block();
    }
  }

  void add_marker(const Marker& m) {
    if (closed_) throw Error(ErrorCode::session, "marker after close");
    markers_ << nlohmann::json(m).dump() << '\n';
    markers_.flush();
    if (!markers_) throw Error(ErrorCode::session, "marker write failed");
  }

  void close() {
    if (closed_) return;
    closed_ = true;
    if (!pending_.empty()) write_block();
    data_.close();
    markers_.close();
  }

  std::uint64_t samples_written() const noexcept { return samples_; }
  std::uint64_t next_index() const noexcept { return next_index_; }
  const std::filesystem::path& directory() const noexcept { return dir_; }
  const SessionMetadata& metadata() const noexcept { return meta_; }

 private:
  void write(const std::vector<std::uint8_t>& bytes) {
    data_.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    data_.flush();
    if (!data_) {
      throw Error(ErrorCode::session, "write failed on " + (dir_ / kRecordingFile).string() + "; the file holds " +
                                          std::to_string(blocks_) + " complete block(s) and can be salvaged");
    }
  }

  void write_block() {
    const auto n = static_cast<std::uint32_t>(pending_.size() / kChannels);
    std::vector<std::uint8_t> blk;
    blk.reserve(16 + pending_.size() * 4);
    detail::put_le(blk, block_first_);
    detail::put_le(blk, n);
    for (float v : pending_) detail::put_f32(blk, v);
    detail::put_le(blk, detail::crc32_of(blk.data(), blk.size()));
    write(blk);
    ++blocks_;
    samples_ += n;
    block_first_ += n;
    pending_.clear();
  }

  std::filesystem::path dir_;
  SessionMetadata meta_;
  std::size_t block_samples_ = 250;
  std::ofstream data_;
  std::ofstream markers_;
  std::vector<float> pending_;
  std::uint64_t block_first_ = 0;
  std::uint64_t next_index_ = 0;
  std::uint64_t samples_ = 0;
  std::uint64_t blocks_ = 0;
  bool started_ = false;
  bool closed_ = false;
};

// ---------------------------------------------------------------------------
// Reader

struct Recording {
  SessionMetadata metadata;
  /// Samples of every valid block, in microvolts (f32 values widened).
  SignalChunk data;
  std::vector<Marker> markers;
  std::size_t blocks = 0;
  /// Set when reading stopped early on a truncated or corrupt block.
  std::optional<std::string> damage;
  /// Markers dropped because they point past the end of the data.
  std::size_t markers_out_of_range = 0;
};

/// Reads a session. Header problems throw; block problems stop the read at
/// the last good block and are reported through Recording::damage.
inline Recording read_session(const std::filesystem::path& path) {
  const auto file = recording_path(path);
  std::ifstream in(file, std::ios::binary);
  if (!in) throw Error(ErrorCode::io, "cannot open " + file.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  auto bad = [&](const std::string& why) { return Error(ErrorCode::parse, file.string() + ": " + why); };
  if (bytes.size() < 10 || !std::equal(kNeurecMagic.begin(), kNeurecMagic.end(), bytes.begin())) {
    throw bad("not a .neurec file");
  }
  const auto version = detail::get_le<std::uint16_t>(&bytes[4]);
  if (version != kNeurecVersion) throw bad("unsupported version " + std::to_string(version));
  const auto meta_len = detail::get_le<std::uint32_t>(&bytes[6]);
  const std::size_t hdr_end = 10 + static_cast<std::size_t>(meta_len);
  if (bytes.size() < hdr_end + 4) throw bad("truncated header");
  if (detail::get_le<std::uint32_t>(&bytes[hdr_end]) != detail::crc32_of(bytes.data(), hdr_end)) {
    throw bad("header checksum mismatch");
  }

  Recording rec;
  try {
    rec.metadata = nlohmann::json::parse(bytes.begin() + 10, bytes.begin() + static_cast<std::ptrdiff_t>(hdr_end))
                       .get<SessionMetadata>();
  } catch (const nlohmann::json::exception& e) {
    throw bad(std::string("metadata: ") + e.what());
  }
  const double fs = rec.metadata.config.sample_rate;

  std::array<std::vector<double>, kChannels> cols;
  std::optional<std::uint64_t> first;
  std::uint64_t expect = 0;
  std::size_t pos = hdr_end + 4;
  while (pos < bytes.size()) {
    if (bytes.size() - pos < 12) {
      rec.damage = "truncated block header at byte " + std::to_string(pos);
      break;
    }
    const auto first_idx = detail::get_le<std::uint64_t>(&bytes[pos]);
    const auto n = detail::get_le<std::uint32_t>(&bytes[pos + 8]);
    const std::size_t body = 12 + static_cast<std::size_t>(n) * kChannels * 4;
    if (bytes.size() - pos < body + 4) {
      rec.damage = "truncated block at byte " + std::to_string(pos);
      break;
    }
    if (detail::get_le<std::uint32_t>(&bytes[pos + body]) != detail::crc32_of(&bytes[pos], body)) {
      rec.damage = "block checksum mismatch at byte " + std::to_string(pos);
      break;
    }
    if (first && first_idx != expect) {
      rec.damage = "block index gap at byte " + std::to_string(pos);
      break;
    }
    if (!first) first = first_idx;
    const std::uint8_t* p = &bytes[pos + 12];
    for (std::uint32_t i = 0; i < n; ++i) {
      for (std::size_t c = 0; c < kChannels; ++c, p += 4) cols[c].push_back(detail::get_f32(p));
    }
    expect = first_idx + n;
    ++rec.blocks;
    pos += body + 4;
  }

  const std::size_t n = cols[0].size();
  rec.data = SignalChunk(kChannels, n, fs, first.value_or(0));
  for (std::size_t c = 0; c < kChannels; ++c) std::copy(cols[c].begin(), cols[c].end(), rec.data.channel(c).begin());

  std::ifstream mk(marker_path(path));
  std::string line;
  while (mk && std::getline(mk, line)) {
    if (line.empty()) continue;
    Marker m;
    try {
      m = nlohmann::json::parse(line).get<Marker>();
    } catch (const std::exception&) {
      // A torn final line after a crash; everything before it is kept.
      break;
    }
    if (m.sample >= rec.data.start() + n) {
      ++rec.markers_out_of_range;
      continue;
    }
    rec.markers.push_back(std::move(m));
  }
  return rec;
}

// ---------------------------------------------------------------------------
// CSV export

/// `#`-prefixed metadata lines, then `index,t_s,<montage...>,marker`.
/// Values use 9 significant digits, enough to restore every f32 exactly.
inline void export_csv(const Recording& rec, std::ostream& out) {
  const auto& m = rec.metadata;
  out << "# session_id: " << m.session_id << '\n';
  out << "# start_time: " << m.start_time << '\n';
  out << "# sample_rate: " << m.config.sample_rate << '\n';
  out << "# electrode_type: " << m.electrode_type << '\n';
  out << "# operator: " << m.operator_note << '\n';
  out << "# config: " << nlohmann::json(m.config).dump() << '\n';
  out << "index,t_s";
  for (const auto& label : m.montage) out << ',' << label;
  out << ",marker\n";

  std::vector<const Marker*> sorted;
  for (const auto& mk : rec.markers) sorted.push_back(&mk);
  std::stable_sort(sorted.begin(), sorted.end(), [](auto a, auto b) { return a->sample < b->sample; });
  std::size_t next = 0;

  const double fs = rec.data.sample_rate();
  char buf[64];
  for (std::size_t i = 0; i < rec.data.samples(); ++i) {
    const std::uint64_t idx = rec.data.start() + i;
    out << idx;
    std::snprintf(buf, sizeof buf, ",%.6f", static_cast<double>(idx) / fs);
    out << buf;
    for (std::size_t c = 0; c < kChannels; ++c) {
      std::snprintf(buf, sizeof buf, ",%.9g", rec.data.at(c, i));
      out << buf;
    }
    out << ',';
    std::string cell;
    while (next < sorted.size() && sorted[next]->sample == idx) {
      if (!cell.empty()) cell += ';';
      cell += std::string(to_string(sorted[next]->kind));
      if (!sorted[next]->text.empty()) cell += ":" + sorted[next]->text;
      ++next;
    }
    if (cell.find_first_of(",\"\n") != std::string::npos) {
      std::string q = "\"";
      for (char ch : cell) q += ch == '"' ? std::string("\"\"") : std::string(1, ch);
      cell = q + "\"";
    }
    out << cell << '\n';
  }
}

// ---------------------------------------------------------------------------
// Replay

/// Feeds a recording back through the FrameSource interface. Microvolts are
/// re-quantized with the recorded gain and vref; codes below 2^22 in
/// magnitude come back exactly.
class ReplaySource final : public FrameSource {
 public:
  explicit ReplaySource(Recording rec) : rec_(std::move(rec)) {}
  explicit ReplaySource(const std::filesystem::path& path) : ReplaySource(read_session(path)) {}

  std::optional<SampleFrame> next_frame() override {
    if (pos_ >= rec_.data.samples()) return std::nullopt;
    SampleFrame f;
    f.seq = rec_.data.start() + pos_;
    f.status = make_status(0, 0, 0);
    const auto& cfg = rec_.metadata.config;
    for (std::size_t c = 0; c < kChannels; ++c) {
      f.raw[c] = microvolts_to_raw(rec_.data.at(c, pos_), cfg.channels[c].gain, cfg.vref);
    }
    ++pos_;
    return f;
  }

  const DeviceConfig& config() const override { return rec_.metadata.config; }
  const Recording& recording() const noexcept { return rec_; }
  const std::optional<std::string>& damage() const noexcept { return rec_.damage; }
  bool finished() const noexcept { return pos_ >= rec_.data.samples(); }

 private:
  Recording rec_;
  std::size_t pos_ = 0;
};

}  // namespace jneeg
