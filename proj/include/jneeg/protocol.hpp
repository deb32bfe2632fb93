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

// ADS1299 byte-level contract: SPI opcodes, register map, 27-byte data
// frames and raw code <-> microvolt calibration. Everything here is a pure
// function over value types; RegisterMap is single-owner mutable state.

#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <deque>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "jneeg/error.hpp"
#include "jneeg/types.hpp"

namespace jneeg {

// ---------------------------------------------------------------------------
// Commands

enum class Opcode : std::uint8_t {
  wakeup = 0x02,
  standby = 0x04,
  reset = 0x06,
  start = 0x08,
  stop = 0x0A,
  rdatac = 0x10,
  sdatac = 0x11,
  rdata = 0x12,
  rreg = 0x20,
  wreg = 0x40,
};

inline constexpr std::uint8_t kRegisterCount = 0x18;

struct DeviceCommand {
  Opcode op = Opcode::sdatac;
  std::uint8_t address = 0;
  std::uint8_t count = 0;
  std::vector<std::uint8_t> data;

  static DeviceCommand simple(Opcode op) { return {op, 0, 0, {}}; }
  static DeviceCommand rreg(std::uint8_t address, std::uint8_t count) { return {Opcode::rreg, address, count, {}}; }
  static DeviceCommand wreg(std::uint8_t address, std::uint8_t count, std::vector<std::uint8_t> data) {
    return {Opcode::wreg, address, count, std::move(data)};
  }

  friend bool operator==(const DeviceCommand&, const DeviceCommand&) = default;
};

inline std::string_view to_string(Opcode op) {
  switch (op) {
    case Opcode::wakeup: return "WAKEUP";
    case Opcode::standby: return "STANDBY";
    case Opcode::reset: return "RESET";
    case Opcode::start: return "START";
    case Opcode::stop: return "STOP";
    case Opcode::rdatac: return "RDATAC";
    case Opcode::sdatac: return "SDATAC";
    case Opcode::rdata: return "RDATA";
    case Opcode::rreg: return "RREG";
    case Opcode::wreg: return "WREG";
  }
  return "?";
}

namespace detail {
inline void check_register_span(std::uint8_t address, std::size_t count) {
  if (count == 0) throw Error(ErrorCode::count, "register access needs count >= 1");
  if (address >= kRegisterCount || address + count > kRegisterCount) {
    throw Error(ErrorCode::range, "register span exceeds 0x17");
  }
}
}  // namespace detail

/// Opcode bytes for `cmd`. RREG/WREG take two header bytes:
/// 001r rrrr / 010r rrrr followed by 000n nnnn with n = count - 1.
inline std::vector<std::uint8_t> encode_command(const DeviceCommand& cmd) {
  switch (cmd.op) {
    case Opcode::rreg: {
      detail::check_register_span(cmd.address, cmd.count);
      return {static_cast<std::uint8_t>(0x20 | cmd.address), static_cast<std::uint8_t>(cmd.count - 1)};
    }
    case Opcode::wreg: {
      detail::check_register_span(cmd.address, cmd.count);
      if (cmd.data.size() != cmd.count) throw Error(ErrorCode::count, "WREG payload length differs from count");
      std::vector<std::uint8_t> out{static_cast<std::uint8_t>(0x40 | cmd.address),
                                    static_cast<std::uint8_t>(cmd.count - 1)};
      out.insert(out.end(), cmd.data.begin(), cmd.data.end());
      return out;
    }
    default:
      return {static_cast<std::uint8_t>(cmd.op)};
  }
}

/// Parses one command from the head of `bytes`. Returns the number of bytes
/// consumed, or 0 when more bytes are needed.
inline std::size_t parse_command(std::span<const std::uint8_t> bytes, DeviceCommand& out) {
  if (bytes.empty()) return 0;
  const std::uint8_t b0 = bytes[0];
  const std::uint8_t kind = b0 & 0xE0;
  if (kind == 0x20 || kind == 0x40) {
    if (bytes.size() < 2) return 0;
    const std::uint8_t address = b0 & 0x1F;
    const std::size_t count = static_cast<std::size_t>(bytes[1] & 0x1F) + 1;
    detail::check_register_span(address, count);
    if (kind == 0x20) {
      out = DeviceCommand::rreg(address, static_cast<std::uint8_t>(count));
      return 2;
    }
    if (bytes.size() < 2 + count) return 0;
    out = DeviceCommand::wreg(address, static_cast<std::uint8_t>(count),
                              {bytes.begin() + 2, bytes.begin() + 2 + static_cast<std::ptrdiff_t>(count)});
    return 2 + count;
  }
  switch (b0) {
    case 0x02: case 0x04: case 0x06: case 0x08: case 0x0A:
    case 0x10: case 0x11: case 0x12:
      out = DeviceCommand::simple(static_cast<Opcode>(b0));
      return 1;
    default:
      throw Error(ErrorCode::parse, "unknown opcode byte");
  }
}

// ---------------------------------------------------------------------------
// Registers

namespace reg {
inline constexpr std::uint8_t ID = 0x00;
inline constexpr std::uint8_t CONFIG1 = 0x01;
inline constexpr std::uint8_t CONFIG2 = 0x02;
inline constexpr std::uint8_t CONFIG3 = 0x03;
inline constexpr std::uint8_t LOFF = 0x04;
inline constexpr std::uint8_t CH1SET = 0x05;
inline constexpr std::uint8_t BIAS_SENSP = 0x0D;
inline constexpr std::uint8_t BIAS_SENSN = 0x0E;
inline constexpr std::uint8_t LOFF_SENSP = 0x0F;
inline constexpr std::uint8_t LOFF_SENSN = 0x10;
inline constexpr std::uint8_t LOFF_FLIP = 0x11;
inline constexpr std::uint8_t LOFF_STATP = 0x12;
inline constexpr std::uint8_t LOFF_STATN = 0x13;
inline constexpr std::uint8_t GPIO = 0x14;
inline constexpr std::uint8_t MISC1 = 0x15;
inline constexpr std::uint8_t MISC2 = 0x16;
inline constexpr std::uint8_t CONFIG4 = 0x17;
}  // namespace reg

struct RegisterInfo {
  std::string_view name;
  std::uint8_t reset;
  std::uint8_t read_only_mask;  // set bits ignore host writes
};

/// Reset values and fixed/reserved bits from the ADS1299 register table.
inline constexpr std::array<RegisterInfo, kRegisterCount> kRegisterTable{{
    {"ID", 0x3E, 0xFF},
    {"CONFIG1", 0x96, 0x98},
    {"CONFIG2", 0xC0, 0xE8},
    {"CONFIG3", 0x60, 0x60},
    {"LOFF", 0x00, 0x10},
    {"CH1SET", 0x61, 0x00},
    {"CH2SET", 0x61, 0x00},
    {"CH3SET", 0x61, 0x00},
    {"CH4SET", 0x61, 0x00},
    {"CH5SET", 0x61, 0x00},
    {"CH6SET", 0x61, 0x00},
    {"CH7SET", 0x61, 0x00},
    {"CH8SET", 0x61, 0x00},
    {"BIAS_SENSP", 0x00, 0x00},
    {"BIAS_SENSN", 0x00, 0x00},
    {"LOFF_SENSP", 0x00, 0x00},
    {"LOFF_SENSN", 0x00, 0x00},
    {"LOFF_FLIP", 0x00, 0x00},
    {"LOFF_STATP", 0x00, 0xFF},
    {"LOFF_STATN", 0x00, 0xFF},
    {"GPIO", 0x0F, 0x00},
    {"MISC1", 0x00, 0xDF},
    {"MISC2", 0x00, 0xFF},
    {"CONFIG4", 0x00, 0xF4},
}};

class RegisterMap {
 public:
  RegisterMap() { reset(); }

  void reset() {
    for (std::size_t i = 0; i < values_.size(); ++i) values_[i] = kRegisterTable[i].reset;
  }

  std::uint8_t read(std::uint8_t address) const {
    check(address);
    return values_[address];
  }

  /// Host write: read-only bits keep their current value.
  void write(std::uint8_t address, std::uint8_t value) {
    check(address);
    const std::uint8_t mask = kRegisterTable[address].read_only_mask;
    values_[address] = static_cast<std::uint8_t>((values_[address] & mask) | (value & ~mask));
  }

  /// Device-side update (status registers); bypasses the mask.
  void set_internal(std::uint8_t address, std::uint8_t value) {
    check(address);
    values_[address] = value;
  }

  static std::string_view name(std::uint8_t address) {
    check(address);
    return kRegisterTable[address].name;
  }

  const std::array<std::uint8_t, kRegisterCount>& values() const noexcept { return values_; }

  friend bool operator==(const RegisterMap&, const RegisterMap&) = default;

 private:
  static void check(std::uint8_t address) {
    if (address >= kRegisterCount) throw Error(ErrorCode::range, "register address out of range");
  }

  std::array<std::uint8_t, kRegisterCount> values_{};
};

// ---------------------------------------------------------------------------
// Device configuration

enum class InputMux : std::uint8_t {
  normal = 0,
  shorted = 1,
  bias_meas = 2,
  mvdd = 3,
  temperature = 4,
  test_signal = 5,
  bias_drp = 6,
  bias_drn = 7,
};

enum class LeadoffFrequency : std::uint8_t { dc = 0, ac_7_8 = 1, ac_31_2 = 2 };

/// Reference routing: all negative inputs tied to SRB1 (common reference
/// electrode) or independent differential pairs.
enum class ReferenceScheme { common_srb1, bipolar };

inline double leadoff_frequency_hz(LeadoffFrequency f) {
  switch (f) {
    case LeadoffFrequency::dc: return 0.0;
    case LeadoffFrequency::ac_7_8: return 7.8;
    case LeadoffFrequency::ac_31_2: return 31.2;
  }
  return 0.0;
}

struct ChannelConfig {
  bool enabled = true;
  int gain = 24;
  InputMux mux = InputMux::normal;

  friend bool operator==(const ChannelConfig&, const ChannelConfig&) = default;
};

struct LeadoffConfig {
  double current_amps = 24e-9;
  LeadoffFrequency frequency = LeadoffFrequency::ac_31_2;
  /// Bit i set: current injected / comparator active on channel i (P side).
  std::uint8_t channels = 0;

  friend bool operator==(const LeadoffConfig&, const LeadoffConfig&) = default;
};

struct DeviceConfig {
  int sample_rate = 250;
  double vref = 4.5;
  std::array<ChannelConfig, kChannels> channels{};
  LeadoffConfig leadoff{};
  ReferenceScheme reference = ReferenceScheme::common_srb1;

  void set_gain(int gain) {
    for (auto& ch : channels) ch.gain = gain;
  }

  friend bool operator==(const DeviceConfig&, const DeviceConfig&) = default;
};

inline constexpr std::array<int, 7> kGains{1, 2, 4, 6, 8, 12, 24};
inline constexpr std::array<int, 4> kSampleRates{250, 500, 1000, 2000};

inline std::uint8_t gain_code(int gain) {
  for (std::size_t i = 0; i < kGains.size(); ++i) {
    if (kGains[i] == gain) return static_cast<std::uint8_t>(i);
  }
  throw Error(ErrorCode::config, "unsupported gain " + std::to_string(gain));
}

inline std::uint8_t rate_code(int sample_rate) {
  switch (sample_rate) {
    case 2000: return 3;
    case 1000: return 4;
    case 500: return 5;
    case 250: return 6;
    default: throw Error(ErrorCode::config, "unsupported sample rate " + std::to_string(sample_rate));
  }
}

inline std::uint8_t leadoff_current_code(double amps) {
  if (std::abs(amps - 6e-9) < 1e-12) return 0;
  if (std::abs(amps - 24e-9) < 1e-12) return 1;
  throw Error(ErrorCode::config, "lead-off current must be 6 nA or 24 nA");
}

inline void validate(const DeviceConfig& cfg) {
  rate_code(cfg.sample_rate);
  if (!(cfg.vref > 0.0)) throw Error(ErrorCode::config, "vref must be positive");
  for (const auto& ch : cfg.channels) gain_code(ch.gain);
  leadoff_current_code(cfg.leadoff.current_amps);
}

/// Register image for `cfg`. Registers outside the modeled subset keep
/// their reset values.
inline RegisterMap to_registers(const DeviceConfig& cfg) {
  validate(cfg);
  RegisterMap map;
  map.write(reg::CONFIG1, static_cast<std::uint8_t>(0x90 | rate_code(cfg.sample_rate)));
  // Internal reference buffer enabled, bias buffer enabled.
  map.write(reg::CONFIG3, 0xEC);
  const auto freq = static_cast<std::uint8_t>(cfg.leadoff.frequency);
  map.write(reg::LOFF, static_cast<std::uint8_t>((leadoff_current_code(cfg.leadoff.current_amps) << 2) | freq));
  for (std::size_t i = 0; i < kChannels; ++i) {
    const auto& ch = cfg.channels[i];
    std::uint8_t v = static_cast<std::uint8_t>((gain_code(ch.gain) << 4) | static_cast<std::uint8_t>(ch.mux));
    if (!ch.enabled) v |= 0x80;
    if (cfg.reference == ReferenceScheme::bipolar) v |= 0x08;  // SRB2 marks bipolar routing
    map.write(static_cast<std::uint8_t>(reg::CH1SET + i), v);
  }
  map.write(reg::LOFF_SENSP, cfg.leadoff.channels);
  map.write(reg::MISC1, cfg.reference == ReferenceScheme::common_srb1 ? 0x20 : 0x00);
  return map;
}

/// Inverse of to_registers for the modeled subset. vref is analog and not
/// register-visible, so it is supplied by the caller.
inline DeviceConfig from_registers(const RegisterMap& map, double vref = 4.5) {
  DeviceConfig cfg;
  cfg.vref = vref;
  switch (map.read(reg::CONFIG1) & 0x07) {
    case 3: cfg.sample_rate = 2000; break;
    case 4: cfg.sample_rate = 1000; break;
    case 5: cfg.sample_rate = 500; break;
    case 6: cfg.sample_rate = 250; break;
    default: throw Error(ErrorCode::config, "data-rate code outside the supported subset");
  }
  const std::uint8_t loff = map.read(reg::LOFF);
  const std::uint8_t ilead = (loff >> 2) & 0x03;
  if (ilead > 1) throw Error(ErrorCode::config, "lead-off current outside the supported subset");
  cfg.leadoff.current_amps = ilead == 0 ? 6e-9 : 24e-9;
  const std::uint8_t flead = loff & 0x03;
  if (flead > 2) throw Error(ErrorCode::config, "lead-off frequency outside the supported subset");
  cfg.leadoff.frequency = static_cast<LeadoffFrequency>(flead);
  cfg.leadoff.channels = map.read(reg::LOFF_SENSP);
  cfg.reference = (map.read(reg::MISC1) & 0x20) ? ReferenceScheme::common_srb1 : ReferenceScheme::bipolar;
  for (std::size_t i = 0; i < kChannels; ++i) {
    const std::uint8_t v = map.read(static_cast<std::uint8_t>(reg::CH1SET + i));
    auto& ch = cfg.channels[i];
    ch.enabled = (v & 0x80) == 0;
    const std::uint8_t g = (v >> 4) & 0x07;
    if (g >= kGains.size()) throw Error(ErrorCode::config, "reserved gain code");
    ch.gain = kGains[g];
    ch.mux = static_cast<InputMux>(v & 0x07);
  }
  return cfg;
}

// JSON form used by --config files and the control plane.

inline std::string_view to_string(InputMux mux) {
  static constexpr std::array<std::string_view, 8> names{
      "normal", "shorted", "bias_meas", "mvdd", "temperature", "test", "bias_drp", "bias_drn"};
  return names[static_cast<std::size_t>(mux)];
}

inline InputMux input_mux_from_string(std::string_view s) {
  for (std::uint8_t i = 0; i < 8; ++i) {
    if (to_string(static_cast<InputMux>(i)) == s) return static_cast<InputMux>(i);
  }
  throw Error(ErrorCode::parse, "unknown input mux '" + std::string(s) + "'");
}

inline void to_json(nlohmann::json& j, const DeviceConfig& cfg) {
  nlohmann::json chans = nlohmann::json::array();
  for (const auto& ch : cfg.channels) {
    chans.push_back({{"enabled", ch.enabled}, {"gain", ch.gain}, {"mux", to_string(ch.mux)}});
  }
  nlohmann::json loff_channels = nlohmann::json::array();
  for (std::size_t i = 0; i < kChannels; ++i) {
    if (cfg.leadoff.channels & (1u << i)) loff_channels.push_back(i);
  }
  j = {{"sample_rate", cfg.sample_rate},
       {"vref", cfg.vref},
       {"channels", chans},
       {"leadoff",
        {{"current_amps", cfg.leadoff.current_amps},
         {"frequency_hz", leadoff_frequency_hz(cfg.leadoff.frequency)},
         {"channels", loff_channels}}},
       {"reference", cfg.reference == ReferenceScheme::common_srb1 ? "srb1" : "bipolar"}};
}

inline void from_json(const nlohmann::json& j, DeviceConfig& cfg) {
  cfg = DeviceConfig{};
  try {
    cfg.sample_rate = j.value("sample_rate", 250);
    cfg.vref = j.value("vref", 4.5);
    if (j.contains("gain")) cfg.set_gain(j.at("gain").get<int>());
    if (j.contains("channels")) {
      const auto& chans = j.at("channels");
      if (!chans.is_array() || chans.size() != kChannels) {
        throw Error(ErrorCode::config, "channels must list exactly 8 entries");
      }
      for (std::size_t i = 0; i < kChannels; ++i) {
        auto& ch = cfg.channels[i];
        ch.enabled = chans[i].value("enabled", true);
        ch.gain = chans[i].value("gain", ch.gain);
        ch.mux = input_mux_from_string(chans[i].value("mux", std::string("normal")));
      }
    }
    if (j.contains("leadoff")) {
      const auto& lo = j.at("leadoff");
      cfg.leadoff.current_amps = lo.value("current_amps", 24e-9);
      const double f = lo.value("frequency_hz", 31.2);
      if (f == 0.0) {
        cfg.leadoff.frequency = LeadoffFrequency::dc;
      } else if (std::abs(f - 7.8) < 1e-6) {
        cfg.leadoff.frequency = LeadoffFrequency::ac_7_8;
      } else if (std::abs(f - 31.2) < 1e-6) {
        cfg.leadoff.frequency = LeadoffFrequency::ac_31_2;
      } else {
        throw Error(ErrorCode::config, "lead-off frequency must be 0 (DC), 7.8 or 31.2 Hz");
      }
      cfg.leadoff.channels = 0;
      for (const auto& c : lo.value("channels", nlohmann::json::array())) {
        const auto idx = c.get<std::size_t>();
        if (idx >= kChannels) throw Error(ErrorCode::config, "lead-off channel out of range");
        cfg.leadoff.channels |= static_cast<std::uint8_t>(1u << idx);
      }
    }
    const std::string ref = j.value("reference", std::string("srb1"));
    if (ref == "srb1") {
      cfg.reference = ReferenceScheme::common_srb1;
    } else if (ref == "bipolar") {
      cfg.reference = ReferenceScheme::bipolar;
    } else {
      throw Error(ErrorCode::config, "reference must be 'srb1' or 'bipolar'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::parse, e.what());
  }
  validate(cfg);
}

// ---------------------------------------------------------------------------
// Frames

inline constexpr std::size_t kFrameBytes = 27;
inline constexpr std::int32_t kRawMax = (1 << 23) - 1;
inline constexpr std::int32_t kRawMin = -(1 << 23);
inline constexpr std::uint32_t kSyncNibble = 0xC;

using FrameBytes = std::array<std::uint8_t, kFrameBytes>;

struct SampleFrame {
  std::uint32_t status = kSyncNibble << 20;
  std::array<std::int32_t, kChannels> raw{};
  std::uint64_t seq = 0;

  std::uint8_t leadoff_p() const noexcept { return static_cast<std::uint8_t>((status >> 12) & 0xFF); }
  std::uint8_t leadoff_n() const noexcept { return static_cast<std::uint8_t>((status >> 4) & 0xFF); }
  std::uint8_t gpio() const noexcept { return static_cast<std::uint8_t>(status & 0x0F); }

  friend bool operator==(const SampleFrame&, const SampleFrame&) = default;
};

/// 1100 | LOFF_STATP | LOFF_STATN | GPIO[7:4]
inline constexpr std::uint32_t make_status(std::uint8_t leadoff_p, std::uint8_t leadoff_n, std::uint8_t gpio = 0) {
  return (kSyncNibble << 20) | (std::uint32_t{leadoff_p} << 12) | (std::uint32_t{leadoff_n} << 4) | (gpio & 0x0Fu);
}

inline bool has_sync(std::uint8_t first_byte) noexcept { return (first_byte >> 4) == kSyncNibble; }

inline SampleFrame decode_frame(std::span<const std::uint8_t> bytes, std::uint64_t seq = 0) {
  if (bytes.size() != kFrameBytes) {
    throw Error(ErrorCode::framing, "frame must be 27 bytes, got " + std::to_string(bytes.size()));
  }
  if (!has_sync(bytes[0])) throw Error(ErrorCode::desync, "status sync nibble is not 0b1100");
  SampleFrame f;
  f.seq = seq;
  f.status = (std::uint32_t{bytes[0]} << 16) | (std::uint32_t{bytes[1]} << 8) | bytes[2];
  for (std::size_t i = 0; i < kChannels; ++i) {
    const std::size_t o = 3 + 3 * i;
    std::uint32_t u = (std::uint32_t{bytes[o]} << 16) | (std::uint32_t{bytes[o + 1]} << 8) | bytes[o + 2];
    if (u & 0x800000u) u |= 0xFF000000u;
    f.raw[i] = static_cast<std::int32_t>(u);
  }
  return f;
}

inline FrameBytes encode_frame(const SampleFrame& f) {
  if ((f.status >> 20) != kSyncNibble || f.status > 0xFFFFFFu) {
    throw Error(ErrorCode::range, "status word must be 24 bits with sync nibble 0b1100");
  }
  FrameBytes out{};
  out[0] = static_cast<std::uint8_t>(f.status >> 16);
  out[1] = static_cast<std::uint8_t>(f.status >> 8);
  out[2] = static_cast<std::uint8_t>(f.status);
  for (std::size_t i = 0; i < kChannels; ++i) {
    const std::int32_t v = f.raw[i];
    if (v < kRawMin || v > kRawMax) throw Error(ErrorCode::range, "raw sample outside 24-bit range");
    const auto u = static_cast<std::uint32_t>(v);
    const std::size_t o = 3 + 3 * i;
    out[o] = static_cast<std::uint8_t>(u >> 16);
    out[o + 1] = static_cast<std::uint8_t>(u >> 8);
    out[o + 2] = static_cast<std::uint8_t>(u);
  }
  return out;
}

/// Byte-stream frame decoder with resynchronization.
///
/// While locked, every 27-byte boundary must start with the sync nibble.
/// On a miss the decoder drops one byte at a time until a candidate boundary
/// is followed by two further sync-bearing boundaries (or the end of the
/// buffered data), then locks again. Dropped bytes are counted.
class FrameDecoder {
 public:
  explicit FrameDecoder(std::uint64_t first_seq = 0) : next_seq_(first_seq) {}

  /// Feeds bytes; decoded frames are appended to `out`.
  void feed(std::span<const std::uint8_t> bytes, std::vector<SampleFrame>& out) {
    buffer_.insert(buffer_.end(), bytes.begin(), bytes.end());
    drain(out, false);
  }

  /// Decodes whatever complete frames remain, accepting a candidate even when
  /// no lookahead confirmation is available.
  void flush(std::vector<SampleFrame>& out) { drain(out, true); }

  std::uint64_t discarded_bytes() const noexcept { return discarded_; }
  std::uint64_t resync_events() const noexcept { return resyncs_; }
  std::uint64_t next_seq() const noexcept { return next_seq_; }
  bool locked() const noexcept { return locked_; }

 private:
  static constexpr std::size_t kConfirmFrames = 2;

  enum class Verdict { accept, reject, wait };

  Verdict check_candidate(bool at_end) const {
    if (!has_sync(buffer_[0])) return Verdict::reject;
    for (std::size_t k = 1; k <= kConfirmFrames; ++k) {
      const std::size_t p = k * kFrameBytes;
      if (p >= buffer_.size()) return at_end ? Verdict::accept : Verdict::wait;
      if (!has_sync(buffer_[p])) return Verdict::reject;
    }
    return Verdict::accept;
  }

  // Index of the first buffered boundary after 0 that lacks the sync
  // nibble, or 0 when every buffered boundary looks fine.
  std::size_t first_bad_boundary() const {
    for (std::size_t k = 1; k <= kConfirmFrames; ++k) {
      const std::size_t p = k * kFrameBytes;
      if (p >= buffer_.size()) break;
      if (!has_sync(buffer_[p])) return k;
    }
    return 0;
  }

  void drain(std::vector<SampleFrame>& out, bool at_end) {
    while (buffer_.size() >= kFrameBytes) {
      if (!locked_) {
        const Verdict v = check_candidate(at_end);
        if (v == Verdict::wait) return;
        if (v == Verdict::reject) {
          buffer_.pop_front();
          ++discarded_;
          continue;
        }
        locked_ = true;
      }
      if (!has_sync(buffer_[0])) {
        locked_ = false;
        ++resyncs_;
        continue;
      }
      // Frame 0 starts on a good boundary. If a boundary already buffered
      // behind it is broken, the slip happened inside frame 0 or 1; emit
      // frame 0 and rescan from where frame 1 would start.
      const bool slipped = first_bad_boundary() != 0;
      FrameBytes bytes;
      std::copy_n(buffer_.begin(), kFrameBytes, bytes.begin());
      buffer_.erase(buffer_.begin(), buffer_.begin() + kFrameBytes);
      out.push_back(decode_frame(bytes, next_seq_++));
      if (slipped) {
        locked_ = false;
        ++resyncs_;
      }
    }
  }

  std::deque<std::uint8_t> buffer_;
  std::uint64_t next_seq_ = 0;
  std::uint64_t discarded_ = 0;
  std::uint64_t resyncs_ = 0;
  bool locked_ = true;
};

// ---------------------------------------------------------------------------
// Calibration

inline constexpr double kFullScaleCode = 8388607.0;  // 2^23 - 1

/// One code in microvolts: (vref / gain) / (2^23 - 1) * 1e6.
inline double lsb_microvolts(double gain, double vref) { return vref / gain / kFullScaleCode * 1e6; }

inline double raw_to_microvolts(std::int32_t raw, double gain, double vref) {
  return static_cast<double>(raw) * (vref / gain) / kFullScaleCode * 1e6;
}

/// Nearest code for `microvolts`, clamped to the 24-bit range.
inline std::int32_t microvolts_to_raw(double microvolts, double gain, double vref) {
  const double code = std::nearbyint(microvolts / 1e6 * kFullScaleCode / (vref / gain));
  if (!(code < static_cast<double>(kRawMax))) return kRawMax;  // also maps NaN high
  if (code < static_cast<double>(kRawMin)) return kRawMin;
  return static_cast<std::int32_t>(code);
}

/// Calibrates frames into a channel-major chunk.
inline SignalChunk calibrate(std::span<const SampleFrame> frames, const DeviceConfig& cfg) {
  SignalChunk chunk(kChannels, frames.size(), cfg.sample_rate, frames.empty() ? 0 : frames.front().seq);
  for (std::size_t c = 0; c < kChannels; ++c) {
    const double gain = cfg.channels[c].gain;
    auto dst = chunk.channel(c);
    for (std::size_t i = 0; i < frames.size(); ++i) dst[i] = raw_to_microvolts(frames[i].raw[c], gain, cfg.vref);
  }
  return chunk;
}

}  // namespace jneeg
