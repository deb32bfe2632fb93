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

// Scriptable virtual acquisition board. A Scenario describes background
// noise, eyes-closed alpha intervals, scripted blink/chew artifacts and
// per-electrode contact impedance; EmulatedDevice speaks the ADS1299 SPI
// protocol on top of it.

#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <numbers>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "jneeg/device.hpp"
#include "jneeg/error.hpp"
#include "jneeg/protocol.hpp"
#include "jneeg/types.hpp"

namespace jneeg {

// ---------------------------------------------------------------------------
// Scenario

struct NoiseModel {
  double pink_rms_uv = 0.0;
  double white_rms_uv = 0.0;
  int mains_hz = 0;  // 0, 50 or 60
  double mains_amplitude_uv = 0.0;

  friend bool operator==(const NoiseModel&, const NoiseModel&) = default;
};

/// Eyes-closed span with an alpha rhythm of the given peak amplitude.
struct AlphaInterval {
  double start_s = 0.0;
  double end_s = 0.0;
  double amplitude_uv = 50.0;
  double freq_hz = 10.0;

  friend bool operator==(const AlphaInterval&, const AlphaInterval&) = default;
};

enum class ArtifactKind { blink, chew };

inline std::string_view to_string(ArtifactKind k) { return k == ArtifactKind::blink ? "blink" : "chew"; }

struct ScriptedArtifact {
  ArtifactKind kind = ArtifactKind::blink;
  double time_s = 0.0;
  double amplitude_uv = 150.0;
  double duration_s = 0.4;
  std::vector<std::size_t> channels;

  friend bool operator==(const ScriptedArtifact&, const ScriptedArtifact&) = default;
};

struct Scenario {
  std::string name;
  /// 0 means unbounded (live steering sessions).
  double duration_s = 0.0;
  NoiseModel noise{};
  std::vector<AlphaInterval> alpha_timeline;
  std::vector<ScriptedArtifact> artifacts;
  std::array<double, kChannels> impedance_ohms{};
  std::uint64_t seed = 1;

  friend bool operator==(const Scenario&, const Scenario&) = default;
};

inline constexpr double kDefaultBlinkAmplitudeUv = 150.0;
inline constexpr double kDefaultBlinkDurationS = 0.4;
inline constexpr double kDefaultChewAmplitudeUv = 300.0;
inline constexpr double kDefaultChewDurationS = 1.0;

inline std::vector<std::size_t> default_artifact_channels(ArtifactKind kind) {
  if (kind == ArtifactKind::blink) return {site::F7, site::Fz, site::F8};
  return {0, 1, 2, 3, 4, 5, 6, 7};
}

inline ScriptedArtifact make_artifact(ArtifactKind kind, double time_s) {
  ScriptedArtifact a;
  a.kind = kind;
  a.time_s = time_s;
  a.amplitude_uv = kind == ArtifactKind::blink ? kDefaultBlinkAmplitudeUv : kDefaultChewAmplitudeUv;
  a.duration_s = kind == ArtifactKind::blink ? kDefaultBlinkDurationS : kDefaultChewDurationS;
  a.channels = default_artifact_channels(kind);
  return a;
}

inline void validate(const Scenario& s) {
  auto fail = [](const std::string& m) { throw Error(ErrorCode::config, "scenario: " + m); };
  if (s.duration_s < 0) fail("duration_s must be >= 0");
  const bool bounded = s.duration_s > 0;
  if (s.noise.pink_rms_uv < 0 || s.noise.white_rms_uv < 0 || s.noise.mains_amplitude_uv < 0) {
    fail("noise amplitudes must be >= 0");
  }
  if (s.noise.mains_hz != 0 && s.noise.mains_hz != 50 && s.noise.mains_hz != 60) fail("mains_hz must be 0, 50 or 60");
  for (const auto& a : s.alpha_timeline) {
    if (a.start_s < 0 || a.end_s < a.start_s || (bounded && a.end_s > s.duration_s)) {
      fail("alpha interval outside [0, duration_s]");
    }
    if (a.amplitude_uv < 0) fail("alpha amplitude must be >= 0");
    if (a.freq_hz < 8.0 || a.freq_hz > 12.0) fail("alpha freq_hz must lie in [8, 12]");
  }
  for (const auto& a : s.artifacts) {
    if (a.time_s < 0 || (bounded && a.time_s > s.duration_s)) fail("artifact time outside [0, duration_s]");
    if (a.amplitude_uv < 0 || a.duration_s <= 0) fail("artifact amplitude must be >= 0 and duration > 0");
    for (auto c : a.channels) {
      if (c >= kChannels) fail("artifact channel out of range");
    }
  }
  for (double z : s.impedance_ohms) {
    if (z < 0) fail("impedance must be >= 0");
  }
}

namespace detail {
inline std::size_t parse_channel(const nlohmann::json& j) {
  if (j.is_number_integer()) {
    const auto v = j.get<long long>();
    if (v < 0 || v >= static_cast<long long>(kChannels)) throw Error(ErrorCode::config, "channel index out of range");
    return static_cast<std::size_t>(v);
  }
  const auto label = j.get<std::string>();
  if (auto idx = channel_index(default_montage(), label)) return *idx;
  throw Error(ErrorCode::config, "unknown montage label '" + label + "'");
}
}  // namespace detail

inline void to_json(nlohmann::json& j, const Scenario& s) {
  nlohmann::json alpha = nlohmann::json::array();
  for (const auto& a : s.alpha_timeline) {
    alpha.push_back({{"start_s", a.start_s}, {"end_s", a.end_s}, {"amplitude_uv", a.amplitude_uv}, {"freq_hz", a.freq_hz}});
  }
  nlohmann::json arts = nlohmann::json::array();
  const auto montage = default_montage();
  for (const auto& a : s.artifacts) {
    nlohmann::json chans = nlohmann::json::array();
    for (auto c : a.channels) chans.push_back(montage[c]);
    arts.push_back({{"kind", to_string(a.kind)},
                    {"time_s", a.time_s},
                    {"amplitude_uv", a.amplitude_uv},
                    {"duration_s", a.duration_s},
                    {"channels", chans}});
  }
  j = {{"name", s.name},
       {"duration_s", s.duration_s},
       {"noise",
        {{"pink_rms_uv", s.noise.pink_rms_uv},
         {"white_rms_uv", s.noise.white_rms_uv},
         {"mains_hz", s.noise.mains_hz},
         {"mains_amplitude_uv", s.noise.mains_amplitude_uv}}},
       {"alpha_timeline", alpha},
       {"artifacts", arts},
       {"impedance_ohms", s.impedance_ohms},
       {"seed", s.seed}};
}

inline void from_json(const nlohmann::json& j, Scenario& s) {
  s = Scenario{};
  try {
    s.name = j.value("name", std::string{});
    s.duration_s = j.value("duration_s", 0.0);
    s.seed = j.value("seed", std::uint64_t{1});
    if (j.contains("noise")) {
      const auto& n = j.at("noise");
      s.noise.pink_rms_uv = n.value("pink_rms_uv", 0.0);
      s.noise.white_rms_uv = n.value("white_rms_uv", 0.0);
      s.noise.mains_hz = n.value("mains_hz", 0);
      s.noise.mains_amplitude_uv = n.value("mains_amplitude_uv", 0.0);
    }
    for (const auto& a : j.value("alpha_timeline", nlohmann::json::array())) {
      s.alpha_timeline.push_back({a.at("start_s").get<double>(), a.at("end_s").get<double>(),
                                  a.value("amplitude_uv", 50.0), a.value("freq_hz", 10.0)});
    }
    for (const auto& a : j.value("artifacts", nlohmann::json::array())) {
      const std::string kind = a.at("kind").get<std::string>();
      ArtifactKind k;
      if (kind == "blink") {
        k = ArtifactKind::blink;
      } else if (kind == "chew") {
        k = ArtifactKind::chew;
      } else {
        throw Error(ErrorCode::config, "artifact kind must be blink or chew");
      }
      ScriptedArtifact art = make_artifact(k, a.at("time_s").get<double>());
      art.amplitude_uv = a.value("amplitude_uv", art.amplitude_uv);
      art.duration_s = a.value("duration_s", art.duration_s);
      if (a.contains("channels")) {
        art.channels.clear();
        for (const auto& c : a.at("channels")) art.channels.push_back(detail::parse_channel(c));
      }
      s.artifacts.push_back(std::move(art));
    }
    if (j.contains("impedance_ohms")) {
      const auto& z = j.at("impedance_ohms");
      if (!z.is_array() || z.size() != kChannels) throw Error(ErrorCode::config, "impedance_ohms needs 8 entries");
      for (std::size_t i = 0; i < kChannels; ++i) s.impedance_ohms[i] = z[i].get<double>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::parse, std::string("scenario: ") + e.what());
  }
  validate(s);
}

inline Scenario load_scenario(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::io, "cannot open scenario file " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::parse, path + ": " + e.what());
  }
  return j.get<Scenario>();
}

// ---------------------------------------------------------------------------
// Waveforms

/// Alpha spatial weighting: parieto-occipital sites carry the full rhythm.
inline double alpha_weight(std::size_t channel) {
  return (channel == site::T5 || channel == site::Pz || channel == site::T6) ? 1.0 : 0.3;
}

/// Chewing EMG couples most strongly into temporal sites.
inline double chew_weight(std::size_t channel) {
  return (channel == site::F7 || channel == site::F8 || channel == site::T5 || channel == site::T6) ? 1.0 : 0.6;
}

/// Biphasic blink: positive half-sine over the first 60% of the duration,
/// then a negative half-sine of 30% amplitude.
inline double blink_template(double t, double amplitude, double duration) {
  if (t < 0 || t >= duration) return 0.0;
  const double split = 0.6 * duration;
  if (t < split) return amplitude * std::sin(std::numbers::pi * t / split);
  return -0.3 * amplitude * std::sin(std::numbers::pi * (t - split) / (duration - split));
}

/// 4 Hz train of Hann-windowed 25 Hz bursts, each 100 ms long.
inline double chew_template(double t, double amplitude, double duration) {
  if (t < 0 || t >= duration) return 0.0;
  constexpr double period = 0.25;
  constexpr double burst = 0.1;
  const double tb = std::fmod(t, period);
  if (tb >= burst) return 0.0;
  const double w = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * tb / burst);
  return amplitude * w * std::sin(2.0 * std::numbers::pi * 25.0 * tb);
}

// ---------------------------------------------------------------------------
// Noise

namespace detail {
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

inline std::uint64_t stream_seed(std::uint64_t seed, std::size_t channel, std::uint64_t component) {
  return splitmix64(seed ^ splitmix64(channel * 0x100 + component));
}
}  // namespace detail

/// 1/f shaping filter (Kellet's six-pole approximation, accurate to
/// +-0.05 dB above ~2e-4 fs) driven by unit-variance Gaussian noise.
class PinkNoiseGenerator {
 public:
  explicit PinkNoiseGenerator(std::uint64_t seed) : rng_(seed) {}

  double next() { return shape(normal_(rng_)) / unit_rms(); }

  /// RMS of the shaping filter's output for unit-variance white input.
  static double unit_rms() {
    static const double rms = [] {
      PinkNoiseGenerator g(0);
      double energy = 0.0;
      for (int n = 0; n < 200000; ++n) {
        const double h = g.shape(n == 0 ? 1.0 : 0.0);
        energy += h * h;
      }
      return std::sqrt(energy);
    }();
    return rms;
  }

 private:
  double shape(double white) {
    b_[0] = 0.99886 * b_[0] + white * 0.0555179;
    b_[1] = 0.99332 * b_[1] + white * 0.0750759;
    b_[2] = 0.96900 * b_[2] + white * 0.1538520;
    b_[3] = 0.86650 * b_[3] + white * 0.3104856;
    b_[4] = 0.55000 * b_[4] + white * 0.5329522;
    b_[5] = -0.7616 * b_[5] - white * 0.0168980;
    const double pink = b_[0] + b_[1] + b_[2] + b_[3] + b_[4] + b_[5] + b_[6] + white * 0.5362;
    b_[6] = white * 0.115926;
    return pink;
  }

  std::mt19937_64 rng_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::array<double, 7> b_{};
};

/// `n` samples of zero-mean 1/f noise scaled to exactly `rms`. The shape is
/// defined relative to fs, so `fs` only documents the intended rate.
inline std::vector<double> pink_noise(std::uint64_t seed, std::size_t n, double fs, double rms = 1.0) {
  (void)fs;
  if (n == 0) throw Error(ErrorCode::size, "pink_noise needs n > 0");
  std::vector<double> out(n, 0.0);
  if (rms == 0.0) return out;
  PinkNoiseGenerator gen(seed);
  double mean = 0.0;
  for (auto& v : out) {
    v = gen.next();
    mean += v;
  }
  mean /= static_cast<double>(n);
  double ms = 0.0;
  for (auto& v : out) {
    v -= mean;
    ms += v * v;
  }
  const double scale = ms > 0 ? rms / std::sqrt(ms / static_cast<double>(n)) : 0.0;
  for (auto& v : out) v *= scale;
  return out;
}

// ---------------------------------------------------------------------------
// Synthesis

/// Live scenario steering (console buttons, control plane).
struct Steer {
  std::optional<bool> eyes_closed;
  std::optional<ArtifactKind> fire;
  double alpha_amplitude_uv = 50.0;
  double alpha_freq_hz = 10.0;
};

/// Sequential 8-channel generator for a scenario. Noise streams are seeded
/// per channel and component, so output depends only on (scenario, fs).
class Synthesizer {
 public:
  Synthesizer(Scenario scenario, double fs) : scenario_(std::move(scenario)), fs_(fs) {
    validate(scenario_);
    if (!(fs > 0)) throw Error(ErrorCode::config, "sample rate must be positive");
    for (std::size_t c = 0; c < kChannels; ++c) {
      pink_.emplace_back(detail::stream_seed(scenario_.seed, c, 1));
      white_rng_.emplace_back(detail::stream_seed(scenario_.seed, c, 2));
    }
  }

  const Scenario& scenario() const noexcept { return scenario_; }
  double sample_rate() const noexcept { return fs_; }
  std::uint64_t index() const noexcept { return index_; }

  /// True once a bounded scenario has produced all of its samples.
  bool exhausted() const noexcept {
    return scenario_.duration_s > 0 &&
           index_ >= static_cast<std::uint64_t>(std::llround(scenario_.duration_s * fs_));
  }

  /// Noise-free part of the signal (alpha, mains, artifacts) at any index.
  double deterministic(std::size_t channel, std::uint64_t sample_index) const {
    const double t = static_cast<double>(sample_index) / fs_;
    double v = 0.0;
    for (const auto& a : scenario_.alpha_timeline) {
      if (t >= a.start_s && t < a.end_s) {
        v += alpha_weight(channel) * a.amplitude_uv * std::sin(2.0 * std::numbers::pi * a.freq_hz * t);
      }
    }
    if (scenario_.noise.mains_hz != 0) {
      v += scenario_.noise.mains_amplitude_uv * std::sin(2.0 * std::numbers::pi * scenario_.noise.mains_hz * t);
    }
    for (const auto& a : scenario_.artifacts) {
      const double dt = t - a.time_s;
      if (dt < 0 || dt >= a.duration_s) continue;
      if (std::find(a.channels.begin(), a.channels.end(), channel) == a.channels.end()) continue;
      if (a.kind == ArtifactKind::blink) {
        v += blink_template(dt, a.amplitude_uv, a.duration_s);
      } else {
        v += chew_weight(channel) * chew_template(dt, a.amplitude_uv, a.duration_s);
      }
    }
    return v;
  }

  /// Microvolts on all channels for the current index, then advances.
  std::array<double, kChannels> next() {
    std::array<double, kChannels> out{};
    const auto& n = scenario_.noise;
    for (std::size_t c = 0; c < kChannels; ++c) {
      double v = deterministic(c, index_);
      // Noise streams always advance so toggling one component never
      // shifts another.
      const double pink = pink_[c].next();
      const double white = normal_(white_rng_[c]);
      v += n.pink_rms_uv * pink + n.white_rms_uv * white;
      out[c] = v;
    }
    ++index_;
    return out;
  }

  void steer(const Steer& s) {
    const double now = static_cast<double>(index_) / fs_;
    if (s.eyes_closed) {
      if (*s.eyes_closed) {
        bool open_already = false;
        for (const auto& a : scenario_.alpha_timeline) open_already |= (now >= a.start_s && now < a.end_s);
        if (!open_already) {
          const double end = scenario_.duration_s > 0 ? scenario_.duration_s : std::numeric_limits<double>::infinity();
          scenario_.alpha_timeline.push_back({now, end, s.alpha_amplitude_uv, s.alpha_freq_hz});
        }
      } else {
        for (auto& a : scenario_.alpha_timeline) {
          if (now >= a.start_s && now < a.end_s) a.end_s = now;
        }
      }
    }
    if (s.fire) scenario_.artifacts.push_back(make_artifact(*s.fire, now));
  }

  bool eyes_closed() const {
    const double now = static_cast<double>(index_) / fs_;
    for (const auto& a : scenario_.alpha_timeline) {
      if (now >= a.start_s && now < a.end_s) return true;
    }
    return false;
  }

 private:
  Scenario scenario_;
  double fs_;
  std::uint64_t index_ = 0;
  std::vector<PinkNoiseGenerator> pink_;
  std::vector<std::mt19937_64> white_rng_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

/// Microvolts the scenario puts on `channel` at `sample_index`.
/// Noise is sequential, so noisy scenarios are replayed from index 0.
inline double synthesize_microvolts(const Scenario& scenario, std::size_t channel, std::uint64_t sample_index,
                                    double fs) {
  if (channel >= kChannels) throw Error(ErrorCode::range, "channel out of range");
  Synthesizer synth(scenario, fs);
  const auto& n = scenario.noise;
  if (n.pink_rms_uv == 0.0 && n.white_rms_uv == 0.0) return synth.deterministic(channel, sample_index);
  std::array<double, kChannels> v{};
  for (std::uint64_t i = 0; i <= sample_index; ++i) v = synth.next();
  return v[channel];
}

// ---------------------------------------------------------------------------
// Device

/// Recorded SPI traffic: '>' host to device, '<' device to host.
class ByteTrace {
 public:
  void host(std::span<const std::uint8_t> bytes) { add('>', bytes); }
  void device(std::span<const std::uint8_t> bytes) { add('<', bytes); }

  const std::string& text() const noexcept { return text_; }

 private:
  void add(char dir, std::span<const std::uint8_t> bytes) {
    static constexpr char hex[] = "0123456789ABCDEF";
    text_.push_back(dir);
    for (auto b : bytes) {
      text_.push_back(' ');
      text_.push_back(hex[b >> 4]);
      text_.push_back(hex[b & 0x0F]);
    }
    text_.push_back('\n');
  }

  std::string text_;
};

inline double leadoff_current_amps(std::uint8_t ilead_code) {
  static constexpr std::array<double, 4> currents{6e-9, 24e-9, 6e-6, 24e-6};
  return currents[ilead_code & 0x03];
}

/// Virtual ADS1299 board. Power-up and RESET leave it awake, stopped and in
/// SDATAC mode, so registers can be written immediately.
class EmulatedDevice final : public DeviceTransport {
 public:
  explicit EmulatedDevice(Scenario scenario, double vref = 4.5)
      : scenario_(std::move(scenario)), vref_(vref), synth_(scenario_, 250.0) {
    validate(scenario_);
  }

  std::vector<std::uint8_t> transfer(std::span<const std::uint8_t> mosi) override {
    if (trace_) trace_->host(mosi);
    std::vector<std::uint8_t> response;
    std::size_t pos = 0;
    while (pos < mosi.size()) {
      DeviceCommand cmd;
      const std::size_t used = parse_command(mosi.subspan(pos), cmd);
      if (used == 0) throw Error(ErrorCode::framing, "truncated command");
      pos += used;
      execute(cmd, response);
    }
    if (trace_ && !response.empty()) trace_->device(response);
    return response;
  }

  std::optional<FrameBytes> read_frame() override {
    if (standby_ || !converting_ || !continuous_ || synth_.exhausted()) return std::nullopt;
    FrameBytes bytes = encode_frame(convert());
    if (trace_) trace_->device(bytes);
    return bytes;
  }

  void steer(const Steer& s) { synth_.steer(s); }
  bool eyes_closed() const { return synth_.eyes_closed(); }

  void attach_trace(ByteTrace* trace) noexcept { trace_ = trace; }

  bool converting() const noexcept { return converting_; }
  bool continuous() const noexcept { return continuous_; }
  bool standby() const noexcept { return standby_; }
  bool exhausted() const noexcept { return synth_.exhausted(); }
  std::uint64_t sample_index() const noexcept { return synth_.index(); }
  const RegisterMap& registers() const noexcept { return regs_; }
  const Scenario& scenario() const noexcept { return synth_.scenario(); }

  int sample_rate() const {
    switch (regs_.read(reg::CONFIG1) & 0x07) {
      case 0: return 16000;
      case 1: return 8000;
      case 2: return 4000;
      case 3: return 2000;
      case 4: return 1000;
      case 5: return 500;
      case 6: return 250;
      default: throw Error(ErrorCode::config, "reserved data-rate code");
    }
  }

  /// Impedance above which the lead-off comparator reports an open electrode.
  double leadoff_detect_ohms = 200e3;

 private:
  void require(bool ok, const char* what) const {
    if (!ok) throw Error(ErrorCode::protocol_state, what);
  }

  void execute(const DeviceCommand& cmd, std::vector<std::uint8_t>& response) {
    if (standby_ && cmd.op != Opcode::wakeup && cmd.op != Opcode::reset) {
      throw Error(ErrorCode::protocol_state, std::string(to_string(cmd.op)) + " while in standby");
    }
    switch (cmd.op) {
      case Opcode::wakeup:
        standby_ = false;
        break;
      case Opcode::standby:
        require(!converting_, "STANDBY while converting");
        standby_ = true;
        break;
      case Opcode::reset:
        regs_.reset();
        standby_ = false;
        converting_ = false;
        continuous_ = false;
        break;
      case Opcode::start:
        require(!converting_, "START while already converting");
        converting_ = true;
        // Rate is latched at START; changing CONFIG1 mid-run is ignored.
        if (synth_.index() == 0 && synth_.sample_rate() != sample_rate()) {
          synth_ = Synthesizer(scenario_, sample_rate());
        }
        break;
      case Opcode::stop:
        require(converting_, "STOP while not converting");
        converting_ = false;
        break;
      case Opcode::rdatac:
        require(!continuous_, "RDATAC while already in RDATAC");
        continuous_ = true;
        break;
      case Opcode::sdatac:
        require(continuous_, "SDATAC while not in RDATAC");
        continuous_ = false;
        break;
      case Opcode::rdata: {
        require(!continuous_, "RDATA in RDATAC mode");
        require(converting_, "RDATA while not converting");
        require(!synth_.exhausted(), "RDATA past end of scenario");
        const FrameBytes bytes = encode_frame(convert());
        response.insert(response.end(), bytes.begin(), bytes.end());
        break;
      }
      case Opcode::rreg:
        require(!continuous_, "RREG in RDATAC mode");
        for (std::uint8_t i = 0; i < cmd.count; ++i) {
          response.push_back(regs_.read(static_cast<std::uint8_t>(cmd.address + i)));
        }
        break;
      case Opcode::wreg:
        require(!continuous_, "WREG in RDATAC mode");
        for (std::uint8_t i = 0; i < cmd.count; ++i) {
          regs_.write(static_cast<std::uint8_t>(cmd.address + i), cmd.data[i]);
        }
        break;
    }
  }

  SampleFrame convert() {
    const std::uint64_t idx = synth_.index();
    const auto uv = synth_.next();
    const std::uint8_t loff = regs_.read(reg::LOFF);
    const std::uint8_t sensp = regs_.read(reg::LOFF_SENSP);
    const double current = leadoff_current_amps((loff >> 2) & 0x03);
    const std::uint8_t flead = loff & 0x03;
    const double f_lo = flead == 1 ? 7.8 : flead == 2 ? 31.2 : 0.0;
    const double t = static_cast<double>(idx) / synth_.sample_rate();

    SampleFrame f;
    f.seq = idx;
    std::uint8_t stat_p = 0;
    for (std::size_t c = 0; c < kChannels; ++c) {
      const std::uint8_t chset = regs_.read(static_cast<std::uint8_t>(reg::CH1SET + c));
      const bool powered = (chset & 0x80) == 0;
      const auto mux = static_cast<InputMux>(chset & 0x07);
      const int gain = kGains[std::min<std::size_t>((chset >> 4) & 0x07, kGains.size() - 1)];
      double v = 0.0;
      if (powered && mux == InputMux::normal) {
        v = uv[c];
        const bool sensing = (sensp >> c) & 1u;
        if (sensing && f_lo > 0.0) {
          // Drive current taken as peak-to-peak: V_pp = Z * I.
          const double vpp_uv = scenario_.impedance_ohms[c] * current * 1e6;
          v += 0.5 * vpp_uv * std::sin(2.0 * std::numbers::pi * f_lo * t);
        }
        if (sensing && scenario_.impedance_ohms[c] > leadoff_detect_ohms) stat_p |= static_cast<std::uint8_t>(1u << c);
      }
      f.raw[c] = powered ? microvolts_to_raw(v, gain, vref_) : 0;
    }
    regs_.set_internal(reg::LOFF_STATP, stat_p);
    const std::uint8_t gpio_data = static_cast<std::uint8_t>(regs_.read(reg::GPIO) >> 4);
    f.status = make_status(stat_p, 0, gpio_data);
    return f;
  }

  Scenario scenario_;
  double vref_;
  Synthesizer synth_;
  RegisterMap regs_{};
  ByteTrace* trace_ = nullptr;
  bool standby_ = false;
  bool converting_ = false;
  bool continuous_ = false;
};

}  // namespace jneeg
