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

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "jneeg/protocol.hpp"

namespace jneeg {

/// Host side of the SPI link. An emulator and a real SPI transport both
/// implement this; the acquisition path only talks to this interface.
class DeviceTransport {
 public:
  virtual ~DeviceTransport() = default;

  /// Clocks out command bytes and returns whatever the device shifted back
  /// (register contents for RREG, one frame for RDATA, otherwise empty).
  virtual std::vector<std::uint8_t> transfer(std::span<const std::uint8_t> mosi) = 0;

  /// Next conversion while in continuous-read mode, nullopt when none is
  /// available (stopped, SDATAC, or the source has ended).
  virtual std::optional<FrameBytes> read_frame() = 0;
};

/// Anything that yields decoded frames at a known configuration: a live
/// device through AdsDriver, or a recording being replayed.
class FrameSource {
 public:
  virtual ~FrameSource() = default;
  virtual std::optional<SampleFrame> next_frame() = 0;
  virtual const DeviceConfig& config() const = 0;
};

/// Minimal ADS1299 host driver: configuration, start/stop, frame reads.
class AdsDriver final : public FrameSource {
 public:
  explicit AdsDriver(DeviceTransport& transport) : transport_(transport) {}

  void send(const DeviceCommand& cmd) {
    const auto bytes = encode_command(cmd);
    last_response_ = transport_.transfer(bytes);
  }

  void reset() {
    send(DeviceCommand::simple(Opcode::reset));
    streaming_ = false;
  }

  /// Writes CONFIG1..CONFIG4 in a single WREG burst.
  void configure(const DeviceConfig& cfg) {
    if (streaming_) throw Error(ErrorCode::protocol_state, "configure while streaming");
    const RegisterMap map = to_registers(cfg);
    std::vector<std::uint8_t> data(map.values().begin() + 1, map.values().end());
    const auto count = static_cast<std::uint8_t>(data.size());
    send(DeviceCommand::wreg(reg::CONFIG1, count, std::move(data)));
    config_ = cfg;
  }

  RegisterMap read_registers() {
    if (streaming_) throw Error(ErrorCode::protocol_state, "register read while streaming");
    send(DeviceCommand::rreg(0, kRegisterCount));
    if (last_response_.size() != kRegisterCount) throw Error(ErrorCode::framing, "short RREG response");
    RegisterMap map;
    for (std::uint8_t a = 0; a < kRegisterCount; ++a) map.set_internal(a, last_response_[a]);
    return map;
  }

  void start() {
    send(DeviceCommand::simple(Opcode::start));
    send(DeviceCommand::simple(Opcode::rdatac));
    streaming_ = true;
  }

  void stop() {
    if (!streaming_) return;
    send(DeviceCommand::simple(Opcode::sdatac));
    send(DeviceCommand::simple(Opcode::stop));
    streaming_ = false;
  }

  std::optional<SampleFrame> next_frame() override {
    while (pending_.empty()) {
      auto bytes = transport_.read_frame();
      if (!bytes) {
        decoder_.flush(pending_);
        if (pending_.empty()) return std::nullopt;
        break;
      }
      decoder_.feed(*bytes, pending_);
    }
    SampleFrame f = pending_.front();
    pending_.erase(pending_.begin());
    return f;
  }

  const DeviceConfig& config() const override { return config_; }
  const FrameDecoder& decoder() const noexcept { return decoder_; }
  bool streaming() const noexcept { return streaming_; }

 private:
  DeviceTransport& transport_;
  DeviceConfig config_{};
  FrameDecoder decoder_{};
  std::vector<SampleFrame> pending_;
  std::vector<std::uint8_t> last_response_;
  bool streaming_ = false;
};

}  // namespace jneeg
