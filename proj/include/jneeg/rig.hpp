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

// The acquisition service: owns the frame source, runs decode -> calibrate
// -> filter -> detect -> record -> fan-out on one producer thread, and takes
// control requests through a command queue.
//
// Modes: idle <-> streaming, idle <-> impedance, idle <-> replay.

#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <future>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "jneeg/detect.hpp"
#include "jneeg/device.hpp"
#include "jneeg/dsp.hpp"
#include "jneeg/emulator.hpp"
#include "jneeg/impedance.hpp"
#include "jneeg/session.hpp"
#include "jneeg/wire.hpp"

namespace jneeg {

enum class RigMode { idle, streaming, impedance, replay };

inline std::string_view to_string(RigMode m) {
  switch (m) {
    case RigMode::idle: return "idle";
    case RigMode::streaming: return "streaming";
    case RigMode::impedance: return "impedance";
    case RigMode::replay: return "replay";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Subscribers

using Payload = std::shared_ptr<const std::vector<std::uint8_t>>;

/// Bounded per-subscriber queue. When full, the oldest message is dropped
/// and counted; the producer never waits for a consumer.
class Subscriber {
 public:
  Subscriber(std::uint64_t id, std::size_t capacity) : id_(id), capacity_(std::max<std::size_t>(capacity, 1)) {}

  void push(Payload p) {
    {
      std::lock_guard lk(mu_);
      if (closed_) return;
      if (queue_.size() == capacity_) {
        queue_.pop_front();
        ++dropped_;
      }
      queue_.push_back(std::move(p));
    }
    cv_.notify_one();
  }

  /// Waits up to `timeout` for a message; nullopt on timeout or close.
  std::optional<Payload> pop(std::chrono::milliseconds timeout) {
    std::unique_lock lk(mu_);
    cv_.wait_for(lk, timeout, [&] { return closed_ || !queue_.empty(); });
    if (queue_.empty()) return std::nullopt;
    Payload p = std::move(queue_.front());
    queue_.pop_front();
    return p;
  }

  void close() {
    {
      std::lock_guard lk(mu_);
      closed_ = true;
    }
    cv_.notify_all();
  }

  std::uint64_t id() const noexcept { return id_; }
  std::uint64_t dropped() const {
    std::lock_guard lk(mu_);
    return dropped_;
  }
  std::size_t queued() const {
    std::lock_guard lk(mu_);
    return queue_.size();
  }
  bool closed() const {
    std::lock_guard lk(mu_);
    return closed_;
  }

 private:
  std::uint64_t id_;
  std::size_t capacity_;
  mutable std::mutex mu_;
  std::condition_variable cv_;
  std::deque<Payload> queue_;
  std::uint64_t dropped_ = 0;
  bool closed_ = false;
};

// ---------------------------------------------------------------------------
// Options and statistics

struct RigOptions {
  std::size_t chunk_samples = 25;
  /// 0 runs as fast as possible; 1 paces to the sample clock.
  double speed = 0.0;
  std::size_t queue_capacity = 256;
  /// Stop automatically after this many samples (0 = no limit).
  std::uint64_t max_samples = 0;

  std::pair<double, double> display_band{1.0, 40.0};
  std::pair<double, double> alpha_band{8.0, 12.0};
  std::size_t alpha_channel = site::Pz;
  double alpha_window_s = 1.0;
  /// Eyes-open calibration span from the start of each run; the first
  /// window is skipped while the band filter settles.
  double alpha_baseline_s = 8.0;
  double alpha_ratio = kDefaultAlphaRatio;

  double threshold_uv = kDefaultThresholdUv;
  double refractory_s = kDefaultRefractoryS;
  ClassifierConfig classifier{};

  double impedance_window_s = 1.0;
  QualityTiers tiers{};

  /// Session directory; empty disables recording.
  std::filesystem::path session_dir;
  SessionMetadata metadata{};
  /// Status message to subscribers every this many seconds of samples.
  double status_interval_s = 1.0;
};

/// Per-chunk latency from frame availability to the last enqueue, in ms.
class LatencyStats {
 public:
  void add(double ms) {
    if (samples_.size() < kMax) samples_.push_back(ms);
    max_ = std::max(max_, ms);
    ++count_;
  }
  double quantile(double q) const {
    if (samples_.empty()) return 0.0;
    std::vector<double> s = samples_;
    const auto k = static_cast<std::size_t>(std::min<double>(q * static_cast<double>(s.size()), double(s.size() - 1)));
    std::nth_element(s.begin(), s.begin() + static_cast<std::ptrdiff_t>(k), s.end());
    return s[k];
  }
  double max() const noexcept { return max_; }
  std::uint64_t count() const noexcept { return count_; }
  void clear() {
    samples_.clear();
    max_ = 0;
    count_ = 0;
  }

 private:
  static constexpr std::size_t kMax = 1 << 20;
  std::vector<double> samples_;
  double max_ = 0;
  std::uint64_t count_ = 0;
};

// ---------------------------------------------------------------------------
// Rig

class Rig {
 public:
  using Clock = std::chrono::steady_clock;

  /// Live device behind a transport. `emulator` is the same object when the
  /// transport is an EmulatedDevice, enabling scenario steering.
  Rig(std::unique_ptr<DeviceTransport> transport, EmulatedDevice* emulator, DeviceConfig cfg, RigOptions opt)
      : opt_(std::move(opt)), transport_(std::move(transport)), emulator_(emulator), cfg_(cfg) {
    validate(cfg_);
    driver_.emplace(*transport_);
    driver_->reset();
    init();
  }

  /// Replays a recording; its stored config is used.
  Rig(std::unique_ptr<ReplaySource> replay, RigOptions opt) : opt_(std::move(opt)), replay_(std::move(replay)) {
    cfg_ = replay_->config();
    init();
  }

  static std::unique_ptr<Rig> emulated(const Scenario& scenario, DeviceConfig cfg = {}, RigOptions opt = {}) {
    auto dev = std::make_unique<EmulatedDevice>(scenario, cfg.vref);
    EmulatedDevice* raw = dev.get();
    return std::make_unique<Rig>(std::move(dev), raw, cfg, std::move(opt));
  }

  static std::unique_ptr<Rig> replaying(const std::filesystem::path& path, RigOptions opt = {}) {
    return std::make_unique<Rig>(std::make_unique<ReplaySource>(path), std::move(opt));
  }

  Rig(const Rig&) = delete;
  Rig& operator=(const Rig&) = delete;

  ~Rig() { shutdown(); }

  // -- threading ------------------------------------------------------------

  void start_thread() {
    if (thread_.joinable()) return;
    running_ = true;
    thread_ = std::thread([this] { run(); });
  }

  void shutdown() {
    if (thread_.joinable()) {
      {
        std::lock_guard lk(cmd_mu_);
        running_ = false;
      }
      cmd_cv_.notify_all();
      thread_.join();
    }
    // Anything still queued gets an answer rather than a broken promise.
    drain_commands();
    if (mode_ != RigMode::idle) finish_run("shutdown", std::nullopt);
    std::lock_guard lk(sub_mu_);
    for (auto& s : subs_) s->close();
  }

  /// Sends a control request and waits for its response. Safe from any
  /// thread; without a running producer thread it executes inline.
  nlohmann::json control(const nlohmann::json& msg) {
    if (!thread_.joinable()) {
      std::lock_guard inline_lk(inline_mu_);
      return dispatch(msg);
    }
    Command cmd{msg, {}};
    auto fut = cmd.reply.get_future();
    {
      std::lock_guard lk(cmd_mu_);
      commands_.push_back(std::move(cmd));
    }
    cmd_cv_.notify_all();
    return fut.get();
  }

  /// Text form used by the socket layer; malformed JSON becomes a parse
  /// error response.
  std::string control_text(std::string_view text) {
    nlohmann::json msg;
    try {
      msg = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
      return error_response("", ErrorCode::parse, e.what()).dump();
    }
    return control(msg).dump();
  }

  std::shared_ptr<Subscriber> subscribe(std::size_t capacity = 0) {
    std::lock_guard lk(sub_mu_);
    auto s = std::make_shared<Subscriber>(next_sub_id_++, capacity ? capacity : opt_.queue_capacity);
    subs_.push_back(s);
    return s;
  }

  void unsubscribe(const std::shared_ptr<Subscriber>& s) {
    s->close();
    std::lock_guard lk(sub_mu_);
    subs_.erase(std::remove(subs_.begin(), subs_.end(), s), subs_.end());
  }

  /// Waits until the rig is back in idle (run finished or stopped).
  bool wait_idle(std::chrono::milliseconds timeout) {
    std::unique_lock lk(idle_mu_);
    return idle_cv_.wait_for(lk, timeout, [&] { return mode_.load() == RigMode::idle; });
  }

  /// Runs the producer inline until idle (no thread). Used by the CLI in
  /// as-fast-as-possible mode and by deterministic tests.
  void run_until_idle() {
    std::lock_guard inline_lk(inline_mu_);
    while (mode_ != RigMode::idle) step();
  }

  RigMode mode() const noexcept { return mode_.load(); }
  const RigOptions& options() const noexcept { return opt_; }
  bool is_emulated() const noexcept { return emulator_ != nullptr; }
  bool is_replay() const noexcept { return replay_ != nullptr; }

  // Counters; read after the run or via status for live values.
  std::uint64_t samples_processed() const noexcept { return samples_total_.load(); }
  double busy_seconds() const noexcept { return busy_ns_.load() * 1e-9; }
  const std::vector<ArtifactEvent>& events() const noexcept { return events_; }
  const std::vector<AlphaStateWindow>& alpha_windows() const noexcept { return alpha_windows_; }
  const std::vector<ImpedanceReading>& impedance() const noexcept { return readings_; }
  LatencyStats latency() const {
    std::lock_guard lk(stats_mu_);
    return latency_;
  }
  std::optional<std::string> last_error() const {
    std::lock_guard lk(stats_mu_);
    return last_error_;
  }

 private:
  struct Command {
    nlohmann::json msg;
    std::promise<nlohmann::json> reply;
  };

  void init() {
    started_at_ = Clock::now();
    display_ = FilterState(bandpass_spec(opt_.display_band.first, opt_.display_band.second, cfg_.sample_rate),
                           kChannels, FilterStart::steady);
  }

  // -- producer thread ------------------------------------------------------

  void run() {
    while (true) {
      {
        std::unique_lock lk(cmd_mu_);
        if (mode_ == RigMode::idle) {
          cmd_cv_.wait_for(lk, std::chrono::milliseconds(50), [&] { return !running_ || !commands_.empty(); });
        }
        if (!running_) return;
      }
      step();
    }
  }

  void drain_commands() {
    std::deque<Command> batch;
    {
      std::lock_guard lk(cmd_mu_);
      batch.swap(commands_);
    }
    for (auto& c : batch) c.reply.set_value(dispatch(c.msg));
  }

  /// One producer iteration: pending commands, then at most one chunk.
  void step() {
    drain_commands();
    switch (mode_.load()) {
      case RigMode::streaming:
      case RigMode::replay: stream_chunk(); break;
      case RigMode::impedance: impedance_chunk(); break;
      case RigMode::idle: break;
    }
  }

  // -- control --------------------------------------------------------------

  static nlohmann::json error_response(const std::string& cmd, ErrorCode code, const std::string& what) {
    return {{"ok", false}, {"cmd", cmd}, {"error", {{"code", to_string(code)}, {"message", what}}}};
  }

  nlohmann::json dispatch(const nlohmann::json& msg) {
    std::string cmd;
    try {
      if (!msg.is_object() || !msg.contains("cmd") || !msg.at("cmd").is_string()) {
        throw Error(ErrorCode::parse, "control message needs a string 'cmd' field");
      }
      cmd = msg.at("cmd").get<std::string>();
      nlohmann::json r;
      if (cmd == "status") {
        r = status_json();
      } else if (cmd == "configure") {
        r = do_configure(msg);
      } else if (cmd == "start") {
        r = do_start();
      } else if (cmd == "stop") {
        r = do_stop();
      } else if (cmd == "impedance") {
        r = do_impedance(msg);
      } else if (cmd == "mark") {
        r = do_mark(msg);
      } else if (cmd == "scenario_set") {
        r = do_scenario_set(msg);
      } else {
        throw Error(ErrorCode::parse, "unknown command '" + cmd + "'");
      }
      r["ok"] = true;
      r["cmd"] = cmd;
      return r;
    } catch (const Error& e) {
      return error_response(cmd, e.code(), e.what());
    } catch (const nlohmann::json::exception& e) {
      return error_response(cmd, ErrorCode::parse, e.what());
    }
  }

  void require_mode(RigMode want, const char* what) const {
    if (mode_ != want) {
      throw Error(ErrorCode::state, std::string(what) + " is not allowed while " + std::string(to_string(mode_)));
    }
  }

  nlohmann::json do_configure(const nlohmann::json& msg) {
    require_mode(RigMode::idle, "configure");
    if (replay_) throw Error(ErrorCode::state, "a replay uses the recorded configuration");
    DeviceConfig cfg = msg.at("config").get<DeviceConfig>();
    validate(cfg);
    cfg_ = cfg;
    init_display();
    return {{"config", cfg_}};
  }

  nlohmann::json do_start() {
    require_mode(RigMode::idle, "start");
    begin_run(replay_ ? RigMode::replay : RigMode::streaming);
    return {{"mode", to_string(mode_)}};
  }

  nlohmann::json do_stop() {
    if (mode_ != RigMode::streaming && mode_ != RigMode::replay) {
      throw Error(ErrorCode::state, "stop is not allowed while " + std::string(to_string(mode_)));
    }
    finish_run("stopped", std::nullopt);
    return {{"mode", to_string(mode_)}, {"samples", run_samples_}};
  }

  nlohmann::json do_impedance(const nlohmann::json& msg) {
    require_mode(RigMode::idle, "impedance");
    if (!driver_) throw Error(ErrorCode::state, "impedance needs a live device");
    std::uint8_t mask = 0;
    const auto& ch = msg.contains("channels") ? msg.at("channels") : nlohmann::json("all");
    if (ch.is_string() && ch.get<std::string>() == "all") {
      mask = 0xFF;
    } else {
      for (const auto& c : ch) {
        std::size_t idx = 0;
        if (c.is_number_integer()) {
          idx = c.get<std::size_t>();
        } else {
          auto found = channel_index(opt_.metadata.montage, c.get<std::string>());
          if (!found) throw Error(ErrorCode::config, "unknown channel '" + c.get<std::string>() + "'");
          idx = *found;
        }
        if (idx >= kChannels) throw Error(ErrorCode::range, "channel out of range");
        mask = static_cast<std::uint8_t>(mask | (1u << idx));
      }
    }
    if (mask == 0) throw Error(ErrorCode::config, "no channels selected");

    DeviceConfig icfg = cfg_;
    icfg.leadoff.channels = mask;
    if (icfg.leadoff.frequency == LeadoffFrequency::dc) icfg.leadoff.frequency = LeadoffFrequency::ac_31_2;
    driver_->stop();
    driver_->configure(icfg);
    driver_->start();
    imp_cfg_ = icfg;
    imp_buffer_ = SignalChunk{};
    imp_target_ = static_cast<std::size_t>(std::llround(opt_.impedance_window_s * icfg.sample_rate));
    set_mode(RigMode::impedance);
    pace_start_ = Clock::now();
    paced_samples_ = 0;
    // Measurement spans many loop iterations; when inline, finish it now.
    if (thread_.joinable()) {
      // Completion is signalled once the window has been captured.
      return {{"mode", "impedance"}, {"pending", true}};
    }
    while (mode_ == RigMode::impedance) impedance_chunk();
    if (!impedance_reply_.value("ok", false)) throw Error(ErrorCode::state, last_error().value_or("impedance failed"));
    return impedance_json();
  }

  nlohmann::json do_mark(const nlohmann::json& msg) {
    Marker m{next_index_, MarkerKind::user, msg.value("text", "")};
    if (msg.contains("kind")) m.kind = marker_kind_from_string(msg.at("kind").get<std::string>());
    emit_marker(m);
    return {{"marker", m}};
  }

  nlohmann::json do_scenario_set(const nlohmann::json& msg) {
    if (!emulator_) throw Error(ErrorCode::state, "scenario_set needs the emulator");
    Steer s;
    if (msg.contains("eyes_closed")) s.eyes_closed = msg.at("eyes_closed").get<bool>();
    if (msg.contains("fire")) {
      const auto k = msg.at("fire").get<std::string>();
      if (k == "blink") {
        s.fire = ArtifactKind::blink;
      } else if (k == "chew") {
        s.fire = ArtifactKind::chew;
      } else {
        throw Error(ErrorCode::config, "fire must be 'blink' or 'chew'");
      }
    }
    s.alpha_amplitude_uv = msg.value("alpha_amplitude_uv", s.alpha_amplitude_uv);
    s.alpha_freq_hz = msg.value("alpha_freq_hz", s.alpha_freq_hz);
    if (s.alpha_freq_hz < 8.0 || s.alpha_freq_hz > 12.0) throw Error(ErrorCode::config, "alpha_freq_hz must lie in [8, 12]");
    emulator_->steer(s);
    return {{"eyes_closed", emulator_->eyes_closed()}};
  }

  nlohmann::json impedance_json() const {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& r : readings_) {
      arr.push_back({{"channel", r.channel},
                     {"label", opt_.metadata.montage[r.channel]},
                     {"ohms", r.ohms},
                     {"frequency_hz", r.frequency_hz},
                     {"quality", to_string(r.quality)}});
    }
    return {{"readings", arr}};
  }

  nlohmann::json status_json() const {
    nlohmann::json subs = nlohmann::json::array();
    {
      std::lock_guard lk(sub_mu_);
      for (const auto& s : subs_) subs.push_back({{"id", s->id()}, {"dropped", s->dropped()}, {"queued", s->queued()}});
    }
    const auto lat = latency();
    nlohmann::json alpha = {{"baseline_uv2", alpha_baseline_ ? nlohmann::json(*alpha_baseline_) : nlohmann::json()},
                            {"power_uv2", nullptr},
                            {"state", nullptr}};
    if (!alpha_windows_.empty()) {
      alpha["power_uv2"] = alpha_windows_.back().power_uv2;
      alpha["state"] = to_string(alpha_windows_.back().state);
    }
    const auto err = last_error();
    return {{"mode", to_string(mode_)},
            {"source", emulator_ ? "emulator" : replay_ ? "replay" : "device"},
            {"config", cfg_},
            {"uptime_s", std::chrono::duration<double>(Clock::now() - started_at_).count()},
            {"samples", samples_total_.load()},
            {"run_samples", run_samples_},
            {"subscribers", subs},
            {"impedance", impedance_json()["readings"]},
            {"latency_ms", {{"p50", lat.quantile(0.5)}, {"p99", lat.quantile(0.99)}, {"max", lat.max()}}},
            {"alpha", alpha},
            {"eyes_closed", emulator_ ? nlohmann::json(emulator_->eyes_closed()) : nlohmann::json()},
            {"last_run", last_run_end_},
            {"error", err ? nlohmann::json(*err) : nlohmann::json()}};
  }

  // -- runs -----------------------------------------------------------------

  void set_mode(RigMode m) {
    {
      std::lock_guard lk(idle_mu_);
      mode_ = m;
    }
    idle_cv_.notify_all();
  }

  void init_display() {
    display_ = FilterState(bandpass_spec(opt_.display_band.first, opt_.display_band.second, cfg_.sample_rate),
                           kChannels, FilterStart::steady);
  }

  void begin_run(RigMode m) {
    {
      std::lock_guard lk(stats_mu_);
      last_error_.reset();
      latency_.clear();
    }
    const double fs = cfg_.sample_rate;
    init_display();
    alpha_.emplace(opt_.alpha_band, kChannels, fs, opt_.alpha_window_s);
    detectors_.clear();
    for (std::size_t c = 0; c < kChannels; ++c) {
      detectors_.emplace_back(c, fs, opt_.threshold_uv, opt_.refractory_s);
    }
    classifier_.emplace(fs, opt_.classifier);
    refractory_samples_ = static_cast<std::uint64_t>(std::llround(opt_.refractory_s * fs));
    events_.clear();
    alpha_windows_.clear();
    alpha_open_.clear();
    alpha_baseline_.reset();
    run_samples_ = 0;
    run_start_index_.reset();
    last_status_index_ = 0;

    if (driver_) {
      driver_->stop();
      driver_->configure(cfg_);
      driver_->start();
    }
    if (!opt_.session_dir.empty()) {
      SessionMetadata meta = opt_.metadata;
      if (replay_) {
        meta = replay_->recording().metadata;
      } else {
        meta.config = cfg_;
      }
      writer_.emplace(opt_.session_dir, meta);
    }
    set_mode(m);
    pace_start_ = Clock::now();
    paced_samples_ = 0;
    publish_status();
  }

  void finish_run(const std::string& how, std::optional<std::string> error) {
    if (classifier_ && mode_ != RigMode::impedance) {
      std::vector<ArtifactEvent> crossings;
      for (auto& d : detectors_) d.flush(crossings);
      std::stable_sort(crossings.begin(), crossings.end(),
                       [](const auto& a, const auto& b) { return a.onset < b.onset; });
      std::vector<ArtifactEvent> done;
      classifier_->push(crossings, done);
      classifier_->flush(done);
      for (auto& e : done) publish_event(e);
    }
    if (driver_) driver_->stop();
    if (writer_) {
      try {
        writer_->close();
      } catch (const Error& e) {
        if (!error) error = e.what();
      }
      writer_.reset();
    }
    {
      std::lock_guard lk(stats_mu_);
      last_error_ = error;
    }
    last_run_end_ = {{"ended", error ? "error" : how}, {"samples", run_samples_}};
    set_mode(RigMode::idle);
    publish_status();
  }

  void pace(std::size_t n) {
    if (opt_.speed <= 0) return;
    paced_samples_ += n;
    const auto due = pace_start_ + std::chrono::duration_cast<Clock::duration>(std::chrono::duration<double>(
                                       static_cast<double>(paced_samples_) / (cfg_.sample_rate * opt_.speed)));
    std::this_thread::sleep_until(due);
  }

  std::optional<SampleFrame> next_frame() {
    if (replay_) return replay_->next_frame();
    return driver_->next_frame();
  }

  /// Ends-of-stream that are part of the plan, as opposed to a device fault.
  std::optional<std::string> end_of_stream_error() const {
    if (replay_) return replay_->damage();
    if (emulator_ && emulator_->exhausted()) return std::nullopt;
    return std::string("device stream ended unexpectedly");
  }

  void stream_chunk() {
    std::size_t want = opt_.chunk_samples;
    if (opt_.max_samples) want = static_cast<std::size_t>(std::min<std::uint64_t>(want, opt_.max_samples - run_samples_));
    pace(want);

    std::vector<SampleFrame> frames;
    frames.reserve(want);
    bool ended = false;
    std::optional<std::string> fault;
    try {
      while (frames.size() < want) {
        auto f = next_frame();
        if (!f) {
          ended = true;
          break;
        }
        frames.push_back(*f);
      }
    } catch (const Error& e) {
      ended = true;
      fault = e.what();
    }
    const auto available = Clock::now();
    if (!frames.empty()) process(frames);
    if (!frames.empty()) {
      const auto done = Clock::now();
      const double ms = std::chrono::duration<double, std::milli>(done - available).count();
      std::lock_guard lk(stats_mu_);
      latency_.add(ms);
      busy_ns_ += std::chrono::duration_cast<std::chrono::nanoseconds>(done - available).count();
    }
    if (ended) {
      if (!fault) fault = end_of_stream_error();
      finish_run("completed", fault);
    } else if (opt_.max_samples && run_samples_ >= opt_.max_samples) {
      finish_run("completed", std::nullopt);
    }
  }

  void process(const std::vector<SampleFrame>& frames) {
    SignalChunk raw = calibrate(frames, cfg_);
    const std::uint64_t first = raw.start();
    if (!run_start_index_) run_start_index_ = first;
    next_index_ = first + raw.samples();

    if (writer_) {
      try {
        writer_->append(raw);
      } catch (const Error& e) {
        // The recorder is the one consumer that must not lose data; stop.
        writer_.reset();
        std::lock_guard lk(stats_mu_);
        last_error_ = e.what();
      }
    }

    SignalChunk filtered = filter_process(display_, raw);
    broadcast(wire::samples_message(filtered, 0));

    // Artifacts
    std::vector<ArtifactEvent> crossings;
    for (auto& d : detectors_) d.push(filtered.channel(d.channel()), first, crossings);
    std::stable_sort(crossings.begin(), crossings.end(), [](const auto& a, const auto& b) { return a.onset < b.onset; });
    std::vector<ArtifactEvent> done;
    classifier_->push(crossings, done);
    const std::uint64_t end = first + raw.samples();
    if (end > refractory_samples_) classifier_->advance(end - refractory_samples_, done);
    for (auto& e : done) publish_event(e);

    // Alpha
    std::vector<BandPowerTracker::Window> windows;
    alpha_->push(raw, windows);
    for (const auto& w : windows) handle_alpha_window(w);

    run_samples_ += raw.samples();
    samples_total_ += raw.samples();
    if (static_cast<double>(end - last_status_index_) >= opt_.status_interval_s * cfg_.sample_rate) {
      last_status_index_ = end;
      publish_status();
    }
  }

  void handle_alpha_window(const BandPowerTracker::Window& w) {
    const PowerWindow pw{w.start, w.end, w.power[opt_.alpha_channel]};
    const std::uint64_t t0 = *run_start_index_;
    const auto win = static_cast<std::uint64_t>(std::llround(opt_.alpha_window_s * cfg_.sample_rate));
    const auto span_end = t0 + static_cast<std::uint64_t>(std::llround(opt_.alpha_baseline_s * cfg_.sample_rate));
    nlohmann::json ev = {{"type", "alpha"},     {"start", pw.start},
                         {"end", pw.end},       {"channel", opt_.metadata.montage[opt_.alpha_channel]},
                         {"power_uv2", pw.power_uv2}, {"state", nullptr}};
    if (!alpha_baseline_) {
      alpha_open_.push_back(pw);
      if (pw.end >= span_end) {
        try {
          alpha_baseline_ = alpha_baseline(alpha_open_, t0 + win, span_end);
        } catch (const Error&) {
          alpha_baseline_ = 0.0;  // span shorter than two windows
        }
      }
    } else if (*alpha_baseline_ > 0) {
      const auto st = classify_alpha(std::span(&pw, 1), *alpha_baseline_, opt_.alpha_ratio).front();
      if (!alpha_windows_.empty() && alpha_windows_.back().state != st.state) {
        emit_marker({st.start, MarkerKind::state_change, std::string(to_string(st.state))});
      }
      alpha_windows_.push_back(st);
      ev["state"] = to_string(st.state);
    }
    broadcast(wire::json_message(wire::Kind::event, ev.dump(), pw.start, 0));
  }

  void publish_event(const ArtifactEvent& e) {
    events_.push_back(e);
    nlohmann::json chans = nlohmann::json::array();
    for (auto c : e.channels) chans.push_back(opt_.metadata.montage[c]);
    const nlohmann::json ev = {{"type", "artifact"},
                               {"kind", to_string(e.kind)},
                               {"onset", e.onset},
                               {"t_s", static_cast<double>(e.onset) / cfg_.sample_rate},
                               {"peak_uv", e.peak_uv},
                               {"channels", chans}};
    broadcast(wire::json_message(wire::Kind::event, ev.dump(), e.onset, 0));
    if (e.kind == ArtifactClass::blink) emit_marker({e.onset, MarkerKind::blink, ""});
    if (e.kind == ArtifactClass::chew) emit_marker({e.onset, MarkerKind::chew, ""});
  }

  void emit_marker(const Marker& m) {
    if (writer_) {
      try {
        writer_->add_marker(m);
      } catch (const Error& e) {
        std::lock_guard lk(stats_mu_);
        last_error_ = e.what();
      }
    }
    const nlohmann::json ev = {{"type", "marker"}, {"marker", m}};
    broadcast(wire::json_message(wire::Kind::event, ev.dump(), m.sample, 0));
  }

  void publish_status() { broadcast(wire::json_message(wire::Kind::status, status_json().dump(), next_index_, 0)); }

  void impedance_chunk() {
    const std::size_t want = std::min(opt_.chunk_samples, imp_target_ - imp_buffer_.samples());
    pace(want);
    std::vector<SampleFrame> frames;
    std::optional<std::string> fault;
    try {
      while (frames.size() < want) {
        auto f = driver_->next_frame();
        if (!f) break;
        frames.push_back(*f);
      }
    } catch (const Error& e) {
      fault = e.what();
    }
    if (!fault && frames.size() < want) fault = "device stream ended during impedance measurement";
    if (!frames.empty()) {
      imp_buffer_.append(calibrate(frames, imp_cfg_));
      next_index_ = imp_buffer_.start() + imp_buffer_.samples();
    }
    if (fault) {
      finish_impedance(nlohmann::json(error_response("impedance", ErrorCode::state, *fault)), fault);
      return;
    }
    if (imp_buffer_.samples() < imp_target_) return;

    readings_.clear();
    for (std::size_t c = 0; c < kChannels; ++c) {
      const LeadoffDrive drive = drive_for(imp_cfg_, c);
      if (!drive.active) continue;
      readings_.push_back(measure_impedance(imp_buffer_, c, drive, opt_.tiers));
    }
    auto body = impedance_json();
    broadcast(wire::json_message(wire::Kind::impedance, body.dump(), imp_buffer_.start(), 0));
    body["ok"] = true;
    body["cmd"] = "impedance";
    finish_impedance(body, std::nullopt);
  }

  void finish_impedance(const nlohmann::json& reply, std::optional<std::string> error) {
    driver_->stop();
    {
      std::lock_guard lk(stats_mu_);
      last_error_ = error;
    }
    last_run_end_ = {{"ended", error ? "error" : "impedance"}, {"samples", imp_buffer_.samples()}};
    set_mode(RigMode::idle);
    publish_status();
    impedance_reply_ = reply;
    notify_impedance_waiters();
  }

  void notify_impedance_waiters() {
    std::lock_guard lk(imp_mu_);
    ++imp_generation_;
    imp_cv_.notify_all();
  }

 public:
  /// Blocks until the next impedance measurement completes and returns its
  /// reply (readings or an error response).
  nlohmann::json measure_impedance_blocking(const nlohmann::json& request, std::chrono::milliseconds timeout) {
    std::uint64_t gen;
    {
      std::lock_guard lk(imp_mu_);
      gen = imp_generation_;
    }
    nlohmann::json first = control(request);
    if (!first.value("ok", false) || !first.value("pending", false)) return first;
    std::unique_lock lk(imp_mu_);
    if (!imp_cv_.wait_for(lk, timeout, [&] { return imp_generation_ != gen; })) {
      return error_response("impedance", ErrorCode::state, "impedance measurement timed out");
    }
    return impedance_reply_;
  }

 private:
  void broadcast(wire::Message m) {
    std::lock_guard lk(sub_mu_);
    if (subs_.empty()) return;
    m.sequence = broadcast_seq_++;
    auto payload = std::make_shared<const std::vector<std::uint8_t>>(wire::encode(m));
    for (auto& s : subs_) s->push(payload);
  }

  RigOptions opt_;
  std::unique_ptr<DeviceTransport> transport_;
  EmulatedDevice* emulator_ = nullptr;
  std::optional<AdsDriver> driver_;
  std::unique_ptr<ReplaySource> replay_;
  DeviceConfig cfg_{};

  // Producer-owned pipeline state.
  FilterState display_;
  std::optional<BandPowerTracker> alpha_;
  std::vector<ArtifactDetector> detectors_;
  std::optional<ArtifactClassifier> classifier_;
  std::optional<SessionWriter> writer_;
  std::uint64_t refractory_samples_ = 0;
  std::vector<ArtifactEvent> events_;
  std::vector<PowerWindow> alpha_open_;
  std::vector<AlphaStateWindow> alpha_windows_;
  std::optional<double> alpha_baseline_;
  std::optional<std::uint64_t> run_start_index_;
  std::uint64_t next_index_ = 0;
  std::uint64_t run_samples_ = 0;
  std::uint64_t last_status_index_ = 0;
  nlohmann::json last_run_end_;

  DeviceConfig imp_cfg_{};
  SignalChunk imp_buffer_;
  std::size_t imp_target_ = 0;
  std::vector<ImpedanceReading> readings_;
  nlohmann::json impedance_reply_;
  std::mutex imp_mu_;
  std::condition_variable imp_cv_;
  std::uint64_t imp_generation_ = 0;

  Clock::time_point started_at_;
  Clock::time_point pace_start_;
  std::uint64_t paced_samples_ = 0;

  std::atomic<RigMode> mode_{RigMode::idle};
  std::mutex idle_mu_;
  std::condition_variable idle_cv_;
  std::atomic<std::uint64_t> samples_total_{0};
  std::atomic<std::int64_t> busy_ns_{0};

  mutable std::mutex stats_mu_;
  LatencyStats latency_;
  std::optional<std::string> last_error_;

  std::thread thread_;
  std::mutex inline_mu_;
  std::mutex cmd_mu_;
  std::condition_variable cmd_cv_;
  std::deque<Command> commands_;
  bool running_ = false;

  mutable std::mutex sub_mu_;
  std::vector<std::shared_ptr<Subscriber>> subs_;
  std::uint64_t next_sub_id_ = 1;
  std::uint32_t broadcast_seq_ = 0;
};

}  // namespace jneeg
