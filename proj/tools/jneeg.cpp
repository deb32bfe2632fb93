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

// jneeg: acquire, impedance and analyze subcommands.
//
// Exit codes: 0 ok, 1 runtime failure, 2 usage (bad flags, missing inputs).

#include <atomic>
#include <chrono>
#include <csignal>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "jneeg/analysis.hpp"
#include "jneeg/net.hpp"
#include "jneeg/rig.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace jneeg;

namespace {

constexpr int kOk = 0;
constexpr int kRuntime = 1;
constexpr int kUsage = 2;

/// Thrown for problems with the operator's inputs; maps to exit code 2.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::atomic<bool> g_interrupted{false};

extern "C" void on_signal(int) { g_interrupted = true; }

Scenario default_scenario() {
  Scenario s;
  s.name = "default";
  s.noise = {5.0, 1.0, 50, 2.0};
  s.impedance_ohms.fill(5e3);
  return s;
}

Scenario scenario_from(const std::string& path) {
  if (path.empty()) return default_scenario();
  if (!fs::exists(path)) throw UsageError("scenario file not found: " + path);
  return load_scenario(path);
}

DeviceConfig config_from(const std::string& path) {
  if (path.empty()) return {};
  std::ifstream in(path);
  if (!in) throw UsageError("config file not found: " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::parse, path + ": " + e.what());
  }
  auto cfg = j.get<DeviceConfig>();
  validate(cfg);
  return cfg;
}

/// ISO-8601 UTC; SOURCE_DATE_EPOCH pins it for reproducible files.
std::string timestamp() {
  std::time_t t = std::time(nullptr);
  if (const char* e = std::getenv("SOURCE_DATE_EPOCH")) t = static_cast<std::time_t>(std::strtoll(e, nullptr, 10));
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::pair<double, double> parse_band(const std::string& s) {
  const auto colon = s.find(':');
  if (colon == std::string::npos) throw UsageError("band must look like lo:hi, got '" + s + "'");
  try {
    const double lo = std::stod(s.substr(0, colon));
    const double hi = std::stod(s.substr(colon + 1));
    if (!(lo > 0 && hi > lo)) throw UsageError("band needs 0 < lo < hi, got '" + s + "'");
    return {lo, hi};
  } catch (const std::logic_error&) {
    throw UsageError("band must look like lo:hi, got '" + s + "'");
  }
}

std::size_t channel_from(const Montage& montage, const std::string& label) {
  auto c = channel_index(montage, label);
  if (!c) throw UsageError("unknown channel '" + label + "'");
  return *c;
}

json event_json(const ArtifactEvent& e, const Montage& montage, double fs) {
  json chans = json::array();
  for (auto c : e.channels) chans.push_back(montage[c]);
  return {{"kind", to_string(e.kind)},
          {"onset", e.onset},
          {"t_s", static_cast<double>(e.onset) / fs},
          {"peak_uv", e.peak_uv},
          {"channels", chans}};
}

json groups_json(const std::vector<ArtifactEvent>& events, double fs) {
  return group_bursts(events, kBurstGapS, fs);
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
  if (!out) throw Error(ErrorCode::io, "cannot write " + path.string());
}

// ---------------------------------------------------------------------------
// acquire

struct AcquireArgs {
  std::string source = "emu";
  std::string scenario;
  std::string config;
  std::string out;
  std::optional<int> serve;
  bool serve_flag = false;
  bool hold = false;
  double duration = 0;
  std::optional<std::uint64_t> seed;
  std::optional<double> speed;
  bool json_out = false;
};

int run_acquire(const AcquireArgs& a) {
  RigOptions opt;
  if (!a.out.empty()) opt.session_dir = a.out;
  const bool serving = a.serve_flag;
  opt.speed = a.speed.value_or(serving ? 1.0 : 0.0);
  if (a.duration < 0) throw UsageError("--duration must be >= 0");

  std::unique_ptr<Rig> rig;
  if (a.source == "emu") {
    Scenario sc = scenario_from(a.scenario);
    if (a.seed) sc.seed = *a.seed;
    const DeviceConfig cfg = config_from(a.config);
    if (a.duration > 0) opt.max_samples = static_cast<std::uint64_t>(std::llround(a.duration * cfg.sample_rate));
    if (sc.duration_s == 0 && opt.max_samples == 0 && !serving) {
      throw UsageError("scenario is unbounded; pass --duration");
    }
    opt.metadata.session_id = a.out.empty() ? "live" : fs::path(a.out).filename().string();
    opt.metadata.start_time = timestamp();
    opt.metadata.source = "emu:" + (sc.name.empty() ? std::string("scenario") : sc.name);
    opt.metadata.config = cfg;
    rig = Rig::emulated(sc, cfg, opt);
  } else if (a.source.starts_with("replay:")) {
    const std::string path = a.source.substr(7);
    if (!fs::exists(path)) throw UsageError("recording not found: " + path);
    if (!a.scenario.empty() || !a.config.empty()) throw UsageError("--scenario/--config do not apply to a replay");
    auto src = std::make_unique<ReplaySource>(path);
    if (src->damage()) std::cerr << "warning: " << *src->damage() << "; replaying the readable part\n";
    if (a.duration > 0) {
      opt.max_samples = static_cast<std::uint64_t>(std::llround(a.duration * src->config().sample_rate));
    }
    rig = std::make_unique<Rig>(std::move(src), opt);
  } else {
    throw UsageError("--source must be 'emu' or 'replay:<file>'");
  }

  std::optional<net::Server> server;
  if (serving) {
    const auto port = a.serve && *a.serve >= 0 ? static_cast<unsigned short>(*a.serve) : net::default_port();
    rig->start_thread();
    server.emplace(*rig, port);
    server->start();
    std::cerr << "serving on port " << server->port() << " (ws://, GET /status)\n";
  }

  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  if (!a.hold) {
    const auto r = rig->control({{"cmd", "start"}});
    if (!r.value("ok", false)) {
      std::cerr << "start failed: " << r["error"]["message"].get<std::string>() << '\n';
      return kRuntime;
    }
  }
  if (serving) {
    // Hold mode waits for clients; otherwise stop with the run.
    while (!g_interrupted && (a.hold || rig->mode() != RigMode::idle)) {
      std::this_thread::sleep_for(std::chrono::milliseconds(50));
    }
    if (rig->mode() == RigMode::streaming || rig->mode() == RigMode::replay) rig->control({{"cmd", "stop"}});
    server->stop();
    rig->shutdown();
  } else if (opt.speed > 0) {
    rig->start_thread();
    while (!g_interrupted && !rig->wait_idle(std::chrono::milliseconds(100))) {
    }
    if (g_interrupted) rig->control({{"cmd", "stop"}});
    rig->shutdown();
  } else {
    rig->run_until_idle();
  }

  const double fs = 250.0;
  const auto blinks = filter_kind(rig->events(), ArtifactClass::blink);
  const auto chews = filter_kind(rig->events(), ArtifactClass::chew);
  json summary = {{"samples", rig->samples_processed()},
                  {"session", a.out.empty() ? json() : json(a.out)},
                  {"events", rig->events().size()},
                  {"blink_groups", groups_json(blinks, fs)},
                  {"chew_groups", groups_json(chews, fs)},
                  {"alpha_windows", rig->alpha_windows().size()},
                  {"error", rig->last_error() ? json(*rig->last_error()) : json()}};
  if (a.json_out) {
    std::cout << summary.dump(2) << '\n';
  } else {
    std::cout << "samples  " << rig->samples_processed() << '\n';
    if (!a.out.empty()) std::cout << "session  " << a.out << '\n';
    std::cout << "events   " << rig->events().size() << " (blink groups " << summary["blink_groups"].dump()
              << ", chew groups " << summary["chew_groups"].dump() << ")\n";
  }
  if (rig->last_error()) {
    std::cerr << "error: " << *rig->last_error() << '\n';
    return kRuntime;
  }
  return kOk;
}

// ---------------------------------------------------------------------------
// impedance

struct ImpedanceArgs {
  std::string channels = "all";
  std::string scenario;
  std::string config;
  std::optional<std::uint64_t> seed;
  bool json_out = false;
};

int run_impedance(const ImpedanceArgs& a) {
  Scenario sc = scenario_from(a.scenario);
  if (a.seed) sc.seed = *a.seed;
  auto rig = Rig::emulated(sc, config_from(a.config));
  json req = {{"cmd", "impedance"}};
  if (a.channels != "all") {
    json list = json::array();
    std::stringstream ss(a.channels);
    std::string label;
    while (std::getline(ss, label, ',')) {
      if (!channel_index(default_montage(), label)) throw UsageError("unknown channel '" + label + "'");
      list.push_back(label);
    }
    req["channels"] = list;
  }
  auto r = rig->control(req);
  if (!r.value("ok", false)) {
    std::cerr << "impedance failed: " << r["error"]["message"].get<std::string>() << '\n';
    return kRuntime;
  }
  r.erase("ok");
  r.erase("cmd");
  if (a.json_out) {
    std::cout << r.dump(2) << '\n';
    return kOk;
  }
  std::printf("%-4s %-6s %12s  %s\n", "ch", "site", "ohms", "quality");
  for (const auto& x : r["readings"]) {
    std::printf("%-4zu %-6s %12.0f  %s\n", x["channel"].get<std::size_t>(), x["label"].get<std::string>().c_str(),
                x["ohms"].get<double>(), x["quality"].get<std::string>().c_str());
  }
  return kOk;
}

// ---------------------------------------------------------------------------
// analyze

struct AnalyzeArgs {
  std::string session;
  std::string band;
  bool cwt = false;
  std::string detect;
  std::string emit;
  std::string channel = "Pz";
  std::string cwt_grid = "2:40:0.5";
  std::size_t cwt_decimate = 5;
};

std::string csv_traces(const SignalChunk& x, const Montage& montage) {
  std::string out = "index,t_s";
  for (const auto& l : montage) out += "," + l;
  out += '\n';
  char buf[48];
  for (std::size_t i = 0; i < x.samples(); ++i) {
    const auto idx = x.start() + i;
    std::snprintf(buf, sizeof buf, "%llu,%.6f", static_cast<unsigned long long>(idx),
                  static_cast<double>(idx) / x.sample_rate());
    out += buf;
    for (std::size_t c = 0; c < x.channels(); ++c) {
      std::snprintf(buf, sizeof buf, ",%.6g", x.at(c, i));
      out += buf;
    }
    out += '\n';
  }
  return out;
}

int run_analyze(const AnalyzeArgs& a) {
  if (!fs::exists(a.session)) throw UsageError("session not found: " + a.session);
  if (!a.detect.empty() && a.detect != "blinks" && a.detect != "alpha" && a.detect != "chews") {
    throw UsageError("--detect must be blinks, alpha or chews");
  }
  const Recording rec = read_session(a.session);
  if (rec.damage) std::cerr << "warning: " << *rec.damage << "; analysing the readable part\n";
  const auto& montage = rec.metadata.montage;
  const std::size_t ch = channel_from(montage, a.channel);
  const double fs = rec.data.sample_rate();
  const fs::path emit = a.emit;
  if (!a.emit.empty()) fs::create_directories(emit);

  json files = json::array();
  json summary = {{"session", a.session},
                  {"samples", rec.data.samples()},
                  {"sample_rate", fs},
                  {"channel", montage[ch]},
                  {"damage", rec.damage ? json(*rec.damage) : json()}};

  const SignalChunk filtered = display_filter(rec.data);
  if (!a.emit.empty()) {
    write_text(emit / "filtered.csv", csv_traces(filtered, montage));
    files.push_back("filtered.csv");
  }

  if (!a.band.empty()) {
    const auto band = parse_band(a.band);
    if (band.second >= fs / 2) throw UsageError("band upper edge must lie below fs/2");
    const auto series = band_power_series(rec.data, band, ch);
    json b = {{"low_hz", band.first}, {"high_hz", band.second}, {"windows", series.size()}};
    // Eye-state split against the opening eyes-open span.
    try {
      const auto al = analyze_alpha(rec.data, ch, 8.0, kDefaultAlphaRatio, 1.0, band);
      b["baseline_uv2"] = al.baseline_uv2;
      b["closed_mean_uv2"] = al.closed_mean_uv2;
      b["open_mean_uv2"] = al.open_mean_uv2;
      b["closed_open_ratio"] = al.ratio();
    } catch (const Error& e) {
      b["baseline_uv2"] = nullptr;
      b["note"] = e.what();
    }
    if (!a.emit.empty()) {
      std::string csv = "start,end,t_s,power_uv2\n";
      char buf[96];
      for (const auto& w : series) {
        std::snprintf(buf, sizeof buf, "%llu,%llu,%.6f,%.9g\n", static_cast<unsigned long long>(w.start),
                      static_cast<unsigned long long>(w.end), static_cast<double>(w.start) / fs, w.power_uv2);
        csv += buf;
      }
      write_text(emit / "band_power.csv", csv);
      files.push_back("band_power.csv");
    }
    summary["band"] = b;
  }

  if (a.cwt) {
    std::vector<double> grid;
    {
      double lo = 0, hi = 0, step = 0;
      char c1 = 0, c2 = 0;
      std::istringstream gs(a.cwt_grid);
      if (!(gs >> lo >> c1 >> hi >> c2 >> step) || c1 != ':' || c2 != ':') {
        throw UsageError("--cwt-grid must look like lo:hi:step");
      }
      grid = frequency_grid(lo, hi, step);
    }
    const auto sg = cwt_morlet(rec.data, grid, ch);
    const std::size_t dec = std::max<std::size_t>(a.cwt_decimate, 1);
    // Peak of the mean spectrum over the eyes-closed windows, if any.
    json c = {{"freqs", grid.size()}, {"samples", sg.samples}, {"decimate", dec}};
    try {
      const auto al = analyze_alpha(rec.data, ch);
      std::vector<double> acc(grid.size(), 0.0);
      std::size_t n = 0;
      for (const auto& w : al.windows) {
        if (w.state != EyeState::closed) continue;
        const auto spec = sg.mean_spectrum(w.start - sg.start, w.end - sg.start);
        for (std::size_t f = 0; f < grid.size(); ++f) acc[f] += spec[f];
        ++n;
      }
      if (n) {
        const auto best = std::max_element(acc.begin(), acc.end()) - acc.begin();
        c["closed_peak_hz"] = grid[static_cast<std::size_t>(best)];
      } else {
        c["closed_peak_hz"] = nullptr;
      }
    } catch (const Error&) {
      c["closed_peak_hz"] = nullptr;
    }
    if (!a.emit.empty()) {
      // Rows are frequencies, columns are (decimated) sample indices.
      std::string csv = "freq_hz";
      char buf[48];
      for (std::size_t t = 0; t < sg.samples; t += dec) csv += "," + std::to_string(sg.start + t);
      csv += '\n';
      for (std::size_t f = 0; f < grid.size(); ++f) {
        std::snprintf(buf, sizeof buf, "%g", grid[f]);
        csv += buf;
        for (std::size_t t = 0; t < sg.samples; t += dec) {
          if (sg.is_valid(f, t)) {
            std::snprintf(buf, sizeof buf, ",%.6g", sg.at(f, t));
            csv += buf;
          } else {
            csv += ",";
          }
        }
        csv += '\n';
      }
      write_text(emit / "scalogram.csv", csv);
      files.push_back("scalogram.csv");
    }
    summary["cwt"] = c;
  }

  if (!a.detect.empty()) {
    json d;
    if (a.detect == "alpha") {
      const auto al = analyze_alpha(rec.data, ch);
      json wins = json::array();
      for (const auto& w : al.windows) {
        wins.push_back({{"start", w.start}, {"end", w.end}, {"power_uv2", w.power_uv2}, {"state", to_string(w.state)}});
      }
      d = {{"detect", "alpha"},
           {"channel", montage[ch]},
           {"baseline_uv2", al.baseline_uv2},
           {"closed_open_ratio", al.ratio()},
           {"windows", wins}};
    } else {
      const auto kind = a.detect == "blinks" ? ArtifactClass::blink : ArtifactClass::chew;
      const auto events = filter_kind(classify_artifacts(filtered), kind);
      json ev = json::array();
      for (const auto& e : events) ev.push_back(event_json(e, montage, fs));
      d = {{"detect", a.detect}, {"events", ev}, {"groups", groups_json(events, fs)}};
    }
    if (!a.emit.empty()) {
      write_text(emit / "events.json", d.dump(2) + "\n");
      files.push_back("events.json");
    }
    summary["detect"] = d;
  }

  summary["files"] = files;
  std::cout << summary.dump(2) << '\n';
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"jneeg: EEG acquisition rig, emulator and offline analysis"};
  app.require_subcommand(1);

  AcquireArgs acq;
  auto* acquire = app.add_subcommand("acquire", "Run the rig headless and record a session");
  acquire->add_option("--source", acq.source, "emu or replay:<session>")->capture_default_str();
  acquire->add_option("--scenario", acq.scenario, "Emulator scenario JSON");
  acquire->add_option("--config", acq.config, "Device configuration JSON");
  acquire->add_option("--out", acq.out, "Session directory to write");
  acquire->add_option("--duration", acq.duration, "Stop after this many seconds (0 = scenario length)");
  acquire->add_option("--seed", acq.seed, "Override the scenario seed");
  acquire->add_option("--speed", acq.speed, "Pacing: 0 as fast as possible, 1 real time");
  auto* serve = acquire->add_option("--serve", acq.serve, "Serve WebSocket + HTTP status (port defaults to $JNEEG_PORT or 9271)")
                    ->expected(0, 1);
  acquire->add_flag("--hold", acq.hold, "With --serve: stay idle and wait for client commands until interrupted");
  acquire->add_flag("--json", acq.json_out, "Print the run summary as JSON");

  ImpedanceArgs imp;
  auto* impedance = app.add_subcommand("impedance", "Measure electrode impedance against the emulator");
  impedance->add_option("--channel", imp.channels, "all or comma-separated labels")->capture_default_str();
  impedance->add_option("--scenario", imp.scenario, "Emulator scenario JSON");
  impedance->add_option("--config", imp.config, "Device configuration JSON");
  impedance->add_option("--seed", imp.seed, "Override the scenario seed");
  impedance->add_flag("--json", imp.json_out, "JSON output");

  AnalyzeArgs an;
  auto* analyze = app.add_subcommand("analyze", "Offline analysis of a recorded session");
  analyze->add_option("session", an.session, "Session directory or .neurec file")->required();
  analyze->add_option("--band", an.band, "Band-power series, lo:hi in Hz");
  analyze->add_flag("--cwt", an.cwt, "Morlet scalogram");
  analyze->add_option("--cwt-grid", an.cwt_grid, "Scalogram frequencies lo:hi:step")->capture_default_str();
  analyze->add_option("--cwt-decimate", an.cwt_decimate, "Keep every n-th scalogram column")->capture_default_str();
  analyze->add_option("--detect", an.detect, "blinks, chews or alpha");
  analyze->add_option("--emit", an.emit, "Directory for CSV/JSON plot-data files");
  analyze->add_option("--channel", an.channel, "Channel for band power, scalogram and alpha")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }
  acq.serve_flag = serve->count() > 0;

  try {
    if (*acquire) return run_acquire(acq);
    if (*impedance) return run_impedance(imp);
    if (*analyze) return run_analyze(an);
  } catch (const UsageError& e) {
    std::cerr << "jneeg: " << e.what() << '\n';
    return kUsage;
  } catch (const Error& e) {
    std::cerr << "jneeg: " << to_string(e.code()) << ": " << e.what() << '\n';
    return kRuntime;
  } catch (const std::exception& e) {
    std::cerr << "jneeg: " << e.what() << '\n';
    return kRuntime;
  }
  return kUsage;
}
