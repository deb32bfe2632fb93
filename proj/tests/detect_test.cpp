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

#include <cmath>
#include <numbers>
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include "jneeg/analysis.hpp"
#include "jneeg/detect.hpp"
#include "jneeg/device.hpp"
#include "jneeg/emulator.hpp"
#include "support.hpp"

namespace jneeg {
namespace {

using test::code_of;

/// Calibrated emulator output for a whole bounded scenario.
SignalChunk record(const Scenario& sc) {
  EmulatedDevice dev(sc);
  AdsDriver drv(dev);
  drv.reset();
  const DeviceConfig cfg{};
  drv.configure(cfg);
  drv.start();
  std::vector<SampleFrame> frames;
  while (auto f = drv.next_frame()) frames.push_back(*f);
  return calibrate(frames, cfg);
}

std::vector<double> scripted_onsets(const Scenario& sc) {
  std::vector<double> t;
  for (const auto& a : sc.artifacts) t.push_back(a.time_s);
  return t;
}

std::vector<std::size_t> groups_of(const std::vector<ArtifactEvent>& ev) { return group_bursts(ev, 2.0, 250.0); }

TEST(Detector, SilenceHasNoEvents) {
  const SignalChunk z(1, 2500, 250.0);
  EXPECT_TRUE(detect_artifacts(z, 0).empty());
}

TEST(Detector, RejectsBadParameters) {
  EXPECT_EQ(code_of([] { ArtifactDetector(0, 250.0, 0.0); }), ErrorCode::config);
  EXPECT_EQ(code_of([] { ArtifactDetector(0, 250.0, 75.0, -1.0); }), ErrorCode::config);
  EXPECT_EQ(code_of([] { detect_artifacts(SignalChunk(1, 10, 250.0), 3); }), ErrorCode::range);
}

TEST(Detector, SingleBlinkIsOneEvent) {
  Scenario s;
  s.duration_s = 3.0;
  s.artifacts.push_back(make_artifact(ArtifactKind::blink, 1.0));
  const auto filtered = display_filter(record(s));
  const auto ev = detect_artifacts(filtered, site::Fz);
  ASSERT_EQ(ev.size(), 1u);
  EXPECT_GE(ev[0].peak_uv, kDefaultThresholdUv);
  EXPECT_NEAR(static_cast<double>(ev[0].onset) / 250.0, 1.0, 0.1);
}

TEST(Detector, Blink4321OnFz) {
  const Scenario s = load_scenario(test::scenario_path("blink-4321"));
  const auto filtered = display_filter(record(s));
  const auto ev = detect_artifacts(filtered, site::Fz);
  const auto want = scripted_onsets(s);
  ASSERT_EQ(ev.size(), want.size());
  for (std::size_t i = 0; i < ev.size(); ++i) {
    EXPECT_NEAR(static_cast<double>(ev[i].onset) / 250.0, want[i], 0.1);
    EXPECT_GE(ev[i].peak_uv, kDefaultThresholdUv);
  }
  EXPECT_EQ(groups_of(ev), (std::vector<std::size_t>{4, 3, 2, 1}));
}

TEST(Detector, EventsStreamIdenticallyInChunks) {
  const Scenario s = load_scenario(test::scenario_path("blink-4321"));
  const auto filtered = display_filter(record(s));
  const auto batch = detect_artifacts(filtered, site::F8);
  ArtifactDetector det(site::F8, 250.0);
  std::vector<ArtifactEvent> streamed;
  std::mt19937 rng(3);
  for (std::size_t off = 0; off < filtered.samples();) {
    const std::size_t n = std::min<std::size_t>(1 + rng() % 40, filtered.samples() - off);
    det.push(filtered.channel(site::F8).subspan(off, n), off, streamed);
    off += n;
  }
  det.flush(streamed);
  ASSERT_EQ(streamed.size(), batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    EXPECT_EQ(streamed[i].onset, batch[i].onset);
    EXPECT_EQ(streamed[i].peak_uv, batch[i].peak_uv);
  }
}

TEST(Detector, ScaleEquivariance) {
  const Scenario s = load_scenario(test::scenario_path("chew-4321"));
  const auto filtered = display_filter(record(s));
  const auto base = detect_artifacts(filtered, site::T5);
  ASSERT_FALSE(base.empty());
  for (double k : {0.25, 0.5, 2.0, 8.0}) {
    SignalChunk scaled = filtered;
    for (auto& v : scaled.channel(site::T5)) v *= k;
    const auto ev = detect_artifacts(scaled, site::T5, kDefaultThresholdUv * k);
    ASSERT_EQ(ev.size(), base.size()) << k;
    for (std::size_t i = 0; i < ev.size(); ++i) EXPECT_EQ(ev[i].onset, base[i].onset);
  }
}

TEST(Detector, RefractoryGuarantee) {
  std::mt19937_64 rng(17);
  std::normal_distribution<double> n(0.0, 40.0);
  std::vector<double> x(50000);
  for (auto& v : x) v = n(rng);
  const auto chunk = SignalChunk::from_channel(x, 250.0);
  for (double refr : {0.0, 0.1, 0.5, 1.3}) {
    const auto ev = detect_artifacts(chunk, 0, 75.0, refr);
    ASSERT_GT(ev.size(), 10u);
    const auto min_gap = static_cast<std::uint64_t>(std::llround(refr * 250.0));
    for (std::size_t i = 1; i < ev.size(); ++i) EXPECT_GE(ev[i].onset - ev[i - 1].onset, std::max<std::uint64_t>(min_gap, 1));
  }
}

TEST(Classifier, Blink4321IsAllBlinks) {
  const Scenario s = load_scenario(test::scenario_path("blink-4321"));
  const auto ev = classify_artifacts(display_filter(record(s)));
  EXPECT_TRUE(filter_kind(ev, ArtifactClass::chew).empty());
  EXPECT_TRUE(filter_kind(ev, ArtifactClass::generic).empty());
  const auto blinks = filter_kind(ev, ArtifactClass::blink);
  ASSERT_EQ(blinks.size(), 10u);
  for (const auto& e : blinks) EXPECT_EQ(e.channels, (std::vector<std::size_t>{site::F7, site::Fz, site::F8}));
  EXPECT_EQ(groups_of(blinks), (std::vector<std::size_t>{4, 3, 2, 1}));
}

TEST(Classifier, Chew4321IsAllChews) {
  const Scenario s = load_scenario(test::scenario_path("chew-4321"));
  const auto ev = classify_artifacts(display_filter(record(s)));
  EXPECT_TRUE(filter_kind(ev, ArtifactClass::blink).empty());
  const auto chews = filter_kind(ev, ArtifactClass::chew);
  ASSERT_EQ(chews.size(), 10u);
  const auto want = scripted_onsets(s);
  for (std::size_t i = 0; i < chews.size(); ++i) {
    EXPECT_NEAR(static_cast<double>(chews[i].onset) / 250.0, want[i], 0.1);
  }
  EXPECT_EQ(groups_of(chews), (std::vector<std::size_t>{4, 3, 2, 1}));
}

TEST(Classifier, IsolatedPosteriorCrossingIsGeneric) {
  ArtifactClassifier cls(250.0);
  std::vector<ArtifactEvent> out;
  const std::vector<ArtifactEvent> in{{ArtifactClass::generic, {site::Pz}, 100, 90.0}};
  cls.push(in, out);
  cls.flush(out);
  ASSERT_EQ(out.size(), 1u);
  EXPECT_EQ(out[0].kind, ArtifactClass::generic);
}

TEST(Classifier, AdvanceClosesOnlySettledClusters) {
  ArtifactClassifier cls(250.0);
  std::vector<ArtifactEvent> out;
  const std::vector<ArtifactEvent> in{{ArtifactClass::generic, {site::Fz}, 1000, 120.0}};
  cls.push(in, out);
  cls.advance(1100, out);
  EXPECT_TRUE(out.empty());
  cls.advance(1000 + 250, out);
  ASSERT_EQ(out.size(), 1u);
  EXPECT_EQ(out[0].kind, ArtifactClass::blink);
}

TEST(GroupBursts, EdgeCases) {
  EXPECT_TRUE(group_bursts({}, 2.0, 250.0).empty());
  std::vector<ArtifactEvent> ev;
  for (std::uint64_t t : {0u, 250u, 500u, 750u, 1000u}) ev.push_back({ArtifactClass::blink, {1}, t, 100.0});
  EXPECT_EQ(group_bursts(ev, 2.0, 250.0), std::vector<std::size_t>{5});
  EXPECT_EQ(group_bursts(ev, 0.5, 250.0), (std::vector<std::size_t>{1, 1, 1, 1, 1}));
}

// -- alpha -----------------------------------------------------------------

/// Fraction of windows labelled as scripted, skipping the settling window
/// at the start and any window that straddles an open/closed boundary.
double alpha_accuracy(const AlphaAnalysis& a, const Scenario& s) {
  std::size_t ok = 0, n = 0;
  for (const auto& w : a.windows) {
    if (w.start == 0) continue;
    const double t0 = static_cast<double>(w.start) / 250.0, t1 = static_cast<double>(w.end) / 250.0;
    bool closed_all = false, closed_any = false;
    for (const auto& iv : s.alpha_timeline) {
      closed_all |= (t0 >= iv.start_s && t1 <= iv.end_s);
      closed_any |= (t1 > iv.start_s && t0 < iv.end_s);
    }
    if (closed_any != closed_all) continue;
    ++n;
    ok += (w.state == EyeState::closed) == closed_all;
  }
  return n ? static_cast<double>(ok) / static_cast<double>(n) : 0.0;
}

TEST(Alpha, AlphaTestScenario) {
  const Scenario s = load_scenario(test::scenario_path("alpha-test"));
  const auto a = analyze_alpha(record(s), site::Pz);
  EXPECT_EQ(a.windows.size(), 16u);
  EXPECT_GE(alpha_accuracy(a, s), 0.95);
  EXPECT_GE(a.ratio(), 2.0);
}

TEST(Alpha, PaperAmplitudeRangeEndsAreDetected) {
  for (double amp : {35.0, 65.0}) {
    Scenario s = load_scenario(test::scenario_path("alpha-test"));
    s.alpha_timeline[0].amplitude_uv = amp;
    const auto a = analyze_alpha(record(s), site::Pz);
    std::size_t closed = 0;
    for (const auto& w : a.windows) closed += w.start >= 8 * 250 && w.state == EyeState::closed;
    EXPECT_EQ(closed, 8u) << amp;
  }
}

TEST(Alpha, ConstantSignalIsEyesOpen) {
  // Baseline from a real eyes-open calibration span; the constant record
  // has no band power of its own to calibrate against.
  const Scenario s = load_scenario(test::scenario_path("alpha-test"));
  const auto cal = band_power_series(record(s), {8.0, 12.0}, site::Pz);
  const double base = alpha_baseline(cal, 250, 2000);
  SignalChunk c(kChannels, 16 * 250, 250.0);
  for (std::size_t ch = 0; ch < kChannels; ++ch) {
    for (auto& v : c.channel(ch)) v = 100.0;
  }
  const auto series = band_power_series(c, {8.0, 12.0}, site::Pz);
  ASSERT_EQ(series.size(), 16u);
  for (const auto& w : classify_alpha(series, base, 2.0)) EXPECT_EQ(w.state, EyeState::open);
  // On its own it cannot be calibrated.
  EXPECT_EQ(code_of([&] { analyze_alpha(c, site::Pz); }), ErrorCode::calibration);
}

TEST(Alpha, RaisingRatioNeverClosesAWindow) {
  const Scenario s = load_scenario(test::scenario_path("alpha-test"));
  const auto series = band_power_series(record(s), {8.0, 12.0}, site::Pz);
  const double base = alpha_baseline(series, 250, 2000);
  auto prev = classify_alpha(series, base, 1.01);
  for (double r : {1.5, 2.0, 5.0, 50.0, 500.0, 5000.0}) {
    const auto cur = classify_alpha(series, base, r);
    for (std::size_t i = 0; i < cur.size(); ++i) {
      if (prev[i].state == EyeState::open) EXPECT_EQ(cur[i].state, EyeState::open);
    }
    prev = cur;
  }
}

TEST(Alpha, Errors) {
  const std::vector<PowerWindow> w{{0, 250, 1.0}, {250, 500, 3.0}};
  EXPECT_EQ(code_of([&] { classify_alpha(w, 0.0, 2.0); }), ErrorCode::calibration);
  EXPECT_EQ(code_of([&] { classify_alpha(w, 1.0, 1.0); }), ErrorCode::config);
  EXPECT_EQ(code_of([&] { alpha_baseline(w, 600, 900); }), ErrorCode::calibration);
  const auto labels = classify_alpha(w, 1.0, 2.0);
  EXPECT_EQ(labels[0].state, EyeState::open);
  EXPECT_EQ(labels[1].state, EyeState::closed);
  EXPECT_EQ(to_string(EyeState::closed), "eyes-closed");
}

}  // namespace
}  // namespace jneeg
