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
#include <vector>

#include <gtest/gtest.h>

#include "jneeg/device.hpp"
#include "jneeg/emulator.hpp"
#include "jneeg/impedance.hpp"
#include "oracles.hpp"
#include "support.hpp"

namespace jneeg {
namespace {

using test::code_of;

/// One second (or `seconds`) of emulator output with lead-off injection on
/// the channels in `mask`.
SignalChunk capture(const Scenario& sc, std::uint8_t mask, double seconds = 1.0) {
  EmulatedDevice dev(sc);
  AdsDriver drv(dev);
  drv.reset();
  DeviceConfig cfg{};
  cfg.leadoff.channels = mask;
  drv.configure(cfg);
  drv.start();
  std::vector<SampleFrame> frames;
  const auto n = static_cast<std::size_t>(std::llround(seconds * 250.0));
  while (frames.size() < n) frames.push_back(*drv.next_frame());
  return calibrate(frames, cfg);
}

std::vector<ImpedanceReading> measure_all(const Scenario& sc, std::uint8_t mask) {
  DeviceConfig cfg{};
  cfg.leadoff.channels = mask;
  const auto window = capture(sc, mask);
  std::vector<ImpedanceReading> out;
  for (std::size_t c = 0; c < kChannels; ++c) {
    const auto d = drive_for(cfg, c);
    if (d.active) out.push_back(measure_impedance(window, c, d));
  }
  return out;
}

TEST(Quality, TierBoundariesAreInclusive) {
  EXPECT_EQ(classify_quality(0), ContactQuality::good);
  EXPECT_EQ(classify_quality(5e3), ContactQuality::good);
  EXPECT_EQ(classify_quality(10e3), ContactQuality::good);
  EXPECT_EQ(classify_quality(10e3 + 1), ContactQuality::acceptable);
  EXPECT_EQ(classify_quality(50e3), ContactQuality::acceptable);
  EXPECT_EQ(classify_quality(50e3 + 1), ContactQuality::poor);
  EXPECT_EQ(classify_quality(200e3), ContactQuality::poor);
  EXPECT_EQ(classify_quality(200e3 + 1), ContactQuality::open);
  EXPECT_EQ(classify_quality(1e6), ContactQuality::open);
}

TEST(Quality, MonotoneInOhms) {
  int prev = 0;
  for (double z = 0; z < 2e6; z = z * 1.07 + 50) {
    const int q = static_cast<int>(classify_quality(z));
    EXPECT_GE(q, prev);
    prev = q;
  }
}

TEST(Quality, CustomTiers) {
  const QualityTiers t{1e3, 2e3, 3e3};
  EXPECT_EQ(classify_quality(2.5e3, t), ContactQuality::poor);
}

TEST(Measure, TenKiloOhms) {
  Scenario s;
  s.impedance_ohms.fill(10e3);
  s.noise = {5.0, 1.0, 50, 5.0};
  const auto r = measure_all(s, 0x01);
  ASSERT_EQ(r.size(), 1u);
  EXPECT_NEAR(r[0].ohms, 10e3, 500);
  EXPECT_EQ(r[0].frequency_hz, 31.2);
  EXPECT_EQ(r[0].quality, classify_quality(r[0].ohms));
}

TEST(Measure, SweepScenario) {
  const Scenario s = load_scenario(test::scenario_path("impedance-sweep"));
  const auto r = measure_all(s, 0xFF);
  ASSERT_EQ(r.size(), kChannels);
  std::vector<double> truth, got;
  for (const auto& x : r) {
    const double z = s.impedance_ohms[x.channel];
    if (z == 0) {
      EXPECT_LT(x.ohms, 500.0);
      continue;
    }
    EXPECT_NEAR(x.ohms, z, 0.05 * z) << "channel " << x.channel;
    // Truth on a tier boundary may land on either side within tolerance.
    EXPECT_EQ(x.quality, classify_quality(x.ohms)) << "channel " << x.channel;
    if (z > 1.1 * 200e3) EXPECT_EQ(x.quality, ContactQuality::open);
    // Independent amplitude estimate: 3-term sine fit from the test oracles.
    const double pp = 2.0 * oracle::fit_sine(capture(s, 0xFF).channel(x.channel), 31.2, 250.0).amplitude;
    EXPECT_NEAR(x.ohms, pp * 1e-6 / 24e-9, 0.01 * z);
    if (z >= 5e3 && z <= 200e3) {
      truth.push_back(z);
      got.push_back(x.ohms);
    }
  }
  ASSERT_GE(truth.size(), 4u);
  EXPECT_GT(oracle::fit_line(truth, got).r2, 0.999);
}

TEST(Measure, ChannelsAreIndependent) {
  const Scenario s = load_scenario(test::scenario_path("impedance-sweep"));
  const auto all = measure_all(s, 0xFF);
  for (std::size_t i = 0; i < kChannels; ++i) {
    const auto one = measure_all(s, static_cast<std::uint8_t>(1u << i));
    ASSERT_EQ(one.size(), 1u);
    EXPECT_NEAR(one[0].ohms, all[i].ohms, 0.01 * std::max(all[i].ohms, 500.0));
  }
}

TEST(Measure, SevenPointEightHertzDrive) {
  Scenario s;
  s.impedance_ohms.fill(50e3);
  s.noise = {5.0, 1.0, 0, 0.0};
  DeviceConfig cfg{};
  cfg.leadoff.channels = 0x08;
  cfg.leadoff.frequency = LeadoffFrequency::ac_7_8;
  EmulatedDevice dev(s);
  AdsDriver drv(dev);
  drv.reset();
  drv.configure(cfg);
  drv.start();
  std::vector<SampleFrame> frames;
  for (int i = 0; i < 500; ++i) frames.push_back(*drv.next_frame());
  const auto r = measure_impedance(calibrate(frames, cfg), 3, drive_for(cfg, 3));
  EXPECT_NEAR(r.ohms, 50e3, 2.5e3);
}

TEST(Measure, Errors) {
  const SignalChunk w(kChannels, 250, 250.0);
  EXPECT_EQ(code_of([&] { measure_impedance(w, 0, {24e-9, 125.0, true}); }), ErrorCode::config);
  EXPECT_EQ(code_of([&] { measure_impedance(w, 0, {24e-9, 0.0, true}); }), ErrorCode::config);
  EXPECT_EQ(code_of([&] { measure_impedance(w, 0, {24e-9, 31.2, false}); }), ErrorCode::state);
  EXPECT_EQ(code_of([&] { measure_impedance(w.slice(0, 200), 0, {24e-9, 31.2, true}); }), ErrorCode::size);
  EXPECT_EQ(code_of([&] { measure_impedance(w, 8, {24e-9, 31.2, true}); }), ErrorCode::range);
  DeviceConfig cfg{};
  cfg.leadoff.channels = 0x01;
  EXPECT_TRUE(drive_for(cfg, 0).active);
  EXPECT_FALSE(drive_for(cfg, 1).active);
  cfg.leadoff.frequency = LeadoffFrequency::dc;
  EXPECT_FALSE(drive_for(cfg, 0).active);
}

}  // namespace
}  // namespace jneeg
