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


#include <cstdio>
#include <fstream>
#include <sstream>
#include <vector>

#include <gtest/gtest.h>

#include "jneeg/device.hpp"
#include "jneeg/emulator.hpp"
#include "jneeg/session.hpp"
#include "support.hpp"

namespace jneeg {
namespace {

using test::code_of;
using test::TempDir;

std::vector<SampleFrame> emulate(const Scenario& sc, const DeviceConfig& cfg, std::size_t n) {
  EmulatedDevice dev(sc);
  AdsDriver drv(dev);
  drv.reset();
  drv.configure(cfg);
  drv.start();
  std::vector<SampleFrame> out;
  while (out.size() < n) {
    auto f = drv.next_frame();
    if (!f) break;
    out.push_back(*f);
  }
  return out;
}

SessionMetadata meta_for(const DeviceConfig& cfg) {
  SessionMetadata m;
  m.session_id = "s-001";
  m.start_time = "2026-01-01T00:00:00Z";
  m.config = cfg;
  m.operator_note = "bench";
  m.source = "emu:alpha-test";
  return m;
}

std::vector<std::uint8_t> slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

TEST(Session, RoundTripIsBitIdentical) {
  TempDir tmp;
  const DeviceConfig cfg{};
  const auto chunk = calibrate(emulate(load_scenario(test::scenario_path("alpha-test")), cfg, 2000), cfg);
  {
    SessionWriter w(tmp / "s", meta_for(cfg));
    for (std::size_t i = 0; i < chunk.samples(); i += 37) w.append(chunk.slice(i, std::min<std::size_t>(37, chunk.samples() - i)));
    EXPECT_EQ(w.next_index(), 2000u);
  }
  const auto rec = read_session(tmp / "s");
  EXPECT_FALSE(rec.damage);
  EXPECT_EQ(rec.metadata, meta_for(cfg));
  ASSERT_EQ(rec.data.samples(), 2000u);
  EXPECT_EQ(rec.blocks, 8u);
  for (std::size_t c = 0; c < kChannels; ++c) {
    for (std::size_t i = 0; i < 2000; ++i) {
      ASSERT_EQ(static_cast<float>(rec.data.at(c, i)), static_cast<float>(chunk.at(c, i)));
    }
  }
  // Reading via the file path works as well as via the directory.
  EXPECT_EQ(read_session(tmp / "s" / kRecordingFile).data.samples(), 2000u);
}

TEST(Session, EightSecondsIsTwoThousandSamples) {
  TempDir tmp;
  const DeviceConfig cfg{};
  Scenario s;
  s.duration_s = 8.0;
  {
    SessionWriter w(tmp / "s", meta_for(cfg));
    w.append(calibrate(emulate(s, cfg, 1u << 20), cfg));
  }
  EXPECT_EQ(read_session(tmp / "s").data.samples(), 2000u);
}

TEST(Session, EmptySessionIsReadable) {
  TempDir tmp;
  { SessionWriter w(tmp / "s", meta_for(DeviceConfig{})); }
  const auto rec = read_session(tmp / "s");
  EXPECT_EQ(rec.data.samples(), 0u);
  EXPECT_EQ(rec.blocks, 0u);
  EXPECT_FALSE(rec.damage);
}

TEST(Session, TruncatedFileKeepsCompleteBlocks) {
  TempDir tmp;
  const DeviceConfig cfg{};
  const auto chunk = calibrate(emulate(Scenario{}, cfg, 1000), cfg);
  {
    SessionWriter w(tmp / "s", meta_for(cfg));
    w.append(chunk);
  }
  const auto file = tmp / "s" / kRecordingFile;
  std::filesystem::resize_file(file, std::filesystem::file_size(file) - 100);
  const auto rec = read_session(tmp / "s");
  ASSERT_TRUE(rec.damage);
  EXPECT_EQ(rec.blocks, 3u);
  EXPECT_EQ(rec.data.samples(), 750u);
  EXPECT_EQ(rec.data.at(3, 749), static_cast<float>(chunk.at(3, 749)));
}

TEST(Session, CorruptBlockStopsRead) {
  TempDir tmp;
  const DeviceConfig cfg{};
  {
    SessionWriter w(tmp / "s", meta_for(cfg));
    w.append(calibrate(emulate(Scenario{}, cfg, 750), cfg));
  }
  const auto file = tmp / "s" / kRecordingFile;
  auto bytes = slurp(file);
  bytes[bytes.size() - 50] ^= 0x01;
  std::ofstream(file, std::ios::binary).write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  const auto rec = read_session(tmp / "s");
  ASSERT_TRUE(rec.damage);
  EXPECT_NE(rec.damage->find("checksum"), std::string::npos);
  EXPECT_EQ(rec.data.samples(), 500u);
}

TEST(Session, HeaderErrorsThrow) {
  TempDir tmp;
  { SessionWriter w(tmp / "s", meta_for(DeviceConfig{})); }
  const auto file = tmp / "s" / kRecordingFile;
  auto bytes = slurp(file);
  bytes[12] ^= 0x20;  // inside the metadata JSON
  std::ofstream(file, std::ios::binary).write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  EXPECT_EQ(code_of([&] { read_session(tmp / "s"); }), ErrorCode::parse);

  std::ofstream(file, std::ios::binary) << "NOPE";
  EXPECT_EQ(code_of([&] { read_session(tmp / "s"); }), ErrorCode::parse);
  EXPECT_EQ(code_of([&] { read_session(tmp / "missing"); }), ErrorCode::io);
}

TEST(Session, MarkersRoundTrip) {
  TempDir tmp;
  const DeviceConfig cfg{};
  {
    SessionWriter w(tmp / "s", meta_for(cfg));
    w.append(calibrate(emulate(Scenario{}, cfg, 300), cfg));
    w.add_marker({10, MarkerKind::user, "eyes closed"});
    w.add_marker({20, MarkerKind::blink, ""});
    w.add_marker({5000, MarkerKind::chew, ""});  // beyond the data
  }
  const auto rec = read_session(tmp / "s");
  ASSERT_EQ(rec.markers.size(), 2u);
  EXPECT_EQ(rec.markers[0].text, "eyes closed");
  EXPECT_EQ(rec.markers[1].kind, MarkerKind::blink);
  EXPECT_EQ(rec.markers_out_of_range, 1u);
}

TEST(Session, TornMarkerLineIsIgnored) {
  TempDir tmp;
  const DeviceConfig cfg{};
  {
    SessionWriter w(tmp / "s", meta_for(cfg));
    w.append(calibrate(emulate(Scenario{}, cfg, 300), cfg));
    w.add_marker({10, MarkerKind::user, "a"});
  }
  std::ofstream(tmp / "s" / kMarkerFile, std::ios::app) << "{\"sample\": 1";
  EXPECT_EQ(read_session(tmp / "s").markers.size(), 1u);
}

TEST(Session, NonContiguousAppendIsRejected) {
  TempDir tmp;
  const DeviceConfig cfg{};
  const auto chunk = calibrate(emulate(Scenario{}, cfg, 100), cfg);
  SessionWriter w(tmp / "s", meta_for(cfg));
  w.append(chunk.slice(0, 50));
  EXPECT_EQ(code_of([&] { w.append(chunk.slice(60, 10)); }), ErrorCode::session);
  EXPECT_EQ(code_of([&] { w.append(SignalChunk(3, 10, 250.0, 50)); }), ErrorCode::shape);
  w.close();
  EXPECT_EQ(code_of([&] { w.append(chunk.slice(50, 10)); }), ErrorCode::session);
}

TEST(Session, DuplicateMontageLabelsRejected) {
  auto j = nlohmann::json(meta_for(DeviceConfig{}));
  j["montage"][1] = j["montage"][0];
  EXPECT_EQ(code_of([&] { (void)j.get<SessionMetadata>(); }), ErrorCode::config);
}

TEST(Csv, RowsMatchRecording) {
  TempDir tmp;
  const DeviceConfig cfg{};
  {
    SessionWriter w(tmp / "s", meta_for(cfg));
    w.append(calibrate(emulate(load_scenario(test::scenario_path("blink-4321")), cfg, 600), cfg));
    w.add_marker({3, MarkerKind::user, "a,b"});
    w.add_marker({3, MarkerKind::blink, ""});
  }
  const auto rec = read_session(tmp / "s");
  std::ostringstream out;
  export_csv(rec, out);
  std::istringstream in(out.str());
  std::string line;
  std::size_t comments = 0, rows = 0;
  bool header = false;
  while (std::getline(in, line)) {
    if (line.starts_with("#")) {
      ++comments;
      continue;
    }
    if (!header) {
      EXPECT_EQ(line, "index,t_s,F7,Fz,F8,C3,C4,T5,Pz,T6,marker");
      header = true;
      continue;
    }
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream ls(line);
    if (rows == 3) {
      EXPECT_TRUE(line.ends_with(",\"user:a,b;blink\"")) << line;
      line = line.substr(0, line.rfind(",\"user"));
      ls = std::istringstream(line);
    }
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    ASSERT_GE(cells.size(), 10u);
    EXPECT_EQ(std::stoull(cells[0]), rows);
    EXPECT_NEAR(std::stod(cells[1]), rows / 250.0, 1e-6);
    for (std::size_t c = 0; c < kChannels; ++c) {
      // 9 significant digits restore the stored f32 exactly.
      ASSERT_EQ(std::strtof(cells[2 + c].c_str(), nullptr), static_cast<float>(rec.data.at(c, rows)));
    }
    ++rows;
  }
  EXPECT_EQ(comments, 6u);
  EXPECT_EQ(rows, 600u);
}

TEST(Replay, MatchesEmulatorRun) {
  TempDir tmp;
  DeviceConfig cfg{};
  const auto frames = emulate(load_scenario(test::scenario_path("chew-4321")), cfg, 1500);
  {
    SessionWriter w(tmp / "s", meta_for(cfg));
    w.append(calibrate(frames, cfg));
  }
  ReplaySource src(tmp / "s");
  EXPECT_EQ(src.config(), cfg);
  std::size_t i = 0;
  while (auto f = src.next_frame()) {
    ASSERT_LT(i, frames.size());
    EXPECT_EQ(f->seq, frames[i].seq);
    EXPECT_EQ(f->raw, frames[i].raw) << "frame " << i;
    ++i;
  }
  EXPECT_EQ(i, frames.size());
  EXPECT_TRUE(src.finished());
}

TEST(Replay, RecordReplayRecordIsByteIdentical) {
  TempDir tmp;
  const DeviceConfig cfg{};
  const auto frames = emulate(load_scenario(test::scenario_path("alpha-test")), cfg, 1000);
  {
    SessionWriter w(tmp / "a", meta_for(cfg));
    w.append(calibrate(frames, cfg));
  }
  ReplaySource src(tmp / "a");
  std::vector<SampleFrame> again;
  while (auto f = src.next_frame()) again.push_back(*f);
  {
    SessionWriter w(tmp / "b", src.recording().metadata);
    w.append(calibrate(again, src.config()));
  }
  EXPECT_EQ(slurp(tmp / "a" / kRecordingFile), slurp(tmp / "b" / kRecordingFile));
}

}  // namespace
}  // namespace jneeg
