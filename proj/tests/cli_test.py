#!/usr/bin/env python3
# Copyright 2026 The jneeg Authors
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

"""End-to-end checks of the jneeg binary: exit codes, session files and
JSON outputs against the shipped schemas.

    python3 tests/cli_test.py <path-to-jneeg>
"""

import csv
import json
import os
import pathlib
import socket
import subprocess
import sys
import tempfile
import time
import unittest
import urllib.request

import jsonschema
from referencing import Registry, Resource

ROOT = pathlib.Path(__file__).resolve().parent.parent
SCHEMAS = ROOT / "schemas"
SCENARIOS = ROOT / "scenarios"
BIN = None


def registry():
    res = []
    for p in SCHEMAS.glob("*.json"):
        doc = json.loads(p.read_text())
        r = Resource.from_contents(doc)
        res.append((doc["$id"], r))
        res.append((p.name, r))
    return Registry().with_resources(res)


REGISTRY = registry()


def validate(doc, schema_name):
    schema = json.loads((SCHEMAS / schema_name).read_text())
    jsonschema.Draft202012Validator(schema, registry=REGISTRY).validate(doc)


def run(*args, env=None, check=None):
    e = dict(os.environ, SOURCE_DATE_EPOCH="1700000000")
    if env:
        e.update(env)
    p = subprocess.run([BIN, *map(str, args)], capture_output=True, text=True, env=e, timeout=300)
    if check is not None and p.returncode != check:
        raise AssertionError(f"exit {p.returncode} (wanted {check}) for {args}\n{p.stderr}")
    return p


class Cli(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.tmp = tempfile.TemporaryDirectory()
        cls.dir = pathlib.Path(cls.tmp.name)
        for name in ("alpha-test", "blink-4321", "chew-4321"):
            run("acquire", "--source", "emu", "--scenario", SCENARIOS / f"{name}.json", "--out",
                cls.dir / name, check=0)

    @classmethod
    def tearDownClass(cls):
        cls.tmp.cleanup()

    def analyze(self, *args):
        p = run("analyze", *args, check=0)
        doc = json.loads(p.stdout)
        validate(doc, "analyze.schema.json")
        return doc

    # -- exit codes -----------------------------------------------------------

    def test_usage_errors_exit_2(self):
        p = run("acquire", "--scenario", self.dir / "missing.json")
        self.assertEqual(p.returncode, 2)
        self.assertIn("missing.json", p.stderr)
        self.assertEqual(run("acquire", "--bogus").returncode, 2)
        self.assertEqual(run().returncode, 2)
        self.assertEqual(run("analyze", self.dir / "nope").returncode, 2)
        self.assertEqual(run("analyze", self.dir / "alpha-test", "--band", "12").returncode, 2)
        self.assertEqual(run("analyze", self.dir / "alpha-test", "--detect", "sneezes").returncode, 2)
        self.assertEqual(run("analyze", self.dir / "alpha-test", "--channel", "Oz").returncode, 2)
        self.assertEqual(run("acquire", "--source", "tape").returncode, 2)
        self.assertEqual(run("impedance", "--channel", "Fz,Xx").returncode, 2)
        self.assertEqual(run("--help").returncode, 0)

    def test_runtime_errors_exit_1(self):
        bad = self.dir / "bad-config.json"
        bad.write_text(json.dumps({"sample_rate": 333}))
        self.assertEqual(run("acquire", "--config", bad, "--duration", "1").returncode, 1)
        broken = self.dir / "broken"
        broken.mkdir()
        (broken / "recording.neurec").write_bytes(b"NREC\x01\x00garbage")
        self.assertEqual(run("analyze", broken).returncode, 1)

    # -- acquire --------------------------------------------------------------

    def test_duration_sets_sample_count(self):
        doc = self.analyze(self.dir / "alpha-test")
        self.assertEqual(doc["samples"], 4000)
        p = run("acquire", "--scenario", SCENARIOS / "impedance-sweep.json", "--duration", "2", "--json", check=0)
        summary = json.loads(p.stdout)
        validate(summary, "acquire.schema.json")
        self.assertEqual(summary["samples"], 500)
        self.assertIsNone(summary["session"])

    def test_unbounded_scenario_needs_duration(self):
        self.assertEqual(run("acquire", "--scenario", SCENARIOS / "impedance-sweep.json").returncode, 2)

    def test_deterministic_given_seed(self):
        def rec(name, *extra):
            run("acquire", "--scenario", SCENARIOS / "alpha-test.json", "--duration", "4", "--out",
                self.dir / name, *extra, check=0)
            return (self.dir / name / "recording.neurec").read_bytes()
        def blocks(raw):
            # Session ids differ with the directory name; skip the header.
            return raw[10 + int.from_bytes(raw[6:10], "little") + 4 :]
        a, b, c = rec("det-a"), rec("det-b"), rec("det-c", "--seed", "99")
        self.assertEqual(blocks(a), blocks(b))
        self.assertNotEqual(blocks(a), blocks(c))

    def test_replay_rerecord_is_byte_identical(self):
        src = self.dir / "blink-4321"
        out = self.dir / "blink-again"
        run("acquire", "--source", f"replay:{src}", "--out", out, check=0)
        self.assertEqual((src / "recording.neurec").read_bytes(), (out / "recording.neurec").read_bytes())
        self.assertEqual(run("acquire", "--source", f"replay:{src}", "--scenario", "x.json").returncode, 2)

    def test_config_file(self):
        cfg = {"sample_rate": 250, "gain": 12, "leadoff": {"frequency_hz": 7.8, "channels": [0, 1]}}
        validate(cfg, "config.schema.json")
        path = self.dir / "cfg.json"
        path.write_text(json.dumps(cfg))
        run("acquire", "--config", path, "--duration", "1", "--out", self.dir / "cfg-session", check=0)
        raw = (self.dir / "cfg-session" / "recording.neurec").read_bytes()
        meta_len = int.from_bytes(raw[6:10], "little")
        meta = json.loads(raw[10 : 10 + meta_len])
        self.assertTrue(all(ch["gain"] == 12 for ch in meta["config"]["channels"]))
        validate(meta["config"], "config.schema.json")

    def test_serve_status_over_http(self):
        with socket.socket() as s:
            s.bind(("127.0.0.1", 0))
            port = s.getsockname()[1]
        proc = subprocess.Popen([BIN, "acquire", "--source", f"replay:{self.dir / 'alpha-test'}", "--serve",
                                 "--duration", "3"], env=dict(os.environ, JNEEG_PORT=str(port)),
                                stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True)
        try:
            status = None
            deadline = time.time() + 10
            while time.time() < deadline and status is None:
                try:
                    with urllib.request.urlopen(f"http://127.0.0.1:{port}/status", timeout=2) as r:
                        status = json.loads(r.read())
                except OSError:
                    time.sleep(0.1)
            self.assertIsNotNone(status, "no /status response")
            validate(status, "status.schema.json")
            self.assertEqual(status["source"], "replay")
            self.assertIn(status["mode"], ("replay", "idle"))
            out, err = proc.communicate(timeout=20)
            self.assertEqual(proc.returncode, 0, err)
            self.assertIn("samples  750", out)
        finally:
            if proc.poll() is None:
                proc.kill()

    # -- impedance ------------------------------------------------------------

    def test_impedance_json(self):
        p = run("impedance", "--scenario", SCENARIOS / "impedance-sweep.json", "--json", check=0)
        doc = json.loads(p.stdout)
        validate(doc, "impedance.schema.json")
        truth = json.loads((SCENARIOS / "impedance-sweep.json").read_text())["impedance_ohms"]
        self.assertEqual(len(doc["readings"]), 8)
        for r in doc["readings"]:
            z = truth[r["channel"]]
            if z > 0:
                self.assertAlmostEqual(r["ohms"], z, delta=0.05 * z)
            else:
                self.assertLess(r["ohms"], 500)
        sub = json.loads(run("impedance", "--channel", "Fz,Pz", "--json", check=0).stdout)
        self.assertEqual([r["label"] for r in sub["readings"]], ["Fz", "Pz"])
        table = run("impedance", "--scenario", SCENARIOS / "impedance-sweep.json", check=0).stdout
        self.assertIn("open", table)

    # -- analyze --------------------------------------------------------------

    def test_blink_groups(self):
        emit = self.dir / "emit-blink"
        doc = self.analyze(self.dir / "blink-4321", "--detect", "blinks", "--emit", emit)
        self.assertEqual(doc["detect"]["groups"], [4, 3, 2, 1])
        events = json.loads((emit / "events.json").read_text())
        validate(events, "events.schema.json")
        self.assertEqual(events, doc["detect"])
        with open(emit / "filtered.csv") as f:
            rows = list(csv.reader(f))
        self.assertEqual(rows[0][:3], ["index", "t_s", "F7"])
        self.assertEqual(len(rows) - 1, 23 * 250)

    def test_chew_groups(self):
        doc = self.analyze(self.dir / "chew-4321", "--detect", "chews")
        self.assertEqual(doc["detect"]["groups"], [4, 3, 2, 1])
        self.assertTrue(all(e["kind"] == "chew" for e in doc["detect"]["events"]))

    def test_alpha_band_ratio(self):
        emit = self.dir / "emit-band"
        doc = self.analyze(self.dir / "alpha-test", "--band", "8:12", "--emit", emit)
        self.assertGreaterEqual(doc["band"]["closed_open_ratio"], 2.0)
        # Independent check from the emitted series: scripted closed span is [8, 16) s.
        with open(emit / "band_power.csv") as f:
            rows = list(csv.DictReader(f))
        self.assertEqual(len(rows), 16)
        closed = [float(r["power_uv2"]) for r in rows if int(r["start"]) >= 8 * 250]
        opened = [float(r["power_uv2"]) for r in rows if 250 <= int(r["start"]) and int(r["end"]) <= 8 * 250]
        self.assertGreaterEqual(sum(closed) / len(closed) / (sum(opened) / len(opened)), 2.0)

    def test_alpha_detect(self):
        doc = self.analyze(self.dir / "alpha-test", "--detect", "alpha")
        wins = doc["detect"]["windows"]
        scripted = [w for w in wins if w["start"] >= 250 and (w["end"] <= 2000 or w["start"] >= 2000)]
        right = sum((w["state"] == "eyes-closed") == (w["start"] >= 2000) for w in scripted)
        self.assertGreaterEqual(right / len(scripted), 0.95)

    def test_scalogram_peak(self):
        emit = self.dir / "emit-cwt"
        doc = self.analyze(self.dir / "alpha-test", "--cwt", "--emit", emit)
        self.assertAlmostEqual(doc["cwt"]["closed_peak_hz"], 10.0, delta=0.5)
        with open(emit / "scalogram.csv") as f:
            rows = list(csv.reader(f))
        cols = [int(c) for c in rows[0][1:]]
        span = [i for i, c in enumerate(cols) if 9 * 250 <= c < 15 * 250]
        best, best_hz = -1.0, None
        for row in rows[1:]:
            vals = [float(row[1 + i]) for i in span if row[1 + i] != ""]
            if vals and sum(vals) / len(vals) > best:
                best, best_hz = sum(vals) / len(vals), float(row[0])
        self.assertAlmostEqual(best_hz, 10.0, delta=0.5)

    def test_shipped_scenarios_validate(self):
        for p in SCENARIOS.glob("*.json"):
            validate(json.loads(p.read_text()), "scenario.schema.json")


if __name__ == "__main__":
    BIN = sys.argv.pop(1)
    unittest.main(verbosity=2)
