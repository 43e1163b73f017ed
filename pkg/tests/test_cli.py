import hashlib
import json

import numpy as np
import pytest

from chainveil.cli import main
from chainveil.trace import DeviceProfile, ingest_csv, save_profiles, synth_trace, write_csv


@pytest.fixture
def profiles_file(tmp_path):
    profiles = [
        DeviceProfile("alpha", (0.4, 9.0), 0.02),
        DeviceProfile("beta", (3.0,), 0.02),
        DeviceProfile("gamma", (1.1, 0.2, 20.0), 0.02),
    ]
    path = tmp_path / "profiles.json"
    save_profiles(profiles, path)
    return path


@pytest.fixture
def trace_file(tmp_path, profiles_file):
    path = tmp_path / "trace.csv"
    assert main([
        "generate", "--profiles", str(profiles_file),
        "--duration", "600", "--seed", "5", "--out", str(path),
    ]) == 0
    return path


def run_ok(argv):
    assert main(argv) == 0


class TestGenerateIngest:
    def test_round_trip(self, tmp_path, trace_file):
        norm = tmp_path / "norm.csv"
        run_ok(["ingest", str(trace_file), "--blocklist", "", "--out", str(norm)])
        assert ingest_csv(trace_file, frozenset()) == ingest_csv(norm, frozenset())

    def test_generate_requires_seed(self, tmp_path, profiles_file, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["generate", "--profiles", str(profiles_file), "--duration", "60",
                  "--out", str(tmp_path / "t.csv")])
        assert exc.value.code == 2

    def test_builtin_generate(self, tmp_path):
        out = tmp_path / "b.csv"
        run_ok(["generate", "--builtin", "--duration", "400", "--seed", "1",
                "--jitter", "0.0", "--out", str(out)])
        tr = ingest_csv(out, frozenset())
        assert len(tr.devices) == 17

    def test_unknown_subcommand_is_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            main(["frobnicate"])
        assert exc.value.code == 2


class TestBuildVerify:
    def test_build_then_verify(self, tmp_path, trace_file, capsys):
        out = tmp_path / "ledgers"
        run_ok(["build", "--trace", str(trace_file), "--out-dir", str(out)])
        assert (out / "ledgers.jsonl").exists()
        assert (out / "sidecar.json").exists()
        assert (out / "provenance.json").exists()
        capsys.readouterr()
        assert main(["verify", "--ledgers", str(out / "ledgers.jsonl")]) == 0
        printed = capsys.readouterr().out
        assert "ok" in printed

    def test_verify_detects_tamper(self, tmp_path, trace_file, capsys):
        out = tmp_path / "ledgers"
        run_ok(["build", "--trace", str(trace_file), "--out-dir", str(out)])
        path = out / "ledgers.jsonl"
        lines = path.read_text().splitlines()
        obj = json.loads(lines[1])
        obj["timestamp"] += 5.0
        lines[1] = json.dumps(obj, separators=(",", ":"))
        path.write_text("\n".join(lines) + "\n")
        assert main(["verify", "--ledgers", str(path)]) == 1
        assert "FAIL" in capsys.readouterr().out

    def test_inputs_not_mutated(self, tmp_path, trace_file):
        digest = hashlib.sha256(trace_file.read_bytes()).hexdigest()
        run_ok(["build", "--trace", str(trace_file), "--out-dir", str(tmp_path / "l")])
        assert hashlib.sha256(trace_file.read_bytes()).hexdigest() == digest


class TestObfuscateAttack:
    def test_obfuscate_pipeline(self, tmp_path, trace_file):
        pipe = tmp_path / "pipe.json"
        pipe.write_text(json.dumps([
            {"transform": "aggregate", "params": {"packets_per_tx": 2}},
            {"transform": "merge", "params": {"devices_per_ledger": 2}},
            {"transform": "spoof", "params": {"ratio": 1.0}},
        ]))
        out = tmp_path / "obf"
        run_ok(["obfuscate", "--trace", str(trace_file), "--pipeline", str(pipe),
                "--seed", "9", "--out-dir", str(out)])
        assert main(["verify", "--ledgers", str(out / "ledgers.jsonl")]) == 0
        prov = json.loads((out / "provenance.json").read_text())
        assert [p["transform"] for p in prov] == ["aggregate", "merge", "spoof"]

    def test_obfuscate_requires_seed(self, tmp_path, trace_file):
        with pytest.raises(SystemExit) as exc:
            main(["obfuscate", "--trace", str(trace_file),
                  "--pipeline", str(tmp_path / "p.json"), "--out-dir", str(tmp_path / "o")])
        assert exc.value.code == 2

    def test_informed_attack_on_files(self, tmp_path, trace_file, capsys):
        out = tmp_path / "ledgers"
        run_ok(["build", "--trace", str(trace_file), "--out-dir", str(out)])
        report_path = tmp_path / "report.json"
        run_ok(["attack", "--ledgers", str(out / "ledgers.jsonl"),
                "--sidecar", str(out / "sidecar.json"), "--seed", "4",
                "--out", str(report_path)])
        report = json.loads(report_path.read_text())
        assert 0.9 <= report["accuracy"] <= 1.0
        assert report["meta"]["mode"] == "informed"

    def test_blind_attack_on_files(self, tmp_path, trace_file, profiles_file, capsys):
        home = tmp_path / "home"
        run_ok(["build", "--trace", str(trace_file), "--out-dir", str(home)])
        testbed_csv = tmp_path / "testbed.csv"
        run_ok(["generate", "--profiles", str(profiles_file), "--duration", "600",
                "--seed", "77", "--out", str(testbed_csv)])
        testbed = tmp_path / "testbed"
        run_ok(["build", "--trace", str(testbed_csv), "--out-dir", str(testbed)])
        capsys.readouterr()
        run_ok(["attack", "--ledgers", str(home / "ledgers.jsonl"),
                "--sidecar", str(home / "sidecar.json"), "--mode", "blind",
                "--train-ledgers", str(testbed / "ledgers.jsonl"),
                "--train-sidecar", str(testbed / "sidecar.json"), "--seed", "4"])
        report = json.loads(capsys.readouterr().out)
        assert report["accuracy"] > 0.8

    def test_blind_requires_train_files(self, tmp_path, trace_file):
        out = tmp_path / "ledgers"
        run_ok(["build", "--trace", str(trace_file), "--out-dir", str(out)])
        assert main(["attack", "--ledgers", str(out / "ledgers.jsonl"),
                     "--sidecar", str(out / "sidecar.json"), "--mode", "blind",
                     "--seed", "4"]) == 2


class TestSweepCli:
    def write_config(self, tmp_path, profiles_file, extra=None):
        cfg = {
            "trace": {"source": "profiles", "path": str(profiles_file), "duration": 900.0},
            "attack": {"mode": "informed"},
            "tree": {"max_depth": 8},
            "window": 3,
            "trials": 2,
            "base_seed": 21,
            "eval_cap": 40,
            "sweep": "delay",
            "values": [0.0, 1.0],
        }
        cfg.update(extra or {})
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(cfg))
        return path

    def test_sweep_deterministic_bytes(self, tmp_path, profiles_file):
        cfg = self.write_config(tmp_path, profiles_file)
        out1, out2 = tmp_path / "r1", tmp_path / "r2"
        run_ok(["sweep", "--config", str(cfg), "--out-dir", str(out1)])
        run_ok(["sweep", "--config", str(cfg), "--out-dir", str(out2)])
        assert (out1 / "sweep.csv").read_bytes() == (out2 / "sweep.csv").read_bytes()
        assert (out1 / "report.json").read_bytes() == (out2 / "report.json").read_bytes()

    def test_sweep_without_any_seed_is_error(self, tmp_path, profiles_file):
        cfg_path = self.write_config(tmp_path, profiles_file)
        cfg = json.loads(cfg_path.read_text())
        del cfg["base_seed"]
        cfg_path.write_text(json.dumps(cfg))
        assert main(["sweep", "--config", str(cfg_path), "--out-dir", str(tmp_path / "x")]) == 2

    def test_report_reemits_csv(self, tmp_path, profiles_file):
        cfg = self.write_config(tmp_path, profiles_file)
        out = tmp_path / "r"
        run_ok(["sweep", "--config", str(cfg), "--out-dir", str(out)])
        again = tmp_path / "again"
        run_ok(["report", "--in", str(out / "report.json"), "--out-dir", str(again)])
        assert (again / "sweep.csv").read_bytes() == (out / "sweep.csv").read_bytes()

    def test_module_error_exits_nonzero(self, tmp_path, profiles_file, capsys):
        cfg = self.write_config(tmp_path, profiles_file, {"pipeline": [
            {"transform": "merge", "params": {"devices_per_ledger": 2}},
            {"transform": "merge", "params": {"devices_per_ledger": 2}},
        ], "sweep": "run"})
        assert main(["sweep", "--config", str(cfg), "--out-dir", str(tmp_path / "x")]) == 1
        assert "stage 1" in capsys.readouterr().err
