from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np
import pytest

from trograph import se3
from trograph.cli import EXIT_INVALID, EXIT_OK, main
from trograph.kinematics import forward_kinematics, load_hand

SMALL_CONFIG = {
    "graph": {"P": 8, "L_pad": 8, "n_points": 256},
    "model": {"d": 16, "n_layers": 2},
    "training": {"epochs": 4, "batch_size": 2, "lr": 1e-3},
}

TIMING_FILES = {"sample_timing.json", "closed_loop_timing.csv"}


def run(*argv) -> int:
    return main([str(a) for a in argv])


def workflow(root: Path) -> Path:
    """Every command once, with seed 7, writing under ``root``."""
    root.mkdir(parents=True, exist_ok=True)
    cfg = root / "config.json"
    assert run("init-config", "--out", root / "default_config.json") == EXIT_OK
    cfg.write_text(json.dumps(SMALL_CONFIG))
    c = ("--config", cfg, "--seed", 7)
    assert run("gen-hand", *c, "--template", "two_finger", "--out", root / "hand") == EXIT_OK
    assert run("gen-hand", *c, "--template", "two_finger", "--scale", 1.2, "--out", root / "hand_big") == EXIT_OK
    assert run("gen-data", *c, "--n-objects", 3, "--out", root / "ds") == EXIT_OK
    demo = root / "ds" / "demos" / "00000.json"
    obj = root / "ds" / "objects" / (json.loads(demo.read_text())["object"]["name"] + ".xyz")
    hand = root / "hand"
    assert run("build-graph", *c, "--object", obj, "--hand", hand, "--grasp", demo, "--out", root / "graph.json") == EXIT_OK
    assert run(
        "sample", *c, "--oracle", "--grasp", demo, "--hand", hand, "--object", obj, "--n", 2,
        "--out", root / "sample_oracle.json", "--timing", root / "sample_timing.json",
    ) == EXIT_OK
    assert run("train", *c, "--dataset", root / "ds", "--out-checkpoint", root / "model.ckpt") == EXIT_OK
    assert run("sample", *c, "--checkpoint", root / "model.ckpt", "--hand", hand, "--object", obj, "--out", root / "sample_model.json") == EXIT_OK

    h = load_hand(hand)
    d = json.loads(demo.read_text())
    targets = np.asarray(d["base"]) @ forward_kinematics(h, np.asarray(d["q"]))
    (root / "targets.json").write_text(json.dumps({"targets": targets.tolist()}))
    assert run("ik", *c, "--hand", hand, "--targets", root / "targets.json", "--out", root / "ik.json") == EXIT_OK
    assert run("similarity", *c, "--hand-a", hand, "--hand-b", root / "hand_big", "--out", root / "similarity.json") == EXIT_OK
    assert run(
        "closed-loop", *c, "--oracle", "--hand", hand, "--object", obj, "--grasp", demo,
        "--report", root / "closed_loop.csv", "--timing", root / "closed_loop_timing.csv",
    ) == EXIT_OK
    return root


def snapshot(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file() and p.name not in TIMING_FILES}


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    return workflow(base / "a"), workflow(base / "b")


def test_outputs_bit_identical_across_runs(runs):
    a, b = (snapshot(r) for r in runs)
    assert a.keys() == b.keys()
    assert len(a) > 20
    for k in a:
        assert a[k] == b[k], k


def test_timing_kept_out_of_reports(runs):
    a, _ = runs
    assert json.loads((a / "sample_timing.json").read_text())["seconds_per_grasp"]
    assert "latency" not in (a / "closed_loop.csv").read_text()


def test_oracle_sample_recovers_demo(runs):
    a, _ = runs
    doc = json.loads((a / "sample_oracle.json").read_text())
    assert doc["mode"] == "oracle" and len(doc["grasps"]) == 2
    demo = json.loads((a / "ds" / "demos" / "00000.json").read_text())
    for g in doc["grasps"]:
        np.testing.assert_allclose(g["q"], demo["q"], atol=1e-6)
        assert max(g["fingertip_distance"]) < 0.01


def test_similarity_output(runs):
    a, _ = runs
    doc = json.loads((a / "similarity.json").read_text())
    assert doc["S_L"] == pytest.approx(0.8, abs=1e-12)
    assert doc["S_J"] == 1.0


def test_ik_output(runs):
    a, _ = runs
    sol = json.loads((a / "ik.json").read_text())["solutions"][0]
    assert sol["residual"] < 1e-6 and sol["converged"] and sol["error"] is None


def test_closed_loop_oracle_report(runs):
    a, _ = runs
    rows = list(csv.DictReader((a / "closed_loop.csv").open()))
    assert len(rows) == 30
    for r in rows:
        assert r["status"] == "ok"
        assert float(r["error"]) <= float(r["displacement"]) + 1e-6


def test_train_trace_and_sidecar(runs):
    a, _ = runs
    rows = list(csv.DictReader((a / "model.ckpt.loss.csv").open()))
    assert len(rows) == 4 * 2  # 3 demos, batch 2, 4 epochs
    side = json.loads(Path(str(a / "model.ckpt") + ".json").read_text())
    assert side["extra"]["P"] == 8 and side["extra"]["L_pad"] == 8


def test_default_config_round_trips(runs, tmp_path):
    a, _ = runs
    assert run("init-config", "--config", a / "default_config.json", "--out", tmp_path / "c.json") == EXIT_OK
    assert (tmp_path / "c.json").read_bytes() == (a / "default_config.json").read_bytes()


def test_t_star_snap_notice(runs, tmp_path, capsys):
    a, _ = runs
    demo = a / "ds" / "demos" / "00000.json"
    obj = next((a / "ds" / "objects").glob("*.xyz"))
    guide = tmp_path / "guide.json"
    d = json.loads(demo.read_text())
    guide.write_text(json.dumps({"q": d["q"], "base": d["base"]}))
    code = run(
        "sample", "--config", a / "config.json", "--oracle", "--grasp", demo, "--hand", a / "hand", "--object", obj,
        "--guide-pose", guide, "--t-star", 140, "--out", tmp_path / "s.json",
    )
    assert code == EXIT_OK
    assert "snapped to grid step 150" in capsys.readouterr().err


class TestExitCodes:
    def test_malformed_urdf(self, runs, tmp_path):
        a, _ = runs
        bad = tmp_path / "badhand"
        bad.mkdir()
        (bad / "hand.urdf").write_text("<robot name='x'><link name='a'/>")
        assert run("similarity", "--hand-a", bad, "--hand-b", a / "hand") == EXIT_INVALID

    def test_missing_hand_dir(self, tmp_path):
        assert run("similarity", "--hand-a", tmp_path, "--hand-b", tmp_path) == EXIT_INVALID

    def test_bad_config(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"schedule": {"beta_min": 0.5, "beta_max": 0.1}}))
        assert run("init-config", "--config", cfg, "--out", tmp_path / "o.json") == EXIT_INVALID
        cfg.write_text("{not json")
        assert run("init-config", "--config", cfg, "--out", tmp_path / "o.json") == EXIT_INVALID

    def test_bad_grasp_shape(self, runs, tmp_path):
        a, _ = runs
        g = tmp_path / "g.json"
        g.write_text(json.dumps({"q": [0.0]}))
        obj = next((a / "ds" / "objects").glob("*.xyz"))
        assert run("build-graph", "--object", obj, "--hand", a / "hand", "--grasp", g, "--out", tmp_path / "x.json") == EXIT_INVALID

    def test_missing_checkpoint(self, runs, tmp_path):
        a, _ = runs
        obj = next((a / "ds" / "objects").glob("*.xyz"))
        code = run("sample", "--checkpoint", tmp_path / "none.ckpt", "--hand", a / "hand", "--object", obj, "--out", tmp_path / "s.json")
        assert code == EXIT_INVALID

    def test_not_a_dataset(self, tmp_path):
        assert run("train", "--dataset", tmp_path, "--out-checkpoint", tmp_path / "m.ckpt") == EXIT_INVALID

    def test_bench_empty_suite(self, tmp_path):
        assert run("bench", "--suite", ",", "--out", tmp_path / "b.json") == EXIT_INVALID
        assert run("bench", "--suite", "warp", "--out", tmp_path / "b.json") == EXIT_INVALID

    def test_usage_error(self):
        assert run("sample") == 2
        assert run("no-such-command") == 2


def test_bench_report_schema(tmp_path):
    assert run("bench", "--suite", "graph,ik", "--repeats", 2, "--n", 2, "--out", tmp_path / "b.json") == EXIT_OK
    doc = json.loads((tmp_path / "b.json").read_text())
    assert doc["schema_version"] == 1
    assert set(doc["suites"]) == {"graph", "ik"}
    for entry in doc["suites"].values():
        assert set(entry) == {"unit", "repeats", "mean", "std", "n_per_repeat"}
        assert len(entry["repeats"]) == 2 and entry["mean"] > 0


def test_guided_sample_with_checkpoint(runs, tmp_path):
    a, _ = runs
    obj = next((a / "ds" / "objects").glob("*.xyz"))
    r = se3.so3_exp(np.array([0.0, 0.0, 0.3]))
    guide = tmp_path / "guide.json"
    guide.write_text(json.dumps({"r_init": r.tolist()}))
    code = run(
        "sample", "--config", a / "config.json", "--checkpoint", a / "model.ckpt", "--hand", a / "hand", "--object", obj,
        "--guide-pose", guide, "--out", tmp_path / "s.json",
    )
    assert code == EXIT_OK
    assert json.loads((tmp_path / "s.json").read_text())["grasps"]


def test_bench_non_timing_fields_deterministic(tmp_path):
    docs = []
    for name in ("a.json", "b.json"):
        assert run("bench", "--suite", "graph", "--repeats", 1, "--n", 1, "--seed", 3, "--out", tmp_path / name) == EXIT_OK
        doc = json.loads((tmp_path / name).read_text())
        for entry in doc["suites"].values():
            for k in ("repeats", "mean", "std"):
                entry.pop(k)
        docs.append(doc)
    assert docs[0] == docs[1]
