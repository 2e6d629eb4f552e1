import json
import math
from pathlib import Path

import numpy as np
import pytest

from cfirl.cli import main
from cfirl.benchmarks import recovery_world_config
from cfirl.cf_gen import CfGenConfig, generate_candidates
from cfirl.nav_planner import Mission, save_mission
from cfirl.synth_world import gen_scene, load_scene, save_scene


def run(argv):
    return main(argv)


@pytest.fixture(scope="module")
def world_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("world")
    code = run(["gen-world", "--count", "6", "--seed", "3", "--out", str(out)])
    assert code == 0
    return out


def test_gen_world_outputs_and_manifest(world_dir):
    files = sorted(world_dir.glob("scene-*.json"))
    assert len(files) == 6
    manifest = json.loads((world_dir / "manifest.json").read_text())
    assert manifest["command"] == "gen-world"
    assert manifest["seeds"] == {"seed": 3}
    assert len(manifest["outputs"]) == 6


def test_gen_world_reproducible(tmp_path, world_dir):
    out2 = tmp_path / "again"
    assert run(["gen-world", "--count", "6", "--seed", "3", "--out", str(out2)]) == 0
    for f in sorted(world_dir.glob("scene-*.json")):
        assert (out2 / f.name).read_bytes() == f.read_bytes()


def test_gen_world_invalid_config_exits_2(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"terrain": [["a", 1.0], ["b", 2.0]]}))
    assert run(["gen-world", "--config", str(bad), "--count", "1",
                "--out", str(tmp_path / "w")]) == 2


def test_validate_scene_passes_generated_set(world_dir):
    assert run(["validate-scene", str(world_dir)]) == 0


def test_validate_scene_catches_corruption(tmp_path, world_dir):
    scene = load_scene(next(world_dir.glob("scene-*.json")))
    scene.terrain_index[scene.expert.states[1]] = 3
    scene.oracle = type(scene.oracle)(
        unit_costs=scene.oracle.unit_costs,
        elevation_penalty_per_m=scene.oracle.elevation_penalty_per_m,
        forbidden_mask=scene.terrain_index == 3,
    )
    scene.oracle_cost = scene.oracle.cell_costs(scene.terrain_index)
    bad = tmp_path / "scene-corrupt.json"
    save_scene(scene, bad)
    assert run(["validate-scene", str(bad)]) == 2


def test_train_writes_checkpoint_log_and_manifest(world_dir, tmp_path):
    out = tmp_path / "run" / "head.rw1"
    code = run(["train", "--scenes", str(world_dir), "--out", str(out),
                "--epochs", "2", "--seed", "5"])
    assert code == 0
    assert out.exists()
    log = out.with_suffix(".log.tsv")
    assert log.read_text().startswith("epoch\tloss")
    manifest = json.loads((out.parent / "manifest.json").read_text())
    assert manifest["command"] == "train"


def test_train_is_deterministic(world_dir, tmp_path):
    a = tmp_path / "a.rw1"
    b = tmp_path / "b.rw1"
    for out in (a, b):
        assert run(["train", "--scenes", str(world_dir), "--out", str(out),
                    "--epochs", "2", "--seed", "5"]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_train_alpha_requires_labels(world_dir, tmp_path):
    code = run(["train", "--scenes", str(world_dir), "--out", str(tmp_path / "x.rw1"),
                "--alpha", "0.5", "--epochs", "1"])
    assert code == 2


def test_train_alpha_with_labeled_scenes(world_dir, tmp_path):
    labeled_dir = tmp_path / "labeled"
    labeled_dir.mkdir()
    for f in sorted(world_dir.glob("scene-*.json")):
        scene = load_scene(f)
        cands = generate_candidates(scene.expert, CfGenConfig(seed=1),
                                    (scene.height, scene.width))
        scene.candidates = cands
        scene.counterfactual_labels = {c.id: c.side == "left" for c in cands.candidates}
        save_scene(scene, labeled_dir / f.name)
    code = run(["train", "--scenes", str(labeled_dir), "--out", str(tmp_path / "y.rw1"),
                "--alpha", "0.5", "--epochs", "2"])
    assert code == 0


def test_loop_oracle_mode_end_to_end(world_dir, tmp_path):
    out = tmp_path / "loop"
    code = run(["loop", "--scenes", str(world_dir), "--out", str(out),
                "--annotator", "oracle", "--max-rounds", "1", "--seed", "2",
                "--mu", "2.0", "--candidates", "4"])
    assert code == 0
    report = json.loads((out / "loop_report.json").read_text())
    assert report["phase_sequence"][0] == "I"
    assert (out / "final.rw1").exists()
    assert (out / "loop_summary.tsv").read_text().startswith("round\t")


def test_evaluate_missions(world_dir, tmp_path):
    ckpt = tmp_path / "head.rw1"
    assert run(["train", "--scenes", str(world_dir), "--out", str(ckpt),
                "--epochs", "12", "--seed", "0"]) == 0
    missions = tmp_path / "missions"
    missions.mkdir()
    for i, f in enumerate(sorted(world_dir.glob("scene-*.json"))[:2]):
        scene = load_scene(f)
        cell = scene.grid.cell_size
        sx, sy = (scene.start[1] + 0.5) * cell, (scene.start[0] + 0.5) * cell
        gx, gy = (scene.goal[1] + 0.5) * cell, (scene.goal[0] + 0.5) * cell
        mission = Mission(waypoints=[((sx + gx) / 2, (sy + gy) / 2)], final_goal=(gx, gy),
                          spacing_m=10.0)
        save_scene(scene, missions / f.name)
        save_mission(mission, missions / f"mission-{i:03d}.json", scene_file=f.name)
    out = tmp_path / "eval"
    code = run(["evaluate", "--checkpoint", str(ckpt), "--missions", str(missions),
                "--out", str(out), "--timeout", "60"])
    assert code == 0
    table = (out / "metrics.tsv").read_text()
    header = table.splitlines()[0].split("\t")
    assert header == ["mission", "AST", "%S", "NIR", "Dist", "TotalInt"]
    metrics = json.loads((out / "metrics.json").read_text())
    for row in metrics.values():
        assert set(row) == {"AST", "%S", "NIR", "Dist", "TotalInt"}
        assert row["NIR"] * row["Dist"] / 100 == pytest.approx(row["TotalInt"], abs=1e-9)


def test_evaluate_dimension_mismatch_exits_2(world_dir, tmp_path):
    ckpt = tmp_path / "narrow.rw1"
    from cfirl.reward_model import HeadConfig, init_params, save_checkpoint
    save_checkpoint(init_params(HeadConfig(kind="linear", in_channels=3), 0), ckpt)
    missions = tmp_path / "m2"
    missions.mkdir()
    f = sorted(world_dir.glob("scene-*.json"))[0]
    scene = load_scene(f)
    save_scene(scene, missions / f.name)
    save_mission(Mission(waypoints=[(1.0, 1.0)], final_goal=(2.0, 2.0)),
                 missions / "mission-000.json", scene_file=f.name)
    assert run(["evaluate", "--checkpoint", str(ckpt), "--missions", str(missions),
                "--out", str(tmp_path / "e2")]) == 2


def test_loop_human_service_mode(world_dir, tmp_path):
    import json as js
    import threading
    import time
    import urllib.request

    port = 18765
    url = f"http://127.0.0.1:{port}"
    stop = threading.Event()

    def annotator():
        # plays the human: labels every open session's candidates as counterfactual
        while not stop.is_set():
            try:
                with urllib.request.urlopen(f"{url}/api/v1/sessions", timeout=1) as r:
                    rows = js.loads(r.read())["sessions"]
            except Exception:
                time.sleep(0.2)
                continue
            for row in rows:
                if row["status"] != "open":
                    continue
                try:
                    with urllib.request.urlopen(f"{url}/api/v1/sessions/{row['session_id']}",
                                                timeout=1) as r:
                        doc = js.loads(r.read())
                    payload = {"labels": [{"candidate_id": it["id"], "counterfactual": True}
                                          for it in doc["candidates"]["items"]]}
                    req = urllib.request.Request(
                        f"{url}/api/v1/sessions/{row['session_id']}/labels",
                        data=js.dumps(payload).encode(),
                        headers={"Content-Type": "application/json"}, method="POST")
                    urllib.request.urlopen(req, timeout=2).read()
                except Exception:
                    pass
            time.sleep(0.2)

    thread = threading.Thread(target=annotator, daemon=True)
    thread.start()
    try:
        out = tmp_path / "human-loop"
        code = run(["loop", "--scenes", str(world_dir), "--out", str(out),
                    "--annotator", "human_service", "--port", str(port),
                    "--max-rounds", "1", "--seed", "2", "--mu", "2.0",
                    "--candidates", "4", "--poll-seconds", "0.3"])
    finally:
        stop.set()
        thread.join(timeout=3)
    assert code == 0
    report = json.loads((out / "loop_report.json").read_text())
    sessions = sorted((out / "sessions").glob("*.json"))
    if report["rounds"]:
        assert sessions, "human rounds persist their sessions"
        assert all(json.loads(s.read_text())["status"] == "complete" for s in sessions)
