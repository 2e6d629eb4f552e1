"""Acceptance suite: one test per acceptance criterion, at stated tolerances.

Run with `pytest tests/test_acceptance.py -v -s` to see one PASS line per
criterion. The counterfactual-benefit criterion runs the full active loop
over 5 seeds and takes the longest.
"""

import json
import math
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import build_scene
from cfirl.active_loop import LoopConfig, hausdorff, rollout_policy, run_active_loop
from cfirl.benchmarks import (
    ambiguity_mission,
    make_ambiguity_scene,
    recovery_world_config,
)
from cfirl.cf_gen import CfGenConfig
from cfirl.cf_irl import (
    TrainConfig,
    bradley_terry_prob,
    irl_reward_gradient,
    phase1_config,
    phase3_config,
    scene_loss_and_grad,
    suboptimal_visitation,
    train,
)
from cfirl.grid_mdp import (
    ACTIONS,
    GridMDP,
    VisitationMap,
    empirical_visitation,
    greedy_rollout,
    policy_visitation,
    soft_value_iteration,
)
from cfirl.nav_planner import (
    Mission,
    Pose,
    SimConfig,
    arc_cost,
    generate_arcs,
    simulate_mission,
    time_optimal_velocity,
    transform_arc,
)
from cfirl.reward_model import HeadConfig, forward, init_params
from cfirl.synth_world import gen_scene
from test_grid_mdp import enum_visitation
from test_cf_irl import frozen_pi_loss, label_corridor_candidate_small


def report(name: str, ok: bool, detail: str = "") -> None:
    print(f"\nACCEPTANCE {'PASS' if ok else 'FAIL'}: {name} {detail}")
    assert ok, f"{name}: {detail}"


# ---------------------------------------------------------------------------
# 1. visitation correctness
# ---------------------------------------------------------------------------

def test_acceptance_visitation_correctness():
    started = time.time()
    rng = np.random.default_rng(0)
    worst = 0.0
    for case in range(100):
        h, w = int(rng.integers(2, 5)), int(rng.integers(2, 5))
        mdp = GridMDP(h, w, 0.95)
        goal = (int(rng.integers(h)), int(rng.integers(w)))
        start = (int(rng.integers(h)), int(rng.integers(w)))
        horizon = int(rng.integers(1, 6))
        rewards = rng.uniform(-1, 1, size=(h, w))
        pol = soft_value_iteration(rewards, goal, mdp, iters=8, temperature=1.0)
        vis = policy_visitation(pol, start, goal, mdp, horizon=horizon)
        oracle = enum_visitation(pol.probs, start, goal, 0.95, horizon)
        worst = max(worst, float(np.max(np.abs(vis.mass - oracle))))

        # empirical visitation against the direct geometric series
        states = [start]
        for _ in range(int(rng.integers(1, 7))):
            moves = [(states[-1][0] + dr, states[-1][1] + dc) for dr, dc in ACTIONS
                     if mdp.in_bounds(states[-1][0] + dr, states[-1][1] + dc)]
            states.append(moves[rng.integers(len(moves))])
        from cfirl.grid_mdp import Trajectory
        traj = Trajectory(tuple(states))
        emp = empirical_visitation(traj, mdp)
        expected = np.zeros((h, w, 9))
        for t, a in enumerate(traj.actions()):
            r, c = traj.states[t]
            expected[r, c, a] += 0.05 * 0.95**t
        gr, gc = traj.states[-1]
        expected[gr, gc, 8] += 0.95 ** (len(traj) - 1)
        worst = max(worst, float(np.max(np.abs(emp.mass - expected))))
    elapsed = time.time() - started
    report("visitation correctness (100 cases vs enumeration)",
           worst <= 1e-9 and elapsed < 10.0,
           f"max abs err {worst:.2e}, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 2. gradient fidelity
# ---------------------------------------------------------------------------

def test_acceptance_gradient_fidelity():
    started = time.time()
    t = np.zeros((6, 6), dtype=np.int64)
    t[3:, :] = 1
    t[0, 4] = 2
    worst_irl, worst_raw = 0.0, 0.0
    for kind in ("linear", "msfcn"):
        scene = build_scene(t, start=(0, 0), goal=(5, 5))
        label_corridor_candidate_small(scene)
        if kind == "linear":
            head = HeadConfig(kind="linear", in_channels=scene.grid.channel_count)
        else:
            head = HeadConfig(kind="msfcn", in_channels=scene.grid.channel_count,
                              prepool=(6, 5), skip=(5, 4), trunk=(5, 6), postpool=(10,))
        params = init_params(head, seed=3)
        cfg = TrainConfig(alpha=0.5, epochs=1)
        _, grads, _ = scene_loss_and_grad(scene, params, cfg, strict_alpha=False)

        from cfirl.grid_mdp import policy_visitation as pv, soft_value_iteration as svi
        mdp = GridMDP(6, 6, cfg.discount)
        pol = svi(forward(scene.grid, params), scene.goal, mdp, iters=cfg.horizon,
                  temperature=cfg.temperature)
        rho_pi_moves = pv(pol, scene.start, scene.goal, mdp, cfg.horizon).move_marginal()

        rng = np.random.default_rng(1)
        step = 1e-5
        for name, tensor in params.tensors.items():
            flat = tensor.reshape(-1)
            idxs = rng.choice(flat.size, size=min(8, flat.size), replace=False)
            for i in idxs:
                orig = flat[i]
                flat[i] = orig + step
                hi = frozen_pi_loss(scene, params, cfg, rho_pi_moves)
                flat[i] = orig - step
                lo = frozen_pi_loss(scene, params, cfg, rho_pi_moves)
                flat[i] = orig
                fd = (hi - lo) / (2 * step)
                an = grads[name].reshape(-1)[i]
                worst_irl = max(worst_irl, abs(an - fd) / max(1e-3, abs(an), abs(fd)))

        # raw forward/backward gradient check
        from cfirl.reward_model import backward
        upstream = np.random.default_rng(2).normal(size=(6, 6))
        raw = backward(scene.grid, params, upstream)
        for name, tensor in params.tensors.items():
            flat = tensor.reshape(-1)
            idxs = np.random.default_rng(3).choice(flat.size, size=min(8, flat.size), replace=False)
            for i in idxs:
                orig = flat[i]
                flat[i] = orig + 1e-6
                hi = float(np.sum(upstream * forward(scene.grid, params)))
                flat[i] = orig - 1e-6
                lo = float(np.sum(upstream * forward(scene.grid, params)))
                flat[i] = orig
                fd = (hi - lo) / 2e-6
                an = raw[name].reshape(-1)[i]
                worst_raw = max(worst_raw, abs(an - fd) / max(1e-3, abs(an), abs(fd)))
    elapsed = time.time() - started
    report("gradient fidelity (stop-gradient IRL + raw head)",
           worst_irl <= 1e-3 and worst_raw <= 1e-4 and elapsed < 60.0,
           f"irl rel err {worst_irl:.2e}, raw rel err {worst_raw:.2e}, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 3. formula endpoints
# ---------------------------------------------------------------------------

def test_acceptance_formula_endpoints():
    rng = np.random.default_rng(4)
    def rand_vis():
        mass = rng.uniform(0, 1, size=(5, 5, 9))
        return VisitationMap(mass / mass.sum())
    rho_e, rho_s, rho_pi = rand_vis(), rand_vis(), rand_vis()
    g0 = irl_reward_gradient(rho_e, rho_s, rho_pi, 0.0)
    g1 = irl_reward_gradient(rho_e, rho_s, rho_pi, 1.0)
    apprenticeship = np.array_equal(g0, rho_e.move_marginal() - rho_pi.move_marginal())
    preference = np.allclose(g1, rho_e.move_marginal() - rho_s.move_marginal(), atol=0)
    bt = bradley_terry_prob(1.0, 0.0, 0.0, 0.5)
    bt_ok = abs(bt - 0.731059) <= 1e-6
    report("formula endpoints (alpha 0/1 gradients, Bradley-Terry value)",
           apprenticeship and preference and bt_ok,
           f"BT(1,0,0,0.5) = {bt:.7f}")


# ---------------------------------------------------------------------------
# 4. oracle reward recovery
# ---------------------------------------------------------------------------

def test_acceptance_oracle_reward_recovery():
    started = time.time()
    cfg = recovery_world_config(seed=1)
    scenes = [gen_scene(cfg, s) for s in range(250)]
    train_scenes, held = scenes[:200], scenes[200:]
    head = HeadConfig(kind="linear", in_channels=scenes[0].grid.channel_count)
    params = init_params(head, seed=0)
    params, _ = train(train_scenes, params, phase1_config(seed=0))
    hits = 0
    for scene in held:
        roll = rollout_policy(scene, params, horizon=110)
        hits += hausdorff(roll, scene.expert) <= 1.0
    elapsed = time.time() - started
    rate = hits / len(held)
    report("oracle reward recovery (Phase I linear head, 50 held-out)",
           rate >= 0.9 and elapsed < 600.0,
           f"hit rate {rate:.0%} ({hits}/{len(held)}), {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# 5. counterfactual benefit
# ---------------------------------------------------------------------------

def test_acceptance_counterfactual_benefit():
    started = time.time()
    horizon = 65
    results = []
    for seed in range(5):
        scenes = [make_ambiguity_scene(i, seed) for i in range(100)]
        held = [make_ambiguity_scene(i, seed) for i in range(300, 348) if i % 3 == 0]
        head = HeadConfig(kind="linear", in_channels=scenes[0].grid.channel_count)
        loop_cfg = LoopConfig(
            convergence_eps=0.05, max_rounds=3,
            phase1=phase1_config(horizon=horizon, seed=seed),
            phase3=phase3_config(horizon=horizon, seed=seed),
            cf=CfGenConfig(num_candidates=10, mu=7.0, sigma=2.0, seed=seed),
            head=head, rollout_horizon=140, seed=seed,
        )
        params_final, loop_report = run_active_loop(scenes, loop_cfg)
        baseline = init_params(head, seed=seed)
        baseline, _ = train(scenes, baseline, loop_cfg.phase1)

        nir = {}
        for tag, p in (("base", baseline), ("final", params_final)):
            total_int, total_dist = 0, 0.0
            for scene in held:
                mission = ambiguity_mission(scene)
                rep = simulate_mission(scene, p, mission, SimConfig(mission_timeout=90.0))
                total_int += rep.total_interventions
                total_dist += rep.distance
            nir[tag] = total_int / (total_dist / 100.0) if total_dist else 0.0
        h_red = 1 - loop_report.final_mean_hausdorff / loop_report.baseline_mean_hausdorff
        n_red = 1 - nir["final"] / nir["base"] if nir["base"] > 0 else 0.0
        results.append((seed, loop_report.baseline_mean_hausdorff,
                        loop_report.final_mean_hausdorff, h_red, nir["base"], nir["final"], n_red))
        print(f"\n  seed {seed}: H {results[-1][1]:.2f}->{results[-1][2]:.2f} ({h_red:+.0%}), "
              f"NIR {nir['base']:.2f}->{nir['final']:.2f} ({n_red:+.0%})")
    elapsed = time.time() - started
    ok = all(h >= 0.5 and n >= 0.5 for _, _, _, h, _, _, n in results) and elapsed < 1800.0
    detail = "; ".join(f"s{s}: H{h:+.0%}/NIR{n:+.0%}" for s, _, _, h, _, _, n in results)
    report("counterfactual benefit (>=50% on both metrics, all 5 seeds)", ok,
           f"{detail}; {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# 6. planner facts
# ---------------------------------------------------------------------------

def test_acceptance_planner_facts():
    arcs = generate_arcs(31, 1.0, 6.0)
    arcs_ok = len(arcs) == 31 and sum(a.curvature == 0.0 for a in arcs) == 1

    c = 0.4321
    cm = np.full((300, 300), c)
    pose = Pose(7.0, 7.0, 0.2)
    straight = next(a for a in arcs if a.curvature == 0.0)
    end = transform_arc(straight, pose)[-1]
    series = arc_cost(straight, cm, 0.1, pose, (end[0], end[1]))
    series_ok = abs(series - c * (1 - 0.95**30) / 0.05) <= 1e-9

    from test_nav_planner import brute_force_subgoal
    from cfirl.nav_planner import select_subgoal
    rng = np.random.default_rng(9)
    subgoal_ok = True
    for _ in range(1000):
        n = int(rng.integers(1, 9))
        wps = [tuple(rng.uniform(0, 60, size=2)) for _ in range(n)]
        goal = wps[-1]
        robot = Pose(*rng.uniform(0, 60, size=2), rng.uniform(-3, 3))
        got = select_subgoal(robot, wps, goal)
        want = brute_force_subgoal(robot, wps, goal)
        if not np.allclose(got, want, atol=1e-9):
            subgoal_ok = False
            break

    kinematics_ok = True
    for d, v, a in [(10.0, 2.0, 1.0), (1.0, 2.0, 1.0), (25.0, 3.0, 0.5), (0.0, 1.0, 1.0)]:
        prof = time_optimal_velocity(d, v, a)
        if d >= v * v / a:
            expected = d / v + v / a
        else:
            expected = 2 * math.sqrt(d / a)
        if abs(prof.duration - expected) > 1e-9:
            kinematics_ok = False
    report("planner facts (31 arcs, series closed form, subgoal rule, kinematics)",
           arcs_ok and series_ok and subgoal_ok and kinematics_ok,
           f"series err {abs(series - c * (1 - 0.95**30) / 0.05):.1e}")


# ---------------------------------------------------------------------------
# 7. metrics identities
# ---------------------------------------------------------------------------

def test_acceptance_metrics_identities():
    t = np.full((12, 80), 2, dtype=np.int64)
    t[4:8, :] = 0
    scene = build_scene(t, (5, 2), (5, 77), cell_size=0.5, scene_id="clean-mission")
    cell = scene.grid.cell_size
    sx, sy = (scene.start[1] + 0.5) * cell, (scene.start[0] + 0.5) * cell
    gx, gy = (scene.goal[1] + 0.5) * cell, (scene.goal[0] + 0.5) * cell
    total = math.hypot(gx - sx, gy - sy)
    n = int(total // 10.0)
    wps = [(sx + (gx - sx) * i * 10.0 / total, sy + (gy - sy) * i * 10.0 / total)
           for i in range(1, n + 1)]
    mission = Mission(waypoints=wps, final_goal=(gx, gy), spacing_m=10.0)
    reward = -scene.oracle.cell_costs(scene.terrain_index)
    reward[np.isinf(reward)] = -50.0
    rep = simulate_mission(scene, None, mission, SimConfig(), reward_field=reward)
    identity = rep.nir * (rep.distance / 100.0) == pytest.approx(rep.total_interventions, abs=1e-9)
    bounded = 0.0 <= rep.pct_subgoals <= 100.0
    clean = rep.nir == 0.0 and rep.completed
    report("metrics identities (NIR identity, %S bounds, oracle agent NIR 0)",
           identity and bounded and clean,
           f"NIR {rep.nir}, %S {rep.pct_subgoals:.0f}, interventions {rep.total_interventions}")


# ---------------------------------------------------------------------------
# 8. determinism
# ---------------------------------------------------------------------------

def run_cli(args):
    from cfirl.cli import main
    return main(args)


def test_acceptance_determinism(tmp_path):
    pairs = []
    for tag in ("a", "b"):
        world = tmp_path / f"world-{tag}"
        assert run_cli(["gen-world", "--count", "5", "--seed", "11", "--out", str(world)]) == 0
        ckpt = tmp_path / f"head-{tag}.rw1"
        assert run_cli(["train", "--scenes", str(world), "--out", str(ckpt),
                        "--epochs", "3", "--seed", "1"]) == 0
        loop = tmp_path / f"loop-{tag}"
        assert run_cli(["loop", "--scenes", str(world), "--out", str(loop),
                        "--annotator", "oracle", "--max-rounds", "1", "--seed", "2",
                        "--mu", "2.0", "--candidates", "4"]) == 0
        pairs.append((world, ckpt, loop))
    (world_a, ckpt_a, loop_a), (world_b, ckpt_b, loop_b) = pairs
    same_world = all((world_b / f.name).read_bytes() == f.read_bytes()
                     for f in sorted(world_a.glob("scene-*.json")))
    same_ckpt = ckpt_a.read_bytes() == ckpt_b.read_bytes()
    same_loop = all((loop_b / name).read_bytes() == (loop_a / name).read_bytes()
                    for name in ("final.rw1", "loop_report.json", "loop_summary.tsv"))
    def normalized(path):
        doc = json.loads((path / "manifest.json").read_text())
        doc.pop("wall_clock_s")
        for key in ("inputs", "outputs", "argv"):
            doc[key] = sorted(Path(p).name if "/" in str(p) else p for p in doc[key])
        return doc

    manifests_match = all(normalized(a) == normalized(b)
                          for a, b in ((world_a, world_b), (loop_a, loop_b)))
    report("determinism (gen-world, train, loop bitwise across two runs)",
           same_world and same_ckpt and same_loop and manifests_match, "")


# ---------------------------------------------------------------------------
# [SECONDARY] annotation round trip (service side; UI state logic in vitest)
# ---------------------------------------------------------------------------

def test_acceptance_secondary_annotation_round_trip(tmp_path):
    import urllib.request
    from cfirl.annotation_service import AnnotationServer, SessionStore
    from cfirl.cf_gen import generate_candidates
    from cfirl.synth_world import load_scene, save_scene

    world = tmp_path / "world"
    assert run_cli(["gen-world", "--count", "3", "--seed", "9", "--out", str(world)]) == 0
    scene_files = sorted(world.glob("scene-*.json"))
    store = SessionStore(tmp_path / "sessions")
    loaded = {}
    cands = {}
    for f in scene_files:
        scene = load_scene(f)
        scene.id = f.stem
        loaded[f.stem] = scene
        cands[f.stem] = generate_candidates(scene.expert, CfGenConfig(seed=4),
                                            (scene.height, scene.width))
    ids = store.create_sessions(list(loaded), loaded, cands)
    server = AnnotationServer(store, port=0)
    server.start()
    try:
        with urllib.request.urlopen(f"{server.url}/api/v1/sessions/{ids[0]}", timeout=5) as resp:
            doc = json.loads(resp.read())
        assert len(doc["candidates"]["items"]) == 10
        toggles = {item["id"]: item["id"] % 3 == 0 for item in doc["candidates"]["items"]}
        payload = {"labels": [{"candidate_id": cid, "counterfactual": flag}
                              for cid, flag in toggles.items()]}
        req = urllib.request.Request(
            f"{server.url}/api/v1/sessions/{ids[0]}/labels",
            data=json.dumps(payload).encode(),
            headers={"Content-Type": "application/json"}, method="POST")
        with urllib.request.urlopen(req, timeout=5) as resp:
            updated = json.loads(resp.read())
        assert updated["status"] == "complete"
        stored = {int(k): v for k, v in updated["labels"].items()}
        assert stored == toggles  # labels stored equal labels toggled
        with urllib.request.urlopen(f"{server.url}/api/v1/export", timeout=5) as resp:
            bundle = json.loads(resp.read())
    finally:
        server.stop()
    store.apply_export(list(loaded.values()), bundle)
    labeled_dir = tmp_path / "labeled"
    labeled_dir.mkdir()
    for f in scene_files:
        save_scene(loaded[f.stem], labeled_dir / f.name)
    code = run_cli(["train", "--scenes", str(labeled_dir), "--out",
                    str(tmp_path / "cf.rw1"), "--alpha", "0.5", "--epochs", "2"])
    report("secondary annotation round trip (serve, label, export, retrain)",
           code == 0, "")
