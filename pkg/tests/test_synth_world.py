import json

import numpy as np
import pytest

from conftest import build_scene, recovery_world_config
from cfirl.cf_gen import CfGenConfig, generate_candidates
from cfirl.errors import GenerationError, ValidationError
from cfirl.grid_mdp import ACTIONS, Trajectory
from cfirl.synth_world import (
    MOVE_LENGTHS,
    WorldConfig,
    cost_to_goal,
    gen_expert,
    gen_scene,
    load_scene,
    move_cost,
    oracle_cost_field,
    path_cost,
    save_scene,
    scene_from_doc,
    scene_to_doc,
    validate_scene,
)


def dp_cost_to_goal(cell_costs, elevation, coeff, goal):
    """Label-correcting oracle, independent of the heap implementation."""
    h, w = cell_costs.shape
    dist = np.full((h, w), np.inf)
    dist[goal] = 0.0
    for _ in range(h * w):
        changed = False
        for r in range(h):
            for c in range(w):
                if np.isinf(cell_costs[r, c]):
                    continue
                for (dr, dc), length in zip(ACTIONS, MOVE_LENGTHS):
                    nr, nc = r + dr, c + dc
                    if not (0 <= nr < h and 0 <= nc < w) or np.isinf(dist[nr, nc]):
                        continue
                    cand = cell_costs[r, c] * length + coeff * abs(elevation[nr, nc] - elevation[r, c]) + dist[nr, nc]
                    if cand < dist[r, c] - 1e-15:
                        dist[r, c] = cand
                        changed = True
        if not changed:
            break
    return dist


# ---------------------------------------------------------------------------
# config validation
# ---------------------------------------------------------------------------

def test_config_requires_exactly_one_forbidden_class():
    with pytest.raises(ValidationError, match="forbidden"):
        WorldConfig(terrain=(("a", 1.0), ("b", 2.0)))
    with pytest.raises(ValidationError, match="forbidden"):
        WorldConfig(terrain=(("a", float("inf")), ("b", float("inf"))))


def test_config_rejects_bad_density():
    with pytest.raises(ValidationError):
        WorldConfig(obstacle_density=1.4)


# ---------------------------------------------------------------------------
# gen_scene
# ---------------------------------------------------------------------------

def test_same_seed_gives_identical_scenes():
    cfg = recovery_world_config()
    a, b = gen_scene(cfg, 7), gen_scene(cfg, 7)
    assert json.dumps(scene_to_doc(a), sort_keys=True) == json.dumps(scene_to_doc(b), sort_keys=True)


def test_channel_count_is_classes_plus_dynamic_plus_elevation():
    cfg = recovery_world_config()
    scene = gen_scene(cfg, 0)
    assert scene.grid.channel_count == len(cfg.terrain) + 1 + 1


def test_blob_fractions_within_five_points_of_configured():
    cfg = WorldConfig(height=64, width=64, obstacle_density=0.08,
                      class_fractions=(0.5, 0.3, 0.2), seed=3)
    errs = {0: [], 1: [], 2: [], 3: []}
    targets = {0: 0.5 * 0.92, 1: 0.3 * 0.92, 2: 0.2 * 0.92, 3: 0.08}
    for seed in range(100):
        scene = gen_scene(cfg, seed)
        for cls in range(4):
            frac = float((scene.terrain_index == cls).mean())
            errs[cls].append(abs(frac - targets[cls]))
    for cls in range(4):
        assert max(errs[cls]) <= 0.05, f"class {cls}"


def test_expert_starts_and_ends_correctly_and_avoids_forbidden():
    cfg = recovery_world_config()
    for seed in range(10):
        scene = gen_scene(cfg, seed)
        validate_scene(scene)


def test_generation_failure_raises():
    cfg = WorldConfig(height=12, width=12, obstacle_density=0.97, min_separation_frac=0.9, seed=5)
    with pytest.raises(GenerationError):
        gen_scene(cfg, 0)


# ---------------------------------------------------------------------------
# oracle cost
# ---------------------------------------------------------------------------

def test_uniform_world_cost_field_is_uniform():
    t = np.zeros((6, 6), dtype=np.int64)
    scene = build_scene(t, (0, 0), (5, 5))
    field = oracle_cost_field(scene)
    assert np.all(field == 1.0)


def test_forbidden_cells_are_infinite():
    t = np.zeros((6, 6), dtype=np.int64)
    t[2, 2] = 3
    scene = build_scene(t, (0, 0), (5, 5))
    assert np.isinf(oracle_cost_field(scene)[2, 2])


def test_elevation_step_adds_move_cost():
    elevation = np.zeros((4, 4))
    elevation[1, 2] = 0.2
    t = np.zeros((4, 4), dtype=np.int64)
    scene = build_scene(t, (0, 0), (3, 3), elevation=elevation, elev_penalty=5.0)
    costs = oracle_cost_field(scene)
    flat = move_cost(costs, scene.grid.elevation, 5.0, (1, 1), (1, 0))
    step = move_cost(costs, scene.grid.elevation, 5.0, (1, 1), (1, 2))
    assert step - flat == pytest.approx(1.0, abs=1e-9)


# ---------------------------------------------------------------------------
# gen_expert
# ---------------------------------------------------------------------------

def test_geodesic_on_uniform_world_with_analytic_cost():
    t = np.zeros((12, 12), dtype=np.int64)
    scene = build_scene(t, (2, 1), (9, 10))
    dr, dc = 7, 9
    m, M = min(dr, dc), max(dr, dc)
    analytic = (np.sqrt(2) * m + (M - m)) * 1.0
    assert path_cost(scene, scene.expert) == pytest.approx(analytic, abs=1e-9)
    assert len(scene.expert) == M + 1


def test_wall_with_gap_forces_route_through_gap():
    t = np.zeros((9, 9), dtype=np.int64)
    t[:, 4] = 3
    t[4, 4] = 0  # the gap
    scene = build_scene(t, (4, 0), (4, 8))
    assert (4, 4) in scene.expert.states


def test_expert_cost_never_exceeds_candidate_costs():
    cfg = recovery_world_config()
    for seed in range(5):
        scene = gen_scene(cfg, seed)
        cands = generate_candidates(scene.expert, CfGenConfig(seed=seed), (scene.height, scene.width))
        e_cost = path_cost(scene, scene.expert)
        for c in cands.candidates:
            assert e_cost <= path_cost(scene, c.trajectory) + 1e-9


def test_expert_cost_matches_independent_search_oracle():
    cfg = recovery_world_config(height=16, width=16)
    for seed in range(4):
        scene = gen_scene(cfg, seed)
        oracle = dp_cost_to_goal(oracle_cost_field(scene), scene.grid.elevation,
                                 scene.oracle.elevation_penalty_per_m, scene.goal)
        assert path_cost(scene, scene.expert) == pytest.approx(oracle[scene.start], abs=1e-9)
        fast = cost_to_goal(oracle_cost_field(scene), scene.grid.elevation,
                            scene.oracle.elevation_penalty_per_m, scene.goal)
        finite = np.isfinite(oracle)
        assert np.allclose(fast[finite], oracle[finite], atol=1e-9)
        assert np.array_equal(np.isfinite(fast), finite)


def test_obstacle_free_flat_single_class_expert_is_chebyshev_geodesic():
    cfg = WorldConfig(height=24, width=24, obstacle_density=0.0, elevation_amplitude=0.0,
                      curb_height=0.0, terrain=(("pavement", 1.0), ("forbidden", float("inf"))),
                      seed=9)
    for seed in range(8):
        scene = gen_scene(cfg, seed)
        cheb = max(abs(scene.start[0] - scene.goal[0]), abs(scene.start[1] - scene.goal[1]))
        assert len(scene.expert) - 1 <= cheb + 1


# ---------------------------------------------------------------------------
# scene file round trip
# ---------------------------------------------------------------------------

def test_scene_file_round_trips_bit_exactly(tmp_path):
    cfg = recovery_world_config()
    scene = gen_scene(cfg, 3)
    scene.candidates = generate_candidates(scene.expert, CfGenConfig(seed=1),
                                           (scene.height, scene.width))
    scene.counterfactual_labels = {0: True, 1: False}
    p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
    save_scene(scene, p1)
    loaded = load_scene(p1)
    save_scene(loaded, p2)
    assert p1.read_bytes() == p2.read_bytes()
    assert loaded.expert == scene.expert
    assert np.array_equal(loaded.terrain_index, scene.terrain_index)
    assert np.array_equal(loaded.grid.elevation, scene.grid.elevation)
    assert loaded.counterfactual_labels == scene.counterfactual_labels
    validate_scene(loaded)


def test_scene_doc_rejects_wrong_format():
    with pytest.raises(ValidationError, match="CFIRL-SC1"):
        scene_from_doc({"format": "nope"})


def test_validate_scene_catches_forbidden_crossing():
    t = np.zeros((6, 6), dtype=np.int64)
    scene = build_scene(t, (0, 0), (5, 5))
    scene.terrain_index[scene.expert.states[1]] = 3
    scene.oracle = type(scene.oracle)(
        unit_costs=scene.oracle.unit_costs,
        elevation_penalty_per_m=scene.oracle.elevation_penalty_per_m,
        forbidden_mask=scene.terrain_index == 3,
    )
    scene.oracle_cost = scene.oracle.cell_costs(scene.terrain_index)
    with pytest.raises(ValidationError, match="forbidden"):
        validate_scene(scene)
