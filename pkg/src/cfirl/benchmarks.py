"""Benchmark world families used by the acceptance suite and the CLI.

Recovery worlds: loop-free road trees with linear oracle costs, for reward
recovery checks.

Ambiguity benchmark: a mixed population. Two thirds are simple road worlds
whose surface alternates between two equally priced classes (pavement and
boardwalk), so demonstrations cover both surfaces equally; the rest hold two
corridors between shared endpoints, a pavement detour (the expert's route)
and a shorter straight boardwalk corridor broken by a forbidden gap.
Expert-only training condemns boardwalk for the corridor scenes' sake,
which wrecks the boardwalk road worlds; counterfactual labels on chord and
corridor candidates restore the separation that matters (grass and the gap
corridor down, boardwalk roads intact).
"""

from __future__ import annotations

import math

import numpy as np

from .nav_planner import Mission
from .synth_world import Scene, WorldConfig, _smooth_field, assemble_scene, gen_scene

RECOVERY_TERRAIN = (
    ("sidewalk", 1.0),
    ("dirt", 4.0),
    ("grass", 9.0),
    ("forbidden", float("inf")),
)

AMBIGUITY_TERRAIN = (
    ("pavement", 1.0),
    ("boardwalk", 1.0),
    ("grass", 6.0),
    ("forbidden", float("inf")),
)


def recovery_world_config(seed: int = 1, height: int = 32, width: int = 32) -> WorldConfig:
    """Road-tree worlds with flat elevation, so oracle costs are linear in
    the one-hot terrain channels."""
    return WorldConfig(
        height=height, width=width, cell_size=0.25, obstacle_density=0.03,
        elevation_amplitude=0.0, curb_height=0.0, dynamic_count=2,
        layout="lattice", min_separation_frac=0.45,
        terrain=RECOVERY_TERRAIN, seed=seed,
    )


def ambiguity_world_config(seed: int = 0, height: int = 40, width: int = 40) -> WorldConfig:
    # no dynamic blobs: a stray positive dynamic weight can lift reward
    # pockets above the absorbing level and break greedy rollouts
    return WorldConfig(
        height=height, width=width, cell_size=0.5, obstacle_density=0.0,
        elevation_amplitude=0.0, curb_height=0.0, dynamic_count=0,
        terrain=AMBIGUITY_TERRAIN, seed=seed,
    )


def _corridor_scene(index: int, base_seed: int, height: int, width: int) -> Scene:
    cfg = ambiguity_world_config(seed=base_seed, height=height, width=width)
    rng = np.random.default_rng((base_seed, index, 1))
    rb = int(rng.integers(14, height - 18))          # top row of corridor B
    bow = int(rng.integers(6, 9))
    up = bool(rng.uniform() < 0.5)
    ra = rb - bow if up else rb + bow                # top row of corridor A
    c0, c1 = 4, width - 6

    grass = 2
    t = np.full((height, width), grass, dtype=np.int64)
    lo, hi = min(ra, rb) - 1, max(ra, rb) + 4
    # pavement aprons shared by both corridor mouths
    t[lo:hi, 1 : c0 + 2] = 0
    t[lo:hi, c1 - 1 : width - 1] = 0
    # corridor B: straight boardwalk band broken by a forbidden gap
    t[rb : rb + 3, c0 : c1 + 1] = 1
    gapc = int(rng.integers(c0 + 9, c1 - 9))
    t[rb : rb + 3, gapc : gapc + 2] = 3
    # corridor A: the long single-lane pavement bow around the hazard
    t[lo + 1 : hi - 1, c0] = 0
    t[lo + 1 : hi - 1, c1] = 0
    t[ra, c0 : c1 + 1] = 0
    # decorative surface patches outside the corridor band keep the grass
    # fraction comparable to the road worlds
    margin = np.zeros((height, width), dtype=bool)
    margin[: max(0, lo - 2), :] = True
    margin[min(height, hi + 3) :, :] = True
    for cls in (0, 1):
        blobs = _smooth_field(rng, height, width)
        t[margin & (blobs > np.quantile(blobs, 0.62)) & (t == grass)] = cls

    elevation = np.zeros((height, width))
    dynamic = np.zeros((height, width))

    start = (rb + 1, 2)
    goal = (rb + 1, width - 3)
    return assemble_scene(f"ambiguity-{index:04d}", cfg, t, elevation, dynamic, start, goal)


def _simple_scene(index: int, base_seed: int, height: int, width: int) -> Scene:
    """Road-tree world whose road surface is pavement or boardwalk by seed."""
    rng = np.random.default_rng((base_seed, index, 2))
    cfg = WorldConfig(
        height=height, width=width, cell_size=0.5, obstacle_density=0.02,
        elevation_amplitude=0.0, curb_height=0.0, dynamic_count=0,
        layout="lattice", min_separation_frac=0.45, terrain=AMBIGUITY_TERRAIN,
        lattice_road_class=0 if rng.uniform() < 0.5 else 1,
        lattice_blob_quantile=0.58, seed=base_seed,
    )
    scene = gen_scene(cfg, index)
    scene.id = f"simple-{index:04d}"
    return scene


def make_ambiguity_scene(index: int, base_seed: int = 0, height: int = 40,
                         width: int = 40) -> Scene:
    """Scene `index` of the mixed benchmark: every third scene holds the two
    corridors, the rest are simple road worlds."""
    if index % 3 == 0:
        return _corridor_scene(index, base_seed, height, width)
    return _simple_scene(index, base_seed, height, width)


def is_corridor_scene(scene: Scene) -> bool:
    return scene.id.startswith("ambiguity-")


def ambiguity_mission(scene: Scene, spacing_m: float = 10.0) -> Mission:
    """Coarse waypoints on the straight start-goal line, like a routing
    service that knows nothing about the hazard."""
    cell = scene.grid.cell_size
    sx, sy = (scene.start[1] + 0.5) * cell, (scene.start[0] + 0.5) * cell
    gx, gy = (scene.goal[1] + 0.5) * cell, (scene.goal[0] + 0.5) * cell
    total = math.hypot(gx - sx, gy - sy)
    n = int(total // spacing_m)
    waypoints = [
        (sx + (gx - sx) * i * spacing_m / total, sy + (gy - sy) * i * spacing_m / total)
        for i in range(1, n + 1)
    ]
    return Mission(waypoints=waypoints, final_goal=(gx, gy), spacing_m=spacing_m)
