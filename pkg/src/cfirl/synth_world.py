"""Synthetic structured-BEV worlds with known oracle costs and expert paths.

Scenes carry named terrain channels (one-hot, optionally blurred), a smooth
elevation layer with optional curb-like steps, dynamic-entity blobs, the
oracle unit-cost field, and a minimum-cost expert demonstration found by
search. All generation is deterministic in (config, scene_seed), and every
floating array is quantized to float32 values so scene files round-trip
bit-exactly.
"""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, TYPE_CHECKING

import numpy as np

from .errors import GenerationError, ValidationError
from .grid_mdp import ACTIONS, GridMDP, Trajectory
from .reward_model import FeatureGrid

if TYPE_CHECKING:
    from .cf_gen import CandidateSet

SCENE_MAGIC = "CFIRL-SC1"

MOVE_LENGTHS = tuple(float(np.hypot(dr, dc)) for dr, dc in ACTIONS)


@dataclass(frozen=True)
class WorldConfig:
    height: int = 32
    width: int = 32
    cell_size: float = 0.25
    terrain: tuple[tuple[str, float], ...] = (
        ("sidewalk", 1.0),
        ("dirt", 2.0),
        ("grass", 3.5),
        ("forbidden", float("inf")),
    )
    class_fractions: Optional[tuple[float, ...]] = None  # passable classes only
    obstacle_density: float = 0.06
    elevation_amplitude: float = 0.3
    curb_height: float = 0.15
    curb_prob: float = 0.5
    elev_penalty_per_m: float = 2.0
    dynamic_count: int = 2
    blur_sigma: float = 0.0
    min_separation_frac: float = 0.55
    layout: str = "blobs"  # "blobs" | "lattice" (road network on costly background)
    lattice_road_class: Optional[int] = None  # passable class index for roads
    lattice_blob_quantile: float = 0.72  # off-road blob coverage threshold
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "terrain", tuple((str(n), float(c)) for n, c in self.terrain))
        if len(self.terrain) < 2:
            raise ValidationError("need at least 2 terrain classes")
        infs = [i for i, (_, c) in enumerate(self.terrain) if np.isinf(c)]
        if len(infs) != 1:
            raise ValidationError("exactly one terrain class must be forbidden (infinite cost)")
        if not (0.0 <= self.obstacle_density <= 1.0):
            raise ValidationError("obstacle_density must lie in [0, 1]")
        if any(c < 0 for _, c in self.terrain if np.isfinite(c)):
            raise ValidationError("terrain unit costs must be nonnegative")
        if self.class_fractions is not None:
            fr = tuple(float(f) for f in self.class_fractions)
            if len(fr) != len(self.terrain) - 1:
                raise ValidationError("class_fractions must cover every passable class")
            if any(f < 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
                raise ValidationError("class_fractions must be nonnegative and sum to 1")
            object.__setattr__(self, "class_fractions", fr)

    @property
    def forbidden_index(self) -> int:
        return next(i for i, (_, c) in enumerate(self.terrain) if np.isinf(c))

    @property
    def terrain_names(self) -> tuple[str, ...]:
        return tuple(n for n, _ in self.terrain)

    @property
    def unit_costs(self) -> tuple[float, ...]:
        return tuple(c for _, c in self.terrain)


@dataclass(frozen=True)
class OracleCost:
    """Hidden cost model: per-terrain unit costs plus an elevation-step term."""

    unit_costs: tuple[float, ...]
    elevation_penalty_per_m: float
    forbidden_mask: np.ndarray

    def cell_costs(self, terrain_index: np.ndarray) -> np.ndarray:
        costs = np.asarray(self.unit_costs, dtype=np.float64)[terrain_index]
        return np.where(self.forbidden_mask, np.inf, costs)


@dataclass
class Scene:
    """One training or evaluation unit."""

    id: str
    grid: FeatureGrid
    terrain_names: tuple[str, ...]
    terrain_index: np.ndarray
    oracle: OracleCost
    oracle_cost: np.ndarray  # per-cell terrain cost, inf at forbidden cells
    start: tuple[int, int]
    goal: tuple[int, int]
    expert: Trajectory
    candidates: Optional["CandidateSet"] = None
    counterfactual_labels: Optional[dict[int, bool]] = None

    @property
    def height(self) -> int:
        return self.grid.height

    @property
    def width(self) -> int:
        return self.grid.width

    def mdp(self, discount: float = 0.99) -> GridMDP:
        return GridMDP(self.height, self.width, discount)

    def labeled_counterfactuals(self) -> list[Trajectory]:
        """Candidate trajectories whose label marks them counterfactual."""
        if self.candidates is None or not self.counterfactual_labels:
            return []
        by_id = {c.id: c.trajectory for c in self.candidates.candidates}
        return [by_id[i] for i, flag in sorted(self.counterfactual_labels.items()) if flag and i in by_id]


# ---------------------------------------------------------------------------
# oracle cost and expert search
# ---------------------------------------------------------------------------

def oracle_cost_field(scene: Scene) -> np.ndarray:
    """Per-cell oracle cost: the terrain unit cost, inf at forbidden cells.

    The elevation-step penalty is charged on crossing moves, not cells; see
    move_cost / path_cost.
    """
    return scene.oracle.cell_costs(scene.terrain_index)


def move_cost(
    cell_costs: np.ndarray,
    elevation: np.ndarray,
    elev_penalty: float,
    src: tuple[int, int],
    dst: tuple[int, int],
) -> float:
    """Cost of one 8-connected move: departed cell cost x length + step penalty.

    Charging the departed cell mirrors the visitation convention, where a
    state-action collects the reward of the cell it leaves from.
    """
    dr, dc = dst[0] - src[0], dst[1] - src[1]
    length = MOVE_LENGTHS[ACTIONS.index((dr, dc))]
    step = abs(float(elevation[dst]) - float(elevation[src]))
    return float(cell_costs[src]) * length + elev_penalty * step


def path_cost(scene: Scene, traj: Trajectory) -> float:
    """Total oracle cost of a trajectory; inf if it touches a forbidden cell."""
    costs = oracle_cost_field(scene)
    if any(np.isinf(costs[s]) for s in traj.states):
        return float("inf")
    total = 0.0
    for i in range(len(traj.states) - 1):
        total += move_cost(costs, scene.grid.elevation,
                           scene.oracle.elevation_penalty_per_m,
                           traj.states[i], traj.states[i + 1])
    return total


def cost_to_goal(
    cell_costs: np.ndarray,
    elevation: np.ndarray,
    elev_penalty: float,
    goal: tuple[int, int],
) -> np.ndarray:
    """Dijkstra distance-to-goal over the 8-connected grid (inf where cut off)."""
    h, w = cell_costs.shape
    dist = np.full((h, w), np.inf)
    if np.isinf(cell_costs[goal]):
        return dist
    dist[goal] = 0.0
    heap = [(0.0, 0, goal)]
    counter = 1
    done = np.zeros((h, w), dtype=bool)
    while heap:
        d, _, (r, c) = heapq.heappop(heap)
        if done[r, c]:
            continue
        done[r, c] = True
        for dr, dc in ACTIONS:
            pr, pc = r + dr, c + dc  # predecessor of a forward move (pr,pc)->(r,c)
            if not (0 <= pr < h and 0 <= pc < w) or done[pr, pc]:
                continue
            if np.isinf(cell_costs[pr, pc]):
                continue
            nd = d + move_cost(cell_costs, elevation, elev_penalty, (pr, pc), (r, c))
            if nd < dist[pr, pc]:
                dist[pr, pc] = nd
                heapq.heappush(heap, (nd, counter, (pr, pc)))
                counter += 1
    return dist


def gen_expert(scene: Scene) -> Trajectory:
    """Minimum-oracle-cost path from start to goal.

    Follows the exact cost-to-goal field greedily, breaking ties by action
    order, which keeps expert paths aligned with argmax policy rollouts.
    """
    costs = oracle_cost_field(scene)
    dist = cost_to_goal(costs, scene.grid.elevation, scene.oracle.elevation_penalty_per_m, scene.goal)
    if np.isinf(dist[scene.start]):
        raise GenerationError(f"scene {scene.id}: no feasible path from start to goal")
    states = [scene.start]
    cur = scene.start
    limit = scene.height * scene.width + 1
    for _ in range(limit):
        if cur == scene.goal:
            return Trajectory(tuple(states), kind="expert")
        best, best_key = None, None
        for dr, dc in ACTIONS:
            nxt = (cur[0] + dr, cur[1] + dc)
            if not (0 <= nxt[0] < scene.height and 0 <= nxt[1] < scene.width):
                continue
            if np.isinf(costs[nxt]):
                continue
            cost_key = move_cost(costs, scene.grid.elevation,
                                 scene.oracle.elevation_penalty_per_m, cur, nxt) + dist[nxt]
            # ties resolve toward the goal, mirroring greedy rollout selection
            key = (round(cost_key / 1e-9), float(np.hypot(nxt[0] - scene.goal[0],
                                                          nxt[1] - scene.goal[1])))
            if best_key is None or key < best_key:
                best, best_key = nxt, key
        states.append(best)
        cur = best
    raise GenerationError(f"scene {scene.id}: expert search failed to terminate")


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

def _smooth_field(rng: np.random.Generator, h: int, w: int, waves: int = 10) -> np.ndarray:
    rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    out = np.zeros((h, w))
    for _ in range(waves):
        freq = rng.uniform(0.5, 3.0) / max(h, w)
        ang = rng.uniform(0, 2 * np.pi)
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(0.5, 1.0)
        out += amp * np.cos(2 * np.pi * freq * (np.cos(ang) * rr + np.sin(ang) * cc) + phase)
    return out


def _blur(arr: np.ndarray, sigma: float) -> np.ndarray:
    if sigma <= 0:
        return arr
    radius = max(1, int(3 * sigma))
    xs = np.arange(-radius, radius + 1)
    kernel = np.exp(-0.5 * (xs / sigma) ** 2)
    kernel /= kernel.sum()
    out = np.apply_along_axis(lambda v: np.convolve(v, kernel, mode="same"), -1, arr)
    out = np.apply_along_axis(lambda v: np.convolve(v, kernel, mode="same"), -2, out)
    return out


def _f32(arr: np.ndarray) -> np.ndarray:
    return np.asarray(arr).astype(np.float32).astype(np.float64)


def _connected(passable: np.ndarray, start: tuple[int, int], goal: tuple[int, int]) -> bool:
    h, w = passable.shape
    seen = np.zeros_like(passable, dtype=bool)
    stack = [start]
    seen[start] = True
    while stack:
        r, c = stack.pop()
        if (r, c) == goal:
            return True
        for dr, dc in ACTIONS:
            nr, nc = r + dr, c + dc
            if 0 <= nr < h and 0 <= nc < w and passable[nr, nc] and not seen[nr, nc]:
                seen[nr, nc] = True
                stack.append((nr, nc))
    return False


def assemble_scene(
    scene_id: str,
    cfg: WorldConfig,
    terrain_index: np.ndarray,
    elevation: np.ndarray,
    dynamic: np.ndarray,
    start: tuple[int, int],
    goal: tuple[int, int],
) -> Scene:
    """Package raw layers into a Scene with features, oracle field, and expert."""
    forbidden = terrain_index == cfg.forbidden_index
    k = len(cfg.terrain)
    one_hot = np.zeros((k, cfg.height, cfg.width))
    for i in range(k):
        one_hot[i] = terrain_index == i
    one_hot = _blur(one_hot, cfg.blur_sigma)
    grid = FeatureGrid(
        cell_size=cfg.cell_size,
        static_semantic=_f32(one_hot),
        dynamic=_f32(dynamic[None] if dynamic.ndim == 2 else dynamic),
        elevation=_f32(elevation),
    )
    oracle = OracleCost(
        unit_costs=cfg.unit_costs,
        elevation_penalty_per_m=cfg.elev_penalty_per_m,
        forbidden_mask=forbidden,
    )
    scene = Scene(
        id=scene_id,
        grid=grid,
        terrain_names=cfg.terrain_names,
        terrain_index=terrain_index.astype(np.int64),
        oracle=oracle,
        oracle_cost=oracle.cell_costs(terrain_index),
        start=tuple(start),
        goal=tuple(goal),
        expert=Trajectory((start,), kind="expert"),  # replaced below
    )
    scene.expert = gen_expert(scene)
    return scene


def _blob_terrain(rng: np.random.Generator, cfg: WorldConfig) -> np.ndarray:
    h, w = cfg.height, cfg.width
    forbidden_idx = cfg.forbidden_index
    passable_idx = [i for i in range(len(cfg.terrain)) if i != forbidden_idx]
    fractions = cfg.class_fractions or tuple(1.0 / len(passable_idx) for _ in passable_idx)

    terrain_field = _smooth_field(rng, h, w)
    cuts = np.quantile(terrain_field, np.cumsum(fractions)[:-1]) if len(passable_idx) > 1 else []
    terrain_index = np.full((h, w), passable_idx[0], dtype=np.int64)
    for cls, cut in zip(passable_idx[1:], cuts):
        terrain_index[terrain_field > cut] = cls

    if cfg.obstacle_density > 0:
        obstacle_field = _smooth_field(rng, h, w)
        cut = np.quantile(obstacle_field, 1.0 - cfg.obstacle_density)
        terrain_index[obstacle_field > cut] = forbidden_idx
    return terrain_index


def _lattice_terrain(rng: np.random.Generator, cfg: WorldConfig) -> np.ndarray:
    """Cardinal road network of the cheapest class over a costly background.

    Remaining passable classes appear as off-road blobs; forbidden blobs land
    off-road, and with probability 1/2 one patch blocks a road segment so
    optimal routes must reroute through the lattice.
    """
    h, w = cfg.height, cfg.width
    forbidden_idx = cfg.forbidden_index
    passable_idx = [i for i in range(len(cfg.terrain)) if i != forbidden_idx]
    road_cls = cfg.lattice_road_class if cfg.lattice_road_class is not None else passable_idx[0]
    back_cls = passable_idx[-1]

    terrain_index = np.full((h, w), back_cls, dtype=np.int64)
    for cls in passable_idx[:-1]:
        if cls == road_cls:
            continue
        blobs = _smooth_field(rng, h, w)
        terrain_index[blobs > np.quantile(blobs, cfg.lattice_blob_quantile)] = cls

    # one horizontal spine plus partial vertical branches: a loop-free road
    # tree, so the minimum-cost route between any two road cells is unique
    road_mask = np.zeros((h, w), dtype=bool)
    spine = int(rng.integers(6, h - 8))
    road_mask[spine, :] = True
    cols: list[int] = []
    for _ in range(40):
        c = int(rng.integers(2, w - 3))
        if all(abs(c - q) >= 7 for q in cols):
            cols.append(c)
        if len(cols) == int(rng.integers(2, 5)):
            break
    for c in cols:
        up = rng.uniform() < 0.75
        down = rng.uniform() < 0.75 or not up
        top = int(rng.integers(0, max(1, spine - 6))) if up else spine
        bottom = int(rng.integers(min(h, spine + 8), h + 1)) if down else spine + 1
        road_mask[top:bottom, c] = True
    terrain_index[road_mask] = road_cls

    if cfg.obstacle_density > 0:
        blobs = _smooth_field(rng, h, w)
        cut = np.quantile(blobs, 1.0 - cfg.obstacle_density)
        terrain_index[(blobs > cut) & ~road_mask] = forbidden_idx
    return terrain_index


def gen_scene(cfg: WorldConfig, scene_seed: int) -> Scene:
    """Generate one scene deterministically from (cfg, scene_seed)."""
    rng = np.random.default_rng((cfg.seed, scene_seed))
    h, w = cfg.height, cfg.width
    forbidden_idx = cfg.forbidden_index
    if cfg.layout == "lattice":
        terrain_index = _lattice_terrain(rng, cfg)
    elif cfg.layout == "blobs":
        terrain_index = _blob_terrain(rng, cfg)
    else:
        raise ValidationError(f"unknown layout {cfg.layout!r}")
    passable_idx = [i for i in range(len(cfg.terrain)) if i != forbidden_idx]

    elevation = _smooth_field(rng, h, w)
    span = elevation.max() - elevation.min()
    if span > 0:
        elevation = (elevation - elevation.min()) / span * cfg.elevation_amplitude
    if cfg.curb_height > 0 and rng.uniform() < cfg.curb_prob:
        elevation = elevation + cfg.curb_height * (terrain_index == passable_idx[0])

    dynamic = np.zeros((h, w))
    passable_mask = terrain_index != forbidden_idx
    passable_cells = np.argwhere(passable_mask)
    rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    for _ in range(cfg.dynamic_count):
        cr, cc0 = passable_cells[rng.integers(len(passable_cells))]
        dynamic += np.exp(-((rr - cr) ** 2 + (cc - cc0) ** 2) / (2 * 1.5**2))

    if cfg.layout == "lattice":
        road_cls = cfg.lattice_road_class if cfg.lattice_road_class is not None else passable_idx[0]
        endpoint_cells = np.argwhere(terrain_index == road_cls)
    else:
        endpoint_cells = passable_cells
    min_sep = cfg.min_separation_frac * max(h, w)
    for _ in range(40):
        start = tuple(int(v) for v in endpoint_cells[rng.integers(len(endpoint_cells))])
        goal = tuple(int(v) for v in endpoint_cells[rng.integers(len(endpoint_cells))])
        if max(abs(start[0] - goal[0]), abs(start[1] - goal[1])) < min_sep:
            continue
        if _connected(passable_mask, start, goal):
            return assemble_scene(f"scene-{scene_seed:05d}", cfg, terrain_index,
                                  elevation, dynamic, start, goal)
    raise GenerationError(f"no feasible start/goal pair found for scene seed {scene_seed}")


# ---------------------------------------------------------------------------
# scene file IO (CFIRL-SC1): human-readable JSON, float32 value semantics
# ---------------------------------------------------------------------------

def _flat(arr: np.ndarray) -> list:
    return np.asarray(arr, dtype="<f4").astype(float).ravel().tolist()


def scene_to_doc(scene: Scene) -> dict:
    oracle_costs = [None if np.isinf(c) else float(np.float32(c)) for c in scene.oracle.unit_costs]
    cost_flat = [None if np.isinf(v) else float(np.float32(v)) for v in scene.oracle_cost.ravel()]
    doc = {
        "format": SCENE_MAGIC,
        "id": scene.id,
        "height": scene.height,
        "width": scene.width,
        "cell_size": float(np.float32(scene.grid.cell_size)),
        "terrain_names": list(scene.terrain_names),
        "channels": {
            "static_semantic": [_flat(scene.grid.static_semantic[i])
                                for i in range(scene.grid.static_semantic.shape[0])],
            "dynamic": [_flat(scene.grid.dynamic[i]) for i in range(scene.grid.dynamic.shape[0])],
            "elevation": _flat(scene.grid.elevation),
        },
        "terrain_index": scene.terrain_index.ravel().tolist(),
        "oracle": {
            "unit_costs": oracle_costs,
            "elevation_penalty_per_m": float(np.float32(scene.oracle.elevation_penalty_per_m)),
        },
        "oracle_cost": cost_flat,
        "start": [int(v) for v in scene.start],
        "goal": [int(v) for v in scene.goal],
        "expert": [list(s) for s in scene.expert.states],
        "candidates": None,
        "labels": None,
    }
    if scene.candidates is not None:
        from .cf_gen import candidate_set_to_doc

        doc["candidates"] = candidate_set_to_doc(scene.candidates)
    if scene.counterfactual_labels is not None:
        doc["labels"] = {str(k): bool(v) for k, v in sorted(scene.counterfactual_labels.items())}
    return doc


def scene_from_doc(doc: dict) -> Scene:
    if doc.get("format") != SCENE_MAGIC:
        raise ValidationError(f"not a {SCENE_MAGIC} scene document")
    h, w = doc["height"], doc["width"]

    def grid2d(flat):
        return np.asarray(flat, dtype=np.float64).reshape(h, w)

    static = np.stack([grid2d(ch) for ch in doc["channels"]["static_semantic"]])
    dynamic = np.stack([grid2d(ch) for ch in doc["channels"]["dynamic"]])
    elevation = grid2d(doc["channels"]["elevation"])
    grid = FeatureGrid(cell_size=doc["cell_size"], static_semantic=static,
                       dynamic=dynamic, elevation=elevation)
    terrain_index = np.asarray(doc["terrain_index"], dtype=np.int64).reshape(h, w)
    unit_costs = tuple(np.inf if c is None else float(c) for c in doc["oracle"]["unit_costs"])
    forbidden_idx = next(i for i, c in enumerate(unit_costs) if np.isinf(c))
    oracle = OracleCost(
        unit_costs=unit_costs,
        elevation_penalty_per_m=float(doc["oracle"]["elevation_penalty_per_m"]),
        forbidden_mask=terrain_index == forbidden_idx,
    )
    oracle_cost = np.asarray(
        [np.inf if v is None else v for v in doc["oracle_cost"]], dtype=np.float64
    ).reshape(h, w)
    candidates = None
    if doc.get("candidates") is not None:
        from .cf_gen import candidate_set_from_doc

        candidates = candidate_set_from_doc(doc["candidates"])
    labels = None
    if doc.get("labels") is not None:
        labels = {int(k): bool(v) for k, v in doc["labels"].items()}
    return Scene(
        id=doc["id"],
        grid=grid,
        terrain_names=tuple(doc["terrain_names"]),
        terrain_index=terrain_index,
        oracle=oracle,
        oracle_cost=oracle_cost,
        start=tuple(doc["start"]),
        goal=tuple(doc["goal"]),
        expert=Trajectory(tuple(tuple(s) for s in doc["expert"]), kind="expert"),
        candidates=candidates,
        counterfactual_labels=labels,
    )


def save_scene(scene: Scene, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(scene_to_doc(scene), fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def load_scene(path) -> Scene:
    with open(path, "r", encoding="utf-8") as fh:
        return scene_from_doc(json.load(fh))


def validate_scene(scene: Scene) -> None:
    """Raise ValidationError on any broken scene invariant."""
    mdp = scene.mdp()
    scene.expert.validate(mdp)
    if scene.expert.states[0] != scene.start:
        raise ValidationError(f"scene {scene.id}: expert does not start at start")
    if scene.expert.states[-1] != scene.goal:
        raise ValidationError(f"scene {scene.id}: expert does not end at goal")
    for i, s in enumerate(scene.expert.states):
        if scene.oracle.forbidden_mask[s]:
            raise ValidationError(f"scene {scene.id}: expert enters forbidden cell at step {i}")
        if not np.isfinite(scene.oracle_cost[s]):
            raise ValidationError(f"scene {scene.id}: oracle cost not finite on expert cell {s}")
    if scene.terrain_index.min() < 0 or scene.terrain_index.max() >= len(scene.terrain_names):
        raise ValidationError(f"scene {scene.id}: terrain index out of range")
    expected = scene.oracle.cell_costs(scene.terrain_index)
    same = np.isclose(scene.oracle_cost, expected) | (np.isinf(scene.oracle_cost) & np.isinf(expected))
    if not np.all(same):
        raise ValidationError(f"scene {scene.id}: oracle cost field inconsistent with terrain")
    if scene.candidates is not None:
        for cand in scene.candidates.candidates:
            cand.trajectory.validate(mdp)
            if cand.trajectory.states[0] != scene.expert.states[0]:
                raise ValidationError(f"scene {scene.id}: candidate {cand.id} start mismatch")
            if cand.trajectory.states[-1] != scene.expert.states[-1]:
                raise ValidationError(f"scene {scene.id}: candidate {cand.id} goal mismatch")
        ids = {c.id for c in scene.candidates.candidates}
        if scene.counterfactual_labels and not set(scene.counterfactual_labels) <= ids:
            raise ValidationError(f"scene {scene.id}: labels reference unknown candidate ids")
