"""Candidate alternate trajectories by perturbing expert control points.

Interior control points are sampled at regular arc-length intervals, then
displaced along the local path normal by draws from Normal(+-mu, sigma),
half the candidates on each side. A curve is fit through start, offsets,
and goal (interpolating polynomial or a constrained shortest path) and
rasterized to a valid 8-connected trajectory sharing the expert's endpoints.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .errors import GenerationError, ValidationError
from .grid_mdp import ACTIONS, Trajectory

FIT_MODES = ("polynomial", "grid_search")


@dataclass(frozen=True)
class CfGenConfig:
    num_candidates: int = 10
    num_control_points: int = 3
    mu: float = 1.0     # cells, perpendicular offset mean
    sigma: float = 0.5  # cells
    fit: str = "polynomial"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.num_candidates < 2 or self.num_candidates % 2 != 0:
            raise ValidationError("num_candidates must be even (half per side)")
        if self.num_control_points < 1:
            raise ValidationError("num_control_points must be >= 1")
        if self.sigma < 0:
            raise ValidationError("sigma must be nonnegative")
        if self.fit not in FIT_MODES:
            raise ValidationError(f"fit must be one of {FIT_MODES}")


@dataclass(frozen=True)
class Candidate:
    id: int
    trajectory: Trajectory
    side: str  # "left" | "right"


@dataclass(frozen=True)
class CandidateSet:
    candidates: tuple[Candidate, ...]
    config: CfGenConfig
    seed: int

    def __post_init__(self) -> None:
        ids = [c.id for c in self.candidates]
        if len(set(ids)) != len(ids):
            raise ValidationError("candidate ids must be unique")

    def by_id(self, cid: int) -> Candidate:
        for c in self.candidates:
            if c.id == cid:
                return c
        raise KeyError(cid)


def sample_control_points(expert: Trajectory, k: int) -> list[int]:
    """Indices of k interior states at regular arc-length intervals."""
    n = len(expert.states)
    if n < k + 2:
        raise ValidationError(f"expert trajectory of length {n} too short for {k} control points")
    pts = expert.as_array().astype(float)
    seglen = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seglen)])
    total = cum[-1]
    indices: list[int] = []
    for i in range(1, k + 1):
        target = total * i / (k + 1)
        idx = int(np.argmin(np.abs(cum - target)))
        idx = min(max(idx, 1), n - 2)
        while idx in indices and idx < n - 2:
            idx += 1
        indices.append(idx)
    return indices


def _path_normals(expert: Trajectory, indices: Sequence[int]) -> np.ndarray:
    """Unit left-normals of the path at the given indices.

    The normal at a point averages the normals of its two adjacent segments,
    which at corners yields the bisector direction.
    """
    pts = expert.as_array().astype(float)
    normals = np.zeros((len(indices), 2))
    for j, idx in enumerate(indices):
        before = pts[idx] - pts[idx - 1]
        after = pts[idx + 1] - pts[idx] if idx + 1 < len(pts) else before
        n_before = np.array([-before[1], before[0]])
        n_after = np.array([-after[1], after[0]])
        n = n_before / np.linalg.norm(n_before) + n_after / np.linalg.norm(n_after)
        norm = np.linalg.norm(n)
        if norm < 1e-9:  # 180-degree switchback; fall back to one segment's normal
            n, norm = n_before, np.linalg.norm(n_before)
        normals[j] = n / norm
    return normals


def perturb_control_points(
    indices: Sequence[int],
    expert: Trajectory,
    mu: float,
    sigma: float,
    side: str,
    rng: np.random.Generator,
    grid_dims: tuple[int, int],
) -> np.ndarray:
    """Control points displaced along the local normal by Normal(signed mu, sigma).

    side "left" displaces by +mu along the left normal, "right" by -mu.
    Results are continuous (row, col) coordinates clamped in-bounds.
    """
    if side not in ("left", "right"):
        raise ValidationError(f"side must be left or right, got {side!r}")
    sign = 1.0 if side == "left" else -1.0
    pts = expert.as_array().astype(float)[list(indices)]
    normals = _path_normals(expert, indices)
    draws = rng.normal(sign * mu, sigma, size=len(indices))
    offset = pts + normals * draws[:, None]
    offset[:, 0] = np.clip(offset[:, 0], 0, grid_dims[0] - 1)
    offset[:, 1] = np.clip(offset[:, 1], 0, grid_dims[1] - 1)
    return offset


def _rasterize(samples: np.ndarray, grid_dims: tuple[int, int]) -> list[tuple[int, int]]:
    cells: list[tuple[int, int]] = []
    for r, c in np.rint(samples).astype(int):
        if not (0 <= r < grid_dims[0] and 0 <= c < grid_dims[1]):
            raise GenerationError(f"rasterized point {(r, c)} leaves the {grid_dims} grid")
        if cells and (r, c) == cells[-1]:
            continue
        if cells:
            pr, pc = cells[-1]
            while max(abs(r - pr), abs(c - pc)) > 1:  # bridge any skipped cell
                pr += int(np.sign(r - pr))
                pc += int(np.sign(c - pc))
                if (pr, pc) != cells[-1]:
                    cells.append((pr, pc))
        if not cells or (r, c) != cells[-1]:
            cells.append((r, c))
    return cells


def _fit_polynomial(start, goal, offsets: np.ndarray, grid_dims) -> Trajectory:
    pts = np.vstack([np.asarray(start, float), offsets, np.asarray(goal, float)])
    seglen = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    u = np.concatenate([[0.0], np.cumsum(seglen)])
    if u[-1] <= 0:
        raise GenerationError("degenerate control polygon")
    u /= u[-1]
    degree = len(pts) - 1  # interpolating fit through every point
    vander = np.vander(u, degree + 1, increasing=True)
    coef_r = np.linalg.solve(vander, pts[:, 0])
    coef_c = np.linalg.solve(vander, pts[:, 1])
    tt = np.linspace(0.0, 1.0, max(200, 30 * len(pts)))
    vv = np.vander(tt, degree + 1, increasing=True)
    samples = np.stack([vv @ coef_r, vv @ coef_c], axis=1)
    samples[0] = pts[0]
    samples[-1] = pts[-1]
    cells = _rasterize(samples, grid_dims)
    return Trajectory(tuple(cells), kind="candidate")


def _shortest_segment(a, b, grid_dims) -> list[tuple[int, int]]:
    """Greedy king-move walk from a to b (free space, geometric)."""
    path = [a]
    r, c = a
    while (r, c) != tuple(b):
        r += int(np.sign(b[0] - r))
        c += int(np.sign(b[1] - c))
        path.append((r, c))
    return path


def _fit_grid_search(start, goal, offsets: np.ndarray, grid_dims) -> Trajectory:
    waypoints = [tuple(start)]
    for r, c in np.rint(offsets).astype(int):
        waypoints.append((int(np.clip(r, 0, grid_dims[0] - 1)), int(np.clip(c, 0, grid_dims[1] - 1))))
    waypoints.append(tuple(goal))
    cells: list[tuple[int, int]] = [tuple(start)]
    for nxt in waypoints[1:]:
        leg = _shortest_segment(cells[-1], nxt, grid_dims)
        cells.extend(leg[1:])
    return Trajectory(tuple(cells), kind="candidate")


def fit_candidate(
    start: tuple[int, int],
    goal: tuple[int, int],
    offsets: np.ndarray,
    grid_dims: tuple[int, int],
    fit: str = "polynomial",
) -> Trajectory:
    """Fit a valid 8-connected trajectory through start, offsets, and goal."""
    if fit == "polynomial":
        return _fit_polynomial(start, goal, offsets, grid_dims)
    if fit == "grid_search":
        return _fit_grid_search(start, goal, offsets, grid_dims)
    raise ValidationError(f"unknown fit mode {fit!r}")


def generate_candidates(
    expert: Trajectory, cfg: CfGenConfig, grid_dims: tuple[int, int]
) -> CandidateSet:
    """cfg.num_candidates alternates sharing the expert's endpoints, half per side."""
    rng = np.random.default_rng(cfg.seed)
    indices = sample_control_points(expert, cfg.num_control_points)
    start, goal = expert.states[0], expert.states[-1]
    per_side = cfg.num_candidates // 2
    out: list[Candidate] = []
    cid = 0
    for side in ("left", "right"):
        made = 0
        attempts = 0
        while made < per_side:
            attempts += 1
            if attempts > 40 * per_side:
                raise GenerationError(
                    f"could not generate {per_side} distinct {side}-side candidates"
                )
            offsets = perturb_control_points(indices, expert, cfg.mu, cfg.sigma, side, rng, grid_dims)
            try:
                traj = fit_candidate(start, goal, offsets, grid_dims, cfg.fit)
            except GenerationError:
                continue
            if traj.states == expert.states:
                continue  # identical to the expert; resample
            out.append(Candidate(id=cid, trajectory=traj, side=side))
            cid += 1
            made += 1
    return CandidateSet(candidates=tuple(out), config=cfg, seed=cfg.seed)


# ---------------------------------------------------------------------------
# serialization (embedded in scene files and annotation sessions)
# ---------------------------------------------------------------------------

def candidate_set_to_doc(cs: CandidateSet) -> dict:
    return {
        "seed": cs.seed,
        "config": {
            "num_candidates": cs.config.num_candidates,
            "num_control_points": cs.config.num_control_points,
            "mu": cs.config.mu,
            "sigma": cs.config.sigma,
            "fit": cs.config.fit,
            "seed": cs.config.seed,
        },
        "items": [
            {"id": c.id, "side": c.side, "states": [list(s) for s in c.trajectory.states]}
            for c in cs.candidates
        ],
    }


def candidate_set_from_doc(doc: dict) -> CandidateSet:
    cfg = CfGenConfig(**doc["config"])
    cands = tuple(
        Candidate(
            id=int(item["id"]),
            side=item["side"],
            trajectory=Trajectory(tuple(tuple(s) for s in item["states"]), kind="candidate"),
        )
        for item in doc["items"]
    )
    return CandidateSet(candidates=cands, config=cfg, seed=int(doc["seed"]))
