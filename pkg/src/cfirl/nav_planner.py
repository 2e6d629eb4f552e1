"""Arc-based local planner, carrot selection, velocity profiles, and metrics.

The planner scores a fixed fan of constant-curvature arcs against a
normalized costmap plus a carrot-distance term, follows the best arc for one
tick, and tracks the mission metrics AST (mean seconds per subgoal), %S
(subgoals reached), and NIR (interventions per 100 m driven).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ValidationError
from .reward_model import RewardParams, forward
from .synth_world import Scene


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    heading: float

    def __post_init__(self) -> None:
        if not all(map(math.isfinite, (self.x, self.y, self.heading))):
            raise ValidationError("pose must be finite")
        h = self.heading
        while h <= -math.pi:
            h += 2 * math.pi
        while h > math.pi:
            h -= 2 * math.pi
        object.__setattr__(self, "heading", h)


@dataclass(frozen=True)
class Arc:
    curvature: float      # 1/m, signed
    arc_length: float     # m
    samples: np.ndarray   # (30, 3) egocentric poses (x forward, y left, heading)

    @property
    def endpoint(self) -> np.ndarray:
        return self.samples[-1, :2]


N_ARC_SAMPLES = 30


def generate_arcs(count: int = 31, max_curvature: float = 1.0,
                  horizon_radius: float = 6.0) -> list[Arc]:
    """Evenly spaced curvatures in [-max, +max]; arc lengths reach the horizon.

    Endpoints land exactly on the horizon circle when the curvature allows
    it; tighter arcs run half a turn so their endpoint is the farthest point
    (the diameter). Odd counts include the straight arc.
    """
    if count < 1 or count % 2 == 0:
        raise ValidationError("arc count must be odd so the zero-curvature arc exists")
    if max_curvature <= 0 or horizon_radius <= 0:
        raise ValidationError("max_curvature and horizon_radius must be positive")
    arcs = []
    for kappa in np.linspace(-max_curvature, max_curvature, count):
        kappa = float(kappa)
        if abs(kappa) < 1e-12:
            kappa = 0.0
            length = horizon_radius
        else:
            half = min(1.0, abs(kappa) * horizon_radius / 2.0)
            length = 2.0 / abs(kappa) * math.asin(half)
        ss = np.linspace(length / N_ARC_SAMPLES, length, N_ARC_SAMPLES)
        if kappa == 0.0:
            xs, ys = ss, np.zeros_like(ss)
        else:
            xs = np.sin(kappa * ss) / kappa
            ys = (1.0 - np.cos(kappa * ss)) / kappa
        arcs.append(Arc(curvature=kappa, arc_length=length,
                        samples=np.stack([xs, ys, kappa * ss], axis=1)))
    return arcs


def reward_to_costmap(field_: np.ndarray) -> np.ndarray:
    """Invert and normalize a reward field to costs in [0, 1].

    The highest reward maps to cost 0 and the lowest to cost 1; a constant
    field maps to all zeros.
    """
    f = np.asarray(field_, dtype=np.float64)
    if not np.all(np.isfinite(f)):
        raise ValidationError("reward field must be finite")
    span = f.max() - f.min()
    if span == 0:
        return np.zeros_like(f)
    return (f.max() - f) / span


def transform_arc(arc: Arc, pose: Pose) -> np.ndarray:
    """Arc sample positions in world coordinates (x, y), (30, 2)."""
    c, s = math.cos(pose.heading), math.sin(pose.heading)
    xs = arc.samples[:, 0]
    ys = arc.samples[:, 1]
    wx = pose.x + c * xs - s * ys
    wy = pose.y + s * xs + c * ys
    return np.stack([wx, wy], axis=1)


def arc_cost(
    arc: Arc,
    costmap: np.ndarray,
    cell_size: float,
    pose: Pose,
    carrot: tuple[float, float],
    discount: float = 0.95,
    goal_weight: float = 0.1,
) -> float:
    """Discounted costmap sum over the 30 samples plus carrot distance.

    Samples leaving the grid cost 1.0 (the maximum).
    """
    pts = transform_arc(arc, pose)
    h, w = costmap.shape
    rows = np.floor(pts[:, 1] / cell_size).astype(int)
    cols = np.floor(pts[:, 0] / cell_size).astype(int)
    inside = (rows >= 0) & (rows < h) & (cols >= 0) & (cols < w)
    cell_cost = np.ones(len(pts))
    cell_cost[inside] = costmap[rows[inside], cols[inside]]
    learned = float((discount ** np.arange(N_ARC_SAMPLES) * cell_cost).sum())
    end = pts[-1]
    return learned + goal_weight * math.hypot(end[0] - carrot[0], end[1] - carrot[1])


def select_subgoal(
    robot: Pose,
    waypoints: Sequence[tuple[float, float]],
    final_goal: tuple[float, float],
    horizon_radius: float = 6.0,
) -> tuple[float, float]:
    """Farthest waypoint that is closer to the final goal than the robot is,
    projected onto the planning-horizon circle around the robot."""
    if not waypoints:
        raise ValidationError("waypoint list must be non-empty")
    gx, gy = final_goal
    robot_d = math.hypot(robot.x - gx, robot.y - gy)
    eligible = [wp for wp in waypoints if math.hypot(wp[0] - gx, wp[1] - gy) < robot_d]
    target = max(eligible, key=lambda wp: math.hypot(wp[0] - gx, wp[1] - gy)) if eligible else tuple(final_goal)
    dx, dy = target[0] - robot.x, target[1] - robot.y
    dist = math.hypot(dx, dy)
    if dist <= horizon_radius or dist == 0.0:
        return (float(target[0]), float(target[1]))
    scale = horizon_radius / dist
    return (robot.x + dx * scale, robot.y + dy * scale)


@dataclass
class VelocityProfile:
    duration: float
    accel_time: float
    cruise_time: float
    peak_velocity: float


def time_optimal_velocity(path_length: float, v_max: float, a_max: float) -> VelocityProfile:
    """Rest-to-rest bang-bang profile: trapezoid when the path allows reaching
    v_max, triangle otherwise."""
    if path_length < 0 or v_max <= 0 or a_max <= 0:
        raise ValidationError("path_length must be >= 0 and limits positive")
    if path_length == 0:
        return VelocityProfile(0.0, 0.0, 0.0, 0.0)
    if path_length >= v_max**2 / a_max:
        accel = v_max / a_max
        cruise = (path_length - v_max**2 / a_max) / v_max
        return VelocityProfile(2 * accel + cruise, accel, cruise, v_max)
    peak = math.sqrt(path_length * a_max)
    return VelocityProfile(2 * peak / a_max, peak / a_max, 0.0, peak)


@dataclass
class Mission:
    waypoints: list[tuple[float, float]]
    final_goal: tuple[float, float]
    spacing_m: float = 10.0
    pose_trace: list[tuple[float, float, float, float]] = field(default_factory=list)
    events: list[dict] = field(default_factory=list)


@dataclass(frozen=True)
class SimConfig:
    tick: float = 0.1
    v_max: float = 1.5
    a_max: float = 1.0
    arc_count: int = 31
    max_curvature: float = 1.0
    horizon_radius: float = 6.0
    sample_discount: float = 0.95
    goal_weight: float = 0.1
    reach_radius: float = 1.0
    progress_timeout: float = 8.0
    progress_eps: float = 0.05
    mission_timeout: float = 240.0


@dataclass
class MetricsReport:
    ast: float
    pct_subgoals: float
    nir: float
    distance: float
    total_interventions: int
    timed_out: bool = False
    completed: bool = False

    def row(self) -> dict:
        return {
            "AST": self.ast,
            "%S": self.pct_subgoals,
            "NIR": self.nir,
            "Dist": self.distance,
            "TotalInt": self.total_interventions,
        }


def metrics_table(rows: dict[str, MetricsReport]) -> str:
    """Tabular summary; the aggregate NIR re-derives from summed counts."""
    header = "mission\tAST\t%S\tNIR\tDist\tTotalInt"
    lines = [header]
    total_int, total_dist, asts, pcts = 0, 0.0, [], []
    for name in sorted(rows):
        r = rows[name]
        lines.append(f"{name}\t{r.ast:.2f}\t{r.pct_subgoals:.2f}\t{r.nir:.4f}"
                     f"\t{r.distance:.2f}\t{r.total_interventions}")
        total_int += r.total_interventions
        total_dist += r.distance
        asts.append(r.ast)
        pcts.append(r.pct_subgoals)
    agg_nir = total_int / (total_dist / 100.0) if total_dist > 0 else 0.0
    lines.append(f"aggregate\t{np.mean(asts):.2f}\t{np.mean(pcts):.2f}\t{agg_nir:.4f}"
                 f"\t{total_dist:.2f}\t{total_int}")
    return "\n".join(lines) + "\n"


def _nearest_reference_pose(reference: np.ndarray, x: float, y: float,
                            goal: tuple[float, float]) -> Pose:
    d = np.hypot(reference[:, 0] - x, reference[:, 1] - y)
    i = int(np.argmin(d))
    nxt = reference[min(i + 1, len(reference) - 1)]
    heading = math.atan2(nxt[1] - reference[i, 1], nxt[0] - reference[i, 0])
    if i == len(reference) - 1:
        heading = math.atan2(goal[1] - reference[i, 1], goal[0] - reference[i, 0])
    return Pose(float(reference[i, 0]), float(reference[i, 1]), heading)


def simulate_mission(
    scene: Scene,
    params: Optional[RewardParams],
    mission: Mission,
    cfg: SimConfig = SimConfig(),
    reward_field: Optional[np.ndarray] = None,
) -> MetricsReport:
    """Closed-loop arc planning over one scene at a fixed tick.

    Interventions: entering a forbidden cell, or failing to approach the
    current subgoal for `progress_timeout` seconds. Either resets the robot
    onto the nearest expert-path point and increments the counter. The
    provided `reward_field` overrides the head's prediction (used for
    oracle-reward runs).
    """
    if reward_field is None:
        if params is None:
            raise ValidationError("simulate_mission needs params or a reward field")
        reward_field = forward(scene.grid, params)
    costmap = reward_to_costmap(reward_field)
    cell = scene.grid.cell_size
    arcs = generate_arcs(cfg.arc_count, cfg.max_curvature, cfg.horizon_radius)
    forbidden = scene.oracle.forbidden_mask

    reference = np.array([((c + 0.5) * cell, (r + 0.5) * cell) for r, c in scene.expert.states])
    start_xy = reference[0]
    goal_xy = np.asarray(mission.final_goal, dtype=float)
    heading0 = math.atan2(goal_xy[1] - start_xy[1], goal_xy[0] - start_xy[0])
    pose = Pose(float(start_xy[0]), float(start_xy[1]), heading0)

    t = 0.0
    speed = 0.0
    distance = 0.0
    interventions = 0
    reached = 0
    last_subgoal_time = 0.0
    remaining = list(mission.waypoints)
    ast_samples: list[float] = []
    best_goal_dist = math.inf
    last_progress_time = 0.0
    timed_out = False
    completed = False
    mission.pose_trace.append((t, pose.x, pose.y, pose.heading))

    while t < cfg.mission_timeout:
        if math.hypot(pose.x - goal_xy[0], pose.y - goal_xy[1]) <= cfg.reach_radius:
            completed = True
            break
        while remaining and math.hypot(pose.x - remaining[0][0], pose.y - remaining[0][1]) <= cfg.reach_radius:
            reached += 1
            ast_samples.append(t - last_subgoal_time)
            last_subgoal_time = t
            mission.events.append({"type": "subgoal", "time": t, "index": reached})
            remaining.pop(0)
            last_progress_time = t

        carrot = select_subgoal(pose, [*remaining, tuple(goal_xy)], tuple(goal_xy), cfg.horizon_radius)
        costs = [arc_cost(a, costmap, cell, pose, carrot, cfg.sample_discount, cfg.goal_weight)
                 for a in arcs]
        best = arcs[int(np.argmin(costs))]

        d_goal = math.hypot(pose.x - goal_xy[0], pose.y - goal_xy[1])
        v_brake = math.sqrt(2 * cfg.a_max * max(d_goal - 0.5 * cfg.reach_radius, 0.0))
        speed = min(speed + cfg.a_max * cfg.tick, cfg.v_max, max(v_brake, 0.2))
        step = speed * cfg.tick
        kappa = best.curvature
        if kappa == 0.0:
            dx, dy, dth = step, 0.0, 0.0
        else:
            dx = math.sin(kappa * step) / kappa
            dy = (1 - math.cos(kappa * step)) / kappa
            dth = kappa * step
        c, s = math.cos(pose.heading), math.sin(pose.heading)
        pose = Pose(pose.x + c * dx - s * dy, pose.y + s * dx + c * dy, pose.heading + dth)
        distance += step
        t += cfg.tick
        mission.pose_trace.append((t, pose.x, pose.y, pose.heading))

        row, col = int(pose.y // cell), int(pose.x // cell)
        hit_forbidden = (
            not (0 <= row < scene.height and 0 <= col < scene.width)
            or forbidden[row, col]
        )
        goal_dist = math.hypot(pose.x - goal_xy[0], pose.y - goal_xy[1])
        if goal_dist < best_goal_dist - cfg.progress_eps:
            best_goal_dist = goal_dist
            last_progress_time = t
        stalled = (t - last_progress_time) > cfg.progress_timeout
        if hit_forbidden or stalled:
            interventions += 1
            mission.events.append({
                "type": "intervention", "time": t,
                "cause": "forbidden" if hit_forbidden else "no_progress",
            })
            pose = _nearest_reference_pose(reference, pose.x, pose.y, tuple(goal_xy))
            speed = 0.0
            best_goal_dist = math.hypot(pose.x - goal_xy[0], pose.y - goal_xy[1])
            last_progress_time = t
    else:
        timed_out = True

    total_subgoals = len(mission.waypoints) + 1
    if completed:
        reached_total = reached + 1
        ast_samples.append(t - last_subgoal_time)
    else:
        reached_total = reached
    ast = float(np.mean(ast_samples)) if ast_samples else float(cfg.mission_timeout)
    nir = interventions / (distance / 100.0) if distance > 0 else 0.0
    return MetricsReport(
        ast=ast,
        pct_subgoals=100.0 * reached_total / total_subgoals,
        nir=nir,
        distance=distance,
        total_interventions=interventions,
        timed_out=timed_out,
        completed=completed,
    )


# ---------------------------------------------------------------------------
# mission file IO
# ---------------------------------------------------------------------------

def save_mission(mission: Mission, path, scene_file: Optional[str] = None) -> None:
    doc = {
        "waypoints": [[float(x), float(y)] for x, y in mission.waypoints],
        "final_goal": [float(mission.final_goal[0]), float(mission.final_goal[1])],
        "spacing_m": mission.spacing_m,
    }
    if scene_file is not None:
        doc["scene"] = scene_file
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_mission(path) -> tuple[Mission, Optional[str]]:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    mission = Mission(
        waypoints=[tuple(wp) for wp in doc["waypoints"]],
        final_goal=tuple(doc["final_goal"]),
        spacing_m=doc.get("spacing_m", 10.0),
    )
    return mission, doc.get("scene")
