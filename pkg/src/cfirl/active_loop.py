"""Three-phase active reward learning with counterfactual annotation.

Phase I warm-starts the reward on expert demonstrations alone. Each round
then rolls out the greedy policy per scene, selects scenes whose rollout
strays beyond a Hausdorff threshold, generates candidate alternates around
those experts, asks an annotator (human service or the cost oracle) to mark
counterfactuals, and retrains from scratch with the mixed objective until
the mean Hausdorff stops improving or the round budget runs out.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .cf_gen import CandidateSet, CfGenConfig, generate_candidates
from .cf_irl import SceneBatchStats, TrainConfig, phase1_config, phase3_config, train
from .errors import GenerationError, ValidationError
from .grid_mdp import Trajectory, greedy_rollout
from .reward_model import HeadConfig, RewardParams, forward, init_params
from .synth_world import Scene, path_cost

AnnotateFn = Callable[[Scene, CandidateSet], dict[int, bool]]
# round-level annotator: receives every (scene, fresh candidates) pair of the
# round at once and returns labels per scene id; the human service path
# creates all sessions up front and blocks until annotators finish
RoundAnnotateFn = Callable[[int, list[tuple[Scene, CandidateSet]]], dict[str, dict[int, bool]]]


@dataclass(frozen=True)
class LoopConfig:
    hausdorff_threshold: float = 2.0  # cells
    max_rounds: int = 3
    convergence_eps: float = 0.25  # cells of mean-Hausdorff improvement
    phase1: TrainConfig = field(default_factory=phase1_config)
    phase3: TrainConfig = field(default_factory=phase3_config)
    annotator: str = "oracle"  # "oracle" | "human_service"
    oracle_margin: float = 0.1
    cf: CfGenConfig = field(default_factory=CfGenConfig)
    head: HeadConfig = field(default_factory=lambda: HeadConfig(kind="linear", in_channels=6))
    rollout_horizon: int = 110
    seed: int = 0

    def __post_init__(self) -> None:
        if self.hausdorff_threshold <= 0:
            raise ValidationError("hausdorff_threshold must be positive")
        if self.max_rounds < 1:
            raise ValidationError("max_rounds must be >= 1")
        if self.annotator not in ("oracle", "human_service"):
            raise ValidationError(f"unknown annotator {self.annotator!r}")


@dataclass
class RoundReport:
    round_index: int
    selected_ids: list[str]
    counterfactual_count: int
    mean_hausdorff_before: float
    mean_hausdorff_after: float
    train_loss: float


@dataclass
class LoopReport:
    phase_sequence: list[str]
    baseline_mean_hausdorff: float
    final_mean_hausdorff: float
    rounds: list[RoundReport]
    converged: bool

    def to_doc(self) -> dict:
        return {
            "phase_sequence": self.phase_sequence,
            "baseline_mean_hausdorff": self.baseline_mean_hausdorff,
            "final_mean_hausdorff": self.final_mean_hausdorff,
            "converged": self.converged,
            "rounds": [
                {
                    "round": r.round_index,
                    "selected_ids": r.selected_ids,
                    "counterfactual_count": r.counterfactual_count,
                    "mean_hausdorff_before": r.mean_hausdorff_before,
                    "mean_hausdorff_after": r.mean_hausdorff_after,
                    "train_loss": r.train_loss,
                }
                for r in self.rounds
            ],
        }

    def summary_table(self) -> str:
        lines = ["round\tselected\tcounterfactuals\tmeanH_before\tmeanH_after"]
        for r in self.rounds:
            lines.append(
                f"{r.round_index}\t{len(r.selected_ids)}\t{r.counterfactual_count}"
                f"\t{r.mean_hausdorff_before:.3f}\t{r.mean_hausdorff_after:.3f}"
            )
        return "\n".join(lines) + "\n"


def hausdorff(a: Trajectory | Sequence[tuple[int, int]], b: Trajectory | Sequence[tuple[int, int]]) -> float:
    """Symmetric Hausdorff distance between two state sets, in cells."""
    pa = a.as_array() if isinstance(a, Trajectory) else np.asarray(list(a), dtype=float)
    pb = b.as_array() if isinstance(b, Trajectory) else np.asarray(list(b), dtype=float)
    if pa.size == 0 or pb.size == 0:
        raise ValidationError("hausdorff requires non-empty trajectories")
    pa = pa.astype(float).reshape(-1, 2)
    pb = pb.astype(float).reshape(-1, 2)
    d = np.linalg.norm(pa[:, None, :] - pb[None, :, :], axis=2)
    return float(max(d.min(axis=1).max(), d.min(axis=0).max()))


def rollout_policy(scene: Scene, params: RewardParams, horizon: int = 110,
                   discount: float = 0.99) -> Trajectory:
    """Greedy (temperature -> 0) rollout from the expert start toward its goal."""
    field_ = forward(scene.grid, params)
    iters = max(50, scene.height + scene.width)
    return greedy_rollout(field_, scene.start, scene.goal, scene.mdp(discount),
                          iters=iters, horizon=horizon)


def select_hard_scenes(
    scenes: Sequence[Scene], params: RewardParams, threshold: float,
    horizon: int = 110,
) -> list[str]:
    """Ids of scenes whose greedy rollout strays beyond `threshold` cells."""
    selected = []
    for scene in scenes:
        roll = rollout_policy(scene, params, horizon=horizon)
        if hausdorff(roll, scene.expert) > threshold:
            selected.append(scene.id)
    return selected


def oracle_annotate(candidates: CandidateSet, scene: Scene, margin: float = 0.1) -> dict[int, bool]:
    """Synthetic annotator: counterfactual iff a candidate enters a forbidden
    cell or its oracle path cost exceeds (1 + margin) x the expert's."""
    expert_cost = path_cost(scene, scene.expert)
    labels: dict[int, bool] = {}
    for cand in candidates.candidates:
        cost = path_cost(scene, cand.trajectory)
        labels[cand.id] = bool(np.isinf(cost) or cost > (1.0 + margin) * expert_cost)
    return labels


def mean_rollout_hausdorff(scenes: Sequence[Scene], params: RewardParams,
                           horizon: int = 110) -> float:
    return float(np.mean([hausdorff(rollout_policy(s, params, horizon=horizon), s.expert)
                          for s in scenes]))


def run_active_loop(
    scenes: Sequence[Scene],
    cfg: LoopConfig,
    annotate_fn: Optional[AnnotateFn] = None,
    round_callback: Optional[Callable[[int, RewardParams, LoopReport], None]] = None,
    annotate_round_fn: Optional[RoundAnnotateFn] = None,
) -> tuple[RewardParams, LoopReport]:
    """Phase I, then repeated (II select + annotate, III retrain from scratch).

    With the oracle annotator the whole loop is deterministic in (scenes,
    cfg). Phase III reinitializes the reward parameters from scratch each
    round. `annotate_fn` overrides the annotator (the human service path
    plugs in here); `round_callback` runs after each retrain, for
    checkpointing.
    """
    if not scenes:
        raise ValidationError("run_active_loop requires scenes")
    if annotate_round_fn is None:
        if annotate_fn is None:
            if cfg.annotator != "oracle":
                raise ValidationError("human_service annotation requires an annotator callback")
            annotate_fn = lambda scene, cands: oracle_annotate(cands, scene, cfg.oracle_margin)
        per_scene = annotate_fn

        def annotate_round_fn(round_idx, pairs):
            return {scene.id: per_scene(scene, cands) for scene, cands in pairs}

    phases = ["I"]
    params = init_params(cfg.head, seed=cfg.seed)
    params, stats1 = train(scenes, params, cfg.phase1)
    mean_h = mean_rollout_hausdorff(scenes, params, cfg.rollout_horizon)
    report = LoopReport(
        phase_sequence=phases,
        baseline_mean_hausdorff=mean_h,
        final_mean_hausdorff=mean_h,
        rounds=[],
        converged=False,
    )

    best_params, best_mean = params, mean_h
    for round_idx in range(1, cfg.max_rounds + 1):
        phases.append("II")
        selected = select_hard_scenes(scenes, best_params, cfg.hausdorff_threshold, cfg.rollout_horizon)
        if not selected:
            report.converged = True
            break
        cf_count = 0
        by_id = {s.id: s for s in scenes}
        pairs: list[tuple[Scene, CandidateSet]] = []
        for rank, sid in enumerate(selected):
            scene = by_id[sid]
            cf_seed = int(np.random.default_rng((cfg.seed, round_idx, rank)).integers(2**31))
            cands = None
            mu = cfg.cf.mu
            while mu >= 0.5:  # experts near borders cannot support deep bows
                try:
                    cands = generate_candidates(
                        scene.expert, replace(cfg.cf, mu=mu, seed=cf_seed),
                        (scene.height, scene.width),
                    )
                    break
                except GenerationError:
                    mu /= 2.0
            if cands is not None:
                pairs.append((scene, cands))
        round_labels = annotate_round_fn(round_idx, pairs)
        for scene, cands in pairs:
            labels = round_labels.get(scene.id)
            if labels is None:
                continue
            if scene.candidates is not None:
                # annotations accumulate across rounds under fresh ids
                offset = max(c.id for c in scene.candidates.candidates) + 1
                merged = list(scene.candidates.candidates)
                for c in cands.candidates:
                    merged.append(replace(c, id=c.id + offset))
                scene.candidates = replace(scene.candidates, candidates=tuple(merged))
                labels = {cid + offset: v for cid, v in labels.items()}
                scene.counterfactual_labels = {**scene.counterfactual_labels, **labels}
            else:
                scene.candidates = cands
                scene.counterfactual_labels = labels
            cf_count += sum(labels.values())

        phases.append("III")
        params = init_params(cfg.head, seed=cfg.seed + round_idx)
        params, stats3 = train(scenes, params, replace(cfg.phase3, seed=cfg.phase3.seed + round_idx))
        new_mean = mean_rollout_hausdorff(scenes, params, cfg.rollout_horizon)
        report.rounds.append(RoundReport(
            round_index=round_idx,
            selected_ids=list(selected),
            counterfactual_count=cf_count,
            mean_hausdorff_before=mean_h,
            mean_hausdorff_after=new_mean,
            train_loss=stats3.mean_loss,
        ))
        improvement = mean_h - new_mean
        mean_h = new_mean
        if new_mean < best_mean:
            best_params, best_mean = params, new_mean
        report.final_mean_hausdorff = best_mean
        if round_callback is not None:
            round_callback(round_idx, best_params, report)
        if 0.0 <= improvement < cfg.convergence_eps:
            report.converged = True
            break

    return best_params, report


def save_loop_report(report: LoopReport, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.to_doc(), fh, indent=2, sort_keys=True)
        fh.write("\n")
