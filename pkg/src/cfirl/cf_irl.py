"""Counterfactual IRL: preference probability, mixed visitation loss, training.

The reward player ascends J_E - (alpha * J_S + (1 - alpha) * J_pi) plus
magnitude and smoothness regularizers, where each J is the expected return
of a visitation distribution under the current reward field. The policy
player is re-solved by soft value iteration at every update and treated as
constant within each reward gradient step (the standard alternating
semi-gradient). Scenes without labeled counterfactuals contribute the
alpha = 0 form.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .errors import NumericalError, ValidationError
from .grid_mdp import (
    GridMDP,
    VisitationMap,
    empirical_visitation,
    policy_probs_batch,
    policy_visitation_batch,
    value_iteration_batch,
)
from .reward_model import (
    RewardParams,
    backward_batch,
    forward_batch,
    magnitude_regularizer,
    smoothness_penalty,
)
from .synth_world import Scene


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 0.0
    alpha_reg: float = 1.0
    smoothness_weight: float = 4.0
    epochs: int = 25
    learning_rate: float = 0.1
    lr_decay: float = 0.96
    horizon: int = 50
    temperature: float = 0.1
    seed: int = 0
    discount: float = 0.99
    batch_size: int = 8

    def __post_init__(self) -> None:
        if not (0.0 <= self.alpha <= 1.0):
            raise ValidationError("alpha must lie in [0, 1]")
        if self.epochs < 1:
            raise ValidationError("epochs must be >= 1")
        if self.learning_rate <= 0 or not (0.0 < self.lr_decay <= 1.0):
            raise ValidationError("learning_rate must be positive and lr_decay in (0, 1]")
        if self.alpha_reg < 0 or self.smoothness_weight < 0:
            raise ValidationError("regularizer weights must be nonnegative")


def phase1_config(**overrides) -> TrainConfig:
    """Warm-start defaults: expert demonstrations only, 25 epochs."""
    return TrainConfig(**{"alpha": 0.0, "epochs": 25, **overrides})


def phase3_config(**overrides) -> TrainConfig:
    """Counterfactual alignment defaults: alpha 0.5, regularizer 1.0, 50 epochs."""
    return TrainConfig(**{"alpha": 0.5, "alpha_reg": 1.0, "epochs": 50, **overrides})


@dataclass
class SceneBatchStats:
    """Final-epoch means plus the full per-epoch record list."""

    mean_loss: float
    mean_expert_return: float
    mean_suboptimal_return: float
    mean_policy_return: float
    grad_norm: float
    records: list[dict] = field(default_factory=list)


def bradley_terry_prob(j_e: float, j_s: float, j_pi: float, alpha: float) -> float:
    """Probability the expert return beats the alpha-mixed alternative.

    1 / (1 + exp(alpha (J_S - J_E) + (1 - alpha) (J_pi - J_E))), evaluated
    stably for exponents up to +-700.
    """
    x = alpha * (j_s - j_e) + (1.0 - alpha) * (j_pi - j_e)
    if not math.isfinite(x):
        raise ValidationError("bradley_terry_prob requires finite returns")
    if x >= 0:
        z = math.exp(-x)
        return z / (1.0 + z)
    return 1.0 / (1.0 + math.exp(x))


def irl_reward_gradient(
    rho_e: VisitationMap,
    rho_s: Optional[VisitationMap],
    rho_pi: VisitationMap,
    alpha: float,
) -> np.ndarray:
    """Ascent direction for the reward field: rho_E - (alpha rho_S + (1-alpha) rho_pi).

    Marginals run over the 8 move actions; mass absorbed at the goal collects
    zero reward under the zero-reward absorbing-goal convention, so the
    gradient is exactly the derivative of the loss's return difference with
    respect to each cell's reward.
    """
    if rho_s is None:
        if alpha != 0.0:
            raise ValidationError("alpha > 0 requires a suboptimal visitation")
        return rho_e.move_marginal() - rho_pi.move_marginal()
    if rho_s.shape != rho_e.shape or rho_pi.shape != rho_e.shape:
        raise ValidationError("visitation maps must share grid dimensions")
    return (
        rho_e.move_marginal()
        - alpha * rho_s.move_marginal()
        - (1.0 - alpha) * rho_pi.move_marginal()
    )


def suboptimal_visitation(scene: Scene, mdp: GridMDP) -> Optional[VisitationMap]:
    """Mean empirical visitation of the scene's labeled counterfactuals."""
    trajs = scene.labeled_counterfactuals()
    if not trajs:
        return None
    mass = np.zeros((mdp.height, mdp.width, 9))
    for traj in trajs:
        mass += empirical_visitation(traj, mdp).mass
    return VisitationMap(mass / len(trajs))


def _batch_step(scenes: Sequence[Scene], params: RewardParams, cfg: TrainConfig,
                strict_alpha: bool):
    """Loss, mean parameter gradients, and per-scene stats for one scene batch."""
    b = len(scenes)
    h, w = scenes[0].height, scenes[0].width
    x = np.stack([s.grid.stacked() for s in scenes])
    fields, cache = forward_batch(x, params)
    if not np.all(np.isfinite(fields)):
        raise NumericalError("reward head produced non-finite fields")

    mdp = GridMDP(h, w, cfg.discount)
    goal_masks = np.zeros((b, h, w), dtype=bool)
    for i, s in enumerate(scenes):
        goal_masks[i, s.goal[0], s.goal[1]] = True
    q, _, _ = value_iteration_batch(fields, goal_masks, cfg.discount, cfg.horizon, cfg.temperature)
    probs = policy_probs_batch(q, goal_masks, cfg.temperature)
    rho_pi_mass = policy_visitation_batch(probs, [s.start for s in scenes], goal_masks,
                                          cfg.discount, cfg.horizon)

    upstream = np.zeros((b, h, w))
    losses, stats = [], []
    for i, scene in enumerate(scenes):
        rho_e = empirical_visitation(scene.expert, mdp)
        rho_s = suboptimal_visitation(scene, mdp)
        if rho_s is None and cfg.alpha > 0 and strict_alpha:
            raise ValidationError(
                f"scene {scene.id}: alpha={cfg.alpha} requires labeled counterfactual trajectories"
            )
        alpha = cfg.alpha if rho_s is not None else 0.0
        rho_pi = VisitationMap(rho_pi_mass[i])
        field_i = fields[i]

        j_e = float((rho_e.move_marginal() * field_i).sum())
        j_s = float((rho_s.move_marginal() * field_i).sum()) if rho_s is not None else math.nan
        j_pi = float((rho_pi.move_marginal() * field_i).sum())
        data_loss = -(j_e - (alpha * j_s if rho_s is not None else 0.0) - (1 - alpha) * j_pi)

        mag, mag_grad = magnitude_regularizer(field_i)
        smooth, smooth_grad = smoothness_penalty(field_i)
        losses.append(data_loss + cfg.alpha_reg * mag + cfg.smoothness_weight * smooth)

        g = irl_reward_gradient(rho_e, rho_s, rho_pi, alpha)
        upstream[i] = -g + cfg.alpha_reg * mag_grad + cfg.smoothness_weight * smooth_grad
        stats.append({"loss": losses[-1], "j_e": j_e, "j_s": j_s, "j_pi": j_pi})

    grads = backward_batch(params, cache, upstream / b)
    return np.asarray(losses), grads, stats


def scene_loss_and_grad(
    scene: Scene, params: RewardParams, cfg: TrainConfig, strict_alpha: bool = True
) -> tuple[float, dict[str, np.ndarray], dict]:
    """Loss, exact parameter gradients, and stats for a single scene.

    With strict_alpha, a positive alpha and no labeled counterfactuals is a
    rejection; the trainer relaxes this so mixed datasets fall back to the
    alpha = 0 form per scene.
    """
    losses, grads, stats = _batch_step([scene], params, cfg, strict_alpha)
    entry = dict(stats[0])
    entry["grad_norm"] = _grad_norm(grads)
    return float(losses[0]), grads, entry


def _grad_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float((g**2).sum()) for g in grads.values()))


def train(
    scenes: Sequence[Scene], params: RewardParams, cfg: TrainConfig
) -> tuple[RewardParams, SceneBatchStats]:
    """Mini-batch gradient descent on the counterfactual IRL loss.

    Deterministic in (scenes, params, cfg): the per-epoch scene order comes
    from a generator seeded with cfg.seed and gradients reduce in a fixed
    order within each batch.
    """
    if not scenes:
        raise ValidationError("train requires a non-empty scene collection")
    dims = {(s.height, s.width, s.grid.channel_count) for s in scenes}
    if len(dims) != 1:
        raise ValidationError(f"scenes must share grid dimensions, got {sorted(dims)}")
    if cfg.alpha > 0 and not any(s.labeled_counterfactuals() for s in scenes):
        raise ValidationError("alpha > 0 but no scene carries labeled counterfactuals")

    rng = np.random.default_rng(cfg.seed)
    records: list[dict] = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(scenes))
        lr = cfg.learning_rate * cfg.lr_decay**epoch
        epoch_losses: list[float] = []
        epoch_stats: list[dict] = []
        norms: list[float] = []
        for lo in range(0, len(scenes), cfg.batch_size):
            batch = [scenes[i] for i in order[lo : lo + cfg.batch_size]]
            losses, grads, stats = _batch_step(batch, params, cfg, strict_alpha=False)
            if not np.all(np.isfinite(losses)):
                bad = [b.id for b, l in zip(batch, losses) if not np.isfinite(l)]
                raise NumericalError(f"non-finite loss at epoch {epoch} on scenes {bad}")
            params = params.update(grads, lr)
            epoch_losses.extend(losses.tolist())
            epoch_stats.extend(stats)
            norms.append(_grad_norm(grads))
        j_s_vals = [s["j_s"] for s in epoch_stats if math.isfinite(s["j_s"])]
        records.append({
            "epoch": epoch,
            "loss": float(np.mean(epoch_losses)),
            "j_e": float(np.mean([s["j_e"] for s in epoch_stats])),
            "j_s": float(np.mean(j_s_vals)) if j_s_vals else math.nan,
            "j_pi": float(np.mean([s["j_pi"] for s in epoch_stats])),
            "grad_norm": float(np.mean(norms)),
        })
    last = records[-1]
    stats = SceneBatchStats(
        mean_loss=last["loss"],
        mean_expert_return=last["j_e"],
        mean_suboptimal_return=last["j_s"],
        mean_policy_return=last["j_pi"],
        grad_norm=last["grad_norm"],
        records=records,
    )
    return params, stats


def write_training_log(stats: SceneBatchStats, path) -> None:
    """Tab-separated per-epoch log: epoch, loss, J_E, J_S, J_pi, grad_norm."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch\tloss\tJ_E\tJ_S\tJ_pi\tgrad_norm\n")
        for rec in stats.records:
            fh.write(
                f"{rec['epoch']}\t{rec['loss']:.9g}\t{rec['j_e']:.9g}\t"
                f"{rec['j_s']:.9g}\t{rec['j_pi']:.9g}\t{rec['grad_norm']:.9g}\n"
            )
