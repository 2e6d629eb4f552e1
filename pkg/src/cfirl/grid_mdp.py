"""Grid MDP primitives: 8-connected actions, visitation distributions, soft VI.

States are (row, col) cells. Actions are the 8 unit moves in the fixed order
N, NE, E, SE, S, SW, W, NW; a ninth "stay" slot holds the discounted mass of
trajectories absorbed at the goal. Moves that would leave the grid are
invalid (masked), not self-loops. Visitation maps are normalized by (1 - gamma)
so a trajectory or policy that reaches the absorbing goal carries total mass 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import NumericalError, ValidationError

ACTIONS: tuple[tuple[int, int], ...] = (
    (-1, 0),   # N
    (-1, 1),   # NE
    (0, 1),    # E
    (1, 1),    # SE
    (1, 0),    # S
    (1, -1),   # SW
    (0, -1),   # W
    (-1, -1),  # NW
)
ACTION_NAMES = ("N", "NE", "E", "SE", "S", "SW", "W", "NW")
N_ACTIONS = 8
STAY = 8  # extra slot index in visitation/policy arrays

TRAJECTORY_KINDS = ("expert", "counterfactual", "candidate", "rollout")

# exact-tie preference for greedy action selection: ties go to the move whose
# destination is nearest the goal, then cardinal moves before diagonals, so
# argmax rollouts neither zigzag along corridors nor wander on flat q-values
GREEDY_TIE_ORDER = (0, 2, 4, 6, 1, 3, 5, 7)
_TIE_RANK = np.argsort(GREEDY_TIE_ORDER)  # rank of each action in the order
_TIE_EPS = 1e-12


def greedy_action(q_cell: np.ndarray, cell: tuple[int, int] | None = None,
                  goal: tuple[int, int] | None = None) -> int:
    """Argmax over one cell's q-values with deterministic tie-breaking."""
    qmax = q_cell.max()
    tie = q_cell >= qmax - _TIE_EPS
    score = np.full(N_ACTIONS, np.inf)
    for a in range(N_ACTIONS):
        if not tie[a]:
            continue
        if cell is not None and goal is not None:
            dr, dc = ACTIONS[a]
            dist = float(np.hypot(cell[0] + dr - goal[0], cell[1] + dc - goal[1]))
        else:
            dist = 0.0
        score[a] = dist * 1000.0 + _TIE_RANK[a]
    return int(np.argmin(score))


@dataclass(frozen=True)
class GridMDP:
    """Deterministic 8-connected grid with discounting."""

    height: int
    width: int
    discount: float

    def __post_init__(self) -> None:
        if self.height < 1 or self.width < 1:
            raise ValidationError(f"grid dimensions must be positive, got {self.height}x{self.width}")
        if not (0.0 < self.discount < 1.0):
            raise ValidationError(f"discount must lie in (0, 1), got {self.discount}")

    def in_bounds(self, row: int, col: int) -> bool:
        return 0 <= row < self.height and 0 <= col < self.width

    def valid_action_mask(self) -> np.ndarray:
        """Boolean (8, H, W) mask of actions that stay on the grid."""
        return _valid_mask(self.height, self.width)


def _valid_mask(height: int, width: int) -> np.ndarray:
    mask = np.ones((N_ACTIONS, height, width), dtype=bool)
    for a, (dr, dc) in enumerate(ACTIONS):
        if dr == -1:
            mask[a, 0, :] = False
        if dr == 1:
            mask[a, height - 1, :] = False
        if dc == -1:
            mask[a, :, 0] = False
        if dc == 1:
            mask[a, :, width - 1] = False
    return mask


@dataclass(frozen=True)
class CellState:
    row: int
    col: int

    def as_tuple(self) -> tuple[int, int]:
        return (self.row, self.col)


@dataclass(frozen=True)
class Trajectory:
    """Ordered cell sequence whose consecutive states are valid 8-moves."""

    states: tuple[tuple[int, int], ...]
    kind: str = "candidate"

    def __post_init__(self) -> None:
        if self.kind not in TRAJECTORY_KINDS:
            raise ValidationError(f"unknown trajectory kind {self.kind!r}")
        if len(self.states) < 1:
            raise ValidationError("trajectory must contain at least one state")
        object.__setattr__(self, "states", tuple((int(r), int(c)) for r, c in self.states))

    def __len__(self) -> int:
        return len(self.states)

    @property
    def start(self) -> tuple[int, int]:
        return self.states[0]

    @property
    def goal(self) -> tuple[int, int]:
        return self.states[-1]

    def validate(self, mdp: GridMDP) -> None:
        """Raise ValidationError naming the first offending step index."""
        for i, (r, c) in enumerate(self.states):
            if not mdp.in_bounds(r, c):
                raise ValidationError(f"trajectory state {i} = {(r, c)} is out of bounds")
        for i in range(len(self.states) - 1):
            dr = self.states[i + 1][0] - self.states[i][0]
            dc = self.states[i + 1][1] - self.states[i][1]
            if (dr, dc) not in ACTIONS:
                raise ValidationError(
                    f"trajectory step {i} -> {i + 1} moves by {(dr, dc)}, not a valid 8-connected move"
                )

    def actions(self) -> list[int]:
        """Action index taken at each step."""
        out = []
        for i in range(len(self.states) - 1):
            dr = self.states[i + 1][0] - self.states[i][0]
            dc = self.states[i + 1][1] - self.states[i][1]
            out.append(ACTIONS.index((dr, dc)))
        return out

    def as_array(self) -> np.ndarray:
        return np.asarray(self.states, dtype=np.int64)


@dataclass
class VisitationMap:
    """Discounted state-action occupancy: (H, W, 9) with the stay slot last."""

    mass: np.ndarray

    def __post_init__(self) -> None:
        self.mass = np.asarray(self.mass, dtype=np.float64)
        if self.mass.ndim != 3 or self.mass.shape[2] != N_ACTIONS + 1:
            raise ValidationError(f"visitation mass must be (H, W, 9), got {self.mass.shape}")
        if np.any(self.mass < -1e-15):
            raise ValidationError("visitation mass must be nonnegative")

    @property
    def shape(self) -> tuple[int, int]:
        return self.mass.shape[0], self.mass.shape[1]

    def total(self) -> float:
        return float(self.mass.sum())

    def cell_marginal(self) -> np.ndarray:
        """Per-cell mass summed over the 8 actions and the stay slot."""
        return self.mass.sum(axis=2)

    def move_marginal(self) -> np.ndarray:
        """Per-cell mass summed over the 8 move actions only.

        The absorbing stay slot is excluded: inside the training objective,
        absorbed mass collects zero reward (zero-reward absorbing goal).
        """
        return self.mass[..., :N_ACTIONS].sum(axis=2)


@dataclass
class SoftPolicy:
    """Per-cell action distribution with the q-values that induced it.

    probs is (H, W, 9); the stay slot is 1 at the absorbing goal and 0
    elsewhere. q_values is (H, W, 8) with -inf at invalid actions.
    """

    probs: np.ndarray
    q_values: np.ndarray
    temperature: float
    goal: tuple[int, int]
    bellman_residual: float
    residual_history: np.ndarray

    def __post_init__(self) -> None:
        sums = self.probs.sum(axis=2)
        if not np.allclose(sums, 1.0, atol=1e-9):
            raise ValidationError("policy probabilities must sum to 1 per cell")
        if np.any(self.probs < 0):
            raise ValidationError("policy probabilities must be nonnegative")


def empirical_visitation(traj: Trajectory, mdp: GridMDP) -> VisitationMap:
    """Discounted occupancy of a single trajectory, absorbing at its final state.

    The t-th state-action carries (1-gamma)*gamma^t; the residual gamma^T sits
    on the final state's stay slot, so the total mass is exactly 1.
    """
    traj.validate(mdp)
    gamma = mdp.discount
    mass = np.zeros((mdp.height, mdp.width, N_ACTIONS + 1), dtype=np.float64)
    actions = traj.actions()
    for t, a in enumerate(actions):
        r, c = traj.states[t]
        mass[r, c, a] += (1.0 - gamma) * gamma**t
    gr, gc = traj.states[-1]
    mass[gr, gc, STAY] += gamma ** len(actions)
    return VisitationMap(mass)


def _shift_values(values: np.ndarray, dr: int, dc: int, fill: float) -> np.ndarray:
    """values[..., r+dr, c+dc] with `fill` where the neighbor is off-grid."""
    out = np.full_like(values, fill)
    h, w = values.shape[-2], values.shape[-1]
    rs = slice(max(0, -dr), min(h, h - dr))
    cs = slice(max(0, -dc), min(w, w - dc))
    rs_src = slice(max(0, dr), min(h, h + dr))
    cs_src = slice(max(0, dc), min(w, w + dc))
    out[..., rs, cs] = values[..., rs_src, cs_src]
    return out


def _scatter_forward(mass: np.ndarray, dr: int, dc: int) -> np.ndarray:
    """Move per-cell mass one step along action (dr, dc)."""
    out = np.zeros_like(mass)
    h, w = mass.shape[-2], mass.shape[-1]
    rs_dst = slice(max(0, dr), min(h, h + dr))
    cs_dst = slice(max(0, dc), min(w, w + dc))
    rs_src = slice(max(0, -dr), min(h, h - dr))
    cs_src = slice(max(0, -dc), min(w, w - dc))
    out[..., rs_dst, cs_dst] = mass[..., rs_src, cs_src]
    return out


def value_iteration_batch(
    rewards: np.ndarray,
    goal_masks: np.ndarray,
    discount: float,
    iters: int,
    temperature: float,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Soft value iteration over a batch of reward fields.

    rewards: (B, H, W) finite fields; goal_masks: (B, H, W) boolean, one True
    cell per scene. The backup treats the goal as absorbing with value 0 and
    collects the reward of the cell an action departs from:

        Q(s, a) = r(s) + gamma * V(next(s, a))
        V(s)    = tau * (logsumexp_a(Q(s, a) / tau) - log n_valid(s))

    The mean-normalized logsumexp reduces to a plain max as tau -> 0 and does
    not reward cells for their action count. Returns (q, values, residuals)
    where q is (B, H, W, 8) with -inf at invalid actions and residuals is
    (iters,) holding the max |V_k - V_{k-1}| per iteration, maxed over the
    batch.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    if not np.all(np.isfinite(rewards)):
        raise NumericalError("reward field contains non-finite entries")
    if iters < 1:
        raise ValidationError("iters must be >= 1")
    b, h, w = rewards.shape
    valid = _valid_mask(h, w)  # (8, H, W)
    n_valid = valid.sum(axis=0).astype(np.float64)  # (H, W)
    log_n = np.log(n_valid)

    values = np.zeros((b, h, w), dtype=np.float64)
    residuals = np.zeros(iters, dtype=np.float64)
    q = np.full((b, N_ACTIONS, h, w), -np.inf, dtype=np.float64)
    for k in range(iters):
        for a, (dr, dc) in enumerate(ACTIONS):
            nxt = _shift_values(values, dr, dc, 0.0)
            q[:, a] = np.where(valid[a], rewards + discount * nxt, -np.inf)
        if temperature > 0.0:
            qmax = q.max(axis=1)
            expsum = np.exp((q - qmax[:, None]) / temperature, where=np.isfinite(q), out=np.zeros_like(q)).sum(axis=1)
            new_values = qmax + temperature * (np.log(expsum) - log_n)
        else:
            new_values = q.max(axis=1)
        new_values = np.where(goal_masks, 0.0, new_values)
        residuals[k] = np.max(np.abs(new_values - values))
        values = new_values
    return np.moveaxis(q, 1, -1), values, residuals


def policy_probs_batch(q: np.ndarray, goal_masks: np.ndarray, temperature: float) -> np.ndarray:
    """Softmax action probabilities (B, H, W, 9) from batched q-values.

    temperature == 0 yields a one-hot argmax policy with ties broken toward
    the lowest action index. Goal cells place probability 1 on the stay slot.
    """
    b, h, w, _ = q.shape
    probs = np.zeros((b, h, w, N_ACTIONS + 1), dtype=np.float64)
    if temperature > 0.0:
        qmax = q.max(axis=3, keepdims=True)
        ex = np.exp((q - qmax) / temperature, where=np.isfinite(q), out=np.zeros(q.shape))
        probs[..., :N_ACTIONS] = ex / ex.sum(axis=3, keepdims=True)
    else:
        qmax = q.max(axis=3, keepdims=True)
        tie = q >= qmax - _TIE_EPS
        score = np.where(tie, _tie_scores(goal_masks), np.inf)
        best = score.argmin(axis=3)
        np.put_along_axis(probs[..., :N_ACTIONS], best[..., None], 1.0, axis=3)
    probs[goal_masks] = 0.0
    probs[..., STAY][goal_masks] = 1.0
    return probs


def _tie_scores(goal_masks: np.ndarray) -> np.ndarray:
    """Per (scene, cell, action) tie-break score: goal distance of the move's
    destination (scaled), plus the cardinal-first rank."""
    b, h, w = goal_masks.shape
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    out = np.zeros((b, h, w, N_ACTIONS))
    for i in range(b):
        gr, gc = np.argwhere(goal_masks[i])[0]
        for a, (dr, dc) in enumerate(ACTIONS):
            dist = np.hypot(rows + dr - gr, cols + dc - gc)
            out[i, :, :, a] = dist * 1000.0 + _TIE_RANK[a]
    return out


def soft_value_iteration(
    rewards: np.ndarray,
    goal: tuple[int, int],
    mdp: GridMDP,
    iters: int = 50,
    temperature: float = 1.0,
) -> SoftPolicy:
    """Solve for a Boltzmann policy on a reward field with an absorbing goal."""
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.shape != (mdp.height, mdp.width):
        raise ValidationError(f"reward field shape {rewards.shape} does not match grid {(mdp.height, mdp.width)}")
    if not mdp.in_bounds(*goal):
        raise ValidationError(f"goal {goal} out of bounds")
    goal_mask = np.zeros((1, mdp.height, mdp.width), dtype=bool)
    goal_mask[0, goal[0], goal[1]] = True
    q, _, residuals = value_iteration_batch(rewards[None], goal_mask, mdp.discount, iters, temperature)
    probs = policy_probs_batch(q, goal_mask, temperature)
    return SoftPolicy(
        probs=probs[0],
        q_values=q[0],
        temperature=temperature,
        goal=tuple(goal),
        bellman_residual=float(residuals[-1]),
        residual_history=residuals,
    )


def policy_visitation_batch(
    probs: np.ndarray,
    starts: Sequence[tuple[int, int]],
    goal_masks: np.ndarray,
    discount: float,
    horizon: int,
) -> np.ndarray:
    """Forward-propagated discounted occupancy for a batch of policies.

    Mass sitting on a goal cell at step t is absorbed: the full discounted
    tail gamma^t moves to the stay slot and leaves propagation. Mass still in
    transit after `horizon` steps is dropped, so totals lie in
    [1 - gamma^horizon, 1].
    """
    if horizon < 1:
        raise ValidationError("horizon must be >= 1")
    b, h, w, _ = probs.shape
    mass = np.zeros((b, h, w, N_ACTIONS + 1), dtype=np.float64)
    p = np.zeros((b, h, w), dtype=np.float64)
    for i, (r, c) in enumerate(starts):
        p[i, r, c] = 1.0
    for t in range(horizon):
        scale = discount**t
        at_goal = np.where(goal_masks, p, 0.0)
        mass[..., STAY] += scale * at_goal
        p = p - at_goal
        moving = probs[..., :N_ACTIONS] * p[..., None]
        mass[..., :N_ACTIONS] += (1.0 - discount) * scale * moving
        nxt = np.zeros_like(p)
        for a, (dr, dc) in enumerate(ACTIONS):
            nxt += _scatter_forward(moving[..., a], dr, dc)
        p = nxt
    return mass


def policy_visitation(
    policy: SoftPolicy,
    start: tuple[int, int],
    goal: tuple[int, int],
    mdp: GridMDP,
    horizon: int = 50,
) -> VisitationMap:
    """Discounted occupancy of a soft policy rolled forward from `start`."""
    if not mdp.in_bounds(*start) or not mdp.in_bounds(*goal):
        raise ValidationError("start or goal out of bounds")
    goal_mask = np.zeros((1, mdp.height, mdp.width), dtype=bool)
    goal_mask[0, goal[0], goal[1]] = True
    mass = policy_visitation_batch(policy.probs[None], [start], goal_mask, mdp.discount, horizon)
    return VisitationMap(mass[0])


def return_of(vis: VisitationMap, rewards: np.ndarray) -> float:
    """Expected discounted return sum_{s,a} rho(s,a) r(s).

    Every slot, including stay, collects the reward of its own cell; absorbed
    mass therefore keeps accruing the goal cell's reward, which keeps returns
    invariant to constant reward shifts for normalized visitations.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.shape != vis.shape:
        raise ValidationError(f"reward field shape {rewards.shape} does not match visitation {vis.shape}")
    return float((vis.cell_marginal() * rewards).sum())


def greedy_rollout(
    rewards: np.ndarray,
    start: tuple[int, int],
    goal: tuple[int, int],
    mdp: GridMDP,
    iters: int = 50,
    horizon: int = 50,
) -> Trajectory:
    """Argmax rollout of the temperature-0 value-iteration policy.

    Terminates at the goal or after `horizon` moves, whichever comes first.
    """
    policy = soft_value_iteration(rewards, goal, mdp, iters=iters, temperature=0.0)
    states = [tuple(start)]
    cur = tuple(start)
    for _ in range(horizon):
        if cur == tuple(goal):
            break
        a = greedy_action(policy.q_values[cur[0], cur[1]], cur, tuple(goal))
        dr, dc = ACTIONS[a]
        cur = (cur[0] + dr, cur[1] + dc)
        states.append(cur)
    return Trajectory(states=tuple(states), kind="rollout")
