"""Reward heads mapping BEV feature grids to scalar reward fields.

Two head kinds share one interface: a linear head (per-cell dot product,
used for oracle-recovery checks) and a two-scale fully convolutional head
with 3x3 kernels, rectified-linear activations, an average-pooled half
resolution trunk, and a bilinearly upsampled skip merge. Forward and reverse
passes are written directly in NumPy so gradients are exact and runs are
bitwise reproducible; there is no autodiff graph, only this fixed family.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional

import numpy as np

from .errors import NumericalError, ValidationError

CHECKPOINT_MAGIC = b"CFIRL-RW1\n"


@dataclass(frozen=True)
class FeatureGrid:
    """Structured BEV feature map with named channel groups.

    Channel order when stacked is static semantic, dynamic, elevation.
    """

    cell_size: float
    static_semantic: np.ndarray  # (K_s, H, W)
    dynamic: np.ndarray          # (K_d, H, W)
    elevation: np.ndarray        # (H, W)

    def __post_init__(self) -> None:
        ss = np.asarray(self.static_semantic, dtype=np.float64)
        dy = np.asarray(self.dynamic, dtype=np.float64)
        el = np.asarray(self.elevation, dtype=np.float64)
        if ss.ndim != 3 or ss.shape[0] < 1:
            raise ValidationError("static_semantic must be (K_s >= 1, H, W)")
        if dy.ndim != 3 or el.ndim != 2:
            raise ValidationError("dynamic must be (K_d, H, W) and elevation (H, W)")
        if ss.shape[1:] != dy.shape[1:] or ss.shape[1:] != el.shape:
            raise ValidationError("channel groups must share spatial dimensions")
        for name, arr in (("static_semantic", ss), ("dynamic", dy), ("elevation", el)):
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"{name} contains non-finite values")
        if self.cell_size <= 0:
            raise ValidationError("cell_size must be positive")
        object.__setattr__(self, "static_semantic", ss)
        object.__setattr__(self, "dynamic", dy)
        object.__setattr__(self, "elevation", el)

    @property
    def height(self) -> int:
        return self.elevation.shape[0]

    @property
    def width(self) -> int:
        return self.elevation.shape[1]

    @property
    def channel_count(self) -> int:
        return self.static_semantic.shape[0] + self.dynamic.shape[0] + 1

    def stacked(self) -> np.ndarray:
        """All channels as one (C, H, W) array."""
        return np.concatenate(
            [self.static_semantic, self.dynamic, self.elevation[None]], axis=0
        )


@dataclass(frozen=True)
class HeadConfig:
    kind: str  # "linear" | "msfcn"
    in_channels: int
    prepool: tuple[int, int] = (64, 32)
    skip: tuple[int, int] = (32, 16)
    trunk: tuple[int, int] = (32, 32)
    postpool: tuple[int, ...] = (48,)

    def __post_init__(self) -> None:
        for name in ("prepool", "skip", "trunk", "postpool"):
            object.__setattr__(self, name, tuple(int(w) for w in getattr(self, name)))
        if self.kind not in ("linear", "msfcn"):
            raise ValidationError(f"unknown head kind {self.kind!r}")
        if self.in_channels < 1:
            raise ValidationError("in_channels must be >= 1")
        if self.kind == "msfcn":
            widths = (*self.prepool, *self.skip, *self.trunk, *self.postpool)
            if len(self.prepool) != 2 or len(self.skip) != 2 or len(self.trunk) != 2:
                raise ValidationError("prepool, skip, and trunk each take two layer widths")
            if len(self.postpool) != 1:
                raise ValidationError("postpool must name exactly one layer width")
            if any(w < 1 for w in widths):
                raise ValidationError("layer widths must be positive")

    def layer_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        if self.kind == "linear":
            return [("weight", (self.in_channels,)), ("bias", (1,))]
        c = self.in_channels
        pp1, pp2 = self.prepool
        sk1, sk2 = self.skip
        tr1, tr2 = self.trunk
        post = self.postpool[0]
        shapes: list[tuple[str, tuple[int, ...]]] = []
        for name, cout, cin in (
            ("pp1", pp1, c), ("pp2", pp2, pp1),
            ("sk1", sk1, pp2), ("sk2", sk2, sk1),
            ("tr1", tr1, pp2), ("tr2", tr2, tr1),
            ("post", post, sk2 + tr2),
        ):
            shapes.append((f"{name}_w", (cout, cin, 3, 3)))
            shapes.append((f"{name}_b", (cout,)))
        shapes.append(("out_w", (post,)))
        shapes.append(("out_b", (1,)))
        return shapes

    def param_count(self) -> int:
        return sum(int(np.prod(shape)) for _, shape in self.layer_shapes())


@dataclass
class RewardParams:
    """Parameter set for one head; treated as an immutable value."""

    config: HeadConfig
    seed: int
    tensors: dict[str, np.ndarray]

    @property
    def param_count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def copy(self) -> "RewardParams":
        return RewardParams(self.config, self.seed, {k: v.copy() for k, v in self.tensors.items()})

    def update(self, grads: dict[str, np.ndarray], step: float) -> "RewardParams":
        """New parameters moved by -step * grads."""
        new = {k: v - step * grads[k] for k, v in self.tensors.items()}
        return RewardParams(self.config, self.seed, new)


def init_params(config: HeadConfig, seed: int) -> RewardParams:
    """Deterministic initialization.

    Weights are fan-in-scaled normal draws (std sqrt(2 / fan_in) for conv
    layers, 0.05 / sqrt(C) for the linear head); biases start at zero except
    the output bias, which starts at -0.5 so untrained fields already favor
    absorption at the goal.
    """
    rng = np.random.default_rng(seed)
    tensors: dict[str, np.ndarray] = {}
    for name, shape in config.layer_shapes():
        if name.endswith("_b") or name == "bias":
            tensors[name] = np.zeros(shape, dtype=np.float64)
        elif name == "weight":  # linear head
            tensors[name] = rng.normal(0.0, 0.05 / np.sqrt(config.in_channels), size=shape)
        elif name == "out_w":
            tensors[name] = rng.normal(0.0, np.sqrt(2.0 / shape[0]), size=shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            tensors[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
    tensors["out_b" if config.kind == "msfcn" else "bias"][:] = -0.5
    return RewardParams(config=config, seed=seed, tensors=tensors)


# ---------------------------------------------------------------------------
# primitive ops (all exact-transpose pairs)
# ---------------------------------------------------------------------------

def _shift2d(x: np.ndarray, dr: int, dc: int) -> np.ndarray:
    """x[..., r+dr, c+dc] with zero fill outside the grid."""
    out = np.zeros_like(x)
    h, w = x.shape[-2], x.shape[-1]
    rs = slice(max(0, -dr), min(h, h - dr))
    cs = slice(max(0, -dc), min(w, w - dc))
    out[..., rs, cs] = x[..., slice(max(0, dr), min(h, h + dr)), slice(max(0, dc), min(w, w + dc))]
    return out


def _conv3_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """3x3 convolution with zero padding: x (B,C,H,W), w (O,C,3,3) -> (B,O,H,W)."""
    out = np.zeros((x.shape[0], w.shape[0], x.shape[2], x.shape[3]))
    for i in range(3):
        for j in range(3):
            out += np.einsum("oc,bchw->bohw", w[:, :, i, j], _shift2d(x, i - 1, j - 1), optimize=True)
    return out + b[None, :, None, None]


def _conv3_backward(x: np.ndarray, w: np.ndarray, g: np.ndarray):
    """Gradients of sum(g * conv(x, w, b)) w.r.t. (x, w, b)."""
    gw = np.zeros_like(w)
    gx = np.zeros_like(x)
    for i in range(3):
        for j in range(3):
            gw[:, :, i, j] = np.einsum("bohw,bchw->oc", g, _shift2d(x, i - 1, j - 1), optimize=True)
            gx += np.einsum("oc,bohw->bchw", w[:, :, i, j], _shift2d(g, 1 - i, 1 - j), optimize=True)
    gb = g.sum(axis=(0, 2, 3))
    return gx, gw, gb


def _pad_even(x: np.ndarray) -> np.ndarray:
    h, w = x.shape[-2], x.shape[-1]
    ph, pw = h % 2, w % 2
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (0, ph), (0, pw)))
    return x


def _avgpool2(x: np.ndarray) -> np.ndarray:
    b, c, h, w = x.shape
    return x.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))


def _avgpool2_backward(g: np.ndarray) -> np.ndarray:
    return np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25


@lru_cache(maxsize=64)
def _bilinear_matrix(n: int) -> np.ndarray:
    """(2n, n) interpolation weights for 2x upsampling, half-pixel aligned."""
    u = np.zeros((2 * n, n))
    for i in range(2 * n):
        x = min(max((i + 0.5) / 2.0 - 0.5, 0.0), n - 1.0)
        i0 = int(np.floor(x))
        frac = x - i0
        i1 = min(i0 + 1, n - 1)
        u[i, i0] += 1.0 - frac
        u[i, i1] += frac
    return u


def _upsample2(x: np.ndarray) -> np.ndarray:
    uh = _bilinear_matrix(x.shape[-2])
    uw = _bilinear_matrix(x.shape[-1])
    return np.einsum("ij,bcjk,lk->bcil", uh, x, uw, optimize=True)


def _upsample2_backward(g: np.ndarray) -> np.ndarray:
    uh = _bilinear_matrix(g.shape[-2] // 2)
    uw = _bilinear_matrix(g.shape[-1] // 2)
    return np.einsum("ij,bcik,kl->bcjl", uh, g, uw, optimize=True)


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------

def forward_batch(x: np.ndarray, params: RewardParams) -> tuple[np.ndarray, dict]:
    """Forward pass over stacked features x (B, C, H, W). Returns (field, cache)."""
    if x.shape[1] != params.config.in_channels:
        raise ValidationError(
            f"feature grid has {x.shape[1]} channels, head expects {params.config.in_channels}"
        )
    t = params.tensors
    if params.config.kind == "linear":
        field_ = np.einsum("c,bchw->bhw", t["weight"], x) + t["bias"][0]
        return field_, {"x": x}

    h, wdt = x.shape[2], x.shape[3]
    a1 = _conv3_forward(x, t["pp1_w"], t["pp1_b"])
    r1 = np.maximum(a1, 0.0)
    a2 = _conv3_forward(r1, t["pp2_w"], t["pp2_b"])
    r2 = np.maximum(a2, 0.0)

    a3 = _conv3_forward(r2, t["sk1_w"], t["sk1_b"])
    r3 = np.maximum(a3, 0.0)
    a4 = _conv3_forward(r3, t["sk2_w"], t["sk2_b"])
    r4 = np.maximum(a4, 0.0)

    pooled = _avgpool2(_pad_even(r2))
    a5 = _conv3_forward(pooled, t["tr1_w"], t["tr1_b"])
    r5 = np.maximum(a5, 0.0)
    a6 = _conv3_forward(r5, t["tr2_w"], t["tr2_b"])
    r6 = np.maximum(a6, 0.0)
    up = _upsample2(r6)[:, :, :h, :wdt]

    cat = np.concatenate([r4, up], axis=1)
    a7 = _conv3_forward(cat, t["post_w"], t["post_b"])
    r7 = np.maximum(a7, 0.0)
    field_ = np.einsum("c,bchw->bhw", t["out_w"], r7) + t["out_b"][0]
    cache = {"x": x, "r1": r1, "r2": r2, "r3": r3, "r4": r4,
             "pooled": pooled, "r5": r5, "r6": r6, "cat": cat, "r7": r7}
    return field_, cache


def backward_batch(params: RewardParams, cache: dict, upstream: np.ndarray) -> dict[str, np.ndarray]:
    """Exact gradients of sum_s upstream(s) * field(s) w.r.t. every parameter."""
    t = params.tensors
    if params.config.kind == "linear":
        x = cache["x"]
        return {
            "weight": np.einsum("bhw,bchw->c", upstream, x),
            "bias": np.array([upstream.sum()]),
        }

    x = cache["x"]
    grads: dict[str, np.ndarray] = {}
    g7 = np.einsum("c,bhw->bchw", t["out_w"], upstream)
    grads["out_w"] = np.einsum("bhw,bchw->c", upstream, cache["r7"])
    grads["out_b"] = np.array([upstream.sum()])
    g7 = g7 * (cache["r7"] > 0)
    gcat, grads["post_w"], grads["post_b"] = _conv3_backward(cache["cat"], t["post_w"], g7)

    n_skip = cache["r4"].shape[1]
    g4 = gcat[:, :n_skip]
    gup = gcat[:, n_skip:]

    hp, wp = cache["r6"].shape[2] * 2, cache["r6"].shape[3] * 2
    gfull = np.zeros((gup.shape[0], gup.shape[1], hp, wp))
    gfull[:, :, : gup.shape[2], : gup.shape[3]] = gup
    g6 = _upsample2_backward(gfull) * (cache["r6"] > 0)
    g5, grads["tr2_w"], grads["tr2_b"] = _conv3_backward(cache["r5"], t["tr2_w"], g6)
    g5 = g5 * (cache["r5"] > 0)
    gpooled, grads["tr1_w"], grads["tr1_b"] = _conv3_backward(cache["pooled"], t["tr1_w"], g5)
    g2_trunk = _avgpool2_backward(gpooled)[:, :, : cache["r2"].shape[2], : cache["r2"].shape[3]]

    g4 = g4 * (cache["r4"] > 0)
    g3, grads["sk2_w"], grads["sk2_b"] = _conv3_backward(cache["r3"], t["sk2_w"], g4)
    g3 = g3 * (cache["r3"] > 0)
    g2_skip, grads["sk1_w"], grads["sk1_b"] = _conv3_backward(cache["r2"], t["sk1_w"], g3)

    g2 = (g2_skip + g2_trunk) * (cache["r2"] > 0)
    g1, grads["pp2_w"], grads["pp2_b"] = _conv3_backward(cache["r1"], t["pp2_w"], g2)
    g1 = g1 * (cache["r1"] > 0)
    _, grads["pp1_w"], grads["pp1_b"] = _conv3_backward(x, t["pp1_w"], g1)
    return grads


def forward(grid: FeatureGrid, params: RewardParams) -> np.ndarray:
    """Reward field (H, W) for one feature grid."""
    field_, _ = forward_batch(grid.stacked()[None], params)
    out = field_[0]
    if not np.all(np.isfinite(out)):
        raise NumericalError("reward head produced non-finite output")
    return out


def backward(grid: FeatureGrid, params: RewardParams, upstream: np.ndarray) -> dict[str, np.ndarray]:
    """Parameter gradients of sum_s upstream(s) * reward(s) for one grid."""
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != (grid.height, grid.width):
        raise ValidationError(
            f"upstream shape {upstream.shape} does not match grid {(grid.height, grid.width)}"
        )
    if not np.all(np.isfinite(upstream)):
        raise ValidationError("upstream gradient contains non-finite values")
    _, cache = forward_batch(grid.stacked()[None], params)
    return backward_batch(params, cache, upstream[None])


# ---------------------------------------------------------------------------
# regularizers
# ---------------------------------------------------------------------------

def smoothness_penalty(field_: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared difference over 4-neighbor pairs, with its exact gradient."""
    f = np.asarray(field_, dtype=np.float64)
    dh = f[:, 1:] - f[:, :-1]
    dv = f[1:, :] - f[:-1, :]
    pairs = dh.size + dv.size
    grad = np.zeros_like(f)
    if pairs == 0:
        return 0.0, grad
    penalty = (np.sum(dh**2) + np.sum(dv**2)) / pairs
    grad[:, 1:] += 2.0 * dh / pairs
    grad[:, :-1] -= 2.0 * dh / pairs
    grad[1:, :] += 2.0 * dv / pairs
    grad[:-1, :] -= 2.0 * dv / pairs
    return float(penalty), grad


def magnitude_regularizer(field_: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared reward with its exact gradient; discourages flat escapes."""
    f = np.asarray(field_, dtype=np.float64)
    n = f.size
    return float(np.mean(f**2)), 2.0 * f / n


# ---------------------------------------------------------------------------
# checkpoint IO (magic CFIRL-RW1, json header, flat little-endian float32)
# ---------------------------------------------------------------------------

def save_checkpoint(params: RewardParams, path) -> None:
    cfg = params.config
    header = {
        "head": cfg.kind,
        "seed": params.seed,
        "in_channels": cfg.in_channels,
        "widths": {
            "prepool": list(cfg.prepool),
            "skip": list(cfg.skip),
            "trunk": list(cfg.trunk),
            "postpool": list(cfg.postpool),
        },
        "tensors": [{"name": k, "shape": list(v.shape)} for k, v in params.tensors.items()],
    }
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        for v in params.tensors.values():
            fh.write(np.ascontiguousarray(v, dtype="<f4").tobytes())


def load_checkpoint(path) -> RewardParams:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValidationError(f"{path}: not a CFIRL-RW1 checkpoint")
        header = json.loads(fh.readline().decode("utf-8"))
        widths = header["widths"]
        cfg = HeadConfig(
            kind=header["head"],
            in_channels=header["in_channels"],
            prepool=tuple(widths["prepool"]),
            skip=tuple(widths["skip"]),
            trunk=tuple(widths["trunk"]),
            postpool=tuple(widths["postpool"]),
        )
        tensors: dict[str, np.ndarray] = {}
        for entry in header["tensors"]:
            count = int(np.prod(entry["shape"]))
            raw = fh.read(count * 4)
            if len(raw) != count * 4:
                raise ValidationError(f"{path}: truncated checkpoint")
            tensors[entry["name"]] = (
                np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(entry["shape"])
            )
    return RewardParams(config=cfg, seed=header["seed"], tensors=tensors)
