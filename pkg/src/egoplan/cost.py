"""Mask-based cost components and the discounted trajectory objective."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .raster import MaskConfig, RasterFrame, RasterGeometry, _mask_backward, _mask_forward
from .world import VehicleDims

COMPONENTS = ("proximity", "lane", "offroad", "destination")


@dataclass(frozen=True)
class CostWeights:
    proximity: float = 91.2
    lane: float = 3.06
    offroad: float = 2.88
    jerk: float = 0.1
    destination: float = 0.001

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"cost weight {k} must be >= 0, got {v}")


DFM_KM_WEIGHTS = CostWeights()
CFM_KM_WEIGHTS = CostWeights(proximity=1.0, lane=0.32, offroad=0.32, jerk=0.0, destination=0.0)


@dataclass(frozen=True)
class ObjectiveConfig:
    gamma: float = 0.99
    horizon: int = 30

    def __post_init__(self):
        if not 0 < self.gamma <= 1:
            raise ValueError(f"gamma must be in (0, 1], got {self.gamma}")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")


@dataclass
class CostBreakdown:
    """Per-step components plus the sequence-level jerk term.

    ``total[t]`` is the weighted sum of the four per-step components; jerk
    is charged once per sequence (``jerk``) and enters the objective
    undiscounted.
    """
    proximity: np.ndarray
    lane: np.ndarray
    offroad: np.ndarray
    destination: np.ndarray
    total: np.ndarray
    jerk: float = 0.0
    weights: CostWeights = field(default_factory=CostWeights)

    def rows(self):
        for t in range(len(self.total)):
            yield {
                "step": t + 1,
                "proximity": float(self.proximity[t]),
                "lane": float(self.lane[t]),
                "offroad": float(self.offroad[t]),
                "destination": float(self.destination[t]),
                "total": float(self.total[t]),
            }


@dataclass
class StepCost:
    proximity: float
    lane: float
    offroad: float
    destination: float
    total: float
    grad: np.ndarray | None = None  # cotangent of pred_self


@dataclass
class TrajectoryCost:
    J: float
    breakdown: CostBreakdown
    g_states: np.ndarray | None = None   # (T, 5), anchor frame
    g_actions: np.ndarray | None = None  # (T, 2), jerk term only
    masks: tuple[np.ndarray, np.ndarray] | None = None


def weighted_total(prox, lane, off, dest, w: CostWeights):
    return w.proximity * prox + w.lane * lane + w.offroad * off + w.destination * dest


def _stack(frames):
    if isinstance(frames, RasterFrame):
        frames = [frames]
    return (np.stack([f.lanes for f in frames]),
            np.stack([f.cars for f in frames]),
            np.stack([f.offroad for f in frames]))


def step_cost(frame: RasterFrame, pred_self, dims: VehicleDims, weights: CostWeights = CostWeights(),
              mask_cfg: MaskConfig = MaskConfig(), geom: RasterGeometry = RasterGeometry(),
              with_grad: bool = False) -> StepCost:
    """Cost of one predicted ego state (anchor coordinates) against one frame."""
    lanes, cars, off = _stack(frame)
    c = _mask_forward(np.asarray(pred_self, dtype=float)[None], dims, mask_cfg, geom)
    prox = float(np.sum(cars * c.car))
    lane = float(np.sum(lanes * c.side))
    offr = float(np.sum(off * c.side))
    dest = -float(pred_self[0])
    out = StepCost(prox, lane, offr, dest, float(weighted_total(prox, lane, offr, dest, weights)))
    if with_grad:
        g = _mask_backward(c, dims, mask_cfg, weights.proximity * cars,
                           weights.lane * lanes + weights.offroad * off)[0]
        g[0] -= weights.destination
        out.grad = g
    return out


def jerk_cost(actions) -> tuple[float, np.ndarray]:
    """Mean squared action difference and its gradient w.r.t. ``actions``."""
    a = np.asarray(actions, dtype=float).reshape(-1, 2)
    T = len(a)
    if T == 0:
        raise ValueError("jerk cost needs at least one action")
    d = np.diff(a, axis=0)
    value = float(np.sum(d * d)) / T
    g = np.zeros_like(a)
    g[1:] += 2.0 * d / T
    g[:-1] -= 2.0 * d / T
    return value, g


def discounts(gamma: float, T: int) -> np.ndarray:
    return gamma ** np.arange(1, T + 1, dtype=float)


def trajectory_cost(frames: Sequence[RasterFrame] | tuple, pred_selves, actions, dims: VehicleDims,
                    weights: CostWeights = CostWeights(), gamma: float = 0.99,
                    mask_cfg: MaskConfig = MaskConfig(), geom: RasterGeometry = RasterGeometry(),
                    with_grad: bool = False) -> TrajectoryCost:
    """Discounted objective over a predicted trajectory.

    ``frames`` is a list of :class:`RasterFrame` or a pre-stacked
    ``(lanes, cars, offroad)`` tuple of ``(T, H, W)`` arrays;
    ``pred_selves`` are ``(T, 5)`` anchor-frame states.
    """
    lanes, cars, off = frames if isinstance(frames, tuple) else _stack(frames)
    st = np.asarray(pred_selves, dtype=float).reshape(-1, 5)
    acts = np.asarray(actions, dtype=float).reshape(-1, 2)
    T = len(st)
    if not (len(lanes) == T == len(acts)):
        raise ValueError(f"length mismatch: {len(lanes)} frames, {T} states, {len(acts)} actions")
    c = _mask_forward(st, dims, mask_cfg, geom)
    prox = np.sum(cars * c.car, axis=(1, 2))
    lane = np.sum(lanes * c.side, axis=(1, 2))
    offr = np.sum(off * c.side, axis=(1, 2))
    dest = -st[:, 0]
    total = weighted_total(prox, lane, offr, dest, weights)
    disc = discounts(gamma, T)
    jerk, g_jerk = jerk_cost(acts)
    J = float(np.sum(disc * total)) + weights.jerk * jerk
    result = TrajectoryCost(J, CostBreakdown(prox, lane, offr, dest, total, jerk, weights),
                            masks=(c.car, c.side))
    if with_grad:
        dk = disc[:, None, None]
        g = _mask_backward(c, dims, mask_cfg, dk * weights.proximity * cars,
                           dk * (weights.lane * lanes + weights.offroad * off))
        g[:, 0] -= weights.destination * disc
        result.g_states = g
        result.g_actions = weights.jerk * g_jerk
    return result


def write_breakdown_csv(breakdown: CostBreakdown, path) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["step", *COMPONENTS, "total"], lineterminator="\n")
        w.writeheader()
        for row in breakdown.rows():
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
