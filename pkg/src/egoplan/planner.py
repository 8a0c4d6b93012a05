"""Gradient-descent MPC (decoupled and coupled) and a feature-based affine policy."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import kinematics as km
from .cost import CFM_KM_WEIGHTS, DFM_KM_WEIGHTS, CostWeights, discounts, trajectory_cost
from .envmodel import EnvPrediction, EnvPredictor, PredictorKind, ReactiveParams
from .kinematics import Action, SelfState
from .raster import (MaskConfig, RasterGeometry, _mask_backward, _mask_forward, render_cars_vjp,
                     to_anchor, to_anchor_vjp)
from .world import Scene


class PlanningError(RuntimeError):
    pass


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class PlannerConfig:
    horizon: int = 30
    iterations: int = 27
    learning_rate: float = 0.48
    gamma: float = 0.99
    dt: float = 0.1
    predictor: PredictorKind = PredictorKind.constant_velocity
    weights: CostWeights = DFM_KM_WEIGHTS
    reactive: ReactiveParams = ReactiveParams()
    mask: MaskConfig = MaskConfig()
    geom: RasterGeometry = RasterGeometry()
    accel_bounds: tuple[float, float] = (-10.0, 10.0)
    turn_bounds: tuple[float, float] = (-1.0, 1.0)
    # the optimizer works on actions divided by this scale
    action_scale: tuple[float, float] = (0.1, 0.02)

    def __post_init__(self):
        if self.horizon < 1 or self.iterations < 1:
            raise ValueError("horizon and iterations must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must be in (0, 1]")
        object.__setattr__(self, "predictor", PredictorKind(self.predictor))

    def clamp(self, actions: np.ndarray) -> np.ndarray:
        out = np.empty_like(actions)
        out[:, 0] = np.clip(actions[:, 0], *self.accel_bounds)
        out[:, 1] = np.clip(actions[:, 1], *self.turn_bounds)
        return out


DFM_KM_MPC = PlannerConfig()
CFM_KM_MPC = PlannerConfig(horizon=20, iterations=11, learning_rate=0.31,
                           predictor=PredictorKind.coupled_reactive, weights=CFM_KM_WEIGHTS)


@dataclass
class Plan:
    actions: np.ndarray               # (T, 2)
    states: np.ndarray                # (T, 5) world frame
    prediction: EnvPrediction
    J_trace: list[float]
    grad_norms: list[float]
    wall_time: float
    env_advances: int

    @property
    def first_action(self) -> Action:
        return Action(*self.actions[0].tolist())


def write_trace_csv(plan: Plan, path) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "J", "grad_norm"])
        for i, J in enumerate(plan.J_trace):
            gn = plan.grad_norms[i] if i < len(plan.grad_norms) else ""
            w.writerow([i, repr(J), repr(gn) if gn != "" else ""])


def _cost_and_grad(cfg: PlannerConfig, self0, anchor, actions, frames, dims, states=None):
    if states is None:
        states = km.rollout_array(self0, actions, cfg.dt)
    local = to_anchor(states, anchor)
    tc = trajectory_cost(frames, local, actions, dims, cfg.weights, cfg.gamma, cfg.mask, cfg.geom,
                         with_grad=True)
    g_world = to_anchor_vjp(tc.g_states, anchor)
    return states, local, tc, g_world


def _finish(cfg, g_act, actions, i):
    if not np.all(np.isfinite(g_act)):
        raise PlanningError(
            f"non-finite gradient at iteration {i}: actions range "
            f"[{np.nanmin(actions):.3g}, {np.nanmax(actions):.3g}], gradient {g_act[~np.isfinite(g_act)][:4]}")
    scale = np.asarray(cfg.action_scale)
    g_norm = g_act * scale
    return cfg.clamp(actions - cfg.learning_rate * scale * g_norm), float(np.linalg.norm(g_norm))


def plan_decoupled(scene0: Scene, self0: SelfState | None = None, cfg: PlannerConfig = DFM_KM_MPC,
                   predictor: EnvPredictor | None = None) -> Plan:
    """Decoupled MPC: predict the environment once, then optimize actions
    through the masks and the kinematic model only."""
    if cfg.predictor.coupled:
        raise ValueError("plan_decoupled needs a decoupled predictor kind")
    t0 = time.perf_counter()
    self0 = SelfState(*(float(v) for v in (self0 if self0 is not None else scene0.ego)))
    predictor = predictor or EnvPredictor(cfg.predictor, cfg.reactive, geom=cfg.geom)
    before = predictor.advances
    pred = predictor.predict_decoupled(scene0, cfg.horizon, cfg.dt, anchor=self0)
    frames = pred.stacked
    actions = np.zeros((cfg.horizon, 2))
    trace, norms = [], []
    for i in range(cfg.iterations):
        states, _, tc, g_world = _cost_and_grad(cfg, self0, self0, actions, frames, scene0.ego_dims)
        trace.append(tc.J)
        _, g_act = km.rollout_vjp_array(self0, actions, cfg.dt, g_world, states)
        actions, gn = _finish(cfg, g_act + tc.g_actions, actions, i)
        norms.append(gn)
    advances = predictor.advances - before
    states = km.rollout_array(self0, actions, cfg.dt)
    tc = trajectory_cost(frames, to_anchor(states, self0), actions, scene0.ego_dims, cfg.weights,
                         cfg.gamma, cfg.mask, cfg.geom)
    trace.append(tc.J)
    return Plan(actions, states, pred, trace, norms, time.perf_counter() - t0, advances)


def _env_cotangent(cfg: PlannerConfig, pred: EnvPrediction, local: np.ndarray, dims) -> np.ndarray:
    """Cotangents of the predicted car states through the proximity term.

    Uses the translation adjoint of the car raster (see ``render_cars_vjp``).
    """
    T, n = pred.states.shape[:2]
    g = np.zeros((T, n, 5))
    if n == 0 or cfg.weights.proximity == 0:
        return g
    c = _mask_forward(local, dims, cfg.mask, cfg.geom)
    w = (cfg.weights.proximity * discounts(cfg.gamma, T))[:, None, None] * np.ones_like(c.car)
    cell = _mask_backward(c, dims, cfg.mask, w, None, reduce=False)
    # moving a cell by +d is the same as moving the ego by -d
    fx, fy = -cell[0], -cell[1]
    for k in range(T):
        g[k] = render_cars_vjp(pred.states[k], pred.dims, pred.anchor, cfg.geom, fx[k], fy[k])
    return g


def plan_coupled(scene0: Scene, self0: SelfState | None = None, cfg: PlannerConfig = CFM_KM_MPC,
                 predictor: EnvPredictor | None = None) -> Plan:
    """Coupled MPC: the reactive environment is re-predicted inside every
    iteration from the current predicted ego states, and gradients also flow
    back through it."""
    if not cfg.predictor.coupled:
        raise ValueError("plan_coupled needs the coupled_reactive predictor")
    t0 = time.perf_counter()
    self0 = SelfState(*(float(v) for v in (self0 if self0 is not None else scene0.ego)))
    predictor = predictor or EnvPredictor(cfg.predictor, cfg.reactive, geom=cfg.geom)
    before = predictor.advances
    dims = scene0.ego_dims
    actions = np.zeros((cfg.horizon, 2))
    trace, norms = [], []
    for i in range(cfg.iterations):
        states = km.rollout_array(self0, actions, cfg.dt)
        pred = predictor.predict_coupled(scene0, states, cfg.dt, anchor=self0)
        _, local, tc, g_world = _cost_and_grad(cfg, self0, self0, actions, pred.stacked, dims, states)
        trace.append(tc.J)
        g_cars = _env_cotangent(cfg, pred, local, dims)
        g_world = g_world + predictor.predict_coupled_vjp(pred, cfg.dt, g_cars)
        _, g_act = km.rollout_vjp_array(self0, actions, cfg.dt, g_world, states)
        actions, gn = _finish(cfg, g_act + tc.g_actions, actions, i)
        norms.append(gn)
    advances = predictor.advances - before
    # diagnostic evaluation of the returned plan; not part of the optimization loop
    states = km.rollout_array(self0, actions, cfg.dt)
    pred = predictor.predict_coupled(scene0, states, cfg.dt, anchor=self0)
    tc = trajectory_cost(pred.stacked, to_anchor(states, self0), actions, dims, cfg.weights,
                         cfg.gamma, cfg.mask, cfg.geom)
    trace.append(tc.J)
    return Plan(actions, states, pred, trace, norms, time.perf_counter() - t0, advances)


def plan(scene0: Scene, self0: SelfState | None = None, cfg: PlannerConfig = DFM_KM_MPC,
         predictor: EnvPredictor | None = None) -> Plan:
    if cfg.predictor.coupled:
        return plan_coupled(scene0, self0, cfg, predictor)
    return plan_decoupled(scene0, self0, cfg, predictor)


# ------------------------------------------------------------------ policy

SENSE_RANGE = 50.0
FEATURE_NAMES = (
    "speed", "lane_offset", "heading_lat",
    "lead_gap", "lead_rel_speed", "rear_gap", "rear_rel_speed",
    "left_lead_gap", "left_lead_rel_speed", "left_rear_gap", "left_rear_rel_speed",
    "right_lead_gap", "right_lead_rel_speed", "right_rear_gap", "right_rear_rel_speed",
    "bias",
)
N_FEATURES = len(FEATURE_NAMES)
# fixed input scaling so raw gaps/speeds do not dominate the affine map
FEATURE_SCALE = np.array([10.0, 1.0, 0.1] + [10.0, 5.0] * 6 + [1.0])


@dataclass
class PolicyParams:
    weights: np.ndarray = field(default_factory=lambda: np.zeros((2, N_FEATURES)))

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float).reshape(2, N_FEATURES)
        if not np.all(np.isfinite(self.weights)):
            raise ValueError("policy weights must be finite")

    @classmethod
    def random(cls, seed: int, scale: float = 0.05) -> PolicyParams:
        return cls(np.random.default_rng(seed).normal(0.0, scale, size=(2, N_FEATURES)))

    def to_dict(self) -> dict:
        return {"features": list(FEATURE_NAMES), "weights": self.weights.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> PolicyParams:
        return cls(np.array(d["weights"], dtype=float))


def features(scene: Scene, ego: SelfState | None = None, with_jac: bool = False):
    """Feature vector of the ego in ``scene``; optionally its Jacobian w.r.t. the ego state.

    Gaps are bumper to bumper along x: positive for lead cars, negative for
    rear cars, saturating at ``SENSE_RANGE`` when no car is in range. A
    missing adjacent lane reads as fully blocked (zero gaps).
    """
    ego = scene.ego if ego is None else ego
    x, y, ux, uy, s = (float(v) for v in ego)
    lanes = scene.lanes
    lane = lanes.lane_index(y)
    f = np.zeros(N_FEATURES)
    jac = np.zeros((N_FEATURES, 5))
    f[0], jac[0, 4] = s, 1.0
    f[1], jac[1, 1] = y - lanes.lane_center(lane), 1.0
    f[2], jac[2, 3] = uy, 1.0
    f[-1] = 1.0
    l_ego = scene.ego_dims.length
    others = [(lanes.lane_index(o.state.y), o.state.x, o.state.s, o.dims.length) for o in scene.others]
    for slot, dl in enumerate((0, 1, -1)):
        base = 3 + 4 * slot
        target = lane + dl
        if not 0 <= target < lanes.lane_count:
            continue  # blocked: gaps stay 0
        lead = rear = None
        for ln, ox, os_, ol in others:
            if ln != target:
                continue
            if ox > x:
                if lead is None or ox < lead[0]:
                    lead = (ox, os_, ol)
            elif rear is None or ox > rear[0]:
                rear = (ox, os_, ol)
        f[base], f[base + 2] = SENSE_RANGE, -SENSE_RANGE
        if lead is not None:
            gap = lead[0] - x - 0.5 * (lead[2] + l_ego)
            if gap < SENSE_RANGE:
                f[base], jac[base, 0] = gap, -1.0
                f[base + 1], jac[base + 1, 4] = lead[1] - s, -1.0
        if rear is not None:
            gap = rear[0] - x + 0.5 * (rear[2] + l_ego)
            if gap > -SENSE_RANGE:
                f[base + 2], jac[base + 2, 0] = gap, -1.0
                f[base + 3], jac[base + 3, 4] = rear[1] - s, -1.0
    return (f, jac) if with_jac else f


def policy_output(policy: PolicyParams, scene: Scene, ego: SelfState | None = None) -> np.ndarray:
    """Unclamped affine output."""
    return policy.weights @ (features(scene, ego) / FEATURE_SCALE)


def act(policy: PolicyParams, scene: Scene, ego: SelfState | None = None,
        bounds: tuple[tuple[float, float], tuple[float, float]] = ((-10.0, 10.0), (-1.0, 1.0))) -> Action:
    raw = policy_output(policy, scene, ego)
    return Action(float(np.clip(raw[0], *bounds[0])), float(np.clip(raw[1], *bounds[1])))


@dataclass(frozen=True)
class PolicyTrainConfig:
    horizon: int = 30
    learning_rate: float = 1e-5
    epochs: int = 20
    gamma: float = 0.99
    dt: float = 0.1
    weights: CostWeights = DFM_KM_WEIGHTS
    mask: MaskConfig = MaskConfig()
    geom: RasterGeometry = RasterGeometry()
    accel_bounds: tuple[float, float] = (-10.0, 10.0)
    turn_bounds: tuple[float, float] = (-1.0, 1.0)
    divergence_limit: float = 1e6


def policy_objective(policy: PolicyParams, scene0: Scene, cfg: PolicyTrainConfig = PolicyTrainConfig(),
                     with_grad: bool = False, prediction: EnvPrediction | None = None):
    """Discounted cost of rolling the policy for ``cfg.horizon`` steps against a
    decoupled prediction. Returns ``J`` or ``(J, dJ/dweights)``."""
    T, dt = cfg.horizon, cfg.dt
    if prediction is None:
        prediction = EnvPredictor(PredictorKind.constant_velocity, geom=cfg.geom).predict_decoupled(scene0, T, dt)
    anchor = prediction.anchor
    scenes = [scene0] + prediction.scenes[:-1]
    W = policy.weights
    cur = tuple(float(v) for v in scene0.ego)
    states = np.empty((T, 5))
    acts = np.empty((T, 2))
    tape = []
    lo = np.array([cfg.accel_bounds[0], cfg.turn_bounds[0]])
    hi = np.array([cfg.accel_bounds[1], cfg.turn_bounds[1]])
    for t in range(T):
        f, jac = features(scenes[t], SelfState(*cur), with_jac=True)
        fs = f / FEATURE_SCALE
        raw = W @ fs
        a = np.clip(raw, lo, hi)
        tape.append((cur, fs, jac, (raw > lo) & (raw < hi)))
        acts[t] = a
        cur = km._step_values(*cur, a[0], a[1], dt)
        states[t] = cur
    tc = trajectory_cost(prediction.stacked, to_anchor(states, anchor), acts, scene0.ego_dims, cfg.weights,
                         cfg.gamma, cfg.mask, cfg.geom, with_grad=with_grad)
    if not with_grad:
        return tc.J
    g_states = to_anchor_vjp(tc.g_states, anchor)
    gW = np.zeros_like(W)
    g_next = np.zeros(5)
    for t in range(T - 1, -1, -1):
        prev, fs, jac, free = tape[t]
        g_out = g_next + g_states[t]
        g_prev, g_a = km._step_vjp_values(prev, acts[t], dt, g_out)
        g_raw = (np.asarray(g_a) + tc.g_actions[t]) * free
        gW += np.outer(g_raw, fs)
        g_f = (W.T @ g_raw) / FEATURE_SCALE
        g_next = np.asarray(g_prev) + jac.T @ g_f
    return tc.J, gW


def train_policy(scenes: Sequence[Scene], init: PolicyParams, cfg: PolicyTrainConfig = PolicyTrainConfig(),
                 seed: int = 0, epochs: int | None = None) -> tuple[PolicyParams, list[float]]:
    """Plain gradient descent on the policy weights, one step per sampled scene.

    Returns the trained parameters and the per-epoch mean loss.
    """
    if not scenes:
        raise ValueError("training set is empty")
    epochs = cfg.epochs if epochs is None else epochs
    rng = np.random.default_rng(seed)
    params = PolicyParams(init.weights.copy())
    curve = []
    for ep in range(epochs):
        losses = []
        for idx in rng.permutation(len(scenes)).tolist():
            J, g = policy_objective(params, scenes[idx], cfg, with_grad=True)
            if not math.isfinite(J) or abs(J) > cfg.divergence_limit or not np.all(np.isfinite(g)):
                raise TrainingDivergedError(f"epoch {ep}, scene {idx}: loss {J:.4g}")
            losses.append(J)
            params = PolicyParams(params.weights - cfg.learning_rate * g)
        curve.append(float(np.mean(losses)))
    return params, curve
