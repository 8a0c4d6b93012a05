"""Finite-difference checks of every hand-written adjoint.

Each suite draws random inputs, a random unit direction ``v`` and compares
the analytic directional derivative ``<grad, v>`` with a central difference
of step ``h``. A sample only counts if it is kink-free: the piecewise
activation pattern (mask supports, clamps, relu gates, lane assignment)
must be the same at both ends of the stencil as at the centre.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import kinematics as km
from .cost import CostWeights, trajectory_cost
from .envmodel import EnvPredictor, PredictorKind, ReactiveParams
from .planner import (FEATURE_SCALE, PolicyParams, PolicyTrainConfig, features, policy_objective)
from .raster import MaskConfig, RasterGeometry, _mask_backward, _mask_forward, to_anchor
from .world import LaneGeometry, OtherVehicle, Scene, VehicleDims

SUITES = ("kinematics", "masks", "cost_chain", "coupled_predictor", "policy")
# the reactive model's outputs are ~1e5 times larger than their sensitivity
# to the ego, so a 1e-6 step drowns in rounding; 1e-4 is still well inside
# the smooth region
STEP = {"coupled_predictor": 1e-4}
TOLERANCE = {"kinematics": 1e-5, "masks": 1e-5, "cost_chain": 1e-4, "coupled_predictor": 1e-5, "policy": 1e-4}


@dataclass
class SuiteResult:
    name: str
    samples: int
    skipped: int
    worst: float
    tolerance: float
    seconds: float
    errors: list[float] = field(default_factory=list, repr=False)

    @property
    def passed(self) -> bool:
        return self.samples > 0 and self.worst <= self.tolerance

    def to_dict(self) -> dict:
        return {"suite": self.name, "samples": self.samples, "skipped_kinks": self.skipped,
                "worst_rel_err": self.worst, "tolerance": self.tolerance, "passed": self.passed}


def rel_err(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def _unit(rng, shape):
    v = rng.normal(size=shape)
    return v / np.linalg.norm(v)


def _check(name, draw, n, h, rng, flip, tol=None):
    """``draw(rng)`` returns ``(f, x, grad, pattern[, direction_mask])`` or None to redraw."""
    t0 = time.perf_counter()
    errs, skipped, attempts = [], 0, 0
    sign = -1.0 if flip == name else 1.0
    while len(errs) < n:
        attempts += 1
        if attempts > 20 * n:
            break
        item = draw(rng)
        if item is None:
            continue
        f, x, grad, pattern, *rest = item
        v = _unit(rng, x.shape)
        if rest:
            # restrict the direction to inputs that can move the output
            v = v * rest[0]
            v /= np.linalg.norm(v)
        xp, xm = x + h * v, x - h * v
        if pattern is not None:
            p0 = pattern(x)
            if not (_same(p0, pattern(xp)) and _same(p0, pattern(xm))):
                skipped += 1
                continue
        fd = (f(xp) - f(xm)) / (2 * h)
        errs.append(rel_err(sign * float(np.sum(grad * v)), fd))
    worst = max(errs) if errs else float("inf")
    return SuiteResult(name, len(errs), skipped, worst, tol if tol is not None else TOLERANCE[name],
                       time.perf_counter() - t0, errs)


def _same(a, b) -> bool:
    return all(np.array_equal(x, y) for x, y in zip(a, b))


# ------------------------------------------------------------------ draws

def _random_state(rng, speed=(0.0, 30.0)):
    th = rng.uniform(-0.5, 0.5)
    return np.array([rng.uniform(-5, 5), rng.uniform(2, 9), np.cos(th), np.sin(th), rng.uniform(*speed)])


def _draw_kinematics(dt):
    def draw(rng):
        T = int(rng.integers(1, 31))
        s0 = _random_state(rng)
        acts = np.column_stack([rng.normal(0, 3, T), rng.normal(0, 0.5, T)])
        cot = rng.normal(size=(T, 5))
        x = np.concatenate([s0, acts.ravel()])

        def f(z):
            return float(np.sum(cot * km.rollout_array(z[:5], z[5:].reshape(-1, 2), dt)))
        g0, ga = km.rollout_vjp_array(s0, acts, dt, cot)
        # the state input is a free 5-vector here; the unit-heading constraint
        # is a property of reachable states, not of the derivative
        return f, x, np.concatenate([g0, ga.ravel()]), None
    return draw


def _mask_pattern(states, dims, cfg, geom):
    c = _mask_forward(states, dims, cfg, geom)
    return (c.p > 0, c.q > 0, c.q < 1, np.sign(c.B1), np.sign(c.B2), c.states[:, 4] > cfg.speed_floor)


def _draw_masks(dims, cfg, geom):
    H, W = geom.shape

    def draw(rng):
        st = np.array([rng.uniform(-10, 10), rng.uniform(-3, 3), 0, 0, rng.uniform(0, 30)])
        th = rng.uniform(-np.pi, np.pi)
        st[2], st[3] = np.cos(th), np.sin(th)
        g_car = rng.normal(size=(1, H, W))
        g_side = rng.normal(size=(1, H, W))

        def f(z):
            c = _mask_forward(z[None], dims, cfg, geom)
            return float(np.sum(g_car * c.car) + np.sum(g_side * c.side))
        c = _mask_forward(st[None], dims, cfg, geom)
        g = _mask_backward(c, dims, cfg, g_car, g_side)[0]
        return f, st, g, lambda z: _mask_pattern(z[None], dims, cfg, geom)
    return draw


def random_scene(rng, n_cars: int = 6, lanes: LaneGeometry = LaneGeometry()) -> Scene:
    """Ego near the middle lane with cars scattered close by."""
    ego = km.SelfState(0.0, lanes.lane_center(lanes.lane_count // 2) + rng.uniform(-0.5, 0.5), 1.0, 0.0,
                       float(rng.uniform(10, 25)))
    others = []
    for i in range(n_cars):
        lane = int(rng.integers(lanes.lane_count))
        others.append(OtherVehicle(i + 1, km.SelfState(
            float(rng.uniform(-25, 40)), lanes.lane_center(lane) + float(rng.uniform(-0.3, 0.3)),
            1.0, 0.0, float(rng.uniform(5, 25))), VehicleDims(float(rng.uniform(1.7, 2.0)), float(rng.uniform(4.2, 5.2)))))
    return Scene(0, ego, VehicleDims(), tuple(others), lanes)


def _draw_cost_chain(T, dt, weights, mask, geom):
    def draw(rng):
        scene = random_scene(rng)
        ego = scene.ego
        pred = EnvPredictor(PredictorKind.constant_velocity, geom=geom).predict_decoupled(scene, T, dt, anchor=ego)
        frames = pred.stacked
        acts = np.column_stack([rng.normal(0, 2, T), rng.normal(0, 0.05, T)])
        dims = scene.ego_dims

        def J(z):
            a = z.reshape(-1, 2)
            st = km.rollout_array(ego, a, dt)
            return trajectory_cost(frames, to_anchor(st, ego), a, dims, weights, 0.99, mask, geom).J
        st = km.rollout_array(ego, acts, dt)
        tc = trajectory_cost(frames, to_anchor(st, ego), acts, dims, weights, 0.99, mask, geom, with_grad=True)
        from .raster import to_anchor_vjp
        _, ga = km.rollout_vjp_array(ego, acts, dt, to_anchor_vjp(tc.g_states, ego), st)
        grad = (ga + tc.g_actions).ravel()

        def pattern(z):
            return _mask_pattern(to_anchor(km.rollout_array(ego, z.reshape(-1, 2), dt), ego), dims, mask, geom)
        return J, acts.ravel(), grad, pattern
    return draw


def closing_scene(rng, n_cars: int = 4, lanes: LaneGeometry = LaneGeometry()) -> Scene:
    """Faster cars coming up behind the ego, so the reactive braking is active."""
    y = lanes.lane_center(lanes.lane_count // 2)
    s_ego = float(rng.uniform(10, 25))
    ego = km.SelfState(0.0, y, 1.0, 0.0, s_ego)
    others = tuple(
        OtherVehicle(i + 1, km.SelfState(float(rng.uniform(-30, 5)), y + float(rng.uniform(-2, 2)), 1.0, 0.0,
                                         s_ego + float(rng.uniform(1, 8))), VehicleDims())
        for i in range(n_cars))
    return Scene(0, ego, VehicleDims(), others, lanes)


def _draw_coupled(T, dt, params):
    def draw(rng):
        scene = closing_scene(rng)
        acts = np.column_stack([rng.normal(0, 2, T), rng.normal(0, 0.05, T)])
        ego_states = km.rollout_array(scene.ego, acts, dt)
        pr = EnvPredictor(PredictorKind.coupled_reactive, params)
        G = rng.normal(size=(T, len(scene.others), 5))

        def states_of(z):
            return pr.predict_coupled(scene, z.reshape(T, 5), dt).states

        def f(z):
            return float(np.sum(G * states_of(z)))

        def pattern(z):
            pred = pr.predict_coupled(scene, z.reshape(T, 5), dt)
            tape = pred._tape
            srel = np.array([t[1] for t in tape])
            raw = np.array([t[3] for t in tape])
            s = np.array([t[0][:, 4] for t in tape])
            return (srel > 0, raw < params.brake_cap, s - np.minimum(raw, params.brake_cap) * dt > 0)
        pred = pr.predict_coupled(scene, ego_states, dt)
        g = pr.predict_coupled_vjp(pred, dt, G)
        active = np.zeros((T, 5))
        active[:, [0, 4]] = 1.0
        # the reactive model only reads ego x and s; the rest is zero exactly
        if np.any(g[:, [1, 2, 3]] != 0):
            return None
        return f, ego_states.ravel(), g.ravel(), pattern, active.ravel()
    return draw


def _policy_pattern(W, scene0, cfg: PolicyTrainConfig, pred):
    """Forward replay of :func:`policy_objective` recording its branch choices."""
    scenes = [scene0] + pred.scenes[:-1]
    cur = tuple(float(v) for v in scene0.ego)
    lo = np.array([cfg.accel_bounds[0], cfg.turn_bounds[0]])
    hi = np.array([cfg.accel_bounds[1], cfg.turn_bounds[1]])
    free, jacs, lanes, states = [], [], [], []
    for t in range(cfg.horizon):
        f, jac = features(scenes[t], km.SelfState(*cur), with_jac=True)
        raw = W @ (f / FEATURE_SCALE)
        a = np.clip(raw, lo, hi)
        free.append((raw > lo) & (raw < hi))
        jacs.append(jac != 0)
        lanes.append(scene0.lanes.lane_index(cur[1]))
        cur = km._step_values(*cur, a[0], a[1], cfg.dt)
        states.append(cur)
    mp = _mask_pattern(to_anchor(np.array(states), pred.anchor), scene0.ego_dims, cfg.mask, cfg.geom)
    return (np.array(free), np.array(jacs), np.array(lanes)) + mp


def _draw_policy(cfg: PolicyTrainConfig):
    def draw(rng):
        scene = random_scene(rng)
        pred = EnvPredictor(PredictorKind.constant_velocity, geom=cfg.geom).predict_decoupled(
            scene, cfg.horizon, cfg.dt)
        W0 = PolicyParams.random(int(rng.integers(2**31)), scale=0.1).weights

        def f(z):
            return policy_objective(PolicyParams(z.reshape(W0.shape)), scene, cfg, prediction=pred)
        _, gW = policy_objective(PolicyParams(W0), scene, cfg, with_grad=True, prediction=pred)
        return f, W0.ravel(), gW.ravel(), lambda z: _policy_pattern(z.reshape(W0.shape), scene, cfg, pred)
    return draw


# ------------------------------------------------------------------ runner

def run_gradcheck(seed: int = 0, samples: int = 100, h: float = 1e-6, flip: str | None = None,
                  suites=SUITES, dt: float = 0.1, horizon: int = 30, weights: CostWeights = CostWeights(),
                  mask: MaskConfig = MaskConfig(), geom: RasterGeometry = RasterGeometry(),
                  reactive: ReactiveParams = ReactiveParams()) -> list[SuiteResult]:
    """Run the selected suites. ``flip`` negates one suite's analytic
    gradient (negative control for the harness itself)."""
    if flip is not None and flip not in SUITES:
        raise ValueError(f"unknown suite {flip!r}; expected one of {SUITES}")
    dims = VehicleDims()
    draws: dict[str, Callable] = {
        "kinematics": _draw_kinematics(dt),
        "masks": _draw_masks(dims, mask, geom),
        "cost_chain": _draw_cost_chain(horizon, dt, weights, mask, geom),
        "coupled_predictor": _draw_coupled(20, dt, reactive),
        "policy": _draw_policy(PolicyTrainConfig(horizon=horizon, dt=dt, weights=weights, mask=mask, geom=geom)),
    }
    out = []
    for i, name in enumerate(SUITES):
        if name not in suites:
            continue
        rng = np.random.default_rng([seed, i])
        out.append(_check(name, draws[name], samples, STEP.get(name, h), rng, flip))
    return out
