"""Environment predictors: log replay, constant velocity and a smooth reactive model.

The first two ignore the ego entirely; the reactive one brakes cars that are
closing in on the predicted ego and is differentiable w.r.t. the ego states.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .raster import RasterGeometry, render_cars, render_static
from .kinematics import SelfState
from .world import Scene, TrajectoryLog


class PredictorKind(str, Enum):
    replay = "replay"
    constant_velocity = "constant_velocity"
    coupled_reactive = "coupled_reactive"

    @property
    def coupled(self) -> bool:
        return self is PredictorKind.coupled_reactive


@dataclass(frozen=True)
class ReactiveParams:
    gain: float = 0.5         # 1/s
    scale: float = 5.0        # m
    brake_cap: float = 6.0    # m/s^2

    def __post_init__(self):
        if self.gain < 0 or not self.scale > 0 or not self.brake_cap > 0:
            raise ValueError(f"invalid reactive params {self}")


@dataclass
class EnvPrediction:
    """Predicted other-car states for steps 1..T and their rasters.

    All frames share the plan-start anchor pose.
    """
    scene0: Scene
    states: np.ndarray          # (T, n, 5) world frame
    anchor: SelfState
    lanes: np.ndarray           # (T, H, W)
    cars: np.ndarray
    offroad: np.ndarray
    ids: tuple[int, ...] = ()
    dims: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    # reactive forward values kept for the VJP
    _tape: list | None = None

    @property
    def horizon(self) -> int:
        return len(self.lanes)

    @property
    def stacked(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.lanes, self.cars, self.offroad

    @property
    def scenes(self) -> list[Scene]:
        return [self.scene0.with_others(self.states[k], t=self.scene0.t + k + 1)
                for k in range(self.horizon)]


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def advance_cars(states: np.ndarray, accel: np.ndarray, dt: float) -> np.ndarray:
    """One constant-heading step for every car; speeds are floored at 0."""
    out = states.copy()
    s = states[:, 4]
    out[:, 0] = states[:, 0] + s * states[:, 2] * dt
    out[:, 1] = states[:, 1] + s * states[:, 3] * dt
    out[:, 4] = np.maximum(0.0, s + accel * dt)
    return out


def _render(scene0: Scene, states: np.ndarray, anchor: SelfState, geom: RasterGeometry):
    lane_ch, off = render_static(scene0.lanes, anchor, geom)
    T = len(states)
    dims = scene0.other_dims()
    cars = np.stack([render_cars(states[k], dims, anchor, geom) for k in range(T)]) if T else None
    return (np.broadcast_to(lane_ch, (T,) + lane_ch.shape), cars,
            np.broadcast_to(off, (T,) + off.shape))


class EnvPredictor:
    """Stateless predictor plus an instrumentation counter of scene advances."""

    def __init__(self, kind: PredictorKind | str = PredictorKind.constant_velocity,
                 reactive: ReactiveParams = ReactiveParams(), log: TrajectoryLog | None = None,
                 ego_id: int = 0, geom: RasterGeometry = RasterGeometry()):
        self.kind = PredictorKind(kind)
        self.reactive = reactive
        self.log = log
        self.ego_id = ego_id
        self.geom = geom
        self.advances = 0

    def _anchor(self, scene0: Scene, anchor) -> SelfState:
        return SelfState(*(float(v) for v in (anchor if anchor is not None else scene0.ego)))

    def predict_decoupled(self, scene0: Scene, T: int, dt: float, anchor=None) -> EnvPrediction:
        """Ego-independent prediction: log replay if a log is attached and the
        kind is ``replay``, constant velocity otherwise."""
        if T < 1:
            raise ValueError("horizon must be >= 1")
        anchor = self._anchor(scene0, anchor)
        if self.kind is PredictorKind.replay and self.log is not None:
            return self._predict_replay(scene0, T, dt, anchor)
        states = np.empty((T, len(scene0.others), 5))
        cur = scene0.other_states()
        zero = np.zeros(len(cur))
        for k in range(T):
            cur = advance_cars(cur, zero, dt)
            states[k] = cur
            self.advances += 1
        lanes, cars, off = _render(scene0, states, anchor, self.geom)
        return EnvPrediction(scene0, states, anchor, lanes, cars, off,
                             tuple(o.id for o in scene0.others), scene0.other_dims())

    def _predict_replay(self, scene0, T, dt, anchor):
        # cars are the ones present at plan start; rows past their track end are extrapolated
        ids = [o.id for o in scene0.others]
        states = np.empty((T, len(ids), 5))
        prev = scene0.other_states()
        for k in range(T):
            frame = scene0.t + k + 1
            for n, cid in enumerate(ids):
                row = self.log.tracks[cid].at(frame) if cid in self.log.tracks else None
                states[k, n] = row if row is not None else advance_cars(prev[n:n + 1], np.zeros(1), dt)[0]
            prev = states[k]
            self.advances += 1
        lanes, cars, off = _render(scene0, states, anchor, self.geom)
        return EnvPrediction(scene0, states, anchor, lanes, cars, off, tuple(ids), scene0.other_dims())

    def predict_coupled(self, scene0: Scene, pred_self, dt: float, anchor=None) -> EnvPrediction:
        """Reactive prediction driven by the predicted ego states ``(T, 5)`` (world frame).

        Advancing from step k to k+1 uses ``pred_self[k]`` (the ego state at
        k+1), matching the coupled dependency pattern.
        """
        ego = np.asarray(pred_self, dtype=float).reshape(-1, 5)
        T = len(ego)
        if T < 1:
            raise ValueError("horizon must be >= 1")
        anchor = self._anchor(scene0, anchor)
        p = self.reactive
        states = np.empty((T, len(scene0.others), 5))
        tape = []
        cur = scene0.other_states()
        for k in range(T):
            lead = cur[:, 0] - ego[k, 0]
            srel = cur[:, 4] - ego[k, 4]
            sig = _sigmoid(-lead / p.scale)
            raw = p.gain * np.maximum(srel, 0.0) * sig
            brake = np.minimum(raw, p.brake_cap)
            nxt = advance_cars(cur, -brake, dt)
            tape.append((cur, srel, sig, raw))
            states[k] = nxt
            cur = nxt
            self.advances += 1
        lanes, cars, off = _render(scene0, states, anchor, self.geom)
        return EnvPrediction(scene0, states, anchor, lanes, cars, off,
                             tuple(o.id for o in scene0.others), scene0.other_dims(), _tape=tape)

    def predict_coupled_vjp(self, pred: EnvPrediction, dt: float, g_states) -> np.ndarray:
        """Cotangent of the predicted ego states given cotangents ``(T, n, 5)``
        of the predicted car states."""
        if pred._tape is None:
            raise ValueError("prediction was not produced by predict_coupled")
        g_states = np.asarray(g_states, dtype=float)
        T = pred.horizon
        if g_states.shape != pred.states.shape:
            raise ValueError(f"cotangent shape {g_states.shape} != {pred.states.shape}")
        p = self.reactive
        g_ego = np.zeros((T, 5))
        g = np.zeros_like(g_states[0])
        for k in range(T - 1, -1, -1):
            g = g + g_states[k]
            cur, srel, sig, raw = pred._tape[k]
            s = cur[:, 4]
            brake = np.minimum(raw, p.brake_cap)
            moving = (s - brake * dt) > 0
            # d s' / d brake
            g_brake = -dt * g[:, 4] * moving
            g_raw = g_brake * (raw < p.brake_cap)
            pos = srel > 0
            g_srel = g_raw * p.gain * sig * pos
            g_sig = g_raw * p.gain * np.maximum(srel, 0.0)
            g_lead = g_sig * sig * (1.0 - sig) * (-1.0 / p.scale)
            g_prev = np.zeros_like(g)
            g_prev[:, 0] = g[:, 0] + g_lead
            g_prev[:, 1] = g[:, 1]
            g_prev[:, 2] = g[:, 0] * s * dt + g[:, 2]
            g_prev[:, 3] = g[:, 1] * s * dt + g[:, 3]
            g_prev[:, 4] = (g[:, 0] * cur[:, 2] + g[:, 1] * cur[:, 3]) * dt + g[:, 4] * moving + g_srel
            g_ego[k, 0] = -np.sum(g_lead)
            g_ego[k, 4] = -np.sum(g_srel)
            g = g_prev
        return g_ego

    def predict(self, scene0: Scene, T: int, dt: float, pred_self=None, anchor=None) -> EnvPrediction:
        if self.kind.coupled:
            if pred_self is None:
                raise ValueError("coupled prediction needs predicted ego states")
            return self.predict_coupled(scene0, pred_self, dt, anchor)
        return self.predict_decoupled(scene0, T, dt, anchor)


def predict_decoupled(scene0: Scene, T: int, dt: float, log: TrajectoryLog | None = None,
                      geom: RasterGeometry = RasterGeometry()) -> EnvPrediction:
    kind = PredictorKind.replay if log is not None else PredictorKind.constant_velocity
    return EnvPredictor(kind, log=log, geom=geom).predict_decoupled(scene0, T, dt)


def predict_coupled(scene0: Scene, pred_self, params: ReactiveParams, dt: float,
                    geom: RasterGeometry = RasterGeometry()) -> EnvPrediction:
    return EnvPredictor(PredictorKind.coupled_reactive, params, geom=geom).predict_coupled(scene0, pred_self, dt)
