"""Kinematic bicycle model of the ego vehicle with hand-written adjoints.

States are ``(x, y, ux, uy, s)``: position, unit heading and speed. Actions
are ``(accel, turn)``. The array functions (``*_array``) are what the planner
uses in its inner loop; ``step``/``rollout`` wrap them for value types.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

DEGENERATE_EPS = 1e-12


class DegenerateDirectionError(ValueError):
    """The heading vector collapsed to ~0 before normalization."""


class SelfState(NamedTuple):
    x: float
    y: float
    ux: float
    uy: float
    s: float


class Action(NamedTuple):
    accel: float
    turn: float


# Cotangents share the state layout.
SelfStateAdjoint = SelfState


@dataclass(frozen=True)
class StepParams:
    dt: float = 0.1

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")


def _step_values(x, y, ux, uy, s, accel, turn, dt):
    k = turn * dt
    vx = ux + k * uy
    vy = uy - k * ux
    n = math.hypot(vx, vy)
    if n < DEGENERATE_EPS:
        raise DegenerateDirectionError(
            f"heading update has norm {n:.3e} (turn={turn}, dt={dt})")
    return (x + s * ux * dt, y + s * uy * dt, vx / n, vy / n, s + accel * dt)


def _step_vjp_values(state, action, dt, g):
    x, y, ux, uy, s = state
    accel, turn = action
    gx, gy, gux, guy, gs = g
    k = turn * dt
    vx = ux + k * uy
    vy = uy - k * ux
    n = math.hypot(vx, vy)
    if n < DEGENERATE_EPS:
        raise DegenerateDirectionError(
            f"heading update has norm {n:.3e} (turn={turn}, dt={dt})")
    wx, wy = vx / n, vy / n
    # d unit(v) / dv = (I - w w^T) / n
    proj = wx * gux + wy * guy
    gvx = (gux - wx * proj) / n
    gvy = (guy - wy * proj) / n

    g_ux = gvx - k * gvy + gx * s * dt
    g_uy = k * gvx + gvy + gy * s * dt
    g_s = gs + (gx * ux + gy * uy) * dt
    g_turn = dt * (gvx * uy - gvy * ux)
    g_accel = gs * dt
    return (gx, gy, g_ux, g_uy, g_s), (g_accel, g_turn)


def step(state: SelfState, action: Action, params: StepParams = StepParams()) -> SelfState:
    """Advance the ego state by one time step."""
    return SelfState(*_step_values(*state, *action, params.dt))


def step_vjp(state: SelfState, action: Action, params: StepParams,
             cotangent_out: SelfStateAdjoint) -> tuple[SelfStateAdjoint, Action]:
    """Transpose-Jacobian product of :func:`step`.

    Returns the cotangents with respect to the input state and the action.
    """
    g_state, g_action = _step_vjp_values(state, action, params.dt, cotangent_out)
    return SelfStateAdjoint(*g_state), Action(*g_action)


def rollout_array(state0, actions, dt: float) -> np.ndarray:
    """Roll the model forward; returns a ``(T, 5)`` array of successor states."""
    actions = np.asarray(actions, dtype=float)
    if actions.ndim != 2 or actions.shape[0] == 0 or actions.shape[1] != 2:
        raise ValueError(f"expected a non-empty (T, 2) action array, got shape {actions.shape}")
    out = np.empty((actions.shape[0], 5))
    cur = tuple(float(v) for v in state0)
    for k, (accel, turn) in enumerate(actions.tolist()):
        try:
            cur = _step_values(*cur, accel, turn, dt)
        except DegenerateDirectionError as exc:
            raise DegenerateDirectionError(f"step {k}: {exc}") from None
        out[k] = cur
    return out


def rollout_vjp_array(state0, actions, dt: float, cotangents, states=None):
    """Reverse sweep through a rollout.

    ``cotangents[k]`` is the cotangent of the k-th returned state. Returns
    ``(g_state0, g_actions)`` with shapes ``(5,)`` and ``(T, 2)``. ``states``
    may pass a precomputed forward rollout.
    """
    actions = np.asarray(actions, dtype=float)
    cotangents = np.asarray(cotangents, dtype=float)
    if cotangents.shape != (actions.shape[0], 5):
        raise ValueError(
            f"cotangent shape {cotangents.shape} does not match {actions.shape[0]} actions")
    if states is None:
        states = rollout_array(state0, actions, dt)
    T = actions.shape[0]
    g_actions = np.zeros((T, 2))
    g = cotangents[T - 1].tolist()
    acts = actions.tolist()
    for k in range(T - 1, -1, -1):
        prev = tuple(float(v) for v in (states[k - 1] if k > 0 else state0))
        g_prev, g_act = _step_vjp_values(prev, acts[k], dt, g)
        g_actions[k] = g_act
        if k > 0:
            g = [a + b for a, b in zip(g_prev, cotangents[k - 1].tolist())]
        else:
            g = list(g_prev)
    return np.array(g), g_actions


def rollout(state0: SelfState, actions: Sequence[Action],
            params: StepParams = StepParams()) -> list[SelfState]:
    if len(actions) == 0:
        raise ValueError("rollout needs at least one action")
    arr = rollout_array(state0, np.asarray(actions, dtype=float).reshape(-1, 2), params.dt)
    return [SelfState(*row) for row in arr.tolist()]


def rollout_vjp(state0: SelfState, actions: Sequence[Action], params: StepParams,
                cotangents: Sequence[SelfStateAdjoint]) -> tuple[SelfStateAdjoint, list[Action]]:
    if len(cotangents) != len(actions):
        raise ValueError(
            f"got {len(cotangents)} cotangents for {len(actions)} actions")
    if len(actions) == 0:
        raise ValueError("rollout needs at least one action")
    g0, ga = rollout_vjp_array(state0, np.asarray(actions, dtype=float).reshape(-1, 2),
                               params.dt, np.asarray(cotangents, dtype=float).reshape(-1, 5))
    return SelfStateAdjoint(*g0.tolist()), [Action(*row) for row in ga.tolist()]
