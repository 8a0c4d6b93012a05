"""Ego-anchored 3-channel rasters and the differentiable cost masks.

Frame axes: index ``i`` runs along the anchor heading (rear to front),
index ``j`` runs across it (right to left). Cell coordinates are cell
centres relative to the frame centre, in metres.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .kinematics import SelfState
from .world import LaneGeometry, Scene, VehicleDims

LINE_EPS = 1e-9


class InvalidDimsError(ValueError):
    pass


@dataclass(frozen=True)
class RasterGeometry:
    height_cells: int = 117
    width_cells: int = 24
    height_m: float = 72.2
    width_m: float = 14.8

    @property
    def cell_h(self) -> float:
        return self.height_m / self.height_cells

    @property
    def cell_w(self) -> float:
        return self.width_m / self.width_cells

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height_cells, self.width_cells)


@dataclass(frozen=True)
class MaskConfig:
    exponent: float = 2.0
    lane_pad: float = 3.7
    speed_floor: float = 10.0

    def __post_init__(self):
        if not self.exponent > 0:
            raise ValueError(f"mask exponent must be positive, got {self.exponent}")


@dataclass(frozen=True)
class RasterFrame:
    lanes: np.ndarray
    cars: np.ndarray
    offroad: np.ndarray
    anchor: SelfState

    @property
    def channels(self) -> np.ndarray:
        return np.stack([self.lanes, self.cars, self.offroad])


@dataclass(frozen=True)
class MaskPair:
    car: np.ndarray
    side: np.ndarray


@functools.lru_cache(maxsize=8)
def mesh_grid(geom: RasterGeometry = RasterGeometry()) -> np.ndarray:
    """``(H, W, 2)`` array of (longitudinal, lateral) cell-centre offsets."""
    lon = geom.cell_h * (np.arange(geom.height_cells) + 0.5) - geom.height_m / 2
    lat = geom.cell_w * (np.arange(geom.width_cells) + 0.5) - geom.width_m / 2
    grid = np.stack(np.meshgrid(lon, lat, indexing="ij"), axis=-1)
    grid.setflags(write=False)
    return grid


# ------------------------------------------------------------ frame algebra

def to_anchor(states, anchor: SelfState) -> np.ndarray:
    """Express world-frame states ``(..., 5)`` in the anchor's frame."""
    st = np.asarray(states, dtype=float)
    x0, y0, ax, ay, _ = anchor
    dx = st[..., 0] - x0
    dy = st[..., 1] - y0
    out = np.empty_like(st)
    out[..., 0] = ax * dx + ay * dy
    out[..., 1] = -ay * dx + ax * dy
    out[..., 2] = ax * st[..., 2] + ay * st[..., 3]
    out[..., 3] = -ay * st[..., 2] + ax * st[..., 3]
    out[..., 4] = st[..., 4]
    return out


def to_anchor_vjp(g_local, anchor: SelfState) -> np.ndarray:
    """Pull anchor-frame cotangents back to world-frame cotangents."""
    g = np.asarray(g_local, dtype=float)
    _, _, ax, ay, _ = anchor
    out = np.empty_like(g)
    out[..., 0] = ax * g[..., 0] - ay * g[..., 1]
    out[..., 1] = ay * g[..., 0] + ax * g[..., 1]
    out[..., 2] = ax * g[..., 2] - ay * g[..., 3]
    out[..., 3] = ay * g[..., 2] + ax * g[..., 3]
    out[..., 4] = g[..., 4]
    return out


def cell_world_coords(anchor: SelfState, geom: RasterGeometry) -> tuple[np.ndarray, np.ndarray]:
    A = mesh_grid(geom)
    x0, y0, ax, ay, _ = anchor
    wx = x0 + A[..., 0] * ax - A[..., 1] * ay
    wy = y0 + A[..., 0] * ay + A[..., 1] * ax
    return wx, wy


# ------------------------------------------------------------- rasterizing

@functools.lru_cache(maxsize=64)
def render_static(lanes: LaneGeometry, anchor: SelfState, geom: RasterGeometry) -> tuple[np.ndarray, np.ndarray]:
    """Lane-demarcation and off-road channels for a given anchor pose."""
    _, wy = cell_world_coords(anchor, geom)
    half = 0.5 * geom.cell_w
    lane_ch = np.zeros(geom.shape)
    for y_line in lanes.demarcations():
        d = y_line - wy
        lane_ch[(d >= -half - LINE_EPS) & (d < half - LINE_EPS)] = 1.0
    off = ((wy < lanes.road_y_min) | (wy > lanes.road_y_max)).astype(float)
    lane_ch.setflags(write=False)
    off.setflags(write=False)
    return lane_ch, off


def _car_cells(states: np.ndarray, dims: np.ndarray, anchor: SelfState, geom: RasterGeometry):
    """Yield ``(k, i0, i1, j0, j1, inside)`` for each car touching the frame."""
    if len(states) == 0:
        return
    A = mesh_grid(geom)
    local = to_anchor(states, anchor)
    H, W = geom.shape
    reach = 0.5 * math.hypot(geom.height_m, geom.width_m)
    for k, ((cx, cy, ux, uy, _), (w, l)) in enumerate(zip(local.tolist(), np.asarray(dims).tolist())):
        r = 0.5 * math.hypot(w, l)
        if abs(cx) > reach + r or abs(cy) > reach + r:
            continue
        i0 = max(0, int(math.floor((cx - r + geom.height_m / 2) / geom.cell_h)))
        i1 = min(H, int(math.ceil((cx + r + geom.height_m / 2) / geom.cell_h)) + 1)
        j0 = max(0, int(math.floor((cy - r + geom.width_m / 2) / geom.cell_w)))
        j1 = min(W, int(math.ceil((cy + r + geom.width_m / 2) / geom.cell_w)) + 1)
        if i0 >= i1 or j0 >= j1:
            continue
        sub = A[i0:i1, j0:j1]
        dx = sub[..., 0] - cx
        dy = sub[..., 1] - cy
        lon = dx * ux + dy * uy
        lat = -dx * uy + dy * ux
        inside = (np.abs(lon) <= 0.5 * l) & (np.abs(lat) <= 0.5 * w)
        yield k, i0, i1, j0, j1, inside


def render_cars(states: np.ndarray, dims: np.ndarray, anchor: SelfState,
                geom: RasterGeometry = RasterGeometry()) -> np.ndarray:
    """Binary car channel: a cell is set when its centre lies inside a car.

    ``states`` is ``(n, 5)`` in world coordinates, ``dims`` ``(n, 2)`` as (width, length).
    """
    out = np.zeros(geom.shape)
    for _, i0, i1, j0, j1, inside in _car_cells(states, dims, anchor, geom):
        out[i0:i1, j0:j1][inside] = 1.0
    return out


def render_cars_vjp(states: np.ndarray, dims: np.ndarray, anchor: SelfState, geom: RasterGeometry,
                    field_x: np.ndarray, field_y: np.ndarray) -> np.ndarray:
    """Translation adjoint of the binary car channel.

    The fill itself is piecewise constant, so its true derivative is zero
    almost everywhere. Instead, moving a car by ``d`` is treated as moving
    its covered cells by ``d``: given the spatial gradient ``(field_x,
    field_y)`` of the downstream cost w.r.t. cell position (anchor frame),
    each car receives the sum over its cells. Returns world-frame ``(n, 5)``
    cotangents (position entries only).
    """
    g = np.zeros((len(states), 5))
    for k, i0, i1, j0, j1, inside in _car_cells(states, dims, anchor, geom):
        g[k, 0] = float(np.sum(field_x[i0:i1, j0:j1][inside]))
        g[k, 1] = float(np.sum(field_y[i0:i1, j0:j1][inside]))
    return to_anchor_vjp(g, anchor)


def rasterize(scene: Scene, geom: RasterGeometry = RasterGeometry(),
              anchor: SelfState | None = None) -> RasterFrame:
    """Render ``scene`` around ``anchor`` (default: the scene's ego pose).

    The ego vehicle itself is never drawn.
    """
    anchor = SelfState(*(float(v) for v in (anchor if anchor is not None else scene.ego)))
    lane_ch, off = render_static(scene.lanes, anchor, geom)
    cars = render_cars(scene.other_states(), scene.other_dims(), anchor, geom)
    return RasterFrame(lane_ch, cars, off, anchor)


def write_ppm(frame: RasterFrame, path) -> None:
    """Binary PPM, R=lanes G=cars B=offroad, front of the frame at the top."""
    rgb = np.stack([frame.lanes, frame.cars, frame.offroad], axis=-1)
    rgb = rgb[::-1, ::-1]
    data = np.clip(np.rint(rgb * 255.0), 0, 255).astype(np.uint8)
    h, w = data.shape[:2]
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + data.tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P6":
        raise ValueError("not a binary PPM")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w, 3)


# ------------------------------------------------------------------- masks

def safety_box(s, dims: VehicleDims, cfg: MaskConfig = MaskConfig()):
    d_x = 1.5 * (np.maximum(cfg.speed_floor, s) + dims.length) + 1.0
    d_y = dims.width / 2 + cfg.lane_pad
    return d_x, d_y


@dataclass
class _MaskCache:
    states: np.ndarray
    rel1: np.ndarray
    rel2: np.ndarray
    B1: np.ndarray
    B2: np.ndarray
    p: np.ndarray
    q: np.ndarray
    Lx: np.ndarray
    Ly: float
    z_car: np.ndarray
    z_side: np.ndarray
    car: np.ndarray
    side: np.ndarray


def _mask_forward(states, dims: VehicleDims, cfg: MaskConfig, geom: RasterGeometry) -> _MaskCache:
    st = np.atleast_2d(np.asarray(states, dtype=float))
    A = mesh_grid(geom)
    x, y, ux, uy, s = (st[:, k, None, None] for k in range(5))
    d_x, d_y = safety_box(st[:, 4], dims, cfg)
    Lx = d_x - dims.length / 2
    Ly = d_y - dims.width / 2
    if np.any(Lx <= 0) or Ly <= 0:
        raise InvalidDimsError(
            f"degenerate safety box: d_x - l/2 = {Lx.min():.3g}, d_y - w/2 = {Ly:.3g}")
    rel1 = A[None, ..., 0] - x
    rel2 = A[None, ..., 1] - y
    B1 = ux * rel1 + uy * rel2
    B2 = -uy * rel1 + ux * rel2
    p = (d_x[:, None, None] - np.abs(B1)) / Lx[:, None, None]
    q = (d_y - np.abs(B2)) / Ly
    pp = np.maximum(p, 0.0)
    qp = np.maximum(q, 0.0)
    z_car = pp * np.minimum(qp, 1.0)
    z_side = pp * qp
    a = cfg.exponent
    return _MaskCache(st, rel1, rel2, B1, B2, p, q, Lx, Ly, z_car, z_side, z_car ** a, z_side ** a)


def _dpow(z, a):
    out = np.zeros_like(z)
    pos = z > 0
    out[pos] = a * z[pos] ** (a - 1.0)
    return out


def _mask_backward(c: _MaskCache, dims: VehicleDims, cfg: MaskConfig,
                   g_car, g_side, reduce: bool = True) -> np.ndarray:
    """Cotangents of (x, y, ux, uy, s) given cellwise cotangents of both masks.

    With ``reduce=False`` returns per-cell partials, shape ``(5, T, H, W)``.
    """
    a = cfg.exponent
    h_car = g_car * _dpow(c.z_car, a) if g_car is not None else 0.0
    h_side = g_side * _dpow(c.z_side, a) if g_side is not None else 0.0
    pp = np.maximum(c.p, 0.0)
    qp = np.maximum(c.q, 0.0)
    gp = (h_car * np.minimum(qp, 1.0) + h_side * qp) * (c.p > 0)
    gq = (h_car * ((c.q > 0) & (c.q < 1)) + h_side * (c.q > 0)) * pp
    Lx = c.Lx[:, None, None]
    gB1 = -gp * np.sign(c.B1) / Lx
    gdx = gp * (np.abs(c.B1) - dims.length / 2) / Lx ** 2
    gB2 = -gq * np.sign(c.B2) / c.Ly
    ux = c.states[:, 2, None, None]
    uy = c.states[:, 3, None, None]
    over_floor = (c.states[:, 4] > cfg.speed_floor)[:, None, None]
    parts = [
        -ux * gB1 + uy * gB2,
        -uy * gB1 - ux * gB2,
        c.rel1 * gB1 + c.rel2 * gB2,
        c.rel2 * gB1 - c.rel1 * gB2,
        1.5 * gdx * over_floor,
    ]
    if not reduce:
        return np.stack([np.broadcast_to(p_, c.B1.shape) for p_ in parts])
    return np.stack([np.sum(p_, axis=(1, 2)) for p_ in parts], axis=1)


def build_masks_batch(states, dims: VehicleDims, cfg: MaskConfig = MaskConfig(),
                      geom: RasterGeometry = RasterGeometry()) -> tuple[np.ndarray, np.ndarray]:
    """Car and side masks for ``(T, 5)`` anchor-frame states; each ``(T, H, W)``."""
    c = _mask_forward(states, dims, cfg, geom)
    return c.car, c.side


def build_masks(pred_self: SelfState, dims: VehicleDims, cfg: MaskConfig = MaskConfig(),
                geom: RasterGeometry = RasterGeometry()) -> MaskPair:
    """Masks centred on ``pred_self`` (given in the frame's anchor coordinates)."""
    car, side = build_masks_batch(np.asarray(pred_self, dtype=float)[None], dims, cfg, geom)
    return MaskPair(car[0], side[0])


def build_masks_vjp(pred_self: SelfState, dims: VehicleDims, cfg: MaskConfig,
                    geom: RasterGeometry, g_car, g_side) -> SelfState:
    """Cotangent of ``pred_self`` for ``<g_car, M_car> + <g_side, M_side>``."""
    c = _mask_forward(np.asarray(pred_self, dtype=float)[None], dims, cfg, geom)
    g = _mask_backward(c, dims, cfg, np.asarray(g_car)[None], np.asarray(g_side)[None])
    return SelfState(*g[0].tolist())
