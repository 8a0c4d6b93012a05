"""Ground-truth scenes, scenario generators and the trajectory-log CSV format."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .geometry import rect_corners, rects_intersect
from .kinematics import SelfState

log = logging.getLogger(__name__)

LANE_WIDTH = 3.7
HEADING_TOL = 1e-9
LOG_COLUMNS = ("t", "car_id", "x", "y", "ux", "uy", "s", "w", "l")


class InfeasibleGeometryError(ValueError):
    pass


class LogParseError(ValueError):
    def __init__(self, message: str, line: int | None = None, path=None):
        self.line = line
        self.path = path
        where = f"{path}:" if path is not None else ""
        where += f"line {line}: " if line is not None else ""
        super().__init__(where + message)


class NonUniformTimeStepError(LogParseError):
    pass


@dataclass(frozen=True)
class VehicleDims:
    width: float = 1.8
    length: float = 4.8

    def __post_init__(self):
        if not (self.width > 0 and self.length > 0):
            raise ValueError(f"vehicle dims must be positive, got {self}")


@dataclass(frozen=True)
class OtherVehicle:
    id: int
    state: SelfState
    dims: VehicleDims


@dataclass(frozen=True)
class LaneGeometry:
    lane_count: int = 3
    lane_width: float = LANE_WIDTH
    road_y_min: float = 0.0

    @property
    def road_y_max(self) -> float:
        return self.road_y_min + self.lane_count * self.lane_width

    def lane_center(self, lane: int) -> float:
        return self.road_y_min + (lane + 0.5) * self.lane_width

    def lane_index(self, y: float) -> int:
        """Index of the lane containing ``y``; may fall outside ``[0, lane_count)``."""
        return int(math.floor((y - self.road_y_min) / self.lane_width))

    def demarcations(self) -> np.ndarray:
        return self.road_y_min + self.lane_width * np.arange(self.lane_count + 1)


@dataclass(frozen=True)
class Scene:
    t: int
    ego: SelfState
    ego_dims: VehicleDims
    others: tuple[OtherVehicle, ...]
    lanes: LaneGeometry

    def __post_init__(self):
        ids = [o.id for o in self.others]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate vehicle ids in scene: {ids}")

    def other_states(self) -> np.ndarray:
        if not self.others:
            return np.zeros((0, 5))
        return np.array([o.state for o in self.others], dtype=float)

    def other_dims(self) -> np.ndarray:
        """``(n, 2)`` array of (width, length)."""
        if not self.others:
            return np.zeros((0, 2))
        return np.array([(o.dims.width, o.dims.length) for o in self.others], dtype=float)

    def with_others(self, states: np.ndarray, t: int | None = None) -> Scene:
        others = tuple(
            OtherVehicle(o.id, SelfState(*row), o.dims)
            for o, row in zip(self.others, np.asarray(states).tolist()))
        return replace(self, others=others, t=self.t if t is None else t)


@dataclass
class CarTrack:
    car_id: int
    start: int
    states: np.ndarray  # (n, 5)
    dims: VehicleDims

    @property
    def stop(self) -> int:
        return self.start + len(self.states)

    def at(self, frame: int) -> SelfState | None:
        if self.start <= frame < self.stop:
            return SelfState(*self.states[frame - self.start].tolist())
        return None


@dataclass
class TrajectoryLog:
    dt: float
    tracks: dict[int, CarTrack]
    lanes: LaneGeometry = field(default_factory=LaneGeometry)
    normalized_headings: bool = False

    @property
    def first_frame(self) -> int:
        return min(t.start for t in self.tracks.values())

    @property
    def last_frame(self) -> int:
        return max(t.stop for t in self.tracks.values()) - 1

    @property
    def n_frames(self) -> int:
        return self.last_frame - self.first_frame + 1

    def cars_at(self, frame: int) -> list[tuple[int, SelfState, VehicleDims]]:
        out = []
        for cid in sorted(self.tracks):
            st = self.tracks[cid].at(frame)
            if st is not None:
                out.append((cid, st, self.tracks[cid].dims))
        return out

    def scene_at(self, frame: int, ego_id: int = 0, ego: SelfState | None = None) -> Scene:
        """Scene at ``frame``; ``ego`` overrides the logged ego state."""
        track = self.tracks.get(ego_id)
        if track is None:
            raise KeyError(f"ego id {ego_id} not in log")
        ego_state = ego if ego is not None else track.at(frame)
        if ego_state is None:
            raise KeyError(f"ego id {ego_id} has no row at frame {frame}")
        others = tuple(OtherVehicle(cid, st, dims)
                       for cid, st, dims in self.cars_at(frame) if cid != ego_id)
        return Scene(frame, ego_state, track.dims, others, self.lanes)

    def __eq__(self, other):
        if not isinstance(other, TrajectoryLog):
            return NotImplemented
        if self.dt != other.dt or self.lanes != other.lanes or self.tracks.keys() != other.tracks.keys():
            return False
        for cid, a in self.tracks.items():
            b = other.tracks[cid]
            if a.start != b.start or a.dims != b.dims or not np.array_equal(a.states, b.states):
                return False
        return True


# ---------------------------------------------------------------- scenarios

@dataclass(frozen=True)
class StressConfig:
    lead_gap: float = 30.0
    lead_decel: float = -6.0
    rear_gap: float = 20.0
    speed: float = 20.0
    onset: float = 1.0
    duration: float = 10.0
    dt: float = 0.1
    lane_count: int = 3
    ego_lane: int = 1
    ego_lateral_offset: float = 0.0


def lead_speed_at(t: float, cfg: StressConfig) -> float:
    if t < cfg.onset:
        return cfg.speed
    return max(0.0, cfg.speed + cfg.lead_decel * (t - cfg.onset))


def _lead_position(t: float, cfg: StressConfig) -> float:
    x0 = cfg.lead_gap
    if t < cfg.onset:
        return x0 + cfg.speed * t
    xb = x0 + cfg.speed * cfg.onset
    tau = t - cfg.onset
    if cfg.lead_decel == 0:
        return xb + cfg.speed * tau
    t_stop = cfg.speed / -cfg.lead_decel
    tau = min(tau, t_stop)
    return xb + cfg.speed * tau + 0.5 * cfg.lead_decel * tau * tau


def make_stress_scenario(cfg: StressConfig = StressConfig(), dims: VehicleDims = VehicleDims()) -> TrajectoryLog:
    """Ego (id 0) cruising between a lead (id 1) and a rear car (id 2); the lead brakes at ``onset``."""
    if cfg.speed <= 0:
        raise ValueError("speed must be positive")
    if cfg.lead_decel > 0:
        raise ValueError("lead_decel must be <= 0")
    if not 0 <= cfg.ego_lane < cfg.lane_count:
        raise ValueError(f"ego_lane {cfg.ego_lane} outside {cfg.lane_count} lanes")
    for name, gap in (("lead_gap", cfg.lead_gap), ("rear_gap", cfg.rear_gap)):
        if gap <= dims.length:
            raise InfeasibleGeometryError(
                f"{name}={gap} m leaves cars overlapping (vehicle length {dims.length} m)")
    lanes = LaneGeometry(cfg.lane_count)
    y = lanes.lane_center(cfg.ego_lane)
    n = int(round(cfg.duration / cfg.dt)) + 1
    ts = np.arange(n) * cfg.dt

    def track(cid, xs, ss, y_pos):
        st = np.zeros((n, 5))
        st[:, 0] = xs
        st[:, 1] = y_pos
        st[:, 2] = 1.0
        st[:, 4] = ss
        return CarTrack(cid, 0, st, dims)

    ego = track(0, cfg.speed * ts, np.full(n, cfg.speed), y + cfg.ego_lateral_offset)
    lead = track(1, [_lead_position(t, cfg) for t in ts], [lead_speed_at(t, cfg) for t in ts], y)
    rear = track(2, -cfg.rear_gap + cfg.speed * ts, np.full(n, cfg.speed), y)
    return TrajectoryLog(cfg.dt, {0: ego, 1: lead, 2: rear}, lanes)


def make_traffic_scenario(seed: int, density: float = 0.5, lane_count: int = 3,
                          duration: float = 30.0, dt: float = 0.1, span: float = 200.0,
                          min_gap: float = 10.0) -> TrajectoryLog:
    """Random multi-lane traffic with the ego (id 0) at x=0 in the middle lane.

    Cars keep a constant speed; some wobble laterally inside their lane.
    Spawns are rejection-sampled so that no two cars in a lane overlap at
    any frame (constant speeds make gaps linear in time, so checking both
    ends of the horizon suffices).
    """
    if not 0 < density <= 1:
        raise ValueError(f"density must be in (0, 1], got {density}")
    if duration <= 0:
        raise ValueError("duration must be positive")
    rng = np.random.default_rng(seed)
    lanes = LaneGeometry(lane_count)
    n = int(round(duration / dt)) + 1
    ts = np.arange(n) * dt
    lane_speed = rng.uniform(22.0, 28.0, size=lane_count)
    capacity = span / (VehicleDims().length + min_gap)
    n_total = max(1, int(round(density * capacity * lane_count)))

    ego_lane = lane_count // 2
    placed: list[dict] = [dict(lane=ego_lane, x=0.0, s=float(lane_speed[ego_lane]), dims=VehicleDims(),
                               amp=0.0, period=1.0, phase=0.0)]

    def fits(c):
        for o in placed:
            if o["lane"] != c["lane"]:
                continue
            need = 0.5 * (o["dims"].length + c["dims"].length) + 2.0
            d0 = c["x"] - o["x"]
            d1 = d0 + (c["s"] - o["s"]) * duration
            if abs(d0) < need or abs(d1) < need or (d0 > 0) != (d1 > 0):
                return False
        return True

    for _ in range(n_total - 1):
        for _attempt in range(200):
            lane = int(rng.integers(lane_count))
            cand = dict(
                lane=lane,
                x=float(rng.uniform(-span / 2, span / 2)),
                s=float(lane_speed[lane] + rng.normal(0.0, 1.0)),
                dims=VehicleDims(float(rng.uniform(1.7, 2.0)), float(rng.uniform(4.2, 5.2))),
                amp=float(rng.uniform(0.05, 0.25)) if rng.random() < 0.3 else 0.0,
                period=float(rng.uniform(6.0, 12.0)),
                phase=float(rng.uniform(0, 2 * math.pi)),
            )
            if fits(cand):
                placed.append(cand)
                break

    tracks = {}
    for cid, c in enumerate(placed):
        st = np.zeros((n, 5))
        w = 2 * math.pi / c["period"]
        st[:, 0] = c["x"] + c["s"] * ts
        st[:, 1] = lanes.lane_center(c["lane"]) + c["amp"] * np.sin(w * ts + c["phase"])
        vy = c["amp"] * w * np.cos(w * ts + c["phase"])
        norm = np.hypot(c["s"], vy)
        st[:, 2] = c["s"] / norm
        st[:, 3] = vy / norm
        st[:, 4] = c["s"]
        tracks[cid] = CarTrack(cid, 0, st, c["dims"])
    return TrajectoryLog(dt, tracks, lanes)


def overlapping_pairs(log: TrajectoryLog, frame: int) -> list[tuple[int, int]]:
    cars = log.cars_at(frame)
    rects = [(cid, rect_corners(*st[:4], d.length, d.width)) for cid, st, d in cars]
    out = []
    for i in range(len(rects)):
        for j in range(i + 1, len(rects)):
            if rects_intersect(rects[i][1], rects[j][1]):
                out.append((rects[i][0], rects[j][0]))
    return out


# ------------------------------------------------------------------ CSV I/O

def save_log(log_: TrajectoryLog, path) -> None:
    lanes = log_.lanes
    lines = [
        f"# dt={log_.dt!r}",
        f"# lanes={lanes.lane_count} lane_width={lanes.lane_width!r} road_y_min={lanes.road_y_min!r}",
        ",".join(LOG_COLUMNS),
    ]
    for frame in range(log_.first_frame, log_.last_frame + 1):
        t = frame * log_.dt
        for cid, st, d in log_.cars_at(frame):
            vals = [repr(float(t)), str(cid)] + [repr(float(v)) for v in st] + [repr(d.width), repr(d.length)]
            lines.append(",".join(vals))
    Path(path).write_text("\n".join(lines) + "\n")


def _parse_header_kv(text: str) -> dict[str, str]:
    out = {}
    for tok in text.lstrip("#").split():
        if "=" in tok:
            k, v = tok.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def load_log(path) -> TrajectoryLog:
    """Parse a trajectory-log CSV. Rows whose heading is not unit length are normalized."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise LogParseError(f"cannot read log: {exc}", path=path) from None
    lines = text.splitlines()
    if not any(ln.strip() for ln in lines):
        raise LogParseError("empty log file", line=1, path=path)

    dt = None
    lanes = LaneGeometry()
    header_seen = False
    rows: dict[int, list] = {}
    dims_by_car: dict[int, VehicleDims] = {}
    normalized = False
    last_t = -math.inf
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            kv = _parse_header_kv(line)
            try:
                if "dt" in kv:
                    dt = float(kv["dt"])
                if "lanes" in kv:
                    lanes = LaneGeometry(int(kv["lanes"]), float(kv.get("lane_width", LANE_WIDTH)),
                                         float(kv.get("road_y_min", 0.0)))
            except ValueError as exc:
                raise LogParseError(f"bad header: {exc}", lineno, path) from None
            continue
        if not header_seen:
            cols = tuple(c.strip() for c in line.split(","))
            if cols != LOG_COLUMNS:
                raise LogParseError(f"expected header {','.join(LOG_COLUMNS)}, got {line!r}", lineno, path)
            header_seen = True
            if dt is None or not dt > 0:
                raise LogParseError("missing or invalid '# dt=' declaration before header", lineno, path)
            continue
        parts = line.split(",")
        if len(parts) != len(LOG_COLUMNS):
            raise LogParseError(f"expected {len(LOG_COLUMNS)} fields, got {len(parts)}", lineno, path)
        try:
            t = float(parts[0])
            cid = int(parts[1])
            x, y, ux, uy, s, w, l = (float(p) for p in parts[2:])
        except ValueError as exc:
            raise LogParseError(f"bad value: {exc}", lineno, path) from None
        if not all(math.isfinite(v) for v in (t, x, y, ux, uy, s, w, l)):
            raise LogParseError("non-finite value", lineno, path)
        if t < last_t:
            raise LogParseError(f"time {t} goes backwards (previous {last_t})", lineno, path)
        last_t = t
        frame = int(round(t / dt))
        if abs(t / dt - frame) > 1e-6:
            raise NonUniformTimeStepError(f"time {t} is not on the dt={dt} grid", lineno, path)
        norm = math.hypot(ux, uy)
        if norm < 1e-12:
            raise LogParseError("zero heading vector", lineno, path)
        if abs(norm - 1.0) > HEADING_TOL:
            ux, uy = ux / norm, uy / norm
            normalized = True
            log.warning("%s:%d: heading norm %.6g normalized", path, lineno, norm)
        try:
            dims = VehicleDims(w, l)
        except ValueError as exc:
            raise LogParseError(str(exc), lineno, path) from None
        if dims_by_car.setdefault(cid, dims) != dims:
            raise LogParseError(f"car {cid} changes dimensions", lineno, path)
        track_rows = rows.setdefault(cid, [])
        if track_rows:
            prev = track_rows[-1][0]
            if frame == prev:
                raise LogParseError(f"duplicate row for car {cid} at t={t}", lineno, path)
            if frame != prev + 1:
                raise NonUniformTimeStepError(
                    f"car {cid} jumps from frame {prev} to {frame}", lineno, path)
        track_rows.append((frame, (x, y, ux, uy, s)))

    if not header_seen:
        raise LogParseError("missing column header", path=path)
    if not rows:
        raise LogParseError("log has no data rows", path=path)
    frames = sorted({f for r in rows.values() for f, _ in r})
    if frames != list(range(frames[0], frames[-1] + 1)):
        raise NonUniformTimeStepError("log has frames with no rows", path=path)
    tracks = {
        cid: CarTrack(cid, r[0][0], np.array([v for _, v in r], dtype=float), dims_by_car[cid])
        for cid, r in rows.items()
    }
    return TrajectoryLog(dt, tracks, lanes, normalized_headings=normalized)
