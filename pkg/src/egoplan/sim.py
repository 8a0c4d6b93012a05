"""Episode execution, crash detection and the evaluation metrics.

Episodes run a receding-horizon loop: observe, act, step the ego through
the kinematic model, advance the other cars (log replay or a rule-based
controller that reacts to the ego), then check for crashes.
"""

from __future__ import annotations

import json
import math
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import kinematics as km
from .cost import CostBreakdown, CostWeights, step_cost, write_breakdown_csv
from .envmodel import EnvPredictor, PredictorKind
from .geometry import rect_corners, rects_intersect
from .kinematics import Action, SelfState
from .planner import DFM_KM_MPC, PlannerConfig, PolicyParams, act, plan, policy_output
from .raster import rasterize, write_ppm
from .world import CarTrack, OtherVehicle, Scene, TrajectoryLog, save_log


class Mode(str, Enum):
    replay = "replay"
    interactive = "interactive"


class ControllerKind(str, Enum):
    zero = "zero"                  # baseline: no accel, no turn
    mpc_decoupled = "mpc_decoupled"
    mpc_coupled = "mpc_coupled"
    policy = "policy"


class Outcome(str, Enum):
    completed = "completed"
    crash_vehicle = "crash_vehicle"
    crash_offroad = "crash_offroad"
    timeout = "timeout"


class Crash(str, Enum):
    none = "none"
    vehicle = "vehicle"
    offroad = "offroad"


@dataclass(frozen=True)
class IDMParams:
    """Rule-based lane keeper for other cars in interactive mode."""
    headway: float = 1.5       # s
    min_gap: float = 2.0       # m
    max_accel: float = 1.5
    comfort_decel: float = 2.0
    exponent: float = 4.0
    max_brake: float = 9.0
    lat_gain: float = 0.3      # 1/s, lateral offset -> desired heading
    heading_gain: float = 2.0  # 1/s

    def __post_init__(self):
        if min(self.headway, self.max_accel, self.comfort_decel, self.max_brake) <= 0:
            raise ValueError(f"invalid IDM params {self}")


@dataclass(frozen=True)
class EpisodeConfig:
    mode: Mode = Mode.replay
    controller: ControllerKind = ControllerKind.mpc_decoupled
    planner: PlannerConfig = DFM_KM_MPC
    policy: PolicyParams | None = None
    idm: IDMParams = IDMParams()
    max_steps: int = 300
    dt: float = 0.1
    seed: int = 0
    weights: CostWeights = CostWeights()  # realized-cost accounting only

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        object.__setattr__(self, "controller", ControllerKind(self.controller))
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if self.controller is ControllerKind.policy and self.policy is None:
            raise ValueError("policy controller needs policy params")
        if self.controller is ControllerKind.mpc_coupled and not self.planner.predictor.coupled:
            object.__setattr__(self, "planner", replace(self.planner, predictor=PredictorKind.coupled_reactive))
        if self.controller is ControllerKind.mpc_decoupled and self.planner.predictor.coupled:
            object.__setattr__(self, "planner", replace(self.planner, predictor=PredictorKind.constant_velocity))


@dataclass
class EpisodeResult:
    outcome: Outcome
    steps: int
    step_ms: list[float]
    costs: CostBreakdown
    scenes: list[Scene]          # scenes[0] is the start, one more per step
    actions: np.ndarray          # (steps, 2)

    @property
    def crashed(self) -> bool:
        return self.outcome in (Outcome.crash_vehicle, Outcome.crash_offroad)

    def summary(self) -> dict:
        # wall times are left out so the summary is reproducible
        return {
            "outcome": self.outcome.value,
            "steps": self.steps,
            "final_ego": [float(v) for v in self.scenes[-1].ego],
            "cost_total": float(np.sum(self.costs.total)),
        }


# ---------------------------------------------------------------- crashes

def crash_check(scene: Scene) -> Crash:
    """Vehicle crash if the ego rectangle touches another car's rectangle,
    offroad if any ego corner leaves the road band."""
    d = scene.ego_dims
    ego = rect_corners(*scene.ego[:4], d.length, d.width)
    for o in scene.others:
        if rects_intersect(ego, rect_corners(*o.state[:4], o.dims.length, o.dims.width)):
            return Crash.vehicle
    ys = ego[:, 1]
    if ys.min() < scene.lanes.road_y_min or ys.max() > scene.lanes.road_y_max:
        return Crash.offroad
    return Crash.none


# ------------------------------------------------------- other-car control

def _lane_follow_accel(x, s, lead_x, lead_s, gap_len, desired, p: IDMParams):
    free = 1.0 - (s / max(desired, 1e-6)) ** p.exponent
    if lead_x is None:
        return p.max_accel * free
    gap = max(lead_x - x - gap_len, 0.1)
    dyn = p.min_gap + max(0.0, s * p.headway + s * (s - lead_s) / (2 * math.sqrt(p.max_accel * p.comfort_decel)))
    return p.max_accel * (free - (dyn / gap) ** 2)


def idm_step(scene: Scene, desired: Mapping[int, float], dt: float, p: IDMParams = IDMParams()) -> np.ndarray:
    """Advance every other car one step with IDM car following and a PD lane
    keeper. The ego counts as a potential leader, so cars react to it."""
    lanes = scene.lanes
    cars = [(o.id, o.state, o.dims.length) for o in scene.others]
    everyone = cars + [(-1, scene.ego, scene.ego_dims.length)]
    out = np.empty((len(cars), 5))
    for n, (cid, st, length) in enumerate(cars):
        x, y, ux, uy, s = st
        lane = min(max(lanes.lane_index(y), 0), lanes.lane_count - 1)
        lead = None
        for oid, ost, olen in everyone:
            if oid == cid or lanes.lane_index(ost.y) != lane or ost.x <= x:
                continue
            if lead is None or ost.x < lead[0]:
                lead = (ost.x, ost.s, 0.5 * (length + olen))
        if lead is None:
            a = _lane_follow_accel(x, s, None, 0.0, 0.0, desired.get(cid, s), p)
        else:
            a = _lane_follow_accel(x, s, lead[0], lead[1], lead[2], desired.get(cid, s), p)
        a = min(max(a, -p.max_brake), p.max_accel)
        a = max(a, -s / dt)  # never reverse
        uy_des = -p.lat_gain * (y - lanes.lane_center(lane)) / max(s, 1.0)
        uy_des = min(max(uy_des, -0.1), 0.1)
        turn = p.heading_gain * (uy - uy_des)
        out[n] = km._step_values(x, y, ux, uy, s, a, turn, dt)
    return out


# ---------------------------------------------------------------- episodes

Controller = Callable[[Scene], Action]


def make_controller(cfg: EpisodeConfig, log: TrajectoryLog | None = None) -> Controller:
    kind = cfg.controller
    if kind is ControllerKind.zero:
        return lambda scene: Action(0.0, 0.0)
    if kind is ControllerKind.policy:
        bounds = (cfg.planner.accel_bounds, cfg.planner.turn_bounds)
        return lambda scene: act(cfg.policy, scene, bounds=bounds)
    pcfg = cfg.planner
    # a replay predictor only makes sense when the future really is the log
    use_log = log if (pcfg.predictor is PredictorKind.replay and cfg.mode is Mode.replay) else None

    def controller(scene: Scene) -> Action:
        predictor = EnvPredictor(pcfg.predictor, pcfg.reactive, log=use_log, geom=pcfg.geom)
        return plan(scene, cfg=pcfg, predictor=predictor).first_action

    return controller


def _realized_cost(scene: Scene, cfg: EpisodeConfig):
    frame = rasterize(scene, cfg.planner.geom)
    sc = step_cost(frame, (0.0, 0.0, 1.0, 0.0, float(scene.ego.s)), scene.ego_dims, cfg.weights,
                   cfg.planner.mask, cfg.planner.geom)
    return sc.proximity, sc.lane, sc.offroad, sc.destination, sc.total


def run_episode(source: TrajectoryLog | Callable[[], TrajectoryLog], cfg: EpisodeConfig,
                controller: Controller | None = None, frames_dir=None, ego_id: int = 0) -> EpisodeResult:
    """Run one episode from the log's first frame.

    ``source`` is a log or a zero-argument generator returning one. In replay
    mode other cars follow their log rows and reaching the end of the log
    completes the episode; running out of ``max_steps`` first is a timeout.
    In interactive mode other cars are driven by :func:`idm_step` and
    reaching ``max_steps`` completes the episode.
    """
    log = source if isinstance(source, TrajectoryLog) else source()
    if cfg.mode is Mode.replay and not math.isclose(log.dt, cfg.dt, rel_tol=1e-9):
        raise ValueError(f"log dt {log.dt} != episode dt {cfg.dt}")
    controller = controller or make_controller(cfg, log)
    frame = log.first_frame
    scene = log.scene_at(frame, ego_id=ego_id)
    desired = {o.id: float(o.state.s) for o in scene.others}
    params = km.StepParams(cfg.dt)
    if frames_dir is not None:
        frames_dir = Path(frames_dir)
        frames_dir.mkdir(parents=True, exist_ok=True)
        write_ppm(rasterize(scene, cfg.planner.geom), frames_dir / f"frame_{0:05d}.ppm")

    scenes, actions, step_ms, costs = [scene], [], [], []
    outcome = None
    for step in range(cfg.max_steps):
        if cfg.mode is Mode.replay and frame >= log.last_frame:
            outcome = Outcome.completed
            break
        t0 = time.perf_counter()
        a = controller(scene)
        step_ms.append((time.perf_counter() - t0) * 1e3)
        ego = km.step(scene.ego, a, params)
        frame += 1
        if cfg.mode is Mode.replay:
            scene = log.scene_at(frame, ego_id=ego_id, ego=ego)
        else:
            moved = idm_step(scene, desired, cfg.dt, cfg.idm)
            scene = replace(scene.with_others(moved, t=frame), ego=ego)
        scenes.append(scene)
        actions.append(tuple(a))
        costs.append(_realized_cost(scene, cfg))
        if frames_dir is not None:
            write_ppm(rasterize(scene, cfg.planner.geom), frames_dir / f"frame_{step + 1:05d}.ppm")
        crash = crash_check(scene)
        if crash is Crash.vehicle:
            outcome = Outcome.crash_vehicle
            break
        if crash is Crash.offroad:
            outcome = Outcome.crash_offroad
            break
    if outcome is None:
        exhausted = cfg.mode is Mode.replay and frame >= log.last_frame
        outcome = Outcome.completed if (cfg.mode is Mode.interactive or exhausted) else Outcome.timeout

    c = np.array(costs, dtype=float).reshape(-1, 5)
    breakdown = CostBreakdown(c[:, 0], c[:, 1], c[:, 2], c[:, 3], c[:, 4], weights=cfg.weights)
    return EpisodeResult(outcome, len(actions), step_ms, breakdown, scenes,
                         np.array(actions, dtype=float).reshape(-1, 2))


def episode_log(result: EpisodeResult, dt: float, ego_id: int = 0) -> TrajectoryLog:
    """State trace of an episode as a trajectory log (ego included)."""
    rows: dict[int, list] = {}
    dims = {}
    start = {}
    s0 = result.scenes[0].t
    for scene in result.scenes:
        items = [(ego_id, scene.ego, scene.ego_dims)] + [(o.id, o.state, o.dims) for o in scene.others]
        for cid, st, d in items:
            start.setdefault(cid, scene.t)
            # tracks must be contiguous; a car that left and came back keeps its first stretch
            if scene.t - start[cid] != len(rows.get(cid, [])):
                continue
            rows.setdefault(cid, []).append([float(v) for v in st])
            dims[cid] = d
    tracks = {cid: CarTrack(cid, start[cid] - s0, np.array(r), dims[cid]) for cid, r in rows.items()}
    return TrajectoryLog(dt, tracks, result.scenes[0].lanes)


# ---------------------------------------------------------------- metrics

def crash_rate(results_by_seed: Sequence[Sequence[EpisodeResult]] | Sequence[float]) -> tuple[float, float]:
    """Mean and sample std (in %) of the per-seed crash percentage.

    Accepts per-seed lists of results or per-seed rates already in %.
    """
    if len(results_by_seed) < 2:
        raise ValueError(f"crash_rate needs at least 2 seeds, got {len(results_by_seed)}")
    rates = []
    for item in results_by_seed:
        if isinstance(item, (int, float)):
            rates.append(float(item))
            continue
        if not item:
            raise ValueError("a seed has no episodes")
        rates.append(100.0 * sum(r.crashed for r in item) / len(item))
    return statistics.fmean(rates), statistics.stdev(rates)


@dataclass(frozen=True)
class SeedVarianceReport:
    per_dim: tuple[float, ...]
    mean: float
    mu: tuple[float, ...]
    sigma: tuple[float, ...]
    n_policies: int
    n_probes: int

    def to_dict(self) -> dict:
        return {"per_dim": list(self.per_dim), "mean": self.mean, "mu": list(self.mu),
                "sigma": list(self.sigma), "n_policies": self.n_policies, "n_probes": self.n_probes}


def seed_variance_from_outputs(outputs, clamp: float = 3.0) -> SeedVarianceReport:
    """``outputs`` is ``(seeds, probes, dims)`` of raw normalized policy outputs."""
    out = np.asarray(outputs, dtype=float)
    if out.ndim != 3 or out.shape[0] < 2:
        raise ValueError(f"need outputs of shape (>=2 seeds, probes, dims), got {out.shape}")
    if out.shape[1] < 1:
        raise ValueError("probe set is empty")
    out = np.clip(out, -clamp, clamp)
    mu = out.mean(axis=(0, 1))
    sigma = out.std(axis=(0, 1))
    safe = np.where(sigma > 0, sigma, 1.0)
    z = (out - mu) / safe
    per_example = z.std(axis=0, ddof=1)       # (probes, dims)
    per_dim = per_example.mean(axis=0)
    return SeedVarianceReport(tuple(per_dim.tolist()), float(per_dim.mean()), tuple(mu.tolist()),
                              tuple(sigma.tolist()), out.shape[0], out.shape[1])


def seed_variance(policies: Sequence[PolicyParams], probes: Sequence[Scene], clamp: float = 3.0) -> SeedVarianceReport:
    """Spread of the policies' outputs across seeds on a shared probe set.

    Outputs are clamped, normalized with the mean and std pooled over seeds
    and probes, and the across-seed std is averaged over probes.
    """
    if len(policies) < 2:
        raise ValueError(f"seed_variance needs at least 2 policies, got {len(policies)}")
    if not probes:
        raise ValueError("probe set is empty")
    outs = np.array([[policy_output(p, sc) for sc in probes] for p in policies])
    return seed_variance_from_outputs(outs, clamp)


@dataclass(frozen=True)
class BenchRow:
    method: str
    mean_ms: float
    std_ms: float
    median_ms: float
    n: int
    env_advances: int | None = None


def bench_planner(methods: Mapping[str, Controller], log: TrajectoryLog, steps: int = 20,
                  warmup: int = 3, ego_id: int = 0) -> list[BenchRow]:
    """Wall time per simulation step for each controller, open loop on the
    log's frames. The first ``warmup`` calls are excluded."""
    if warmup < 1:
        raise ValueError("warmup must be >= 1")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    n_frames = log.n_frames
    rows = []
    for name, ctrl in methods.items():
        ms = []
        for i in range(warmup + steps):
            scene = log.scene_at(log.first_frame + i % n_frames, ego_id=ego_id)
            t0 = time.perf_counter()
            ctrl(scene)
            dt = (time.perf_counter() - t0) * 1e3
            if i >= warmup:
                ms.append(dt)
        rows.append(BenchRow(name, statistics.fmean(ms), statistics.stdev(ms) if len(ms) > 1 else 0.0,
                             statistics.median(ms), len(ms)))
    return rows


# ---------------------------------------------------------------- workers

def _call(job):
    fn, args = job
    return fn(*args)


def run_jobs(fn, arg_tuples: Sequence[tuple], workers: int = 1) -> list:
    """Map ``fn`` over independent jobs, in order. ``fn`` must be picklable."""
    if workers <= 1 or len(arg_tuples) <= 1:
        return [fn(*a) for a in arg_tuples]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_call, [(fn, a) for a in arg_tuples]))


# ---------------------------------------------------------------- reports

def _clean(obj):
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else repr(obj)
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, Enum):
        return obj.value
    if isinstance(obj, np.generic):
        return _clean(obj.item())
    return obj


def write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n")


def format_table(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    cells = [[str(h) for h in header]] + [[str(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def crash_table(rates: Mapping[str, tuple[float, float]]) -> str:
    return format_table(["method", "crash rate (%)"],
                        [[m, f"{mu:.1f} ± {sd:.1f}"] for m, (mu, sd) in rates.items()])


def bench_table(rows: Sequence[BenchRow]) -> str:
    return format_table(["method", "ms/step", "median", "n"],
                        [[r.method, f"{r.mean_ms:.2f} ± {r.std_ms:.2f}", f"{r.median_ms:.2f}", r.n] for r in rows])


def write_episode(result: EpisodeResult, out_dir, dt: float, name: str = "episode") -> None:
    """Summary JSON, per-step cost CSV and state-trace CSV; timings go to a
    separate file so the others stay byte-reproducible."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = result.summary()
    summary["actions"] = result.actions.tolist()
    write_json(summary, out / f"{name}.json")
    write_breakdown_csv(result.costs, out / f"{name}_costs.csv")
    save_log(episode_log(result, dt), out / f"{name}_trace.csv")
