"""Run configuration: one YAML file holds every tunable.

Values merge in this order: built-in defaults, an optional preset, the
config file, then environment overrides. An override is written as
``EGOPLAN_<SECTION>__<FIELD>=<yaml value>``, e.g.
``EGOPLAN_PLANNER__ITERATIONS=11``.
"""

from __future__ import annotations

import os
from importlib import resources
from pathlib import Path
from typing import Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .cost import CostWeights
from .envmodel import PredictorKind, ReactiveParams
from .planner import PlannerConfig, PolicyTrainConfig
from .raster import MaskConfig, RasterGeometry
from .sim import ControllerKind, EpisodeConfig, IDMParams, Mode
from .world import StressConfig

ENV_PREFIX = "EGOPLAN_"
PRESETS = ("cfm-pl-proxy", "cfm-km-pl", "cfm-km-mpc", "dfm-km-mpc")


class ConfigError(ValueError):
    pass


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class GeometrySection(_Section):
    height_cells: int = Field(117, ge=1)
    width_cells: int = Field(24, ge=1)
    height_m: float = Field(72.2, gt=0)
    width_m: float = Field(14.8, gt=0)


class MaskSection(_Section):
    exponent: float = Field(2.0, gt=0)
    lane_pad: float = Field(3.7, gt=0)
    speed_floor: float = Field(10.0, ge=0)


class WeightsSection(_Section):
    proximity: float = Field(91.2, ge=0)
    lane: float = Field(3.06, ge=0)
    offroad: float = Field(2.88, ge=0)
    jerk: float = Field(0.1, ge=0)
    destination: float = Field(0.001, ge=0)


class ReactiveSection(_Section):
    gain: float = Field(0.5, ge=0)
    scale: float = Field(5.0, gt=0)
    brake_cap: float = Field(6.0, gt=0)


class PlannerSection(_Section):
    horizon: int = Field(30, ge=1)
    iterations: int = Field(27, ge=1)
    learning_rate: float = Field(0.48, gt=0)
    gamma: float = Field(0.99, gt=0, le=1)
    dt: float = Field(0.1, gt=0)
    predictor: PredictorKind = PredictorKind.constant_velocity
    accel_bounds: tuple[float, float] = (-10.0, 10.0)
    turn_bounds: tuple[float, float] = (-1.0, 1.0)
    action_scale: tuple[float, float] = (0.1, 0.02)

    @field_validator("accel_bounds", "turn_bounds")
    @classmethod
    def _ordered(cls, v):
        if not v[0] <= v[1]:
            raise ValueError(f"lower bound {v[0]} exceeds upper bound {v[1]}")
        return v

    @field_validator("action_scale")
    @classmethod
    def _positive(cls, v):
        if min(v) <= 0:
            raise ValueError("action_scale entries must be positive")
        return v


class PolicySection(_Section):
    params_file: str | None = None     # load instead of training
    train_scenes: int = Field(32, ge=1)
    epochs: int = Field(20, ge=0)
    learning_rate: float = Field(1e-5, ge=0)
    horizon: int = Field(30, ge=1)
    init_scale: float = Field(0.01, ge=0)


class EpisodeSection(_Section):
    mode: Mode = Mode.replay
    controller: ControllerKind = ControllerKind.mpc_decoupled
    max_steps: int = Field(300, ge=1)
    episodes: int = Field(100, ge=1)
    seeds: int = Field(3, ge=1)


class IDMSection(_Section):
    headway: float = Field(1.5, gt=0)
    min_gap: float = Field(2.0, ge=0)
    max_accel: float = Field(1.5, gt=0)
    comfort_decel: float = Field(2.0, gt=0)
    max_brake: float = Field(9.0, gt=0)


class StressSection(_Section):
    lead_gap: float = 30.0
    lead_decel: float = -6.0
    rear_gap: float = 20.0
    speed: float = Field(20.0, gt=0)
    onset: float = Field(1.0, ge=0)
    duration: float = Field(10.0, gt=0)
    lane_count: int = Field(3, ge=1)
    ego_lane: int = Field(1, ge=0)


class ScenarioSection(_Section):
    kind: Literal["stress", "traffic"] = "traffic"
    density: float = Field(0.5, gt=0, le=1)
    lane_count: int = Field(3, ge=1)
    duration: float = Field(30.0, gt=0)
    stress: StressSection = StressSection()


class BenchSection(_Section):
    steps: int = Field(20, ge=1)
    warmup: int = Field(3, ge=1)
    methods: tuple[str, ...] = ("policy", "mpc_decoupled", "mpc_coupled")

    @field_validator("methods")
    @classmethod
    def _known(cls, v):
        bad = [m for m in v if m not in {c.value for c in ControllerKind}]
        if bad:
            raise ValueError(f"unknown bench methods {bad}")
        return v


class VarianceSection(_Section):
    probes: int = Field(1000, ge=1)
    policy_files: tuple[str, ...] = ()   # empty: train one policy per seed
    clamp: float = Field(3.0, gt=0)


class GradcheckSection(_Section):
    samples: int = Field(100, ge=1)
    h: float = Field(1e-6, gt=0)
    flip: str | None = None   # test hook: negate one suite's gradient


class RunConfig(_Section):
    seed: int = Field(0, ge=0)
    workers: int = Field(1, ge=1)
    geometry: GeometrySection = GeometrySection()
    mask: MaskSection = MaskSection()
    weights: WeightsSection = WeightsSection()
    reactive: ReactiveSection = ReactiveSection()
    planner: PlannerSection = PlannerSection()
    policy: PolicySection = PolicySection()
    episode: EpisodeSection = EpisodeSection()
    idm: IDMSection = IDMSection()
    scenario: ScenarioSection = ScenarioSection()
    bench: BenchSection = BenchSection()
    variance: VarianceSection = VarianceSection()
    gradcheck: GradcheckSection = GradcheckSection()

    @model_validator(mode="after")
    def _consistent(self):
        coupled_ctrl = self.episode.controller is ControllerKind.mpc_coupled
        if coupled_ctrl != self.planner.predictor.coupled and self.episode.controller in (
                ControllerKind.mpc_coupled, ControllerKind.mpc_decoupled):
            raise ValueError(f"controller {self.episode.controller.value} does not match "
                             f"predictor {self.planner.predictor.value}")
        return self

    # ------------------------------------------------------------ builders

    def geom(self) -> RasterGeometry:
        return RasterGeometry(**self.geometry.model_dump())

    def mask_config(self) -> MaskConfig:
        return MaskConfig(**self.mask.model_dump())

    def cost_weights(self) -> CostWeights:
        return CostWeights(**self.weights.model_dump())

    def planner_config(self, predictor: PredictorKind | None = None) -> PlannerConfig:
        p = self.planner.model_dump()
        if predictor is not None:
            p["predictor"] = predictor
        return PlannerConfig(weights=self.cost_weights(), reactive=ReactiveParams(**self.reactive.model_dump()),
                             mask=self.mask_config(), geom=self.geom(), **p)

    def policy_train_config(self) -> PolicyTrainConfig:
        return PolicyTrainConfig(horizon=self.policy.horizon, learning_rate=self.policy.learning_rate,
                                 epochs=self.policy.epochs, gamma=self.planner.gamma, dt=self.planner.dt,
                                 weights=self.cost_weights(), mask=self.mask_config(), geom=self.geom(),
                                 accel_bounds=self.planner.accel_bounds, turn_bounds=self.planner.turn_bounds)

    def episode_config(self, seed: int | None = None, controller: ControllerKind | None = None,
                       policy=None) -> EpisodeConfig:
        ctrl = ControllerKind(controller or self.episode.controller)
        pred = None
        if ctrl is ControllerKind.mpc_coupled:
            pred = PredictorKind.coupled_reactive
        elif self.planner.predictor.coupled:
            pred = PredictorKind.constant_velocity
        return EpisodeConfig(mode=self.episode.mode, controller=ctrl, planner=self.planner_config(pred),
                             policy=policy, idm=IDMParams(**self.idm.model_dump()),
                             max_steps=self.episode.max_steps, dt=self.planner.dt,
                             seed=self.seed if seed is None else seed, weights=self.cost_weights())

    def stress_config(self) -> StressConfig:
        return StressConfig(dt=self.planner.dt, **self.scenario.stress.model_dump())


# ---------------------------------------------------------------- loading

def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def preset_path(name: str) -> Path:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    return Path(str(resources.files("egoplan") / "presets" / f"{name}.yaml"))


def _read_yaml(path) -> dict:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text())
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror or exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


def env_overrides(environ=None) -> dict:
    environ = os.environ if environ is None else environ
    out: dict = {}
    for key, raw in sorted(environ.items()):
        if not key.startswith(ENV_PREFIX):
            continue
        parts = [p.lower() for p in key[len(ENV_PREFIX):].split("__") if p]
        if not parts:
            continue
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError:
            value = raw
        node = out
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"{key}: conflicts with another override")
        node[parts[-1]] = value
    return out


def _format_errors(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        lines.append(f"{loc}: {err['msg']}")
    return "; ".join(lines)


def load_config(path=None, preset: str | None = None, overrides: dict | None = None,
                environ=None) -> RunConfig:
    data: dict = {}
    if preset is not None:
        data = _merge(data, _read_yaml(preset_path(preset)))
    if path is not None:
        data = _merge(data, _read_yaml(path))
    data = _merge(data, env_overrides(environ))
    if overrides:
        data = _merge(data, overrides)
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_format_errors(exc)) from None


def dump_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.model_dump(mode="json"), sort_keys=True))
