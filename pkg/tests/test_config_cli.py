from __future__ import annotations

import json
from pathlib import Path

import pytest
import yaml

from egoplan import cli
from egoplan.config import PRESETS, ConfigError, RunConfig, env_overrides, load_config
from egoplan.envmodel import PredictorKind
from egoplan.sim import ControllerKind
from egoplan.world import make_stress_scenario, save_log

SMALL = {
    "episode": {"episodes": 2, "seeds": 2, "max_steps": 20},
    "scenario": {"duration": 3.0},
    "planner": {"horizon": 10, "iterations": 4},
    "policy": {"train_scenes": 3, "epochs": 2, "horizon": 10},
    "variance": {"probes": 20},
    "bench": {"steps": 3},
    "gradcheck": {"samples": 5},
}


@pytest.fixture
def small_cfg(tmp_path):
    path = tmp_path / "small.yaml"
    path.write_text(yaml.safe_dump(SMALL))
    return path


def _run(args, out):
    return cli.main([*args, "--out", str(out)])


def _only_run(out: Path) -> Path:
    runs = [p for p in out.iterdir() if p.is_dir()]
    assert len(runs) == 1
    return runs[0]


# ---------------------------------------------------------------- config

def test_defaults():
    cfg = RunConfig()
    assert cfg.planner.horizon == 30 and cfg.planner.iterations == 27 and cfg.planner.learning_rate == 0.48
    assert cfg.weights.proximity == 91.2 and cfg.planner.gamma == 0.99
    assert cfg.geometry.height_cells == 117 and cfg.geometry.width_cells == 24


def test_unknown_key_rejected(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("planner:\n  bogus: 1\n")
    with pytest.raises(ConfigError, match=r"planner\.bogus"):
        load_config(p, environ={})
    p.write_text("nonsense: 1\n")
    with pytest.raises(ConfigError, match="nonsense"):
        load_config(p, environ={})


def test_bad_value_reports_field_path(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("planner:\n  horizon: 0\n")
    with pytest.raises(ConfigError, match=r"planner\.horizon"):
        load_config(p, environ={})
    p.write_text("planner:\n  accel_bounds: [3, -3]\n")
    with pytest.raises(ConfigError, match="accel_bounds"):
        load_config(p, environ={})


def test_missing_and_malformed_files(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.yaml", environ={})
    p = tmp_path / "bad.yaml"
    p.write_text("planner: [1, 2\n")
    with pytest.raises(ConfigError, match="invalid YAML"):
        load_config(p, environ={})
    p.write_text("- 1\n- 2\n")
    with pytest.raises(ConfigError, match="mapping"):
        load_config(p, environ={})


def test_env_override_precedence(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("planner:\n  iterations: 5\n")
    env = {"EGOPLAN_PLANNER__ITERATIONS": "11", "EGOPLAN_WEIGHTS__LANE": "0.5", "OTHER": "x"}
    cfg = load_config(p, environ=env)
    assert cfg.planner.iterations == 11 and cfg.weights.lane == 0.5
    assert env_overrides({"EGOPLAN_SEED": "4"}) == {"seed": 4}
    assert load_config(p, environ=env, overrides={"planner": {"iterations": 2}}).planner.iterations == 2


@pytest.mark.parametrize("name", PRESETS)
def test_presets_load(name):
    cfg = load_config(preset=name, environ={})
    if name == "cfm-km-mpc":
        assert (cfg.planner.horizon, cfg.planner.iterations, cfg.planner.learning_rate) == (20, 11, 0.31)
        assert cfg.planner.predictor is PredictorKind.coupled_reactive
        assert cfg.weights.lane == 0.32
    if name == "dfm-km-mpc":
        assert cfg.episode.controller is ControllerKind.mpc_decoupled
        assert cfg.weights.proximity == 91.2
    if name == "cfm-pl-proxy":
        assert cfg.weights.offroad == 0 and cfg.episode.controller is ControllerKind.policy
    if name == "cfm-km-pl":
        assert cfg.weights.offroad == 0.32 and cfg.episode.controller is ControllerKind.policy


def test_unknown_preset():
    with pytest.raises(ConfigError, match="unknown preset"):
        load_config(preset="nope", environ={})


def test_controller_predictor_consistency():
    with pytest.raises(ConfigError, match="does not match"):
        load_config(overrides={"episode": {"controller": "mpc_coupled"},
                               "planner": {"predictor": "constant_velocity"}}, environ={})


def test_builders_roundtrip():
    cfg = load_config(preset="cfm-km-mpc", environ={})
    pc = cfg.planner_config()
    assert pc.horizon == 20 and pc.weights.lane == 0.32
    ep = cfg.episode_config(seed=3)
    assert ep.seed == 3 and ep.planner.predictor.coupled


# ---------------------------------------------------------------- cli

def test_scenario_writes_config(tmp_path, small_cfg):
    assert _run(["scenario", "--config", str(small_cfg), "--seed", "5"], tmp_path) == 0
    run = _only_run(tmp_path)
    assert run.name.endswith("_seed5")
    resolved = yaml.safe_load((run / "config.yaml").read_text())
    assert resolved["seed"] == 5 and resolved["planner"]["horizon"] == 10
    # the resolved config reproduces itself
    assert load_config(run / "config.yaml", environ={}) == load_config(small_cfg, overrides={"seed": 5}, environ={})


def test_run_dir_collision(tmp_path):
    a = cli.make_run_dir(tmp_path, 1)
    b = cli.make_run_dir(tmp_path, 1)
    assert a != b and b.exists()


def test_config_error_exit_code(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("planner: {bogus: 1}\n")
    assert _run(["scenario", "--config", str(bad)], tmp_path / "o") == 1
    assert not (tmp_path / "o").exists()


def test_invalid_scene_file(tmp_path, small_cfg, capsys):
    scene = tmp_path / "scene.csv"
    scene.write_text("this is not a log\n")
    assert _run(["plan", "--config", str(small_cfg), "--scene", str(scene)], tmp_path / "o") == 1
    assert str(scene) in capsys.readouterr().err


def test_plan_outputs(tmp_path, small_cfg):
    scene = tmp_path / "stress.csv"
    save_log(make_stress_scenario(), scene)
    assert _run(["plan", "--config", str(small_cfg), "--scene", str(scene), "--frame", "5"], tmp_path / "o") == 0
    run = _only_run(tmp_path / "o")
    trace = (run / "trace.csv").read_text().splitlines()
    assert trace[0] == "iteration,J,grad_norm" and trace[1].startswith("0,")
    assert len(trace) == 4 + 2
    plan = json.loads((run / "plan.json").read_text())
    assert plan["frame"] == 5 and len(plan["first_action"]) == 2


def test_gradcheck_flip_names_component(tmp_path, small_cfg, capsys):
    code = _run(["gradcheck", "--config", str(small_cfg), "--flip", "masks"], tmp_path / "o")
    assert code == 3
    assert "masks" in capsys.readouterr().err
    report = json.loads((_only_run(tmp_path / "o") / "gradcheck.json").read_text())
    failed = [r["suite"] for r in report if not r["passed"]]
    assert failed == ["masks"]


def test_variance_needs_two_policies(tmp_path, small_cfg):
    pol = tmp_path / "p.json"
    pol.write_text(json.dumps({"weights": [[0.0] * 16, [0.0] * 16]}))
    cfg = tmp_path / "v.yaml"
    cfg.write_text(yaml.safe_dump({**SMALL, "variance": {"probes": 5, "policy_files": [str(pol)]}}))
    assert _run(["variance", "--config", str(cfg)], tmp_path / "o") == 1


def test_bench_one_row_per_method(tmp_path, small_cfg):
    assert _run(["bench", "--config", str(small_cfg)], tmp_path / "o") == 0
    run = _only_run(tmp_path / "o")
    rows = json.loads((run / "timing.json").read_text())
    assert [r["method"] for r in rows] == list(RunConfig().bench.methods)
    bench = json.loads((run / "bench.json").read_text())
    assert bench["env_advances"]["mpc_coupled"] == 4 * 10
    assert bench["env_advances"]["mpc_decoupled"] == 10


def _tree(run: Path) -> dict:
    return {p.relative_to(run).as_posix(): p.read_bytes() for p in sorted(run.rglob("*"))
            if p.is_file() and p.name != "timing.json"}


def test_runs_are_deterministic(tmp_path, small_cfg):
    for out in ("a", "b"):
        assert _run(["simulate", "--config", str(small_cfg), "--seed", "3", "--workers", "2"], tmp_path / out) == 0
        assert _run(["stress", "--config", str(small_cfg), "--seed", "3"], tmp_path / out) == 0
    runs = {out: sorted(p for p in (tmp_path / out).iterdir()) for out in ("a", "b")}
    for ra, rb in zip(runs["a"], runs["b"]):
        ta, tb = _tree(ra), _tree(rb)
        assert ta.keys() == tb.keys() and len(ta) > 2
        assert ta == tb
