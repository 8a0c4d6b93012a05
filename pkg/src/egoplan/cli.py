"""Command-line entry point.

Every command writes its outputs plus the fully resolved config into a
fresh run directory ``<out>/<timestamp>_seed<seed>``. Wall-clock numbers go
to ``timing.json`` so every other report is reproducible byte for byte.

Exit codes: 0 ok, 1 config or input error, 2 runtime or numeric error,
3 test-suite failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import replace
from datetime import datetime
from pathlib import Path

import numpy as np

from . import __version__
from .config import PRESETS, ConfigError, RunConfig, dump_config, load_config
from .cost import trajectory_cost, write_breakdown_csv
from .envmodel import EnvPredictor, PredictorKind
from .gradcheck import SUITES, run_gradcheck
from .kinematics import DegenerateDirectionError
from .planner import (PlanningError, PolicyParams, TrainingDivergedError, plan, train_policy,
                      write_trace_csv)
from .raster import InvalidDimsError, RasterFrame, to_anchor, write_ppm
from .sim import (ControllerKind, bench_planner, bench_table, crash_rate, crash_table,
                  format_table, make_controller, run_episode, run_jobs, seed_variance, write_episode,
                  write_json)
from .world import (InfeasibleGeometryError, LogParseError, TrajectoryLog, load_log, make_stress_scenario,
                    make_traffic_scenario, save_log)

log = logging.getLogger("egoplan")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_SUITE = 0, 1, 2, 3


class PreconditionError(ValueError):
    pass


# ---------------------------------------------------------------- helpers

def make_run_dir(out, seed: int) -> Path:
    root = Path(out)
    stamp = datetime.now().strftime("%Y%m%d-%H%M%S")
    base = root / f"{stamp}_seed{seed}"
    path, n = base, 1
    while path.exists():
        path = base.with_name(f"{base.name}-{n}")
        n += 1
    path.mkdir(parents=True)
    return path


def _job_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def scenario_log(cfg: RunConfig, seed: int, index: int = 0) -> TrajectoryLog:
    sc = cfg.scenario
    if sc.kind == "stress":
        return make_stress_scenario(cfg.stress_config())
    return make_traffic_scenario(_job_seed(seed, index), density=sc.density, lane_count=sc.lane_count,
                                 duration=sc.duration, dt=cfg.planner.dt)


def training_scenes(cfg: RunConfig, seed: int, count: int):
    """Scenes drawn from generated traffic, one random frame per log."""
    rng = np.random.default_rng([seed, 7])
    scenes = []
    for i in range(count):
        lg = make_traffic_scenario(_job_seed(seed, 10_000 + i), density=cfg.scenario.density,
                                   lane_count=cfg.scenario.lane_count, duration=5.0, dt=cfg.planner.dt)
        scenes.append(lg.scene_at(int(rng.integers(lg.first_frame, lg.last_frame + 1))))
    return scenes


def get_policy(cfg: RunConfig, seed: int) -> tuple[PolicyParams, list[float]]:
    if cfg.policy.params_file:
        return load_policy(cfg.policy.params_file), []
    init = PolicyParams.random(seed, cfg.policy.init_scale)
    scenes = training_scenes(cfg, seed, cfg.policy.train_scenes)
    return train_policy(scenes, init, cfg.policy_train_config(), seed=seed)


def load_policy(path) -> PolicyParams:
    path = Path(path)
    try:
        return PolicyParams.from_dict(json.loads(path.read_text()))
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise PreconditionError(f"{path}: cannot read policy: {exc}") from None


def _episode_job(cfg_data: dict, seed: int, index: int, policy_weights):
    cfg = RunConfig.model_validate(cfg_data)
    policy = PolicyParams(np.array(policy_weights)) if policy_weights is not None else None
    result = run_episode(scenario_log(cfg, seed, index), cfg.episode_config(seed, policy=policy))
    out = result.summary()
    out.update(seed=seed, episode=index, crashed=result.crashed)
    return out


# --------------------------------------------------------------- commands

def cmd_gradcheck(cfg: RunConfig, run: Path, args) -> int:
    flip = args.flip or cfg.gradcheck.flip
    if flip is not None and flip not in SUITES:
        raise ConfigError(f"gradcheck.flip: unknown suite {flip!r}")
    results = run_gradcheck(cfg.seed, cfg.gradcheck.samples, cfg.gradcheck.h, flip,
                            dt=cfg.planner.dt, horizon=cfg.planner.horizon, weights=cfg.cost_weights(),
                            mask=cfg.mask_config(), geom=cfg.geom())
    write_json([r.to_dict() for r in results], run / "gradcheck.json")
    table = format_table(["suite", "samples", "skipped", "worst rel err", "tol", "result"],
                         [[r.name, r.samples, r.skipped, f"{r.worst:.2e}", f"{r.tolerance:.0e}",
                           "pass" if r.passed else "FAIL"] for r in results])
    (run / "gradcheck.txt").write_text(table)
    print(table, end="")
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"gradient check failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_SUITE
    return EXIT_OK


def cmd_plan(cfg: RunConfig, run: Path, args) -> int:
    if args.scene is None:
        lg = scenario_log(cfg, cfg.seed)
    else:
        lg = load_log(args.scene)
    frame = lg.first_frame if args.frame is None else args.frame
    if not lg.first_frame <= frame <= lg.last_frame:
        raise PreconditionError(f"frame {frame} outside log range [{lg.first_frame}, {lg.last_frame}]")
    scene = lg.scene_at(frame)
    pcfg = cfg.episode_config().planner
    use_log = lg if pcfg.predictor is PredictorKind.replay else None
    result = plan(scene, cfg=pcfg, predictor=EnvPredictor(pcfg.predictor, pcfg.reactive, log=use_log, geom=pcfg.geom))
    write_trace_csv(result, run / "trace.csv")
    with open(run / "plan.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "accel", "turn", "x", "y", "ux", "uy", "s"])
        for k, (a, st) in enumerate(zip(result.actions.tolist(), result.states.tolist())):
            w.writerow([k + 1] + [repr(float(v)) for v in a + st])
    tc = trajectory_cost(result.prediction.stacked, to_anchor(result.states, result.prediction.anchor),
                         result.actions, scene.ego_dims, pcfg.weights, pcfg.gamma, pcfg.mask, pcfg.geom)
    write_breakdown_csv(tc.breakdown, run / "costs.csv")
    write_json({"frame": frame, "first_action": list(result.first_action), "J_initial": result.J_trace[0],
                "J_final": result.J_trace[-1], "iterations": len(result.grad_norms),
                "env_advances": result.env_advances}, run / "plan.json")
    write_json({"plan_ms": result.wall_time * 1e3}, run / "timing.json")
    if args.frames:
        pred = result.prediction
        for k in range(pred.horizon):
            write_ppm(RasterFrame(pred.lanes[k], pred.cars[k], pred.offroad[k], pred.anchor),
                      run / f"pred_{k + 1:03d}.ppm")
    print(f"first action: accel={result.first_action.accel:.4f} turn={result.first_action.turn:.4f}; "
          f"J {result.J_trace[0]:.6g} -> {result.J_trace[-1]:.6g}")
    return EXIT_OK


def cmd_simulate(cfg: RunConfig, run: Path, args) -> int:
    ep = cfg.episode
    if ep.seeds < 2:
        raise PreconditionError("episode.seeds must be >= 2 to report a crash rate")
    seeds = [cfg.seed + i for i in range(ep.seeds)]
    policies = {}
    if ep.controller is ControllerKind.policy:
        for s in seeds:
            params, curve = get_policy(cfg, s)
            policies[s] = params.weights.tolist()
            write_json({"seed": s, "loss_curve": curve, **params.to_dict()}, run / f"policy_seed{s}.json")
    data = cfg.model_dump(mode="json")
    jobs = [(data, s, i, policies.get(s)) for s in seeds for i in range(ep.episodes)]
    summaries = run_jobs(_episode_job, jobs, cfg.workers)
    by_seed = [[r for r in summaries if r["seed"] == s] for s in seeds]
    rates = [100.0 * sum(r["crashed"] for r in rs) / len(rs) for rs in by_seed]
    mean, std = crash_rate(rates)
    write_json({"method": ep.controller.value, "mode": ep.mode.value, "crash_rate_mean": mean,
                "crash_rate_std": std, "per_seed": dict(zip(map(str, seeds), rates)), "episodes": summaries},
               run / "results.json")
    table = crash_table({ep.controller.value: (mean, std)})
    (run / "results.txt").write_text(table)
    if args.frames:
        policy = PolicyParams(np.array(policies[seeds[0]])) if policies else None
        res = run_episode(scenario_log(cfg, seeds[0], 0), cfg.episode_config(seeds[0], policy=policy),
                          frames_dir=run / "frames")
        write_episode(res, run, cfg.planner.dt, name="episode0")
    print(table, end="")
    return EXIT_OK


def cmd_stress(cfg: RunConfig, run: Path, args) -> int:
    lg = make_stress_scenario(cfg.stress_config())
    save_log(lg, run / "scenario.csv")
    policy = None
    if cfg.episode.controller is ControllerKind.policy:
        policy, _ = get_policy(cfg, cfg.seed)
    rows, report, timing = [], {}, {}
    for name, ctrl in (("zero", ControllerKind.zero), (cfg.episode.controller.value, cfg.episode.controller)):
        ecfg = cfg.episode_config(controller=ctrl, policy=policy)
        # the scenario is finite, so let it run to its end
        ecfg = replace(ecfg, max_steps=max(ecfg.max_steps, lg.n_frames))
        res = run_episode(lg, ecfg, frames_dir=(run / f"frames_{name}") if args.frames else None)
        write_episode(res, run, cfg.planner.dt, name=f"stress_{name}")
        report[name] = res.summary()
        timing[name] = {"step_ms": res.step_ms}
        rows.append([name, res.outcome.value, res.steps])
    write_json(report, run / "stress.json")
    write_json(timing, run / "timing.json")
    table = format_table(["method", "outcome", "steps"], rows)
    (run / "stress.txt").write_text(table)
    print(table, end="")
    return EXIT_OK


def cmd_bench(cfg: RunConfig, run: Path, args) -> int:
    lg = scenario_log(cfg, cfg.seed)
    methods, advances = {}, {}
    for m in cfg.bench.methods:
        kind = ControllerKind(m)
        policy = PolicyParams.random(cfg.seed, cfg.policy.init_scale) if kind is ControllerKind.policy else None
        ecfg = cfg.episode_config(controller=kind, policy=policy)
        methods[m] = make_controller(ecfg, lg)
        if kind in (ControllerKind.mpc_decoupled, ControllerKind.mpc_coupled):
            advances[m] = plan(lg.scene_at(lg.first_frame), cfg=ecfg.planner).env_advances
    rows = bench_planner(methods, lg, cfg.bench.steps, cfg.bench.warmup)
    write_json({"methods": list(cfg.bench.methods), "env_advances": advances,
                "horizon": cfg.planner.horizon, "iterations": cfg.planner.iterations}, run / "bench.json")
    write_json([r.__dict__ for r in rows], run / "timing.json")
    table = bench_table(rows)
    (run / "bench.txt").write_text(table)
    print(table, end="")
    return EXIT_OK


def cmd_variance(cfg: RunConfig, run: Path, args) -> int:
    files = cfg.variance.policy_files
    if len(files) == 1:
        raise PreconditionError("variance needs at least 2 policy files, got 1")
    if files:
        policies = [load_policy(f) for f in files]
    else:
        if cfg.episode.seeds < 2:
            raise PreconditionError("episode.seeds must be >= 2 to train policies for variance")
        policies = [get_policy(cfg, cfg.seed + i)[0] for i in range(cfg.episode.seeds)]
    probes = training_scenes(cfg, cfg.seed + 1_000_003, cfg.variance.probes)
    report = seed_variance(policies, probes, cfg.variance.clamp)
    write_json(report.to_dict(), run / "variance.json")
    table = format_table(["dimension", "normalized std"],
                         [["accel", f"{report.per_dim[0]:.4f}"], ["turn", f"{report.per_dim[1]:.4f}"],
                          ["average", f"{report.mean:.4f}"]])
    (run / "variance.txt").write_text(table)
    print(table, end="")
    return EXIT_OK


def cmd_scenario(cfg: RunConfig, run: Path, args) -> int:
    lg = scenario_log(cfg, cfg.seed)
    save_log(lg, run / "scenario.csv")
    print(run / "scenario.csv")
    return EXIT_OK


COMMANDS = {
    "gradcheck": (cmd_gradcheck, "run the finite-difference gradient suites"),
    "plan": (cmd_plan, "plan once on a scene and export the trace"),
    "simulate": (cmd_simulate, "run episodes over seeds and report the crash rate"),
    "stress": (cmd_stress, "sudden-braking scenario against the zero-action baseline"),
    "bench": (cmd_bench, "time one planning step per method"),
    "variance": (cmd_variance, "spread of policy outputs across training seeds"),
    "scenario": (cmd_scenario, "generate and save a scenario log"),
}
SERIAL = {"bench"}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="egoplan", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name, (_, help_) in COMMANDS.items():
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", type=Path, help="YAML run config")
        s.add_argument("--preset", choices=PRESETS, help="start from a shipped preset")
        s.add_argument("--seed", type=int, help="overrides the config seed")
        s.add_argument("--out", type=Path, default=Path("runs"), help="parent directory for run dirs")
        s.add_argument("--workers", type=int, help="worker processes for episode jobs")
        s.add_argument("--frames", action="store_true", help="dump PPM frames")
        s.add_argument("-v", "--verbose", action="store_true")
        if name == "plan":
            s.add_argument("--scene", type=Path, help="trajectory log CSV (default: generated scenario)")
            s.add_argument("--frame", type=int, help="log frame to plan from (default: first)")
        if name == "gradcheck":
            s.add_argument("--flip", choices=SUITES, help=argparse.SUPPRESS)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    fn, _ = COMMANDS[args.command]
    try:
        over = {}
        if args.seed is not None:
            over["seed"] = args.seed
        if args.workers is not None:
            over["workers"] = args.workers
        cfg = load_config(args.config, args.preset, over)
        if args.command in SERIAL:
            cfg = cfg.model_copy(update={"workers": 1})
        run = make_run_dir(args.out, cfg.seed)
        dump_config(cfg, run / "config.yaml")
        log.info("run directory %s", run)
        t0 = time.perf_counter()
        code = fn(cfg, run, args)
        log.info("%s finished in %.1f s", args.command, time.perf_counter() - t0)
        print(f"outputs: {run}", file=sys.stderr)
        return code
    except (ConfigError, PreconditionError, LogParseError, InfeasibleGeometryError, InvalidDimsError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (PlanningError, TrainingDivergedError, DegenerateDirectionError, FloatingPointError,
            ArithmeticError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
