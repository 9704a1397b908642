"""Command-line entry point.

Subcommands::

    simulate   Monte Carlo noise sweeps -> metrics.csv, trials.csv
    init       one scene, every initializer side by side -> init.json
    optimize   refinement A/B on initializer output -> optimize.csv, optimize.json
    associate  scripted tracking scenarios -> associate.json
    pipeline   DetectionLog files end to end -> objects.json, metrics.csv
    selftest   oracle suites -> selftest.json

Shared flags (given after the subcommand): ``--seed``, ``--config``,
``--out``, ``--methods``, ``--jobs``.  The config file is JSON with optional
sections ``scene``, ``init``, ``optimizer``, ``assoc`` and ``pipeline``.

Exit codes: 0 success, 1 configuration error, 2 input log error, 3 any
other failure (including failed oracles).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, IngestionError, InitFailure
from .initialize import METHODS, InitConfig
from .logio import load_log, save_log
from .metrics import aggregate, metrics_csv, trials_csv
from .optimize import ObjectObservation, OptimizerConfig, optimize_quadric
from .pipeline import PipelineConfig, run_pipeline_many
from .sim import NOISE_TYPES, SceneConfig, evaluate, make_trial, run_sweep, trial_keys, trial_log

log = logging.getLogger("quadmap")

EXIT_OK, EXIT_CONFIG, EXIT_INGEST, EXIT_INTERNAL = 0, 1, 2, 3
CONFIG_SECTIONS = ("scene", "init", "optimizer", "assoc", "pipeline")


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass
class RunConfig:
    scene: SceneConfig
    init: InitConfig
    pipeline: PipelineConfig

    def to_dict(self) -> dict:
        p = self.pipeline
        return {
            "scene": self.scene.to_dict(),
            "init": self.init.to_dict(),
            "optimizer": p.optimizer.to_dict(),
            "assoc": p.assoc.to_dict(),
            "pipeline": {"refine": p.refine, "associate": p.associate, "min_views": p.min_views,
                         "edge_margin": p.edge_margin, "gt_match_distance": p.gt_match_distance,
                         "priors": p.priors},
        }


def load_config(path: str | None, seed: int | None) -> RunConfig:
    raw: dict = {}
    if path:
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold a JSON object")
        unknown = set(raw) - set(CONFIG_SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections {sorted(unknown)}; expected {CONFIG_SECTIONS}")
    try:
        scene = SceneConfig.from_dict(raw.get("scene", {}))
        if seed is not None:
            scene.master_seed = seed
        init = InitConfig.from_dict(raw.get("init", {}))
        pl = dict(raw.get("pipeline", {}))
        known = {"refine", "associate", "min_views", "edge_margin", "gt_match_distance", "priors"}
        if set(pl) - known:
            raise ConfigError(f"unknown pipeline keys {sorted(set(pl) - known)}")
        from .assoc import AssocConfig

        pipeline = PipelineConfig(
            init=init,
            optimizer=OptimizerConfig.from_dict(raw.get("optimizer", {})),
            assoc=AssocConfig.from_dict(raw.get("assoc", {})),
            **pl,
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return RunConfig(scene, init, pipeline)


def parse_methods(text: str | None) -> list[str]:
    if not text:
        return list(METHODS)
    methods = [m.strip() for m in text.split(",") if m.strip()]
    bad = [m for m in methods if m not in METHODS]
    if bad or not methods:
        raise ConfigError(f"unknown methods {bad}; choose from {list(METHODS)}")
    return methods


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    log.info("wrote %s", path)


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n"


def _pmap(fn, tasks, jobs: int):
    """Ordered map; parallel when ``jobs > 1``."""
    if jobs <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, tasks))


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_simulate(args, rc: RunConfig) -> int:
    methods = parse_methods(args.methods)
    types = args.noise_types.split(",") if args.noise_types else list(rc.scene.sweeps)
    for nt in types:
        if nt not in rc.scene.sweeps:
            raise ConfigError(f"noise type {nt!r} not in the configured sweeps {list(rc.scene.sweeps)}")
    results = run_sweep(rc.scene, methods, types, args.jobs, rc.init)
    out = Path(args.out)
    rows = aggregate(results)
    _write(out / "metrics.csv", metrics_csv(rows))
    _write(out / "trials.csv", trials_csv(results))
    _write(out / "config.json", _dump({**rc.to_dict(), "methods": methods, "noise_types": types}))
    if args.export_logs:
        for i, (nt, level, obj, seed) in enumerate(trial_keys(rc.scene, types)):
            trial = make_trial(rc.scene, nt, level, obj, seed)
            path = out / "logs" / f"trial_{i:06d}.json"
            path.parent.mkdir(parents=True, exist_ok=True)
            save_log(trial_log(trial, i), path)
    sys.stdout.write(metrics_csv(rows))
    return EXIT_OK


def _init_entry(e, gt_scene) -> dict:
    iou, et, ea = evaluate(e, gt_scene)
    return {"params": [float(v) for v in e.vector], "iou2d": iou, "e_trans": et, "e_axe": ea}


def cmd_init(args, rc: RunConfig) -> int:
    methods = parse_methods(args.methods)
    trial = make_trial(rc.scene, args.noise_type, args.level, args.object, args.trial_seed)
    report = {
        "noise_type": args.noise_type, "noise_level": args.level,
        "object_id": args.object, "seed": args.trial_seed,
        "gt": [float(v) for v in trial.scene.gt.vector], "methods": {},
    }
    for m in methods:
        try:
            report["methods"][m] = {"success": True, **_init_entry(METHODS[m](trial.observations(), rc.init), trial.scene)}
        except InitFailure as exc:
            report["methods"][m] = {"success": False, "error": str(exc)}
    text = _dump(report)
    _write(Path(args.out) / "init.json", text)
    sys.stdout.write(text)
    return EXIT_OK


OPT_HEADER = "object_id,seed,method,init_e_trans,init_e_axe,opt_e_trans,opt_e_axe,iterations,status"


def _ab_trial(task):
    rc, method, nt, level, obj, seed = task
    trial = make_trial(rc.scene, nt, level, obj, seed)
    try:
        e0 = METHODS[method](trial.observations(), rc.init)
    except InitFailure:
        return None
    obs = [ObjectObservation(v, b) for v, b in zip(trial.views, trial.bboxes)]
    p = rc.pipeline
    e1, rep = optimize_quadric(e0, obs, "car", p.prior_table, p.optimizer)
    _, t0, a0 = evaluate(e0, trial.scene)
    _, t1, a1 = evaluate(e1, trial.scene)
    return obj, seed, method, t0, a0, t1, a1, rep.iterations, rep.status


def cmd_optimize(args, rc: RunConfig) -> int:
    methods = parse_methods(args.methods or "tri+yaw")
    tasks = [
        (rc, m, args.noise_type, args.level, obj, seed)
        for obj in range(rc.scene.n_objects) for seed in range(rc.scene.n_seeds) for m in methods
    ]
    rows = [r for r in _pmap(_ab_trial, tasks, args.jobs) if r is not None]
    lines = [OPT_HEADER] + [
        ",".join([str(o), str(s), m] + [repr(float(x)) for x in (t0, a0, t1, a1)] + [str(it), st])
        for o, s, m, t0, a0, t1, a1, it, st in rows
    ]
    out = Path(args.out)
    _write(out / "optimize.csv", "\n".join(lines) + "\n")
    summary = {"noise_type": args.noise_type, "noise_level": args.level,
               "optimizer": rc.pipeline.optimizer.to_dict(), "priors": rc.pipeline.priors, "methods": {}}
    for m in methods:
        d = np.array([r[3:7] for r in rows if r[2] == m], dtype=float)
        if d.size == 0:
            summary["methods"][m] = {"n": 0}
            continue
        summary["methods"][m] = {
            "n": int(len(d)),
            "median_init_e_trans": float(np.median(d[:, 0])), "median_opt_e_trans": float(np.median(d[:, 2])),
            "median_init_e_axe": float(np.median(d[:, 1])), "median_opt_e_axe": float(np.median(d[:, 3])),
            "median_improvement_e_trans": float(np.median(d[:, 0] - d[:, 2])),
            "median_improvement_e_axe": float(np.median(d[:, 1] - d[:, 3])),
        }
    text = _dump(summary)
    _write(out / "optimize.json", text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_associate(args, rc: RunConfig) -> int:
    from .scenarios import SCENARIOS, run_scenario

    names = list(SCENARIOS) if args.scenario == "all" else [args.scenario]
    seed = rc.scene.master_seed
    reports = {}
    for name in names:
        dlog, result, rep = run_scenario(name, seed, args.bbox_noise, rc.pipeline)
        rep["objects"] = [o.to_dict() for o in result.objects]
        reports[name] = rep
        if args.export_logs:
            save_log(dlog, Path(args.out) / "logs" / f"{name}.json")
    text = _dump(reports)
    _write(Path(args.out) / "associate.json", text)
    for name, rep in reports.items():
        print(f"{name}: identity_preserved={rep['identity_preserved']} "
              f"dynamic_excluded={rep['dynamic_excluded']} mapped={rep['mapped_objects']}")
    return EXIT_OK


def collect_logs(paths) -> list[Path]:
    files: list[Path] = []
    for p in map(Path, paths):
        if p.is_dir():
            files.extend(sorted(p.glob("*.json")))
        elif p.is_file():
            files.append(p)
        else:
            raise IngestionError(f"no such log file or directory: {p}")
    if not files:
        raise IngestionError("no detection logs found")
    return files


def cmd_pipeline(args, rc: RunConfig) -> int:
    methods = parse_methods(args.methods)
    cfg = rc.pipeline
    if args.refine:
        cfg.refine = True
    if args.no_associate:
        cfg.associate = False
    files = collect_logs(args.log)
    logs = [load_log(f) for f in files]
    chunks = _pmap(_pipeline_chunk, [(d, methods, cfg) for d in logs], args.jobs)
    results = [r for res, _ in chunks for r in res]
    maps = []
    for f, (_, runs) in zip(files, chunks):
        for run in runs:
            maps.append({"log": f.name, "method": run.method,
                         "objects": [o.to_dict() for o in run.objects],
                         "track_gt": {str(k): v for k, v in sorted(run.track_gt.items())}})
    out = Path(args.out)
    _write(out / "objects.json", _dump(maps))
    if results:
        rows = aggregate(results)
        _write(out / "metrics.csv", metrics_csv(rows))
        _write(out / "trials.csv", trials_csv(results))
        sys.stdout.write(metrics_csv(rows))
    return EXIT_OK


def _pipeline_chunk(task):
    dlog, methods, cfg = task
    return run_pipeline_many([dlog], methods, cfg)


def cmd_selftest(args, rc: RunConfig) -> int:
    from .selftest import SUITES, run_all

    names = args.suites.split(",") if args.suites else list(SUITES)
    bad = [n for n in names if n not in SUITES]
    if bad:
        raise ConfigError(f"unknown suites {bad}; choose from {list(SUITES)}")
    seed = rc.scene.master_seed
    results = run_all(names, seed)
    _write(Path(args.out) / "selftest.json", _dump([r.to_dict() for r in results]))
    for r in results:
        print(r.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_INTERNAL


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="master seed (default: config or 0)")
    common.add_argument("--config", help="JSON config with scene/init/optimizer/assoc/pipeline sections")
    common.add_argument("--out", default="out", help="output directory (default: out)")
    common.add_argument("--methods", help=f"comma-separated subset of {','.join(METHODS)}")
    common.add_argument("--jobs", type=int, default=1, help="worker processes (default: 1)")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="quadmap", description="Ellipsoid landmarks from multi-view boxes.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="noise sweeps over synthetic arc scenes")
    p.add_argument("--noise-types", help=f"comma-separated subset of {','.join(NOISE_TYPES)}")
    p.add_argument("--export-logs", action="store_true", help="also write every trial as a DetectionLog")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("init", parents=[common], help="compare initializers on one scene")
    p.add_argument("--noise-type", choices=NOISE_TYPES, default="bbox")
    p.add_argument("--level", type=float, default=0.0)
    p.add_argument("--object", type=int, default=0)
    p.add_argument("--trial-seed", type=int, default=0)
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("optimize", parents=[common], help="refinement A/B over a noise level")
    p.add_argument("--noise-type", choices=NOISE_TYPES, default="bbox")
    p.add_argument("--level", type=float, default=0.04)
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("associate", parents=[common], help="scripted tracking scenarios")
    p.add_argument("--scenario", choices=("crossing", "dynamic", "all"), default="all")
    p.add_argument("--bbox-noise", type=float, default=0.01)
    p.add_argument("--export-logs", action="store_true")
    p.set_defaults(func=cmd_associate)

    p = sub.add_parser("pipeline", parents=[common], help="run DetectionLog files end to end")
    p.add_argument("--log", nargs="+", required=True, help="log files or directories of *.json logs")
    p.add_argument("--refine", action="store_true", help="refine each initialization")
    p.add_argument("--no-associate", action="store_true", help="group detections by logged object_id")
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("selftest", parents=[common], help="run the oracle suites")
    p.add_argument("--suites", help="comma-separated suite names (default: all)")
    p.set_defaults(func=cmd_selftest)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        rc = load_config(args.config, args.seed)
        return args.func(args, rc)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except IngestionError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INGEST
    except Exception as exc:  # noqa: BLE001 - report, do not crash with a traceback
        log.debug("internal failure", exc_info=True)
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
