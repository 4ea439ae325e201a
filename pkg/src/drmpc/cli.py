"""Command-line entry point.

Subcommands::

    drmpc run --preset mass_spring --seed 7 --out logs/
    drmpc montecarlo --preset inverted_pendulum --sweep epsilon=0.01,1,100
    drmpc dump-qp --preset mass_spring --out qp/
    drmpc validate --small

Exit codes: 0 success, 1 failed validation, 2 configuration error,
3 solver failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import qp as qpsolver
from .ambiguity import AmbiguitySet, DisturbanceStore, window_samples
from .closed_loop import SOLVER_ERROR
from .errors import ConfigError, InsufficientDataError, SolverError
from .experiments import ExperimentConfig, rank_report, run_monte_carlo, sample_disturbance
from .lti import build_stacked
from .reform import assemble

EXIT_OK, EXIT_FAILED, EXIT_CONFIG, EXIT_SOLVER = 0, 1, 2, 3


def _parse_sweep(text: str) -> dict:
    if "=" not in text:
        raise ConfigError(f"sweep must look like name=v1,v2,..., got {text!r}")
    key, _, vals = text.partition("=")
    try:
        values = [float(v) for v in vals.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"sweep values must be numbers, got {vals!r}") from None
    key = key.strip().replace("-", "_")
    if key != "epsilon":
        values = [int(v) if float(v).is_integer() else v for v in values]
    return {key: values}


def build_config(args) -> ExperimentConfig:
    data = {}
    if args.config:
        try:
            data = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read configuration {args.config}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("configuration must be a JSON object")
    if args.preset:
        if isinstance(data.get("system"), str) and data["system"] != args.preset:
            raise ConfigError(
                f"--preset {args.preset} conflicts with system {data['system']!r} in the config")
        data["system"] = args.preset
    data.setdefault("system", "mass_spring")
    overrides = {
        "seed": args.seed, "output_dir": args.out, "epsilon": getattr(args, "epsilon", None),
        "n_init": getattr(args, "n_init", None), "duration": getattr(args, "duration", None),
        "realizations": getattr(args, "realizations", None),
        "max_samples": getattr(args, "max_samples", None),
        "workers": getattr(args, "workers", None),
    }
    for k, v in overrides.items():
        if v is not None:
            data[k] = v
    if getattr(args, "timing", False):
        data["timing"] = True
    if getattr(args, "sweep", None):
        data["sweep"] = _parse_sweep(args.sweep)
    return ExperimentConfig.from_dict(data)


def _report_rank(cfg: ExperimentConfig) -> None:
    rep = rank_report(cfg)
    print(f"rank condition ({rep['preset']}): rank {rep['rank']} of required "
          f"{rep['required_rank']}, full-rank {'holds' if rep['full_rank_holds'] else 'fails'}, "
          f"relaxed {'holds' if rep['relaxed_holds'] else 'fails'}")


def _solver_failed(results) -> bool:
    bad = (qpsolver.MAX_ITER, SOLVER_ERROR)
    return any(s in bad for res in results for lg in res.logs for s in lg.statuses)


def cmd_run(args) -> int:
    cfg = build_config(args)
    if args.command == "run":
        cfg.realizations = 1
        cfg.sweep = None
    _report_rank(cfg)
    results = run_monte_carlo(cfg, write=True)
    for res in results:
        s = res.stats
        label = f"{res.key}={res.value:g}" if res.key else cfg.preset_name
        print(f"{label}: violation_rate={s.violation_rate:.4f} obj_mean={s.obj_mean:.6g} "
              f"infeasible={s.infeasible_count}")
    if cfg.output_dir:
        print(f"wrote {Path(cfg.output_dir) / 'summary.json'}")
    return EXIT_SOLVER if _solver_failed(results) else EXIT_OK


def cmd_dump(args) -> int:
    cfg = build_config(args)
    sys_ = cfg.build_system()
    loop = cfg.loop_config(sys_.n_w)
    rng = np.random.default_rng(cfg.seed)
    pre = sample_disturbance(cfg.disturbance_model(), rng, sys_.n_w, size=cfg.n_init * cfg.N)
    store = DisturbanceStore(sys_.n_w, pre)
    samples = window_samples(store, cfg.N, cfg.max_samples, loop.support, stride=loop.stride)
    amb = AmbiguitySet(samples, cfg.epsilon, loop.support, loop.ground_norm)
    x0 = np.asarray(cfg.x0, dtype=float)
    st = build_stacked(sys_, cfg.N, x0, xhat0=x0)
    prob = assemble(st, loop.weights, loop.moments, loop.bounds, amb, sys_.n_u, sys_.n_y)
    out = Path(cfg.output_dir or ".")
    out.mkdir(parents=True, exist_ok=True)
    header = {"preset": cfg.preset_name, "seed": cfg.seed, "epsilon": cfg.epsilon,
              "n_samples": amb.n_samples, "layout": prob.layout()}
    paths = qpsolver.dump_instance(prob.instance, out / "qp", header)
    for p in paths:
        print(f"wrote {p}")
    return EXIT_OK


def cmd_validate(args) -> int:
    from .validation import run_suite

    results = run_suite(small=args.small)
    for r in results:
        print(r.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAILED


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="drmpc", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--preset", choices=["mass_spring", "inverted_pendulum"])
        p.add_argument("--config", help="JSON file with ExperimentConfig fields")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--epsilon", type=float, help="Wasserstein radius")
        p.add_argument("--n-init", type=int, help="sample windows collected before the start")
        p.add_argument("--max-samples", type=int)

    p = sub.add_parser("run", help="simulate a single episode")
    common(p)
    p.add_argument("--duration", type=float, help="simulated seconds")
    p.add_argument("--timing", action="store_true",
                   help="record wall-clock times (outputs are then not reproducible)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("montecarlo", help="repeated episodes, optionally over a sweep")
    common(p)
    p.add_argument("--duration", type=float)
    p.add_argument("--realizations", type=int)
    p.add_argument("--sweep", help="name=v1,v2,... over epsilon, n_init or max_samples")
    p.add_argument("--workers", type=int, help="worker processes")
    p.add_argument("--timing", action="store_true")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("dump-qp", help="write one assembled program as text")
    common(p)
    p.set_defaults(func=cmd_dump)

    p = sub.add_parser("validate", help="run the oracle checks")
    p.add_argument("--small", action="store_true", help="fewer random instances")
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, InsufficientDataError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SolverError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
