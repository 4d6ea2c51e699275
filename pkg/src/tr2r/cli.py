"""Command-line entry point ``tr2r``.

Subcommands::

    tr2r simulate   --config cfg.json   offline dataset and true parameter
    tr2r estimate   --config cfg.json   fit (from --data or a fresh simulation)
    tr2r control    --config cfg.json   closed-loop run and stability report
    tr2r monitor    --config cfg.json   phase-I charts and a monitored stream
    tr2r run-plan   --config plan.json  sweep runner
    tr2r reproduce  TARGET              built-in desk-scale reproduction

Scenario configs are JSON objects with the fields of
:class:`tr2r.experiments.Scenario`; plan configs mirror
:class:`tr2r.experiments.ExperimentPlan`.  Output goes to ``--out``, else
``$TR2R_OUT``, else ``./tr2r_out``.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

from . import experiments as ex
from .control import stability_matrix
from .estimation import algorithm1, algorithm2
from .io import dump_json, read_matrix_csv, read_tensor, write_matrix_csv, write_rows_csv, write_tensor
from .monitoring import AlarmRecord, control_residual, monitor_stream
from .seeding import derive_rng
from .simulation import OfflineDataset, generate_offline, simulate_closed_loop

DEFAULT_OUT = "tr2r_out"


class CliError(Exception):
    """Invalid configuration or unusable output location (exit code 2)."""


def _load_json(path: Optional[str]) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as exc:
        raise CliError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise CliError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise CliError(f"config {path} must hold a JSON object")
    return data


def _scenario(args) -> ex.Scenario:
    try:
        sc = ex.Scenario.from_dict(_load_json(args.config))
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid scenario config: {exc}") from exc
    if args.full_scale:
        sc = replace(sc, plant=replace(sc.plant, Q=(100, 200, 2)))
    return sc


def _out_dir(args) -> Path:
    out = Path(args.out or os.environ.get("TR2R_OUT") or DEFAULT_OUT)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise CliError(f"output directory {out} is not writable: {exc}") from exc
    return out


def _fit(sc: ex.Scenario, seed: int):
    return ex.fit_scenario(sc, derive_rng(seed, "offline"))


def cmd_simulate(args) -> int:
    sc = _scenario(args)
    out = _out_dir(args)
    model, data = generate_offline(sc.plant, sc.offline_disturbance, derive_rng(args.seed, "offline"))
    write_tensor(out / "B.tensor", model.B)
    write_tensor(out / "core.tensor", model.core)
    write_tensor(out / "Y.tensor", data.Y)
    write_matrix_csv(out / "U.csv", data.U)
    write_matrix_csv(out / "D.csv", data.D)
    dump_json(out / "scenario.json", sc.to_dict())
    print(f"wrote offline dataset (n={data.n}) to {out}")
    return 0


def cmd_estimate(args) -> int:
    sc = _scenario(args)
    out = _out_dir(args)
    B_true = None
    if args.data:
        src = Path(args.data)
        try:
            data = OfflineDataset(U=read_matrix_csv(src / "U.csv"), Y=read_tensor(src / "Y.tensor"))
        except (OSError, ValueError) as exc:
            raise CliError(f"cannot read dataset from {src}: {exc}") from exc
        if (src / "B.tensor").exists():
            B_true = read_tensor(src / "B.tensor")
        P = sc.plant.P
        est = algorithm1(data, P) if sc.estimator == "alg1" else algorithm2(data, P, sc.tuning)
    else:
        model, data, est = _fit(sc, args.seed)
        B_true = model.B
    write_tensor(out / "B_hat.tensor", est.B_hat)
    summary = est.summary(B_true)
    dump_json(out / "estimate.json", summary)
    print(f"{est.method}: residual {est.residual_norm:.6g}" + (f", PEE {summary['pee']:.6g}" if "pee" in summary else ""))
    return 0


def cmd_control(args) -> int:
    sc = _scenario(args)
    out = _out_dir(args)
    model, _, est = _fit(sc, args.seed)
    rec = simulate_closed_loop(model, ex.make_controller(sc, est), sc.online, sc.noise, sc.T,
                               derive_rng(args.seed, "online"), store=False)
    write_rows_csv(out / "run_record.csv", ex.RECORD_HEADER, ex.record_rows(rec))
    if sc.controller == "ewma":
        report = stability_matrix(model, est, sc.lam, A=sc.offline_disturbance.A)
        dump_json(out / "stability.json", report.to_dict())
        verdict = f", analytic verdict {'stable' if report.stable else 'unstable'}"
    else:
        verdict = ""
    mae = "INF (diverged)" if rec.diverged else f"{rec.mae:.6g}"
    print(f"{sc.controller} controller: MAE {mae} over {rec.n_runs} runs{verdict}")
    return 0


def cmd_monitor(args) -> int:
    sc = _scenario(args)
    out = _out_dir(args)
    model, _, est = _fit(sc, args.seed)
    suite = ex.phase1_charts(sc, model, est, derive_rng(args.seed, "phase1"))
    rec = simulate_closed_loop(model, ex.make_controller(sc, est), sc.online, sc.noise, sc.T,
                               derive_rng(args.seed, "stream"))
    alarms = monitor_stream(suite, control_residual(rec.Y, est.factors_hat, first_mode=1))
    dump_json(out / "charts.json", suite.to_dict())
    write_rows_csv(out / "alarms.csv", AlarmRecord.header, alarms.rows())
    first = {c: alarms.first_alarm(c, sc.noise.t_c) for c in ("t2", "q", "ewma")}
    print(f"case {sc.noise.case}: first alarms from run {sc.noise.t_c}: "
          + ", ".join(f"{k}={v if v is not None else 'none'}" for k, v in first.items()))
    return 0


def cmd_run_plan(args) -> int:
    data = _load_json(args.config)
    if args.seed is not None:
        data["seed"] = args.seed
    try:
        plan = ex.ExperimentPlan.from_dict(data)
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid plan config: {exc}") from exc
    if args.full_scale:
        plan = replace(plan, base=replace(plan.base, plant=replace(plan.base.plant, Q=(100, 200, 2))))
    out = _out_dir(args) if (args.out or os.environ.get("TR2R_OUT") or plan.out_dir is None) else Path(plan.out_dir)
    result = ex.run_plan(plan, jobs=args.jobs, out_dir=str(out))
    print(f"plan {plan.name}: {len(result.rows)} rows -> {result.files['long']}")
    return 0


def cmd_reproduce(args) -> int:
    out = _out_dir(args)
    ex.reproduce(args.target, out_dir=str(out), seed=args.seed, jobs=args.jobs,
              replications=args.replications, full_scale=args.full_scale, echo=print)
    print(f"outputs in {out / args.target}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tr2r", description="Tensor-space run-to-run control experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed_default: Optional[int] = 0):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, default=seed_default, help="base seed (u64)")
        p.add_argument("--out", help="output directory (default $TR2R_OUT or ./tr2r_out)")
        p.add_argument("--jobs", type=int, default=1, help="worker processes")
        p.add_argument("--full-scale", action="store_true", help="use 100 x 200 x 2 images")
        return p

    common(sub.add_parser("simulate", help="generate an offline dataset")).set_defaults(func=cmd_simulate)
    p = common(sub.add_parser("estimate", help="fit the tensor parameter"))
    p.add_argument("--data", help="directory written by 'simulate'")
    p.set_defaults(func=cmd_estimate)
    common(sub.add_parser("control", help="closed-loop control run")).set_defaults(func=cmd_control)
    common(sub.add_parser("monitor", help="fit charts and monitor one stream")).set_defaults(func=cmd_monitor)
    common(sub.add_parser("run-plan", help="run an experiment plan"), seed_default=None).set_defaults(func=cmd_run_plan)
    p = common(sub.add_parser("reproduce", help="run a built-in reproduction target"))
    p.add_argument("target", help=", ".join(ex.TARGETS))
    p.add_argument("--replications", type=int, help="override the replications per cell")
    p.set_defaults(func=cmd_reproduce)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.jobs < 1:
        parser.error("--jobs must be >= 1")
    if args.command == "reproduce" and args.target not in ex.TARGETS:
        print(f"tr2r: error: unknown target {args.target!r}; choose from {', '.join(ex.TARGETS)}", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except CliError as exc:
        print(f"tr2r: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
