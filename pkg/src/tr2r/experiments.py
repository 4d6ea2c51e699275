"""Experiment plans, the sweep runner and the reproduction targets.

A :class:`Scenario` pins down one complete pipeline (plant, offline data,
estimator, controller, online regime, monitoring settings).  An
:class:`ExperimentPlan` sweeps named axes over a base scenario and repeats
every cell for a number of replications.  All randomness comes from streams
derived from ``(seed, purpose, ...)``, so outputs are independent of the
number of worker processes.

Work is grouped by offline dataset: every ``(a, estimator, plant)`` triple
generates and fits one model, which then serves all online cells of that
group.  Online streams are keyed by replication and regime only, so
controllers and EWMA weights are compared on common random numbers.
"""
from __future__ import annotations

import itertools
import math
import os
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Mapping, Optional, Sequence

import numpy as np

from .control import EwmaController, ZhongController, stability_matrix
from .estimation import EstimationResult, GlrpTuning, algorithm1, algorithm2, pee
from .io import dump_json, write_rows_csv
from .monitoring import ChartSuite, control_residual, ewma_run_lengths, fit_charts, monitor_stream
from .seeding import derive_rng
from .simulation import (
    DisturbanceSpec,
    NoiseFieldSpec,
    PlantConfig,
    ProcessModel,
    RunRecord,
    generate_offline,
    no_control,
    simulate_closed_loop,
)
from .tensor import frobenius

__all__ = [
    "Scenario",
    "ExperimentPlan",
    "PlanResult",
    "CriterionResult",
    "ReproduceReport",
    "TARGETS",
    "AXES",
    "disturbance_label",
    "parse_disturbance",
    "fit_scenario",
    "make_controller",
    "phase1_charts",
    "run_plan",
    "reproduce",
    "plans_for",
    "record_rows",
    "criterion_table1",
    "criterion_boundary",
    "criterion_bias",
    "criterion_figure4",
    "criterion_ordering",
    "criterion_calibration",
    "criterion_detection",
]

AXES = ("a", "estimator", "controller", "lam", "disturbance", "case")
OFFLINE_AXES = ("a", "estimator")
KINDS = ("estimation", "control", "monitoring")
TARGETS = ("figure4", "table1", "table2", "table3", "figure5")


# ----------------------------------------------------------------------------
# scenarios


def disturbance_label(spec: DisturbanceSpec) -> str:
    if spec.kind == "ima":
        return f"ima({spec.theta!r})"
    if spec.kind == "arima":
        return f"arima({spec.phi!r},{spec.theta!r})"
    return spec.kind


_LABEL = re.compile(r"^(iid|ima|arima)(?:\(([^)]*)\))?$")


def parse_disturbance(label: str, sd: float) -> DisturbanceSpec:
    """``"iid"``, ``"ima(theta)"`` or ``"arima(phi,theta)"`` with innovation sd `sd`."""
    match = _LABEL.match(label.replace(" ", ""))
    if not match:
        raise ValueError(f"unrecognised disturbance label {label!r}")
    kind, args = match.group(1), match.group(2)
    values = [float(v) for v in args.split(",")] if args else []
    if kind == "iid" and not values:
        return DisturbanceSpec.iid(sd)
    if kind == "ima" and len(values) == 1:
        return DisturbanceSpec.ima(values[0], sd=sd)
    if kind == "arima" and len(values) == 2:
        return DisturbanceSpec.arima(values[0], values[1], sd=sd)
    raise ValueError(f"wrong number of parameters in disturbance label {label!r}")


@dataclass(frozen=True)
class Scenario:
    """One fully specified pipeline.

    Offline data use ``d_t = a u_t + W_t`` with ``W_t ~ N(0, offline_sd^2)``
    and image noise sd ``plant.noise_sd``.  Online runs use the true plant
    with disturbance `online` and noise field `noise`.
    """

    plant: PlantConfig = field(default_factory=lambda: PlantConfig(noise_sd=0.05, sparsity_rows=None))
    a: float = 0.0
    offline_sd: float = 0.05
    estimator: str = "alg1"
    tuning: GlrpTuning = GlrpTuning()
    known_factors: bool = False
    controller: str = "ewma"
    lam: float = 0.5
    online: DisturbanceSpec = DisturbanceSpec.ima(0.5, sd=0.005)
    noise: NoiseFieldSpec = NoiseFieldSpec("ic", sigma0=0.004)
    T: int = 400
    P_mon: tuple = (2, 3, 1)
    phase1_runs: int = 4000
    holdout: float = 0.5
    alpha: float = 0.025
    omega: float = 0.2
    arl0: float = 200.0
    calibration_runs: int = 0

    def __post_init__(self):
        if self.estimator not in ("alg1", "alg2"):
            raise ValueError(f"unknown estimator {self.estimator!r}")
        if self.controller not in ("ewma", "zhong", "none"):
            raise ValueError(f"unknown controller {self.controller!r}")
        if self.T < 1 or self.phase1_runs < 2:
            raise ValueError("T and phase1_runs must be positive")
        object.__setattr__(self, "P_mon", tuple(int(p) for p in self.P_mon))

    @property
    def offline_disturbance(self) -> DisturbanceSpec:
        return DisturbanceSpec.scaled_identity(self.a, self.plant.m, sd=self.offline_sd)

    def with_axis(self, name: str, value) -> "Scenario":
        if name == "disturbance":
            return replace(self, online=parse_disturbance(value, self.online.sd))
        if name == "case":
            return replace(self, noise=replace(self.noise, case=value))
        if name in ("a", "lam"):
            return replace(self, **{name: float(value)})
        if name in ("estimator", "controller"):
            return replace(self, **{name: value})
        raise ValueError(f"unknown axis {name!r}")

    def to_dict(self) -> dict:
        out = {k: v for k, v in asdict(self).items() if k not in ("plant", "tuning", "online", "noise")}
        out["plant"] = self.plant.to_dict()
        out["tuning"] = asdict(self.tuning)
        out["online"] = self.online.to_dict()
        out["noise"] = asdict(self.noise)
        return out

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Scenario":
        d = dict(d)
        base = cls()
        kw: dict = {}
        if "plant" in d:
            kw["plant"] = PlantConfig.from_dict({**base.plant.to_dict(), **d.pop("plant")})
        if "tuning" in d:
            kw["tuning"] = GlrpTuning(**{**asdict(base.tuning), **d.pop("tuning")})
        if "online" in d:
            online = d.pop("online")
            if isinstance(online, str):
                online = parse_disturbance(online, base.online.sd)
            else:
                online = DisturbanceSpec.from_dict({**base.online.to_dict(), **online})
            kw["online"] = online
        if "noise" in d:
            kw["noise"] = NoiseFieldSpec.from_dict({**asdict(base.noise), **d.pop("noise")})
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ValueError(f"unknown scenario fields: {sorted(unknown)}")
        return cls(**kw, **d)


def fit_scenario(sc: Scenario, rng: np.random.Generator) -> tuple:
    """Offline data and fit; returns ``(model, dataset, estimate)``."""
    model, data = generate_offline(sc.plant, sc.offline_disturbance, rng)
    kwargs = {}
    if sc.known_factors:
        kwargs = dict(factors=model.factors, update_factors=False)
    if sc.estimator == "alg1":
        est = algorithm1(data, sc.plant.P, **kwargs)
    else:
        est = algorithm2(data, sc.plant.P, sc.tuning, **kwargs)
    return model, data, est


def make_controller(sc: Scenario, est: EstimationResult):
    if sc.controller == "ewma":
        return EwmaController(est, sc.lam)
    if sc.controller == "zhong":
        return ZhongController(est)
    return no_control(est.B_hat.shape[0])


def phase1_charts(sc: Scenario, model: ProcessModel, est: EstimationResult, rng: np.random.Generator) -> ChartSuite:
    """Charts fitted on residuals of an in-control closed-loop stream."""
    ic = replace(sc.noise, case="ic")
    rec = simulate_closed_loop(model, make_controller(sc, est), sc.online, ic, sc.phase1_runs, rng)
    if rec.diverged:
        raise RuntimeError("phase-I closed loop diverged; choose a stable controller")
    R = control_residual(rec.Y, est.factors_hat, first_mode=1)
    return fit_charts(R, sc.P_mon, alpha=sc.alpha, omega=sc.omega, arl0=sc.arl0, holdout=sc.holdout)


def record_rows(rec: RunRecord) -> list:
    """RunRecord export rows: run, running MAE, ``||Y_t||_F``, diverged flag."""
    running = rec.running_mae()
    last = rec.n_runs - 1
    return [(t + 1, float(running[t]), float(rec.y_norm[t]), bool(rec.diverged and t == last))
            for t in range(rec.n_runs)]


RECORD_HEADER = ("run", "mae_running", "frob", "diverged")


# ----------------------------------------------------------------------------
# plans


def _axis_text(value) -> str:
    return repr(float(value)) if isinstance(value, (int, float)) and not isinstance(value, bool) else str(value)


@dataclass(frozen=True)
class ExperimentPlan:
    """A grid of scenario cells repeated over replications.

    ``kind`` selects the metrics: ``estimation`` (PEE), ``control`` (MAE and
    divergence) or ``monitoring`` (first alarms after the change point).
    ``reps_per_plant`` replications share one offline model (and, for
    monitoring, one set of phase-I charts).
    """

    name: str
    kind: str
    base: Scenario = Scenario()
    axes: Mapping[str, tuple] = field(default_factory=dict)
    replications: int = 10
    seed: int = 0
    out_dir: Optional[str] = None
    reps_per_plant: int = 1
    save_records: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown plan kind {self.kind!r}")
        if self.replications < 1 or self.reps_per_plant < 1:
            raise ValueError("replications and reps_per_plant must be >= 1")
        axes = {}
        for name in AXES:
            if name in self.axes:
                values = tuple(self.axes[name])
                if not values:
                    raise ValueError(f"axis {name!r} is empty")
                axes[name] = values
        unknown = set(self.axes) - set(AXES)
        if unknown:
            raise ValueError(f"unknown axes: {sorted(unknown)}")
        object.__setattr__(self, "axes", axes)
        for cell in self.cells():
            self.scenario(cell)

    @property
    def axis_names(self) -> tuple:
        return tuple(self.axes)

    def cells(self) -> list:
        names = self.axis_names
        return [dict(zip(names, combo)) for combo in itertools.product(*(self.axes[n] for n in names))]

    def scenario(self, cell: Mapping[str, Any]) -> Scenario:
        sc = self.base
        for name, value in cell.items():
            sc = sc.with_axis(name, value)
        return sc

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "kind": self.kind,
            "base": self.base.to_dict(),
            "axes": {k: list(v) for k, v in self.axes.items()},
            "replications": self.replications,
            "seed": self.seed,
            "out_dir": self.out_dir,
            "reps_per_plant": self.reps_per_plant,
            "save_records": self.save_records,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ExperimentPlan":
        d = dict(d)
        missing = {"name", "kind"} - set(d)
        if missing:
            raise ValueError(f"plan is missing {sorted(missing)}")
        base = Scenario.from_dict(d.pop("base", {}))
        axes = {k: tuple(v) for k, v in d.pop("axes", {}).items()}
        return cls(base=base, axes=axes, **d)


def _metric_names(kind: str) -> tuple:
    if kind == "estimation":
        return ("pee", "rel_pee", "bias_rel", "residual_norm", "outer_iterations", "converged")
    if kind == "control":
        return ("mae", "diverged", "runs", "predicted_stable", "critical_lambda")
    return ("first_t2", "first_q", "first_ewma", "pre_change_alarms", "t2_within3", "q_within3",
            "ewma_before_t2")


def _estimation_metrics(model: ProcessModel, sc: Scenario, est: EstimationResult) -> dict:
    B = model.B
    scaled = (1.0 + sc.a) * B
    e = pee(B, est.B_hat)
    return {
        "pee": e,
        "rel_pee": e / frobenius(B) if frobenius(B) > 0 else float("nan"),
        "bias_rel": pee(scaled, est.B_hat) / frobenius(scaled) if frobenius(scaled) > 0 else float("nan"),
        "residual_norm": est.residual_norm,
        "outer_iterations": est.outer_iterations,
        "converged": est.converged,
    }


def _control_metrics(model, sc, est, rec: RunRecord) -> dict:
    out = {"mae": rec.mae, "diverged": rec.diverged, "runs": rec.n_runs,
           "predicted_stable": "", "critical_lambda": ""}
    if sc.controller == "ewma":
        report = stability_matrix(model, est, sc.lam)
        out["predicted_stable"] = report.stable
        out["critical_lambda"] = "" if report.critical_lambda is None else report.critical_lambda
    return out


def _first(value: Optional[int]):
    return "" if value is None else value


def _monitoring_metrics(alarms, t_c: int) -> dict:
    t2 = alarms.first_alarm("t2", t_c)
    q = alarms.first_alarm("q", t_c)
    ew = alarms.first_alarm("ewma", t_c)
    pre = alarms.t2_alarm[: t_c - 1] | alarms.q_alarm[: t_c - 1] | alarms.ewma_alarm[: t_c - 1]
    return {
        "first_t2": _first(t2),
        "first_q": _first(q),
        "first_ewma": _first(ew),
        "pre_change_alarms": int(np.sum(pre)),
        "t2_within3": t2 is not None and t2 <= t_c + 2,
        "q_within3": q is not None and q <= t_c + 2,
        "ewma_before_t2": ew is not None and (t2 is None or ew < t2),
    }


def _calibration(sc: Scenario, model, est, suite: ChartSuite, seed: int, key: tuple) -> dict:
    ic = replace(sc.noise, case="ic")
    n = t2 = q = 0
    lengths = []
    remaining, chunk = sc.calibration_runs, 0
    while remaining > 0:
        T = min(remaining, 10000)
        rec = simulate_closed_loop(model, make_controller(sc, est), sc.online, ic, T,
                                   derive_rng(seed, "calibration", *key, chunk))
        R = control_residual(rec.Y, est.factors_hat, first_mode=1)
        alarms = monitor_stream(suite, R)
        n += len(R)
        t2 += int(np.sum(alarms.t2_alarm))
        q += int(np.sum(alarms.q_alarm))
        lengths.append(ewma_run_lengths(suite, R))
        remaining -= T
        chunk += 1
    rl = np.concatenate(lengths) if lengths else np.zeros(0, dtype=int)
    return {"samples": n, "t2_exceed": t2, "q_exceed": q, "run_lengths": int(rl.size),
            "run_length_sum": int(rl.sum())}


def _run_group(plan: ExperimentPlan, offline: tuple, plant: int) -> list:
    """All rows of one offline group; returns ``(cell_index, rep, metrics, extras)`` tuples."""
    names = plan.axis_names
    offline_cell = dict(zip([n for n in OFFLINE_AXES if n in names], offline))
    sc0 = plan.scenario(offline_cell)
    a_key = _axis_text(sc0.a)
    model, _, est = fit_scenario(sc0, derive_rng(plan.seed, "offline", a_key, sc0.estimator, plant))
    reps = range(plant * plan.reps_per_plant, min((plant + 1) * plan.reps_per_plant, plan.replications))
    cells = plan.cells()
    mine = [(i, c) for i, c in enumerate(cells) if all(c.get(k) == v for k, v in offline_cell.items())]
    out = []
    if plan.kind == "estimation":
        metrics = _estimation_metrics(model, sc0, est)
        for i, _ in mine:
            for rep in reps:
                out.append((i, rep, metrics, {"estimate": est.summary(model.B)}))
        return out
    suites: dict = {}
    for i, cell in mine:
        sc = plan.scenario(cell)
        for rep in reps:
            regime = disturbance_label(sc.online)
            if plan.kind == "control":
                rng = derive_rng(plan.seed, "online", a_key, rep, regime, sc.noise.case)
                rec = simulate_closed_loop(model, make_controller(sc, est), sc.online, sc.noise, sc.T, rng,
                                           store=False)
                extras = {"record": record_rows(rec)} if plan.save_records else {}
                if sc.controller == "ewma" and plan.save_records:
                    extras["stability"] = stability_matrix(model, est, sc.lam).to_dict()
                out.append((i, rep, _control_metrics(model, sc, est, rec), extras))
            else:
                charts_key = (sc.controller, _axis_text(sc.lam), regime)
                if charts_key not in suites:
                    suite = phase1_charts(sc, model, est, derive_rng(plan.seed, "phase1", a_key, plant, *charts_key))
                    cal = (_calibration(sc, model, est, suite, plan.seed, (a_key, plant) + charts_key)
                           if sc.calibration_runs > 0 else None)
                    suites[charts_key] = (suite, cal)
                suite, cal = suites[charts_key]
                rng = derive_rng(plan.seed, "stream", a_key, rep, regime, sc.noise.case)
                rec = simulate_closed_loop(model, make_controller(sc, est), sc.online, sc.noise, sc.T, rng)
                alarms = monitor_stream(suite, control_residual(rec.Y, est.factors_hat, first_mode=1))
                extras = {}
                if plan.save_records and rep == 0:
                    extras = {"alarms": alarms.rows(), "charts": suite.to_dict()}
                if cal is not None and rep == reps[0] and i == mine[0][0]:
                    extras["calibration"] = cal
                out.append((i, rep, _monitoring_metrics(alarms, sc.noise.t_c), extras))
    return out


@dataclass
class PlanResult:
    """Rows of a finished plan.

    ``rows`` are dicts with one key per axis, ``replication`` and the
    metrics; ``summary`` holds one dict per cell.
    """

    plan: ExperimentPlan
    rows: list
    summary: list
    calibration: list
    files: dict = field(default_factory=dict)

    def cell_rows(self, **match) -> list:
        return [r for r in self.rows if all(_same(r[k], v) for k, v in match.items())]

    def values(self, metric: str, **match) -> np.ndarray:
        return np.array([_as_float(r[metric]) for r in self.cell_rows(**match)], dtype=float)


def _same(x, y) -> bool:
    if isinstance(x, (int, float)) and isinstance(y, (int, float)):
        return float(x) == float(y)
    return x == y


def _as_float(v) -> float:
    if v == "" or v is None:
        return float("inf")
    return float(v)


def _summarize(plan: ExperimentPlan, rows: list) -> list:
    metrics = _metric_names(plan.kind)
    out = []
    for cell in plan.cells():
        sel = [r for r in rows if all(r[k] == v for k, v in cell.items())]
        entry = dict(cell)
        entry["n"] = len(sel)
        for m in metrics:
            vals = np.array([_as_float(r[m]) for r in sel], dtype=float)
            if m in ("diverged", "converged", "predicted_stable", "t2_within3", "q_within3", "ewma_before_t2"):
                entry[f"{m}_count"] = int(np.sum(vals == 1.0))
                continue
            if m in ("critical_lambda",):
                finite = vals[np.isfinite(vals)]
                entry[f"{m}_median"] = float(np.median(finite)) if finite.size else ""
                continue
            entry[f"{m}_mean"] = float(np.mean(vals)) if vals.size else float("nan")
            entry[f"{m}_median"] = float(np.median(vals)) if vals.size else float("nan")
        out.append(entry)
    return out


def _groups(plan: ExperimentPlan) -> list:
    offline_names = [n for n in OFFLINE_AXES if n in plan.axes]
    combos = list(itertools.product(*(plan.axes[n] for n in offline_names)))
    n_plants = math.ceil(plan.replications / plan.reps_per_plant)
    return [(combo, p) for combo in combos for p in range(n_plants)]


def run_plan(plan: ExperimentPlan, jobs: int = 1, out_dir: Optional[str] = None) -> PlanResult:
    """Execute every cell and replication; write CSV reports when an output directory is set.

    Writes ``<name>_long.csv`` (one row per cell and replication),
    ``<name>_summary.csv`` (per-cell means, medians and counts) and, when
    ``save_records`` is on, per-row artifacts under ``<name>_records/``.
    """
    groups = _groups(plan)
    if jobs > 1 and len(groups) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(_run_group, [plan] * len(groups), [g[0] for g in groups], [g[1] for g in groups]))
    else:
        parts = [_run_group(plan, g[0], g[1]) for g in groups]
    cells = plan.cells()
    flat = sorted((item for part in parts for item in part), key=lambda x: (x[0], x[1]))
    rows, extras = [], []
    for i, rep, metrics, extra in flat:
        rows.append({**cells[i], "replication": rep, **metrics})
        extras.append(extra)
    summary = _summarize(plan, rows)
    calibration = [dict(e["calibration"]) for e in extras if "calibration" in e]
    result = PlanResult(plan, rows, summary, calibration)
    target = out_dir or plan.out_dir
    if target is not None:
        _write_plan(result, Path(target), extras)
    return result


def _write_plan(result: PlanResult, out: Path, extras: list) -> None:
    plan = result.plan
    out.mkdir(parents=True, exist_ok=True)
    names = plan.axis_names
    metrics = _metric_names(plan.kind)
    header = list(names) + ["replication"] + list(metrics)
    save = plan.save_records and any(extras)
    if save:
        header.append("record")
        rec_dir = out / f"{plan.name}_records"
        rec_dir.mkdir(exist_ok=True)
    body = []
    for k, (row, extra) in enumerate(zip(result.rows, extras)):
        line = [row[n] for n in header if n != "record"]
        if save:
            stem = f"row{k:05d}"
            files = []
            if "record" in extra:
                write_rows_csv(rec_dir / f"{stem}_run.csv", RECORD_HEADER, extra["record"])
                files.append(f"{stem}_run.csv")
            if "stability" in extra:
                dump_json(rec_dir / f"{stem}_stability.json", extra["stability"])
            if "alarms" in extra:
                from .monitoring import AlarmRecord

                write_rows_csv(rec_dir / f"{stem}_alarms.csv", AlarmRecord.header, extra["alarms"])
                dump_json(rec_dir / f"{stem}_charts.json", extra["charts"])
                files.append(f"{stem}_alarms.csv")
            if "estimate" in extra:
                dump_json(rec_dir / f"{stem}_estimate.json", extra["estimate"])
                files.append(f"{stem}_estimate.json")
            line.append(";".join(files))
        body.append(line)
    long_path = out / f"{plan.name}_long.csv"
    write_rows_csv(long_path, header, body)
    summary_header = list(result.summary[0].keys()) if result.summary else []
    summary_path = out / f"{plan.name}_summary.csv"
    write_rows_csv(summary_path, summary_header, [[s[h] for h in summary_header] for s in result.summary])
    result.files.update({"long": str(long_path), "summary": str(summary_path)})
    if result.calibration:
        cal_path = out / f"{plan.name}_calibration.csv"
        cal_header = list(result.calibration[0])
        write_rows_csv(cal_path, cal_header, [[c[h] for h in cal_header] for c in result.calibration])
        result.files["calibration"] = str(cal_path)
    dump_json(out / f"{plan.name}_plan.json", plan.to_dict())


# ----------------------------------------------------------------------------
# built-in plans

TABLE1_A = (-0.9, -0.6, -0.3, 0.0, 10.0)
TABLE1_LAMBDA = (0.1, 0.3, 0.5, 0.7, 0.9)
FIGURE4_A = (-50.0, -20.0, 0.0, 20.0, 50.0)
IMA_THETA = (0.3, 0.5, 0.7)
ARIMA_PHI = (0.25, 0.75)
SWEEP_A = (-0.95, -0.8, -0.7, -0.6, -0.45, -0.3, 0.0, 0.5)
OC_CASES = ("mean_shift", "var_shift", "ima", "arima")


def _desk(full_scale: bool, **overrides) -> PlantConfig:
    cfg = PlantConfig(**overrides)
    return replace(cfg, Q=(100, 200, 2)) if full_scale else cfg


def plans_for(target: str, seed: int = 0, replications: Optional[int] = None, full_scale: bool = False) -> dict:
    """Built-in plans behind a reproduction target, keyed by plan name."""
    if target not in TARGETS:
        raise ValueError(f"unknown target {target!r}; choose from {', '.join(TARGETS)}")
    reps = lambda default: default if replications is None else replications
    dense = _desk(full_scale, noise_sd=0.05, sparsity_rows=None)
    if target == "figure4":
        sparse = _desk(full_scale, noise_sd=1.0, sparsity_rows=3)
        base = Scenario(plant=sparse, offline_sd=1.0)
        bias_plant = replace(dense, noise_sd=0.1, n_cycles=20, runs_per_cycle=100)
        bias = Scenario(plant=bias_plant, offline_sd=0.1, known_factors=True)
        return {
            "figure4": ExperimentPlan("figure4", "estimation", base,
                                      {"a": FIGURE4_A, "estimator": ("alg1", "alg2")}, reps(50), seed),
            "bias": ExperimentPlan("bias", "estimation", bias, {"a": (0.5, 0.0)}, reps(20), seed),
        }
    if target == "table1":
        base = Scenario(plant=dense)
        return {
            "table1": ExperimentPlan("table1", "control", base, {"a": TABLE1_A, "lam": TABLE1_LAMBDA},
                                     reps(10), seed, save_records=True),
            "table1_nocontrol": ExperimentPlan("table1_nocontrol", "control", replace(base, controller="none"),
                                               {"a": TABLE1_A}, reps(10), seed),
            "boundary": ExperimentPlan("boundary", "control", replace(base, a=-0.6), {"lam": (0.75, 0.85)},
                                       reps(10), seed),
            "sweep": ExperimentPlan("sweep", "control", base, {"a": SWEEP_A, "lam": TABLE1_LAMBDA}, 1, seed),
        }
    if target in ("table2", "table3"):
        base = Scenario(plant=dense, T=100)
        labels = ([f"ima({t!r})" for t in IMA_THETA] if target == "table2"
                  else [f"arima({p!r},{t!r})" for p in ARIMA_PHI for t in IMA_THETA])
        return {target: ExperimentPlan(target, "control", base,
                                       {"controller": ("ewma", "zhong", "none"), "disturbance": tuple(labels)},
                                       reps(10), seed, save_records=True)}
    base = Scenario(plant=dense, T=100, calibration_runs=20000)
    return {"figure5": ExperimentPlan("figure5", "monitoring", base, {"case": OC_CASES}, reps(100), seed,
                                      reps_per_plant=10, save_records=True)}


# ----------------------------------------------------------------------------
# criteria


@dataclass
class CriterionResult:
    number: int
    name: str
    passed: bool
    detail: str
    values: dict = field(default_factory=dict)

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} criterion {self.number} ({self.name}): {self.detail}"


def _median(result: PlanResult, metric: str, **match) -> float:
    vals = result.values(metric, **match)
    return float(np.median(vals)) if vals.size else float("nan")


def criterion_table1(table: PlanResult, nocontrol: PlanResult) -> CriterionResult:
    """Diverged/finite pattern of the A x lambda MAE grid."""
    expected_div = {-0.9: {0.3, 0.5, 0.7, 0.9}, -0.6: {0.9}}
    bad = []
    for a in TABLE1_A:
        nc = _median(nocontrol, "mae", a=a)
        for lam in TABLE1_LAMBDA:
            med = _median(table, "mae", a=a, lam=lam)
            should_diverge = lam in expected_div.get(a, set())
            if should_diverge != (not math.isfinite(med)):
                bad.append(f"a={a}, lam={lam}: median {med:.4g}")
        if a == -0.9:
            low = _median(table, "mae", a=a, lam=0.1)
            if not (math.isfinite(low) and low < nc):
                bad.append(f"a=-0.9, lam=0.1: {low:.4g} not below no-control {nc:.4g}")
    bench = _median(nocontrol, "mae", a=0.0)
    detail = "pattern matches" if not bad else "; ".join(bad)
    return CriterionResult(1, "A x lambda stability pattern", not bad, f"{detail} (no-control MAE at A=0: {bench:.4f})",
                           {"mismatches": bad, "no_control_mae": bench})


def criterion_boundary(boundary: PlanResult, sweep: PlanResult) -> CriterionResult:
    stable_ok = int(np.sum(~boundary.values("diverged", lam=0.75).astype(bool)))
    div_ok = int(np.sum(boundary.values("diverged", lam=0.85).astype(bool)))
    n_b = len(boundary.cell_rows(lam=0.75))
    agree = total = 0
    for r in sweep.rows:
        crit = _as_float(r["critical_lambda"])
        if math.isfinite(crit) and abs(float(r["lam"]) - crit) < 0.05:
            continue
        total += 1
        agree += bool(r["predicted_stable"]) == (not r["diverged"])
    share = agree / total if total else float("nan")
    need = math.ceil(0.9 * n_b)
    passed = stable_ok >= need and div_ok >= need and share >= 0.95
    detail = (f"lam=0.75 stable {stable_ok}/{n_b}, lam=0.85 diverged {div_ok}/{n_b}, "
              f"analytic verdict agrees in {agree}/{total} sweep cells ({share:.1%})")
    return CriterionResult(2, "stability boundary", passed, detail,
                           {"stable_075": stable_ok, "diverged_085": div_ok, "agreement": share})


def criterion_bias(bias: PlanResult) -> CriterionResult:
    corr = _median(bias, "bias_rel", a=0.5)
    unbiased = _median(bias, "rel_pee", a=0.0)
    passed = corr < 0.05 and unbiased < 0.05
    detail = f"median ||B_hat - 1.5 B||/||1.5 B|| = {corr:.4f} (A=0.5I), median PEE/||B|| = {unbiased:.4f} (A=0)"
    return CriterionResult(3, "bias law", passed, detail, {"correlated": corr, "uncorrelated": unbiased})


def criterion_figure4(fig: PlanResult) -> CriterionResult:
    m1 = {a: float(np.mean(fig.values("pee", a=a, estimator="alg1"))) for a in FIGURE4_A}
    m2 = {a: float(np.mean(fig.values("pee", a=a, estimator="alg2"))) for a in FIGURE4_A}
    ratio1 = min(m1[-50.0], m1[50.0]) / m1[0.0]
    spread2 = max(m2.values()) / min(m2.values())
    passed = ratio1 >= 5 and spread2 <= 2
    detail = f"alg1 |a|=50 vs a=0 ratio {ratio1:.1f} (need >= 5), alg2 max/min {spread2:.2f} (need <= 2)"
    return CriterionResult(4, "PEE versus correlation", passed, detail, {"alg1": m1, "alg2": m2})


def criterion_ordering(tables: Sequence[PlanResult]) -> CriterionResult:
    bad = []
    for res in tables:
        for label in res.plan.axes["disturbance"]:
            ew = _median(res, "mae", controller="ewma", disturbance=label)
            zh = _median(res, "mae", controller="zhong", disturbance=label)
            nc = _median(res, "mae", controller="none", disturbance=label)
            if not (ew < zh and ew < nc):
                bad.append(f"{label}: EWMA {ew:.4f}, Zhong {zh:.4f}, none {nc:.4f}")
    names = "+".join(r.plan.name for r in tables)
    return CriterionResult(5, f"controller ordering ({names})", not bad,
                           "EWMA below both baselines everywhere" if not bad else "; ".join(bad), {"violations": bad})


def criterion_calibration(fig5: PlanResult, alpha: float = 0.025, arl0: float = 200.0) -> CriterionResult:
    cal = fig5.calibration
    n = sum(c["samples"] for c in cal)
    t2 = sum(c["t2_exceed"] for c in cal) / n
    q = sum(c["q_exceed"] for c in cal) / n
    arl = sum(c["run_length_sum"] for c in cal) / max(sum(c["run_lengths"] for c in cal), 1)
    passed = abs(t2 - alpha) <= 0.01 and abs(q - alpha) <= 0.01 and 0.9 * arl0 <= arl <= 1.1 * arl0
    detail = f"T2 rate {t2:.4f}, Q rate {q:.4f} over {n} IC runs; EWMA ARL0 {arl:.1f}"
    return CriterionResult(6, "chart calibration", passed, detail, {"t2": t2, "q": q, "arl": arl, "samples": n})


def criterion_detection(fig5: PlanResult) -> CriterionResult:
    share = lambda metric, case: float(np.mean(fig5.values(metric, case=case)))
    a = share("t2_within3", "mean_shift")
    b = share("q_within3", "var_shift")
    c = share("ewma_before_t2", "ima")
    d = share("ewma_before_t2", "arima")
    med_c = _median(fig5, "first_ewma", case="ima")
    med_d = _median(fig5, "first_ewma", case="arima")
    checks = {"A": a >= 0.9, "B": b >= 0.9, "C": c >= 0.7, "D": d >= 0.7, "D<=C": med_d <= med_c}
    detail = (f"A: T2 within 3 runs {a:.2f}; B: Q within 3 runs {b:.2f}; C: EWMA first {c:.2f}; "
              f"D: EWMA first {d:.2f}; median EWMA alarm C {med_c:g}, D {med_d:g}")
    failed = [k for k, ok in checks.items() if not ok]
    if failed:
        detail += f" (failing: {', '.join(failed)})"
    return CriterionResult(7, "shift and drift detection", not failed, detail,
                           {"A": a, "B": b, "C": c, "D": d, "median_C": med_c, "median_D": med_d})


# ----------------------------------------------------------------------------
# table-shaped outputs


def _fmt_mae(v: float):
    return float("inf") if not math.isfinite(v) else round(v, 4)


def _table1_csv(out: Path, table: PlanResult, nocontrol: PlanResult) -> Path:
    header = ["MAE"] + [f"lambda={lam}" for lam in TABLE1_LAMBDA]
    rows = [["Delta=(lambda-2)/2"] + [round((lam - 2) / 2, 4) for lam in TABLE1_LAMBDA]]
    for a in TABLE1_A:
        label = "A=0" if a == 0 else f"A={a:g}*I"
        rows.append([label] + [_fmt_mae(_median(table, "mae", a=a, lam=lam)) for lam in TABLE1_LAMBDA])
    rows.append(["without control"] + [_fmt_mae(_median(nocontrol, "mae", a=0.0))] + [""] * (len(TABLE1_LAMBDA) - 1))
    path = out / "table1.csv"
    write_rows_csv(path, header, rows)
    return path


def _controller_table_csv(out: Path, res: PlanResult) -> Path:
    labels = res.plan.axes["disturbance"]
    header = ["controller"] + list(labels)
    names = {"ewma": "EWMA (lambda=0.5)", "zhong": "Zhong et al. baseline", "none": "without control"}
    rows = [[names[c]] + [_fmt_mae(_median(res, "mae", controller=c, disturbance=lab)) for lab in labels]
            for c in ("ewma", "zhong", "none")]
    path = out / f"{res.plan.name}.csv"
    write_rows_csv(path, header, rows)
    return path


def _figure4_csv(out: Path, fig: PlanResult) -> Path:
    rows = []
    for a in FIGURE4_A:
        line = [a]
        for est in ("alg1", "alg2"):
            v = fig.values("pee", a=a, estimator=est)
            line += [float(np.mean(v)), float(np.std(v))]
        rows.append(line)
    path = out / "figure4.csv"
    write_rows_csv(path, ["a", "alg1_mean_pee", "alg1_sd_pee", "alg2_mean_pee", "alg2_sd_pee"], rows)
    return path


def _figure5_csv(out: Path, fig: PlanResult) -> Path:
    rows = []
    for case in OC_CASES:
        line = [case]
        for metric in ("t2_within3", "q_within3", "ewma_before_t2"):
            line.append(float(np.mean(fig.values(metric, case=case))))
        for metric in ("first_t2", "first_q", "first_ewma"):
            line.append(_median(fig, metric, case=case))
        rows.append(line)
    header = ["case", "t2_within3", "q_within3", "ewma_before_t2", "median_first_t2", "median_first_q",
              "median_first_ewma"]
    path = out / "figure5.csv"
    write_rows_csv(path, header, rows)
    return path


@dataclass
class ReproduceReport:
    target: str
    results: dict
    criteria: list
    files: list

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.criteria)

    def lines(self) -> list:
        return [c.line() for c in self.criteria]


def reproduce(target: str, out_dir: Optional[str] = None, seed: int = 0, jobs: int = 1,
              replications: Optional[int] = None, full_scale: bool = False,
              echo: Optional[Callable[[str], None]] = None) -> ReproduceReport:
    """Run a built-in target; write its table-shaped CSV and return the criterion verdicts."""
    plans = plans_for(target, seed, replications, full_scale)
    out = Path(out_dir) / target if out_dir is not None else None
    results = {name: run_plan(plan, jobs=jobs, out_dir=None if out is None else str(out))
               for name, plan in plans.items()}
    if target == "figure4":
        criteria = [criterion_bias(results["bias"]), criterion_figure4(results["figure4"])]
    elif target == "table1":
        criteria = [criterion_table1(results["table1"], results["table1_nocontrol"]),
                    criterion_boundary(results["boundary"], results["sweep"])]
    elif target in ("table2", "table3"):
        criteria = [criterion_ordering([results[target]])]
    else:
        criteria = [criterion_calibration(results["figure5"]), criterion_detection(results["figure5"])]
    files = []
    if out is not None:
        if target == "figure4":
            files.append(_figure4_csv(out, results["figure4"]))
        elif target == "table1":
            files.append(_table1_csv(out, results["table1"], results["table1_nocontrol"]))
        elif target in ("table2", "table3"):
            files.append(_controller_table_csv(out, results[target]))
        else:
            files.append(_figure5_csv(out, results["figure5"]))
        crit_path = out / "criteria.txt"
        crit_path.write_text("".join(c.line() + "\n" for c in criteria))
        files.append(crit_path)
        for res in results.values():
            files.extend(Path(p) for p in res.files.values())
    report = ReproduceReport(target, results, criteria, [str(f) for f in files])
    if echo is not None:
        for line in report.lines():
            echo(line)
    return report


def default_jobs() -> int:
    return max(1, os.cpu_count() or 1)
