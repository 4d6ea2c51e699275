import csv
import json
import random
from dataclasses import replace

import numpy as np
import pytest

from tr2r.experiments import (
    TABLE1_A,
    TABLE1_LAMBDA,
    ExperimentPlan,
    Scenario,
    disturbance_label,
    parse_disturbance,
    plans_for,
    reproduce,
    run_plan,
)
from tr2r.simulation import DisturbanceSpec

FAST = replace(Scenario(), T=30)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_single_cell_no_control(tmp_path):
    plan = ExperimentPlan("one", "control", replace(FAST, controller="none"), {"a": (0.0,)}, replications=1)
    res = run_plan(plan, out_dir=str(tmp_path))
    rows = read_csv(tmp_path / "one_long.csv")
    assert len(rows) == 1 == len(res.rows)
    assert float(rows[0]["mae"]) == pytest.approx(res.rows[0]["mae"])
    assert rows[0]["diverged"] == "0"
    assert (tmp_path / "one_summary.csv").exists() and (tmp_path / "one_plan.json").exists()


@pytest.fixture(scope="module")
def table1_grid(tmp_path_factory):
    out = tmp_path_factory.mktemp("grid")
    plan = ExperimentPlan("grid", "control", FAST, {"a": TABLE1_A, "lam": TABLE1_LAMBDA}, replications=10,
                          save_records=True)
    return plan, run_plan(plan, out_dir=str(out)), out


def test_table1_grid_row_count(table1_grid):
    plan, res, out = table1_grid
    rows = read_csv(out / "grid_long.csv")
    assert len(rows) == 250
    keys = [(float(r["a"]), float(r["lam"]), int(r["replication"])) for r in rows]
    assert keys == sorted(keys, key=lambda k: (TABLE1_A.index(k[0]), TABLE1_LAMBDA.index(k[1]), k[2]))
    summary = read_csv(out / "grid_summary.csv")
    assert len(summary) == 25 and all(s["n"] == "10" for s in summary)


def test_rows_recomputable_from_records(table1_grid):
    _, _, out = table1_grid
    rows = read_csv(out / "grid_long.csv")
    for row in random.Random(0).sample(rows, 5):
        rec = read_csv(out / "grid_records" / row["record"])
        frob = np.array([float(r["frob"]) for r in rec])
        assert int(row["runs"]) == len(rec)
        if row["diverged"] == "1":
            assert row["mae"] == "INF" and rec[-1]["diverged"] == "1"
        else:
            assert float(row["mae"]) == pytest.approx(frob.mean(), rel=1e-12)
            assert float(rec[-1]["mae_running"]) == pytest.approx(float(row["mae"]), rel=1e-12)


def test_byte_identical_and_parallel_invariant(tmp_path):
    plan = ExperimentPlan("det", "control", FAST, {"a": (-0.6, 0.0), "lam": (0.3, 0.9)}, replications=2,
                          save_records=True)
    for sub, jobs in (("a", 1), ("b", 1), ("c", 2)):
        run_plan(plan, jobs=jobs, out_dir=str(tmp_path / sub))
    for name in ("det_long.csv", "det_summary.csv", "det_plan.json", "det_records/row00003_run.csv"):
        ref = (tmp_path / "a" / name).read_bytes()
        assert (tmp_path / "b" / name).read_bytes() == ref
        assert (tmp_path / "c" / name).read_bytes() == ref


def test_estimation_and_monitoring_plans_run():
    est = run_plan(ExperimentPlan("e", "estimation", replace(FAST, estimator="alg1"), {"a": (0.0, 2.0)},
                                  replications=2))
    assert len(est.rows) == 4 and all(r["pee"] >= 0 for r in est.rows)
    mon_base = replace(FAST, phase1_runs=300, noise=replace(FAST.noise, t_c=11))
    mon = run_plan(ExperimentPlan("m", "monitoring", mon_base, {"case": ("var_shift",)}, replications=2,
                                  reps_per_plant=2))
    assert len(mon.rows) == 2
    assert all(isinstance(r["q_within3"], bool) for r in mon.rows)


@pytest.mark.parametrize("kw", [
    dict(kind="bogus"),
    dict(axes={"a": ()}),
    dict(axes={"colour": (1,)}),
    dict(replications=0),
    dict(axes={"controller": ("pid",)}),
])
def test_plan_validation(kw):
    args = dict(name="x", kind="control", base=FAST, axes={"a": (0.0,)})
    args.update(kw)
    with pytest.raises(ValueError):
        ExperimentPlan(**args)


def test_plan_and_scenario_round_trip():
    plan = plans_for("table2")["table2"]
    back = ExperimentPlan.from_dict(json.loads(json.dumps(plan.to_dict())))
    assert back.to_dict() == plan.to_dict()
    sc = replace(Scenario(), a=-0.3, controller="zhong", online=DisturbanceSpec.arima(0.25, 0.5, sd=0.005))
    assert Scenario.from_dict(json.loads(json.dumps(sc.to_dict()))).to_dict() == sc.to_dict()
    with pytest.raises(ValueError):
        Scenario.from_dict({"colour": 1})


def test_disturbance_labels():
    for spec in (DisturbanceSpec.iid(0.1), DisturbanceSpec.ima(0.3, 0.1), DisturbanceSpec.arima(0.75, 0.5, 0.1)):
        assert parse_disturbance(disturbance_label(spec), 0.1) == spec
    with pytest.raises(ValueError):
        parse_disturbance("ima(0.1,0.2)", 1.0)
    with pytest.raises(ValueError):
        parse_disturbance("garch", 1.0)


def test_builtin_plan_shapes():
    t1 = plans_for("table1")
    assert len(t1["table1"].cells()) == 25 and t1["table1"].replications == 10
    assert len(t1["sweep"].cells()) == 40
    assert len(plans_for("table3")["table3"].cells()) == 18
    assert plans_for("figure4")["figure4"].replications == 50
    with pytest.raises(ValueError):
        plans_for("table9")


def test_reproduce_table2_outputs(tmp_path):
    rep = reproduce("table2", out_dir=str(tmp_path), replications=2)
    rows = read_csv(tmp_path / "table2" / "table2.csv")
    assert [r["controller"] for r in rows] == ["EWMA (lambda=0.5)", "Zhong et al. baseline", "without control"]
    assert list(rows[0])[1:] == ["ima(0.3)", "ima(0.5)", "ima(0.7)"]
    lines = (tmp_path / "table2" / "criteria.txt").read_text().splitlines()
    assert lines == rep.lines() and lines[0].startswith(("PASS criterion 5", "FAIL criterion 5"))
