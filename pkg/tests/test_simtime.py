import csv
import io
import math

import pytest

from ftrecover.errors import InvalidConfig
from ftrecover.simtime import (
    STRATEGIES,
    FailureProcess,
    Workload,
    load_workload,
    rows_to_csv,
    simulate_training,
    speedup,
    sweep,
)

MTBF = FailureProcess(17.0, seed=0)


def test_no_failures_means_failure_free_time():
    for name in ("wide-resnet-50", "bert-128", "vit-128-32"):
        w = load_workload(name)
        base = w.failure_free_seconds() / 3600
        assert base == pytest.approx(w.failure_free_hours, rel=1e-12)
        for s in ("GlobalCkpt", "Replication", w.primary_strategy):
            res = simulate_training(w, s, FailureProcess(math.inf), repetitions=2)
            assert res.mean_failures == 0
            assert res.mean_hours == pytest.approx(base, rel=1e-12)


def test_dominance_holds_per_run():
    w = load_workload("bert-128")
    for seed in range(5):
        proc = FailureProcess(17.0, seed)
        g = simulate_training(w, "GlobalCkpt", proc).totals_hours
        lg = simulate_training(w, "Logging", proc).totals_hours
        par = simulate_training(w, "LoggingParallel", proc).totals_hours
        assert all(a <= b <= c for a, b, c in zip(par, lg, g))


def test_fixed_seed_is_reproducible():
    w = load_workload("wide-resnet-50")
    a = simulate_training(w, "GlobalCkpt", FailureProcess(17.0, 3))
    b = simulate_training(w, "GlobalCkpt", FailureProcess(17.0, 3))
    c = simulate_training(w, "GlobalCkpt", FailureProcess(17.0, 4))
    assert a == b and a.totals_hours != c.totals_hours


def test_failure_counts_follow_the_mtbf():
    w = load_workload("wide-resnet-50")
    res = simulate_training(w, "GlobalCkpt", MTBF)
    assert res.mean_failures == round(w.failure_free_hours / 17.0)
    expo = simulate_training(w, "GlobalCkpt", FailureProcess(17.0, 0, "exponential"))
    assert 0 < expo.mean_failures < res.mean_failures  # exponential with median 17 h has a longer mean gap


def test_speedups_by_workload():
    got = {n: speedup(load_workload(n), MTBF)["speedup"] for n in ("wide-resnet-50", "bert-128", "vit-128-32")}
    assert got["wide-resnet-50"] > got["bert-128"] > got["vit-128-32"] > 1.0


def test_global_checkpoint_interval_curve_is_u_shaped():
    w = load_workload("wide-resnet-50")
    values = [100, 300, 1000, 5004, 20000]
    rows = sweep(w, ["GlobalCkpt"], "checkpoint_interval", values, MTBF)
    hours = [r["mean_hours"] for r in rows]
    best = hours.index(min(hours))
    assert 0 < best < len(values) - 1


def test_replication_barely_cares_about_checkpoint_interval():
    w = load_workload("wide-resnet-50")
    rows = sweep(w, ["Replication"], "checkpoint_interval", [1000, 5004, 20000], MTBF)
    hours = [r["mean_hours"] for r in rows]
    assert (max(hours) - min(hours)) / min(hours) < 0.01


def test_advantage_grows_as_failures_get_more_frequent():
    w = load_workload("wide-resnet-50")
    rows = sweep(w, ["GlobalCkpt", "Replication"], "mtbf", [34.0, 17.0, 8.5, 4.0], MTBF)
    by = {}
    for r in rows:
        by.setdefault(r["mtbf"], {})[r["strategy"]] = r["mean_hours"]
    ratios = [by[v]["GlobalCkpt"] / by[v]["Replication"] for v in (34.0, 17.0, 8.5, 4.0)]
    assert ratios == sorted(ratios)


def test_csv_rows():
    w = load_workload("vit-128-32")
    text = rows_to_csv(sweep(w, ["GlobalCkpt", "LoggingParallel"], "mtbf", [10.0], MTBF, repetitions=2))
    rows = list(csv.DictReader(io.StringIO(text)))
    assert [r["strategy"] for r in rows] == ["GlobalCkpt", "LoggingParallel"]
    assert set(rows[0]) == {"mtbf", "strategy", "mean_hours", "mean_failures"}


def test_bad_inputs(tmp_path):
    w = load_workload("bert-128")
    with pytest.raises(InvalidConfig):
        simulate_training(w, "Magic", MTBF)
    with pytest.raises(InvalidConfig):
        simulate_training(w, "GlobalCkpt", MTBF, repetitions=0)
    with pytest.raises(InvalidConfig):
        sweep(w, ["GlobalCkpt"], "mtbf", [], MTBF)
    with pytest.raises(InvalidConfig):
        FailureProcess(1.0, 0, "poisson").points(100.0, 0)
    with pytest.raises(InvalidConfig):
        simulate_training(load_workload("wide-resnet-50"), "Logging", MTBF)  # no replay fraction
    with pytest.raises(InvalidConfig):
        Workload("x", 10, 1, 1.0, 3600.0, 0, 0)  # checkpoints cost more than the whole run
    with pytest.raises(InvalidConfig):
        load_workload(tmp_path / "nope.json")
    assert set(STRATEGIES) >= {w.primary_strategy}
