from importlib import resources

import numpy as np
import pytest

from ftrecover.config import load_config
from ftrecover.errors import NoReplica, Unrecoverable
from ftrecover.job import TrainingJob, Worker
from ftrecover.model import build_stage
from ftrecover.optimizers import OptimizerHyper
from ftrecover.pipeline import apply_layerwise_updates
from ftrecover.recovery import (
    GLOBAL_ROLLBACK,
    LOGGING_REPLAY,
    PARALLEL_REPLAY,
    REPLICATION,
    apply_undo,
    consensus_iteration,
    plan_multi_failure,
    replay_scope,
    replication_donors,
)
from ftrecover.runner import run_training, verify

from conftest import make_config


def scenario(name):
    return load_config(resources.files("ftrecover.data.scenarios").joinpath(f"{name}.json"))


def test_consensus_is_the_slowest_survivor():
    assert consensus_iteration([5, 4, 5, 5]) == 4
    assert consensus_iteration([7]) == 7
    with pytest.raises(Unrecoverable):
        consensus_iteration([])


def one_worker(kind="Adam", layers=3):
    stage = build_stage(0, layers, 4, seed=2)
    hyper = OptimizerHyper(kind, lr=0.05)
    grads = [(np.full((4, 4), 0.3), np.full(4, -0.2))] * layers
    apply_layerwise_updates(stage, grads, hyper)  # one committed step so moments are non-trivial
    for _, b in stage.blocks():
        b.updated_flag = False
    return Worker(0, 0, 0, stage, iteration=1), grads, hyper


def test_partial_update_is_undone():
    w, grads, hyper = one_worker()
    before = w.stage.copy()
    apply_layerwise_updates(w.stage, grads, hyper, interrupt_after=1)
    assert apply_undo(w, 1, hyper) == 2  # weight and bias of the last layer
    for (_, a), (_, b) in zip(w.stage.blocks(), before.blocks()):
        np.testing.assert_allclose(a.x, b.x, rtol=1e-12, atol=1e-15)
        assert a.t == b.t and not a.updated_flag
    assert w.iteration == 1


def test_worker_ahead_of_consensus_undoes_everything():
    w, grads, hyper = one_worker("SGDM")
    before = w.stage.copy()
    apply_layerwise_updates(w.stage, grads, hyper)
    w.iteration = 2
    assert apply_undo(w, 1, hyper) == 6
    for (_, a), (_, b) in zip(w.stage.blocks(), before.blocks()):
        np.testing.assert_allclose(a.x, b.x, rtol=1e-12, atol=1e-15)


def test_worker_at_consensus_keeps_its_finished_update():
    w, grads, hyper = one_worker()
    apply_layerwise_updates(w.stage, grads, hyper)
    w.iteration = 2
    after = w.stage.copy()
    assert apply_undo(w, 2, hyper) == 0
    assert w.stage.same_state(after)


def test_replication_repairs_a_mid_update_crash(tmp_path):
    res = verify(scenario("replication_midupdate"), tmp_path)
    assert res["passed"], res
    (rec,) = res["recoveries"]
    assert rec["strategy"] == REPLICATION and rec["undone_blocks"] > 0


def test_no_replica_to_copy_from(tmp_path):
    job = TrainingJob(make_config(), tmp_path)
    with pytest.raises(NoReplica):
        replication_donors(job, [2, 3], {1})


def test_failure_on_a_checkpoint_replays_nothing(tmp_path):
    cfg = make_config(strategy="logging", failures=[{"machine": 2, "iteration": 20}])
    run = run_training(cfg, tmp_path / "a")
    (rec,) = run.recoveries
    assert rec["strategy"] == LOGGING_REPLAY and rec["iterations_replayed"] == 0
    ghost = run_training(make_config(strategy="logging"), tmp_path / "b")
    assert run.trajectory[30] == ghost.trajectory[30]


def test_parallel_assignment_round_robins_micro_batches(tmp_path):
    cfg = make_config(
        strategy="logging",
        logging={"parallel_recovery": True, "helpers": 2},
        failures=[{"machine": 1, "iteration": 25}],
    )
    run = run_training(cfg, tmp_path)
    (rec,) = run.recoveries
    assert rec["strategy"] == PARALLEL_REPLAY
    assert rec["plan"]["assignments"] == {"0": [0, 2], "1": [1, 3]}
    assert rec["replay"][0]["helper_machines"] == [0]


def six_machine_job(tmp_path):
    return TrainingJob(make_config(topology={"machines": 6, "stages": 6, "micro_batches": 2}), tmp_path)


def test_adjacent_failures_replay_jointly(tmp_path):
    job = six_machine_job(tmp_path)
    assert plan_multi_failure(job, [3, 2]) == [[2, 3]]
    assert plan_multi_failure(job, [1, 5]) == [[1], [5]]
    assert plan_multi_failure(job, [1, 3]) == [[1], [3]]


def test_scope_grows_to_groups_and_replicas(tmp_path):
    cfg = make_config(logging={"groups": [[0, 1], [2], [3]]})
    job = TrainingJob(cfg, tmp_path / "a")
    assert replay_scope(job, [1]) == [0, 1]
    rep = make_config(topology={"machines": 4, "stages": 4, "micro_batches": 2, "replicas": 2})
    job = TrainingJob(rep, tmp_path / "b")
    assert replay_scope(job, [0]) == [0, 2]


def test_independent_double_failure(tmp_path):
    cfg = make_config(
        topology={"machines": 6, "stages": 6, "micro_batches": 2},
        strategy="logging",
        failures=[{"machine": 1, "iteration": 15}, {"machine": 4, "iteration": 15}],
    )
    res = verify(cfg, tmp_path)
    assert res["passed"] and res["bit_identical"]


def test_cascade_is_merged_into_the_running_unit(tmp_path):
    run = run_training(scenario("cascade"), tmp_path / "run")
    (rec,) = run.recoveries
    assert rec["cascades"] == [{"machine": 2, "after_replayed": 4, "merged": True}]
    assert rec["plan"]["units"] == [[1, 2]]
    assert rec["survivors_unchanged"]
    ghost = run_training(make_config(**{k: v for k, v in scenario("cascade").raw.items() if k != "failures"}), tmp_path / "g")
    assert run.trajectory[60] == ghost.trajectory[60]


def test_survivors_are_not_touched_by_replay(tmp_path):
    run = run_training(make_config(strategy="logging", failures=[{"machine": 2, "iteration": 26}]), tmp_path)
    (rec,) = run.recoveries
    assert rec["survivors_unchanged"] is True
    assert rec["replay"][0]["scope_machines"] == [2]
    assert rec["iterations_replayed"] == 6


def test_missing_logs_fall_back_to_global_rollback(tmp_path):
    cfg = make_config(strategy="logging", failures=[{"machine": 1, "iteration": 25}])

    def lose_logs(job):
        if job.next_iteration == 24:
            log = job.logger.local[0]
            for path in list(log.chunks):
                path.unlink()
            log.chunks.clear()

    run = run_training(cfg, tmp_path / "a", on_iteration=lose_logs)
    (rec,) = run.recoveries
    assert rec["strategy"] == GLOBAL_ROLLBACK
    assert rec["fallback"].startswith("missing log data")
    assert rec["iterations_rolled_back"] == 5
    ghost = run_training(make_config(strategy="logging"), tmp_path / "b")
    assert run.trajectory[30] == ghost.trajectory[30]


def test_non_invertible_optimizer_rolls_back_globally(tmp_path):
    res = verify(scenario("amsgrad_rollback"), tmp_path)
    assert res["passed"] and res["bit_identical"]
    run = run_training(scenario("amsgrad_rollback"), tmp_path / "again")
    (rec,) = run.recoveries
    assert rec["strategy"] == GLOBAL_ROLLBACK and "undo impossible" in rec["fallback"]


def test_logs_past_the_consensus_are_discarded(tmp_path):
    cfg = make_config(strategy="logging", failures=[{"machine": 1, "iteration": 25, "phase": "MidIteration(5)"}])
    seen = []

    def look(job):
        newest = max((i.max_iteration for log in job.logger.local.values() for i in log.chunks.values()), default=-1)
        seen.append((job.next_iteration, newest, job.logger.pending_count()))

    run_training(cfg, tmp_path, until=26, on_iteration=look)
    after_recovery = [s for s in seen if s[0] == 25][1]
    assert after_recovery[1] < 25 and after_recovery[2] == 0
    assert seen[-1][1] == 25  # the re-run iteration is logged again


@pytest.mark.parametrize("name", ["multi_failure", "macro_parallel"])
def test_shipped_scenarios_verify(tmp_path, name):
    assert verify(scenario(name), tmp_path)["passed"]


def test_storage_budget_merges_groups_and_still_recovers(tmp_path):
    cfg = make_config(strategy="logging", logging={"storage_budget": 1.0}, failures=[{"machine": 2, "iteration": 24}])
    job = TrainingJob(cfg, tmp_path / "probe")
    assert job.groups == [[0, 1, 2, 3]]  # a tiny budget means no logging
    cfg = make_config(strategy="logging", logging={"storage_budget": 55_000}, failures=[{"machine": 2, "iteration": 24}])
    job = TrainingJob(cfg, tmp_path / "probe2")
    assert 1 < len(job.groups) < 4
    assert job.cfg.checkpoint_interval * job.boundary_bytes_per_iteration() <= 55_000
    res = verify(cfg, tmp_path / "v")
    assert res["passed"] and res["recoveries"][0]["strategy"] == LOGGING_REPLAY
