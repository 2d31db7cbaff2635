import numpy as np
import pytest

from sccl import diffcore as dc
from sccl.data import TaskSequence, gen_synthetic_tasks
from sccl.encoder import encode_batch
from sccl.losses import supcon_loss
from sccl.trainer import (
    RunConfig,
    TrainingAborted,
    finish_task,
    init_state,
    replay_schedule,
    run_sequence,
    train_task,
)

TINY = dict(hash_dim=64, hidden=(16,), out_dim=8, batch_size=8, epochs=2, base_lr=1e-2, replay_freq=3,
            memory_per_task=10, clusters_per_label=2)


def tiny(mode="sccl", **kw):
    return RunConfig(mode=mode, **{**TINY, **kw})


@pytest.fixture(scope="module")
def seq():
    return gen_synthetic_tasks(3, 2, 12, 6, 60, 0)


def test_schedule_examples():
    assert replay_schedule(200, 100) == [100, 200]
    assert replay_schedule(350, 100) == [100, 200, 300]
    assert replay_schedule(5, 10) == []


def test_replay_fires_at_100_200_300_of_350_steps():
    seq = gen_synthetic_tasks(2, 2, 70, 2, 60, 1)
    cfg = tiny(batch_size=4, epochs=10, replay_freq=100, base_lr=1e-3)
    state, report = run_sequence(seq, cfg)
    assert state.steps == 700
    assert state.replay_at == [(1, 100), (1, 200), (1, 300)]
    assert report.optimizer_updates == 703


def test_no_replay_in_first_task(seq):
    state, _ = run_sequence(seq, tiny(replay_freq=1))
    assert all(task != 0 for task, _ in state.replay_at)
    assert any(task == 1 for task, _ in state.replay_at)


def test_step_accounting_matches_schedule(seq):
    cfg = tiny()
    state, report = run_sequence(seq, cfg)
    per_task = state.steps // len(seq)
    expected_replays = len(replay_schedule(per_task, cfg.replay_freq)) * (len(seq) - 1)
    assert report.replay_steps == expected_replays == state.replay_steps
    assert report.optimizer_updates == report.steps + report.replay_steps
    assert sum(r.replay for r in state.loss_log) == expected_replays


@pytest.mark.parametrize("mode,replays", [("sccl_no_mr", False), ("cl_only", False), ("ce_baseline", False),
                                           ("sccl_no_ird", True)])
def test_mode_switches(seq, mode, replays):
    state, _ = run_sequence(seq, tiny(mode))
    assert bool(state.replay_steps) == replays
    ird_logged = any(r.loss_ird is not None for r in state.loss_log)
    assert ird_logged == (mode == "sccl_no_mr")


def test_first_task_loss_is_pure_contrastive(seq):
    cfg = tiny()
    state = init_state(cfg, len(seq))
    task = seq.tasks[0]
    from sccl.data import batch_iter
    first = next(batch_iter(task, cfg.batch_size, cfg.seed, 0))
    expected = supcon_loss(encode_batch(state.encoder, first), [ex.label for ex in first], 0.2).item()
    train_task(state, task, cfg)
    assert all(r.loss_ird is None for r in state.loss_log)
    assert state.loss_log[0].loss_cl == expected


def test_sccl_and_no_ird_share_first_task_trajectory(seq):
    a = init_state(tiny("sccl"), len(seq))
    b = init_state(tiny("sccl_no_ird"), len(seq))
    train_task(a, seq.tasks[0], tiny("sccl"))
    train_task(b, seq.tasks[0], tiny("sccl_no_ird"))
    for (wa, ba), (wb, bb) in zip(a.encoder.layers, b.encoder.layers):
        assert wa.tobytes() == wb.tobytes() and ba.tobytes() == bb.tobytes()


def test_finish_task_bookkeeping(seq):
    cfg = tiny(memory_per_task=10)
    state = init_state(cfg, len(seq))
    train_task(state, seq.tasks[0], cfg)
    finish_task(state, seq.tasks[0], cfg)
    assert state.rmatrix.filled() == 1
    assert len(state.buffer) == min(10, len(seq.tasks[0].train))
    # snapshot after task 0 equals the encoder entering task 1
    assert state.prev_snapshot.digest == state.encoder.digest()
    train_task(state, seq.tasks[1], cfg)
    assert state.prev_snapshot.unchanged()
    assert state.prev_snapshot.digest != state.encoder.digest()


def test_buffer_grows_by_whole_split_when_small(seq):
    cfg = tiny(memory_per_task=500)
    state, _ = run_sequence(seq, cfg)
    assert len(state.buffer) == sum(len(t.train) for t in seq)


def test_retraining_a_task_is_rejected(seq):
    cfg = tiny()
    state = init_state(cfg, len(seq))
    train_task(state, seq.tasks[0], cfg)
    finish_task(state, seq.tasks[0], cfg)
    with pytest.raises(ValueError):
        train_task(state, seq.tasks[0], cfg)


def test_rmatrix_is_lower_triangular_and_complete(seq):
    state, report = run_sequence(seq, tiny())
    rows = state.rmatrix.rows()
    assert [len(r) for r in rows] == [1, 2, 3]
    assert report.acc == pytest.approx(np.mean(rows[-1]))


def test_single_task_has_no_bwt(seq):
    one = TaskSequence([seq.tasks[0]], "one")
    _, report = run_sequence(one, tiny())
    assert report.bwt is None
    assert report.acc == report.rmatrix[0][0]


@pytest.mark.parametrize("mode", ["sccl", "ce_baseline"])
def test_runs_are_deterministic(seq, mode):
    _, a = run_sequence(seq, tiny(mode))
    _, b = run_sequence(seq, tiny(mode))
    assert a.to_json() == b.to_json()


def test_non_finite_loss_aborts(seq, monkeypatch):
    import sccl.trainer as tr

    real = tr.total_loss

    def poisoned(*args, **kw):
        parts = real(*args, **kw)
        parts.total.value[...] = np.nan
        return parts

    monkeypatch.setattr(tr, "total_loss", poisoned)
    with pytest.raises(TrainingAborted, match="step 1"):
        run_sequence(seq, tiny())


def test_config_validation_and_round_trip():
    with pytest.raises(ValueError):
        RunConfig(mode="bogus")
    with pytest.raises(ValueError):
        RunConfig(replay_freq=0)
    cfg = tiny()
    assert RunConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.digest() == RunConfig.from_dict(cfg.to_dict()).digest()
    default = RunConfig()
    assert (default.batch_size, default.epochs, default.base_lr, default.replay_freq) == (96, 10, 3e-5, 100)


def test_lr_decays_linearly_within_task(seq):
    state, _ = run_sequence(TaskSequence([seq.tasks[0]], "one"), tiny())
    lrs = [r.lr for r in state.loss_log if not r.replay]
    assert lrs[0] == TINY["base_lr"]
    assert all(b < a for a, b in zip(lrs, lrs[1:]))
    assert dc.linear_lr(1.0, 0, 4) == 1.0
