import csv
import json

import numpy as np
import pytest

from sccl.cli import EXIT_ABORT, EXIT_CONFIG, EXIT_OK, ConfigError, main, read_config
from sccl.metrics import MetricsReport

SMALL = """
[synthetic]
n_tasks = 2
train_per_label = 12
test_per_label = 5

[train]
hash_dim = 64
hidden = 16
out_dim = 8
batch_size = 8
epochs = 2
base_lr = 1e-2
replay_freq = 2
memory_per_task = 10
clusters_per_label = 2
"""


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "small.ini"
    path.write_text(SMALL)
    return path


@pytest.fixture
def finished_run(config, tmp_path):
    out = tmp_path / "out"
    assert main(["run", "--config", str(config), "--out", str(out), "--seeds", "0"]) == EXIT_OK
    return out / "seed0"


def test_run_single_seed_writes_run_directory(finished_run):
    for name in ("config.json", "loss_log.csv", "rmatrix.csv", "metrics.json", "checkpoints/encoder_task0.json",
                 "checkpoints/encoder_task1.json", "buffer/exemplars.jsonl", "buffer/manifest.json"):
        assert (finished_run / name).is_file(), name
    with open(finished_run / "loss_log.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["step", "task", "loss_cl", "loss_ird", "lr", "replay_flag"]
    assert any(r["replay_flag"] == "1" for r in rows)
    report = MetricsReport.from_json((finished_run / "metrics.json").read_text())
    assert 0.0 <= report.acc <= 1.0


def test_five_seeds_aggregate(config, tmp_path):
    out = tmp_path / "agg"
    assert main(["run", "--config", str(config), "--out", str(out), "--seeds", "0,1,2,3,4"]) == EXIT_OK
    agg = json.loads((out / "aggregate.json").read_text())
    assert agg["seeds"] == [0, 1, 2, 3, 4] and len(agg["acc"]) == 5
    assert agg["acc_mean"] == pytest.approx(np.mean(agg["acc"]))
    assert agg["acc_std"] == pytest.approx(np.std(agg["acc"], ddof=1))


def test_both_sources_is_config_error(tmp_path, capsys):
    (tmp_path / "order.txt").write_text("a.jsonl\n")
    path = tmp_path / "bad.ini"
    path.write_text("[data]\nmanifest = order.txt\n[synthetic]\nn_tasks = 2\n")
    assert main(["run", "--config", str(path)]) == EXIT_CONFIG
    assert "exactly one data source" in capsys.readouterr().err


@pytest.mark.parametrize("body", ["[train]\nmode = sccl\n", "[synthetic]\nbogus = 1\n",
                                  "[synthetic]\n[train]\nreplay_freq = 0\n", "[synthetic]\n[train]\nwhat = 1\n"])
def test_bad_configs_rejected(tmp_path, body):
    path = tmp_path / "c.ini"
    path.write_text(body)
    with pytest.raises(ConfigError):
        read_config(path)


def test_missing_config_file_exit_code(tmp_path):
    assert main(["run", "--config", str(tmp_path / "nope.ini")]) == EXIT_CONFIG


def test_empty_synthetic_section_keeps_default_hyperparameters(tmp_path):
    path = tmp_path / "c.ini"
    path.write_text("[synthetic]\n")
    cc = read_config(path)
    assert (cc.train.batch_size, cc.train.epochs, cc.train.base_lr, cc.train.replay_freq) == (96, 10, 3e-5, 100)
    assert cc.seeds == [0]


def test_temperature_keys_and_manifest_source(tmp_path):
    (tmp_path / "t.jsonl").write_text('{"text": "a b", "label": "x", "split": "train"}\n')
    (tmp_path / "order.txt").write_text("t.jsonl\n")
    path = tmp_path / "c.ini"
    path.write_text("[data]\nmanifest = order.txt\n[train]\nT_infer = 2.5\nkappa = 0.1\n")
    cc = read_config(path)
    assert cc.train.temperatures.T_infer == 2.5 and cc.train.temperatures.kappa == 0.1
    assert cc.source["manifest"].endswith("order.txt")


def test_abort_exit_code_keeps_partial_logs(config, tmp_path, monkeypatch):
    import sccl.trainer as tr

    real = tr.total_loss
    calls = {"n": 0}

    def poisoned(*args, **kw):
        parts = real(*args, **kw)
        calls["n"] += 1
        if calls["n"] == 4:
            parts.total.value[...] = np.inf
        return parts

    monkeypatch.setattr(tr, "total_loss", poisoned)
    out = tmp_path / "abort"
    assert main(["run", "--config", str(config), "--out", str(out)]) == EXIT_ABORT
    assert (out / "seed0" / "ABORTED").is_file()
    assert len((out / "seed0" / "loss_log.csv").read_text().splitlines()) == 1 + 3


def test_ablate_table_shape(config, tmp_path):
    out = tmp_path / "abl"
    assert main(["ablate", "--config", str(config), "--out", str(out), "--seeds", "0"]) == EXIT_OK
    with open(out / "ablation.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["mode", "acc", "acc_std", "bwt", "bwt_std"]
    assert [r[0] for r in rows[1:]] == ["sccl", "sccl_no_mr", "sccl_no_ird", "cl_only", "ce_baseline"]


def test_sweep_k_default_list_and_consistency(finished_run):
    assert main(["sweep-k", str(finished_run)]) == EXIT_OK
    with open(finished_run / "sweep_k.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [int(r["k"]) for r in rows] == [1, 5, 10, 20, 50]
    report = MetricsReport.from_json((finished_run / "metrics.json").read_text())
    assert float(next(r for r in rows if r["k"] == "10")["acc"]) == report.acc
    assert next(r for r in rows if r["k"] == "50")["clamped"] == "1"


def test_sweep_k_missing_run_dir(tmp_path):
    assert main(["sweep-k", str(tmp_path / "missing")]) != 0


def test_dump_embeddings(finished_run):
    assert main(["dump-embeddings", str(finished_run), "--task", "1"]) == EXIT_OK
    npy = finished_run / "embeddings" / "task1.npy"
    labels = finished_run / "embeddings" / "task1_labels.csv"
    reps = np.load(npy)
    with open(labels) as fh:
        rows = list(csv.DictReader(fh))
    exemplars = sum(1 for line in (finished_run / "buffer" / "exemplars.jsonl").read_text().splitlines()
                    if json.loads(line)["task"] == 1)
    assert len(reps) == len(rows) == 10 + exemplars
    np.testing.assert_allclose(np.linalg.norm(reps, axis=1), 1.0, atol=1e-6)
    first = npy.read_bytes(), labels.read_bytes()
    assert main(["dump-embeddings", str(finished_run), "--task", "1"]) == EXIT_OK
    assert (npy.read_bytes(), labels.read_bytes()) == first


def test_dump_unknown_task(finished_run):
    assert main(["dump-embeddings", str(finished_run), "--task", "9"]) == EXIT_CONFIG


def test_repeat_run_is_byte_identical(config, tmp_path):
    for name in ("a", "b"):
        assert main(["run", "--config", str(config), "--out", str(tmp_path / name)]) == EXIT_OK
    for f in ("metrics.json", "rmatrix.csv", "loss_log.csv"):
        assert (tmp_path / "a" / "seed0" / f).read_bytes() == (tmp_path / "b" / "seed0" / f).read_bytes()
