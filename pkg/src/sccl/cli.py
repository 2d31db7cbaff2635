"""Command-line entry point: ``sccl {run,ablate,sweep-k,dump-embeddings}``.

Configs are INI files::

    [synthetic]          ; or [data] with manifest = path/to/order.txt
    n_tasks = 4

    [train]
    mode = sccl
    base_lr = 3e-3

    [run]
    seeds = 0,1,2,3,4
    out = runs/demo

Anything left out keeps its library default.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import io
import json
import logging
import statistics
import sys
from dataclasses import dataclass, fields
from pathlib import Path

from .data import DatasetError
from .losses import TemperatureConfig
from .metrics import knn_sweep, sweep_to_csv
from .rundir import SYNTHETIC_KEYS, build_sequence, dump_embeddings, execute, load_run
from .trainer import MODES, RunConfig, TrainingAborted

log = logging.getLogger("sccl")

EXIT_OK, EXIT_CONFIG, EXIT_ABORT = 0, 1, 2
DEFAULT_K_LIST = (1, 5, 10, 20, 50)


class ConfigError(ValueError):
    pass


@dataclass
class CliConfig:
    train: RunConfig
    source: dict
    seeds: list[int]
    out: Path


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.replace(" ", "").split(",") if x]
    except ValueError as e:
        raise ConfigError(f"expected a comma-separated list of integers, got {text!r}") from e


_TEMPERATURE_KEYS = {"kappa", "tau", "T_infer"}


def _train_overrides(section) -> dict:
    types = {f.name: f.type for f in fields(RunConfig)}
    out, temps = {}, {}
    for key, raw in section.items():
        if key in _TEMPERATURE_KEYS:
            temps[key] = float(raw)
        elif key == "hidden":
            out[key] = tuple(_int_list(raw))
        elif key in types and key != "temperatures":
            kind = types[key]
            out[key] = raw if kind == "str" else float(raw) if kind == "float" else int(raw)
        else:
            raise ConfigError(f"unknown [train] key {key!r}")
    if temps:
        out["temperatures"] = TemperatureConfig(**temps)
    return out


def _synthetic(section) -> dict:
    spec = {}
    for key, raw in section.items():
        if key not in SYNTHETIC_KEYS:
            raise ConfigError(f"unknown [synthetic] key {key!r}")
        spec[key] = float(raw) if key in ("noise_rate", "concentration") else int(raw)
    return spec


def read_config(path, seeds: str | None = None, mode: str | None = None, out: str | None = None) -> CliConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    # keep key case so T_infer survives
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    parser.optionxform = str
    try:
        parser.read(path)
    except configparser.Error as e:
        raise ConfigError(str(e)) from e
    unknown = set(parser.sections()) - {"data", "synthetic", "train", "run"}
    if unknown:
        raise ConfigError(f"unknown sections: {sorted(unknown)}")

    has_manifest = parser.has_option("data", "manifest")
    has_synth = parser.has_section("synthetic")
    if has_manifest == has_synth:
        raise ConfigError("specify exactly one data source: [data] manifest or a [synthetic] section")
    if has_manifest:
        manifest = (path.parent / parser.get("data", "manifest")).resolve()
        if not manifest.is_file():
            raise ConfigError(f"manifest not found: {manifest}")
        source = {"manifest": str(manifest)}
    else:
        try:
            source = {"synthetic": _synthetic(parser["synthetic"])}
        except ValueError as e:
            raise ConfigError(f"[synthetic]: {e}") from e

    try:
        overrides = _train_overrides(parser["train"]) if parser.has_section("train") else {}
        if mode is not None:
            overrides["mode"] = mode
        train = RunConfig(**overrides)
    except (ValueError, TypeError) as e:
        raise ConfigError(f"[train]: {e}") from e

    run = parser["run"] if parser.has_section("run") else {}
    seed_list = _int_list(seeds if seeds is not None else run.get("seeds", "0"))
    if not seed_list:
        raise ConfigError("no seeds given")
    out_dir = Path(out) if out is not None else (path.parent / run["out"] if "out" in run else Path("runs"))
    return CliConfig(train=train, source=source, seeds=seed_list, out=out_dir)


def _summary(values: list[float | None]) -> tuple[float | None, float | None]:
    vals = [v for v in values if v is not None]
    if not vals:
        return None, None
    return statistics.fmean(vals), statistics.stdev(vals) if len(vals) > 1 else 0.0


def run_seeds(cc: CliConfig, train: RunConfig, out: Path) -> dict:
    accs, bwts = [], []
    for seed in cc.seeds:
        cfg = train.with_(seed=seed)
        seq = build_sequence(cc.source, seed)
        _, report = execute(seq, cfg, cc.source, out / f"seed{seed}")
        log.info("mode=%s seed=%d acc=%.4f bwt=%s", cfg.mode, seed, report.acc, report.bwt)
        accs.append(report.acc)
        bwts.append(report.bwt)
    acc_mean, acc_std = _summary(accs)
    bwt_mean, bwt_std = _summary(bwts)
    agg = {"mode": train.mode, "seeds": cc.seeds, "acc": accs, "bwt": bwts,
           "acc_mean": acc_mean, "acc_std": acc_std, "bwt_mean": bwt_mean, "bwt_std": bwt_std}
    (out / "aggregate.json").write_text(json.dumps(agg, indent=2, sort_keys=True) + "\n")
    return agg


def cmd_run(args) -> int:
    cc = read_config(args.config, args.seeds, args.mode, args.out)
    agg = run_seeds(cc, cc.train, cc.out)
    print(f"{agg['mode']}: ACC {agg['acc_mean']:.4f} ± {agg['acc_std']:.4f} over {len(cc.seeds)} seed(s)")
    return EXIT_OK


def ablation_csv(aggs: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["mode", "acc", "acc_std", "bwt", "bwt_std"])
    for a in aggs:
        w.writerow([a["mode"]] + ["" if a[k] is None else repr(a[k])
                                  for k in ("acc_mean", "acc_std", "bwt_mean", "bwt_std")])
    return buf.getvalue()


def cmd_ablate(args) -> int:
    cc = read_config(args.config, args.seeds, None, args.out)
    aggs = [run_seeds(cc, cc.train.with_(mode=m), cc.out / m) for m in MODES]
    (cc.out / "ablation.csv").write_text(ablation_csv(aggs))
    for a in aggs:
        bwt = "n/a" if a["bwt_mean"] is None else f"{a['bwt_mean']:+.4f}"
        print(f"{a['mode']:<12} ACC {a['acc_mean']:.4f}  BWT {bwt}")
    return EXIT_OK


def cmd_sweep_k(args) -> int:
    run = load_run(args.run_dir)
    if run.cfg.mode == "ce_baseline":
        raise ConfigError("ce_baseline runs are scored by linear heads, not kNN")
    ks = _int_list(args.k_list) if args.k_list else list(DEFAULT_K_LIST)
    rows = knn_sweep(run, run.seq, ks, run.cfg.temperatures.T_infer)
    text = sweep_to_csv(rows)
    target = Path(args.out) if args.out else run.path / "sweep_k.csv"
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_dump_embeddings(args) -> int:
    run = load_run(args.run_dir)
    npy, labels = dump_embeddings(run, args.task, args.out)
    print(f"wrote {npy} and {labels}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sccl", description="Supervised contrastive continual learning experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    for name, fn, help_ in (("run", cmd_run, "train one mode over the configured seeds"),
                            ("ablate", cmd_ablate, "train all five modes and tabulate ACC/BWT")):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", required=True)
        s.add_argument("--out", help="output directory (overrides [run] out)")
        s.add_argument("--seeds", help="comma-separated seeds (overrides [run] seeds)")
        if name == "run":
            s.add_argument("--mode", choices=MODES)
        s.set_defaults(func=fn)

    s = sub.add_parser("sweep-k", help="re-score a finished run under several k")
    s.add_argument("run_dir")
    s.add_argument("--k-list", help="comma-separated k values (default 1,5,10,20,50)")
    s.add_argument("--out", help="CSV path (default RUN_DIR/sweep_k.csv)")
    s.set_defaults(func=cmd_sweep_k)

    s = sub.add_parser("dump-embeddings", help="write final representations of a task's test set and exemplars")
    s.add_argument("run_dir")
    s.add_argument("--task", type=int, required=True)
    s.add_argument("--out", help="directory (default RUN_DIR/embeddings)")
    s.set_defaults(func=cmd_dump_embeddings)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, DatasetError, FileNotFoundError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingAborted as e:
        print(f"aborted: {e}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
