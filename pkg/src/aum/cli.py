"""``aum`` command line: features, train, eval, bench, ablate.

Every command writes into a run directory with a fixed layout::

    <run>/config.echo      resolved flat config
    <run>/manifest.json    command, argv, config hash, seed, artifacts, progress
    <run>/logs/
    <run>/artifacts/

``bench`` is the exception: it writes the CSV named by ``--out`` and puts
``<out>.manifest.json`` and ``<out>.summary.txt`` beside it.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import bench as bench_mod
from .config import RunConfig, dump_config, load_config
from .encoder import BlockVariant, ClsPosition, ConfigError, Model, load_checkpoint, save_checkpoint
from .features import (
    AudioFormatError,
    ManifestEntry,
    Spectrogram,
    load_waveform,
    log_mel_spectrogram,
    normalize,
    read_feature_record,
    read_manifest,
    write_feature_record,
    write_manifest,
)
from .runs import RunDir, new_manifest
from .synthetic import tone_noise_dataset
from .training import Adam, Dataset, LogRow, TrainState, evaluate, train

log = logging.getLogger("aum")

INDEX_NAME = "index.csv"
MODEL_CKPT = "model.ckpt"
STATE_CKPT = "state.ckpt"


class UsageError(Exception):
    pass


def worker_cap(requested: int) -> int:
    """Requested worker count, capped by ``AUM_THREADS`` when set."""
    env = os.environ.get("AUM_THREADS")
    cap = requested
    if env:
        try:
            cap = min(cap, int(env))
        except ValueError:
            raise UsageError(f"AUM_THREADS must be an integer, got {env!r}")
    return max(1, cap)


def _start(run: RunDir, command: str, argv, cfg: RunConfig, resume: bool = True) -> dict:
    run.create()
    run.config_echo.write_text(dump_config(cfg))
    prev = run.resumable(command, cfg.hash()) if resume else None
    if prev is not None:
        prev["argv"] = list(argv)
        return prev
    return new_manifest(command, argv, cfg.hash(), cfg.seed, cfg.to_flat())


# ---------------------------------------------------------------- features

def cmd_features(args, argv) -> int:
    cfg = load_config(args.config)
    entries, multilabel = read_manifest(args.manifest)
    run = RunDir(args.out)
    man = _start(run, "features", argv, cfg)
    done = set(man["completed"])
    fc = cfg.features

    def one(i: int) -> str:
        name = f"{i:06d}.aumf"
        if name not in done or not (run.artifacts / name).exists():
            spec = log_mel_spectrogram(load_waveform(entries[i].path), fc)
            write_feature_record(run.artifacts / name, spec.values)
        return name

    workers = worker_cap(args.workers)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        names = list(pool.map(one, range(len(entries))))
    records = [ManifestEntry(str(run.artifacts / n), e.labels) for n, e in zip(names, entries)]
    write_manifest(run.artifacts / INDEX_NAME, records, multilabel, relative_to=run.artifacts)
    man["completed"] = names
    man["artifacts"] = {"index": f"artifacts/{INDEX_NAME}", "records": len(names)}
    man["multilabel"] = multilabel
    man["workers"] = workers
    man["status"] = "complete"
    run.write_manifest(man)
    print(f"wrote {len(names)} feature records to {run.artifacts}")
    return 0


def load_feature_dir(data, num_classes: int, mean: float, std: float) -> Dataset:
    index = Path(data) / "artifacts" / INDEX_NAME
    if not index.exists():
        index = Path(data) / INDEX_NAME
    if not index.exists():
        raise UsageError(f"{data}: no feature index; run `aum features` first")
    entries, multilabel = read_manifest(index)
    specs = np.stack([normalize(Spectrogram(read_feature_record(e.path)), mean, std).values for e in entries])
    return Dataset.from_labels(specs, [e.labels for e in entries], num_classes, multilabel)


# ------------------------------------------------------------------- train

def _state_tensors(opt: Adam) -> dict[str, np.ndarray]:
    out = {}
    for k in opt.m:
        out[f"adam.m.{k}"] = opt.m[k]
        out[f"adam.v.{k}"] = opt.v[k]
    return out


def _write_log(path: Path, rows: list[LogRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "step", "lr", "loss", "metric"])
        for r in rows:
            w.writerow([r.epoch, r.step, repr(r.lr), repr(r.loss), repr(r.metric)])


def cmd_train(args, argv) -> int:
    cfg = load_config(args.config)
    fc, tc = cfg.features, cfg.train
    ds = load_feature_dir(args.data, cfg.model.num_classes, fc.dataset_mean, fc.dataset_std)
    if ds.multilabel != tc.multilabel:
        log.warning("feature index multilabel=%s but config multilabel=%s; using the index", ds.multilabel, tc.multilabel)
    run = RunDir(args.out)
    man = _start(run, "train", argv, cfg, resume=not args.fresh)
    model = Model.init(cfg.model, seed=tc.seed)
    state = None
    state_path = run.artifacts / STATE_CKPT
    if man.get("epochs_done") and state_path.exists():
        resumed, info = load_checkpoint(state_path)
        model = resumed
        extra, arrays = info["extra"], info["arrays"]
        opt = Adam(model.parameters(), tc.beta1, tc.beta2, tc.adam_eps, tc.weight_decay)
        for k in opt.m:
            opt.m[k][...] = arrays[f"adam.m.{k}"]
            opt.v[k][...] = arrays[f"adam.v.{k}"]
        opt.t = extra["adam_t"]
        state = TrainState(extra["epoch"], extra["step"], extra["rng_state"], opt,
                           [LogRow(**r) for r in extra["log"]])
        log.info("resuming %s at epoch %d", run.root, state.epoch)

    meta = {"features": asdict(fc), "train": asdict(tc), "seed": tc.seed}

    def checkpoint(st: TrainState) -> None:
        save_checkpoint(run.artifacts / MODEL_CKPT, model, extra=meta)
        save_checkpoint(
            state_path, model,
            extra={"epoch": st.epoch, "step": st.step, "rng_state": st.rng_state,
                   "adam_t": st.optimizer.t, "log": [asdict(r) for r in st.log]},
            tensors=_state_tensors(st.optimizer),
        )
        _write_log(run.logs / "train.csv", st.log)
        man["epochs_done"] = st.epoch
        man["artifacts"] = {"model": f"artifacts/{MODEL_CKPT}", "state": f"artifacts/{STATE_CKPT}",
                            "log": "logs/train.csv"}
        man["data"] = str(Path(args.data).resolve())
        run.write_manifest(man)

    st = train(model, ds, tc, state=state, on_epoch_end=checkpoint)
    if st.epoch == 0 or not (run.artifacts / MODEL_CKPT).exists():
        checkpoint(st)
    man["status"] = "complete"
    run.write_manifest(man)
    last = st.log[-1] if st.log else None
    if last:
        print(f"epoch {last.epoch} loss {last.loss:.5f} train_metric {last.metric:.4f}")
    print(f"checkpoint {run.artifacts / MODEL_CKPT}")
    return 0


# -------------------------------------------------------------------- eval

def resolve_checkpoint(path) -> Path:
    p = Path(path)
    if p.is_dir():
        p = p / "artifacts" / MODEL_CKPT
    if not p.exists():
        raise UsageError(f"no checkpoint at {p}")
    return p


def cmd_eval(args, argv) -> int:
    ckpt = resolve_checkpoint(args.ckpt)
    model, info = load_checkpoint(ckpt)
    feats = info["extra"].get("features", {})
    mean, std = feats.get("dataset_mean", 0.0), feats.get("dataset_std", 1.0)
    ds = load_feature_dir(args.data, model.config.num_classes, mean, std)
    m = evaluate(model, ds, args.task)
    if args.task == "acc":
        print(f"acc {m.acc:.4f}")
    else:
        print(f"mAP {m.mAP:.4f} (classes without positives skipped: {m.skipped_classes})")
    return 0


# ------------------------------------------------------------------- bench

def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def cmd_bench(args, argv) -> int:
    models = [m.strip().lower() for m in args.models.split(",") if m.strip()]
    unknown = [m for m in models if m not in bench_mod.MODELS]
    if unknown:
        raise UsageError(f"unknown models {unknown}; choose from {sorted(bench_mod.MODELS)}")
    limit = None if args.memory_limit_mb <= 0 else args.memory_limit_mb * 1024 * 1024
    report = bench_mod.measure(models, args.tokens, reps=args.reps, warmup=args.warmup,
                               depth=args.depth, memory_limit=limit, seed=args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    bench_mod.write_csv(report, out)
    text = bench_mod.summary(report)
    Path(f"{out}.summary.txt").write_text(text + "\n")
    artifacts = {"csv": str(out), "summary": f"{out}.summary.txt"}
    if args.gnuplot:
        bench_mod.write_gnuplot(report, args.gnuplot)
        artifacts["gnuplot"] = args.gnuplot
    flat = {"models": models, "tokens": args.tokens, "reps": args.reps, "warmup": args.warmup,
            "depth": args.depth, "memory_limit_mb": args.memory_limit_mb}
    h = hashlib.sha256(json.dumps(flat, sort_keys=True).encode()).hexdigest()
    man = new_manifest("bench", argv, h, args.seed, flat)
    man.update(artifacts=artifacts, status="complete", environment=report.environment)
    Path(f"{out}.manifest.json").write_text(json.dumps(man, indent=2, sort_keys=True) + "\n")
    print(text)
    return 0


# ------------------------------------------------------------------ ablate

VARIANTS = [BlockVariant.FOFO, BlockVariant.FOBI, BlockVariant.BIBI]
POSITIONS = [ClsPosition.HEAD, ClsPosition.MID, ClsPosition.END]


def ablation_cells() -> list[tuple[BlockVariant, ClsPosition]]:
    return [(v, p) for v in VARIANTS for p in POSITIONS]


def cell_name(v: BlockVariant, p: ClsPosition) -> str:
    return f"{v.name.title()}-{p.name.title()}"


def format_grid(results: dict[str, float]) -> str:
    head = ["variant"] + [p.name.title() for p in POSITIONS]
    lines = [" ".join(f"{h:>8}" for h in head)]
    for v in VARIANTS:
        cells = [results.get(cell_name(v, p)) for p in POSITIONS]
        lines.append(" ".join([f"{v.name.title():>8}"] + [f"{c:8.4f}" if c is not None else f"{'-':>8}" for c in cells]))
    return "\n".join(lines)


def cmd_ablate(args, argv) -> int:
    cfg = load_config(args.config)
    run = RunDir(args.out)
    man = _start(run, "ablate", argv, cfg)
    man.setdefault("results", {})
    man["train_size"], man["test_size"] = args.train_size, args.test_size
    fc = cfg.features
    train_ds, stats = tone_noise_dataset(args.train_size, seed=cfg.seed, cfg=fc)
    test_ds, _ = tone_noise_dataset(args.test_size, seed=cfg.seed + 1, cfg=fc, stats=stats)
    if cfg.model.num_classes != 2:
        raise ConfigError("ablate uses the 2-class toy set; set num_classes: 2")
    for v, p in ablation_cells():
        name = cell_name(v, p)
        if name in man["results"]:
            log.info("%s already done: %.4f", name, man["results"][name])
            continue
        mc = replace(cfg.model, variant=v, cls_position=p)
        model = Model.init(mc, seed=cfg.seed)
        st = train(model, train_ds, cfg.train)
        acc = evaluate(model, test_ds, "acc").acc
        _write_log(run.logs / f"{name}.csv", st.log)
        man["results"][name] = acc
        man["completed"].append(name)
        run.write_manifest(man)
        print(f"{name} acc {acc:.4f}", flush=True)
    grid = format_grid(man["results"])
    with open(run.artifacts / "grid.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant"] + [p.name.title() for p in POSITIONS])
        for v in VARIANTS:
            w.writerow([v.name.title()] + [repr(man["results"][cell_name(v, p)]) for p in POSITIONS])
    (run.artifacts / "grid.txt").write_text(grid + "\n")
    man["artifacts"] = {"grid": "artifacts/grid.csv", "table": "artifacts/grid.txt"}
    man["status"] = "complete"
    run.write_manifest(man)
    print(grid)
    return 0


# -------------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="aum", description="Audio Mamba toolkit")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("features", help="cache log-mel spectrograms for a WAV manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--workers", type=int, default=4)
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("train", help="train a classifier on cached features")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True, help="directory written by `aum features`")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--fresh", action="store_true", help="ignore an existing run and start over")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True, help="checkpoint file or train run directory")
    p.add_argument("--data", required=True)
    p.add_argument("--task", choices=["acc", "map"], default="acc")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="time and memory vs token count")
    p.add_argument("--tokens", type=_int_list, default=[512, 1024, 2048, 4096])
    p.add_argument("--models", default="aum-s,attn-s")
    p.add_argument("--out", required=True, help="CSV path")
    p.add_argument("--reps", type=int, default=3)
    p.add_argument("--warmup", type=int, default=2)
    p.add_argument("--depth", type=int, default=1)
    p.add_argument("--memory-limit-mb", type=int, default=2048, help="0 disables the budget")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--gnuplot", default=None, help="optional gnuplot data file")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("ablate", help="block variant x class-token position grid on toy data")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default="runs/ablate", help="run directory")
    p.add_argument("--train-size", type=int, default=256)
    p.add_argument("--test-size", type=int, default=256)
    p.set_defaults(func=cmd_ablate)
    return ap


def run(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args, ["aum"] + argv)
    except (UsageError, ConfigError) as exc:
        print(f"aum {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, AudioFormatError, ValueError) as exc:
        print(f"aum {args.command}: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
