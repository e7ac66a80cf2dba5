"""Command-line entry point: generate, train, eval, sweep, diagnose, convert."""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import retrieval as rt
from .dataset import MultimodalDataset, generate_synthetic, load_features, save_features
from .errors import (CompatibilityError, EvaluationError, NumericalError, ParseError,
                     SCBCHError, SpecError)
from .experiment import (ExperimentConfig, evaluate, map_tracker, prepare_dataset,
                         similarity_dump)
from .model import load_checkpoint, save_checkpoint
from .trainer import ABLATIONS, train

log = logging.getLogger("scbch")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4

SWEEP_AXES = ("noise_rate", "code_length", "ablation", "xi", "margin")


class ConfigError(SpecError):
    """Raised for problems found while assembling the run configuration."""


# -- config assembly ---------------------------------------------------------------

def load_config(args) -> ExperimentConfig:
    try:
        config = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    except ParseError as exc:
        raise ConfigError(f"{args.config}: {exc}") from None
    except OSError as exc:
        raise ConfigError(f"cannot read config {args.config}: {exc}") from None
    except TypeError as exc:
        raise ConfigError(f"{args.config}: {exc}") from None
    if args.seed is not None:
        config = config.with_seed(args.seed)
    if args.out is not None:
        config = replace(config, output_dir=args.out)
    if getattr(args, "dataset", None):
        config = replace(config, dataset_path=args.dataset)
    if getattr(args, "noise_rate", None) is not None:
        config = replace(config, noise=replace(config.noise, rate=args.noise_rate))
    if getattr(args, "code_length", None) is not None:
        config = replace(config, train=replace(config.train, code_length=args.code_length))
    if getattr(args, "epochs", None) is not None:
        config = replace(config, train=replace(config.train, epochs=args.epochs))
    if getattr(args, "ablate", None):
        config = replace(config, train=config.train.with_ablations(args.ablate))
    config.validate()
    return config


def _out_dir(config: ExperimentConfig) -> Path:
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _base_dataset(config: ExperimentConfig) -> MultimodalDataset:
    if config.dataset_path:
        return load_features(config.dataset_path)
    return generate_synthetic(config.data)


# -- commands ------------------------------------------------------------------------

def cmd_generate(config: ExperimentConfig, path: Path | None = None, fmt: str = "text") -> Path:
    out = _out_dir(config)
    path = path or out / ("dataset.bin" if fmt == "binary" else "dataset.txt")
    dataset = generate_synthetic(config.data)
    try:
        save_features(dataset, path, fmt)
    except OSError as exc:
        raise OSError(f"cannot write dataset to {path}: {exc.strerror}") from None
    config.save(out / "config.json")
    summary = dataset.summary()
    print(json.dumps(summary, sort_keys=True))
    return path


def _weight_histogram(weights: np.ndarray, mask: np.ndarray, path: Path, bins: int = 20) -> None:
    seen = ~np.isnan(weights)
    edges = np.linspace(0.0, 1.0, bins + 1)
    clean, _ = np.histogram(weights[seen & ~mask], bins=edges)
    noisy, _ = np.histogram(weights[seen & mask], bins=edges)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_left", "bin_right", "clean_count", "noisy_count"])
        for lo, hi, c, n in zip(edges[:-1], edges[1:], clean, noisy):
            writer.writerow([f"{lo:.2f}", f"{hi:.2f}", int(c), int(n)])


def cmd_train(config: ExperimentConfig) -> dict:
    config.validate()
    out = _out_dir(config)
    config.save(out / "config.json")
    dataset = prepare_dataset(config, _base_dataset(config))
    callback = map_tracker(dataset, config.eval) if config.eval.track_map else None
    state, history = train(dataset, config.train, on_epoch_end=callback)

    meta = {"noise_rate": config.noise.rate, "epochs": state.epoch}
    save_checkpoint(state.model, out / "checkpoint.npz", meta)
    with open(out / "metrics.jsonl", "w") as fh:
        for rec in history:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")

    snapshots = {"initial": config.train.warmup_epochs + 1, "final": config.train.epochs}
    if dataset.noise_mask is not None:
        for tag, epoch in snapshots.items():
            if epoch in state.weight_history:
                _weight_histogram(state.weight_history[epoch], dataset.noise_mask,
                                  out / f"weights_{tag}_epoch{epoch}.csv")

    summary = {"epochs": state.epoch, "steps": state.timestep}
    if history and "map_avg" in history[-1]:
        best = max(history, key=lambda h: h["map_avg"])
        summary["final_epoch_map"] = {k: history[-1][k] for k in ("map_i2t", "map_t2i", "map_avg")}
        summary["best_epoch_on_query"] = {"epoch": best["epoch"],
                                          **{k: best[k] for k in ("map_i2t", "map_t2i", "map_avg")}}
    _write_json(out / "train_summary.json", summary)
    print(json.dumps(summary, sort_keys=True))
    return summary


def cmd_eval(config: ExperimentConfig, checkpoint) -> dict:
    out = _out_dir(config)
    model, meta = load_checkpoint(checkpoint)
    dataset = prepare_dataset(config, _base_dataset(config))
    result = evaluate(model, dataset, config.eval)
    noise_rate = meta.get("noise_rate", config.noise.rate)
    records = []
    for direction, res in result["results"].items():
        records.append({"direction": direction, "L": model.code_length, "noise_rate": noise_rate,
                        "MAP": res.map, "num_queries": res.num_queries,
                        "zero_relevant": res.zero_relevant})
        points = rt.precision_recall_curve(result["runs"][direction], config.eval.pr_mode)
        rt.write_pr_csv(points, out / f"pr_{direction}.csv")
    records.append({"direction": "AVG", "L": model.code_length, "noise_rate": noise_rate,
                    "MAP": result["map_avg"], "num_queries": records[0]["num_queries"],
                    "zero_relevant": records[0]["zero_relevant"] + records[1]["zero_relevant"]})
    rt.write_report(records, out / "eval_report.jsonl")
    config.save(out / "config.json")
    for rec in records:
        print(json.dumps(rec, sort_keys=True))
    return {"map_i2t": result["map_i2t"], "map_t2i": result["map_t2i"], "map_avg": result["map_avg"]}


def _apply_axis(config: ExperimentConfig, name: str, value) -> ExperimentConfig:
    if name == "noise_rate":
        return replace(config, noise=replace(config.noise, rate=float(value)))
    if name == "code_length":
        return replace(config, train=replace(config.train, code_length=int(value)))
    if name == "xi":
        return replace(config, train=replace(config.train, xi=float(value)))
    if name == "margin":
        return replace(config, train=replace(config.train, margin=float(value)))
    if name == "ablation":
        names = [] if value in ("none", "") else str(value).split("+")
        return replace(config, train=config.train.with_ablations(names))
    raise ConfigError(f"unknown sweep axis {name!r}; choose from {SWEEP_AXES}")


def parse_axes(specs: list[str]) -> dict[str, list[str]]:
    axes: dict[str, list[str]] = {}
    for spec in specs:
        name, sep, values = spec.partition("=")
        name = name.strip()
        if not sep or not values:
            raise ConfigError(f"axis must look like name=v1,v2 (got {spec!r})")
        if name not in SWEEP_AXES:
            raise ConfigError(f"unknown sweep axis {name!r}; choose from {SWEEP_AXES}")
        axes[name] = [v.strip() for v in values.split(",") if v.strip()]
    return axes


def _run_cell(payload) -> dict:
    index, config_dict, cell = payload
    started = time.perf_counter()
    row = dict(cell)
    try:
        config = ExperimentConfig.from_dict(config_dict)
        for name, value in cell.items():
            config = _apply_axis(config, name, value)
        config = replace(config,
                         noise=replace(config.noise, seed=config.noise.seed + index),
                         train=replace(config.train, seed=config.train.seed + index),
                         eval=replace(config.eval, track_map=False))
        config.validate()
        dataset = prepare_dataset(config, _base_dataset(config))
        state, _ = train(dataset, config.train)
        result = evaluate(state.model, dataset, config.eval)
        row.update(map_i2t=result["map_i2t"], map_t2i=result["map_t2i"],
                   map_avg=result["map_avg"], status="ok", error="")
    except Exception as exc:  # a failing cell must not stop the grid
        row.update(map_i2t="", map_t2i="", map_avg="", status="failed",
                   error=f"{type(exc).__name__}: {exc}")
    row["runtime_s"] = round(time.perf_counter() - started, 3)
    return row


def cmd_sweep(config: ExperimentConfig, axes: dict[str, list[str]], workers: int = 1) -> list[dict]:
    if not axes:
        raise ConfigError("sweep needs at least one --axis")
    out = _out_dir(config)
    config.save(out / "config.json")
    names = list(axes)
    cells = [dict(zip(names, combo)) for combo in itertools.product(*(axes[n] for n in names))]
    payloads = [(i, config.to_dict(), cell) for i, cell in enumerate(cells)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_run_cell, payloads))
    else:
        rows = [_run_cell(p) for p in payloads]
    columns = names + ["map_i2t", "map_t2i", "map_avg", "runtime_s", "status", "error"]
    with open(out / "sweep.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    failed = sum(r["status"] != "ok" for r in rows)
    print(json.dumps({"cells": len(rows), "failed": failed}))
    return rows


def _write_matrix(path: Path, ids: np.ndarray, M: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id"] + [str(i) for i in ids])
        for i, row in zip(ids, M):
            writer.writerow([str(i)] + [repr(float(v)) for v in row])


def cmd_diagnose(config: ExperimentConfig, checkpoint, sample_count: int) -> dict:
    out = _out_dir(config)
    model, _ = load_checkpoint(checkpoint)
    dataset = _base_dataset(config)
    ids, R, S = similarity_dump(model, dataset, sample_count, seed=config.eval.split_seed)
    _write_matrix(out / "label_similarity.csv", ids, R)
    _write_matrix(out / "feature_similarity.csv", ids, S)
    config.save(out / "config.json")
    info = {"samples": int(ids.size), "label_similarity": str(out / "label_similarity.csv"),
            "feature_similarity": str(out / "feature_similarity.csv")}
    print(json.dumps(info, sort_keys=True))
    return info


def cmd_convert(src, dst, fmt: str) -> None:
    save_features(load_features(src), dst, fmt)


# -- argument parsing -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON experiment config")
    common.add_argument("--seed", type=int, help="override every seed in the config")
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument("--quiet", action="store_true", help="only log warnings and errors")

    parser = argparse.ArgumentParser(prog="scbch", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", parents=[common], help="write a synthetic feature file")
    p.add_argument("--file", metavar="PATH", help="dataset path (default OUT/dataset.txt)")
    p.add_argument("--format", choices=("text", "binary"), default="text")

    def data_flags(p):
        p.add_argument("--dataset", metavar="PATH", help="feature file (default: synthesise)")

    p = sub.add_parser("train", parents=[common], help="train hash networks")
    data_flags(p)
    p.add_argument("--ablate", action="append", choices=ABLATIONS, default=[])
    p.add_argument("--noise-rate", type=float)
    p.add_argument("--code-length", type=int)
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    data_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--noise-rate", type=float)
    p.add_argument("--map-at", type=int)
    p.add_argument("--pr-mode", choices=("rank", "radius"))

    p = sub.add_parser("sweep", parents=[common], help="grid of train+eval runs")
    data_flags(p)
    p.add_argument("--axis", action="append", default=[], metavar="NAME=V1,V2",
                   help=f"sweep axis, one of {', '.join(SWEEP_AXES)}")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("diagnose", parents=[common], help="dump label/code similarity matrices")
    data_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--samples", type=int, default=16)

    p = sub.add_parser("convert", help="convert a feature file between text and binary")
    p.add_argument("src")
    p.add_argument("dst")
    p.add_argument("--format", choices=("text", "binary"), required=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if getattr(args, "quiet", False) else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        if args.command == "convert":
            cmd_convert(args.src, args.dst, args.format)
            return EXIT_OK
        config = load_config(args)
        if args.command == "generate":
            cmd_generate(config, Path(args.file) if args.file else None, args.format)
        elif args.command == "train":
            cmd_train(config)
        elif args.command == "eval":
            if args.map_at is not None or args.pr_mode is not None:
                config = replace(config, eval=replace(
                    config.eval,
                    map_at=args.map_at if args.map_at is not None else config.eval.map_at,
                    pr_mode=args.pr_mode or config.eval.pr_mode))
                config.validate()
            cmd_eval(config, args.checkpoint)
        elif args.command == "sweep":
            cmd_sweep(config, parse_axes(args.axis), args.workers)
        elif args.command == "diagnose":
            cmd_diagnose(config, args.checkpoint, args.samples)
    except (ConfigError, CompatibilityError, EvaluationError) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except NumericalError as exc:
        log.error("numerical abort: %s", exc)
        return EXIT_NUMERIC
    except (OSError, ParseError) as exc:
        log.error("%s", exc)
        return EXIT_IO
    except SpecError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except SCBCHError as exc:  # pragma: no cover - every subclass is mapped above
        log.error("%s", exc)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
