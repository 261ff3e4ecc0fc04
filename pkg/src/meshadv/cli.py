"""Command-line entry points.

Every command takes an optional ``--config`` file of ``key = value``
lines, ``--set key=value`` overrides and a few shorthand flags. Each run
writes its artifacts, the exact config snapshot (``config.txt``) and a
JSON-lines run log (``log.jsonl``) into ``output_dir``.

Exit codes: 0 success, 1 runtime failure, 2 configuration or validation error.
"""
from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import attacks as ATK
from .classifier import load_classifier, report_dict, save_classifier, train_classifier
from .config import RunConfig, int_list, load_config, parse_pairs, save_config
from .dataset import generate_synthetic, ingest_directory
from .errors import ConfigError, InvalidTarget, MeshAdvError
from .spectral import mesh_basis

log = logging.getLogger("meshadv")

COMMANDS = ("gen-dataset", "train-classifier", "attack-opt", "attack-train", "eval", "sweep")
SHORTHANDS = {"seed": int, "k": int, "c": float, "target": int, "model": str, "epochs": int,
              "output_dir": str, "checkpoint": str, "dataset_path": str, "resume": str,
              "k_values": str, "shapes": str, "attack_dirs": str, "workers": int}


class RunLog:
    """Append-only JSON-lines event log."""

    def __init__(self, path):
        self.path = Path(path)
        self.start = time.time()

    def event(self, kind: str, **fields) -> None:
        record = {"event": kind, "elapsed_s": round(time.time() - self.start, 3), **fields}
        with open(self.path, "a") as fh:
            fh.write(json.dumps(record, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(value):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    return str(value)


def _fmt(value) -> str:
    return f"{value:.10g}" if isinstance(value, float) else str(value)


def write_rows(path, rows, fieldnames) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(v) for k, v in row.items()})


def _prepare(cfg: RunConfig, command: str):
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.txt")
    runlog = RunLog(out / "log.jsonl")
    runlog.event("start", command=command)
    return out, runlog


def load_dataset(cfg: RunConfig):
    if cfg.dataset_path:
        return ingest_directory(cfg.dataset_path, cfg.label_scheme)
    return generate_synthetic(cfg.dataset_seed)


def _require_classifier(cfg: RunConfig):
    if not cfg.checkpoint:
        raise ConfigError("checkpoint: a trained classifier checkpoint is required")
    if not Path(cfg.checkpoint).exists():
        raise FileNotFoundError(f"classifier checkpoint {cfg.checkpoint} not found")
    return load_classifier(cfg.checkpoint)


# --------------------------------------------------------------------------
# commands

def cmd_gen_dataset(cfg: RunConfig) -> dict:
    out, runlog = _prepare(cfg, "gen-dataset")
    ds = generate_synthetic(cfg.dataset_seed)
    ds.write(out / "dataset")
    summary = {split: len(ds.split(split)) for split in ("train", "val", "test")}
    runlog.event("finish", **summary)
    return summary


def cmd_train_classifier(cfg: RunConfig) -> dict:
    out, runlog = _prepare(cfg, "train-classifier")
    ds = load_dataset(cfg)
    net, report = train_classifier(ds, cfg)
    save_classifier(net, out / "classifier.madv")
    report.write_csv(out / "train_report.csv")
    summary = {"test_accuracy": report.test_accuracy, "test_loss": report.test_loss,
               **{f"final_{k}": v for k, v in report.final().items()}}
    (out / "report.json").write_text(json.dumps(
        {**{k: v for k, v in report_dict(report).items() if k != "rows"}, **summary},
        indent=2, sort_keys=True))
    for row in report.rows:
        runlog.event("epoch", **row)
    write_rows(out / "metrics.csv", [{"metric": "test_accuracy", "value": report.test_accuracy},
                                     {"metric": "test_loss", "value": report.test_loss}],
               ["metric", "value"])
    runlog.event("finish", **summary)
    log.info("test accuracy %.4f", report.test_accuracy)
    return summary


def _selected_items(cfg: RunConfig, ds):
    indices = ds.indices(cfg.split)
    chosen = int_list(cfg.shapes)
    if chosen:
        bad = [i for i in chosen if i >= len(indices)]
        if bad:
            raise ConfigError(f"shapes: {bad} out of range for the {len(indices)}-shape {cfg.split} split")
        indices = [indices[i] for i in chosen]
    items = [(i, ds.items[i]) for i in indices]
    if cfg.target >= 0:
        if cfg.target >= ds.n_classes:
            raise ConfigError(f"target: {cfg.target} outside [0, {ds.n_classes})")
        clash = [i for i, item in items if item.label == cfg.target]
        if clash:
            raise ConfigError(f"target: {cfg.target} is the true class of shape(s) {clash}")
    return items


def _spike_summary(results, threshold: float) -> dict:
    scores = [ATK.spike_score(r.V) for r in results]
    mean = float(np.mean(scores)) if scores else float("nan")
    return {"mean_spike_score": mean, "spiky": bool(mean > threshold)}


def _fixed_c_attacks(items, bases, net, cfg):
    frozen = ATK.frozen_copy(net)
    results = []
    for idx, item in items:
        targets = [cfg.target] if cfg.target >= 0 else [t for t in range(net.n_classes) if t != item.label]
        for t in targets:
            res = ATK.optimize_attack(item.mesh, bases[idx], frozen, t, cfg, frozen=True, label=item.label)
            res.shape_index, res.split = idx, item.split
            results.append(res)
    return results


def cmd_attack_opt(cfg: RunConfig) -> dict:
    ds = load_dataset(cfg)
    items = _selected_items(cfg, ds)
    net = _require_classifier(cfg)
    out, runlog = _prepare(cfg, "attack-opt")
    cache = cfg.basis_cache or None
    k_values = int_list(cfg.k_values)
    if k_values:
        rows = []
        for k in k_values:
            kcfg = cfg.with_updates(k=k)
            bases = {idx: mesh_basis(item.mesh, k, cache) for idx, item in items}
            results = _fixed_c_attacks(items, bases, net, kcfg)
            ATK.write_attack_artifacts(out / f"k{k}", results, ds)
            table = ATK.evaluate_attacks(results, ds)[cfg.split]
            row = {"k": k, "c": cfg.c, "n": len(results),
                   "success_rate": float(np.mean([r.success for r in results])),
                   **{m: table[m] for m in ("curvature_distortion", "edge_loss", "l2")}}
            rows.append(row)
            runlog.event("k_done", **row)
        write_rows(out / "k_sweep.csv", rows,
                   ["k", "c", "n", "success_rate", "curvature_distortion", "edge_loss", "l2"])
        summary = {"k_values": k_values, "success_rates": [r["success_rate"] for r in rows]}
        runlog.event("finish", **summary)
        return summary

    bases = {idx: mesh_basis(item.mesh, cfg.k, cache) for idx, item in items}
    progress = lambda i, n, r: runlog.event(
        "attack", shape=r.shape_index, target=r.target, success=r.success, c=r.c, iterations=r.iterations)
    if cfg.search:
        results = ATK.attack_pairs(items, bases, net, cfg, workers=cfg.workers, progress=progress)
    else:
        results = _fixed_c_attacks(items, bases, net, cfg)
    ATK.write_attack_artifacts(out, results, ds)
    summary = {"pairs": len(results), "success_rate": float(np.mean([r.success for r in results])),
               **_spike_summary(results, cfg.spike_threshold)}
    write_rows(out / "summary.csv", [summary], list(summary))
    runlog.event("finish", **summary)
    return summary


def cmd_attack_train(cfg: RunConfig) -> dict:
    if cfg.model == "opt":
        raise ConfigError("model: attack-train needs model1 or model2")
    ds = load_dataset(cfg)
    net = _require_classifier(cfg)
    out, runlog = _prepare(cfg, "attack-train")
    cache = cfg.basis_cache or None
    bases = ATK.dataset_bases(ds, cfg.k, cache) if cfg.model == "model1" else [None] * len(ds)
    state, start = None, 0
    if cfg.resume:
        gen, state, start = ATK.load_generator(cfg.resume)
        if gen.variant != cfg.model or (cfg.model == "model1" and gen.k != cfg.k):
            raise ConfigError("resume: checkpoint does not match model/k")
    else:
        gen = ATK.GeneratorNet.init(cfg.model, cfg.k if cfg.model == "model1" else 0, seed=cfg.seed)
    gen, rows, opt = ATK.train_generator(gen, ds, net, bases, cfg, state, start)
    end = start + cfg.generator_epochs
    ATK.save_generator(gen, out / "generator.madv", opt, end)
    columns = ["epoch", "split", "misclass_pct", "recon_loss", "total_loss", "target_hit_pct"]
    epochs_path = out / "epochs.csv"
    if cfg.resume and epochs_path.exists():
        with open(epochs_path, "a", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
            for row in rows:
                writer.writerow({k: _fmt(v) for k, v in row.items()})
    else:
        write_rows(epochs_path, rows, columns)
    for row in rows:
        runlog.event("epoch", **row)
    results = ATK.generator_attacks(gen, net, ds, bases, cfg)
    ATK.write_attack_artifacts(out, results, ds)
    table = ATK.evaluate_attacks(results, ds)
    ATK.write_table(out / "table.csv", {cfg.model: table})
    last = {row["split"]: row for row in rows if row["epoch"] == end}
    summary = {"train_misclass_pct": last.get("train", {}).get("misclass_pct"),
               "val_misclass_pct": last.get("val", {}).get("misclass_pct"),
               **_spike_summary(results, cfg.spike_threshold)}
    write_rows(out / "summary.csv", [summary], list(summary))
    runlog.event("finish", **summary)
    return summary


def _read_metrics(directory: Path) -> dict:
    path = directory / "metrics.csv"
    if not path.exists():
        raise FileNotFoundError(f"{path} not found")
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ATK.EmptySplit(f"{path} holds no attacks")
    table = {}
    for split in ("train", "val", "test"):
        group = [r for r in rows if r["split"] == split]
        if not group:
            continue
        entry = {m: float(np.mean([float(r[m]) for r in group]))
                 for m in ("curvature_distortion", "edge_loss", "l2")}
        entry["misclass_rate"] = float(np.mean([r["predicted"] != r["label"] for r in group]))
        entry["target_rate"] = float(np.mean([r["predicted"] == r["target"] for r in group]))
        table[split] = entry
    return table


def cmd_eval(cfg: RunConfig) -> dict:
    dirs = [Path(d) for d in cfg.attack_dirs.split(",") if d.strip()]
    if not dirs:
        raise ConfigError("attack_dirs: give at least one attack directory")
    missing = [str(d) for d in dirs if not d.is_dir()]
    if missing:
        raise FileNotFoundError(f"attack directories not found: {', '.join(missing)}")
    runs = {d.name: _read_metrics(d) for d in dirs}
    out, runlog = _prepare(cfg, "eval")
    ATK.write_table(out / "table.csv", runs)
    runlog.event("finish", runs=list(runs))
    return runs


def cmd_sweep(cfg: RunConfig, command: str, grid: list[str]) -> list:
    """Run ``command`` once per cell of the grid, each in its own directory."""
    if command not in COMMANDS or command == "sweep":
        raise ConfigError(f"sweep: cannot sweep command {command!r}")
    axes = []
    for spec in grid:
        if "=" not in spec:
            raise ConfigError(f"grid: expected key=v1,v2,..., got {spec!r}")
        key, values = spec.split("=", 1)
        parsed = [parse_pairs([f"{key}={v}"]) for v in values.split(",")]
        axes.append(parsed)
    out, runlog = _prepare(cfg, "sweep")
    summaries = []
    for cell in itertools.product(*axes):
        updates = {}
        for part in cell:
            updates.update(part)
        name = "_".join(f"{k}-{v}" for k, v in updates.items()) or "base"
        cell_cfg = cfg.with_updates(**updates, output_dir=str(out / name))
        summary = RUNNERS[command](cell_cfg)
        runlog.event("cell", name=name, summary=summary)
        summaries.append({"cell": name, **{k: v for k, v in summary.items() if not isinstance(v, dict)}})
    fields = sorted({k for s in summaries for k in s} - {"cell"})
    write_rows(out / "sweep.csv", summaries, ["cell"] + fields)
    runlog.event("finish", cells=len(summaries))
    return summaries


RUNNERS = {
    "gen-dataset": cmd_gen_dataset,
    "train-classifier": cmd_train_classifier,
    "attack-opt": cmd_attack_opt,
    "attack-train": cmd_attack_train,
    "eval": cmd_eval,
}


# --------------------------------------------------------------------------
# argument handling

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    for name, kind in SHORTHANDS.items():
        common.add_argument("--" + name.replace("_", "-"), dest=name, type=kind, default=None)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="meshadv", description="Spectral adversarial attacks on mesh classifiers")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "sweep":
            p.add_argument("target_command", choices=[c for c in COMMANDS if c != "sweep"])
            p.add_argument("--grid", action="append", default=[], metavar="KEY=V1,V2",
                           help="one swept key and its values (repeatable)")
    return parser


def resolve_config(args) -> RunConfig:
    overrides = parse_pairs(args.set)
    for name in SHORTHANDS:
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    if args.config:
        return load_config(args.config, overrides)
    return RunConfig(**overrides)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        if args.command == "sweep":
            cmd_sweep(cfg, args.target_command, args.grid)
        else:
            RUNNERS[args.command](cfg)
    except (ConfigError, InvalidTarget) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (MeshAdvError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
