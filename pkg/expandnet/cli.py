from __future__ import annotations

import argparse
import json
import logging
import os
import time
from pathlib import Path
from typing import Sequence

import numpy as np
from pydantic import ValidationError
from sqlalchemy.orm import sessionmaker

from .data import build_datasets
from .Database import Base, DB_URL, make_engine
from .exceptions import ConfigError, DataFormatError, ExpandNetError
from .expansion import run_expansion
from .layers import adapt_to_data, count_params, load_arch, with_unit_widths
from .metrics import layer_importance
from .plotting import plot_importance, plot_params, plot_prune_curves, plot_topology, plot_widths
from .pruning import prune_curves
from .records import (
    canonical_json,
    config_hash,
    load_checkpoint,
    make_run_id,
    read_importance,
    read_jsonl,
    read_prune_csv,
    read_record,
    register_run,
    save_checkpoint,
    write_importance,
    write_jsonl,
    write_prune_csv,
    write_record,
)
from .schemas import ArchSpec, EpochSummary, ExpansionEvent, ImportanceReport, PruneCurve, RunConfig, RunRecord
from .tensor import make_rng, resolve_dtype
from .trainer import evaluate, fit

logger = logging.getLogger(__name__)


# -- configuration ------------------------------------------------------------


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    try:
        return RunConfig.model_validate(json.loads(path.read_text()))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    except ValidationError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def apply_overrides(config: RunConfig, args: argparse.Namespace) -> RunConfig:
    expansion = {}
    if getattr(args, "condition", None):
        expansion["condition"] = args.condition
    if getattr(args, "eval_every", None):
        expansion["eval_every"] = args.eval_every
    updates = {}
    if expansion:
        updates["expansion"] = config.expansion.model_copy(update=expansion)
    if getattr(args, "metric", None):
        updates["prune"] = config.prune.model_copy(update={"metrics": [args.metric]})
    if getattr(args, "checkpoint", None):
        prune = updates.get("prune", config.prune)
        updates["prune"] = prune.model_copy(update={"checkpoint": str(Path(args.checkpoint).resolve())})
    return config.model_copy(update=updates) if updates else config


def resolve_arch(config: RunConfig, base_dir: Path) -> ArchSpec:
    if isinstance(config.arch, ArchSpec):
        return config.arch
    return load_arch(config.arch, base_dir)


def seeds_from(args: argparse.Namespace, config: RunConfig) -> list[int]:
    if args.seeds:
        try:
            return [int(s) for s in args.seeds.split(",") if s.strip()]
        except ValueError as exc:
            raise ConfigError(f"--seeds expects comma separated integers, got {args.seeds!r}") from exc
    return [args.seed if args.seed is not None else config.seed]


def open_registry(url: str) -> sessionmaker:
    engine = make_engine(url)
    Base.metadata.create_all(bind=engine)
    return sessionmaker(autocommit=False, autoflush=False, bind=engine)


# -- run bookkeeping ------------------------------------------------------------


def _finish(
    record: RunRecord,
    out: Path,
    wall_time: float,
    registry: sessionmaker | None,
    events: Sequence[ExpansionEvent] = (),
) -> RunRecord:
    write_record(out / "record.json", record)
    (out / "timing.json").write_text(json.dumps({"run_id": record.run_id, "wall_time": wall_time}) + "\n")
    if registry is not None:
        db = registry()
        try:
            register_run(db, record, wall_time, str(out), events)
        finally:
            db.close()
    logger.info("Run %s written to %s", record.run_id, out)
    return record


def _base_record(config: RunConfig, seed: int, mode: str, arch: ArchSpec) -> dict:
    digest = config_hash(config.model_copy(update={"seed": seed}))
    return {
        "run_id": make_run_id(digest, seed),
        "config_hash": digest,
        "seed": seed,
        "mode": mode,
        "arch_name": arch.name,
        "layer_names": [arch.layer_label(i) for i in arch.expandable_indices],
        "final_widths": arch.widths(),
        "final_params": count_params(arch),
    }


def _last_test(history: Sequence[EpochSummary]) -> tuple[float | None, float | None]:
    if not history:
        return None, None
    return history[-1].test_accuracy, history[-1].test_loss


def cmd_train(config: RunConfig, base_dir: Path, seed: int, out: Path, registry=None) -> RunRecord:
    out.mkdir(parents=True, exist_ok=True)
    started = time.perf_counter()
    train_set, test_set = build_datasets(config.data, resolve_dtype(config.train.dtype))
    arch = adapt_to_data(resolve_arch(config, base_dir), train_set.input_shape, train_set.num_classes)
    result = fit(arch, config.train, train_set, make_rng(seed), test_set)
    save_checkpoint(out / "checkpoint", arch, result.store, result.snapshot)
    write_jsonl(out / "log.jsonl", result.history)
    accuracy, loss = _last_test(result.history)
    record = RunRecord(
        **_base_record(config, seed, "train", arch),
        epochs=result.history,
        test_accuracy=accuracy,
        test_loss=loss,
        artifacts={"checkpoint": "checkpoint", "log": "log.jsonl"},
    )
    return _finish(record, out, time.perf_counter() - started, registry)


def cmd_expand(config: RunConfig, base_dir: Path, seed: int, out: Path, registry=None) -> RunRecord:
    out.mkdir(parents=True, exist_ok=True)
    started = time.perf_counter()
    train_set, test_set = build_datasets(config.data, resolve_dtype(config.train.dtype))
    arch0 = adapt_to_data(resolve_arch(config, base_dir), train_set.input_shape, train_set.num_classes)
    if config.expansion.enabled and config.expansion.start_from_one:
        arch0 = with_unit_widths(arch0)
    result = run_expansion(arch0, config.train, config.expansion, train_set, make_rng(seed), test_set)

    search = [row for row in result.history if row.phase == "search"]
    final = [row for row in result.history if row.phase != "search"]
    stream = sorted(search + result.events, key=lambda row: row.step)
    write_jsonl(out / "log.jsonl", stream + final)
    (out / "topology.json").write_text(canonical_json(result.arch) + "\n")
    save_checkpoint(out / "checkpoint", result.arch, result.final.store, result.final.snapshot)
    accuracy, loss = _last_test(result.history)
    record = RunRecord(
        **_base_record(config, seed, "expand", result.arch),
        epochs=result.history,
        test_accuracy=accuracy,
        test_loss=loss,
        reset_count=result.state.reset_count,
        artifacts={"checkpoint": "checkpoint", "log": "log.jsonl", "topology": "topology.json"},
    )
    return _finish(record, out, time.perf_counter() - started, registry, result.events)


def _checkpoint_step(checkpoint: Path) -> int:
    """Optimizer step of the run that wrote ``checkpoint``, 0 when its record is missing"""
    record_path = checkpoint.parent / "record.json"
    if not record_path.is_file():
        return 0
    epochs = read_record(record_path).epochs
    return epochs[-1].step if epochs else 0


def cmd_prune(config: RunConfig, base_dir: Path, seed: int, out: Path, registry=None) -> list[PruneCurve]:
    if config.prune.checkpoint is None:
        raise ConfigError("prune needs prune.checkpoint in the config or --checkpoint")
    out.mkdir(parents=True, exist_ok=True)
    started = time.perf_counter()
    checkpoint = Path(config.prune.checkpoint)
    if not checkpoint.is_absolute():
        checkpoint = base_dir / checkpoint
    if not (checkpoint / "params.xnt").is_file():
        raise ConfigError(f"no checkpoint found in {checkpoint}")
    arch, store, snapshot = load_checkpoint(checkpoint)
    train_set, test_set = build_datasets(config.data, store.dtype)
    curves = prune_curves(arch, store, config.prune, test_set, snapshot, train_set)

    artifacts = {}
    for curve in curves:
        stem = f"prune-{curve.metric}" + ("" if curve.layer is None else f"-layer{curve.layer}")
        write_prune_csv(out / f"{stem}.csv", curve)
        (out / f"{stem}.json").write_text(canonical_json(curve) + "\n")
        artifacts[stem] = f"{stem}.csv"
    step = _checkpoint_step(checkpoint)
    for metric in config.prune.metrics:
        vectors = layer_importance(arch, store, metric, snapshot, train_set, step=step)
        write_importance(out / f"importance-{metric}.json", [v.to_report() for v in vectors.values()])
        artifacts[f"importance-{metric}"] = f"importance-{metric}.json"
    loss, accuracy = evaluate(arch, store, test_set)
    record = RunRecord(
        **_base_record(config, seed, "prune", arch),
        test_accuracy=accuracy,
        test_loss=loss,
        artifacts=artifacts,
    )
    _finish(record, out, time.perf_counter() - started, registry)
    return curves


def _layer_names(record: RunRecord, reports: Sequence[ImportanceReport]) -> dict[int, str]:
    indices = sorted({report.layer for report in reports})
    if len(indices) != len(record.layer_names):
        return {}
    return dict(zip(indices, record.layer_names))


def cmd_plot(inputs: Sequence[str], out: Path) -> list[Path]:
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    curves: list[PruneCurve] = []
    reports: list[ImportanceReport] = []
    layer_names: dict[int, str] = {}
    for name in inputs:
        path = Path(name)
        if not path.is_file():
            raise ConfigError(f"plot input {path} does not exist")
        if path.suffix == ".jsonl":
            rows = read_jsonl(path)
            history = [row for row in rows if isinstance(row, EpochSummary)]
            events = [row for row in rows if isinstance(row, ExpansionEvent)]
            names = None
            record_path = path.parent / "record.json"
            if record_path.is_file():
                names = read_record(record_path).layer_names
            written.append(plot_params(history, events, out / f"{path.stem}-params.svg"))
            written.append(plot_widths(history, out / f"{path.stem}-widths.svg", names))
        elif path.suffix == ".csv":
            metric = path.stem.split("-")[1] if path.stem.startswith("prune-") else "self_resemblance"
            curves.append(read_prune_csv(path, metric))
        elif path.suffix == ".json" and path.stem.startswith("importance-"):
            reports.extend(read_importance(path))
            record_path = path.parent / "record.json"
            if record_path.is_file():
                layer_names.update(_layer_names(read_record(record_path), reports))
        else:
            raise DataFormatError(f"{path}: plot inputs are .jsonl logs, .csv prune curves or importance-*.json reports")
    if curves:
        written.append(plot_prune_curves(curves, out / "prune.svg"))
    if reports:
        written.append(plot_importance(reports, out / "importance.svg", layer_names))
    return written


def cmd_report(run_dirs: Sequence[str], out: Path) -> dict:
    """Per-layer width and parameter mean/std over several expansion runs"""
    records = [read_record(Path(d) / "record.json") for d in run_dirs]
    if not records:
        raise ConfigError("report needs at least one run directory")
    if len({tuple(r.layer_names) for r in records}) != 1:
        raise DataFormatError("report runs must share the same layers")
    widths = np.asarray([r.final_widths for r in records], dtype=float)
    params = np.asarray([r.final_params for r in records], dtype=float)
    report = {
        "runs": [r.run_id for r in records],
        "layers": records[0].layer_names,
        "width_mean": widths.mean(axis=0).tolist(),
        "width_std": widths.std(axis=0).tolist(),
        "params_mean": float(params.mean()),
        "params_std": float(params.std()),
    }
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    plot_topology([r.final_widths for r in records], out / "topology.svg", records[0].layer_names)
    return report


# -- entry point ------------------------------------------------------------------


def _positive(value: str) -> int:
    number = int(value)
    if number < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return number


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="expandnet", description="Width expansion and feature pruning experiments")
    parser.add_argument("--log-level", default=os.getenv("EXPANDNET_LOG_LEVEL", "INFO"))
    sub = parser.add_subparsers(dest="command", required=True)

    for name in ("train", "expand", "prune"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="RunConfig JSON file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--seeds", default=None, help="comma separated seeds, one run each in OUT/seed-N")
        p.add_argument("--out", default=f"runs/{name}")
        p.add_argument("--db", default=None, help="run registry URL (default EXPANDNET_DATABASE_URL)")
        p.add_argument("--no-db", action="store_true", help="skip the run registry")
        if name == "expand":
            p.add_argument("--condition", choices=["prose", "printed"], default=None)
            p.add_argument("--eval-every", type=_positive, default=None)
        if name == "prune":
            p.add_argument("--metric", choices=["self_resemblance", "l1_norm", "mean_activation"], default=None)
            p.add_argument("--checkpoint", default=None)

    p = sub.add_parser("plot")
    p.add_argument("inputs", nargs="+", help="log.jsonl, prune-*.csv and importance-*.json files")
    p.add_argument("--out", default="plots")

    p = sub.add_parser("report")
    p.add_argument("runs", nargs="+", help="expand run directories")
    p.add_argument("--out", default="report")

    p = sub.add_parser("serve")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    return parser


COMMANDS = {"train": cmd_train, "expand": cmd_expand, "prune": cmd_prune}


def run(args: argparse.Namespace) -> None:
    if args.command in COMMANDS:
        config = apply_overrides(load_config(args.config), args)
        base_dir = Path(args.config).resolve().parent
        registry = None if args.no_db else open_registry(args.db or DB_URL)
        seeds = seeds_from(args, config)
        for seed in seeds:
            out = Path(args.out) / f"seed-{seed}" if args.seeds else Path(args.out)
            COMMANDS[args.command](config, base_dir, seed, out, registry)
    elif args.command == "plot":
        cmd_plot(args.inputs, Path(args.out))
    elif args.command == "report":
        cmd_report(args.runs, Path(args.out))
    else:
        import uvicorn

        uvicorn.run("expandnet.main:app", host=args.host, port=args.port)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, str(args.log_level).upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        run(args)
    except ExpandNetError as exc:
        logger.error("%s: %s", type(exc).__name__, exc.detail)
        return exc.exit_code
    return 0
