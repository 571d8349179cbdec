from __future__ import annotations

import csv
import hashlib
import json
import logging
from pathlib import Path
from typing import Iterable, Union

from pydantic import BaseModel, TypeAdapter, ValidationError
from sqlalchemy.orm import Session

from .exceptions import DataFormatError
from .layers import ParamStore, load_arch, param_shapes
from .metrics import InitSnapshot
from .Models import EpochMetric, ExpansionEventRow, Run
from .schemas import ArchSpec, EpochSummary, ExpansionEvent, ImportanceReport, PruneCurve, PrunePoint, RunRecord
from .tensor import load_tensors, save_tensors

logger = logging.getLogger(__name__)

LogRow = Union[EpochSummary, ExpansionEvent]
IMPORTANCE_LIST = TypeAdapter(list[ImportanceReport])
PRUNE_COLUMNS = ["features_removed", "accuracy", "params", "layer", "feature", "score"]


def canonical_json(model: BaseModel) -> str:
    return json.dumps(model.model_dump(mode="python"), sort_keys=True, indent=2)


def config_hash(config: BaseModel) -> str:
    return hashlib.sha256(json.dumps(config.model_dump(mode="python"), sort_keys=True).encode()).hexdigest()


def make_run_id(digest: str, seed: int) -> str:
    return f"{digest[:12]}-s{seed}"


def write_record(path: str | Path, record: RunRecord) -> None:
    Path(path).write_text(canonical_json(record) + "\n")


def read_record(path: str | Path) -> RunRecord:
    try:
        return RunRecord.model_validate(json.loads(Path(path).read_text()))
    except (ValidationError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"{path}: not a run record ({exc})") from exc


def write_jsonl(path: str | Path, rows: Iterable[BaseModel]) -> None:
    lines = [json.dumps(row.model_dump(mode="python"), sort_keys=True) for row in rows]
    Path(path).write_text("".join(line + "\n" for line in lines))


def read_jsonl(path: str | Path) -> list[LogRow]:
    rows: list[LogRow] = []
    for number, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            data = json.loads(line)
            model = ExpansionEvent if data.get("kind") == "expansion" else EpochSummary
            rows.append(model.model_validate(data))
        except (json.JSONDecodeError, ValidationError, AttributeError) as exc:
            raise DataFormatError(f"{path}:{number}: malformed log row ({exc})") from exc
    return rows


def write_prune_csv(path: str | Path, curve: PruneCurve) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=PRUNE_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for point in curve.points:
            row = point.model_dump()
            writer.writerow({k: "" if row[k] is None else row[k] for k in PRUNE_COLUMNS})


def _optional(value: str, cast):
    return None if value == "" else cast(value)


def read_prune_csv(path: str | Path, metric: str = "self_resemblance") -> PruneCurve:
    points = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(PRUNE_COLUMNS[:3]) - set(reader.fieldnames or [])
        if missing:
            raise DataFormatError(f"{path}:1: missing column(s) {sorted(missing)}")
        previous = -1
        for number, row in enumerate(reader, start=2):
            try:
                point = PrunePoint(
                    features_removed=int(row["features_removed"]),
                    accuracy=float(row["accuracy"]),
                    params=int(row["params"]),
                    layer=_optional(row.get("layer") or "", int),
                    feature=_optional(row.get("feature") or "", int),
                    score=_optional(row.get("score") or "", float),
                )
            except (TypeError, ValueError, ValidationError) as exc:
                raise DataFormatError(f"{path}:{number}: malformed prune row ({exc})") from exc
            if point.features_removed <= previous:
                raise DataFormatError(f"{path}:{number}: features_removed must increase strictly")
            previous = point.features_removed
            points.append(point)
    try:
        return PruneCurve(metric=metric, points=points)
    except ValidationError as exc:
        raise DataFormatError(f"{path}: invalid prune curve ({exc})") from exc


def write_importance(path: str | Path, reports: Iterable[ImportanceReport]) -> None:
    rows = [report.model_dump(mode="python") for report in reports]
    Path(path).write_text(json.dumps(rows, sort_keys=True, indent=2) + "\n")


def read_importance(path: str | Path) -> list[ImportanceReport]:
    try:
        return IMPORTANCE_LIST.validate_python(json.loads(Path(path).read_text()))
    except (ValidationError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"{path}: not a list of importance reports ({exc})") from exc


# -- checkpoints ----------------------------------------------------------------


def save_checkpoint(directory: str | Path, arch: ArchSpec, store: ParamStore, snapshot: InitSnapshot | None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "arch.json").write_text(canonical_json(arch) + "\n")
    tensors = {f"param:{k}": v for k, v in store.params.items()}
    tensors.update({f"buffer:{k}": v for k, v in store.buffers.items()})
    save_tensors(directory / "params.xnt", tensors)
    if snapshot is not None:
        save_tensors(directory / "snapshot.xnt", snapshot.weights)
    return directory


def load_checkpoint(directory: str | Path) -> tuple[ArchSpec, ParamStore, InitSnapshot | None]:
    directory = Path(directory)
    arch = load_arch(str(directory / "arch.json"))
    tensors = load_tensors(directory / "params.xnt")
    store = ParamStore(
        params={k[len("param:"):]: v for k, v in tensors.items() if k.startswith("param:")},
        buffers={k[len("buffer:"):]: v for k, v in tensors.items() if k.startswith("buffer:")},
    )
    expected = param_shapes(arch)
    if set(store.params) != set(expected) or any(v.shape != tuple(expected[k]) for k, v in store.params.items()):
        raise DataFormatError(f"{directory}: checkpoint parameters do not match arch.json")
    snapshot_path = directory / "snapshot.xnt"
    snapshot = InitSnapshot(weights=load_tensors(snapshot_path)) if snapshot_path.is_file() else None
    return arch, store, snapshot


# -- registry -------------------------------------------------------------------


def register_run(
    db: Session, record: RunRecord, wall_time: float, out_dir: str, events: Iterable[ExpansionEvent] = ()
) -> Run:
    """Insert the run, replacing an earlier registration of the same run_id"""
    existing = db.query(Run).filter(Run.run_id == record.run_id).first()
    if existing:
        db.delete(existing)
        db.flush()
    row = Run(
        run_id=record.run_id,
        config_hash=record.config_hash,
        seed=record.seed,
        mode=record.mode,
        arch_name=record.arch_name,
        final_widths=json.dumps(record.final_widths),
        final_params=record.final_params,
        test_accuracy=record.test_accuracy,
        reset_count=record.reset_count,
        wall_time=wall_time,
        out_dir=out_dir,
    )
    row.epochs = [
        EpochMetric(
            position=position,
            phase=summary.phase,
            epoch=summary.epoch,
            step=summary.step,
            params=summary.params,
            train_loss=summary.train_loss,
            train_accuracy=summary.train_accuracy,
            test_accuracy=summary.test_accuracy,
            widths=json.dumps(summary.widths),
        )
        for position, summary in enumerate(record.epochs)
    ]
    row.events = [
        ExpansionEventRow(
            step=event.step,
            epoch=event.epoch,
            layers=json.dumps(event.layers),
            old_widths=json.dumps(event.old_widths),
            new_widths=json.dumps(event.new_widths),
            trigger_score=event.trigger_score,
            suppressed=event.suppressed,
        )
        for event in events
    ]
    db.add(row)
    db.commit()
    db.refresh(row)
    logger.info("Registered run %s", record.run_id)
    return row
