import math

import numpy as np
import pytest
from sqlalchemy import create_engine
from sqlalchemy.orm import sessionmaker
from sqlalchemy.pool import StaticPool

from expandnet.Database import Base
from expandnet.exceptions import DataFormatError
from expandnet.layers import with_widths
from expandnet.metrics import snapshot_refresh
from expandnet.Models import EpochMetric, ExpansionEventRow, Run
from expandnet.records import (
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
from expandnet.schemas import (
    EpochSummary,
    ExpansionConfig,
    ExpansionEvent,
    ImportanceReport,
    PruneCurve,
    PrunePoint,
    RunConfig,
    RunRecord,
)


def summary(epoch, params=100):
    return EpochSummary(phase="search", epoch=epoch, step=epoch * 3, lr=0.1, widths=[1, 2], params=params,
                        train_loss=0.5, train_accuracy=0.75)


def event(step):
    return ExpansionEvent(step=step, epoch=0, layers=[0], old_widths=[1, 2], new_widths=[2, 2], trigger_score=0.01)


def record(run_id="abc-s0"):
    return RunRecord(run_id=run_id, config_hash="f" * 64, seed=0, mode="expand", arch_name="tiny",
                     layer_names=["conv1", "fc1"], epochs=[summary(0), summary(1)], final_widths=[2, 2],
                     final_params=120, test_accuracy=0.5, reset_count=1)


def test_config_hash():
    a = RunConfig(arch="gfcnn-narrow")
    assert config_hash(a) == config_hash(RunConfig(arch="gfcnn-narrow"))
    assert config_hash(a) != config_hash(a.model_copy(update={"seed": 1}))
    disabled = a.model_copy(update={"expansion": ExpansionConfig(epsilon=math.inf)})
    assert len(config_hash(disabled)) == 64
    assert make_run_id("0123456789abcdef", 3) == "0123456789ab-s3"


def test_record_round_trip(tmp_path):
    write_record(tmp_path / "record.json", record())
    first = (tmp_path / "record.json").read_bytes()
    assert read_record(tmp_path / "record.json") == record()
    write_record(tmp_path / "record.json", read_record(tmp_path / "record.json"))
    assert (tmp_path / "record.json").read_bytes() == first
    (tmp_path / "broken.json").write_text("{}")
    with pytest.raises(DataFormatError):
        read_record(tmp_path / "broken.json")


def test_jsonl_mixed_rows(tmp_path):
    rows = [summary(1), event(4), summary(2)]
    write_jsonl(tmp_path / "log.jsonl", rows)
    assert read_jsonl(tmp_path / "log.jsonl") == rows
    with open(tmp_path / "log.jsonl", "a") as fh:
        fh.write('{"kind": "epoch", "epoch": "x"}\n')
    with pytest.raises(DataFormatError, match="log.jsonl:4"):
        read_jsonl(tmp_path / "log.jsonl")


def test_prune_csv(tmp_path):
    curve = PruneCurve(metric="l1_norm", points=[
        PrunePoint(features_removed=0, accuracy=0.9, params=50),
        PrunePoint(features_removed=1, accuracy=0.85, params=40, layer=0, feature=2, score=0.25),
    ])
    write_prune_csv(tmp_path / "prune-l1_norm.csv", curve)
    assert read_prune_csv(tmp_path / "prune-l1_norm.csv", "l1_norm") == curve

    (tmp_path / "bad.csv").write_text("features_removed,accuracy,params\n0,0.9,50\n1,oops,40\n")
    with pytest.raises(DataFormatError, match="bad.csv:3"):
        read_prune_csv(tmp_path / "bad.csv")
    (tmp_path / "order.csv").write_text("features_removed,accuracy,params\n0,0.9,50\n2,0.8,40\n1,0.7,30\n")
    with pytest.raises(DataFormatError, match="order.csv:4"):
        read_prune_csv(tmp_path / "order.csv")
    (tmp_path / "cols.csv").write_text("removed,accuracy\n0,0.9\n")
    with pytest.raises(DataFormatError, match="cols.csv:1"):
        read_prune_csv(tmp_path / "cols.csv")


def test_importance_reports(tmp_path):
    reports = [
        ImportanceReport(layer=0, metric="self_resemblance", scores=[0.5, 0.0, 1.25], step=40),
        ImportanceReport(layer=4, metric="self_resemblance", scores=[0.75], step=40),
    ]
    write_importance(tmp_path / "importance-self_resemblance.json", reports)
    assert read_importance(tmp_path / "importance-self_resemblance.json") == reports

    (tmp_path / "bad.json").write_text('[{"layer": 0, "metric": "entropy", "scores": [], "step": 0}]')
    with pytest.raises(DataFormatError, match="bad.json"):
        read_importance(tmp_path / "bad.json")
    (tmp_path / "broken.json").write_text("[{")
    with pytest.raises(DataFormatError):
        read_importance(tmp_path / "broken.json")


def test_checkpoint_round_trip(tmp_path, tiny_arch, tiny_store):
    snapshot = snapshot_refresh(tiny_store)
    save_checkpoint(tmp_path / "ckpt", tiny_arch, tiny_store, snapshot)
    arch, store, loaded = load_checkpoint(tmp_path / "ckpt")
    assert arch == tiny_arch
    for key in tiny_store.params:
        np.testing.assert_array_equal(store.params[key], tiny_store.params[key])
    for key in tiny_store.buffers:
        np.testing.assert_array_equal(store.buffers[key], tiny_store.buffers[key])
    assert set(loaded.weights) == set(snapshot.weights)

    save_checkpoint(tmp_path / "nosnap", tiny_arch, tiny_store, None)
    assert load_checkpoint(tmp_path / "nosnap")[2] is None

    other = with_widths(tiny_arch, {0: 5})
    (tmp_path / "ckpt" / "arch.json").write_text(other.model_dump_json())
    with pytest.raises(DataFormatError):
        load_checkpoint(tmp_path / "ckpt")


def test_register_run_replaces_previous_row():
    engine = create_engine("sqlite://", connect_args={"check_same_thread": False}, poolclass=StaticPool)
    Base.metadata.create_all(bind=engine)
    db = sessionmaker(bind=engine)()
    register_run(db, record(), 1.5, "out", [event(3)])
    register_run(db, record(), 2.5, "out", [event(3), event(9)])
    assert db.query(Run).count() == 1
    assert db.query(Run).first().wall_time == 2.5
    assert db.query(EpochMetric).count() == 2
    assert db.query(ExpansionEventRow).count() == 2
    register_run(db, record("other-s1"), 1.0, "out2")
    assert db.query(Run).count() == 2
    db.close()
