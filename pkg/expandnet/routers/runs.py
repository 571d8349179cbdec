from typing import List

from fastapi import APIRouter, Depends, Query
from sqlalchemy.orm import Session

from ..Database import get_db
from ..Models import EpochMetric, ExpansionEventRow, Run
from ..schemas import EpochMetricResponse, ExpansionEventResponse, RunResponse
from .dependencies import _get_run

router = APIRouter(prefix="/runs", tags=["Runs"])


@router.get("")
def list_runs(
    mode: str | None = Query(default=None),
    page: int = Query(default=1, ge=1),
    page_size: int = Query(default=20, ge=1, le=200),
    db: Session = Depends(get_db)
):
    """List registered runs with optional mode filter"""
    q = db.query(Run)
    if mode:
        q = q.filter(Run.mode == mode)
    total = q.count()
    rows = q.order_by(Run.created_at.desc(), Run.run_id).offset((page - 1) * page_size).limit(page_size).all()
    return {"total": total, "items": [RunResponse.model_validate(row) for row in rows]}


@router.get("/{run_id}", response_model=RunResponse)
def get_run(run_id: str, db: Session = Depends(get_db)):
    """Get one run by ID"""
    return _get_run(db, run_id)


@router.get("/{run_id}/epochs", response_model=List[EpochMetricResponse])
def list_epochs(run_id: str, db: Session = Depends(get_db)):
    """Per-epoch metrics of a run, in recorded order"""
    _get_run(db, run_id)
    return db.query(EpochMetric).filter(EpochMetric.run_id == run_id).order_by(EpochMetric.position).all()


@router.get("/{run_id}/events", response_model=List[ExpansionEventResponse])
def list_events(run_id: str, db: Session = Depends(get_db)):
    """Expansion events of a run, in step order"""
    _get_run(db, run_id)
    return (
        db.query(ExpansionEventRow)
        .filter(ExpansionEventRow.run_id == run_id)
        .order_by(ExpansionEventRow.id)
        .all()
    )
