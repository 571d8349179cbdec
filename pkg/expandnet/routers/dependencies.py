from fastapi import HTTPException
from sqlalchemy.orm import Session

from ..Models import Run


def _get_run(db: Session, run_id: str) -> Run:
    """Get run by ID or raise 404"""
    row = db.query(Run).filter(Run.run_id == run_id).first()
    if not row:
        raise HTTPException(status_code=404, detail="Run not found")
    return row
