from datetime import datetime

from sqlalchemy import Boolean, Column, DateTime, Float, ForeignKey, Integer, String, Text
from sqlalchemy.orm import relationship

from .Database import Base


class Run(Base):
    __tablename__ = "runs"

    run_id = Column(String, primary_key=True, index=True)
    config_hash = Column(String, nullable=False, index=True)
    seed = Column(Integer, nullable=False)
    mode = Column(String, nullable=False)
    arch_name = Column(String, nullable=False)
    final_widths = Column(Text, nullable=False)
    final_params = Column(Integer, nullable=False)
    test_accuracy = Column(Float, nullable=True)
    reset_count = Column(Integer, default=0)
    wall_time = Column(Float, nullable=False)
    out_dir = Column(String, nullable=False)
    created_at = Column(DateTime, default=datetime.utcnow)

    epochs = relationship("EpochMetric", back_populates="run", cascade="all, delete-orphan")
    events = relationship("ExpansionEventRow", back_populates="run", cascade="all, delete-orphan")


class EpochMetric(Base):
    __tablename__ = "epoch_metrics"

    id = Column(Integer, primary_key=True, index=True)
    run_id = Column(String, ForeignKey("runs.run_id"), nullable=False, index=True)
    position = Column(Integer, nullable=False)
    phase = Column(String, nullable=False)
    epoch = Column(Integer, nullable=False)
    step = Column(Integer, nullable=False)
    params = Column(Integer, nullable=False)
    train_loss = Column(Float, nullable=False)
    train_accuracy = Column(Float, nullable=False)
    test_accuracy = Column(Float, nullable=True)
    widths = Column(Text, nullable=False)

    run = relationship("Run", back_populates="epochs")


class ExpansionEventRow(Base):
    __tablename__ = "expansion_events"

    id = Column(Integer, primary_key=True, index=True)
    run_id = Column(String, ForeignKey("runs.run_id"), nullable=False, index=True)
    step = Column(Integer, nullable=False)
    epoch = Column(Integer, nullable=False)
    layers = Column(Text, nullable=False)
    old_widths = Column(Text, nullable=False)
    new_widths = Column(Text, nullable=False)
    trigger_score = Column(Float, nullable=False)
    suppressed = Column(Boolean, default=False)

    run = relationship("Run", back_populates="events")
