import json
from datetime import datetime, timezone

from sqlalchemy import Boolean, Column, DateTime, Float, ForeignKey, Integer, String, Text
from sqlalchemy.orm import relationship

from db import Base


def _utcnow():
    return datetime.now(timezone.utc)


def _isoformat(dt: datetime | None):
    if dt is None:
        return None
    return (dt if dt.tzinfo else dt.replace(tzinfo=timezone.utc)).isoformat()


class TrainRun(Base):
    __tablename__ = "train_runs"

    id = Column(Integer, primary_key=True)
    name = Column(String(200), nullable=False, index=True)
    config_json = Column(Text, nullable=False)
    seed = Column(Integer, nullable=False)
    sigma_lo = Column(Float, nullable=False, default=0.0)
    sigma_hi = Column(Float, nullable=False, default=0.0)
    per_base = Column(Integer, nullable=False)
    seen_json = Column(Text, nullable=False, default="[]")  # [{"id", "seed", "rows", "cols"}]
    checkpoint_path = Column(String(500), nullable=True, index=True)
    final_loss = Column(Float, nullable=True)
    status = Column(String(20), default="running")  # running / done / failed
    created_at = Column(DateTime(timezone=True), default=_utcnow)

    epochs = relationship("EpochLoss", backref="run", lazy=True, cascade="all, delete-orphan")

    @property
    def seen(self) -> list[dict]:
        return json.loads(self.seen_json or "[]")

    @property
    def config(self) -> dict:
        return json.loads(self.config_json)

    def to_dict(self):
        return {
            "id": self.id,
            "name": self.name,
            "seed": self.seed,
            "sigma_range": [self.sigma_lo, self.sigma_hi],
            "per_base": self.per_base,
            "checkpoint": self.checkpoint_path,
            "final_loss": self.final_loss,
            "status": self.status,
            "created_at": _isoformat(self.created_at),
        }


class EpochLoss(Base):
    __tablename__ = "epoch_losses"

    id = Column(Integer, primary_key=True)
    run_id = Column(Integer, ForeignKey("train_runs.id"), nullable=False)
    epoch = Column(Integer, nullable=False)
    mean_loss = Column(Float, nullable=False)
    seconds = Column(Float, nullable=False, default=0.0)

    def to_dict(self):
        return {"epoch": self.epoch, "mean_loss": self.mean_loss, "seconds": self.seconds}


class EvalRow(Base):
    __tablename__ = "eval_rows"

    id = Column(Integer, primary_key=True)
    experiment = Column(String(100), nullable=False, index=True)
    dataset = Column(String(200), nullable=False)
    matrix_id = Column(String(200), nullable=False)
    seen = Column(Boolean, nullable=False)
    gamma = Column(Float, nullable=False)
    sigma = Column(Float, nullable=False)
    method = Column(String(50), nullable=False)
    psnr_db = Column(Float, nullable=False)
    ssim = Column(Float, nullable=True)
    seconds = Column(Float, nullable=False, default=0.0)
    created_at = Column(DateTime(timezone=True), default=_utcnow)

    def to_dict(self):
        return {
            "experiment": self.experiment,
            "dataset": self.dataset,
            "matrix_id": self.matrix_id,
            "seen": self.seen,
            "gamma": self.gamma,
            "sigma": self.sigma,
            "method": self.method,
            "psnr_db": self.psnr_db,
            "ssim": self.ssim,
            "seconds": self.seconds,
            "created_at": _isoformat(self.created_at),
        }
