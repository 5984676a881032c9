import enum
import uuid
from datetime import datetime
from typing import Optional

from sqlalchemy import DateTime, Enum, Float, Index, Integer, String, Text, Uuid, func
from sqlalchemy.orm import Mapped, mapped_column

from app.core.database import Base


class RunStatus(str, enum.Enum):
    QUEUED = "queued"
    RUNNING = "running"
    DONE = "done"
    FAILED = "failed"


class TrackingRun(Base):
    __tablename__ = "tracking_runs"

    id: Mapped[uuid.UUID] = mapped_column(
        Uuid(as_uuid=True),
        primary_key=True,
        default=uuid.uuid4,
    )
    dataset_path: Mapped[str] = mapped_column(String(500), nullable=False)
    out_path: Mapped[Optional[str]] = mapped_column(String(500), nullable=True)
    config: Mapped[str] = mapped_column(Text, nullable=False, default="")

    status: Mapped[RunStatus] = mapped_column(
        Enum(RunStatus, native_enum=False),
        default=RunStatus.QUEUED,
        nullable=False,
    )

    frames: Mapped[Optional[int]] = mapped_column(Integer, nullable=True)
    lost_frames: Mapped[Optional[int]] = mapped_column(Integer, nullable=True)
    fps: Mapped[Optional[float]] = mapped_column(Float, nullable=True)
    add_recall: Mapped[Optional[float]] = mapped_column(Float, nullable=True)
    adds_recall: Mapped[Optional[float]] = mapped_column(Float, nullable=True)

    error: Mapped[Optional[str]] = mapped_column(String(1000), nullable=True)
    report: Mapped[Optional[str]] = mapped_column(Text, nullable=True)

    created_at: Mapped[datetime] = mapped_column(
        DateTime(timezone=True),
        server_default=func.now(),
        nullable=False,
    )
    updated_at: Mapped[datetime] = mapped_column(
        DateTime(timezone=True),
        server_default=func.now(),
        onupdate=func.now(),
        nullable=False,
    )

    __table_args__ = (
        Index("idx_run_status", "status"),
        Index("idx_run_created_at", "created_at"),
    )

    def __repr__(self) -> str:
        return f"<TrackingRun(id={self.id}, dataset={self.dataset_path}, status={self.status})>"
