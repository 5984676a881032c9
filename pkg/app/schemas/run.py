import uuid
from datetime import datetime
from typing import Any, Optional

from pydantic import BaseModel, ConfigDict, Field

from app.models.run import RunStatus, TrackingRun
from app.schemas.config import Modality
from app.schemas.report import MetricsReport
from app.schemas.scene import SceneConfig

NAME_PATTERN = r"^[A-Za-z0-9][A-Za-z0-9_.-]{0,63}$"


class DatasetCreate(BaseModel):
    name: str = Field(..., pattern=NAME_PATTERN, description="Directory name under the data dir")
    scene: SceneConfig = Field(default_factory=SceneConfig)


class DatasetResponse(BaseModel):
    name: str
    path: str
    frames: int


class RunCreate(BaseModel):
    dataset: str = Field(..., pattern=NAME_PATTERN, description="Dataset name under the data dir")
    modality: Optional[Modality] = None
    seed: Optional[int] = None
    overrides: dict[str, Any] = Field(
        default_factory=dict,
        description="Dotted RunConfig keys, e.g. {'amq.n': 2}",
    )


class RunResponse(BaseModel):
    model_config = ConfigDict(from_attributes=True)

    id: uuid.UUID
    dataset_path: str
    out_path: Optional[str]
    status: RunStatus
    frames: Optional[int]
    lost_frames: Optional[int]
    fps: Optional[float]
    add_recall: Optional[float]
    adds_recall: Optional[float]
    error: Optional[str]
    report: Optional[MetricsReport] = None
    created_at: datetime
    updated_at: datetime

    @classmethod
    def from_run(cls, run: TrackingRun) -> "RunResponse":
        data = {name: getattr(run, name) for name in cls.model_fields if name != "report"}
        report = MetricsReport.model_validate_json(run.report) if run.report else None
        return cls(**data, report=report)


class RunListResponse(BaseModel):
    items: list[RunResponse]
    total: int
    page: int
    limit: int
