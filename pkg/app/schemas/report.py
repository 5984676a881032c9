import enum
from typing import Optional

from pydantic import BaseModel, Field

REGULAR_MAX = 45.0
MEDIUM_MAX = 180.0


class SpeedBin(str, enum.Enum):
    REGULAR = "regular"
    MEDIUM = "medium"
    FASTER = "faster"

    @classmethod
    def of(cls, velocity: float) -> "SpeedBin":
        if velocity < REGULAR_MAX:
            return cls.REGULAR
        if velocity < MEDIUM_MAX:
            return cls.MEDIUM
        return cls.FASTER


class Stat(BaseModel):
    mean: float
    stdev: float


class BinMetrics(BaseModel):
    frames: int = Field(ge=0)
    lost_frames: int = Field(ge=0)
    add_recall_01d: float = Field(ge=0.0, le=1.0)
    adds_recall_01d: float = Field(ge=0.0, le=1.0)
    add_mean: float = Field(ge=0.0, description="Mean ADD (m)")
    adds_mean: float = Field(ge=0.0, description="Mean ADD-S (m)")
    e_p: Stat = Field(description="Translation error (cm)")
    e_r: Stat = Field(description="Symmetry-reduced rotation error (deg)")
    switch_count: int = Field(ge=0)
    proj5_rate: float = Field(ge=0.0, le=1.0)
    fps: Optional[float] = None


class MetricsReport(BaseModel):
    frames: int = Field(ge=0)
    overall: BinMetrics
    bins: dict[SpeedBin, BinMetrics]
    fps: Optional[float] = None
    wall_time: Optional[float] = None


class AblationRow(BaseModel):
    axis: str
    setting: str
    report: MetricsReport
