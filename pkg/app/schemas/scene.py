import enum

from pydantic import BaseModel, Field, field_validator

from app.services.geometry import CameraIntrinsics, ObjectModel, StereoRig


class SceneKind(str, enum.Enum):
    SPIN = "a"
    PENDULUM = "b"
    DEGRADED = "c"


Vector3 = tuple[float, float, float]


class RigParams(BaseModel):
    width: int = Field(default=640, ge=16)
    height: int = Field(default=480, ge=16)
    focal: float = Field(default=500.0, gt=0.0, description="Focal length (px), both axes")
    baseline: float = Field(default=0.1, gt=0.0, description="Stereo baseline (m)")

    def build(self) -> StereoRig:
        k = CameraIntrinsics(
            fx=self.focal,
            fy=self.focal,
            cx=self.width / 2.0,
            cy=self.height / 2.0,
            width=self.width,
            height=self.height,
        )
        return StereoRig(left=k, right=k, baseline=self.baseline)


class ModelParams(BaseModel):
    side: float = Field(default=0.08, gt=0.0, description="Cube side (m)")
    samples_per_edge: int = Field(default=64, ge=2)

    def build(self) -> ObjectModel:
        return ObjectModel.cube(self.side, self.samples_per_edge)


class SpinParams(BaseModel):
    pivot: Vector3 = (0.0, 0.0, 1.0)
    lever: Vector3 = Field(default=(0.04, 0.0, 0.0), description="Center offset from the pivot (m)")
    axes: list[Vector3] = Field(
        default_factory=lambda: [(0.0, 0.0, 1.0), (1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (1.0, 1.0, 1.0)]
    )
    omega_start: float = Field(default=0.5, description="Angular speed at t=0 (rad/s)")
    omega_end: float = Field(default=12.0, description="Angular speed at t=duration (rad/s)")
    initial_euler: Vector3 = (0.3, 0.4, 0.1)

    @field_validator("axes")
    @classmethod
    def validate_axes(cls, v: list[Vector3]) -> list[Vector3]:
        if not v:
            raise ValueError("At least one spin axis is required")
        if any(sum(c * c for c in axis) == 0.0 for axis in v):
            raise ValueError("Spin axes must be non-zero")
        return v


class PendulumParams(BaseModel):
    pivot: Vector3 = (0.0, 0.3, 1.0)
    length: float = Field(default=0.3, gt=0.0)
    amplitude: float = Field(default=0.5, description="Swing amplitude theta_0 (rad)")
    frequency: float = Field(default=0.5, gt=0.0, description="Hz")
    initial_euler: Vector3 = (0.3, 0.4, 0.1)


class DegradationParams(BaseModel):
    noise_sigma: float = Field(default=0.05, ge=0.0)
    occlusion_max_fraction: float = Field(default=0.25, ge=0.0, le=1.0)
    replacement_fraction: float = Field(default=0.05, ge=0.0, le=1.0)


class SceneConfig(BaseModel):
    scene: SceneKind = SceneKind.PENDULUM
    duration: float = Field(default=2.0, gt=0.0, description="Seconds")
    frame_rate: float = Field(default=30.0, gt=0.0, description="Hz")
    event_threshold: float = Field(default=0.15, gt=0.0, description="Log-intensity contrast")
    seed: int = 0

    rig: RigParams = Field(default_factory=RigParams)
    model: ModelParams = Field(default_factory=ModelParams)
    spin: SpinParams = Field(default_factory=SpinParams)
    pendulum: PendulumParams = Field(default_factory=PendulumParams)
    degradation: DegradationParams = Field(default_factory=DegradationParams)

    @property
    def frame_count(self) -> int:
        return int(round(self.duration * self.frame_rate))
