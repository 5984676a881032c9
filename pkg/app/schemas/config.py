import enum
from pathlib import Path
from typing import Any, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator

from app.core.errors import ConfigError


class Modality(str, enum.Enum):
    RGB = "rgb"
    EVENT = "event"
    MIXED = "mixed"

    def eyes(self) -> tuple[str, str]:
        if self is Modality.MIXED:
            return ("rgb", "event")
        return (self.value, self.value)


class Distribution(str, enum.Enum):
    UNIFORM = "uniform"
    GAUSSIAN = "gaussian"
    LAPLACE = "laplace"
    BETA = "beta"


class InitMode(str, enum.Enum):
    GT = "gt"
    HYPOTHESIS = "hypothesis"


class ConsistencyParams(BaseModel):
    model_config = ConfigDict(populate_by_name=True)

    lambda_: float = Field(default=0.3, ge=0.0, alias="lambda", description="Spatial balance factor")
    tau: float = Field(default=1.0, gt=0.0, description="Consistency threshold (z-score units)")


class LKParams(BaseModel):
    window: int = Field(default=15, ge=3, description="Square window side (px, odd)")
    levels: int = Field(default=3, ge=1)
    iterations: int = Field(default=10, ge=1)
    min_eigen: float = Field(default=1e-4, gt=0.0)
    grid_step: int = Field(default=8, ge=1)
    min_gradient: float = Field(default=0.05, ge=0.0)
    roi_margin: int = Field(default=24, ge=0, description="Seeding margin around the last pose (px)")
    max_seeds: int = Field(default=64, ge=1, description="Strongest seeds kept per eye")

    @field_validator("window")
    @classmethod
    def validate_window(cls, v: int) -> int:
        if v % 2 == 0:
            raise ValueError("LK window must be odd")
        return v


class M3DParams(BaseModel):
    enabled: bool = True
    consistency: ConsistencyParams = Field(default_factory=ConsistencyParams)
    lk: LKParams = Field(default_factory=LKParams)
    eps_static: float = Field(default=0.5, ge=0.0, description="Static cluster cutoff (px/frame)")
    min_disparity: float = Field(default=0.5, gt=0.0)
    min_cluster: int = Field(default=5, ge=1, description="Smaller dominant clusters are low confidence")


class AMQParams(BaseModel):
    n: int = Field(default=4, ge=0, description="Queue capacity")
    alpha: float = Field(default=0.5, gt=0.0, le=1.0, description="Decay weight")


class SamplerConfig(BaseModel):
    count: int = Field(default=64, ge=1)
    beta: Optional[float] = Field(default=None, gt=0.0, description="Override for the object diameter")
    distribution: Distribution = Distribution.UNIFORM
    seed: int = 0


class ScorerConfig(BaseModel):
    temperature: float = Field(default=5.0, gt=0.0)
    cutoff: float = Field(default=20.0, gt=0.0, description="Chamfer truncation (px)")
    model_points: int = Field(default=128, ge=1)


class RPFParams(BaseModel):
    enabled: bool = True
    sampler: SamplerConfig = Field(default_factory=SamplerConfig)
    scorer: ScorerConfig = Field(default_factory=ScorerConfig)
    refine_iterations: int = Field(default=10, ge=0)
    refine_points: int = Field(default=512, ge=1)
    depth_noise: float = Field(default=0.0, ge=0.0, description="Center depth jitter as a fraction of beta")


class RunConfig(BaseModel):
    dataset: Path = Path("data/scene")
    out: Path = Path("runs/latest")
    modality: Modality = Modality.RGB
    event_window: Optional[float] = Field(default=None, gt=0.0, description="Seconds; defaults to one frame")
    init: InitMode = InitMode.GT
    seed: int = 0
    dump_debug: bool = False

    amq: AMQParams = Field(default_factory=AMQParams)
    m3d: M3DParams = Field(default_factory=M3DParams)
    rpf: RPFParams = Field(default_factory=RPFParams)


def parse_flat_config(text: str) -> dict[str, Any]:
    """Parse ``section.key = value`` lines into a nested dict."""
    tree: dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"Line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        set_dotted(tree, key, value)
    return tree


def set_dotted(tree: dict[str, Any], key: str, value: Any) -> None:
    parts = [p for p in key.split(".") if p]
    if not parts:
        raise ConfigError(f"Empty configuration key for value {value!r}")
    node = tree
    for part in parts[:-1]:
        child = node.setdefault(part, {})
        if not isinstance(child, dict):
            raise ConfigError(f"Key {key!r} conflicts with a scalar value")
        node = child
    node[parts[-1]] = value


def load_run_config(
    path: Optional[Path] = None,
    overrides: Optional[dict[str, Any]] = None,
) -> RunConfig:
    tree: dict[str, Any] = {}
    if path is not None:
        try:
            tree = parse_flat_config(Path(path).read_text(encoding="utf-8"))
        except OSError as e:
            raise ConfigError(f"Cannot read config file {path}: {e}") from e
    for key, value in (overrides or {}).items():
        if value is not None:
            set_dotted(tree, key, value)
    try:
        return RunConfig.model_validate(tree)
    except ValueError as e:
        raise ConfigError(f"Invalid run configuration: {e}") from e


def dump_flat_config(config: RunConfig) -> str:
    lines: list[str] = []

    def walk(prefix: str, data: dict[str, Any]) -> None:
        for key, value in data.items():
            name = f"{prefix}.{key}" if prefix else key
            if isinstance(value, dict):
                walk(name, value)
            elif value is not None:
                lines.append(f"{name} = {value}")

    walk("", config.model_dump(mode="json", by_alias=True))
    return "\n".join(lines) + "\n"
