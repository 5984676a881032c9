"""On-disk dataset layout: writer for generated sequences and a lazy reader."""

import json
import logging
from functools import cached_property
from pathlib import Path
from typing import Iterable, NamedTuple, Optional

import cv2
import numpy as np

from app.core.errors import DatasetError
from app.schemas.report import SpeedBin
from app.schemas.scene import SceneConfig
from app.services.geometry import ObjectModel, Pose, StereoRig
from app.services.simulator import generate
from app.services.vision import EventBatch, GrayFrame

logger = logging.getLogger(__name__)

MANIFEST = "manifest"
POSES = "poses.txt"
MODEL = "model.txt"
SCENE = "scene.json"
FRAMES_DIR = "frames"
EVENTS_DIR = "events"
EVENTS_HEADER = "x,y,t,p"
EYE_PREFIX = {"left": "L", "right": "R"}


class ManifestEntry(NamedTuple):
    idx: int
    t: float
    bin: SpeedBin
    v: float


def frame_path(root: Path, index: int, eye: str) -> Path:
    return root / FRAMES_DIR / f"{EYE_PREFIX[eye]}_{index:06d}.pgm"


def events_path(root: Path, index: int, eye: str) -> Path:
    return root / EVENTS_DIR / f"{EYE_PREFIX[eye]}_{index:06d}.csv"


def write_poses(path: Path, poses: Iterable[Pose]) -> None:
    try:
        with open(path, "w", encoding="utf-8") as f:
            for pose in poses:
                f.write(" ".join(f"{v:.12g}" for v in pose.as_matrix34().ravel()) + "\n")
    except OSError as e:
        raise DatasetError(f"Cannot write poses ({e})", path) from e


def read_poses(path: Path) -> list[Pose]:
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise DatasetError(f"Cannot read poses ({e})", path) from e
    poses = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        values = line.split()
        if len(values) != 12:
            raise DatasetError(f"Line {lineno} holds {len(values)} values, expected 12", path)
        poses.append(Pose.from_matrix34([float(v) for v in values]))
    return poses


def write_frame(path: Path, frame: GrayFrame) -> None:
    image = np.round(frame.pixels * 255.0).astype(np.uint8)
    if not cv2.imwrite(str(path), image):
        raise DatasetError("Cannot write frame", path)


def read_frame(path: Path, timestamp: float = 0.0) -> GrayFrame:
    image = cv2.imread(str(path), cv2.IMREAD_GRAYSCALE)
    if image is None:
        raise DatasetError("Cannot read frame", path)
    return GrayFrame(image.astype(np.float64) / 255.0, timestamp)


def write_events(path: Path, batch: EventBatch) -> None:
    data = np.column_stack([batch.x, batch.y, batch.t, batch.p])
    try:
        np.savetxt(path, data, fmt=["%d", "%d", "%.9f", "%d"], delimiter=",", header=EVENTS_HEADER, comments="")
    except OSError as e:
        raise DatasetError(f"Cannot write events ({e})", path) from e


def read_events(path: Path, width: int, height: int) -> EventBatch:
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise DatasetError(f"Cannot read events ({e})", path) from e
    if not lines or lines[0].strip() != EVENTS_HEADER:
        raise DatasetError(f"Event file must start with '{EVENTS_HEADER}'", path)
    rows = [line.split(",") for line in lines[1:] if line.strip()]
    if not rows:
        return EventBatch.empty(width, height)
    data = np.array(rows, dtype=float)
    return EventBatch(
        x=data[:, 0], y=data[:, 1], t=data[:, 2], p=data[:, 3], width=width, height=height
    )


def write_dataset(cfg: SceneConfig, out_dir: Path) -> int:
    """Generate ``cfg`` into ``out_dir``; returns the frame count.

    The parent of ``out_dir`` must exist. Rerunning with the same config rewrites
    identical files.
    """
    out_dir = Path(out_dir)
    if not out_dir.parent.exists():
        raise DatasetError("Output parent directory does not exist", out_dir.parent)
    try:
        for sub in (out_dir, out_dir / FRAMES_DIR, out_dir / EVENTS_DIR):
            sub.mkdir(exist_ok=True)
        (out_dir / SCENE).write_text(cfg.model_dump_json(indent=2), encoding="utf-8")
        (out_dir / MODEL).write_text(cfg.model.build().to_text(), encoding="utf-8")
    except OSError as e:
        raise DatasetError(f"Cannot prepare dataset directory ({e})", out_dir) from e

    poses: list[Pose] = []
    manifest = ["idx,t,bin,v"]
    events_total = 0
    for obs in generate(cfg):
        for eye in EYE_PREFIX:
            write_frame(frame_path(out_dir, obs.index, eye), obs.frame(eye))
            write_events(events_path(out_dir, obs.index, eye), obs.events(eye))
            events_total += len(obs.events(eye))
        poses.append(obs.gt_pose)
        manifest.append(
            f"{obs.index},{obs.timestamp:.9f},{obs.speed_bin.value},{obs.pixel_velocity:.6f}"
        )

    write_poses(out_dir / POSES, poses)
    try:
        (out_dir / MANIFEST).write_text("\n".join(manifest) + "\n", encoding="utf-8")
    except OSError as e:
        raise DatasetError(f"Cannot write manifest ({e})", out_dir / MANIFEST) from e

    eye_frames = max(len(poses) - 1, 1) * 2
    logger.info(
        "Dataset written: path=%s, frames=%d, events=%d (%.1f per eye-frame)",
        out_dir, len(poses), events_total, events_total / eye_frames,
    )
    return len(poses)


class DatasetReader:
    """Lazy access to a dataset directory; frames and events are read on demand."""

    def __init__(self, root: Path):
        self.root = Path(root)
        if not self.root.is_dir():
            raise DatasetError("Dataset directory does not exist", self.root)
        if len(self.manifest) == 0:
            raise DatasetError("Dataset has no frames", self.root)
        if len(self.poses) != len(self.manifest):
            raise DatasetError(
                f"{len(self.poses)} poses for {len(self.manifest)} manifest entries", self.root
            )

    def __len__(self) -> int:
        return len(self.manifest)

    @cached_property
    def scene(self) -> SceneConfig:
        path = self.root / SCENE
        try:
            return SceneConfig.model_validate(json.loads(path.read_text(encoding="utf-8")))
        except OSError as e:
            raise DatasetError(f"Cannot read scene ({e})", path) from e
        except ValueError as e:
            raise DatasetError(f"Invalid scene ({e})", path) from e

    @cached_property
    def rig(self) -> StereoRig:
        return self.scene.rig.build()

    @cached_property
    def model(self) -> ObjectModel:
        path = self.root / MODEL
        try:
            return ObjectModel.from_text(path.read_text(encoding="utf-8"))
        except OSError as e:
            raise DatasetError(f"Cannot read model ({e})", path) from e
        except ValueError as e:
            raise DatasetError(f"Invalid model ({e})", path) from e

    @cached_property
    def manifest(self) -> list[ManifestEntry]:
        path = self.root / MANIFEST
        try:
            lines = path.read_text(encoding="utf-8").splitlines()
        except OSError as e:
            raise DatasetError(f"Cannot read manifest ({e})", path) from e
        entries = []
        for line in lines[1:]:
            if not line.strip():
                continue
            try:
                idx, t, bin_, v = line.split(",")
                entries.append(ManifestEntry(int(idx), float(t), SpeedBin(bin_), float(v)))
            except ValueError as e:
                raise DatasetError(f"Bad manifest line {line!r}", path) from e
        return entries

    @cached_property
    def poses(self) -> list[Pose]:
        return read_poses(self.root / POSES)

    @property
    def timestamps(self) -> np.ndarray:
        return np.array([e.t for e in self.manifest])

    @property
    def bins(self) -> list[SpeedBin]:
        return [e.bin for e in self.manifest]

    def frame(self, index: int, eye: str) -> GrayFrame:
        return read_frame(frame_path(self.root, index, eye), self.manifest[index].t)

    def events(self, index: int, eye: str, since: Optional[float] = None) -> EventBatch:
        """Events of frame ``index``; with ``since``, all events newer than that time."""
        k = self.rig.eye(eye)
        if since is None:
            return read_events(events_path(self.root, index, eye), k.width, k.height)
        batches = [
            read_events(events_path(self.root, j, eye), k.width, k.height)
            for j in range(index + 1)
            if self.manifest[j].t > since
        ]
        batches = [b for b in batches if len(b)]
        if not batches:
            return EventBatch.empty(k.width, k.height)
        return EventBatch(
            x=np.concatenate([b.x for b in batches]),
            y=np.concatenate([b.y for b in batches]),
            t=np.concatenate([b.t for b in batches]),
            p=np.concatenate([b.p for b in batches]),
            width=k.width,
            height=k.height,
        )
