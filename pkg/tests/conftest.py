import os
import tempfile
from pathlib import Path

_WORKDIR = tempfile.mkdtemp(prefix="pose-streamer-tests-")
os.environ["POSE_STREAMER_DATABASE_URL"] = f"sqlite+aiosqlite:///{_WORKDIR}/test.db"
os.environ["POSE_STREAMER_DATA_DIR"] = os.path.join(_WORKDIR, "data")
os.environ["POSE_STREAMER_API_KEY"] = "test-key"
os.environ["POSE_STREAMER_WORKERS"] = "1"

import numpy as np  # noqa: E402
import pytest  # noqa: E402
from scipy.ndimage import gaussian_filter  # noqa: E402

from app.schemas.config import RunConfig  # noqa: E402
from app.schemas.scene import ModelParams, PendulumParams, RigParams, SceneConfig, SceneKind, SpinParams  # noqa: E402
from app.services.dataset import write_dataset  # noqa: E402
from app.services.geometry import ObjectModel, StereoRig  # noqa: E402
from app.services.vision import GrayFrame  # noqa: E402

API_KEY = "test-key"


def small_scene(**updates) -> SceneConfig:
    """A handful of low-resolution pendulum frames, quick enough for unit tests."""
    cfg = SceneConfig(
        scene=SceneKind.PENDULUM,
        duration=0.2,
        frame_rate=30.0,
        rig=RigParams(width=96, height=72, focal=200.0, baseline=0.1),
        model=ModelParams(side=0.08, samples_per_edge=16),
        pendulum=PendulumParams(pivot=(0.0, 0.3, 1.0), length=0.3, amplitude=0.3, frequency=1.0),
    )
    return cfg.model_copy(update=updates)


@pytest.fixture
def scene() -> SceneConfig:
    return small_scene()


@pytest.fixture
def rig() -> StereoRig:
    return RigParams().build()


@pytest.fixture
def cube() -> ObjectModel:
    return ObjectModel.cube(0.08, 2)


@pytest.fixture
def textured() -> np.ndarray:
    rng = np.random.default_rng(7)
    image = gaussian_filter(rng.uniform(0.0, 1.0, (64, 80)), sigma=2.0)
    image = (image - image.min()) / (image.max() - image.min())
    return image


@pytest.fixture
def textured_frame(textured) -> GrayFrame:
    return GrayFrame(textured)


@pytest.fixture(scope="session")
def dataset_dir(tmp_path_factory) -> Path:
    root = tmp_path_factory.mktemp("datasets") / "pendulum"
    write_dataset(small_scene(), root)
    return root


@pytest.fixture
def run_config(dataset_dir, tmp_path) -> RunConfig:
    cfg = RunConfig(dataset=dataset_dir, out=tmp_path / "run")
    cfg.rpf.sampler.count = 8
    cfg.rpf.scorer.model_points = 32
    cfg.rpf.refine_iterations = 3
    cfg.rpf.refine_points = 64
    cfg.m3d.lk.grid_step = 4
    return cfg


def vga_dataset(factory, name: str, **updates) -> Path:
    """A full-resolution scene with the default rig and cube."""
    root = factory.mktemp("vga") / name
    write_dataset(SceneConfig(**updates), root)
    return root


@pytest.fixture(scope="session")
def pendulum_vga(tmp_path_factory) -> Path:
    # 300 frames at 30 Hz
    return vga_dataset(tmp_path_factory, "b", scene=SceneKind.PENDULUM, duration=10.0)


@pytest.fixture(scope="session")
def pendulum_vga_short(tmp_path_factory) -> Path:
    return vga_dataset(tmp_path_factory, "b_short", scene=SceneKind.PENDULUM, duration=1.5)


@pytest.fixture(scope="session")
def degraded_vga(tmp_path_factory) -> Path:
    return vga_dataset(tmp_path_factory, "c", scene=SceneKind.DEGRADED, duration=3.0)


@pytest.fixture(scope="session")
def spin_vga(tmp_path_factory) -> Path:
    return vga_dataset(
        tmp_path_factory, "a", scene=SceneKind.SPIN, duration=2.0, spin=SpinParams(axes=[(0.0, 0.0, 1.0)])
    )
