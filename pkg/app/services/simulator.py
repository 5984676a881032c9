"""Synthetic stereo benchmark: analytic trajectories, point-splat rendering, DVS-style events."""

import logging
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Iterator, Optional

import numpy as np
from scipy.ndimage import gaussian_filter

from app.core.errors import GeometryMismatch, OutOfRange
from app.schemas.report import SpeedBin
from app.schemas.scene import SceneConfig, SceneKind
from app.services.geometry import (
    EulerAngles,
    ObjectModel,
    Pose,
    StereoRig,
    axis_angle,
    euler_to_rotation,
    project,
    project_points,
    rot_z,
)
from app.services.vision import EventBatch, GrayFrame

logger = logging.getLogger(__name__)

EYES = ("left", "right")
LOG_EPS = 1e-3
TIME_EPS = 1e-12
BACKGROUND_MEAN = 0.5
BACKGROUND_STD = 0.08
STICKER_GRID = 3
GRID_LINE = 0.08
STICKER_LEVELS = (0.95, 0.8, 0.65, 0.5, 0.35, 0.2)
GRID_ALBEDO = 0.05


@dataclass(frozen=True, eq=False)
class RenderResult:
    frame: GrayFrame
    empty: bool = False


@dataclass(frozen=True, eq=False)
class FrameObservation:
    index: int
    timestamp: float
    left: GrayFrame
    right: GrayFrame
    left_events: EventBatch
    right_events: EventBatch
    gt_pose: Pose
    pixel_velocity: float
    empty_render: bool = False

    @property
    def speed_bin(self) -> SpeedBin:
        return SpeedBin.of(self.pixel_velocity)

    def frame(self, eye: str) -> GrayFrame:
        return self.left if eye == "left" else self.right

    def events(self, eye: str) -> EventBatch:
        return self.left_events if eye == "left" else self.right_events


def _spin_angle(cfg: SceneConfig, t: float) -> float:
    spin = cfg.spin
    return spin.omega_start * t + 0.5 * (spin.omega_end - spin.omega_start) / cfg.duration * t * t


def _spin_rotation(cfg: SceneConfig, t: float) -> np.ndarray:
    """Accumulated rotation under the piecewise-constant axis schedule."""
    axes = cfg.spin.axes
    segment = cfg.duration / len(axes)
    rotation = np.eye(3)
    start = 0.0
    for k, axis in enumerate(axes):
        end = cfg.duration if k == len(axes) - 1 else (k + 1) * segment
        stop = min(t, end)
        if stop <= start:
            break
        rotation = axis_angle(axis, _spin_angle(cfg, stop) - _spin_angle(cfg, start)) @ rotation
        start = end
    return rotation


def trajectory_pose(cfg: SceneConfig, t: float) -> Pose:
    if t < -TIME_EPS or t > cfg.duration + TIME_EPS:
        raise OutOfRange(f"t={t} outside [0, {cfg.duration}]")
    t = min(max(t, 0.0), cfg.duration)

    if cfg.scene is SceneKind.SPIN:
        spin = cfg.spin
        s = _spin_rotation(cfg, t)
        r0 = euler_to_rotation(EulerAngles(*spin.initial_euler))
        center = np.asarray(spin.pivot) + s @ np.asarray(spin.lever)
        return Pose(rotation=s @ r0, center=center)

    # scenes b and c share the pendulum; c only degrades the observations
    pend = cfg.pendulum
    theta = pend.amplitude * math.cos(2.0 * math.pi * pend.frequency * t)
    offset = pend.length * np.array([math.sin(theta), -math.cos(theta), 0.0])
    r0 = euler_to_rotation(EulerAngles(*pend.initial_euler))
    return Pose(rotation=rot_z(theta) @ r0, center=np.asarray(pend.pivot) + offset)


def sticker_albedo(model: ObjectModel) -> np.ndarray:
    """Rubik-style gray stickers separated by dark grid lines, one value per model point."""
    pts = model.points
    half = np.abs(pts).max()
    if half == 0:
        return np.full(len(pts), STICKER_LEVELS[0])
    face_axis = np.abs(pts).argmax(axis=1)
    face = 2 * face_axis + (pts[np.arange(len(pts)), face_axis] > 0)
    others = np.array([[1, 2], [0, 2], [0, 1]])[face_axis]
    coords = np.take_along_axis(pts, others, axis=1)
    cell = (coords + half) / (2.0 * half) * STICKER_GRID
    index = np.clip(np.floor(cell), 0, STICKER_GRID - 1).astype(int)
    frac = cell - np.floor(cell)
    on_line = np.any((frac < GRID_LINE) | (frac > 1.0 - GRID_LINE), axis=1)
    sticker = face * STICKER_GRID**2 + index[:, 0] * STICKER_GRID + index[:, 1]
    albedo = np.asarray(STICKER_LEVELS)[(sticker * 7) % len(STICKER_LEVELS)]
    return np.where(on_line, GRID_ALBEDO, albedo)


def background_texture(cfg: SceneConfig) -> np.ndarray:
    rng = np.random.default_rng([cfg.seed, 0xB6])
    noise = gaussian_filter(rng.standard_normal((cfg.rig.height, cfg.rig.width)), sigma=3.0)
    noise *= BACKGROUND_STD / max(noise.std(), 1e-12)
    return np.clip(BACKGROUND_MEAN + noise, 0.0, 1.0)


class SceneRenderer:
    """Stereo point-splat renderer for one scene configuration."""

    def __init__(self, cfg: SceneConfig):
        self.cfg = cfg
        self.rig: StereoRig = cfg.rig.build()
        self.model: ObjectModel = cfg.model.build()

    @cached_property
    def albedo(self) -> np.ndarray:
        return sticker_albedo(self.model)

    @cached_property
    def background(self) -> np.ndarray:
        return background_texture(self.cfg)

    def project_model(self, pose: Pose, eye: str) -> tuple[np.ndarray, np.ndarray]:
        cam = self.rig.to_eye(pose.transform(self.model.points), eye)
        return project_points(self.rig.eye(eye), cam)

    def render(self, pose: Pose, eye: str, frame_index: int = 0, timestamp: float = 0.0) -> RenderResult:
        k = self.rig.eye(eye)
        w, h = k.width, k.height
        uv, z = self.project_model(pose, eye)

        front = (z > 0) & np.all(np.isfinite(uv), axis=1)
        u, v, depth, albedo = uv[front, 0], uv[front, 1], z[front], self.albedo[front]
        x0, y0 = np.floor(u).astype(np.int64), np.floor(v).astype(np.int64)
        fx, fy = u - x0, v - y0
        taps_x = np.concatenate([x0, x0 + 1, x0, x0 + 1])
        taps_y = np.concatenate([y0, y0, y0 + 1, y0 + 1])
        weights = np.concatenate([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy])
        tap_depth = np.tile(depth, 4)
        tap_albedo = np.tile(albedo, 4)
        inside = (taps_x >= 0) & (taps_x < w) & (taps_y >= 0) & (taps_y < h) & (weights > 0)

        if not inside.any():
            logger.warning("Empty render: frame=%d, eye=%s", frame_index, eye)
            return RenderResult(GrayFrame(self.background, timestamp), empty=True)

        idx = taps_y[inside] * w + taps_x[inside]
        tap_depth, tap_albedo, weights = tap_depth[inside], tap_albedo[inside], weights[inside]
        zbuf = np.full(w * h, np.inf)
        np.minimum.at(zbuf, idx, tap_depth)
        visible = tap_depth <= zbuf[idx] + 0.05 * self.cfg.model.side
        weight_sum = np.bincount(idx[visible], weights=weights[visible], minlength=w * h)
        albedo_sum = np.bincount(idx[visible], weights=weights[visible] * tap_albedo[visible], minlength=w * h)

        alpha = np.clip(weight_sum, 0.0, 1.0).reshape(h, w)
        shade = np.divide(albedo_sum, weight_sum, out=np.zeros(w * h), where=weight_sum > 0).reshape(h, w)
        pixels = (1.0 - alpha) * self.background + alpha * shade

        if self.cfg.scene is SceneKind.DEGRADED:
            pixels = self._degrade(pixels, alpha, frame_index, eye)
        return RenderResult(GrayFrame(np.clip(pixels, 0.0, 1.0), timestamp))

    def _degrade(self, pixels: np.ndarray, alpha: np.ndarray, frame_index: int, eye: str) -> np.ndarray:
        params = self.cfg.degradation
        rng = np.random.default_rng([self.cfg.seed, frame_index, EYES.index(eye)])
        pixels = pixels.copy()
        rows, cols = np.nonzero(alpha > 0.5)
        if rows.size:
            top, bottom, left, right = rows.min(), rows.max() + 1, cols.min(), cols.max() + 1
            share = rng.uniform(0.0, params.occlusion_max_fraction)
            oh = int((bottom - top) * math.sqrt(share))
            ow = int((right - left) * math.sqrt(share))
            if oh > 0 and ow > 0:
                oy = rng.integers(top, bottom - oh + 1)
                ox = rng.integers(left, right - ow + 1)
                pixels[oy : oy + oh, ox : ox + ow] = rng.uniform(0.0, 1.0)

            share = rng.uniform(0.0, params.replacement_fraction)
            count = int(share * rows.size)
            if count:
                pick = rng.choice(rows.size, size=count, replace=False)
                pixels[rows[pick], cols[pick]] = rng.uniform(0.0, 1.0, count)
        if params.noise_sigma > 0:
            pixels += rng.normal(0.0, params.noise_sigma, pixels.shape)
        return pixels


def render_frame(
    cfg: SceneConfig,
    pose: Pose,
    eye: str,
    frame_index: int = 0,
    renderer: Optional[SceneRenderer] = None,
) -> RenderResult:
    renderer = renderer or SceneRenderer(cfg)
    return renderer.render(pose, eye, frame_index)


def synthesize_events(
    prev_frame: GrayFrame,
    next_frame: GrayFrame,
    threshold: float,
    t_start: float = 0.0,
    t_end: float = 1.0,
) -> EventBatch:
    """Quantized log-intensity change, ``k`` events per pixel spread evenly over ``(t_start, t_end]``.

    The last event of every pixel lands exactly on ``t_end``.
    """
    if prev_frame.pixels.shape != next_frame.pixels.shape:
        raise GeometryMismatch(
            f"Frame shapes differ: {prev_frame.pixels.shape} vs {next_frame.pixels.shape}"
        )
    if threshold <= 0:
        raise ValueError("Contrast threshold must be positive")
    delta = np.log(next_frame.pixels + LOG_EPS) - np.log(prev_frame.pixels + LOG_EPS)
    counts = np.floor(np.abs(delta) / threshold + 1e-9).astype(np.int64).ravel()
    width, height = prev_frame.width, prev_frame.height
    total = int(counts.sum())
    if total == 0:
        return EventBatch.empty(width, height)

    pixel = np.repeat(np.arange(counts.size), counts)
    k = counts[pixel]
    step = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts) + 1
    t = t_end - (k - step) / k * (t_end - t_start)
    polarity = np.sign(delta.ravel()[pixel]).astype(np.int8)
    order = np.argsort(t, kind="stable")
    return EventBatch(
        x=(pixel % width)[order],
        y=(pixel // width)[order],
        t=t[order],
        p=polarity[order],
        width=width,
        height=height,
    )


def frame_times(cfg: SceneConfig) -> np.ndarray:
    return np.arange(cfg.frame_count) / cfg.frame_rate


def pixel_velocities(cfg: SceneConfig, poses: list[Pose], rig: Optional[StereoRig] = None) -> np.ndarray:
    """Left-eye projected-center speed (px/s) from consecutive frames.

    Frame 0 takes the forward difference; a single frame has zero speed.
    """
    rig = rig or cfg.rig.build()
    if len(poses) < 2:
        return np.zeros(len(poses))
    uv = np.array([project(rig.left, p.center)[:2] for p in poses])
    speed = np.linalg.norm(np.diff(uv, axis=0), axis=1) * cfg.frame_rate
    return np.concatenate([[speed[0]], speed])


def generate(cfg: SceneConfig) -> Iterator[FrameObservation]:
    """Stream the observations of one synthetic sequence."""
    renderer = SceneRenderer(cfg)
    times = frame_times(cfg)
    poses = [trajectory_pose(cfg, float(t)) for t in times]
    velocities = pixel_velocities(cfg, poses, renderer.rig)
    logger.info(
        "Generating scene %s: frames=%d, rate=%.1f Hz", cfg.scene.value, len(poses), cfg.frame_rate
    )

    previous: Optional[dict[str, GrayFrame]] = None
    for i, (t, pose) in enumerate(zip(times, poses)):
        renders = {eye: renderer.render(pose, eye, i, float(t)) for eye in EYES}
        frames = {eye: r.frame for eye, r in renders.items()}
        if previous is None:
            events = {eye: EventBatch.empty(f.width, f.height) for eye, f in frames.items()}
        else:
            events = {
                eye: synthesize_events(
                    previous[eye], frames[eye], cfg.event_threshold, float(times[i - 1]), float(t)
                )
                for eye in EYES
            }
        previous = frames
        yield FrameObservation(
            index=i,
            timestamp=float(t),
            left=frames["left"],
            right=frames["right"],
            left_events=events["left"],
            right_events=events["right"],
            gt_pose=pose,
            pixel_velocity=float(velocities[i]),
            empty_render=any(r.empty for r in renders.values()),
        )
