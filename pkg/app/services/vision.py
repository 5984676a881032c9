"""Frame-level feature machinery: pyramids, pyramidal Lucas-Kanade, event frames."""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from app.core.errors import GeometryMismatch, PyramidTooDeep

logger = logging.getLogger(__name__)

DEFAULT_LEVELS = 3
DEFAULT_WINDOW = 15
DEFAULT_ITERATIONS = 10
DEFAULT_MIN_EIGEN = 1e-4
CONVERGENCE_EPS = 0.01


@dataclass(frozen=True, eq=False)
class GrayFrame:
    pixels: np.ndarray
    timestamp: float = 0.0

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 2 or px.size == 0:
            raise ValueError("GrayFrame pixels must be a non-empty 2D array")
        if not np.all(np.isfinite(px)) or px.min() < 0.0 or px.max() > 1.0:
            raise ValueError("GrayFrame pixels must be finite and within [0, 1]")
        object.__setattr__(self, "pixels", px)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


@dataclass(frozen=True, eq=False)
class EventBatch:
    x: np.ndarray
    y: np.ndarray
    t: np.ndarray
    p: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.int32).ravel()
        y = np.asarray(self.y, dtype=np.int32).ravel()
        t = np.asarray(self.t, dtype=np.float64).ravel()
        p = np.asarray(self.p, dtype=np.int8).ravel()
        if not (len(x) == len(y) == len(t) == len(p)):
            raise ValueError("Event fields must have equal lengths")
        if len(t) > 1 and np.any(np.diff(t) < 0):
            raise ValueError("Events must be sorted by timestamp")
        if len(x) and (x.min() < 0 or x.max() >= self.width or y.min() < 0 or y.max() >= self.height):
            raise ValueError("Event coordinates must lie inside the sensor")
        for name, value in (("x", x), ("y", y), ("t", t), ("p", p)):
            object.__setattr__(self, name, value)

    @classmethod
    def empty(cls, width: int, height: int) -> "EventBatch":
        return cls(x=[], y=[], t=[], p=[], width=width, height=height)

    def __len__(self) -> int:
        return len(self.t)


@dataclass(frozen=True, eq=False)
class Pyramid:
    levels: tuple[GrayFrame, ...]

    @property
    def shapes(self) -> tuple[tuple[int, int], ...]:
        return tuple(level.pixels.shape for level in self.levels)


@dataclass(frozen=True, eq=False)
class TrackedPointSet:
    points: np.ndarray
    displacements: np.ndarray
    tracked: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        points = np.asarray(self.points, dtype=float).reshape(-1, 2)
        displacements = np.asarray(self.displacements, dtype=float).reshape(-1, 2)
        tracked = np.asarray(self.tracked, dtype=bool).ravel()
        if not (len(points) == len(displacements) == len(tracked)):
            raise ValueError("Points, displacements and flags must have equal lengths")
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "displacements", displacements)
        object.__setattr__(self, "tracked", tracked)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def normalized(self) -> np.ndarray:
        return self.points / np.array([self.width, self.height], dtype=float)

    @property
    def next_points(self) -> np.ndarray:
        return self.points + self.displacements

    def active(self) -> "TrackedPointSet":
        keep = self.tracked
        return TrackedPointSet(
            points=self.points[keep],
            displacements=self.displacements[keep],
            tracked=np.ones(int(keep.sum()), dtype=bool),
            width=self.width,
            height=self.height,
        )


def _downsample(pixels: np.ndarray) -> np.ndarray:
    h, w = pixels.shape
    padded = np.pad(pixels, ((0, h % 2), (0, w % 2)), mode="edge")
    return padded.reshape(padded.shape[0] // 2, 2, padded.shape[1] // 2, 2).mean(axis=(1, 3))


def build_pyramid(frame: GrayFrame, levels: int = DEFAULT_LEVELS) -> Pyramid:
    if levels < 1:
        raise ValueError("Pyramid needs at least one level")
    if min(frame.width, frame.height) < 2**levels:
        raise PyramidTooDeep(
            f"{frame.width}x{frame.height} frame cannot hold {levels} pyramid levels"
        )
    frames = [frame]
    for _ in range(levels - 1):
        frames.append(GrayFrame(_downsample(frames[-1].pixels), frame.timestamp))
    return Pyramid(levels=tuple(frames))


def seed_points(
    frame: GrayFrame,
    grid_step: int,
    min_gradient: float,
    roi: Optional[tuple[int, int, int, int]] = None,
    limit: Optional[int] = None,
) -> np.ndarray:
    """One seed per grid cell at the strongest gradient, as (x, y) rows in row-major order.

    ``roi`` is ``(x0, y0, x1, y1)``, end-exclusive; cells outside it produce nothing.
    ``limit`` keeps only the strongest seeds (ties by row-major order).
    """
    if grid_step < 1:
        raise ValueError("grid_step must be >= 1")
    gy, gx = np.gradient(frame.pixels)
    magnitude = np.hypot(gx, gy)
    if roi is not None:
        x0, y0, x1, y1 = roi
        masked = np.full_like(magnitude, -1.0)
        masked[y0:y1, x0:x1] = magnitude[y0:y1, x0:x1]
        magnitude = masked

    h, w = magnitude.shape
    gh, gw = -(-h // grid_step), -(-w // grid_step)
    padded = np.full((gh * grid_step, gw * grid_step), -1.0)
    padded[:h, :w] = magnitude
    cells = (
        padded.reshape(gh, grid_step, gw, grid_step)
        .transpose(0, 2, 1, 3)
        .reshape(gh, gw, grid_step * grid_step)
    )
    best = cells.argmax(axis=2)
    strength = np.take_along_axis(cells, best[..., None], axis=2)[..., 0]
    rows = np.arange(gh)[:, None] * grid_step + best // grid_step
    cols = np.arange(gw)[None, :] * grid_step + best % grid_step
    keep = (strength >= min_gradient) & (strength > 0.0)
    seeds = np.stack([cols[keep], rows[keep]], axis=1).astype(float)
    if limit is not None and len(seeds) > limit:
        strongest = np.sort(np.argsort(-strength[keep], kind="stable")[:limit])
        seeds = seeds[strongest]
    return seeds


def _windows(image: np.ndarray, centers: np.ndarray, half: int) -> np.ndarray:
    """Bilinear samples of the square windows of side ``2 * half + 1`` around ``centers``.

    All taps of one window share the same fractional offset, so a window is blended from
    four shifted views of one integer patch. Taps outside the image clamp to the edge.
    """
    h, w = image.shape
    centers = np.clip(centers, -half - 2.0, [w + half + 1.0, h + half + 1.0])
    base = np.floor(centers)
    frac = centers - base
    base = base.astype(np.intp)
    offsets = np.arange(-half, half + 2)
    cols = np.clip(base[:, 0, None] + offsets, 0, w - 1)
    rows = np.clip(base[:, 1, None] + offsets, 0, h - 1)
    patch = image[rows[:, :, None], cols[:, None, :]]
    fx = frac[:, 0, None, None]
    fy = frac[:, 1, None, None]
    top = patch[:, :-1, :-1] + fx * (patch[:, :-1, 1:] - patch[:, :-1, :-1])
    bottom = patch[:, 1:, :-1] + fx * (patch[:, 1:, 1:] - patch[:, 1:, :-1])
    return top + fy * (bottom - top)


def lk_track(
    prev: Pyramid,
    nxt: Pyramid,
    points: np.ndarray,
    window: int = DEFAULT_WINDOW,
    iterations: int = DEFAULT_ITERATIONS,
    min_eigen: float = DEFAULT_MIN_EIGEN,
    initial: Optional[np.ndarray] = None,
) -> TrackedPointSet:
    """Coarse-to-fine pyramidal Lucas-Kanade.

    Structure tensors and residuals are window means, so ``min_eigen`` is independent of
    the window size. Image gradients are central differences of the sampled template.
    ``initial`` is a per-point level-0 flow guess (for stereo matching). A point is lost
    when its level-0 tensor is near singular, the update diverges, or either end point
    leaves the frame.
    """
    if window < 3 or window % 2 == 0:
        raise ValueError("LK window must be odd and >= 3")
    if prev.shapes != nxt.shapes:
        raise GeometryMismatch(f"Pyramid shapes differ: {prev.shapes} vs {nxt.shapes}")

    base = prev.levels[0]
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    n = len(pts)
    if n == 0:
        return TrackedPointSet(
            points=pts, displacements=pts.copy(), tracked=np.zeros(0, dtype=bool),
            width=base.width, height=base.height,
        )
    limit = np.array([base.width - 1, base.height - 1], dtype=float)
    tracked = np.all((pts >= 0) & (pts <= limit), axis=1)
    start = np.zeros((n, 2)) if initial is None else np.asarray(initial, dtype=float).reshape(n, 2)

    half = window // 2
    level_count = len(prev.levels)
    guess = start / 2.0 ** (level_count - 1)
    flow = np.zeros((n, 2))
    for level in reversed(range(level_count)):
        centers = pts / 2.0**level
        support = _windows(prev.levels[level].pixels, centers, half + 1)
        template = support[:, 1:-1, 1:-1].reshape(n, -1)
        ix = 0.5 * (support[:, 1:-1, 2:] - support[:, 1:-1, :-2]).reshape(n, -1)
        iy = 0.5 * (support[:, 2:, 1:-1] - support[:, :-2, 1:-1]).reshape(n, -1)
        gxx = np.mean(ix * ix, axis=1)
        gxy = np.mean(ix * iy, axis=1)
        gyy = np.mean(iy * iy, axis=1)
        det = gxx * gyy - gxy * gxy
        min_eig = 0.5 * (gxx + gyy) - np.sqrt(0.25 * (gxx - gyy) ** 2 + gxy * gxy)
        solvable = (min_eig >= min_eigen) & (det > 0)
        if level == 0:
            tracked &= solvable

        target = nxt.levels[level].pixels
        nu = np.zeros((n, 2))
        active = solvable & tracked if level == 0 else solvable.copy()
        for _ in range(iterations):
            idx = np.flatnonzero(active)
            if idx.size == 0:
                break
            shift = guess[idx] + nu[idx]
            patch = _windows(target, centers[idx] + shift, half).reshape(idx.size, -1)
            err = template[idx] - patch
            bx = np.mean(err * ix[idx], axis=1)
            by = np.mean(err * iy[idx], axis=1)
            eta_x = (gyy[idx] * bx - gxy[idx] * by) / det[idx]
            eta_y = (gxx[idx] * by - gxy[idx] * bx) / det[idx]
            nu[idx, 0] += eta_x
            nu[idx, 1] += eta_y
            converged = np.hypot(eta_x, eta_y) < CONVERGENCE_EPS
            active[idx[converged]] = False

        if level > 0:
            guess = 2.0 * (guess + nu)
        else:
            flow = guess + nu

    capture = window * 2.0**level_count
    finite = np.all(np.isfinite(flow), axis=1)
    flow = np.where(finite[:, None], flow, 0.0)
    diverged = ~finite | (np.linalg.norm(flow - start, axis=1) > capture)
    ends = pts + flow
    left_frame = ~np.all((ends >= 0) & (ends <= limit), axis=1)
    tracked &= ~diverged & ~left_frame
    flow[~tracked] = 0.0

    return TrackedPointSet(
        points=pts,
        displacements=flow,
        tracked=tracked,
        width=base.width,
        height=base.height,
    )


def accumulate_events(batch: EventBatch, window: float, at: float) -> GrayFrame:
    """Polarity-agnostic event counts over ``(at - window, at]``.

    Counts are scaled by the 99th percentile of the nonzero pixel counts and clipped
    to [0, 1].
    """
    if window <= 0:
        raise ValueError("Accumulation window must be positive")
    counts = np.zeros(batch.width * batch.height, dtype=np.float64)
    if len(batch):
        in_window = (batch.t > at - window) & (batch.t <= at)
        flat = batch.y[in_window].astype(np.int64) * batch.width + batch.x[in_window]
        counts = np.bincount(flat, minlength=batch.width * batch.height).astype(np.float64)
    nonzero = counts[counts > 0]
    if nonzero.size:
        counts = np.clip(counts / np.percentile(nonzero, 99), 0.0, 1.0)
    return GrayFrame(counts.reshape(batch.height, batch.width), timestamp=at)
