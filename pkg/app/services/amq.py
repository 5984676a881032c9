"""Adaptive pose memory queue: history-blended pivot rotation."""

import logging
from collections import deque
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from app.core.errors import DegenerateDepth
from app.services.geometry import (
    EulerAngles,
    Pose,
    euler_to_rotation,
    rot_x,
    rot_y,
    rotation_to_euler,
    wrap_angle,
)

logger = logging.getLogger(__name__)

DEFAULT_CAPACITY = 4
DEFAULT_ALPHA = 0.5


class PoseQueue:
    """Newest-first FIFO of ``(frame_index, Pose)`` bounded by ``capacity``."""

    def __init__(self, capacity: int = DEFAULT_CAPACITY, alpha: float = DEFAULT_ALPHA):
        if capacity < 0:
            raise ValueError("Queue capacity must be >= 0")
        if not 0.0 < alpha <= 1.0:
            raise ValueError("alpha must lie in (0, 1]")
        self.capacity = capacity
        self.alpha = alpha
        self._entries: deque[tuple[int, Pose]] = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[tuple[int, Pose]]:
        return iter(self._entries)

    @property
    def poses(self) -> list[Pose]:
        return [pose for _, pose in self._entries]

    def enqueue(self, pose: Pose, frame_index: int = 0) -> "PoseQueue":
        if not pose.is_valid():
            raise ValueError("Only valid poses may be enqueued")
        if self.capacity > 0:
            self._entries.appendleft((frame_index, pose))
        return self

    def clear(self) -> None:
        self._entries.clear()

    def dump(self, path: Path) -> None:
        with open(path, "a", encoding="utf-8") as f:
            for frame_index, pose in self._entries:
                e = rotation_to_euler(pose.rotation)
                cx, cy, cz = pose.center
                f.write(
                    f"{frame_index},{e.roll:.9f},{e.pitch:.9f},{e.yaw:.9f},"
                    f"{cx:.9f},{cy:.9f},{cz:.9f}\n"
                )


def initial_hypothesis(c) -> np.ndarray:
    """Look-at rotation: optical axis turned toward ``c``, no roll."""
    x, y, z = (float(v) for v in np.asarray(c, dtype=float).reshape(3))
    if z <= 0:
        raise DegenerateDepth(f"Cannot look at a point with z={z}")
    heading = np.arctan2(x, z)
    elevation = np.arctan2(-y, np.hypot(x, z))
    return rot_y(heading) @ rot_x(elevation)


def _blend(a: EulerAngles, b: EulerAngles, alpha: float) -> EulerAngles:
    return EulerAngles(
        *(wrap_angle(x + (1.0 - alpha) * wrap_angle(y - x)) for x, y in zip(a, b))
    )


def pivot_rotation(
    queue: PoseQueue,
    current_center,
    frame_index: int,
    seed: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Blend the seed rotation with the queued history, newest entry first.

    Frame 0, a missing seed, or an empty queue of nonzero capacity starts from the
    look-at hypothesis of ``current_center``; capacity 0 passes the seed through.
    Each component moves toward the history entry along the shortest arc, so the weight
    of older entries decays geometrically with ``alpha``.
    """
    if frame_index == 0 or seed is None or (queue.capacity > 0 and len(queue) == 0):
        estimate = rotation_to_euler(initial_hypothesis(current_center))
    else:
        estimate = rotation_to_euler(seed)
    depth = min(frame_index, queue.capacity, len(queue))
    for n, pose in enumerate(queue.poses):
        if n >= depth:
            break
        estimate = _blend(estimate, rotation_to_euler(pose.rotation), queue.alpha)
    return euler_to_rotation(estimate)


def enqueue(queue: PoseQueue, pose: Pose, frame_index: int = 0) -> PoseQueue:
    return queue.enqueue(pose, frame_index)
