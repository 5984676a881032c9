"""Rigid-body and pinhole-camera geometry.

Rotations are plain 3x3 ``numpy`` arrays. Euler angles follow the roll-pitch-yaw
convention ``R = Rz(yaw) @ Ry(pitch) @ Rx(roll)``.
"""

import itertools
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import NamedTuple, Optional

import numpy as np
from scipy.spatial import ConvexHull, QhullError
from scipy.spatial.distance import pdist
from scipy.spatial.transform import Rotation as ScipyRotation

from app.core.errors import DegenerateDepth, DisparityTooSmall, NonPositiveDisparity

DEFAULT_MIN_DISPARITY = 0.5
ROTATION_TOL = 1e-9
GIMBAL_TOL = 1e-9


class EulerAngles(NamedTuple):
    roll: float
    pitch: float
    yaw: float


def wrap_angle(angle):
    """Wrap to (-pi, pi]."""
    wrapped = np.mod(np.asarray(angle, dtype=float) + math.pi, 2.0 * math.pi) - math.pi
    wrapped = np.where(wrapped <= -math.pi, math.pi, wrapped)
    if np.ndim(wrapped) == 0:
        return float(wrapped)
    return wrapped


def rot_x(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def is_rotation(m: np.ndarray, tol: float = ROTATION_TOL) -> bool:
    m = np.asarray(m, dtype=float)
    if m.shape != (3, 3) or not np.all(np.isfinite(m)):
        return False
    orthogonal = np.linalg.norm(m.T @ m - np.eye(3)) <= tol
    return bool(orthogonal and abs(np.linalg.det(m) - 1.0) <= tol)


def euler_to_rotation(e: EulerAngles) -> np.ndarray:
    return rot_z(e.yaw) @ rot_y(e.pitch) @ rot_x(e.roll)


def rotation_to_euler(r: np.ndarray) -> EulerAngles:
    """Inverse of :func:`euler_to_rotation`.

    At gimbal lock (|pitch| = pi/2) roll is forced to 0 and yaw absorbs the free angle.
    """
    r = np.asarray(r, dtype=float)
    cos_pitch = math.hypot(r[0, 0], r[1, 0])
    if cos_pitch < GIMBAL_TOL:
        pitch = math.copysign(math.pi / 2.0, -r[2, 0])
        yaw = math.atan2(-r[0, 1], r[1, 1])
        return EulerAngles(0.0, pitch, wrap_angle(yaw))

    pitch = math.atan2(-r[2, 0], cos_pitch)
    roll = math.atan2(r[2, 1], r[2, 2])
    yaw = math.atan2(r[1, 0], r[0, 0])
    return EulerAngles(wrap_angle(roll), pitch, wrap_angle(yaw))


def geodesic_angle(a: np.ndarray, b: np.ndarray) -> float:
    """Angle of the relative rotation a^T b, in [0, pi].

    Evaluated as atan2(|sin|, cos) so small angles keep full precision.
    """
    rel = np.asarray(a, dtype=float).T @ np.asarray(b, dtype=float)
    cos_term = np.trace(rel) - 1.0
    sin_term = np.linalg.norm(
        [rel[2, 1] - rel[1, 2], rel[0, 2] - rel[2, 0], rel[1, 0] - rel[0, 1]]
    )
    return float(np.clip(math.atan2(sin_term, cos_term), 0.0, math.pi))


def exp_so3(rotvec: np.ndarray) -> np.ndarray:
    return ScipyRotation.from_rotvec(np.asarray(rotvec, dtype=float)).as_matrix()


def axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    norm = np.linalg.norm(axis)
    if norm == 0.0:
        return np.eye(3)
    return exp_so3(axis / norm * angle)


@dataclass(frozen=True, eq=False)
class Pose:
    rotation: np.ndarray
    center: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float).reshape(3, 3))
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float).reshape(3))

    def transform(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.rotation.T + self.center

    def as_matrix34(self) -> np.ndarray:
        return np.hstack([self.rotation, self.center[:, None]])

    @classmethod
    def from_matrix34(cls, values) -> "Pose":
        m = np.asarray(values, dtype=float).reshape(3, 4)
        return cls(rotation=m[:, :3], center=m[:, 3])

    def is_valid(self) -> bool:
        return is_rotation(self.rotation) and bool(np.all(np.isfinite(self.center)))


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("Focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("Principal point must lie inside the image")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class StereoRig:
    """Rectified pair; the right eye sits ``baseline`` meters along +x of the left eye."""

    left: CameraIntrinsics
    right: CameraIntrinsics
    baseline: float

    def __post_init__(self):
        if self.baseline <= 0:
            raise ValueError("Stereo baseline must be positive")

    def eye(self, name: str) -> CameraIntrinsics:
        return self.left if name == "left" else self.right

    def to_eye(self, points: np.ndarray, name: str) -> np.ndarray:
        """Left-camera coordinates to the coordinates of eye ``name``."""
        points = np.asarray(points, dtype=float)
        if name == "left":
            return points
        return points - np.array([self.baseline, 0.0, 0.0])


def cube_rotation_group() -> tuple[np.ndarray, ...]:
    """The 24 proper rotations mapping the axis-aligned cube onto itself."""
    group = []
    for perm in itertools.permutations(range(3)):
        for signs in itertools.product((1.0, -1.0), repeat=3):
            m = np.zeros((3, 3))
            for row, col in enumerate(perm):
                m[row, col] = signs[row]
            if np.linalg.det(m) > 0:
                group.append(m)
    return tuple(group)


def _diameter(points: np.ndarray) -> float:
    if len(points) < 2:
        return 0.0
    candidates = points
    if len(points) > 4:
        try:
            candidates = points[ConvexHull(points).vertices]
        except QhullError:
            candidates = points
    return float(pdist(candidates).max())


@dataclass(frozen=True, eq=False)
class ObjectModel:
    points: np.ndarray
    diameter: float
    symmetry_group: tuple = field(default_factory=lambda: (np.eye(3),))

    @classmethod
    def from_points(cls, points, symmetry_group: Optional[tuple] = None) -> "ObjectModel":
        pts = np.asarray(points, dtype=float).reshape(-1, 3)
        group = tuple(symmetry_group) if symmetry_group else (np.eye(3),)
        if not any(np.allclose(g, np.eye(3)) for g in group):
            raise ValueError("Symmetry group must contain the identity")
        for g in group:
            if not is_rotation(g, tol=1e-6):
                raise ValueError("Symmetry group elements must be rotations")
        return cls(points=pts, diameter=_diameter(pts), symmetry_group=group)

    @classmethod
    def cube(cls, side: float, samples_per_edge: int = 2, symmetric: bool = True) -> "ObjectModel":
        """Surface samples of an axis-aligned cube centered on the origin."""
        if samples_per_edge < 2:
            raise ValueError("samples_per_edge must be >= 2")
        half = side / 2.0
        ticks = np.linspace(-half, half, samples_per_edge)
        a, b = np.meshgrid(ticks, ticks, indexing="ij")
        a, b = a.ravel(), b.ravel()
        faces = []
        for axis in range(3):
            for sign in (-half, half):
                face = np.empty((a.size, 3))
                others = [i for i in range(3) if i != axis]
                face[:, axis] = sign
                face[:, others[0]] = a
                face[:, others[1]] = b
                faces.append(face)
        pts = np.unique(np.round(np.vstack(faces), 12), axis=0)
        group = cube_rotation_group() if symmetric else None
        return cls.from_points(pts, group)

    def to_text(self) -> str:
        lines = [f"points {len(self.points)} diameter {self.diameter:.12g}"]
        lines += [" ".join(f"{v:.12g}" for v in p) for p in self.points]
        if len(self.symmetry_group) > 1:
            lines.append(f"symmetry {len(self.symmetry_group)}")
            lines += [" ".join(f"{v:.12g}" for v in g.ravel()) for g in self.symmetry_group]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ObjectModel":
        tokens = text.split()
        if len(tokens) < 4 or tokens[0] != "points" or tokens[2] != "diameter":
            raise ValueError("Model file must start with 'points <n> diameter <d>'")
        n = int(tokens[1])
        values = np.array(tokens[4 : 4 + 3 * n], dtype=float)
        if values.size != 3 * n:
            raise ValueError(f"Model file declares {n} points but holds {values.size // 3}")
        rest = tokens[4 + 3 * n :]
        group = None
        if rest:
            if rest[0] != "symmetry":
                raise ValueError(f"Unexpected model file section {rest[0]!r}")
            k = int(rest[1])
            mats = np.array(rest[2 : 2 + 9 * k], dtype=float)
            if mats.size != 9 * k:
                raise ValueError(f"Model file declares {k} symmetries but holds {mats.size // 9}")
            group = tuple(mats.reshape(k, 3, 3))
        return cls.from_points(values.reshape(n, 3), group)

    def subset(self, count: int) -> np.ndarray:
        """Deterministic, evenly strided subset of at most ``count`` points."""
        if count <= 0 or count >= len(self.points):
            return self.points
        idx = np.linspace(0, len(self.points) - 1, count).round().astype(int)
        return self.points[np.unique(idx)]

    @cached_property
    def hull_planes(self) -> np.ndarray:
        """Outward facet planes ``(n, offset)`` of the convex hull, ``n @ x + offset <= 0`` inside.

        Empty for flat or degenerate point sets.
        """
        if len(self.points) < 4:
            return np.zeros((0, 4))
        try:
            equations = ConvexHull(self.points).equations
        except QhullError:
            return np.zeros((0, 4))
        # +0.0 folds -0.0 so coplanar facets collapse to one row
        return np.unique(np.round(equations, 9) + 0.0, axis=0)


def intersect_hull(origins, directions, planes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """First hit of rays ``origin + t * direction`` (t > 0) with a convex polytope.

    Returns (points, hit mask); missed rays get NaN points.
    """
    directions = np.asarray(directions, dtype=float).reshape(-1, 3)
    origins = np.broadcast_to(np.asarray(origins, dtype=float), directions.shape)
    points = np.full(directions.shape, np.nan)
    if len(planes) == 0 or len(directions) == 0:
        return points, np.zeros(len(directions), dtype=bool)

    normals, offsets = planes[:, :3], planes[:, 3]
    num = -(origins @ normals.T + offsets)
    den = directions @ normals.T
    ratio = np.divide(num, den, out=np.zeros_like(num), where=den != 0)
    t_enter = np.where(den < 0, ratio, -np.inf).max(axis=1)
    t_exit = np.where(den > 0, ratio, np.inf).min(axis=1)
    outside_parallel = np.any((den == 0) & (num < 0), axis=1)
    hit = np.isfinite(t_enter) & (t_enter > 0) & (t_enter <= t_exit) & ~outside_parallel
    points[hit] = origins[hit] + t_enter[hit, None] * directions[hit]
    return points, hit


def project(k: CameraIntrinsics, c) -> tuple[float, float, float]:
    x, y, z = (float(v) for v in np.asarray(c, dtype=float).reshape(3))
    if z <= 0:
        raise DegenerateDepth(f"Point has non-positive depth z={z}")
    return k.fx * x / z + k.cx, k.fy * y / z + k.cy, z


def project_points(k: CameraIntrinsics, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized projection; returns (uv, depth). Points with z <= 0 get NaN pixels."""
    points = np.asarray(points, dtype=float)
    z = points[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        safe_z = np.where(z > 0, z, np.nan)
        u = k.fx * points[..., 0] / safe_z + k.cx
        v = k.fy * points[..., 1] / safe_z + k.cy
    return np.stack([u, v], axis=-1), z


def back_project(k: CameraIntrinsics, u: float, v: float, depth: float) -> np.ndarray:
    if depth <= 0:
        raise DegenerateDepth(f"Back-projection depth must be positive, got {depth}")
    return np.array([(u - k.cx) / k.fx * depth, (v - k.cy) / k.fy * depth, depth])


def triangulate(
    rig: StereoRig,
    left_center,
    right_center,
    min_disparity: float = DEFAULT_MIN_DISPARITY,
) -> np.ndarray:
    u_l, v_l = float(left_center[0]), float(left_center[1])
    u_r = float(right_center[0])
    disparity = u_l - u_r
    if disparity <= 0:
        raise NonPositiveDisparity(f"Disparity {disparity:.4f} px is not positive")
    if disparity < min_disparity:
        raise DisparityTooSmall(
            f"Disparity {disparity:.4f} px is below the {min_disparity} px floor"
        )
    k = rig.left
    return (rig.baseline / disparity) * np.array([u_l - k.cx, v_l - k.cy, k.fx])


def visible_mask(
    uv: np.ndarray,
    depth: np.ndarray,
    width: int,
    height: int,
    depth_tol: float,
    cell: int = 2,
) -> np.ndarray:
    """Hidden-point removal with a coarse z-buffer.

    A point is visible when it lands inside the image and lies within ``depth_tol`` of
    the nearest point falling into the same ``cell`` x ``cell`` block.
    """
    inside = (
        (depth > 0)
        & np.isfinite(uv[:, 0])
        & (uv[:, 0] >= 0)
        & (uv[:, 0] <= width - 1)
        & (uv[:, 1] >= 0)
        & (uv[:, 1] <= height - 1)
    )
    mask = np.zeros(len(depth), dtype=bool)
    if not inside.any():
        return mask
    cols = (width + cell - 1) // cell
    rows = (height + cell - 1) // cell
    idx = (uv[inside, 1] // cell).astype(int) * cols + (uv[inside, 0] // cell).astype(int)
    zbuf = np.full(rows * cols, np.inf)
    np.minimum.at(zbuf, idx, depth[inside])
    mask[np.flatnonzero(inside)] = depth[inside] <= zbuf[idx] + depth_tol
    return mask
