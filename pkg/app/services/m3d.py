"""Stereo 3D center tracking: motion-consistency clustering and triangulation."""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial.distance import pdist, squareform

from app.core.errors import DegenerateDepth, InsufficientPoints, TriangulationError
from app.schemas.config import ConsistencyParams
from app.services.geometry import DEFAULT_MIN_DISPARITY, StereoRig, project, triangulate
from app.services.vision import TrackedPointSet

logger = logging.getLogger(__name__)

DEFAULT_EPS_STATIC = 0.5
DEFAULT_MIN_CLUSTER = 5
# rectified eyes see the object center on the same image row
MAX_ROW_GAP = 2.0


@dataclass(frozen=True, eq=False)
class ClusterResult:
    labels: np.ndarray
    dominant: int
    centroid_2d: np.ndarray
    low_confidence: bool = False
    mean_flow: np.ndarray = field(default_factory=lambda: np.zeros(2))

    @property
    def members(self) -> np.ndarray:
        return np.flatnonzero(self.labels == self.dominant)


def _zscore(features: np.ndarray) -> np.ndarray:
    mean = features.mean(axis=0)
    std = features.std(axis=0)
    safe = np.where(std > 0, std, 1.0)
    return np.where(std > 0, (features - mean) / safe, 0.0)


def consistency_matrix(tracked: TrackedPointSet, params: ConsistencyParams) -> np.ndarray:
    """Pairwise motion-consistency relation over the tracked points of one frame."""
    active = tracked.active()
    if len(active) < 2:
        raise InsufficientPoints(f"Need at least 2 tracked points, got {len(active)}")
    features = np.hstack([active.displacements, params.lambda_ * active.normalized])
    z = _zscore(features)
    matrix = squareform(pdist(z)) <= params.tau
    np.fill_diagonal(matrix, True)
    return matrix


def cluster(consistency: np.ndarray) -> list[np.ndarray]:
    """Connected components, ordered and labelled by their smallest member index."""
    matrix = np.asarray(consistency, dtype=bool)
    _, raw = connected_components(csr_matrix(matrix), directed=False)
    _, first = np.unique(raw, return_index=True)
    order = np.argsort(first)
    return [np.flatnonzero(raw == raw_label) for raw_label in np.unique(raw)[order]]


def select_dominant(
    clusters: list[np.ndarray],
    tracked: TrackedPointSet,
    eps_static: float = DEFAULT_EPS_STATIC,
    min_size: int = 1,
) -> ClusterResult:
    """Pick the object cluster among the components of ``tracked.active()``.

    The result is low-confidence when every cluster is static or the winner has fewer
    than ``min_size`` points.
    """
    if not clusters:
        raise InsufficientPoints("No clusters to choose from")
    active = tracked.active()
    magnitude = np.linalg.norm(active.displacements, axis=1)

    labels = np.full(len(active), -1, dtype=int)
    for label, members in enumerate(clusters):
        labels[members] = label

    moving = [
        label for label, members in enumerate(clusters)
        if np.median(magnitude[members]) >= eps_static
    ]
    candidates = moving or list(range(len(clusters)))
    dominant = min(
        candidates,
        key=lambda label: (-len(clusters[label]), -float(magnitude[clusters[label]].mean()), label),
    )
    size = len(clusters[dominant])
    low_confidence = not moving or size < min_size
    if not moving:
        logger.debug("All %d clusters static, falling back to the largest", len(clusters))
    elif size < min_size:
        logger.debug("Dominant cluster holds %d points, below %d", size, min_size)

    members = clusters[dominant]
    return ClusterResult(
        labels=labels,
        dominant=dominant,
        centroid_2d=active.next_points[members].mean(axis=0),
        low_confidence=low_confidence,
        mean_flow=active.displacements[members].mean(axis=0),
    )


def locate(
    tracked: TrackedPointSet,
    params: ConsistencyParams,
    eps_static: float = DEFAULT_EPS_STATIC,
    min_size: int = DEFAULT_MIN_CLUSTER,
) -> ClusterResult:
    return select_dominant(cluster(consistency_matrix(tracked, params)), tracked, eps_static, min_size)


def locate_pair(
    left: TrackedPointSet,
    right: TrackedPointSet,
    params: ConsistencyParams,
    eps_static: float = DEFAULT_EPS_STATIC,
    executor: Optional[ThreadPoolExecutor] = None,
    min_size: int = DEFAULT_MIN_CLUSTER,
) -> tuple[ClusterResult, ClusterResult]:
    if executor is None:
        return locate(left, params, eps_static, min_size), locate(right, params, eps_static, min_size)
    futures = [executor.submit(locate, eye, params, eps_static, min_size) for eye in (left, right)]
    return futures[0].result(), futures[1].result()


def track_center(
    rig: StereoRig,
    left: ClusterResult,
    right: ClusterResult,
    min_disparity: float = DEFAULT_MIN_DISPARITY,
) -> np.ndarray:
    return triangulate(rig, left.centroid_2d, right.centroid_2d, min_disparity)


def carry_center(
    rig: StereoRig,
    left: ClusterResult,
    right: ClusterResult,
    previous,
    min_disparity: float = DEFAULT_MIN_DISPARITY,
    max_jump: Optional[float] = None,
) -> tuple[np.ndarray, bool]:
    """Previous center moved by each eye's dominant-cluster mean flow, then triangulated.

    Cluster centroids depend on which surface points happen to be tracked; the mean flow
    of the same points does not. Returns ``(center, confident)``: low-confidence
    clusters, eyes disagreeing on the image row, a failed triangulation or a depth jump
    beyond ``max_jump`` keep the previous center.
    """
    previous = np.asarray(previous, dtype=float).reshape(3)
    if left.low_confidence or right.low_confidence:
        return previous.copy(), False
    try:
        u_l, v_l, _ = project(rig.left, previous)
        u_r, v_r, _ = project(rig.right, rig.to_eye(previous, "right"))
    except DegenerateDepth:
        return previous.copy(), False
    moved_left = np.array([u_l, v_l]) + left.mean_flow
    moved_right = np.array([u_r, v_r]) + right.mean_flow
    if abs(moved_left[1] - moved_right[1]) > MAX_ROW_GAP:
        logger.debug("Eyes disagree on the center row: %.2f vs %.2f", moved_left[1], moved_right[1])
        return previous.copy(), False
    try:
        center = track_center(
            rig,
            replace(left, centroid_2d=moved_left),
            replace(right, centroid_2d=moved_right),
            min_disparity,
        )
    except TriangulationError as e:
        logger.debug("Carried center not triangulable: %s", e)
        return previous.copy(), False
    if max_jump is not None and abs(center[2] - previous[2]) > max_jump:
        return previous.copy(), False
    return center, True


def dump_labels(path: Path, tracked: TrackedPointSet, result: ClusterResult) -> None:
    active = tracked.active()
    rows = np.column_stack([np.arange(len(active)), result.labels, active.displacements])
    with open(path, "w", encoding="utf-8") as f:
        f.write("point_id,label,du,dv\n")
        for point_id, label, du, dv in rows:
            f.write(f"{int(point_id)},{int(label)},{du:.6f},{dv:.6f}\n")
