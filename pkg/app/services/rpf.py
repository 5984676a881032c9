"""Ray pose filter: depth hypotheses along the center ray, scoring, Top-1 and refinement."""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import softmax

from app.core.errors import (
    DegenerateDepth,
    GeometryMismatch,
    InsufficientObservations,
    NotScored,
)
from app.schemas.config import Distribution, SamplerConfig, ScorerConfig
from app.services.geometry import (
    CameraIntrinsics,
    ObjectModel,
    Pose,
    StereoRig,
    exp_so3,
    intersect_hull,
    project,
    project_points,
    visible_mask,
)

logger = logging.getLogger(__name__)

MIN_DEPTH = 1e-3
MIN_OBSERVED = 3
EYES = ("left", "right")
DEGENERATE_RATIO = 1e-12
STEP_HALVINGS = 3
# Cauchy scale of anchored reprojection residuals (px)
ANCHOR_SCALE = 2.0
MIN_ROWS = 6

# left/right observed pixel positions of the object cluster
Observations = tuple[np.ndarray, np.ndarray]


@dataclass(frozen=True, eq=False)
class RayHypothesis:
    index: int
    center: np.ndarray
    rotation: np.ndarray
    depth: float
    score: float

    @property
    def pose(self) -> Pose:
        return Pose(rotation=self.rotation, center=self.center)


@dataclass(frozen=True, eq=False)
class HypothesisSet:
    u: float
    v: float
    centers: np.ndarray
    depths: np.ndarray
    rotation: np.ndarray
    scores: np.ndarray
    errors: Optional[np.ndarray] = None
    scored: bool = False

    def __len__(self) -> int:
        return len(self.depths)

    def __getitem__(self, j: int) -> RayHypothesis:
        return RayHypothesis(
            index=j,
            center=self.centers[j],
            rotation=self.rotation,
            depth=float(self.depths[j]),
            score=float(self.scores[j]),
        )

    def dump(self, path: Path) -> None:
        errors = self.errors if self.errors is not None else np.full(len(self), np.nan)
        with open(path, "w", encoding="utf-8") as f:
            f.write("j,depth,err,score\n")
            for j in range(len(self)):
                f.write(f"{j},{self.depths[j]:.9f},{errors[j]:.6f},{self.scores[j]:.9f}\n")


@dataclass(frozen=True, eq=False)
class RefineResult:
    pose: Pose
    degenerate: bool
    cost_before: float
    cost_after: float
    iterations: int


@dataclass(frozen=True, eq=False)
class AttentionResult:
    output: np.ndarray
    attention: np.ndarray
    salience: np.ndarray


@dataclass(frozen=True, eq=False)
class Correspondences:
    """Model-frame anchors with the pixels they were tracked to in each eye.

    A NaN pixel row means that eye lost the anchor.
    """

    anchors: np.ndarray
    left: np.ndarray
    right: np.ndarray

    def __post_init__(self):
        anchors = np.asarray(self.anchors, dtype=float).reshape(-1, 3)
        left = np.asarray(self.left, dtype=float).reshape(-1, 2)
        right = np.asarray(self.right, dtype=float).reshape(-1, 2)
        if not len(anchors) == len(left) == len(right):
            raise GeometryMismatch(
                f"Anchor rows disagree: {len(anchors)} anchors, {len(left)} left, {len(right)} right"
            )
        object.__setattr__(self, "anchors", anchors)
        object.__setattr__(self, "left", left)
        object.__setattr__(self, "right", right)

    def __len__(self) -> int:
        return len(self.anchors)

    def view(self, eye: str) -> tuple[np.ndarray, np.ndarray]:
        pixels = self.left if eye == "left" else self.right
        keep = np.all(np.isfinite(pixels), axis=1)
        return self.anchors[keep], pixels[keep]

    @property
    def usable(self) -> bool:
        return any(len(self.view(eye)[0]) >= MIN_OBSERVED for eye in EYES)


def lift_to_model(
    rig: StereoRig,
    eye: str,
    pixels: np.ndarray,
    pose: Pose,
    model: ObjectModel,
) -> tuple[np.ndarray, np.ndarray]:
    """Model-frame points where the pixel rays of ``eye`` first enter the object hull at ``pose``.

    Returns (anchors, hit mask); rays missing the hull get NaN anchors.
    """
    k = rig.eye(eye)
    pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
    directions = np.column_stack(
        [(pixels[:, 0] - k.cx) / k.fx, (pixels[:, 1] - k.cy) / k.fy, np.ones(len(pixels))]
    )
    origin = -rig.to_eye(np.zeros(3), eye)
    # rays expressed in the model frame
    return intersect_hull(
        (origin - pose.center) @ pose.rotation,
        directions @ pose.rotation,
        model.hull_planes,
    )


def ray_through(k: CameraIntrinsics, c) -> tuple[float, float, float]:
    return project(k, c)


def _stratified(rng: np.random.Generator, count: int) -> np.ndarray:
    """One jittered draw per width ``2 / count`` stratum of [-1, 1], skipping the one the ray depth covers."""
    if count <= 1:
        return np.zeros(0)
    lower = -1.0 + 2.0 * np.arange(count) / count
    lower = np.delete(lower, count // 2)
    return lower + rng.uniform(0.0, 2.0 / count, len(lower))


def perturb_depth(center, noise: float, beta: float, seed: int, index: int) -> np.ndarray:
    """Slide ``center`` along its left-eye ray by a uniform offset in ``[-noise, noise] * beta``."""
    center = np.asarray(center, dtype=float).reshape(3)
    if noise <= 0:
        return center
    rng = np.random.default_rng([seed, index])
    depth = center[2]
    shifted = max(depth + rng.uniform(-noise, noise) * beta, MIN_DEPTH)
    return center * (shifted / depth)


def sample_depths(d: float, cfg: SamplerConfig, beta: Optional[float] = None) -> np.ndarray:
    """Depth samples around ``d``; index 0 is always ``d`` itself.

    ``cfg.beta`` wins over ``beta`` (normally the object diameter). Uniform draws are
    stratified so every depth within ``beta`` of ``d`` has a sample closer than
    ``2 * beta / cfg.count``; the other distributions draw independently.
    """
    if d <= 0:
        raise DegenerateDepth(f"Ray depth must be positive, got {d}")
    scale = cfg.beta if cfg.beta is not None else beta
    if scale is None or scale <= 0:
        raise ValueError("Sampling scale beta must be positive")

    rng = np.random.default_rng(cfg.seed)
    count = cfg.count - 1
    if cfg.distribution is Distribution.UNIFORM:
        noise = _stratified(rng, cfg.count)
    elif cfg.distribution is Distribution.GAUSSIAN:
        noise = rng.standard_normal(count)
    elif cfg.distribution is Distribution.LAPLACE:
        noise = rng.laplace(0.0, 1.0, count)
    else:
        noise = 2.0 * rng.beta(2.0, 2.0, count) - 1.0
    depths = np.concatenate([[d], d + scale * noise])
    return np.maximum(depths, MIN_DEPTH)


def make_hypotheses(
    k: CameraIntrinsics,
    u: float,
    v: float,
    depths,
    pivot: np.ndarray,
) -> HypothesisSet:
    depths = np.asarray(depths, dtype=float).ravel()
    if depths.size == 0:
        raise ValueError("At least one depth is required")
    if np.any(depths <= 0):
        raise DegenerateDepth("Hypothesis depths must be positive")
    centers = np.column_stack(
        [(u - k.cx) / k.fx * depths, (v - k.cy) / k.fy * depths, depths]
    )
    return HypothesisSet(
        u=float(u),
        v=float(v),
        centers=centers,
        depths=depths,
        rotation=np.asarray(pivot, dtype=float),
        scores=np.full(depths.size, 1.0 / depths.size),
    )


def _occlusion_cell(k: CameraIntrinsics, model: ObjectModel, count: int, depth: float) -> int:
    spacing = k.fx * model.diameter / (max(depth, MIN_DEPTH) * np.sqrt(max(count, 1)))
    return max(2, int(np.ceil(spacing)))


def render_points(
    rig: StereoRig,
    eye: str,
    points: np.ndarray,
    rotation: np.ndarray,
    center: np.ndarray,
    model: ObjectModel,
    occlusion: bool = True,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Project model points posed at (rotation, center) into ``eye``.

    Returns (uv, camera points, mask of points kept).
    """
    k = rig.eye(eye)
    cam = rig.to_eye(points @ rotation.T + center, eye)
    uv, z = project_points(k, cam)
    if occlusion:
        cell = _occlusion_cell(k, model, len(points), float(center[2]))
        mask = visible_mask(uv, z, k.width, k.height, 0.3 * model.diameter, cell)
    else:
        mask = (z > 0) & np.all(np.isfinite(uv), axis=1)
    return uv, cam, mask


def _anchored_errors(
    hset: HypothesisSet,
    correspondences: Correspondences,
    rig: StereoRig,
    cutoff: float,
) -> Optional[np.ndarray]:
    """Mean truncated anchor reprojection distance per hypothesis, averaged over usable eyes."""
    totals = np.zeros(len(hset))
    eyes = 0
    for eye in EYES:
        anchors, pixels = correspondences.view(eye)
        if len(anchors) < MIN_OBSERVED:
            continue
        cam = rig.to_eye((anchors @ hset.rotation.T)[None] + hset.centers[:, None, :], eye)
        uv, _ = project_points(rig.eye(eye), cam)
        dist = np.linalg.norm(uv - pixels[None], axis=2)
        totals += np.minimum(np.nan_to_num(dist, nan=cutoff), cutoff).mean(axis=1)
        eyes += 1
    return totals / eyes if eyes else None


def _chamfer_errors(
    hset: HypothesisSet,
    model: ObjectModel,
    observed: Observations,
    rig: StereoRig,
    cfg: ScorerConfig,
    executor: Optional[ThreadPoolExecutor],
) -> np.ndarray:
    """Truncated symmetric chamfer per hypothesis, averaged over both eyes.

    Visibility comes from the ray-depth hypothesis; the others only slide along its ray.
    """
    points = model.subset(cfg.model_points)
    totals = np.zeros(len(hset))
    for eye, obs in zip(EYES, observed):
        _, _, mask = render_points(rig, eye, points, hset.rotation, hset.centers[0], model)
        if not mask.any():
            totals += cfg.cutoff
            continue
        visible = points[mask] @ hset.rotation.T
        cam = rig.to_eye(visible[None] + hset.centers[:, None, :], eye)
        uv, _ = project_points(rig.eye(eye), cam)
        uv = np.nan_to_num(uv, nan=1e9)

        forward, _ = cKDTree(obs).query(uv.reshape(-1, 2))
        forward = np.minimum(forward.reshape(len(hset), -1), cfg.cutoff).mean(axis=1)

        def backward_of(j: int) -> float:
            dist, _ = cKDTree(uv[j]).query(obs)
            return float(np.minimum(dist, cfg.cutoff).mean())

        if executor is None:
            backward = np.array([backward_of(j) for j in range(len(hset))])
        else:
            backward = np.array(list(executor.map(backward_of, range(len(hset)))))
        totals += 0.5 * (forward + backward)
    return totals / len(EYES)


def score_hypotheses(
    hset: HypothesisSet,
    model: ObjectModel,
    observed: Observations,
    rig: StereoRig,
    cfg: ScorerConfig,
    executor: Optional[ThreadPoolExecutor] = None,
    correspondences: Optional[Correspondences] = None,
) -> HypothesisSet:
    """Softmax salience from a truncated reprojection error.

    With enough tracked anchors the error is their reprojection distance; otherwise a
    symmetric chamfer between the rendered model and the observed cluster points.
    """
    if len(hset) == 0:
        raise ValueError("Cannot score an empty hypothesis set")
    errors = None
    if correspondences is not None:
        errors = _anchored_errors(hset, correspondences, rig, cfg.cutoff)
    if errors is None:
        observed = tuple(np.asarray(obs, dtype=float).reshape(-1, 2) for obs in observed)
        for eye, obs in zip(EYES, observed):
            if len(obs) < MIN_OBSERVED:
                raise InsufficientObservations(
                    f"{eye} eye has {len(obs)} observed points, need {MIN_OBSERVED}"
                )
        errors = _chamfer_errors(hset, model, observed, rig, cfg, executor)
    scores = softmax(-errors / cfg.temperature)
    return replace(hset, errors=errors, scores=scores, scored=True)


def select_top1(hset: HypothesisSet) -> RayHypothesis:
    if not hset.scored:
        raise NotScored("Hypotheses must be scored before selection")
    order = np.lexsort((np.arange(len(hset)), hset.depths, -hset.scores))
    return hset[int(order[0])]


def _skew(v: np.ndarray) -> np.ndarray:
    """Batched cross-product matrices for rows of ``v``."""
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1], out[..., 0, 2] = -v[..., 2], v[..., 1]
    out[..., 1, 0], out[..., 1, 2] = v[..., 2], -v[..., 0]
    out[..., 2, 0], out[..., 2, 1] = -v[..., 1], v[..., 0]
    return out


def _linearize(
    rotation: np.ndarray,
    center: np.ndarray,
    points: np.ndarray,
    observed: Observations,
    rig: StereoRig,
    model: ObjectModel,
    cutoff: float,
    occlusion: bool,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Truncated-quadratic cost plus inlier residuals and Jacobian over [omega, dC]."""
    cost = 0.0
    residuals, jacobians = [], []
    rotated = points @ rotation.T
    for eye, obs in zip(EYES, observed):
        if len(obs) == 0:
            continue
        k = rig.eye(eye)
        uv, cam, mask = render_points(rig, eye, points, rotation, center, model, occlusion)
        idx = np.flatnonzero(mask)
        if idx.size == 0:
            cost += cutoff**2 * len(obs)
            continue
        _, nearest = cKDTree(uv[idx]).query(obs)
        match = idx[nearest]
        r = uv[match] - obs
        sq = np.sum(r * r, axis=1)
        inlier = sq < cutoff**2
        cost += float(np.sum(np.where(inlier, sq, cutoff**2)))

        match, r = match[inlier], r[inlier]
        x, y, z = cam[match, 0], cam[match, 1], cam[match, 2]
        d_proj = np.zeros((len(match), 2, 3))
        d_proj[:, 0, 0] = k.fx / z
        d_proj[:, 0, 2] = -k.fx * x / z**2
        d_proj[:, 1, 1] = k.fy / z
        d_proj[:, 1, 2] = -k.fy * y / z**2
        d_omega = d_proj @ -_skew(rotated[match])
        jac = np.concatenate([d_omega, d_proj], axis=2)
        residuals.append(r.reshape(-1))
        jacobians.append(jac.reshape(-1, 6))
    if not residuals:
        return cost, np.zeros(0), np.zeros((0, 6))
    return cost, np.concatenate(residuals), np.vstack(jacobians)


def _linearize_anchored(
    rotation: np.ndarray,
    center: np.ndarray,
    correspondences: Correspondences,
    rig: StereoRig,
    scale: float,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Cauchy cost of anchor reprojections in both eyes, with IRLS-weighted rows over [omega, dC]."""
    cost = 0.0
    residuals, jacobians = [], []
    for eye in EYES:
        anchors, pixels = correspondences.view(eye)
        if len(anchors) == 0:
            continue
        k = rig.eye(eye)
        rotated = anchors @ rotation.T
        cam = rig.to_eye(rotated + center, eye)
        if np.any(cam[:, 2] <= MIN_DEPTH):
            return np.inf, np.zeros(0), np.zeros((0, 6))
        uv, _ = project_points(k, cam)
        r = uv - pixels
        sq = np.sum(r * r, axis=1) / scale**2
        cost += float(np.sum(0.5 * scale**2 * np.log1p(sq)))
        weight = np.sqrt(1.0 / (1.0 + sq))

        x, y, z = cam[:, 0], cam[:, 1], cam[:, 2]
        d_proj = np.zeros((len(anchors), 2, 3))
        d_proj[:, 0, 0] = k.fx / z
        d_proj[:, 0, 2] = -k.fx * x / z**2
        d_proj[:, 1, 1] = k.fy / z
        d_proj[:, 1, 2] = -k.fy * y / z**2
        jac = np.concatenate([d_proj @ -_skew(rotated), d_proj], axis=2)
        residuals.append((r * weight[:, None]).reshape(-1))
        jacobians.append((jac * weight[:, None, None]).reshape(-1, 6))
    if not residuals:
        return cost, np.zeros(0), np.zeros((0, 6))
    return cost, np.concatenate(residuals), np.vstack(jacobians)


def refine(
    best: RayHypothesis,
    model: ObjectModel,
    observed: Observations,
    rig: StereoRig,
    iterations: int = 10,
    max_points: int = 512,
    cutoff: float = 20.0,
    occlusion: bool = True,
    correspondences: Optional[Correspondences] = None,
    anchor_scale: float = ANCHOR_SCALE,
) -> RefineResult:
    """Gauss-Newton residual update ``C = C1 + dC``, ``R = exp(omega) R1``.

    Tracked anchors, when given, are fitted directly in both eyes under a Cauchy loss;
    otherwise each observed point is matched to its nearest rendered model point.
    Steps that do not lower the cost are halved a few times, then rejected, so the
    result never costs more than the Top-1 hypothesis.
    """
    if correspondences is not None and correspondences.usable:

        def linearize(rot: np.ndarray, c: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
            return _linearize_anchored(rot, c, correspondences, rig, anchor_scale)

    else:
        observed = tuple(np.asarray(obs, dtype=float).reshape(-1, 2) for obs in observed)
        points = model.subset(max_points)

        def linearize(rot: np.ndarray, c: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
            return _linearize(rot, c, points, observed, rig, model, cutoff, occlusion)

    rotation = np.asarray(best.rotation, dtype=float)
    center = np.asarray(best.center, dtype=float)

    cost, r, jac = linearize(rotation, center)
    initial_cost = cost
    if len(r) < MIN_ROWS:
        return RefineResult(best.pose, True, initial_cost, initial_cost, 0)
    eig = np.linalg.eigvalsh(jac.T @ jac)
    if eig[-1] <= 0 or eig[0] / eig[-1] < DEGENERATE_RATIO:
        logger.debug("Degenerate refinement: eigenvalue ratio %.3e", eig[0] / max(eig[-1], 1e-300))
        return RefineResult(best.pose, True, initial_cost, initial_cost, 0)

    done = 0
    for done in range(1, iterations + 1):
        try:
            delta = np.linalg.solve(jac.T @ jac, -jac.T @ r)
        except np.linalg.LinAlgError:
            break
        accepted = False
        for _ in range(STEP_HALVINGS + 1):
            trial_rot = exp_so3(delta[:3]) @ rotation
            trial_center = center + delta[3:]
            trial = linearize(trial_rot, trial_center)
            if trial[0] < cost and len(trial[1]) >= MIN_ROWS:
                rotation, center = trial_rot, trial_center
                cost, r, jac = trial
                accepted = True
                break
            delta = 0.5 * delta
        if not accepted or np.linalg.norm(delta) < 1e-12:
            break

    return RefineResult(
        pose=Pose(rotation=rotation, center=center),
        degenerate=False,
        cost_before=initial_cost,
        cost_after=cost,
        iterations=done,
    )


def _layer_norm(x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    return (x - x.mean(axis=-1, keepdims=True)) / np.sqrt(x.var(axis=-1, keepdims=True) + eps)


def _positional_encoding(positions: np.ndarray, dim: int) -> np.ndarray:
    positions = np.asarray(positions, dtype=float).reshape(-1, 1)
    freqs = np.exp(-np.log(10000.0) * (np.arange(0, dim, 2) / dim))
    pe = np.zeros((len(positions), dim))
    pe[:, 0::2] = np.sin(positions * freqs)
    pe[:, 1::2] = np.cos(positions * freqs[: dim // 2])
    return pe


def attention_shapecheck(
    queries: np.ndarray,
    observation: np.ndarray,
    heads: int = 4,
    query_positions: Optional[np.ndarray] = None,
    observation_positions: Optional[np.ndarray] = None,
    seed: int = 0,
) -> AttentionResult:
    """Fixed-weight multi-head cross attention of queries over observation features.

    Not used for tracking; exercises the decoder shapes and normalization.
    """
    queries = np.asarray(queries, dtype=float)
    observation = np.asarray(observation, dtype=float)
    if queries.ndim != 2 or observation.ndim != 2 or queries.shape[1] != observation.shape[1]:
        raise GeometryMismatch(
            f"Feature blocks must share their width: {queries.shape} vs {observation.shape}"
        )
    n, dim = queries.shape
    m = observation.shape[0]
    if heads < 1 or dim % heads != 0:
        raise GeometryMismatch(f"Feature width {dim} is not divisible by {heads} heads")

    rng = np.random.default_rng(seed)
    scale = 1.0 / np.sqrt(dim)
    w_ffn1, w_ffn2, w_q, w_k, w_v, w_o, w_s = (
        rng.standard_normal((dim, dim)) * scale for _ in range(7)
    )

    def ffn(x: np.ndarray) -> np.ndarray:
        return _layer_norm(np.maximum(x @ w_ffn1, 0.0) @ w_ffn2 + x)

    q_pos = np.zeros(n) if query_positions is None else query_positions
    kv_pos = np.zeros(m) if observation_positions is None else observation_positions
    features = ffn(observation)
    q = (queries + _positional_encoding(q_pos, dim)) @ w_q
    k = (features + _positional_encoding(kv_pos, dim)) @ w_k
    v = features @ w_v

    head_dim = dim // heads
    qh = q.reshape(n, heads, head_dim).transpose(1, 0, 2)
    kh = k.reshape(m, heads, head_dim).transpose(1, 0, 2)
    vh = v.reshape(m, heads, head_dim).transpose(1, 0, 2)
    attention = softmax(qh @ kh.transpose(0, 2, 1) / np.sqrt(head_dim), axis=-1)
    output = (attention @ vh).transpose(1, 0, 2).reshape(n, dim) @ w_o
    salience = softmax(ffn(output) @ w_s[:, 0])
    return AttentionResult(output=output, attention=attention, salience=salience)


@dataclass(frozen=True, eq=False)
class FilterOutcome:
    hypotheses: HypothesisSet
    selected: RayHypothesis
    refined: RefineResult


def filter_pose(
    rig: StereoRig,
    center: np.ndarray,
    pivot: np.ndarray,
    model: ObjectModel,
    observed: Observations,
    sampler: SamplerConfig,
    scorer: ScorerConfig,
    refine_iterations: int = 10,
    refine_points: int = 512,
    executor: Optional[ThreadPoolExecutor] = None,
    correspondences: Optional[Correspondences] = None,
) -> FilterOutcome:
    """Ray, sample, score, select, refine: one full filter pass for a frame."""
    u, v, d = ray_through(rig.left, center)
    depths = sample_depths(d, sampler, beta=model.diameter)
    hset = make_hypotheses(rig.left, u, v, depths, pivot)
    hset = score_hypotheses(hset, model, observed, rig, scorer, executor, correspondences)
    best = select_top1(hset)
    refined = refine(
        best,
        model,
        observed,
        rig,
        iterations=refine_iterations,
        max_points=refine_points,
        cutoff=scorer.cutoff,
        correspondences=correspondences,
    )
    return FilterOutcome(hypotheses=hset, selected=best, refined=refined)
