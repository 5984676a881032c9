"""Per-frame tracking loop, run outputs, evaluation and ablations."""

import csv
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from app.core.errors import (
    ConfigError,
    DegenerateDepth,
    EvaluationMismatch,
    InsufficientObservations,
    InsufficientPoints,
    NotScored,
    TriangulationError,
)
from app.schemas.config import Distribution, InitMode, RunConfig, dump_flat_config
from app.schemas.report import AblationRow, MetricsReport, SpeedBin
from app.schemas.scene import RigParams
from app.services import amq, m3d, rpf
from app.services.dataset import DatasetReader, read_poses, write_poses
from app.services.geometry import (
    EulerAngles,
    ObjectModel,
    Pose,
    StereoRig,
    euler_to_rotation,
    project,
    project_points,
    rot_z,
)
from app.services.metrics import aggregate, check_invariants, write_ablation, write_report
from app.services.vision import (
    GrayFrame,
    TrackedPointSet,
    accumulate_events,
    build_pyramid,
    lk_track,
    seed_points,
)

logger = logging.getLogger(__name__)

EYES = ("left", "right")
STAGES = ("vision", "m3d", "amq", "rpf")
TRACE_FILE = "trace.txt"
TIMING_FILE = "timing.csv"
CONFIG_FILE = "run.conf"
REPORT_JSON = "report.json"
REPORT_CSV = "report.csv"
STATUS_OK = "ok"
STATUS_LOST = "lost"
STATUS_INIT = "init"
ABLATION_AXES = ("amq_n", "distribution", "stages", "amq_flip")
# stereo partners: row gap and spread of the right-eye offset around its median (px)
ROW_TOLERANCE = 1.0
STEREO_TOLERANCE = 2.0

# per-frame failures that degrade the frame to lost instead of aborting the run
FRAME_ERRORS = (
    InsufficientPoints,
    InsufficientObservations,
    TriangulationError,
    DegenerateDepth,
    NotScored,
)


@dataclass
class FrameResult:
    index: int
    pose: Pose
    status: str = STATUS_OK
    reason: Optional[str] = None
    timings: dict[str, float] = field(default_factory=lambda: dict.fromkeys(STAGES, 0.0))
    low_confidence: bool = False

    @property
    def lost(self) -> bool:
        return self.status == STATUS_LOST

    @property
    def total_ms(self) -> float:
        return sum(self.timings.values())


@dataclass
class TrackResult:
    frames: list[FrameResult]
    wall_time: float

    @property
    def poses(self) -> list[Pose]:
        return [f.pose for f in self.frames]

    @property
    def lost(self) -> list[bool]:
        return [f.lost for f in self.frames]

    @property
    def fps(self) -> float:
        return len(self.frames) / self.wall_time if self.wall_time > 0 else math.inf


# (x0, y0, x1, y1), end-exclusive
Box = tuple[int, int, int, int]


def _grow(box: Box, pad: int, width: int, height: int) -> Box:
    x0, y0, x1, y1 = box
    return max(x0 - pad, 0), max(y0 - pad, 0), min(x1 + pad, width), min(y1 + pad, height)


def _union(a: Box, b: Box) -> Box:
    return min(a[0], b[0]), min(a[1], b[1]), max(a[2], b[2]), max(a[3], b[3])


def _crop(frame: GrayFrame, box: Box) -> GrayFrame:
    x0, y0, x1, y1 = box
    return GrayFrame(frame.pixels[y0:y1, x0:x1], frame.timestamp)


@dataclass
class Observation:
    """One frame of low-level evidence: per-eye tracks, cluster pixels and model anchors."""

    tracked: dict[str, TrackedPointSet]
    correspondences: Optional[rpf.Correspondences] = None


class PoseTracker:
    """Stateful frame loop: vision, 3D center, pose queue, ray filter."""

    def __init__(
        self,
        config: RunConfig,
        rig: StereoRig,
        model: ObjectModel,
        executor: Optional[ThreadPoolExecutor] = None,
        debug_dir: Optional[Path] = None,
    ):
        self.config = config
        self.rig = rig
        self.model = model
        self.executor = executor
        self.debug_dir = debug_dir
        self.queue = amq.PoseQueue(capacity=config.amq.n, alpha=config.amq.alpha)
        self.last_pose: Optional[Pose] = None
        self._prev_frames: dict[str, GrayFrame] = {}

    @property
    def needs_vision(self) -> bool:
        return self.config.m3d.enabled or self.config.rpf.enabled

    def initialize(self, index: int, gt_pose: Pose, frames: dict[str, GrayFrame]) -> FrameResult:
        if self.config.init is InitMode.GT:
            pose = gt_pose
        else:
            pose = Pose(rotation=amq.initial_hypothesis(gt_pose.center), center=gt_pose.center)
        self.queue.clear()
        self.queue.enqueue(pose, index)
        self.last_pose = pose
        self._prev_frames = dict(frames)
        return FrameResult(index=index, pose=pose, status=STATUS_INIT)

    def _roi(self, eye: str) -> Optional[Box]:
        if self.last_pose is None:
            return None
        k = self.rig.eye(eye)
        try:
            u, v, z = project(k, self.rig.to_eye(self.last_pose.center, eye))
        except DegenerateDepth:
            return None
        half = 0.5 * k.fx * self.model.diameter / z + self.config.m3d.lk.roi_margin
        x0, y0 = max(int(u - half), 0), max(int(v - half), 0)
        x1, y1 = min(int(u + half) + 1, k.width), min(int(v + half) + 1, k.height)
        if x1 <= x0 or y1 <= y0:
            return None
        return x0, y0, x1, y1

    def _crop_box(self, frame: GrayFrame, *rois: Optional[Box]) -> Box:
        """Union of the ROIs plus the LK capture range; the whole frame when unusable."""
        full = (0, 0, frame.width, frame.height)
        if not rois or any(roi is None for roi in rois):
            return full
        lk = self.config.m3d.lk
        box = rois[0]
        for roi in rois[1:]:
            box = _union(box, roi)
        box = _grow(box, (lk.window // 2 + 2) * 2 ** (lk.levels - 1), frame.width, frame.height)
        if min(box[2] - box[0], box[3] - box[1]) < 2**lk.levels:
            return full
        return box

    def _track(
        self,
        prev: GrayFrame,
        nxt: GrayFrame,
        box: Box,
        points: np.ndarray,
        initial: Optional[np.ndarray] = None,
    ) -> TrackedPointSet:
        """LK on the ``box`` crop of both frames, reported in full-frame pixels."""
        lk = self.config.m3d.lk
        origin = np.array(box[:2], dtype=float)
        tracked = lk_track(
            build_pyramid(_crop(prev, box), lk.levels),
            build_pyramid(_crop(nxt, box), lk.levels),
            np.asarray(points, dtype=float).reshape(-1, 2) - origin,
            window=lk.window,
            iterations=lk.iterations,
            min_eigen=lk.min_eigen,
            initial=initial,
        )
        return TrackedPointSet(
            points=tracked.points + origin,
            displacements=tracked.displacements,
            tracked=tracked.tracked,
            width=prev.width,
            height=prev.height,
        )

    def _seeds(self, eye: str, roi: Optional[Box]) -> np.ndarray:
        lk = self.config.m3d.lk
        return seed_points(self._prev_frames[eye], lk.grid_step, lk.min_gradient, roi, limit=lk.max_seeds)

    def _stereo_partners(
        self, seeds: np.ndarray, rois: dict[str, Optional[Box]]
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Match left seeds into the previous right frame and lift them onto the model hull.

        Returns (partners, anchors, keep): ``keep`` flags stereo-consistent pairs, NaN
        anchors mark seeds whose ray misses the hull at the last pose.
        """
        prev_left, prev_right = self._prev_frames["left"], self._prev_frames["right"]
        anchors, hit = rpf.lift_to_model(self.rig, "left", seeds, self.last_pose, self.model)

        k = self.rig.right
        expected = np.full_like(seeds, np.nan)
        if hit.any():
            cam = self.rig.to_eye(anchors[hit] @ self.last_pose.rotation.T + self.last_pose.center, "right")
            expected[hit], _ = project_points(k, cam)
        disparity = k.fx * self.rig.baseline / max(self.last_pose.center[2], rpf.MIN_DEPTH)
        guess = np.where(np.isfinite(expected), expected - seeds, np.array([-disparity, 0.0]))

        box = self._crop_box(prev_left, rois["left"], rois["right"])
        stereo = self._track(prev_left, prev_right, box, seeds, initial=guess)
        partners = stereo.next_points

        keep = stereo.tracked & (np.abs(partners[:, 1] - seeds[:, 1]) < ROW_TOLERANCE)
        offset = np.linalg.norm(partners - expected, axis=1)
        anchored = keep & hit & np.isfinite(offset)
        if anchored.any():
            spread = np.abs(offset - np.median(offset[anchored]))
            keep &= ~hit | (spread < STEREO_TOLERANCE)
        return partners, anchors, keep

    def _observe(self, frames: dict[str, GrayFrame]) -> Observation:
        """Temporal tracks for both eyes plus model anchors for the ray filter."""
        rois = {eye: self._roi(eye) for eye in EYES}
        boxes = {eye: self._crop_box(frames[eye], rois[eye]) for eye in EYES}
        left_seeds = self._seeds("left", rois["left"])
        kinds = self.config.modality.eyes()

        if kinds[0] == kinds[1]:
            partners, anchors, keep = self._stereo_partners(left_seeds, rois)
            left_seeds, right_seeds, anchors = left_seeds[keep], partners[keep], anchors[keep]
        else:
            # the eyes see different signals, so no left/right patch matching
            right_seeds = self._seeds("right", rois["right"])
            anchors, _ = rpf.lift_to_model(self.rig, "left", left_seeds, self.last_pose, self.model)

        seeds = {"left": left_seeds, "right": right_seeds}
        jobs = [(self._prev_frames[eye], frames[eye], boxes[eye], seeds[eye]) for eye in EYES]
        if self.executor is not None:
            tracked = list(self.executor.map(lambda job: self._track(*job), jobs))
        else:
            tracked = [self._track(*job) for job in jobs]
        tracked = dict(zip(EYES, tracked))

        correspondences = None
        if len(anchors) > 0:
            hit = np.all(np.isfinite(anchors), axis=1)
            left_next = np.where(tracked["left"].tracked[:, None], tracked["left"].next_points, np.nan)
            if kinds[0] == kinds[1]:
                right_next = np.where(tracked["right"].tracked[:, None], tracked["right"].next_points, np.nan)
            else:
                right_next = np.full_like(left_next, np.nan)
            correspondences = rpf.Correspondences(anchors[hit], left_next[hit], right_next[hit])
        return Observation(tracked=tracked, correspondences=correspondences)

    def step(self, index: int, frames: dict[str, GrayFrame]) -> FrameResult:
        if self.last_pose is None:
            raise ConfigError("Tracker must be initialized before stepping")
        result = FrameResult(index=index, pose=self.last_pose)
        cfg = self.config
        try:
            center = self.last_pose.center
            observed = None
            correspondences = None
            if self.needs_vision:
                start = time.perf_counter()
                observation = self._observe(frames)
                tracked = observation.tracked
                correspondences = observation.correspondences
                result.timings["vision"] = _ms(start)

                start = time.perf_counter()
                left, right = m3d.locate_pair(
                    tracked["left"],
                    tracked["right"],
                    cfg.m3d.consistency,
                    cfg.m3d.eps_static,
                    self.executor,
                    min_size=cfg.m3d.min_cluster,
                )
                result.low_confidence = left.low_confidence or right.low_confidence
                observed = (
                    tracked["left"].active().next_points[left.members],
                    tracked["right"].active().next_points[right.members],
                )
                if cfg.m3d.enabled:
                    center, confident = m3d.carry_center(
                        self.rig,
                        left,
                        right,
                        center,
                        cfg.m3d.min_disparity,
                        max_jump=self.model.diameter,
                    )
                    result.low_confidence = result.low_confidence or not confident
                if self.debug_dir is not None:
                    for eye, res in (("left", left), ("right", right)):
                        m3d.dump_labels(self.debug_dir / f"clusters_{index:06d}_{eye}.csv", tracked[eye], res)
                result.timings["m3d"] = _ms(start)

            start = time.perf_counter()
            pivot = amq.pivot_rotation(self.queue, center, index, seed=self.last_pose.rotation)
            result.timings["amq"] = _ms(start)

            pose = Pose(rotation=pivot, center=center)
            if cfg.rpf.enabled and observed is not None:
                start = time.perf_counter()
                sampler = cfg.rpf.sampler
                ray_center = rpf.perturb_depth(
                    center,
                    cfg.rpf.depth_noise,
                    sampler.beta or self.model.diameter,
                    sampler.seed,
                    index,
                )
                outcome = rpf.filter_pose(
                    self.rig,
                    ray_center,
                    pivot,
                    self.model,
                    observed,
                    sampler,
                    cfg.rpf.scorer,
                    refine_iterations=cfg.rpf.refine_iterations,
                    refine_points=cfg.rpf.refine_points,
                    executor=self.executor,
                    correspondences=correspondences,
                )
                pose = outcome.selected.pose if outcome.refined.degenerate else outcome.refined.pose
                if self.debug_dir is not None:
                    outcome.hypotheses.dump(self.debug_dir / f"hypotheses_{index:06d}.csv")
                result.timings["rpf"] = _ms(start)
        except FRAME_ERRORS as e:
            logger.warning("Frame lost: idx=%d, reason=%s", index, e)
            result.status = STATUS_LOST
            result.reason = f"{type(e).__name__}: {e}"
        else:
            result.pose = pose
            self.queue.enqueue(pose, index)
            self.last_pose = pose
            if self.debug_dir is not None:
                self.queue.dump(self.debug_dir / "amq.txt")

        self._prev_frames = dict(frames)
        logger.debug(
            "Frame %d: %s",
            index,
            ", ".join(f"{stage}={ms:.2f}ms" for stage, ms in result.timings.items()),
        )
        return result


def _ms(start: float) -> float:
    return (time.perf_counter() - start) * 1000.0


def observation_frames(dataset: DatasetReader, index: int, config: RunConfig) -> dict[str, GrayFrame]:
    """Per-eye input image for frame ``index``: an RGB-derived frame or an event frame."""
    window = config.event_window or 1.0 / dataset.scene.frame_rate
    at = float(dataset.manifest[index].t)
    frames = {}
    for eye, kind in zip(EYES, config.modality.eyes()):
        if kind == "rgb":
            frames[eye] = dataset.frame(index, eye)
        else:
            batch = dataset.events(index, eye, since=at - window)
            frames[eye] = accumulate_events(batch, window, at)
    return frames


def track(
    config: RunConfig,
    dataset: Optional[DatasetReader] = None,
    workers: int = 1,
) -> TrackResult:
    """Run the tracker over a dataset and write the trace and timing log to ``config.out``."""
    dataset = dataset or DatasetReader(config.dataset)
    out = Path(config.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ConfigError(f"Cannot create output directory {out}: {e}") from e
    debug_dir = None
    if config.dump_debug:
        debug_dir = out / "debug"
        debug_dir.mkdir(exist_ok=True)
        (debug_dir / "amq.txt").write_text("", encoding="utf-8")
    (out / CONFIG_FILE).write_text(dump_flat_config(config), encoding="utf-8")

    logger.info(
        "Tracking started: dataset=%s, frames=%d, modality=%s",
        dataset.root, len(dataset), config.modality.value,
    )
    executor = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        tracker = PoseTracker(config, dataset.rig, dataset.model, executor, debug_dir)
        frames: list[FrameResult] = []
        started = time.perf_counter()
        for i in range(len(dataset)):
            frame_start = time.perf_counter()
            images = observation_frames(dataset, i, config)
            if i == 0:
                result = tracker.initialize(i, dataset.poses[0], images)
            else:
                result = tracker.step(i, images)
            io_ms = _ms(frame_start) - result.total_ms
            result.timings["vision"] += max(io_ms, 0.0)
            frames.append(result)
        wall_time = time.perf_counter() - started
    finally:
        if executor is not None:
            executor.shutdown()

    track_result = TrackResult(frames=frames, wall_time=wall_time)
    write_poses(out / TRACE_FILE, track_result.poses)
    write_timing(out / TIMING_FILE, frames)
    logger.info(
        "Tracking finished: frames=%d, lost=%d, fps=%.1f",
        len(frames), sum(track_result.lost), track_result.fps,
    )
    return track_result


def write_timing(path: Path, frames: list[FrameResult]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["idx", "status", *(f"{s}_ms" for s in STAGES), "total_ms"])
        for fr in frames:
            writer.writerow(
                [fr.index, fr.status, *(f"{fr.timings[s]:.3f}" for s in STAGES), f"{fr.total_ms:.3f}"]
            )


def read_timing(path: Path) -> tuple[list[bool], list[float]]:
    """Lost flags and per-frame seconds from a timing log."""
    with open(path, encoding="utf-8", newline="") as f:
        rows = list(csv.DictReader(f))
    return (
        [row["status"] == STATUS_LOST for row in rows],
        [float(row["total_ms"]) / 1000.0 for row in rows],
    )


def evaluate(
    dataset: DatasetReader,
    trace: list[Pose],
    lost: Optional[list[bool]] = None,
    timing: Optional[list[float]] = None,
) -> MetricsReport:
    if len(trace) != len(dataset):
        raise EvaluationMismatch(f"Trace has {len(trace)} poses, dataset has {len(dataset)} frames")
    report = aggregate(
        trace, dataset.poses, dataset.bins, dataset.model, dataset.rig.left, lost=lost, timing=timing
    )
    check_invariants(report)
    return report


def evaluate_files(
    dataset_root: Path,
    trace_path: Path,
    out: Path,
    timing_path: Optional[Path] = None,
) -> MetricsReport:
    dataset = DatasetReader(dataset_root)
    lost, timing = (None, None)
    if timing_path is not None:
        lost, timing = read_timing(timing_path)
    report = evaluate(dataset, read_poses(trace_path), lost, timing)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    write_report(report, out / REPORT_JSON, out / REPORT_CSV)
    return report


def track_and_evaluate(config: RunConfig, workers: int = 1) -> tuple[TrackResult, MetricsReport]:
    dataset = DatasetReader(config.dataset)
    result = track(config, dataset, workers)
    report = evaluate(dataset, result.poses, result.lost, [f.total_ms / 1000.0 for f in result.frames])
    write_report(report, Path(config.out) / REPORT_JSON, Path(config.out) / REPORT_CSV)
    return result, report


def flip_trace(
    frames: int = 36,
    flips: int = 5,
    warmup: int = 4,
    spacing: int = 6,
    euler: tuple[float, float, float] = (0.1, 0.2, 0.3),
) -> tuple[list[np.ndarray], list[np.ndarray], list[int]]:
    """Constant rotation with isolated single-frame 180 degree flips about the camera z axis.

    Returns (raw rotations, ground truth rotations, flipped frame indices).
    """
    if spacing < 3:
        raise ValueError("Flips must be at least 3 frames apart")
    truth = euler_to_rotation(EulerAngles(*euler))
    flipped = [warmup + spacing * j for j in range(flips)]
    if flipped and flipped[-1] >= frames:
        raise ValueError(f"{flips} flips do not fit into {frames} frames")
    raw = [rot_z(math.pi) @ truth if i in flipped else truth.copy() for i in range(frames)]
    return raw, [truth] * frames, flipped


def smooth_rotations(raw: list[np.ndarray], capacity: int, alpha: float, center=(0.0, 0.0, 1.0)) -> list[np.ndarray]:
    """Run the pose queue alone: each raw rotation seeds the blend, the output is enqueued."""
    queue = amq.PoseQueue(capacity=capacity, alpha=alpha)
    center = np.asarray(center, dtype=float)
    outputs = []
    for i, rotation in enumerate(raw):
        smoothed = rotation if i == 0 else amq.pivot_rotation(queue, center, i, seed=rotation)
        queue.enqueue(Pose(rotation=smoothed, center=center), i)
        outputs.append(smoothed)
    return outputs


def flip_report(capacity: int, alpha: float = 0.5, side: float = 0.08) -> MetricsReport:
    raw, truth, _ = flip_trace()
    outputs = smooth_rotations(raw, capacity, alpha)
    model = ObjectModel.cube(side, 2, symmetric=False)
    rig = RigParams().build()
    center = np.array([0.0, 0.0, 1.0])
    preds = [Pose(rotation=r, center=center) for r in outputs]
    gts = [Pose(rotation=r, center=center) for r in truth]
    return aggregate(preds, gts, [SpeedBin.REGULAR] * len(preds), model, rig.left)


def _variant(base: RunConfig, axis: str, setting: str) -> RunConfig:
    cfg = base.model_copy(deep=True)
    cfg.out = Path(base.out) / f"{axis}_{setting}"
    if axis == "amq_n":
        cfg.amq.n = int(setting)
    elif axis == "distribution":
        cfg.rpf.sampler.distribution = Distribution(setting)
    elif axis == "stages":
        cfg.m3d.enabled = setting != "baseline"
        cfg.rpf.enabled = setting == "rpf"
        if setting in ("baseline", "m3d"):
            cfg.amq.n = 0
    return cfg


def ablation_settings(axis: str) -> list[str]:
    if axis in ("amq_n", "amq_flip"):
        return [str(n) for n in range(5)]
    if axis == "distribution":
        return [d.value for d in Distribution]
    if axis == "stages":
        return ["baseline", "m3d", "amq", "rpf"]
    raise ConfigError(f"Unknown ablation axis {axis!r}; expected one of {', '.join(ABLATION_AXES)}")


def ablate(base: RunConfig, axis: str, workers: int = 1) -> list[AblationRow]:
    settings = ablation_settings(axis)
    rows: list[AblationRow] = []
    for setting in settings:
        logger.info("Ablation %s: setting=%s", axis, setting)
        if axis == "amq_flip":
            report = flip_report(int(setting), base.amq.alpha)
        else:
            _, report = track_and_evaluate(_variant(base, axis, setting), workers)
        rows.append(AblationRow(axis=axis, setting=setting, report=report))
    out = Path(base.out)
    out.mkdir(parents=True, exist_ok=True)
    write_ablation(rows, out / f"ablation_{axis}.csv")
    return rows


def bench(config: RunConfig, target_fps: float, workers: int = 1) -> tuple[TrackResult, bool]:
    """End-to-end throughput check, dataset I/O included."""
    result = track(config, workers=workers)
    passed = result.fps >= target_fps
    log = logger.info if passed else logger.warning
    log("Bench: fps=%.1f, target=%.1f, %s", result.fps, target_fps, "pass" if passed else "fail")
    return result, passed
