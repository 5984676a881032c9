"""Pose accuracy metrics and per-speed-bin reports."""

import csv
import logging
import math
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from app.core.errors import (
    DegenerateDepth,
    EmptyModel,
    EmptySequence,
    EvaluationMismatch,
    GeometryMismatch,
    InvariantViolation,
)
from app.schemas.report import AblationRow, BinMetrics, MetricsReport, SpeedBin, Stat
from app.services.geometry import CameraIntrinsics, ObjectModel, Pose, geodesic_angle, project

logger = logging.getLogger(__name__)

RECALL_FRACTION = 0.1
SWITCH_ENTER = math.pi / 2.0
SWITCH_EXIT = math.pi / 4.0
SWITCH_TOL = 1e-9
PROJ_TOL = 5.0
PROJ_EPS = 1e-9
CONSISTENCY_TOL = 1e-9


def _points(model: ObjectModel) -> np.ndarray:
    if len(model.points) == 0:
        raise EmptyModel("Object model has no points")
    return model.points


def add(pred: Pose, gt: Pose, model: ObjectModel) -> float:
    pts = _points(model)
    return float(np.linalg.norm(pred.transform(pts) - gt.transform(pts), axis=1).mean())


def add_s(pred: Pose, gt: Pose, model: ObjectModel) -> float:
    """ADD against the closest symmetric equivalent of ``pred``."""
    pts = _points(model)
    group = np.stack(model.symmetry_group)
    rotations = pred.rotation @ group
    moved = np.einsum("gij,nj->gni", rotations, pts) + pred.center
    target = gt.transform(pts)
    return float(np.linalg.norm(moved - target, axis=2).mean(axis=1).min())


def recall_at(distances: Sequence[float], diameter: float, fraction: float = RECALL_FRACTION) -> float:
    if diameter <= 0:
        raise ValueError("Diameter must be positive")
    distances = np.asarray(distances, dtype=float)
    if distances.size == 0:
        raise EmptySequence("No distances to evaluate")
    return float(np.mean(distances < fraction * diameter))


def rotation_error(pred: np.ndarray, gt: np.ndarray, symmetry: Sequence[np.ndarray] = (np.eye(3),)) -> float:
    """Symmetry-reduced geodesic error in radians."""
    return min(geodesic_angle(pred @ g, gt) for g in symmetry)


def switch_events(
    errors: Sequence[float],
    enter: float = SWITCH_ENTER,
    exit: float = SWITCH_EXIT,
) -> np.ndarray:
    """Flags the frames where the error crosses up through ``enter`` while armed.

    The counter starts armed and re-arms once the error drops below ``exit``.
    """
    events = np.zeros(len(errors), dtype=bool)
    armed = True
    for i, e in enumerate(errors):
        if armed and e >= enter - SWITCH_TOL:
            events[i] = True
            armed = False
        elif not armed and e < exit:
            armed = True
    return events


def switch_count(
    preds: Sequence[np.ndarray],
    gts: Sequence[np.ndarray],
    symmetry: Sequence[np.ndarray] = (np.eye(3),),
    enter: float = SWITCH_ENTER,
    exit: float = SWITCH_EXIT,
) -> int:
    if len(preds) != len(gts):
        raise GeometryMismatch(f"{len(preds)} predictions for {len(gts)} ground-truth rotations")
    errors = [rotation_error(p, g, symmetry) for p, g in zip(preds, gts)]
    return int(switch_events(errors, enter, exit).sum())


def _projection_hits(preds: Sequence[Pose], gts: Sequence[Pose], k: CameraIntrinsics, tol: float) -> np.ndarray:
    hits = np.zeros(len(preds), dtype=bool)
    for i, (pred, gt) in enumerate(zip(preds, gts)):
        try:
            pu, pv, _ = project(k, pred.center)
        except DegenerateDepth:
            continue
        gu, gv, _ = project(k, gt.center)
        hits[i] = math.hypot(pu - gu, pv - gv) <= tol + PROJ_EPS
    return hits


def proj_at(preds: Sequence[Pose], gts: Sequence[Pose], k: CameraIntrinsics, tol: float = PROJ_TOL) -> float:
    if len(preds) != len(gts):
        raise GeometryMismatch(f"{len(preds)} predictions for {len(gts)} ground-truth poses")
    if not preds:
        raise EmptySequence("No poses to evaluate")
    return float(_projection_hits(preds, gts, k, tol).mean())


def _stat(values: np.ndarray) -> Stat:
    return Stat(mean=float(values.mean()), stdev=float(values.std()))


def _bin_metrics(
    mask: np.ndarray,
    adds: np.ndarray,
    add_s_values: np.ndarray,
    e_p: np.ndarray,
    e_r: np.ndarray,
    switches: np.ndarray,
    hits: np.ndarray,
    lost: np.ndarray,
    diameter: float,
    timing: Optional[np.ndarray],
) -> BinMetrics:
    fps = None
    if timing is not None and timing[mask].sum() > 0:
        fps = float(mask.sum() / timing[mask].sum())
    return BinMetrics(
        frames=int(mask.sum()),
        lost_frames=int(lost[mask].sum()),
        add_recall_01d=recall_at(adds[mask], diameter),
        adds_recall_01d=recall_at(add_s_values[mask], diameter),
        add_mean=float(adds[mask].mean()),
        adds_mean=float(add_s_values[mask].mean()),
        e_p=_stat(e_p[mask]),
        e_r=_stat(e_r[mask]),
        switch_count=int(switches[mask].sum()),
        proj5_rate=float(hits[mask].mean()),
        fps=fps,
    )


def aggregate(
    preds: Sequence[Pose],
    gts: Sequence[Pose],
    bins: Sequence[SpeedBin],
    model: ObjectModel,
    k: CameraIntrinsics,
    lost: Optional[Sequence[bool]] = None,
    timing: Optional[Sequence[float]] = None,
) -> MetricsReport:
    """Per-bin and overall metrics; ``timing`` holds per-frame seconds and enables FPS."""
    n = len(gts)
    if len(preds) != n or len(bins) != n:
        raise EvaluationMismatch(f"{len(preds)} predictions, {n} ground-truth poses, {len(bins)} bins")
    if n == 0:
        raise EmptySequence("No frames to evaluate")
    lost_flags = np.zeros(n, dtype=bool) if lost is None else np.asarray(lost, dtype=bool)
    seconds = None if timing is None else np.asarray(timing, dtype=float)
    if len(lost_flags) != n or (seconds is not None and len(seconds) != n):
        raise EvaluationMismatch("Per-frame flags or timings do not match the frame count")

    adds = np.array([add(p, g, model) for p, g in zip(preds, gts)])
    add_s_values = np.array([add_s(p, g, model) for p, g in zip(preds, gts)])
    e_p = np.array([100.0 * np.linalg.norm(p.center - g.center) for p, g in zip(preds, gts)])
    e_r_rad = np.array([rotation_error(p.rotation, g.rotation, model.symmetry_group) for p, g in zip(preds, gts)])
    switches = switch_events(e_r_rad)
    hits = _projection_hits(preds, gts, k, PROJ_TOL)
    e_r = np.degrees(e_r_rad)
    labels = np.array([SpeedBin(b).value for b in bins])

    args = (adds, add_s_values, e_p, e_r, switches, hits, lost_flags, model.diameter, seconds)
    overall = _bin_metrics(np.ones(n, dtype=bool), *args)
    per_bin = {
        b: _bin_metrics(labels == b.value, *args)
        for b in SpeedBin
        if np.any(labels == b.value)
    }
    wall_time = None if seconds is None else float(seconds.sum())
    return MetricsReport(
        frames=n,
        overall=overall,
        bins=per_bin,
        fps=overall.fps,
        wall_time=wall_time,
    )


def check_invariants(report: MetricsReport) -> None:
    """Raise InvariantViolation when the report is internally inconsistent."""
    total = sum(b.frames for b in report.bins.values())
    if total != report.frames or report.overall.frames != report.frames:
        raise InvariantViolation(f"Bin frame counts sum to {total}, expected {report.frames}")
    for name in ("add_recall_01d", "adds_recall_01d", "proj5_rate", "add_mean"):
        weighted = sum(getattr(b, name) * b.frames for b in report.bins.values()) / report.frames
        if abs(weighted - getattr(report.overall, name)) > CONSISTENCY_TOL * max(1.0, abs(weighted)):
            raise InvariantViolation(f"Overall {name} is not the frame-weighted bin mean")
    if sum(b.switch_count for b in report.bins.values()) != report.overall.switch_count:
        raise InvariantViolation("Per-bin switch counts do not add up")
    for label, b in [("overall", report.overall), *((k.value, v) for k, v in report.bins.items())]:
        if b.lost_frames > b.frames:
            raise InvariantViolation(f"{label}: more lost frames than frames")


def report_rows(report: MetricsReport) -> list[tuple[str, str, float, Optional[float]]]:
    rows: list[tuple[str, str, float, Optional[float]]] = []
    sections = [("overall", report.overall), *((k.value, v) for k, v in report.bins.items())]
    for label, b in sections:
        rows += [
            (label, "frames", float(b.frames), None),
            (label, "lost_frames", float(b.lost_frames), None),
            (label, "add_recall_01d", b.add_recall_01d, None),
            (label, "adds_recall_01d", b.adds_recall_01d, None),
            (label, "add_mean", b.add_mean, None),
            (label, "adds_mean", b.adds_mean, None),
            (label, "e_p", b.e_p.mean, b.e_p.stdev),
            (label, "e_r", b.e_r.mean, b.e_r.stdev),
            (label, "switch_count", float(b.switch_count), None),
            (label, "proj5_rate", b.proj5_rate, None),
        ]
        if b.fps is not None:
            rows.append((label, "fps", b.fps, None))
    return rows


def write_report(report: MetricsReport, json_path: Path, csv_path: Optional[Path] = None) -> None:
    Path(json_path).write_text(report.model_dump_json(indent=2), encoding="utf-8")
    if csv_path is None:
        return
    with open(csv_path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["bin", "metric", "mean", "stdev"])
        for label, metric, mean, stdev in report_rows(report):
            writer.writerow([label, metric, f"{mean:.9g}", "" if stdev is None else f"{stdev:.9g}"])


def write_ablation(rows: Sequence[AblationRow], path: Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow([
            "axis", "setting", "frames", "lost_frames", "add_recall_01d", "adds_recall_01d",
            "add_mean", "adds_mean", "e_p_mean", "e_r_mean", "switch_count", "proj5_rate", "fps",
        ])
        for row in rows:
            o = row.report.overall
            writer.writerow([
                row.axis, row.setting, o.frames, o.lost_frames,
                f"{o.add_recall_01d:.6f}", f"{o.adds_recall_01d:.6f}",
                f"{o.add_mean:.6f}", f"{o.adds_mean:.6f}",
                f"{o.e_p.mean:.6f}", f"{o.e_r.mean:.6f}",
                o.switch_count, f"{o.proj5_rate:.6f}",
                "" if row.report.fps is None else f"{row.report.fps:.2f}",
            ])
