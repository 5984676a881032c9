import csv

import numpy as np
import pytest

from app.core.config import get_settings
from app.core.errors import ConfigError, DatasetError, EvaluationMismatch
from app.schemas.config import Distribution, InitMode, Modality, RunConfig
from app.schemas.report import SpeedBin
from app.services.dataset import DatasetReader, read_poses, write_poses
from app.services.geometry import geodesic_angle
from app.services.pipeline import (
    CONFIG_FILE,
    REPORT_CSV,
    REPORT_JSON,
    STATUS_INIT,
    TIMING_FILE,
    TRACE_FILE,
    ablate,
    ablation_settings,
    bench,
    evaluate_files,
    flip_report,
    flip_trace,
    read_timing,
    smooth_rotations,
    track,
    track_and_evaluate,
)


class TestTrack:
    def test_writes_trace_timing_and_config(self, run_config):
        result = track(run_config)
        out = run_config.out
        assert len(result.frames) == 6
        assert result.frames[0].status == STATUS_INIT
        assert all(pose.is_valid() for pose in result.poses)
        assert len(read_poses(out / TRACE_FILE)) == 6
        with open(out / TIMING_FILE, newline="") as f:
            rows = list(csv.DictReader(f))
        assert [int(r["idx"]) for r in rows] == list(range(6))
        assert list(rows[0]) == ["idx", "status", "vision_ms", "m3d_ms", "amq_ms", "rpf_ms", "total_ms"]
        assert "amq.n = 4" in (out / CONFIG_FILE).read_text()

    def test_first_frame_uses_ground_truth(self, run_config):
        result = track(run_config)
        gt = DatasetReader(run_config.dataset).poses[0]
        assert np.allclose(result.poses[0].rotation, gt.rotation)
        assert np.allclose(result.poses[0].center, gt.center)

    def test_hypothesis_init_keeps_the_center(self, run_config):
        run_config.init = InitMode.HYPOTHESIS
        result = track(run_config)
        gt = DatasetReader(run_config.dataset).poses[0]
        assert np.allclose(result.poses[0].center, gt.center)

    def test_deterministic_across_worker_counts(self, run_config, tmp_path):
        track(run_config, workers=1)
        serial = (run_config.out / TRACE_FILE).read_bytes()
        parallel_cfg = run_config.model_copy(update={"out": tmp_path / "parallel"})
        track(parallel_cfg, workers=3)
        assert (tmp_path / "parallel" / TRACE_FILE).read_bytes() == serial

    def test_event_modality(self, run_config):
        run_config.modality = Modality.EVENT
        result = track(run_config)
        assert len(result.frames) == 6

    def test_mixed_modality(self, run_config):
        run_config.modality = Modality.MIXED
        assert len(track(run_config).frames) == 6

    def test_disabled_stages_hold_the_initial_pose(self, run_config):
        run_config.m3d.enabled = False
        run_config.rpf.enabled = False
        run_config.amq.n = 0
        result = track(run_config)
        first = result.poses[0]
        for pose in result.poses[1:]:
            assert np.allclose(pose.center, first.center)
            assert geodesic_angle(pose.rotation, first.rotation) < 1e-9
        assert not any(result.lost)

    def test_debug_dumps(self, run_config):
        run_config.dump_debug = True
        track(run_config)
        debug = run_config.out / "debug"
        assert (debug / "amq.txt").exists()

    def test_missing_dataset(self, run_config, tmp_path):
        run_config.dataset = tmp_path / "missing"
        with pytest.raises(DatasetError):
            track(run_config)

    def test_timing_round_trip(self, run_config):
        result = track(run_config)
        lost, seconds = read_timing(run_config.out / TIMING_FILE)
        assert lost == result.lost
        assert len(seconds) == 6
        assert all(s >= 0.0 for s in seconds)


class TestEvaluate:
    def test_ground_truth_trace_is_perfect(self, dataset_dir, tmp_path):
        trace = tmp_path / "gt.txt"
        write_poses(trace, DatasetReader(dataset_dir).poses)
        report = evaluate_files(dataset_dir, trace, tmp_path / "eval")
        assert report.frames == 6
        assert report.overall.add_recall_01d == 1.0
        for metrics in report.bins.values():
            assert metrics.adds_recall_01d == 1.0
        assert (tmp_path / "eval" / REPORT_JSON).exists()
        assert (tmp_path / "eval" / REPORT_CSV).exists()
        assert report.fps is None

    def test_shifted_trace_has_translation_error(self, dataset_dir, tmp_path):
        poses = DatasetReader(dataset_dir).poses
        trace = tmp_path / "shifted.txt"
        write_poses(trace, [poses[0], *poses[:-1]])
        report = evaluate_files(dataset_dir, trace, tmp_path / "eval")
        assert report.overall.e_p.mean > 0.0

    def test_length_mismatch(self, dataset_dir, tmp_path):
        trace = tmp_path / "short.txt"
        write_poses(trace, DatasetReader(dataset_dir).poses[:3])
        with pytest.raises(EvaluationMismatch) as exc:
            evaluate_files(dataset_dir, trace, tmp_path / "eval")
        assert exc.value.exit_code == 3

    def test_track_and_evaluate(self, run_config):
        result, report = track_and_evaluate(run_config)
        assert report.frames == len(result.frames)
        assert report.fps is not None
        assert (run_config.out / REPORT_JSON).exists()


class TestFlipAblation:
    def test_flip_trace(self):
        raw, truth, flipped = flip_trace()
        assert len(raw) == len(truth) == 36
        assert flipped == [4, 10, 16, 22, 28]
        assert geodesic_angle(raw[4], truth[4]) == pytest.approx(np.pi)
        assert geodesic_angle(raw[5], truth[5]) == 0.0

    def test_zero_capacity_passes_flips_through(self):
        raw, _, _ = flip_trace()
        assert all(np.allclose(a, b) for a, b in zip(smooth_rotations(raw, 0, 0.5), raw))

    @pytest.mark.parametrize("capacity,switches", [(0, True), (1, True), (2, False), (3, False), (4, False)])
    def test_switch_vanishes_with_history(self, capacity, switches):
        report = flip_report(capacity)
        assert (report.overall.switch_count > 0) == switches

    def test_history_lowers_rotation_error(self):
        assert flip_report(4).overall.e_r.mean < flip_report(0).overall.e_r.mean


class TestAblate:
    def test_settings(self):
        assert ablation_settings("amq_n") == ["0", "1", "2", "3", "4"]
        assert ablation_settings("distribution") == [d.value for d in Distribution]
        with pytest.raises(ConfigError):
            ablation_settings("lighting")

    def test_flip_axis_writes_one_row_per_capacity(self, run_config):
        rows = ablate(run_config, "amq_flip")
        assert [r.setting for r in rows] == ["0", "1", "2", "3", "4"]
        lines = (run_config.out / "ablation_amq_flip.csv").read_text().splitlines()
        assert len(lines) == 6

    def test_distribution_axis(self, run_config):
        rows = ablate(run_config, "distribution")
        assert len(rows) == 4
        assert all(r.report.frames == 6 for r in rows)
        assert (run_config.out / "distribution_uniform" / TRACE_FILE).exists()


def test_bench(run_config):
    result, passed = bench(run_config, target_fps=0.0)
    assert passed
    assert result.fps > 0.0


def full_config(dataset, out, **updates) -> RunConfig:
    cfg = RunConfig(dataset=dataset, out=out)
    for key, value in updates.items():
        set_field(cfg, key, value)
    return cfg


def set_field(cfg: RunConfig, dotted: str, value) -> None:
    *parents, name = dotted.split(".")
    node = cfg
    for part in parents:
        node = getattr(node, part)
    setattr(node, name, value)


class TestEndToEnd:
    def test_noise_free_pendulum_stays_locked(self, pendulum_vga, tmp_path):
        result, report = track_and_evaluate(full_config(pendulum_vga, tmp_path / "run"))
        assert report.frames == 300
        assert not any(result.lost)
        assert report.overall.add_recall_01d >= 0.95

    def test_degraded_scene(self, degraded_vga, tmp_path):
        result, report = track_and_evaluate(full_config(degraded_vga, tmp_path / "run"))
        assert 1.0 - np.mean(result.lost) >= 0.8
        assert report.overall.adds_recall_01d >= 0.7

    def test_spin_recall_drops_with_speed(self, spin_vga, tmp_path):
        _, report = track_and_evaluate(full_config(spin_vga, tmp_path / "run"))
        recalls = [
            report.bins[b].adds_recall_01d
            for b in (SpeedBin.REGULAR, SpeedBin.MEDIUM, SpeedBin.FASTER)
            if b in report.bins and report.bins[b].frames > 0
        ]
        assert len(recalls) >= 2
        assert all(a >= b for a, b in zip(recalls, recalls[1:]))

    def test_uniform_sampling_is_not_worse_than_gaussian(self, pendulum_vga_short, tmp_path):
        recall, error = {}, {}
        for distribution in (Distribution.UNIFORM, Distribution.GAUSSIAN):
            reports = []
            for seed in range(10):
                cfg = full_config(
                    pendulum_vga_short,
                    tmp_path / f"{distribution.value}_{seed}",
                    **{
                        "rpf.depth_noise": 0.8,
                        "rpf.sampler.distribution": distribution,
                        "rpf.sampler.seed": seed,
                    },
                )
                reports.append(track_and_evaluate(cfg)[1])
            recall[distribution] = np.mean([r.overall.add_recall_01d for r in reports])
            error[distribution] = np.mean([r.overall.add_mean for r in reports])
        assert recall[Distribution.UNIFORM] >= recall[Distribution.GAUSSIAN]
        assert error[Distribution.UNIFORM] <= error[Distribution.GAUSSIAN] + 1e-4

    def test_bench_meets_the_frame_rate_target(self, pendulum_vga, tmp_path):
        settings = get_settings()
        result, passed = bench(full_config(pendulum_vga, tmp_path / "bench"), settings.fps_target, settings.workers)
        assert passed, f"{result.fps:.1f} FPS"


def test_rotation_error_never_grows_with_history():
    means = [flip_report(n).overall.e_r.mean for n in range(5)]
    assert all(a >= b for a, b in zip(means, means[1:]))
