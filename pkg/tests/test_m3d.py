import numpy as np
import pytest

from app.core.errors import InsufficientPoints, NonPositiveDisparity
from app.schemas.config import ConsistencyParams
from app.services.geometry import project
from app.services.m3d import (
    ClusterResult,
    cluster,
    consistency_matrix,
    dump_labels,
    locate,
    carry_center,
    locate_pair,
    select_dominant,
    track_center,
)
from app.services.vision import TrackedPointSet


def point_set(points, displacements, tracked=None, width=640, height=480) -> TrackedPointSet:
    points = np.asarray(points, dtype=float)
    if tracked is None:
        tracked = np.ones(len(points), dtype=bool)
    return TrackedPointSet(points, displacements, tracked, width, height)


def two_body(moving: int = 30, static: int = 40, seed: int = 0) -> TrackedPointSet:
    """A compact block moving 5 px right over a scattered static background."""
    rng = np.random.default_rng(seed)
    object_pts = rng.uniform([300, 220], [340, 260], (moving, 2))
    background = rng.uniform([0, 0], [640, 480], (static, 2))
    displacements = np.vstack([np.tile([5.0, 0.0], (moving, 1)), np.zeros((static, 2))])
    return point_set(np.vstack([object_pts, background]), displacements)


class TestConsistencyMatrix:
    def test_identical_points_are_all_consistent(self):
        tracked = point_set(np.tile([10.0, 20.0], (5, 1)), np.tile([1.0, 1.0], (5, 1)))
        assert consistency_matrix(tracked, ConsistencyParams()).all()

    def test_two_points_distance(self):
        # every dimension z-scores to +-1, so the pair sits 2 * sqrt(4) = 4 apart
        tracked = point_set([[10.0, 20.0], [50.0, 80.0]], [[1.0, 0.0], [3.0, 2.0]])
        assert not consistency_matrix(tracked, ConsistencyParams(tau=3.9))[0, 1]
        assert consistency_matrix(tracked, ConsistencyParams(tau=4.1))[0, 1]

    def test_symmetric_with_unit_diagonal(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            n = rng.integers(2, 20)
            tracked = point_set(rng.uniform(0, 400, (n, 2)), rng.normal(0, 2, (n, 2)))
            m = consistency_matrix(tracked, ConsistencyParams())
            assert np.array_equal(m, m.T)
            assert m.diagonal().all()

    def test_affine_rescaling_of_displacements(self):
        tracked = two_body()
        scaled = point_set(tracked.points, 3.0 * tracked.displacements + 2.0)
        params = ConsistencyParams()
        assert np.array_equal(consistency_matrix(tracked, params), consistency_matrix(scaled, params))

    def test_untracked_points_are_ignored(self):
        tracked = point_set([[1.0, 1.0], [2.0, 2.0], [3.0, 3.0]], np.zeros((3, 2)), [True, False, True])
        assert consistency_matrix(tracked, ConsistencyParams()).shape == (2, 2)

    def test_needs_two_points(self):
        with pytest.raises(InsufficientPoints):
            consistency_matrix(point_set([[1.0, 1.0]], [[0.0, 0.0]]), ConsistencyParams())


class TestCluster:
    def test_all_ones(self):
        clusters = cluster(np.ones((4, 4), dtype=bool))
        assert len(clusters) == 1
        assert clusters[0].tolist() == [0, 1, 2, 3]

    def test_identity(self):
        assert [c.tolist() for c in cluster(np.eye(3, dtype=bool))] == [[0], [1], [2]]

    def test_blocks_ordered_by_smallest_member(self):
        m = np.eye(5, dtype=bool)
        for i, j in [(1, 3), (0, 4), (2, 4)]:
            m[i, j] = m[j, i] = True
        clusters = cluster(m)
        assert [c.tolist() for c in clusters] == [[0, 2, 4], [1, 3]]

    def test_partition(self):
        rng = np.random.default_rng(1)
        a = rng.uniform(size=(30, 30)) > 0.9
        m = a | a.T | np.eye(30, dtype=bool)
        members = np.concatenate(cluster(m))
        assert sorted(members.tolist()) == list(range(30))


class TestSelectDominant:
    def test_moving_beats_static(self):
        tracked = point_set(
            [[0, 0], [1, 0], [2, 0], [100, 100], [101, 100], [102, 100], [103, 100]],
            [[5, 0]] * 3 + [[0, 0]] * 4,
        )
        result = select_dominant([np.arange(3), np.arange(3, 7)], tracked)
        assert result.dominant == 0
        assert not result.low_confidence
        assert np.allclose(result.centroid_2d, [6.0, 0.0])
        assert np.allclose(result.mean_flow, [5.0, 0.0])

    def test_small_winner_is_low_confidence(self):
        tracked = point_set(
            [[0, 0], [1, 0], [2, 0], [100, 100], [101, 100]],
            [[5, 0]] * 3 + [[0, 0]] * 2,
        )
        result = select_dominant([np.arange(3), np.arange(3, 5)], tracked, min_size=5)
        assert result.dominant == 0
        assert result.low_confidence
        assert not select_dominant([np.arange(3), np.arange(3, 5)], tracked, min_size=3).low_confidence

    def test_larger_moving_cluster_wins(self):
        tracked = point_set(np.zeros((40, 2)), np.tile([2.0, 0.0], (40, 1)))
        result = select_dominant([np.arange(10), np.arange(10, 40)], tracked)
        assert result.dominant == 1
        assert result.members.tolist() == list(range(10, 40))

    def test_tie_goes_to_faster_cluster(self):
        tracked = point_set(np.zeros((4, 2)), [[1, 0], [1, 0], [3, 0], [3, 0]])
        assert select_dominant([np.arange(2), np.arange(2, 4)], tracked).dominant == 1

    def test_all_static_falls_back_to_largest(self):
        tracked = point_set(np.zeros((5, 2)), np.zeros((5, 2)))
        result = select_dominant([np.arange(2), np.arange(2, 5)], tracked)
        assert result.dominant == 1
        assert result.low_confidence

    def test_needs_a_cluster(self):
        with pytest.raises(InsufficientPoints):
            select_dominant([], point_set(np.zeros((2, 2)), np.zeros((2, 2))))


def test_locate_finds_the_moving_object():
    tracked = two_body()
    result = locate(tracked, ConsistencyParams())
    assert result.members.tolist() == list(range(30))
    assert np.all(np.abs(result.centroid_2d - [325.0, 240.0]) < 20.0)


def test_locate_flags_a_three_point_object():
    result = locate(two_body(moving=3, static=40), ConsistencyParams())
    assert result.low_confidence


def test_locate_pair_with_executor_matches_serial():
    from concurrent.futures import ThreadPoolExecutor

    left, right = two_body(seed=1), two_body(seed=2)
    params = ConsistencyParams()
    serial = locate_pair(left, right, params)
    with ThreadPoolExecutor(max_workers=2) as pool:
        parallel = locate_pair(left, right, params, executor=pool)
    for a, b in zip(serial, parallel):
        assert np.array_equal(a.labels, b.labels)
        assert np.array_equal(a.centroid_2d, b.centroid_2d)


class TestTrackCenter:
    def _result(self, uv) -> ClusterResult:
        return ClusterResult(labels=np.zeros(1, dtype=int), dominant=0, centroid_2d=np.asarray(uv, dtype=float))

    def test_exact_projections(self, rig):
        c = np.array([0.02, -0.05, 0.9])
        left = self._result(project(rig.left, c)[:2])
        right = self._result(project(rig.right, rig.to_eye(c, "right"))[:2])
        assert np.allclose(track_center(rig, left, right), c, atol=1e-6)

    def test_equal_centroids(self, rig):
        with pytest.raises(NonPositiveDisparity):
            track_center(rig, self._result([300, 200]), self._result([300, 200]))

    def test_half_pixel_error_at_one_meter(self, rig):
        c = np.array([0.0, 0.0, 1.0])
        u_l, v_l, _ = project(rig.left, c)
        u_r, v_r, _ = project(rig.right, rig.to_eye(c, "right"))
        estimate = track_center(rig, self._result([u_l + 0.5, v_l]), self._result([u_r, v_r]))
        assert abs(estimate[2] - 1.0) <= 0.02


def test_dump_labels(tmp_path):
    tracked = two_body(moving=3, static=3)
    result = locate(tracked, ConsistencyParams())
    path = tmp_path / "labels.csv"
    dump_labels(path, tracked, result)
    lines = path.read_text().splitlines()
    assert lines[0] == "point_id,label,du,dv"
    assert len(lines) == 7
    assert lines[1].startswith("0,0,5.000000")


class TestCarryCenter:
    PREVIOUS = np.array([0.02, -0.01, 1.0])

    def _moved(self, rig, center, flow_left=None, flow_right=None, low_confidence=False):
        """Cluster results whose mean flows move the previous center's projections to ``center``."""
        results = []
        for eye, extra in (("left", flow_left), ("right", flow_right)):
            k = rig.eye(eye)
            before = np.array(project(k, rig.to_eye(self.PREVIOUS, eye))[:2])
            after = np.array(project(k, rig.to_eye(center, eye))[:2])
            flow = after - before + (0.0 if extra is None else np.asarray(extra))
            results.append(
                ClusterResult(
                    labels=np.zeros(8, dtype=int),
                    dominant=0,
                    centroid_2d=after + [13.0, -7.0],
                    low_confidence=low_confidence,
                    mean_flow=flow,
                )
            )
        return results

    def test_follows_constant_motion(self, rig):
        target = self.PREVIOUS + [0.01, 0.005, 0.03]
        left, right = self._moved(rig, target)
        center, confident = carry_center(rig, left, right, self.PREVIOUS)
        assert confident
        assert np.allclose(center, target, atol=1e-9)

    def test_ignores_where_the_centroids_sit(self, rig):
        left, right = self._moved(rig, self.PREVIOUS)
        assert not np.allclose(track_center(rig, left, right), self.PREVIOUS, atol=1e-3)
        assert np.allclose(carry_center(rig, left, right, self.PREVIOUS)[0], self.PREVIOUS)

    def test_low_confidence_keeps_the_previous_center(self, rig):
        left, right = self._moved(rig, self.PREVIOUS + [0.0, 0.0, 0.05], low_confidence=True)
        center, confident = carry_center(rig, left, right, self.PREVIOUS)
        assert not confident
        assert np.array_equal(center, self.PREVIOUS)

    def test_eyes_disagreeing_on_the_row(self, rig):
        left, right = self._moved(rig, self.PREVIOUS, flow_right=[0.0, 6.0])
        center, confident = carry_center(rig, left, right, self.PREVIOUS)
        assert not confident
        assert np.array_equal(center, self.PREVIOUS)

    def test_depth_jump_is_capped(self, rig):
        left, right = self._moved(rig, self.PREVIOUS + [0.0, 0.0, 0.3])
        center, confident = carry_center(rig, left, right, self.PREVIOUS, max_jump=0.14)
        assert not confident
        assert np.array_equal(center, self.PREVIOUS)
        assert carry_center(rig, left, right, self.PREVIOUS)[1]
