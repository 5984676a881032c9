import math

import numpy as np
import pytest

from app.core.errors import DegenerateDepth
from app.services.amq import PoseQueue, enqueue, initial_hypothesis, pivot_rotation
from app.services.geometry import Pose, is_rotation, rot_x, rot_y, rot_z, rotation_to_euler


def pose(rotation, center=(0.0, 0.0, 1.0)) -> Pose:
    return Pose(rotation=rotation, center=center)


class TestInitialHypothesis:
    def test_on_axis_is_identity(self):
        assert np.allclose(initial_hypothesis([0.0, 0.0, 1.0]), np.eye(3))

    def test_heading(self):
        r = initial_hypothesis([1.0, 0.0, 1.0])
        assert np.allclose(r, rot_y(math.pi / 4))

    def test_heading_is_a_pitch_about_the_camera_y_axis(self):
        # R = Rz(yaw) Ry(pitch) Rx(roll): turning toward +x is a rotation about y
        roll, pitch, yaw = rotation_to_euler(initial_hypothesis([1.0, 0.0, 1.0]))
        assert pitch == pytest.approx(math.pi / 4)
        assert yaw == pytest.approx(0.0, abs=1e-12)
        assert roll == pytest.approx(0.0, abs=1e-12)

    def test_z_axis_points_at_center(self):
        c = np.array([0.3, -0.2, 1.5])
        r = initial_hypothesis(c)
        assert is_rotation(r)
        assert np.allclose(r[:, 2], c / np.linalg.norm(c))
        # no roll: the x axis stays horizontal
        assert abs(r[1, 0]) < 1e-12

    def test_behind_camera(self):
        with pytest.raises(DegenerateDepth):
            initial_hypothesis([0.0, 0.0, -1.0])


class TestPoseQueue:
    def test_capacity_and_order(self):
        queue = PoseQueue(capacity=2)
        for i in range(4):
            queue.enqueue(pose(rot_z(0.1 * i)), i)
        assert len(queue) == 2
        assert [i for i, _ in queue] == [3, 2]

    def test_zero_capacity_stores_nothing(self):
        queue = PoseQueue(capacity=0)
        enqueue(queue, pose(np.eye(3)), 0)
        assert len(queue) == 0

    def test_rejects_invalid_pose(self):
        with pytest.raises(ValueError):
            PoseQueue().enqueue(pose(2.0 * np.eye(3)))

    @pytest.mark.parametrize("alpha", [0.0, 1.5])
    def test_alpha_range(self, alpha):
        with pytest.raises(ValueError):
            PoseQueue(alpha=alpha)

    def test_dump_appends(self, tmp_path):
        queue = PoseQueue(capacity=2)
        queue.enqueue(pose(rot_z(0.2), (0.1, 0.2, 0.3)), 5)
        path = tmp_path / "amq.txt"
        queue.dump(path)
        queue.dump(path)
        lines = path.read_text().splitlines()
        assert len(lines) == 2
        fields = lines[0].split(",")
        assert fields[0] == "5"
        assert float(fields[3]) == pytest.approx(0.2)
        assert float(fields[6]) == pytest.approx(0.3)


class TestPivotRotation:
    def test_empty_queue_uses_look_at(self):
        r = pivot_rotation(PoseQueue(), [0.0, 0.0, 1.0], 0)
        assert np.allclose(r, np.eye(3))

    def test_alpha_one_returns_seed(self):
        queue = PoseQueue(capacity=4, alpha=1.0)
        queue.enqueue(pose(rot_z(0.2)), 0)
        r = pivot_rotation(queue, [0.0, 0.0, 1.0], 1, seed=rot_z(0.7))
        assert np.allclose(r, rot_z(0.7))

    def test_fixed_point(self):
        queue = PoseQueue(capacity=4)
        for i in range(4):
            queue.enqueue(pose(rot_z(0.2)), i)
        assert np.allclose(pivot_rotation(queue, [0.0, 0.0, 1.0], 4, seed=rot_z(0.2)), rot_z(0.2))

    def test_newest_first_blend(self):
        queue = PoseQueue(capacity=4, alpha=0.5)
        queue.enqueue(pose(rot_z(0.3)), 0)
        queue.enqueue(pose(rot_z(0.1)), 1)
        r = pivot_rotation(queue, [0.0, 0.0, 1.0], 2, seed=rot_z(0.0))
        # 0 -> 0.5*0 + 0.5*0.1 = 0.05 -> 0.5*0.05 + 0.5*0.3 = 0.175
        assert rotation_to_euler(r).yaw == pytest.approx(0.175)

    def test_history_depth_limited_by_frame_index(self):
        queue = PoseQueue(capacity=4, alpha=0.5)
        queue.enqueue(pose(rot_z(0.3)), 0)
        queue.enqueue(pose(rot_z(0.1)), 1)
        r = pivot_rotation(queue, [0.0, 0.0, 1.0], 1, seed=rot_z(0.0))
        assert rotation_to_euler(r).yaw == pytest.approx(0.05)

    def test_blend_takes_the_short_arc(self):
        queue = PoseQueue(capacity=1, alpha=0.5)
        queue.enqueue(pose(rot_z(math.pi - 0.1)), 0)
        r = pivot_rotation(queue, [0.0, 0.0, 1.0], 1, seed=rot_z(-math.pi + 0.1))
        assert abs(rotation_to_euler(r).yaw) == pytest.approx(math.pi, abs=1e-9)

    def test_empty_queue_after_frame_zero_uses_look_at(self):
        r = pivot_rotation(PoseQueue(capacity=4), [1.0, 0.0, 1.0], 5, seed=rot_x(0.4))
        assert np.allclose(r, rot_y(math.pi / 4))

    def test_seed_survives_empty_history(self):
        r = pivot_rotation(PoseQueue(capacity=0), [0.3, 0.0, 1.0], 5, seed=rot_x(0.4))
        assert np.allclose(r, rot_x(0.4))

    def test_frame_zero_ignores_seed(self):
        r = pivot_rotation(PoseQueue(), [0.0, 0.0, 1.0], 0, seed=rot_x(0.4))
        assert np.allclose(r, np.eye(3))

    def test_output_is_rotation(self):
        rng = np.random.default_rng(0)
        queue = PoseQueue(capacity=4, alpha=0.3)
        for i in range(6):
            queue.enqueue(pose(rot_z(rng.uniform(-3, 3)) @ rot_y(rng.uniform(-1, 1))), i)
        r = pivot_rotation(queue, [0.0, 0.0, 1.0], 6, seed=rot_x(2.0))
        assert is_rotation(r)
