"""Geometry oracles: projection, crop cameras, rotation metrics, interpolation."""

import numpy as np
import pytest

from flowpose import (
    CameraIntrinsics,
    Pose,
    backproject,
    compose,
    geodesic_deg,
    interpolate_pose,
    inverse,
    make_crop_camera,
    pose_from_crop,
    pose_in_crop,
    project,
)
from flowpose.errors import DegenerateBox, NonPositiveDepth
from flowpose.geometry import (
    check_rotation,
    matrix_to_rotvec,
    random_rotation,
    rot_x,
    rot_y,
    rot_z,
    rotvec_to_matrix,
    slerp_rotation,
    warp_source_to_crop,
)

from conftest import random_pose


SMALL_CAM = CameraIntrinsics(500.0, 500.0, 140.0, 140.0, 280, 280)


def _homogeneous_project(x, pose, cam):
    """Independent 4x4-matrix projection pipeline."""
    m = np.eye(4)
    m[:3, :3] = pose.rotation
    m[:3, 3] = pose.translation
    k = np.array([[cam.fx, 0, cam.cx], [0, cam.fy, cam.cy], [0, 0, 1.0]])
    xh = m @ np.append(np.asarray(x, float), 1.0)
    uvw = k @ xh[:3]
    return uvw[:2] / uvw[2]


class TestProject:
    def test_optical_axis_point(self):
        pose = Pose(np.eye(3), np.array([0.0, 0.0, 1000.0]))
        assert np.allclose(project(np.zeros(3), pose, SMALL_CAM), (140.0, 140.0))

    def test_lateral_offset(self):
        pose = Pose(np.eye(3), np.array([0.0, 0.0, 1000.0]))
        uv = project(np.array([100.0, 0.0, 0.0]), pose, SMALL_CAM)
        assert np.allclose(uv, (190.0, 140.0))

    def test_matches_homogeneous_pipeline(self):
        rng = np.random.default_rng(11)
        for _ in range(200):
            pose = random_pose(rng)
            cam = CameraIntrinsics(
                rng.uniform(300, 900),
                rng.uniform(300, 900),
                rng.uniform(100, 500),
                rng.uniform(100, 400),
                640,
                480,
            )
            x = rng.uniform(-100, 100, 3)
            got = project(x, pose, cam)
            want = _homogeneous_project(x, pose, cam)
            assert np.linalg.norm(got - want) < 1e-9

    def test_behind_camera_raises(self):
        pose = Pose(np.eye(3), np.array([0.0, 0.0, -100.0]))
        with pytest.raises(NonPositiveDepth):
            project(np.zeros(3), pose, SMALL_CAM)


class TestBackproject:
    def test_principal_point(self):
        assert np.allclose(
            backproject(np.array([140.0, 140.0]), 500.0, SMALL_CAM), (0, 0, 500)
        )

    def test_hand_inverted_example(self):
        cam = SMALL_CAM
        got = backproject(np.array([190.0, 140.0]), 1000.0, cam)
        assert np.allclose(got, (100.0, 0.0, 1000.0), atol=1e-9)

    def test_round_trip(self):
        rng = np.random.default_rng(3)
        identity = Pose(np.eye(3), np.zeros(3))
        pix = rng.uniform(0, 279, size=(1000, 2))
        depths = rng.uniform(100, 3000, size=1000)
        pts = backproject(pix, depths, SMALL_CAM)
        back = project(pts, identity, SMALL_CAM)
        assert np.abs(back - pix).max() < 1e-9

    def test_nonpositive_depth_raises(self):
        with pytest.raises(NonPositiveDepth):
            backproject(np.array([10.0, 10.0]), 0.0, SMALL_CAM)


class TestComposeInverse:
    def test_inverse_identity_property(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            p = random_pose(rng)
            e = compose(inverse(p), p)
            assert np.linalg.norm(e.rotation - np.eye(3)) < 1e-9
            assert np.linalg.norm(e.translation) < 1e-9

    def test_compose_matches_matrix_product(self):
        rng = np.random.default_rng(8)
        a, b = random_pose(rng), random_pose(rng)
        c = compose(a, b)
        assert np.allclose(c.rotation, a.rotation @ b.rotation)
        assert np.allclose(c.translation, a.rotation @ b.translation + a.translation)


class TestGeodesic:
    def test_identity(self):
        assert geodesic_deg(np.eye(3), np.eye(3)) == 0.0

    def test_quarter_turn(self):
        assert abs(geodesic_deg(np.eye(3), rot_z(90.0)) - 90.0) < 1e-9

    def test_matches_trace_formula(self):
        rng = np.random.default_rng(5)
        for _ in range(300):
            a, b = random_rotation(rng), random_rotation(rng)
            got = geodesic_deg(a, b)
            c = np.clip((np.trace(a.T @ b) - 1.0) / 2.0, -1.0, 1.0)
            assert abs(got - np.degrees(np.arccos(c))) < 1e-6

    def test_symmetry_and_bound(self):
        rng = np.random.default_rng(6)
        a, b = random_rotation(rng), random_rotation(rng)
        assert geodesic_deg(a, b) == pytest.approx(geodesic_deg(b, a), abs=1e-12)
        assert 0.0 <= geodesic_deg(a, b) <= 180.0

    def test_triangle_inequality(self):
        rng = np.random.default_rng(9)
        for _ in range(200):
            a, b, c = (random_rotation(rng) for _ in range(3))
            assert geodesic_deg(a, c) <= geodesic_deg(a, b) + geodesic_deg(b, c) + 1e-6


class TestCropCamera:
    def test_centered_box_gives_identity(self):
        cam = CameraIntrinsics(600.0, 600.0, 320.0, 240.0, 640, 480)
        crop = make_crop_camera((300.0, 220.0, 340.0, 260.0), cam, 280, 1.2)
        assert np.allclose(crop.rotation_to_source, np.eye(3), atol=1e-12)

    def test_box_center_maps_to_principal_point(self):
        rng = np.random.default_rng(12)
        cam = CameraIntrinsics(600.0, 600.0, 320.0, 240.0, 640, 480)
        for _ in range(50):
            x0, y0 = rng.uniform(0, 500), rng.uniform(0, 350)
            box = (x0, y0, x0 + rng.uniform(10, 120), y0 + rng.uniform(10, 120))
            crop = make_crop_camera(box, cam, 280, 1.2)
            center = np.array([(box[0] + box[2]) / 2.0, (box[1] + box[3]) / 2.0])
            warped = warp_source_to_crop(center, cam, crop)
            assert np.linalg.norm(warped - (140.0, 140.0)) < 1e-6

    def test_padded_box_corners_stay_inside(self):
        rng = np.random.default_rng(13)
        cam = CameraIntrinsics(600.0, 600.0, 320.0, 240.0, 640, 480)
        for _ in range(50):
            x0, y0 = rng.uniform(0, 480), rng.uniform(0, 330)
            box = (x0, y0, x0 + rng.uniform(20, 150), y0 + rng.uniform(20, 140))
            crop = make_crop_camera(box, cam, 280, 1.2)
            corners = np.array(
                [[box[0], box[1]], [box[2], box[1]], [box[0], box[3]], [box[2], box[3]]]
            )
            warped = warp_source_to_crop(corners, cam, crop)
            assert (warped > -0.5).all() and (warped < 279.5).all()

    def test_deterministic(self):
        cam = CameraIntrinsics(600.0, 600.0, 320.0, 240.0, 640, 480)
        a = make_crop_camera((100.0, 50.0, 220.0, 180.0), cam, 280, 1.2)
        b = make_crop_camera((100.0, 50.0, 220.0, 180.0), cam, 280, 1.2)
        assert (a.rotation_to_source == b.rotation_to_source).all()
        assert a.intrinsics == b.intrinsics

    def test_zero_area_box_rejected(self):
        cam = CameraIntrinsics(600.0, 600.0, 320.0, 240.0, 640, 480)
        with pytest.raises(DegenerateBox):
            make_crop_camera((100.0, 50.0, 100.0, 180.0), cam, 280, 1.2)

    def test_pose_round_trip_through_crop(self):
        rng = np.random.default_rng(14)
        cam = CameraIntrinsics(600.0, 600.0, 320.0, 240.0, 640, 480)
        crop = make_crop_camera((200.0, 150.0, 400.0, 320.0), cam, 280, 1.2)
        for _ in range(20):
            pose = random_pose(rng)
            again = pose_from_crop(pose_in_crop(pose, crop), crop)
            assert np.linalg.norm(again.rotation - pose.rotation) < 1e-12
            assert np.linalg.norm(again.translation - pose.translation) < 1e-9


class TestRotationHelpers:
    def test_rotvec_round_trip(self):
        rng = np.random.default_rng(15)
        for _ in range(200):
            r = random_rotation(rng)
            again = rotvec_to_matrix(matrix_to_rotvec(r))
            assert np.linalg.norm(again - r) < 1e-9

    def test_check_rotation_rejects_reflection(self):
        m = np.diag([1.0, 1.0, -1.0])
        with pytest.raises(ValueError):
            check_rotation(m)

    def test_axis_rotations(self):
        assert np.allclose(rot_x(90.0) @ np.array([0, 1, 0]), [0, 0, 1])
        assert np.allclose(rot_y(90.0) @ np.array([0, 0, 1]), [1, 0, 0])
        assert np.allclose(rot_z(90.0) @ np.array([1, 0, 0]), [0, 1, 0])


class TestInterpolation:
    def test_endpoints_exact(self):
        rng = np.random.default_rng(16)
        a, b = random_pose(rng), random_pose(rng)
        assert interpolate_pose(a, b, 0.0) is a
        assert interpolate_pose(a, b, 1.0) is b

    def test_single_axis_linearity(self):
        a = Pose(np.eye(3), np.zeros(3))
        b = Pose(rot_z(90.0), np.array([90.0, 0.0, 0.0]))
        for k in range(10):
            p = interpolate_pose(a, b, k / 9.0)
            assert abs(geodesic_deg(np.eye(3), p.rotation) - 10.0 * k) < 1e-9
            assert abs(p.translation[0] - 10.0 * k) < 1e-9

    def test_slerp_shortest_path(self):
        r = slerp_rotation(np.eye(3), rot_y(170.0), 0.5)
        assert abs(geodesic_deg(np.eye(3), r) - 85.0) < 1e-9
