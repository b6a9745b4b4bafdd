import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from needlenav.geometry import (
    RigidTransform,
    StereoRig,
    from_spherical,
    look_at_rotation,
    project,
    to_spherical,
    triangulate,
)


def default_rig(**kw):
    args = dict(focal_px=700.0, cx=640.0, cy=360.0, baseline_mm=120.0)
    args.update(kw)
    return StereoRig(**args)


class TestProject:
    def test_optical_axis_hits_principal_point(self):
        rig = default_rig()
        uv = project(np.array([0.0, 0.0, 800.0]), rig, "left")
        assert np.allclose(uv, [rig.cx, rig.cy])

    def test_right_camera_offset_is_fB_over_Z(self):
        # hand evaluation: u_right = cx - f*B/Z = cx - 500*100/1000
        rig = StereoRig(focal_px=500.0, cx=640.0, cy=360.0, baseline_mm=100.0)
        uv = project(np.array([0.0, 0.0, 1000.0]), rig, "right")
        assert np.allclose(uv, [640.0 - 50.0, 360.0])

    def test_point_behind_camera_raises(self):
        rig = default_rig()
        with pytest.raises(ValueError):
            project(np.array([0.0, 0.0, -5.0]), rig, "left")
        with pytest.raises(ValueError):
            project(np.array([10.0, 2.0, 0.0]), rig, "left")


class TestTriangulate:
    def test_depth_from_disparity(self):
        # rectified depth formula: Z = f*B/d = 500*100/50
        rig = StereoRig(focal_px=500.0, cx=640.0, cy=360.0, baseline_mm=100.0)
        p = triangulate(np.array([640.0 + 25.0, 360.0]), np.array([640.0 - 25.0, 360.0]), rig)
        assert abs(p[2] - 1000.0) < 1e-9

    def test_round_trip(self):
        rig = default_rig()
        pt = np.array([35.0, -20.0, 615.0])
        rec = triangulate(project(pt, rig, "left"), project(pt, rig, "right"), rig)
        assert np.linalg.norm(rec - pt) < 1e-6

    def test_zero_disparity_raises(self):
        rig = default_rig()
        with pytest.raises(ValueError):
            triangulate(np.array([640.0, 360.0]), np.array([640.0, 360.0]), rig)

    def test_small_disparity_warns(self):
        rig = default_rig()
        with pytest.warns(UserWarning, match="near-parallel"):
            triangulate(np.array([640.2, 360.0]), np.array([640.0, 360.0]), rig)

    def test_round_trip_with_posed_rig(self):
        rng = np.random.default_rng(7)
        from scipy.spatial.transform import Rotation

        R = Rotation.random(random_state=3).as_matrix()
        pose = RigidTransform(R, rng.normal(size=3) * 50)
        rig = default_rig(pose=pose)
        # points in front of the posed rig
        inv = pose.inverse()
        for _ in range(20):
            cam_pt = np.array([rng.uniform(-100, 100), rng.uniform(-80, 80), rng.uniform(300, 2000)])
            world = inv.apply(cam_pt)
            rec = triangulate(project(world, rig, "left"), project(world, rig, "right"), rig)
            assert np.linalg.norm(rec - world) < 1e-6


@settings(max_examples=100, deadline=None)
@given(
    x=st.floats(-200, 200),
    y=st.floats(-150, 150),
    z=st.floats(300, 2000),
)
def test_projection_triangulation_round_trip_property(x, y, z):
    rig = default_rig()
    pt = np.array([x, y, z])
    rec = triangulate(project(pt, rig, "left"), project(pt, rig, "right"), rig)
    assert np.linalg.norm(rec - pt) < 1e-6


def test_depth_error_dominates_lateral_under_pixel_noise():
    # depth error grows as Z^2 * sigma / (f*B): at Z=600 it should exceed
    # both lateral components by a wide margin
    rig = default_rig()
    rng = np.random.default_rng(42)
    pt = np.array([20.0, -10.0, 600.0])
    l, r = project(pt, rig, "left"), project(pt, rig, "right")
    sigma = 0.3
    errs = []
    for _ in range(2000):
        rec = triangulate(l + rng.normal(0, sigma, 2), r + rng.normal(0, sigma, 2), rig)
        errs.append(rec - pt)
    std = np.std(np.array(errs), axis=0)
    assert std[2] > std[0]
    assert std[2] > std[1]
    predicted = pt[2] ** 2 * sigma * math.sqrt(2) / (rig.focal_px * rig.baseline_mm)
    assert 0.5 * predicted < std[2] < 2.0 * predicted


class TestSpherical:
    def test_rest_axis(self):
        s = to_spherical([0.0, 0.0, 10.0])
        assert (s.azimuth_deg, s.elevation_deg, s.radius_mm) == (0.0, 0.0, 10.0)

    def test_45_degrees_azimuth(self):
        s = to_spherical([10.0, 0.0, 10.0])
        assert abs(s.azimuth_deg - 45.0) < 1e-12
        assert abs(s.elevation_deg) < 1e-12
        assert abs(s.radius_mm - math.sqrt(200.0)) < 1e-12

    def test_zero_vector_raises(self):
        with pytest.raises(ValueError):
            to_spherical([0.0, 0.0, 0.0])

    @settings(max_examples=200, deadline=None)
    @given(
        x=st.floats(-100, 100), y=st.floats(-100, 100), z=st.floats(-100, 100),
    )
    def test_round_trip(self, x, y, z):
        v = np.array([x, y, z])
        if np.linalg.norm(v) < 1e-6:
            return
        s = to_spherical(v)
        back = from_spherical(s.azimuth_deg, s.elevation_deg, s.radius_mm)
        assert np.linalg.norm(back - v) < 1e-9


class TestRigidTransform:
    def test_identity(self):
        p = np.array([1.0, 2.0, 3.0])
        assert np.allclose(RigidTransform.identity().apply(p), p)

    def test_pure_translation(self):
        t = RigidTransform(np.eye(3), [1.0, 2.0, 3.0])
        assert np.allclose(t.apply(np.zeros(3)), [1.0, 2.0, 3.0])

    def test_compose_with_inverse_is_identity(self):
        from scipy.spatial.transform import Rotation

        T = RigidTransform(Rotation.random(random_state=11).as_matrix(), [4.0, -2.0, 9.0])
        I = T.compose(T.inverse())
        assert np.abs(I.rotation - np.eye(3)).max() < 1e-12
        assert np.abs(I.translation).max() < 1e-12
        T.validate()

    def test_validate_rejects_reflection(self):
        R = np.diag([1.0, 1.0, -1.0])
        with pytest.raises(ValueError):
            RigidTransform(R, np.zeros(3)).validate()


def test_look_at_rotation_points_z_along_direction():
    d = np.array([3.0, -1.0, 2.0])
    R = look_at_rotation(d)
    assert np.allclose(R @ np.array([0.0, 0.0, 1.0]), d / np.linalg.norm(d))
    assert np.abs(R.T @ R - np.eye(3)).max() < 1e-12
    assert abs(np.linalg.det(R) - 1.0) < 1e-12
