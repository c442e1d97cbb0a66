import math

import numpy as np
import pytest

from semislam.geometry import (
    CalibrationFileError,
    CameraModel,
    GeometryError,
    Pose,
    TriangulationError,
    epipolar_segment,
    load_camera,
    parallax_deg,
    project,
    project_array,
    rotation_exp,
    save_camera,
    triangulate,
    unproject,
    unproject_array,
)


def look_from(center, rng=None):
    # simple pose looking roughly at the origin from `center`
    c = np.asarray(center, dtype=np.float64)
    z = -c / np.linalg.norm(c)
    up = np.array([0.0, 1.0, 0.0]) if abs(z[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
    x = np.cross(up, z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R_cw = np.stack([x, y, z], axis=1)
    return Pose(R_cw.T, -R_cw.T @ c)


class TestProject:
    def test_optical_axis_hits_principal_point(self, cam):
        for depth in (0.3, 1.0, 50.0):
            px = project(np.array([0.0, 0.0, depth]), Pose.identity(), cam)
            assert px is not None
            assert np.allclose(px, [cam.cx, cam.cy], atol=1e-12)

    def test_analytic_pinhole(self):
        cam = CameraModel(fx=100.0, fy=100.0, cx=320.0, cy=240.0, width=640, height=480)
        px = project(np.array([1.0, 0.0, 1.0]), Pose.identity(), cam)
        assert np.allclose(px, [420.0, 240.0], atol=1e-12)

    def test_distortion_matches_scalar_evaluation(self):
        # straight-line scalar evaluation of the distortion polynomial
        cam = CameraModel(fx=458.0, fy=457.0, cx=367.0, cy=248.0, k1=-0.28, k2=0.07,
                          width=752, height=480)
        p = np.array([0.5, -0.3, 2.0])
        x, y = p[0] / p[2], p[1] / p[2]
        r2 = x * x + y * y
        rad = 1.0 + cam.k1 * r2 + cam.k2 * r2 * r2
        expect = np.array([cam.fx * (x * rad) + cam.cx, cam.fy * (y * rad) + cam.cy])
        px = project(p, Pose.identity(), cam)
        assert np.allclose(px, expect, atol=1e-9)

    def test_behind_camera_is_out_of_view(self, cam):
        assert project(np.array([0.0, 0.0, -1.0]), Pose.identity(), cam) is None

    def test_margin_extends_bounds(self, cam):
        p = np.array([-0.85, 0.0, 1.0])  # lands left of the image
        assert project(p, Pose.identity(), cam) is None
        assert project(p, Pose.identity(), cam, margin=100.0) is not None


class TestUnproject:
    def test_principal_point_is_axis(self, cam):
        ray = unproject(np.array([cam.cx, cam.cy]), cam)
        assert np.allclose(ray, [0.0, 0.0, 1.0], atol=1e-12)

    def test_offset_pixel_zero_distortion(self):
        cam = CameraModel(fx=100.0, fy=100.0, cx=320.0, cy=240.0, width=640, height=480)
        ray = unproject(np.array([cam.cx + cam.fx, cam.cy]), cam)
        assert np.allclose(ray, np.array([1.0, 0.0, 1.0]) / math.sqrt(2.0), atol=1e-12)

    def test_round_trip_with_distortion(self, cam_distorted, rng):
        px = np.stack([rng.uniform(40, cam_distorted.width - 40, 1000),
                       rng.uniform(40, cam_distorted.height - 40, 1000)], axis=1)
        rays, ok = unproject_array(px, cam_distorted)
        assert ok.all()
        depths = rng.uniform(0.1, 10.0, 1000)
        pts = rays * depths[:, None]
        uv, z, valid = project_array(pts, Pose.identity(), cam_distorted, margin=1.0)
        assert valid.all()
        assert np.abs(uv - px).max() < 1e-6


class TestTriangulate:
    def test_exact_recovery(self, cam, rng):
        pose_a = Pose.identity()
        pose_b = Pose(np.eye(3), np.array([-0.2, 0.0, 0.0]))
        p = np.array([0.1, -0.05, 2.0])
        pxa = project(p, pose_a, cam)
        pxb = project(p, pose_b, cam)
        rec = triangulate(pxa, pose_a, pxb, pose_b, cam)
        assert np.abs(rec - p).max() < 1e-9

    def test_identical_poses_degenerate(self, cam):
        pose = Pose.identity()
        with pytest.raises(TriangulationError):
            triangulate(np.array([300.0, 200.0]), pose, np.array([300.0, 200.0]), pose, cam)

    def test_against_midpoint_oracle(self, cam, rng):
        # midpoint of the common perpendicular between the two rays
        def midpoint(ray_a, pose_a, ray_b, pose_b):
            ca = pose_a.center()
            cb = pose_b.center()
            da = pose_a.R.T @ ray_a
            db = pose_b.R.T @ ray_b
            n = np.cross(da, db)
            A = np.stack([da, -db, n], axis=1)
            s, t, _ = np.linalg.solve(A, cb - ca)
            return 0.5 * (ca + s * da + cb + t * db)

        from semislam.geometry import unproject

        for _ in range(100):
            pose_a = look_from(rng.uniform(1.5, 3.0) * np.array([np.cos(a := rng.uniform(0, 6.28)), np.sin(a), rng.uniform(0.5, 1.0)]))
            pose_b = look_from(pose_a.center() + rng.uniform(-0.3, 0.3, 3))
            p = rng.uniform(-0.3, 0.3, 3)
            pxa = project(p, pose_a, cam)
            pxb = project(p, pose_b, cam)
            if pxa is None or pxb is None:
                continue
            rec = triangulate(pxa, pose_a, pxb, pose_b, cam)
            mid = midpoint(unproject(pxa, cam), pose_a, unproject(pxb, cam), pose_b)
            assert np.abs(rec - mid).max() < 1e-6


class TestParallax:
    def test_coincident_centers(self):
        assert parallax_deg([0, 0, 10], [1, 2, 3], [1, 2, 3]) == 0.0

    def test_closed_form(self):
        got = parallax_deg([0, 0, 20.0], [0.5, 0, 0], [-0.5, 0, 0])
        expect = math.degrees(2 * math.atan(0.5 / 20.0))
        assert abs(got - expect) < 1e-12

    def test_symmetry(self, rng):
        for _ in range(50):
            p, a, b = rng.normal(size=(3, 3))
            assert parallax_deg(p, a, b) == pytest.approx(parallax_deg(p, b, a), abs=1e-12)


class TestEpipolarSegment:
    def test_pure_rotation_collapses(self, cam):
        pose_a = Pose.identity()
        pose_b = Pose(rotation_exp([0.0, 0.05, 0.0]), np.zeros(3))
        seg, depths = epipolar_segment(np.array([400.0, 250.0]), pose_a, pose_b, cam, (0.5, 50.0))
        assert len(seg) >= 1
        spread = np.ptp(seg, axis=0)
        assert spread.max() < 1e-6

    def test_lateral_translation_collinear_zero_distortion(self):
        cam = CameraModel(fx=460.0, fy=460.0, cx=320.0, cy=240.0, width=640, height=480)
        pose_a = Pose.identity()
        pose_b = Pose(np.eye(3), np.array([-0.3, 0.0, 0.0]))
        seg, _ = epipolar_segment(np.array([340.0, 260.0]), pose_a, pose_b, cam, (0.5, 20.0))
        assert len(seg) > 5
        d0 = seg[-1] - seg[0]
        d0 /= np.linalg.norm(d0)
        rel = seg - seg[0]
        cross = np.abs(rel[:, 0] * d0[1] - rel[:, 1] * d0[0])
        assert cross.max() < 1e-6

    def test_sampling_step_and_depth_consistency(self, cam_distorted):
        pose_a = Pose.identity()
        pose_b = Pose(rotation_exp([0.02, -0.03, 0.01]), np.array([-0.15, 0.05, 0.02]))
        px = np.array([500.0, 300.0])
        seg, depths = epipolar_segment(px, pose_a, pose_b, cam_distorted, (0.8, 8.0))
        assert len(seg) > 3
        steps = np.linalg.norm(np.diff(seg, axis=0), axis=1)
        assert steps.max() <= 0.7 + 1e-9
        # each sample equals the direct projection of the ray point at its depth
        ray = unproject(px, cam_distorted)
        for uv, d in zip(seg[::7], depths[::7]):
            p_world = ray * d
            uv2 = project(p_world, pose_b, cam_distorted, margin=1.0)
            assert uv2 is not None and np.abs(uv2 - uv).max() < 1e-9

    def test_fully_out_of_view_is_empty(self, cam):
        pose_a = Pose.identity()
        # second camera looking the opposite way
        pose_b = Pose(rotation_exp([0.0, math.pi, 0.0]), np.zeros(3))
        seg, _ = epipolar_segment(np.array([320.0, 240.0]), pose_a, pose_b, cam, (0.5, 10.0))
        assert len(seg) == 0


class TestPose:
    def test_orthonormality_after_long_chains(self, rng):
        pose = Pose.identity()
        step = Pose(rotation_exp([0.01, 0.02, -0.015]), np.array([0.01, 0.0, 0.002]))
        for _ in range(1000):
            pose = step.compose(pose)
        err = np.abs(pose.R.T @ pose.R - np.eye(3)).max()
        assert err < 1e-9

    def test_rejects_non_orthonormal(self):
        with pytest.raises(GeometryError):
            Pose(np.eye(3) * 1.001, np.zeros(3))

    def test_inverse_compose_identity(self, rng):
        pose = Pose(rotation_exp(rng.normal(0, 1, 3)), rng.normal(0, 1, 3))
        ident = pose.compose(pose.inverse())
        assert np.abs(ident.R - np.eye(3)).max() < 1e-12
        assert np.abs(ident.t).max() < 1e-12


class TestCalibrationFile:
    def test_round_trip(self, tmp_path, cam_distorted):
        path = tmp_path / "calib.txt"
        save_camera(path, cam_distorted)
        loaded = load_camera(path)
        assert loaded == cam_distorted

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "calib.txt"
        path.write_text("fx=100\nfy=100\ncx=320\ncy=240\nk1=0\nk2=0\np1=0\np2=0\n"
                        "width=640\nheight=480\nfov=90\n")
        with pytest.raises(CalibrationFileError):
            load_camera(path)

    def test_missing_key_rejected(self, tmp_path):
        path = tmp_path / "calib.txt"
        path.write_text("fx=100\nfy=100\n")
        with pytest.raises(CalibrationFileError):
            load_camera(path)
