"""Pinhole projection and landmark-based camera initialization."""

import numpy as np
import pytest

from mvflame.assets import make_mini_model
from mvflame.camera import (Camera, DegenerateConfiguration,
                            estimate_initial_camera, look_at, project,
                            project_rt, project_rt_vjp, reprojection_rmse)
from mvflame.decoder import FlameParams, decode, embed_landmarks, rodrigues

ASSETS = make_mini_model(0)


def frontal_camera(res=128, distance=0.45):
    return look_at((0.0, 0.0, distance), (0.0, 0.0, 0.0), fx=res, fy=res,
                   cx=res / 2, cy=res / 2, width=res, height=res)


class TestProject:
    def test_optical_axis_hits_principal_point(self):
        cam = frontal_camera()
        pix, z = project(cam, np.array([[0.0, 0.0, 0.45 - 0.2]]))
        assert np.allclose(pix[0], (64.0, 64.0), atol=1e-12)
        assert np.isclose(z[0], 0.2)

    def test_focal_scales_offset(self):
        cam = frontal_camera()
        cam2 = Camera(rotation=cam.rotation, translation=cam.translation,
                      fx=2 * cam.fx, fy=cam.fy, cx=cam.cx, cy=cam.cy,
                      width=cam.width, height=cam.height)
        p = np.array([[0.05, 0.02, 0.1]])
        a, _ = project(cam, p)
        b, _ = project(cam2, p)
        assert np.isclose(b[0, 0] - cam.cx, 2 * (a[0, 0] - cam.cx))
        assert np.isclose(b[0, 1], a[0, 1])

    def test_matches_homogeneous_matrix_oracle(self):
        rng = np.random.default_rng(0)
        cam = look_at(rng.normal(size=3) * 0.3 + (0, 0, 0.6), (0, 0, 0),
                      fx=100, fy=90, cx=50, cy=40, width=100, height=80)
        pts = rng.normal(size=(30, 3)) * 0.05
        pix, z = project(cam, pts)
        K = np.array([[cam.fx, 0, cam.cx], [0, cam.fy, cam.cy], [0, 0, 1.0]])
        P = K @ np.hstack([cam.rotation, cam.translation[:, None]])
        homo = (P @ np.vstack([pts.T, np.ones(len(pts))])).T
        assert np.abs(pix - homo[:, :2] / homo[:, 2:3]).max() < 1e-9
        assert np.abs(z - homo[:, 2]).max() < 1e-12

    def test_scale_consistency(self):
        cam = frontal_camera(res=128)
        cam2 = cam.scaled(2.0)
        pts = np.random.default_rng(1).normal(size=(10, 3)) * 0.05
        a, _ = project(cam, pts)
        b, _ = project(cam2, pts)
        assert np.abs(b - 2.0 * a).max() < 1e-9

    def test_negative_depth_flagged(self):
        cam = frontal_camera()
        _, z = project(cam, np.array([[0.0, 0.0, 1.0]]))  # behind the camera
        assert z[0] < 0


class TestCameraType:
    def test_rejects_non_orthonormal(self):
        with pytest.raises(ValueError):
            Camera(rotation=np.eye(3) + 1e-3, translation=np.zeros(3),
                   fx=1, fy=1, cx=0, cy=0, width=8, height=8)

    def test_rejects_bad_focal(self):
        with pytest.raises(ValueError):
            Camera(rotation=np.eye(3), translation=np.zeros(3),
                   fx=0, fy=1, cx=0, cy=0, width=8, height=8)

    def test_json_round_trip(self, tmp_path):
        cam = frontal_camera()
        cam.save_json(tmp_path / "c.json")
        again = Camera.load_json(tmp_path / "c.json")
        assert np.array_equal(cam.rotation, again.rotation)
        assert np.array_equal(cam.translation, again.translation)
        assert (cam.fx, cam.fy, cam.cx, cam.cy) == (again.fx, again.fy,
                                                    again.cx, again.cy)


class TestInitialCamera:
    def _synthetic(self, seed, res=128):
        rng = np.random.default_rng(seed)
        mesh = decode(ASSETS, FlameParams.zeros(ASSETS))
        lmk3d = embed_landmarks(mesh, ASSETS.lmk_faces, ASSETS.lmk_bary)
        ang = np.deg2rad(rng.uniform(-30, 30))
        pos = np.array([np.sin(ang), rng.normal() * 0.1, np.cos(ang)]) * 0.5
        cam = look_at(pos, (0, 0, 0), fx=res, fy=res, cx=res / 2, cy=res / 2,
                      width=res, height=res)
        pix, _ = project(cam, lmk3d)
        return cam, lmk3d, pix

    @pytest.mark.parametrize("seed", range(5))
    def test_recovers_synthetic_camera(self, seed):
        cam, lmk3d, pix = self._synthetic(seed)
        est, rmse = estimate_initial_camera(pix, lmk3d, (128, 128))
        assert rmse < 0.5
        assert reprojection_rmse(est, lmk3d, pix) < 0.5

    def test_frontal_rotation_close_to_truth(self):
        cam, lmk3d, pix = self._synthetic(99)
        est, _ = estimate_initial_camera(pix, lmk3d, (128, 128))
        # relative rotation angle between truth and estimate below 5 degrees
        Rrel = cam.rotation @ est.rotation.T
        ang = np.arccos(np.clip((np.trace(Rrel) - 1) / 2, -1, 1))
        assert np.degrees(ang) < 5.0

    def test_collinear_landmarks_degenerate(self):
        t = np.linspace(0, 1, 68)
        l3d = np.stack([t, 2 * t, -t], axis=1)
        l2d = np.stack([t * 100, t * 50], axis=1)
        with pytest.raises(DegenerateConfiguration):
            estimate_initial_camera(l2d, l3d, (128, 128))

    def test_too_few_points(self):
        with pytest.raises(DegenerateConfiguration):
            estimate_initial_camera(np.zeros((3, 2)), np.zeros((3, 3)), (64, 64))


class TestProjectRT:
    def test_vjp_matches_fd(self):
        rng = np.random.default_rng(5)
        base = rodrigues(rng.normal(size=3))
        rvec = rng.normal(size=3) * 0.2
        tvec = np.array([0.02, -0.01, 0.5])
        intr = (100.0, 110.0, 50.0, 40.0)
        pts = rng.normal(size=(12, 3)) * 0.08
        W = rng.normal(size=(12, 2))

        def f(rv, tv, p):
            pix, _, _ = project_rt(rv, tv, intr, p, base_rotation=base)
            return float(np.sum(W * pix))

        _pix, _z, cache = project_rt(rvec, tvec, intr, pts, base_rotation=base)
        d_pts, d_rvec, d_t = project_rt_vjp(rvec, cache, W)
        h = 1e-7
        for i in range(3):
            e = np.zeros(3)
            e[i] = h
            fd_r = (f(rvec + e, tvec, pts) - f(rvec - e, tvec, pts)) / (2 * h)
            fd_t = (f(rvec, tvec + e, pts) - f(rvec, tvec - e, pts)) / (2 * h)
            assert abs(d_rvec[i] - fd_r) / max(abs(fd_r), 1e-9) < 1e-6
            assert abs(d_t[i] - fd_t) / max(abs(fd_t), 1e-9) < 1e-6
        for n in (0, 7):
            for i in range(3):
                e = np.zeros((12, 3))
                e[n, i] = h
                fd = (f(rvec, tvec, pts + e) - f(rvec, tvec, pts - e)) / (2 * h)
                assert abs(d_pts[n, i] - fd) / max(abs(fd), 1e-9) < 1e-6
