"""Optical flow: pyramidal LK, rasterizer oracle, reductions."""

import numpy as np
import pytest
from scipy import ndimage

from mvflame.assets import make_mini_model
from mvflame.camera import Camera, look_at
from mvflame.decoder import FlameParams, decode
from mvflame.flow import (FlowField, estimate_flow_lk, flow_to_color,
                          mean_flow_magnitude, oracle_flow)
from mvflame.renderer import rasterize

ASSETS = make_mini_model(0)
MESH = decode(ASSETS, FlameParams.zeros(ASSETS))


def textured(seed=0, size=140):
    rng = np.random.default_rng(seed)
    img = ndimage.gaussian_filter(rng.random((size, size)), 2.0)
    img = (img - img.min()) / np.ptp(img)
    return img


def to_rgb(gray):
    return np.repeat(gray[:, :, None], 3, axis=2)


class TestLucasKanade:
    def test_identical_images_zero_flow(self):
        img = to_rgb(textured()[:128, :128])
        f = estimate_flow_lk(img, img)
        assert f.valid.any()
        assert np.abs(np.hypot(f.u, f.v)[f.valid]).max() == 0.0

    def test_integer_shift_recovered(self):
        base = textured()
        A = base[6:134, 6:134]
        B = base[4:132, 3:131]  # content of A at x appears at x+(3,2) in B
        f = estimate_flow_lk(to_rgb(A), to_rgb(B))
        interior = np.zeros_like(f.valid)
        interior[20:-20, 20:-20] = True
        sel = f.valid & interior
        assert sel.sum() > 1000
        mean_u = f.u[sel].mean()
        mean_v = f.v[sel].mean()
        assert np.hypot(mean_u - 3.0, mean_v - 2.0) < 0.25

    def test_constant_images_all_invalid(self):
        img = np.full((64, 64, 3), 0.5)
        f = estimate_flow_lk(img, img)
        assert not f.valid.any()

    def test_size_mismatch(self):
        with pytest.raises(ValueError):
            estimate_flow_lk(np.zeros((32, 32, 3)), np.zeros((64, 64, 3)))


class TestOracleFlow:
    def _cam(self, res=96):
        return look_at((0, 0, 0.45), (0, 0, 0), fx=res, fy=res, cx=res / 2,
                       cy=res / 2, width=res, height=res)

    def test_identical_configurations_zero(self):
        cam = self._cam()
        fb = rasterize(MESH, cam, 96, 96)
        f = oracle_flow(fb, fb)
        assert f.valid.any()
        assert np.abs(np.hypot(f.u, f.v)[f.valid]).max() < 1e-9

    def test_one_pixel_camera_shift_uniform_flow(self):
        cam = self._cam()
        fb_ref = rasterize(MESH, cam, 96, 96)
        # shift the principal point by one pixel: every projection moves +1 in x
        cam2 = Camera(rotation=cam.rotation, translation=cam.translation,
                      fx=cam.fx, fy=cam.fy, cx=cam.cx + 1.0, cy=cam.cy,
                      width=cam.width, height=cam.height)
        fb_cur = rasterize(MESH, cam2, 96, 96)
        f = oracle_flow(fb_ref, fb_cur)
        sel = f.valid
        assert sel.any()
        assert np.abs(f.u[sel] - 1.0).max() < 1e-6
        assert np.abs(f.v[sel]).max() < 1e-6

    def test_uncovered_pixels_invalid(self):
        cam = self._cam()
        fb = rasterize(MESH, cam, 96, 96)
        f = oracle_flow(fb, fb)
        assert not f.valid[~fb.face_mask].any()


class TestMeanFlowMagnitude:
    def test_zero_flow(self):
        f = FlowField(np.zeros((4, 4)), np.zeros((4, 4)),
                      np.ones((4, 4), dtype=bool))
        value, count = mean_flow_magnitude(f)
        assert value == 0.0 and count == 16

    def test_three_four_five(self):
        f = FlowField(np.full((4, 4), 3.0), np.full((4, 4), 4.0),
                      np.ones((4, 4), dtype=bool))
        value, count = mean_flow_magnitude(f, np.ones((4, 4), dtype=bool))
        assert value == 5.0 and count == 16

    def test_matches_scalar_loop_oracle(self):
        rng = np.random.default_rng(0)
        u = rng.normal(size=(8, 8))
        v = rng.normal(size=(8, 8))
        valid = rng.random((8, 8)) > 0.3
        mask = rng.random((8, 8)) > 0.4
        f = FlowField(u, v, valid)
        value, count = mean_flow_magnitude(f, mask)
        total = 0.0
        n = 0
        for y in range(8):
            for x in range(8):
                if valid[y, x] and mask[y, x]:
                    total += np.sqrt(u[y, x] ** 2 + v[y, x] ** 2)
                    n += 1
        assert count == n
        assert abs(value - total / n) < 1e-12

    def test_empty_selection(self):
        f = FlowField(np.ones((4, 4)), np.ones((4, 4)),
                      np.zeros((4, 4), dtype=bool))
        value, count = mean_flow_magnitude(f)
        assert value == 0.0 and count == 0

    def test_shape_mismatch(self):
        f = FlowField(np.zeros((4, 4)), np.zeros((4, 4)),
                      np.ones((4, 4), dtype=bool))
        with pytest.raises(ValueError):
            mean_flow_magnitude(f, np.ones((8, 8), dtype=bool))

    def test_nonnegative_and_zero_iff(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            u = rng.normal(size=(6, 6)) * rng.integers(0, 2)
            v = rng.normal(size=(6, 6)) * 0
            valid = rng.random((6, 6)) > 0.5
            value, count = mean_flow_magnitude(FlowField(u, v, valid))
            assert value >= 0.0
            if count and np.abs(u[valid]).max() == 0.0:
                assert value == 0.0


def test_flow_to_color_shape_and_background():
    f = FlowField(np.ones((8, 8)), np.zeros((8, 8)),
                  np.tri(8, 8) > 0.5)
    img = flow_to_color(f)
    assert img.shape == (8, 8, 3)
    assert np.abs(img[~f.valid]).max() == 0.0
    assert img.min() >= 0.0 and img.max() <= 1.0
