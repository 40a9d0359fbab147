"""Covisibility machinery: face mask MF, landmark box MB, covisible mask MC.

MC for an ordered view pair (a, b) lives in view b's image plane: the
bounding box of the landmarks visible from both views, intersected with the
rendered face mask of view b, optionally minus the mouth-interior polygon.
"""

from dataclasses import dataclass

import numpy as np

from mvflame.camera import project
from mvflame.decoder import embed_landmarks
from mvflame.renderer import FrameBuffer, sample_visibility


@dataclass
class BinaryMask:
    data: np.ndarray  # (H, W) bool
    source: str       # "MF" | "MB" | "MC"

    @property
    def shape(self):
        return self.data.shape


def face_mask(framebuffer: FrameBuffer) -> BinaryMask:
    """MF: pixels covered by any triangle."""
    return BinaryMask(framebuffer.triangle_id >= 0, "MF")


def _landmark_visibility(fb: FrameBuffer, points3d):
    """Depth-test landmark surface points against one view's z-buffer."""
    pix, z = project(fb.camera, points3d)
    return sample_visibility(fb, pix, z), pix


def covisible_landmarks(fb_a: FrameBuffer, fb_b: FrameBuffer, mesh,
                        lmk_faces, lmk_bary):
    """Indices of embedded landmarks visible in both views (a set, symmetric)."""
    points = embed_landmarks(mesh, lmk_faces, lmk_bary)
    vis_a, _ = _landmark_visibility(fb_a, points)
    vis_b, _ = _landmark_visibility(fb_b, points)
    return np.nonzero(vis_a & vis_b)[0]


def landmark_bbox_mask(points2d, image_size, margin: float = 0.05) -> BinaryMask:
    """MB: axis-aligned box around the points, dilated by margin * diagonal."""
    width, height = image_size
    data = np.zeros((height, width), dtype=bool)
    pts = np.asarray(points2d, dtype=np.float64).reshape(-1, 2)
    if pts.shape[0] == 0:
        return BinaryMask(data, "MB")
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    pad = margin * float(np.linalg.norm(hi - lo))
    x0 = max(0, int(np.floor(lo[0] - pad)))
    y0 = max(0, int(np.floor(lo[1] - pad)))
    x1 = min(width, int(np.ceil(hi[0] + pad)) + 1)
    y1 = min(height, int(np.ceil(hi[1] + pad)) + 1)
    if x0 < x1 and y0 < y1:
        data[y0:y1, x0:x1] = True
    return BinaryMask(data, "MB")


def covisible_mask(mb: BinaryMask, mf_b: BinaryMask) -> BinaryMask:
    """MC = MB (Hadamard) MF_b, pixelwise conjunction."""
    if mb.shape != mf_b.shape:
        raise ValueError(f"mask resolutions differ: {mb.shape} vs {mf_b.shape}")
    return BinaryMask(mb.data & mf_b.data, "MC")


def polygon_interior(points2d, height, width):
    """Even-odd fill of a closed polygon, sampled at pixel centers."""
    poly = np.asarray(points2d, dtype=np.float64)
    n = len(poly)
    xs = np.arange(width) + 0.5
    ys = np.arange(height) + 0.5
    px, py = np.meshgrid(xs, ys)
    inside = np.zeros((height, width), dtype=bool)
    for i in range(n):
        x1, y1 = poly[i]
        x2, y2 = poly[(i + 1) % n]
        if y1 == y2:
            continue
        crosses = (y1 > py) != (y2 > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = x1 + (py - y1) * (x2 - x1) / (y2 - y1)
        inside ^= crosses & (px < xint)
    return inside


def mouth_exclusion(mc: BinaryMask, lip_points2d):
    """Remove the mouth-interior polygon from MC.

    Returns (mask, ok); with a degenerate polygon (< 3 points) the mask is
    returned unchanged and ok is False.
    """
    pts = np.asarray(lip_points2d, dtype=np.float64).reshape(-1, 2)
    if len(pts) < 3:
        return BinaryMask(mc.data.copy(), mc.source), False
    h, w = mc.shape
    hole = polygon_interior(pts, h, w)
    return BinaryMask(mc.data & ~hole, mc.source), True
