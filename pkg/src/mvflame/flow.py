"""Dense optical flow between an input image and a cross-rendered image.

The built-in estimator is coarse-to-fine pyramidal Lucas-Kanade on luma; any
callable with the same signature can replace it (the loss machinery is
estimator-agnostic).  A rasterizer-correspondence oracle provides exact flow
for synthetic tests.

Sign convention: flow f anchored at pixels of the first image, so content at
x in image A appears at x + f(x) in image B.
"""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from mvflame.camera import project
from mvflame.renderer import FrameBuffer

LUMA = np.array([0.299, 0.587, 0.114])  # Rec. 601


@dataclass
class FlowField:
    u: np.ndarray      # (H, W) x-displacement
    v: np.ndarray      # (H, W) y-displacement
    valid: np.ndarray  # (H, W) bool

    @property
    def shape(self):
        return self.u.shape

    def magnitude(self):
        return np.sqrt(self.u**2 + self.v**2)


def _to_luma(image):
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        return image
    return image @ LUMA


def _downsample(image):
    return ndimage.gaussian_filter(image, sigma=1.0, mode="nearest")[::2, ::2]


def _upsample_flow(flow, shape):
    zy = shape[0] / flow.shape[0]
    zx = shape[1] / flow.shape[1]
    out = ndimage.zoom(flow, (zy, zx), order=1, mode="nearest", grid_mode=True)
    return out[: shape[0], : shape[1]]


def estimate_flow_lk(image_a, image_b, levels: int = 3, window: int = 11,
                     iters: int = 3, tau: float = 1e-7) -> FlowField:
    """Coarse-to-fine pyramidal Lucas-Kanade flow from image_a to image_b.

    Pixels whose windowed structure tensor has a (area-normalized) smallest
    eigenvalue below `tau` are marked invalid; so are pixels whose final
    correspondence leaves the image.
    """
    A = _to_luma(image_a)
    B = _to_luma(image_b)
    if A.shape != B.shape:
        raise ValueError(f"image sizes differ: {A.shape} vs {B.shape}")
    pyr_a, pyr_b = [A], [B]
    for _ in range(1, levels):
        if min(pyr_a[-1].shape) < 2 * window:
            break
        pyr_a.append(_downsample(pyr_a[-1]))
        pyr_b.append(_downsample(pyr_b[-1]))

    u = np.zeros_like(pyr_a[-1])
    v = np.zeros_like(pyr_a[-1])
    ok = np.zeros(pyr_a[-1].shape, dtype=bool)
    win_area = float(window * window)
    for level in range(len(pyr_a) - 1, -1, -1):
        a = pyr_a[level]
        b = pyr_b[level]
        if a.shape != u.shape:
            u = _upsample_flow(u, a.shape) * 2.0
            v = _upsample_flow(v, a.shape) * 2.0
        h, w = a.shape
        gy, gx = np.mgrid[0:h, 0:w].astype(np.float64)
        for _ in range(iters):
            coords = np.stack([gy + v, gx + u])
            bw = ndimage.map_coordinates(b, coords, order=1, mode="nearest")
            ix = np.gradient(bw, axis=1)
            iy = np.gradient(bw, axis=0)
            it = bw - a
            sxx = ndimage.uniform_filter(ix * ix, window, mode="nearest") * win_area
            sxy = ndimage.uniform_filter(ix * iy, window, mode="nearest") * win_area
            syy = ndimage.uniform_filter(iy * iy, window, mode="nearest") * win_area
            sxt = ndimage.uniform_filter(ix * it, window, mode="nearest") * win_area
            syt = ndimage.uniform_filter(iy * it, window, mode="nearest") * win_area
            half_tr = (sxx + syy) / 2.0
            lam_min = half_tr - np.sqrt(((sxx - syy) / 2.0) ** 2 + sxy**2)
            ok = lam_min / win_area > tau
            det = sxx * syy - sxy * sxy
            safe_det = np.where(ok, det, 1.0)
            du = -(syy * sxt - sxy * syt) / safe_det
            dv = -(sxx * syt - sxy * sxt) / safe_det
            u = np.where(ok, u + du, u)
            v = np.where(ok, v + dv, v)
    h, w = A.shape
    gy, gx = np.mgrid[0:h, 0:w].astype(np.float64)
    inb = ((gx + u >= 0) & (gx + u <= w - 1) & (gy + v >= 0) & (gy + v <= h - 1))
    return FlowField(u=u, v=v, valid=ok & inb)


def oracle_flow(fb_reference: FrameBuffer, fb_current: FrameBuffer) -> FlowField:
    """Exact flow from known rasterizer correspondences (same mesh topology).

    Anchored at covered pixels of the current render: the flow vector is the
    displacement from the surface point's projection in the reference
    configuration to its current pixel, i.e. reference + flow = current.
    """
    h, w = fb_current.height, fb_current.width
    u = np.zeros((h, w))
    v = np.zeros((h, w))
    valid = fb_current.triangle_id >= 0
    ys, xs = np.nonzero(valid)
    if ys.size:
        tri = fb_current.faces[fb_current.triangle_id[ys, xs]]
        bary = fb_current.barycentric[ys, xs]
        ref_points = np.einsum("nc,ncj->nj", bary, fb_reference.vertices[tri])
        ref_pix, ref_z = project(fb_reference.camera, ref_points)
        centers = np.stack([xs + 0.5, ys + 0.5], axis=1)
        disp = centers - ref_pix
        u[ys, xs] = disp[:, 0]
        v[ys, xs] = disp[:, 1]
        valid[ys, xs] &= ref_z > 0
    return FlowField(u=u, v=v, valid=valid)


def mean_flow_magnitude(flow: FlowField, mask=None):
    """Mean flow magnitude over valid (and optionally masked) pixels.

    Returns (value, count); an empty selection yields (0.0, 0).
    """
    select = flow.valid
    if mask is not None:
        data = mask if isinstance(mask, np.ndarray) else np.asarray(mask.data)
        if data.shape != flow.shape:
            raise ValueError(f"mask shape {data.shape} != flow {flow.shape}")
        select = select & data
    count = int(select.sum())
    if count == 0:
        return 0.0, 0
    mag = np.sqrt(flow.u[select] ** 2 + flow.v[select] ** 2)
    return float(mag.mean()), count


class OracleEstimator:
    """Ground-truth flow from rasterizer correspondences (for tests).

    Plugs into the fitter's estimator slot: it ignores the pixel data and
    compares the current framebuffer of the target view against a frozen
    reference framebuffer of the same view.
    """

    anchor = "render"
    wants_framebuffers = True

    def __init__(self, reference_framebuffers):
        self.reference = list(reference_framebuffers)

    def __call__(self, image_a, image_b, fb_current=None, view=None):
        if fb_current is None or view is None:
            raise ValueError("oracle estimator needs framebuffer context")
        return oracle_flow(self.reference[view], fb_current)


# ---------------------------------------------------------------------------
# debug visualization (Middlebury-style color wheel)

def _make_color_wheel():
    ry, yg, gc, cb, bm, mr = 15, 6, 4, 11, 13, 6
    cols = np.zeros((ry + yg + gc + cb + bm + mr, 3))
    col = 0
    cols[0:ry, 0] = 255
    cols[0:ry, 1] = np.floor(255 * np.arange(ry) / ry)
    col += ry
    cols[col:col + yg, 0] = 255 - np.floor(255 * np.arange(yg) / yg)
    cols[col:col + yg, 1] = 255
    col += yg
    cols[col:col + gc, 1] = 255
    cols[col:col + gc, 2] = np.floor(255 * np.arange(gc) / gc)
    col += gc
    cols[col:col + cb, 1] = 255 - np.floor(255 * np.arange(cb) / cb)
    cols[col:col + cb, 2] = 255
    col += cb
    cols[col:col + bm, 2] = 255
    cols[col:col + bm, 0] = np.floor(255 * np.arange(bm) / bm)
    col += bm
    cols[col:col + mr, 2] = 255 - np.floor(255 * np.arange(mr) / mr)
    cols[col:col + mr, 0] = 255
    return cols / 255.0


_COLOR_WHEEL = _make_color_wheel()


def flow_to_color(flow: FlowField, max_magnitude=None):
    """Map a flow field to the standard direction-hue/magnitude-saturation image."""
    u = np.where(flow.valid, flow.u, 0.0)
    v = np.where(flow.valid, flow.v, 0.0)
    mag = np.sqrt(u * u + v * v)
    if max_magnitude is None:
        max_magnitude = max(mag.max(), 1e-9)
    u = u / max_magnitude
    v = v / max_magnitude
    mag = np.minimum(mag / max_magnitude, 1.0)
    angle = np.arctan2(-v, -u) / np.pi  # [-1, 1]
    n = len(_COLOR_WHEEL)
    fk = (angle + 1.0) / 2.0 * (n - 1)
    k0 = np.floor(fk).astype(int) % n
    k1 = (k0 + 1) % n
    f = (fk - np.floor(fk))[..., None]
    col = (1 - f) * _COLOR_WHEEL[k0] + f * _COLOR_WHEEL[k1]
    col = 1.0 - mag[..., None] * (1.0 - col)
    col[~flow.valid] = 0.0
    return col
