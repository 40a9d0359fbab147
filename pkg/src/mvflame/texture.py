"""UV texture extraction, inpainting, multi-view fusion, face masking.

Textures are square (T, T, 3) float arrays with a per-texel validity flag
recording whether the texel was actually observed in an input image.
"""

from dataclasses import dataclass

import numpy as np

from mvflame.camera import Camera, project
from mvflame.renderer import (FrameBuffer, UVFrameBuffer, bilinear_sample,
                              rasterize_uv, sample_visibility)


@dataclass
class UVTexture:
    data: np.ndarray      # (T, T, 3) in [0, 1]
    validity: np.ndarray  # (T, T) bool

    @property
    def resolution(self):
        return self.data.shape[0]

    def copy(self):
        return UVTexture(self.data.copy(), self.validity.copy())


@dataclass
class UVCorrespondence:
    """Per-texel image coordinates of the texel's surface point in one view."""

    image_xy: np.ndarray  # (T, T, 2)
    valid: np.ndarray     # (T, T) bool


def build_uv_correspondence(framebuffer: FrameBuffer, mesh, camera: Camera,
                            resolution: int = 64,
                            uv_buffer: UVFrameBuffer = None) -> UVCorrespondence:
    """Map UV texels to image coordinates where their surface point is visible.

    A texel is valid when its surface point projects inside the image with
    positive depth, its bilinear sampling footprint is fully covered, and it
    passes the (interpolated) z-buffer visibility test within DEPTH_EPS.
    """
    if uv_buffer is None:
        uv_buffer = rasterize_uv(mesh, resolution)
    T = uv_buffer.mask.shape[0]
    image_xy = np.zeros((T, T, 2))
    valid = np.zeros((T, T), dtype=bool)
    ys, xs = np.nonzero(uv_buffer.mask)
    if ys.size == 0:
        return UVCorrespondence(image_xy, valid)
    points = uv_buffer.position[ys, xs]
    pix, z = project(camera, points)
    visible = sample_visibility(framebuffer, pix, z)
    image_xy[ys, xs] = pix
    valid[ys, xs] = visible
    return UVCorrespondence(image_xy, valid)


def extract_texture(image, correspondence: UVCorrespondence) -> UVTexture:
    """Bilinearly sample the input image at every valid texel."""
    image = np.asarray(image, dtype=np.float64)
    T = correspondence.valid.shape[0]
    data = np.zeros((T, T, 3))
    validity = correspondence.valid.copy()
    ys, xs = np.nonzero(validity)
    if ys.size:
        xy = correspondence.image_xy[ys, xs]
        H, W = image.shape[:2]
        inside = ((xy[:, 0] >= 0) & (xy[:, 0] <= W)
                  & (xy[:, 1] >= 0) & (xy[:, 1] <= H))
        vals, _ = bilinear_sample(image, xy)
        data[ys, xs] = np.where(inside[:, None], vals, 0.0)
        validity[ys[~inside], xs[~inside]] = False
    return UVTexture(data, validity)


def inpaint_bilinear(texture: UVTexture, region=None, tol=1e-4,
                     max_iters=20000) -> UVTexture:
    """Fill unobserved texels by iterated 4-neighbor averaging.

    Only texels inside `region` (default: everywhere) are filled; observed
    texels are never touched and validity flags are preserved.  Iteration
    stops when the largest per-texel change drops below `tol`.
    """
    data = texture.data.copy()
    known = texture.validity.copy()
    H, W = data.shape[:2]
    if region is None:
        region = np.ones((H, W), dtype=bool)
    fill = region & ~known
    if not fill.any():
        return UVTexture(data, texture.validity.copy())

    # Unknowns join the relaxation; texels outside region stay out entirely.
    active = known | fill
    ys, xs = np.nonzero(known)
    init = data[ys, xs].mean(axis=0) if ys.size else np.zeros(3)
    data[fill] = init

    padded = np.zeros((H + 2, W + 2, 3))
    pactive = np.zeros((H + 2, W + 2), dtype=bool)
    pactive[1:-1, 1:-1] = active
    nbr_count = (pactive[:-2, 1:-1].astype(np.float64)
                 + pactive[2:, 1:-1] + pactive[1:-1, :-2] + pactive[1:-1, 2:])
    fill_idx = fill & (nbr_count > 0)
    for _ in range(max_iters):
        padded[1:-1, 1:-1] = np.where(pactive[1:-1, 1:-1, None], data, 0.0)
        nbr_sum = (padded[:-2, 1:-1] + padded[2:, 1:-1]
                   + padded[1:-1, :-2] + padded[1:-1, 2:])
        new = nbr_sum[fill_idx] / nbr_count[fill_idx][:, None]
        change = np.abs(new - data[fill_idx]).max() if new.size else 0.0
        data[fill_idx] = new
        if change < tol:
            break
    return UVTexture(data, texture.validity.copy())


def fuse_views(textures, weights) -> UVTexture:
    """Per-texel weighted average of the views where a texel was observed.

    `weights` is a list of (T, T) arrays, one per view.  A texel is valid in
    the fusion when any view observed it; if all observing views carry zero
    weight there, they are averaged uniformly instead.
    """
    if not textures:
        raise ValueError("fuse_views needs at least one texture")
    T = textures[0].resolution
    for t in textures:
        if t.resolution != T:
            raise ValueError("texture resolutions differ")
    acc = np.zeros((T, T, 3))
    wacc = np.zeros((T, T))
    any_valid = np.zeros((T, T), dtype=bool)
    vsum = np.zeros((T, T, 3))
    vcount = np.zeros((T, T))
    for tex, w in zip(textures, weights):
        w = np.asarray(w, dtype=np.float64) * tex.validity
        acc += w[:, :, None] * tex.data
        wacc += w
        any_valid |= tex.validity
        vsum += tex.validity[:, :, None] * tex.data
        vcount += tex.validity
    out = np.zeros((T, T, 3))
    pos = wacc > 0
    out[pos] = acc[pos] / wacc[pos, None]
    fallback = any_valid & ~pos
    out[fallback] = vsum[fallback] / vcount[fallback, None]
    return UVTexture(out, any_valid)


def view_cosine_weights(uv_buffer: UVFrameBuffer, camera: Camera):
    """Fusion weights: clamped cosine between surface normal and view ray."""
    to_cam = camera.center[None, None, :] - uv_buffer.position
    norm = np.linalg.norm(to_cam, axis=2, keepdims=True)
    to_cam = to_cam / np.maximum(norm, 1e-30)
    cosine = np.einsum("hwj,hwj->hw", uv_buffer.normal, to_cam)
    return np.clip(cosine, 0.0, None) * uv_buffer.mask


def apply_face_mask(texture: UVTexture, face_mask_uv) -> UVTexture:
    """Hadamard mask: I_uv = M_face * I'_uv; masked-out texels become invalid."""
    mask = np.asarray(face_mask_uv)
    if mask.shape != texture.validity.shape:
        raise ValueError(
            f"mask resolution {mask.shape} != texture {texture.validity.shape}"
        )
    mb = mask.astype(bool)
    return UVTexture(texture.data * mb[:, :, None], texture.validity & mb)


def face_mask_for(assets, resolution: int):
    """UV-space face mask at the requested resolution.

    Uses the asset-provided mask (nearest resampling) when present, else the
    UV atlas coverage.
    """
    if assets.uv_face_mask is not None:
        src = assets.uv_face_mask
        S = src.shape[0]
        idx = np.minimum((np.arange(resolution) + 0.5) * S // resolution, S - 1)
        idx = idx.astype(np.int64)
        return src[np.ix_(idx, idx)] > 0.5
    xy = assets.uv_coords[assets.uv_faces] * float(resolution)
    from mvflame._kernels import rasterize_triangles

    tid, _, _ = rasterize_triangles(
        xy, np.ones(xy.shape[:2]), np.ones(len(xy), dtype=np.uint8),
        resolution, resolution, 0,
    )
    return tid >= 0
