"""Pure-numpy z-buffer triangle rasterizer (fallback backend).

Triangles are processed in index order and vectorized over their pixel
bounding boxes.  The per-pixel expressions mirror the Cython kernel exactly
(same operations, same order) so both backends produce bit-identical buffers.
"""

import math

import numpy as np


def rasterize_triangles(xy, z, valid, height, width, cull_sign):
    """Z-buffered triangle fill sampled at pixel centers.

    Parameters
    ----------
    xy : (F, 3, 2) float64
        Projected vertex positions in pixel units (origin top-left).
    z : (F, 3) float64
        Per-vertex positive view depths (perspective weights).
    valid : (F,) uint8
        Triangles to consider at all.
    height, width : int
        Raster size.
    cull_sign : int
        0 keeps every triangle, +1 keeps D > 0, -1 keeps D < 0, where D is
        twice the signed pixel-space area.

    Returns
    -------
    tid : (H, W) int32, -1 where empty
    bary : (H, W, 3) float64, perspective-correct barycentric coordinates
    depth : (H, W) float64, +inf where empty
    """
    xy = np.ascontiguousarray(xy, dtype=np.float64)
    z = np.ascontiguousarray(z, dtype=np.float64)
    valid = np.ascontiguousarray(valid, dtype=np.uint8)
    n_faces = xy.shape[0]

    tid = np.full((height, width), -1, dtype=np.int32)
    bary = np.zeros((height, width, 3), dtype=np.float64)
    depth = np.full((height, width), np.inf, dtype=np.float64)

    for f in range(n_faces):
        if not valid[f]:
            continue
        q = xy[f]
        x0, y0 = q[0]
        x1, y1 = q[1]
        x2, y2 = q[2]
        # Twice the signed area; orientation test for culling.
        area = (x1 - x0) * (y2 - y0) - (y1 - y0) * (x2 - x0)
        if area == 0.0:
            continue
        if cull_sign > 0 and area <= 0.0:
            continue
        if cull_sign < 0 and area >= 0.0:
            continue

        ix0 = max(0, int(math.ceil(min(x0, x1, x2) - 0.5)))
        ix1 = min(width - 1, int(math.floor(max(x0, x1, x2) - 0.5)))
        iy0 = max(0, int(math.ceil(min(y0, y1, y2) - 0.5)))
        iy1 = min(height - 1, int(math.floor(max(y0, y1, y2) - 0.5)))
        if ix0 > ix1 or iy0 > iy1:
            continue

        px = np.arange(ix0, ix1 + 1, dtype=np.float64) + 0.5
        py = np.arange(iy0, iy1 + 1, dtype=np.float64) + 0.5
        pxg, pyg = np.meshgrid(px, py)

        # Edge functions; w0 + w1 + w2 == area up to rounding.
        w0 = (x1 - pxg) * (y2 - pyg) - (y1 - pyg) * (x2 - pxg)
        w1 = (x2 - pxg) * (y0 - pyg) - (y2 - pyg) * (x0 - pxg)
        w2 = (x0 - pxg) * (y1 - pyg) - (y0 - pyg) * (x1 - pxg)

        if area > 0.0:
            inside = (w0 >= 0.0) & (w1 >= 0.0) & (w2 >= 0.0)
        else:
            inside = (w0 <= 0.0) & (w1 <= 0.0) & (w2 <= 0.0)
        if not inside.any():
            continue

        z0, z1, z2 = z[f]
        r0 = w0 / z0
        r1 = w1 / z1
        r2 = w2 / z2
        s = r0 + r1 + r2
        zpix = np.where(s != 0.0, area / np.where(s != 0.0, s, 1.0), np.inf)

        sub = (slice(iy0, iy1 + 1), slice(ix0, ix1 + 1))
        win = inside & (zpix > 0.0) & (zpix < depth[sub])
        if not win.any():
            continue

        depth[sub] = np.where(win, zpix, depth[sub])
        tid[sub] = np.where(win, np.int32(f), tid[sub])
        b0 = r0 / s
        b1 = r1 / s
        b2 = r2 / s
        bary_sub = bary[sub]
        bary_sub[..., 0] = np.where(win, b0, bary_sub[..., 0])
        bary_sub[..., 1] = np.where(win, b1, bary_sub[..., 1])
        bary_sub[..., 2] = np.where(win, b2, bary_sub[..., 2])

    return tid, bary, depth
