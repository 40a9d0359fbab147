# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled z-buffer triangle rasterizer (hot-loop backend).

Mirrors ``_raster_np.rasterize_triangles`` operation for operation so the two
backends produce bit-identical buffers.
"""

from libc.math cimport ceil, floor, INFINITY

import numpy as np

cimport numpy as cnp

cnp.import_array()


def rasterize_triangles(xy, z, valid, int height, int width, int cull_sign):
    """Z-buffered triangle fill sampled at pixel centers.

    See ``mvflame._kernels._raster_np.rasterize_triangles`` for the contract.
    """
    cdef cnp.ndarray[cnp.float64_t, ndim=3] xy_c = np.ascontiguousarray(xy, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] z_c = np.ascontiguousarray(z, dtype=np.float64)
    cdef cnp.ndarray[cnp.uint8_t, ndim=1] valid_c = np.ascontiguousarray(valid, dtype=np.uint8)

    cdef int n_faces = xy_c.shape[0]
    cdef cnp.ndarray[cnp.int32_t, ndim=2] tid = np.full((height, width), -1, dtype=np.int32)
    cdef cnp.ndarray[cnp.float64_t, ndim=3] bary = np.zeros((height, width, 3), dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] depth = np.full((height, width), np.inf, dtype=np.float64)

    cdef int f, ix, iy, ix0, ix1, iy0, iy1
    cdef double x0, y0, x1, y1, x2, y2, z0, z1, z2
    cdef double area, minx, maxx, miny, maxy
    cdef double px, py, w0, w1, w2, r0, r1, r2, s, zpix
    cdef bint inside

    for f in range(n_faces):
        if not valid_c[f]:
            continue
        x0 = xy_c[f, 0, 0]; y0 = xy_c[f, 0, 1]
        x1 = xy_c[f, 1, 0]; y1 = xy_c[f, 1, 1]
        x2 = xy_c[f, 2, 0]; y2 = xy_c[f, 2, 1]
        area = (x1 - x0) * (y2 - y0) - (y1 - y0) * (x2 - x0)
        if area == 0.0:
            continue
        if cull_sign > 0 and area <= 0.0:
            continue
        if cull_sign < 0 and area >= 0.0:
            continue

        minx = min(x0, min(x1, x2)); maxx = max(x0, max(x1, x2))
        miny = min(y0, min(y1, y2)); maxy = max(y0, max(y1, y2))
        ix0 = int(ceil(minx - 0.5)); ix1 = int(floor(maxx - 0.5))
        iy0 = int(ceil(miny - 0.5)); iy1 = int(floor(maxy - 0.5))
        if ix0 < 0: ix0 = 0
        if iy0 < 0: iy0 = 0
        if ix1 > width - 1: ix1 = width - 1
        if iy1 > height - 1: iy1 = height - 1
        if ix0 > ix1 or iy0 > iy1:
            continue

        z0 = z_c[f, 0]; z1 = z_c[f, 1]; z2 = z_c[f, 2]

        for iy in range(iy0, iy1 + 1):
            py = iy + 0.5
            for ix in range(ix0, ix1 + 1):
                px = ix + 0.5
                w0 = (x1 - px) * (y2 - py) - (y1 - py) * (x2 - px)
                w1 = (x2 - px) * (y0 - py) - (y2 - py) * (x0 - px)
                w2 = (x0 - px) * (y1 - py) - (y0 - py) * (x1 - px)
                if area > 0.0:
                    inside = w0 >= 0.0 and w1 >= 0.0 and w2 >= 0.0
                else:
                    inside = w0 <= 0.0 and w1 <= 0.0 and w2 <= 0.0
                if not inside:
                    continue
                r0 = w0 / z0
                r1 = w1 / z1
                r2 = w2 / z2
                s = r0 + r1 + r2
                if s == 0.0:
                    continue
                zpix = area / s
                if zpix <= 0.0 or zpix >= depth[iy, ix]:
                    continue
                depth[iy, ix] = zpix
                tid[iy, ix] = f
                bary[iy, ix, 0] = r0 / s
                bary[iy, ix, 1] = r1 / s
                bary[iy, ix, 2] = r2 / s

    return tid, bary, depth
