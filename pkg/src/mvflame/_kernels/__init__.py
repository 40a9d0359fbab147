"""Rasterization kernel selection: compiled Cython core with a numpy fallback.

Both backends implement the same per-pixel arithmetic in the same order, so
their outputs are bit-identical.  Set ``MVFLAME_PURE_PYTHON=1`` to force the
fallback (useful for benchmarking and debugging).
"""

import os

if os.environ.get("MVFLAME_PURE_PYTHON", "") not in ("", "0"):
    from . import _raster_np as _impl

    BACKEND = "numpy"
else:
    try:
        from . import _raster_cy as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        from . import _raster_np as _impl  # type: ignore[no-redef]

        BACKEND = "numpy"

rasterize_triangles = _impl.rasterize_triangles


def available_backends():
    """Names of the kernel backends importable in this environment."""
    names = ["numpy"]
    try:
        from . import _raster_cy  # noqa: F401

        names.insert(0, "cython")
    except ImportError:
        pass
    return names


def get_backend(name):
    """Return the ``rasterize_triangles`` callable for a named backend."""
    if name == "numpy":
        from . import _raster_np

        return _raster_np.rasterize_triangles
    if name == "cython":
        from . import _raster_cy

        return _raster_cy.rasterize_triangles
    raise ValueError(f"unknown kernel backend {name!r}")
