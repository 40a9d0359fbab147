"""Multi-view head-model fitting toolkit.

Recovers blendshape/skinning head-model parameters, per-view pinhole cameras,
spherical-harmonics lighting, and a UV albedo from two or more face images by
direct minimization of a multi-view loss suite (optical-flow, landmark,
eye/lip offset, and regularization terms), using a hard z-buffer rasterizer
with coverage-frozen analytic gradients.
"""

from mvflame._kernels import BACKEND as KERNEL_BACKEND

__all__ = ["KERNEL_BACKEND"]
__version__ = "0.1.0"
