"""Pinhole cameras: projection, analytic Jacobians, landmark-based init.

Convention: camera space is x right, y down, z forward (positive depth);
pixel origin is the top-left image corner, pixel centers at half-integers.
"""

import json
from dataclasses import dataclass

import numpy as np

from mvflame.decoder import rodrigues, rodrigues_vjp, rotation_to_axis_angle


class DegenerateConfiguration(ValueError):
    """Raised when correspondences cannot determine a camera."""


@dataclass(frozen=True)
class Camera:
    rotation: np.ndarray     # (3, 3) world -> camera
    translation: np.ndarray  # (3,)
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        if R.shape != (3, 3) or np.abs(R @ R.T - np.eye(3)).max() > 1e-9:
            raise ValueError("camera rotation is not orthonormal within 1e-9")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        R.setflags(write=False)
        t.setflags(write=False)

    @property
    def center(self):
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation

    def to_json_dict(self):
        return {
            "R": [float(v) for v in self.rotation.ravel()],
            "t": [float(v) for v in self.translation],
            "fx": float(self.fx), "fy": float(self.fy),
            "cx": float(self.cx), "cy": float(self.cy),
            "width": int(self.width), "height": int(self.height),
        }

    @classmethod
    def from_json_dict(cls, d):
        return cls(
            rotation=np.asarray(d["R"], dtype=np.float64).reshape(3, 3),
            translation=np.asarray(d["t"], dtype=np.float64),
            fx=float(d["fx"]), fy=float(d["fy"]),
            cx=float(d["cx"]), cy=float(d["cy"]),
            width=int(d["width"]), height=int(d["height"]),
        )

    def save_json(self, path):
        with open(path, "w", encoding="ascii") as fh:
            json.dump(self.to_json_dict(), fh, indent=1)
            fh.write("\n")

    @classmethod
    def load_json(cls, path):
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json_dict(json.load(fh))

    def scaled(self, factor):
        """Camera for an image resampled by `factor` in both dimensions."""
        return Camera(rotation=self.rotation, translation=self.translation,
                      fx=self.fx * factor, fy=self.fy * factor,
                      cx=self.cx * factor, cy=self.cy * factor,
                      width=int(round(self.width * factor)),
                      height=int(round(self.height * factor)))


def look_at(position, target, up=(0.0, 1.0, 0.0), *, fx, fy, cx, cy, width, height):
    """Camera at `position` looking at `target` (world y-up convention)."""
    position = np.asarray(position, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - position
    forward = forward / np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    nr = np.linalg.norm(right)
    if nr < 1e-12:
        raise ValueError("view direction parallel to the up vector")
    right /= nr
    down = np.cross(forward, right)
    R = np.stack([right, down, forward])
    return Camera(rotation=R, translation=-R @ position,
                  fx=fx, fy=fy, cx=cx, cy=cy, width=width, height=height)


def project(camera: Camera, points):
    """World points (N, 3) -> pixel coordinates (N, 2) plus view depths (N,).

    Depths <= 0 indicate points behind the camera; the caller decides how to
    treat the (meaningless) pixel coordinates of such points.
    """
    pts = np.asarray(points, dtype=np.float64)
    xc = pts @ camera.rotation.T + camera.translation
    z = xc[:, 2]
    safe_z = np.where(z != 0.0, z, 1.0)
    u = camera.fx * xc[:, 0] / safe_z + camera.cx
    v = camera.fy * xc[:, 1] / safe_z + camera.cy
    return np.stack([u, v], axis=1), z


def project_rt(rvec, tvec, intr, points, base_rotation=None):
    """Projection parameterized by extrinsics (axis-angle + translation).

    `intr` is (fx, fy, cx, cy).  With `base_rotation` given, the rotation is
    base @ rodrigues(rvec), i.e. rvec is a local delta; this keeps optimized
    rotations near zero, far from the axis-angle singularity.  Returns
    (pixels, depths, cache) where cache feeds project_rt_vjp.
    """
    R_delta = rodrigues(rvec)
    R = R_delta if base_rotation is None else base_rotation @ R_delta
    pts = np.asarray(points, dtype=np.float64)
    xc = pts @ R.T + tvec
    z = xc[:, 2]
    safe_z = np.where(z != 0.0, z, 1.0)
    fx, fy, cx, cy = intr
    u = fx * xc[:, 0] / safe_z + cx
    v = fy * xc[:, 1] / safe_z + cy
    cache = (R, pts, xc, safe_z, fx, fy, base_rotation)
    return np.stack([u, v], axis=1), z, cache


def project_rt_vjp(rvec, cache, d_pix):
    """Backprop pixel gradients (N, 2) to (d_points, d_rvec, d_tvec)."""
    R, pts, xc, z, fx, fy, base = cache
    du = d_pix[:, 0]
    dv = d_pix[:, 1]
    d_xc = np.empty_like(xc)
    d_xc[:, 0] = du * fx / z
    d_xc[:, 1] = dv * fy / z
    d_xc[:, 2] = -(du * fx * xc[:, 0] + dv * fy * xc[:, 1]) / (z * z)
    d_points = d_xc @ R
    d_t = d_xc.sum(axis=0)
    d_R = d_xc.T @ pts
    if base is not None:
        d_R = base.T @ d_R
    d_rvec = rodrigues_vjp(rvec, d_R)
    return d_points, d_rvec, d_t


def reprojection_rmse(camera: Camera, points3d, points2d):
    pix, _ = project(camera, points3d)
    return float(np.sqrt(np.mean(np.sum((pix - points2d) ** 2, axis=1))))


def estimate_initial_camera(landmarks2d, landmarks3d, image_size,
                            refine_iters=20):
    """Fit a pinhole camera to 2D/3D correspondences.

    Solves a scaled-orthographic (POS) problem in closed form, lifts it to a
    pinhole camera with focal max(width, height), then runs a few damped
    Gauss-Newton steps on the full reprojection.  Returns (Camera, rmse_px).
    """
    l2d = np.asarray(landmarks2d, dtype=np.float64)
    l3d = np.asarray(landmarks3d, dtype=np.float64)
    if len(l2d) != len(l3d) or len(l2d) < 4:
        raise DegenerateConfiguration("need at least 4 correspondences")
    width, height = image_size
    f = float(max(width, height))
    cx, cy = width / 2.0, height / 2.0

    mean3d = l3d.mean(axis=0)
    centered = l3d - mean3d
    svals = np.linalg.svd(centered, compute_uv=False)
    if svals[1] <= 1e-8 * max(svals[0], 1e-30):
        raise DegenerateConfiguration("3D correspondences are (near-)collinear")

    mean2d = l2d.mean(axis=0)
    rhs = l2d - mean2d
    sol, *_ = np.linalg.lstsq(centered, rhs, rcond=None)
    I_vec, J_vec = sol[:, 0], sol[:, 1]
    ni, nj = np.linalg.norm(I_vec), np.linalg.norm(J_vec)
    if ni < 1e-12 or nj < 1e-12:
        raise DegenerateConfiguration("projection rows collapsed; bad correspondences")
    scale = (ni + nj) / 2.0

    r1, r2 = I_vec / ni, J_vec / nj
    M = np.stack([r1, r2, np.cross(r1, r2)])
    U, _, Vt = np.linalg.svd(M)
    R = U @ np.diag([1.0, 1.0, np.linalg.det(U @ Vt)]) @ Vt

    # Lift: weak perspective with scale s corresponds to depth f/s; the fit
    # was on centered data, so fold the 3D mean back into the translation.
    rvec = rotation_to_axis_angle(R)
    tvec = np.array([(mean2d[0] - cx) / scale,
                     (mean2d[1] - cy) / scale,
                     f / scale]) - R @ mean3d

    intr = (f, f, cx, cy)
    lam = 1e-6
    for _ in range(refine_iters):
        pix, z, cache = project_rt(rvec, tvec, intr, l3d)
        if (z <= 0).any():
            break
        resid = (pix - l2d).ravel()
        jac = _reproj_jacobian(rvec, tvec, intr, l3d)
        H = jac.T @ jac + lam * np.eye(6)
        step = np.linalg.solve(H, jac.T @ resid)
        rvec = rvec - step[:3]
        tvec = tvec - step[3:]
    cam = Camera(rotation=rodrigues(rvec), translation=tvec,
                 fx=f, fy=f, cx=cx, cy=cy, width=int(width), height=int(height))
    _, z = project(cam, l3d)
    if (z <= 0).any():
        raise DegenerateConfiguration("estimated camera places landmarks behind it")
    return cam, reprojection_rmse(cam, l3d, l2d)


def _reproj_jacobian(rvec, tvec, intr, points):
    """d(residual)/d(rvec, tvec) for the Gauss-Newton refinement, (2N, 6).

    Forward differences are plenty for an initializer; the fit-time loss
    gradients use the analytic VJPs instead.
    """
    n = len(points)
    jac = np.zeros((2 * n, 6))
    eye = np.eye(6)
    base_pix, _, _ = project_rt(rvec, tvec, intr, points)
    h = 1e-7
    for col in range(6):
        pix, _, _ = project_rt(rvec + h * eye[col, :3], tvec + h * eye[col, 3:],
                               intr, points)
        jac[:, col] = (pix - base_pix).ravel() / h
    return jac
