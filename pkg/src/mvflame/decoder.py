"""Blendshape head-model decoder: shape/expression/pose to a posed mesh.

The decode pipeline is

    shaped   = template + shape_basis . beta + expr_basis . psi
    joints   = joint_regressor @ shaped
    corrected = shaped + pose_basis . vec(R_k - I), k > 0
    posed    = linear blend skinning (joint-centered rigid transforms,
               accumulated root-to-leaf)

plus area-weighted vertex normals and barycentric landmark extraction.  Every
stage has a matching vector-Jacobian product so gradients can flow from posed
vertices back to (beta, psi, theta) without numeric differentiation.
"""

from dataclasses import dataclass

import numpy as np


class DimensionError(ValueError):
    """Parameter/asset dimension mismatch."""


@dataclass(frozen=True)
class FlameParams:
    """Model parameters: shape beta, per-joint axis-angle theta, expression psi."""

    beta: np.ndarray
    theta: np.ndarray
    psi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "beta", np.asarray(self.beta, dtype=np.float64))
        object.__setattr__(self, "theta", np.asarray(self.theta, dtype=np.float64))
        object.__setattr__(self, "psi", np.asarray(self.psi, dtype=np.float64))
        if self.theta.ndim != 2 or self.theta.shape[1] != 3:
            raise DimensionError(f"theta must be (K, 3), got {self.theta.shape}")
        if not (np.isfinite(self.beta).all() and np.isfinite(self.theta).all()
                and np.isfinite(self.psi).all()):
            raise ValueError("non-finite model parameters")

    @classmethod
    def zeros(cls, assets):
        return cls(beta=np.zeros(assets.n_beta),
                   theta=np.zeros((assets.n_joints, 3)),
                   psi=np.zeros(assets.n_psi))


@dataclass
class PosedMesh:
    """Decoded surface: posed vertices plus unit vertex normals.

    faces / uv arrays are shared by reference with the source assets.
    """

    vertices: np.ndarray
    vertex_normals: np.ndarray
    faces: np.ndarray
    uv_coords: np.ndarray
    uv_faces: np.ndarray


# ---------------------------------------------------------------------------
# rotations

def rodrigues(axis_angle):
    """Axis-angle (3,) to rotation matrix; zero vector maps to identity."""
    r = np.asarray(axis_angle, dtype=np.float64)
    angle = np.linalg.norm(r)
    if angle < 1e-12:
        K = _skew(r)
        return np.eye(3) + K  # first-order term; exact at 0
    axis = r / angle
    K = _skew(axis)
    return np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)


def _skew(v):
    return np.array([[0.0, -v[2], v[1]],
                     [v[2], 0.0, -v[0]],
                     [-v[1], v[0], 0.0]])


def rodrigues_jacobian(axis_angle):
    """dR/dr as a (3, 3, 3) array: J[i] = dR/dr_i (Gallego-Yezzi closed form)."""
    r = np.asarray(axis_angle, dtype=np.float64)
    angle2 = float(r @ r)
    J = np.empty((3, 3, 3))
    if angle2 < 1e-16:
        for i in range(3):
            e = np.zeros(3)
            e[i] = 1.0
            J[i] = _skew(e)
        return J
    R = rodrigues(r)
    for i in range(3):
        e = np.zeros(3)
        e[i] = 1.0
        v = np.cross(r, (np.eye(3) - R) @ e)
        J[i] = (r[i] * _skew(r) + _skew(v)) @ R / angle2
    return J


def rodrigues_vjp(axis_angle, d_rotation):
    """Pull a gradient on the rotation matrix back to the axis-angle vector."""
    J = rodrigues_jacobian(axis_angle)
    return np.einsum("ijk,jk->i", J, d_rotation)


def rotation_to_axis_angle(R):
    """Log map for rotations with angle < pi."""
    R = np.asarray(R, dtype=np.float64)
    cos_a = (np.trace(R) - 1.0) / 2.0
    cos_a = min(1.0, max(-1.0, cos_a))
    angle = np.arccos(cos_a)
    if angle < 1e-10:
        return np.zeros(3)
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if np.pi - angle < 1e-6:
        # Near half-turn: extract the axis from the symmetric part.
        M = (R + np.eye(3)) / 2.0
        axis = np.sqrt(np.clip(np.diag(M), 0.0, None))
        signs = np.sign(w) if np.abs(w).max() > 1e-12 else np.ones(3)
        axis = axis * np.where(signs == 0, 1.0, signs)
        axis /= np.linalg.norm(axis)
        return axis * angle
    return w / (2.0 * np.sin(angle)) * angle


# ---------------------------------------------------------------------------
# decode stages

def shaped_template(assets, beta, psi):
    """Template plus linear shape and expression blendshape offsets."""
    beta = np.asarray(beta, dtype=np.float64)
    psi = np.asarray(psi, dtype=np.float64)
    if beta.shape != (assets.n_beta,):
        raise DimensionError(f"beta has shape {beta.shape}, expected ({assets.n_beta},)")
    if psi.shape != (assets.n_psi,):
        raise DimensionError(f"psi has shape {psi.shape}, expected ({assets.n_psi},)")
    return (assets.template
            + assets.shape_basis @ beta
            + assets.expr_basis @ psi)


def pose_feature(assets, rotations):
    """Flattened (R_k - I) for non-root joints; the root block stays zero."""
    K = assets.n_joints
    feat = np.zeros(9 * K)
    for k in range(1, K):
        feat[9 * k:9 * k + 9] = (rotations[k] - np.eye(3)).ravel()
    return feat


def pose_correctives(assets, theta):
    """Pose-dependent blendshape displacement; zero at identity pose."""
    theta = np.asarray(theta, dtype=np.float64)
    rotations = np.stack([rodrigues(theta[k]) for k in range(assets.n_joints)])
    return assets.pose_basis @ pose_feature(assets, rotations)


def regress_joints(assets, shaped_vertices):
    """Joint locations as convex combinations of shaped vertices."""
    return assets.joint_regressor @ shaped_vertices


def _world_transforms(joints, rotations, parents):
    """Accumulate per-joint world transforms along the kinematic tree."""
    K = len(parents)
    G_R = np.empty((K, 3, 3))
    G_t = np.empty((K, 3))
    t_local = np.empty((K, 3))
    for k in range(K):
        p = parents[k]
        t_local[k] = joints[k] - (joints[p] if k > 0 else 0.0)
        if k == 0:
            G_R[0] = rotations[0]
            G_t[0] = t_local[0]
        else:
            G_R[k] = G_R[p] @ rotations[k]
            G_t[k] = G_R[p] @ t_local[k] + G_t[p]
    # Joint-centered transforms: rotate about the rest joint location.
    A_R = G_R.copy()
    A_t = G_t - np.einsum("kij,kj->ki", G_R, joints)
    return G_R, G_t, t_local, A_R, A_t


def lbs(shaped_vertices, joints, theta, skinning_weights, parents):
    """Linear blend skinning with joint-centered rigid transforms."""
    theta = np.asarray(theta, dtype=np.float64)
    rotations = np.stack([rodrigues(theta[k]) for k in range(len(parents))])
    _, _, _, A_R, A_t = _world_transforms(joints, rotations, parents)
    B_R = np.einsum("vk,kij->vij", skinning_weights, A_R)
    B_t = skinning_weights @ A_t
    return np.einsum("vij,vj->vi", B_R, shaped_vertices) + B_t


def vertex_normals(vertices, faces):
    """Area-weighted average of incident face normals, normalized."""
    v0, v1, v2 = vertices[faces[:, 0]], vertices[faces[:, 1]], vertices[faces[:, 2]]
    fn = np.cross(v1 - v0, v2 - v0)  # length = 2 * area
    normals = np.zeros_like(vertices)
    for corner in range(3):
        np.add.at(normals, faces[:, corner], fn)
    norm = np.linalg.norm(normals, axis=1, keepdims=True)
    return normals / np.maximum(norm, 1e-30)


@dataclass
class DecodeCache:
    """Intermediates of decode needed by its vector-Jacobian product."""

    theta: np.ndarray       # (K, 3)
    rotations: np.ndarray   # (K, 3, 3)
    joints: np.ndarray      # (K, 3)
    v_corrected: np.ndarray # (V, 3) shaped + pose correctives
    G_R: np.ndarray
    G_t: np.ndarray
    t_local: np.ndarray
    B_R: np.ndarray         # (V, 3, 3) blended rotations


def decode_with_cache(assets, params: FlameParams):
    """Full decode returning the mesh plus the intermediates for decode_vjp."""
    if params.theta.shape != (assets.n_joints, 3):
        raise DimensionError(
            f"theta has shape {params.theta.shape}, expected ({assets.n_joints}, 3)"
        )
    v_shaped = shaped_template(assets, params.beta, params.psi)
    joints = regress_joints(assets, v_shaped)
    rotations = np.stack([rodrigues(params.theta[k]) for k in range(assets.n_joints)])
    v_corrected = v_shaped + assets.pose_basis @ pose_feature(assets, rotations)
    G_R, G_t, t_local, A_R, A_t = _world_transforms(
        joints, rotations, assets.kinematic_parents
    )
    B_R = np.einsum("vk,kij->vij", assets.skinning_weights, A_R)
    B_t = assets.skinning_weights @ A_t
    posed = np.einsum("vij,vj->vi", B_R, v_corrected) + B_t
    mesh = PosedMesh(
        vertices=posed,
        vertex_normals=vertex_normals(posed, assets.faces),
        faces=assets.faces,
        uv_coords=assets.uv_coords,
        uv_faces=assets.uv_faces,
    )
    cache = DecodeCache(theta=params.theta, rotations=rotations, joints=joints,
                        v_corrected=v_corrected, G_R=G_R, G_t=G_t,
                        t_local=t_local, B_R=B_R)
    return mesh, cache


def decode(assets, params: FlameParams) -> PosedMesh:
    """Decode parameters into a posed mesh with vertex normals."""
    mesh, _ = decode_with_cache(assets, params)
    return mesh


def decode_vjp(assets, cache: DecodeCache, d_vertices):
    """Backpropagate a posed-vertex gradient to (beta, psi, theta).

    Normals are treated as frozen attributes (hard-rasterizer convention);
    gradients flow through vertex positions only.
    """
    parents = assets.kinematic_parents
    K = assets.n_joints
    W = assets.skinning_weights
    d_vertices = np.asarray(d_vertices, dtype=np.float64)

    # x_v = B_R[v] @ vc_v + sum_k w_vk A_t[k]
    d_vc = np.einsum("vij,vi->vj", cache.B_R, d_vertices)
    dA_R = np.einsum("vk,vi,vj->kij", W, d_vertices, cache.v_corrected)
    dA_t = W.T @ d_vertices

    # A_R = G_R, A_t = G_t - G_R @ j  (joint-centered removal of the rest pose)
    dG_R = dA_R - np.einsum("ki,kj->kij", dA_t, cache.joints)
    dG_t = dA_t.copy()
    d_joints = -np.einsum("kji,kj->ki", cache.G_R, dA_t)

    # Tree composition, children before parents (parent index < child index).
    d_rot = np.zeros((K, 3, 3))
    for k in range(K - 1, -1, -1):
        if k == 0:
            d_rot[0] += dG_R[0]
            d_joints[0] += dG_t[0]
        else:
            p = parents[k]
            d_rot[k] += cache.G_R[p].T @ dG_R[k]
            dt_local = cache.G_R[p].T @ dG_t[k]
            dG_R[p] += dG_R[k] @ cache.rotations[k].T
            dG_R[p] += np.outer(dG_t[k], cache.t_local[k])
            dG_t[p] += dG_t[k]
            d_joints[k] += dt_local
            d_joints[p] -= dt_local

    # Pose correctives: vc = v_shaped + pose_basis @ feat(R).
    d_feat = np.einsum("vjc,vj->c", assets.pose_basis, d_vc)
    for k in range(1, K):
        d_rot[k] += d_feat[9 * k:9 * k + 9].reshape(3, 3)

    d_shaped = d_vc + assets.joint_regressor.T @ d_joints
    d_beta = np.einsum("vjc,vj->c", assets.shape_basis, d_shaped)
    d_psi = np.einsum("vjc,vj->c", assets.expr_basis, d_shaped)
    d_theta = np.stack(
        [rodrigues_vjp(cache.theta[k], d_rot[k]) for k in range(K)]
    )
    return d_beta, d_psi, d_theta


def embed_landmarks(mesh: PosedMesh, lmk_faces, lmk_bary):
    """Barycentric landmark positions on the posed surface, (L, 3)."""
    tri = mesh.vertices[mesh.faces[lmk_faces]]  # (L, 3, 3)
    return np.einsum("lc,lcj->lj", lmk_bary, tri)


def embed_landmarks_vjp(mesh: PosedMesh, lmk_faces, lmk_bary, d_landmarks, d_vertices):
    """Scatter a landmark-position gradient back onto mesh vertices (in place)."""
    contrib = np.einsum("lc,lj->lcj", lmk_bary, d_landmarks)  # (L, 3corners, 3)
    np.add.at(d_vertices, mesh.faces[lmk_faces].ravel(), contrib.reshape(-1, 3))
    return d_vertices
