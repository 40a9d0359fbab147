"""Mesh evaluation metrics: chamfer distance, normal error, completeness.

Distances are computed point-to-nearest-surface (exact closest point on a
triangle, not nearest sample) over stratified area-weighted surface samples.
Model units are converted to millimeters where the metric is dimensional.
"""

from dataclasses import dataclass

import numpy as np

DEFAULT_SAMPLES = 10_000
DEFAULT_CR_THRESHOLD_MM = 5.0


class DegenerateCorrespondences(ValueError):
    """Raised when an alignment cannot be determined."""


@dataclass(frozen=True)
class Similarity:
    """y = scale * R @ x + t, with positive scale and proper rotation."""

    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def apply(self, points):
        return self.scale * (np.asarray(points) @ self.rotation.T) + self.translation

    @classmethod
    def identity(cls):
        return cls(1.0, np.eye(3), np.zeros(3))


@dataclass
class TriMesh:
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.faces = np.asarray(self.faces, dtype=np.int64)
        if len(self.faces) == 0:
            raise ValueError("empty mesh (no faces)")


@dataclass
class AlignedMeshPair:
    predicted: TriMesh
    ground_truth: TriMesh
    transform: Similarity       # maps predicted into ground-truth frame
    region_faces: np.ndarray = None  # optional gt face subset for evaluation

    def predicted_in_gt_frame(self):
        return TriMesh(self.transform.apply(self.predicted.vertices),
                       self.predicted.faces)


def align_similarity(source_points, target_points) -> Similarity:
    """Least-squares similarity (Umeyama): maps source onto target."""
    X = np.asarray(source_points, dtype=np.float64)
    Y = np.asarray(target_points, dtype=np.float64)
    if X.shape != Y.shape or X.shape[0] < 3:
        raise DegenerateCorrespondences("need at least 3 paired points")
    mu_x = X.mean(axis=0)
    mu_y = Y.mean(axis=0)
    Xc = X - mu_x
    Yc = Y - mu_y
    var_x = (Xc**2).sum() / len(X)
    svals = np.linalg.svd(Xc, compute_uv=False)
    if svals[1] <= 1e-10 * max(svals[0], 1e-30):
        raise DegenerateCorrespondences("correspondences are (near-)collinear")
    cov = Yc.T @ Xc / len(X)
    U, S, Vt = np.linalg.svd(cov)
    sign = np.sign(np.linalg.det(U @ Vt))
    D = np.diag([1.0, 1.0, sign])
    R = U @ D @ Vt
    scale = float(np.trace(np.diag(S) @ D) / var_x)
    if scale <= 0:
        raise DegenerateCorrespondences("alignment collapsed to non-positive scale")
    t = mu_y - scale * R @ mu_x
    return Similarity(scale=scale, rotation=R, translation=t)


# ---------------------------------------------------------------------------
# surface sampling and exact point-triangle distance

def face_areas(mesh: TriMesh):
    v = mesh.vertices[mesh.faces]
    return 0.5 * np.linalg.norm(
        np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1
    )


def face_normals(mesh: TriMesh):
    v = mesh.vertices[mesh.faces]
    n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
    return n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-30)


def sample_surface(mesh: TriMesh, n_samples, rng, faces_subset=None):
    """Stratified area-weighted surface samples -> (points, normals, face ids)."""
    areas = face_areas(mesh)
    if faces_subset is not None:
        keep = np.zeros(len(areas), dtype=bool)
        keep[faces_subset] = True
        areas = np.where(keep, areas, 0.0)
    total = areas.sum()
    if total <= 0:
        raise ValueError("mesh has zero surface area")
    counts = rng.multinomial(n_samples, areas / total)
    fid = np.repeat(np.arange(len(areas)), counts)
    v = mesh.vertices[mesh.faces[fid]]
    r1 = rng.random(len(fid))
    r2 = rng.random(len(fid))
    su = np.sqrt(r1)
    w0 = 1.0 - su
    w1 = su * (1.0 - r2)
    w2 = su * r2
    pts = w0[:, None] * v[:, 0] + w1[:, None] * v[:, 1] + w2[:, None] * v[:, 2]
    normals = face_normals(mesh)[fid]
    return pts, normals, fid


def _closest_on_triangles(P, B, E0, E1):
    """Eberly closest-point: P (n,1,3) against triangles (1,m,3); returns sq dist."""
    D = B - P
    a = np.einsum("...i,...i->...", E0, E0)
    b = np.einsum("...i,...i->...", E0, E1)
    c = np.einsum("...i,...i->...", E1, E1)
    d = np.einsum("...i,...i->...", E0, D)
    e = np.einsum("...i,...i->...", E1, D)
    det = np.maximum(a * c - b * b, 1e-30)
    s = b * e - c * d
    t = b * d - a * e

    a = np.maximum(a, 1e-30)
    c = np.maximum(c, 1e-30)
    denom_edge = np.maximum(a - 2.0 * b + c, 1e-30)

    in0 = s + t <= det
    # region partitions
    r4 = in0 & (s < 0) & (t < 0)
    r3 = in0 & (s < 0) & (t >= 0)
    r5 = in0 & (s >= 0) & (t < 0)
    r0 = in0 & (s >= 0) & (t >= 0)
    out = ~in0
    r2 = out & (s < 0)
    r6 = out & (s >= 0) & (t < 0)
    r1 = out & (s >= 0) & (t >= 0)

    s_out = np.zeros_like(s)
    t_out = np.zeros_like(t)

    # region 0 (interior)
    s_out = np.where(r0, s / det, s_out)
    t_out = np.where(r0, t / det, t_out)
    # region 1: edge s + t = 1
    numer = c + e - b - d
    s1 = np.clip(numer / denom_edge, 0.0, 1.0)
    s_out = np.where(r1, s1, s_out)
    t_out = np.where(r1, 1.0 - s1, t_out)
    # region 3: edge s = 0
    t3 = np.clip(-e / c, 0.0, 1.0)
    s_out = np.where(r3, 0.0, s_out)
    t_out = np.where(r3, t3, t_out)
    # region 5: edge t = 0
    s5 = np.clip(-d / a, 0.0, 1.0)
    s_out = np.where(r5, s5, s_out)
    t_out = np.where(r5, 0.0, t_out)
    # region 4: corner at B
    use_s = d < 0
    s4 = np.where(use_s, np.clip(-d / a, 0.0, 1.0), 0.0)
    t4 = np.where(use_s, 0.0, np.clip(-e / c, 0.0, 1.0))
    s_out = np.where(r4, s4, s_out)
    t_out = np.where(r4, t4, t_out)
    # region 2
    tmp0 = b + d
    tmp1 = c + e
    cond2 = tmp1 > tmp0
    s2 = np.where(cond2, np.clip((tmp1 - tmp0) / denom_edge, 0.0, 1.0), 0.0)
    t2 = np.where(cond2, 1.0 - s2, np.clip(-e / c, 0.0, 1.0))
    s_out = np.where(r2, s2, s_out)
    t_out = np.where(r2, t2, t_out)
    # region 6
    tmp0 = b + e
    tmp1 = a + d
    cond6 = tmp1 > tmp0
    t6 = np.where(cond6, np.clip((tmp1 - tmp0) / denom_edge, 0.0, 1.0), 0.0)
    s6 = np.where(cond6, 1.0 - t6, np.clip(-d / a, 0.0, 1.0))
    s_out = np.where(r6, s6, s_out)
    t_out = np.where(r6, t6, t_out)

    closest = B + s_out[..., None] * E0 + t_out[..., None] * E1
    diff = closest - P
    return np.einsum("...i,...i->...", diff, diff)


def point_to_surface(points, mesh: TriMesh, chunk=256):
    """Exact nearest-surface distance per point -> (distances, face indices)."""
    v = mesh.vertices[mesh.faces]
    B = v[:, 0][None, :, :]
    E0 = (v[:, 1] - v[:, 0])[None, :, :]
    E1 = (v[:, 2] - v[:, 0])[None, :, :]
    points = np.asarray(points, dtype=np.float64)
    dists = np.empty(len(points))
    nearest = np.empty(len(points), dtype=np.int64)
    for start in range(0, len(points), chunk):
        P = points[start:start + chunk][:, None, :]
        d2 = _closest_on_triangles(P, B, E0, E1)
        idx = np.argmin(d2, axis=1)
        rows = np.arange(len(idx))
        dists[start:start + chunk] = np.sqrt(d2[rows, idx])
        nearest[start:start + chunk] = idx
    return dists, nearest


# ---------------------------------------------------------------------------
# metrics

def chamfer_distance(pair: AlignedMeshPair, unit_to_mm=1000.0,
                     n_samples=DEFAULT_SAMPLES, seed=0):
    """Symmetric mean nearest-surface distance in millimeters."""
    pred = pair.predicted_in_gt_frame()
    gt = pair.ground_truth
    rng = np.random.default_rng(seed)
    pts_pred, _, _ = sample_surface(pred, n_samples, rng)
    pts_gt, _, _ = sample_surface(gt, n_samples, rng, faces_subset=pair.region_faces)
    d_pred, _ = point_to_surface(pts_pred, gt)
    d_gt, _ = point_to_surface(pts_gt, pred)
    return float((d_pred.mean() + d_gt.mean()) / 2.0 * unit_to_mm)


def mean_normal_error(pair: AlignedMeshPair, n_samples=DEFAULT_SAMPLES, seed=0):
    """Mean angle (radians) between predicted normals and nearest gt normals."""
    pred = pair.predicted_in_gt_frame()
    gt = pair.ground_truth
    rng = np.random.default_rng(seed)
    pts, normals, _ = sample_surface(pred, n_samples, rng)
    _, nearest = point_to_surface(pts, gt)
    gt_normals = face_normals(gt)[nearest]
    cosang = np.clip(np.einsum("ij,ij->i", normals, gt_normals), -1.0, 1.0)
    return float(np.arccos(cosang).mean())


def completeness_ratio(pair: AlignedMeshPair, threshold_mm=DEFAULT_CR_THRESHOLD_MM,
                       unit_to_mm=1000.0, n_samples=DEFAULT_SAMPLES, seed=0):
    """Fraction of ground-truth surface within threshold of the prediction."""
    pred = pair.predicted_in_gt_frame()
    gt = pair.ground_truth
    rng = np.random.default_rng(seed)
    pts, _, _ = sample_surface(gt, n_samples, rng, faces_subset=pair.region_faces)
    d, _ = point_to_surface(pts, pred)
    return float((d * unit_to_mm < threshold_mm).mean())


def evaluate_pair(pred_vertices, pred_faces, gt_vertices, gt_faces,
                  correspondences=None, threshold_mm=DEFAULT_CR_THRESHOLD_MM,
                  n_samples=DEFAULT_SAMPLES, seed=0):
    """Align then compute all three metrics; returns a JSON-ready dict.

    `correspondences` is an (n, 2) array of (pred vertex, gt vertex) index
    pairs; identical vertex counts default to the identity correspondence.
    """
    pred = TriMesh(pred_vertices, pred_faces)
    gt = TriMesh(gt_vertices, gt_faces)
    if correspondences is None:
        if len(pred.vertices) != len(gt.vertices):
            raise DegenerateCorrespondences(
                "vertex counts differ; explicit correspondences required"
            )
        src = pred.vertices
        dst = gt.vertices
    else:
        corr = np.asarray(correspondences, dtype=np.int64).reshape(-1, 2)
        src = pred.vertices[corr[:, 0]]
        dst = gt.vertices[corr[:, 1]]
    transform = align_similarity(src, dst)
    pair = AlignedMeshPair(predicted=pred, ground_truth=gt, transform=transform)
    return {
        "cd_mm": chamfer_distance(pair, n_samples=n_samples, seed=seed),
        "mne_rad": mean_normal_error(pair, n_samples=n_samples, seed=seed),
        "cr": completeness_ratio(pair, threshold_mm=threshold_mm,
                                 n_samples=n_samples, seed=seed),
    }
