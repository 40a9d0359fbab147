"""Head-model asset container: on-disk format, validation, mini test model.

The on-disk layout is a directory holding ``manifest.json`` plus one raw
little-endian float64 row-major blob per array.  Everything, including index
arrays, is stored as float64 so a single dtype rule covers the whole format;
integers of interest are exactly representable.
"""

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from mvflame._kernels import rasterize_triangles

FORMAT_VERSION = "1.0"
MANIFEST_NAME = "manifest.json"
N_LANDMARKS = 68

# Arrays every asset directory must declare, with shapes written in terms of
# the manifest dims (V, F, K, n_beta, n_psi; -1 = free dimension).
_REQUIRED_ARRAYS = {
    "template": ("V", 3),
    "shape_basis": ("V", 3, "n_beta"),
    "expr_basis": ("V", 3, "n_psi"),
    "pose_basis": ("V", 3, "9K"),
    "joint_regressor": ("K", "V"),
    "skinning_weights": ("V", "K"),
    "kinematic_parents": ("K",),
    "faces": ("F", 3),
    "uv_coords": (-1, 2),
    "uv_faces": ("F", 3),
    "landmark_embedding": (N_LANDMARKS, 4),
    "eye_pairs": (-1, 2),
    "lip_pairs": (-1, 2),
    "mouth_polygon": (-1,),
}
_OPTIONAL_ARRAYS = {"uv_face_mask": (-1, -1)}


class AssetError(Exception):
    """Raised for unreadable or structurally broken asset directories."""


class AssetValidationError(AssetError):
    """Raised when loaded arrays violate a model invariant."""


@dataclass(frozen=True)
class FlameAssets:
    """Immutable bundle of head-model arrays.

    Index-valued arrays are int64 in memory; all real arrays are float64.
    Arrays are marked read-only so instances can be shared across threads.
    """

    template: np.ndarray
    shape_basis: np.ndarray
    expr_basis: np.ndarray
    pose_basis: np.ndarray
    joint_regressor: np.ndarray
    skinning_weights: np.ndarray
    kinematic_parents: np.ndarray
    faces: np.ndarray
    uv_coords: np.ndarray
    uv_faces: np.ndarray
    lmk_faces: np.ndarray
    lmk_bary: np.ndarray
    eye_pairs: np.ndarray
    lip_pairs: np.ndarray
    mouth_polygon: np.ndarray
    uv_face_mask: np.ndarray | None = None

    def __post_init__(self):
        for name in self.__dataclass_fields__:
            arr = getattr(self, name)
            if isinstance(arr, np.ndarray):
                arr.setflags(write=False)

    @property
    def n_vertices(self):
        return self.template.shape[0]

    @property
    def n_faces(self):
        return self.faces.shape[0]

    @property
    def n_joints(self):
        return self.kinematic_parents.shape[0]

    @property
    def n_beta(self):
        return self.shape_basis.shape[2]

    @property
    def n_psi(self):
        return self.expr_basis.shape[2]


@dataclass(frozen=True)
class ArrayEntry:
    name: str
    shape: tuple
    file: str
    itemsize: int = 8
    offset: int = 0


@dataclass(frozen=True)
class AssetManifest:
    format_version: str
    dims: dict
    arrays: tuple = field(default_factory=tuple)

    def entry(self, name):
        for e in self.arrays:
            if e.name == name:
                return e
        return None


def _expected_shape(spec, dims):
    out = []
    for s in spec:
        if s == "9K":
            out.append(9 * dims["K"])
        elif isinstance(s, str):
            out.append(dims[s])
        else:
            out.append(s)
    return tuple(out)


def _check_shape(name, actual, spec, dims):
    expected = _expected_shape(spec, dims)
    if len(actual) != len(expected):
        raise AssetValidationError(
            f"array '{name}': expected {len(expected)} dims, got shape {actual}"
        )
    for a, e in zip(actual, expected):
        if e != -1 and a != e:
            raise AssetValidationError(
                f"array '{name}': shape {actual} inconsistent with dims "
                f"(expected {expected})"
            )


def validate_assets(assets: FlameAssets):
    """Check every model invariant; raises AssetValidationError naming the array."""
    V, F, K = assets.n_vertices, assets.n_faces, assets.n_joints

    for name in ("template", "shape_basis", "expr_basis", "pose_basis",
                 "joint_regressor", "skinning_weights", "uv_coords", "lmk_bary"):
        if not np.isfinite(getattr(assets, name)).all():
            raise AssetValidationError(f"array '{name}': non-finite entries")

    w = assets.skinning_weights
    if w.min() < -1e-9:
        raise AssetValidationError("array 'skinning_weights': negative weight")
    row = w.sum(axis=1)
    if np.abs(row - 1.0).max() > 1e-5:
        raise AssetValidationError(
            f"array 'skinning_weights': row sums off by {np.abs(row - 1.0).max():.2e}"
        )

    jr = assets.joint_regressor
    if jr.min() < -1e-9:
        raise AssetValidationError("array 'joint_regressor': negative weight")
    row = jr.sum(axis=1)
    if np.abs(row - 1.0).max() > 1e-4:
        raise AssetValidationError(
            f"array 'joint_regressor': row sums off by {np.abs(row - 1.0).max():.2e}"
        )

    if assets.faces.min() < 0 or assets.faces.max() >= V:
        raise AssetValidationError("array 'faces': vertex index out of range")
    if assets.uv_faces.min() < 0 or assets.uv_faces.max() >= assets.uv_coords.shape[0]:
        raise AssetValidationError("array 'uv_faces': uv index out of range")
    if assets.uv_coords.min() < -1e-9 or assets.uv_coords.max() > 1.0 + 1e-9:
        raise AssetValidationError("array 'uv_coords': coordinates outside [0, 1]")

    if assets.lmk_faces.min() < 0 or assets.lmk_faces.max() >= F:
        raise AssetValidationError("array 'landmark_embedding': triangle id out of range")
    bsum = assets.lmk_bary.sum(axis=1)
    if np.abs(bsum - 1.0).max() > 1e-6:
        raise AssetValidationError(
            "array 'landmark_embedding': barycentric weights do not sum to 1"
        )

    parents = assets.kinematic_parents
    if parents[0] != -1:
        raise AssetValidationError("array 'kinematic_parents': joint 0 must be the root")
    for k in range(1, K):
        if not 0 <= parents[k] < k:
            raise AssetValidationError(
                "array 'kinematic_parents': parent index must precede child"
            )

    for name in ("eye_pairs", "lip_pairs", "mouth_polygon"):
        arr = getattr(assets, name)
        if arr.size and (arr.min() < 0 or arr.max() >= N_LANDMARKS):
            raise AssetValidationError(f"array '{name}': landmark index out of range")


# ---------------------------------------------------------------------------
# serialization

def _assets_to_arrays(assets: FlameAssets):
    emb = np.concatenate(
        [assets.lmk_faces[:, None].astype(np.float64), assets.lmk_bary], axis=1
    )
    arrays = {
        "template": assets.template,
        "shape_basis": assets.shape_basis,
        "expr_basis": assets.expr_basis,
        "pose_basis": assets.pose_basis,
        "joint_regressor": assets.joint_regressor,
        "skinning_weights": assets.skinning_weights,
        "kinematic_parents": assets.kinematic_parents.astype(np.float64),
        "faces": assets.faces.astype(np.float64),
        "uv_coords": assets.uv_coords,
        "uv_faces": assets.uv_faces.astype(np.float64),
        "landmark_embedding": emb,
        "eye_pairs": assets.eye_pairs.astype(np.float64),
        "lip_pairs": assets.lip_pairs.astype(np.float64),
        "mouth_polygon": assets.mouth_polygon.astype(np.float64),
    }
    if assets.uv_face_mask is not None:
        arrays["uv_face_mask"] = assets.uv_face_mask
    return arrays


def save_assets(assets: FlameAssets, path):
    """Write manifest + blobs; load_assets(path) reproduces assets bit-exactly."""
    validate_assets(assets)
    os.makedirs(path, exist_ok=True)
    arrays = _assets_to_arrays(assets)
    entries = []
    for name, arr in arrays.items():
        arr64 = np.ascontiguousarray(arr, dtype=np.float64)
        fname = f"{name}.bin"
        with open(os.path.join(path, fname), "wb") as fh:
            fh.write(arr64.astype("<f8").tobytes())
        entries.append({"name": name, "shape": list(arr64.shape),
                        "file": fname, "dtype": "f64"})
    manifest = {
        "format_version": FORMAT_VERSION,
        "dims": {"V": assets.n_vertices, "F": assets.n_faces, "K": assets.n_joints,
                 "n_beta": assets.n_beta, "n_psi": assets.n_psi},
        "arrays": entries,
    }
    with open(os.path.join(path, MANIFEST_NAME), "w", encoding="ascii") as fh:
        json.dump(manifest, fh, indent=1)
        fh.write("\n")


def read_manifest(path) -> AssetManifest:
    mpath = os.path.join(path, MANIFEST_NAME)
    if not os.path.exists(mpath):
        raise AssetError(f"missing manifest file {mpath}")
    try:
        with open(mpath, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise AssetError(f"unreadable manifest {mpath}: {exc}") from exc
    try:
        dims = {k: int(v) for k, v in raw["dims"].items()}
        entries = tuple(
            ArrayEntry(name=e["name"], shape=tuple(int(s) for s in e["shape"]),
                       file=e["file"], itemsize=8, offset=int(e.get("offset", 0)))
            for e in raw["arrays"]
        )
        manifest = AssetManifest(format_version=str(raw["format_version"]),
                                 dims=dims, arrays=entries)
    except (KeyError, TypeError, ValueError) as exc:
        raise AssetError(f"malformed manifest {mpath}: {exc}") from exc

    # Entries sharing a blob file must not overlap.
    by_file = {}
    for e in manifest.arrays:
        by_file.setdefault(e.file, []).append(e)
    for fname, group in by_file.items():
        spans = sorted(
            (e.offset, e.offset + int(np.prod(e.shape)) * e.itemsize, e.name)
            for e in group
        )
        for (s0, e0, n0), (s1, _e1, n1) in zip(spans, spans[1:]):
            if s1 < e0:
                raise AssetError(
                    f"manifest arrays '{n0}' and '{n1}' overlap in blob {fname}"
                )
    return manifest


def _load_array(path, entry: ArrayEntry):
    fpath = os.path.join(path, entry.file)
    if not os.path.exists(fpath):
        raise AssetError(f"missing array '{entry.name}': blob {entry.file} not found")
    nbytes = int(np.prod(entry.shape)) * entry.itemsize
    size = os.path.getsize(fpath)
    if size < entry.offset + nbytes:
        raise AssetError(
            f"array '{entry.name}': blob {entry.file} holds {size} bytes, "
            f"need {entry.offset + nbytes}"
        )
    with open(fpath, "rb") as fh:
        fh.seek(entry.offset)
        buf = fh.read(nbytes)
    return np.frombuffer(buf, dtype="<f8").reshape(entry.shape).copy()


def load_assets(path) -> FlameAssets:
    """Load and validate an asset directory."""
    manifest = read_manifest(path)
    dims = manifest.dims
    for key in ("V", "F", "K", "n_beta", "n_psi"):
        if key not in dims:
            raise AssetError(f"manifest dims missing '{key}'")

    raw = {}
    for name, spec in _REQUIRED_ARRAYS.items():
        entry = manifest.entry(name)
        if entry is None:
            raise AssetError(f"missing array '{name}' in manifest")
        _check_shape(name, entry.shape, spec, dims)
        raw[name] = _load_array(path, entry)
    for name, spec in _OPTIONAL_ARRAYS.items():
        entry = manifest.entry(name)
        if entry is not None:
            _check_shape(name, entry.shape, spec, dims)
            raw[name] = _load_array(path, entry)

    emb = raw["landmark_embedding"]
    assets = FlameAssets(
        template=raw["template"],
        shape_basis=raw["shape_basis"],
        expr_basis=raw["expr_basis"],
        pose_basis=raw["pose_basis"],
        joint_regressor=raw["joint_regressor"],
        skinning_weights=raw["skinning_weights"],
        kinematic_parents=raw["kinematic_parents"].astype(np.int64),
        faces=raw["faces"].astype(np.int64),
        uv_coords=raw["uv_coords"],
        uv_faces=raw["uv_faces"].astype(np.int64),
        lmk_faces=emb[:, 0].astype(np.int64),
        lmk_bary=np.ascontiguousarray(emb[:, 1:4]),
        eye_pairs=raw["eye_pairs"].astype(np.int64),
        lip_pairs=raw["lip_pairs"].astype(np.int64),
        mouth_polygon=raw["mouth_polygon"].astype(np.int64),
        uv_face_mask=raw.get("uv_face_mask"),
    )
    validate_assets(assets)
    return assets


# ---------------------------------------------------------------------------
# mini model generation

MINI_RADIUS = 0.1  # model units (~meters); desk-scale head stand-in
MINI_UV_MASK_RES = 64

_ICO_T = (1.0 + math.sqrt(5.0)) / 2.0
_ICO_VERTS = [
    (-1, _ICO_T, 0), (1, _ICO_T, 0), (-1, -_ICO_T, 0), (1, -_ICO_T, 0),
    (0, -1, _ICO_T), (0, 1, _ICO_T), (0, -1, -_ICO_T), (0, 1, -_ICO_T),
    (_ICO_T, 0, -1), (_ICO_T, 0, 1), (-_ICO_T, 0, -1), (-_ICO_T, 0, 1),
]
_ICO_FACES = [
    (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
    (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
    (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
    (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
]


def icosphere(subdivisions, radius=1.0):
    """Subdivided icosahedron with outward CCW faces; V = 10*4^n + 2."""
    verts = [np.array(v, dtype=np.float64) / np.linalg.norm(v) for v in _ICO_VERTS]
    faces = list(_ICO_FACES)
    for _ in range(subdivisions):
        midpoint = {}

        def mid(i, j):
            key = (i, j) if i < j else (j, i)
            if key not in midpoint:
                m = verts[i] + verts[j]
                verts.append(m / np.linalg.norm(m))
                midpoint[key] = len(verts) - 1
            return midpoint[key]

        new_faces = []
        for (a, b, c) in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    return np.array(verts) * radius, np.array(faces, dtype=np.int64)


def _smooth_field(rng, verts, radius, n_bumps=4):
    """Random low-frequency vector field on the surface, max row norm 1."""
    field = np.zeros_like(verts)
    for _ in range(n_bumps):
        center = rng.normal(size=3)
        center = center / np.linalg.norm(center) * radius
        direction = rng.normal(size=3)
        sigma = radius * rng.uniform(0.45, 0.8)
        w = np.exp(-np.sum((verts - center) ** 2, axis=1) / (2.0 * sigma**2))
        field += w[:, None] * direction
    peak = np.linalg.norm(field, axis=1).max()
    return field / peak


def _smoothstep(t):
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


# Canonical 68-landmark layout in a face plane (x right, y up, roughly [-1,1]).
def _canonical_landmark_layout():
    pts = np.zeros((N_LANDMARKS, 2))
    for i in range(17):  # jawline
        a = math.pi * (i / 16.0 - 0.5)
        pts[i] = (0.9 * math.sin(a), 0.45 - 1.35 * math.cos(a))
    for j in range(5):  # brows
        arch = 0.08 * math.sin(math.pi * j / 4.0)
        pts[17 + j] = (-0.65 + 0.1175 * j, 0.52 + arch)
        pts[22 + j] = (0.18 + 0.1175 * j, 0.52 + 0.08 * math.sin(math.pi * (4 - j) / 4.0))
    for j, y in enumerate((0.42, 0.28, 0.14, 0.02)):  # nose bridge
        pts[27 + j] = (0.0, y)
    nose_x = (-0.14, -0.07, 0.0, 0.07, 0.14)
    nose_y = (-0.10, -0.12, -0.14, -0.12, -0.10)
    for j in range(5):
        pts[31 + j] = (nose_x[j], nose_y[j])
    pts[36] = (-0.55, 0.28); pts[37] = (-0.47, 0.335); pts[38] = (-0.37, 0.335)
    pts[39] = (-0.29, 0.28); pts[40] = (-0.37, 0.225); pts[41] = (-0.47, 0.225)
    pts[42] = (0.29, 0.28); pts[43] = (0.37, 0.335); pts[44] = (0.47, 0.335)
    pts[45] = (0.55, 0.28); pts[46] = (0.47, 0.225); pts[47] = (0.37, 0.225)
    pts[48] = (-0.28, -0.48)
    lip_x = (-0.19, -0.09, 0.0, 0.09, 0.19)
    lip_y = (-0.40, -0.375, -0.385, -0.375, -0.40)
    for j in range(5):
        pts[49 + j] = (lip_x[j], lip_y[j])
    pts[54] = (0.28, -0.48)
    for j in range(5):
        pts[55 + j] = (lip_x[4 - j], -0.96 - lip_y[4 - j])  # mirror about y=-0.48
    pts[60] = (-0.22, -0.48)
    pts[61] = (-0.10, -0.44); pts[62] = (0.0, -0.445); pts[63] = (0.10, -0.44)
    pts[64] = (0.22, -0.48)
    pts[65] = (0.10, -0.52); pts[66] = (0.0, -0.525); pts[67] = (-0.10, -0.52)
    return pts


def _raycast_embedding(verts, faces, directions):
    """Intersect origin rays with a star-shaped mesh -> (face id, barycentric)."""
    v0 = verts[faces[:, 0]]
    e1 = verts[faces[:, 1]] - v0
    e2 = verts[faces[:, 2]] - v0
    lmk_faces = np.zeros(len(directions), dtype=np.int64)
    lmk_bary = np.zeros((len(directions), 3))
    for i, d in enumerate(directions):
        # Moeller-Trumbore, vectorized over faces.
        pvec = np.cross(np.broadcast_to(d, e2.shape), e2)
        det = np.einsum("ij,ij->i", e1, pvec)
        ok = np.abs(det) > 1e-14
        inv_det = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
        tvec = -v0
        u = np.einsum("ij,ij->i", tvec, pvec) * inv_det
        qvec = np.cross(tvec, e1)
        v = np.einsum("j,ij->i", d, qvec) * inv_det
        t = np.einsum("ij,ij->i", e2, qvec) * inv_det
        hit = ok & (u >= -1e-12) & (v >= -1e-12) & (u + v <= 1.0 + 1e-12) & (t > 0)
        idx = np.nonzero(hit)[0]
        if idx.size == 0:
            raise AssetError("landmark ray missed the mesh")
        f = idx[0]
        lmk_faces[i] = f
        bu, bv = np.clip(u[f], 0, 1), np.clip(v[f], 0, 1)
        lmk_bary[i] = (1.0 - bu - bv, bu, bv)
    return lmk_faces, lmk_bary


def _hemisphere_uv(verts, faces, radius):
    """Two-chart UV atlas: front (z >= 0) on the left half, back on the right."""
    centroid_z = verts[faces].mean(axis=1)[:, 2]
    chart = np.where(centroid_z >= 0.0, 0, 1)
    uv_index = {}
    uv_coords = []
    uv_faces = np.zeros_like(faces)
    for f in range(len(faces)):
        c = chart[f]
        for corner in range(3):
            v = faces[f, corner]
            key = (v, c)
            if key not in uv_index:
                x, y = verts[v, 0] / radius, verts[v, 1] / radius
                if c == 0:
                    u = 0.25 + 0.24 * x
                else:
                    u = 0.75 - 0.24 * x
                uv_index[key] = len(uv_coords)
                uv_coords.append((u, 0.5 - 0.24 * y))
            uv_faces[f, corner] = uv_index[key]
    return np.array(uv_coords, dtype=np.float64), uv_faces


def _uv_coverage_mask(uv_coords, uv_faces, resolution):
    xy = uv_coords[uv_faces] * resolution
    z = np.ones(uv_faces.shape[:2])
    valid = np.ones(len(uv_faces), dtype=np.uint8)
    tidmap, _, _ = rasterize_triangles(xy, z, valid, resolution, resolution, 0)
    return (tidmap >= 0).astype(np.float64)


def make_mini_model(seed: int) -> FlameAssets:
    """Deterministic icosphere head model for tests and demos.

    Subdivision-2 icosphere (V=162, F=320), two joints (root + jaw driving the
    lower third of the head), four smooth random shape/expression bases capped
    at 5% of the head radius, and a 68-landmark embedding on the front
    (+z) hemisphere.
    """
    rng = np.random.default_rng(seed)
    r = MINI_RADIUS
    verts, faces = icosphere(2, radius=r)
    V, K = len(verts), 2

    # Skinning: jaw weight ramps in over a band around the lower-third line.
    y_split = -r / 3.0
    band = 0.15 * r
    w_jaw = _smoothstep(((y_split + band) - verts[:, 1]) / (2.0 * band))
    skinning = np.stack([1.0 - w_jaw, w_jaw], axis=1)

    regressor = np.zeros((K, V))
    regressor[0] = 1.0 / V
    jaw_anchor = np.array([0.0, -0.2 * r, 0.1 * r])
    g = np.exp(-np.sum((verts - jaw_anchor) ** 2, axis=1) / (2.0 * (0.35 * r) ** 2))
    regressor[1] = g / g.sum()

    n_beta = n_psi = 4
    shape_basis = np.stack(
        [_smooth_field(rng, verts, r) * (0.05 * r) for _ in range(n_beta)], axis=2
    )
    expr_basis = np.stack(
        [_smooth_field(rng, verts, r) * (0.05 * r) for _ in range(n_psi)], axis=2
    )
    pose_basis = np.stack(
        [_smooth_field(rng, verts, r, n_bumps=3) * (0.008 * r) for _ in range(9 * K)],
        axis=2,
    )

    layout = _canonical_landmark_layout()
    directions = np.column_stack(
        [0.62 * layout[:, 0], 0.75 * layout[:, 1], np.ones(N_LANDMARKS)]
    )
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    lmk_faces, lmk_bary = _raycast_embedding(verts, faces, directions)

    uv_coords, uv_faces = _hemisphere_uv(verts, faces, r)
    uv_face_mask = _uv_coverage_mask(uv_coords, uv_faces, MINI_UV_MASK_RES)

    assets = FlameAssets(
        template=verts,
        shape_basis=shape_basis,
        expr_basis=expr_basis,
        pose_basis=pose_basis,
        joint_regressor=regressor,
        skinning_weights=skinning,
        kinematic_parents=np.array([-1, 0], dtype=np.int64),
        faces=faces,
        uv_coords=uv_coords,
        uv_faces=uv_faces,
        lmk_faces=lmk_faces,
        lmk_bary=lmk_bary,
        eye_pairs=np.array([(37, 41), (38, 40), (43, 47), (44, 46)], dtype=np.int64),
        lip_pairs=np.array([(61, 67), (62, 66), (63, 65), (60, 64)], dtype=np.int64),
        mouth_polygon=np.arange(60, 68, dtype=np.int64),
        uv_face_mask=uv_face_mask,
    )
    validate_assets(assets)
    return assets
