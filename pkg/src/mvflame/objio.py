"""Minimal Wavefront OBJ read/write for triangle meshes.

Internal UV convention is origin top-left (v grows downward); OBJ uses
bottom-left, so v is flipped on both paths.
"""

import numpy as np


class MeshIOError(Exception):
    """Raised for unreadable or malformed mesh files."""


def write_obj(path, vertices, faces, uv_coords=None, uv_faces=None):
    """Write a triangle mesh, optionally with a UV layer."""
    vertices = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    lines = []
    for v in vertices:
        lines.append(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}")
    has_uv = uv_coords is not None and uv_faces is not None
    if has_uv:
        for t in np.asarray(uv_coords, dtype=np.float64):
            lines.append(f"vt {t[0]:.9g} {1.0 - t[1]:.9g}")
        for f, tf in zip(faces, np.asarray(uv_faces, dtype=np.int64)):
            lines.append(
                f"f {f[0] + 1}/{tf[0] + 1} {f[1] + 1}/{tf[1] + 1} {f[2] + 1}/{tf[2] + 1}"
            )
    else:
        for f in faces:
            lines.append(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}")
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def read_obj(path):
    """Read vertices and triangular faces; returns (vertices, faces).

    Polygons with more than three corners are fan-triangulated.  Raises
    MeshIOError on syntax errors or out-of-range indices.
    """
    verts = []
    faces = []
    try:
        with open(path, "r", encoding="utf-8", errors="replace") as fh:
            for ln, raw in enumerate(fh, start=1):
                line = raw.strip()
                if not line or line.startswith("#"):
                    continue
                parts = line.split()
                tag = parts[0]
                if tag == "v":
                    if len(parts) < 4:
                        raise MeshIOError(f"{path}:{ln}: vertex needs 3 coordinates")
                    try:
                        verts.append([float(parts[1]), float(parts[2]), float(parts[3])])
                    except ValueError as exc:
                        raise MeshIOError(f"{path}:{ln}: bad vertex ({exc})") from exc
                elif tag == "f":
                    if len(parts) < 4:
                        raise MeshIOError(f"{path}:{ln}: face needs >= 3 corners")
                    try:
                        idx = [int(p.split("/")[0]) for p in parts[1:]]
                    except ValueError as exc:
                        raise MeshIOError(f"{path}:{ln}: bad face index ({exc})") from exc
                    idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
                    for a, b in zip(idx[1:-1], idx[2:]):
                        faces.append([idx[0], a, b])
    except OSError as exc:
        raise MeshIOError(f"cannot read {path}: {exc}") from exc
    if not verts:
        raise MeshIOError(f"{path}: no vertices found")
    vertices = np.asarray(verts, dtype=np.float64)
    face_arr = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if face_arr.size and (face_arr.min() < 0 or face_arr.max() >= len(vertices)):
        raise MeshIOError(f"{path}: face index out of range")
    return vertices, face_arr
