#!/usr/bin/env python3
"""One-shot converter: published head-model pickle -> neutral asset directory.

Reads the statistical head model's native serialized form (a Python pickle,
possibly containing chumpy array wrappers and scipy sparse matrices) plus a
landmark-embedding file, and writes the manifest + raw-blob asset layout:

    manifest.json            {"format_version", "dims", "arrays": [...]}
    <array>.bin              headerless little-endian float64, row-major

Eye/lip landmark pairs and the mouth polygon are not part of the model
distribution; they are injected from the bundled ``pairs_ibug68.json``.

Usage:
    convert.py --model generic_model.pkl --landmarks landmark_embedding.npy \
               --out assets_dir [--n-beta 100] [--n-psi 50]
"""

import argparse
import hashlib
import io
import json
import os
import pickle
import sys

import numpy as np

FORMAT_VERSION = "1.0"
N_LANDMARKS = 68

# Canonical array order of the asset format; save order must be stable so
# that convert -> load -> save is a byte-level fixpoint.
ARRAY_ORDER = [
    "template", "shape_basis", "expr_basis", "pose_basis", "joint_regressor",
    "skinning_weights", "kinematic_parents", "faces", "uv_coords", "uv_faces",
    "landmark_embedding", "eye_pairs", "lip_pairs", "mouth_polygon",
]


class ConversionError(Exception):
    """Raised for unreadable inputs or unrecognized field layouts."""


# ---------------------------------------------------------------------------
# pickle loading without the chumpy dependency

class _ChumpyStub:
    """Stands in for chumpy array types during unpickling."""

    def __init__(self, *args, **kwargs):
        self.__dict__["x"] = args[0] if args else None

    def __setstate__(self, state):
        if isinstance(state, dict):
            self.__dict__.update(state)


class _ModelUnpickler(pickle.Unpickler):
    def find_class(self, module, name):
        if module.startswith("chumpy"):
            return _ChumpyStub
        return super().find_class(module, name)


def _to_array(value):
    """Materialize pickled leaf values as plain numpy arrays."""
    if isinstance(value, _ChumpyStub):
        inner = getattr(value, "x", None)
        if inner is None:
            raise ConversionError("chumpy wrapper without payload")
        return _to_array(inner)
    if hasattr(value, "toarray"):  # scipy sparse
        return np.asarray(value.toarray(), dtype=np.float64)
    return np.asarray(value, dtype=np.float64)


def load_model_pickle(path):
    try:
        with open(path, "rb") as fh:
            data = fh.read()
        model = _ModelUnpickler(io.BytesIO(data), encoding="latin1").load()
    except (OSError, pickle.UnpicklingError, EOFError, ValueError) as exc:
        raise ConversionError(f"cannot parse model file {path}: {exc}") from exc
    if not isinstance(model, dict):
        model = getattr(model, "__dict__", None)
        if model is None:
            raise ConversionError(f"{path}: unrecognized model container")
    return model


def load_landmark_embedding(path):
    """Accept .npy/.npz dictionaries under the common key spellings."""
    try:
        raw = np.load(path, allow_pickle=True)
    except (OSError, ValueError) as exc:
        raise ConversionError(f"cannot parse landmark file {path}: {exc}") from exc
    if isinstance(raw, np.lib.npyio.NpzFile):
        data = {k: raw[k] for k in raw.files}
    else:
        data = raw[()] if raw.dtype == object else {"array": raw}
    for faces_key, bary_key in (
        ("full_lmk_faces_idx", "full_lmk_bary_coords"),
        ("lmk_faces_idx", "lmk_bary_coords"),
        ("lmk_face_idx", "lmk_b_coords"),
    ):
        if faces_key in data and bary_key in data:
            faces = np.asarray(data[faces_key]).reshape(-1).astype(np.float64)
            bary = np.asarray(data[bary_key], dtype=np.float64).reshape(-1, 3)
            return faces, bary
    raise ConversionError(
        f"{path}: no landmark keys found "
        f"(looked for full_lmk_faces_idx/lmk_faces_idx/lmk_face_idx)"
    )


def _require(model, names):
    for name in names:
        if name in model:
            return _to_array(model[name])
    raise ConversionError(f"model is missing required field "
                          f"{'/'.join(names)} (unknown layout)")


# ---------------------------------------------------------------------------
# conversion proper

def _fallback_uv(template, faces):
    """Two-hemisphere orthographic atlas when the model ships no UV layer."""
    radius = np.linalg.norm(template - template.mean(axis=0), axis=1).max()
    center = template.mean(axis=0)
    rel = (template - center) / radius
    centroid_z = rel[faces.astype(np.int64)].mean(axis=1)[:, 2]
    chart = np.where(centroid_z >= 0.0, 0, 1)
    uv_index = {}
    uv_coords = []
    uv_faces = np.zeros_like(faces)
    for f in range(len(faces)):
        c = chart[f]
        for corner in range(3):
            v = int(faces[f, corner])
            key = (v, c)
            if key not in uv_index:
                x, y = rel[v, 0], rel[v, 1]
                u = 0.25 + 0.24 * x if c == 0 else 0.75 - 0.24 * x
                uv_index[key] = len(uv_coords)
                uv_coords.append((min(max(u, 0.0), 1.0),
                                  min(max(0.5 - 0.24 * y, 0.0), 1.0)))
            uv_faces[f, corner] = uv_index[key]
    return np.array(uv_coords, dtype=np.float64), uv_faces


def convert(model_path, landmarks_path, out_dir, n_beta=100, n_psi=50,
            pairs_path=None):
    """Convert the model + landmark embedding; returns the ConversionReport."""
    model = load_model_pickle(model_path)
    lmk_faces, lmk_bary = load_landmark_embedding(landmarks_path)
    if len(lmk_faces) != N_LANDMARKS:
        raise ConversionError(
            f"expected {N_LANDMARKS} landmarks, got {len(lmk_faces)}"
        )

    template = _require(model, ["v_template"])
    shapedirs = _require(model, ["shapedirs"])
    posedirs = _require(model, ["posedirs"])
    joint_regressor = _require(model, ["J_regressor"])
    weights = _require(model, ["weights"])
    faces = _require(model, ["f", "faces"])

    V = template.shape[0]
    K = weights.shape[1]
    if shapedirs.shape[:2] != (V, 3):
        raise ConversionError(
            f"shapedirs shape {shapedirs.shape} inconsistent with V={V}"
        )
    total_dirs = shapedirs.shape[2]
    if n_beta + n_psi > total_dirs:
        raise ConversionError(
            f"requested n_beta={n_beta} + n_psi={n_psi} exceeds the "
            f"{total_dirs} available blendshape directions"
        )
    # Convention: shape components first, expression components at the tail.
    shape_basis = np.ascontiguousarray(shapedirs[:, :, :n_beta])
    expr_basis = np.ascontiguousarray(
        shapedirs[:, :, total_dirs - n_psi:total_dirs])

    # Pose correctives: native layout is (V, 3, 9*(K-1)) for non-root joints;
    # the neutral format carries 9*K columns with a zero root block.
    if posedirs.ndim == 2 and posedirs.shape == (9 * (K - 1), V * 3):
        posedirs = posedirs.T.reshape(V, 3, 9 * (K - 1))
    if posedirs.shape != (V, 3, 9 * (K - 1)):
        raise ConversionError(
            f"posedirs shape {posedirs.shape} does not match "
            f"(V, 3, 9*(K-1)) = ({V}, 3, {9 * (K - 1)})"
        )
    pose_basis = np.zeros((V, 3, 9 * K))
    pose_basis[:, :, 9:] = posedirs

    if "kintree_table" in model:
        kin = _to_array(model["kintree_table"]).astype(np.int64)
        parents = kin[0] if kin.ndim == 2 else kin
    else:
        parents = np.concatenate([[-1], np.zeros(K - 1, dtype=np.int64)])
    parents = parents.astype(np.int64).copy()
    parents[0] = -1  # stored as uint wrap-around in some distributions

    if "vt" in model and "ft" in model:
        uv_coords = _to_array(model["vt"])[:, :2]
        uv_coords = np.clip(uv_coords, 0.0, 1.0)
        # internal convention: v grows downward
        uv_coords = np.column_stack([uv_coords[:, 0], 1.0 - uv_coords[:, 1]])
        uv_faces = _to_array(model["ft"]).astype(np.int64)
    else:
        uv_coords, uv_faces = _fallback_uv(template, faces)

    if pairs_path is None:
        pairs_path = os.path.join(os.path.dirname(os.path.abspath(__file__)),
                                  "pairs_ibug68.json")
    with open(pairs_path, "r", encoding="utf-8") as fh:
        pairs = json.load(fh)

    arrays = {
        "template": template,
        "shape_basis": shape_basis,
        "expr_basis": expr_basis,
        "pose_basis": pose_basis,
        "joint_regressor": joint_regressor,
        "skinning_weights": weights,
        "kinematic_parents": parents.astype(np.float64),
        "faces": faces.astype(np.float64),
        "uv_coords": uv_coords,
        "uv_faces": uv_faces.astype(np.float64),
        "landmark_embedding": np.concatenate(
            [lmk_faces[:, None], lmk_bary], axis=1),
        "eye_pairs": np.asarray(pairs["eye_pairs"], dtype=np.float64),
        "lip_pairs": np.asarray(pairs["lip_pairs"], dtype=np.float64),
        "mouth_polygon": np.asarray(pairs["mouth_polygon"], dtype=np.float64),
    }

    os.makedirs(out_dir, exist_ok=True)
    entries = []
    checksums = {}
    for name in ARRAY_ORDER:
        arr = np.ascontiguousarray(arrays[name], dtype=np.float64)
        blob = arr.astype("<f8").tobytes()
        fname = f"{name}.bin"
        with open(os.path.join(out_dir, fname), "wb") as fh:
            fh.write(blob)
        entries.append({"name": name, "shape": list(arr.shape),
                        "file": fname, "dtype": "f64"})
        checksums[name] = hashlib.sha256(blob).hexdigest()

    dims = {"V": int(V), "F": int(len(faces)), "K": int(K),
            "n_beta": int(n_beta), "n_psi": int(n_psi)}
    manifest = {"format_version": FORMAT_VERSION, "dims": dims,
                "arrays": entries}
    with open(os.path.join(out_dir, "manifest.json"), "w",
              encoding="ascii") as fh:
        json.dump(manifest, fh, indent=1)
        fh.write("\n")

    return {
        "dims": dims,
        "arrays": {e["name"]: e["shape"] for e in entries},
        "sha256": checksums,
    }


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--model", required=True,
                        help="model pickle (native serialized form)")
    parser.add_argument("--landmarks", required=True,
                        help="landmark embedding .npy/.npz")
    parser.add_argument("--out", required=True, help="output asset directory")
    parser.add_argument("--n-beta", type=int, default=100)
    parser.add_argument("--n-psi", type=int, default=50)
    parser.add_argument("--pairs", default=None,
                        help="override the bundled eye/lip pair JSON")
    opts = parser.parse_args(argv)
    try:
        report = convert(opts.model, opts.landmarks, opts.out,
                         n_beta=opts.n_beta, n_psi=opts.n_psi,
                         pairs_path=opts.pairs)
    except ConversionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(json.dumps(report, indent=1))
    return 0


if __name__ == "__main__":
    sys.exit(main())
