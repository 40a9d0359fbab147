"""Asset container: round trips, validation, mini-model contracts."""

import os

import numpy as np
import pytest

from mvflame.assets import (AssetError, AssetValidationError, load_assets,
                            make_mini_model, read_manifest, save_assets,
                            validate_assets)


@pytest.fixture(scope="module")
def mini():
    return make_mini_model(0)


def _assets_bytes(assets):
    out = {}
    for name in assets.__dataclass_fields__:
        arr = getattr(assets, name)
        if isinstance(arr, np.ndarray):
            out[name] = arr.tobytes()
    return out


class TestMiniModel:
    def test_icosphere_counts(self, mini):
        assert mini.n_vertices == 162  # 10 * 4^2 + 2
        assert mini.n_faces == 320
        assert mini.n_joints == 2

    def test_deterministic_per_seed(self):
        a = _assets_bytes(make_mini_model(0))
        b = _assets_bytes(make_mini_model(0))
        assert a == b

    def test_seeds_differ(self):
        a = make_mini_model(0)
        b = make_mini_model(1)
        assert not np.array_equal(a.shape_basis, b.shape_basis)

    def test_passes_validation(self, mini):
        validate_assets(mini)

    def test_outward_ccw_faces(self, mini):
        v, f = mini.template, mini.faces
        vol = np.einsum("ij,ij->i", v[f[:, 0]],
                        np.cross(v[f[:, 1]], v[f[:, 2]])).sum() / 6.0
        assert vol > 0

    def test_basis_magnitude_cap(self, mini):
        radius = np.linalg.norm(mini.template, axis=1).max()
        for basis in (mini.shape_basis, mini.expr_basis):
            disp = np.linalg.norm(basis, axis=1)  # (V, n)
            assert disp.max() <= 0.05 * radius + 1e-12

    def test_jaw_controls_lower_vertices(self, mini):
        w_jaw = mini.skinning_weights[:, 1]
        y = mini.template[:, 1]
        assert w_jaw[y < -0.06].min() > 0.9
        assert w_jaw[y > 0.0].max() < 1e-9

    def test_landmarks_on_front_hemisphere(self, mini):
        tri = mini.template[mini.faces[mini.lmk_faces]]
        pts = np.einsum("lc,lcj->lj", mini.lmk_bary, tri)
        assert (pts[:, 2] > 0).all()

    def test_pair_sets(self, mini):
        assert mini.eye_pairs.tolist() == [[37, 41], [38, 40], [43, 47], [44, 46]]
        assert mini.lip_pairs.tolist() == [[61, 67], [62, 66], [63, 65], [60, 64]]
        assert mini.mouth_polygon.tolist() == list(range(60, 68))


class TestRoundTrip:
    def test_save_load_bit_exact(self, mini, tmp_path):
        save_assets(mini, tmp_path / "m")
        again = load_assets(tmp_path / "m")
        assert _assets_bytes(mini) == _assets_bytes(again)

    def test_mini_reload_v162(self, mini, tmp_path):
        save_assets(mini, tmp_path / "m")
        assert load_assets(tmp_path / "m").n_vertices == 162

    def test_save_load_save_fixpoint(self, mini, tmp_path):
        save_assets(mini, tmp_path / "a")
        save_assets(load_assets(tmp_path / "a"), tmp_path / "b")
        for name in sorted(os.listdir(tmp_path / "a")):
            with open(tmp_path / "a" / name, "rb") as fa, \
                 open(tmp_path / "b" / name, "rb") as fb:
                assert fa.read() == fb.read(), name

    def test_unwritable_path_raises(self, mini, tmp_path):
        # A path that descends through a regular file cannot be created,
        # no matter the privileges of the test runner.
        blocker = tmp_path / "blocker"
        blocker.write_text("not a directory")
        with pytest.raises(OSError):
            save_assets(mini, blocker / "sub")


class TestLoadErrors:
    def test_missing_array(self, mini, tmp_path):
        save_assets(mini, tmp_path / "m")
        os.remove(tmp_path / "m" / "skinning_weights.bin")
        with pytest.raises(AssetError, match="skinning_weights"):
            load_assets(tmp_path / "m")

    def test_missing_manifest_entry(self, mini, tmp_path):
        save_assets(mini, tmp_path / "m")
        import json

        mpath = tmp_path / "m" / "manifest.json"
        with open(mpath) as fh:
            manifest = json.load(fh)
        manifest["arrays"] = [e for e in manifest["arrays"]
                              if e["name"] != "skinning_weights"]
        with open(mpath, "w") as fh:
            json.dump(manifest, fh)
        with pytest.raises(AssetError, match="missing array 'skinning_weights'"):
            load_assets(tmp_path / "m")

    def test_truncated_blob(self, mini, tmp_path):
        save_assets(mini, tmp_path / "m")
        path = tmp_path / "m" / "template.bin"
        data = path.read_bytes()
        path.write_bytes(data[:-16])
        with pytest.raises(AssetError, match="template"):
            load_assets(tmp_path / "m")

    def test_shape_mismatch(self, mini, tmp_path):
        save_assets(mini, tmp_path / "m")
        import json

        mpath = tmp_path / "m" / "manifest.json"
        with open(mpath) as fh:
            manifest = json.load(fh)
        for e in manifest["arrays"]:
            if e["name"] == "template":
                e["shape"] = [e["shape"][0] - 1, 3]
        with open(mpath, "w") as fh:
            json.dump(manifest, fh)
        with pytest.raises(AssetError, match="template"):
            load_assets(tmp_path / "m")

    def test_bad_skinning_row_sum(self, mini, tmp_path):
        save_assets(mini, tmp_path / "m")
        path = tmp_path / "m" / "skinning_weights.bin"
        w = np.frombuffer(path.read_bytes(), dtype="<f8").reshape(162, 2).copy()
        w[0] *= 0.9
        path.write_bytes(w.astype("<f8").tobytes())
        with pytest.raises(AssetValidationError, match="skinning_weights"):
            load_assets(tmp_path / "m")

    def test_bad_parent_order(self, mini, tmp_path):
        save_assets(mini, tmp_path / "m")
        path = tmp_path / "m" / "kinematic_parents.bin"
        path.write_bytes(np.array([-1.0, 5.0]).astype("<f8").tobytes())
        with pytest.raises(AssetValidationError, match="kinematic_parents"):
            load_assets(tmp_path / "m")


class TestManifest:
    def test_overlapping_offsets_rejected(self, mini, tmp_path):
        save_assets(mini, tmp_path / "m")
        import json

        mpath = tmp_path / "m" / "manifest.json"
        with open(mpath) as fh:
            manifest = json.load(fh)
        # Point two arrays at overlapping spans of one blob.
        manifest["arrays"][0]["file"] = manifest["arrays"][1]["file"]
        manifest["arrays"][0]["offset"] = 0
        manifest["arrays"][1]["offset"] = 8
        with open(mpath, "w") as fh:
            json.dump(manifest, fh)
        with pytest.raises(AssetError, match="overlap"):
            read_manifest(tmp_path / "m")
