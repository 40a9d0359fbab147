"""Mesh metrics: alignment, chamfer distance, normal error, completeness."""

import numpy as np
import pytest

from mvflame.assets import icosphere, make_mini_model
from mvflame.decoder import rodrigues
from mvflame.metrics import (AlignedMeshPair, DegenerateCorrespondences,
                             Similarity, TriMesh, align_similarity,
                             chamfer_distance, completeness_ratio,
                             evaluate_pair, mean_normal_error,
                             point_to_surface, sample_surface)

ASSETS = make_mini_model(0)


def plane_mesh(z=0.0, size=1.0, n=4):
    xs = np.linspace(-size, size, n)
    verts = np.array([[x, y, z] for y in xs for x in xs])
    faces = []
    for r in range(n - 1):
        for c in range(n - 1):
            a = r * n + c
            faces.append([a, a + 1, a + n])
            faces.append([a + 1, a + n + 1, a + n])
    return verts, np.array(faces, dtype=np.int64)


class TestAlignSimilarity:
    def test_identity_on_identical_sets(self):
        pts = np.random.default_rng(0).normal(size=(30, 3))
        t = align_similarity(pts, pts)
        assert abs(t.scale - 1.0) < 1e-12
        assert np.abs(t.rotation - np.eye(3)).max() < 1e-10
        assert np.abs(t.translation).max() < 1e-12

    def test_recovers_known_similarity(self):
        rng = np.random.default_rng(1)
        pts = rng.normal(size=(50, 3))
        R = rodrigues(rng.normal(size=3))
        s = 2.37
        t = np.array([0.4, -1.2, 0.05])
        target = s * pts @ R.T + t
        got = align_similarity(pts, target)
        assert abs(got.scale - s) < 1e-9
        assert np.abs(got.rotation - R).max() < 1e-9
        assert np.abs(got.translation - t).max() < 1e-9
        assert np.abs(got.apply(pts) - target).max() < 1e-9

    def test_two_points_rejected(self):
        with pytest.raises(DegenerateCorrespondences):
            align_similarity(np.zeros((2, 3)), np.zeros((2, 3)))

    def test_collinear_rejected(self):
        t = np.linspace(0, 1, 10)
        pts = np.stack([t, t, t], axis=1)
        with pytest.raises(DegenerateCorrespondences):
            align_similarity(pts, pts)


class TestSampling:
    def test_samples_on_surface(self):
        verts, faces = icosphere(1, radius=1.0)
        mesh = TriMesh(verts, faces)
        pts, normals, fid = sample_surface(mesh, 2000, np.random.default_rng(0))
        assert len(pts) == 2000
        r = np.linalg.norm(pts, axis=1)
        assert r.max() <= 1.0 + 1e-12  # faces are chords, inside the sphere
        assert r.min() > 0.9
        assert np.abs(np.linalg.norm(normals, axis=1) - 1.0).max() < 1e-9

    def test_deterministic_per_seed(self):
        verts, faces = plane_mesh()
        mesh = TriMesh(verts, faces)
        a = sample_surface(mesh, 500, np.random.default_rng(7))[0]
        b = sample_surface(mesh, 500, np.random.default_rng(7))[0]
        assert np.array_equal(a, b)


class TestPointToSurface:
    def test_point_on_triangle_zero(self):
        verts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0]], dtype=float)
        mesh = TriMesh(verts, np.array([[0, 1, 2]]))
        d, idx = point_to_surface(np.array([[0.2, 0.3, 0.0]]), mesh)
        assert d[0] < 1e-12 and idx[0] == 0

    def test_above_interior_plane_distance(self):
        verts = np.array([[0, 0, 0], [2, 0, 0], [0, 2, 0]], dtype=float)
        mesh = TriMesh(verts, np.array([[0, 1, 2]]))
        d, _ = point_to_surface(np.array([[0.5, 0.5, 0.7]]), mesh)
        assert abs(d[0] - 0.7) < 1e-12

    def test_beyond_vertex_and_edge(self):
        verts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0]], dtype=float)
        mesh = TriMesh(verts, np.array([[0, 1, 2]]))
        d, _ = point_to_surface(np.array([[-1.0, -1.0, 0.0]]), mesh)
        assert abs(d[0] - np.sqrt(2.0)) < 1e-12  # nearest is vertex (0,0,0)
        d, _ = point_to_surface(np.array([[0.5, -2.0, 0.0]]), mesh)
        assert abs(d[0] - 2.0) < 1e-12  # nearest on edge y=0

    def test_matches_dense_grid_oracle(self):
        rng = np.random.default_rng(3)
        verts = rng.normal(size=(3, 3))
        mesh = TriMesh(verts, np.array([[0, 1, 2]]))
        pts = rng.normal(size=(10, 3)) * 2
        d, _ = point_to_surface(pts, mesh)
        # dense barycentric grid oracle
        g = np.linspace(0, 1, 201)
        uu, vv = np.meshgrid(g, g)
        keep = uu + vv <= 1.0
        bary_pts = (verts[0][None]
                    + uu[keep][:, None] * (verts[1] - verts[0])[None]
                    + vv[keep][:, None] * (verts[2] - verts[0])[None])
        for i, p in enumerate(pts):
            grid_d = np.linalg.norm(bary_pts - p, axis=1).min()
            assert d[i] <= grid_d + 1e-9
            assert grid_d - d[i] < 2e-2  # grid resolution slack


class TestChamfer:
    def test_self_distance_zero(self):
        verts, faces = icosphere(1, radius=0.1)
        pair = AlignedMeshPair(TriMesh(verts, faces), TriMesh(verts, faces),
                               Similarity.identity())
        assert chamfer_distance(pair) < 1e-6

    def test_concentric_spheres_analytic(self):
        v1, f1 = icosphere(3, radius=1.0)
        v2, f2 = icosphere(3, radius=1.001)
        pair = AlignedMeshPair(TriMesh(v1, f1), TriMesh(v2, f2),
                               Similarity.identity())
        cd = chamfer_distance(pair, unit_to_mm=1000.0)
        assert abs(cd - 1.0) < 0.05  # 1 mm within 5%

    def test_offset_planes(self):
        v1, f1 = plane_mesh(z=0.0)
        v2, f2 = plane_mesh(z=0.004)
        pair = AlignedMeshPair(TriMesh(v1, f1), TriMesh(v2, f2),
                               Similarity.identity())
        cd = chamfer_distance(pair)
        assert abs(cd - 4.0) < 0.2

    def test_symmetric_in_arguments(self):
        v1, f1 = icosphere(1, radius=0.1)
        v2, f2 = plane_mesh(z=0.15, size=0.2)
        a = chamfer_distance(AlignedMeshPair(TriMesh(v1, f1), TriMesh(v2, f2),
                                             Similarity.identity()), seed=5)
        b = chamfer_distance(AlignedMeshPair(TriMesh(v2, f2), TriMesh(v1, f1),
                                             Similarity.identity()), seed=5)
        assert abs(a - b) < 0.01 * max(a, b)  # sampling noise only

    def test_empty_mesh_rejected(self):
        with pytest.raises(ValueError):
            TriMesh(np.zeros((3, 3)), np.zeros((0, 3), dtype=np.int64))


class TestNormalError:
    def test_self_zero(self):
        verts, faces = icosphere(2, radius=0.1)
        pair = AlignedMeshPair(TriMesh(verts, faces), TriMesh(verts, faces),
                               Similarity.identity())
        # arccos conditioning near 1.0 bounds the attainable precision
        assert mean_normal_error(pair) < 1e-6

    def test_tilted_plane(self):
        v1, f1 = plane_mesh(z=0.0)
        ang = 0.1
        R = rodrigues([ang, 0.0, 0.0])
        v2 = v1 @ R.T
        pair = AlignedMeshPair(TriMesh(v1, f1), TriMesh(v2, f1.copy()),
                               Similarity.identity())
        assert abs(mean_normal_error(pair) - ang) < 1e-3

    def test_rotated_sphere_symmetric(self):
        verts, faces = icosphere(3, radius=1.0)
        R = rodrigues([0.0, 0.4, 0.0])
        pair = AlignedMeshPair(TriMesh(verts, faces),
                               TriMesh(verts @ R.T, faces.copy()),
                               Similarity.identity())
        # a sphere rotated onto itself: normals rotate with the surface, so
        # the residual is pure facet discretization (~0.056 rad at subdiv 3,
        # vs 0.4 rad of applied rotation)
        assert mean_normal_error(pair) < 0.07

    def test_invariant_to_common_rigid_transform(self):
        verts, faces = icosphere(1, radius=0.1)
        v2 = verts * 1.0 + np.array([0.0, 0.0, 0.02])
        base = AlignedMeshPair(TriMesh(verts, faces), TriMesh(v2, faces.copy()),
                               Similarity.identity())
        R = rodrigues([0.2, -0.1, 0.3])
        t = np.array([1.0, 2.0, -0.5])
        moved = AlignedMeshPair(
            TriMesh(verts @ R.T + t, faces),
            TriMesh(v2 @ R.T + t, faces.copy()),
            Similarity.identity(),
        )
        for metric in (chamfer_distance, mean_normal_error):
            assert abs(metric(base) - metric(moved)) < 5e-3


class TestCompleteness:
    def test_identical_meshes_full(self):
        verts, faces = icosphere(1, radius=0.1)
        pair = AlignedMeshPair(TriMesh(verts, faces), TriMesh(verts, faces),
                               Similarity.identity())
        assert completeness_ratio(pair) == 1.0

    def test_far_prediction_zero(self):
        verts, faces = icosphere(1, radius=0.1)
        pair = AlignedMeshPair(TriMesh(verts + 10.0, faces),
                               TriMesh(verts, faces), Similarity.identity())
        assert completeness_ratio(pair) == 0.0

    def test_half_covered_plane(self):
        gt_v, gt_f = plane_mesh(z=0.0, size=1.0, n=9)
        # prediction covers only x >= 0 (half of the gt area)
        pred_v = gt_v.copy()
        pred_v[:, 0] = np.abs(pred_v[:, 0])
        keep = [i for i, f in enumerate(gt_f)
                if (gt_v[f][:, 0] >= -1e-9).all()]
        pred = TriMesh(gt_v, gt_f[keep])
        pair = AlignedMeshPair(pred, TriMesh(gt_v, gt_f), Similarity.identity())
        cr = completeness_ratio(pair, threshold_mm=5.0)
        assert abs(cr - 0.5) < 0.03

    def test_monotone_in_threshold(self):
        v1, f1 = icosphere(1, radius=0.1)
        v2, f2 = icosphere(1, radius=0.105)
        pair = AlignedMeshPair(TriMesh(v1, f1), TriMesh(v2, f2),
                               Similarity.identity())
        crs = [completeness_ratio(pair, threshold_mm=t) for t in (1, 3, 5, 8)]
        assert all(a <= b + 1e-12 for a, b in zip(crs, crs[1:]))


def test_evaluate_pair_self_is_perfect():
    verts, faces = icosphere(1, radius=0.1)
    report = evaluate_pair(verts, faces, verts, faces)
    assert report["cd_mm"] < 1e-6
    assert report["mne_rad"] < 1e-6
    assert report["cr"] == 1.0
