import numpy as np
import pytest

from kndm.mesh import (Mesh, MeshError, SurfaceIndex, farthest_point_sample,
                       nearest_vertex)

from conftest import brute_force_closest, random_blob_mesh


def test_mesh_invariants():
    with pytest.raises(MeshError):
        Mesh(np.array([[0, 0, np.nan]]), np.zeros((0, 3)))
    with pytest.raises(MeshError):
        Mesh(np.zeros((3, 3)), np.array([[0, 1, 3]]))  # out of range
    with pytest.raises(MeshError):
        Mesh(np.zeros((3, 3)), np.array([[0, 1, 1]]))  # repeated index


def test_mesh_positions_immutable():
    m = Mesh(np.zeros((3, 3)), np.array([[0, 1, 2]]))
    with pytest.raises(ValueError):
        m.positions[0, 0] = 1.0


def test_closest_point_on_interior_is_identity():
    m = Mesh(np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]]), np.array([[0, 1, 2]]))
    idx = SurfaceIndex(m)
    p = np.array([0.2, 0.2, 0.0])
    point, face = idx.closest_point(p)
    assert face == 0
    np.testing.assert_allclose(point, p, atol=1e-15)


def test_closest_point_orthogonal_projection():
    m = Mesh(np.array([[-1.0, -1, 0], [2, -1, 0], [-1, 2, 0]]), np.array([[0, 1, 2]]))
    idx = SurfaceIndex(m)
    point, _ = idx.closest_point(np.array([0.0, 0.0, 1.0]))
    np.testing.assert_allclose(point, [0.0, 0.0, 0.0], atol=1e-15)


def test_closest_point_barycentric_on_surface(rng):
    mesh = random_blob_mesh(rng)
    idx = SurfaceIndex(mesh)
    queries = rng.normal(scale=2.0, size=(200, 3))
    pts, faces, _ = idx.closest_points(queries)
    tri = mesh.positions[mesh.faces[faces]]
    # returned point must lie on its triangle: barycentric in [0,1], sum 1
    for k in range(len(queries)):
        a, b, c = tri[k]
        M = np.stack([b - a, c - a], axis=1)
        uv, res, _, _ = np.linalg.lstsq(M, pts[k] - a, rcond=None)
        u, v = uv
        assert -1e-9 <= u <= 1 + 1e-9
        assert -1e-9 <= v <= 1 + 1e-9
        assert u + v <= 1 + 1e-9
        np.testing.assert_allclose(a + M @ uv, pts[k], atol=1e-9)


def test_closest_point_matches_brute_force(rng):
    mesh = random_blob_mesh(rng)  # about 50 triangles
    idx = SurfaceIndex(mesh)
    tris = mesh.positions[mesh.faces]
    queries = rng.normal(scale=1.5, size=(1000, 3))
    _, _, dists = idx.closest_points(queries)
    for q, d in zip(queries, dists):
        _, d_ref, _ = brute_force_closest(tris, q)
        assert abs(d - d_ref) <= 1e-9


def test_nearest_vertex_exact_and_ties():
    m = Mesh(np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0],
                       [4, 0, 0], [5, 0, 0], [6, 0, 0], [7, 0, 0]]),
             np.zeros((0, 3)))
    assert nearest_vertex(m, m.positions[5]) == 5
    # equidistant between vertices 2 and 7 resolves to the lower index
    m2 = Mesh(np.array([[0.0, 0, 0], [9, 9, 9], [1, 0, 0], [9, 9, 0],
                        [8, 0, 0], [7, 7, 7], [5, 5, 5], [3, 0, 0]]),
              np.zeros((0, 3)))
    assert nearest_vertex(m2, [2.0, 0, 0]) == 2


def test_nearest_vertex_matches_linear_scan(rng):
    pts = rng.normal(size=(1000, 3))
    m = Mesh(pts, np.zeros((0, 3)))
    for _ in range(50):
        q = rng.normal(size=3)
        expect = int(np.argmin(np.sum((pts - q) ** 2, axis=1)))
        assert nearest_vertex(m, q) == expect


def test_fps_full_count_returns_all_vertices(rng):
    pts = rng.normal(size=(20, 3))
    m = Mesh(pts, np.zeros((0, 3)))
    picks = farthest_point_sample(m, 20, seed=7)
    assert sorted(picks.tolist()) == list(range(20))


def test_fps_two_picks_are_segment_endpoints():
    pts = np.stack([np.linspace(0, 1, 11), np.zeros(11), np.zeros(11)], axis=1)
    m = Mesh(pts, np.zeros((0, 3)))
    picks = farthest_point_sample(m, 2, seed=3)
    # whichever the seeded start, the second pick is the farthest endpoint
    assert picks[1] in (0, 10)
    d = abs(pts[picks[0], 0] - pts[picks[1], 0])
    assert d >= max(pts[picks[0], 0], 1 - pts[picks[0], 0]) - 1e-12


def test_fps_cube_corners_beat_center():
    corners = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)],
                       dtype=np.float64)
    pts = np.concatenate([corners, [[0.5, 0.5, 0.5]]])
    m = Mesh(pts, np.zeros((0, 3)))
    for seed in range(5):
        picks = farthest_point_sample(m, 8, seed=seed)
        if 8 in picks:  # center can only appear if it was the seeded start
            assert picks[0] == 8
        else:
            assert sorted(picks.tolist()) == list(range(8))
        # every later pick maximizes the min distance to earlier picks
        for i in range(1, 8):
            chosen = pts[picks[:i]]
            min_d = np.min(np.linalg.norm(pts[:, None] - chosen[None], axis=2), axis=1)
            assert min_d[picks[i]] >= min_d.max() - 1e-12


def test_fps_count_exceeds_vertices():
    m = Mesh(np.zeros((3, 3)) + np.arange(3)[:, None], np.zeros((0, 3)))
    with pytest.raises(MeshError):
        farthest_point_sample(m, 4, seed=0)


def test_surface_index_requires_faces():
    with pytest.raises(MeshError):
        SurfaceIndex(Mesh(np.zeros((4, 3)), np.zeros((0, 3))))


def test_closest_point_on_degenerate_triangles(rng):
    # distinct indices but collapsed positions (as quantization can produce)
    pts = np.array([[0.0, 0, 0], [0.0, 0, 0], [1.0, 0, 0],   # duplicate pair
                    [2.0, 0, 0], [3.0, 0, 0], [4.0, 0, 0]])  # collinear
    mesh = Mesh(pts, np.array([[0, 1, 2], [3, 4, 5]]))
    idx = SurfaceIndex(mesh)
    pts, faces, dists = idx.closest_points(rng.normal(size=(100, 3)))
    assert np.isfinite(pts).all()
    assert np.isfinite(dists).all()
    assert (faces >= 0).all()
    # both faces reduce to segments on the x axis; check one query analytically
    q = np.array([0.5, 1.0, 0.0])
    _, _, d = idx.closest_points(q)
    assert d[0] == pytest.approx(1.0, abs=1e-12)
