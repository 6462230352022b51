"""Shared fixtures and independent geometric oracles.

The closest-point oracle here deliberately uses a different formulation than
the package (plane projection with barycentric tests plus explicit edge
segments, scanned exhaustively over all triangles) so the two can check each
other.
"""

from __future__ import annotations

import numpy as np
import pytest

from kndm.mesh import Mesh


def brute_force_closest(triangles: np.ndarray, point: np.ndarray
                        ) -> tuple[np.ndarray, float, int]:
    """Exhaustive closest point over (F, 3, 3) triangles.

    Returns (closest point, distance, face id); ties resolve to the lowest
    face id via first-minimum argmin.
    """
    a, b, c = triangles[:, 0], triangles[:, 1], triangles[:, 2]
    p = np.asarray(point, dtype=np.float64)

    candidates = []
    # face interior: project onto the plane, test barycentric coordinates
    ab, ac = b - a, c - a
    n = np.cross(ab, ac)
    nn = np.einsum("ij,ij->i", n, n)
    nn_safe = np.where(nn > 0, nn, 1.0)
    t = np.einsum("ij,ij->i", a - p, n) / nn_safe
    proj = p + t[:, None] * n
    # barycentric via dot products
    d00 = np.einsum("ij,ij->i", ab, ab)
    d01 = np.einsum("ij,ij->i", ab, ac)
    d11 = np.einsum("ij,ij->i", ac, ac)
    d20 = np.einsum("ij,ij->i", proj - a, ab)
    d21 = np.einsum("ij,ij->i", proj - a, ac)
    denom = d00 * d11 - d01 * d01
    denom_safe = np.where(np.abs(denom) > 0, denom, 1.0)
    v = (d11 * d20 - d01 * d21) / denom_safe
    w = (d00 * d21 - d01 * d20) / denom_safe
    inside = (v >= 0) & (w >= 0) & (v + w <= 1) & (np.abs(denom) > 0) & (nn > 0)
    face_pt = np.where(inside[:, None], proj, np.inf)
    candidates.append(face_pt)
    # the three edge segments
    for e0, e1 in ((a, b), (b, c), (c, a)):
        d = e1 - e0
        dd = np.einsum("ij,ij->i", d, d)
        dd = np.where(dd > 0, dd, 1.0)
        s = np.clip(np.einsum("j,ij->i", p, d) - np.einsum("ij,ij->i", e0, d), 0, dd) / dd
        candidates.append(e0 + s[:, None] * d)

    best_pt = None
    best_d2 = None
    for cand in candidates:
        d2 = np.sum((cand - p) ** 2, axis=1)
        if best_d2 is None:
            best_d2 = d2
            best_pt = cand.copy()
        else:
            closer = d2 < best_d2
            best_d2 = np.where(closer, d2, best_d2)
            best_pt[closer] = cand[closer]
    face = int(np.argmin(best_d2))
    return best_pt[face], float(np.sqrt(best_d2[face])), face


def random_blob_mesh(rng: np.random.Generator, num_points: int = 30) -> Mesh:
    """Convex-hull mesh over random points: watertight, irregular triangles."""
    from scipy.spatial import ConvexHull

    pts = rng.normal(size=(num_points, 3))
    pts *= 0.7 + 0.6 * rng.random((num_points, 1))
    hull = ConvexHull(pts)
    used = np.unique(hull.simplices)
    remap = np.full(num_points, -1, dtype=np.int64)
    remap[used] = np.arange(used.size)
    return Mesh(pts[used], remap[hull.simplices])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
