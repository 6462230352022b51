"""Triangle mesh container and exact spatial queries.

The surface index is an axis-aligned BVH over triangles (leaf size <= 8)
with branch-and-bound closest-point traversal; queries are exact, not
approximate, because residual computation depends on true surface distances.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit


class MeshError(ValueError):
    """Invalid mesh geometry or topology."""


@dataclass(frozen=True)
class Mesh:
    positions: np.ndarray  # (V, 3) float64
    faces: np.ndarray      # (F, 3) int32
    frame_index: int = 0

    def __post_init__(self):
        pos = np.ascontiguousarray(np.asarray(self.positions, dtype=np.float64))
        fac = np.ascontiguousarray(np.asarray(self.faces, dtype=np.int64))
        if pos.ndim != 2 or pos.shape[1] != 3:
            raise MeshError(f"positions must be (V, 3), got {pos.shape}")
        if fac.size == 0:
            fac = fac.reshape(0, 3)
        if fac.ndim != 2 or fac.shape[1] != 3:
            raise MeshError(f"faces must be (F, 3), got {fac.shape}")
        if not np.isfinite(pos).all():
            raise MeshError("positions contain NaN/Inf")
        if fac.shape[0] > 0:
            if pos.shape[0] < 3:
                raise MeshError("faced mesh needs at least 3 vertices")
            if fac.min() < 0 or fac.max() >= pos.shape[0]:
                bad = int(np.argmax((fac < 0).any(axis=1) | (fac >= pos.shape[0]).any(axis=1)))
                raise MeshError(f"face {bad} references a vertex outside [0, {pos.shape[0]})")
            degen = (fac[:, 0] == fac[:, 1]) | (fac[:, 1] == fac[:, 2]) | (fac[:, 0] == fac[:, 2])
            if degen.any():
                raise MeshError(f"face {int(np.argmax(degen))} repeats a vertex index")
        pos.setflags(write=False)
        fac.setflags(write=False)
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "faces", fac)

    @property
    def num_vertices(self) -> int:
        return self.positions.shape[0]

    @property
    def num_faces(self) -> int:
        return self.faces.shape[0]

    def with_positions(self, positions: np.ndarray, frame_index: int | None = None) -> "Mesh":
        """Same topology, new geometry."""
        return Mesh(positions, self.faces,
                    self.frame_index if frame_index is None else frame_index)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        if self.num_vertices == 0:
            raise MeshError("empty mesh has no bounds")
        return self.positions.min(axis=0), self.positions.max(axis=0)


def nearest_vertex(mesh: Mesh, point) -> int:
    """Index of the position closest to ``point``; ties go to the lowest index."""
    if mesh.num_vertices == 0:
        raise MeshError("nearest_vertex on empty mesh")
    d2 = np.sum((mesh.positions - np.asarray(point, dtype=np.float64)) ** 2, axis=1)
    return int(np.argmin(d2))


def farthest_point_sample(mesh: Mesh, count: int, seed: int) -> np.ndarray:
    """Greedy max-min sampling of ``count`` vertex indices, seeded first pick."""
    V = mesh.num_vertices
    if count > V:
        raise MeshError(f"cannot sample {count} vertices from {V}")
    if count <= 0:
        return np.zeros(0, dtype=np.int64)
    rng = np.random.default_rng(seed)
    picks = np.empty(count, dtype=np.int64)
    picks[0] = int(rng.integers(V))
    min_d2 = np.sum((mesh.positions - mesh.positions[picks[0]]) ** 2, axis=1)
    for i in range(1, count):
        nxt = int(np.argmax(min_d2))
        picks[i] = nxt
        np.minimum(min_d2, np.sum((mesh.positions - mesh.positions[nxt]) ** 2, axis=1),
                   out=min_d2)
    return picks


# --- BVH kernels ------------------------------------------------------------

@njit(cache=True, inline="always")
def _closest_on_segment(ax, ay, az, bx, by, bz, px, py, pz):
    dx, dy, dz = bx - ax, by - ay, bz - az
    dd = dx * dx + dy * dy + dz * dz
    if dd <= 0.0:
        return ax, ay, az
    t = ((px - ax) * dx + (py - ay) * dy + (pz - az) * dz) / dd
    if t < 0.0:
        t = 0.0
    elif t > 1.0:
        t = 1.0
    return ax + t * dx, ay + t * dy, az + t * dz


@njit(cache=True)
def _closest_on_triangle(ax, ay, az, bx, by, bz, cx, cy, cz, px, py, pz):
    # minimum over the three edge segments and the validated face projection;
    # unlike region-walk formulations this stays exact on sliver and collapsed
    # triangles (region misclassification cannot happen, only float eval noise)
    qx, qy, qz = _closest_on_segment(ax, ay, az, bx, by, bz, px, py, pz)
    dx, dy, dz = qx - px, qy - py, qz - pz
    best = dx * dx + dy * dy + dz * dz

    ex, ey, ez = _closest_on_segment(ax, ay, az, cx, cy, cz, px, py, pz)
    dx, dy, dz = ex - px, ey - py, ez - pz
    d2 = dx * dx + dy * dy + dz * dz
    if d2 < best:
        best = d2
        qx, qy, qz = ex, ey, ez

    ex, ey, ez = _closest_on_segment(bx, by, bz, cx, cy, cz, px, py, pz)
    dx, dy, dz = ex - px, ey - py, ez - pz
    d2 = dx * dx + dy * dy + dz * dz
    if d2 < best:
        best = d2
        qx, qy, qz = ex, ey, ez

    abx, aby, abz = bx - ax, by - ay, bz - az
    acx, acy, acz = cx - ax, cy - ay, cz - az
    nx = aby * acz - abz * acy
    ny = abz * acx - abx * acz
    nz = abx * acy - aby * acx
    nn = nx * nx + ny * ny + nz * nz
    if nn > 0.0:
        apx, apy, apz = px - ax, py - ay, pz - az
        t = (apx * nx + apy * ny + apz * nz) / nn
        fx, fy, fz = px - t * nx, py - t * ny, pz - t * nz
        # inside test by signed sub-areas against the face normal
        w0 = ((bx - fx) * ((cy - fy) * nz - (cz - fz) * ny)
              + (by - fy) * ((cz - fz) * nx - (cx - fx) * nz)
              + (bz - fz) * ((cx - fx) * ny - (cy - fy) * nx))
        w1 = ((cx - fx) * ((ay - fy) * nz - (az - fz) * ny)
              + (cy - fy) * ((az - fz) * nx - (ax - fx) * nz)
              + (cz - fz) * ((ax - fx) * ny - (ay - fy) * nx))
        w2 = ((ax - fx) * ((by - fy) * nz - (bz - fz) * ny)
              + (ay - fy) * ((bz - fz) * nx - (bx - fx) * nz)
              + (az - fz) * ((bx - fx) * ny - (by - fy) * nx))
        if w0 >= 0.0 and w1 >= 0.0 and w2 >= 0.0:
            dx, dy, dz = fx - px, fy - py, fz - pz
            d2 = dx * dx + dy * dy + dz * dz
            if d2 < best:
                qx, qy, qz = fx, fy, fz
    return qx, qy, qz


@njit(cache=True)
def _box_dist2(nmin, nmax, px, py, pz):
    d = 0.0
    v = px
    if v < nmin[0]:
        d += (nmin[0] - v) * (nmin[0] - v)
    elif v > nmax[0]:
        d += (v - nmax[0]) * (v - nmax[0])
    v = py
    if v < nmin[1]:
        d += (nmin[1] - v) * (nmin[1] - v)
    elif v > nmax[1]:
        d += (v - nmax[1]) * (v - nmax[1])
    v = pz
    if v < nmin[2]:
        d += (nmin[2] - v) * (nmin[2] - v)
    elif v > nmax[2]:
        d += (v - nmax[2]) * (v - nmax[2])
    return d


@njit(cache=True)
def _bvh_query(points, node_min, node_max, node_left, node_right,
               node_start, node_count, perm, tris,
               out_pts, out_faces, out_d2):
    stack = np.empty(128, dtype=np.int64)
    for q in range(points.shape[0]):
        px, py, pz = points[q, 0], points[q, 1], points[q, 2]
        best_d2 = np.inf
        best_face = -1
        bx = by = bz = 0.0
        top = 0
        stack[0] = 0
        while top >= 0:
            node = stack[top]
            top -= 1
            if _box_dist2(node_min[node], node_max[node], px, py, pz) > best_d2:
                continue
            left = node_left[node]
            if left < 0:  # leaf
                start = node_start[node]
                for k in range(node_count[node]):
                    t = perm[start + k]
                    qx, qy, qz = _closest_on_triangle(
                        tris[t, 0, 0], tris[t, 0, 1], tris[t, 0, 2],
                        tris[t, 1, 0], tris[t, 1, 1], tris[t, 1, 2],
                        tris[t, 2, 0], tris[t, 2, 1], tris[t, 2, 2],
                        px, py, pz)
                    dx, dy, dz = qx - px, qy - py, qz - pz
                    d2 = dx * dx + dy * dy + dz * dz
                    if d2 < best_d2 or (d2 == best_d2 and t < best_face):
                        best_d2 = d2
                        best_face = t
                        bx, by, bz = qx, qy, qz
            else:
                right = node_right[node]
                dl = _box_dist2(node_min[left], node_max[left], px, py, pz)
                dr = _box_dist2(node_min[right], node_max[right], px, py, pz)
                # push the farther child first so the nearer is explored next
                if dl <= dr:
                    if dr <= best_d2:
                        top += 1
                        stack[top] = right
                    if dl <= best_d2:
                        top += 1
                        stack[top] = left
                else:
                    if dl <= best_d2:
                        top += 1
                        stack[top] = left
                    if dr <= best_d2:
                        top += 1
                        stack[top] = right
        out_pts[q, 0] = bx
        out_pts[q, 1] = by
        out_pts[q, 2] = bz
        out_faces[q] = best_face
        out_d2[q] = best_d2


_LEAF_SIZE = 8


@dataclass
class _BVHArrays:
    node_min: np.ndarray
    node_max: np.ndarray
    node_left: np.ndarray
    node_right: np.ndarray
    node_start: np.ndarray
    node_count: np.ndarray
    perm: np.ndarray
    tris: np.ndarray


def _build_bvh(tris: np.ndarray, leaf_size: int = _LEAF_SIZE) -> _BVHArrays:
    F = tris.shape[0]
    tri_min = tris.min(axis=1)
    tri_max = tris.max(axis=1)
    centroids = tris.mean(axis=1)
    perm = np.arange(F, dtype=np.int64)

    node_min: list[np.ndarray] = []
    node_max: list[np.ndarray] = []
    node_left: list[int] = []
    node_right: list[int] = []
    node_start: list[int] = []
    node_count: list[int] = []

    def new_node(lo: int, hi: int) -> int:
        idx = len(node_min)
        sub = perm[lo:hi]
        node_min.append(tri_min[sub].min(axis=0))
        node_max.append(tri_max[sub].max(axis=0))
        node_left.append(-1)
        node_right.append(-1)
        node_start.append(lo)
        node_count.append(hi - lo)
        return idx

    # iterative median split on the widest centroid axis
    todo = [(new_node(0, F), 0, F)]
    while todo:
        node, lo, hi = todo.pop()
        if hi - lo <= leaf_size:
            continue
        sub = perm[lo:hi]
        cen = centroids[sub]
        axis = int(np.argmax(cen.max(axis=0) - cen.min(axis=0)))
        order = np.argsort(cen[:, axis], kind="stable")
        perm[lo:hi] = sub[order]
        mid = lo + (hi - lo) // 2
        left = new_node(lo, mid)
        right = new_node(mid, hi)
        node_left[node] = left
        node_right[node] = right
        node_count[node] = 0
        todo.append((left, lo, mid))
        todo.append((right, mid, hi))

    return _BVHArrays(
        node_min=np.asarray(node_min, dtype=np.float64),
        node_max=np.asarray(node_max, dtype=np.float64),
        node_left=np.asarray(node_left, dtype=np.int64),
        node_right=np.asarray(node_right, dtype=np.int64),
        node_start=np.asarray(node_start, dtype=np.int64),
        node_count=np.asarray(node_count, dtype=np.int64),
        perm=perm,
        tris=np.ascontiguousarray(tris),
    )


class SurfaceIndex:
    """Exact closest-point-on-surface queries against one mesh.

    Immutable after construction; safe for concurrent reads.
    """

    def __init__(self, mesh: Mesh):
        if mesh.num_faces == 0:
            raise MeshError("surface index requires at least one face")
        self.mesh = mesh
        tris = mesh.positions[mesh.faces]
        self._bvh = _build_bvh(tris.astype(np.float64))

    def closest_points(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Closest surface points for a batch of queries.

        Returns (points (N,3), face ids (N,), distances (N,)).
        """
        pts = np.ascontiguousarray(np.asarray(points, dtype=np.float64))
        if pts.ndim == 1:
            pts = pts.reshape(1, 3)
        n = pts.shape[0]
        out_pts = np.empty((n, 3), dtype=np.float64)
        out_faces = np.empty(n, dtype=np.int64)
        out_d2 = np.empty(n, dtype=np.float64)
        b = self._bvh
        _bvh_query(pts, b.node_min, b.node_max, b.node_left, b.node_right,
                   b.node_start, b.node_count, b.perm, b.tris,
                   out_pts, out_faces, out_d2)
        return out_pts, out_faces, np.sqrt(out_d2)

    def closest_point(self, point) -> tuple[np.ndarray, int]:
        pts, faces, _ = self.closest_points(np.asarray(point, dtype=np.float64))
        return pts[0], int(faces[0])
