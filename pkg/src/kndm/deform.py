"""Embedded deformation: node graph, influence weights, and the warp operator.

Each vertex moves as a distance-weighted blend of per-node affine transforms:
x' = sum_j w_ij (R_j (x - n_j) + t_j + n_j) over its Q nearest nodes.
Rotations travel as axis-angle 3-vectors; the solver works with matrices and
projects back (see registration).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mesh import Mesh

DEFAULT_Q = 4


@dataclass(frozen=True)
class KeyNodeSet:
    """Sparse control nodes anchored to decoded reference-frame vertices."""

    node_positions: np.ndarray   # (N, 3) float64
    anchor_indices: np.ndarray   # (N,) int64, strictly increasing
    graph_edges: np.ndarray      # (E, 2) int64 node-index pairs

    def __post_init__(self):
        pos = np.asarray(self.node_positions, dtype=np.float64).reshape(-1, 3)
        anchors = np.asarray(self.anchor_indices, dtype=np.int64).reshape(-1)
        edges = np.asarray(self.graph_edges, dtype=np.int64).reshape(-1, 2)
        if pos.shape[0] != anchors.shape[0]:
            raise ValueError("node_positions and anchor_indices length mismatch")
        if anchors.size and np.any(np.diff(anchors) <= 0):
            raise ValueError("anchor_indices must be strictly increasing")
        object.__setattr__(self, "node_positions", pos)
        object.__setattr__(self, "anchor_indices", anchors)
        object.__setattr__(self, "graph_edges", edges)

    @property
    def count(self) -> int:
        return self.node_positions.shape[0]


@dataclass(frozen=True)
class TransformSet:
    """Per-node axis-angle rotation vectors and translations."""

    rotations: np.ndarray     # (N, 3) rotation vectors, |r| < pi + eps
    translations: np.ndarray  # (N, 3) model units

    def __post_init__(self):
        rot = np.asarray(self.rotations, dtype=np.float64).reshape(-1, 3)
        tra = np.asarray(self.translations, dtype=np.float64).reshape(-1, 3)
        if rot.shape != tra.shape:
            raise ValueError("rotations and translations must have equal shape")
        mags = np.linalg.norm(rot, axis=1)
        if mags.size and mags.max() >= np.pi + 1e-6:
            raise ValueError(f"rotation vector magnitude {mags.max():.6f} exceeds pi")
        object.__setattr__(self, "rotations", rot)
        object.__setattr__(self, "translations", tra)

    @property
    def count(self) -> int:
        return self.rotations.shape[0]

    def flatten(self) -> tuple[np.ndarray, np.ndarray]:
        """Row-major (node, then axis) 3N vectors for entropy coding."""
        return self.rotations.reshape(-1).copy(), self.translations.reshape(-1).copy()

    @staticmethod
    def zeros(count: int) -> "TransformSet":
        return TransformSet(np.zeros((count, 3)), np.zeros((count, 3)))


@dataclass(frozen=True)
class WeightTable:
    """Per-vertex (node index, weight) pairs; rows sum to one."""

    node_ids: np.ndarray  # (V, Q) int64
    weights: np.ndarray   # (V, Q) float64, >= 0

    @property
    def num_vertices(self) -> int:
        return self.node_ids.shape[0]

    @property
    def neighbors(self) -> int:
        return self.node_ids.shape[1]


# --- rotations ---------------------------------------------------------------

def rotvec_to_matrix(r) -> np.ndarray:
    """Rodrigues map; series expansion keeps it exact through r = 0."""
    r = np.asarray(r, dtype=np.float64).reshape(3)
    theta2 = float(r @ r)
    theta = np.sqrt(theta2)
    K = np.array([[0.0, -r[2], r[1]],
                  [r[2], 0.0, -r[0]],
                  [-r[1], r[0], 0.0]])
    if theta < 1e-8:
        a = 1.0 - theta2 / 6.0
        b = 0.5 - theta2 / 24.0
    else:
        a = np.sin(theta) / theta
        b = (1.0 - np.cos(theta)) / theta2
    return np.eye(3) + a * K + b * (K @ K)


def rotvecs_to_matrices(rotvecs: np.ndarray) -> np.ndarray:
    rotvecs = np.asarray(rotvecs, dtype=np.float64).reshape(-1, 3)
    return np.stack([rotvec_to_matrix(r) for r in rotvecs])


def matrix_to_rotvec(M) -> np.ndarray:
    """Inverse Rodrigues via quaternion extraction; canonical |r| <= pi."""
    M = np.asarray(M, dtype=np.float64).reshape(3, 3)
    if np.linalg.det(M) < 0:
        raise ValueError("rotation matrix has negative determinant (reflection)")
    if np.abs(M.T @ M - np.eye(3)).max() > 1e-5:
        raise ValueError("matrix is not orthogonal within tolerance; project first")
    # Shepperd's method: pick the dominant quaternion component for stability.
    t = np.trace(M)
    if t > M[0, 0] and t > M[1, 1] and t > M[2, 2]:
        w = np.sqrt(max(1.0 + t, 0.0)) / 2.0
        x = (M[2, 1] - M[1, 2]) / (4.0 * w)
        y = (M[0, 2] - M[2, 0]) / (4.0 * w)
        z = (M[1, 0] - M[0, 1]) / (4.0 * w)
    elif M[0, 0] >= M[1, 1] and M[0, 0] >= M[2, 2]:
        x = np.sqrt(max(1.0 + M[0, 0] - M[1, 1] - M[2, 2], 0.0)) / 2.0
        w = (M[2, 1] - M[1, 2]) / (4.0 * x)
        y = (M[0, 1] + M[1, 0]) / (4.0 * x)
        z = (M[0, 2] + M[2, 0]) / (4.0 * x)
    elif M[1, 1] >= M[2, 2]:
        y = np.sqrt(max(1.0 + M[1, 1] - M[0, 0] - M[2, 2], 0.0)) / 2.0
        w = (M[0, 2] - M[2, 0]) / (4.0 * y)
        x = (M[0, 1] + M[1, 0]) / (4.0 * y)
        z = (M[1, 2] + M[2, 1]) / (4.0 * y)
    else:
        z = np.sqrt(max(1.0 + M[2, 2] - M[0, 0] - M[1, 1], 0.0)) / 2.0
        w = (M[1, 0] - M[0, 1]) / (4.0 * z)
        x = (M[0, 2] + M[2, 0]) / (4.0 * z)
        y = (M[1, 2] + M[2, 1]) / (4.0 * z)
    if w < 0.0:
        w, x, y, z = -w, -x, -y, -z
    vnorm = np.sqrt(x * x + y * y + z * z)
    if vnorm < 1e-12:
        return np.zeros(3)
    angle = 2.0 * np.arctan2(vnorm, w)
    return np.array([x, y, z]) * (angle / vnorm)


def matrices_to_rotvecs(mats: np.ndarray) -> np.ndarray:
    mats = np.asarray(mats, dtype=np.float64).reshape(-1, 3, 3)
    return np.stack([matrix_to_rotvec(M) for M in mats])


def project_to_rotation(M) -> np.ndarray:
    """Nearest rotation matrix (Frobenius) via polar decomposition."""
    U, _, Vt = np.linalg.svd(np.asarray(M, dtype=np.float64).reshape(3, 3))
    R = U @ Vt
    if np.linalg.det(R) < 0:
        R = U @ np.diag([1.0, 1.0, -1.0]) @ Vt
    return R


# --- node graph and weights ----------------------------------------------------

def build_node_graph(nodes: np.ndarray, K: int) -> np.ndarray:
    """Symmetric K-NN graph over node positions, bridged until connected."""
    nodes = np.asarray(nodes, dtype=np.float64).reshape(-1, 3)
    N = nodes.shape[0]
    if K < 1:
        raise ValueError("K must be >= 1")
    if N <= 1:
        return np.zeros((0, 2), dtype=np.int64)
    d2 = np.sum((nodes[:, None, :] - nodes[None, :, :]) ** 2, axis=2)
    np.fill_diagonal(d2, np.inf)
    k = min(K, N - 1)
    edges = set()
    for j in range(N):
        order = np.argsort(d2[j], kind="stable")[:k]
        for other in order:
            edges.add((min(j, int(other)), max(j, int(other))))

    # union-find connectivity, bridging with the shortest cross-component edge
    parent = list(range(N))

    def find(a: int) -> int:
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for a, b in edges:
        parent[find(a)] = find(b)
    while True:
        roots = {find(i) for i in range(N)}
        if len(roots) == 1:
            break
        best = None
        for a in range(N):
            ra = find(a)
            for b in range(a + 1, N):
                if find(b) != ra and (best is None or d2[a, b] < best[0]):
                    best = (d2[a, b], a, b)
        _, a, b = best
        edges.add((a, b))
        parent[find(a)] = find(b)
    return np.asarray(sorted(edges), dtype=np.int64).reshape(-1, 2)


def compute_influence_weights(vertices: np.ndarray, nodes: np.ndarray, Q: int) -> WeightTable:
    """Distance-falloff weights (1 - d/d_max)^2 over the Q nearest nodes.

    d_max is the distance to the (Q+1)-th nearest node, or 1.01x the Q-th
    when only Q nodes exist. Vertices coincident with a node get weight 1 there.
    """
    vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    nodes = np.asarray(nodes, dtype=np.float64).reshape(-1, 3)
    N = nodes.shape[0]
    if Q < 1:
        raise ValueError("Q must be >= 1")
    if Q > N:
        raise ValueError(f"Q={Q} exceeds node count {N}")
    d = np.sqrt(np.maximum(
        np.sum(vertices ** 2, axis=1)[:, None]
        - 2.0 * vertices @ nodes.T
        + np.sum(nodes ** 2, axis=1)[None, :], 0.0))
    order = np.argsort(d, axis=1, kind="stable")
    ids = order[:, :Q]
    dq = np.take_along_axis(d, ids, axis=1)
    if N > Q:
        d_max = np.take_along_axis(d, order[:, Q:Q + 1], axis=1)
    else:
        d_max = dq[:, -1:] * 1.01
    d_max = np.maximum(d_max, 1e-300)
    raw = np.maximum(1.0 - dq / d_max, 0.0) ** 2

    coincident = dq[:, 0] == 0.0
    raw[coincident] = 0.0
    raw[coincident, 0] = 1.0
    sums = raw.sum(axis=1)
    flat = sums == 0.0  # all Q neighbors exactly at d_max
    raw[flat] = 1.0 / Q
    sums[flat] = 1.0
    return WeightTable(node_ids=ids.astype(np.int64), weights=raw / sums[:, None])


# --- the warp ------------------------------------------------------------------

def deform_points(points: np.ndarray, node_positions: np.ndarray,
                  rotation_matrices: np.ndarray, translations: np.ndarray,
                  weights: WeightTable) -> np.ndarray:
    """Apply the blended per-node affine warp to raw points.

    Evaluated in delta form, x + sum_j w_ij ((R_j - I)(x - n_j) + t_j), which
    equals the blend of full node transforms (weights sum to one) but keeps
    the identity transform bit-exact.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if weights.num_vertices != points.shape[0]:
        raise ValueError("weight table does not match vertex count")
    ids = weights.node_ids
    w = weights.weights
    local = points[:, None, :] - node_positions[ids]      # (V, Q, 3)
    rot = np.einsum("vqab,vqb->vqa", rotation_matrices[ids], local)
    delta = rot - local + translations[ids]
    return points + np.einsum("vq,vqa->va", w, delta)


def apply_deformation(source: Mesh, nodes: KeyNodeSet, transforms: TransformSet,
                      weights: WeightTable) -> Mesh:
    """Deform ``source`` by the node transforms; topology is copied."""
    if transforms.count != nodes.count:
        raise ValueError("transform count does not match node count")
    if weights.num_vertices != source.num_vertices:
        raise ValueError("weight table does not match source vertex count")
    mats = rotvecs_to_matrices(transforms.rotations)
    new_pos = deform_points(source.positions, nodes.node_positions, mats,
                            transforms.translations, weights)
    return source.with_positions(new_pos)
