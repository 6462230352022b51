"""Octree-quantized residual coding for predicted frames.

Residuals are measured against the closest point on the true source surface
(never the closest vertex, which would collapse distinct vertices onto one
target). An unbalanced octree over the predicted frame's vertex positions
carries one mean correction per leaf; its topology is transmitted as prune
flags that the decoder replays against the identical predicted frame, so no
geometry of the tree itself is coded.
"""

from __future__ import annotations

import heapq
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .bitio import BitReader, BitWriter, CorruptStream
from .entropy import decode_vector, encode_vector
from .mesh import Mesh, SurfaceIndex

_MAX_PLAUSIBLE_DEPTH = 64


@dataclass(frozen=True)
class ResidualFrame:
    residuals: np.ndarray       # (V, 3) displacement to the source surface
    surface_points: np.ndarray  # (V, 3) the matched closest points

    def __post_init__(self):
        r = np.asarray(self.residuals, dtype=np.float64).reshape(-1, 3)
        s = np.asarray(self.surface_points, dtype=np.float64).reshape(-1, 3)
        if r.shape != s.shape:
            raise ValueError("residuals and surface points must align")
        if not np.isfinite(r).all():
            raise ValueError("non-finite residuals")
        object.__setattr__(self, "residuals", r)
        object.__setattr__(self, "surface_points", s)


def compute_residuals(distorted: Mesh, source_index: SurfaceIndex) -> ResidualFrame:
    """Per-vertex displacement from the predicted frame to the source surface."""
    points, _, _ = source_index.closest_points(distorted.positions)
    return ResidualFrame(residuals=points - distorted.positions,
                         surface_points=points)


class _Node:
    __slots__ = ("center", "half", "depth", "verts", "children", "parent", "leaf")

    def __init__(self, center, half, depth, verts, parent):
        self.center = center
        self.half = half
        self.depth = depth
        self.verts = verts
        self.children: list[int] = []
        self.parent = parent
        self.leaf = True


@dataclass
class ResidualOctree:
    """Octree over a point set; node 0 is the root, nodes listed level order."""

    nodes: list = field(default_factory=list)
    total_vertices: int = 0
    max_depth: int = 0
    leaf_budget: int | None = None  # set once cost-constrained pruning ran

    def active_leaves(self) -> list[int]:
        """Leaf node ids in breadth-first order of the current (pruned) tree."""
        order = []
        queue = deque([0])
        while queue:
            nid = queue.popleft()
            node = self.nodes[nid]
            if node.leaf:
                order.append(nid)
            else:
                queue.extend(node.children)
        return order

    def leaf_count(self) -> int:
        return len(self.active_leaves())

    def leaf_of_vertex(self) -> np.ndarray:
        """Map each vertex to its active leaf id."""
        owner = np.full(self.total_vertices, -1, dtype=np.int64)
        for nid in self.active_leaves():
            owner[self.nodes[nid].verts] = nid
        return owner


def _root_cube(positions: np.ndarray) -> tuple[np.ndarray, float]:
    lo = positions.min(axis=0)
    hi = positions.max(axis=0)
    center = (lo + hi) / 2.0
    half = float((hi - lo).max()) / 2.0
    return center, max(half, 1e-12)


def _split_octants(positions: np.ndarray, verts: np.ndarray,
                   center: np.ndarray) -> list[np.ndarray]:
    """Partition vertex ids into octants; boundary points go to the lower cell."""
    p = positions[verts]
    code = ((p[:, 0] > center[0]).astype(np.int64) << 2) \
        | ((p[:, 1] > center[1]).astype(np.int64) << 1) \
        | (p[:, 2] > center[2]).astype(np.int64)
    return [verts[code == o] for o in range(8)]


_OCTANT_OFFSETS = np.array([[(o >> 2) & 1, (o >> 1) & 1, o & 1]
                            for o in range(8)], dtype=np.float64) * 2.0 - 1.0


def build_balanced_octree(distorted: Mesh, depth: int) -> ResidualOctree:
    """Subdivide fully to ``depth``, dropping empty cells; x-major octant order."""
    if depth < 0:
        raise ValueError("depth must be >= 0")
    positions = distorted.positions
    if positions.shape[0] == 0:
        raise ValueError("cannot build an octree over an empty frame")
    center, half = _root_cube(positions)
    tree = ResidualOctree(total_vertices=positions.shape[0], max_depth=depth)
    tree.nodes.append(_Node(center, half, 0,
                            np.arange(positions.shape[0], dtype=np.int64), -1))
    queue = deque([0])
    while queue:
        nid = queue.popleft()
        node = tree.nodes[nid]
        if node.depth >= depth:
            continue
        node.leaf = False
        for octant, verts in enumerate(_split_octants(positions, node.verts,
                                                      node.center)):
            if verts.size == 0:
                continue
            child_center = node.center + _OCTANT_OFFSETS[octant] * (node.half / 2.0)
            child = _Node(child_center, node.half / 2.0, node.depth + 1, verts, nid)
            tree.nodes.append(child)
            node.children.append(len(tree.nodes) - 1)
            queue.append(len(tree.nodes) - 1)
    return tree


def _node_distortion(tree: ResidualOctree, nid: int, residuals: np.ndarray) -> float:
    r = residuals[tree.nodes[nid].verts]
    return float(((r - r.mean(axis=0)) ** 2).mean())


def node_lambda(tree: ResidualOctree, nid: int, residuals: np.ndarray) -> float:
    """Occupancy-weighted distortion increase per unit of leaf-count saving."""
    node = tree.nodes[nid]
    if node.verts.size == 0:
        raise ValueError("empty octree node")
    if not node.children or len(node.children) <= 1:
        return 0.0
    d_parent = _node_distortion(tree, nid, residuals)
    d_children = sum(
        (tree.nodes[c].verts.size / node.verts.size)
        * _node_distortion(tree, c, residuals)
        for c in node.children)
    p = node.verts.size / tree.total_vertices
    return p * (d_parent - d_children) / (len(node.children) - 1)


def quantized_distortion(tree: ResidualOctree, residuals: np.ndarray) -> float:
    """MSE between the residual frame and its per-leaf mean quantization."""
    total = 0.0
    for nid in tree.active_leaves():
        r = residuals[tree.nodes[nid].verts]
        total += float(((r - r.mean(axis=0)) ** 2).sum())
    return total / (3 * tree.total_vertices)


def _emit_prune_flags(tree: ResidualOctree) -> np.ndarray:
    bits = []
    queue = deque([0])
    while queue:
        nid = queue.popleft()
        node = tree.nodes[nid]
        bits.append(0 if node.leaf else 1)
        if not node.leaf:
            queue.extend(node.children)
    return np.asarray(bits, dtype=np.uint8)


def cost_constrained_prune(tree: ResidualOctree, residuals: np.ndarray,
                           leaf_budget: int) -> tuple[ResidualOctree, np.ndarray]:
    """Greedily collapse the smallest-lambda fringe node until within budget.

    Ties break toward the earlier node in breadth-first order. Returns the
    pruned tree and its topology flag stream (1 = subdivided, 0 = leaf).
    """
    if leaf_budget < 1:
        raise ValueError("leaf budget must be >= 1")

    def is_fringe(nid: int) -> bool:
        node = tree.nodes[nid]
        return (not node.leaf) and all(tree.nodes[c].leaf for c in node.children)

    heap = []
    for nid, node in enumerate(tree.nodes):
        if is_fringe(nid):
            heapq.heappush(heap, (node_lambda(tree, nid, residuals), nid))
    leaves = tree.leaf_count()
    while leaves > leaf_budget and heap:
        _, nid = heapq.heappop(heap)
        if not is_fringe(nid):
            continue
        node = tree.nodes[nid]
        leaves -= len(node.children) - 1
        node.leaf = True
        node.children = []
        parent = node.parent
        if parent >= 0 and is_fringe(parent):
            heapq.heappush(heap, (node_lambda(tree, parent, residuals), parent))
    tree.leaf_budget = leaf_budget
    return tree, _emit_prune_flags(tree)


def rebuild_tree_from_flags(distorted: Mesh, data: bytes, pos: int
                            ) -> tuple[ResidualOctree, int]:
    """Decoder-side topology replay; consumes whole bytes (section aligned)."""
    positions = distorted.positions
    if positions.shape[0] == 0:
        raise CorruptStream("octree flags for an empty frame", pos)
    reader = BitReader(data[pos:])
    center, half = _root_cube(positions)
    tree = ResidualOctree(total_vertices=positions.shape[0],
                          max_depth=_MAX_PLAUSIBLE_DEPTH)
    tree.nodes.append(_Node(center, half, 0,
                            np.arange(positions.shape[0], dtype=np.int64), -1))
    queue = deque([0])
    while queue:
        nid = queue.popleft()
        node = tree.nodes[nid]
        if reader.read_bit() == 0:
            continue
        if node.depth >= _MAX_PLAUSIBLE_DEPTH:
            raise CorruptStream("implausible octree depth", pos)
        node.leaf = False
        for octant, verts in enumerate(_split_octants(positions, node.verts,
                                                      node.center)):
            if verts.size == 0:
                continue
            child_center = node.center + _OCTANT_OFFSETS[octant] * (node.half / 2.0)
            child = _Node(child_center, node.half / 2.0, node.depth + 1, verts, nid)
            tree.nodes.append(child)
            node.children.append(len(tree.nodes) - 1)
            queue.append(len(tree.nodes) - 1)
    return tree, pos + (reader.bit_position + 7) // 8


def mark_ncoc(tree: ResidualOctree, residuals: np.ndarray, threshold: float
              ) -> tuple[np.ndarray, list[int], np.ndarray]:
    """Flag subtrees whose every leaf has |mean residual| below the threshold.

    Returns (flag bits emitted breadth-first for nodes with no flagged
    ancestor, correcting leaf ids in breadth-first order, per-node flags).
    """
    ncoc = np.zeros(len(tree.nodes), dtype=bool)
    # bottom-up over the pruned tree: list order is level order, so reverse works
    order = []
    queue = deque([0])
    while queue:
        nid = queue.popleft()
        order.append(nid)
        queue.extend(tree.nodes[nid].children)
    for nid in reversed(order):
        node = tree.nodes[nid]
        if node.leaf:
            mean = residuals[node.verts].mean(axis=0)
            ncoc[nid] = float(np.linalg.norm(mean)) < threshold
        else:
            ncoc[nid] = all(ncoc[c] for c in node.children)

    bits = []
    correcting: list[int] = []
    queue = deque([0])
    while queue:
        nid = queue.popleft()
        node = tree.nodes[nid]
        bits.append(1 if ncoc[nid] else 0)
        if ncoc[nid]:
            continue
        if node.leaf:
            correcting.append(nid)
        else:
            queue.extend(node.children)
    return np.asarray(bits, dtype=np.uint8), correcting, ncoc


def _read_ncoc(tree: ResidualOctree, data: bytes, pos: int
               ) -> tuple[list[int], np.ndarray, int]:
    reader = BitReader(data[pos:])
    ncoc = np.zeros(len(tree.nodes), dtype=bool)
    correcting: list[int] = []
    queue = deque([0])
    while queue:
        nid = queue.popleft()
        node = tree.nodes[nid]
        flagged = reader.read_bit() == 1
        if flagged:
            ncoc[nid] = True
            continue
        if node.leaf:
            correcting.append(nid)
        else:
            queue.extend(node.children)
    return correcting, ncoc, pos + (reader.bit_position + 7) // 8


@dataclass(frozen=True)
class ResidualConfig:
    depth: int = 5
    leaf_budget: int = 512
    ncoc_threshold: float = 0.0
    n_levels: int = 128
    ncoc_enabled: bool = False

    @property
    def effective_threshold(self) -> float:
        return self.ncoc_threshold if self.ncoc_enabled else 0.0


def encode_residual_frame(distorted: Mesh, frame: ResidualFrame,
                          cfg: ResidualConfig) -> bytes:
    """Payload: [prune flags][ncoc flags][3 x coded leaf-mean vectors]."""
    residuals = frame.residuals
    if residuals.shape[0] != distorted.num_vertices:
        raise ValueError("residual frame does not align with the predicted frame")
    tree = build_balanced_octree(distorted, cfg.depth)
    tree, prune_flags = cost_constrained_prune(tree, residuals, cfg.leaf_budget)
    ncoc_flags, correcting, _ = mark_ncoc(tree, residuals, cfg.effective_threshold)

    out = bytearray()
    for flags in (prune_flags, ncoc_flags):
        writer = BitWriter()
        for b in flags:
            writer.write_bit(int(b))
        out += writer.getvalue()

    means = np.asarray([residuals[tree.nodes[nid].verts].mean(axis=0)
                        for nid in correcting]).reshape(-1, 3)
    for axis in range(3):
        out += encode_vector(means[:, axis], residuals[:, axis], cfg.n_levels)
    return bytes(out)


def decode_residual_frame(distorted: Mesh, payload: bytes,
                          n_levels: int) -> np.ndarray:
    """Per-vertex corrections to add to the predicted positions."""
    tree, pos = rebuild_tree_from_flags(distorted, payload, 0)
    correcting, _, pos = _read_ncoc(tree, payload, pos)
    V = distorted.num_vertices
    corrections = np.zeros((V, 3), dtype=np.float64)
    means = np.empty((len(correcting), 3), dtype=np.float64)
    for axis in range(3):
        values, pos = decode_vector(payload, pos, n_levels,
                                    expected_count=len(correcting))
        means[:, axis] = values
    for row, nid in enumerate(correcting):
        corrections[tree.nodes[nid].verts] = means[row]
    return corrections
