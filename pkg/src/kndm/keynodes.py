"""Key-node selection for a group of frames, plus anchor index coding.

Selection over-provisions candidates by farthest-point sampling, fits
transforms, then greedily deletes the node whose removal hurts the data term
least (re-solving periodically), nudges the survivors down the data-term
gradient, and finally snaps them onto reference-frame vertices so both codec
sides agree on exact node positions.
"""

from __future__ import annotations

import numpy as np

from .bitio import CorruptStream, read_uvarint, write_uvarint
from .deform import (DEFAULT_Q, KeyNodeSet, TransformSet, build_node_graph,
                     compute_influence_weights, matrices_to_rotvecs,
                     rotvecs_to_matrices)
from .mesh import Mesh, SurfaceIndex, farthest_point_sample
from .registration import RegistrationParams, extract_transforms


def encode_indices(anchor_indices) -> bytes:
    """First index then gaps, each as an unsigned varint."""
    idx = np.asarray(anchor_indices, dtype=np.int64).reshape(-1)
    if idx.size and (np.any(np.diff(idx) <= 0) or idx[0] < 0):
        raise ValueError("anchor indices must be strictly increasing and nonnegative")
    out = bytearray()
    write_uvarint(out, idx.size)
    prev = 0
    for v in idx:
        write_uvarint(out, int(v) - prev)
        prev = int(v)
    return bytes(out)


def decode_indices(data: bytes, pos: int = 0) -> tuple[np.ndarray, int]:
    """Inverse of :func:`encode_indices`; returns (indices, next position)."""
    count, pos = read_uvarint(data, pos)
    if count > len(data):  # one varint byte minimum per index
        raise CorruptStream(f"implausible anchor count {count}", pos)
    out = np.empty(count, dtype=np.int64)
    prev = 0
    for i in range(count):
        gap, pos = read_uvarint(data, pos)
        if i > 0 and gap == 0:
            raise CorruptStream("non-increasing anchor index", pos)
        prev += gap
        out[i] = prev
    return out, pos


def snap_to_vertices(iframe: Mesh, node_positions, graph_k: int = DEFAULT_Q) -> KeyNodeSet:
    """Replace each node by its nearest distinct reference vertex, sorted."""
    pos = np.asarray(node_positions, dtype=np.float64).reshape(-1, 3)
    V = iframe.num_vertices
    if pos.shape[0] > V:
        raise ValueError(f"{pos.shape[0]} nodes exceed {V} vertices")
    if V == 0:
        raise ValueError("cannot snap to an empty mesh")
    used = np.zeros(V, dtype=bool)
    anchors = np.empty(pos.shape[0], dtype=np.int64)
    for m in range(pos.shape[0]):
        d2 = np.sum((iframe.positions - pos[m]) ** 2, axis=1)
        d2[used] = np.inf
        pick = int(np.argmin(d2))
        anchors[m] = pick
        used[pick] = True
    anchors = np.sort(anchors)
    snapped = iframe.positions[anchors]
    return KeyNodeSet(node_positions=snapped, anchor_indices=anchors,
                      graph_edges=build_node_graph(snapped, graph_k))


def _blend(points, node_pos, R_mats, T, ids, w):
    local = points[:, None, :] - node_pos[ids]
    rot = np.einsum("vqab,vqb->vqa", R_mats[ids], local)
    return np.einsum("vq,vqa->va", w, rot + T[ids] + node_pos[ids])


class _Selection:
    """Mutable working state over the fixed candidate pool."""

    def __init__(self, source: Mesh, target_index: SurfaceIndex,
                 cand_pos: np.ndarray, Q: int, graph_k: int,
                 params: RegistrationParams):
        self.source = source
        self.target_index = target_index
        self.cand_pos = cand_pos
        self.Q = Q
        self.graph_k = graph_k
        self.params = params
        self.active = list(range(cand_pos.shape[0]))
        self.R = np.broadcast_to(np.eye(3), (cand_pos.shape[0], 3, 3)).copy()
        self.T = np.zeros((cand_pos.shape[0], 3))
        self.ids = None       # (V, Q_eff) candidate-space ids
        self.w = None
        self.pred = None
        self.corr = None
        self.err = None       # per-vertex squared error

    def node_set(self) -> KeyNodeSet:
        act = np.asarray(self.active, dtype=np.int64)
        pos = self.cand_pos[act]
        return KeyNodeSet(pos, np.arange(act.size), build_node_graph(pos, self.graph_k))

    def resolve(self, max_outer: int | None = None) -> None:
        """Re-fit transforms for the current active set and refresh state."""
        act = np.asarray(self.active, dtype=np.int64)
        params = self.params if max_outer is None else RegistrationParams(
            alpha_reg=self.params.alpha_reg, alpha_rot=self.params.alpha_rot,
            max_outer_iters=max_outer, max_inner_iters=self.params.max_inner_iters,
            convergence_tol=self.params.convergence_tol,
            correspondence_refresh=self.params.correspondence_refresh)
        nodes = self.node_set()
        q_eff = min(self.Q, act.size)
        weights = compute_influence_weights(self.source.positions,
                                            self.cand_pos[act], q_eff)
        init = None
        if np.any(self.T[act]) or np.any(self.R[act] != np.eye(3)):
            init = TransformSet(matrices_to_rotvecs(self.R[act]), self.T[act])
        report = extract_transforms(self.source, None, nodes, weights, params,
                                    init=init, target_index=self.target_index)
        self.R[act] = rotvecs_to_matrices(report.transforms.rotations)
        self.T[act] = report.transforms.translations
        self.ids = act[weights.node_ids]
        self.w = weights.weights
        self.refresh_errors()

    def refresh_errors(self) -> None:
        self.pred = _blend(self.source.positions, self.cand_pos, self.R, self.T,
                           self.ids, self.w)
        self.corr = self.target_index.closest_points(self.pred)[0]
        self.err = np.sum((self.pred - self.corr) ** 2, axis=1)

    def data_loss(self) -> float:
        return float(self.err.sum()) / self.source.num_vertices

    def removal_cost(self, cand: int, influence: dict[int, np.ndarray]) -> float:
        rows = influence[cand]
        if rows.size == 0:
            return 0.0
        remaining = np.asarray([a for a in self.active if a != cand], dtype=np.int64)
        q_eff = min(self.Q, remaining.size)
        sub = compute_influence_weights(self.source.positions[rows],
                                        self.cand_pos[remaining], q_eff)
        new_pred = _blend(self.source.positions[rows], self.cand_pos, self.R,
                          self.T, remaining[sub.node_ids], sub.weights)
        new_err = np.sum((new_pred - self.corr[rows]) ** 2, axis=1)
        return float(new_err.sum() - self.err[rows].sum())

    def influence_lists(self) -> dict[int, np.ndarray]:
        flat = self.ids.ravel()
        rows = np.repeat(np.arange(self.ids.shape[0]), self.ids.shape[1])
        order = np.argsort(flat, kind="stable")
        flat = flat[order]
        rows = rows[order]
        uniq, starts = np.unique(flat, return_index=True)
        ends = np.append(starts[1:], flat.size)
        empty = np.zeros(0, dtype=np.int64)
        lists = {a: empty for a in self.active}
        for a, s, e in zip(uniq, starts, ends):
            lists[int(a)] = rows[s:e]
        return lists

    def remove(self, cand: int) -> None:
        self.active.remove(cand)
        act = np.asarray(self.active, dtype=np.int64)
        q_eff = min(self.Q, act.size)
        weights = compute_influence_weights(self.source.positions,
                                            self.cand_pos[act], q_eff)
        self.ids = act[weights.node_ids]
        self.w = weights.weights
        self.refresh_errors()


def generate_keynodes(source: Mesh, target: Mesh, n_target: int,
                      params: RegistrationParams, seed: int,
                      Q: int = DEFAULT_Q, graph_k: int = DEFAULT_Q,
                      candidate_factor: int = 4,
                      target_index: SurfaceIndex | None = None) -> KeyNodeSet:
    """Select ``n_target`` key nodes describing source -> target motion."""
    V = source.num_vertices
    if not 1 <= n_target <= V:
        raise ValueError(f"n_target={n_target} outside [1, {V}]")
    if target_index is None:
        target_index = SurfaceIndex(target)

    n_candidates = min(candidate_factor * n_target, V)
    cand_idx = farthest_point_sample(source, n_candidates, seed)
    state = _Selection(source, target_index, source.positions[cand_idx].copy(),
                       Q, graph_k, params)
    state.resolve()

    removed_since = 0
    while len(state.active) > n_target:
        influence = state.influence_lists()
        costs = np.asarray([state.removal_cost(a, influence) for a in state.active])
        state.remove(state.active[int(np.argmin(costs))])
        removed_since += 1
        if len(state.active) > n_target and \
                removed_since >= max(1, len(state.active) // 10):
            state.resolve(max_outer=max(5, params.max_outer_iters // 5))
            removed_since = 0
    state.resolve()

    _refine_positions(state)
    return snap_to_vertices(source, state.cand_pos[np.asarray(state.active)],
                            graph_k)


def _refine_positions(state: _Selection) -> None:
    """One gradient pass on node positions against the data term."""
    act = np.asarray(state.active, dtype=np.int64)
    V = state.source.num_vertices
    diff = state.pred - state.corr                       # (V, 3)
    grad = np.zeros((state.cand_pos.shape[0], 3))
    eye = np.eye(3)
    # d(pred_i)/d(n_j) = w_ij (I - R_j); accumulate (2/V) w_ij (I - R_j)^T diff_i
    for q in range(state.ids.shape[1]):
        ids_q = state.ids[:, q]
        contrib = np.einsum("vba,vb->va", eye - state.R[ids_q], diff)
        np.add.at(grad, ids_q, (2.0 / V) * state.w[:, q, None] * contrib)

    gmax = np.abs(grad[act]).max()
    if gmax == 0.0:
        return
    extent = state.source.positions.max(axis=0) - state.source.positions.min(axis=0)
    step = 0.02 * float(np.linalg.norm(extent)) / gmax
    base_loss = state.data_loss()
    original = state.cand_pos.copy()
    for _ in range(10):
        state.cand_pos = original.copy()
        state.cand_pos[act] -= step * grad[act]
        q_eff = min(state.Q, act.size)
        weights = compute_influence_weights(state.source.positions,
                                            state.cand_pos[act], q_eff)
        state.ids = act[weights.node_ids]
        state.w = weights.weights
        pred = _blend(state.source.positions, state.cand_pos, state.R, state.T,
                      state.ids, state.w)
        err = np.sum((pred - state.corr) ** 2, axis=1)
        if float(err.sum()) / V < base_loss:
            state.pred = pred
            state.err = err
            return
        step *= 0.5
    # no improving step: restore
    state.cand_pos = original
    q_eff = min(state.Q, act.size)
    weights = compute_influence_weights(state.source.positions,
                                        state.cand_pos[act], q_eff)
    state.ids = act[weights.node_ids]
    state.w = weights.weights
