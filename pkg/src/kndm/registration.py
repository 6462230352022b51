"""Per-node rotation/translation fitting between two mesh frames.

Alternates closest-point correspondence refreshes with damped Gauss-Newton
steps over free 3x3 node matrices plus translations. The warp is linear in
those unknowns, so the data and smoothness Jacobians are assembled once per
weight configuration; only the orthogonality penalty is relinearized per
iteration. Accepted steps never increase the total loss, and a correspondence
refresh can only lower the data term, so the reported trace is monotone.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .deform import (KeyNodeSet, TransformSet, WeightTable,
                     matrices_to_rotvecs, project_to_rotation,
                     rotvecs_to_matrices)
from .mesh import Mesh, SurfaceIndex


class SolverDiverged(RuntimeError):
    """Total loss became non-finite; geometry is degenerate."""


@dataclass(frozen=True)
class RegistrationParams:
    alpha_reg: float = 10.0
    alpha_rot: float = 100.0
    max_outer_iters: int = 50
    max_inner_iters: int = 20
    convergence_tol: float = 1e-6
    correspondence_refresh: int = 1

    def __post_init__(self):
        if self.alpha_reg < 0 or self.alpha_rot < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.max_outer_iters < 1 or self.max_inner_iters < 1:
            raise ValueError("iteration caps must be >= 1")
        if self.convergence_tol <= 0:
            raise ValueError("convergence tolerance must be positive")
        if self.correspondence_refresh < 1:
            raise ValueError("correspondence refresh cadence must be >= 1")


@dataclass
class RegistrationReport:
    transforms: TransformSet
    loss_trace: list = field(default_factory=list)  # (iteration, L_data, L_reg, L_rot)
    converged: bool = False

    @property
    def final_data_loss(self) -> float:
        return self.loss_trace[-1][1] if self.loss_trace else float("nan")


class LinearWarpSystem:
    """Constant Jacobian pieces of the warp for a fixed (vertices, nodes, weights)."""

    def __init__(self, vertices: np.ndarray, nodes: KeyNodeSet, weights: WeightTable,
                 params: RegistrationParams):
        V = vertices.shape[0]
        N = nodes.count
        if weights.num_vertices != V:
            raise ValueError("weight table does not match vertex count")
        self.num_vertices = V
        self.num_nodes = N
        self.params = params
        n = nodes.node_positions
        ids = weights.node_ids
        w = weights.weights
        Q = weights.neighbors

        local = vertices[:, None, :] - n[ids]                    # (V, Q, 3)
        ax = np.arange(3)
        rows_R = np.broadcast_to(
            (3 * np.arange(V))[:, None, None, None] + ax[None, None, :, None],
            (V, Q, 3, 3))
        cols_R = np.broadcast_to(
            9 * ids[:, :, None, None] + 3 * ax[None, None, :, None]
            + ax[None, None, None, :], (V, Q, 3, 3))
        vals_R = np.broadcast_to((w[:, :, None, None] * local[:, :, None, :]),
                                 (V, Q, 3, 3))
        rows_T = np.broadcast_to(
            (3 * np.arange(V))[:, None, None] + ax[None, None, :], (V, Q, 3))
        cols_T = np.broadcast_to(9 * N + 3 * ids[:, :, None] + ax[None, None, :],
                                 (V, Q, 3))
        vals_T = np.broadcast_to(w[:, :, None], (V, Q, 3))
        self.A_data = sparse.csr_matrix(
            (np.concatenate([vals_R.ravel(), vals_T.ravel()]),
             (np.concatenate([rows_R.ravel(), rows_T.ravel()]),
              np.concatenate([cols_R.ravel(), cols_T.ravel()]))),
            shape=(3 * V, 12 * N))
        self.k_data = np.einsum("vq,vqa->va", w, n[ids]).ravel()

        edges = nodes.graph_edges
        if edges.shape[0]:
            directed = np.concatenate([edges, edges[:, ::-1]], axis=0)
        else:
            directed = np.zeros((0, 2), dtype=np.int64)
        E = directed.shape[0]
        if E:
            j = directed[:, 0]
            k = directed[:, 1]
            delta = n[k] - n[j]                                   # (E, 3)
            rows_R = np.broadcast_to(
                (3 * np.arange(E))[:, None, None] + ax[None, :, None], (E, 3, 3))
            cols_R = np.broadcast_to(
                9 * j[:, None, None] + 3 * ax[None, :, None] + ax[None, None, :],
                (E, 3, 3))
            vals_R = np.broadcast_to(delta[:, None, :], (E, 3, 3))
            rows_t = np.broadcast_to((3 * np.arange(E))[:, None] + ax[None, :], (E, 3))
            cols_tj = 9 * N + 3 * j[:, None] + ax[None, :]
            cols_tk = 9 * N + 3 * k[:, None] + ax[None, :]
            self.A_reg = sparse.csr_matrix(
                (np.concatenate([vals_R.ravel(), np.ones(3 * E), -np.ones(3 * E)]),
                 (np.concatenate([rows_R.ravel(), rows_t.ravel(), rows_t.ravel()]),
                  np.concatenate([cols_R.ravel(), cols_tj.ravel(), cols_tk.ravel()]))),
                shape=(3 * E, 12 * N))
            self.k_reg = (n[j] - n[k]).ravel()
        else:
            self.A_reg = sparse.csr_matrix((0, 12 * N))
            self.k_reg = np.zeros(0)

        self._gram = ((self.A_data.T @ self.A_data) / V
                      + params.alpha_reg * (self.A_reg.T @ self.A_reg)).toarray()
        self._affine = (self.A_data.T @ self.k_data) / V \
            + params.alpha_reg * (self.A_reg.T @ self.k_reg)

    # parameter vector packing: [vec(R_0)...vec(R_{N-1}), t_0...t_{N-1}]
    def pack(self, R_mats: np.ndarray, T: np.ndarray) -> np.ndarray:
        return np.concatenate([R_mats.reshape(-1), T.reshape(-1)])

    def unpack(self, theta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        N = self.num_nodes
        return theta[:9 * N].reshape(N, 3, 3), theta[9 * N:].reshape(N, 3)

    def predict(self, theta: np.ndarray) -> np.ndarray:
        return (self.A_data @ theta + self.k_data).reshape(-1, 3)

    def data_loss(self, theta: np.ndarray, corr_flat: np.ndarray) -> float:
        r = self.A_data @ theta + self.k_data - corr_flat
        return float(r @ r) / self.num_vertices

    def reg_loss(self, theta: np.ndarray) -> float:
        r = self.A_reg @ theta + self.k_reg
        return float(r @ r)

    def total_loss(self, theta: np.ndarray, corr_flat: np.ndarray) -> float:
        R, _ = self.unpack(theta)
        return (self.data_loss(theta, corr_flat)
                + self.params.alpha_reg * self.reg_loss(theta)
                + self.params.alpha_rot * rotation_penalty(R))

    def normal_equations(self, theta: np.ndarray, corr_flat: np.ndarray
                         ) -> tuple[np.ndarray, np.ndarray]:
        """Gauss-Newton H and J^T rho at theta (rotation penalty relinearized)."""
        R, _ = self.unpack(theta)
        N = self.num_nodes
        g = self._gram @ theta + self._affine - (self.A_data.T @ corr_flat) / self.num_vertices
        H = self._gram.copy()
        rot_res, rot_jac = _rotation_residuals(R)
        a = self.params.alpha_rot
        for jn in range(N):
            sl = slice(9 * jn, 9 * jn + 9)
            H[sl, sl] += a * (rot_jac[jn].T @ rot_jac[jn])
            g[sl] += a * (rot_jac[jn].T @ rot_res[jn])
        return H, g


def rotation_penalty(R_mats: np.ndarray) -> float:
    """Sum over nodes of ||R^T R - I||_F^2 + (det R - 1)^2."""
    R = np.asarray(R_mats, dtype=np.float64).reshape(-1, 3, 3)
    gram = np.einsum("nji,njk->nik", R, R) - np.eye(3)
    dets = np.linalg.det(R)
    return float(np.sum(gram ** 2) + np.sum((dets - 1.0) ** 2))


def _rotation_residuals(R: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Residuals (N, 10) and Jacobians (N, 10, 9) of the orthogonality penalty."""
    N = R.shape[0]
    eye = np.eye(3)
    gram = np.einsum("nji,njk->nik", R, R) - eye
    cof = np.stack([np.cross(R[:, 1], R[:, 2]),
                    np.cross(R[:, 2], R[:, 0]),
                    np.cross(R[:, 0], R[:, 1])], axis=1)      # (N, 3, 3)
    dets = np.einsum("na,na->n", R[:, 0], cof[:, 0])
    res = np.concatenate([gram.reshape(N, 9), (dets - 1.0)[:, None]], axis=1)
    # d(R^T R)_{ab} / dR_{cd} = delta_{da} R_{cb} + delta_{db} R_{ca}
    J1 = (np.einsum("da,ncb->nabcd", eye, R) + np.einsum("db,nca->nabcd", eye, R))
    jac = np.concatenate([J1.reshape(N, 9, 9), cof.reshape(N, 1, 9)], axis=1)
    return res, jac


def eval_loss(source: Mesh, target_index: SurfaceIndex, nodes: KeyNodeSet,
              weights: WeightTable, R_mats: np.ndarray, T: np.ndarray,
              params: RegistrationParams,
              correspondences: np.ndarray) -> tuple[float, float, float]:
    """Loss components at a fixed configuration and fixed correspondences."""
    system = LinearWarpSystem(source.positions, nodes, weights, params)
    theta = system.pack(np.asarray(R_mats, dtype=np.float64),
                        np.asarray(T, dtype=np.float64))
    corr = np.asarray(correspondences, dtype=np.float64).reshape(-1)
    return (system.data_loss(theta, corr), system.reg_loss(theta),
            rotation_penalty(R_mats))


def loss_gradient(source: Mesh, nodes: KeyNodeSet, weights: WeightTable,
                  R_mats: np.ndarray, T: np.ndarray, params: RegistrationParams,
                  correspondences: np.ndarray) -> tuple[float, np.ndarray]:
    """Total loss and its analytic gradient w.r.t. the packed parameters."""
    system = LinearWarpSystem(source.positions, nodes, weights, params)
    theta = system.pack(np.asarray(R_mats, dtype=np.float64),
                        np.asarray(T, dtype=np.float64))
    corr = np.asarray(correspondences, dtype=np.float64).reshape(-1)
    _, g = system.normal_equations(theta, corr)
    return system.total_loss(theta, corr), 2.0 * g


def extract_transforms(source: Mesh, target: Mesh, nodes: KeyNodeSet,
                       weights: WeightTable, params: RegistrationParams,
                       init: TransformSet | None = None,
                       target_index: SurfaceIndex | None = None,
                       system: LinearWarpSystem | None = None) -> RegistrationReport:
    """Solve for per-node transforms warping ``source`` onto ``target``."""
    if source.num_vertices == 0:
        raise ValueError("source mesh is empty")
    if target_index is None:
        target_index = SurfaceIndex(target)
    if system is None:
        system = LinearWarpSystem(source.positions, nodes, weights, params)
    N = nodes.count
    if init is not None:
        if init.count != N:
            raise ValueError("init transform count does not match node count")
        R = rotvecs_to_matrices(init.rotations)
        T = init.translations.copy()
    else:
        R = np.broadcast_to(np.eye(3), (N, 3, 3)).copy()
        T = np.zeros((N, 3))
    theta = system.pack(R, T)

    trace: list[tuple[int, float, float, float]] = []
    converged = False
    improved_once = False
    stepped = False
    corr = None
    prev_total = None
    mu = 1e-8

    def record(iteration: int) -> float:
        L_data = system.data_loss(theta, corr)
        L_reg = system.reg_loss(theta)
        L_rot = rotation_penalty(system.unpack(theta)[0])
        total = L_data + params.alpha_reg * L_reg + params.alpha_rot * L_rot
        if not np.isfinite(total):
            raise SolverDiverged(f"non-finite loss at iteration {iteration}")
        trace.append((iteration, L_data, L_reg, L_rot))
        return total

    for it in range(params.max_outer_iters):
        if corr is None or it % params.correspondence_refresh == 0:
            pred = system.predict(theta)
            corr = target_index.closest_points(pred)[0].reshape(-1)
        total = record(it)
        stepped = False
        if total <= 1e-18:
            converged = True
            break
        if prev_total is not None:
            rel = (prev_total - total) / prev_total
            if 0 <= rel < params.convergence_tol:
                converged = True
                break
        prev_total = total

        H, g = system.normal_equations(theta, corr)
        diag_scale = max(np.trace(H) / H.shape[0], 1e-30)
        accepted = False
        for _ in range(params.max_inner_iters):
            try:
                step = np.linalg.solve(
                    H + mu * diag_scale * np.eye(H.shape[0]), -g)
            except np.linalg.LinAlgError:
                mu *= 10.0
                continue
            alpha = 1.0
            for _ in range(8):
                cand = theta + alpha * step
                if system.total_loss(cand, corr) < total:
                    theta = cand
                    accepted = True
                    break
                alpha *= 0.5
            if accepted:
                mu = max(mu * 0.3, 1e-12)
                break
            mu *= 10.0
            if mu > 1e18:
                break
        if not accepted:
            converged = improved_once  # stalled after progress == local optimum
            break
        improved_once = True
        stepped = True

    if stepped:  # loop exhausted right after an accepted step
        record(params.max_outer_iters)

    R_final, T_final = system.unpack(theta)
    R_proj = np.stack([project_to_rotation(M) for M in R_final])
    transforms = TransformSet(matrices_to_rotvecs(R_proj), T_final.copy())
    return RegistrationReport(transforms=transforms, loss_trace=trace,
                              converged=converged)
