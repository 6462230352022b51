"""Synthetic dynamic-mesh sequences for experiments and tests.

Four motion profiles over open cylinders: pure rigid motion, a smooth
non-rigid bend, a two-body join/split with per-frame remeshing (varying
vertex counts), and the bend with scan-style jitter and face holes.
Everything is deterministic for a fixed seed.
"""

from __future__ import annotations

import numpy as np

from .deform import rotvec_to_matrix
from .mesh import Mesh

KINDS = ("RIGID", "BEND", "BEND_WITH_DETACH", "NOISY")


def _cylinder(segments: int, rings: int, radius: float = 0.5,
              height: float = 2.0, axis: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """Open cylinder; rings stacked along ``axis``; V = segments * rings."""
    ang = 2.0 * np.pi * np.arange(segments) / segments
    circle = np.stack([radius * np.cos(ang), radius * np.sin(ang)], axis=1)
    zs = np.linspace(-height / 2.0, height / 2.0, rings)
    pos = np.empty((rings * segments, 3))
    order = {2: (0, 1, 2), 0: (1, 2, 0), 1: (2, 0, 1)}[axis]
    for r, z in enumerate(zs):
        block = pos[r * segments:(r + 1) * segments]
        block[:, order[0]] = circle[:, 0]
        block[:, order[1]] = circle[:, 1]
        block[:, order[2]] = z
    faces = []
    for r in range(rings - 1):
        for s in range(segments):
            a = r * segments + s
            b = r * segments + (s + 1) % segments
            c = (r + 1) * segments + s
            d = (r + 1) * segments + (s + 1) % segments
            faces.append((a, b, d))
            faces.append((a, d, c))
    return pos, np.asarray(faces, dtype=np.int64)


def _rigid_pose(t: int, rng_axis: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    R = rotvec_to_matrix(rng_axis * (0.08 * t))
    shift = np.array([0.010, 0.015, 0.020]) * t
    return R, shift


def _bend(points: np.ndarray, angle: float) -> np.ndarray:
    """Rotate each point about the base by an angle proportional to height."""
    z = points[:, 2]
    s = (z - z.min()) / max(z.max() - z.min(), 1e-12)
    theta = angle * s
    out = points.copy()
    # per-vertex rotation about the x axis through the cylinder base
    c, sn = np.cos(theta), np.sin(theta)
    out[:, 1] = c * points[:, 1] - sn * (z - z.min())
    out[:, 2] = sn * points[:, 1] + c * (z - z.min()) + z.min()
    return out


def generate_sequence(kind: str, frames: int, resolution: int,
                      seed: int) -> list[Mesh]:
    """Build ``frames`` meshes of the requested motion profile."""
    kind = kind.upper()
    if kind not in KINDS:
        raise ValueError(f"unknown sequence kind {kind!r}; expected one of {KINDS}")
    if frames < 1:
        raise ValueError("frames must be >= 1")
    if resolution < 4:
        raise ValueError("resolution must be >= 4")
    rng = np.random.default_rng(seed)
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)

    out: list[Mesh] = []
    if kind == "RIGID":
        base, faces = _cylinder(resolution, resolution)
        for t in range(frames):
            R, shift = _rigid_pose(t, axis)
            out.append(Mesh(base @ R.T + shift, faces, t))
        return out

    if kind in ("BEND", "NOISY"):
        base, faces = _cylinder(resolution, resolution)
        for t in range(frames):
            angle = 0.6 * np.sin(2.0 * np.pi * t / 12.0)
            pos = _bend(base, angle)
            pos = pos + np.array([0.015, 0.010, 0.005]) * t  # slow drift
            fac = faces
            if kind == "NOISY":
                frame_rng = np.random.default_rng(seed + 7919 * (t + 1))
                pos = pos + frame_rng.normal(scale=0.004, size=pos.shape)
                keep = frame_rng.random(faces.shape[0]) > 0.03  # punch holes
                if not keep.any():
                    keep[0] = True
                fac = faces[keep]
            out.append(Mesh(pos, fac, t))
        return out

    # BEND_WITH_DETACH: body plus an arm that separates halfway through,
    # remeshed independently per frame so vertex counts vary.
    for t in range(frames):
        segs = resolution + (t % 3)
        rings = resolution + ((t + 1) % 3)
        body, body_faces = _cylinder(segs, rings)
        arm_segs = max(4, resolution // 2 + (t % 2))
        arm, arm_faces = _cylinder(arm_segs, max(4, rings // 2),
                                   radius=0.18, height=1.0, axis=0)
        arm = arm + np.array([0.5 + 0.18, 0.0, 0.35])  # touching the body wall
        detach_at = frames // 2
        if t >= detach_at:
            arm = arm + np.array([0.25 * (t - detach_at + 1), 0.0, 0.1])
        angle = 0.3 * np.sin(2.0 * np.pi * t / 14.0)
        body = _bend(body, angle)
        pos = np.concatenate([body, arm])
        faces = np.concatenate([body_faces, arm_faces + body.shape[0]])
        out.append(Mesh(pos, faces, t))
    return out
