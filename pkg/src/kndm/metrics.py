"""Geometric distortion metrics and rate-distortion curve comparison."""

from __future__ import annotations

import numpy as np

from .mesh import Mesh, SurfaceIndex


def _distances(test: Mesh, reference: Mesh, index: SurfaceIndex | None) -> np.ndarray:
    if test.num_vertices == 0:
        raise ValueError("empty test mesh")
    if index is None:
        index = SurfaceIndex(reference)
    return index.closest_points(test.positions)[2]


def p2s_rmse(test: Mesh, reference: Mesh, index: SurfaceIndex | None = None) -> float:
    """Root-mean-square point-to-surface distance from test vertices."""
    d = _distances(test, reference, index)
    return float(np.sqrt(np.mean(d * d)))


def p2s_rmse_symmetric(a: Mesh, b: Mesh) -> float:
    return max(p2s_rmse(a, b), p2s_rmse(b, a))


def hausdorff(test: Mesh, reference: Mesh, index: SurfaceIndex | None = None) -> float:
    """Maximum point-to-surface distance from test vertices."""
    return float(_distances(test, reference, index).max())


def hausdorff_symmetric(a: Mesh, b: Mesh) -> float:
    return max(hausdorff(a, b), hausdorff(b, a))


def bd_rate(curve_a, curve_b) -> float:
    """Average rate change (percent) of curve A relative to curve B.

    Curves are (bits per frame, distortion) points. Log-rate is fitted as a
    cubic in distortion and averaged over the overlapping distortion range;
    negative means A needs fewer bits at equal quality.
    """
    a = np.asarray(curve_a, dtype=np.float64).reshape(-1, 2)
    b = np.asarray(curve_b, dtype=np.float64).reshape(-1, 2)
    for name, c in (("A", a), ("B", b)):
        if c.shape[0] < 4:
            raise ValueError(f"curve {name} needs at least 4 points")
        if np.any(c[:, 0] <= 0):
            raise ValueError(f"curve {name} has non-positive rates")
        d = np.sort(c[:, 1])
        if np.any(np.diff(d) == 0):
            raise ValueError(f"curve {name} repeats a distortion value")
    a = a[np.argsort(a[:, 1])]
    b = b[np.argsort(b[:, 1])]
    lo = max(a[0, 1], b[0, 1])
    hi = min(a[-1, 1], b[-1, 1])
    if hi <= lo:
        raise ValueError("curves have no overlapping distortion range")
    poly_a = np.polyfit(a[:, 1], np.log(a[:, 0]), 3)
    poly_b = np.polyfit(b[:, 1], np.log(b[:, 0]), 3)
    int_a = np.polyint(poly_a)
    int_b = np.polyint(poly_b)
    mean_diff = ((np.polyval(int_a, hi) - np.polyval(int_a, lo))
                 - (np.polyval(int_b, hi) - np.polyval(int_b, lo))) / (hi - lo)
    return float((np.exp(mean_diff) - 1.0) * 100.0)
