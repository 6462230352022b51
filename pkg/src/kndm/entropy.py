"""Cauchy-fitted dead-zone quantization and Huffman coding.

One codebook is derived entirely from four serialized scalars (location,
scale, range bound, level count), so the decoder rebuilds codebooks and
Huffman tables bit-identically without any table transmission. All codebook
arithmetic runs in float64 on float32-rounded parameters on both sides.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass

import numpy as np

from .bitio import (BitReader, BitWriter, CorruptStream, pack_f32, pack_u32,
                    unpack_f32, unpack_u32)

_F32_TINY = float(np.finfo(np.float32).tiny)
_F32_MAX = float(np.finfo(np.float32).max)


@dataclass(frozen=True)
class CauchyParams:
    location: float
    scale: float

    def __post_init__(self):
        if not (math.isfinite(self.location) and math.isfinite(self.scale)):
            raise ValueError("Cauchy parameters must be finite")
        if self.scale <= 0:
            raise ValueError("Cauchy scale must be positive")


def fit_cauchy(samples) -> CauchyParams:
    """Maximum-likelihood Cauchy fit by damped Newton iterations.

    Initialized at (median, half interquartile range); stops when the
    log-likelihood gradient drops below 1e-10 or after 100 iterations.
    """
    x = np.asarray(samples, dtype=np.float64).reshape(-1)
    if x.size < 2:
        raise ValueError("fit_cauchy needs at least 2 samples")
    if x.max() == x.min():
        raise ValueError("all samples identical; encode as a constant instead")
    x0 = float(np.median(x))
    q25, q75 = np.percentile(x, [25.0, 75.0])
    gamma = (q75 - q25) / 2.0
    if gamma <= 0:
        gamma = (x.max() - x.min()) / 4.0

    def nll(loc, sc):
        return float(x.size * math.log(math.pi * sc)
                     + np.log1p(((x - loc) / sc) ** 2).sum())

    current = nll(x0, gamma)
    for _ in range(100):
        d = x - x0
        A = gamma * gamma + d * d
        g_loc = -np.sum(2.0 * d / A)               # d(nll)/d(x0)
        g_sc = -(x.size / gamma - np.sum(2.0 * gamma / A))
        if max(abs(g_loc), abs(g_sc)) < 1e-10:
            break
        A2 = A * A
        h_ll = -np.sum(2.0 * (d * d - gamma * gamma) / A2)
        h_ss = x.size / gamma ** 2 - np.sum(2.0 * (gamma * gamma - d * d) / A2)
        h_ls = np.sum(4.0 * d * gamma / A2)
        det = h_ll * h_ss - h_ls * h_ls
        if det <= 0 or h_ll <= 0:  # fall back to gradient descent direction
            step_loc, step_sc = -g_loc, -g_sc
            scale = gamma / max(abs(step_loc), abs(step_sc), 1e-300)
            step_loc *= scale
            step_sc *= scale
        else:
            step_loc = -(h_ss * g_loc - h_ls * g_sc) / det
            step_sc = -(h_ll * g_sc - h_ls * g_loc) / det
        t = 1.0
        improved = False
        for _ in range(60):
            cand_sc = gamma + t * step_sc
            if cand_sc > 0:
                cand = nll(x0 + t * step_loc, cand_sc)
                if cand < current:
                    x0 += t * step_loc
                    gamma = cand_sc
                    current = cand
                    improved = True
                    break
            t *= 0.5
        if not improved:
            break
    return CauchyParams(x0, gamma)


@dataclass(frozen=True)
class Codebook:
    """Dead-zone quantizer derived from (location, scale, bound, level count)."""

    edges: np.ndarray    # (N_b,) ascending, spanning [-b, b]
    levels: np.ndarray   # (N_b - 1,) reconstruction value per bin
    probabilities: np.ndarray  # (N_b - 1,) Cauchy mass per bin
    params: CauchyParams
    bound: float
    nominal_levels: int

    @property
    def num_bins(self) -> int:
        return self.levels.shape[0]

    @property
    def dead_zone_symbol(self) -> int:
        return self.nominal_levels // 2 - 1


def _cauchy_mass(u1: np.ndarray, u2: np.ndarray) -> np.ndarray:
    """(1/pi) * (atan(u2) - atan(u1)) evaluated without tail cancellation."""
    cross = u1 * u2
    direct = (np.arctan(u2) - np.arctan(u1)) / math.pi
    # atan difference identity is exact when u1*u2 > -1 and avoids saturation
    safe = cross > -1.0
    ident = np.arctan((u2 - u1) / (1.0 + np.where(safe, cross, 0.0))) / math.pi
    return np.where(safe, ident, direct)


def build_codebook(params: CauchyParams, b: float, n_levels: int) -> Codebook:
    """Equal-width bins over [-b, b] with the two middle bins merged.

    Bin probability uses the closed-form Cauchy CDF; the reconstruction level
    is the conditional mean of the distribution within the bin.
    """
    if n_levels < 4 or n_levels % 2:
        raise ValueError(f"level count must be even and >= 4, got {n_levels}")
    if not b > 0:
        raise ValueError(f"range bound must be positive, got {b}")
    full = -b + (2.0 * b / n_levels) * np.arange(n_levels + 1)
    edges = np.delete(full, n_levels // 2)  # merge the two center bins
    x0, gamma = params.location, params.scale
    u = (edges - x0) / gamma
    u1, u2 = u[:-1], u[1:]
    probs = _cauchy_mass(u1, u2)
    if np.any(probs <= 0):
        raise ValueError("degenerate codebook: zero-probability bin")
    # conditional mean: x0 + gamma * log((1+u2^2)/(1+u1^2)) / (2*pi*P_k)
    log_ratio = np.log1p(u2 * u2) - np.log1p(u1 * u1)
    levels = x0 + gamma * log_ratio / (2.0 * math.pi * probs)
    levels = np.clip(levels, edges[:-1], edges[1:])
    return Codebook(edges=edges, levels=levels, probabilities=probs,
                    params=params, bound=b, nominal_levels=n_levels)


def quantize(values, codebook: Codebook) -> np.ndarray:
    """Bin index per value; bins are left-closed, the last is also right-closed."""
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    syms = np.searchsorted(codebook.edges, v, side="right") - 1
    return np.clip(syms, 0, codebook.num_bins - 1).astype(np.int64)


def dequantize(symbols, codebook: Codebook) -> np.ndarray:
    s = np.asarray(symbols, dtype=np.int64).reshape(-1)
    if s.size and (s.min() < 0 or s.max() >= codebook.num_bins):
        raise ValueError("symbol outside codebook range")
    return codebook.levels[s]


# --- Huffman -----------------------------------------------------------------

@dataclass(frozen=True)
class PrefixCode:
    codes: tuple         # symbol -> (code value, bit length)
    decode_tree: tuple   # nested (left, right) tuples; leaves are symbol ints


def huffman_build(probabilities) -> PrefixCode:
    """Prefix code with deterministic ties: lowest probability, then lowest symbol."""
    probs = np.asarray(probabilities, dtype=np.float64).reshape(-1)
    if probs.size == 0:
        raise ValueError("empty alphabet")
    if np.any(probs <= 0):
        raise ValueError("probabilities must be positive")
    n = probs.size
    if n == 1:
        return PrefixCode(codes=((0, 1),), decode_tree=(0, 0))
    heap = [(float(p), sym, sym) for sym, p in enumerate(probs)]
    heapq.heapify(heap)
    trees = {sym: sym for sym in range(n)}
    next_rank = n
    while len(heap) > 1:
        p1, _, id1 = heapq.heappop(heap)
        p2, _, id2 = heapq.heappop(heap)
        trees[next_rank] = (trees.pop(id1), trees.pop(id2))
        heapq.heappush(heap, (p1 + p2, next_rank, next_rank))
        next_rank += 1
    root = trees[next_rank - 1]
    codes: list[tuple[int, int]] = [(0, 0)] * n

    stack = [(root, 0, 0)]
    while stack:
        node, code, depth = stack.pop()
        if isinstance(node, int):
            codes[node] = (code, depth)
        else:
            stack.append((node[0], code << 1, depth + 1))
            stack.append((node[1], (code << 1) | 1, depth + 1))
    return PrefixCode(codes=tuple(codes), decode_tree=root)


def huffman_encode(symbols, code: PrefixCode) -> bytes:
    writer = BitWriter()
    codes = code.codes
    for s in np.asarray(symbols, dtype=np.int64).reshape(-1):
        value, length = codes[s]
        writer.write_bits(value, length)
    return writer.getvalue()


def _decode_symbols(reader: BitReader, code: PrefixCode, count: int) -> np.ndarray:
    out = np.empty(count, dtype=np.int64)
    tree = code.decode_tree
    single = isinstance(tree, tuple) and isinstance(tree[0], int) and tree[0] == tree[1]
    for i in range(count):
        if single:
            reader.read_bit()
            out[i] = tree[0]
            continue
        node = tree
        while not isinstance(node, int):
            node = node[reader.read_bit()]
        out[i] = node
    return out


def huffman_decode(data: bytes, code: PrefixCode, count: int) -> np.ndarray:
    return _decode_symbols(BitReader(data), code, count)


# --- coded-vector wire format --------------------------------------------------
#
# [x0: f32][scale: f32][b: f32][count: u32][byte-aligned Huffman bits]
# scale == 0 marks a constant vector (every value equals x0; no bits follow).

def encode_vector(values, fit_samples, n_levels: int) -> bytes:
    """Serialize one real vector with its self-describing codebook header."""
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    out = bytearray()
    if v.size == 0:
        out += pack_f32(0.0) + pack_f32(0.0) + pack_f32(0.0) + pack_u32(0)
        return bytes(out)
    b_raw = float(np.abs(v).max())
    if v.max() == v.min():
        out += pack_f32(v[0]) + pack_f32(0.0) + pack_f32(b_raw) + pack_u32(v.size)
        return bytes(out)
    samples = np.asarray(fit_samples, dtype=np.float64).reshape(-1)
    if samples.size < 2 or samples.max() == samples.min():
        samples = v
    params = fit_cauchy(samples)

    x0_32 = float(np.float32(params.location))
    scale_32 = float(np.float32(params.scale))
    if scale_32 <= 0.0:
        scale_32 = _F32_TINY
    scale_32 = min(scale_32, _F32_MAX)
    b_32 = np.float32(min(b_raw, _F32_MAX))
    while float(b_32) < b_raw and float(b_32) < _F32_MAX:
        b_32 = np.nextafter(b_32, np.float32(np.inf))
    codebook = build_codebook(CauchyParams(x0_32, scale_32), float(b_32), n_levels)
    symbols = quantize(v, codebook)
    code = huffman_build(codebook.probabilities)
    payload = huffman_encode(symbols, code)
    out += pack_f32(x0_32) + pack_f32(scale_32) + pack_f32(float(b_32))
    out += pack_u32(v.size)
    out += payload
    return bytes(out)


def decode_vector(data: bytes, pos: int, n_levels: int,
                  expected_count: int | None = None) -> tuple[np.ndarray, int]:
    """Inverse of :func:`encode_vector`; returns (values, next position)."""
    x0, pos = unpack_f32(data, pos)
    scale, pos = unpack_f32(data, pos)
    b, pos = unpack_f32(data, pos)
    count, pos = unpack_u32(data, pos)
    if expected_count is not None and count != expected_count:
        raise CorruptStream(
            f"coded vector carries {count} values, expected {expected_count}",
            pos - 4)
    if expected_count is None and count > max(8 * len(data), 65536):
        raise CorruptStream(f"implausible coded-vector count {count}", pos - 4)
    if count == 0:
        return np.zeros(0, dtype=np.float64), pos
    if scale == 0.0:
        return np.full(count, float(x0), dtype=np.float64), pos
    if not (math.isfinite(x0) and math.isfinite(scale) and b > 0):
        raise CorruptStream("invalid codebook header", pos - 16)
    codebook = build_codebook(CauchyParams(float(x0), float(scale)), float(b), n_levels)
    code = huffman_build(codebook.probabilities)
    reader = BitReader(data[pos:])
    symbols = _decode_symbols(reader, code, count)
    consumed = (reader.bit_position + 7) // 8
    return dequantize(symbols, codebook), pos + consumed
