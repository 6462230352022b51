"""Sequence codec: GoF structure, I/P-frame coding, and the container format.

Prediction is closed-loop: every P-frame is deformed from the previous
*decoded* frame using the *quantized* transforms, then corrected with the
*decoded* residuals, so the encoder's reference chain is bit-identical to the
decoder's output by construction. Dual-direction GoFs run a second chain
backward from the next group's I-frame; the switch index travels in the
stream so the decoder is mode-agnostic.

Container layout (little endian, all section lengths u32):

  header: magic "KNDM", version u16, F u32, G u16, N u16, Q u8,
          rt levels u16, residual levels u16, iframe bits u8, mode u8, flags u8
  per GoF: switch u8, [len][iframe], [len][key nodes], then per P-frame
           in temporal order [len][RT] [len][residual]
  key-node section (when nonempty): [u32][forward anchors] [u32][backward anchors]
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import metrics
from .bitio import (CorruptStream, pack_u32, read_uvarint, take, unpack_u32,
                    write_uvarint, zigzag_decode, zigzag_encode)
from .deform import (KeyNodeSet, TransformSet, build_node_graph,
                     compute_influence_weights, deform_points,
                     rotvecs_to_matrices)
from .entropy import decode_vector, encode_vector
from .keynodes import decode_indices, encode_indices, generate_keynodes
from .mesh import Mesh, SurfaceIndex
from .registration import (RegistrationParams, SolverDiverged,
                           extract_transforms)
from .residual import (ResidualConfig, compute_residuals,
                       decode_residual_frame, encode_residual_frame)

MAGIC = b"KNDM"
VERSION = 1
MODE_FF = 0
MODE_FIXED_DUAL = 1
MODE_ADP = 2
_MODE_NAMES = {"ff": MODE_FF, "dual": MODE_FIXED_DUAL, "adp": MODE_ADP}
FLAG_FINAL_GOF_FF = 0x01

_HEADER = struct.Struct("<4sHIHHBHHBBB")


@dataclass(frozen=True)
class CodecConfig:
    gof_size: int = 5
    num_keynodes: int = 40
    Q: int = 4
    prediction_mode: str = "ff"          # ff | dual | adp
    switch_index: int | None = None      # dual mode only, in [1, G-1]
    iframe_quant_bits: int = 14
    residual: ResidualConfig = field(default_factory=ResidualConfig)
    n_rt_levels: int = 64
    registration: RegistrationParams = field(default_factory=RegistrationParams)
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.gof_size <= 255:
            raise ValueError("gof_size must be in [1, 255]")
        if not 1 <= self.num_keynodes <= 65535:
            raise ValueError("num_keynodes must be in [1, 65535]")
        if not 1 <= self.Q <= 255:
            raise ValueError("Q must be in [1, 255]")
        if self.prediction_mode not in _MODE_NAMES:
            raise ValueError(f"unknown prediction mode {self.prediction_mode!r}")
        if self.prediction_mode == "dual":
            if self.switch_index is None:
                raise ValueError("dual mode requires a switch index")
            if self.gof_size > 1 and not 1 <= self.switch_index <= self.gof_size - 1:
                raise ValueError(
                    f"switch index {self.switch_index} outside [1, {self.gof_size - 1}]")
        if not 8 <= self.iframe_quant_bits <= 24:
            raise ValueError("iframe_quant_bits must be in [8, 24]")
        if self.n_rt_levels < 4 or self.n_rt_levels % 2:
            raise ValueError("n_rt_levels must be even and >= 4")


# --- I-frame coding ------------------------------------------------------------

def _f32_box(lo: np.ndarray, hi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    lo32 = lo.astype(np.float32)
    hi32 = hi.astype(np.float32)
    widen = lo32.astype(np.float64) > lo
    lo32[widen] = np.nextafter(lo32[widen], np.float32(-np.inf))
    widen = hi32.astype(np.float64) < hi
    hi32[widen] = np.nextafter(hi32[widen], np.float32(np.inf))
    return lo32, hi32


def encode_iframe(mesh: Mesh, bits: int) -> bytes:
    """Static coder: box-quantized positions, delta varints, raw face triples.

    The grid has 2^bits + 1 levels spanning the box inclusively, so decoded
    extremes land exactly on the box and re-encoding reproduces the payload.
    """
    if not 8 <= bits <= 24:
        raise ValueError("iframe quantization bits must be in [8, 24]")
    if mesh.num_vertices == 0:
        raise ValueError("cannot encode an empty frame")
    lo, hi = mesh.bounds()
    lo32, hi32 = _f32_box(lo, hi)
    levels = 1 << bits
    span = hi32.astype(np.float64) - lo32.astype(np.float64)
    step = span / levels
    safe = np.where(step > 0, step, 1.0)
    codes = np.rint((mesh.positions - lo32.astype(np.float64)) / safe)
    codes = np.clip(codes, 0, levels).astype(np.int64)
    codes[:, step == 0] = 0

    out = bytearray()
    out += pack_u32(mesh.num_vertices)
    out += pack_u32(mesh.num_faces)
    out += struct.pack("<3f", *lo32) + struct.pack("<3f", *hi32)
    prev = np.zeros(3, dtype=np.int64)
    for row in codes:
        for axis in range(3):
            write_uvarint(out, zigzag_encode(int(row[axis] - prev[axis])))
        prev = row
    for f in mesh.faces:
        for v in f:
            write_uvarint(out, int(v))
    return bytes(out)


def decode_iframe(payload: bytes, frame_index: int = 0, bits: int = 14) -> Mesh:
    pos = 0
    V, pos = unpack_u32(payload, pos)
    F, pos = unpack_u32(payload, pos)
    # every vertex and face costs at least three varint bytes
    if V > len(payload) or F > len(payload):
        raise CorruptStream(f"implausible I-frame counts V={V} F={F}", 0)
    if pos + 24 > len(payload):
        raise CorruptStream("truncated I-frame box", pos)
    lo32 = np.asarray(struct.unpack_from("<3f", payload, pos), dtype=np.float64)
    hi32 = np.asarray(struct.unpack_from("<3f", payload, pos + 12), dtype=np.float64)
    pos += 24
    levels = 1 << bits
    step = (hi32 - lo32) / levels
    codes = np.empty((V, 3), dtype=np.int64)
    prev = np.zeros(3, dtype=np.int64)
    for i in range(V):
        for axis in range(3):
            raw, pos = read_uvarint(payload, pos)
            prev[axis] += zigzag_decode(raw)
        codes[i] = prev
    if codes.size and (codes.min() < 0 or codes.max() > levels):
        raise CorruptStream("I-frame code outside quantization range", pos)
    faces = np.empty((F, 3), dtype=np.int64)
    for i in range(F):
        for axis in range(3):
            faces[i, axis], pos = read_uvarint(payload, pos)
    if pos != len(payload):
        raise CorruptStream(f"{len(payload) - pos} trailing bytes in I-frame", pos)
    positions = lo32 + codes * step
    return Mesh(positions, faces, frame_index)


# --- RT coding -------------------------------------------------------------------

def encode_rt(transforms: TransformSet, n_levels: int) -> bytes:
    rf, tf = transforms.flatten()
    return encode_vector(rf, rf, n_levels) + encode_vector(tf, tf, n_levels)


def _wrap_rotvecs(rotvecs: np.ndarray) -> np.ndarray:
    """Pull quantized rotation vectors back into the canonical |r| <= pi ball."""
    mags = np.linalg.norm(rotvecs, axis=1)
    out = rotvecs.copy()
    big = mags > np.pi
    if np.any(big):
        scale = 1.0 - 2.0 * np.pi / mags[big]
        out[big] *= scale[:, None]
    return out


def decode_rt(payload: bytes, n_nodes: int, n_levels: int) -> TransformSet:
    rf, pos = decode_vector(payload, 0, n_levels, expected_count=3 * n_nodes)
    tf, pos = decode_vector(payload, pos, n_levels, expected_count=3 * n_nodes)
    if pos != len(payload):
        raise CorruptStream(f"{len(payload) - pos} trailing bytes in RT payload", pos)
    return TransformSet(_wrap_rotvecs(rf.reshape(-1, 3)), tf.reshape(-1, 3))


# --- P-frame coding -----------------------------------------------------------------

def predict_frame(prev_decoded: Mesh, nodes: KeyNodeSet, transforms: TransformSet,
                  Q: int) -> Mesh:
    """Warp the previous decoded frame by node transforms (decoder-side op)."""
    node_pos = prev_decoded.positions[nodes.anchor_indices]
    q_eff = min(Q, nodes.count)
    weights = compute_influence_weights(prev_decoded.positions, node_pos, q_eff)
    mats = rotvecs_to_matrices(transforms.rotations)
    new_pos = deform_points(prev_decoded.positions, node_pos, mats,
                            transforms.translations, weights)
    return prev_decoded.with_positions(new_pos)


def decode_pframe(prev_decoded: Mesh, nodes: KeyNodeSet, rt_payload: bytes,
                  res_payload: bytes, cfg: CodecConfig,
                  frame_index: int = 0) -> Mesh:
    transforms = decode_rt(rt_payload, nodes.count, cfg.n_rt_levels)
    predicted = predict_frame(prev_decoded, nodes, transforms, cfg.Q)
    corrections = decode_residual_frame(predicted, res_payload,
                                        cfg.residual.n_levels)
    return predicted.with_positions(predicted.positions + corrections,
                                    frame_index=frame_index)


def encode_pframe(prev_decoded: Mesh, source: Mesh, nodes: KeyNodeSet,
                  cfg: CodecConfig, init: TransformSet | None = None
                  ) -> tuple[bytes, bytes, Mesh, TransformSet]:
    """Code one P-frame; returns payloads, the decoded frame, and the raw
    (unquantized) transforms for warm-starting the next solve."""
    node_pos = prev_decoded.positions[nodes.anchor_indices]
    q_eff = min(cfg.Q, nodes.count)
    weights = compute_influence_weights(prev_decoded.positions, node_pos, q_eff)
    frame_nodes = KeyNodeSet(node_pos, nodes.anchor_indices, nodes.graph_edges)
    source_index = SurfaceIndex(source)
    try:
        report = extract_transforms(prev_decoded, source, frame_nodes, weights,
                                    cfg.registration, init=init,
                                    target_index=source_index)
        transforms = report.transforms
    except SolverDiverged:
        transforms = TransformSet.zeros(nodes.count)  # residuals absorb the error

    rt_payload = encode_rt(transforms, cfg.n_rt_levels)
    quantized = decode_rt(rt_payload, nodes.count, cfg.n_rt_levels)
    predicted = predict_frame(prev_decoded, nodes, quantized, cfg.Q)
    residuals = compute_residuals(predicted, source_index)
    res_payload = encode_residual_frame(predicted, residuals, cfg.residual)
    decoded = decode_pframe(prev_decoded, nodes, rt_payload, res_payload, cfg,
                            frame_index=source.frame_index)
    return rt_payload, res_payload, decoded, transforms


# --- GoF coding -------------------------------------------------------------------

@dataclass
class GofRecord:
    switch_index: int
    iframe_payload: bytes
    fwd_anchors: bytes
    bwd_anchors: bytes
    p_payloads: list  # [(rt bytes, residual bytes)] in temporal order


@dataclass
class GofResult:
    record: GofRecord
    decoded: list  # decoded frames, temporal order


def _chain(start: Mesh, sources: list[Mesh], nodes: KeyNodeSet, cfg: CodecConfig
           ) -> tuple[list[tuple[bytes, bytes]], list[Mesh]]:
    payloads = []
    decoded = []
    prev = start
    init = None
    for src in sources:
        rt, res, dec, raw = encode_pframe(prev, src, nodes, cfg, init=init)
        payloads.append((rt, res))
        decoded.append(dec)
        prev = dec
        init = raw
    return payloads, decoded


def _select_nodes(source_decoded: Mesh, keyframe: Mesh, cfg: CodecConfig,
                  seed: int) -> KeyNodeSet:
    n = min(cfg.num_keynodes, source_decoded.num_vertices)
    # selection only ranks candidates; per-frame solves refine the transforms,
    # so a capped solve keeps GoF setup from dominating encode time
    params = cfg.registration
    capped = RegistrationParams(
        alpha_reg=params.alpha_reg, alpha_rot=params.alpha_rot,
        max_outer_iters=min(15, params.max_outer_iters),
        max_inner_iters=params.max_inner_iters,
        convergence_tol=params.convergence_tol,
        correspondence_refresh=params.correspondence_refresh)
    return generate_keynodes(source_decoded, keyframe, n, capped,
                             seed=seed, Q=cfg.Q)


def encode_gof(sources: list[Mesh], decoded_iframe: Mesh, iframe_payload: bytes,
               cfg: CodecConfig, next_decoded_iframe: Mesh | None,
               seed: int) -> GofResult:
    """Encode one group; ``sources[0]`` is the I-frame (already coded)."""
    g = len(sources)
    if g == 1:
        record = GofRecord(1, iframe_payload, b"", b"", [])
        return GofResult(record, [decoded_iframe])

    mode = cfg.prediction_mode
    if mode in ("dual", "adp") and next_decoded_iframe is None:
        mode = "ff"  # lookahead unavailable: final GoF falls back

    if mode == "ff":
        switch = g
    elif mode == "dual":
        switch = min(cfg.switch_index, g - 1)
    else:
        switch = None  # chosen after measuring both chains

    fwd_nodes = bwd_nodes = None
    fwd_payloads: list = []
    fwd_decoded: list = []
    bwd_payloads: list = []
    bwd_decoded: list = []

    need_fwd = switch is None or switch > 1
    need_bwd = switch is None or switch < g
    fwd_count = (g - 1) if switch is None else (switch - 1)
    bwd_count = (g - 1) if switch is None else (g - switch)

    if need_fwd and fwd_count > 0:
        fwd_nodes = _select_nodes(decoded_iframe, sources[1], cfg, seed)
        fwd_payloads, fwd_decoded = _chain(decoded_iframe,
                                           sources[1:1 + fwd_count],
                                           fwd_nodes, cfg)
    if need_bwd and bwd_count > 0:
        bwd_nodes = _select_nodes(next_decoded_iframe, sources[g - 1], cfg,
                                  seed + 1)
        bwd_payloads, bwd_decoded = _chain(next_decoded_iframe,
                                           list(reversed(sources[g - bwd_count:])),
                                           bwd_nodes, cfg)

    if switch is None:  # adaptive: pick the split minimizing summed distortion
        d_fwd = [metrics.p2s_rmse(dec, src)
                 for dec, src in zip(fwd_decoded, sources[1:])]
        d_bwd = [metrics.p2s_rmse(dec, src)
                 for dec, src in zip(bwd_decoded, reversed(sources[1:]))]
        # d_bwd[j] scores frame g-1-j; cost(s) sums forward below s, backward at/above
        best = None
        for s in range(1, g + 1):
            cost = sum(d_fwd[:s - 1]) + sum(d_bwd[:g - s])
            if best is None or cost < best[0] - 1e-15:
                best = (cost, s)
        switch = best[1]

    payloads: list = [None] * (g - 1)
    decoded: list = [None] * (g - 1)
    for i in range(1, switch):
        payloads[i - 1] = fwd_payloads[i - 1]
        decoded[i - 1] = fwd_decoded[i - 1]
    for i in range(switch, g):
        j = (g - 1) - i  # backward chain position
        payloads[i - 1] = bwd_payloads[j]
        decoded[i - 1] = bwd_decoded[j]

    fwd_bytes = encode_indices(fwd_nodes.anchor_indices) \
        if (switch > 1 and fwd_nodes is not None) else b""
    bwd_bytes = encode_indices(bwd_nodes.anchor_indices) \
        if (switch < g and bwd_nodes is not None) else b""
    record = GofRecord(switch, iframe_payload, fwd_bytes, bwd_bytes, payloads)
    return GofResult(record, [decoded_iframe] + decoded)


def decode_gof(record: GofRecord, decoded_iframe: Mesh, cfg: CodecConfig,
               next_decoded_iframe: Mesh | None, first_frame_index: int,
               frame_count: int) -> list[Mesh]:
    g = frame_count
    out: list = [None] * g
    out[0] = decoded_iframe
    if g == 1:
        return out
    switch = record.switch_index
    if not 1 <= switch <= g:
        raise CorruptStream(f"switch index {switch} outside [1, {g}]", 0)
    if switch > 1:
        anchors, _ = decode_indices(record.fwd_anchors, 0)
        if anchors.size == 0 or anchors.max() >= decoded_iframe.num_vertices:
            raise CorruptStream("forward anchors outside the I-frame", 0)
        pos = decoded_iframe.positions[anchors]
        nodes = KeyNodeSet(pos, anchors, build_node_graph(pos, cfg.Q))
        prev = decoded_iframe
        for i in range(1, switch):
            rt, res = record.p_payloads[i - 1]
            prev = decode_pframe(prev, nodes, rt, res, cfg,
                                 frame_index=first_frame_index + i)
            out[i] = prev
    if switch < g:
        if next_decoded_iframe is None:
            raise CorruptStream("backward chain without a lookahead I-frame", 0)
        anchors, _ = decode_indices(record.bwd_anchors, 0)
        if anchors.size == 0 or anchors.max() >= next_decoded_iframe.num_vertices:
            raise CorruptStream("backward anchors outside the next I-frame", 0)
        pos = next_decoded_iframe.positions[anchors]
        nodes = KeyNodeSet(pos, anchors, build_node_graph(pos, cfg.Q))
        prev = next_decoded_iframe
        for i in range(g - 1, switch - 1, -1):
            rt, res = record.p_payloads[i - 1]
            prev = decode_pframe(prev, nodes, rt, res, cfg,
                                 frame_index=first_frame_index + i)
            out[i] = prev
    return out


# --- container ----------------------------------------------------------------------

def _gof_spans(total_frames: int, gof_size: int) -> list[tuple[int, int]]:
    spans = []
    start = 0
    while start < total_frames:
        spans.append((start, min(start + gof_size, total_frames)))
        start = spans[-1][1]
    return spans


def encode_sequence(frames: list[Mesh], cfg: CodecConfig) -> bytes:
    """Encode a frame sequence; returns the container bytes."""
    if not frames:
        raise ValueError("empty sequence")
    result = encode_sequence_with_references(frames, cfg)
    return result[0]


def encode_sequence_with_references(frames: list[Mesh], cfg: CodecConfig
                                    ) -> tuple[bytes, list[Mesh]]:
    """Encode and also return the encoder's internal decoded reference frames."""
    if not frames:
        raise ValueError("empty sequence")
    spans = _gof_spans(len(frames), cfg.gof_size)
    iframe_payloads = []
    decoded_iframes = []
    for k, (start, _) in enumerate(spans):
        payload = encode_iframe(frames[start], cfg.iframe_quant_bits)
        iframe_payloads.append(payload)
        decoded_iframes.append(decode_iframe(payload, frames[start].frame_index,
                                             cfg.iframe_quant_bits))
    flags = 0
    if cfg.prediction_mode in ("dual", "adp") and spans[-1][1] - spans[-1][0] > 1:
        flags |= FLAG_FINAL_GOF_FF

    records = []
    references: list[Mesh] = []
    for k, (start, end) in enumerate(spans):
        nxt = decoded_iframes[k + 1] if k + 1 < len(spans) else None
        result = encode_gof(frames[start:end], decoded_iframes[k],
                            iframe_payloads[k], cfg, nxt, seed=cfg.seed + 2 * k)
        records.append(result.record)
        references.extend(result.decoded)

    out = bytearray()
    out += _HEADER.pack(MAGIC, VERSION, len(frames), cfg.gof_size,
                        cfg.num_keynodes, cfg.Q, cfg.n_rt_levels,
                        cfg.residual.n_levels, cfg.iframe_quant_bits,
                        _MODE_NAMES[cfg.prediction_mode], flags)
    for record in records:
        out.append(record.switch_index & 0xFF)
        out += pack_u32(len(record.iframe_payload)) + record.iframe_payload
        if record.fwd_anchors or record.bwd_anchors:
            section = (pack_u32(len(record.fwd_anchors)) + record.fwd_anchors
                       + pack_u32(len(record.bwd_anchors)) + record.bwd_anchors)
        else:
            section = b""
        out += pack_u32(len(section)) + section
        for rt, res in record.p_payloads:
            out += pack_u32(len(rt)) + rt
            out += pack_u32(len(res)) + res
    return bytes(out), references


@dataclass
class ParsedHeader:
    version: int
    num_frames: int
    gof_size: int
    num_keynodes: int
    Q: int
    n_rt_levels: int
    n_res_levels: int
    iframe_bits: int
    mode: int
    flags: int


@dataclass
class ParsedGof:
    switch_index: int
    iframe_payload: bytes
    fwd_anchors: bytes
    bwd_anchors: bytes
    p_payloads: list
    # byte accounting (container overhead excluded)
    iframe_bytes: int = 0
    keynode_bytes: int = 0
    rt_bytes: int = 0
    residual_bytes: int = 0


def parse_container(data: bytes) -> tuple[ParsedHeader, list[ParsedGof]]:
    if len(data) < _HEADER.size:
        raise CorruptStream("stream shorter than header", 0)
    magic, version, F, G, N, Q, rt_lv, res_lv, ifb, mode, flags = \
        _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise CorruptStream(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise CorruptStream(f"unsupported version {version}", 4)
    if F < 1 or G < 1:
        raise CorruptStream("empty sequence or GoF", 6)
    gof_count = (F + G - 1) // G
    if gof_count * 9 > len(data) - _HEADER.size:  # switch byte + two u32 lengths
        raise CorruptStream(f"frame count {F} exceeds stream capacity", 6)
    header = ParsedHeader(version, F, G, N, Q, rt_lv, res_lv, ifb, mode, flags)
    pos = _HEADER.size
    gofs = []
    for start, end in _gof_spans(F, G):
        if pos >= len(data):
            raise CorruptStream("missing GoF record", pos)
        switch = data[pos]
        pos += 1
        n, pos = unpack_u32(data, pos)
        iframe, pos = take(data, pos, n)
        n, pos = unpack_u32(data, pos)
        section, pos = take(data, pos, n)
        fwd = bwd = b""
        if section:
            inner = 0
            n, inner = unpack_u32(section, inner)
            fwd, inner = take(section, inner, n)
            n, inner = unpack_u32(section, inner)
            bwd, inner = take(section, inner, n)
            if inner != len(section):
                raise CorruptStream("trailing bytes in key-node section", pos)
        payloads = []
        rt_total = res_total = 0
        for _ in range(end - start - 1):
            n, pos = unpack_u32(data, pos)
            rt, pos = take(data, pos, n)
            n, pos = unpack_u32(data, pos)
            res, pos = take(data, pos, n)
            payloads.append((rt, res))
            rt_total += len(rt)
            res_total += len(res)
        gofs.append(ParsedGof(switch, iframe, fwd, bwd, payloads,
                              iframe_bytes=len(iframe),
                              keynode_bytes=len(fwd) + len(bwd),
                              rt_bytes=rt_total, residual_bytes=res_total))
    if pos != len(data):
        raise CorruptStream(f"{len(data) - pos} trailing bytes after last GoF", pos)
    return header, gofs


def config_from_header(header: ParsedHeader) -> CodecConfig:
    mode = {v: k for k, v in _MODE_NAMES.items()}[header.mode]
    return CodecConfig(
        gof_size=header.gof_size, num_keynodes=header.num_keynodes,
        Q=header.Q, prediction_mode="ff" if mode == "dual" else mode,
        iframe_quant_bits=header.iframe_bits,
        residual=ResidualConfig(n_levels=header.n_res_levels),
        n_rt_levels=header.n_rt_levels)


def decode_sequence(data: bytes) -> list[Mesh]:
    """Decode a container back into mesh frames."""
    header, gofs = parse_container(data)
    cfg = config_from_header(header)
    spans = _gof_spans(header.num_frames, header.gof_size)
    decoded_iframes = [
        decode_iframe(g.iframe_payload, spans[k][0], header.iframe_bits)
        for k, g in enumerate(gofs)]
    frames: list[Mesh] = []
    for k, (start, end) in enumerate(spans):
        nxt = decoded_iframes[k + 1] if k + 1 < len(spans) else None
        record = GofRecord(gofs[k].switch_index, gofs[k].iframe_payload,
                           gofs[k].fwd_anchors, gofs[k].bwd_anchors,
                           gofs[k].p_payloads)
        frames.extend(decode_gof(record, decoded_iframes[k], cfg, nxt,
                                 start, end - start))
    return frames
