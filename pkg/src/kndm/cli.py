"""Command-line interface for the codec and its experiment harness."""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from . import codec, harness, metrics, synth
from .meshio import load_mesh, save_mesh
from .registration import RegistrationParams
from .residual import ResidualConfig

_FRAME_EXTENSIONS = (".obj", ".ply")


def _load_frame_dir(path: str) -> list:
    root = Path(path)
    files = sorted(p for p in root.iterdir()
                   if p.suffix.lower() in _FRAME_EXTENSIONS)
    if not files:
        raise SystemExit(f"no .obj/.ply frames found in {root}")
    return [load_mesh(p, frame_index=i) for i, p in enumerate(files)]


def _parse_mode(text: str) -> tuple[str, int | None]:
    if text == "ff" or text == "adp":
        return text, None
    if text.startswith("dual:"):
        return "dual", int(text.split(":", 1)[1])
    raise SystemExit(f"bad --mode {text!r}; expected ff, dual:<s>, or adp")


def _config_from_args(args) -> codec.CodecConfig:
    mode, switch = _parse_mode(args.mode)
    return codec.CodecConfig(
        gof_size=args.gof,
        num_keynodes=args.nodes,
        Q=args.q,
        prediction_mode=mode,
        switch_index=switch,
        iframe_quant_bits=args.iframe_bits,
        residual=ResidualConfig(
            depth=args.octree_depth,
            leaf_budget=args.leaf_budget,
            ncoc_threshold=args.ncoc_thresh,
            n_levels=args.res_levels,
            ncoc_enabled=args.ncoc_thresh > 0,
        ),
        n_rt_levels=args.rt_levels,
        registration=RegistrationParams(),
        seed=args.seed,
    )


def _cmd_encode(args) -> None:
    frames = _load_frame_dir(args.input_dir)
    cfg = _config_from_args(args)
    stream = codec.encode_sequence(frames, cfg)
    Path(args.output).write_bytes(stream)
    print(f"encoded {len(frames)} frames -> {len(stream)} bytes ({args.output})")


def _cmd_decode(args) -> None:
    data = Path(args.input).read_bytes()
    frames = codec.decode_sequence(data)
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, mesh in enumerate(frames):
        save_mesh(mesh, out / f"frame_{i:04d}.{args.format}")
    print(f"decoded {len(frames)} frames -> {out}")


def _cmd_metrics(args) -> None:
    frames_a = _load_frame_dir(args.dir_a)
    frames_b = _load_frame_dir(args.dir_b)
    if len(frames_a) != len(frames_b):
        raise SystemExit(f"frame count mismatch: {len(frames_a)} vs {len(frames_b)}")
    rows = []
    for i, (a, b) in enumerate(zip(frames_a, frames_b)):
        rows.append({
            "frame_index": i,
            "bits": 0,
            "p2s_rmse": metrics.p2s_rmse(a, b),
            "hausdorff": metrics.hausdorff(a, b),
        })
    with open(args.csv, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    mean = sum(r["p2s_rmse"] for r in rows) / len(rows)
    print(f"wrote {args.csv}; mean p2s_rmse {mean:.6g}")


def _cmd_synth(args) -> None:
    frames = synth.generate_sequence(args.kind, args.frames, args.resolution,
                                     args.seed)
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, mesh in enumerate(frames):
        save_mesh(mesh, out / f"frame_{i:04d}.{args.format}")
    print(f"wrote {len(frames)} {args.kind} frames -> {out}")


def _cmd_report(args) -> None:
    data = Path(args.input).read_bytes()
    print(json.dumps(harness.report_components(data), indent=2))


def _cmd_sweep(args) -> None:
    spec = json.loads(Path(args.config).read_text())
    seq = spec["sequence"]
    if "dir" in seq:
        frames = _load_frame_dir(seq["dir"])
    else:
        frames = synth.generate_sequence(seq["kind"], seq["frames"],
                                         seq["resolution"], seq.get("seed", 0))
    configs = [harness.config_from_dict(c) for c in spec["configs"]]
    rows = harness.sweep(configs, frames)
    fieldnames = sorted({k for row in rows for k in row})
    with open(args.output, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(rows)
    if args.json:
        Path(args.json).write_text(json.dumps(rows, indent=2, default=str))
    print(f"wrote {len(rows)} rows -> {args.output}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kndm", description="Key-node driven dynamic mesh geometry codec")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("encode", help="encode a directory of mesh frames")
    p.add_argument("input_dir")
    p.add_argument("output")
    p.add_argument("--gof", type=int, default=5)
    p.add_argument("--nodes", type=int, default=40)
    p.add_argument("--q", type=int, default=4)
    p.add_argument("--mode", default="ff", help="ff | dual:<s> | adp")
    p.add_argument("--iframe-bits", type=int, default=14)
    p.add_argument("--octree-depth", type=int, default=5)
    p.add_argument("--leaf-budget", type=int, default=512)
    p.add_argument("--ncoc-thresh", type=float, default=0.0)
    p.add_argument("--rt-levels", type=int, default=64)
    p.add_argument("--res-levels", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_encode)

    p = sub.add_parser("decode", help="decode a bitstream to mesh frames")
    p.add_argument("input")
    p.add_argument("output_dir")
    p.add_argument("--format", choices=("obj", "ply"), default="obj")
    p.set_defaults(func=_cmd_decode)

    p = sub.add_parser("metrics", help="compare two frame directories")
    p.add_argument("dir_a")
    p.add_argument("dir_b")
    p.add_argument("--csv", required=True)
    p.set_defaults(func=_cmd_metrics)

    p = sub.add_parser("synth", help="generate a synthetic sequence")
    p.add_argument("kind", choices=[k.lower() for k in synth.KINDS])
    p.add_argument("frames", type=int)
    p.add_argument("resolution", type=int)
    p.add_argument("output_dir")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--format", choices=("obj", "ply"), default="obj")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("report", help="per-component size breakdown of a stream")
    p.add_argument("input")
    p.set_defaults(func=_cmd_report)

    p = sub.add_parser("sweep", help="run a JSON-configured RD sweep")
    p.add_argument("config")
    p.add_argument("output")
    p.add_argument("--json", help="also write the rows as an RD summary JSON")
    p.set_defaults(func=_cmd_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    args.func(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
