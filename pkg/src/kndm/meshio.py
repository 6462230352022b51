"""OBJ and binary little-endian PLY readers/writers.

Attribute data (normals, UVs, colors) is ignored on read and never written.
Vertex order is preserved exactly; positions round-trip bit-exactly (OBJ uses
17-significant-digit decimals, PLY stores float64).
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .mesh import Mesh, MeshError


def load_mesh(path, fmt: str | None = None, frame_index: int = 0) -> Mesh:
    """Load an OBJ or PLY file; format inferred from the extension if omitted."""
    path = Path(path)
    if fmt is None:
        fmt = path.suffix.lstrip(".").upper()
    fmt = fmt.upper()
    if fmt == "OBJ":
        return _load_obj(path, frame_index)
    if fmt == "PLY":
        return _load_ply(path, frame_index)
    raise MeshError(f"unsupported mesh format {fmt!r}")


def save_mesh(mesh: Mesh, path, fmt: str | None = None) -> None:
    path = Path(path)
    if fmt is None:
        fmt = path.suffix.lstrip(".").upper()
    fmt = fmt.upper()
    if fmt == "OBJ":
        _save_obj(mesh, path)
    elif fmt == "PLY":
        _save_ply(mesh, path)
    else:
        raise MeshError(f"unsupported mesh format {fmt!r}")


# --- OBJ ---------------------------------------------------------------------

def _load_obj(path: Path, frame_index: int) -> Mesh:
    positions = []
    faces = []
    with open(path, "r", encoding="utf-8", errors="replace") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            tag = parts[0]
            if tag == "v":
                if len(parts) < 4:
                    raise MeshError(f"{path}:{lineno}: vertex record needs 3 coordinates")
                try:
                    positions.append([float(parts[1]), float(parts[2]), float(parts[3])])
                except ValueError as exc:
                    raise MeshError(f"{path}:{lineno}: bad vertex coordinate: {exc}") from None
            elif tag == "f":
                refs = parts[1:]
                if len(refs) != 3:
                    raise MeshError(
                        f"{path}:{lineno}: non-triangle face at face {len(faces)} "
                        f"({len(refs)} vertices)")
                idx = []
                for ref in refs:
                    head = ref.split("/")[0]
                    try:
                        v = int(head)
                    except ValueError:
                        raise MeshError(f"{path}:{lineno}: bad face index {ref!r}") from None
                    if v <= 0:
                        raise MeshError(f"{path}:{lineno}: face indices must be positive, got {v}")
                    idx.append(v - 1)
                faces.append(idx)
            # all other records (vn, vt, usemtl, ...) are ignored
    if not positions:
        raise MeshError(f"{path}: no geometry found")
    return Mesh(np.asarray(positions, dtype=np.float64),
                np.asarray(faces, dtype=np.int64).reshape(-1, 3),
                frame_index)


def _save_obj(mesh: Mesh, path: Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in mesh.positions:
            fh.write(f"v {p[0]:.17g} {p[1]:.17g} {p[2]:.17g}\n")
        for f in mesh.faces:
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")


# --- PLY ---------------------------------------------------------------------

_PLY_SCALARS = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}


def _load_ply(path: Path, frame_index: int) -> Mesh:
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(b"ply"):
        raise MeshError(f"{path}: not a PLY file")
    end = data.find(b"end_header")
    if end < 0:
        raise MeshError(f"{path}: missing end_header")
    header_end = data.find(b"\n", end) + 1
    header = data[:header_end].decode("ascii", errors="replace")
    body = data[header_end:]

    elements: list[tuple[str, int, list]] = []  # (name, count, [(kind, dtype...)...])
    fmt_seen = None
    for line in header.splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format":
            fmt_seen = parts[1]
        elif parts[0] == "element":
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if not elements:
                raise MeshError(f"{path}: property before element")
            if parts[1] == "list":
                elements[-1][2].append(("list", parts[2], parts[3], parts[4]))
            else:
                elements[-1][2].append(("scalar", parts[1], parts[2]))
    if fmt_seen != "binary_little_endian":
        raise MeshError(f"{path}: unsupported PLY format {fmt_seen!r} "
                        "(only binary_little_endian)")

    positions = None
    faces: list[list[int]] = []
    offset = 0
    for name, count, props in elements:
        if name == "vertex":
            if any(kind == "list" for kind, *_ in props):
                raise MeshError(f"{path}: list properties on vertices are unsupported")
            dtype = np.dtype([(pname, "<" + _PLY_SCALARS[ptype])
                              for _, ptype, pname in props])
            need = count * dtype.itemsize
            if offset + need > len(body):
                raise MeshError(f"{path}: truncated vertex data")
            rec = np.frombuffer(body, dtype=dtype, count=count, offset=offset)
            offset += need
            for axis in ("x", "y", "z"):
                if axis not in dtype.names:
                    raise MeshError(f"{path}: vertex element lacks property {axis!r}")
            positions = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64)
        elif name == "face":
            if len(props) != 1 or props[0][0] != "list":
                raise MeshError(f"{path}: face element must be a single list property")
            _, count_type, index_type, _ = props[0]
            cnt_dt = np.dtype("<" + _PLY_SCALARS[count_type])
            idx_dt = np.dtype("<" + _PLY_SCALARS[index_type])
            for i in range(count):
                if offset + cnt_dt.itemsize > len(body):
                    raise MeshError(f"{path}: truncated face data at face {i}")
                n = int(np.frombuffer(body, cnt_dt, 1, offset)[0])
                offset += cnt_dt.itemsize
                if n != 3:
                    raise MeshError(f"{path}: non-triangle face at face {i} ({n} vertices)")
                if offset + 3 * idx_dt.itemsize > len(body):
                    raise MeshError(f"{path}: truncated face data at face {i}")
                faces.append(np.frombuffer(body, idx_dt, 3, offset).astype(np.int64).tolist())
                offset += 3 * idx_dt.itemsize
        else:
            # skip unknown fixed-stride elements; lists cannot be skipped blindly
            if any(kind == "list" for kind, *_ in props):
                raise MeshError(f"{path}: cannot skip element {name!r} with list property")
            stride = sum(np.dtype(_PLY_SCALARS[ptype]).itemsize for _, ptype, _ in props)
            offset += stride * count
    if positions is None or len(positions) == 0:
        raise MeshError(f"{path}: no geometry found")
    return Mesh(positions, np.asarray(faces, dtype=np.int64).reshape(-1, 3), frame_index)


def _save_ply(mesh: Mesh, path: Path) -> None:
    header = (
        "ply\n"
        "format binary_little_endian 1.0\n"
        f"element vertex {mesh.num_vertices}\n"
        "property double x\n"
        "property double y\n"
        "property double z\n"
        f"element face {mesh.num_faces}\n"
        "property list uchar int vertex_indices\n"
        "end_header\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(np.ascontiguousarray(mesh.positions, dtype="<f8").tobytes())
        for f in mesh.faces:
            fh.write(struct.pack("<Biii", 3, int(f[0]), int(f[1]), int(f[2])))
