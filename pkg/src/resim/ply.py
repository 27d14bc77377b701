"""PLY 1.0 reader and writer for point clouds and triangle meshes.

Point clouds are written with ``x y z`` as float64 plus whichever of
``intensity`` (float32), ``beam_id`` (int32), ``range`` (float64),
``source`` (uint8, 0 = top, 1 = side) and ``azimuth`` (float64) are set.
Meshes add a ``face`` element with a ``vertex_indices`` list.
"""

from __future__ import annotations

import os
from pathlib import Path
from typing import Union

import numpy as np

from .geometry import PointCloud, TriangleMesh


class PlyError(ValueError):
    """Base class for PLY problems."""


class PlyParseError(PlyError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class PlyUnsupportedError(PlyError):
    pass


_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}
_NAMES = {"f8": "double", "f4": "float", "i4": "int", "u1": "uchar", "i1": "char", "u4": "uint"}

_CLOUD_PROPS = [
    ("intensity", "f4"),
    ("beam_id", "i4"),
    ("range", "f8"),
    ("source", "u1"),
    ("azimuth", "f8"),
]

PathLike = Union[str, os.PathLike]


def write_ply(obj: PointCloud | TriangleMesh, path: PathLike, encoding: str = "binary") -> None:
    """Write a cloud or mesh. ``encoding`` is ``"ascii"`` or ``"binary"`` (little endian)."""
    if encoding in ("binary", "binary_little_endian", "binary-little-endian"):
        binary = True
    elif encoding == "ascii":
        binary = False
    else:
        raise ValueError(f"unknown PLY encoding {encoding!r}")

    fields = [("x", "f8"), ("y", "f8"), ("z", "f8")]
    columns = []
    if isinstance(obj, TriangleMesh):
        pts = obj.vertices
        faces = obj.triangles
    else:
        pts = obj.points
        faces = None
    columns = [pts[:, 0], pts[:, 1], pts[:, 2]]
    if isinstance(obj, PointCloud):
        for name, code in _CLOUD_PROPS:
            val = getattr(obj, name)
            if val is not None:
                fields.append((name, code))
                columns.append(val)

    header = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
              "comment written by resim", f"element vertex {len(pts)}"]
    header += [f"property {_NAMES[code]} {name}" for name, code in fields]
    if faces is not None:
        header += [f"element face {len(faces)}", "property list uchar int vertex_indices"]
    header.append("end_header")

    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            vdt = np.dtype([(n, "<" + c) for n, c in fields])
            rec = np.empty(len(pts), dtype=vdt)
            for (n, _), col in zip(fields, columns):
                rec[n] = col
            fh.write(rec.tobytes())
            if faces is not None and len(faces):
                fdt = np.dtype([("n", "u1"), ("idx", "<i4", (3,))])
                frec = np.empty(len(faces), dtype=fdt)
                frec["n"] = 3
                frec["idx"] = faces
                fh.write(frec.tobytes())
        else:
            lines = []
            for i in range(len(pts)):
                parts = []
                for (_, code), col in zip(fields, columns):
                    v = col[i]
                    parts.append(repr(float(v)) if code[0] == "f" else str(int(v)))
                lines.append(" ".join(parts))
            if faces is not None:
                lines.extend(f"3 {a} {b} {c}" for a, b, c in faces)
            if lines:
                fh.write(("\n".join(lines) + "\n").encode("ascii"))


class _Element:
    def __init__(self, name: str, count: int, line: int):
        self.name = name
        self.count = count
        self.line = line
        self.props: list[tuple] = []  # (name, dtype) or (name, count_dtype, item_dtype)


def _parse_header(fh):
    first = fh.readline()
    if first.strip() != b"ply":
        raise PlyParseError("missing 'ply' magic", 1)
    fmt = None
    elements: list[_Element] = []
    lineno = 1
    while True:
        raw = fh.readline()
        lineno += 1
        if not raw:
            raise PlyParseError("unexpected end of file before end_header", lineno)
        try:
            line = raw.decode("ascii").strip()
        except UnicodeDecodeError:
            raise PlyParseError("non-ascii header line", lineno) from None
        if not line or line.startswith("comment") or line.startswith("obj_info"):
            continue
        tok = line.split()
        if tok[0] == "format":
            if len(tok) != 3:
                raise PlyParseError("malformed format line", lineno)
            if tok[1] not in ("ascii", "binary_little_endian", "binary_big_endian"):
                raise PlyParseError(f"unknown format {tok[1]!r}", lineno)
            if tok[2] != "1.0":
                raise PlyUnsupportedError(f"PLY version {tok[2]} is not supported")
            fmt = tok[1]
        elif tok[0] == "element":
            if len(tok) != 3:
                raise PlyParseError("malformed element line", lineno)
            try:
                count = int(tok[2])
            except ValueError:
                raise PlyParseError(f"bad element count {tok[2]!r}", lineno) from None
            if count < 0:
                raise PlyParseError("negative element count", lineno)
            elements.append(_Element(tok[1], count, lineno))
        elif tok[0] == "property":
            if not elements:
                raise PlyParseError("property before any element", lineno)
            if len(tok) >= 2 and tok[1] == "list":
                if len(tok) != 5:
                    raise PlyParseError("malformed list property", lineno)
                if tok[2] not in _TYPES or tok[3] not in _TYPES:
                    raise PlyUnsupportedError(f"line {lineno}: unknown property type in {line!r}")
                elements[-1].props.append((tok[4], _TYPES[tok[2]], _TYPES[tok[3]]))
            else:
                if len(tok) != 3:
                    raise PlyParseError("malformed property line", lineno)
                if tok[1] not in _TYPES:
                    raise PlyUnsupportedError(f"line {lineno}: unknown property type {tok[1]!r}")
                elements[-1].props.append((tok[2], _TYPES[tok[1]]))
        elif tok[0] == "end_header":
            break
        else:
            raise PlyParseError(f"unexpected header keyword {tok[0]!r}", lineno)
    if fmt is None:
        raise PlyParseError("header has no format line", lineno)
    return fmt, elements, lineno


def _read_binary(fh, el: _Element, endian: str):
    if all(len(p) == 2 for p in el.props):
        dt = np.dtype([(p[0], endian + p[1]) for p in el.props])
        buf = fh.read(dt.itemsize * el.count)
        if len(buf) != dt.itemsize * el.count:
            raise PlyParseError(f"element {el.name!r} truncated")
        return np.frombuffer(buf, dtype=dt), {}
    lists = {p[0]: [] for p in el.props if len(p) == 3}
    scalars = {p[0]: np.empty(el.count, dtype=p[1]) for p in el.props if len(p) == 2}
    # Fast path: a lone list property where every row has three entries.
    if len(el.props) == 1 and len(el.props[0]) == 3 and el.count:
        name, cdt, idt = el.props[0]
        rdt = np.dtype([("n", endian + cdt), ("idx", endian + idt, (3,))])
        pos = fh.tell()
        buf = fh.read(rdt.itemsize * el.count)
        if len(buf) == rdt.itemsize * el.count:
            rec = np.frombuffer(buf, dtype=rdt)
            if np.all(rec["n"] == 3):
                return None, {name: rec["idx"].astype(np.int64)}
        fh.seek(pos)
    for i in range(el.count):
        for p in el.props:
            if len(p) == 2:
                d = np.dtype(endian + p[1])
                b = fh.read(d.itemsize)
                if len(b) != d.itemsize:
                    raise PlyParseError(f"element {el.name!r} truncated")
                scalars[p[0]][i] = np.frombuffer(b, d)[0]
            else:
                cd, idt = np.dtype(endian + p[1]), np.dtype(endian + p[2])
                b = fh.read(cd.itemsize)
                if len(b) != cd.itemsize:
                    raise PlyParseError(f"element {el.name!r} truncated")
                n = int(np.frombuffer(b, cd)[0])
                b = fh.read(idt.itemsize * n)
                if len(b) != idt.itemsize * n:
                    raise PlyParseError(f"element {el.name!r} truncated")
                lists[p[0]].append(np.frombuffer(b, idt).astype(np.int64))
    return scalars, lists


def _read_ascii(lines, start_line: int, el: _Element):
    scalars = {p[0]: np.empty(el.count, dtype=p[1]) for p in el.props if len(p) == 2}
    lists = {p[0]: [] for p in el.props if len(p) == 3}
    for i in range(el.count):
        lineno = start_line + i
        try:
            raw = next(lines)
        except StopIteration:
            raise PlyParseError(f"element {el.name!r} has fewer rows than declared", lineno) from None
        tok = raw.split()
        k = 0
        try:
            for p in el.props:
                if len(p) == 2:
                    scalars[p[0]][i] = float(tok[k]) if p[1][0] == "f" else int(tok[k])
                    k += 1
                else:
                    n = int(tok[k])
                    lists[p[0]].append(np.array([int(t) for t in tok[k + 1:k + 1 + n]], dtype=np.int64))
                    if len(lists[p[0]][-1]) != n:
                        raise IndexError
                    k += 1 + n
        except (IndexError, ValueError):
            raise PlyParseError(f"malformed {el.name} row {raw.strip()!r}", lineno) from None
    return scalars, lists


def read_ply(path: PathLike) -> PointCloud | TriangleMesh:
    """Read a PLY file; returns a mesh when a ``face`` element is declared."""
    with open(path, "rb") as fh:
        fmt, elements, header_lines = _parse_header(fh)
        data = {}
        if fmt == "ascii":
            text = fh.read().decode("ascii", errors="replace")
            lines = iter(text.splitlines())
            lineno = header_lines + 1
            for el in elements:
                data[el.name] = _read_ascii(lines, lineno, el)
                lineno += el.count
        else:
            endian = "<" if fmt == "binary_little_endian" else ">"
            for el in elements:
                data[el.name] = _read_binary(fh, el, endian)

    by_name = {el.name: el for el in elements}
    if "vertex" not in by_name:
        raise PlyUnsupportedError("file has no 'vertex' element")
    vprops = {p[0] for p in by_name["vertex"].props}
    missing = {"x", "y", "z"} - vprops
    if missing:
        raise PlyUnsupportedError(f"vertex element lacks required properties {sorted(missing)}")
    vs, _ = data["vertex"]
    pts = np.column_stack([np.asarray(vs[c], dtype=np.float64) for c in ("x", "y", "z")]) \
        if by_name["vertex"].count else np.zeros((0, 3))

    if "face" in by_name:
        fel = by_name["face"]
        list_names = [p[0] for p in fel.props if len(p) == 3]
        name = "vertex_indices" if "vertex_indices" in list_names else (
            "vertex_index" if "vertex_index" in list_names else None)
        if name is None:
            raise PlyUnsupportedError("face element lacks a vertex_indices list")
        _, flists = data["face"]
        faces = flists.get(name, [])
        if isinstance(faces, np.ndarray):
            tris = faces
        else:
            tris_list = []
            for f in faces:
                if len(f) < 3:
                    raise PlyParseError("face with fewer than three vertices")
                for j in range(1, len(f) - 1):  # fan-triangulate polygons
                    tris_list.append((f[0], f[j], f[j + 1]))
            tris = np.array(tris_list, dtype=np.int64).reshape(-1, 3)
        return TriangleMesh(pts, tris)

    attrs = {}
    for name, _ in _CLOUD_PROPS:
        if name in vprops:
            attrs[name] = np.asarray(vs[name])
    return PointCloud(pts, **attrs)


def read_cloud(path: PathLike) -> PointCloud:
    obj = read_ply(path)
    if isinstance(obj, TriangleMesh):
        return PointCloud(obj.vertices)
    return obj


def read_mesh(path: PathLike) -> TriangleMesh:
    obj = read_ply(path)
    if not isinstance(obj, TriangleMesh):
        raise PlyUnsupportedError(f"{Path(path).name} holds a point cloud, not a mesh")
    return obj
