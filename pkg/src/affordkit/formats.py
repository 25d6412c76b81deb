"""PLY and PCD pointcloud readers and writers.

Supported formats:
  * ply-ascii        PLY with `format ascii 1.0`
  * ply-binary-le    PLY with `format binary_little_endian 1.0`
  * pcd-ascii        PCD v0.7 with `DATA ascii`

Vertices must declare x, y, z; nx, ny, nz (PLY) or normal_x/_y/_z (PCD)
are loaded as normals when present. Unknown scalar vertex properties
are skipped. Big-endian PLY, list properties and non-vertex elements
are rejected with the line or byte offset of the offending construct.
Binary payloads are written as float64, so a write/parse round trip is
bit-exact; ascii writers emit shortest round-trip decimal literals.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .cloud import PointCloud
from .errors import CloudFormatError, DataError, UsageError

FORMATS = ("ply-ascii", "ply-binary-le", "pcd-ascii")

_PLY_TYPES = {
    "char": "b", "int8": "b",
    "uchar": "B", "uint8": "B",
    "short": "h", "int16": "h",
    "ushort": "H", "uint16": "H",
    "int": "i", "int32": "i",
    "uint": "I", "uint32": "I",
    "float": "f", "float32": "f",
    "double": "d", "float64": "d",
}

_NORMAL_NAMES = ("nx", "ny", "nz")


def sniff_format(path) -> str:
    """Infer one of FORMATS from the file header."""
    path = Path(path)
    with open(path, "rb") as f:
        head = f.read(512)
    if head.startswith(b"ply"):
        if b"binary_little_endian" in head:
            return "ply-binary-le"
        if b"binary_big_endian" in head:
            raise CloudFormatError("big-endian PLY is not supported", path=path, line=2)
        return "ply-ascii"
    if b"PCD" in head.split(b"\n")[0] or head.lstrip().startswith(b"#"):
        return "pcd-ascii"
    raise CloudFormatError("unrecognized pointcloud file header", path=path, line=1)


def parse_cloud(path, format: str | None = None) -> PointCloud:
    """Read a pointcloud file; `format` is sniffed when omitted."""
    path = Path(path)
    if not path.exists():
        raise CloudFormatError("file does not exist", path=path)
    if format is None:
        format = sniff_format(path)
    if format in ("ply-ascii", "ply-binary-le"):
        return _parse_ply(path, format)
    if format == "pcd-ascii":
        return _parse_pcd(path)
    raise UsageError(f"unknown format {format!r}; expected one of {FORMATS}")


def write_cloud(cloud: PointCloud, path, format: str = "ply-binary-le") -> None:
    """Write `cloud` so that parse_cloud returns an equal cloud."""
    path = Path(path)
    if format == "ply-ascii":
        _write_ply(cloud, path, binary=False)
    elif format == "ply-binary-le":
        _write_ply(cloud, path, binary=True)
    elif format == "pcd-ascii":
        _write_pcd(cloud, path)
    else:
        raise UsageError(f"unknown format {format!r}; expected one of {FORMATS}")


# ---------------------------------------------------------------- PLY

def _parse_ply_header(raw: bytes, path):
    """Returns (is_binary, vertex_count, properties, body_offset, header_lines)."""
    end = raw.find(b"end_header\n")
    if end < 0:
        raise CloudFormatError("missing end_header", path=path, line=raw.count(b"\n") + 1)
    header_bytes = raw[: end + len(b"end_header\n")]
    lines = header_bytes.decode("ascii", errors="replace").splitlines()
    if not lines or lines[0].strip() != "ply":
        raise CloudFormatError("missing 'ply' magic", path=path, line=1)

    is_binary = None
    vertex_count = None
    properties = []  # (name, struct code) for the vertex element
    in_vertex = False
    for lineno, line in enumerate(lines[1:], start=2):
        tokens = line.split()
        if not tokens or tokens[0] == "comment":
            continue
        if tokens[0] == "format":
            if len(tokens) != 3:
                raise CloudFormatError("malformed format line", path=path, line=lineno)
            if tokens[1] == "ascii":
                is_binary = False
            elif tokens[1] == "binary_little_endian":
                is_binary = True
            elif tokens[1] == "binary_big_endian":
                raise CloudFormatError("big-endian PLY is not supported", path=path, line=lineno)
            else:
                raise CloudFormatError(f"unknown PLY format {tokens[1]!r}", path=path, line=lineno)
        elif tokens[0] == "element":
            if len(tokens) != 3:
                raise CloudFormatError("malformed element line", path=path, line=lineno)
            if tokens[1] == "vertex":
                in_vertex = True
                try:
                    vertex_count = int(tokens[2])
                except ValueError:
                    raise CloudFormatError("non-integer vertex count", path=path, line=lineno)
            else:
                raise CloudFormatError(
                    f"unsupported element type {tokens[1]!r}", path=path, line=lineno
                )
        elif tokens[0] == "property":
            if not in_vertex:
                continue
            if tokens[1] == "list":
                raise CloudFormatError("list properties are not supported", path=path, line=lineno)
            if len(tokens) != 3:
                raise CloudFormatError("malformed property line", path=path, line=lineno)
            code = _PLY_TYPES.get(tokens[1])
            if code is None:
                raise CloudFormatError(
                    f"unsupported property type {tokens[1]!r}", path=path, line=lineno
                )
            properties.append((tokens[2], code))
        elif tokens[0] == "end_header":
            break
        else:
            raise CloudFormatError(f"unknown header keyword {tokens[0]!r}", path=path, line=lineno)

    if is_binary is None:
        raise CloudFormatError("header has no format line", path=path, line=len(lines))
    if vertex_count is None:
        raise CloudFormatError("header declares no vertex element", path=path, line=len(lines))
    names = [name for name, _ in properties]
    for axis in ("x", "y", "z"):
        if axis not in names:
            raise CloudFormatError(f"vertex element lacks {axis!r} field", path=path, line=len(lines))
    return is_binary, vertex_count, properties, len(header_bytes), len(lines)


def _parse_ply(path, format: str) -> PointCloud:
    raw = path.read_bytes()
    is_binary, count, properties, body_offset, header_lines = _parse_ply_header(raw, path)
    if is_binary != (format == "ply-binary-le"):
        declared = "ply-binary-le" if is_binary else "ply-ascii"
        raise CloudFormatError(
            f"requested {format} but header declares {declared}", path=path, line=2
        )
    names = [name for name, _ in properties]
    has_normals = all(n in names for n in _NORMAL_NAMES)
    col = {name: i for i, (name, _) in enumerate(properties)}

    if is_binary:
        fmt = "<" + "".join(code for _, code in properties)
        stride = struct.calcsize(fmt)
        body = raw[body_offset:]
        needed = stride * count
        if len(body) < needed:
            raise CloudFormatError(
                f"truncated payload: expected {needed} bytes for {count} vertices, got {len(body)}",
                path=path,
                offset=body_offset + len(body),
            )
        rows = list(struct.iter_unpack(fmt, body[:needed])) if count else []
        data = np.array(rows, dtype=np.float64).reshape(count, len(properties))
    else:
        text = raw[body_offset:].decode("ascii", errors="replace")
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if len(lines) < count:
            raise CloudFormatError(
                f"truncated payload: header declares {count} vertices, body has {len(lines)}",
                path=path,
                line=header_lines + len(lines) + 1,
            )
        data = np.zeros((count, len(properties)), dtype=np.float64)
        for i in range(count):
            tokens = lines[i].split()
            if len(tokens) < len(properties):
                raise CloudFormatError(
                    f"vertex row has {len(tokens)} fields, expected {len(properties)}",
                    path=path,
                    line=header_lines + i + 1,
                )
            try:
                data[i] = [float(t) for t in tokens[: len(properties)]]
            except ValueError:
                raise CloudFormatError("non-numeric vertex field", path=path, line=header_lines + i + 1)

    points = data[:, [col["x"], col["y"], col["z"]]] if count else np.zeros((0, 3))
    normals = None
    if has_normals and count:
        normals = data[:, [col["nx"], col["ny"], col["nz"]]]
    elif has_normals:
        normals = np.zeros((0, 3))
    return PointCloud(points, normals)


def _fmt(v: float) -> str:
    """Shortest decimal literal that parses back to the same float64."""
    return repr(float(v))


def _write_ply(cloud: PointCloud, path, binary: bool) -> None:
    if len(cloud) and not np.isfinite(cloud.points).all():
        raise DataError("cloud contains non-finite coordinates")
    names = ["x", "y", "z"] + (list(_NORMAL_NAMES) if cloud.has_normals else [])
    header = ["ply", "format binary_little_endian 1.0" if binary else "format ascii 1.0"]
    header.append(f"element vertex {len(cloud)}")
    header += [f"property double {n}" for n in names]
    header.append("end_header")
    data = cloud.points if not cloud.has_normals else np.hstack([cloud.points, cloud.normals])
    try:
        with open(path, "wb") as f:
            f.write(("\n".join(header) + "\n").encode("ascii"))
            if binary:
                f.write(np.ascontiguousarray(data, dtype="<f8").tobytes())
            else:
                for row in data:
                    f.write((" ".join(_fmt(v) for v in row) + "\n").encode("ascii"))
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}") from exc


# ---------------------------------------------------------------- PCD

_PCD_REQUIRED = ("FIELDS", "SIZE", "TYPE", "COUNT", "WIDTH", "HEIGHT", "POINTS", "DATA")


def _parse_pcd(path) -> PointCloud:
    text = path.read_text(encoding="ascii", errors="replace")
    lines = text.splitlines()
    header: dict[str, list[str]] = {}
    body_start = None
    for lineno, line in enumerate(lines, start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        tokens = stripped.split()
        key = tokens[0].upper()
        header[key] = tokens[1:]
        if key == "DATA":
            body_start = lineno
            break
    if body_start is None:
        raise CloudFormatError("missing DATA line", path=path, line=len(lines))
    for key in _PCD_REQUIRED:
        if key not in header:
            raise CloudFormatError(f"missing {key} header entry", path=path, line=body_start)
    if header["DATA"][:1] != ["ascii"]:
        raise CloudFormatError("only DATA ascii is supported", path=path, line=body_start)
    fields = header["FIELDS"]
    for axis in ("x", "y", "z"):
        if axis not in fields:
            raise CloudFormatError(f"FIELDS lacks {axis!r}", path=path, line=body_start)
    try:
        count = int(header["POINTS"][0])
        width = int(header["WIDTH"][0])
        height = int(header["HEIGHT"][0])
    except (ValueError, IndexError):
        raise CloudFormatError("non-integer POINTS/WIDTH/HEIGHT", path=path, line=body_start)
    if width * height != count:
        raise CloudFormatError(
            f"WIDTH*HEIGHT ({width}*{height}) != POINTS ({count})", path=path, line=body_start
        )

    rows = [ln for ln in lines[body_start:] if ln.strip() and not ln.strip().startswith("#")]
    if len(rows) < count:
        raise CloudFormatError(
            f"truncated payload: header declares {count} points, body has {len(rows)}",
            path=path,
            line=body_start + len(rows) + 1,
        )
    data = np.zeros((count, len(fields)), dtype=np.float64)
    for i in range(count):
        tokens = rows[i].split()
        if len(tokens) != len(fields):
            raise CloudFormatError(
                f"point row has {len(tokens)} fields, expected {len(fields)}",
                path=path,
                line=body_start + i + 1,
            )
        try:
            data[i] = [float(t) for t in tokens]
        except ValueError:
            raise CloudFormatError("non-numeric point field", path=path, line=body_start + i + 1)

    col = {name: i for i, name in enumerate(fields)}
    points = data[:, [col["x"], col["y"], col["z"]]] if count else np.zeros((0, 3))
    normal_names = ("normal_x", "normal_y", "normal_z")
    normals = None
    if all(n in col for n in normal_names):
        normals = data[:, [col[n] for n in normal_names]] if count else np.zeros((0, 3))
    return PointCloud(points, normals)


def _write_pcd(cloud: PointCloud, path) -> None:
    if len(cloud) and not np.isfinite(cloud.points).all():
        raise DataError("cloud contains non-finite coordinates")
    fields = ["x", "y", "z"]
    data = cloud.points
    if cloud.has_normals:
        fields += ["normal_x", "normal_y", "normal_z"]
        data = np.hstack([cloud.points, cloud.normals])
    n = len(cloud)
    k = len(fields)
    header = [
        "# .PCD v0.7 - Point Cloud Data file format",
        "VERSION 0.7",
        "FIELDS " + " ".join(fields),
        "SIZE " + " ".join(["8"] * k),
        "TYPE " + " ".join(["F"] * k),
        "COUNT " + " ".join(["1"] * k),
        f"WIDTH {n}",
        "HEIGHT 1",
        "VIEWPOINT 0 0 0 1 0 0 0",
        f"POINTS {n}",
        "DATA ascii",
    ]
    try:
        with open(path, "w", encoding="ascii") as f:
            f.write("\n".join(header) + "\n")
            for row in data:
                f.write(" ".join(_fmt(v) for v in row) + "\n")
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}") from exc
