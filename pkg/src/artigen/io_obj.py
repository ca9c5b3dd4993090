"""File formats: Wavefront OBJ meshes and XYZ / binary PLY point clouds."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import InvalidArgument, InvalidMesh
from .geometry import TriangleMesh


def load_obj(path) -> TriangleMesh:
    """Read an OBJ mesh; polygons are triangulated by fan."""
    verts, tris = [], []
    with open(path, "r") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = []
                for token in parts[1:]:
                    vi = token.split("/")[0]
                    i = int(vi)
                    idx.append(i - 1 if i > 0 else len(verts) + i)
                for k in range(1, len(idx) - 1):
                    tris.append([idx[0], idx[k], idx[k + 1]])
    if not verts:
        raise InvalidMesh(f"no vertices in OBJ file {path}")
    return TriangleMesh(np.asarray(verts), np.asarray(tris, dtype=np.int64).reshape(-1, 3))


def save_obj(mesh: TriangleMesh, path) -> None:
    """Write an OBJ mesh with per-face normals; positions use 9 significant digits."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    normals = mesh.triangle_normals()
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for n in normals:
            fh.write(f"vn {n[0]:.9g} {n[1]:.9g} {n[2]:.9g}\n")
        for fi, t in enumerate(mesh.triangles):
            ni = fi + 1
            fh.write(f"f {t[0]+1}//{ni} {t[1]+1}//{ni} {t[2]+1}//{ni}\n")


def load_point_cloud(path) -> np.ndarray:
    """Read positions from an ASCII XYZ file or a binary little-endian PLY."""
    path = Path(path)
    if path.suffix.lower() == ".ply":
        return _load_ply(path)
    pts = []
    with open(path, "r") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            vals = line.split()
            pts.append([float(vals[0]), float(vals[1]), float(vals[2])])
    return np.asarray(pts, dtype=np.float64).reshape(-1, 3)


def save_point_cloud(points: np.ndarray, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if path.suffix.lower() == ".ply":
        _save_ply(pts, path)
        return
    with open(path, "w") as fh:
        for p in pts:
            fh.write(f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g}\n")


def _load_ply(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = []
        while True:
            line = fh.readline().decode("ascii").strip()
            header.append(line)
            if line == "end_header":
                break
        n = None
        props = []
        fmt_ok = False
        in_vertex = False
        for line in header:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "format" and parts[1] == "binary_little_endian":
                fmt_ok = True
            elif parts[0] == "element":
                in_vertex = parts[1] == "vertex"
                if in_vertex:
                    n = int(parts[2])
            elif parts[0] == "property" and in_vertex:
                props.append((parts[1], parts[2]))
        if not fmt_ok or n is None:
            raise InvalidArgument(f"unsupported PLY file {path}")
        sizes = {"float": 4, "float32": 4, "double": 8, "float64": 8,
                 "uchar": 1, "uint8": 1, "int": 4, "int32": 4}
        offsets, off = {}, 0
        for typ, name in props:
            offsets[name] = (off, typ)
            off += sizes[typ]
        raw = fh.read(n * off)
        pts = np.empty((n, 3))
        for col, name in enumerate(("x", "y", "z")):
            if name not in offsets:
                raise InvalidArgument(f"PLY file {path} lacks {name} property")
            start, typ = offsets[name]
            code = "<f" if sizes[typ] == 4 else "<d"
            for i in range(n):
                pts[i, col] = struct.unpack_from(code, raw, i * off + start)[0]
    return pts


def _save_ply(points: np.ndarray, path) -> None:
    n = len(points)
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {n}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "end_header\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(points.astype("<f4").tobytes())
