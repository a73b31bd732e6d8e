"""PLY reader/writer for point clouds, meshes, and Gaussian scenes.

Supports ascii and binary_little_endian, vertex elements with scalar
properties, and face elements with a single index-list property.

Gaussian scenes are written in optimization space so checkpoints round-trip
bit-exactly: double-precision x/y/z, scale_0..2 (log scale), rot_0..3
(unnormalized quaternion), opacity (logit), red/green/blue (rgb in [0, 1]).
Point clouds use the common float xyz + uchar rgb layout.
"""

from __future__ import annotations

import io
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .scene import GaussianScene, ReferenceAsset

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
_TYPE_NAMES = {v: k for k, v in
               [("char", "i1"), ("uchar", "u1"), ("short", "i2"), ("ushort", "u2"),
                ("int", "i4"), ("uint", "u4"), ("float", "f4"), ("double", "f8")]}

SCENE_PROPS = ["x", "y", "z", "scale_0", "scale_1", "scale_2",
               "rot_0", "rot_1", "rot_2", "rot_3", "opacity",
               "red", "green", "blue"]


def _parse_header(fh) -> tuple[str, list]:
    line = fh.readline().strip()
    if line != b"ply":
        raise ConfigError("not a PLY file (missing 'ply' magic)")
    fmt = None
    elements = []  # (name, count, [(prop, dtype) or ('list', count_dtype, item_dtype, prop)])
    while True:
        raw = fh.readline()
        if not raw:
            raise ConfigError("unexpected EOF in PLY header")
        parts = raw.decode("ascii").strip().split()
        if not parts:
            continue
        if parts[0] == "comment":
            continue
        if parts[0] == "format":
            if parts[1] not in ("ascii", "binary_little_endian"):
                raise ConfigError(f"unsupported PLY format {parts[1]}")
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append({"name": parts[1], "count": int(parts[2]), "props": []})
        elif parts[0] == "property":
            if not elements:
                raise ConfigError("property before any element in PLY header")
            if parts[1] == "list":
                elements[-1]["props"].append(("list", _TYPES[parts[2]], _TYPES[parts[3]], parts[4]))
            else:
                elements[-1]["props"].append((parts[2], _TYPES[parts[1]]))
        elif parts[0] == "end_header":
            break
        else:
            raise ConfigError(f"unrecognized PLY header line: {' '.join(parts)}")
    if fmt is None:
        raise ConfigError("PLY header missing format line")
    return fmt, elements


def read_ply(path) -> dict:
    """Parse a PLY file into {element: {prop: array}}; list properties become
    (count, items) object arrays collapsed to an (N, k) int array when all
    rows have equal length."""
    with open(path, "rb") as fh:
        fmt, elements = _parse_header(fh)
        out = {}
        for el in elements:
            name, count, props = el["name"], el["count"], el["props"]
            has_list = any(p[0] == "list" for p in props)
            if fmt == "binary_little_endian" and not has_list:
                dt = np.dtype([(p[0], "<" + p[1]) for p in props])
                buf = fh.read(dt.itemsize * count)
                if len(buf) != dt.itemsize * count:
                    raise ConfigError(f"PLY element '{name}' truncated")
                rec = np.frombuffer(buf, dtype=dt, count=count)
                out[name] = {p[0]: np.ascontiguousarray(rec[p[0]]) for p in props}
            elif fmt == "binary_little_endian":
                out[name] = _read_binary_lists(fh, name, count, props)
            else:
                out[name] = _read_ascii(fh, name, count, props)
    return out


def _read_ascii(fh, name, count, props):
    cols = {p[-1] if p[0] == "list" else p[0]: [] for p in props}
    for _ in range(count):
        line = fh.readline()
        if not line:
            raise ConfigError(f"PLY element '{name}' truncated")
        vals = line.split()
        i = 0
        for p in props:
            if p[0] == "list":
                k = int(vals[i]); i += 1
                cols[p[3]].append([float(v) for v in vals[i:i + k]]); i += k
            else:
                cols[p[0]].append(float(vals[i])); i += 1
    return {k: _collapse(v) for k, v in cols.items()}


def _read_binary_lists(fh, name, count, props):
    cols = {p[-1] if p[0] == "list" else p[0]: [] for p in props}
    for _ in range(count):
        for p in props:
            if p[0] == "list":
                k = int(np.frombuffer(fh.read(np.dtype(p[1]).itemsize), dtype="<" + p[1])[0])
                item = np.dtype(p[2]).itemsize
                cols[p[3]].append(np.frombuffer(fh.read(item * k), dtype="<" + p[2]).tolist())
            else:
                cols[p[0]].append(np.frombuffer(fh.read(np.dtype(p[1]).itemsize), dtype="<" + p[1])[0])
    return {k: _collapse(v) for k, v in cols.items()}


def _collapse(rows):
    if rows and isinstance(rows[0], list):
        lens = {len(r) for r in rows}
        if len(lens) == 1:
            return np.asarray(rows)
        return np.array(rows, dtype=object)
    return np.asarray(rows)


def _write_header(fh, fmt: str, elements: list[tuple[str, int, list[tuple[str, str]]]]):
    fh.write(b"ply\n")
    fh.write(f"format {fmt} 1.0\n".encode())
    fh.write(b"comment written by gsdistill\n")
    for name, count, props in elements:
        fh.write(f"element {name} {count}\n".encode())
        for pname, pdtype in props:
            if pname == "vertex_indices":
                fh.write(f"property list uchar int {pname}\n".encode())
            else:
                fh.write(f"property {_TYPE_NAMES[pdtype]} {pname}\n".encode())
    fh.write(b"end_header\n")


def write_pointcloud_ply(path, points, colors=None, faces=None, ascii_format: bool = False):
    """Write a point cloud (float32 xyz, uchar rgb) with optional faces."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    n = points.shape[0]
    props = [("x", "f4"), ("y", "f4"), ("z", "f4")]
    if colors is not None:
        colors = np.clip(np.atleast_2d(colors), 0.0, 1.0)
        props += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    elements = [("vertex", n, props)]
    if faces is not None:
        faces = np.atleast_2d(np.asarray(faces, dtype=np.int64))
        elements.append(("face", faces.shape[0], [("vertex_indices", "i4")]))
    fmt = "ascii" if ascii_format else "binary_little_endian"
    with open(path, "wb") as fh:
        _write_header(fh, fmt, elements)
        rec = np.zeros(n, dtype=np.dtype([(p, "<" + t) for p, t in props]))
        for i, axis in enumerate("xyz"):
            rec[axis] = points[:, i].astype(np.float32)
        if colors is not None:
            rgb8 = np.round(colors * 255.0).astype(np.uint8)
            for i, ch in enumerate(("red", "green", "blue")):
                rec[ch] = rgb8[:, i]
        if ascii_format:
            for row in rec:
                fh.write((" ".join(_fmt_val(v) for v in row) + "\n").encode())
            if faces is not None:
                for f in faces:
                    fh.write((f"3 {f[0]} {f[1]} {f[2]}\n").encode())
        else:
            fh.write(rec.tobytes())
            if faces is not None:
                for f in faces:
                    fh.write(np.uint8(3).tobytes())
                    fh.write(np.asarray(f, dtype="<i4").tobytes())


def _fmt_val(v):
    if isinstance(v, (np.uint8, np.int32, np.int64)):
        return str(int(v))
    return repr(float(v))


def write_scene_ply(path, scene: GaussianScene, ascii_format: bool = False):
    """Write a Gaussian scene with double-precision optimization-space
    parameters (bit-exact round trip)."""
    n = len(scene)
    props = [(p, "f8") for p in SCENE_PROPS]
    fmt = "ascii" if ascii_format else "binary_little_endian"
    cols = np.column_stack([scene.means, scene.log_scales, scene.quats,
                            scene.logit_opacities, scene.colors])
    with open(path, "wb") as fh:
        _write_header(fh, fmt, [("vertex", n, props)])
        if ascii_format:
            for row in cols:
                fh.write((" ".join(repr(float(v)) for v in row) + "\n").encode())
        else:
            fh.write(np.ascontiguousarray(cols, dtype="<f8").tobytes())


def read_scene_ply(path) -> GaussianScene:
    data = read_ply(path)
    if "vertex" not in data:
        raise ConfigError(f"{path}: PLY has no 'vertex' element")
    v = data["vertex"]
    missing = [p for p in SCENE_PROPS if p not in v]
    if missing:
        raise ConfigError(f"{path}: vertex element missing scene properties {missing}")
    return GaussianScene(
        means=np.column_stack([v["x"], v["y"], v["z"]]),
        log_scales=np.column_stack([v["scale_0"], v["scale_1"], v["scale_2"]]),
        quats=np.column_stack([v["rot_0"], v["rot_1"], v["rot_2"], v["rot_3"]]),
        logit_opacities=v["opacity"],
        colors=np.column_stack([v["red"], v["green"], v["blue"]]),
    )


def load_reference_asset(path, caption: str = "") -> ReferenceAsset:
    """Load a point-cloud or mesh PLY as a normalized reference asset."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"asset file not found: {path}")
    data = read_ply(path)
    if "vertex" not in data:
        raise ConfigError(f"{path}: PLY has no 'vertex' element")
    v = data["vertex"]
    for axis in "xyz":
        if axis not in v:
            raise ConfigError(f"{path}: vertex element missing coordinate '{axis}'")
    points = np.column_stack([v["x"], v["y"], v["z"]]).astype(np.float64)
    if all(c in v for c in ("red", "green", "blue")):
        rgb = np.column_stack([v["red"], v["green"], v["blue"]]).astype(np.float64)
        if rgb.max() > 1.0:
            rgb = rgb / 255.0
    else:
        rgb = np.full_like(points, 0.7)
    mesh_vertices = mesh_faces = mesh_colors = None
    if "face" in data and "vertex_indices" in data["face"]:
        faces = data["face"]["vertex_indices"]
        if faces.dtype == object:
            raise ConfigError(f"{path}: face element has non-triangle faces")
        mesh_faces = faces.astype(np.int64)
        mesh_vertices = points
        mesh_colors = rgb
    asset = ReferenceAsset(points=points, colors=np.clip(rgb, 0.0, 1.0), caption=caption,
                           mesh_vertices=mesh_vertices, mesh_faces=mesh_faces,
                           mesh_colors=mesh_colors)
    return asset.normalized()
