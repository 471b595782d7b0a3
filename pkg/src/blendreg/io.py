"""Point-cloud files, synthetic source/target pairs, traces and reports.

Supported cloud formats: PLY (ascii and binary little-endian), OBJ
(vertex lines only) and whitespace-separated XYZ. Coordinates are stored
as float32 and read back as float64.
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass

import numpy as np

from .geometry import RigidTransform, apply_rigid, rodrigues

log = logging.getLogger(__name__)

PLY_ASCII = "ply-ascii"
PLY_BINARY = "ply-binary"
OBJ = "obj"
XYZ = "xyz"

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


class CloudParseError(ValueError):
    pass


def guess_format(path, binary=False):
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".ply":
        return PLY_BINARY if binary else PLY_ASCII
    if ext == ".obj":
        return OBJ
    if ext in (".xyz", ".txt", ".pts"):
        return XYZ
    raise ValueError(f"{path}: cannot infer a point-cloud format from extension {ext!r}")


def _finite_or_raise(pts, path, where):
    bad = ~np.isfinite(pts).all(axis=1)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise CloudParseError(f"{path}: non-finite coordinate in {where(i)}")
    return pts


def _read_xyz(path):
    rows, lines = [], []
    with open(path, "r") as f:
        for lineno, line in enumerate(f, 1):
            s = line.split("#", 1)[0].split()
            if not s:
                continue
            if len(s) < 3:
                raise CloudParseError(f"{path}:{lineno}: expected at least 3 columns, got {len(s)}")
            try:
                rows.append([float(v) for v in s[:3]])
            except ValueError as exc:
                raise CloudParseError(f"{path}:{lineno}: {exc}") from None
            lines.append(lineno)
    pts = np.array(rows, dtype=np.float64).reshape(-1, 3)
    return _finite_or_raise(pts, path, lambda i: f"row {i + 1} (line {lines[i]})")


def _read_obj(path):
    rows, lines = [], []
    with open(path, "r") as f:
        for lineno, line in enumerate(f, 1):
            s = line.split()
            if not s or s[0] != "v":
                continue
            if len(s) < 4:
                raise CloudParseError(f"{path}:{lineno}: vertex line needs 3 coordinates")
            try:
                rows.append([float(v) for v in s[1:4]])
            except ValueError as exc:
                raise CloudParseError(f"{path}:{lineno}: {exc}") from None
            lines.append(lineno)
    pts = np.array(rows, dtype=np.float64).reshape(-1, 3)
    return _finite_or_raise(pts, path, lambda i: f"vertex {i + 1} (line {lines[i]})")


def _parse_ply_header(f, path):
    if f.readline().strip() != b"ply":
        raise CloudParseError(f"{path}: byte 0: missing 'ply' magic")
    fmt = None
    elements = []
    while True:
        offset = f.tell()
        raw = f.readline()
        if not raw:
            raise CloudParseError(f"{path}: byte {offset}: header ends without end_header")
        tok = raw.decode("ascii", errors="replace").split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "end_header":
            break
        if tok[0] == "format":
            if len(tok) < 2 or tok[1] not in ("ascii", "binary_little_endian"):
                raise CloudParseError(f"{path}: byte {offset}: unsupported format line {raw!r}")
            fmt = tok[1]
        elif tok[0] == "element":
            if len(tok) != 3 or not tok[2].isdigit():
                raise CloudParseError(f"{path}: byte {offset}: malformed element line {raw!r}")
            elements.append({"name": tok[1], "count": int(tok[2]), "props": []})
        elif tok[0] == "property":
            if not elements:
                raise CloudParseError(f"{path}: byte {offset}: property before any element")
            if len(tok) >= 5 and tok[1] == "list":
                elements[-1]["props"].append((tok[4], "list", tok[2], tok[3]))
            elif len(tok) == 3 and tok[1] in _PLY_TYPES:
                elements[-1]["props"].append((tok[2], tok[1]))
            else:
                raise CloudParseError(f"{path}: byte {offset}: malformed property line {raw!r}")
        else:
            raise CloudParseError(f"{path}: byte {offset}: unexpected header keyword {tok[0]!r}")
    if fmt is None:
        raise CloudParseError(f"{path}: header has no format line")
    return fmt, elements


def _read_ply(path):
    with open(path, "rb") as f:
        fmt, elements = _parse_ply_header(f, path)
        names = [e["name"] for e in elements]
        if "vertex" not in names:
            raise CloudParseError(f"{path}: header declares no vertex element")
        vi = names.index("vertex")
        vertex = elements[vi]
        props = vertex["props"]
        pnames = [p[0] for p in props]
        for axis in "xyz":
            if axis not in pnames:
                raise CloudParseError(f"{path}: vertex element lacks property {axis!r}")
        if any(p[1] == "list" for p in props):
            raise CloudParseError(f"{path}: list properties on vertices are not supported")
        extra = [p for p in pnames if p not in ("x", "y", "z")]
        if extra:
            log.warning("%s: ignoring vertex properties %s", path, ", ".join(extra))
        n = vertex["count"]

        if fmt == "ascii":
            text = f.read().decode("ascii", errors="replace").splitlines()
            skip = sum(e["count"] for e in elements[:vi])
            lines = [ln for ln in text if ln.strip()]
            if len(lines) < skip + n:
                raise CloudParseError(
                    f"{path}: header declares {n} vertices but only {max(len(lines) - skip, 0)} rows follow"
                )
            rows = []
            for i, ln in enumerate(lines[skip : skip + n]):
                s = ln.split()
                if len(s) < len(props):
                    raise CloudParseError(f"{path}: vertex row {i + 1}: expected {len(props)} values")
                try:
                    rows.append([float(s[pnames.index(a)]) for a in "xyz"])
                except ValueError as exc:
                    raise CloudParseError(f"{path}: vertex row {i + 1}: {exc}") from None
            pts = np.array(rows, dtype=np.float64).reshape(-1, 3)
            return _finite_or_raise(pts, path, lambda i: f"vertex row {i + 1}")

        for e in elements[:vi]:
            if any(p[1] == "list" for p in e["props"]):
                raise CloudParseError(f"{path}: cannot skip list element {e['name']!r} before vertices")
            f.seek(e["count"] * np.dtype([(p[0], "<" + _PLY_TYPES[p[1]]) for p in e["props"]]).itemsize, 1)
        dtype = np.dtype([(p[0], "<" + _PLY_TYPES[p[1]]) for p in props])
        offset = f.tell()
        buf = f.read(n * dtype.itemsize)
        if len(buf) < n * dtype.itemsize:
            raise CloudParseError(
                f"{path}: byte {offset}: expected {n * dtype.itemsize} bytes of vertex data, "
                f"found {len(buf)}"
            )
        data = np.frombuffer(buf, dtype=dtype, count=n)
        pts = np.stack([data[a].astype(np.float64) for a in "xyz"], axis=1)
        return _finite_or_raise(
            pts, path, lambda i: f"vertex {i + 1} (byte {offset + i * dtype.itemsize})"
        )


def read_cloud(path, fmt=None):
    """Read an (M, 3) float64 array from a PLY/OBJ/XYZ file."""
    if fmt is None:
        ext = os.path.splitext(str(path))[1].lower()
        fmt = PLY_ASCII if ext == ".ply" else guess_format(path)
    if fmt in (PLY_ASCII, PLY_BINARY):
        pts = _read_ply(path)
    elif fmt == OBJ:
        pts = _read_obj(path)
    elif fmt == XYZ:
        pts = _read_xyz(path)
    else:
        raise ValueError(f"unknown format {fmt!r}")
    if len(pts) == 0:
        raise CloudParseError(f"{path}: file contains no points")
    return pts


def write_cloud(points, path, fmt=None):
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"expected an (M, 3) array, got {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise ValueError("refusing to write non-finite coordinates")
    fmt = fmt or guess_format(path)
    p32 = pts.astype(np.float32)
    if fmt == PLY_BINARY:
        header = (
            "ply\nformat binary_little_endian 1.0\n"
            f"element vertex {len(p32)}\n"
            "property float x\nproperty float y\nproperty float z\nend_header\n"
        )
        with open(path, "wb") as f:
            f.write(header.encode("ascii"))
            f.write(p32.astype("<f4").tobytes())
        return
    # 9 significant digits round-trip any float32
    body = "\n".join(" ".join(f"{v:.9g}" for v in row) for row in p32.tolist())
    with open(path, "w") as f:
        if fmt == PLY_ASCII:
            f.write(
                "ply\nformat ascii 1.0\n"
                f"element vertex {len(p32)}\n"
                "property float x\nproperty float y\nproperty float z\nend_header\n"
            )
            f.write(body + "\n")
        elif fmt == OBJ:
            f.write("\n".join("v " + " ".join(f"{v:.9g}" for v in row) for row in p32.tolist()) + "\n")
        elif fmt == XYZ:
            f.write(body + "\n")
        else:
            raise ValueError(f"unknown format {fmt!r}")


# --- synthetic pairs ----------------------------------------------------------

ARTICULATED_BAR = "articulated-bar"
BENT_CYLINDER = "bent-cylinder"
TWO_SPHERE_BLOB = "two-sphere-blob"
SHAPES = (ARTICULATED_BAR, BENT_CYLINDER, TWO_SPHERE_BLOB)


@dataclass(frozen=True)
class SyntheticPairSpec:
    """Recipe for a same-topology source/target pair.

    Angles are in degrees. For the articulated bar there is one angle per
    joint (``segments - 1`` of them); the other shapes take one angle.
    """

    shape: str = ARTICULATED_BAR
    segments: int = 2
    source_angles: tuple = (-30.0,)
    target_angles: tuple = (30.0,)
    num_points: int = 512
    noise: float = 0.0
    seed: int = 0
    radius: float = 0.12
    segment_length: float = 1.0

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}; choose from {SHAPES}")
        if self.num_points < 64:
            raise ValueError("num_points must be at least 64")
        if self.segments < 1:
            raise ValueError("segments must be >= 1")
        object.__setattr__(self, "source_angles", tuple(float(a) for a in self.source_angles))
        object.__setattr__(self, "target_angles", tuple(float(a) for a in self.target_angles))
        need = self.segments - 1 if self.shape == ARTICULATED_BAR else 1
        if len(self.source_angles) != need or len(self.target_angles) != need:
            raise ValueError(f"{self.shape} with {self.segments} segments needs {need} angle(s) per side")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")


def _rot_z(deg):
    return rodrigues(np.array([0.0, 0.0, math.radians(deg)]))


def _bar_frames(spec, angles):
    """(rotation, start) of every segment of the chain."""
    frames = []
    start = np.zeros(3)
    heading = 0.0
    for s in range(spec.segments):
        if s > 0:
            heading += angles[s - 1]
        R = _rot_z(heading)
        frames.append((R, start.copy()))
        start = start + R @ np.array([spec.segment_length, 0.0, 0.0])
    return frames


def _articulated_bar(spec, rng):
    m = spec.num_points
    labels = np.sort(np.arange(m) % spec.segments)
    a = rng.uniform(0.0, spec.segment_length, m)
    phi = rng.uniform(0.0, 2.0 * np.pi, m)
    local = np.stack([a, spec.radius * np.cos(phi), spec.radius * np.sin(phi)], axis=1)

    def build(angles):
        frames = _bar_frames(spec, angles)
        out = np.empty((m, 3))
        for s, (R, start) in enumerate(frames):
            sel = labels == s
            out[sel] = local[sel] @ R.T + start
        return out, frames

    src, f_src = build(spec.source_angles)
    tgt, f_tgt = build(spec.target_angles)
    transforms = []
    for (Rs, ps), (Rt, pt) in zip(f_src, f_tgt):
        R = Rt @ Rs.T
        transforms.append(RigidTransform.from_matrix(R, pt - R @ ps))
    return src, tgt, {"labels": labels, "transforms": transforms}


def _bent_cylinder(spec, rng):
    m = spec.num_points
    length = spec.segment_length * spec.segments
    s = rng.uniform(-0.5, 0.5, m) * length
    phi = rng.uniform(0.0, 2.0 * np.pi, m)
    ring = np.stack([spec.radius * np.cos(phi), spec.radius * np.sin(phi)], axis=1)

    def build(total_deg):
        theta = math.radians(total_deg)
        if abs(theta) < 1e-9:
            return np.stack([s, ring[:, 0], ring[:, 1]], axis=1)
        rad = length / theta
        ang = s / rad
        # axis bends in the xy plane; the ring's first coordinate follows the normal
        r = rad - ring[:, 0]
        return np.stack([r * np.sin(ang), rad - r * np.cos(ang), ring[:, 1]], axis=1)

    return build(spec.source_angles[0]), build(spec.target_angles[0]), {
        "correspondence": np.arange(m)
    }


def _two_sphere_blob(spec, rng):
    m = spec.num_points
    big, small = 0.5, 0.35
    labels = (np.arange(m) >= int(round(m * big**2 / (big**2 + small**2)))).astype(int)
    dirs = rng.normal(size=(m, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    joint = np.array([big, 0.0, 0.0])

    def build(deg):
        out = dirs * big
        R = _rot_z(deg)
        centre = joint + R @ np.array([small * 0.8, 0.0, 0.0])
        out[labels == 1] = dirs[labels == 1] @ R.T * small + centre
        return out

    src, tgt = build(spec.source_angles[0]), build(spec.target_angles[0])
    R = _rot_z(spec.target_angles[0] - spec.source_angles[0])
    moving = RigidTransform.from_matrix(R, joint - R @ joint)
    return src, tgt, {"labels": labels, "transforms": [RigidTransform.identity(), moving]}


def make_pair(spec):
    """Source, target and ground truth for a synthetic recipe.

    Source and target share point order, so ``target[i]`` corresponds to
    ``source[i]`` (before noise).
    """
    rng = np.random.default_rng(spec.seed)
    build = {
        ARTICULATED_BAR: _articulated_bar,
        BENT_CYLINDER: _bent_cylinder,
        TWO_SPHERE_BLOB: _two_sphere_blob,
    }[spec.shape]
    src, tgt, gt = build(spec, rng)
    if spec.noise > 0:
        src = src + rng.normal(scale=spec.noise, size=src.shape)
        tgt = tgt + rng.normal(scale=spec.noise, size=tgt.shape)
    return src, tgt, gt


def random_rigid(rng, max_angle_deg=45.0, max_translation=0.5):
    """Random axis, angle uniform in [0, max_angle], translation uniform per axis."""
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = math.radians(rng.uniform(0.0, max_angle_deg))
    t = rng.uniform(-max_translation, max_translation, 3)
    return RigidTransform(axis * angle, t)


def make_rigid_pair(points, rng, max_angle_deg=45.0, max_translation=0.5):
    gt = random_rigid(rng, max_angle_deg, max_translation)
    return apply_rigid(gt, points), gt


# --- reports ------------------------------------------------------------------

def transform_to_dict(t):
    return {"rotation": t.rotation.tolist(), "translation": t.translation.tolist()}


def transform_from_dict(d):
    if "matrix" in d:
        return RigidTransform.from_matrix(np.asarray(d["matrix"]), d["translation"])
    return RigidTransform(d["rotation"], d["translation"])


def write_json(obj, path):
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True, default=_jsonable)
        f.write("\n")


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, RigidTransform):
        return transform_to_dict(x)
    raise TypeError(f"cannot serialize {type(x).__name__}")
