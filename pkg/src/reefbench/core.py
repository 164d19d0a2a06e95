"""Shared domain types and their file I/O, plus scene tiling.

Point clouds are plain ``(N, 3)`` float64 arrays in meters (x, y, z with z
up); every function here treats row order as meaningless.
"""

from __future__ import annotations

import enum
import json
import math
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

TWO_PI = 2.0 * math.pi


class ObjectClass(str, enum.Enum):
    """The four artificial-reef object classes."""

    REEF_RING = "reef_ring"
    REEF_CONE = "reef_cone"
    TETRAPOD_B = "tetrapod_b"
    TETRAPOD_S = "tetrapod_s"

    @property
    def index(self) -> int:
        return CLASS_ORDER.index(self)

    @property
    def height(self) -> float:
        return NOMINAL_DIMENSIONS[self][1]

    @property
    def footprint(self) -> float:
        return NOMINAL_DIMENSIONS[self][0]

    @classmethod
    def parse(cls, name: str | "ObjectClass") -> "ObjectClass":
        if isinstance(name, cls):
            return name
        try:
            return cls(name)
        except ValueError:
            legal = ", ".join(c.value for c in cls)
            raise ValueError(f"unknown object class {name!r}; expected one of: {legal}") from None


CLASS_ORDER: tuple[ObjectClass, ...] = tuple(ObjectClass)

TETRAPOD_S_SCALE = 0.6

# (footprint diameter, height) in meters
NOMINAL_DIMENSIONS: dict[ObjectClass, tuple[float, float]] = {
    ObjectClass.REEF_RING: (1.5, 0.75),
    ObjectClass.REEF_CONE: (1.6, 1.2),
    ObjectClass.TETRAPOD_B: (2.75, 2.08),
    ObjectClass.TETRAPOD_S: (2.75 * TETRAPOD_S_SCALE, 2.08 * TETRAPOD_S_SCALE),
}


class CloudFormatError(ValueError):
    """Raised when a point-cloud or annotation file cannot be parsed."""


# ---------------------------------------------------------------------------
# Point clouds


def as_cloud(points: Iterable | np.ndarray) -> np.ndarray:
    """Validate and convert ``points`` to an ``(N, 3)`` float64 array."""
    arr = np.asarray(points, dtype=np.float64)
    if arr.size == 0:
        return np.empty((0, 3), dtype=np.float64)
    if arr.ndim == 1 and arr.shape[0] == 3:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"point cloud must have shape (N, 3), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("point cloud contains NaN or Inf coordinates")
    return arr


def centroid(cloud: np.ndarray) -> np.ndarray:
    """Arithmetic mean of the points; raises on an empty cloud."""
    cloud = as_cloud(cloud)
    if len(cloud) == 0:
        raise ValueError("centroid of an empty point cloud is undefined")
    return cloud.mean(axis=0)


@dataclass(frozen=True)
class RigidTransform:
    """Rotation followed by translation: ``p' = R @ p + t``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self) -> None:
        r = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-9) or np.linalg.det(r) < 0:
            raise ValueError("rotation must be orthonormal with det +1")
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_yaw(cls, yaw: float, translation: Sequence[float] = (0.0, 0.0, 0.0)) -> "RigidTransform":
        return cls(rotation_z(yaw), translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Return ``self ∘ other`` (apply ``other`` first)."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    @property
    def yaw(self) -> float:
        """Heading of the rotated x axis, in ``[0, 2π)``."""
        return wrap_angle(math.atan2(self.rotation[1, 0], self.rotation[0, 0]))

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m


def rotation_z(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotation_axis_angle(axis: Sequence[float], angle: float) -> np.ndarray:
    """Rodrigues rotation about a (not necessarily unit) axis."""
    a = np.asarray(axis, dtype=np.float64)
    a = a / np.linalg.norm(a)
    k = np.array([[0.0, -a[2], a[1]], [a[2], 0.0, -a[0]], [-a[1], a[0], 0.0]])
    return np.eye(3) + math.sin(angle) * k + (1.0 - math.cos(angle)) * (k @ k)


def wrap_angle(a: float) -> float:
    a = math.fmod(a, TWO_PI)
    if a < 0.0:
        a += TWO_PI
    # fmod can land exactly on 2π after the correction for tiny negatives
    return 0.0 if a >= TWO_PI else a


def apply_transform(cloud: np.ndarray, t: RigidTransform) -> np.ndarray:
    return t.apply(as_cloud(cloud))


# ---------------------------------------------------------------------------
# Annotations and detections


@dataclass(frozen=True)
class ObjectAnnotation:
    cls: ObjectClass
    center: tuple[float, float, float]
    yaw: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "cls", ObjectClass.parse(self.cls))
        object.__setattr__(self, "center", tuple(float(v) for v in self.center))
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))

    def to_record(self) -> dict:
        return {"class": self.cls.value, "center": list(self.center), "yaw": self.yaw}


@dataclass(frozen=True)
class Detection:
    cls: ObjectClass
    center: tuple[float, float, float]
    yaw: float
    score: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "cls", ObjectClass.parse(self.cls))
        object.__setattr__(self, "center", tuple(float(v) for v in self.center))
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))
        if not (math.isfinite(self.score) and self.score > 0.0):
            raise ValueError(f"detection score must be finite and positive, got {self.score}")

    def to_record(self) -> dict:
        return {
            "class": self.cls.value,
            "center": list(self.center),
            "yaw": self.yaw,
            "score": self.score,
        }


def score_from_rmse(rmse: float) -> float:
    return 1.0 / (1.0 + rmse)


@dataclass(frozen=True)
class Bounds:
    """Axis-aligned rectangle in the horizontal plane."""

    xmin: float
    ymin: float
    xmax: float
    ymax: float

    def __post_init__(self) -> None:
        if not (self.xmax > self.xmin and self.ymax > self.ymin):
            raise ValueError(f"bounds must have positive side lengths: {self}")

    @classmethod
    def square(cls, size: float) -> "Bounds":
        return cls(0.0, 0.0, float(size), float(size))

    @property
    def width(self) -> float:
        return self.xmax - self.xmin

    @property
    def height(self) -> float:
        return self.ymax - self.ymin

    def shrink(self, margin: float) -> "Bounds":
        return Bounds(self.xmin + margin, self.ymin + margin, self.xmax - margin, self.ymax - margin)

    def contains(self, xy: np.ndarray) -> np.ndarray:
        xy = np.atleast_2d(xy)
        return (
            (xy[:, 0] >= self.xmin)
            & (xy[:, 0] <= self.xmax)
            & (xy[:, 1] >= self.ymin)
            & (xy[:, 1] <= self.ymax)
        )

    def to_list(self) -> list[float]:
        return [self.xmin, self.ymin, self.xmax, self.ymax]


@dataclass
class Scene:
    cloud: np.ndarray
    annotations: list[ObjectAnnotation]
    bounds: Bounds
    seed: int


def _parse_records(records, path, with_score: bool):
    if not isinstance(records, list):
        raise CloudFormatError(f"{path}: expected a JSON list of records")
    out = []
    for i, rec in enumerate(records):
        try:
            cls = ObjectClass.parse(rec["class"])
            center = [float(v) for v in rec["center"]]
            yaw = float(rec.get("yaw", 0.0))
            if len(center) != 3 or not all(math.isfinite(v) for v in center):
                raise ValueError("center must be three finite numbers")
            if with_score:
                out.append(Detection(cls, tuple(center), yaw, float(rec["score"])))
            else:
                out.append(ObjectAnnotation(cls, tuple(center), yaw))
        except (KeyError, TypeError, ValueError) as exc:
            raise CloudFormatError(f"{path}: record {i}: {exc}") from exc
    return out


def load_annotations(path: str | os.PathLike) -> list[ObjectAnnotation]:
    with open(path) as fh:
        records = json.load(fh)
    return _parse_records(records, path, with_score=False)


def load_detections(path: str | os.PathLike) -> list[Detection]:
    with open(path) as fh:
        records = json.load(fh)
    return _parse_records(records, path, with_score=True)


def save_annotations(items: Sequence[ObjectAnnotation | Detection], path: str | os.PathLike) -> None:
    """Write annotations or detections as a JSON list of records."""
    records = [it.to_record() for it in items]
    _atomic_write_text(path, json.dumps(records, indent=1) + "\n")


save_detections = save_annotations


def _atomic_write_text(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# PLY / XYZ


_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def load_cloud(path: str | os.PathLike) -> np.ndarray:
    """Read a PLY (ascii or binary) or whitespace-separated XYZ file."""
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic[:3] == b"ply":
        return _load_ply(path)
    return _load_xyz(path)


def _load_xyz(path: Path) -> np.ndarray:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            s = line.split("#", 1)[0].strip()
            if not s:
                continue
            parts = s.replace(",", " ").split()
            if len(parts) < 3:
                raise CloudFormatError(f"{path}:{lineno}: expected 3 coordinates, got {len(parts)}")
            try:
                xyz = [float(v) for v in parts[:3]]
            except ValueError:
                raise CloudFormatError(f"{path}:{lineno}: non-numeric coordinate in {s!r}") from None
            if not all(math.isfinite(v) for v in xyz):
                raise CloudFormatError(f"{path}:{lineno}: non-finite coordinate in {s!r}")
            rows.append(xyz)
    if not rows:
        return np.empty((0, 3))
    return np.array(rows, dtype=np.float64)


def _read_ply_header(fh, path):
    first = fh.readline()
    if first.strip() != b"ply":
        raise CloudFormatError(f"{path}: missing 'ply' magic")
    fmt = None
    elements: list[list] = []  # [name, count, [(prop, dtype | ('list', ct, it))]]
    lineno = 1
    while True:
        raw = fh.readline()
        lineno += 1
        if not raw:
            raise CloudFormatError(f"{path}: header not terminated by end_header")
        tok = raw.decode("ascii", errors="replace").split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "end_header":
            break
        if tok[0] == "format":
            if len(tok) < 2 or tok[1] not in ("ascii", "binary_little_endian", "binary_big_endian"):
                raise CloudFormatError(f"{path}:{lineno}: unsupported format line")
            fmt = tok[1]
        elif tok[0] == "element":
            try:
                elements.append([tok[1], int(tok[2]), []])
            except (IndexError, ValueError):
                raise CloudFormatError(f"{path}:{lineno}: malformed element line") from None
        elif tok[0] == "property":
            if not elements:
                raise CloudFormatError(f"{path}:{lineno}: property before element")
            if len(tok) >= 5 and tok[1] == "list":
                elements[-1][2].append((tok[4], ("list", tok[2], tok[3])))
            elif len(tok) >= 3 and tok[1] in _PLY_TYPES:
                elements[-1][2].append((tok[2], _PLY_TYPES[tok[1]]))
            else:
                raise CloudFormatError(f"{path}:{lineno}: malformed property line")
        else:
            raise CloudFormatError(f"{path}:{lineno}: unexpected header keyword {tok[0]!r}")
    if fmt is None:
        raise CloudFormatError(f"{path}: missing format line")
    return fmt, elements, lineno


def _load_ply(path: Path) -> np.ndarray:
    with open(path, "rb") as fh:
        fmt, elements, header_lines = _read_ply_header(fh, path)
        vertex = next((e for e in elements if e[0] == "vertex"), None)
        if vertex is None:
            raise CloudFormatError(f"{path}: no vertex element")
        names = [p[0] for p in vertex[2]]
        for axis in "xyz":
            if axis not in names:
                raise CloudFormatError(f"{path}: vertex element lacks property {axis!r}")
        count = vertex[1]
        if fmt == "ascii":
            # skip lines of elements preceding vertex
            skip = 0
            for e in elements:
                if e is vertex:
                    break
                skip += e[1]
            for _ in range(skip):
                fh.readline()
                header_lines += 1
            pts = np.empty((count, 3))
            cols = [names.index(a) for a in "xyz"]
            for i in range(count):
                raw = fh.readline()
                lineno = header_lines + i + 1
                tok = raw.split()
                if len(tok) < len(names):
                    raise CloudFormatError(f"{path}:{lineno}: expected {len(names)} values")
                try:
                    pts[i] = [float(tok[c]) for c in cols]
                except ValueError:
                    raise CloudFormatError(f"{path}:{lineno}: non-numeric vertex value") from None
                if not np.all(np.isfinite(pts[i])):
                    raise CloudFormatError(f"{path}:{lineno}: non-finite vertex coordinate")
            return pts
        endian = "<" if fmt == "binary_little_endian" else ">"
        for e in elements:
            if e is vertex:
                break
            if any(isinstance(p[1], tuple) for p in e[2]):
                raise CloudFormatError(f"{path}: list-valued element {e[0]!r} before vertex")
            dt = np.dtype([(p[0], endian + p[1]) for p in e[2]])
            fh.seek(dt.itemsize * e[1], os.SEEK_CUR)
        if any(isinstance(p[1], tuple) for p in vertex[2]):
            raise CloudFormatError(f"{path}: list properties on vertex are not supported")
        dt = np.dtype([(p[0], endian + p[1]) for p in vertex[2]])
        offset = fh.tell()
        data = fh.read(dt.itemsize * count)
        if len(data) < dt.itemsize * count:
            raise CloudFormatError(
                f"{path}: truncated vertex data at byte offset {offset + len(data)}"
            )
        rec = np.frombuffer(data, dtype=dt, count=count)
        pts = np.column_stack([rec[a].astype(np.float64) for a in "xyz"]) if count else np.empty((0, 3))
        bad = ~np.all(np.isfinite(pts), axis=1)
        if bad.any():
            i = int(np.argmax(bad))
            raise CloudFormatError(
                f"{path}: non-finite vertex {i} at byte offset {offset + i * dt.itemsize}"
            )
        return pts


def _text_rows(cloud: np.ndarray) -> str:
    # 17 significant digits round-trip any float64 exactly
    return "".join("%.17g %.17g %.17g\n" % tuple(row) for row in cloud.tolist())


def save_cloud(cloud: np.ndarray, path: str | os.PathLike, format: str = "ply_binary") -> None:
    """Write a cloud as ``ply_binary``, ``ply_ascii`` or ``xyz``.

    Binary PLY stores 32-bit floats when that is lossless and doubles otherwise,
    so a binary round trip is always exact.
    """
    cloud = as_cloud(cloud)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    if format == "xyz":
        with open(tmp, "w") as fh:
            fh.write(_text_rows(cloud))
    elif format in ("ply_ascii", "ply_binary"):
        f32 = cloud.astype(np.float32)
        lossless32 = np.array_equal(f32.astype(np.float64), cloud)
        ptype = "float" if lossless32 else "double"
        enc = "ascii" if format == "ply_ascii" else "binary_little_endian"
        header = (
            f"ply\nformat {enc} 1.0\nelement vertex {len(cloud)}\n"
            f"property {ptype} x\nproperty {ptype} y\nproperty {ptype} z\nend_header\n"
        )
        with open(tmp, "wb") as fh:
            fh.write(header.encode("ascii"))
            if format == "ply_ascii":
                fh.write(_text_rows(cloud).encode("ascii"))
            else:
                data = f32 if ptype == "float" else cloud
                fh.write(np.ascontiguousarray(data, dtype="<f4" if ptype == "float" else "<f8").tobytes())
    else:
        raise ValueError(f"unknown cloud format {format!r}")
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# Tiling


def tile_labels(cloud: np.ndarray, tile_size: float) -> tuple[np.ndarray, np.ndarray]:
    """Integer (ix, iy) tile index of every point.

    The grid is anchored at the cloud's minimum x/y. A point on a shared
    edge goes to the lower-index tile.
    """
    if tile_size <= 0:
        raise ValueError("tile_size must be positive")
    cloud = as_cloud(cloud)
    if len(cloud) == 0:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
    rel = (cloud[:, :2] - cloud[:, :2].min(axis=0)) / tile_size
    idx = np.maximum(np.ceil(rel).astype(np.int64) - 1, 0)
    return idx[:, 0], idx[:, 1]


def tile_scene(cloud: np.ndarray, tile_size: float, min_points: int = 0) -> list[np.ndarray]:
    """Partition a cloud on a square xy grid, dropping sparse tiles.

    Tiles are returned in (ix, iy) order; points keep their input order.
    """
    cloud = as_cloud(cloud)
    ix, iy = tile_labels(cloud, tile_size)
    if len(cloud) == 0:
        return []
    key = ix * (int(iy.max()) + 1) + iy
    order = np.argsort(key, kind="stable")
    uniq, starts = np.unique(key[order], return_index=True)
    bounds = list(starts[1:]) + [len(order)]
    tiles = []
    for s, e in zip(starts, bounds):
        if e - s >= min_points:
            tiles.append(cloud[order[s:e]])
    return tiles


_SCENE_RE = re.compile(r"^scene_(\d+)\.(json|ply)$")


def scene_index_from_name(name: str) -> int | None:
    m = _SCENE_RE.match(name)
    return int(m.group(1)) if m else None
