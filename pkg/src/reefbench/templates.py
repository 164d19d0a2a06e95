"""Template library: class meshes virtually scanned like a survey would see them."""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .config import Config, ScannerConfig
from .core import CLASS_ORDER, ObjectClass, RigidTransform, load_cloud, rotation_z, save_cloud
from .geometry import SpatialIndex, TriangleMesh, box_mesh, make_mesh, merge_meshes, transform_mesh
from .simulate import beam_angles

MIN_TEMPLATE_POINTS = 20


class TemplateError(ValueError):
    pass


@dataclass(frozen=True)
class Template:
    cls: ObjectClass
    cloud: np.ndarray  # centered on its own centroid
    source_yaw: float
    rmse_threshold: float
    min_points: int
    origin_offset: np.ndarray  # object frame origin expressed in the template frame

    def __post_init__(self) -> None:
        c = np.ascontiguousarray(self.cloud, dtype=np.float64)
        c.setflags(write=False)
        object.__setattr__(self, "cloud", c)
        o = np.asarray(self.origin_offset, dtype=np.float64).reshape(3)
        object.__setattr__(self, "origin_offset", o)


def _scan_object(mesh: TriangleMesh, scanner: ScannerConfig, line_offsets: int) -> np.ndarray:
    """Noise-free scan of a mesh standing on a flat floor at z = 0.

    Survey lines run along x over the object and at ``line_offsets``
    line spacings to either side, mimicking overlapping swaths.
    """
    lo, hi = mesh.vertices.min(axis=0), mesh.vertices.max(axis=0)
    pad = 1.0
    floor = box_mesh((lo[0] - pad, lo[1] - pad, -1.0), (hi[0] + pad, hi[1] + pad, 0.0))
    index = SpatialIndex(merge_meshes([floor, mesh]))
    theta = beam_angles(scanner)
    dirs = np.column_stack([np.zeros_like(theta), np.sin(theta), -np.cos(theta)])
    x0 = math.floor((lo[0] - pad) / scanner.ping_spacing) * scanner.ping_spacing
    xs = np.arange(x0, hi[0] + pad + 1e-9, scanner.ping_spacing) + 0.5 * scanner.ping_spacing
    pts = []
    nb = len(theta)
    for k in range(-line_offsets, line_offsets + 1):
        y = k * scanner.line_spacing
        origins = np.column_stack([np.repeat(xs, nb), np.full(len(xs) * nb, y), np.full(len(xs) * nb, scanner.sensor_height)])
        d = np.tile(dirs, (len(xs), 1))
        t, _ = index.intersect(origins, d)
        ok = np.isfinite(t)
        pts.append(origins[ok] + t[ok, None] * d[ok])
    return np.concatenate(pts)


def build_template(
    mesh: TriangleMesh,
    cls: ObjectClass | str,
    yaw: float,
    scanner: ScannerConfig,
    floor_clearance: float = 0.04,
    rmse_threshold: float = 0.075,
    min_points: int = 0,
    line_offsets: int = 2,
) -> Template:
    """Virtually scan ``mesh`` posed at ``yaw`` and keep the above-floor returns."""
    cls = ObjectClass.parse(cls)
    # exact periodicity: yaw and yaw + 2π must give identical clouds
    yaw_mod = math.fmod(yaw, 2.0 * math.pi)
    if yaw_mod < 0:
        yaw_mod += 2.0 * math.pi
    if abs(yaw_mod - 2.0 * math.pi) < 1e-12:
        yaw_mod = 0.0
    zmin = float(mesh.vertices[:, 2].min())
    pose = RigidTransform(rotation_z(yaw_mod), (0.0, 0.0, -zmin))
    posed = transform_mesh(mesh, pose)
    pts = _scan_object(posed, scanner, line_offsets)
    pts = pts[pts[:, 2] > floor_clearance]
    if len(pts) < MIN_TEMPLATE_POINTS:
        raise TemplateError(
            f"{cls.value}: scan produced {len(pts)} points (< {MIN_TEMPLATE_POINTS}); object too small for scan config"
        )
    c = pts.mean(axis=0)
    cloud = pts - c
    # re-center exactly: subtracting the mean leaves ~1e-16 residue
    cloud -= cloud.mean(axis=0)
    origin = pose.translation - c
    return Template(cls, cloud, yaw_mod, rmse_threshold, int(min_points), origin)


@dataclass(frozen=True)
class TemplateLibrary:
    templates: tuple[Template, ...]
    fingerprint: str

    def by_class(self, cls: ObjectClass | str) -> list[Template]:
        cls = ObjectClass.parse(cls)
        return [t for t in self.templates if t.cls is cls]

    @property
    def classes(self) -> list[ObjectClass]:
        return [c for c in CLASS_ORDER if self.by_class(c)]

    def __len__(self) -> int:
        return len(self.templates)

    def __iter__(self):
        return iter(self.templates)


def library_fingerprint(cfg: Config) -> str:
    blob = json.dumps(
        {
            "scanner": {k: v for k, v in cfg.to_dict()["scanner"].items() if k not in ("noise_sigma", "dropout_prob", "direction_mode")},
            "templates": cfg.to_dict()["templates"],
            "geometry": cfg.to_dict()["geometry"],
        },
        sort_keys=True,
    ).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def default_yaws(cls: ObjectClass, cfg: Config) -> list[float]:
    n = cfg.templates.symmetric_yaws if cls in (ObjectClass.REEF_RING, ObjectClass.REEF_CONE) else cfg.templates.tetrapod_yaws
    return [2.0 * math.pi * k / n for k in range(n)]


def build_library(
    cfg: Config | None = None,
    classes: Iterable[ObjectClass | str] | None = None,
    yaws: Sequence[float] | dict | None = None,
) -> TemplateLibrary:
    """One template per (class, yaw).

    ``yaws`` may be a list shared by all classes or a per-class mapping;
    by default tetrapods get ``templates.tetrapod_yaws`` uniform yaws and
    the surfaces of revolution ``templates.symmetric_yaws``.
    """
    cfg = cfg or Config()
    tc = cfg.templates
    classes = [ObjectClass.parse(c) for c in (classes or CLASS_ORDER)]
    out = []
    for cls in classes:
        if yaws is None:
            cls_yaws = default_yaws(cls, cfg)
        elif isinstance(yaws, dict):
            cls_yaws = list(yaws.get(cls, yaws.get(cls.value, [])))
        else:
            cls_yaws = list(yaws)
        if not cls_yaws:
            raise TemplateError(f"{cls.value}: empty yaw set")
        mesh = make_mesh(cls, cfg.geometry.mesh_resolution, cfg.geometry.tetrapod_s_scale)
        built = [
            build_template(
                mesh, cls, yaw, cfg.scanner, tc.floor_clearance,
                tc.rmse_threshold.get(cls.value, 0.075), 0, tc.line_offsets,
            )
            for yaw in cls_yaws
        ]
        expected = float(np.mean([len(t.cloud) for t in built]))
        min_pts = max(MIN_TEMPLATE_POINTS, int(round(tc.min_points_fraction * expected)))
        out.extend(replace(t, min_points=min_pts) for t in built)
    return TemplateLibrary(tuple(out), library_fingerprint(cfg))


def save_library(lib: TemplateLibrary, out_dir: str | os.PathLike) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    meta = {"fingerprint": lib.fingerprint, "templates": []}
    counters: dict[str, int] = {}
    for t in lib.templates:
        k = counters.get(t.cls.value, 0)
        counters[t.cls.value] = k + 1
        name = f"template_{t.cls.value}_{k:02d}.ply"
        save_cloud(t.cloud, out_dir / name, "ply_binary")
        meta["templates"].append(
            {
                "file": name,
                "class": t.cls.value,
                "yaw": t.source_yaw,
                "rmse_threshold": t.rmse_threshold,
                "min_points": t.min_points,
                "origin_offset": [float(v) for v in t.origin_offset],
            }
        )
    (out_dir / "library.json").write_text(json.dumps(meta, indent=1) + "\n")


def load_library(lib_dir: str | os.PathLike) -> TemplateLibrary:
    lib_dir = Path(lib_dir)
    meta = json.loads((lib_dir / "library.json").read_text())
    templates = []
    for rec in meta["templates"]:
        cloud = load_cloud(lib_dir / rec["file"])
        templates.append(
            Template(
                ObjectClass.parse(rec["class"]),
                cloud,
                float(rec["yaw"]),
                float(rec["rmse_threshold"]),
                int(rec["min_points"]),
                np.array(rec["origin_offset"], dtype=np.float64),
            )
        )
    return TemplateLibrary(tuple(templates), meta["fingerprint"])
