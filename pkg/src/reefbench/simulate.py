"""Procedural seabed scenes and virtual multibeam (MBES) surveys.

A scene is a fractal Perlin heightfield with reef objects dropped onto it,
scanned by a sensor that runs straight survey lines and casts a fan of
across-track beams per ping.
"""

from __future__ import annotations

import functools
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import Config, SceneConfig, ScannerConfig, TerrainConfig
from .core import (
    CLASS_ORDER,
    Bounds,
    ObjectAnnotation,
    ObjectClass,
    RigidTransform,
    Scene,
    rotation_axis_angle,
    rotation_z,
    save_annotations,
    save_cloud,
)
from .geometry import (
    SpatialIndex,
    TriangleMesh,
    class_dimensions,
    heightfield_mesh,
    make_mesh,
    merge_meshes,
    transform_mesh,
)

log = logging.getLogger(__name__)

# stream ids for splitting a scene seed into independent subsystems
TERRAIN_STREAM, PLACEMENT_STREAM, SCAN_STREAM = 0, 1, 2


class PlacementError(RuntimeError):
    def __init__(self, requested: int, placed: int):
        super().__init__(f"could only place {placed} of {requested} objects")
        self.requested = requested
        self.placed = placed


def derive_seed(*keys: int) -> int:
    """Unsigned 64-bit seed from a tuple of non-negative integers."""
    ss = np.random.SeedSequence([int(k) for k in keys])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def scene_seed(master_seed: int, index: int) -> int:
    return derive_seed(master_seed, index)


# ---------------------------------------------------------------------------
# Perlin noise


@functools.lru_cache(maxsize=64)
def _permutation(seed: int) -> np.ndarray:
    p = np.random.default_rng(derive_seed(seed, 0x9E37)).permutation(256)
    return np.concatenate([p, p]).astype(np.int64)


_GRAD = np.array([[math.cos(a), math.sin(a)] for a in np.arange(8) * math.pi / 4])


def _fade(t):
    return t * t * t * (t * (t * 6.0 - 15.0) + 10.0)


def perlin(x, y, seed: int = 0):
    """2-D gradient noise, zero on the integer lattice, bounded by √2/2."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    perm = _permutation(int(seed))
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = x - x0
    fy = y - y0
    xi = x0.astype(np.int64) & 255
    yi = y0.astype(np.int64) & 255

    def corner(ix, iy, dx, dy):
        g = _GRAD[perm[perm[ix] + iy] & 7]
        return g[..., 0] * dx + g[..., 1] * dy

    n00 = corner(xi, yi, fx, fy)
    n10 = corner(xi + 1, yi, fx - 1.0, fy)
    n01 = corner(xi, yi + 1, fx, fy - 1.0)
    n11 = corner(xi + 1, yi + 1, fx - 1.0, fy - 1.0)
    u = _fade(fx)
    v = _fade(fy)
    nx0 = n00 + u * (n10 - n00)
    nx1 = n01 + u * (n11 - n01)
    out = nx0 + v * (nx1 - nx0)
    return out if out.ndim else float(out)


def fractal_height(x, y, params: TerrainConfig, seed: int):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    h = np.zeros(np.broadcast(x, y).shape)
    if params.amplitude == 0:
        return h
    amp = params.amplitude
    freq = 1.0 / params.wavelength
    for k in range(params.octaves):
        h = h + amp * perlin(freq * x, freq * y, derive_seed(seed, k))
        amp *= params.persistence
        freq *= params.lacunarity
    return h


def amplitude_bound(params: TerrainConfig) -> float:
    return sum(params.amplitude * params.persistence**k for k in range(params.octaves))


# ---------------------------------------------------------------------------
# Terrain


@dataclass(frozen=True)
class TerrainField:
    """Heightfield sampled on a regular grid, linear within each grid triangle."""

    bounds: Bounds
    xs: np.ndarray
    ys: np.ndarray
    z: np.ndarray  # (len(xs), len(ys))
    params: TerrainConfig = field(default_factory=TerrainConfig)
    seed: int = 0

    def height(self, x, y):
        """Terrain height at (x, y), clamped to the bounds."""
        x = np.clip(np.asarray(x, dtype=np.float64), self.xs[0], self.xs[-1])
        y = np.clip(np.asarray(y, dtype=np.float64), self.ys[0], self.ys[-1])
        dx = self.xs[1] - self.xs[0]
        dy = self.ys[1] - self.ys[0]
        i = np.clip(((x - self.xs[0]) / dx).astype(np.int64), 0, len(self.xs) - 2)
        j = np.clip(((y - self.ys[0]) / dy).astype(np.int64), 0, len(self.ys) - 2)
        fx = (x - self.xs[i]) / dx
        fy = (y - self.ys[j]) / dy
        z00 = self.z[i, j]
        z10 = self.z[i + 1, j]
        z11 = self.z[i + 1, j + 1]
        z01 = self.z[i, j + 1]
        lower = z00 + fx * (z10 - z00) + fy * (z11 - z10)
        upper = z00 + fy * (z01 - z00) + fx * (z11 - z01)
        return np.where(fx >= fy, lower, upper)

    def mesh(self) -> TriangleMesh:
        return heightfield_mesh(self.xs, self.ys, self.z)


def generate_terrain(bounds: Bounds, params: TerrainConfig | None = None, seed: int = 0) -> TerrainField:
    params = params or TerrainConfig()
    nx = max(2, int(round(bounds.width / params.resolution)) + 1)
    ny = max(2, int(round(bounds.height / params.resolution)) + 1)
    xs = np.linspace(bounds.xmin, bounds.xmax, nx)
    ys = np.linspace(bounds.ymin, bounds.ymax, ny)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    z = fractal_height(gx, gy, params, seed)
    return TerrainField(bounds, xs, ys, z, params, seed)


def flat_terrain(bounds: Bounds, height: float = 0.0, resolution: float = 1.0) -> TerrainField:
    params = TerrainConfig(amplitude=0.0, resolution=resolution)
    t = generate_terrain(bounds, params, 0)
    if height:
        t = TerrainField(t.bounds, t.xs, t.ys, t.z + height, params, 0)
    return t


# ---------------------------------------------------------------------------
# Object placement


@dataclass(frozen=True)
class PlacedObject:
    annotation: ObjectAnnotation
    pose: RigidTransform  # local mesh frame -> scene

    @property
    def cls(self) -> ObjectClass:
        return self.annotation.cls


def settle(mesh: TriangleMesh, rotation: np.ndarray, x: float, y: float, terrain: TerrainField, sink: float) -> RigidTransform:
    """Drop a rotated mesh at (x, y) until its vertices rest on the terrain, then sink it."""
    local = mesh.vertices @ rotation.T
    wx = local[:, 0] + x
    wy = local[:, 1] + y
    z = float(np.max(terrain.height(wx, wy) - local[:, 2])) - sink
    return RigidTransform(rotation, (x, y, z))


def _class_list(scene_cfg: SceneConfig, rng: np.random.Generator) -> list[ObjectClass]:
    if scene_cfg.counts:
        out = []
        for cls in CLASS_ORDER:
            out += [cls] * int(scene_cfg.counts.get(cls.value, 0))
        return out
    return [CLASS_ORDER[i] for i in rng.integers(0, len(CLASS_ORDER), size=scene_cfg.objects)]


def place_objects(
    terrain: TerrainField,
    scene_cfg: SceneConfig,
    seed: int,
    mesh_resolution: int = 32,
    tetrapod_s_scale: float = 0.6,
) -> list[PlacedObject]:
    """Random non-overlapping placement with terrain settling.

    Centers are uniform inside the margin-shrunk bounds and rejection-sampled
    so footprints keep ``scene_cfg.min_gap`` of clearance; yaw is uniform and each
    object gets a random tilt up to ``scene_cfg.max_tilt_deg``.
    """
    rng = np.random.default_rng(seed)
    classes = _class_list(scene_cfg, rng)
    if not classes:
        return []
    inner = terrain.bounds.shrink(scene_cfg.margin)
    radius = {c: 0.5 * class_dimensions(c, tetrapod_s_scale)[0] for c in CLASS_ORDER}
    meshes = {c: make_mesh(c, mesh_resolution, tetrapod_s_scale) for c in set(classes)}
    # largest first packs more reliably
    order = sorted(range(len(classes)), key=lambda i: (-radius[classes[i]], i))
    centers = np.empty((0, 2))
    radii = np.empty(0)
    placed: list[PlacedObject] = []
    attempts = 0
    for i in order:
        cls = classes[i]
        r = radius[cls]
        while True:
            if attempts >= scene_cfg.max_attempts:
                raise PlacementError(len(classes), len(placed))
            attempts += 1
            xy = rng.uniform([inner.xmin, inner.ymin], [inner.xmax, inner.ymax])
            if len(centers) == 0 or np.all(
                np.hypot(*(centers - xy).T) >= radii + r + scene_cfg.min_gap
            ):
                break
        yaw = rng.uniform(0.0, 2.0 * math.pi)
        tilt = math.radians(scene_cfg.max_tilt_deg) * rng.uniform()
        tilt_axis = rng.uniform(0.0, 2.0 * math.pi)
        sink = scene_cfg.sink_allowance * rng.uniform()
        rot = rotation_axis_angle((math.cos(tilt_axis), math.sin(tilt_axis), 0.0), tilt) @ rotation_z(yaw)
        pose = settle(meshes[cls], rot, float(xy[0]), float(xy[1]), terrain, sink)
        placed.append(PlacedObject(ObjectAnnotation(cls, tuple(pose.translation), yaw), pose))
        centers = np.vstack([centers, xy])
        radii = np.append(radii, r)
    return placed


def posed_meshes(objects: list[PlacedObject], mesh_resolution: int = 32, tetrapod_s_scale: float = 0.6) -> list[TriangleMesh]:
    cache: dict[ObjectClass, TriangleMesh] = {}
    out = []
    for obj in objects:
        if obj.cls not in cache:
            cache[obj.cls] = make_mesh(obj.cls, mesh_resolution, tetrapod_s_scale)
        out.append(transform_mesh(cache[obj.cls], obj.pose))
    return out


# ---------------------------------------------------------------------------
# Scanning


@dataclass
class ScanResult:
    points: np.ndarray  # (N, 3) returned points after dropout and noise
    origins: np.ndarray  # (N, 3) sensor position of each return
    directions: np.ndarray  # (N, 3) unit beam direction
    ranges: np.ndarray  # (N,) noiseless range to the first hit
    noise: np.ndarray  # (N,) range perturbation applied
    triangle: np.ndarray  # (N,) hit triangle in the scene mesh
    direction_mode: str = "x"


def beam_angles(scanner: ScannerConfig) -> np.ndarray:
    if scanner.beam_count > 1024:
        raise ValueError("beam_count is capped at 1024")
    half = math.radians(scanner.swath_half_angle)
    if scanner.beam_count == 1:
        return np.zeros(1)
    return np.linspace(-half, half, scanner.beam_count)


def survey_lines(bounds: Bounds, scanner: ScannerConfig, axis: str) -> list[tuple[np.ndarray, np.ndarray]]:
    """(sensor positions, beam directions) per survey line along ``axis``."""
    theta = beam_angles(scanner)
    h = scanner.sensor_height
    if axis == "x":
        along_lo, along_hi, across_lo, across_hi = bounds.xmin, bounds.xmax, bounds.ymin, bounds.ymax
    else:
        along_lo, along_hi, across_lo, across_hi = bounds.ymin, bounds.ymax, bounds.xmin, bounds.xmax
    n_lines = max(1, int(math.floor((across_hi - across_lo) / scanner.line_spacing)))
    used = n_lines * scanner.line_spacing
    first_line = across_lo + 0.5 * (across_hi - across_lo - used) + 0.5 * scanner.line_spacing
    n_pings = max(1, int(math.floor((along_hi - along_lo) / scanner.ping_spacing)))
    first_ping = along_lo + 0.5 * (along_hi - along_lo - n_pings * scanner.ping_spacing) + 0.5 * scanner.ping_spacing
    along = first_ping + scanner.ping_spacing * np.arange(n_pings)
    out = []
    for k in range(n_lines):
        across = first_line + k * scanner.line_spacing
        if axis == "x":
            pos = np.column_stack([along, np.full(n_pings, across), np.full(n_pings, h)])
            dirs = np.column_stack([np.zeros_like(theta), np.sin(theta), -np.cos(theta)])
        else:
            pos = np.column_stack([np.full(n_pings, across), along, np.full(n_pings, h)])
            dirs = np.column_stack([np.sin(theta), np.zeros_like(theta), -np.cos(theta)])
        out.append((pos, dirs))
    return out


def resolve_direction_mode(scanner: ScannerConfig, seed: int) -> str:
    if scanner.direction_mode != "random":
        return scanner.direction_mode
    rng = np.random.default_rng(derive_seed(seed, 0xD1))
    return ("x", "y", "both")[int(rng.integers(3))]


def cast_scan(
    index: SpatialIndex,
    bounds: Bounds,
    scanner: ScannerConfig,
    seed: int,
    direction_mode: str | None = None,
) -> ScanResult:
    """Survey a prebuilt scene index. Each ping draws from its own RNG stream."""
    mode = direction_mode or resolve_direction_mode(scanner, seed)
    axes = ("x", "y") if mode == "both" else (mode,)
    nb = scanner.beam_count
    chunks = []
    for a_id, axis in enumerate(axes):
        for l_id, (pos, dirs) in enumerate(survey_lines(bounds, scanner, axis)):
            n_p = len(pos)
            origins = np.repeat(pos, nb, axis=0)
            directions = np.tile(dirs, (n_p, 1))
            t, tri = index.intersect(origins, directions)
            keep = np.ones(len(t), dtype=bool)
            noise = np.zeros(len(t))
            if scanner.dropout_prob > 0 or scanner.noise_sigma > 0:
                for p in range(n_p):
                    rng = np.random.default_rng([seed, a_id, l_id, p])
                    sl = slice(p * nb, (p + 1) * nb)
                    drop = rng.random(nb) < scanner.dropout_prob
                    eps = rng.standard_normal(nb) * scanner.noise_sigma
                    keep[sl] = ~drop
                    noise[sl] = eps
            keep &= np.isfinite(t)
            chunks.append((origins[keep], directions[keep], t[keep], noise[keep], tri[keep]))
    if not chunks:
        empty = np.empty((0, 3))
        return ScanResult(empty, empty, empty, np.empty(0), np.empty(0), np.empty(0, dtype=np.int64), mode)
    o = np.concatenate([c[0] for c in chunks])
    d = np.concatenate([c[1] for c in chunks])
    t = np.concatenate([c[2] for c in chunks])
    e = np.concatenate([c[3] for c in chunks])
    tri = np.concatenate([c[4] for c in chunks])
    pts = o + (t + e)[:, None] * d
    return ScanResult(pts, o, d, t, e, tri, mode)


def scene_index(terrain: TerrainField, meshes: list[TriangleMesh]) -> SpatialIndex:
    return SpatialIndex(merge_meshes([terrain.mesh(), *meshes]))


def simulate_scan(
    terrain: TerrainField,
    objects: list[PlacedObject] | list[TriangleMesh],
    scanner: ScannerConfig,
    seed: int,
    mesh_resolution: int = 32,
    tetrapod_s_scale: float = 0.6,
) -> np.ndarray:
    """Point cloud of one virtual survey over terrain plus posed objects."""
    meshes = [
        o if isinstance(o, TriangleMesh) else transform_mesh(make_mesh(o.cls, mesh_resolution, tetrapod_s_scale), o.pose)
        for o in objects
    ]
    return cast_scan(scene_index(terrain, meshes), terrain.bounds, scanner, seed).points


# ---------------------------------------------------------------------------
# Scenes and datasets


def plan_scene(cfg: Config, seed: int) -> tuple[TerrainField, list[PlacedObject]]:
    """Terrain and settled objects of one scene, before scanning."""
    bounds = Bounds.square(cfg.scene.size)
    terrain = generate_terrain(bounds, cfg.terrain, derive_seed(seed, TERRAIN_STREAM))
    objects = place_objects(
        terrain,
        cfg.scene,
        derive_seed(seed, PLACEMENT_STREAM),
        cfg.geometry.mesh_resolution,
        cfg.geometry.tetrapod_s_scale,
    )
    return terrain, objects


def generate_scene(cfg: Config, seed: int) -> tuple[Scene, list[PlacedObject], str]:
    """Build and scan one scene. Returns (scene, placed objects, direction mode)."""
    terrain, objects = plan_scene(cfg, seed)
    bounds = terrain.bounds
    meshes = posed_meshes(objects, cfg.geometry.mesh_resolution, cfg.geometry.tetrapod_s_scale)
    scan = cast_scan(scene_index(terrain, meshes), bounds, cfg.scanner, derive_seed(seed, SCAN_STREAM))
    scene = Scene(scan.points, [o.annotation for o in objects], bounds, seed)
    return scene, objects, scan.direction_mode


def _class_counts(annotations) -> dict[str, int]:
    counts = {c.value: 0 for c in CLASS_ORDER}
    for a in annotations:
        counts[a.cls.value] += 1
    return counts


def _scene_job(args):
    cfg, master_seed, i, out_dir = args
    seed = scene_seed(master_seed, i)
    scene, _, mode = generate_scene(cfg, seed)
    stem = f"scene_{i:04d}"
    save_cloud(scene.cloud, out_dir / f"{stem}.ply", "ply_binary")
    save_annotations(scene.annotations, out_dir / f"{stem}.json")
    return {
        "index": i,
        "seed": seed,
        "cloud": f"{stem}.ply",
        "annotations": f"{stem}.json",
        "points": int(len(scene.cloud)),
        "direction_mode": mode,
        "counts": _class_counts(scene.annotations),
    }


def generate_dataset(
    n_scenes: int,
    cfg: Config,
    master_seed: int,
    out_dir: str | os.PathLike,
    threads: int = 1,
) -> dict:
    """Write ``n_scenes`` scenes plus ``manifest.json`` to ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jobs = [(cfg, master_seed, i, out_dir) for i in range(n_scenes)]
    if threads > 1 and n_scenes > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(threads) as pool:
            entries = list(pool.map(_scene_job, jobs))
    else:
        entries = [_scene_job(j) for j in jobs]
    totals = {c.value: 0 for c in CLASS_ORDER}
    for e in entries:
        for k, v in e["counts"].items():
            totals[k] += v
    manifest = {
        "master_seed": int(master_seed),
        "n_scenes": n_scenes,
        "bounds": Bounds.square(cfg.scene.size).to_list(),
        "config_fingerprint": cfg.fingerprint("terrain", "scene", "scanner", "geometry"),
        "class_counts": totals,
        "total_objects": sum(totals.values()),
        "scenes": entries,
    }
    tmp = out_dir / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=1) + "\n")
    os.replace(tmp, out_dir / "manifest.json")
    return manifest
