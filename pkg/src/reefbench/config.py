"""Nested configuration for simulator, template builder, detector and evaluator.

Every tunable lives here. Files are JSON objects whose sections mirror the
dataclass tree; unknown keys are rejected with their full key path.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import os
import types
import typing
from dataclasses import dataclass, field
from typing import Any


class ConfigError(ValueError):
    pass


def _per_class(value: float) -> dict[str, float]:
    return {name: value for name in ("reef_ring", "reef_cone", "tetrapod_b", "tetrapod_s")}


@dataclass
class TerrainConfig:
    octaves: int = 4
    amplitude: float = 0.25  # m, first octave
    wavelength: float = 20.0  # m, first octave
    persistence: float = 0.5
    lacunarity: float = 2.0
    resolution: float = 0.25  # m, heightfield grid spacing


@dataclass
class SceneConfig:
    size: float = 40.0  # m, square scene side
    objects: int = 50  # total per scene; classes drawn uniformly
    counts: dict[str, int] | None = None  # explicit per-class counts override ``objects``
    margin: float = 2.0  # m from bounds to object centers
    min_gap: float = 1.0  # m, edge-to-edge clearance between footprints
    max_attempts: int = 20000
    sink_allowance: float = 0.05  # m
    max_tilt_deg: float = 5.0


@dataclass
class ScannerConfig:
    beam_count: int = 256
    swath_half_angle: float = 60.0  # degrees
    sensor_height: float = 15.0  # m above z = 0
    ping_spacing: float = 0.2  # m
    line_spacing: float = 10.0  # m
    dropout_prob: float = 0.02
    noise_sigma: float = 0.01  # m, range noise
    direction_mode: str = "random"  # x | y | both | random


@dataclass
class GeometryConfig:
    mesh_resolution: int = 32
    tetrapod_s_scale: float = 0.6


@dataclass
class TemplateConfig:
    tetrapod_yaws: int = 8
    symmetric_yaws: int = 1  # reef_ring / reef_cone
    floor_clearance: float = 0.04  # m, floor returns below this are dropped
    rmse_threshold: dict[str, float] = field(default_factory=lambda: _per_class(0.075))
    min_points_fraction: float = 0.3
    line_offsets: int = 2  # scan lines on each side of the object at line_spacing


@dataclass
class RansacConfig:
    iterations: int = 200
    inlier_dist: float = 0.05  # m
    clearance: float = 0.04  # m
    tile_size: float = 4.0  # m, local plane tiles; <= 0 fits one plane per cloud
    min_tile_points: int = 50


@dataclass
class WindowConfig:
    mode: str = "per_class"  # per_class | global
    size_factor: float = 1.5  # window = factor x footprint diameter
    stride_fraction: float = 0.5


@dataclass
class IcpConfig:
    max_iterations: int = 50
    correspondence_dist: float = 0.5  # m, first iteration
    final_correspondence_dist: float = 0.1  # m
    shrink_iterations: int = 10
    convergence_tol: float = 1e-5  # m
    # stop once the correspondence distance is final if fewer than this
    # share of source points has a partner (0 disables)
    abort_inlier_fraction: float = 0.3


@dataclass
class DetectorConfig:
    ransac: RansacConfig = field(default_factory=RansacConfig)
    window: WindowConfig = field(default_factory=WindowConfig)
    icp: IcpConfig = field(default_factory=IcpConfig)
    nms_radius_factor: float = 0.5
    min_inlier_fraction: float = 0.5
    min_coverage: float = 0.8
    coverage_dist: float = 0.15  # m
    # skip windows whose highest point above the local seabed is below
    # this share of the class height (0 disables)
    min_height_fraction: float = 0.6
    seed: int = 0


@dataclass
class EvaluatorConfig:
    dist_threshold: float = 0.5
    thresholds: list[float] = field(default_factory=lambda: [0.5, 1.0, 2.0, 4.0])
    multi_threshold: bool = False
    distance_3d: bool = False
    map_gate: float = 0.0


@dataclass
class NoiseConfig:
    trim_k: float = 2.0
    ransac_iterations: int = 200
    ransac_inlier_dist: float = 0.05
    alpha: float = 0.05


@dataclass
class Config:
    terrain: TerrainConfig = field(default_factory=TerrainConfig)
    scene: SceneConfig = field(default_factory=SceneConfig)
    scanner: ScannerConfig = field(default_factory=ScannerConfig)
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    templates: TemplateConfig = field(default_factory=TemplateConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    evaluator: EvaluatorConfig = field(default_factory=EvaluatorConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    tile_size: float = 40.0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def fingerprint(self, *sections: str) -> str:
        d = self.to_dict()
        if sections:
            d = {k: d[k] for k in sections}
        blob = json.dumps(d, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def replace(self, **overrides: Any) -> "Config":
        """Copy with dotted-key overrides, e.g. ``replace(**{"scanner.noise_sigma": 0})``."""
        cfg = copy.deepcopy(self)
        for key, value in overrides.items():
            set_key(cfg, key, value)
        validate(cfg)
        return cfg


def _coerce(value: Any, tp: Any, path: str) -> Any:
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected a section (object), got {type(value).__name__}")
        return _from_dict(tp, value, path)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], path)
    if origin is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected an object")
        return {str(k): _coerce(v, args[1], f"{path}.{k}") for k, v in value.items()}
    if origin is list:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list")
        return [_coerce(v, args[0], path) for v in value]
    if tp is bool:
        if isinstance(value, str):
            if value.lower() in ("1", "true", "yes", "on"):
                return True
            if value.lower() in ("0", "false", "no", "off"):
                return False
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{path}: expected a boolean, got {value!r}")
    if tp is int:
        if isinstance(value, bool):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        try:
            f = float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{path}: expected an integer, got {value!r}") from None
        if f != int(f):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return int(f)
    if tp is float:
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{path}: expected a number, got {value!r}") from None
    if tp is str:
        return str(value)
    return value


def _from_dict(cls, data: dict, path: str = ""):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        where = path or "<root>"
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        kwargs[name] = _coerce(value, hints[name], f"{path}.{name}" if path else name)
    return cls(**kwargs)


def set_key(cfg: Config, dotted: str, value: Any) -> None:
    """Set one dotted key path in place, coercing to the declared type."""
    parts = dotted.split(".")
    obj = cfg
    for i, part in enumerate(parts[:-1]):
        if isinstance(obj, dict):
            obj = obj[part]
            continue
        if not dataclasses.is_dataclass(obj) or part not in {f.name for f in dataclasses.fields(obj)}:
            raise ConfigError(f"{'.'.join(parts[: i + 1])}: unknown key")
        obj = getattr(obj, part)
    last = parts[-1]
    if isinstance(obj, dict):
        obj[last] = float(value) if not isinstance(value, dict) else value
        return
    if not dataclasses.is_dataclass(obj) or last not in {f.name for f in dataclasses.fields(obj)}:
        raise ConfigError(f"{dotted}: unknown key")
    if isinstance(value, str) and value.strip().startswith(("[", "{")):
        value = json.loads(value)
    hint = typing.get_type_hints(type(obj))[last]
    setattr(obj, last, _coerce(value, hint, dotted))


def _positive(path: str, value: float) -> None:
    if not value > 0:
        raise ConfigError(f"{path}: must be > 0, got {value}")


def validate(cfg: Config) -> Config:
    t, s, sc, d = cfg.terrain, cfg.scene, cfg.scanner, cfg.detector
    if t.octaves < 1:
        raise ConfigError("terrain.octaves: must be >= 1")
    if t.amplitude < 0:
        raise ConfigError("terrain.amplitude: must be >= 0")
    for path, v in [
        ("terrain.wavelength", t.wavelength),
        ("terrain.resolution", t.resolution),
        ("scene.size", s.size),
        ("scanner.sensor_height", sc.sensor_height),
        ("scanner.ping_spacing", sc.ping_spacing),
        ("scanner.line_spacing", sc.line_spacing),
        ("scanner.swath_half_angle", sc.swath_half_angle),
        ("detector.ransac.inlier_dist", d.ransac.inlier_dist),
        ("detector.ransac.clearance", d.ransac.clearance),
        ("detector.window.size_factor", d.window.size_factor),
        ("detector.icp.correspondence_dist", d.icp.correspondence_dist),
        ("detector.icp.final_correspondence_dist", d.icp.final_correspondence_dist),
        ("detector.icp.convergence_tol", d.icp.convergence_tol),
        ("detector.nms_radius_factor", d.nms_radius_factor),
        ("detector.coverage_dist", d.coverage_dist),
        ("evaluator.dist_threshold", cfg.evaluator.dist_threshold),
        ("noise.trim_k", cfg.noise.trim_k),
        ("tile_size", cfg.tile_size),
    ]:
        _positive(path, v)
    for name, v in cfg.templates.rmse_threshold.items():
        _positive(f"templates.rmse_threshold.{name}", v)
    if not 1 <= sc.beam_count <= 1024:
        raise ConfigError(f"scanner.beam_count: must be in [1, 1024], got {sc.beam_count}")
    if not 0.0 <= sc.dropout_prob < 1.0:
        raise ConfigError("scanner.dropout_prob: must be in [0, 1)")
    if sc.noise_sigma < 0:
        raise ConfigError("scanner.noise_sigma: must be >= 0")
    if sc.swath_half_angle >= 90:
        raise ConfigError("scanner.swath_half_angle: must be < 90 degrees")
    if sc.direction_mode not in ("x", "y", "both", "random"):
        raise ConfigError("scanner.direction_mode: must be one of x, y, both, random")
    if not 0.0 < d.window.stride_fraction <= 1.0:
        raise ConfigError("detector.window.stride_fraction: must be in (0, 1]")
    if d.window.mode not in ("per_class", "global"):
        raise ConfigError("detector.window.mode: must be per_class or global")
    if cfg.geometry.mesh_resolution < 8:
        raise ConfigError("geometry.mesh_resolution: must be >= 8")
    if s.objects < 0 or (s.counts and any(v < 0 for v in s.counts.values())):
        raise ConfigError("scene.objects: counts must be >= 0")
    if s.counts:
        from .core import ObjectClass

        for k in s.counts:
            try:
                ObjectClass.parse(k)
            except ValueError as exc:
                raise ConfigError(f"scene.counts.{k}: {exc}") from None
    if 2 * s.margin >= s.size:
        raise ConfigError("scene.margin: leaves no room inside the scene")
    return cfg


def from_dict(data: dict) -> Config:
    return validate(_from_dict(Config, data))


def load_config(path: str | os.PathLike | None = None, overrides: dict[str, Any] | None = None) -> Config:
    """Defaults, then the file at ``path``, then dotted-key ``overrides``."""
    cfg = Config()
    if path is not None:
        with open(path) as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON: {exc}") from None
        cfg = _from_dict(Config, data)
    for key, value in (overrides or {}).items():
        set_key(cfg, key, value)
    return validate(cfg)


def save_config(cfg: Config, path: str | os.PathLike) -> None:
    with open(path, "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
