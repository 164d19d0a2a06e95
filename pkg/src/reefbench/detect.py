"""Training-free detector: seabed removal followed by windowed ICP template matching.

Pipeline per scene::

    RANSAC ground plane(s) -> drop points near/below the plane
    -> overlapping xy windows -> centroid-initialized ICP against every
    template -> RMSE / inlier / coverage gates -> radius NMS
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .config import Config, DetectorConfig, IcpConfig
from .core import (
    CLASS_ORDER,
    Detection,
    ObjectClass,
    RigidTransform,
    as_cloud,
    score_from_rmse,
    tile_labels,
    wrap_angle,
)
from .geometry import class_dimensions
from .templates import Template, TemplateLibrary

log = logging.getLogger(__name__)


class DetectionError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Ground plane


@dataclass(frozen=True)
class PlaneModel:
    """Plane ``{p : normal·p + offset = 0}`` with the normal pointing up."""

    normal: np.ndarray
    offset: float
    inlier_count: int

    def distance(self, cloud: np.ndarray) -> np.ndarray:
        return np.asarray(cloud, dtype=np.float64) @ self.normal + self.offset


def _fit_plane_lsq(pts: np.ndarray) -> tuple[np.ndarray, float]:
    c = pts.mean(axis=0)
    _, _, vt = np.linalg.svd(pts - c, full_matrices=False)
    n = vt[-1]
    if n[2] < 0:
        n = -n
    n = n / np.linalg.norm(n)
    return n, float(-n @ c)


def ransac_plane(cloud: np.ndarray, iterations: int = 200, inlier_dist: float = 0.05, seed: int = 0) -> PlaneModel:
    """Max-consensus plane from random 3-point samples, refit on its inliers."""
    pts = as_cloud(cloud)
    n_pts = len(pts)
    if n_pts < 3:
        raise DetectionError(f"RANSAC needs at least 3 points, got {n_pts}")
    centered = pts - pts.mean(axis=0)
    if np.linalg.svd(centered, compute_uv=False)[1] <= 1e-12 * max(1.0, np.abs(centered).max()):
        raise DetectionError("RANSAC input points are collinear")
    rng = np.random.default_rng(seed)
    best_count, best_n, best_d = -1, None, 0.0
    chunk = max(1, min(iterations, 2_000_000 // max(n_pts, 1)))
    done = 0
    while done < iterations:
        m = min(chunk, iterations - done)
        idx = np.stack([rng.choice(n_pts, 3, replace=False) for _ in range(m)])
        a, b, c = centered[idx[:, 0]], centered[idx[:, 1]], centered[idx[:, 2]]
        nrm = np.cross(b - a, c - a)
        length = np.linalg.norm(nrm, axis=1)
        valid = length > 1e-12
        nrm[valid] /= length[valid, None]
        d = -np.einsum("ij,ij->i", nrm, a)
        counts = np.zeros(m, dtype=np.int64)
        if valid.any():
            dist = np.abs(centered @ nrm[valid].T + d[valid])
            counts[valid] = (dist <= inlier_dist).sum(axis=0)
        k = int(np.argmax(counts))
        if valid[k] and counts[k] > best_count:
            best_count, best_n, best_d = int(counts[k]), nrm[k], float(d[k])
        done += m
    if best_n is None:
        raise DetectionError("RANSAC found no non-degenerate sample")
    inliers = np.abs(centered @ best_n + best_d) <= inlier_dist
    if inliers.sum() < 3:
        raise DetectionError("RANSAC consensus set too small to refit")
    n, d = _fit_plane_lsq(pts[inliers])
    return PlaneModel(n, d, int(inliers.sum()))


def remove_seabed(cloud: np.ndarray, plane: PlaneModel, clearance: float = 0.04) -> np.ndarray:
    """Keep points more than ``clearance`` above the plane."""
    cloud = as_cloud(cloud)
    if len(cloud) == 0:
        return cloud
    return cloud[plane.distance(cloud) > clearance]


def seabed_heights(cloud: np.ndarray, cfg: DetectorConfig, seed: int = 0) -> tuple[np.ndarray, list[PlaneModel]]:
    """Signed height of every point above its local seabed plane.

    One RANSAC plane is fitted per xy tile (tiles anchored at the cloud's
    minimum corner); tiles too sparse to fit reuse the whole-cloud plane.
    ``tile_size <= 0`` fits the single global plane only.
    """
    rc = cfg.ransac
    cloud = as_cloud(cloud)
    if len(cloud) < 3:
        return np.zeros(len(cloud)), []
    global_plane = ransac_plane(cloud, rc.iterations, rc.inlier_dist, seed)
    if rc.tile_size <= 0:
        return global_plane.distance(cloud), [global_plane]
    ix, iy = tile_labels(cloud, rc.tile_size)
    key = ix * (int(iy.max()) + 1) + iy
    h = np.empty(len(cloud))
    planes = []
    for k_i, k in enumerate(np.unique(key)):
        sel = np.flatnonzero(key == k)
        plane = global_plane
        if len(sel) >= rc.min_tile_points:
            try:
                plane = ransac_plane(cloud[sel], rc.iterations, rc.inlier_dist, seed + 1 + k_i)
            except DetectionError:
                plane = global_plane
        planes.append(plane)
        h[sel] = plane.distance(cloud[sel])
    return h, planes


def remove_seabed_tiled(cloud: np.ndarray, cfg: DetectorConfig, seed: int = 0) -> tuple[np.ndarray, list[PlaneModel]]:
    """Keep points more than ``ransac.clearance`` above their local seabed plane."""
    cloud = as_cloud(cloud)
    h, planes = seabed_heights(cloud, cfg, seed)
    return cloud[h > cfg.ransac.clearance], planes


# ---------------------------------------------------------------------------
# Segmentation


@dataclass(frozen=True)
class Segment:
    origin: tuple[float, float]
    cloud: np.ndarray
    size: float
    index: np.ndarray | None = None  # rows of the windowed cloud


def window_origins(lo: float, hi: float, window: float, stride: float) -> np.ndarray:
    n = max(1, int(math.ceil((hi - lo - window) / stride - 1e-9)) + 1)
    return lo + stride * np.arange(n)


def sliding_windows(
    cloud: np.ndarray,
    window_size: float,
    stride: float,
    min_points: int = 1,
    anchor: Sequence[float] | None = None,
) -> list[Segment]:
    """Overlapping square windows over the cloud's xy extent.

    Windows start at the cloud's minimum corner (or ``anchor``) and step by
    ``stride``; windows with fewer than ``min_points`` points are dropped.
    """
    if not (window_size >= stride > 0):
        raise ValueError("need window_size >= stride > 0")
    cloud = as_cloud(cloud)
    if len(cloud) == 0:
        return []
    lo = cloud[:, :2].min(axis=0) if anchor is None else np.asarray(anchor, dtype=np.float64)
    hi = cloud[:, :2].max(axis=0)
    xs = window_origins(lo[0], hi[0], window_size, stride)
    ys = window_origins(lo[1], hi[1], window_size, stride)
    order = np.argsort(cloud[:, 0], kind="stable")
    sx = cloud[order, 0]
    out = []
    for x0 in xs:
        a = np.searchsorted(sx, x0, side="left")
        b = np.searchsorted(sx, x0 + window_size, side="right")
        if b - a < min_points:
            continue
        col = order[a:b]
        cy = cloud[col, 1]
        for y0 in ys:
            m = (cy >= y0) & (cy <= y0 + window_size)
            if m.sum() >= max(min_points, 1):
                idx = np.sort(col[m])
                out.append(Segment((float(x0), float(y0)), cloud[idx], window_size, idx))
    return out


# ---------------------------------------------------------------------------
# ICP


@dataclass
class IcpResult:
    transform: RigidTransform
    rmse: float
    inlier_fraction: float
    iterations: int
    converged: bool
    success: bool = True
    history: list[tuple[float, float]] = field(default_factory=list)  # (rmse before, after) per update


def _kabsch(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    cs = src.mean(axis=0)
    cd = dst.mean(axis=0)
    h = (src - cs).T @ (dst - cd)
    u, _, vt = np.linalg.svd(h)
    r = vt.T @ u.T
    if np.linalg.det(r) < 0:  # reflection: flip the weakest axis
        vt[2] *= -1.0
        r = vt.T @ u.T
    return r, cd - r @ cs


def _orthonormalize(r: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(r)
    return u @ vt


def best_fit_transform(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares rotation and translation mapping ``src`` onto ``dst`` (SVD / Kabsch)."""
    r, _ = _kabsch(src, dst)
    r = _orthonormalize(r)
    return r, dst.mean(axis=0) - r @ src.mean(axis=0)


def _corr_schedule(p: IcpConfig, k: int) -> float:
    if p.shrink_iterations <= 0 or k >= p.shrink_iterations:
        return p.final_correspondence_dist
    a = k / p.shrink_iterations
    return p.correspondence_dist + a * (p.final_correspondence_dist - p.correspondence_dist)


def icp_register(
    source: np.ndarray,
    target: np.ndarray,
    params: IcpConfig | None = None,
    init: RigidTransform | None = None,
    target_tree: cKDTree | None = None,
    record_history: bool = False,
) -> IcpResult:
    """Point-to-point ICP of ``source`` onto ``target``.

    Correspondences are nearest target neighbors within a distance that
    shrinks linearly from ``correspondence_dist`` to
    ``final_correspondence_dist`` over ``shrink_iterations``. The reported
    RMSE and inlier fraction use the final transform and final distance.
    """
    p = params or IcpConfig()
    source = as_cloud(source)
    target = as_cloud(target)
    if len(source) < 3 or len(target) < 3:
        raise DetectionError("ICP needs at least 3 points in both clouds")
    tree = target_tree if target_tree is not None else cKDTree(target)
    r = np.eye(3) if init is None else init.rotation.copy()
    t = np.zeros(3) if init is None else init.translation.copy()
    history = []
    converged = False
    k = 0
    fail = IcpResult(RigidTransform(r, t), math.inf, 0.0, 0, False, False)
    for k in range(p.max_iterations):
        cur = source @ r.T + t
        maxd = _corr_schedule(p, k)
        dist, idx = tree.query(cur, distance_upper_bound=maxd)
        ok = np.isfinite(dist)
        if ok.sum() < 3:
            fail.iterations = k
            return fail
        if k == p.shrink_iterations and ok.mean() < p.abort_inlier_fraction:
            fail.iterations = k
            return fail
        src_c = cur[ok]
        dst_c = target[idx[ok]]
        dr, dt = _kabsch(src_c, dst_c)
        if record_history:
            before = math.sqrt(float(np.mean(dist[ok] ** 2)))
            moved = src_c @ dr.T + dt
            after = math.sqrt(float(np.mean(np.sum((moved - dst_c) ** 2, axis=1))))
            history.append((before, after))
        r = dr @ r
        t = dr @ t + dt
        # delta measured as the largest displacement of a source point
        delta = float(np.max(np.linalg.norm(src_c @ dr.T + dt - src_c, axis=1)))
        if delta < p.convergence_tol and maxd <= p.final_correspondence_dist:
            converged = True
            break
    r = _orthonormalize(r)
    cur = source @ r.T + t
    dist, _ = tree.query(cur, distance_upper_bound=p.final_correspondence_dist)
    ok = np.isfinite(dist)
    if not ok.any():
        fail.iterations = k + 1
        return fail
    rmse = math.sqrt(float(np.mean(dist[ok] ** 2)))
    return IcpResult(RigidTransform(r, t), rmse, float(ok.mean()), k + 1, converged, True, history)


# ---------------------------------------------------------------------------
# Matching


@dataclass(frozen=True)
class Hypothesis:
    cls: ObjectClass
    pose: RigidTransform  # template frame -> scene
    rmse: float
    inlier_fraction: float
    coverage: float
    center: np.ndarray
    yaw: float
    segment_origin: tuple[float, float] = (0.0, 0.0)


def hypothesis_from_pose(tmpl: Template, pose: RigidTransform, rmse: float, inlier_fraction: float, coverage: float, origin=(0.0, 0.0)) -> Hypothesis:
    center = pose.apply(tmpl.origin_offset[None, :])[0]
    rot = pose.rotation @ RigidTransform.from_yaw(tmpl.source_yaw).rotation
    yaw = wrap_angle(math.atan2(rot[1, 0], rot[0, 0]))
    return Hypothesis(tmpl.cls, pose, rmse, inlier_fraction, coverage, center, yaw, origin)


def coverage_fraction(
    target: np.ndarray,
    posed_template: np.ndarray,
    center: np.ndarray,
    radius: float,
    dist: float,
) -> float:
    """Share of target points inside the object's footprint disk that lie near the template."""
    near = np.hypot(target[:, 0] - center[0], target[:, 1] - center[1]) <= radius
    if not near.any():
        return 0.0
    d, _ = cKDTree(posed_template).query(target[near], distance_upper_bound=dist)
    return float(np.isfinite(d).mean())


def match_segment(
    segment: np.ndarray,
    templates: Sequence[Template],
    cfg: DetectorConfig | None = None,
    tetrapod_s_scale: float = 0.6,
    tree: cKDTree | None = None,
    origin: tuple[float, float] = (0.0, 0.0),
) -> Hypothesis | None:
    """Best template fit for one segment, or None when every candidate fails the gates."""
    cfg = cfg or DetectorConfig()
    seg = as_cloud(segment)
    if len(seg) < 3 or not templates:
        return None
    tree = tree if tree is not None else cKDTree(seg)
    seg_c = seg.mean(axis=0)
    best: Hypothesis | None = None
    cov_dist = cfg.coverage_dist
    for tmpl in templates:
        init = RigidTransform(np.eye(3), seg_c - tmpl.cloud.mean(axis=0))
        res = icp_register(tmpl.cloud, seg, cfg.icp, init, tree)
        if not res.success:
            continue
        if res.rmse > tmpl.rmse_threshold or res.inlier_fraction < cfg.min_inlier_fraction:
            continue
        if best is not None and res.rmse >= best.rmse:
            continue
        hyp = hypothesis_from_pose(tmpl, res.transform, res.rmse, res.inlier_fraction, 1.0, origin)
        if cfg.min_coverage > 0:
            radius = 0.5 * class_dimensions(tmpl.cls, tetrapod_s_scale)[0]
            cov = coverage_fraction(seg, res.transform.apply(tmpl.cloud), hyp.center, radius, cov_dist)
            if cov < cfg.min_coverage:
                continue
            hyp = hypothesis_from_pose(tmpl, res.transform, res.rmse, res.inlier_fraction, cov, origin)
        best = hyp
    return best


def _nms_key(h: Hypothesis):
    return (h.rmse, h.cls.index, float(h.center[0]), float(h.center[1]))


def nms_dedupe(hypotheses: Sequence[Hypothesis], nms_radius: dict[ObjectClass, float] | float) -> list[Detection]:
    """Greedy suppression in ascending-RMSE order across all classes.

    A hypothesis is dropped when its horizontal center lies within
    ``max(radius(accepted class), radius(own class))`` of an accepted one.
    """
    if not isinstance(nms_radius, dict):
        nms_radius = {c: float(nms_radius) for c in CLASS_ORDER}
    accepted: list[Hypothesis] = []
    for h in sorted(hypotheses, key=_nms_key):
        ok = True
        for a in accepted:
            rad = max(nms_radius[a.cls], nms_radius[h.cls])
            if math.hypot(h.center[0] - a.center[0], h.center[1] - a.center[1]) < rad:
                ok = False
                break
        if ok:
            accepted.append(h)
    return [Detection(h.cls, tuple(h.center), h.yaw, score_from_rmse(h.rmse)) for h in accepted]


# ---------------------------------------------------------------------------
# Scene-level pipeline


def class_windows(library: TemplateLibrary, cfg: DetectorConfig, tetrapod_s_scale: float = 0.6) -> list[tuple[float, list[Template]]]:
    """(window size, templates) groups: one per class, or one global group."""
    groups = []
    for cls in library.classes:
        size = cfg.window.size_factor * class_dimensions(cls, tetrapod_s_scale)[0]
        groups.append((size, library.by_class(cls)))
    if cfg.window.mode == "global":
        size = max(g[0] for g in groups)
        return [(size, [t for g in groups for t in g[1]])]
    return groups


@dataclass
class DetectionDebug:
    planes: list[PlaneModel] = field(default_factory=list)
    points_after_seabed: int = 0
    segments: int = 0
    hypotheses: list[Hypothesis] = field(default_factory=list)


def detect_scene(
    cloud: np.ndarray,
    library: TemplateLibrary,
    config: Config | None = None,
    seed: int | None = None,
    debug: DetectionDebug | None = None,
) -> list[Detection]:
    cfg = config or Config()
    dc = cfg.detector
    seed = dc.seed if seed is None else seed
    cloud = as_cloud(cloud)
    if len(cloud) < 3 or len(library) == 0:
        return []
    heights, planes = seabed_heights(cloud, dc, seed)
    keep = heights > dc.ransac.clearance
    objects, heights = cloud[keep], heights[keep]
    if debug is not None:
        debug.planes = planes
        debug.points_after_seabed = len(objects)
    if len(objects) == 0:
        return []
    anchor = cloud[:, :2].min(axis=0)
    scale = cfg.geometry.tetrapod_s_scale
    hyps: list[Hypothesis] = []
    n_segments = 0
    for size, templates in class_windows(library, dc, scale):
        min_pts = min(t.min_points for t in templates)
        min_h = dc.min_height_fraction * min(class_dimensions(t.cls, scale)[1] for t in templates)
        for seg in sliding_windows(objects, size, size * dc.window.stride_fraction, min_pts, anchor):
            if heights[seg.index].max() < min_h:
                continue
            n_segments += 1
            h = match_segment(seg.cloud, templates, dc, scale, origin=seg.origin)
            if h is not None:
                hyps.append(h)
    if debug is not None:
        debug.segments = n_segments
        debug.hypotheses = hyps
    radius = {c: dc.nms_radius_factor * class_dimensions(c, scale)[0] for c in CLASS_ORDER}
    return nms_dedupe(hyps, radius)
