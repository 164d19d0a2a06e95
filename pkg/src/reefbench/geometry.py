"""Parametric reef-object meshes and BVH ray casting.

The four class meshes are closed triangle surfaces built from revolved
profiles. Ray queries go through a bounding-volume hierarchy compiled with
numba; :func:`brute_force_intersect` is the all-triangle reference the BVH
must agree with.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numba
import numpy as np

from .core import (
    NOMINAL_DIMENSIONS,
    ObjectClass,
    RigidTransform,
    TETRAPOD_S_SCALE,
)

MIN_RESOLUTION = 8
_T_MIN = 1e-9  # ignore hits closer than this to the ray origin


@dataclass(frozen=True)
class TriangleMesh:
    vertices: np.ndarray  # (V, 3) float64
    triangles: np.ndarray  # (T, 3) int64

    def __post_init__(self) -> None:
        v = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.ascontiguousarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(f) and (f.min() < 0 or f.max() >= len(v)):
            raise ValueError("triangle index out of range")
        if len(f):
            area2 = np.linalg.norm(np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]]), axis=1)
            if np.any(area2 <= 1e-14):
                raise ValueError("mesh contains degenerate (zero-area) triangles")
        v.setflags(write=False)
        f.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", f)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, TriangleMesh)
            and np.array_equal(self.vertices, other.vertices)
            and np.array_equal(self.triangles, other.triangles)
        )

    __hash__ = None  # type: ignore[assignment]

    @property
    def height(self) -> float:
        return float(np.ptp(self.vertices[:, 2]))

    def footprint_diameter(self) -> float:
        """Twice the largest horizontal distance of a vertex from the local z axis."""
        return 2.0 * float(np.max(np.hypot(self.vertices[:, 0], self.vertices[:, 1])))

    def edge_counts(self) -> dict[tuple[int, int], int]:
        f = self.triangles
        edges = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        edges.sort(axis=1)
        uniq, counts = np.unique(edges, axis=0, return_counts=True)
        return {(int(a), int(b)): int(c) for (a, b), c in zip(uniq, counts)}

    def is_closed(self) -> bool:
        return all(c == 2 for c in self.edge_counts().values())

    def signed_volume(self) -> float:
        v, f = self.vertices, self.triangles
        a, b, c = v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]
        return float(np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0)

    def is_consistently_oriented(self) -> bool:
        """Every directed edge appears once, i.e. neighbors traverse shared edges oppositely."""
        f = self.triangles
        directed = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        return len(np.unique(directed, axis=0)) == len(directed)


def mesh_aabb(mesh: TriangleMesh) -> tuple[np.ndarray, np.ndarray]:
    return mesh.vertices.min(axis=0), mesh.vertices.max(axis=0)


def transform_mesh(mesh: TriangleMesh, t: RigidTransform) -> TriangleMesh:
    return TriangleMesh(t.apply(mesh.vertices), mesh.triangles)


def merge_meshes(meshes: Sequence[TriangleMesh]) -> TriangleMesh:
    verts, tris, offset = [], [], 0
    for m in meshes:
        verts.append(m.vertices)
        tris.append(m.triangles + offset)
        offset += len(m.vertices)
    if not verts:
        return TriangleMesh(np.empty((0, 3)), np.empty((0, 3), dtype=np.int64))
    return TriangleMesh(np.concatenate(verts), np.concatenate(tris))


# ---------------------------------------------------------------------------
# Mesh construction


def _revolve(profile: Sequence[tuple[float, float]], n: int) -> tuple[np.ndarray, np.ndarray]:
    """Revolve a closed (r, z) polygon about the z axis.

    Profile points with r == 0 become poles joined by triangle fans. The
    profile must run counter-clockwise in the (r, z) half-plane for outward
    normals.
    """
    prof = [(float(r), float(z)) for r, z in profile]
    angles = 2.0 * np.pi * np.arange(n) / n
    cos, sin = np.cos(angles), np.sin(angles)
    verts: list[np.ndarray] = []
    rings: list[int | np.ndarray] = []  # pole vertex index or array of ring indices
    count = 0
    for r, z in prof:
        if r == 0.0:
            verts.append(np.array([[0.0, 0.0, z]]))
            rings.append(count)
            count += 1
        else:
            verts.append(np.column_stack([r * cos, r * sin, np.full(n, z)]))
            rings.append(np.arange(count, count + n))
            count += n
    tris = []
    m = len(prof)
    j = np.arange(n)
    jn = (j + 1) % n
    for k in range(m):
        a, b = rings[k], rings[(k + 1) % m]
        if isinstance(a, int) and isinstance(b, int):
            continue
        if isinstance(a, int):
            tris.append(np.column_stack([np.full(n, a), b[jn], b[j]]))
        elif isinstance(b, int):
            tris.append(np.column_stack([a[j], a[jn], np.full(n, b)]))
        else:
            tris.append(np.column_stack([a[j], a[jn], b[jn]]))
            tris.append(np.column_stack([a[j], b[jn], b[j]]))
    return np.concatenate(verts), np.concatenate(tris).astype(np.int64)


def _fix_winding(verts: np.ndarray, tris: np.ndarray) -> np.ndarray:
    a, b, c = verts[tris[:, 0]], verts[tris[:, 1]], verts[tris[:, 2]]
    vol = np.einsum("ij,ij->i", a, np.cross(b, c)).sum()
    return tris[:, ::-1].copy() if vol < 0 else tris


def _normalize(verts: np.ndarray, footprint: float, height: float) -> np.ndarray:
    """Scale radially and vertically to exact nominal size, centered on z = 0."""
    out = verts.copy()
    radial = 2.0 * np.max(np.hypot(out[:, 0], out[:, 1]))
    out[:, :2] *= footprint / radial
    zmin, zmax = out[:, 2].min(), out[:, 2].max()
    out[:, 2] = (out[:, 2] - zmin) * (height / (zmax - zmin)) - 0.5 * height
    # pin the extremes exactly against rounding in the affine map
    out[:, 2] = np.clip(out[:, 2], -0.5 * height, 0.5 * height)
    return out


# Leg proportions relative to leg length; chosen so the natural aspect ratio
# is close to the nominal footprint/height and the normalizing stretch is small.
_LEG_BASE_RADIUS = 0.34
_LEG_TIP_RADIUS = 0.21


def _leg_frame(axis: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    helper = np.array([0.0, 1.0, 0.0]) if abs(axis[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
    u = np.cross(helper, axis)
    u /= np.linalg.norm(u)
    v = np.cross(axis, u)
    return u, v


def tetrapod_leg_axes() -> np.ndarray:
    """Unit leg axes: one vertical, three pointing down at the tetrahedral angle."""
    s = math.sqrt(8.0 / 9.0)
    axes = [np.array([0.0, 0.0, 1.0])]
    for k in range(3):
        th = 2.0 * math.pi * k / 3.0
        axes.append(np.array([s * math.cos(th), s * math.sin(th), -1.0 / 3.0]))
    return np.array(axes)


def _tetrapod(n: int) -> tuple[np.ndarray, np.ndarray]:
    length = 1.0
    profile = [(0.0, 0.0), (_LEG_BASE_RADIUS, 0.0), (_LEG_TIP_RADIUS, length), (0.0, length)]
    leg_v, leg_f = _revolve(profile, n)
    verts, tris = [], []
    for i, axis in enumerate(tetrapod_leg_axes()):
        u, v = _leg_frame(axis)
        basis = np.column_stack([u, v, axis])  # local (x, y, z) -> world
        verts.append(leg_v @ basis.T)
        tris.append(leg_f + i * len(leg_v))
    return np.concatenate(verts), np.concatenate(tris)


def make_mesh(cls: ObjectClass | str, resolution: int = 32, tetrapod_s_scale: float = TETRAPOD_S_SCALE) -> TriangleMesh:
    """Closed mesh of one object class in its local frame.

    The local origin sits on the vertical symmetry axis at half height, so
    the axis-aligned height and the footprint diameter equal the class
    nominal values.
    """
    cls = ObjectClass.parse(cls)
    if resolution < MIN_RESOLUTION:
        raise ValueError(f"mesh resolution must be >= {MIN_RESOLUTION}, got {resolution}")
    footprint, height = NOMINAL_DIMENSIONS[cls]
    if cls is ObjectClass.REEF_RING:
        ro, ri = 0.75, 0.45
        verts, tris = _revolve([(ri, 0.0), (ro, 0.0), (ro, 0.75), (ri, 0.75)], resolution)
    elif cls is ObjectClass.REEF_CONE:
        rb, rt, wall = 0.8, 0.3, 0.12
        verts, tris = _revolve([(rb - wall, 0.0), (rb, 0.0), (rt, 1.2), (rt - wall, 1.2)], resolution)
    else:
        verts, tris = _tetrapod(resolution)
        if cls is ObjectClass.TETRAPOD_S:
            b_foot, b_height = NOMINAL_DIMENSIONS[ObjectClass.TETRAPOD_B]
            footprint, height = b_foot * tetrapod_s_scale, b_height * tetrapod_s_scale
    verts = _normalize(verts, footprint, height)
    return TriangleMesh(verts, _fix_winding(verts, tris))


def class_dimensions(cls: ObjectClass | str, tetrapod_s_scale: float = TETRAPOD_S_SCALE) -> tuple[float, float]:
    """(footprint diameter, height) honoring a non-default small-tetrapod scale."""
    cls = ObjectClass.parse(cls)
    if cls is ObjectClass.TETRAPOD_S:
        f, h = NOMINAL_DIMENSIONS[ObjectClass.TETRAPOD_B]
        return f * tetrapod_s_scale, h * tetrapod_s_scale
    return NOMINAL_DIMENSIONS[cls]


def box_mesh(lo: Sequence[float], hi: Sequence[float]) -> TriangleMesh:
    """Axis-aligned box with outward winding."""
    x0, y0, z0 = lo
    x1, y1, z1 = hi
    v = np.array(
        [[x0, y0, z0], [x1, y0, z0], [x1, y1, z0], [x0, y1, z0],
         [x0, y0, z1], [x1, y0, z1], [x1, y1, z1], [x0, y1, z1]],
        dtype=np.float64,
    )
    f = np.array(
        [[0, 2, 1], [0, 3, 2], [4, 5, 6], [4, 6, 7],
         [0, 1, 5], [0, 5, 4], [2, 3, 7], [2, 7, 6],
         [1, 2, 6], [1, 6, 5], [3, 0, 4], [3, 4, 7]],
        dtype=np.int64,
    )
    return TriangleMesh(v, f)


def heightfield_mesh(xs: np.ndarray, ys: np.ndarray, z: np.ndarray) -> TriangleMesh:
    """Open triangulated surface over a regular grid; ``z[i, j]`` at ``(xs[i], ys[j])``.

    Each cell is split along its (i, j)-(i+1, j+1) diagonal.
    """
    nx, ny = len(xs), len(ys)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    verts = np.column_stack([gx.ravel(), gy.ravel(), np.asarray(z, dtype=np.float64).ravel()])
    idx = np.arange(nx * ny).reshape(nx, ny)
    a = idx[:-1, :-1].ravel()
    b = idx[1:, :-1].ravel()
    c = idx[1:, 1:].ravel()
    d = idx[:-1, 1:].ravel()
    tris = np.concatenate([np.column_stack([a, b, c]), np.column_stack([a, c, d])])
    return TriangleMesh(verts, tris)


# ---------------------------------------------------------------------------
# Ray casting


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self) -> None:
        o = np.asarray(self.origin, dtype=np.float64).reshape(3)
        d = np.asarray(self.direction, dtype=np.float64).reshape(3)
        n = np.linalg.norm(d)
        if n == 0:
            raise ValueError("ray direction must be non-zero")
        if abs(n - 1.0) > 1e-9:
            d = d / n
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)


@numba.njit(cache=True, inline="always")
def _mt(ox, oy, oz, dx, dy, dz, v0, v1, v2):
    """Möller–Trumbore; returns the ray parameter or inf on a miss."""
    e1x = v1[0] - v0[0]
    e1y = v1[1] - v0[1]
    e1z = v1[2] - v0[2]
    e2x = v2[0] - v0[0]
    e2y = v2[1] - v0[1]
    e2z = v2[2] - v0[2]
    px = dy * e2z - dz * e2y
    py = dz * e2x - dx * e2z
    pz = dx * e2y - dy * e2x
    det = e1x * px + e1y * py + e1z * pz
    if abs(det) < 1e-15:
        return np.inf
    inv = 1.0 / det
    tx = ox - v0[0]
    ty = oy - v0[1]
    tz = oz - v0[2]
    u = (tx * px + ty * py + tz * pz) * inv
    if u < 0.0 or u > 1.0:
        return np.inf
    qx = ty * e1z - tz * e1y
    qy = tz * e1x - tx * e1z
    qz = tx * e1y - ty * e1x
    v = (dx * qx + dy * qy + dz * qz) * inv
    if v < 0.0 or u + v > 1.0:
        return np.inf
    t = (e2x * qx + e2y * qy + e2z * qz) * inv
    if t <= _T_MIN:
        return np.inf
    return t


@numba.njit(cache=True)
def _build_bvh(lo, hi, cen, leaf_size):
    """Median-split BVH over triangle boxes. Returns flat node arrays."""
    n = lo.shape[0]
    order = np.arange(n)
    max_nodes = 2 * n + 1
    nmin = np.empty((max_nodes, 3))
    nmax = np.empty((max_nodes, 3))
    left = np.full(max_nodes, -1, np.int64)
    right = np.full(max_nodes, -1, np.int64)
    start = np.zeros(max_nodes, np.int64)
    count = np.zeros(max_nodes, np.int64)
    stack = np.empty((64 + 2 * int(np.log2(n + 1)) + 2, 3), np.int64)
    sp = 0
    stack[0, 0] = 0
    stack[0, 1] = 0
    stack[0, 2] = n
    sp = 1
    n_nodes = 1
    while sp > 0:
        sp -= 1
        node = stack[sp, 0]
        s = stack[sp, 1]
        e = stack[sp, 2]
        for k in range(3):
            mn = np.inf
            mx = -np.inf
            for i in range(s, e):
                t = order[i]
                if lo[t, k] < mn:
                    mn = lo[t, k]
                if hi[t, k] > mx:
                    mx = hi[t, k]
            nmin[node, k] = mn
            nmax[node, k] = mx
        start[node] = s
        count[node] = e - s
        if e - s <= leaf_size:
            continue
        # split on the widest centroid axis at the median
        best_axis = 0
        best_ext = -1.0
        for k in range(3):
            mn = np.inf
            mx = -np.inf
            for i in range(s, e):
                c = cen[order[i], k]
                if c < mn:
                    mn = c
                if c > mx:
                    mx = c
            if mx - mn > best_ext:
                best_ext = mx - mn
                best_axis = k
        seg = order[s:e]
        keys = cen[seg, best_axis]
        perm = np.argsort(keys, kind="mergesort")
        order[s:e] = seg[perm]
        mid = s + (e - s) // 2
        l = n_nodes
        r = n_nodes + 1
        n_nodes += 2
        left[node] = l
        right[node] = r
        count[node] = 0
        stack[sp, 0] = l
        stack[sp, 1] = s
        stack[sp, 2] = mid
        sp += 1
        stack[sp, 0] = r
        stack[sp, 1] = mid
        stack[sp, 2] = e
        sp += 1
    return nmin[:n_nodes], nmax[:n_nodes], left[:n_nodes], right[:n_nodes], start[:n_nodes], count[:n_nodes], order


@numba.njit(cache=True, inline="always")
def _slab(ox, oy, oz, dx, dy, dz, bmin, bmax, tmax):
    t0 = 0.0
    t1 = tmax
    o = (ox, oy, oz)
    d = (dx, dy, dz)
    for k in range(3):
        if d[k] == 0.0:
            if o[k] < bmin[k] or o[k] > bmax[k]:
                return False
            continue
        inv = 1.0 / d[k]
        ta = (bmin[k] - o[k]) * inv
        tb = (bmax[k] - o[k]) * inv
        if ta > tb:
            ta, tb = tb, ta
        if ta > t0:
            t0 = ta
        if tb < t1:
            t1 = tb
        if t0 > t1:
            return False
    return True


@numba.njit(cache=True)
def _bvh_query(origins, dirs, verts, tris, nmin, nmax, left, right, start, count, order):
    n = origins.shape[0]
    t_out = np.full(n, np.inf)
    id_out = np.full(n, -1, np.int64)
    for r in range(n):
        ox, oy, oz = origins[r, 0], origins[r, 1], origins[r, 2]
        dx, dy, dz = dirs[r, 0], dirs[r, 1], dirs[r, 2]
        best = np.inf
        best_id = -1
        stack = np.empty(128, np.int64)
        sp = 0
        stack[0] = 0
        sp = 1
        while sp > 0:
            sp -= 1
            node = stack[sp]
            # slightly inflated bound so ties at ``best`` are still visited
            if not _slab(ox, oy, oz, dx, dy, dz, nmin[node], nmax[node], best * (1.0 + 1e-12) + 1e-12):
                continue
            if count[node] > 0:
                for i in range(start[node], start[node] + count[node]):
                    tri = order[i]
                    t = _mt(ox, oy, oz, dx, dy, dz, verts[tris[tri, 0]], verts[tris[tri, 1]], verts[tris[tri, 2]])
                    if t < best or (t == best and tri < best_id):
                        best = t
                        best_id = tri
            else:
                stack[sp] = left[node]
                sp += 1
                stack[sp] = right[node]
                sp += 1
        t_out[r] = best
        id_out[r] = best_id
    return t_out, id_out


class SpatialIndex:
    """BVH over the triangles of one mesh (merge several with :func:`merge_meshes`)."""

    def __init__(self, mesh: TriangleMesh, leaf_size: int = 4):
        self.mesh = mesh
        v, f = mesh.vertices, mesh.triangles
        if len(f) == 0:
            self._nodes = None
            return
        tv = v[f]  # (T, 3, 3)
        lo = tv.min(axis=1)
        hi = tv.max(axis=1)
        cen = tv.mean(axis=1)
        self._nodes = _build_bvh(lo, hi, cen, leaf_size)

    @property
    def triangle_count(self) -> int:
        return len(self.mesh.triangles)

    def intersect(self, origins: np.ndarray, directions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Nearest hit per ray: (range, triangle id); misses are (inf, -1)."""
        origins = np.ascontiguousarray(origins, dtype=np.float64).reshape(-1, 3)
        directions = np.ascontiguousarray(directions, dtype=np.float64).reshape(-1, 3)
        if self._nodes is None or len(origins) == 0:
            return np.full(len(origins), np.inf), np.full(len(origins), -1, dtype=np.int64)
        return _bvh_query(origins, directions, self.mesh.vertices, self.mesh.triangles, *self._nodes)


def ray_intersect(index: SpatialIndex, ray: Ray) -> tuple[np.ndarray, float] | None:
    t, _ = index.intersect(ray.origin[None, :], ray.direction[None, :])
    if not np.isfinite(t[0]):
        return None
    return ray.origin + t[0] * ray.direction, float(t[0])


def brute_force_intersect(mesh: TriangleMesh, origins: np.ndarray, directions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Reference nearest-hit over every triangle, vectorized with numpy.

    Uses the same Möller–Trumbore arithmetic and tie-break (lowest triangle
    id) as the BVH.
    """
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    directions = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    v = mesh.vertices
    f = mesh.triangles
    v0, v1, v2 = v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]
    e1 = v1 - v0
    e2 = v2 - v0
    t_out = np.full(len(origins), np.inf)
    id_out = np.full(len(origins), -1, dtype=np.int64)
    for r in range(len(origins)):
        ox, oy, oz = origins[r]
        dx, dy, dz = directions[r]
        px = dy * e2[:, 2] - dz * e2[:, 1]
        py = dz * e2[:, 0] - dx * e2[:, 2]
        pz = dx * e2[:, 1] - dy * e2[:, 0]
        det = e1[:, 0] * px + e1[:, 1] * py + e1[:, 2] * pz
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / det
            tx = ox - v0[:, 0]
            ty = oy - v0[:, 1]
            tz = oz - v0[:, 2]
            u = (tx * px + ty * py + tz * pz) * inv
            qx = ty * e1[:, 2] - tz * e1[:, 1]
            qy = tz * e1[:, 0] - tx * e1[:, 2]
            qz = tx * e1[:, 1] - ty * e1[:, 0]
            vv = (dx * qx + dy * qy + dz * qz) * inv
            t = (e2[:, 0] * qx + e2[:, 1] * qy + e2[:, 2] * qz) * inv
            ok = (np.abs(det) >= 1e-15) & (u >= 0) & (u <= 1) & (vv >= 0) & (u + vv <= 1) & (t > _T_MIN)
        if ok.any():
            tt = np.where(ok, t, np.inf)
            k = int(np.argmin(tt))
            t_out[r] = tt[k]
            id_out[r] = k
    return t_out, id_out


# ---------------------------------------------------------------------------
# Export


def save_mesh(mesh: TriangleMesh, path: str | Path) -> None:
    """Write ASCII STL (``.stl``) or ASCII PLY (anything else)."""
    path = Path(path)
    v, f = mesh.vertices, mesh.triangles
    if path.suffix.lower() == ".stl":
        n = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
        n /= np.linalg.norm(n, axis=1, keepdims=True)
        lines = ["solid mesh"]
        for tri, nn in zip(f, n):
            lines.append(f"facet normal {nn[0]:.9g} {nn[1]:.9g} {nn[2]:.9g}")
            lines.append("outer loop")
            for i in tri:
                lines.append(f"vertex {v[i, 0]:.9g} {v[i, 1]:.9g} {v[i, 2]:.9g}")
            lines.append("endloop")
            lines.append("endfacet")
        lines.append("endsolid mesh")
        path.write_text("\n".join(lines) + "\n")
        return
    header = (
        f"ply\nformat ascii 1.0\nelement vertex {len(v)}\n"
        "property double x\nproperty double y\nproperty double z\n"
        f"element face {len(f)}\nproperty list uchar int vertex_indices\nend_header\n"
    )
    body = "".join("%.17g %.17g %.17g\n" % tuple(r) for r in v.tolist())
    body += "".join("3 %d %d %d\n" % tuple(r) for r in f.tolist())
    path.write_text(header + body)
