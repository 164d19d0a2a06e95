import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reefbench.core import CLASS_ORDER, NOMINAL_DIMENSIONS, ObjectClass, RigidTransform, rotation_axis_angle, rotation_z
from reefbench.geometry import (
    Ray,
    SpatialIndex,
    TriangleMesh,
    box_mesh,
    brute_force_intersect,
    class_dimensions,
    heightfield_mesh,
    make_mesh,
    merge_meshes,
    mesh_aabb,
    ray_intersect,
    save_mesh,
    tetrapod_leg_axes,
    transform_mesh,
)


@pytest.fixture(scope="module")
def meshes():
    return {c: make_mesh(c) for c in CLASS_ORDER}


def random_rays(rng, n, center, spread):
    origins = center + rng.uniform(-spread, spread, size=(n, 3))
    targets = center + rng.uniform(-0.6 * spread, 0.6 * spread, size=(n, 3))
    d = targets - origins
    return origins, d / np.linalg.norm(d, axis=1, keepdims=True)


@pytest.mark.parametrize("cls", CLASS_ORDER)
def test_meshes_closed_oriented_with_exact_dimensions(meshes, cls):
    m = meshes[cls]
    assert m.is_closed()
    assert m.is_consistently_oriented()
    assert m.signed_volume() > 0  # outward normals
    foot, height = NOMINAL_DIMENSIONS[cls]
    lo, hi = mesh_aabb(m)
    assert hi[2] - lo[2] == pytest.approx(height, abs=1e-6)
    assert m.footprint_diameter() == pytest.approx(foot, abs=1e-6)


def test_paper_heights(meshes):
    assert meshes[ObjectClass.TETRAPOD_B].height == pytest.approx(2.08, abs=1e-6)
    assert meshes[ObjectClass.REEF_RING].height == pytest.approx(0.75, abs=1e-6)


def test_low_resolution_cone_closed():
    assert make_mesh("reef_cone", 16).is_closed()
    assert make_mesh("reef_cone", 8).is_closed()


def test_resolution_too_low():
    with pytest.raises(ValueError):
        make_mesh("reef_ring", 7)


def test_tetrapod_s_is_scaled_b():
    b = make_mesh("tetrapod_b")
    s = make_mesh("tetrapod_s")
    np.testing.assert_allclose(s.vertices, 0.6 * b.vertices, atol=1e-12)
    assert class_dimensions("tetrapod_s", 0.5) == pytest.approx((2.75 * 0.5, 2.08 * 0.5))


def test_tetrapod_axes_tetrahedral():
    a = tetrapod_leg_axes()
    g = a @ a.T
    off = g[~np.eye(4, dtype=bool)]
    np.testing.assert_allclose(off, -1.0 / 3.0, atol=1e-12)
    np.testing.assert_allclose(np.linalg.norm(a, axis=1), 1.0, atol=1e-12)


def test_degenerate_triangle_rejected():
    with pytest.raises(ValueError):
        TriangleMesh(np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0.0]]), np.array([[0, 1, 2]]))
    with pytest.raises(ValueError):
        TriangleMesh(np.zeros((3, 3)), np.array([[0, 1, 5]]))


def test_aabb_unit_cube_and_rotated_square():
    cube = box_mesh((0, 0, 0), (1, 1, 1))
    lo, hi = mesh_aabb(cube)
    np.testing.assert_array_equal(lo, [0, 0, 0])
    np.testing.assert_array_equal(hi, [1, 1, 1])
    assert cube.is_closed()
    sq = box_mesh((-0.5, -0.5, 0), (0.5, 0.5, 1))
    lo, hi = mesh_aabb(transform_mesh(sq, RigidTransform(rotation_z(math.pi / 4))))
    assert hi[0] - lo[0] == pytest.approx(math.sqrt(2), abs=1e-9)
    assert hi[1] - lo[1] == pytest.approx(math.sqrt(2), abs=1e-9)


def test_transform_identity_and_closedness(meshes):
    m = meshes[ObjectClass.REEF_CONE]
    assert transform_mesh(m, RigidTransform.identity()) == m
    t = RigidTransform(rotation_axis_angle((1, 2, 3), 0.7), (4, 5, 6))
    tm = transform_mesh(m, t)
    assert tm.is_closed() and len(tm.triangles) == len(m.triangles)


def test_downward_ray_hits_floor():
    floor = box_mesh((-0.5, -0.5, -1.0), (0.5, 0.5, 0.0))
    hit = ray_intersect(SpatialIndex(floor), Ray((0, 0, 10), (0, 0, -1)))
    assert hit is not None
    np.testing.assert_allclose(hit[0], [0, 0, 0], atol=1e-12)
    assert hit[1] == pytest.approx(10.0, abs=1e-12)


def test_parallel_ray_misses():
    floor = box_mesh((-0.5, -0.5, -1.0), (0.5, 0.5, 0.0))
    assert ray_intersect(SpatialIndex(floor), Ray((-5, 0, 1), (1, 0, 0))) is None


def test_ray_behind_origin_ignored():
    floor = box_mesh((-0.5, -0.5, -1.0), (0.5, 0.5, 0.0))
    assert ray_intersect(SpatialIndex(floor), Ray((0, 0, 10), (0, 0, 1))) is None


def test_ray_direction_normalized():
    r = Ray((0, 0, 0), (0, 0, -3))
    assert np.linalg.norm(r.direction) == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(ValueError):
        Ray((0, 0, 0), (0, 0, 0))


@pytest.mark.parametrize("cls", CLASS_ORDER)
def test_bvh_matches_brute_force_1000_rays(meshes, cls):
    m = meshes[cls]
    rng = np.random.default_rng(cls.index)
    o, d = random_rays(rng, 1000, np.zeros(3), 2.0)
    t_b, id_b = SpatialIndex(m).intersect(o, d)
    t_r, id_r = brute_force_intersect(m, o, d)
    assert np.array_equal(id_b, id_r)
    hit = np.isfinite(t_r)
    assert hit.sum() > 200
    assert np.array_equal(np.isfinite(t_b), hit)
    assert np.max(np.abs(t_b[hit] - t_r[hit])) <= 1e-9


def test_bvh_matches_brute_force_merged_scene():
    rng = np.random.default_rng(7)
    xs = np.linspace(0, 6, 13)
    z = 0.2 * rng.standard_normal((13, 13))
    parts = [heightfield_mesh(xs, xs, z)]
    for k, c in enumerate(CLASS_ORDER):
        parts.append(transform_mesh(make_mesh(c, 12), RigidTransform(rotation_z(k), (1 + 1.3 * k, 3, 1.2))))
    scene = merge_meshes(parts)
    o = np.column_stack([rng.uniform(0, 6, 600), rng.uniform(0, 6, 600), np.full(600, 10.0)])
    d = np.column_stack([rng.normal(0, 0.3, 600), rng.normal(0, 0.3, 600), -np.ones(600)])
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    t_b, id_b = SpatialIndex(scene).intersect(o, d)
    t_r, id_r = brute_force_intersect(scene, o, d)
    assert np.array_equal(id_b, id_r)
    ok = np.isfinite(t_r)
    assert np.max(np.abs(t_b[ok] - t_r[ok])) <= 1e-9


def test_empty_index():
    idx = SpatialIndex(TriangleMesh(np.empty((0, 3)), np.empty((0, 3), dtype=np.int64)))
    t, i = idx.intersect(np.zeros((2, 3)), np.tile([0, 0, -1.0], (2, 1)))
    assert np.all(np.isinf(t)) and np.all(i == -1)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), cls=st.sampled_from(CLASS_ORDER))
def test_transform_commutes_with_intersection(meshes, seed, cls):
    rng = np.random.default_rng(seed)
    m = meshes[cls]
    t = RigidTransform(rotation_axis_angle(rng.normal(size=3), rng.uniform(0, math.pi)), rng.uniform(-5, 5, 3))
    o, d = random_rays(rng, 20, np.asarray(t.translation), 2.0)
    t_world, _ = SpatialIndex(transform_mesh(m, t)).intersect(o, d)
    inv = t.inverse()
    o_loc = inv.apply(o)
    d_loc = d @ inv.rotation.T
    t_loc, _ = SpatialIndex(m).intersect(o_loc, d_loc)
    both = np.isfinite(t_world) & np.isfinite(t_loc)
    # hits agree except for rays grazing an edge within rounding
    assert np.mean(np.isfinite(t_world) == np.isfinite(t_loc)) >= 0.95
    p_world = o[both] + t_world[both, None] * d[both]
    p_back = t.apply(o_loc[both] + t_loc[both, None] * d_loc[both])
    assert np.all(np.abs(p_world - p_back) <= 1e-9)


def test_heightfield_mesh_grid():
    xs = np.array([0.0, 1.0, 2.0])
    z = np.array([[0, 1, 0], [1, 2, 1], [0, 1, 0.0]])
    hf = heightfield_mesh(xs, xs, z)
    assert len(hf.triangles) == 8
    t, _ = SpatialIndex(hf).intersect(np.array([[1.0, 1.0, 10.0]]), np.array([[0, 0, -1.0]]))
    assert t[0] == pytest.approx(8.0)


@pytest.mark.parametrize("suffix", [".stl", ".ply"])
def test_save_mesh(tmp_path, suffix):
    m = make_mesh("reef_ring", 8)
    p = tmp_path / f"ring{suffix}"
    save_mesh(m, p)
    text = p.read_text()
    if suffix == ".ply":
        assert f"element face {len(m.triangles)}" in text
        assert "np.float64" not in text
    else:
        assert text.count("facet normal") == len(m.triangles)
