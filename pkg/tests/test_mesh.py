"""Mesh construction, validation, geometry queries, and extraction."""

import numpy as np
import pytest

from slabflow.mesh import (
    INLET,
    OUTER,
    T_BEGIN,
    T_END,
    MeshError,
    build_slab_mesh,
    contour_polylines,
    directional_extent,
    extract_isosurface,
    extract_time_face,
    locate_and_interpolate,
    mirror_in_time,
    signed_volumes,
    steiner_ellipsoid,
    steiner_extents,
    validate_mesh,
)

ANNULUS_AREA = 13.0 / 2.0 * np.sin(2.0 * np.pi / 13.0) * (1.0 - 0.01)


@pytest.fixture(scope="module")
def slab():
    return build_slab_mesh(0.1, 0.0, 0.1)


def test_volume_matches_polygon_annulus(slab):
    vols = signed_volumes(slab.nodes, slab.tets)
    assert abs(vols.sum() - ANNULUS_AREA * 0.1) < 1e-10


def test_single_layer_extrusion():
    mesh = build_slab_mesh(0.5, 0.0, 0.1)
    # one layer: every node sits on one of the two time planes
    assert set(np.round(mesh.nodes[:, 2], 12)) == {0.0, 0.1}
    assert (signed_volumes(mesh.nodes, mesh.tets) > 0).all()


def test_layer_count_rule():
    mesh = build_slab_mesh(0.1, 0.0, 0.5)
    levels = np.unique(np.round(mesh.nodes[:, 2], 9))
    assert len(levels) == max(1, round(0.5 / 0.1)) + 1


def test_fresh_mesh_validates_clean(slab):
    report = validate_mesh(slab)
    assert report.total == 0 and report.clean


def test_swapped_tet_reports_inversion(slab):
    bad = slab.copy()
    bad.tets[0] = bad.tets[0][[1, 0, 2, 3]]
    bad.invalidate()
    assert validate_mesh(bad).inverted_tets == 1


def test_deleted_tet_reports_four_face_defects(slab):
    # find an interior tet: none of its faces on the boundary
    bfaces, _ = slab.boundary_facets()
    bset = {tuple(sorted(f)) for f in bfaces}
    for k in range(slab.n_tets):
        t = slab.tets[k]
        faces = [tuple(sorted(np.delete(t, i))) for i in range(4)]
        if not any(f in bset for f in faces):
            break
    bad = slab.copy()
    bad.tets = np.delete(bad.tets, k, axis=0)
    bad.invalidate()
    rep = validate_mesh(bad)
    assert rep.nonconforming_faces + rep.untagged_boundary_faces == 4


def test_boundary_tags_cover_all_faces(slab):
    bfaces, tags = slab.boundary_facets()
    assert set(tags) == {INLET, OUTER, T_BEGIN, T_END}
    for f, tag in zip(bfaces, tags):
        t = slab.nodes[f][:, 2]
        if tag == T_BEGIN:
            assert np.allclose(t, 0.0, atol=1e-12)
        elif tag == T_END:
            assert np.allclose(t, 0.1, atol=1e-12)
        else:
            r = np.hypot(*slab.nodes[f][:, :2].T)
            lim = (0.1 * np.cos(np.pi / 13.0), 0.1) if tag == INLET else (
                np.cos(np.pi / 13.0), 1.0)
            assert (r >= lim[0] - 1e-9).all() and (r <= lim[1] + 1e-9).all()


# -- Steiner ellipsoid -----------------------------------------------------


def _regular_tet(circumradius=1.0):
    v = np.array(
        [[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=float
    ) / np.sqrt(3.0)
    return v * circumradius


def test_steiner_regular_tet_is_unit_sphere():
    ell = steiner_ellipsoid(_regular_tet(1.0))
    assert np.allclose(ell.center, 0.0, atol=1e-14)
    assert np.allclose(ell.shape, np.eye(3), atol=1e-12)


def test_steiner_vertices_on_boundary():
    verts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], dtype=float)
    ell = steiner_ellipsoid(verts)
    Einv = np.linalg.inv(ell.shape)
    for x in verts:
        d = x - ell.center
        assert abs(d @ Einv @ d - 1.0) < 1e-10


def test_steiner_affine_equivariance():
    rng = np.random.default_rng(3)
    A = rng.normal(size=(3, 3)) + 2 * np.eye(3)
    base = _regular_tet()
    ell0 = steiner_ellipsoid(base)
    ell1 = steiner_ellipsoid(base @ A.T)
    assert np.allclose(ell1.shape, A @ ell0.shape @ A.T, atol=1e-10)


def test_steiner_random_tets_circumscribe():
    rng = np.random.default_rng(11)
    for _ in range(50):
        verts = rng.normal(size=(4, 3))
        if abs(signed_volumes(verts, np.array([[0, 1, 2, 3]]))[0]) < 1e-3:
            continue
        ell = steiner_ellipsoid(verts)
        Einv = np.linalg.inv(ell.shape)
        d = verts - ell.center
        assert np.allclose(np.einsum("ki,ij,kj->k", d, Einv, d), 1.0, atol=1e-9)
        mids = 0.5 * (verts[[0, 0, 0, 1, 1, 2]] + verts[[1, 2, 3, 2, 3, 3]])
        dm = mids - ell.center
        assert (np.einsum("ki,ij,kj->k", dm, Einv, dm) < 1.0 - 1e-12).all()


def test_degenerate_tet_raises():
    flat = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]], dtype=float)
    with pytest.raises(MeshError):
        steiner_ellipsoid(flat)


def test_directional_extent_values():
    class Sphere:
        center = np.zeros(3)
        shape = np.eye(3)

    assert abs(directional_extent(Sphere(), [0.3, -2.0, 1.0]) - 2.0) < 1e-14

    class Diag:
        center = np.zeros(3)
        shape = np.diag([4.0, 1.0, 1.0])

    assert abs(directional_extent(Diag(), [1, 0, 0]) - 4.0) < 1e-14
    assert abs(directional_extent(Diag(), [1, 1, 0]) - 2 * np.sqrt(2.5)) < 1e-12
    with pytest.raises(ValueError):
        directional_extent(Diag(), [0, 0, 0])


def test_steiner_extents_matches_scalar(slab):
    rng = np.random.default_rng(5)
    dirs = rng.normal(size=(slab.n_tets, 3))
    widths = steiner_extents(slab.nodes, slab.tets, dirs)
    for k in rng.integers(0, slab.n_tets, size=10):
        ell = steiner_ellipsoid(slab.nodes[slab.tets[k]])
        assert abs(widths[k] - directional_extent(ell, dirs[k])) < 1e-12


# -- location and interpolation --------------------------------------------


def test_interpolate_at_nodes_exact(slab):
    vals = np.sin(slab.nodes[:, 0] * 5)
    out = locate_and_interpolate(slab, vals, slab.nodes)
    assert np.allclose(out, vals, atol=1e-12)


def test_interpolate_linear_exact(slab):
    vals = slab.nodes[:, 0] + 2 * slab.nodes[:, 1] - slab.nodes[:, 2]
    rng = np.random.default_rng(7)
    w = rng.dirichlet(np.ones(4), size=40)
    pts = np.einsum("qk,qkd->qd", w, slab.nodes[slab.tets[rng.integers(0, slab.n_tets, 40)]])
    out = locate_and_interpolate(slab, vals, pts)
    assert np.allclose(out, pts[:, 0] + 2 * pts[:, 1] - pts[:, 2], atol=1e-12)


def test_interpolate_linear_across_resolutions():
    coarse = build_slab_mesh(0.2, 0.0, 0.1)
    fine = build_slab_mesh(0.1, 0.0, 0.1)

    def f(n):
        return 3 * n[:, 0] - n[:, 1] + 0.5 * n[:, 2]

    rng = np.random.default_rng(9)
    w = rng.dirichlet(np.ones(4), size=30)
    pts = np.einsum("qk,qkd->qd", w, fine.nodes[fine.tets[rng.integers(0, fine.n_tets, 30)]])
    a = locate_and_interpolate(coarse, f(coarse.nodes), pts)
    b = locate_and_interpolate(fine, f(fine.nodes), pts)
    assert np.allclose(a, b, atol=1e-10)


def test_far_outside_point_raises(slab):
    with pytest.raises(MeshError):
        locate_and_interpolate(slab, slab.nodes[:, 0], np.array([[3.0, 0.0, 0.05]]))


# -- mirroring -------------------------------------------------------------


def test_mirror_involution(slab):
    once = mirror_in_time(slab, 0.1)
    # reflecting about the same plane again (now the T_BEGIN face) undoes it
    twice = mirror_in_time(once, 0.1)
    assert np.allclose(twice.nodes, slab.nodes, atol=0)
    assert np.array_equal(np.sort(twice.tets, axis=1), np.sort(slab.tets, axis=1))


def test_mirror_validates_clean(slab):
    assert validate_mesh(mirror_in_time(slab, 0.1)).total == 0


def test_mirror_face_transfer(slab):
    mirrored = mirror_in_time(slab, 0.1)
    old_end = set(slab.time_face_nodes(T_END))
    new_begin = set(mirrored.time_face_nodes(T_BEGIN))
    assert old_end == new_begin
    assert np.allclose(mirrored.nodes[list(new_begin), 2], 0.1, atol=1e-14)
    assert abs(mirrored.time_face_value(T_END) - 0.2) < 1e-12
    # node-for-node identical coordinates on the matching face
    ids = sorted(old_end)
    assert np.array_equal(mirrored.nodes[ids, :2], slab.nodes[ids, :2])


def test_mirror_wrong_plane_raises(slab):
    with pytest.raises(MeshError):
        mirror_in_time(slab, 0.07)


# -- extraction ------------------------------------------------------------


def test_isosurface_midslab_plane_area(slab):
    verts, tris = extract_isosurface(slab, slab.nodes[:, 2], 0.05)
    v = verts[tris]
    areas = 0.5 * np.linalg.norm(
        np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1
    )
    assert abs(areas.sum() - ANNULUS_AREA) < 1e-8
    assert np.allclose(verts[:, 2], 0.05, atol=1e-9)


def test_isosurface_empty_below_min(slab):
    verts, tris = extract_isosurface(slab, slab.nodes[:, 2], -1.0)
    assert len(verts) == 0 and len(tris) == 0


def test_isosurface_single_tet_one_triangle():
    from slabflow.mesh import SimplexMesh

    nodes = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], dtype=float)
    mesh = SimplexMesh(
        nodes, np.array([[0, 1, 2, 3]]), [frozenset()] * 4, np.zeros(4, bool), {}
    )
    verts, tris = extract_isosurface(mesh, np.array([1.0, 0.0, 0.0, 0.0]), 0.5)
    assert len(tris) == 1


def test_time_face_slice(slab):
    r = np.hypot(slab.nodes[:, 0], slab.nodes[:, 1])
    sl = extract_time_face(slab, {"r": r}, T_END)
    rr = np.hypot(sl.points[:, 0], sl.points[:, 1])
    assert np.allclose(sl.fields["r"], rr, atol=1e-14)
    v = sl.points[sl.triangles]
    areas = 0.5 * (
        (v[:, 1, 0] - v[:, 0, 0]) * (v[:, 2, 1] - v[:, 0, 1])
        - (v[:, 1, 1] - v[:, 0, 1]) * (v[:, 2, 0] - v[:, 0, 0])
    )
    assert (areas > 0).all()  # CCW orientation
    assert abs(areas.sum() - ANNULUS_AREA) < 1e-8


def test_contour_closed_loop_and_crossing_exactness(slab):
    r = np.hypot(slab.nodes[:, 0], slab.nodes[:, 1])
    sl = extract_time_face(slab, {"r": r}, T_END)
    lines = contour_polylines(sl, sl.fields["r"], 0.5)
    assert len(lines) >= 1
    total = sum(len(l) for l in lines)
    closed = [l for l in lines if np.allclose(l[0], l[-1])]
    assert sum(len(l) for l in closed) > 0.9 * total
    for line in lines:
        # each vertex crosses the P1 interpolant of r exactly, so its radius
        # deviates from 0.5 only by the O(h^2) interpolation error of r
        rv = np.hypot(line[:, 0], line[:, 1])
        assert np.abs(rv - 0.5).max() < 2.0 * 0.1**2
