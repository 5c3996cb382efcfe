"""Mesh construction, location, height/gradient queries, and file I/O."""

import io
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from meshnav.mesh import (
    DegenerateFaceError,
    EmptyMeshError,
    MeshFormatError,
    OffMeshError,
    TerrainSpec,
    TriangleMesh,
    generate_terrain,
    load_mesh,
    locate_face,
    save_obj,
    terrain_gradient,
    terrain_gradients,
    terrain_height,
    terrain_heights,
)
from conftest import grid_mesh_from_height


# ---------------------------------------------------------------------------
# terrain generation


class TestGenerateTerrain:
    def test_flat_plane_counts_and_heights(self):
        m = generate_terrain(
            TerrainSpec(kind="flat-plane", extent=(0, 1, 0, 1), resolution=3)
        )
        assert len(m.faces) == 8
        assert np.all(m.vertices[:, 2] == 0.0)

    def test_face_count_formula(self):
        for r in (2, 5, 17):
            m = generate_terrain(TerrainSpec(kind="flat-plane", resolution=r))
            assert len(m.faces) == 2 * (r - 1) ** 2

    def test_total_area_matches_extent(self, flat_mesh):
        assert np.isclose(flat_mesh.face_areas.sum(), 400.0, atol=1e-6)

    def test_inclined_normals(self, inclined_mesh):
        expect = np.array([-0.5, 0.0, 1.0]) / np.sqrt(1.25)
        assert np.allclose(inclined_mesh.face_normals, expect, atol=1e-9)

    def test_inclined_area(self, inclined_mesh):
        assert np.isclose(inclined_mesh.face_areas.sum(), 100.0 * np.sqrt(1.25))

    def test_sinusoidal_heights(self):
        spec = TerrainSpec(
            kind="sinusoidal", amplitude=0.7, wavelength=4.0, extent=(0, 8, 0, 8), resolution=17
        )
        m = generate_terrain(spec)
        expect = 0.7 * np.sin(2.0 * np.pi * m.vertices[:, 0] / 4.0)
        assert np.allclose(m.vertices[:, 2], expect, atol=1e-12)

    def test_fractal_determinism(self):
        spec = TerrainSpec(kind="fractal-noise", seed=42, resolution=21)
        a = generate_terrain(spec)
        b = generate_terrain(spec)
        assert np.array_equal(a.vertices, b.vertices)
        assert np.array_equal(a.faces, b.faces)
        c = generate_terrain(TerrainSpec(kind="fractal-noise", seed=43, resolution=21))
        assert not np.array_equal(a.vertices, c.vertices)

    def test_slope_is_additive(self):
        flat = generate_terrain(
            TerrainSpec(kind="sinusoidal", amplitude=0.5, resolution=11)
        )
        tilted = generate_terrain(
            TerrainSpec(kind="sinusoidal", amplitude=0.5, slope=0.3, resolution=11)
        )
        dz = tilted.vertices[:, 2] - flat.vertices[:, 2]
        assert np.allclose(dz, 0.3 * flat.vertices[:, 0], atol=1e-12)

    def test_bad_spec(self):
        with pytest.raises(ValueError):
            generate_terrain(TerrainSpec(kind="volcano"))
        with pytest.raises(ValueError):
            generate_terrain(TerrainSpec(resolution=1))

    def test_normals_unit_and_upward(self, fractal_mesh):
        n = fractal_mesh.face_normals
        assert np.allclose(np.linalg.norm(n, axis=1), 1.0, atol=1e-9)
        assert np.all(n[:, 2] >= 0.0)

    def test_stored_area_matches_recomputed(self, fractal_mesh):
        tri = fractal_mesh.vertices[fractal_mesh.faces]
        cross = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        area = 0.5 * np.linalg.norm(cross, axis=1)
        assert np.allclose(area, fractal_mesh.face_areas, rtol=1e-9)


# ---------------------------------------------------------------------------
# point location


class TestLocateFace:
    def test_interior_point(self, flat_mesh):
        fid = locate_face(flat_mesh, 3.3, 4.7)
        assert fid is not None
        tri = flat_mesh.vertices[flat_mesh.faces[fid]][:, :2]
        # barycentric containment check
        v0, v1 = tri[1] - tri[0], tri[2] - tri[0]
        den = v0[0] * v1[1] - v0[1] * v1[0]
        w = np.array([3.3, 4.7]) - tri[0]
        b1 = (w[0] * v1[1] - w[1] * v1[0]) / den
        b2 = (v0[0] * w[1] - v0[1] * w[0]) / den
        assert b1 >= -1e-9 and b2 >= -1e-9 and b1 + b2 <= 1 + 1e-9

    def test_off_mesh_returns_none(self, flat_mesh):
        assert locate_face(flat_mesh, -1.0, 5.0) is None
        assert locate_face(flat_mesh, 5.0, 25.0) is None

    def test_matches_brute_force(self, fractal_mesh):
        rng = np.random.default_rng(7)
        pts = rng.uniform(0.3, 19.7, size=(64, 2))
        fid, bary = fractal_mesh.locate_faces(pts)
        assert (fid >= 0).all()
        # brute force: same minimal-|gamma| rule over exhaustive containment
        tri = fractal_mesh.vertices[fractal_mesh.faces][:, :, :2]
        z0 = fractal_mesh.z0_default
        for p, f_got in zip(pts, fid):
            v0 = tri[:, 1] - tri[:, 0]
            v1 = tri[:, 2] - tri[:, 0]
            w = p - tri[:, 0]
            den = v0[:, 0] * v1[:, 1] - v0[:, 1] * v1[:, 0]
            b1 = (w[:, 0] * v1[:, 1] - w[:, 1] * v1[:, 0]) / den
            b2 = (v0[:, 0] * w[:, 1] - v0[:, 1] * w[:, 0]) / den
            inside = (b1 >= -1e-9) & (b2 >= -1e-9) & (b1 + b2 <= 1 + 1e-9)
            cands = np.flatnonzero(inside)
            n = fractal_mesh.face_normals[cands]
            c = fractal_mesh.face_centroids[cands]
            q = np.array([p[0], p[1], z0])
            gamma = np.abs(np.einsum("ij,ij->i", n, q[None, :] - c))
            best = cands[np.lexsort((cands, gamma))][0]
            assert f_got == best

    def test_bary_reconstructs_point(self, fractal_mesh):
        pts = np.array([[1.2, 3.4], [10.01, 9.99], [19.2, 0.4]])
        fid, bary = fractal_mesh.locate_faces(pts)
        tri = fractal_mesh.vertices[fractal_mesh.faces[fid]][:, :, :2]
        rec = np.einsum("pc,pcd->pd", bary, tri)
        assert np.allclose(rec, pts, atol=1e-9)
        assert np.allclose(bary.sum(axis=1), 1.0, atol=1e-9)

    def test_stacked_planes_pick_smaller_gamma(self):
        lo = generate_terrain(TerrainSpec(kind="flat-plane", extent=(0, 4, 0, 4), resolution=3))
        hi_v = lo.vertices.copy()
        hi_v[:, 2] = 5.0
        verts = np.vstack([lo.vertices, hi_v])
        faces = np.vstack([lo.faces, lo.faces + len(lo.vertices)])
        stacked = TriangleMesh(verts, faces)
        fid_low = stacked.locate_faces(np.array([[1.0, 1.0]]), z0=1.0)[0][0]
        assert stacked.face_centroids[fid_low][2] == 0.0
        fid_high = stacked.locate_faces(np.array([[1.0, 1.0]]), z0=4.5)[0][0]
        assert stacked.face_centroids[fid_high][2] == 5.0

    def test_edge_query_deterministic(self, flat_mesh):
        # point exactly on a shared grid edge: repeated queries agree
        p = np.array([[10.0, 10.25]])
        ids = {int(flat_mesh.locate_faces(p)[0][0]) for _ in range(5)}
        assert len(ids) == 1

    def test_vertex_query(self, flat_mesh):
        v = flat_mesh.vertices[137]
        fid, bary = flat_mesh.locate_faces(v[None, :2])
        assert fid[0] >= 0
        assert np.isclose(bary[0].max(), 1.0, atol=1e-9)


# ---------------------------------------------------------------------------
# heights


class TestTerrainHeight:
    def test_horizontal_plane_both_modes(self):
        m = grid_mesh_from_height(lambda x, y: np.full_like(x, 2.0))
        assert terrain_height(m, 4.1, 6.3) == pytest.approx(2.0, abs=1e-12)
        assert terrain_height(m, 4.1, 6.3, mode="normal-projection") == pytest.approx(
            2.0, abs=1e-12
        )

    def test_inclined_vertical_solve(self, inclined_mesh):
        assert terrain_height(inclined_mesh, 1.0, 5.0) == pytest.approx(0.5, abs=1e-12)
        assert terrain_height(inclined_mesh, 3.3, 4.7) == pytest.approx(1.65, abs=1e-12)

    def test_inclined_normal_projection_hand_value(self, inclined_mesh):
        # gamma = (-0.5*1 + 10)/sqrt(1.25); proj_z = 10 - gamma/sqrt(1.25) = 2.4
        h = terrain_height(inclined_mesh, 1.0, 5.0, mode="normal-projection", z0=10.0)
        assert h == pytest.approx(2.4, abs=1e-9)

    def test_off_mesh_none(self, inclined_mesh):
        assert terrain_height(inclined_mesh, -3.0, 5.0) is None

    def test_vertex_height_recovery(self, inclined_mesh):
        # incident faces of any inclined-plane vertex are coplanar
        for vid in (0, 57, 220):
            x, y, z = inclined_mesh.vertices[vid]
            assert terrain_height(inclined_mesh, x, y) == pytest.approx(z, abs=1e-9)

    def test_translation_equivariance(self, fractal_mesh):
        d = np.array([3.0, -2.0, 1.5])
        shifted = TriangleMesh(fractal_mesh.vertices + d, fractal_mesh.faces.copy())
        for p in [(4.4, 7.7), (12.0, 3.1)]:
            h0 = terrain_height(fractal_mesh, *p)
            h1 = terrain_height(shifted, p[0] + d[0], p[1] + d[1])
            assert h1 == pytest.approx(h0 + d[2], abs=1e-9)

    def test_batch_matches_scalar(self, fractal_mesh):
        pts = np.array([[2.2, 3.3], [15.5, 8.8], [-1.0, 2.0]])
        h, fid = terrain_heights(fractal_mesh, pts)
        assert h[0] == pytest.approx(terrain_height(fractal_mesh, 2.2, 3.3))
        assert h[1] == pytest.approx(terrain_height(fractal_mesh, 15.5, 8.8))
        assert np.isnan(h[2]) and fid[2] == -1

    def test_vertical_face_error(self):
        # a towering cliff face: footprint is real but n_z ~ 1e-11
        verts = np.array([[0.0, 0.0, 0.0], [10.0, 0.0, 0.0], [5.0, 1.0, 1e11]])
        m = TriangleMesh(verts, np.array([[0, 1, 2]]))
        assert abs(m.face_normals[0, 2]) < 1e-9
        with pytest.raises(DegenerateFaceError):
            terrain_height(m, 5.0, 0.3)
        # batch path reports NaN instead of raising
        h = m.heights_on_faces(np.array([0]), np.array([[5.0, 0.3]]))
        assert np.isnan(h[0])

    def test_bad_mode(self, flat_mesh):
        with pytest.raises(ValueError):
            terrain_height(flat_mesh, 1.0, 1.0, mode="sideways")


# ---------------------------------------------------------------------------
# gradients


class TestTerrainGradient:
    def test_flat_zero(self, flat_mesh):
        g = terrain_gradient(flat_mesh, 9.0, 9.0)
        assert g == pytest.approx((0.0, 0.0), abs=1e-12)

    def test_linear_plane_exact(self):
        m = grid_mesh_from_height(lambda x, y: 0.5 * x + 0.2 * y)
        gx, gy = terrain_gradient(m, 4.3, 5.1)
        assert gx == pytest.approx(0.5, abs=1e-9)
        assert gy == pytest.approx(0.2, abs=1e-9)

    def test_sinusoid_against_analytic(self):
        m = grid_mesh_from_height(
            lambda x, y: np.sin(x), extent=(-3.2, 3.2, -3.2, 3.2), resolution=165
        )
        gx, gy = terrain_gradient(m, 0.0, 0.0, step=0.01)
        assert gx == pytest.approx(1.0, abs=1e-3)
        assert gy == pytest.approx(0.0, abs=1e-9)

    def test_off_mesh_stencil_raises_with_point(self, flat_mesh):
        with pytest.raises(OffMeshError) as err:
            terrain_gradient(flat_mesh, 0.01, 10.0, step=0.05)
        assert "-0.04" in str(err.value)

    def test_batch_flags(self, flat_mesh):
        g, ok = terrain_gradients(flat_mesh, np.array([[5.0, 5.0], [0.01, 10.0]]))
        assert ok.tolist() == [True, False]
        assert np.allclose(g[0], 0.0)


# ---------------------------------------------------------------------------
# file I/O


class TestIO:
    def test_obj_roundtrip(self, tmp_path, fractal_mesh):
        p = tmp_path / "terrain.obj"
        save_obj(fractal_mesh, p)
        back = load_mesh(p)
        assert np.allclose(back.vertices, fractal_mesh.vertices, atol=1e-6)
        assert np.array_equal(back.faces, fractal_mesh.faces)

    def test_single_triangle_and_orientation(self, tmp_path):
        p = tmp_path / "tri.obj"
        p.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n")
        m = load_mesh(p)
        assert len(m.faces) == 1
        assert np.allclose(m.face_normals[0], [0, 0, 1])
        # reversed winding still yields an upward normal
        p.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 3 2\n")
        m2 = load_mesh(p)
        assert np.allclose(m2.face_normals[0], [0, 0, 1])

    def test_obj_quad_fan_and_negative_indices(self, tmp_path):
        p = tmp_path / "quad.obj"
        p.write_text(
            "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\nf -4 -3 -2\n"
        )
        m = load_mesh(p)
        assert len(m.faces) == 3

    def test_obj_parse_error_has_line(self, tmp_path):
        p = tmp_path / "bad.obj"
        p.write_text("v 0 0 0\nv 1 0 0\nf 1 2 seven\n")
        with pytest.raises(MeshFormatError) as err:
            load_mesh(p)
        assert ":3:" in str(err.value)

    def test_empty_mesh_error(self, tmp_path):
        p = tmp_path / "empty.obj"
        p.write_text("# nothing here\n")
        with pytest.raises(EmptyMeshError):
            load_mesh(p)

    def test_degenerate_face_dropped_with_warning(self, tmp_path):
        p = tmp_path / "degen.obj"
        p.write_text(
            "v 0 0 0\nv 1 0 0\nv 0 1 0\nv 2 0 0\nf 1 2 3\nf 1 2 4\n"  # second face collinear
        )
        with pytest.warns(UserWarning, match="degenerate"):
            m = load_mesh(p)
        assert len(m.faces) == 1

    def test_ply_ascii(self, tmp_path):
        mesh = generate_terrain(
            TerrainSpec(kind="flat-plane", extent=(0, 10, 0, 10), resolution=11)
        )
        p = tmp_path / "grid.ply"
        with open(p, "w") as fh:
            fh.write("ply\nformat ascii 1.0\n")
            fh.write(f"element vertex {len(mesh.vertices)}\n")
            fh.write("property float x\nproperty float y\nproperty float z\n")
            fh.write(f"element face {len(mesh.faces)}\n")
            fh.write("property list uchar int vertex_indices\nend_header\n")
            for v in mesh.vertices:
                fh.write(f"{v[0]} {v[1]} {v[2]}\n")
            for f in mesh.faces:
                fh.write(f"3 {f[0]} {f[1]} {f[2]}\n")
        back = load_mesh(p)
        assert len(back.faces) == 200
        assert np.isclose(back.face_areas.sum(), 100.0, atol=1e-6)

    def test_ply_binary_le(self, tmp_path):
        verts = [(0, 0, 0), (1, 0, 0), (0, 1, 0)]
        p = tmp_path / "tri.ply"
        with open(p, "wb") as fh:
            fh.write(
                b"ply\nformat binary_little_endian 1.0\n"
                b"element vertex 3\n"
                b"property float x\nproperty float y\nproperty float z\n"
                b"element face 1\n"
                b"property list uchar int vertex_indices\nend_header\n"
            )
            for v in verts:
                fh.write(struct.pack("<3f", *v))
            fh.write(struct.pack("<B3i", 3, 0, 1, 2))
        m = load_mesh(p)
        assert len(m.faces) == 1
        assert np.allclose(m.face_normals[0], [0, 0, 1])

    def test_unknown_extension(self, tmp_path):
        p = tmp_path / "mesh.stl"
        p.write_text("solid nope\n")
        with pytest.raises(MeshFormatError):
            load_mesh(p)


# ---------------------------------------------------------------------------
# adjacency sanity


class TestAdjacency:
    def test_interior_vertex_ring(self, flat_mesh):
        interior = np.flatnonzero(~flat_mesh.boundary_vertex)
        v = interior[len(interior) // 2]
        assert len(flat_mesh.vertex_faces(v)) == 6
        assert len(flat_mesh.vertex_neighbors(v)) == 6

    def test_face_across_edge(self, flat_mesh):
        f = 41
        a, b, c = flat_mesh.faces[f]
        g = flat_mesh.face_across_edge(f, a, b)
        if g >= 0:
            shared = set([a, b]) & set(flat_mesh.faces[g])
            assert shared == {a, b}

    def test_boundary_flags(self, flat_mesh):
        xy = flat_mesh.vertices[:, :2]
        on_rim = (
            np.isclose(xy[:, 0], 0) | np.isclose(xy[:, 0], 20)
            | np.isclose(xy[:, 1], 0) | np.isclose(xy[:, 1], 20)
        )
        assert np.array_equal(flat_mesh.boundary_vertex, on_rim)


# ---------------------------------------------------------------------------
# properties


@settings(max_examples=30, deadline=None)
@given(
    x=st.floats(0.5, 19.5),
    y=st.floats(0.5, 19.5),
)
def test_height_is_barycentric_z(fractal_mesh, x, y):
    mesh = fractal_mesh
    fid, bary = mesh.locate_faces(np.array([[x, y]]))
    assert fid[0] >= 0
    z_bary = float(bary[0] @ mesh.vertices[mesh.faces[fid[0]], 2])
    assert terrain_height(mesh, x, y) == pytest.approx(z_bary, abs=1e-9)


@settings(max_examples=20, deadline=None)
@given(
    sx=st.floats(-0.8, 0.8),
    sy=st.floats(-0.8, 0.8),
    x=st.floats(1.0, 9.0),
    y=st.floats(1.0, 9.0),
)
def test_gradient_exact_on_affine(sx, sy, x, y):
    m = grid_mesh_from_height(lambda X, Y: sx * X + sy * Y, resolution=11)
    gx, gy = terrain_gradient(m, x, y)
    assert gx == pytest.approx(sx, abs=1e-9)
    assert gy == pytest.approx(sy, abs=1e-9)
