"""Triangle-mesh terrain: construction, IO, point location, height/gradient queries.

Conventions: vertices are float64 (V, 3); faces are int (F, 3) with CCW winding
when viewed from +z for generated terrain, so face normals point upward.
Heights are surface queries at a planar (x, y); the surface is assumed to be a
heightfield (one face per vertical line) except where noted — stacked geometry
is disambiguated by the reference-height projection rule in `locate_face`.
"""
from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

_AREA_EPS = 1e-12
_BARY_TOL = 1e-9
_VERTICAL_NZ = 1e-9


class MeshError(Exception):
    pass


class MeshFormatError(MeshError):
    """Unparseable mesh file (message carries the offending line)."""


class EmptyMeshError(MeshError):
    pass


class OffMeshError(MeshError):
    """Query point does not project onto any face."""


class DegenerateFaceError(MeshError):
    """Vertical-solve height query hit a (near-)vertical face."""


# ---------------------------------------------------------------------------
# terrain generation spec


@dataclass(frozen=True)
class TerrainSpec:
    """Parameters for procedurally generated terrain grids.

    kind: one of "flat-plane", "inclined-plane", "sinusoidal", "fractal-noise".
    extent: (x_min, x_max, y_min, y_max) in meters.
    resolution: vertices per axis (>= 2); the grid has 2*(resolution-1)^2 faces.
    slope: dz/dx applied additively for every kind (it *is* the inclined-plane
        parameter; nonzero on other kinds composes a tilted base).
    amplitude: vertical scale for sinusoidal / fractal kinds.
    wavelength: sinusoid period along x; also the base lattice size of the
        fractal value noise.
    octaves, seed: fractal-noise parameters; generation is bit-deterministic
        for a fixed spec on any platform (integer-hash lattice noise).
    """

    kind: str = "flat-plane"
    extent: tuple = (0.0, 20.0, 0.0, 20.0)
    resolution: int = 41
    slope: float = 0.0
    amplitude: float = 1.0
    wavelength: float = 5.0
    octaves: int = 4
    seed: int = 0


_KINDS = ("flat-plane", "inclined-plane", "sinusoidal", "fractal-noise")


def _hash01(ix, iy, seed):
    """Deterministic integer-hash lattice noise in [0, 1); wraps mod 2^64."""
    seed_mix = ((seed & 0xFFFFFFFF) * 0x165667B19E3779F9) & 0xFFFFFFFFFFFFFFFF
    with np.errstate(over="ignore"):
        h = (
            ix.astype(np.uint64) * np.uint64(0x9E3779B97F4A7C15)
            + iy.astype(np.uint64) * np.uint64(0xC2B2AE3D27D4EB4F)
            + np.uint64(seed_mix)
        )
        h ^= h >> np.uint64(30)
        h *= np.uint64(0xBF58476D1CE4E5B9)
        h ^= h >> np.uint64(27)
        h *= np.uint64(0x94D049BB133111EB)
        h ^= h >> np.uint64(31)
    return (h >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def _value_noise(x, y, seed):
    ix0 = np.floor(x).astype(np.int64)
    iy0 = np.floor(y).astype(np.int64)
    fx = x - ix0
    fy = y - iy0
    # smoothstep fade
    ux = fx * fx * (3.0 - 2.0 * fx)
    uy = fy * fy * (3.0 - 2.0 * fy)
    n00 = _hash01(ix0, iy0, seed)
    n10 = _hash01(ix0 + 1, iy0, seed)
    n01 = _hash01(ix0, iy0 + 1, seed)
    n11 = _hash01(ix0 + 1, iy0 + 1, seed)
    nx0 = n00 + ux * (n10 - n00)
    nx1 = n01 + ux * (n11 - n01)
    return 2.0 * (nx0 + uy * (nx1 - nx0)) - 1.0  # [-1, 1]


def fbm(x, y, seed=0, octaves=4, lacunarity=2.0, persistence=0.5, base_wavelength=5.0):
    """Fractal value noise, roughly in [-1, 1], deterministic in (seed, coords)."""
    x = np.asarray(x, dtype=float) / base_wavelength
    y = np.asarray(y, dtype=float) / base_wavelength
    total = np.zeros_like(x)
    amp, freq, norm = 1.0, 1.0, 0.0
    for o in range(octaves):
        total += amp * _value_noise(x * freq, y * freq, seed + o * 101)
        norm += amp
        amp *= persistence
        freq *= lacunarity
    return total / norm


# ---------------------------------------------------------------------------
# mesh


class TriangleMesh:
    """Immutable triangle mesh with precomputed adjacency and query accelerators.

    Degenerate faces (area <= 1e-12) are dropped at construction with a
    warning carrying the drop count. All derived arrays are read-only views;
    the object is safe to share across threads after construction.
    """

    def __init__(self, vertices, faces):
        vertices = np.ascontiguousarray(vertices, dtype=np.float64)
        faces = np.ascontiguousarray(faces, dtype=np.int64)
        if vertices.ndim != 2 or vertices.shape[1] != 3:
            raise MeshFormatError(f"vertices must be (V, 3), got {vertices.shape}")
        if faces.size == 0 or vertices.size == 0:
            raise EmptyMeshError("mesh has no faces or no vertices")
        if faces.ndim != 2 or faces.shape[1] != 3:
            raise MeshFormatError(f"faces must be (F, 3), got {faces.shape}")
        if faces.min() < 0 or faces.max() >= len(vertices):
            raise MeshFormatError("face index out of range")

        cross = np.cross(
            vertices[faces[:, 1]] - vertices[faces[:, 0]],
            vertices[faces[:, 2]] - vertices[faces[:, 0]],
        )
        norms = np.linalg.norm(cross, axis=1)
        keep = norms > 2.0 * _AREA_EPS
        dropped = int((~keep).sum())
        if dropped:
            warnings.warn(f"dropped {dropped} degenerate face(s)", stacklevel=2)
            faces, cross, norms = faces[keep], cross[keep], norms[keep]
        if len(faces) == 0:
            raise EmptyMeshError("all faces degenerate")

        # orientation normalization: all faces wind so the normal points up
        down = cross[:, 2] < 0.0
        if down.any():
            faces = faces.copy()
            faces[down] = faces[down][:, [0, 2, 1]]
            cross[down] *= -1.0

        self.vertices = vertices
        self.faces = faces
        self.face_normals = cross / norms[:, None]
        self.face_areas = 0.5 * norms
        self.face_centroids = vertices[faces].mean(axis=1)
        self.z_max = float(vertices[:, 2].max())
        self.z0_default = self.z_max + 1.0

        self._build_adjacency()
        self._build_grid()
        self.centroid_tree = cKDTree(self.face_centroids)
        self.vertex_tree = cKDTree(self.vertices)

    # -- adjacency ----------------------------------------------------------

    def _build_adjacency(self):
        V, F = len(self.vertices), len(self.faces)
        # vertex -> incident faces (CSR)
        flat = self.faces.ravel()
        order = np.argsort(flat, kind="stable")
        counts = np.bincount(flat, minlength=V)
        self.vf_ptr = np.concatenate(([0], np.cumsum(counts)))
        self.vf_idx = order // 3

        # undirected edges with incident faces
        e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        e_sorted = np.sort(e, axis=1)
        key = e_sorted[:, 0] * V + e_sorted[:, 1]
        face_of_edge = np.tile(np.arange(F), 3)
        uniq, inv, cnt = np.unique(key, return_inverse=True, return_counts=True)
        self.edge_key = uniq
        self.edge_faces = np.full((len(uniq), 2), -1, dtype=np.int64)
        order1 = np.argsort(inv, kind="stable")
        inv_s, fo_s = inv[order1], face_of_edge[order1]
        grp_start = np.flatnonzero(np.concatenate(([True], inv_s[1:] != inv_s[:-1])))
        grp_len = np.diff(np.concatenate((grp_start, [len(inv_s)])))
        within = np.arange(len(inv_s)) - np.repeat(grp_start, grp_len)
        take = within < 2  # non-manifold extras beyond two faces are ignored
        self.edge_faces[inv_s[take], within[take]] = fo_s[take]
        self.boundary_edge = cnt == 1
        bverts = np.unique(
            np.stack([self.edge_key[self.boundary_edge] // V, self.edge_key[self.boundary_edge] % V])
        )
        self.boundary_vertex = np.zeros(V, dtype=bool)
        self.boundary_vertex[bverts] = True

        # vertex -> neighbor vertices (CSR over unique undirected edges)
        u, w = uniq // V, uniq % V
        both = np.concatenate([np.stack([u, w], 1), np.stack([w, u], 1)])
        order2 = np.argsort(both[:, 0], kind="stable")
        both = both[order2]
        counts2 = np.bincount(both[:, 0], minlength=V)
        self.vv_ptr = np.concatenate(([0], np.cumsum(counts2)))
        self.vv_idx = both[:, 1]

    def vertex_faces(self, v):
        return self.vf_idx[self.vf_ptr[v]:self.vf_ptr[v + 1]]

    def vertex_neighbors(self, v):
        return self.vv_idx[self.vv_ptr[v]:self.vv_ptr[v + 1]]

    def face_across_edge(self, f, a, b):
        """Face sharing edge (a, b) with f, or -1."""
        V = len(self.vertices)
        k = min(a, b) * V + max(a, b)
        i = np.searchsorted(self.edge_key, k)
        if i >= len(self.edge_key) or self.edge_key[i] != k:
            return -1
        fa, fb = self.edge_faces[i]
        return int(fb if fa == f else fa)

    # -- uniform grid over xy footprints -------------------------------------

    def _build_grid(self):
        tri = self.vertices[self.faces][:, :, :2]
        lo = tri.min(axis=1)
        hi = tri.max(axis=1)
        diam = np.linalg.norm(hi - lo, axis=1)
        cell = float(diam.mean())
        if not cell > 0:
            cell = 1.0
        self._grid_org = lo.min(axis=0)
        span = hi.max(axis=0) - self._grid_org
        nx = min(1024, max(1, int(np.ceil(span[0] / cell))))
        ny = min(1024, max(1, int(np.ceil(span[1] / cell))))
        self._grid_cell = np.array([span[0] / nx, span[1] / ny])
        self._grid_cell[self._grid_cell <= 0] = 1.0
        self._grid_dims = (nx, ny)

        c0 = np.clip(((lo - self._grid_org) / self._grid_cell).astype(int), 0, [nx - 1, ny - 1])
        c1 = np.clip(((hi - self._grid_org) / self._grid_cell).astype(int), 0, [nx - 1, ny - 1])
        spans_x = c1[:, 0] - c0[:, 0] + 1
        spans_y = c1[:, 1] - c0[:, 1] + 1
        total = spans_x * spans_y
        fidx = np.repeat(np.arange(len(self.faces)), total)
        # enumerate covered cells per face
        offs = np.arange(int(total.sum())) - np.repeat(np.cumsum(total) - total, total)
        sx = np.repeat(spans_x, total)
        dx = offs % sx
        dy = offs // sx
        cx = np.repeat(c0[:, 0], total) + dx
        cy = np.repeat(c0[:, 1], total) + dy
        cid = cx * ny + cy
        order = np.argsort(cid, kind="stable")
        cid, fidx = cid[order], fidx[order]
        cnt = np.bincount(cid, minlength=nx * ny)
        self._cell_ptr = np.concatenate(([0], np.cumsum(cnt)))
        self._cell_faces = fidx

    # -- queries --------------------------------------------------------------

    def _candidate_pairs(self, xy):
        """(point_idx, face_idx) pairs of grid candidates for each query point."""
        nx, ny = self._grid_dims
        c = np.floor((xy - self._grid_org) / self._grid_cell).astype(np.int64)
        inside = (c[:, 0] >= 0) & (c[:, 0] < nx) & (c[:, 1] >= 0) & (c[:, 1] < ny)
        cid = np.where(inside, c[:, 0] * ny + c[:, 1], 0)
        start = self._cell_ptr[cid]
        length = np.where(inside, self._cell_ptr[cid + 1] - start, 0)
        pt = np.repeat(np.arange(len(xy)), length)
        offs = np.arange(int(length.sum())) - np.repeat(np.cumsum(length) - length, length)
        fc = self._cell_faces[np.repeat(start, length) + offs]
        return pt, fc

    def locate_faces(self, xy, z0=None):
        """Vectorized point location.

        Parameters
        ----------
        xy : (P, 2) array of planar query coordinates.
        z0 : optional reference height for the projection tie-break; defaults
            to ``z_max + 1``.

        Returns
        -------
        fid : (P,) int array, -1 where the point is outside every footprint.
        bary : (P, 3) planar barycentric coordinates within the chosen face.

        Among all faces whose xy footprint contains the point, the face
        minimizing the absolute normal-projection offset |gamma| from
        (x, y, z0) is chosen; exact ties go to the lowest face index.
        """
        xy = np.atleast_2d(np.asarray(xy, dtype=float))
        P = len(xy)
        z0 = self.z0_default if z0 is None else float(z0)
        fid = np.full(P, -1, dtype=np.int64)
        bary = np.zeros((P, 3))
        pt, fc = self._candidate_pairs(xy)
        if len(pt) == 0:
            return fid, bary

        tri = self.vertices[self.faces[fc]][:, :, :2]
        v0 = tri[:, 1] - tri[:, 0]
        v1 = tri[:, 2] - tri[:, 0]
        vq = xy[pt] - tri[:, 0]
        den = v0[:, 0] * v1[:, 1] - v0[:, 1] * v1[:, 0]
        den_safe = np.where(np.abs(den) > _AREA_EPS, den, 1.0)
        l1 = (vq[:, 0] * v1[:, 1] - vq[:, 1] * v1[:, 0]) / den_safe
        l2 = (v0[:, 0] * vq[:, 1] - v0[:, 1] * vq[:, 0]) / den_safe
        l0 = 1.0 - l1 - l2
        ok = (
            (np.abs(den) > _AREA_EPS)
            & (l0 >= -_BARY_TOL)
            & (l1 >= -_BARY_TOL)
            & (l2 >= -_BARY_TOL)
        )
        if not ok.any():
            return fid, bary
        pt, fc = pt[ok], fc[ok]
        l0, l1, l2 = l0[ok], l1[ok], l2[ok]

        q0 = np.column_stack([xy[pt], np.full(len(pt), z0)])
        gamma = np.einsum("ij,ij->i", self.face_normals[fc], q0 - self.face_centroids[fc])
        # pick min |gamma| per point, ties -> lowest face id
        order = np.lexsort((fc, np.abs(gamma), pt))
        pt_s = pt[order]
        first = np.ones(len(pt_s), dtype=bool)
        first[1:] = pt_s[1:] != pt_s[:-1]
        sel = order[first]
        fid[pt[sel]] = fc[sel]
        bary[pt[sel], 0] = l0[sel]
        bary[pt[sel], 1] = l1[sel]
        bary[pt[sel], 2] = l2[sel]
        return fid, bary

    def heights_on_faces(self, fid, xy, mode="vertical-solve", z0=None):
        """Surface height for points already located on faces ``fid``.

        vertical-solve : solve the face plane for z at (x, y); near-vertical
            faces (|n_z| < 1e-9) yield NaN.
        normal-projection : project (x, y, z0) along the face normal and take
            the z of the projected point (the projection may land outside the
            face; that is this mode's documented behavior).
        """
        xy = np.atleast_2d(xy)
        n = self.face_normals[fid]
        c = self.face_centroids[fid]
        if mode == "vertical-solve":
            nz = n[:, 2]
            safe = np.where(np.abs(nz) > _VERTICAL_NZ, nz, 1.0)
            h = (np.einsum("ij,ij->i", n, c) - n[:, 0] * xy[:, 0] - n[:, 1] * xy[:, 1]) / safe
            return np.where(np.abs(nz) > _VERTICAL_NZ, h, np.nan)
        if mode == "normal-projection":
            z0 = self.z0_default if z0 is None else float(z0)
            q0 = np.column_stack([xy, np.full(len(xy), z0)])
            gamma = np.einsum("ij,ij->i", n, q0 - c)
            return z0 - gamma * n[:, 2]
        raise ValueError(f"unknown height mode {mode!r}")


def generate_terrain(spec: TerrainSpec) -> TriangleMesh:
    """Build a regular-grid terrain mesh from a TerrainSpec (deterministic)."""
    if spec.kind not in _KINDS:
        raise ValueError(f"unknown terrain kind {spec.kind!r}; expected one of {_KINDS}")
    r = int(spec.resolution)
    if r < 2:
        raise ValueError("resolution must be >= 2 vertices per axis")
    x0, x1, y0, y1 = map(float, spec.extent)
    if not (x1 > x0 and y1 > y0):
        raise ValueError("extent must have positive area")

    xs = np.linspace(x0, x1, r)
    ys = np.linspace(y0, y1, r)
    X, Y = np.meshgrid(xs, ys, indexing="xy")
    if spec.kind == "sinusoidal":
        Z = spec.amplitude * np.sin(2.0 * np.pi * X / spec.wavelength)
    elif spec.kind == "fractal-noise":
        Z = spec.amplitude * fbm(
            X, Y, seed=spec.seed, octaves=spec.octaves, base_wavelength=spec.wavelength
        )
    else:
        Z = np.zeros_like(X)
    Z = Z + spec.slope * X  # inclined-plane, and an additive tilt for the rest

    verts = np.column_stack([X.ravel(), Y.ravel(), Z.ravel()])
    idx = np.arange(r * r).reshape(r, r)
    v00 = idx[:-1, :-1].ravel()
    v10 = idx[:-1, 1:].ravel()
    v01 = idx[1:, :-1].ravel()
    v11 = idx[1:, 1:].ravel()
    f1 = np.stack([v00, v10, v11], axis=1)
    f2 = np.stack([v00, v11, v01], axis=1)
    faces = np.concatenate([f1, f2])
    return TriangleMesh(verts, faces)


# ---------------------------------------------------------------------------
# point queries (module-level API)


def locate_face(mesh: TriangleMesh, x: float, y: float, z0: float | None = None) -> int | None:
    """Index of the face containing (x, y), or None when the point is off-mesh."""
    fid, _ = mesh.locate_faces(np.array([[x, y]]), z0=z0)
    return int(fid[0]) if fid[0] >= 0 else None


def terrain_height(mesh, x, y, mode="vertical-solve", z0=None):
    """Surface height at (x, y), or None off-mesh.

    See TriangleMesh.heights_on_faces for the two modes. vertical-solve on a
    near-vertical face raises DegenerateFaceError.
    """
    fid, _ = mesh.locate_faces(np.array([[x, y]]), z0=z0)
    if fid[0] < 0:
        return None
    h = mesh.heights_on_faces(fid, np.array([[x, y]]), mode=mode, z0=z0)
    if np.isnan(h[0]):
        raise DegenerateFaceError(f"near-vertical face {int(fid[0])} at ({x:.6g}, {y:.6g})")
    return float(h[0])


def terrain_heights(mesh, xy, mode="vertical-solve", z0=None):
    """Batch heights. Returns (h, fid); h is NaN and fid -1 off-mesh."""
    xy = np.atleast_2d(xy)
    fid, _ = mesh.locate_faces(xy, z0=z0)
    h = np.full(len(xy), np.nan)
    on = fid >= 0
    if on.any():
        h[on] = mesh.heights_on_faces(fid[on], xy[on], mode=mode, z0=z0)
    return h, fid


def terrain_gradient(mesh, x, y, step=0.05, mode="vertical-solve"):
    """Central-difference surface gradient (dh/dx, dh/dy) at (x, y).

    Raises OffMeshError naming the first stencil point that leaves the mesh.
    """
    g, ok = terrain_gradients(mesh, np.array([[x, y]]), step=step, mode=mode)
    if not ok[0]:
        pts = np.array(
            [[x + step, y], [x - step, y], [x, y + step], [x, y - step]]
        )
        h, fid = terrain_heights(mesh, pts, mode=mode)
        bad = np.flatnonzero((fid < 0) | np.isnan(h))
        px, py = pts[bad[0]] if len(bad) else (x, y)
        raise OffMeshError(f"gradient stencil point ({px:.6g}, {py:.6g}) is off-mesh")
    return float(g[0, 0]), float(g[0, 1])


def terrain_gradients(mesh, xy, step=0.05, mode="vertical-solve"):
    """Batch central-difference gradients: returns ((P, 2) grad, (P,) valid)."""
    xy = np.atleast_2d(xy)
    P = len(xy)
    stencil = np.empty((4 * P, 2))
    stencil[0::4] = xy + [step, 0.0]
    stencil[1::4] = xy - [step, 0.0]
    stencil[2::4] = xy + [0.0, step]
    stencil[3::4] = xy - [0.0, step]
    h, fid = terrain_heights(mesh, stencil, mode=mode)
    h = h.reshape(P, 4)
    ok = (fid.reshape(P, 4) >= 0).all(axis=1) & ~np.isnan(h).any(axis=1)
    g = np.zeros((P, 2))
    g[:, 0] = (h[:, 0] - h[:, 1]) / (2.0 * step)
    g[:, 1] = (h[:, 2] - h[:, 3]) / (2.0 * step)
    g[~ok] = 0.0
    return g, ok


# ---------------------------------------------------------------------------
# file IO


def load_mesh(path, fmt=None) -> TriangleMesh:
    """Load an OBJ or PLY mesh; format inferred from the extension by default."""
    path = str(path)
    if fmt is None:
        low = path.lower()
        if low.endswith(".obj"):
            fmt = "obj"
        elif low.endswith(".ply"):
            fmt = "ply"
        else:
            raise MeshFormatError(f"cannot infer format from {path!r}; pass fmt=")
    if fmt == "obj":
        return _load_obj(path)
    if fmt == "ply":
        return _load_ply(path)
    raise MeshFormatError(f"unsupported format {fmt!r}")


def _load_obj(path):
    verts, raw_faces = [], []
    with open(path, "r", encoding="utf-8", errors="replace") as fh:
        for ln, line in enumerate(fh, start=1):
            t = line.split("#", 1)[0].split()
            if not t:
                continue
            if t[0] == "v":
                if len(t) < 4:
                    raise MeshFormatError(f"{path}:{ln}: vertex needs 3 coordinates")
                try:
                    verts.append([float(t[1]), float(t[2]), float(t[3])])
                except ValueError as e:
                    raise MeshFormatError(f"{path}:{ln}: bad vertex: {e}") from None
            elif t[0] == "f":
                if len(t) < 4:
                    raise MeshFormatError(f"{path}:{ln}: face needs >= 3 vertices")
                try:
                    poly = [int(tok.split("/")[0]) for tok in t[1:]]
                except ValueError as e:
                    raise MeshFormatError(f"{path}:{ln}: bad face index: {e}") from None
                raw_faces.append((ln, poly))
    if not verts or not raw_faces:
        raise EmptyMeshError(f"{path}: no vertices or faces")
    nv = len(verts)
    faces = []
    for ln, poly in raw_faces:
        idx = []
        for i in poly:
            j = i - 1 if i > 0 else nv + i
            if not (0 <= j < nv):
                raise MeshFormatError(f"{path}:{ln}: face index {i} out of range")
            idx.append(j)
        for k in range(1, len(idx) - 1):  # fan-triangulate n-gons
            faces.append([idx[0], idx[k], idx[k + 1]])
    return TriangleMesh(np.array(verts), np.array(faces))


_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def _load_ply(path):
    with open(path, "rb") as fh:
        data = fh.read()
    try:
        head_end = data.index(b"end_header\n") + len(b"end_header\n")
    except ValueError:
        raise MeshFormatError(f"{path}: missing end_header") from None
    header = data[:head_end].decode("ascii", errors="replace").splitlines()
    if not header or header[0].strip() != "ply":
        raise MeshFormatError(f"{path}:1: not a PLY file")

    fmt = None
    elements = []  # (name, count, [(prop_kind, dtype(s), name)])
    for ln, line in enumerate(header[1:], start=2):
        t = line.split()
        if not t or t[0] == "comment":
            continue
        if t[0] == "format":
            fmt = t[1]
        elif t[0] == "element":
            elements.append((t[1], int(t[2]), []))
        elif t[0] == "property":
            if not elements:
                raise MeshFormatError(f"{path}:{ln}: property before element")
            if t[1] == "list":
                elements[-1][2].append(("list", (_PLY_TYPES[t[2]], _PLY_TYPES[t[3]]), t[4]))
            else:
                elements[-1][2].append(("scalar", _PLY_TYPES[t[1]], t[2]))
        elif t[0] == "end_header":
            break
    if fmt not in ("ascii", "binary_little_endian"):
        raise MeshFormatError(f"{path}: unsupported PLY format {fmt!r}")

    verts = faces = None
    if fmt == "ascii":
        tokens = data[head_end:].split()
        pos = 0
        for name, count, props in elements:
            rows = []
            for _ in range(count):
                row = {}
                for kind, dt, pname in props:
                    if kind == "list":
                        n = int(tokens[pos]); pos += 1
                        row[pname] = [int(tokens[pos + i]) for i in range(n)]
                        pos += n
                    else:
                        row[pname] = float(tokens[pos]); pos += 1
                rows.append(row)
            verts, faces = _ply_collect(name, rows, verts, faces, path)
    else:
        pos = head_end
        for name, count, props in elements:
            rows = []
            for _ in range(count):
                row = {}
                for kind, dt, pname in props:
                    if kind == "list":
                        cdt, idt = dt
                        n = int(np.frombuffer(data, dtype="<" + cdt, count=1, offset=pos)[0])
                        pos += np.dtype(cdt).itemsize
                        row[pname] = np.frombuffer(data, dtype="<" + idt, count=n, offset=pos).tolist()
                        pos += n * np.dtype(idt).itemsize
                    else:
                        row[pname] = float(np.frombuffer(data, dtype="<" + dt, count=1, offset=pos)[0])
                        pos += np.dtype(dt).itemsize
                rows.append(row)
            verts, faces = _ply_collect(name, rows, verts, faces, path)

    if verts is None or faces is None:
        raise MeshFormatError(f"{path}: PLY missing vertex or face element")
    tri = []
    for poly in faces:
        for k in range(1, len(poly) - 1):
            tri.append([poly[0], poly[k], poly[k + 1]])
    return TriangleMesh(np.array(verts), np.array(tri))


def _ply_collect(name, rows, verts, faces, path):
    if name == "vertex":
        try:
            verts = [[r["x"], r["y"], r["z"]] for r in rows]
        except KeyError:
            raise MeshFormatError(f"{path}: vertex element lacks x/y/z") from None
    elif name == "face":
        key = "vertex_indices" if rows and "vertex_indices" in rows[0] else "vertex_index"
        try:
            faces = [r[key] for r in rows]
        except KeyError:
            raise MeshFormatError(f"{path}: face element lacks vertex indices") from None
    return verts, faces


def save_obj(mesh: TriangleMesh, path) -> None:
    """Write the mesh as ASCII OBJ (1-based indices)."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# meshnav terrain export: {len(mesh.vertices)} vertices, {len(mesh.faces)} faces\n")
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for f in mesh.faces:
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")
