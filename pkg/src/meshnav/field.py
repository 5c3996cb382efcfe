"""Goal-directed guidance field: anisotropic-cost fast marching on the mesh.

Solves |grad T| = cost over mesh vertices with a priority-queue wavefront
seeded at the goal face, then derives a per-vertex unit direction field by
averaging negative gradients of the per-face linear interpolant of T.
Obtuse update triangles are split by unfolding neighboring faces into the
triangle plane (the standard treatment for fast marching on meshes), so
updates always see a (near-)acute stencil where the geometry allows it.
"""
from __future__ import annotations

import heapq
import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from .descriptors import CurvatureCache, descriptors_at
from .mesh import TriangleMesh, terrain_heights

_UNFOLD_DEPTH = 16
_UNFOLD_MAX_STENCIL = 64


class FieldError(Exception):
    pass


class UnreachableGoalError(FieldError):
    """Goal off-mesh or on a face touching lethal vertices."""


class NoDirectionError(FieldError):
    """Query point off-mesh or on a face without a full finite-T stencil."""


@dataclass(frozen=True)
class VertexCostParams:
    """Weights of the traversal-cost combination and lethality thresholds.

    cost_v = 1 + w_height*|dh|_v + w_rough*sigma_z(v) + w_border*border_v
               + w_inflate*inflate_v
    where |dh|_v is the max height difference to one-ring neighbors, border_v
    flags mesh-boundary vertices, and inflate_v decays linearly from 1 at a
    lethal vertex to 0 at inflation_radius. Vertices steeper than lethal_slope
    or rougher than lethal_rough are lethal (frozen at T = +inf).
    """

    w_height: float = 2.0
    w_rough: float = 5.0
    w_border: float = 10.0
    w_inflate: float = 10.0
    lethal_slope: float = math.radians(45.0)
    lethal_rough: float = 0.35
    inflation_radius: float = 0.5
    descriptor_radius: float = 0.5


@dataclass
class VertexCosts:
    multiplier: np.ndarray  # (V,) >= 1
    lethal: np.ndarray      # (V,) bool


def vertex_costs(mesh: TriangleMesh, cache: CurvatureCache, params: VertexCostParams | None = None) -> VertexCosts:
    """Per-vertex traversal cost multiplier plus lethal flags."""
    p = params or VertexCostParams()
    V = len(mesh.vertices)
    desc, ok = descriptors_at(mesh, cache, mesh.vertices, radius=p.descriptor_radius)
    incl = np.arccos(np.clip(desc[:, 2], 0.0, 1.0))
    sigma = desc[:, 3]
    lethal = (~ok) | (incl > p.lethal_slope) | (sigma > p.lethal_rough)

    z = mesh.vertices[:, 2]
    src = np.repeat(np.arange(V), np.diff(mesh.vv_ptr))
    dz = np.abs(z[src] - z[mesh.vv_idx])
    dh = np.zeros(V)
    np.maximum.at(dh, src, dz)

    inflate = np.zeros(V)
    if lethal.any() and p.inflation_radius > 0:
        from scipy.spatial import cKDTree

        dist, _ = cKDTree(mesh.vertices[lethal]).query(mesh.vertices, k=1)
        inflate = np.clip(1.0 - dist / p.inflation_radius, 0.0, 1.0)

    mult = (
        1.0
        + p.w_height * dh
        + p.w_rough * sigma
        + p.w_border * mesh.boundary_vertex.astype(float)
        + p.w_inflate * inflate
    )
    return VertexCosts(multiplier=mult, lethal=lethal)


@dataclass
class VectorField:
    """Arrival-time field T and the per-vertex descent direction field."""

    T: np.ndarray            # (V,) +inf where lethal/unreached
    directions: np.ndarray   # (V, 3) unit rows where T finite, zero otherwise
    lethal: np.ndarray       # (V,) bool
    goal: np.ndarray         # (3,)
    d_max: float             # normalizer for goal scaling (per d_max_mode)
    d_max_euclidean: float
    d_max_geodesic: float
    d_max_mode: str
    accept_order: np.ndarray | None = None  # vertex ids in wavefront order


# ---------------------------------------------------------------------------
# update stencils (with obtuse-corner unfolding)


def _build_stencils(mesh: TriangleMesh):
    """Per-vertex update triangles (a, b, |va|, |vb|, cos, sin).

    Obtuse corners are replaced by sub-wedges obtained by unfolding the faces
    across the opposite edge until the wedge turns acute (depth-capped); the
    endpoints keep their true mesh vertex ids while lengths/angles come from
    the planar unfolding, which preserves geodesic lengths.
    """
    V = len(mesh.vertices)
    verts = mesh.vertices
    faces = mesh.faces
    out_a = [[] for _ in range(V)]
    out_b = [[] for _ in range(V)]
    out_la = [[] for _ in range(V)]
    out_lb = [[] for _ in range(V)]
    out_cos = [[] for _ in range(V)]

    def emit(v, a, b, la, lb, c):
        if len(out_a[v]) < _UNFOLD_MAX_STENCIL:
            out_a[v].append(a)
            out_b[v].append(b)
            out_la[v].append(la)
            out_lb[v].append(lb)
            out_cos[v].append(c)

    for f in range(len(faces)):
        for c in range(3):
            v = int(faces[f, c])
            p = int(faces[f, (c + 1) % 3])
            q = int(faces[f, (c + 2) % 3])
            ep = verts[p] - verts[v]
            eq = verts[q] - verts[v]
            lp = float(np.linalg.norm(ep))
            lq = float(np.linalg.norm(eq))
            if lp <= 0 or lq <= 0:
                continue
            cosv = float(np.dot(ep, eq) / (lp * lq))
            if cosv >= -1e-12:
                emit(v, p, q, lp, lq, min(cosv, 1.0))
                continue
            # obtuse at v: unfold across (p, q) in a 2D frame
            theta = math.acos(max(-1.0, cosv))
            P = (lp, 0.0)
            Q = (lq * math.cos(theta), lq * math.sin(theta))
            stack = [(P, Q, p, q, f, 0)]
            while stack:
                A2, B2, va, vb, face, depth = stack.pop()
                dot = A2[0] * B2[0] + A2[1] * B2[1]
                na = math.hypot(*A2)
                nb = math.hypot(*B2)
                if na <= 0 or nb <= 0:
                    continue
                cw = dot / (na * nb)
                if cw >= -1e-12 or depth >= _UNFOLD_DEPTH:
                    emit(v, va, vb, na, nb, max(-1.0, min(cw, 1.0)))
                    continue
                nxt = mesh.face_across_edge(face, va, vb)
                if nxt < 0:
                    emit(v, va, vb, na, nb, max(-1.0, min(cw, 1.0)))
                    continue
                fv = faces[nxt]
                vr = int(fv[(fv != va) & (fv != vb)][0])
                dab = math.hypot(B2[0] - A2[0], B2[1] - A2[1])
                dar = float(np.linalg.norm(verts[vr] - verts[va]))
                dbr = float(np.linalg.norm(verts[vr] - verts[vb]))
                if dab <= 0:
                    emit(v, va, vb, na, nb, max(-1.0, min(cw, 1.0)))
                    continue
                ex = ((B2[0] - A2[0]) / dab, (B2[1] - A2[1]) / dab)
                x = (dar * dar - dbr * dbr + dab * dab) / (2.0 * dab)
                y2 = dar * dar - x * x
                y = math.sqrt(y2) if y2 > 0 else 0.0
                # place R on the side of AB away from v (the origin)
                sv = ex[0] * (0.0 - A2[1]) - ex[1] * (0.0 - A2[0])
                side = 1.0 if sv > 0 else -1.0
                R = (
                    A2[0] + x * ex[0] + side * y * ex[1],
                    A2[1] + x * ex[1] - side * y * ex[0],
                )
                # polar check: R must fall strictly inside the wedge (A2, B2)
                cross_ar = A2[0] * R[1] - A2[1] * R[0]
                cross_rb = R[0] * B2[1] - R[1] * B2[0]
                wedge = A2[0] * B2[1] - A2[1] * B2[0]
                inside = (cross_ar * wedge > 0) and (cross_rb * wedge > 0)
                if not inside:
                    emit(v, va, vb, na, nb, max(-1.0, min(cw, 1.0)))
                    continue
                stack.append((A2, R, va, vr, nxt, depth + 1))
                stack.append((R, B2, vr, vb, nxt, depth + 1))

    ptr = np.zeros(V + 1, dtype=np.int64)
    ptr[1:] = np.cumsum([len(x) for x in out_a])
    return {
        "ptr": ptr,
        "a": np.array([i for l in out_a for i in l], dtype=np.int64),
        "b": np.array([i for l in out_b for i in l], dtype=np.int64),
        "la": np.array([i for l in out_la for i in l]),
        "lb": np.array([i for l in out_lb for i in l]),
        "cos": np.array([i for l in out_cos for i in l]),
    }


def _get_stencils(mesh):
    st = getattr(mesh, "_fmm_stencils", None)
    if st is None:
        st = _build_stencils(mesh)
        mesh._fmm_stencils = st
    return st


def _recompute(v, T, slowness, st):
    """Best tentative value for v over its stencil triangles.

    Two-point update reconstructs a virtual point source consistent with the
    two known arrival times under the local constant slowness, which is exact
    for point-source data on flat uniform ground and tends to the planar-front
    update in the far field. Falls back to one-point (edge) updates when the
    reconstruction fails its geometric admissibility conditions. Updates read
    current (possibly tentative) values; the marching loop re-propagates
    improvements locally, which repairs the first-ring point-source error that
    a strictly accepted-only sweep cannot represent.
    """
    s0, s1 = st["ptr"][v], st["ptr"][v + 1]
    if s1 == s0:
        return np.inf
    ia = st["a"][s0:s1]
    ib = st["b"][s0:s1]
    ta = T[ia]
    tb = T[ib]
    la = st["la"][s0:s1]
    lb = st["lb"][s0:s1]
    cos = st["cos"][s0:s1]
    F = slowness[v]

    cand = np.where(np.isfinite(ta), ta + la * F, np.inf)
    cand = np.minimum(cand, np.where(np.isfinite(tb), tb + lb * F, np.inf))

    both = np.isfinite(ta) & np.isfinite(tb)
    if both.any():
        with np.errstate(all="ignore"):
            sin = np.sqrt(np.maximum(1.0 - cos * cos, 0.0))
            # wedge frame: v at origin, A = (la, 0), B = a*(cos, sin)
            ax, ay = la, np.zeros_like(la)
            bx, by = lb * cos, lb * sin
            ex_, ey_ = bx - ax, by - ay
            L = np.sqrt(ex_ * ex_ + ey_ * ey_)
            Ls = np.where(L > 1e-300, L, 1.0)
            ex_, ey_ = ex_ / Ls, ey_ / Ls
            rA = np.where(both, ta, 0.0) / F
            rB = np.where(both, tb, 0.0) / F
            x = (rA * rA - rB * rB + L * L) / (2.0 * Ls)
            y2 = rA * rA - x * x
            feas = both & (L > 1e-300) & (y2 >= 0.0)
            y = np.sqrt(np.maximum(y2, 0.0))
            # v (origin) lies on side sign(cross(e, -A)); put S on the other side
            s_v = ex_ * (-ay) - ey_ * (-ax)
            side = np.where(s_v > 0, 1.0, -1.0)
            sx = ax + x * ex_ + side * y * ey_
            sy = ay + x * ey_ - side * y * ex_
            t_new = F * np.sqrt(sx * sx + sy * sy)
            # causality: the ray v->S must cross the segment AB strictly
            denom = sx * ey_ - sy * ex_
            mu = (ax * ey_ - ay * ex_) / np.where(np.abs(denom) > 1e-300, denom, 1.0)
            qx, qy = mu * sx, mu * sy
            lam = ((qx - ax) * ex_ + (qy - ay) * ey_) / Ls
            ok = (
                feas
                & (np.abs(denom) > 1e-300)
                & (mu > 0.0)
                & (mu < 1.0)
                & (lam > -1e-9)
                & (lam < 1.0 + 1e-9)
                & (t_new >= np.minimum(ta, tb))
            )
            cand = np.minimum(cand, np.where(ok, t_new, np.inf))
    return float(cand.min())


def compute_field(
    mesh: TriangleMesh,
    goal,
    costs: VertexCosts,
    d_max_mode: str = "euclidean",
) -> VectorField:
    """Fast-marching arrival times from the goal plus the descent directions.

    The goal must project onto a face whose three vertices are all non-lethal;
    those vertices seed the march with their Euclidean distance to the goal.
    """
    goal = np.asarray(goal, dtype=float)
    if goal.shape != (3,):
        raise ValueError("goal must be a 3D point")
    fid, _ = mesh.locate_faces(goal[None, :2])
    if fid[0] < 0:
        raise UnreachableGoalError(f"goal {goal} is off-mesh")
    gverts = mesh.faces[fid[0]]
    if costs.lethal[gverts].any():
        raise UnreachableGoalError("goal face touches lethal vertices")
    gh, _ = terrain_heights(mesh, goal[None, :2])
    goal = np.array([goal[0], goal[1], float(gh[0])])

    V = len(mesh.vertices)
    alive = ~costs.lethal
    T = np.full(V, np.inf)
    accepted = np.zeros(V, dtype=bool)
    st = _get_stencils(mesh)
    slowness = costs.multiplier

    heap = []
    for gv in gverts:
        T[gv] = float(np.linalg.norm(mesh.vertices[gv] - goal))
        heapq.heappush(heap, (T[gv], int(gv)))

    vv_ptr, vv_idx = mesh.vv_ptr, mesh.vv_idx
    order = []
    while heap:
        t, v = heapq.heappop(heap)
        if accepted[v] or t > T[v]:
            continue
        accepted[v] = True
        order.append(v)
        # Relax the neighborhood until it settles: an improvement at one
        # vertex can unlock a better two-point update at the vertex that fed
        # it, so improvements are chased through tentative vertices instead of
        # waiting for another acceptance.
        queue = deque([v])
        while queue:
            u = queue.popleft()
            for w in vv_idx[vv_ptr[u]:vv_ptr[u + 1]]:
                if accepted[w] or not alive[w]:
                    continue
                cand = _recompute(w, T, slowness, st)
                if cand < T[w] - 1e-12:
                    T[w] = cand
                    heapq.heappush(heap, (cand, int(w)))
                    queue.append(w)

    directions = _direction_field(mesh, T, goal, costs.lethal)
    finite = np.isfinite(T)
    if finite.any():
        d_eu = float(np.linalg.norm(mesh.vertices[finite] - goal, axis=1).max())
        d_ge = float(T[finite].max())
    else:  # pragma: no cover - goal seeds are always finite
        d_eu = d_ge = 0.0
    if d_max_mode not in ("euclidean", "geodesic"):
        raise ValueError(f"unknown d_max_mode {d_max_mode!r}")
    return VectorField(
        T=T,
        directions=directions,
        lethal=costs.lethal.copy(),
        goal=goal,
        d_max=d_eu if d_max_mode == "euclidean" else d_ge,
        d_max_euclidean=d_eu,
        d_max_geodesic=d_ge,
        d_max_mode=d_max_mode,
        accept_order=np.asarray(order, dtype=np.intp),
    )


def _direction_field(mesh, T, goal, lethal):
    """Area-weighted average of per-face -grad(T), normalized per vertex.

    Vertices bordering lethal terrain get their direction projected out of
    the half-spaces pointing at each adjacent lethal vertex, so following the
    field skims along obstacles instead of running into them.
    """
    V = len(mesh.vertices)
    tf = T[mesh.faces]
    valid = np.isfinite(tf).all(axis=1)
    acc = np.zeros((V, 3))
    if valid.any():
        f = np.flatnonzero(valid)
        p0 = mesh.vertices[mesh.faces[f, 0]]
        M = np.stack(
            [
                mesh.vertices[mesh.faces[f, 1]] - p0,
                mesh.vertices[mesh.faces[f, 2]] - p0,
                mesh.face_normals[f],
            ],
            axis=1,
        )
        rhs = np.stack([tf[f, 1] - tf[f, 0], tf[f, 2] - tf[f, 0], np.zeros(len(f))], axis=1)
        g = np.linalg.solve(M, rhs[:, :, None])[:, :, 0]
        w = -mesh.face_areas[f][:, None] * g
        for c in range(3):
            np.add.at(acc, mesh.faces[f, c], w)

    norms = np.linalg.norm(acc, axis=1)
    finite = np.isfinite(T)
    directions = np.zeros((V, 3))
    ok = finite & (norms > 1e-12)
    directions[ok] = acc[ok] / norms[ok, None]

    # fallback: toward the lowest-T finite neighbor, else straight at the goal
    for v in np.flatnonzero(finite & ~ok):
        nb = mesh.vertex_neighbors(v)
        nb = nb[np.isfinite(T[nb]) & (T[nb] < T[v])]
        if len(nb):
            w = nb[np.argmin(T[nb])]
            d = mesh.vertices[w] - mesh.vertices[v]
        else:
            d = goal - mesh.vertices[v]
        n = np.linalg.norm(d)
        directions[v] = d / n if n > 1e-12 else np.array([1.0, 0.0, 0.0])

    if lethal is None or not lethal.any():
        return directions
    for v in np.flatnonzero(finite & ~lethal):
        nb = mesh.vertex_neighbors(v)
        lb = nb[lethal[nb]]
        if not len(lb):
            continue
        U = mesh.vertices[lb] - mesh.vertices[v]
        U /= np.linalg.norm(U, axis=1)[:, None]
        d = _deflect(directions[v], U)
        if d is None:
            # last resorts, each deflected away from the obstacles too
            nb_ok = nb[np.isfinite(T[nb]) & ~lethal[nb]]
            if len(nb_ok):
                w = nb_ok[np.argmin(T[nb_ok])]
                d = _deflect(mesh.vertices[w] - mesh.vertices[v], U)
            if d is None:
                d = _deflect(goal - mesh.vertices[v], U)
        if d is not None:
            directions[v] = d
    return directions


def _deflect(d, U, tol=1e-12):
    """Project d out of every half-space {x: x . u > 0}, u in U; unit result.

    Returns None when the projection collapses (direction fully inside the
    obstacle cone).
    """
    d = np.asarray(d, dtype=float).copy()
    for _ in range(3 * len(U)):
        dots = U @ d
        j = int(np.argmax(dots))
        if dots[j] <= tol:
            break
        d -= dots[j] * U[j]
    n = np.linalg.norm(d)
    if n < 1e-9 or (U @ d > 1e-6).any():
        return None
    return d / n


# ---------------------------------------------------------------------------
# queries


def directions_at(field: VectorField, mesh: TriangleMesh, pts):
    """Barycentric blend of vertex directions at (P, 3) points.

    Returns (dirs (P, 3) unit rows, ok (P,)). Faces that touch lethal terrain
    still yield a direction as long as at least one vertex carries a finite T
    (weights renormalize over the finite vertices), so guidance survives while
    skimming an obstacle boundary. ok is False off-mesh, on faces with no
    finite-T vertex, or when the blend cancels to zero.
    """
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    P = len(pts)
    dirs = np.zeros((P, 3))
    fid, bary = mesh.locate_faces(pts[:, :2])
    ok = fid >= 0
    idx = np.flatnonzero(ok)
    if len(idx):
        fv = mesh.faces[fid[idx]]
        w = np.where(np.isfinite(field.T[fv]), bary[idx], 0.0)
        wsum = w.sum(axis=1)
        usable = wsum > 1e-12
        ok[idx[~usable]] = False
        idx = idx[usable]
        if len(idx):
            w = w[usable] / wsum[usable, None]
            d = np.einsum("pc,pcd->pd", w, field.directions[mesh.faces[fid[idx]]])
            n = np.linalg.norm(d, axis=1)
            good = n > 1e-12
            dirs[idx[good]] = d[good] / n[good, None]
            ok[idx[~good]] = False
    return dirs, ok


def query_direction(field: VectorField, mesh: TriangleMesh, p) -> np.ndarray:
    """Unit guidance direction at 3D point p; raises NoDirectionError."""
    d, ok = directions_at(field, mesh, np.asarray(p, dtype=float)[None, :])
    if not ok[0]:
        raise NoDirectionError(f"no guidance direction at {np.asarray(p)}")
    return d[0]


def goal_scaling(p, goal, d_max: float, exponent: float = 2.0):
    """Progress weight s(p) = 1 - (clamp(|p - goal| / d_max, 0, 1))^exponent."""
    p = np.asarray(p, dtype=float)
    dist = np.linalg.norm(p - np.asarray(goal, dtype=float), axis=-1)
    if d_max <= 0:
        return np.zeros_like(dist) if dist.ndim else 0.0
    r = np.clip(dist / d_max, 0.0, 1.0)
    s = 1.0 - r**exponent
    return s if s.ndim else float(s)
