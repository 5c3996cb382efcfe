"""Shared fixtures and small geometry helpers for the test suite."""

import numpy as np
import pytest

from meshnav.mesh import TerrainSpec, TriangleMesh, generate_terrain


def icosphere(subdivisions=3, radius=1.0):
    """Unit icosahedron subdivided and projected to a sphere of given radius."""
    t = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array(
        [
            [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
            [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
            [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
        ],
        dtype=float,
    )
    verts /= np.linalg.norm(verts, axis=1)[:, None]
    faces = np.array(
        [
            [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
            [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
            [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
            [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
        ],
        dtype=np.int64,
    )
    for _ in range(subdivisions):
        edge_mid = {}
        new_faces = []
        verts = list(map(tuple, verts))

        def midpoint(i, j):
            key = (min(i, j), max(i, j))
            if key not in edge_mid:
                m = 0.5 * (np.array(verts[i]) + np.array(verts[j]))
                m /= np.linalg.norm(m)
                edge_mid[key] = len(verts)
                verts.append(tuple(m))
            return edge_mid[key]

        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        faces = np.array(new_faces, dtype=np.int64)
        verts = np.array(verts, dtype=float)
    return TriangleMesh(np.asarray(verts) * radius, faces)


def grid_mesh_from_height(fn, extent=(0.0, 10.0, 0.0, 10.0), resolution=21):
    """Grid mesh with z = fn(x, y); same topology as generate_terrain."""
    base = generate_terrain(
        TerrainSpec(kind="flat-plane", extent=extent, resolution=resolution)
    )
    v = base.vertices.copy()
    v[:, 2] = fn(v[:, 0], v[:, 1])
    return TriangleMesh(v, base.faces.copy())


def follow_field(field, mesh, start, step=0.2, budget=None, goal_tol=0.5):
    """Forward-Euler particle tracing of the guidance field.

    Returns True when the particle gets within goal_tol of the field's goal
    inside the step budget.
    """
    from meshnav.field import directions_at

    if budget is None:
        budget = int(10 * field.d_max / step)
    p = np.asarray(start, dtype=float).copy()
    for _ in range(budget):
        if np.linalg.norm(p - field.goal) <= goal_tol:
            return True
        d, ok = directions_at(field, mesh, p[None, :])
        if not ok[0]:
            return False
        p = p + step * d[0]
    return bool(np.linalg.norm(p - field.goal) <= goal_tol)


def edge_dijkstra(mesh, goal, lethal):
    """Shortest-path distance to the goal along mesh edges (oracle).

    Seeded exactly like the marching front: the goal face's vertices start at
    their Euclidean distance to the goal point. Lethal vertices are excluded.
    """
    import heapq

    V = len(mesh.vertices)
    D = np.full(V, np.inf)
    fid, _ = mesh.locate_faces(np.asarray(goal, dtype=float)[None, :2])
    heap = []
    for gv in mesh.faces[fid[0]]:
        D[gv] = float(np.linalg.norm(mesh.vertices[gv] - goal))
        heapq.heappush(heap, (D[gv], int(gv)))
    done = np.zeros(V, dtype=bool)
    ptr, idx = mesh.vv_ptr, mesh.vv_idx
    while heap:
        d, v = heapq.heappop(heap)
        if done[v]:
            continue
        done[v] = True
        for w in idx[ptr[v]:ptr[v + 1]]:
            if lethal[w] or done[w]:
                continue
            nd = d + float(np.linalg.norm(mesh.vertices[w] - mesh.vertices[v]))
            if nd < D[w]:
                D[w] = nd
                heapq.heappush(heap, (nd, int(w)))
    return D


@pytest.fixture(scope="session")
def flat_mesh():
    return generate_terrain(
        TerrainSpec(kind="flat-plane", extent=(0.0, 20.0, 0.0, 20.0), resolution=41)
    )


@pytest.fixture(scope="session")
def inclined_mesh():
    return generate_terrain(
        TerrainSpec(
            kind="inclined-plane", slope=0.5, extent=(0.0, 10.0, 0.0, 10.0), resolution=21
        )
    )


@pytest.fixture(scope="session")
def fractal_mesh():
    return generate_terrain(
        TerrainSpec(
            kind="fractal-noise",
            extent=(0.0, 20.0, 0.0, 20.0),
            resolution=41,
            amplitude=1.0,
            seed=42,
        )
    )


@pytest.fixture(scope="session")
def ico3():
    return icosphere(subdivisions=3)
