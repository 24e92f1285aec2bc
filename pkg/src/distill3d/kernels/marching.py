"""Marching-cubes cell classification and triangle emission.

The triangle table is built at import time instead of being typed in.  For
every corner configuration the isosurface crossings are joined face by face
(on an ambiguous face the two inside corners are kept apart), the face
segments are chained into closed loops and each loop is fan-triangulated.
Neighbouring cubes see identical face values and therefore agree on every
shared face, which keeps closed surfaces watertight.  Triangles are wound so
their normals point from inside (value above threshold) to outside.
"""

from __future__ import annotations

import numpy as np

from . import backend, njit

# corner c sits at (c & 1, (c >> 1) & 1, (c >> 2) & 1)
CORNERS = np.array([[c & 1, (c >> 1) & 1, (c >> 2) & 1] for c in range(8)], dtype=np.int64)


def _edges():
    edges = []
    for c0 in range(8):
        for axis in range(3):
            if not (c0 >> axis) & 1:
                edges.append((c0, c0 | (1 << axis), axis))
    return np.array(edges, dtype=np.int64)  # (12, 3): corner0, corner1, axis


EDGES = _edges()
_EDGE_OF = {frozenset((int(a), int(b))): i for i, (a, b, _) in enumerate(EDGES)}


def _faces():
    faces = []
    for axis in range(3):
        for side in (0, 1):
            normal = np.zeros(3)
            normal[axis] = 1.0 if side else -1.0
            ids = [c for c in range(8) if CORNERS[c, axis] == side]
            centre = CORNERS[ids].mean(0)
            u = np.zeros(3)
            u[(axis + 1) % 3] = 1.0
            v = np.cross(normal, u)
            ang = [np.arctan2((CORNERS[c] - centre) @ v, (CORNERS[c] - centre) @ u) for c in ids]
            faces.append((normal, [ids[k] for k in np.argsort(ang)]))  # counter-clockwise about the normal
    return faces


def _build_table():
    faces = _faces()
    mid = np.array([(CORNERS[a] + CORNERS[b]) / 2 for a, b, _ in EDGES], dtype=np.float64)
    table = np.full((256, 30), -1, dtype=np.int64)
    counts = np.zeros(256, dtype=np.int64)
    for config in range(256):
        inside = [(config >> c) & 1 == 1 for c in range(8)]
        nxt = {}
        ambiguous = set()
        for normal, ring in faces:
            ring_edges = [_EDGE_OF[frozenset((ring[k], ring[(k + 1) % 4]))] for k in range(4)]
            crossing = [k for k in range(4) if inside[ring[k]] != inside[ring[(k + 1) % 4]]]
            if not crossing:
                continue
            if len(crossing) == 4:
                ambiguous |= {frozenset((a, b)) for a in ring_edges for b in ring_edges if a != b}
            if len(crossing) == 2:
                pairs = [(ring_edges[crossing[0]], ring_edges[crossing[1]])]
                ref = CORNERS[[c for c in ring if inside[c]]].mean(0)
                refs = [ref]
            else:
                pairs, refs = [], []
                for k in range(4):
                    if inside[ring[k]]:
                        pairs.append((ring_edges[(k - 1) % 4], ring_edges[k]))
                        refs.append(CORNERS[ring[k]].astype(np.float64))
            for (ea, eb), ref in zip(pairs, refs):
                d = mid[eb] - mid[ea]
                # inside region on the left, seen from outside the cube
                if np.cross(normal, d) @ (ref - mid[ea]) < 0:
                    ea, eb = eb, ea
                nxt[ea] = eb
        tris = []
        seen = set()
        for start in sorted(nxt):
            if start in seen:
                continue
            loop = [start]
            seen.add(start)
            e = nxt[start]
            while e != start:
                loop.append(e)
                seen.add(e)
                e = nxt[e]
            # fan diagonals must not join two crossings of an ambiguous face:
            # the neighbouring cube would emit the same mesh edge
            best = min(range(len(loop)), key=lambda r: sum(
                frozenset((loop[r], loop[(r + k) % len(loop)])) in ambiguous for k in range(2, len(loop) - 1)))
            loop = loop[best:] + loop[:best]
            if any(frozenset((loop[0], loop[k])) in ambiguous for k in range(2, len(loop) - 1)):
                raise AssertionError(f"no safe fan for configuration {config}")
            for k in range(1, len(loop) - 1):
                tris.append((loop[0], loop[k], loop[k + 1]))
        counts[config] = len(tris)
        flat = [e for tri in tris for e in tri]
        table[config, : len(flat)] = flat
    # orient: with only corner 0 inside the normal must point away from it
    e = table[1, :3]
    p = mid[e]
    if np.cross(p[1] - p[0], p[2] - p[0]) @ np.ones(3) < 0:
        for config in range(256):
            n = counts[config]
            tri = table[config, : 3 * n].reshape(n, 3)
            table[config, : 3 * n] = tri[:, ::-1].reshape(-1)
    return table, counts


TRI_TABLE, TRI_COUNT = _build_table()
# lattice offset and axis of each local edge, for global edge ids
EDGE_BASE = CORNERS[EDGES[:, 0]]
EDGE_AXIS = EDGES[:, 2].copy()


@njit
def _triangulate_nb(grid, threshold, tri_table, tri_count, edge_base, edge_axis):
    nx, ny, nz = grid.shape
    total = 0
    for i in range(nx - 1):
        for j in range(ny - 1):
            for k in range(nz - 1):
                cube = 0
                for c in range(8):
                    if grid[i + (c & 1), j + ((c >> 1) & 1), k + ((c >> 2) & 1)] > threshold:
                        cube |= 1 << c
                total += tri_count[cube]
    out = np.empty((total, 3), dtype=np.int64)
    m = 0
    for i in range(nx - 1):
        for j in range(ny - 1):
            for k in range(nz - 1):
                cube = 0
                for c in range(8):
                    if grid[i + (c & 1), j + ((c >> 1) & 1), k + ((c >> 2) & 1)] > threshold:
                        cube |= 1 << c
                for tri in range(tri_count[cube]):
                    for v in range(3):
                        e = tri_table[cube, 3 * tri + v]
                        px = i + edge_base[e, 0]
                        py = j + edge_base[e, 1]
                        pz = k + edge_base[e, 2]
                        out[m, v] = ((px * ny + py) * nz + pz) * 3 + edge_axis[e]
                    m += 1
    return out


def _triangulate_np(grid, threshold, tri_table, tri_count, edge_base, edge_axis):
    nx, ny, nz = grid.shape
    above = grid > threshold
    cube = np.zeros((nx - 1, ny - 1, nz - 1), dtype=np.int64)
    for c in range(8):
        x, y, z = c & 1, (c >> 1) & 1, (c >> 2) & 1
        cube |= above[x : nx - 1 + x, y : ny - 1 + y, z : nz - 1 + z].astype(np.int64) << c
    cube = cube.reshape(-1)
    n_tri = tri_count[cube]
    cells = np.repeat(np.arange(cube.size), n_tri)
    if cells.size == 0:
        return np.empty((0, 3), dtype=np.int64)
    first = np.cumsum(n_tri) - n_tri
    tri_in_cell = np.arange(cells.size) - np.repeat(first, n_tri)
    ci, cj, ck = np.unravel_index(cells, (nx - 1, ny - 1, nz - 1))
    out = np.empty((cells.size, 3), dtype=np.int64)
    for v in range(3):
        e = tri_table[cube[cells], 3 * tri_in_cell + v]
        px = ci + edge_base[e, 0]
        py = cj + edge_base[e, 1]
        pz = ck + edge_base[e, 2]
        out[:, v] = ((px * ny + py) * nz + pz) * 3 + edge_axis[e]
    return out


def triangulate(grid: np.ndarray, threshold: float) -> np.ndarray:
    """Triangles as triples of global lattice-edge ids, (M, 3).

    Edge id ``((i * ny + j) * nz + k) * 3 + axis`` names the lattice edge
    leaving point (i, j, k) along ``axis``.
    """
    grid = np.ascontiguousarray(grid, dtype=np.float64)
    fn = _triangulate_nb if backend() == "numba" else _triangulate_np
    return fn(grid, float(threshold), TRI_TABLE, TRI_COUNT, EDGE_BASE, EDGE_AXIS)
