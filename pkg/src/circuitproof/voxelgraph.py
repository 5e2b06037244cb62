"""Geodesic shortest paths over masked voxel grids.

Grids are flattened x-fastest (``i = x + nx*(y + ny*z)``), matching the store
layout.  Traversal uses 26-connectivity with physical (nm) step lengths, so
anisotropic voxels cost what they measure.  The kernels are numba-compiled;
the first call in a process pays the JIT cost.
"""

from __future__ import annotations

import numpy as np
from numba import njit

INF = np.inf


@njit(cache=True)
def _neighbor_tables(nx, ny, nz, vx, vy, vz):
    noff = np.empty(26, np.int64)
    ndx = np.empty(26, np.int64)
    ndy = np.empty(26, np.int64)
    ndz = np.empty(26, np.int64)
    step = np.empty(26, np.float64)
    k = 0
    for dz in range(-1, 2):
        for dy in range(-1, 2):
            for dx in range(-1, 2):
                if dx == 0 and dy == 0 and dz == 0:
                    continue
                noff[k] = dx + nx * (dy + ny * dz)
                ndx[k] = dx
                ndy[k] = dy
                ndz[k] = dz
                step[k] = ((dx * vx) ** 2 + (dy * vy) ** 2 + (dz * vz) ** 2) ** 0.5
                k += 1
    return noff, ndx, ndy, ndz, step


@njit(cache=True)
def penalized_dijkstra(mask, nx, ny, nz, vx, vy, vz, penalty, source):
    """Single-source shortest paths within a mask.

    Edge weight into voxel v is step_length * penalty[v]; a unit penalty
    yields plain geodesic distance.  Returns (dist, parent) flat arrays;
    unreachable voxels keep dist = inf, parent = -1.
    """
    n = nx * ny * nz
    dist = np.full(n, INF, np.float64)
    parent = np.full(n, -1, np.int64)
    noff, ndx, ndy, ndz, step = _neighbor_tables(nx, ny, nz, vx, vy, vz)

    cap = 1024
    hkey = np.empty(cap, np.float64)
    hval = np.empty(cap, np.int64)
    hsize = 0

    dist[source] = 0.0
    hkey[0] = 0.0
    hval[0] = source
    hsize = 1

    while hsize > 0:
        key = hkey[0]
        v = hval[0]
        hsize -= 1
        hkey[0] = hkey[hsize]
        hval[0] = hval[hsize]
        i = 0
        while True:
            l = 2 * i + 1
            r = l + 1
            m = i
            if l < hsize and hkey[l] < hkey[m]:
                m = l
            if r < hsize and hkey[r] < hkey[m]:
                m = r
            if m == i:
                break
            hkey[i], hkey[m] = hkey[m], hkey[i]
            hval[i], hval[m] = hval[m], hval[i]
            i = m
        if key > dist[v]:
            continue
        x = v % nx
        rem = v // nx
        y = rem % ny
        z = rem // ny
        for j in range(26):
            xx = x + ndx[j]
            if xx < 0 or xx >= nx:
                continue
            yy = y + ndy[j]
            if yy < 0 or yy >= ny:
                continue
            zz = z + ndz[j]
            if zz < 0 or zz >= nz:
                continue
            u = v + noff[j]
            if not mask[u]:
                continue
            nd = key + step[j] * penalty[u]
            if nd < dist[u]:
                dist[u] = nd
                parent[u] = v
                if hsize >= cap:
                    ncap = cap * 2
                    nk = np.empty(ncap, np.float64)
                    nv = np.empty(ncap, np.int64)
                    nk[:cap] = hkey
                    nv[:cap] = hval
                    hkey = nk
                    hval = nv
                    cap = ncap
                hkey[hsize] = nd
                hval[hsize] = u
                i = hsize
                hsize += 1
                while i > 0:
                    p = (i - 1) // 2
                    if hkey[p] <= hkey[i]:
                        break
                    hkey[p], hkey[i] = hkey[i], hkey[p]
                    hval[p], hval[i] = hval[i], hval[p]
                    i = p
    return dist, parent


@njit(cache=True)
def multi_source_geodesic(mask, nx, ny, nz, vx, vy, vz, sources):
    """Geodesic distance to the nearest of several seeds, with owner labels.

    Returns (dist, owner) flat arrays; owner is the index into sources of the
    geodesically nearest seed, with exact-distance ties going to the lower
    seed index.  Unreachable voxels keep owner -1.
    """
    n = nx * ny * nz
    dist = np.full(n, INF, np.float64)
    owner = np.full(n, -1, np.int64)
    noff, ndx, ndy, ndz, step = _neighbor_tables(nx, ny, nz, vx, vy, vz)

    cap = 1024
    hkey = np.empty(cap, np.float64)
    hval = np.empty(cap, np.int64)
    hsize = 0

    for s in range(sources.size):
        src = sources[s]
        if dist[src] == 0.0:
            continue  # duplicate seed voxel keeps the lower index
        dist[src] = 0.0
        owner[src] = s
        if hsize >= cap:
            ncap = cap * 2
            nk = np.empty(ncap, np.float64)
            nv = np.empty(ncap, np.int64)
            nk[:cap] = hkey
            nv[:cap] = hval
            hkey = nk
            hval = nv
            cap = ncap
        hkey[hsize] = 0.0
        hval[hsize] = src
        i = hsize
        hsize += 1
        while i > 0:
            p = (i - 1) // 2
            if hkey[p] <= hkey[i]:
                break
            hkey[p], hkey[i] = hkey[i], hkey[p]
            hval[p], hval[i] = hval[i], hval[p]
            i = p

    while hsize > 0:
        key = hkey[0]
        v = hval[0]
        hsize -= 1
        hkey[0] = hkey[hsize]
        hval[0] = hval[hsize]
        i = 0
        while True:
            l = 2 * i + 1
            r = l + 1
            m = i
            if l < hsize and hkey[l] < hkey[m]:
                m = l
            if r < hsize and hkey[r] < hkey[m]:
                m = r
            if m == i:
                break
            hkey[i], hkey[m] = hkey[m], hkey[i]
            hval[i], hval[m] = hval[m], hval[i]
            i = m
        if key > dist[v]:
            continue
        x = v % nx
        rem = v // nx
        y = rem % ny
        z = rem // ny
        for j in range(26):
            xx = x + ndx[j]
            if xx < 0 or xx >= nx:
                continue
            yy = y + ndy[j]
            if yy < 0 or yy >= ny:
                continue
            zz = z + ndz[j]
            if zz < 0 or zz >= nz:
                continue
            u = v + noff[j]
            if not mask[u]:
                continue
            nd = key + step[j]
            better = nd < dist[u]
            tie_lower = nd == dist[u] and owner[v] < owner[u]
            if better or tie_lower:
                dist[u] = nd
                owner[u] = owner[v]
                if hsize >= cap:
                    ncap = cap * 2
                    nk = np.empty(ncap, np.float64)
                    nv = np.empty(ncap, np.int64)
                    nk[:cap] = hkey
                    nv[:cap] = hval
                    hkey = nk
                    hval = nv
                    cap = ncap
                hkey[hsize] = nd
                hval[hsize] = u
                i = hsize
                hsize += 1
                while i > 0:
                    p = (i - 1) // 2
                    if hkey[p] <= hkey[i]:
                        break
                    hkey[p], hkey[i] = hkey[i], hkey[p]
                    hval[p], hval[i] = hval[i], hval[p]
                    i = p
    return dist, owner


def flat_index(x: int, y: int, z: int, dims: tuple[int, int, int]) -> int:
    return int(x) + dims[0] * (int(y) + dims[1] * int(z))


def unflatten(i: int, dims: tuple[int, int, int]) -> tuple[int, int, int]:
    x = i % dims[0]
    rem = i // dims[0]
    return (x, rem % dims[1], rem // dims[1])
