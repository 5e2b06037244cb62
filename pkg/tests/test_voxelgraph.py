"""Kernel checks against a literal pure-Python Dijkstra oracle."""

import heapq
import math

import numpy as np

from circuitproof.voxelgraph import multi_source_geodesic, penalized_dijkstra


def oracle_dijkstra(mask, voxel_size, sources, penalty=None):
    """Reference shortest paths; returns (dist, owner) dicts keyed by (x,y,z)."""
    nx, ny, nz = mask.shape
    dist = {}
    owner = {}
    heap = []
    for idx, s in enumerate(sources):
        dist[s] = 0.0
        owner[s] = idx
        heapq.heappush(heap, (0.0, idx, s))
    while heap:
        d, o, v = heapq.heappop(heap)
        if d > dist.get(v, math.inf) or (d == dist.get(v) and o > owner[v]):
            continue
        x, y, z = v
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                for dz in (-1, 0, 1):
                    if dx == dy == dz == 0:
                        continue
                    u = (x + dx, y + dy, z + dz)
                    if not (0 <= u[0] < nx and 0 <= u[1] < ny and 0 <= u[2] < nz):
                        continue
                    if not mask[u]:
                        continue
                    step = math.sqrt(
                        (dx * voxel_size[0]) ** 2
                        + (dy * voxel_size[1]) ** 2
                        + (dz * voxel_size[2]) ** 2
                    )
                    w = step * (penalty[u] if penalty is not None else 1.0)
                    nd = d + w
                    better = nd < dist.get(u, math.inf)
                    tie = nd == dist.get(u, math.inf) and o < owner.get(u, 1 << 30)
                    if better or tie:
                        dist[u] = nd
                        owner[u] = o
                        heapq.heappush(heap, (nd, o, u))
    return dist, owner


def flatten(mask):
    return mask.ravel(order="F")


def test_single_source_matches_oracle():
    rng = np.random.default_rng(42)
    for trial in range(6):
        dims = tuple(rng.integers(3, 7) for _ in range(3))
        mask = rng.random(dims) < 0.7
        vsize = tuple(rng.choice([5.0, 10.0, 30.0]) for _ in range(3))
        obj = np.argwhere(mask)
        if obj.size == 0:
            continue
        src = tuple(obj[0])
        penalty = 1.0 + rng.random(dims)
        dist, parent = penalized_dijkstra(
            flatten(mask), dims[0], dims[1], dims[2],
            vsize[0], vsize[1], vsize[2],
            penalty.ravel(order="F"),
            src[0] + dims[0] * (src[1] + dims[1] * src[2]),
        )
        ref, _ = oracle_dijkstra(mask, vsize, [src], penalty)
        for (x, y, z), d in ref.items():
            flat = x + dims[0] * (y + dims[1] * z)
            assert abs(dist[flat] - d) < 1e-9
        # unreached voxels stay infinite both ways
        for v in np.argwhere(mask):
            flat = v[0] + dims[0] * (v[1] + dims[1] * v[2])
            if tuple(v) not in ref:
                assert not np.isfinite(dist[flat])


def test_multi_source_matches_oracle_with_ties():
    rng = np.random.default_rng(7)
    for trial in range(6):
        dims = tuple(rng.integers(3, 7) for _ in range(3))
        mask = rng.random(dims) < 0.8
        obj = np.argwhere(mask)
        if obj.shape[0] < 2:
            continue
        picks = rng.choice(obj.shape[0], size=2, replace=False)
        sources = [tuple(obj[p]) for p in picks]
        vsize = (10.0, 10.0, 10.0)
        flat_sources = np.array(
            [s[0] + dims[0] * (s[1] + dims[1] * s[2]) for s in sources], dtype=np.int64
        )
        dist, owner = multi_source_geodesic(
            flatten(mask), dims[0], dims[1], dims[2], *vsize, flat_sources
        )
        ref_dist, ref_owner = oracle_dijkstra(mask, vsize, sources)
        for (x, y, z), d in ref_dist.items():
            flat = x + dims[0] * (y + dims[1] * z)
            assert abs(dist[flat] - d) < 1e-9
            assert owner[flat] == ref_owner[(x, y, z)]


def test_exact_tie_prefers_lower_seed():
    mask = np.ones((5, 1, 1), bool)
    sources = np.array([0, 4], dtype=np.int64)
    _, owner = multi_source_geodesic(flatten(mask), 5, 1, 1, 10.0, 10.0, 10.0, sources)
    # middle voxel is exactly 20 nm from both seeds
    assert owner[2] == 0
    assert owner.tolist() == [0, 0, 0, 1, 1]
