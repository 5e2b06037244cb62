"""Center-line tree extraction from labeled volumes.

TEASAR-style procedure per object: compute the distance-to-boundary field
(DBF) over the object's voxels, root the tree at the voxel nearest a soma
hint (else the DBF maximum), then repeatedly trace the penalized shortest
path from the root to the farthest still-valid voxel, emitting nodes with
radius = local DBF and invalidating everything within
``invalidation_scale * DBF + invalidation_const`` of each path node.  Paths
merge into the existing tree at the first voxel that already carries a node.

The penalty field is ``1 + K * (1 - DBF/DBF_max)^4`` with K = 1e4, which
pulls paths onto centerlines.  DBF and path costs are computed in physical
nm, so anisotropic voxels are handled correctly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .model import Branch, NotFoundError, PhysPoint, Skeleton, SkeletonNode
from .store import VolumeStore
from .voxelgraph import penalized_dijkstra

PENALTY_STRENGTH = 1.0e4
PENALTY_EXPONENT = 4


@dataclass(frozen=True)
class SkeletonParams:
    invalidation_scale: float = 3.0
    invalidation_const_nm: float = 200.0
    min_branch_len_nm: float = 300.0


def skeletonize(
    store: VolumeStore,
    object_id: int,
    params: SkeletonParams = SkeletonParams(),
    soma_hint: PhysPoint | None = None,
) -> Skeleton:
    """Extract the rooted center-line tree of one labeled object."""
    return skeletonize_labels(
        store.read_full("labels"), store.meta.voxel_size, object_id, params, soma_hint
    )


def skeletonize_labels(
    labels: np.ndarray,
    voxel_size: tuple[float, float, float],
    object_id: int,
    params: SkeletonParams = SkeletonParams(),
    soma_hint: PhysPoint | None = None,
) -> Skeleton:
    """skeletonize() over an in-memory label array (e.g. materialized edits)."""
    vsize = np.asarray(voxel_size, dtype=float)
    coords = np.argwhere(labels == object_id)
    if coords.shape[0] == 0:
        raise NotFoundError(f"object {object_id} not present in labels")

    # crop to the object's bounding box with a 1-voxel background border
    lo = coords.min(axis=0) - 1
    hi = coords.max(axis=0) + 2
    lo = np.maximum(lo, 0)
    hi = np.minimum(hi, labels.shape)
    box = tuple(int(h - l) for l, h in zip(lo, hi))
    mask = np.zeros(box, dtype=bool)
    local = coords - lo
    mask[local[:, 0], local[:, 1], local[:, 2]] = True
    padded = np.pad(mask, 1)
    dbf_padded = ndimage.distance_transform_edt(padded, sampling=vsize)
    dbf = dbf_padded[1:-1, 1:-1, 1:-1]

    # voxel centers in physical space
    positions = (coords + 0.5) * vsize

    if coords.shape[0] == 1:
        radius = float(dbf[local[0, 0], local[0, 1], local[0, 2]])
        node = SkeletonNode(
            id=1, pos=PhysPoint(*positions[0]), radius=max(radius, float(vsize.min()) / 2), parent=None
        )
        return Skeleton(object_id=object_id, nodes=(node,), root_id=1)

    dbf_obj = dbf[mask]
    dbf_max = float(dbf_obj.max())

    if soma_hint is not None:
        hint = np.asarray(soma_hint.as_tuple(), dtype=float)
        root_obj = int(np.argmin(((positions - hint) ** 2).sum(axis=1)))
    else:
        root_obj = int(np.argmax(dbf_obj))

    nx, ny, nz = box
    mask_flat = mask.ravel(order="F")
    penalty = np.ones(nx * ny * nz, dtype=np.float64)
    dbf_flat = dbf.ravel(order="F")
    obj_flat = (local[:, 0] + nx * (local[:, 1] + ny * local[:, 2])).astype(np.int64)
    penalty[obj_flat] = 1.0 + PENALTY_STRENGTH * (
        1.0 - dbf_flat[obj_flat] / dbf_max
    ) ** PENALTY_EXPONENT

    def run_dijkstra(source_flat: int):
        return penalized_dijkstra(
            mask_flat,
            nx, ny, nz,
            float(vsize[0]), float(vsize[1]), float(vsize[2]),
            penalty,
            source_flat,
        )

    tree = cKDTree(positions)
    invalidated = np.zeros(coords.shape[0], dtype=bool)

    obj_index_of_flat = np.full(nx * ny * nz, -1, dtype=np.int64)
    obj_index_of_flat[obj_flat] = np.arange(coords.shape[0])

    node_at = np.full(nx * ny * nz, -1, dtype=np.int64)  # flat voxel -> node id
    nodes: dict[int, SkeletonNode] = {}
    next_id = 1

    def emit(flat_idx: int, parent_id: int | None) -> int:
        nonlocal next_id
        obj_i = int(obj_index_of_flat[flat_idx])
        radius = float(dbf_flat[flat_idx])
        node = SkeletonNode(
            id=next_id,
            pos=PhysPoint(*positions[obj_i]),
            radius=max(radius, float(vsize.min()) / 2),
            parent=parent_id,
        )
        nodes[next_id] = node
        node_at[flat_idx] = next_id
        next_id += 1
        return node.id

    def invalidate_around(flat_idx: int) -> None:
        obj_i = int(obj_index_of_flat[flat_idx])
        r = params.invalidation_scale * float(dbf_flat[flat_idx]) + params.invalidation_const_nm
        for hit in tree.query_ball_point(positions[obj_i], r):
            invalidated[hit] = True

    root_flat = int(obj_flat[root_obj])
    root_id = emit(root_flat, None)
    invalidate_around(root_flat)
    dist, parent = run_dijkstra(root_flat)

    def consume_component():
        """Emit paths to the farthest valid voxels until the component is spent."""
        obj_dist = dist[obj_flat]
        while True:
            candidates = np.flatnonzero(~invalidated & np.isfinite(obj_dist))
            if candidates.size == 0:
                return
            target_obj = int(candidates[np.argmax(obj_dist[candidates])])
            target_flat = int(obj_flat[target_obj])

            # walk the predecessor chain until we meet the existing tree
            chain: list[int] = []
            cur = target_flat
            while cur != -1 and node_at[cur] == -1:
                chain.append(cur)
                cur = int(parent[cur])
            attach_id = int(node_at[cur]) if cur != -1 else root_id

            # chain runs target -> ... -> first new voxel below the attach node
            parent_id = attach_id
            for flat_idx in reversed(chain):
                parent_id = emit(flat_idx, parent_id)
                invalidate_around(flat_idx)
            if not chain:
                invalidated[target_obj] = True  # degenerate: target already on the tree

    consume_component()
    # disconnected same-label components (e.g. after an object-level merge
    # across a gap) join the tree through a jump edge to the nearest node
    while True:
        remaining = np.flatnonzero(~invalidated)
        if remaining.size == 0:
            break
        node_ids = list(nodes)
        node_pos = np.array([nodes[nid].pos.as_tuple() for nid in node_ids])
        node_tree = cKDTree(node_pos)
        d, nearest = node_tree.query(positions[remaining])
        pick = int(np.argmin(d))
        entry_obj = int(remaining[pick])
        entry_flat = int(obj_flat[entry_obj])
        attach = int(node_ids[int(np.atleast_1d(nearest)[pick])])
        emit(entry_flat, attach)
        invalidate_around(entry_flat)
        dist, parent = run_dijkstra(entry_flat)
        consume_component()

    skeleton = Skeleton(object_id=object_id, nodes=tuple(nodes.values()), root_id=root_id)
    if params.min_branch_len_nm > 0:
        skeleton = prune_short_branches(skeleton, params.min_branch_len_nm)
    return skeleton


# -- tree geometry -------------------------------------------------------------


def _edge_length(a: SkeletonNode, b: SkeletonNode) -> float:
    return a.pos.distance_to(b.pos)


def _ordered_children(s: Skeleton) -> dict[int, list[int]]:
    """Children sorted by descending longest downstream arc, ties by lower id."""
    by_id = s.node_map()
    children = s.children_map()
    longest: dict[int, float] = {}

    order = _topo_order(s)
    for nid in reversed(order):
        best = 0.0
        for c in children[nid]:
            cand = longest[c] + _edge_length(by_id[nid], by_id[c])
            if cand > best:
                best = cand
        longest[nid] = best
    for nid in children:
        children[nid].sort(key=lambda c: (-(longest[c] + _edge_length(by_id[nid], by_id[c])), c))
    return children


def _topo_order(s: Skeleton) -> list[int]:
    """Root-first order; children after parents."""
    children = s.children_map()
    order: list[int] = []
    stack = [s.root_id]
    while stack:
        nid = stack.pop()
        order.append(nid)
        stack.extend(reversed(children[nid]))
    return order


def decompose_branches(s: Skeleton) -> list[Branch]:
    """Split the tree into maximal paths between root/junction/leaf endpoints.

    Branch ids follow depth-first emission order with children visited
    main-branch first (descending subtree path length, ties by lower node
    id), so the decomposition is deterministic.
    """
    children = _ordered_children(s)
    if len(s.nodes) == 1:
        return [Branch(id=1, node_ids=(s.root_id,))]

    branches: list[Branch] = []
    next_branch = 1
    # stack of (start endpoint, first child toward the branch)
    stack: list[tuple[int, int]] = []
    root_children = children[s.root_id]
    for c in reversed(root_children):
        stack.append((s.root_id, c))
    while stack:
        start, cur = stack.pop()
        path = [start, cur]
        while len(children[cur]) == 1:
            cur = children[cur][0]
            path.append(cur)
        branches.append(Branch(id=next_branch, node_ids=tuple(path)))
        next_branch += 1
        for c in reversed(children[cur]):
            stack.append((cur, c))
    return branches


def geodesic_distance(s: Skeleton, node_id: int) -> float:
    """Arc length along the unique root path, nm."""
    by_id = s.node_map()
    if node_id not in by_id:
        raise NotFoundError(f"unknown node {node_id}")
    total = 0.0
    cur = by_id[node_id]
    while cur.parent is not None:
        parent = by_id[cur.parent]
        total += _edge_length(cur, parent)
        cur = parent
    return total


def all_geodesic_distances(s: Skeleton) -> dict[int, float]:
    by_id = s.node_map()
    out: dict[int, float] = {s.root_id: 0.0}
    for nid in _topo_order(s):
        if nid == s.root_id:
            continue
        node = by_id[nid]
        out[nid] = out[node.parent] + _edge_length(node, by_id[node.parent])
    return out


def branch_arc_length(s: Skeleton, branch: Branch) -> float:
    by_id = s.node_map()
    total = 0.0
    for a, b in zip(branch.node_ids, branch.node_ids[1:]):
        total += _edge_length(by_id[a], by_id[b])
    return total


def point_along_branch(s: Skeleton, branch: Branch, t_nm: float) -> tuple[PhysPoint, tuple[float, float, float]]:
    """Interpolated position and unit tangent at arc length t (clamped)."""
    by_id = s.node_map()
    pts = [np.asarray(by_id[nid].pos.as_tuple()) for nid in branch.node_ids]
    if len(pts) == 1:
        return by_id[branch.node_ids[0]].pos, (0.0, 0.0, 0.0)
    segs = [np.linalg.norm(b - a) for a, b in zip(pts, pts[1:])]
    total = float(sum(segs))
    t = min(max(t_nm, 0.0), total)
    acc = 0.0
    for a, b, ln in zip(pts, pts[1:], segs):
        if ln == 0.0:
            continue
        if acc + ln >= t or (a is pts[-2] and b is pts[-1]):
            u = (t - acc) / ln
            pos = a + u * (b - a)
            tangent = (b - a) / ln
            return PhysPoint(*pos), tuple(tangent)
        acc += ln
    tangent = (pts[-1] - pts[-2]) / segs[-1] if segs[-1] > 0 else np.zeros(3)
    return PhysPoint(*pts[-1]), tuple(tangent)


def prune_short_branches(s: Skeleton, min_len_nm: float) -> Skeleton:
    """Drop leaf branches shorter than min_len_nm; repeats until stable."""
    nodes = dict(s.node_map())
    while True:
        current = Skeleton(object_id=s.object_id, nodes=tuple(nodes.values()), root_id=s.root_id)
        branches = decompose_branches(current)
        if len(branches) <= 1:
            return current
        children = current.children_map()
        removed = False
        for b in branches:
            tip = b.node_ids[-1]
            if children[tip]:
                continue  # not a leaf branch
            if branch_arc_length(current, b) >= min_len_nm:
                continue
            for nid in b.node_ids[1:]:
                nodes.pop(nid, None)
            removed = True
            break  # recompute decomposition after each removal
        if not removed:
            return current
