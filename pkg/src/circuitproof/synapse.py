"""Synapse-to-skeleton association, clustering, sorting, and branch classification.

Clusters group co-located synapses along neurite paths into non-overlapping
sets that can be validated jointly: traversal points are laid out every
``radius`` nm of arc length along each branch, nearby unassigned synapses
aggregate at each point, and every leftover synapse joins the cluster of its
nearest traversal point, so each synapse belongs to exactly one cluster.
Cluster order follows depth-first branch order and, within a branch, the
distance from the skeleton's root, which keeps clusters of one branch
contiguous in the browser.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.spatial import cKDTree

from .model import (
    Branch,
    ParameterError,
    PhysPoint,
    Skeleton,
    Synapse,
    SynapseCluster,
    SynapticElement,
    ValidationError,
    VolumeMeta,
)
from .skeletonize import all_geodesic_distances, decompose_branches

DEFAULT_CLUSTER_RADIUS_NM = 2000.0
DEFAULT_ASSOC_RADIUS_NM = 750.0

_TIE_EPS = 1e-9


@dataclass(frozen=True)
class AssociationSummary:
    anchored: int
    unanchored_element_ids: tuple[int, ...]


def _nearest_node(
    tree: cKDTree, node_ids: np.ndarray, pos: np.ndarray, max_dist: float | None = None
) -> tuple[int, float] | None:
    """Nearest skeleton node with ties (within 1e-9) broken to the lower node id."""
    k = min(16, node_ids.size)
    dists, idxs = tree.query(pos, k=k)
    dists = np.atleast_1d(dists)
    idxs = np.atleast_1d(idxs)
    valid = np.isfinite(dists)
    if not valid.any():
        return None
    dists, idxs = dists[valid], idxs[valid]
    if max_dist is not None and dists[0] > max_dist:
        return None
    tied = dists <= dists[0] + _TIE_EPS
    best = int(node_ids[idxs[tied]].min())
    return best, float(dists[0])


def associate(
    synapses: list[Synapse],
    skeletons: dict[int, Skeleton],
    labels: np.ndarray,
    meta: VolumeMeta,
    assoc_radius_nm: float = DEFAULT_ASSOC_RADIUS_NM,
) -> tuple[list[Synapse], AssociationSummary]:
    """Anchor each synaptic element to a skeleton node.

    Elements inside a voxel of a skeletonized object anchor to the nearest
    node of that object's skeleton.  Elements in background anchor to the
    nearest node of any skeleton within assoc_radius (their segment_id is
    updated to the anchored object so anchors stay consistent); everything
    else is left unanchored and reported in the summary.
    """
    per_object: dict[int, tuple[cKDTree, np.ndarray]] = {}
    all_pos: list[np.ndarray] = []
    all_ids: list[tuple[int, int]] = []  # (node_id, object_id)
    for oid, sk in skeletons.items():
        pos = np.array([n.pos.as_tuple() for n in sk.nodes])
        ids = np.array([n.id for n in sk.nodes])
        per_object[oid] = (cKDTree(pos), ids)
        all_pos.append(pos)
        all_ids.extend((int(n.id), oid) for n in sk.nodes)
    global_tree = cKDTree(np.concatenate(all_pos)) if all_pos else None

    vsize = np.asarray(meta.voxel_size)
    dims = np.asarray(meta.dims)

    def label_of(p: PhysPoint) -> int:
        v = np.floor(np.asarray(p.as_tuple()) / vsize).astype(int)
        if np.any(v < 0) or np.any(v >= dims):
            return 0
        return int(labels[v[0], v[1], v[2]])

    unanchored: list[int] = []
    anchored_count = 0

    def anchor_element(e: SynapticElement) -> SynapticElement:
        nonlocal anchored_count
        pos = np.asarray(e.pos.as_tuple())
        lbl = label_of(e.pos)
        if lbl != 0 and lbl in per_object:
            tree, ids = per_object[lbl]
            hit = _nearest_node(tree, ids, pos)
            if hit is not None:
                anchored_count += 1
                return replace(e, anchor_node=hit[0], segment_id=lbl)
        elif lbl == 0 and global_tree is not None:
            k = min(16, len(all_ids))
            dists, idxs = global_tree.query(pos, k=k)
            dists = np.atleast_1d(dists)
            idxs = np.atleast_1d(idxs)
            valid = np.isfinite(dists)
            if valid.any() and dists[valid][0] <= assoc_radius_nm:
                dists, idxs = dists[valid], idxs[valid]
                tied = np.flatnonzero(dists <= dists[0] + _TIE_EPS)
                node_id, oid = min((all_ids[int(idxs[t])] for t in tied))
                anchored_count += 1
                return replace(e, anchor_node=node_id, segment_id=oid)
        unanchored.append(e.id)
        return e

    out = []
    for syn in synapses:
        out.append(
            replace(
                syn,
                pre=anchor_element(syn.pre),
                posts=tuple(anchor_element(p) for p in syn.posts),
            )
        )
    return out, AssociationSummary(anchored=anchored_count, unanchored_element_ids=tuple(unanchored))


def anchored_element(syn: Synapse, object_id: int) -> SynapticElement | None:
    """The synapse's element anchored on the given cell (pre wins for autapses)."""
    if syn.pre.segment_id == object_id and syn.pre.anchor_node is not None:
        return syn.pre
    for e in syn.posts:
        if e.segment_id == object_id and e.anchor_node is not None:
            return e
    return None


@dataclass(frozen=True)
class _TraversalPoint:
    order: int
    branch_id: int
    arc_nm: float
    pos: np.ndarray
    anchor_node: int


def _traversal_points(skeleton: Skeleton, branches: list[Branch], radius: float) -> list[_TraversalPoint]:
    by_id = skeleton.node_map()
    points: list[_TraversalPoint] = []
    order = 0
    for branch in branches:
        pts = [np.asarray(by_id[nid].pos.as_tuple()) for nid in branch.node_ids]
        seg_len = [float(np.linalg.norm(b - a)) for a, b in zip(pts, pts[1:])]
        total = sum(seg_len)
        arcs = list(np.arange(0.0, total, radius)) if total > 0 else [0.0]
        if not arcs or total - arcs[-1] > 1e-9:
            arcs.append(total)  # one extra point at the branch end
        cum = np.concatenate(([0.0], np.cumsum(seg_len))) if seg_len else np.array([0.0])
        for arc in arcs:
            seg = int(np.searchsorted(cum, arc, side="right")) - 1
            seg = min(max(seg, 0), max(len(seg_len) - 1, 0))
            if seg_len:
                u = (arc - cum[seg]) / seg_len[seg] if seg_len[seg] > 0 else 0.0
                pos = pts[seg] + u * (pts[seg + 1] - pts[seg])
            else:
                pos = pts[0]
            anchor = branch.node_ids[seg] if seg_len else branch.node_ids[0]
            points.append(
                _TraversalPoint(order=order, branch_id=branch.id, arc_nm=arc, pos=pos, anchor_node=anchor)
            )
            order += 1
    return points


def form_clusters(
    skeleton: Skeleton,
    synapses: list[Synapse],
    radius_nm: float = DEFAULT_CLUSTER_RADIUS_NM,
    branches: list[Branch] | None = None,
) -> list[SynapseCluster]:
    """Group the cell's anchored synapses into disjoint clusters along branches."""
    if radius_nm <= 0:
        raise ParameterError(f"cluster radius must be positive, got {radius_nm}")
    members_pos: dict[int, np.ndarray] = {}
    for syn in synapses:
        e = anchored_element(syn, skeleton.object_id)
        if e is None:
            raise ValidationError(f"synapse {syn.id} is not anchored to object {skeleton.object_id}")
        members_pos[syn.id] = np.asarray(e.pos.as_tuple())
    if not members_pos:
        return []

    if branches is None:
        branches = decompose_branches(skeleton)
    points = _traversal_points(skeleton, branches, radius_nm)

    sids = sorted(members_pos)
    positions = np.array([members_pos[s] for s in sids])
    assigned: dict[int, int] = {}  # synapse id -> traversal point order
    point_cluster: dict[int, list[int]] = {}  # point order -> member synapse ids

    for tp in points:
        d = np.linalg.norm(positions - tp.pos, axis=1)
        hit = [sids[i] for i in np.flatnonzero(d <= radius_nm) if sids[i] not in assigned]
        if hit:
            point_cluster[tp.order] = hit
            for sid in hit:
                assigned[sid] = tp.order

    # leftovers join the cluster of their nearest traversal point (earliest on ties)
    point_coords = np.array([tp.pos for tp in points])
    for i, sid in enumerate(sids):
        if sid in assigned:
            continue
        d = np.linalg.norm(point_coords - positions[i], axis=1)
        best = int(np.flatnonzero(d == d.min())[0])
        point_cluster.setdefault(best, []).append(sid)
        assigned[sid] = best

    clusters: list[SynapseCluster] = []
    cid = 1
    by_order = {tp.order: tp for tp in points}
    for order in sorted(point_cluster):
        tp = by_order[order]
        member_ids = frozenset(point_cluster[order])
        centroid = np.mean([members_pos[s] for s in member_ids], axis=0)
        clusters.append(
            SynapseCluster(
                id=cid,
                member_ids=member_ids,
                centroid=PhysPoint(*centroid),
                anchor_node=tp.anchor_node,
                branch_id=tp.branch_id,
                order_index=cid - 1,  # provisional; sort_clusters assigns the final order
            )
        )
        cid += 1
    return clusters


def sort_clusters(clusters: list[SynapseCluster], skeleton: Skeleton) -> list[SynapseCluster]:
    """Assign order_index: depth-first branch order, then root distance within a branch."""
    if not clusters:
        return []
    geo = all_geodesic_distances(skeleton)
    ordered = sorted(
        clusters, key=lambda c: (c.branch_id, geo.get(c.anchor_node, 0.0), c.anchor_node, c.id)
    )
    return [replace(c, order_index=i) for i, c in enumerate(ordered)]


def node_branch_map(branches: list[Branch]) -> dict[int, int]:
    """Owning branch per node: the branch where the node is interior or distal."""
    owner: dict[int, int] = {}
    for b in branches:
        for nid in b.node_ids[1:]:
            owner[nid] = b.id
    if branches:
        owner.setdefault(branches[0].node_ids[0], branches[0].id)
    return owner


def classify_branches(
    skeleton: Skeleton, branches: list[Branch], synapses: list[Synapse]
) -> list[Branch]:
    """Axon/dendrite/miscellaneous per branch from resident pre/post counts.

    Branches holding more presynaptic than postsynaptic contacts become axons,
    the reverse dendrites, and everything else (no contacts, or a tie) is
    miscellaneous.  User-set classes are never overwritten.
    """
    owner = node_branch_map(branches)
    pre_counts: dict[int, int] = {b.id: 0 for b in branches}
    post_counts: dict[int, int] = {b.id: 0 for b in branches}
    for syn in synapses:
        e = anchored_element(syn, skeleton.object_id)
        if e is None or e.anchor_node not in owner:
            continue
        bid = owner[e.anchor_node]
        if e.kind == "pre":
            pre_counts[bid] += 1
        else:
            post_counts[bid] += 1
    out = []
    for b in branches:
        if b.class_source == "user":
            out.append(b)
            continue
        pre, post = pre_counts[b.id], post_counts[b.id]
        if pre > post:
            cls = "axon"
        elif post > pre:
            cls = "dendrite"
        else:
            cls = "miscellaneous"
        out.append(replace(b, cls=cls, class_source="automatic"))
    return out


def bulk_set(log, targets: list[int], field: str, value: str, author: str = "pipeline") -> int:
    """Apply one status/class value to many synapses through a single edit.

    Any unknown id rejects the whole operation; on success the count of
    updated synapses is returned and exactly one log entry exists.
    """
    if field == "status":
        log.apply("SetStatus", {"ids": list(targets), "status": value}, author=author)
    elif field == "class_label":
        log.apply("SetClass", {"target": "synapse", "ids": list(targets), "label": value}, author=author)
    else:
        raise ParameterError(f"bulk_set field must be status or class_label, got {field!r}")
    return len(targets)
