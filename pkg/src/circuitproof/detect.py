"""Likely-connectivity-error detection along skeletons.

Three detectors emit ErrorROIs: broken neurites (the extracted object mask
runs past a skeleton endpoint into foreign labels), disconnected neurites
(an interior endpoint with no synapse within a radial check distance), and
invalid branches (a child whose forward vector opposes its stem at the
junction).  Merge errors are not detected automatically; assisted search
along a branch is provided instead.

The mask extractor is pluggable; the default binarizes the window image at a
fixed threshold, closes gaps of up to ``bridge_slices`` sections along the
slice axis, and keeps the 26-connected component containing the seed.  A
learned model can be dropped in behind the same interface.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Protocol

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .model import (
    Branch,
    ErrorROI,
    NotFoundError,
    ParameterError,
    PhysPoint,
    Skeleton,
    Synapse,
    VolumeMeta,
    VoxelCoord,
)
from .skeletonize import branch_arc_length, decompose_branches, point_along_branch
from .store import Subvolume, VolumeStore, read_region

logger = logging.getLogger(__name__)

SLICE_AXIS = 2  # EM sections stack along z; gaps between sections close along it


class MaskExtractor(Protocol):
    def extract(self, window: Subvolume, seed: VoxelCoord) -> np.ndarray:
        """Binary mask over the window; contains the seed voxel or is empty.

        The seed is in window-local voxel coordinates.  The returned mask is
        a single 26-connected component.
        """
        ...


def _fill_short_zero_runs(mask: np.ndarray, axis: int, max_len: int) -> np.ndarray:
    """Fill 0-runs of length <= max_len that are bounded by 1s on both sides."""
    if max_len <= 0:
        return mask
    moved = np.moveaxis(mask, axis, -1)
    flat = moved.reshape(-1, moved.shape[-1]).copy()
    n, length = flat.shape
    run_start = np.full(n, -1, dtype=np.int64)  # start of the current zero run
    seen_one = np.zeros(n, dtype=bool)
    for k in range(length):
        col = flat[:, k]
        opening = (~col) & seen_one & (run_start < 0)
        run_start[opening] = k
        closing = col & (run_start >= 0)
        if closing.any():
            idx = np.flatnonzero(closing)
            for i in idx:
                if k - run_start[i] <= max_len:
                    flat[i, run_start[i]: k] = True
            run_start[closing] = -1
        run_start[col & (run_start >= 0)] = -1
        seen_one |= col
    out = flat.reshape(moved.shape)
    return np.moveaxis(out, -1, axis)


@dataclass(frozen=True)
class ThresholdMaskExtractor:
    """Deterministic stand-in for a learned mask model."""

    threshold: int = 115
    bridge_slices: int = 3

    def extract(self, window: Subvolume, seed: VoxelCoord) -> np.ndarray:
        binary = window.image >= self.threshold
        binary = _fill_short_zero_runs(binary, SLICE_AXIS, self.bridge_slices)
        sx, sy, sz = window.shape
        if not (0 <= seed.x < sx and 0 <= seed.y < sy and 0 <= seed.z < sz):
            return np.zeros(window.shape, dtype=bool)
        if not binary[seed.x, seed.y, seed.z]:
            return np.zeros(window.shape, dtype=bool)
        structure = np.ones((3, 3, 3), dtype=bool)
        components, _ = ndimage.label(binary, structure=structure)
        return components == components[seed.x, seed.y, seed.z]


def default_mask_extractor(threshold: int = 115, bridge_slices: int = 3) -> ThresholdMaskExtractor:
    return ThresholdMaskExtractor(threshold=threshold, bridge_slices=bridge_slices)


@dataclass(frozen=True)
class BrokenParams:
    window_slices: int = 10
    window_xy: int = 129
    overhang_nm: float = 100.0
    min_overhang_voxels: int = 10
    vector_arc_nm: float = 500.0


@dataclass(frozen=True)
class InvalidBranchParams:
    vector_arc_nm: float = 500.0
    cos_threshold: float = -0.5


@dataclass(frozen=True)
class InspectionAnchor:
    pos: PhysPoint
    forward: tuple[float, float, float]


def _endpoints(skeleton: Skeleton) -> list[int]:
    """Leaf nodes plus the root when it has at most one child, sorted by id."""
    children = skeleton.children_map()
    eps = [nid for nid, ch in children.items() if not ch]
    if len(children.get(skeleton.root_id, [])) <= 1 and skeleton.root_id not in eps:
        eps.append(skeleton.root_id)
    return sorted(eps)


def _trail_from(skeleton: Skeleton, endpoint: int, arc_nm: float) -> list[int]:
    """Node chain approaching the endpoint, covering about arc_nm of path."""
    by_id = skeleton.node_map()
    children = skeleton.children_map()
    chain = [endpoint]
    acc = 0.0
    if endpoint == skeleton.root_id:
        cur = endpoint
        while acc < arc_nm and len(children[cur]) == 1:
            nxt = children[cur][0]
            acc += by_id[cur].pos.distance_to(by_id[nxt].pos)
            chain.append(nxt)
            cur = nxt
    else:
        cur = by_id[endpoint]
        while acc < arc_nm and cur.parent is not None:
            nxt = by_id[cur.parent]
            acc += cur.pos.distance_to(nxt.pos)
            chain.append(nxt.id)
            cur = nxt
    return chain


def _forward_vector(skeleton: Skeleton, endpoint: int, arc_nm: float) -> np.ndarray | None:
    chain = _trail_from(skeleton, endpoint, arc_nm)
    if len(chain) < 2:
        return None
    by_id = skeleton.node_map()
    tip = np.asarray(by_id[chain[0]].pos.as_tuple())
    back = np.asarray(by_id[chain[-1]].pos.as_tuple())
    v = tip - back
    norm = np.linalg.norm(v)
    return v / norm if norm > 0 else None


def detect_broken(
    store: VolumeStore,
    skeleton: Skeleton,
    extractor: MaskExtractor,
    params: BrokenParams = BrokenParams(),
    start_id: int = 1,
) -> list[ErrorROI]:
    """Flag endpoints where the extracted mask extends into foreign labels.

    Each endpoint is retraced with a sliding window of ``window_slices``
    sections along the dominant travel axis; the union of extracted masks is
    tested for an overhang past the endpoint into voxels not carrying the
    object's label.  Extractor failures skip the endpoint, never the cell.
    """
    meta = store.meta
    labels = store.read_full("labels")
    vsize = np.asarray(meta.voxel_size)
    dims = meta.dims
    by_id = skeleton.node_map()
    rois: list[ErrorROI] = []
    next_id = start_id

    for endpoint in _endpoints(skeleton):
        forward = _forward_vector(skeleton, endpoint, params.vector_arc_nm)
        if forward is None:
            continue
        axis = int(np.argmax(np.abs(forward)))
        sign = 1 if forward[axis] >= 0 else -1
        e_pos = np.asarray(by_id[endpoint].pos.as_tuple())
        e_vox = np.floor(e_pos / vsize).astype(int)

        trail = _trail_from(skeleton, endpoint, 4 * params.window_slices * float(vsize[axis]))
        trail_pos = np.array([by_id[n].pos.as_tuple() for n in trail])

        shape = [params.window_xy] * 3
        shape[axis] = params.window_slices
        union: set[int] = set()
        failed = False
        # slide from window_slices-1 sections before the endpoint to the same
        # distance past it, so overhangs beyond the endpoint stay in view
        for k in range(2 * params.window_slices - 1):
            s_k = int(e_vox[axis]) - sign * (params.window_slices - 1 - k)
            if not 0 <= s_k < dims[axis]:
                continue
            plane_nm = (s_k + 0.5) * float(vsize[axis])
            nearest = int(np.argmin(np.abs(trail_pos[:, axis] - plane_nm)))
            center = np.floor(trail_pos[nearest] / vsize).astype(int)
            center[axis] = s_k
            center = np.clip(center, 0, np.asarray(dims) - 1)
            sub = read_region(store, VoxelCoord(*center), tuple(shape))
            seed_vox = np.floor(trail_pos[nearest] / vsize).astype(int)
            seed_local = seed_vox - np.asarray(sub.origin)
            try:
                mask = extractor.extract(sub, VoxelCoord(*np.clip(seed_local, 0, np.asarray(shape) - 1)))
            except Exception as exc:  # detector never aborts the whole cell
                logger.warning("mask extractor failed at endpoint %d of object %d: %s",
                               endpoint, skeleton.object_id, exc)
                failed = True
                break
            if not mask.any():
                continue
            loc = np.argwhere(mask)
            glob = loc + np.asarray(sub.origin)
            inb = np.all((glob >= 0) & (glob < np.asarray(dims)), axis=1)
            glob = glob[inb]
            flat = glob[:, 0] + dims[0] * (glob[:, 1] + dims[1] * glob[:, 2])
            union.update(flat.tolist())
        if failed or not union:
            continue

        flat = np.fromiter(union, dtype=np.int64)
        gx = flat % dims[0]
        rem = flat // dims[0]
        gy = rem % dims[1]
        gz = rem // dims[1]
        centers = (np.stack([gx, gy, gz], axis=1) + 0.5) * vsize
        proj = (centers - e_pos) @ forward
        past = proj > 1e-9
        if not past.any():
            continue
        vox_labels = labels[gx[past], gy[past], gz[past]]
        foreign = vox_labels != skeleton.object_id
        count = int(foreign.sum())
        if count < params.min_overhang_voxels:
            continue
        overhang = float(proj[past][foreign].max())
        if overhang < params.overhang_nm:
            continue
        foreign_labels = vox_labels[foreign]
        nonzero = foreign_labels[foreign_labels != 0]
        if nonzero.size:
            values, freq = np.unique(nonzero, return_counts=True)
            candidate = int(values[np.argmax(freq)])
        else:
            candidate = 0
        rois.append(
            ErrorROI(
                id=next_id,
                kind="broken",
                center=by_id[endpoint].pos,
                radius=max(overhang, float(vsize.max())),
                cell_id=skeleton.object_id,
                evidence={
                    "overhang_nm": overhang,
                    "candidate_label": candidate,
                    "overhang_voxels": count,
                    "endpoint_node": endpoint,
                },
            )
        )
        next_id += 1
    return rois


def detect_disconnected(
    skeleton: Skeleton,
    synapses: list[Synapse],
    rho_nm: float,
    meta: VolumeMeta,
    start_id: int = 1,
) -> list[ErrorROI]:
    """Radial check for synapses around interior non-root endpoints.

    Endpoints within rho of a volume face are exempt: the neurite may simply
    continue into a neighboring volume.
    """
    if rho_nm <= 0:
        raise ParameterError(f"rho must be positive, got {rho_nm}")
    by_id = skeleton.node_map()
    children = skeleton.children_map()
    element_pos = np.array(
        [e.pos.as_tuple() for syn in synapses for e in syn.elements()]
    )
    tree = cKDTree(element_pos) if element_pos.size else None
    extent = np.asarray(meta.physical_extent)
    rois: list[ErrorROI] = []
    next_id = start_id
    for endpoint in _endpoints(skeleton):
        if endpoint == skeleton.root_id or children[endpoint]:
            continue
        pos = np.asarray(by_id[endpoint].pos.as_tuple())
        face_dist = float(min(pos.min(), (extent - pos).min()))
        if face_dist <= rho_nm:
            continue
        nearest = float(tree.query(pos, k=1)[0]) if tree is not None else math.inf
        if nearest > rho_nm:
            rois.append(
                ErrorROI(
                    id=next_id,
                    kind="disconnected",
                    center=by_id[endpoint].pos,
                    radius=rho_nm,
                    cell_id=skeleton.object_id,
                    evidence={"nearest_synapse_nm": nearest, "endpoint_node": endpoint},
                )
            )
            next_id += 1
    return rois


def detect_invalid_branch(
    skeleton: Skeleton,
    branches: list[Branch],
    params: InvalidBranchParams = InvalidBranchParams(),
    start_id: int = 1,
) -> list[ErrorROI]:
    """Flag children whose forward vector opposes the stem at a junction.

    Forward vectors are chords over ``vector_arc_nm`` of path: the stem's
    chord approaching the junction (away from the root) and each child's
    chord leaving it.  A child with dot(child, stem) < cos_threshold is
    flagged.  Junctions with a stem shorter than one edge fall back to the
    single incoming edge; the root junction has no stem and is skipped.
    """
    by_id = skeleton.node_map()
    rois: list[ErrorROI] = []
    next_id = start_id
    junctions = sorted({b.node_ids[0] for b in branches if len(b.node_ids) > 1})
    for junction in junctions:
        node = by_id[junction]
        out_branches = [b for b in branches if b.node_ids[0] == junction and len(b.node_ids) > 1]
        if len(out_branches) < 2:
            continue  # not a junction, just a path continuation
        if node.parent is None:
            continue  # root junction: no incoming stem
        stem = _forward_vector(skeleton, junction, params.vector_arc_nm)
        if stem is None:
            continue
        for b in sorted(out_branches, key=lambda b: b.id):
            pos, _ = point_along_branch(skeleton, b, params.vector_arc_nm)
            v = np.asarray(pos.as_tuple()) - np.asarray(node.pos.as_tuple())
            norm = np.linalg.norm(v)
            if norm == 0:
                continue
            dot = float((v / norm) @ stem)
            if dot < params.cos_threshold:
                rois.append(
                    ErrorROI(
                        id=next_id,
                        kind="invalid_branch",
                        center=node.pos,
                        radius=params.vector_arc_nm,
                        cell_id=skeleton.object_id,
                        evidence={"dot": dot, "child_branch_id": b.id, "junction_node": junction},
                    )
                )
                next_id += 1
    return rois


def assist_merge_search(skeleton: Skeleton, branch_id: int, t_nm: float) -> InspectionAnchor:
    """Inspector attachment point at arc position t along a branch (clamped)."""
    branches = decompose_branches(skeleton)
    for b in branches:
        if b.id == branch_id:
            t = min(max(t_nm, 0.0), branch_arc_length(skeleton, b))
            pos, tangent = point_along_branch(skeleton, b, t)
            return InspectionAnchor(pos=pos, forward=tangent)
    raise NotFoundError(f"unknown branch {branch_id}")
