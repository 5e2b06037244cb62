"""Batch pipeline stages over a store directory.

Each stage reads the store plus earlier artifacts and writes its own artifact
files next to the chunk data (the chunk data itself is never touched):

    skeletons/<id>.txt   one per labeled object
    associations.txt     element_id, segment_id, anchor_node
    clusters/<id>.txt    one per cell with anchored synapses
    rois.txt             all detected error ROIs

Stages are deterministic, so rerunning one over unchanged inputs produces
byte-identical outputs.
"""

from __future__ import annotations

from dataclasses import replace
from pathlib import Path

import numpy as np

from . import tables
from .detect import (
    BrokenParams,
    InvalidBranchParams,
    MaskExtractor,
    default_mask_extractor,
    detect_broken,
    detect_disconnected,
    detect_invalid_branch,
)
from .model import ErrorROI, FormatError, Skeleton, Synapse
from .skeletonize import SkeletonParams, decompose_branches, skeletonize
from .store import VolumeStore, open_store
from .synapse import (
    DEFAULT_ASSOC_RADIUS_NM,
    DEFAULT_CLUSTER_RADIUS_NM,
    associate,
    classify_branches,
    form_clusters,
    sort_clusters,
)


def list_object_ids(store: VolumeStore) -> list[int]:
    labels = store.read_full("labels")
    return [int(v) for v in np.unique(labels) if v != 0]


def load_somas(store_dir: str | Path) -> dict:
    path = Path(store_dir) / "somas.txt"
    return tables.load_soma_table(path) if path.is_file() else {}


def run_skeletonize(
    store_dir: str | Path,
    cell: int | None = None,
    params: SkeletonParams = SkeletonParams(),
) -> list[int]:
    """Skeletonize one cell or every labeled object; returns the ids written."""
    store = open_store(store_dir)
    somas = load_somas(store_dir)
    ids = [cell] if cell is not None else list_object_ids(store)
    out_dir = Path(store_dir) / "skeletons"
    out_dir.mkdir(exist_ok=True)
    for oid in ids:
        sk = skeletonize(store, oid, params, soma_hint=somas.get(oid))
        tables.save_skeleton(out_dir / f"{oid}.txt", sk)
    return ids


def load_skeletons(store_dir: str | Path) -> dict[int, Skeleton]:
    skel_dir = Path(store_dir) / "skeletons"
    skeletons: dict[int, Skeleton] = {}
    if skel_dir.is_dir():
        for path in sorted(skel_dir.glob("*.txt")):
            oid = int(path.stem)
            skeletons[oid] = tables.load_skeleton(path, oid)
    return skeletons


def save_associations(path: str | Path, synapses: list[Synapse]) -> None:
    lines = []
    for syn in synapses:
        for e in syn.elements():
            if e.anchor_node is not None:
                lines.append(f"{e.id}, {e.segment_id}, {e.anchor_node}")
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def load_associations(path: str | Path) -> dict[int, tuple[int, int]]:
    """element id -> (segment id, anchor node)."""
    p = Path(path)
    if not p.is_file():
        raise FormatError(f"missing associations file {p}")
    out: dict[int, tuple[int, int]] = {}
    for line in p.read_text().splitlines():
        if not line.strip():
            continue
        eid, seg, node = (int(f.strip()) for f in line.split(","))
        out[eid] = (seg, node)
    return out


def apply_associations(synapses: list[Synapse], assoc: dict[int, tuple[int, int]]) -> list[Synapse]:
    def fix(e):
        if e.id in assoc:
            seg, node = assoc[e.id]
            return replace(e, segment_id=seg, anchor_node=node)
        return e

    return [
        replace(s, pre=fix(s.pre), posts=tuple(fix(p) for p in s.posts)) for s in synapses
    ]


def run_associate(
    store_dir: str | Path,
    synapses_path: str | Path | None = None,
    assoc_radius_nm: float = DEFAULT_ASSOC_RADIUS_NM,
):
    store = open_store(store_dir)
    synapses_path = Path(synapses_path or Path(store_dir) / "synapses.txt")
    synapses = tables.load_synapses(synapses_path)
    skeletons = load_skeletons(store_dir)
    labels = store.read_full("labels")
    anchored, summary = associate(synapses, skeletons, labels, store.meta, assoc_radius_nm)
    save_associations(Path(store_dir) / "associations.txt", anchored)
    return anchored, summary


def load_anchored_synapses(store_dir: str | Path) -> list[Synapse]:
    synapses = tables.load_synapses(Path(store_dir) / "synapses.txt")
    assoc_path = Path(store_dir) / "associations.txt"
    if assoc_path.is_file():
        synapses = apply_associations(synapses, load_associations(assoc_path))
    return synapses


def run_cluster(store_dir: str | Path, radius_nm: float = DEFAULT_CLUSTER_RADIUS_NM) -> dict[int, int]:
    """Form and sort clusters per skeletonized cell; returns cluster counts."""
    skeletons = load_skeletons(store_dir)
    synapses = load_anchored_synapses(store_dir)
    out_dir = Path(store_dir) / "clusters"
    out_dir.mkdir(exist_ok=True)
    counts: dict[int, int] = {}
    for oid, sk in sorted(skeletons.items()):
        branches = decompose_branches(sk)
        cell_synapses = [
            s for s in synapses
            if any(e.segment_id == oid and e.anchor_node is not None for e in s.elements())
        ]
        clusters = form_clusters(sk, cell_synapses, radius_nm, branches)
        clusters = sort_clusters(clusters, sk)
        tables.save_clusters(out_dir / f"{oid}.txt", clusters)
        counts[oid] = len(clusters)
    return counts


def run_detect(
    store_dir: str | Path,
    extractor: MaskExtractor | None = None,
    broken: BrokenParams = BrokenParams(),
    rho_nm: float = 750.0,
    invalid: InvalidBranchParams = InvalidBranchParams(),
) -> list[ErrorROI]:
    """Run all three detectors over every skeletonized cell; writes rois.txt.

    ROI ids are sequential over (cell id, detector kind, endpoint order), so
    identical inputs and parameters yield an identical file.
    """
    store = open_store(store_dir)
    skeletons = load_skeletons(store_dir)
    synapses = load_anchored_synapses(store_dir)
    extractor = extractor or default_mask_extractor()
    rois: list[ErrorROI] = []
    next_id = 1
    for oid, sk in sorted(skeletons.items()):
        found = detect_broken(store, sk, extractor, broken, start_id=next_id)
        rois.extend(found)
        next_id += len(found)
        found = detect_disconnected(sk, synapses, rho_nm, store.meta, start_id=next_id)
        rois.extend(found)
        next_id += len(found)
        branches = decompose_branches(sk)
        found = detect_invalid_branch(sk, branches, invalid, start_id=next_id)
        rois.extend(found)
        next_id += len(found)
    tables.save_rois(Path(store_dir) / "rois.txt", rois)
    return rois


def classified_branches(store_dir: str | Path) -> dict[int, list]:
    """Branches with automatic classes for every skeletonized cell."""
    skeletons = load_skeletons(store_dir)
    synapses = load_anchored_synapses(store_dir)
    out = {}
    for oid, sk in sorted(skeletons.items()):
        branches = decompose_branches(sk)
        cell_synapses = [
            s for s in synapses
            if any(e.segment_id == oid and e.anchor_node is not None for e in s.elements())
        ]
        out[oid] = classify_branches(sk, branches, cell_synapses)
    return out
