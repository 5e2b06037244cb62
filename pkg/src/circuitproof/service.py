"""HTTP service for the editable single-cell circuit graph.

Serves cell summaries with mode-dependent soma shading, per-cell local
circuit documents (skeleton polylines, clusters, open error ROIs, partner
stubs), browser trees, materialized inspection regions (binary payload:
raw image + RLE labels behind a 32-byte header), downsampled slices, and
the edit endpoints.

Reads are pure at a fixed version.  Writes are serialized: one writer per
cell, enforced with an optimistic version check against the cell's last
accepted edit, over a single global version sequence.  After merges and
splits the affected cells' skeletons, associations, clusters, and automatic
branch classes are recomputed; user-sourced labels survive by id.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from fastapi import FastAPI, Query, Request
from fastapi.responses import JSONResponse, Response

from . import tables
from .detect import assist_merge_search
from .edits import EditLog, GraphState
from .model import (
    Branch,
    BoundsError,
    ErrorROI,
    FormatError,
    INSPECTOR_SHAPE,
    NotFoundError,
    ParameterError,
    PhysPoint,
    Skeleton,
    Synapse,
    ValidationError,
    VoxelCoord,
    phys_to_voxel,
)
from .pipeline import load_skeletons, load_somas
from .rle import encode_region
from .skeletonize import SkeletonParams, decompose_branches, skeletonize_labels
from .store import Subvolume, open_store
from .synapse import (
    DEFAULT_ASSOC_RADIUS_NM,
    DEFAULT_CLUSTER_RADIUS_NM,
    associate,
    classify_branches,
    form_clusters,
    sort_clusters,
)

VALID_SLICE_SCALES = (1, 2, 4, 8)


@dataclass
class VersionArtifacts:
    """Derived geometry at one version: skeletons, branches, clusters, anchors."""

    skeletons: dict[int, Skeleton]
    branches: dict[int, list[Branch]] = field(default_factory=dict)
    clusters: dict[int, list] = field(default_factory=dict)
    synapses: list[Synapse] = field(default_factory=list)
    cell_synapses: dict[int, list[Synapse]] = field(default_factory=dict)


def _point_json(p: PhysPoint) -> list[float]:
    return [p.x, p.y, p.z]


class CircuitService:
    def __init__(
        self,
        store_dir: str | Path,
        assoc_radius_nm: float = DEFAULT_ASSOC_RADIUS_NM,
        cluster_radius_nm: float = DEFAULT_CLUSTER_RADIUS_NM,
        skeleton_params: SkeletonParams = SkeletonParams(),
    ):
        self.store_dir = Path(store_dir)
        self.store = open_store(store_dir)
        self.assoc_radius_nm = assoc_radius_nm
        self.cluster_radius_nm = cluster_radius_nm
        self.skeleton_params = skeleton_params

        synapse_path = self.store_dir / "synapses.txt"
        self.base_synapses = tables.load_synapses(synapse_path) if synapse_path.is_file() else []
        roi_path = self.store_dir / "rois.txt"
        self.base_rois = tables.load_rois(roi_path) if roi_path.is_file() else []
        self.roi_by_id = {r.id: r for r in self.base_rois}
        self.somas = load_somas(self.store_dir)
        self.log = EditLog.load(
            self.store,
            self.store_dir / "edits.log",
            base_synapses=self.base_synapses,
            base_rois=self.base_rois,
        )
        self._base_skeletons: dict[int, Skeleton] | None = None
        self._artifacts: dict[tuple, VersionArtifacts] = {}
        self._lock = threading.Lock()
        self._cell_heads: dict[int, int] = {}

    # -- version plumbing ---------------------------------------------------------

    def resolve_version(self, version: int | None) -> int:
        if version is None:
            return self.log.head
        if not 0 <= version <= self.log.head:
            raise NotFoundError(f"version {version} out of range (head {self.log.head})")
        return version

    def _affected_objects(self, version: int) -> set[int]:
        affected: set[int] = set()
        for v in self.log.voxel_edit_versions(version):
            edit = self.log.edits[v - 1]
            p = edit.payload
            if edit.kind == "MergeObjects":
                affected.update((p["target_id"], p["source_id"]))
            elif edit.kind == "DeleteObject":
                affected.add(p["object_id"])
            elif edit.kind == "SplitObject":
                affected.add(p["object_id"])
                affected.update(p["new_ids"])
            elif edit.kind == "PaintVoxels":
                if p["label"] != 0:
                    affected.add(p["label"])
                prior = self.log.materialize_full(v - 1)
                for x, y, z, length in p["runs"]:
                    affected.update(
                        int(l) for l in np.unique(prior[x: x + length, y, z]) if l != 0
                    )
        return affected

    def base_skeletons(self) -> dict[int, Skeleton]:
        if self._base_skeletons is None:
            self._base_skeletons = load_skeletons(self.store_dir)
        return self._base_skeletons

    def artifacts(self, version: int) -> VersionArtifacts:
        key = self.log.effective_versions(version)
        if key in self._artifacts:
            return self._artifacts[key]
        graph = self.log.graph_state(version)
        voxel_versions = self.log.voxel_edit_versions(version)
        if voxel_versions:
            labels = self.log.materialize_full(version)
        else:
            labels = self.store.read_full("labels")
        inventory = self.log.label_inventory(version)
        present = {int(v) for v in np.unique(labels) if v != 0}
        affected = self._affected_objects(version)

        skeletons: dict[int, Skeleton] = {}
        base = self.base_skeletons()
        for oid in sorted(present & inventory):
            if oid in base and oid not in affected:
                skeletons[oid] = base[oid]
            else:
                soma = self.somas.get(oid)
                skeletons[oid] = skeletonize_labels(
                    labels, self.store.meta.voxel_size, oid, self.skeleton_params, soma_hint=soma
                )

        synapses = [graph.synapses[sid] for sid in sorted(graph.synapses)]
        anchored, _ = associate(
            synapses, skeletons, labels, self.store.meta, self.assoc_radius_nm
        )
        art = VersionArtifacts(skeletons=skeletons, synapses=anchored)
        for oid, sk in skeletons.items():
            cell_syn = [
                s for s in anchored
                if any(e.segment_id == oid and e.anchor_node is not None for e in s.elements())
            ]
            art.cell_synapses[oid] = cell_syn
            branches = decompose_branches(sk)
            # user-sourced class labels survive recomputation by branch id
            branches = [
                replace(b, cls=graph.branch_classes[(oid, b.id)], class_source="user")
                if (oid, b.id) in graph.branch_classes
                else b
                for b in branches
            ]
            branches = classify_branches(sk, branches, cell_syn)
            art.branches[oid] = branches
            clusters = form_clusters(sk, cell_syn, self.cluster_radius_nm, branches)
            art.clusters[oid] = sort_clusters(clusters, sk)
        if len(self._artifacts) > 8:
            self._artifacts.clear()
        self._artifacts[key] = art
        return art

    def _roi_status(self, version: int) -> dict[int, str]:
        return self.log.graph_state(version).roi_status

    # -- read endpoints ----------------------------------------------------------------

    def list_cells(self, mode: str, version: int) -> list[dict]:
        if mode not in ("errors", "synapses"):
            raise ParameterError(f"mode must be errors or synapses, got {mode!r}")
        art = self.artifacts(version)
        status = self._roi_status(version)
        inventory = self.log.label_inventory(version)
        cell_ids = sorted(set(self.somas) & inventory) if self.somas else sorted(art.skeletons)
        rows = []
        counts: dict[int, int] = {}
        for cid in cell_ids:
            if mode == "errors":
                counts[cid] = sum(
                    1 for r in self.base_rois if r.cell_id == cid and status.get(r.id) == "open"
                )
            else:
                counts[cid] = len(art.cell_synapses.get(cid, []))
        max_count = max(counts.values(), default=0)
        for cid in cell_ids:
            soma = self.somas.get(cid)
            if soma is None:
                sk = art.skeletons.get(cid)
                if sk is None:
                    continue
                soma = max(sk.nodes, key=lambda n: (n.radius, -n.id)).pos
            error_count = sum(
                1 for r in self.base_rois if r.cell_id == cid and status.get(r.id) == "open"
            )
            rows.append(
                {
                    "cell_id": cid,
                    "soma": _point_json(soma),
                    "error_count": error_count,
                    "synapse_count": len(art.cell_synapses.get(cid, [])),
                    "shade": (counts[cid] / max_count) if max_count > 0 else 0.0,
                }
            )
        return rows

    def _require_cell(self, cell_id: int, version: int) -> VersionArtifacts:
        art = self.artifacts(version)
        if cell_id not in art.skeletons:
            raise NotFoundError(f"unknown cell {cell_id}")
        return art

    def local_circuit(self, cell_id: int, version: int) -> dict:
        art = self._require_cell(cell_id, version)
        sk = art.skeletons[cell_id]
        by_id = sk.node_map()
        status = self._roi_status(version)
        branches_doc = []
        for b in art.branches[cell_id]:
            nodes = [
                [by_id[nid].pos.x, by_id[nid].pos.y, by_id[nid].pos.z, by_id[nid].radius]
                for nid in b.node_ids
            ]
            branches_doc.append(
                {
                    "id": b.id,
                    "class": b.cls,
                    "class_source": b.class_source,
                    "node_ids": list(b.node_ids),
                    "polyline": nodes,
                }
            )
        clusters_doc = [
            {
                "id": c.id,
                "order_index": c.order_index,
                "branch_id": c.branch_id,
                "anchor_node": c.anchor_node,
                "centroid": _point_json(c.centroid),
                "member_ids": sorted(c.member_ids),
            }
            for c in sorted(art.clusters[cell_id], key=lambda c: c.order_index)
        ]
        open_errors = [
            self._roi_json(r, "open")
            for r in self.base_rois
            if r.cell_id == cell_id and status.get(r.id) == "open"
        ]
        partner_count: dict[int, int] = {}
        partner_contacts: dict[int, list[np.ndarray]] = {}
        for syn in art.cell_synapses[cell_id]:
            sides = []
            if syn.pre.segment_id == cell_id:
                sides = [e for e in syn.posts]
            else:
                sides = [syn.pre]
            for e in sides:
                pid = e.segment_id
                if pid in (0, cell_id):
                    continue
                partner_count[pid] = partner_count.get(pid, 0) + 1
                partner_contacts.setdefault(pid, []).append(np.asarray(e.pos.as_tuple()))
        partners = [
            {
                "partner_id": pid,
                "contact_point": list(np.mean(partner_contacts[pid], axis=0)),
                "synapse_count": partner_count[pid],
            }
            for pid in sorted(partner_count)
        ]
        soma = self.somas.get(cell_id)
        if soma is None:
            soma = max(sk.nodes, key=lambda n: (n.radius, -n.id)).pos
        return {
            "cell_id": cell_id,
            "version": version,
            "soma": _point_json(soma),
            "root_id": sk.root_id,
            "branches": branches_doc,
            "clusters": clusters_doc,
            "open_errors": open_errors,
            "partners": partners,
            "synapse_count": len(art.cell_synapses[cell_id]),
        }

    def _roi_json(self, r: ErrorROI, status: str) -> dict:
        return {
            "id": r.id,
            "kind": r.kind,
            "center": _point_json(r.center),
            "radius": r.radius,
            "cell_id": r.cell_id,
            "status": status,
            "evidence": r.evidence,
        }

    def browser_tree(self, cell_id: int, version: int) -> dict:
        art = self._require_cell(cell_id, version)
        status = self._roi_status(version)
        graph = self.log.graph_state(version)
        errors = sorted(
            (r for r in self.base_rois if r.cell_id == cell_id and status.get(r.id) == "open"),
            key=lambda r: (r.kind, r.id),
        )
        syn_by_id = {s.id: s for s in art.synapses}
        branch_nodes = []
        clusters_by_branch: dict[int, list] = {}
        for c in art.clusters[cell_id]:
            clusters_by_branch.setdefault(c.branch_id, []).append(c)
        for b in art.branches[cell_id]:
            cluster_nodes = []
            for c in sorted(clusters_by_branch.get(b.id, []), key=lambda c: c.order_index):
                member_docs = []
                for sid in sorted(c.member_ids):
                    syn = graph.synapses.get(sid) or syn_by_id.get(sid)
                    member_docs.append(
                        {"id": sid, "status": syn.status, "class_label": syn.class_label}
                    )
                cluster_nodes.append(
                    {"id": c.id, "order_index": c.order_index, "synapses": member_docs}
                )
            branch_nodes.append(
                {"id": b.id, "class": b.cls, "class_source": b.class_source, "clusters": cluster_nodes}
            )
        return {
            "cell_id": cell_id,
            "version": version,
            "errors": [self._roi_json(r, "open") for r in errors],
            "branches": branch_nodes,
            "synapse_count": sum(len(c.member_ids) for c in art.clusters[cell_id]),
        }

    def inspection_region(
        self, x: float, y: float, z: float, shape: tuple[int, int, int], version: int
    ) -> bytes:
        center = phys_to_voxel(PhysPoint(x, y, z), self.store.meta)
        sub = self.log.materialize_region(version, center, shape)
        return encode_region(sub)

    def slice_payload(self, z: int, scale: int, version: int) -> bytes:
        if scale not in VALID_SLICE_SCALES:
            raise ParameterError(f"scale must be one of {VALID_SLICE_SCALES}, got {scale}")
        dims = self.store.meta.dims
        if not 0 <= z < dims[2]:
            raise BoundsError(f"slice {z} outside [0, {dims[2]})")
        center = VoxelCoord(dims[0] // 2, dims[1] // 2, z)
        sub = self.log.materialize_region(version, center, (dims[0], dims[1], 1))
        image = sub.image[::scale, ::scale, :]
        labels = sub.labels[::scale, ::scale, :]
        return encode_region(Subvolume((0, 0, z), np.ascontiguousarray(image), np.ascontiguousarray(labels)))

    def list_errors(self, cell: int | None, status_filter: str | None, version: int) -> list[dict]:
        status = self._roi_status(version)
        rows = []
        for r in sorted(self.base_rois, key=lambda r: r.id):
            st = status.get(r.id, r.status)
            if cell is not None and r.cell_id != cell:
                continue
            if status_filter is not None and st != status_filter:
                continue
            rows.append(self._roi_json(r, st))
        return rows

    def branch_anchor(self, cell_id: int, branch_id: int, t_nm: float, version: int) -> dict:
        art = self._require_cell(cell_id, version)
        anchor = assist_merge_search(art.skeletons[cell_id], branch_id, t_nm)
        return {"pos": _point_json(anchor.pos), "forward": list(anchor.forward)}

    # -- write endpoints -------------------------------------------------------------------

    def post_edit(self, cell_id: int, author: str, base_version: int, kind: str, payload: dict) -> dict:
        with self._lock:
            current = self._cell_heads.get(cell_id, 0)
            if base_version != current:
                return {"conflict": True, "head": current, "global_head": self.log.head}
            version = self.log.apply(kind, payload, author=author)
            self._cell_heads[cell_id] = version
            return {"version": version}

    def post_rollback(self, version: int, author: str) -> dict:
        with self._lock:
            head = self.log.rollback(version)
            for cid in self._cell_heads:
                self._cell_heads[cid] = head
            return {"version": head}


def create_app(
    store_dir: str | Path,
    assoc_radius_nm: float = DEFAULT_ASSOC_RADIUS_NM,
    cluster_radius_nm: float = DEFAULT_CLUSTER_RADIUS_NM,
) -> FastAPI:
    service = CircuitService(store_dir, assoc_radius_nm, cluster_radius_nm)
    app = FastAPI(title="circuitproof")
    app.state.service = service

    @app.exception_handler(NotFoundError)
    async def not_found(request: Request, exc: NotFoundError):
        return JSONResponse(status_code=404, content={"detail": str(exc)})

    @app.exception_handler(ValidationError)
    async def invalid(request: Request, exc: ValidationError):
        return JSONResponse(status_code=400, content={"detail": str(exc)})

    @app.exception_handler(ParameterError)
    async def bad_param(request: Request, exc: ParameterError):
        return JSONResponse(status_code=400, content={"detail": str(exc)})

    @app.exception_handler(BoundsError)
    async def out_of_bounds(request: Request, exc: BoundsError):
        return JSONResponse(status_code=400, content={"detail": str(exc)})

    @app.exception_handler(FormatError)
    async def bad_format(request: Request, exc: FormatError):
        return JSONResponse(status_code=400, content={"detail": str(exc)})

    @app.get("/cells")
    def cells(mode: str = "errors", version: int | None = None):
        v = service.resolve_version(version)
        return {"version": v, "cells": service.list_cells(mode, v)}

    @app.get("/cells/{cell_id}/circuit")
    def circuit(cell_id: int, version: int | None = None):
        return service.local_circuit(cell_id, service.resolve_version(version))

    @app.get("/cells/{cell_id}/tree")
    def tree(cell_id: int, version: int | None = None):
        return service.browser_tree(cell_id, service.resolve_version(version))

    @app.get("/region")
    def region(
        x: float,
        y: float,
        z: float,
        w: int = INSPECTOR_SHAPE[0],
        h: int = INSPECTOR_SHAPE[1],
        d: int = INSPECTOR_SHAPE[2],
        version: int | None = None,
    ):
        v = service.resolve_version(version)
        payload = service.inspection_region(x, y, z, (w, h, d), v)
        return Response(content=payload, media_type="application/octet-stream")

    @app.get("/slice")
    def slice_view(z: int, scale: int = 1, version: int | None = None):
        v = service.resolve_version(version)
        payload = service.slice_payload(z, scale, v)
        return Response(content=payload, media_type="application/octet-stream")

    @app.get("/errors")
    def errors(cell: int | None = None, status: str | None = None, version: int | None = None):
        v = service.resolve_version(version)
        return {"version": v, "errors": service.list_errors(cell, status, v)}

    @app.get("/cells/{cell_id}/branch/{branch_id}/anchor")
    def branch_anchor(cell_id: int, branch_id: int, t: float = 0.0, version: int | None = None):
        return service.branch_anchor(cell_id, branch_id, t, service.resolve_version(version))

    @app.post("/cells/{cell_id}/edits")
    def post_edit(cell_id: int, body: dict):
        author = body.get("author", "")
        base_version = int(body.get("base_version", -1))
        edit = body.get("edit") or {}
        kind = edit.get("kind", "")
        payload = edit.get("payload") or {}
        result = service.post_edit(cell_id, author, base_version, kind, payload)
        if result.get("conflict"):
            return JSONResponse(status_code=409, content=result)
        return result

    @app.post("/rollback")
    def rollback(body: dict):
        version = int(body.get("version", -1))
        author = body.get("author", "rollback")
        return service.post_rollback(version, author)

    return app
