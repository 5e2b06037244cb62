"""Append-only, versioned corrections over an immutable base segmentation.

All changes are saved as edits, separate from the original store; reads
materialize the base plus the effective edit prefix for a requested version.
Rollback appends a Revert marker instead of truncating, so provenance is
never lost.  The log file is line-delimited and flushed per edit.

Edit payloads are JSON objects; schemas per kind are documented in the
repository README.  Voxel-level kinds (MergeObjects, SplitObject,
PaintVoxels, DeleteObject) change materialized labels; the remaining kinds
act on the synapse/ROI graph state.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .model import (
    ErrorROI,
    NotFoundError,
    PhysPoint,
    Synapse,
    SynapticElement,
    SYNAPSE_STATUSES,
    ValidationError,
    VoxelCoord,
    phys_to_voxel,
)
from .store import Subvolume, VolumeStore, read_region
from .voxelgraph import multi_source_geodesic

EDIT_KINDS = (
    "MergeObjects",
    "SplitObject",
    "PaintVoxels",
    "DeleteObject",
    "AddSynapse",
    "RemoveSynapse",
    "MoveElement",
    "ReconnectSynapse",
    "SetStatus",
    "SetClass",
    "ResolveError",
    "Annotate",
    "Revert",
)

VOXEL_KINDS = ("MergeObjects", "SplitObject", "PaintVoxels", "DeleteObject")


@dataclass(frozen=True)
class Edit:
    version: int
    author: str
    timestamp: float
    kind: str
    payload: dict


@dataclass
class GraphState:
    """Synapse/ROI/classification state at some version."""

    synapses: dict[int, Synapse]
    roi_status: dict[int, str]
    branch_classes: dict[tuple[int, int], str] = field(default_factory=dict)
    annotations: list[dict] = field(default_factory=list)

    def element_index(self) -> dict[int, tuple[int, SynapticElement]]:
        out: dict[int, tuple[int, SynapticElement]] = {}
        for sid, syn in self.synapses.items():
            for e in syn.elements():
                out[e.id] = (sid, e)
        return out

    def next_element_id(self) -> int:
        index = self.element_index()
        return (max(index) + 1) if index else 1


def split_partition(
    mask: np.ndarray, seeds: list[tuple[int, int, int]], voxel_size: tuple[float, float, float]
) -> np.ndarray:
    """Assign each mask voxel to its geodesically nearest seed.

    Distances run inside the mask (26-connectivity, physical edge lengths);
    exact ties go to the lower seed index.  Components containing no seed
    fall to seed 0.  Returns an int array, -1 outside the mask.
    """
    if len(seeds) < 2:
        raise ValidationError(f"split needs at least 2 seeds, got {len(seeds)}")
    seen = set()
    for s in seeds:
        if tuple(s) in seen:
            raise ValidationError(f"seeds coincide at voxel {tuple(s)}")
        seen.add(tuple(s))
        if not (0 <= s[0] < mask.shape[0] and 0 <= s[1] < mask.shape[1] and 0 <= s[2] < mask.shape[2]):
            raise ValidationError(f"seed {tuple(s)} outside the object bounding box")
        if not mask[s[0], s[1], s[2]]:
            raise ValidationError(f"seed {tuple(s)} lies outside the object")
    nx, ny, nz = mask.shape
    flat_sources = np.array(
        [s[0] + nx * (s[1] + ny * s[2]) for s in seeds], dtype=np.int64
    )
    _, owner = multi_source_geodesic(
        mask.ravel(order="F"),
        nx, ny, nz,
        float(voxel_size[0]), float(voxel_size[1]), float(voxel_size[2]),
        flat_sources,
    )
    owner = owner.reshape(mask.shape, order="F")
    out = np.where(mask, owner, -1)
    out[mask & (owner < 0)] = 0  # seedless components follow the first seed
    return out


def _mask_to_runs(mask: np.ndarray, offset: tuple[int, int, int]) -> np.ndarray:
    """x-fastest runs [[x, y, z, len], ...] of a bounding-box mask in global voxels."""
    runs = []
    xs, ys, zs = mask.shape
    for z in range(zs):
        for y in range(ys):
            col = mask[:, y, z]
            if not col.any():
                continue
            padded = np.concatenate(([False], col, [False]))
            edges = np.flatnonzero(padded[1:] != padded[:-1])
            starts, ends = edges[::2], edges[1::2]
            for s, e in zip(starts, ends):
                runs.append((int(s + offset[0]), int(y + offset[1]), int(z + offset[2]), int(e - s)))
    return np.asarray(runs, dtype=np.int64).reshape(-1, 4)


def _apply_runs(labels: np.ndarray, origin: tuple[int, int, int], runs: np.ndarray, value: int) -> None:
    """Assign value along runs where they overlap the region."""
    ox, oy, oz = origin
    sx, sy, sz = labels.shape
    for x, y, z, length in runs:
        ly, lz = y - oy, z - oz
        if not (0 <= ly < sy and 0 <= lz < sz):
            continue
        x0 = max(x, ox)
        x1 = min(x + length, ox + sx)
        if x0 < x1:
            labels[x0 - ox: x1 - ox, ly, lz] = value


def _point(payload_value) -> PhysPoint:
    if not isinstance(payload_value, (list, tuple)) or len(payload_value) != 3:
        raise ValidationError(f"expected [x, y, z], got {payload_value!r}")
    return PhysPoint(float(payload_value[0]), float(payload_value[1]), float(payload_value[2]))


class EditLog:
    """Versioned edit log over an immutable base store.

    Version 0 is the untouched base; edit n gets version n.  Validation runs
    against the materialized state at head, appends are atomic per call, and
    a persisted log file (when given) is appended and flushed per edit.
    """

    def __init__(
        self,
        store: VolumeStore,
        path: str | Path | None = None,
        base_synapses: list[Synapse] | None = None,
        base_rois: list[ErrorROI] | None = None,
    ):
        self.store = store
        self.path = Path(path) if path is not None else None
        self._edits: list[Edit] = []
        self._effective: list[tuple[int, ...]] = [()]
        self._base_synapses = {s.id: s for s in (base_synapses or [])}
        self._base_rois = {r.id: r for r in (base_rois or [])}
        self._base_labels: frozenset[int] | None = None
        self._split_runs: dict[int, list[np.ndarray]] = {}
        self._graph_cache: dict[int, GraphState] = {}

    # -- basic accessors ------------------------------------------------------

    @property
    def head(self) -> int:
        return len(self._edits)

    @property
    def edits(self) -> tuple[Edit, ...]:
        return tuple(self._edits)

    def effective_versions(self, version: int) -> tuple[int, ...]:
        if not 0 <= version <= self.head:
            raise NotFoundError(f"version {version} out of range (head {self.head})")
        return self._effective[version]

    def _base_inventory(self) -> frozenset[int]:
        if self._base_labels is None:
            labels = self.store.read_full("labels")
            self._base_labels = frozenset(int(v) for v in np.unique(labels) if v != 0)
        return self._base_labels

    def label_inventory(self, version: int) -> frozenset[int]:
        """Known object ids at a version (an upper bound: paint may fully cover)."""
        inv = set(self._base_inventory())
        for v in self.effective_versions(version):
            edit = self._edits[v - 1]
            p = edit.payload
            if edit.kind == "MergeObjects":
                inv.discard(p["source_id"])
            elif edit.kind == "DeleteObject":
                inv.discard(p["object_id"])
            elif edit.kind == "SplitObject":
                inv.discard(p["object_id"])
                inv.update(p["new_ids"])
            elif edit.kind == "PaintVoxels" and p["label"] != 0:
                inv.add(p["label"])
        return frozenset(inv)

    # -- graph state ------------------------------------------------------------

    def graph_state(self, version: int) -> GraphState:
        if version in self._graph_cache:
            return self._graph_cache[version]
        state = GraphState(
            synapses=dict(self._base_synapses),
            roi_status={rid: r.status for rid, r in self._base_rois.items()},
        )
        for v in self.effective_versions(version):
            self._replay_graph(state, self._edits[v - 1])
        self._graph_cache[version] = state
        return state

    def _replay_graph(self, state: GraphState, edit: Edit) -> None:
        kind, p = edit.kind, edit.payload
        if kind == "AddSynapse":
            rec = p["record"]
            pre = SynapticElement(
                id=rec["pre"]["id"], kind="pre", pos=_point(rec["pre"]["pos"]),
                segment_id=int(rec["pre"]["segment_id"]),
            )
            posts = tuple(
                SynapticElement(id=e["id"], kind="post", pos=_point(e["pos"]),
                                segment_id=int(e["segment_id"]))
                for e in rec["posts"]
            )
            state.synapses[rec["id"]] = Synapse(id=rec["id"], pre=pre, posts=posts)
        elif kind == "RemoveSynapse":
            state.synapses.pop(p["id"], None)
        elif kind == "MoveElement":
            index = state.element_index()
            sid, element = index[p["element_id"]]
            syn = state.synapses[sid]
            moved = replace(element, pos=_point(p["pos"]))
            if element.kind == "pre":
                state.synapses[sid] = replace(syn, pre=moved)
            else:
                state.synapses[sid] = replace(
                    syn, posts=tuple(moved if e.id == element.id else e for e in syn.posts)
                )
        elif kind == "ReconnectSynapse":
            index = state.element_index()
            target = state.synapses[p["synapse_id"]]
            new_posts = []
            for eid in p["post_element_ids"]:
                owner_sid, element = index[eid]
                if owner_sid != p["synapse_id"]:
                    owner = state.synapses[owner_sid]
                    state.synapses[owner_sid] = replace(
                        owner, posts=tuple(e for e in owner.posts if e.id != eid)
                    )
                new_posts.append(element)
            state.synapses[p["synapse_id"]] = replace(target, posts=tuple(new_posts))
        elif kind == "SetStatus":
            for sid in p["ids"]:
                state.synapses[sid] = replace(state.synapses[sid], status=p["status"])
        elif kind == "SetClass":
            if p.get("target", "synapse") == "synapse":
                for sid in p["ids"]:
                    state.synapses[sid] = replace(state.synapses[sid], class_label=p["label"])
            else:
                for bid in p["ids"]:
                    state.branch_classes[(p["cell_id"], bid)] = p["label"]
        elif kind == "ResolveError":
            state.roi_status[p["roi_id"]] = p["resolution"]
        elif kind == "Annotate":
            state.annotations.append(
                {"pos": p["pos"], "text": p["text"], "version": edit.version, "author": edit.author}
            )

    # -- validation ---------------------------------------------------------------

    def _validate(self, kind: str, payload: dict) -> dict:
        """Check payload references against head state; returns the canonical payload."""
        meta = self.store.meta
        state = self.graph_state(self.head)
        p = dict(payload)
        inventory: frozenset[int] = frozenset()
        if kind in VOXEL_KINDS:
            inventory = self.label_inventory(self.head)

        def require_point_in_bounds(value, what: str) -> PhysPoint:
            pt = _point(value)
            if not meta.contains_point(pt):
                raise ValidationError(f"{what} {pt.as_tuple()} outside volume extent")
            return pt

        if kind == "MergeObjects":
            target, source = int(p["target_id"]), int(p["source_id"])
            if target == source:
                raise ValidationError("merge target and source are the same object")
            for oid in (target, source):
                if oid not in inventory:
                    raise ValidationError(f"unknown object {oid}")
            _point(p["anchor_a"])
            _point(p["anchor_b"])
            return {"target_id": target, "source_id": source,
                    "anchor_a": list(p["anchor_a"]), "anchor_b": list(p["anchor_b"])}
        if kind == "SplitObject":
            oid = int(p["object_id"])
            if oid not in inventory:
                raise ValidationError(f"unknown object {oid}")
            seeds = [require_point_in_bounds(s, "seed") for s in p["seeds"]]
            if len(seeds) < 2:
                raise ValidationError("split needs at least 2 seeds")
            labels = self.materialize_full(self.head)
            seed_vox = [phys_to_voxel(s, meta) for s in seeds]
            for s, v in zip(seeds, seed_vox):
                if int(labels[v.x, v.y, v.z]) != oid:
                    raise ValidationError(f"seed {s.as_tuple()} not inside object {oid}")
            max_id = max(inventory, default=0)
            new_ids = [max_id + 1 + i for i in range(len(seeds))]
            runs = self._compute_split(labels, oid, [v.as_tuple() for v in seed_vox])
            self._split_runs[self.head + 1] = runs
            return {"object_id": oid, "seeds": [list(s.as_tuple()) for s in seeds], "new_ids": new_ids}
        if kind == "PaintVoxels":
            label = int(p["label"])
            runs = []
            for run in p["runs"]:
                x, y, z, length = (int(v) for v in run)
                if length < 1:
                    raise ValidationError(f"run length must be >= 1, got {length}")
                if not (0 <= x and x + length <= meta.dims[0] and 0 <= y < meta.dims[1] and 0 <= z < meta.dims[2]):
                    raise ValidationError(f"run {run} out of bounds")
                runs.append([x, y, z, length])
            if not runs:
                raise ValidationError("paint needs at least one run")
            return {"runs": runs, "label": label}
        if kind == "DeleteObject":
            oid = int(p["object_id"])
            if oid not in inventory:
                raise ValidationError(f"unknown object {oid}")
            return {"object_id": oid}
        if kind == "AddSynapse":
            rec = dict(p["record"])
            sid = int(rec["id"])
            if sid in state.synapses:
                raise ValidationError(f"synapse id {sid} already exists")
            next_eid = state.next_element_id()
            pre = dict(rec["pre"])
            require_point_in_bounds(pre["pos"], "pre position")
            pre["id"] = next_eid
            next_eid += 1
            posts = []
            if not rec.get("posts"):
                raise ValidationError("synapse needs at least one post element")
            for e in rec["posts"]:
                e = dict(e)
                require_point_in_bounds(e["pos"], "post position")
                e["id"] = next_eid
                next_eid += 1
                posts.append(e)
            return {"record": {"id": sid, "pre": pre, "posts": posts}}
        if kind == "RemoveSynapse":
            sid = int(p["id"])
            if sid not in state.synapses:
                raise ValidationError(f"unknown synapse {sid}")
            return {"id": sid}
        if kind == "MoveElement":
            eid = int(p["element_id"])
            if eid not in state.element_index():
                raise ValidationError(f"unknown element {eid}")
            require_point_in_bounds(p["pos"], "element position")
            return {"element_id": eid, "pos": list(p["pos"])}
        if kind == "ReconnectSynapse":
            sid = int(p["synapse_id"])
            if sid not in state.synapses:
                raise ValidationError(f"unknown synapse {sid}")
            ids = [int(e) for e in p["post_element_ids"]]
            if not ids:
                raise ValidationError("synapse needs at least one post element")
            index = state.element_index()
            for eid in ids:
                if eid not in index:
                    raise ValidationError(f"unknown element {eid}")
                owner_sid, element = index[eid]
                if element.kind != "post":
                    raise ValidationError(f"element {eid} is not postsynaptic")
                if owner_sid != sid and len(state.synapses[owner_sid].posts) <= 1:
                    raise ValidationError(
                        f"moving element {eid} would leave synapse {owner_sid} without posts"
                    )
            return {"synapse_id": sid, "post_element_ids": ids}
        if kind == "SetStatus":
            ids = [int(i) for i in p["ids"]]
            for sid in ids:
                if sid not in state.synapses:
                    raise ValidationError(f"unknown synapse {sid}")
            if p["status"] not in SYNAPSE_STATUSES:
                raise ValidationError(f"bad status {p['status']!r}")
            return {"ids": ids, "status": p["status"]}
        if kind == "SetClass":
            target = p.get("target", "synapse")
            ids = [int(i) for i in p["ids"]]
            if target == "synapse":
                for sid in ids:
                    if sid not in state.synapses:
                        raise ValidationError(f"unknown synapse {sid}")
                return {"target": "synapse", "ids": ids, "label": str(p["label"])}
            if target == "branch":
                if "cell_id" not in p:
                    raise ValidationError("branch SetClass needs cell_id")
                return {"target": "branch", "ids": ids, "label": str(p["label"]),
                        "cell_id": int(p["cell_id"])}
            raise ValidationError(f"bad SetClass target {target!r}")
        if kind == "ResolveError":
            rid = int(p["roi_id"])
            if rid not in state.roi_status:
                raise ValidationError(f"unknown error ROI {rid}")
            if state.roi_status[rid] != "open":
                raise ValidationError(f"ROI {rid} is already {state.roi_status[rid]}")
            if p["resolution"] not in ("resolved", "dismissed"):
                raise ValidationError(f"bad resolution {p['resolution']!r}")
            return {"roi_id": rid, "resolution": p["resolution"]}
        if kind == "Annotate":
            require_point_in_bounds(p["pos"], "annotation position")
            return {"pos": list(p["pos"]), "text": str(p["text"])}
        if kind == "Revert":
            version = int(p["version"])
            if not 0 <= version <= self.head:
                raise NotFoundError(f"unknown version {version}")
            return {"version": version}
        raise ValidationError(f"unknown edit kind {kind!r}")

    def _compute_split(self, labels: np.ndarray, object_id: int, seed_vox: list[tuple[int, int, int]]) -> list[np.ndarray]:
        coords = np.argwhere(labels == object_id)
        lo = coords.min(axis=0)
        hi = coords.max(axis=0) + 1
        mask = labels[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] == object_id
        local_seeds = [tuple(int(c - o) for c, o in zip(s, lo)) for s in seed_vox]
        assignment = split_partition(mask, local_seeds, self.store.meta.voxel_size)
        return [
            _mask_to_runs(assignment == i, tuple(int(v) for v in lo))
            for i in range(len(seed_vox))
        ]

    # -- mutation ----------------------------------------------------------------

    def apply(self, kind: str, payload: dict, author: str = "anonymous") -> int:
        """Validate and append one edit; returns its version.  The log is
        unchanged when validation fails."""
        if "," in author or "\n" in author or not author:
            raise ValidationError(f"bad author {author!r}")
        if kind not in EDIT_KINDS:
            raise ValidationError(f"unknown edit kind {kind!r}")
        canonical = self._validate(kind, payload)
        edit = Edit(
            version=self.head + 1,
            author=author,
            timestamp=time.time(),
            kind=kind,
            payload=canonical,
        )
        self._append(edit)
        return edit.version

    def rollback(self, version: int) -> int:
        """Append a Revert marker; the head then materializes like `version`."""
        if not 0 <= version <= self.head:
            raise NotFoundError(f"unknown version {version} (head {self.head})")
        return self.apply("Revert", {"version": version}, author="rollback")

    def _append(self, edit: Edit) -> None:
        assert edit.version == self.head + 1
        if edit.kind == "Revert":
            eff = self._effective[edit.payload["version"]]
        else:
            eff = self._effective[-1] + (edit.version,)
        self._edits.append(edit)
        self._effective.append(eff)
        if self.path is not None:
            line = f"{edit.version}, {edit.author}, {edit.timestamp!r}, {edit.kind}, " + json.dumps(
                edit.payload, sort_keys=True
            )
            with open(self.path, "a") as fh:
                fh.write(line + "\n")
                fh.flush()

    # -- materialization -----------------------------------------------------------

    def _apply_voxel_edit(self, labels: np.ndarray, origin: tuple[int, int, int], edit: Edit) -> None:
        p = edit.payload
        if edit.kind == "MergeObjects":
            labels[labels == p["source_id"]] = p["target_id"]
        elif edit.kind == "DeleteObject":
            labels[labels == p["object_id"]] = 0
        elif edit.kind == "PaintVoxels":
            _apply_runs(labels, origin, np.asarray(p["runs"], dtype=np.int64), p["label"])
        elif edit.kind == "SplitObject":
            runs = self._split_runs.get(edit.version)
            if runs is None:
                self._ensure_split(edit.version)
                runs = self._split_runs[edit.version]
            for new_id, seed_runs in zip(p["new_ids"], runs):
                _apply_runs(labels, origin, seed_runs, new_id)

    def _ensure_split(self, version: int) -> None:
        """Recompute a split partition loaded from disk (deterministic replay)."""
        edit = self._edits[version - 1]
        labels = self.materialize_full(version - 1)
        meta = self.store.meta
        seed_vox = [phys_to_voxel(_point(s), meta).as_tuple() for s in edit.payload["seeds"]]
        self._split_runs[version] = self._compute_split(labels, edit.payload["object_id"], seed_vox)

    def materialize_region(self, version: int, center: VoxelCoord, shape: tuple[int, int, int]) -> Subvolume:
        """Base labels with all effective edits <= version applied, image passthrough."""
        if not 0 <= version <= self.head:
            raise NotFoundError(f"version {version} out of range (head {self.head})")
        sub = read_region(self.store, center, shape)
        labels = sub.labels
        for v in self.effective_versions(version):
            edit = self._edits[v - 1]
            if edit.kind in VOXEL_KINDS:
                self._apply_voxel_edit(labels, sub.origin, edit)
        return Subvolume(sub.origin, sub.image, labels)

    def materialize_full(self, version: int) -> np.ndarray:
        """Whole-volume labels at a version (fresh array)."""
        if not 0 <= version <= self.head:
            raise NotFoundError(f"version {version} out of range (head {self.head})")
        labels = self.store.read_full("labels").copy()
        for v in self.effective_versions(version):
            edit = self._edits[v - 1]
            if edit.kind in VOXEL_KINDS:
                if edit.kind == "SplitObject" and edit.version not in self._split_runs:
                    # labels currently holds exactly the state at version-1
                    seed_vox = [
                        phys_to_voxel(_point(s), self.store.meta).as_tuple()
                        for s in edit.payload["seeds"]
                    ]
                    self._split_runs[edit.version] = self._compute_split(
                        labels, edit.payload["object_id"], seed_vox
                    )
                self._apply_voxel_edit(labels, (0, 0, 0), edit)
        return labels

    def voxel_edit_versions(self, version: int) -> tuple[int, ...]:
        """Effective versions <= version that change labels (for cache keys)."""
        return tuple(
            v for v in self.effective_versions(version) if self._edits[v - 1].kind in VOXEL_KINDS
        )

    # -- persistence --------------------------------------------------------------

    @classmethod
    def load(
        cls,
        store: VolumeStore,
        path: str | Path,
        base_synapses: list[Synapse] | None = None,
        base_rois: list[ErrorROI] | None = None,
    ) -> "EditLog":
        """Rebuild a log from its file, re-validating every entry."""
        log = cls(store, path=None, base_synapses=base_synapses, base_rois=base_rois)
        path = Path(path)
        if path.is_file():
            for lineno, line in enumerate(path.read_text().splitlines(), 1):
                if not line.strip():
                    continue
                parts = line.split(", ", 4)
                if len(parts) != 5:
                    raise ValidationError(f"{path}:{lineno}: malformed edit record")
                version, author, timestamp, kind, payload_text = parts
                payload = json.loads(payload_text)
                if int(version) != log.head + 1:
                    raise ValidationError(
                        f"{path}:{lineno}: version {version} out of sequence (head {log.head})"
                    )
                canonical = log._validate(kind, payload)
                if kind in ("AddSynapse", "SplitObject"):
                    canonical = payload  # keep originally assigned element/object ids
                log._append(
                    Edit(
                        version=int(version),
                        author=author,
                        timestamp=float(timestamp),
                        kind=kind,
                        payload=canonical,
                    )
                )
        log.path = path
        return log
