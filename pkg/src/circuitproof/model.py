"""Shared domain types for circuit proofreading.

Everything here is an immutable value object; mutation of the reconstruction
happens exclusively through the edit log.  Physical coordinates are nanometers
throughout; voxel indices appear only at storage boundaries (EM voxels are
anisotropic, so voxel-space distances are wrong).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

BACKGROUND_LABEL = 0

# Inspection regions are capped at this shape (voxels) so region fetches stay
# interactive even on multi-terabyte volumes.
INSPECTOR_SHAPE = (512, 512, 100)

BRANCH_CLASSES = ("axon", "dendrite", "miscellaneous")
SYNAPSE_STATUSES = ("unvalidated", "valid", "invalid")
ROI_KINDS = ("broken", "disconnected", "invalid_branch", "user_flagged")
ROI_STATUSES = ("open", "resolved", "dismissed")


class BoundsError(ValueError):
    """A coordinate falls outside the volume."""


class NotFoundError(KeyError):
    """A referenced object, node, or artifact does not exist."""


class ValidationError(ValueError):
    """An operation's payload is inconsistent with the current state."""


class FormatError(ValueError):
    """A persisted artifact is missing or malformed."""


class ParameterError(ValueError):
    """An operation received an out-of-range parameter."""


@dataclass(frozen=True, slots=True)
class VoxelCoord:
    """Voxel indices; z is the slice axis."""

    x: int
    y: int
    z: int

    def __post_init__(self):
        for name in ("x", "y", "z"):
            object.__setattr__(self, name, int(getattr(self, name)))
        if self.x < 0 or self.y < 0 or self.z < 0:
            raise BoundsError(f"negative voxel index: {(self.x, self.y, self.z)}")

    def as_tuple(self) -> tuple[int, int, int]:
        return (self.x, self.y, self.z)


@dataclass(frozen=True, slots=True)
class PhysPoint:
    """A point in physical space, nanometers."""

    x: float
    y: float
    z: float

    def __post_init__(self):
        for name in ("x", "y", "z"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if not (math.isfinite(self.x) and math.isfinite(self.y) and math.isfinite(self.z)):
            raise ValueError(f"non-finite point: {(self.x, self.y, self.z)}")

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.x, self.y, self.z)

    def distance_to(self, other: "PhysPoint") -> float:
        return math.dist(self.as_tuple(), other.as_tuple())


@dataclass(frozen=True, slots=True)
class VolumeMeta:
    """Geometry and dtypes of a stored volume.

    Label value 0 is reserved for background.  Image voxels are 8-bit
    unsigned, labels 64-bit unsigned.
    """

    dims: tuple[int, int, int]            # voxels per axis
    voxel_size: tuple[float, float, float]  # nm per voxel
    chunk_shape: tuple[int, int, int]

    def __post_init__(self):
        if len(self.dims) != 3 or any(d <= 0 for d in self.dims):
            raise FormatError(f"dims must be 3 positive integers, got {self.dims}")
        if len(self.voxel_size) != 3 or any(v <= 0 for v in self.voxel_size):
            raise FormatError(f"voxel_size must be 3 positive reals, got {self.voxel_size}")
        if len(self.chunk_shape) != 3 or any(c <= 0 for c in self.chunk_shape):
            raise FormatError(f"chunk_shape must be 3 positive integers, got {self.chunk_shape}")
        if any(c > d for c, d in zip(self.chunk_shape, self.dims)):
            raise FormatError(
                f"chunk_shape {self.chunk_shape} exceeds dims {self.dims}"
            )

    @property
    def physical_extent(self) -> tuple[float, float, float]:
        return tuple(d * v for d, v in zip(self.dims, self.voxel_size))

    def contains_voxel(self, v: VoxelCoord) -> bool:
        return all(0 <= c < d for c, d in zip(v.as_tuple(), self.dims))

    def contains_point(self, p: PhysPoint) -> bool:
        ext = self.physical_extent
        return all(0 <= c < e for c, e in zip(p.as_tuple(), ext))


def phys_to_voxel(p: PhysPoint, meta: VolumeMeta) -> VoxelCoord:
    """Map a physical point to the voxel containing it (per-axis floor).

    Raises BoundsError when the point lies outside the volume.
    """
    if not meta.contains_point(p):
        raise BoundsError(f"point {p.as_tuple()} outside volume extent {meta.physical_extent}")
    return VoxelCoord(
        *(int(math.floor(c / s)) for c, s in zip(p.as_tuple(), meta.voxel_size))
    )


def voxel_center(v: VoxelCoord, meta: VolumeMeta) -> PhysPoint:
    """Physical center of a voxel; inverse of phys_to_voxel up to half a voxel."""
    return PhysPoint(*((c + 0.5) * s for c, s in zip(v.as_tuple(), meta.voxel_size)))


@dataclass(frozen=True, slots=True)
class SkeletonNode:
    id: int
    pos: PhysPoint
    radius: float  # nm, > 0
    parent: int | None  # node id; None at the root


@dataclass(frozen=True)
class Skeleton:
    """Rooted center-line tree with per-node radii for one labeled object."""

    object_id: int
    nodes: tuple[SkeletonNode, ...]
    root_id: int

    def node_map(self) -> dict[int, SkeletonNode]:
        return {n.id: n for n in self.nodes}

    def children_map(self) -> dict[int, list[int]]:
        children: dict[int, list[int]] = {n.id: [] for n in self.nodes}
        for n in self.nodes:
            if n.parent is not None and n.parent in children:
                children[n.parent].append(n.id)
        for ids in children.values():
            ids.sort()
        return children

    def edge_set(self) -> set[tuple[int, int]]:
        """Undirected edges as (child, parent) pairs."""
        return {(n.id, n.parent) for n in self.nodes if n.parent is not None}


def validate_skeleton(s: Skeleton) -> list[str]:
    """Check tree invariants; returns a list of violations (empty when valid)."""
    violations: list[str] = []
    seen: set[int] = set()
    for n in s.nodes:
        if n.id in seen:
            violations.append(f"duplicate node id {n.id}")
        seen.add(n.id)
        if n.radius <= 0:
            violations.append(f"non-positive radius at node {n.id}")
    by_id = {n.id: n for n in s.nodes}

    roots = [n.id for n in s.nodes if n.parent is None]
    if len(roots) > 1:
        violations.append(f"multiple roots: {sorted(roots)}")
    elif not roots:
        violations.append("no root node")
    if s.root_id not in by_id:
        violations.append(f"root_id {s.root_id} not among nodes")
    elif by_id[s.root_id].parent is not None:
        violations.append(f"root_id {s.root_id} has a parent")

    for n in s.nodes:
        if n.parent is not None and n.parent not in by_id:
            violations.append(f"unknown parent {n.parent} of node {n.id}")

    # Walk parent chains; revisiting a node of the current walk is a cycle,
    # and chains that never reach a root leave the node unreachable.
    resolved: dict[int, bool] = {}  # node id -> reaches a root
    for n in s.nodes:
        path: list[int] = []
        on_path: set[int] = set()
        cur: int | None = n.id
        cyclic = False
        while cur is not None and cur not in resolved:
            if cur in on_path:
                violations.append(f"cycle through node {cur}")
                cyclic = True
                break
            on_path.add(cur)
            path.append(cur)
            node = by_id.get(cur)
            if node is None:
                break
            cur = node.parent
        reaches = False if cyclic else (cur is None or resolved.get(cur, False))
        if cur is None and path:
            # chain ended at a parentless node, i.e. a root
            reaches = True
        for nid in path:
            resolved[nid] = reaches
        if not reaches and not cyclic and path:
            violations.append(f"node {n.id} cannot reach the root")
    return violations


@dataclass(frozen=True, slots=True)
class Branch:
    """A maximal skeleton path between root/junction/leaf endpoints."""

    id: int
    node_ids: tuple[int, ...]  # ordered proximal -> distal
    cls: str = "miscellaneous"
    class_source: str = "automatic"  # {automatic, user}


@dataclass(frozen=True, slots=True)
class SynapticElement:
    id: int
    kind: str  # {pre, post}; immutable
    pos: PhysPoint
    segment_id: int
    anchor_node: int | None = None

    def __post_init__(self):
        if self.kind not in ("pre", "post"):
            raise ValidationError(f"bad element kind {self.kind!r}")


@dataclass(frozen=True)
class Synapse:
    """One presynaptic contact and its postsynaptic densities."""

    id: int
    pre: SynapticElement
    posts: tuple[SynapticElement, ...]
    status: str = "unvalidated"
    class_label: str | None = None

    def __post_init__(self):
        if self.pre.kind != "pre":
            raise ValidationError(f"synapse {self.id}: pre element has kind {self.pre.kind}")
        if not self.posts:
            raise ValidationError(f"synapse {self.id}: needs at least one post element")
        if any(e.kind != "post" for e in self.posts):
            raise ValidationError(f"synapse {self.id}: post list contains a non-post element")
        if self.status not in SYNAPSE_STATUSES:
            raise ValidationError(f"synapse {self.id}: bad status {self.status!r}")

    def elements(self) -> tuple[SynapticElement, ...]:
        return (self.pre, *self.posts)

    def element_on(self, cell_id: int) -> SynapticElement | None:
        """The element belonging to a given cell (pre wins for autapses)."""
        if self.pre.segment_id == cell_id:
            return self.pre
        for e in self.posts:
            if e.segment_id == cell_id:
                return e
        return None


@dataclass(frozen=True, slots=True)
class SynapseCluster:
    id: int
    member_ids: frozenset[int]
    centroid: PhysPoint
    anchor_node: int
    branch_id: int
    order_index: int

    def __post_init__(self):
        if not self.member_ids:
            raise ValidationError(f"cluster {self.id}: empty member set")
        if self.order_index < 0:
            raise ValidationError(f"cluster {self.id}: negative order_index")


@dataclass(frozen=True)
class ErrorROI:
    """A likely connectivity error queued for human review."""

    id: int
    kind: str
    center: PhysPoint
    radius: float  # nm
    cell_id: int
    status: str = "open"
    evidence: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ROI_KINDS:
            raise ValidationError(f"ROI {self.id}: bad kind {self.kind!r}")
        if self.status not in ROI_STATUSES:
            raise ValidationError(f"ROI {self.id}: bad status {self.status!r}")
        if self.radius <= 0:
            raise ValidationError(f"ROI {self.id}: non-positive radius")

    def with_status(self, status: str) -> "ErrorROI":
        if self.status != "open" or status not in ("resolved", "dismissed"):
            raise ValidationError(
                f"ROI {self.id}: illegal status transition {self.status} -> {status}"
            )
        return replace(self, status=status)


@dataclass(frozen=True, slots=True)
class CellSummary:
    cell_id: int
    soma_pos: PhysPoint
    error_count: int
    synapse_count: int
    shade: float  # count / max-count for the active mode; 0 when the max is 0
