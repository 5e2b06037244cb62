"""Line-delimited artifact files shared by the pipeline stages and the service.

Formats (all positions in nm, comma-separated fields):

    synapses.txt        id, pre_x, pre_y, pre_z, pre_seg, post_x, post_y, post_z, post_seg
    somas.txt           cell_id, x, y, z
    skeletons/<id>.txt  node_id, x, y, z, radius, parent_id   (parent -1 for the root)
    clusters/<id>.txt   cluster_id, order_index, branch_id, cx, cy, cz, member_ids...
    rois.txt            id, kind, x, y, z, radius, cell_id, status, key=value;key=value

Repeated synapse ids in the synapse table accumulate extra postsynaptic
elements onto one synapse.  Element ids are assigned in load order (ascending
synapse id, pre before posts), which keeps them stable for a given table.
"""

from __future__ import annotations

from pathlib import Path

from .model import (
    ErrorROI,
    FormatError,
    PhysPoint,
    Skeleton,
    SkeletonNode,
    Synapse,
    SynapseCluster,
    SynapticElement,
)
from .synthetic import SomaRecord, SynapseRecord


def _fields(line: str) -> list[str]:
    return [f.strip() for f in line.split(",")]


def _num(value: float) -> str:
    return repr(float(value))


# -- synapse table ----------------------------------------------------------

def save_synapse_table(path: str | Path, records: list[SynapseRecord]) -> None:
    lines = []
    for r in records:
        lines.append(
            ", ".join(
                [
                    str(r.id),
                    _num(r.pre_pos.x), _num(r.pre_pos.y), _num(r.pre_pos.z), str(r.pre_seg),
                    _num(r.post_pos.x), _num(r.post_pos.y), _num(r.post_pos.z), str(r.post_seg),
                ]
            )
        )
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def load_synapses(path: str | Path) -> list[Synapse]:
    """Load the synapse table into Synapse objects with deterministic element ids."""
    rows: dict[int, list[tuple[PhysPoint, int, PhysPoint, int]]] = {}
    p = Path(path)
    if not p.is_file():
        raise FormatError(f"missing synapse table {p}")
    for lineno, line in enumerate(p.read_text().splitlines(), 1):
        if not line.strip():
            continue
        f = _fields(line)
        if len(f) != 9:
            raise FormatError(f"{p}:{lineno}: expected 9 fields, got {len(f)}")
        try:
            sid = int(f[0])
            pre = PhysPoint(float(f[1]), float(f[2]), float(f[3]))
            pre_seg = int(f[4])
            post = PhysPoint(float(f[5]), float(f[6]), float(f[7]))
            post_seg = int(f[8])
        except ValueError as exc:
            raise FormatError(f"{p}:{lineno}: {exc}") from exc
        rows.setdefault(sid, []).append((pre, pre_seg, post, post_seg))

    synapses: list[Synapse] = []
    eid = 1
    for sid in sorted(rows):
        entries = rows[sid]
        pre_pos, pre_seg = entries[0][0], entries[0][1]
        pre = SynapticElement(id=eid, kind="pre", pos=pre_pos, segment_id=pre_seg)
        eid += 1
        posts = []
        for _, _, post_pos, post_seg in entries:
            posts.append(SynapticElement(id=eid, kind="post", pos=post_pos, segment_id=post_seg))
            eid += 1
        synapses.append(Synapse(id=sid, pre=pre, posts=tuple(posts)))
    return synapses


# -- soma table ---------------------------------------------------------------

def save_soma_table(path: str | Path, somas: list[SomaRecord]) -> None:
    lines = [
        ", ".join([str(s.cell_id), _num(s.pos.x), _num(s.pos.y), _num(s.pos.z)])
        for s in somas
    ]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def load_soma_table(path: str | Path) -> dict[int, PhysPoint]:
    p = Path(path)
    if not p.is_file():
        raise FormatError(f"missing soma table {p}")
    somas: dict[int, PhysPoint] = {}
    for lineno, line in enumerate(p.read_text().splitlines(), 1):
        if not line.strip():
            continue
        f = _fields(line)
        if len(f) != 4:
            raise FormatError(f"{p}:{lineno}: expected 4 fields, got {len(f)}")
        somas[int(f[0])] = PhysPoint(float(f[1]), float(f[2]), float(f[3]))
    return somas


# -- skeleton files -----------------------------------------------------------

def save_skeleton(path: str | Path, skeleton: Skeleton) -> None:
    lines = []
    for n in skeleton.nodes:
        parent = -1 if n.parent is None else n.parent
        lines.append(
            ", ".join(
                [str(n.id), _num(n.pos.x), _num(n.pos.y), _num(n.pos.z), _num(n.radius), str(parent)]
            )
        )
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def load_skeleton(path: str | Path, object_id: int) -> Skeleton:
    p = Path(path)
    if not p.is_file():
        raise FormatError(f"missing skeleton file {p}")
    nodes = []
    root_id = None
    for lineno, line in enumerate(p.read_text().splitlines(), 1):
        if not line.strip():
            continue
        f = _fields(line)
        if len(f) != 6:
            raise FormatError(f"{p}:{lineno}: expected 6 fields, got {len(f)}")
        nid = int(f[0])
        parent = int(f[5])
        if parent == -1:
            root_id = nid
        nodes.append(
            SkeletonNode(
                id=nid,
                pos=PhysPoint(float(f[1]), float(f[2]), float(f[3])),
                radius=float(f[4]),
                parent=None if parent == -1 else parent,
            )
        )
    if root_id is None:
        raise FormatError(f"{p}: no root node (parent -1)")
    return Skeleton(object_id=object_id, nodes=tuple(nodes), root_id=root_id)


def skeleton_path(store_dir: str | Path, object_id: int) -> Path:
    return Path(store_dir) / "skeletons" / f"{object_id}.txt"


# -- cluster files --------------------------------------------------------------

def save_clusters(path: str | Path, clusters: list[SynapseCluster]) -> None:
    lines = []
    for c in sorted(clusters, key=lambda c: c.order_index):
        fields = [
            str(c.id), str(c.order_index), str(c.branch_id),
            _num(c.centroid.x), _num(c.centroid.y), _num(c.centroid.z),
        ]
        fields.extend(str(m) for m in sorted(c.member_ids))
        lines.append(", ".join(fields))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def load_clusters(path: str | Path, anchor_nodes: dict[int, int] | None = None) -> list[SynapseCluster]:
    """Load a cluster file; anchor nodes are not stored, so callers may supply them."""
    p = Path(path)
    if not p.is_file():
        raise FormatError(f"missing cluster file {p}")
    clusters = []
    for lineno, line in enumerate(p.read_text().splitlines(), 1):
        if not line.strip():
            continue
        f = _fields(line)
        if len(f) < 7:
            raise FormatError(f"{p}:{lineno}: expected >= 7 fields, got {len(f)}")
        cid = int(f[0])
        clusters.append(
            SynapseCluster(
                id=cid,
                order_index=int(f[1]),
                branch_id=int(f[2]),
                centroid=PhysPoint(float(f[3]), float(f[4]), float(f[5])),
                anchor_node=(anchor_nodes or {}).get(cid, -1),
                member_ids=frozenset(int(m) for m in f[6:]),
            )
        )
    return clusters


# -- ROI files --------------------------------------------------------------------

def _encode_evidence(evidence: dict) -> str:
    if not evidence:
        return "-"
    parts = []
    for key in sorted(evidence):
        value = evidence[key]
        text = repr(float(value)) if isinstance(value, float) else str(value)
        if "=" in text or ";" in text or "," in text:
            raise ValueError(f"evidence value {text!r} cannot be encoded")
        parts.append(f"{key}={text}")
    return ";".join(parts)


def _decode_evidence(text: str) -> dict:
    if text == "-" or not text:
        return {}
    out: dict = {}
    for part in text.split(";"):
        key, _, value = part.partition("=")
        try:
            num = float(value)
            out[key] = int(num) if num.is_integer() and "." not in value else num
        except ValueError:
            out[key] = value
    return out


def save_rois(path: str | Path, rois: list[ErrorROI]) -> None:
    lines = []
    for r in rois:
        lines.append(
            ", ".join(
                [
                    str(r.id), r.kind,
                    _num(r.center.x), _num(r.center.y), _num(r.center.z),
                    _num(r.radius), str(r.cell_id), r.status,
                    _encode_evidence(r.evidence),
                ]
            )
        )
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def load_rois(path: str | Path) -> list[ErrorROI]:
    p = Path(path)
    if not p.is_file():
        raise FormatError(f"missing ROI file {p}")
    rois = []
    for lineno, line in enumerate(p.read_text().splitlines(), 1):
        if not line.strip():
            continue
        f = _fields(line)
        if len(f) != 9:
            raise FormatError(f"{p}:{lineno}: expected 9 fields, got {len(f)}")
        rois.append(
            ErrorROI(
                id=int(f[0]),
                kind=f[1],
                center=PhysPoint(float(f[2]), float(f[3]), float(f[4])),
                radius=float(f[5]),
                cell_id=int(f[6]),
                status=f[7],
                evidence=_decode_evidence(f[8]),
            )
        )
    return rois
