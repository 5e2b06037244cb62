"""Synthetic EM-like volumes with ground truth.

Generates tube-shaped "neurites" running along z: bright voxels (mean 200)
over a dark background (mean 30) with gaussian noise, a ground-truth label
volume of intact tubes, and a base label volume with injected connectivity
errors (cuts and merges).  Synapses are sampled along tube surfaces with
pre/post pairing between nearby tubes.  Output is deterministic per
(spec, seed).

Default intensities put a fixed threshold of 115 at >= 5 sigma from both
classes for the default noise, which gives the threshold-based mask extractor
a deterministic operating point.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import FormatError, PhysPoint, ValidationError
from .store import LABEL_DTYPE, VolumeStore, create_store

TUBE_MEAN = 200.0
BACKGROUND_MEAN = 30.0
DEFAULT_NOISE_SIGMA = 17.0
MASK_THRESHOLD = 115

# nm beyond which a synapse's post element lands in background instead of a partner tube
PAIRING_RANGE_NM = 4000.0

Z_MARGIN_VOXELS = 2


class GenerationError(ValueError):
    """The spec cannot be realized (e.g. tubes overlap beyond tolerance)."""


@dataclass(frozen=True)
class SyntheticSpec:
    dims: tuple[int, int, int]
    voxel_size: tuple[float, float, float]
    tube_count: int
    tube_radius_nm: float
    branch_probability: float = 0.0
    synapse_rate_per_um: float = 1.0
    injected_cuts: tuple[tuple[int, int, int], ...] = ()   # (tube index, slice index, gap length)
    injected_merges: tuple[tuple[int, int], ...] = ()      # (tube index, tube index)
    noise_sigma: float = DEFAULT_NOISE_SIGMA

    def __post_init__(self):
        if self.tube_count <= 0:
            raise ValidationError("tube_count must be positive")
        if self.tube_radius_nm <= 0:
            raise ValidationError("tube_radius_nm must be positive")
        if not 0.0 <= self.branch_probability <= 1.0:
            raise ValidationError("branch_probability must be in [0, 1]")
        for tube, sl, gap in self.injected_cuts:
            if gap < 1:
                raise ValidationError(f"cut gap must be >= 1, got {gap}")
            if not 0 <= tube < self.tube_count:
                raise ValidationError(f"cut references unknown tube {tube}")
            lo, hi = self.tube_z_extent()
            if not (lo < sl and sl + gap < hi):
                raise ValidationError(
                    f"cut at slice {sl} gap {gap} outside tube extent [{lo}, {hi})"
                )
        for a, b in self.injected_merges:
            if a == b or not (0 <= a < self.tube_count and 0 <= b < self.tube_count):
                raise ValidationError(f"bad merge pair ({a}, {b})")

    def tube_z_extent(self) -> tuple[int, int]:
        """Voxel z range [lo, hi) every tube spans."""
        return (Z_MARGIN_VOXELS, self.dims[2] - Z_MARGIN_VOXELS)

    def tube_label(self, index: int) -> int:
        return index + 1


@dataclass(frozen=True)
class SynapseRecord:
    id: int
    pre_pos: PhysPoint
    pre_seg: int
    post_pos: PhysPoint
    post_seg: int


@dataclass(frozen=True)
class SomaRecord:
    cell_id: int
    pos: PhysPoint


@dataclass
class SyntheticResult:
    base: VolumeStore
    truth: VolumeStore
    synapses: list[SynapseRecord] = field(default_factory=list)
    somas: list[SomaRecord] = field(default_factory=list)


def _segment_distance_fill(
    labels: np.ndarray,
    p0: np.ndarray,
    p1: np.ndarray,
    radius: float,
    voxel_size: np.ndarray,
    value: int,
    z_clip: tuple[int, int] | None = None,
) -> int:
    """Label all voxels within radius of segment p0-p1; returns overlap count.

    Overlap = voxels already carrying a different nonzero label; those are
    left untouched so the caller can decide whether to abort.  A z_clip of
    (lo, hi) voxel slices cuts the capsule's end caps flat, which keeps a
    tube's z extent exact.
    """
    dims = labels.shape
    lo = np.floor((np.minimum(p0, p1) - radius) / voxel_size).astype(int)
    hi = np.ceil((np.maximum(p0, p1) + radius) / voxel_size).astype(int) + 1
    lo = np.maximum(lo, 0)
    hi = np.minimum(hi, dims)
    if z_clip is not None:
        lo[2] = max(lo[2], z_clip[0])
        hi[2] = min(hi[2], z_clip[1])
    if np.any(lo >= hi):
        return 0
    ax = (np.arange(lo[0], hi[0]) + 0.5) * voxel_size[0]
    ay = (np.arange(lo[1], hi[1]) + 0.5) * voxel_size[1]
    az = (np.arange(lo[2], hi[2]) + 0.5) * voxel_size[2]
    gx, gy, gz = np.meshgrid(ax, ay, az, indexing="ij")
    v = p1 - p0
    vv = float(v @ v)
    if vv == 0.0:
        dx, dy, dz = gx - p0[0], gy - p0[1], gz - p0[2]
    else:
        t = ((gx - p0[0]) * v[0] + (gy - p0[1]) * v[1] + (gz - p0[2]) * v[2]) / vv
        np.clip(t, 0.0, 1.0, out=t)
        dx = gx - (p0[0] + t * v[0])
        dy = gy - (p0[1] + t * v[1])
        dz = gz - (p0[2] + t * v[2])
    inside = dx * dx + dy * dy + dz * dz <= radius * radius
    view = labels[lo[0]: hi[0], lo[1]: hi[1], lo[2]: hi[2]]
    overlap = inside & (view != 0) & (view != value)
    n_overlap = int(overlap.sum())
    view[inside & ~overlap] = value
    return n_overlap


@dataclass(frozen=True)
class _Tube:
    label: int
    start: np.ndarray  # physical nm
    end: np.ndarray
    branch: tuple[np.ndarray, np.ndarray] | None  # (from, to) or None

    def axis_point(self, t: float) -> np.ndarray:
        return self.start + t * (self.end - self.start)

    def length(self) -> float:
        return float(np.linalg.norm(self.end - self.start))


def _place_tubes(spec: SyntheticSpec, rng: np.random.Generator) -> list[_Tube]:
    vsize = np.asarray(spec.voxel_size, dtype=float)
    dims = np.asarray(spec.dims, dtype=float)
    ext = dims * vsize
    z_lo, z_hi = spec.tube_z_extent()
    r = spec.tube_radius_nm
    min_sep = 2 * r + 2 * max(spec.voxel_size[0], spec.voxel_size[1])
    centers: list[np.ndarray] = []
    attempts = 0
    max_attempts = 400 * spec.tube_count
    while len(centers) < spec.tube_count:
        attempts += 1
        if attempts > max_attempts:
            raise GenerationError(
                f"cannot place {spec.tube_count} tubes of radius {r} nm "
                f"without overlap in extent {tuple(ext[:2])}"
            )
        c = rng.uniform([r + vsize[0], r + vsize[1]], [ext[0] - r - vsize[0], ext[1] - r - vsize[1]])
        if all(np.linalg.norm(c - prev) >= min_sep for prev in centers):
            centers.append(c)
    tubes: list[_Tube] = []
    for i, c in enumerate(centers):
        start = np.array([c[0], c[1], (z_lo + 0.5) * vsize[2]])
        end = np.array([c[0], c[1], (z_hi - 0.5) * vsize[2]])
        branch = None
        if rng.uniform() < spec.branch_probability:
            u = rng.uniform(0.35, 0.65)
            origin = start + u * (end - start)
            tilt = rng.uniform(math.radians(25), math.radians(60))
            azim = rng.uniform(0, 2 * math.pi)
            direction = np.array(
                [math.sin(tilt) * math.cos(azim), math.sin(tilt) * math.sin(azim), math.cos(tilt)]
            )
            length = 0.35 * float(np.linalg.norm(end - start))
            tip = origin + direction * length
            tip = np.clip(tip, [r, r, (z_lo + 0.5) * vsize[2]], ext - r - 1e-6)
            branch = (origin, tip)
        tubes.append(_Tube(label=spec.tube_label(i), start=start, end=end, branch=branch))
    return tubes


def _render(spec: SyntheticSpec, tubes: list[_Tube], rng: np.random.Generator):
    vsize = np.asarray(spec.voxel_size, dtype=float)
    labels = np.zeros(spec.dims, dtype=LABEL_DTYPE)
    z_clip = spec.tube_z_extent()
    overlap = 0
    for tube in tubes:
        overlap += _segment_distance_fill(
            labels, tube.start, tube.end, spec.tube_radius_nm, vsize, tube.label,
            z_clip=z_clip,
        )
        if tube.branch is not None:
            overlap += _segment_distance_fill(
                labels, tube.branch[0], tube.branch[1], spec.tube_radius_nm, vsize, tube.label,
                z_clip=z_clip,
            )
    if overlap > 0:
        raise GenerationError(f"tubes overlap on {overlap} voxels")
    image = rng.standard_normal(spec.dims, dtype=np.float32)
    image *= spec.noise_sigma
    image += BACKGROUND_MEAN
    mask = labels != 0
    image[mask] += TUBE_MEAN - BACKGROUND_MEAN
    np.clip(image, 0, 255, out=image)
    return image.astype(np.uint8), labels


def _apply_errors(spec: SyntheticSpec, truth: np.ndarray) -> np.ndarray:
    base = truth.copy()
    next_id = int(spec.tube_count) + 1
    for tube_idx, sl, gap in spec.injected_cuts:
        label = spec.tube_label(tube_idx)
        tube_mask = base == label
        gap_mask = tube_mask.copy()
        gap_mask[:, :, :sl] = False
        gap_mask[:, :, sl + gap:] = False
        distal_mask = tube_mask.copy()
        distal_mask[:, :, : sl + gap] = False
        base[gap_mask] = 0
        base[distal_mask] = next_id
        next_id += 1
    for a, b in spec.injected_merges:
        la, lb = spec.tube_label(a), spec.tube_label(b)
        base[base == lb] = la
    return base


def _sample_synapses(
    spec: SyntheticSpec,
    tubes: list[_Tube],
    base: np.ndarray,
    rng: np.random.Generator,
) -> list[SynapseRecord]:
    vsize = np.asarray(spec.voxel_size, dtype=float)
    dims = np.asarray(spec.dims, dtype=float)
    ext = dims * vsize
    r = spec.tube_radius_nm
    inner = max(0.5 * r, r - float(vsize.max()))

    def seg_at(p: np.ndarray) -> int:
        v = np.floor(p / vsize).astype(int)
        v = np.clip(v, 0, np.asarray(spec.dims) - 1)
        return int(base[v[0], v[1], v[2]])

    records: list[SynapseRecord] = []
    sid = 1
    for i, tube in enumerate(tubes):
        length_um = tube.length() / 1000.0
        count = int(round(length_um * spec.synapse_rate_per_um))
        if count <= 0:
            continue
        others = [t for j, t in enumerate(tubes) if j != i]
        for k in range(count):
            t = (k + 0.5) / count
            axis = tube.axis_point(t)
            azim = rng.uniform(0, 2 * math.pi)
            radial = np.array([math.cos(azim), math.sin(azim), 0.0])
            pre = axis + radial * inner
            pre = np.clip(pre, 1.0, ext - 1.0)
            partner = None
            best = PAIRING_RANGE_NM
            for other in others:
                gap = float(np.linalg.norm(other.axis_point(t)[:2] - axis[:2])) - 2 * r
                if gap < best:
                    best = gap
                    partner = other
            if partner is not None:
                toward = partner.axis_point(t) - axis
                nrm = np.linalg.norm(toward)
                toward = toward / nrm if nrm > 0 else radial
                post = partner.axis_point(t) - toward * inner
            else:
                post = axis + radial * (r + 2.0 * float(vsize.max()))
            post = np.clip(post, 1.0, ext - 1.0)
            records.append(
                SynapseRecord(
                    id=sid,
                    pre_pos=PhysPoint(*pre),
                    pre_seg=seg_at(pre),
                    post_pos=PhysPoint(*post),
                    post_seg=seg_at(post),
                )
            )
            sid += 1
    return records


def generate_synthetic(spec: SyntheticSpec, seed: int, out: str | Path) -> SyntheticResult:
    """Generate base + ground-truth stores, synapse table, and soma table.

    Writes ``out/base`` and ``out/truth`` store directories; the synapse and
    soma tables land inside ``out/base`` next to the chunk data.
    """
    out = Path(out)
    rng = np.random.default_rng(seed)
    tubes = _place_tubes(spec, rng)
    image, truth_labels = _render(spec, tubes, rng)
    base_labels = _apply_errors(spec, truth_labels)
    synapses = _sample_synapses(spec, tubes, base_labels, rng)

    base = create_store(out / "base", image, base_labels, spec.voxel_size)
    truth = create_store(out / "truth", image, truth_labels, spec.voxel_size)

    surviving = set(np.unique(base_labels).tolist())
    somas = [
        SomaRecord(cell_id=t.label, pos=PhysPoint(*t.start))
        for t in tubes
        if t.label in surviving
    ]
    from . import tables

    tables.save_synapse_table(base.path / "synapses.txt", synapses)
    tables.save_soma_table(base.path / "somas.txt", somas)
    return SyntheticResult(base=base, truth=truth, synapses=synapses, somas=somas)


def load_spec(path: str | Path) -> SyntheticSpec:
    """Parse a key = value spec file; lists use ``a:b:c`` items."""
    entries: dict[str, str] = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"bad spec line {line!r}")
        key, _, value = line.partition("=")
        entries[key.strip()] = value.strip()

    def ints3(key: str) -> tuple[int, int, int]:
        return tuple(int(v) for v in entries[key].split())

    def floats3(key: str) -> tuple[float, float, float]:
        return tuple(float(v) for v in entries[key].split())

    try:
        cuts = tuple(
            tuple(int(v) for v in item.split(":"))
            for item in entries.get("cuts", "").split()
        )
        merges = tuple(
            tuple(int(v) for v in item.split(":"))
            for item in entries.get("merges", "").split()
        )
        return SyntheticSpec(
            dims=ints3("dims"),
            voxel_size=floats3("voxel_size"),
            tube_count=int(entries["tube_count"]),
            tube_radius_nm=float(entries["tube_radius_nm"]),
            branch_probability=float(entries.get("branch_probability", "0")),
            synapse_rate_per_um=float(entries.get("synapse_rate_per_um", "1.0")),
            injected_cuts=cuts,
            injected_merges=merges,
            noise_sigma=float(entries.get("noise_sigma", str(DEFAULT_NOISE_SIGMA))),
        )
    except KeyError as exc:
        raise FormatError(f"spec file missing key {exc}") from exc
    except ValueError as exc:
        raise FormatError(f"spec file: {exc}") from exc
