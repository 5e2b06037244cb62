"""Segmentation and synapse-validation scoring, plus the synthetic loop.

The segmentation metric is the adapted Rand error: one minus the F-score of
pairwise co-labeling precision and recall over foreground voxels (gt != 0).
Lower is better; identical labelings score exactly 0.  For hard label maps
there is no probability threshold to sweep, so the maximal F-score reduces
to the plain F-score of the single labeling.

Pair counts are computed from the label contingency table (O(voxels)); the
test suite cross-checks them against a literal O(n^2) pair enumeration.
"""

from __future__ import annotations

import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .detect import BrokenParams, detect_broken, default_mask_extractor
from .model import ParameterError, PhysPoint
from .edits import EditLog
from .skeletonize import SkeletonParams, skeletonize
from .synthetic import SyntheticSpec, generate_synthetic


def adapted_rand_error(pred: np.ndarray, gt: np.ndarray) -> float:
    """1 - F over unordered foreground voxel pairs; in [0, 1], 0 for identity.

    Foreground restriction uses gt != 0 only; predicted background voxels
    participate as their own label.  Degenerate conventions: fewer than two
    foreground voxels scores 0; when neither side co-labels any pair the
    segmentations agree trivially (0); when matches are impossible the score
    is 1.
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ParameterError(f"shape mismatch {pred.shape} vs {gt.shape}")
    fg = gt.ravel() != 0
    p = pred.ravel()[fg]
    g = gt.ravel()[fg]
    n = p.size
    if n < 2:
        return 0.0

    _, p_idx = np.unique(p, return_inverse=True)
    _, g_idx = np.unique(g, return_inverse=True)
    n_p = int(p_idx.max()) + 1
    n_g = int(g_idx.max()) + 1
    contingency = np.bincount(p_idx * n_g + g_idx, minlength=n_p * n_g).reshape(n_p, n_g)

    def pairs(counts: np.ndarray) -> int:
        c = counts.astype(object)  # exact integer arithmetic
        return int((c * (c - 1) // 2).sum())

    matches = pairs(contingency.ravel())
    pred_pairs = pairs(contingency.sum(axis=1))
    gt_pairs = pairs(contingency.sum(axis=0))

    if pred_pairs == 0 and gt_pairs == 0:
        return 0.0
    if matches == 0:
        return 1.0
    precision = matches / pred_pairs
    recall = matches / gt_pairs
    f_score = 2 * precision * recall / (precision + recall)
    return 1.0 - f_score


def synapse_accuracy(statuses: dict[int, str], gt_statuses: dict[int, str]) -> float:
    """Fraction of synapses whose validated status matches the ground truth.

    A synapse left unvalidated counts as a mismatch against a decided ground
    truth.
    """
    if set(statuses) != set(gt_statuses):
        raise ParameterError("status id sets differ")
    if not statuses:
        return 1.0
    matches = sum(1 for sid, status in statuses.items() if status == gt_statuses[sid])
    return matches / len(statuses)


# -- synthetic proofreading loop --------------------------------------------------


@dataclass(frozen=True)
class LoopParams:
    skeleton: SkeletonParams = SkeletonParams()
    broken: BrokenParams = BrokenParams()
    mask_threshold: int = 115
    bridge_slices: int = 3


@dataclass
class LoopReport:
    pre_are: float
    post_are: float
    roi_count: int
    corrected_count: int
    rois: list = field(default_factory=list)


def run_synthetic_loop(
    spec: SyntheticSpec,
    seed: int,
    params: LoopParams = LoopParams(),
    workdir: str | Path | None = None,
) -> LoopReport:
    """Generate data, detect broken neurites, auto-correct, and score ARE.

    The scripted corrector merges across each broken-neurite ROI using its
    candidate_label evidence (deduplicated with a union-find so fragment
    chains merge once).  Deterministic per (spec, seed).
    """
    if workdir is None:
        with tempfile.TemporaryDirectory() as tmp:
            return run_synthetic_loop(spec, seed, params, workdir=tmp)
    workdir = Path(workdir)
    result = generate_synthetic(spec, seed, workdir)
    base_labels = result.base.read_full("labels")
    truth_labels = result.truth.read_full("labels")
    pre_are = adapted_rand_error(base_labels, truth_labels)

    soma_by_cell = {s.cell_id: s.pos for s in result.somas}
    extractor = default_mask_extractor(params.mask_threshold, params.bridge_slices)
    object_ids = [int(v) for v in np.unique(base_labels) if v != 0]

    rois = []
    next_id = 1
    for oid in object_ids:
        sk = skeletonize(result.base, oid, params.skeleton, soma_hint=soma_by_cell.get(oid))
        found = detect_broken(result.base, sk, extractor, params.broken, start_id=next_id)
        rois.extend(found)
        next_id += len(found)

    log = EditLog(result.base)
    parent: dict[int, int] = {oid: oid for oid in object_ids}

    def find(x: int) -> int:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    corrected = 0
    for roi in rois:
        candidate = int(roi.evidence.get("candidate_label", 0))
        if candidate == 0 or candidate not in parent:
            continue
        a, b = find(roi.cell_id), find(candidate)
        if a == b:
            continue
        log.apply(
            "MergeObjects",
            {
                "target_id": a,
                "source_id": b,
                "anchor_a": list(roi.center.as_tuple()),
                "anchor_b": list(roi.center.as_tuple()),
            },
            author="auto-corrector",
        )
        parent[b] = a
        corrected += 1

    post_labels = log.materialize_full(log.head)
    post_are = adapted_rand_error(post_labels, truth_labels)
    return LoopReport(
        pre_are=pre_are,
        post_are=post_are,
        roi_count=len(rois),
        corrected_count=corrected,
        rois=rois,
    )


# -- reporting ---------------------------------------------------------------------


def render_report_text(rows: list[tuple[str, float, float]]) -> str:
    """Two-column accuracy table: one `name pre post` row per dataset."""
    lines = [f"{name} {pre:.2f} {post:.2f}" for name, pre, post in rows]
    return "\n".join(lines) + ("\n" if lines else "")


def render_report_csv(rows: list[tuple[str, float, float]]) -> str:
    lines = ["dataset, pre_ARE, post_ARE"]
    lines.extend(f"{name}, {pre!r}, {post!r}" for name, pre, post in rows)
    return "\n".join(lines) + "\n"
