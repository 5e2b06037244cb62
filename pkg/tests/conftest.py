"""Shared fixtures: tiny stores and hand-built skeleton geometry."""

from __future__ import annotations

import numpy as np
import pytest

from circuitproof.model import PhysPoint, Skeleton, SkeletonNode
from circuitproof.store import create_store


def build_store(path, image, labels, voxel_size=(10.0, 10.0, 10.0), chunk_shape=None):
    return create_store(path, image, labels, voxel_size, chunk_shape)


def tube_arrays(dims, axis=0, lo=1, hi=None, label=7, width=1, bright=200, dark=30):
    """A straight tube of the given voxel width along one axis."""
    image = np.full(dims, dark, np.uint8)
    labels = np.zeros(dims, np.uint64)
    hi = dims[axis] - 1 if hi is None else hi
    c = [d // 2 for d in dims]
    sel = [slice(c[a] - width // 2, c[a] - width // 2 + width) for a in range(3)]
    sel[axis] = slice(lo, hi)
    labels[tuple(sel)] = label
    image[tuple(sel)] = bright
    return image, labels


def chain_skeleton(points, radius=50.0, object_id=1) -> Skeleton:
    """A path skeleton through the given nm points; ids 1..n, root first."""
    nodes = []
    for i, p in enumerate(points, start=1):
        nodes.append(
            SkeletonNode(id=i, pos=PhysPoint(*p), radius=radius, parent=None if i == 1 else i - 1)
        )
    return Skeleton(object_id=object_id, nodes=tuple(nodes), root_id=1)


def y_skeleton(stem=4, arm=3, step=100.0, object_id=1) -> Skeleton:
    """Stem along +x from the root, then two arms (+y and -y diagonals).

    Node ids: 1..stem+1 along the stem (junction last), then arm a ids, then
    arm b ids.  Every edge has length `step` (arms run diagonally).
    """
    nodes = [SkeletonNode(id=1, pos=PhysPoint(0, 0, 0), radius=50.0, parent=None)]
    for i in range(2, stem + 2):
        nodes.append(
            SkeletonNode(id=i, pos=PhysPoint((i - 1) * step, 0, 0), radius=50.0, parent=i - 1)
        )
    junction = stem + 1
    jx = stem * step
    d = step / np.sqrt(2.0)
    nid = junction
    for sign in (1, -1):
        parent = junction
        for k in range(1, arm + 1):
            nid += 1
            nodes.append(
                SkeletonNode(
                    id=nid,
                    pos=PhysPoint(jx + k * d, sign * k * d, 0),
                    radius=50.0,
                    parent=parent,
                )
            )
            parent = nid
    return Skeleton(object_id=object_id, nodes=tuple(nodes), root_id=1)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(20260809)


# one pass/fail line per acceptance criterion in the terminal summary
_acceptance_results: dict[str, str] = {}


def pytest_runtest_logreport(report):
    if report.when == "call" and "test_acceptance.py" in report.nodeid:
        name = report.nodeid.split("::")[-1]
        _acceptance_results[name] = report.outcome


def pytest_terminal_summary(terminalreporter):
    if not _acceptance_results:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcome in _acceptance_results.items():
        status = "PASS" if outcome == "passed" else outcome.upper()
        terminalreporter.write_line(f"{name}: {status}")
