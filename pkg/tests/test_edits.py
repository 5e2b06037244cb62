import hashlib
import heapq
import math
from pathlib import Path

import numpy as np
import pytest

from circuitproof.edits import EditLog, split_partition
from circuitproof.model import (
    NotFoundError,
    PhysPoint,
    Synapse,
    SynapticElement,
    ValidationError,
    VoxelCoord,
)

from conftest import build_store


def store_digest(path: Path) -> str:
    h = hashlib.sha256()
    base = Path(path)
    for rel in sorted(["meta.txt"] + [str(p.relative_to(base)) for p in base.rglob("*.raw")]):
        h.update(rel.encode())
        h.update((base / rel).read_bytes())
    return h.hexdigest()


def tube_store(tmp_path, dims=(12, 6, 6)):
    img = np.full(dims, 30, np.uint8)
    lab = np.zeros(dims, np.uint64)
    lab[1:11, 2:4, 2:4] = 5
    lab[0, 5, 5] = 9
    return build_store(tmp_path, img, lab)


def synapse(sid, pre_pos=(15, 25, 25), post_pos=(25, 25, 25)):
    return Synapse(
        id=sid,
        pre=SynapticElement(id=sid * 10, kind="pre", pos=PhysPoint(*pre_pos), segment_id=5),
        posts=(
            SynapticElement(id=sid * 10 + 1, kind="post", pos=PhysPoint(*post_pos), segment_id=9),
        ),
    )


class TestApply:
    def test_merge_relabels_source_voxels(self, tmp_path):
        log = EditLog(tube_store(tmp_path / "s"))
        v = log.apply(
            "MergeObjects",
            {"target_id": 5, "source_id": 9, "anchor_a": [5, 55, 55], "anchor_b": [15, 25, 25]},
            author="t",
        )
        sub = log.materialize_region(v, VoxelCoord(0, 5, 5), (1, 1, 1))
        assert int(sub.labels[0, 0, 0]) == 5

    def test_split_boundary_equidistant(self, tmp_path):
        """Two seeds at tube ends: the halves split at the geodesic midline."""
        log = EditLog(tube_store(tmp_path / "s"))
        v = log.apply(
            "SplitObject", {"object_id": 5, "seeds": [[15, 25, 25], [105, 35, 35]]}, author="t"
        )
        full = log.materialize_full(v)
        new_ids = log.edits[v - 1].payload["new_ids"]
        counts = [(full == nid).sum() for nid in new_ids]
        assert sum(counts) == 40  # split totality over the tube
        assert abs(counts[0] - counts[1]) <= 4  # one boundary slice of slack
        # oracle: per-voxel nearest-seed geodesic flood (pure python dijkstra)
        lab = tube_store(tmp_path / "o").read_full("labels")
        mask = lab == 5
        dist = {0: {}, 1: {}}
        for idx, seed in enumerate([(1, 2, 2), (10, 3, 3)]):
            heap = [(0.0, seed)]
            seen = dist[idx]
            seen[seed] = 0.0
            while heap:
                d, v3 = heapq.heappop(heap)
                if d > seen.get(v3, math.inf):
                    continue
                for dx in (-1, 0, 1):
                    for dy in (-1, 0, 1):
                        for dz in (-1, 0, 1):
                            if dx == dy == dz == 0:
                                continue
                            u = (v3[0] + dx, v3[1] + dy, v3[2] + dz)
                            if not all(0 <= u[a] < mask.shape[a] for a in range(3)):
                                continue
                            if not mask[u]:
                                continue
                            nd = d + 10.0 * math.sqrt(dx * dx + dy * dy + dz * dz)
                            if nd < seen.get(u, math.inf):
                                seen[u] = nd
                                heapq.heappush(heap, (nd, u))
        for v3 in map(tuple, np.argwhere(mask)):
            d0 = dist[0].get(v3, math.inf)
            d1 = dist[1].get(v3, math.inf)
            expected = new_ids[0] if (d0 < d1 or (d0 == d1)) else new_ids[1]
            assert full[v3] == expected

    def test_remove_unknown_synapse_rejected(self, tmp_path):
        log = EditLog(tube_store(tmp_path / "s"), base_synapses=[synapse(1)])
        with pytest.raises(ValidationError):
            log.apply("RemoveSynapse", {"id": 42}, author="t")
        assert log.head == 0

    def test_merge_unknown_object_rejected(self, tmp_path):
        log = EditLog(tube_store(tmp_path / "s"))
        with pytest.raises(ValidationError):
            log.apply(
                "MergeObjects",
                {"target_id": 5, "source_id": 77, "anchor_a": [0, 0, 0], "anchor_b": [0, 0, 0]},
                author="t",
            )
        assert log.head == 0

    def test_versions_dense_and_increasing(self, tmp_path):
        log = EditLog(tube_store(tmp_path / "s"), base_synapses=[synapse(1)])
        versions = [
            log.apply("SetStatus", {"ids": [1], "status": "valid"}, author="t"),
            log.apply("SetStatus", {"ids": [1], "status": "invalid"}, author="t"),
            log.apply("Annotate", {"pos": [10, 10, 10], "text": "check"}, author="t"),
        ]
        assert versions == [1, 2, 3]


class TestMaterialize:
    def test_version_zero_equals_base(self, tmp_path):
        store = tube_store(tmp_path / "s")
        log = EditLog(store)
        log.apply("DeleteObject", {"object_id": 9}, author="t")
        from circuitproof.store import read_region

        base = read_region(store, VoxelCoord(5, 3, 3), (8, 8, 8))
        sub = log.materialize_region(0, VoxelCoord(5, 3, 3), (8, 8, 8))
        assert np.array_equal(base.labels, sub.labels)
        assert np.array_equal(base.image, sub.image)

    def test_paint_voxels_pointwise_override(self, tmp_path):
        log = EditLog(tube_store(tmp_path / "s"))
        v = log.apply(
            "PaintVoxels", {"runs": [[2, 2, 2, 3]], "label": 12}, author="t"
        )
        sub = log.materialize_region(v, VoxelCoord(3, 2, 2), (8, 4, 4))
        full = log.materialize_full(v)
        assert (full[2:5, 2, 2] == 12).all()
        assert (full[5:11, 2, 2] == 5).all()
        region_vals = sub.labels[:, 2 - sub.origin[1], 2 - sub.origin[2]]
        assert np.array_equal(region_vals[2 - sub.origin[0]: 5 - sub.origin[0]], [12, 12, 12])

    def test_prefix_replay_merge_visible_split_not(self, tmp_path):
        log = EditLog(tube_store(tmp_path / "s"))
        v1 = log.apply(
            "MergeObjects",
            {"target_id": 5, "source_id": 9, "anchor_a": [5, 55, 55], "anchor_b": [15, 25, 25]},
            author="t",
        )
        v2 = log.apply(
            "SplitObject", {"object_id": 5, "seeds": [[15, 25, 25], [105, 35, 35]]}, author="t"
        )
        at_v1 = log.materialize_full(v1)
        assert set(np.unique(at_v1).tolist()) == {0, 5}
        at_v2 = log.materialize_full(v2)
        assert 5 not in np.unique(at_v2).tolist()

    def test_version_beyond_head(self, tmp_path):
        log = EditLog(tube_store(tmp_path / "s"))
        with pytest.raises(NotFoundError):
            log.materialize_region(1, VoxelCoord(0, 0, 0), (2, 2, 2))

    def test_replay_determinism(self, tmp_path):
        log = EditLog(tube_store(tmp_path / "s"))
        log.apply("SplitObject", {"object_id": 5, "seeds": [[15, 25, 25], [105, 35, 35]]}, author="t")
        a = log.materialize_region(1, VoxelCoord(5, 3, 3), (12, 6, 6))
        b = log.materialize_region(1, VoxelCoord(5, 3, 3), (12, 6, 6))
        assert a.labels.tobytes() == b.labels.tobytes()


class TestRollback:
    def test_rollback_to_base(self, tmp_path):
        store = tube_store(tmp_path / "s")
        log = EditLog(store)
        for _ in range(3):
            log.apply("DeleteObject", {"object_id": 9}, author="t")
            log.rollback(0)
        log.apply("MergeObjects", {"target_id": 5, "source_id": 9,
                                   "anchor_a": [0, 0, 0], "anchor_b": [0, 0, 0]}, author="t")
        log.rollback(0)
        assert np.array_equal(log.materialize_full(log.head), store.read_full("labels"))

    def test_rollback_matches_direct_materialization(self, tmp_path):
        log = EditLog(tube_store(tmp_path / "s"), base_synapses=[synapse(1)])
        log.apply("DeleteObject", {"object_id": 9}, author="t")
        log.apply("PaintVoxels", {"runs": [[0, 0, 0, 4]], "label": 3}, author="t")
        log.apply("SetStatus", {"ids": [1], "status": "valid"}, author="t")
        log.apply("PaintVoxels", {"runs": [[0, 1, 0, 4]], "label": 4}, author="t")
        log.apply("PaintVoxels", {"runs": [[0, 2, 0, 4]], "label": 6}, author="t")
        head = log.rollback(3)
        assert np.array_equal(log.materialize_full(head), log.materialize_full(3))

    def test_unknown_version(self, tmp_path):
        log = EditLog(tube_store(tmp_path / "s"))
        for _ in range(5):
            log.apply("Annotate", {"pos": [1, 1, 1], "text": "x"}, author="t")
        with pytest.raises(NotFoundError):
            log.rollback(99)

    def test_rollback_never_deletes_entries(self, tmp_path):
        log = EditLog(tube_store(tmp_path / "s"))
        log.apply("DeleteObject", {"object_id": 9}, author="t")
        log.rollback(0)
        assert log.head == 2
        assert [e.kind for e in log.edits] == ["DeleteObject", "Revert"]


class TestSplitPartition:
    def test_symmetric_tube_equal_halves(self):
        mask = np.zeros((10, 3, 3), bool)
        mask[:, 1, 1] = True
        assignment = split_partition(mask, [(0, 1, 1), (9, 1, 1)], (10.0, 10.0, 10.0))
        counts = [(assignment == i).sum() for i in (0, 1)]
        assert counts == [5, 5]
        assert (assignment[~mask] == -1).all()

    def test_coincident_seeds_rejected(self):
        mask = np.zeros((2, 1, 1), bool)
        mask[0, 0, 0] = True
        with pytest.raises(ValidationError):
            split_partition(mask, [(0, 0, 0), (0, 0, 0)], (10, 10, 10))

    def test_seed_outside_mask_rejected(self):
        mask = np.zeros((4, 1, 1), bool)
        mask[0, 0, 0] = True
        with pytest.raises(ValidationError):
            split_partition(mask, [(0, 0, 0), (3, 0, 0)], (10, 10, 10))

    def test_separate_components_follow_their_seed(self):
        mask = np.zeros((7, 1, 1), bool)
        mask[0:3, 0, 0] = True
        mask[5:7, 0, 0] = True
        assignment = split_partition(mask, [(0, 0, 0), (6, 0, 0)], (10, 10, 10))
        assert (assignment[0:3, 0, 0] == 0).all()
        assert (assignment[5:7, 0, 0] == 1).all()

    def test_totality(self):
        rng = np.random.default_rng(2)
        mask = rng.random((6, 6, 6)) < 0.6
        mask[0, 0, 0] = mask[5, 5, 5] = True
        assignment = split_partition(mask, [(0, 0, 0), (5, 5, 5)], (10, 10, 10))
        assert ((assignment >= 0) == mask).all()


class TestBaseImmutability:
    def test_store_bytes_unchanged(self, tmp_path):
        store = tube_store(tmp_path / "s")
        before = store_digest(store.path)
        log = EditLog(store, path=tmp_path / "s" / "edits.log")
        log.apply("MergeObjects", {"target_id": 5, "source_id": 9,
                                   "anchor_a": [0, 0, 0], "anchor_b": [0, 0, 0]}, author="t")
        log.apply("SplitObject", {"object_id": 5, "seeds": [[15, 25, 25], [105, 35, 35]]}, author="t")
        log.rollback(0)
        log.materialize_full(log.head)
        assert store_digest(store.path) == before


class TestGraphEdits:
    def make_log(self, tmp_path):
        return EditLog(tube_store(tmp_path / "s"), base_synapses=[synapse(1), synapse(2)])

    def test_add_synapse_assigns_element_ids(self, tmp_path):
        log = self.make_log(tmp_path)
        v = log.apply(
            "AddSynapse",
            {"record": {"id": 7, "pre": {"pos": [10, 10, 10], "segment_id": 5},
                        "posts": [{"pos": [20, 20, 20], "segment_id": 9}]}},
            author="t",
        )
        state = log.graph_state(v)
        assert 7 in state.synapses
        new = state.synapses[7]
        existing = {e.id for s in [synapse(1), synapse(2)] for e in s.elements()}
        assert new.pre.id not in existing
        assert new.posts[0].id not in existing

    def test_move_element(self, tmp_path):
        log = self.make_log(tmp_path)
        v = log.apply("MoveElement", {"element_id": 10, "pos": [50, 50, 50]}, author="t")
        state = log.graph_state(v)
        assert state.synapses[1].pre.pos.as_tuple() == (50.0, 50.0, 50.0)

    def test_reconnect_synapse(self, tmp_path):
        log = self.make_log(tmp_path)
        v = log.apply("ReconnectSynapse", {"synapse_id": 1, "post_element_ids": [11]}, author="t")
        state = log.graph_state(v)
        assert [e.id for e in state.synapses[1].posts] == [11]

    def test_reconnect_cannot_strand_donor(self, tmp_path):
        log = self.make_log(tmp_path)
        with pytest.raises(ValidationError):
            log.apply("ReconnectSynapse", {"synapse_id": 1, "post_element_ids": [21]}, author="t")

    def test_resolve_error_transitions_once(self, tmp_path):
        from circuitproof.model import ErrorROI

        roi = ErrorROI(id=1, kind="broken", center=PhysPoint(10, 10, 10), radius=100.0, cell_id=5)
        log = EditLog(tube_store(tmp_path / "s"), base_rois=[roi])
        log.apply("ResolveError", {"roi_id": 1, "resolution": "dismissed"}, author="t")
        assert log.graph_state(log.head).roi_status[1] == "dismissed"
        with pytest.raises(ValidationError):
            log.apply("ResolveError", {"roi_id": 1, "resolution": "resolved"}, author="t")

    def test_author_is_recorded(self, tmp_path):
        log = self.make_log(tmp_path)
        log.apply("SetStatus", {"ids": [1], "status": "valid"}, author="alice")
        assert log.edits[0].author == "alice"
        with pytest.raises(ValidationError):
            log.apply("SetStatus", {"ids": [1], "status": "valid"}, author="bad,author")


class TestPersistence:
    def test_log_round_trip(self, tmp_path):
        store = tube_store(tmp_path / "s")
        path = tmp_path / "s" / "edits.log"
        log = EditLog(store, path=path, base_synapses=[synapse(1)])
        log.apply("MergeObjects", {"target_id": 5, "source_id": 9,
                                   "anchor_a": [0, 0, 0], "anchor_b": [1, 1, 1]}, author="a")
        log.apply("SetStatus", {"ids": [1], "status": "valid"}, author="b")
        log.apply("SplitObject", {"object_id": 5, "seeds": [[15, 25, 25], [105, 35, 35]]}, author="c")
        log.rollback(1)

        loaded = EditLog.load(store, path, base_synapses=[synapse(1)])
        assert loaded.head == log.head
        assert [e.kind for e in loaded.edits] == [e.kind for e in log.edits]
        assert [e.timestamp for e in loaded.edits] == [e.timestamp for e in log.edits]
        a = log.materialize_full(log.head)
        b = loaded.materialize_full(loaded.head)
        assert np.array_equal(a, b)

    def test_flushed_per_edit(self, tmp_path):
        store = tube_store(tmp_path / "s")
        path = tmp_path / "s" / "edits.log"
        log = EditLog(store, path=path)
        log.apply("DeleteObject", {"object_id": 9}, author="t")
        assert len(path.read_text().splitlines()) == 1


def test_fuzzed_rollback_contract(tmp_path):
    """Random edit sequences: materialize(head after rollback(v)) == materialize(v)."""
    rng = np.random.default_rng(8)
    store = tube_store(tmp_path / "s")
    before = store_digest(store.path)
    for trial in range(6):
        log = EditLog(store, base_synapses=[synapse(1), synapse(2)])
        for _ in range(25):
            choice = rng.integers(0, 4)
            inventory = sorted(log.label_inventory(log.head))
            try:
                if choice == 0 and len(inventory) >= 2:
                    target, source = rng.choice(inventory, size=2, replace=False)
                    log.apply("MergeObjects",
                              {"target_id": int(target), "source_id": int(source),
                               "anchor_a": [0, 0, 0], "anchor_b": [0, 0, 0]}, author="f")
                elif choice == 1:
                    x = int(rng.integers(0, 10))
                    y = int(rng.integers(0, 6))
                    z = int(rng.integers(0, 6))
                    log.apply("PaintVoxels",
                              {"runs": [[x, y, z, int(rng.integers(1, 12 - x))]],
                               "label": int(rng.integers(0, 14))}, author="f")
                elif choice == 2:
                    log.apply("SetStatus", {"ids": [1], "status": "valid"}, author="f")
                else:
                    log.rollback(int(rng.integers(0, log.head + 1)))
            except ValidationError:
                pass
        v = int(rng.integers(0, log.head + 1))
        direct = log.materialize_full(v)
        log.rollback(v)
        assert np.array_equal(log.materialize_full(log.head), direct)
    assert store_digest(store.path) == before
