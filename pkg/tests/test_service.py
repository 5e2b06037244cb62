import threading

import numpy as np
import pytest
from fastapi.testclient import TestClient

from circuitproof import pipeline
from circuitproof.model import INSPECTOR_SHAPE
from circuitproof.rle import decode_region
from circuitproof.service import create_app
from circuitproof.synthetic import SyntheticSpec, generate_synthetic

SPEC = SyntheticSpec(
    dims=(64, 64, 64),
    voxel_size=(30.0, 30.0, 30.0),
    tube_count=3,
    tube_radius_nm=150.0,
    synapse_rate_per_um=4.0,
    injected_cuts=((0, 30, 2),),
)


@pytest.fixture(scope="module")
def store_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("svc")
    res = generate_synthetic(SPEC, seed=7, out=out)
    pipeline.run_skeletonize(res.base.path)
    pipeline.run_associate(res.base.path)
    pipeline.run_cluster(res.base.path, 2000.0)
    pipeline.run_detect(res.base.path)
    return res.base.path


@pytest.fixture()
def client(store_dir, tmp_path):
    # fresh edit log per test: point the service at a copy of the artifacts
    import shutil

    work = tmp_path / "store"
    shutil.copytree(store_dir, work)
    app = create_app(work)
    return TestClient(app)


def post_edit(client, cell, kind, payload, base_version=0, author="tester"):
    return client.post(
        f"/cells/{cell}/edits",
        json={"author": author, "base_version": base_version,
              "edit": {"kind": kind, "payload": payload}},
    )


class TestCells:
    def test_error_mode_shades_normalize(self, client):
        body = client.get("/cells", params={"mode": "errors"}).json()
        cells = body["cells"]
        counts = {c["cell_id"]: c["error_count"] for c in cells}
        max_count = max(counts.values())
        for c in cells:
            expected = (c["error_count"] / max_count) if max_count else 0.0
            assert c["shade"] == pytest.approx(expected)
        assert any(c["error_count"] > 0 for c in cells)  # the cut produced ROIs

    def test_synapse_modeature_shades(self, client):
        cells = client.get("/cells", params={"mode": "synapses"}).json()["cells"]
        max_count = max(c["synapse_count"] for c in cells)
        for c in cells:
            assert c["shade"] == pytest.approx(
                c["synapse_count"] / max_count if max_count else 0.0
            )
        assert all(0.0 <= c["shade"] <= 1.0 for c in cells)

    def test_bad_mode_rejected(self, client):
        assert client.get("/cells", params={"mode": "banana"}).status_code == 400

    def test_all_zero_counts_shade_zero(self, client):
        # resolve every ROI, then error shades all drop to 0
        errors = client.get("/errors").json()["errors"]
        heads = {}
        for e in errors:
            cell = e["cell_id"]
            r = post_edit(
                client, cell, "ResolveError",
                {"roi_id": e["id"], "resolution": "dismissed"},
                base_version=heads.get(cell, 0),
            )
            assert r.status_code == 200, r.text
            heads[cell] = r.json()["version"]
        cells = client.get("/cells", params={"mode": "errors"}).json()["cells"]
        assert all(c["shade"] == 0.0 for c in cells)
        assert all(c["error_count"] == 0 for c in cells)


class TestCircuit:
    def test_document_counts_echo(self, client):
        doc = client.get("/cells/1/circuit").json()
        assert doc["cell_id"] == 1
        assert doc["branches"]
        assert doc["clusters"]
        assert doc["synapse_count"] == sum(len(c["member_ids"]) for c in doc["clusters"])
        tree = client.get("/cells/1/tree").json()
        assert len(tree["errors"]) == len(doc["open_errors"])

    def test_unknown_cell_404(self, client):
        assert client.get("/cells/999/circuit").status_code == 404
        assert client.get("/cells/999/tree").status_code == 404

    def test_resolved_roi_excluded_from_open_list(self, client):
        doc = client.get("/cells/1/circuit").json()
        open_before = {e["id"] for e in doc["open_errors"]}
        assert open_before
        roi_id = sorted(open_before)[0]
        r = post_edit(client, 1, "ResolveError", {"roi_id": roi_id, "resolution": "resolved"})
        assert r.status_code == 200
        doc2 = client.get("/cells/1/circuit").json()
        assert roi_id not in {e["id"] for e in doc2["open_errors"]}
        # at the old version the ROI is still open (reads are version-pure)
        doc0 = client.get("/cells/1/circuit", params={"version": 0}).json()
        assert roi_id in {e["id"] for e in doc0["open_errors"]}

    def test_partner_stub_distinct_count_oracle(self, client, store_dir):
        from circuitproof import tables

        doc = client.get("/cells/2/circuit").json()
        synapses = tables.load_synapses(store_dir / "synapses.txt")
        partners = set()
        for s in synapses:
            segs = {s.pre.segment_id} | {p.segment_id for p in s.posts}
            if 2 in segs:
                partners.update(segs - {2, 0})
        assert {p["partner_id"] for p in doc["partners"]} == partners


class TestTree:
    def test_cluster_children_sorted_by_order_index(self, client):
        tree = client.get("/cells/1/tree").json()
        doc = client.get("/cells/1/circuit").json()
        service_order = [c["id"] for c in sorted(doc["clusters"], key=lambda c: c["order_index"])]
        tree_order = [c["id"] for b in tree["branches"] for c in b["clusters"]]
        assert tree_order == service_order

    def test_tree_synapse_count_matches_cell(self, client):
        tree = client.get("/cells/1/tree").json()
        doc = client.get("/cells/1/circuit").json()
        assert tree["synapse_count"] == doc["synapse_count"]

    def test_errors_ordered_by_kind_then_id(self, client):
        tree = client.get("/cells/1/tree").json()
        keys = [(e["kind"], e["id"]) for e in tree["errors"]]
        assert keys == sorted(keys)


class TestRegion:
    def test_default_shape_is_inspector_shape(self, client):
        r = client.get("/region", params={"x": 960, "y": 960, "z": 960})
        assert r.status_code == 200
        sub = decode_region(r.content)
        assert sub.shape == INSPECTOR_SHAPE

    def test_rle_round_trip_matches_store(self, client, store_dir):
        from circuitproof.store import open_store

        r = client.get(
            "/region", params={"x": 960, "y": 960, "z": 960, "w": 32, "h": 32, "d": 32}
        )
        sub = decode_region(r.content)
        full = open_store(store_dir).read_full("labels")
        lo = [32 - 16, 32 - 16, 32 - 16]
        expected = full[lo[0]: lo[0] + 32, lo[1]: lo[1] + 32, lo[2]: lo[2] + 32]
        assert np.array_equal(sub.labels, expected)

    def test_out_of_bounds_center(self, client):
        r = client.get("/region", params={"x": 1e7, "y": 0, "z": 0})
        assert r.status_code == 400

    def test_post_merge_region_shows_canonical_id(self, client):
        r = post_edit(client, 1, "MergeObjects",
                      {"target_id": 1, "source_id": 4,
                       "anchor_a": [960, 960, 900], "anchor_b": [960, 960, 1000]})
        assert r.status_code == 200, r.text
        version = r.json()["version"]
        resp = client.get("/region", params={"x": 960, "y": 960, "z": 1500,
                                             "w": 48, "h": 48, "d": 48, "version": version})
        sub = decode_region(resp.content)
        assert 4 not in np.unique(sub.labels)
        resp0 = client.get("/region", params={"x": 960, "y": 960, "z": 1500,
                                              "w": 48, "h": 48, "d": 48, "version": 0})
        sub0 = decode_region(resp0.content)
        assert (sub0.labels == 4).sum() > 0


class TestSlice:
    def test_full_resolution(self, client):
        r = client.get("/slice", params={"z": 10, "scale": 1})
        sub = decode_region(r.content)
        assert sub.shape == (64, 64, 1)

    def test_scale_halves_width(self, client):
        r = client.get("/slice", params={"z": 10, "scale": 2})
        sub = decode_region(r.content)
        assert sub.shape == (32, 32, 1)

    def test_stride_oracle(self, client):
        full = decode_region(client.get("/slice", params={"z": 10, "scale": 1}).content)
        s4 = decode_region(client.get("/slice", params={"z": 10, "scale": 4}).content)
        assert np.array_equal(s4.labels[:, :, 0], full.labels[::4, ::4, 0])
        assert np.array_equal(s4.image[:, :, 0], full.image[::4, ::4, 0])

    def test_bad_scale(self, client):
        assert client.get("/slice", params={"z": 10, "scale": 3}).status_code == 400

    def test_bad_z(self, client):
        assert client.get("/slice", params={"z": 100, "scale": 1}).status_code == 400


class TestPostEdit:
    def test_matching_base_version_increments(self, client):
        r = post_edit(client, 1, "Annotate", {"pos": [500, 500, 500], "text": "note"})
        assert r.status_code == 200
        v1 = r.json()["version"]
        r2 = post_edit(client, 1, "Annotate", {"pos": [500, 500, 500], "text": "note2"},
                       base_version=v1)
        assert r2.json()["version"] == v1 + 1

    def test_stale_base_version_conflicts(self, client):
        r = post_edit(client, 1, "Annotate", {"pos": [500, 500, 500], "text": "a"})
        assert r.status_code == 200
        stale = post_edit(client, 1, "Annotate", {"pos": [500, 500, 500], "text": "b"},
                          base_version=0)
        assert stale.status_code == 409
        assert stale.json()["head"] == r.json()["version"]

    def test_validation_error_maps_to_400(self, client):
        r = post_edit(client, 1, "RemoveSynapse", {"id": 987654})
        assert r.status_code == 400

    def test_racing_writers_exactly_one_wins(self, client):
        results = []
        barrier = threading.Barrier(2)

        def writer(text):
            barrier.wait()
            r = post_edit(client, 1, "Annotate", {"pos": [400, 400, 400], "text": text})
            results.append(r.status_code)

        threads = [threading.Thread(target=writer, args=(t,)) for t in ("a", "b")]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert sorted(results) == [200, 409]

    def test_rollback_endpoint(self, client):
        r1 = post_edit(client, 1, "Annotate", {"pos": [500, 500, 500], "text": "x"})
        v1 = r1.json()["version"]
        r2 = client.post("/rollback", json={"version": 0, "author": "tester"})
        assert r2.status_code == 200
        assert r2.json()["version"] == v1 + 1

    def test_merge_recomputes_affected_cell(self, client):
        doc_before = client.get("/cells/1/circuit").json()
        r = post_edit(client, 1, "MergeObjects",
                      {"target_id": 1, "source_id": 4,
                       "anchor_a": [960, 960, 900], "anchor_b": [960, 960, 1000]})
        version = r.json()["version"]
        doc_after = client.get("/cells/1/circuit", params={"version": version}).json()
        # the merged cell absorbed the distal fragment: skeleton spans more z
        z_before = max(p[2] for b in doc_before["branches"] for p in b["polyline"])
        z_after = max(p[2] for b in doc_after["branches"] for p in b["polyline"])
        assert z_after > z_before

    def test_purity_at_fixed_version(self, client):
        a = client.get("/cells/1/circuit", params={"version": 0})
        b = client.get("/cells/1/circuit", params={"version": 0})
        assert a.content == b.content


class TestErrorsEndpoint:
    def test_filter_by_cell_and_status(self, client):
        all_errors = client.get("/errors").json()["errors"]
        assert all_errors
        cell = all_errors[0]["cell_id"]
        filtered = client.get("/errors", params={"cell": cell}).json()["errors"]
        assert all(e["cell_id"] == cell for e in filtered)
        open_only = client.get("/errors", params={"status": "open"}).json()["errors"]
        assert {e["id"] for e in open_only} == {e["id"] for e in all_errors if e["status"] == "open"}


class TestBranchAnchor:
    def test_anchor_interpolates(self, client):
        doc = client.get("/cells/2/circuit").json()
        branch = doc["branches"][0]
        r = client.get(f"/cells/2/branch/{branch['id']}/anchor", params={"t": 0.0})
        assert r.status_code == 200
        pos = r.json()["pos"]
        assert pos == branch["polyline"][0][:3]

    def test_unknown_branch_404(self, client):
        assert client.get("/cells/2/branch/999/anchor").status_code == 404
