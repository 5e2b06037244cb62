import hashlib
from pathlib import Path

import numpy as np
import pytest
from scipy import ndimage

from circuitproof.model import ValidationError
from circuitproof.synthetic import (
    GenerationError,
    SyntheticSpec,
    generate_synthetic,
    load_spec,
)

SMALL = SyntheticSpec(
    dims=(48, 48, 48),
    voxel_size=(30.0, 30.0, 30.0),
    tube_count=2,
    tube_radius_nm=120.0,
    synapse_rate_per_um=3.0,
)


def dir_digest(path: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(Path(path).rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(path)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_straight_tube_without_cuts_matches_truth(tmp_path):
    res = generate_synthetic(SMALL, seed=3, out=tmp_path)
    assert np.array_equal(res.base.read_full("labels"), res.truth.read_full("labels"))


def test_determinism_byte_identical(tmp_path):
    generate_synthetic(SMALL, seed=11, out=tmp_path / "a")
    generate_synthetic(SMALL, seed=11, out=tmp_path / "b")
    assert dir_digest(tmp_path / "a") == dir_digest(tmp_path / "b")


def test_different_seed_differs(tmp_path):
    generate_synthetic(SMALL, seed=11, out=tmp_path / "a")
    generate_synthetic(SMALL, seed=12, out=tmp_path / "b")
    assert dir_digest(tmp_path / "a") != dir_digest(tmp_path / "b")


def test_cut_adds_exactly_one_id(tmp_path):
    spec = SyntheticSpec(
        dims=(48, 48, 48),
        voxel_size=(30.0, 30.0, 30.0),
        tube_count=1,
        tube_radius_nm=120.0,
        injected_cuts=((0, 24, 2),),
    )
    res = generate_synthetic(spec, seed=5, out=tmp_path)
    truth = res.truth.read_full("labels")
    base = res.base.read_full("labels")
    truth_ids = set(np.unique(truth).tolist()) - {0}
    base_ids = set(np.unique(base).tolist()) - {0}
    assert len(base_ids) == len(truth_ids) + 1

    # connected-component oracle: the cut tube falls apart into 2 pieces
    structure = np.ones((3, 3, 3), bool)
    _, n_truth = ndimage.label(truth == 1, structure=structure)
    _, n_base = ndimage.label(np.isin(base, list(base_ids)), structure=structure)
    assert n_truth == 1
    assert n_base == 2

    # the gap itself is relabeled background but keeps a bright image
    gap = (truth == 1) & (base == 0)
    assert gap.any()
    assert set(np.argwhere(gap)[:, 2].tolist()) == {24, 25}
    image = res.base.read_full("image")
    assert image[gap].mean() > 150


def test_merge_unifies_two_ids(tmp_path):
    spec = SyntheticSpec(
        dims=(48, 48, 48),
        voxel_size=(30.0, 30.0, 30.0),
        tube_count=2,
        tube_radius_nm=120.0,
        injected_merges=((0, 1),),
    )
    res = generate_synthetic(spec, seed=5, out=tmp_path)
    base_ids = set(np.unique(res.base.read_full("labels")).tolist()) - {0}
    assert base_ids == {1}


def test_overcrowded_volume_raises(tmp_path):
    spec = SyntheticSpec(
        dims=(24, 24, 24),
        voxel_size=(30.0, 30.0, 30.0),
        tube_count=60,
        tube_radius_nm=200.0,
    )
    with pytest.raises(GenerationError):
        generate_synthetic(spec, seed=1, out=tmp_path)


def test_cut_validation():
    with pytest.raises(ValidationError):
        SyntheticSpec(
            dims=(48, 48, 48), voxel_size=(30, 30, 30), tube_count=1,
            tube_radius_nm=100, injected_cuts=((0, 24, 0),),
        )
    with pytest.raises(ValidationError):
        SyntheticSpec(
            dims=(48, 48, 48), voxel_size=(30, 30, 30), tube_count=1,
            tube_radius_nm=100, injected_cuts=((3, 24, 2),),
        )
    with pytest.raises(ValidationError):
        SyntheticSpec(
            dims=(48, 48, 48), voxel_size=(30, 30, 30), tube_count=1,
            tube_radius_nm=100, injected_cuts=((0, 46, 4),),
        )


def test_synapse_pre_elements_sit_inside_their_tube(tmp_path):
    res = generate_synthetic(SMALL, seed=9, out=tmp_path)
    assert res.synapses
    labels = res.base.read_full("labels")
    vsize = np.asarray(SMALL.voxel_size)
    for rec in res.synapses:
        v = np.floor(np.asarray(rec.pre_pos.as_tuple()) / vsize).astype(int)
        assert labels[v[0], v[1], v[2]] == rec.pre_seg
        assert rec.pre_seg != 0


def test_soma_table_matches_surviving_tubes(tmp_path):
    res = generate_synthetic(SMALL, seed=9, out=tmp_path)
    assert [s.cell_id for s in res.somas] == [1, 2]
    assert (res.base.path / "synapses.txt").is_file()
    assert (res.base.path / "somas.txt").is_file()


def test_spec_file_round_trip(tmp_path):
    text = (
        "dims = 48 48 48\n"
        "voxel_size = 30 30 30\n"
        "tube_count = 2\n"
        "tube_radius_nm = 120\n"
        "synapse_rate_per_um = 3\n"
        "cuts = 0:24:2\n"
        "merges =\n"
    )
    p = tmp_path / "spec.txt"
    p.write_text(text)
    spec = load_spec(p)
    assert spec.tube_count == 2
    assert spec.injected_cuts == ((0, 24, 2),)
    assert spec.injected_merges == ()
