import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from o2cta.errors import (
    CorruptData,
    MalformedLabels,
    NonMonotoneReferences,
    NoReferences,
    SizeMismatch,
    UnknownClass,
    UnsupportedFormat,
)
from o2cta.volio import (
    CCTA3,
    OCT6,
    Centerline,
    LabelSeq,
    ReferencePairs,
    Volume3D,
    flat_index,
    load_centerline,
    load_labels,
    load_references,
    load_volume,
    save_centerline,
    save_labels,
    save_references,
    save_volume,
    unflat_index,
)


def write_raw_volume(tmp_path, dims, values, key="spacing_mm", dtype="float32"):
    header = {key: [1, 1, 1], "dims": dims, "dtype": dtype, "data_file": "v.raw"}
    (tmp_path / "v.json").write_text(json.dumps(header))
    (tmp_path / "v.raw").write_bytes(np.asarray(values, dtype="<f4").tobytes())
    return tmp_path / "v.json"


def test_zero_volume_with_spacing_alias(tmp_path):
    vol = load_volume(write_raw_volume(tmp_path, [2, 2, 2], np.zeros(8), key="spacing"))
    assert vol.dims == (2, 2, 2)
    assert vol.spacing_mm == (1.0, 1.0, 1.0)
    assert np.array_equal(vol.data, np.zeros((2, 2, 2), dtype=np.float32))


def test_short_raw_is_size_mismatch(tmp_path):
    with pytest.raises(SizeMismatch):
        load_volume(write_raw_volume(tmp_path, [2, 2, 2], np.zeros(7)))


def test_missing_raw_is_size_mismatch(tmp_path):
    header = write_raw_volume(tmp_path, [2, 2, 2], np.zeros(8))
    (tmp_path / "v.raw").unlink()
    with pytest.raises(SizeMismatch):
        load_volume(header)


def test_non_finite_is_corrupt(tmp_path):
    vals = np.zeros(8)
    vals[3] = np.nan
    with pytest.raises(CorruptData):
        load_volume(write_raw_volume(tmp_path, [2, 2, 2], vals))


def test_unknown_dtype(tmp_path):
    with pytest.raises(UnsupportedFormat):
        load_volume(write_raw_volume(tmp_path, [2, 2, 2], np.zeros(8), dtype="int16"))


def test_byte_layout_is_z_major(tmp_path):
    values = np.arange(24, dtype=np.float32)
    vol = load_volume(write_raw_volume(tmp_path, [2, 3, 4], values))
    for i in range(24):
        assert vol.data[unflat_index((2, 3, 4), i)] == values[i]


def test_volume_round_trip_is_byte_identical(tmp_path):
    rng = np.random.default_rng(0)
    vol = Volume3D(rng.normal(size=(3, 4, 5)), (0.5, 0.25, 0.25), (1.0, -2.0, 3.5))
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    save_volume(vol, tmp_path / "a" / "v.json")
    back = load_volume(tmp_path / "a" / "v.json")
    save_volume(back, tmp_path / "b" / "v.json")
    for name in ("v.raw", "v.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert back.spacing_mm == vol.spacing_mm and back.origin_mm == vol.origin_mm


def test_volume_is_immutable():
    vol = Volume3D(np.zeros((2, 2, 2)), (1, 1, 1))
    with pytest.raises(ValueError):
        vol.data[0, 0, 0] = 1.0


@given(st.tuples(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6)))
@settings(max_examples=50, deadline=None)
def test_flat_index_bijection(dims):
    total = dims[0] * dims[1] * dims[2]
    seen = set()
    for i in range(total):
        z, y, x = unflat_index(dims, i)
        assert flat_index(dims, z, y, x) == i
        seen.add((int(z), int(y), int(x)))
    assert len(seen) == total


def test_label_csv_direct_mapping(tmp_path):
    p = tmp_path / "l.csv"
    p.write_text("# thickness_mm=0.2\nindex,label\n0,healthy\n1,calcified\n")
    seq = load_labels(p)
    assert seq.labels == (0, 1)
    assert seq.taxonomy == OCT6 and seq.slice_thickness_mm == 0.2


def test_label_csv_unknown_class(tmp_path):
    p = tmp_path / "l.csv"
    p.write_text("# thickness_mm=0.2\nindex,label\n0,plaque\n")
    with pytest.raises(UnknownClass):
        load_labels(p)


@pytest.mark.parametrize("rows", ["0,healthy\n2,healthy\n", "0,healthy\n0,healthy\n"])
def test_label_csv_gap_or_duplicate(tmp_path, rows):
    p = tmp_path / "l.csv"
    p.write_text("# thickness_mm=0.2\nindex,label\n" + rows)
    with pytest.raises(MalformedLabels):
        load_labels(p)


@given(st.lists(st.integers(0, 2), min_size=1, max_size=40), st.sampled_from([0.2, 0.5, 1.0 / 3.0]))
@settings(max_examples=30, deadline=None)
def test_label_round_trip(tmp_path_factory, labels, thickness):
    p = tmp_path_factory.mktemp("lab") / "l.csv"
    seq = LabelSeq(CCTA3, labels, thickness)
    save_labels(seq, p)
    assert load_labels(p) == seq


def test_reference_sorting(tmp_path):
    p = tmp_path / "r.csv"
    p.write_text("oct_index,mpr_index\n30,65\n10,25\n")
    assert load_references(p).pairs == ((10, 25), (30, 65))


def test_reference_non_monotone(tmp_path):
    p = tmp_path / "r.csv"
    p.write_text("oct_index,mpr_index\n10,25\n30,20\n")
    with pytest.raises(NonMonotoneReferences):
        load_references(p)


def test_reference_single_and_empty(tmp_path):
    p = tmp_path / "r.csv"
    p.write_text("oct_index,mpr_index\n5,9\n")
    assert load_references(p).pairs == ((5, 9),)
    p.write_text("")
    with pytest.raises(NoReferences):
        load_references(p)
    p.write_text("oct_index,mpr_index\n")
    with pytest.raises(NoReferences):
        load_references(p)


def test_reference_round_trip(tmp_path):
    refs = ReferencePairs([(0, 3), (7, 20), (12, 31)])
    save_references(refs, tmp_path / "r.csv")
    assert load_references(tmp_path / "r.csv") == refs


def test_centerline_round_trip_and_arc(tmp_path):
    rng = np.random.default_rng(1)
    pts = np.cumsum(rng.normal(size=(20, 3)), axis=0)
    c = Centerline(pts)
    save_centerline(c, tmp_path / "c.csv")
    back = load_centerline(tmp_path / "c.csv")
    assert np.array_equal(back.points_mm, c.points_mm)
    assert np.all(np.diff(back.arc_length) > 0)
    oracle = sum(float(np.sqrt(((a - b) ** 2).sum())) for a, b in zip(pts[1:], pts[:-1]))
    assert back.length_mm == pytest.approx(oracle, rel=1e-12)
