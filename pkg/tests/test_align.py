from collections import Counter
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from o2cta.align import (
    AlignmentMap,
    RatioVector,
    align,
    base_ratio,
    determine_endpoints,
    extend_ratios,
    interval_ratios,
    majority_label,
    merge_labels,
    round_half_away,
)
from o2cta.errors import (
    DegenerateInterval,
    EmptySegment,
    InvalidThickness,
    InvalidValue,
    UnalignableGeometry,
)
from o2cta.volio import CALCIFIED, FIBROUS, HEALTHY, LIPID_RICH, OCT6, STENT, THROMBUS, LabelSeq, ReferencePairs

SEVERITY = [THROMBUS, LIPID_RICH, CALCIFIED, FIBROUS, STENT, HEALTHY]


def merge_oracle(seg, m):
    """Independent restatement with exact fractions and Counter."""
    k = len(seg)
    out = []
    for t in range(m):
        lo = int(Fraction(t * k, m))
        hi = max(int(Fraction((t + 1) * k, m)), lo + 1)
        counts = Counter(seg[lo:hi])
        top = max(counts.values())
        out.append(next(c for c in SEVERITY if counts.get(c) == top))
    return out


def test_round_half_away():
    assert [round_half_away(x) for x in (0.5, 1.5, 2.5, -0.5, -2.5, 2.4999)] == [1, 2, 3, -1, -3, 2]


def test_base_ratio_examples():
    assert base_ratio(0.2, 0.5) == pytest.approx(0.4)
    assert base_ratio(0.5, 0.5) == 1.0
    with pytest.raises(InvalidThickness):
        base_ratio(0.0, 0.5)


def test_interval_ratio_examples():
    assert interval_ratios(ReferencePairs([(10, 25), (30, 65)])).gammas == (2.0,)
    assert interval_ratios(ReferencePairs([(5, 9)])).gammas == ()
    assert interval_ratios(ReferencePairs([(0, 0), (10, 30), (20, 40)])).gammas == (3.0, 1.0)


def test_interval_ratio_degenerate():
    class Raw:  # bypasses the strict-monotone check of ReferencePairs
        pairs = ((3, 4), (3, 9))

    with pytest.raises(DegenerateInterval):
        interval_ratios(Raw())


def test_extend_ratio_examples():
    assert extend_ratios(RatioVector([2.0]), 0.4).gammas == (2.0, 2.0, 2.0)
    assert extend_ratios(RatioVector([]), 0.4).gammas == (0.4, 0.4)
    assert extend_ratios(RatioVector([3.0, 1.0]), 0.4).gammas == (3.0, 3.0, 1.0, 1.0)


def test_ratio_vector_rejects_non_positive():
    with pytest.raises(InvalidValue):
        RatioVector([1.0, 0.0])


def test_endpoints_single_reference():
    amap = determine_endpoints(ReferencePairs([(10, 25)]), RatioVector([0.4, 0.4]), 50, 100)
    assert (amap.p_start, amap.p_end) == (21, 41)
    assert amap.augmented_pairs == ((0, 21), (10, 25), (50, 41))
    assert amap.clamp_log == ()


def test_endpoints_start_clamp_logged():
    amap = determine_endpoints(ReferencePairs([(10, 2)]), RatioVector([1.0, 1.0]), 20, 100)
    assert amap.p_start == 0
    assert len(amap.clamp_log) == 1
    assert amap.clamp_log[0]["computed"] == -8


def test_endpoints_end_clamp_logged():
    amap = determine_endpoints(ReferencePairs([(5, 90)]), RatioVector([1.0, 1.0]), 30, 100)
    assert amap.p_end == 100
    assert amap.clamp_log[0]["endpoint"] == "end"


def test_endpoints_unalignable():
    with pytest.raises(UnalignableGeometry):
        determine_endpoints(ReferencePairs([(0, 0)]), RatioVector([1.0, 1.0]), 0, 100)
    with pytest.raises(UnalignableGeometry):
        determine_endpoints(ReferencePairs([(4, 0)]), RatioVector([1.0, 1.0]), 10, 100)


def test_merge_examples():
    cal, lip = CALCIFIED, LIPID_RICH
    assert merge_labels([cal, cal, cal, lip, lip, lip], 3) == [cal, lip, lip]
    assert merge_labels([cal], 4) == [cal] * 4
    with pytest.raises(EmptySegment):
        merge_labels([], 3)


def test_majority_priority():
    assert majority_label([HEALTHY] * 6 + [CALCIFIED] * 6) == CALCIFIED
    assert majority_label([STENT, FIBROUS]) == FIBROUS
    assert majority_label([THROMBUS, LIPID_RICH, HEALTHY, HEALTHY]) == HEALTHY


@given(st.lists(st.integers(0, 5), min_size=1, max_size=60), st.integers(1, 80))
@settings(max_examples=300, deadline=None)
def test_merge_matches_oracle(seg, m):
    assert merge_labels(seg, m) == merge_oracle(seg, m)


@given(st.lists(st.integers(0, 5), min_size=1, max_size=60))
@settings(max_examples=100, deadline=None)
def test_merge_identity_when_lengths_equal(seg):
    assert merge_labels(seg, len(seg)) == seg


def test_align_labels_example():
    y = LabelSeq(OCT6, [HEALTHY] * 50, 0.2)
    res = align(y, ReferencePairs([(10, 25)]), 100, 0.5)
    assert res.offset == 21
    assert res.labels.labels == (HEALTHY,) * 20
    assert res.labels.slice_thickness_mm == 0.5
    assert res.report()["branch"] == "base"


def test_align_identity():
    rng = np.random.default_rng(0)
    y = LabelSeq(OCT6, rng.integers(0, 6, 40), 0.5)
    res = align(y, ReferencePairs([(0, 0), (13, 13), (39, 39)]), 40, 0.5)
    assert res.offset == 0
    assert res.labels.labels == y.labels


@st.composite
def alignment_case(draw):
    n_refs = draw(st.integers(1, 5))
    d_oct = draw(st.lists(st.integers(1, 30), min_size=n_refs - 1, max_size=n_refs - 1))
    d_mpr = draw(st.lists(st.integers(1, 30), min_size=n_refs - 1, max_size=n_refs - 1))
    o0 = draw(st.integers(0, 20))
    m0 = draw(st.integers(0, 40))
    oct_refs = np.cumsum([o0] + d_oct).tolist()
    mpr_refs = np.cumsum([m0] + d_mpr).tolist()
    tail = draw(st.integers(1, 30))
    oct_len = oct_refs[-1] + tail
    mpr_len = mpr_refs[-1] + draw(st.integers(1, 60))
    labels = draw(st.lists(st.integers(0, 5), min_size=oct_len, max_size=oct_len))
    t_oct = draw(st.sampled_from([0.1, 0.2, 0.25, 0.5]))
    return LabelSeq(OCT6, labels, t_oct), ReferencePairs(list(zip(oct_refs, mpr_refs))), mpr_len


@given(alignment_case())
@settings(max_examples=300, deadline=None)
def test_alignment_invariants(case):
    y, refs, mpr_len = case
    try:
        res = align(y, refs, mpr_len, 0.5)
    except UnalignableGeometry:
        # only legitimate when the start clamp empties the head interval
        assume(False)
    amap = res.amap
    # coverage and length conservation
    assert len(res.labels) == amap.p_end - amap.p_start
    assert 0 <= amap.p_start < amap.p_end <= mpr_len
    assert res.offset == amap.p_start
    # monotone frame -> slice map
    pos = amap.frame_to_slice(np.arange(amap.oct_len + 1))
    assert np.all(np.diff(pos) >= 0)
    # interior ratios are exact quotients
    for g, (a, b) in zip(res.interior.gammas, zip(refs.pairs, refs.pairs[1:])):
        assert g == (b[1] - a[1]) / (b[0] - a[0])
    # endpoint formula restated independently
    g0, g1 = amap.gammas[0], amap.gammas[-1]
    start = refs.pairs[0][1] - int(np.floor(g0 * refs.pairs[0][0] + 0.5))
    end = refs.pairs[-1][1] + int(np.floor(g1 * (amap.oct_len - refs.pairs[-1][0]) + 0.5))
    assert amap.p_start == max(0, start)
    assert amap.p_end == min(mpr_len, end)
    # a reference whose neighbourhood is uniformly labelled keeps its label at the paired slice
    pairs = amap.augmented_pairs
    for j, (o, m) in enumerate(refs.pairs):
        o1, m1 = pairs[j + 2]
        if m1 == m:
            continue
        span = -(-(o1 - o) // (m1 - m))  # frames covered by the first slice, rounded up
        if len(set(y.labels[o:o + span])) == 1:
            assert res.labels.labels[m - amap.p_start] == y.labels[o]


def test_alignment_map_round_trip():
    amap = determine_endpoints(ReferencePairs([(3, 10), (9, 22)]), RatioVector([2.0, 2.0, 2.0]), 15, 40)
    assert AlignmentMap.from_dict(amap.to_dict()) == amap


def test_alignment_map_rejects_non_monotone():
    with pytest.raises(InvalidValue):
        AlignmentMap(((0, 5), (3, 4), (6, 9)), RatioVector([1.0, 1.0]), 6, 20)


def test_one_reference_uses_base_ratio_branch():
    y = LabelSeq(OCT6, [CALCIFIED] * 30, 0.2)
    res = align(y, ReferencePairs([(10, 20)]), 80, 0.5)
    assert res.interior.gammas == ()
    assert res.amap.gammas.gammas == (0.4, 0.4)


def test_multi_reference_extends_head_and_tail():
    y = LabelSeq(OCT6, [CALCIFIED] * 40, 0.2)
    res = align(y, ReferencePairs([(5, 10), (15, 30), (25, 35)]), 80, 0.5)
    assert res.amap.gammas.gammas == (2.0, 2.0, 0.5, 0.5)
    assert res.amap.p_start == 0 and res.amap.p_end == 35 + round_half_away(0.5 * 15)
