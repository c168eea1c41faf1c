from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.metrics import cohen_kappa_score, roc_auc_score

from o2cta import metrics
from o2cta.errors import DegenerateMarginals, LengthMismatch, UndefinedAUC
from o2cta.volio import CCTA3, OCT6, LabelSeq


def pairwise_auc(scores, labels, cls):
    """Pure-Python Mann-Whitney count with exact fractions."""
    pos = [s for s, y in zip(scores, labels) if y == cls]
    neg = [s for s, y in zip(scores, labels) if y != cls]
    wins = sum(Fraction(1) if p > n else Fraction(1, 2) if p == n else Fraction(0) for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def kappa_oracle(counts):
    counts = [[Fraction(v) for v in row] for row in counts]
    total = sum(sum(r) for r in counts)
    k = len(counts)
    p_o = sum(counts[i][i] for i in range(k)) / total
    p_e = sum(sum(counts[i]) * sum(counts[r][i] for r in range(k)) for i in range(k)) / total**2
    return (p_o - p_e) / (1 - p_e)


# frozen from kappa_oracle on the published 2x2 counts
TABLE_KAPPA = -0.13162289897302867


def test_accuracy_examples():
    assert metrics.accuracy([1, 2, 3], [1, 2, 3]) == 1.0
    assert metrics.accuracy([0, 0], [1, 1]) == 0.0
    assert metrics.accuracy([1, 2, 3, 4], [1, 2, 3, 0]) == 0.75
    with pytest.raises(LengthMismatch):
        metrics.accuracy([1, 2], [1])


def test_auc_examples():
    assert metrics.roc_auc_ovr(np.array([0.1, 0.2, 0.8, 0.9]), np.array([0, 0, 1, 1]), 1) == 1.0
    assert metrics.roc_auc_ovr(np.full(5, 0.3), np.array([0, 1, 0, 1, 1]), 1) == 0.5
    assert metrics.roc_auc_ovr(np.array([0.1, 0.4, 0.35, 0.8]), np.array([0, 0, 1, 1]), 1) == 0.75
    with pytest.raises(UndefinedAUC):
        metrics.roc_auc_ovr(np.array([0.1, 0.2]), np.array([1, 1]), 1)


@given(
    st.lists(st.tuples(st.integers(0, 9), st.integers(0, 2)), min_size=2, max_size=200),
)
@settings(max_examples=200, deadline=None)
def test_auc_equals_pairwise_oracle(items):
    scores = np.array([s / 10 for s, _ in items])
    y = np.array([c for _, c in items])
    for cls in range(3):
        if 0 < (y == cls).sum() < y.size:
            got = metrics.roc_auc_ovr(scores, y, cls)
            assert got == float(pairwise_auc(scores.tolist(), y.tolist(), cls))
            assert 0.0 <= got <= 1.0


def test_auc_agrees_with_sklearn():
    rng = np.random.default_rng(4)
    p = rng.dirichlet(np.ones(6), size=300)
    y = rng.integers(0, 6, 300)
    for c in range(6):
        assert metrics.roc_auc_ovr(p, y, c) == pytest.approx(roc_auc_score(y == c, p[:, c]), abs=1e-12)


def test_auc_table_skips_undefined():
    p = np.array([[0.9, 0.1, 0.0], [0.2, 0.8, 0.0], [0.6, 0.4, 0.0]])
    per_class, mean = metrics.auc_table(p, np.array([0, 1, 0]), 3)
    assert per_class[2] is None
    assert mean == pytest.approx((per_class[0] + per_class[1]) / 2)


def test_kappa_on_published_counts():
    assert float(kappa_oracle(metrics.REFERENCE_AGREEMENT_COUNTS)) == pytest.approx(TABLE_KAPPA, abs=1e-15)
    k = metrics.cohen_kappa(metrics.ConfusionMatrix(metrics.REFERENCE_AGREEMENT_COUNTS, ("pos", "neg")))
    assert k == pytest.approx(-0.1314, abs=5e-4)
    assert k == pytest.approx(TABLE_KAPPA, abs=1e-12)


def test_reference_note_documents_discrepancy():
    note = metrics.reference_kappa_note()
    assert note["total"] == 579
    assert note["reported_kappa"] == 0.113
    assert note["kappa_from_counts"] == pytest.approx(-0.1316, abs=1e-4)
    assert "0.113" in note["note"]


def test_kappa_examples():
    assert metrics.cohen_kappa(np.diag([5, 7, 2])) == 1.0
    # rows proportional to the column marginals: chance agreement only
    assert metrics.cohen_kappa(np.array([[4, 6], [8, 12]])) == pytest.approx(0.0, abs=1e-15)
    with pytest.raises(DegenerateMarginals):
        metrics.cohen_kappa(np.array([[5, 0], [0, 0]]))


@given(st.lists(st.lists(st.integers(0, 30), min_size=3, max_size=3), min_size=3, max_size=3), st.permutations([0, 1, 2]))
@settings(max_examples=200, deadline=None)
def test_kappa_permutation_invariance_and_range(counts, perm):
    m = metrics.ConfusionMatrix(counts, ("a", "b", "c"))
    try:
        k = metrics.cohen_kappa(m)
    except DegenerateMarginals:
        return
    assert -1.0 - 1e-12 <= k <= 1.0 + 1e-12
    assert metrics.cohen_kappa(m.permuted(perm)) == pytest.approx(k, abs=1e-12)
    assert k == pytest.approx(float(kappa_oracle(counts)), abs=1e-12)


def test_kappa_matches_sklearn_on_labels():
    rng = np.random.default_rng(9)
    a, b = rng.integers(0, 3, 500), rng.integers(0, 3, 500)
    b[:300] = a[:300]
    m = metrics.confusion_matrix(a, b, 3)
    assert metrics.cohen_kappa(m) == pytest.approx(cohen_kappa_score(a, b), abs=1e-12)


def test_agreement_identical_inputs():
    y = LabelSeq(CCTA3, [0, 1, 2, 0, 1], 0.5)
    rep = metrics.agreement_report(y, y)
    assert rep.kappa == 1.0
    assert rep.matrix.counts.trace() == 5


def test_agreement_half_disagreement_near_zero():
    rng = np.random.default_rng(21)
    a = rng.integers(0, 2, 2000)
    # disagreement injected on half of the items at random
    b = np.where(rng.random(2000) < 0.5, 1 - a, a)
    rep = metrics.agreement_report(LabelSeq(CCTA3, a, 0.5), LabelSeq(CCTA3, b, 0.5))
    assert abs(rep.kappa) < 0.1


def test_agreement_binary_view_uses_raw_oct():
    ccta = LabelSeq(CCTA3, [0, 0, 1, 2], 0.5)
    raw = LabelSeq(OCT6, [0, 3, 1, 5], 0.2)  # healthy, fibrous, calcified, stent
    from o2cta.dataset import map_to_ccta3

    rep = metrics.agreement_report(ccta, map_to_ccta3(raw), raw)
    # CCTA side: positive = calcified/stent; OCT side: fibrous counts as plaque
    assert rep.binary.counts.tolist() == [[2, 0], [1, 1]]


def test_agreement_report_round_trip(tmp_path):
    a = LabelSeq(CCTA3, [0, 1, 2, 0, 0, 1], 0.5)
    b = LabelSeq(CCTA3, [0, 1, 1, 0, 2, 1], 0.5)
    rep = metrics.agreement_report(a, b)
    rep.save(tmp_path / "agree")
    assert metrics.AgreementReport.load(tmp_path / "agree") == rep
    text = (tmp_path / "agree.csv").read_text()
    assert metrics.ConfusionMatrix.from_csv(text) == rep.matrix


def test_agreement_length_mismatch():
    with pytest.raises(LengthMismatch):
        metrics.agreement_report(LabelSeq(CCTA3, [0, 1], 0.5), LabelSeq(CCTA3, [0], 0.5))
