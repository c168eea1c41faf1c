"""Accuracy, one-vs-rest ROC AUC, confusion matrices and Cohen's kappa."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DegenerateMarginals, InvalidValue, LengthMismatch, UndefinedAUC
from .volio import CCTA3, HEALTHY, NON_CALCIFIED, OCT6, class_names

# Table-2 style counts: rows CCTA reading, columns OCT reading, positive first.
REFERENCE_AGREEMENT_COUNTS = ((121, 190), (140, 128))
REFERENCE_REPORTED_KAPPA = 0.113


def accuracy(pred, true):
    pred = np.asarray(pred)
    true = np.asarray(true)
    if pred.shape != true.shape:
        raise LengthMismatch(f"prediction length {pred.shape} != truth length {true.shape}")
    if pred.size == 0:
        raise LengthMismatch("accuracy of an empty sequence is undefined")
    return float(np.mean(pred == true))


def _binary_parts(scores, y_true, cls):
    scores = np.asarray(scores, dtype=np.float64)
    y_true = np.asarray(y_true)
    s = scores[:, cls] if scores.ndim == 2 else scores
    if s.shape[0] != y_true.shape[0]:
        raise LengthMismatch(f"{s.shape[0]} scores for {y_true.shape[0]} labels")
    pos = y_true == cls
    n_pos = int(pos.sum())
    n_neg = int(pos.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAUC(f"class {cls} needs at least one positive and one negative item")
    return s, pos, n_pos, n_neg


def roc_auc_ovr(scores, y_true, cls):
    """One-vs-rest AUC for class ``cls`` by trapezoidal ROC integration.

    Thresholds are grouped by distinct score so ties earn half credit. The
    area is accumulated in integer units of ``1 / (2 * P * N)``, which makes
    the result identical to the pairwise Mann-Whitney count.
    """
    s, pos, n_pos, n_neg = _binary_parts(scores, y_true, cls)
    order = np.argsort(-s, kind="mergesort")
    s_sorted = s[order]
    p_sorted = pos[order].astype(np.int64)
    ends = np.flatnonzero(np.diff(s_sorted) != 0)
    ends = np.append(ends, s_sorted.size - 1)
    tp = np.concatenate([[0], np.cumsum(p_sorted)[ends]])
    fp = np.concatenate([[0], np.cumsum(1 - p_sorted)[ends]])
    twice_area = int(np.sum(np.diff(fp) * (tp[1:] + tp[:-1])))
    return twice_area / (2 * n_pos * n_neg)


def mann_whitney_auc(scores, y_true, cls):
    """Brute-force pairwise AUC: P(pos > neg) + 0.5 P(tie)."""
    s, pos, n_pos, n_neg = _binary_parts(scores, y_true, cls)
    sp = s[pos][:, None]
    sn = s[~pos][None, :]
    twice = int(2 * np.sum(sp > sn) + np.sum(sp == sn))
    return twice / (2 * n_pos * n_neg)


def auc_table(scores, y_true, n_classes):
    """Per-class AUC (None where undefined) and the unweighted mean of the rest."""
    per_class = []
    for c in range(n_classes):
        try:
            per_class.append(roc_auc_ovr(scores, y_true, c))
        except UndefinedAUC:
            per_class.append(None)
    defined = [a for a in per_class if a is not None]
    mean = float(np.mean(defined)) if defined else None
    return per_class, mean


@dataclass(frozen=True, eq=False)
class ConfusionMatrix:
    """Counts with rows = rater A and columns = rater B."""

    counts: np.ndarray
    class_names: tuple

    def __post_init__(self):
        m = np.asarray(self.counts, dtype=np.int64)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise InvalidValue(f"confusion matrix must be square, got {m.shape}")
        if (m < 0).any():
            raise InvalidValue("confusion counts must be non-negative")
        names = tuple(self.class_names)
        if len(names) != m.shape[0]:
            raise InvalidValue("one class name per row required")
        m.setflags(write=False)
        object.__setattr__(self, "counts", m)
        object.__setattr__(self, "class_names", names)

    @property
    def total(self):
        return int(self.counts.sum())

    def __eq__(self, other):
        return (
            isinstance(other, ConfusionMatrix)
            and self.class_names == other.class_names
            and np.array_equal(self.counts, other.counts)
        )

    def permuted(self, perm):
        perm = list(perm)
        return ConfusionMatrix(self.counts[np.ix_(perm, perm)], [self.class_names[i] for i in perm])

    def to_csv(self):
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["rater_a\\rater_b", *self.class_names])
        for name, row in zip(self.class_names, self.counts):
            w.writerow([name, *(int(v) for v in row)])
        return out.getvalue()

    @classmethod
    def from_csv(cls, text):
        rows = list(csv.reader(io.StringIO(text)))
        names = rows[0][1:]
        return cls([[int(v) for v in r[1:]] for r in rows[1:] if r], names)


def confusion_matrix(a, b, n_classes, names=None):
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    if a.shape != b.shape:
        raise LengthMismatch(f"rater lengths differ: {a.shape} vs {b.shape}")
    m = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(m, (a, b), 1)
    return ConfusionMatrix(m, names or [str(i) for i in range(n_classes)])


def cohen_kappa(m):
    counts = m.counts if isinstance(m, ConfusionMatrix) else np.asarray(m, dtype=np.int64)
    total = counts.sum()
    if total <= 0:
        raise DegenerateMarginals("confusion matrix is empty")
    p_o = np.trace(counts) / total
    p_e = float(np.dot(counts.sum(axis=1), counts.sum(axis=0))) / float(total) ** 2
    if p_e >= 1.0:
        raise DegenerateMarginals("chance agreement is 1; kappa undefined")
    return float((p_o - p_e) / (1.0 - p_e))


def default_positive(taxonomy):
    """Binarization used for the 2x2 view: any plaque or stent is positive."""
    if taxonomy == OCT6:
        return lambda c: c != HEALTHY
    return lambda c: c != NON_CALCIFIED


@dataclass(frozen=True, eq=False)
class AgreementReport:
    matrix: ConfusionMatrix
    kappa: float
    binary: ConfusionMatrix
    binary_kappa: float | None

    def to_dict(self):
        return {
            "class_names": list(self.matrix.class_names),
            "counts": self.matrix.counts.tolist(),
            "kappa": self.kappa,
            "binary_counts": self.binary.counts.tolist(),
            "binary_kappa": self.binary_kappa,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            ConfusionMatrix(d["counts"], d["class_names"]),
            d["kappa"],
            ConfusionMatrix(d["binary_counts"], ("positive", "negative")),
            d["binary_kappa"],
        )

    def __eq__(self, other):
        return isinstance(other, AgreementReport) and self.to_dict() == other.to_dict()

    def save(self, stem):
        stem = Path(stem)
        stem.with_suffix(".csv").write_text(self.matrix.to_csv())
        stem.with_name(stem.name + "_binary.csv").write_text(self.binary.to_csv())
        stem.with_suffix(".json").write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, stem):
        return cls.from_dict(json.loads(Path(stem).with_suffix(".json").read_text()))


def _safe_kappa(m):
    try:
        return cohen_kappa(m)
    except DegenerateMarginals:
        return None


def agreement_report(ccta_labels, oct_labels_mapped, oct_labels_raw=None, positive_a=None, positive_b=None):
    """Confusion over CCTA3 plus kappa, with a positive/negative 2x2 view.

    ``oct_labels_raw`` (the unmapped OCT6 strip) lets the OCT side separate
    non-calcified plaque from healthy lumen when binarizing.
    """
    if len(ccta_labels) != len(oct_labels_mapped):
        raise LengthMismatch(f"{len(ccta_labels)} CCTA labels vs {len(oct_labels_mapped)} OCT labels")
    for seq in (ccta_labels, oct_labels_mapped):
        if seq.taxonomy != CCTA3:
            raise InvalidValue("agreement is computed on CCTA3 labels")
    names = class_names(CCTA3)
    matrix = confusion_matrix(ccta_labels.array, oct_labels_mapped.array, len(names), list(names))
    kappa = cohen_kappa(matrix)

    positive_a = positive_a or default_positive(CCTA3)
    if oct_labels_raw is not None:
        if len(oct_labels_raw) != len(ccta_labels):
            raise LengthMismatch("raw OCT labels differ in length")
        b_src, positive_b = oct_labels_raw.labels, positive_b or default_positive(oct_labels_raw.taxonomy)
    else:
        b_src, positive_b = oct_labels_mapped.labels, positive_b or default_positive(CCTA3)
    a_bin = [0 if positive_a(c) else 1 for c in ccta_labels.labels]
    b_bin = [0 if positive_b(c) else 1 for c in b_src]
    binary = confusion_matrix(a_bin, b_bin, 2, ["positive", "negative"])
    return AgreementReport(matrix, kappa, binary, _safe_kappa(binary))


def reference_kappa_note():
    """Kappa recomputed from the published 2x2 agreement counts."""
    m = ConfusionMatrix(REFERENCE_AGREEMENT_COUNTS, ("positive", "negative"))
    k = cohen_kappa(m)
    return {
        "counts": m.counts.tolist(),
        "total": m.total,
        "kappa_from_counts": round(k, 6),
        "reported_kappa": REFERENCE_REPORTED_KAPPA,
        "note": (
            f"The printed counts sum to {m.total} and give kappa {k:.4f} under "
            f"(p_o - p_e) / (1 - p_e); the reported {REFERENCE_REPORTED_KAPPA} is not "
            "reproduced from these counts."
        ),
    }
