"""Piecewise-uniform transfer of OCT frame labels onto MPR slices.

The OCT pullback and the straightened MPR are related by paired reference
locations. Between consecutive references the mapping is assumed uniform,
with ratio ``gamma = (MPR slices) / (OCT frames)``. The head and tail of the
pullback, which lie outside the outermost references, reuse the nearest
interior ratio, or the thickness-derived base ratio when only one reference
exists.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DegenerateInterval,
    EmptySegment,
    InvalidThickness,
    InvalidValue,
    LengthMismatch,
    UnalignableGeometry,
)
from .volio import CCTA3, OCT6, LabelSeq

# Tie-break order when several classes share the majority; first wins.
PRIORITY = {
    OCT6: (4, 2, 1, 3, 5, 0),  # thrombus, lipid_rich, calcified, fibrous, stent, healthy
    CCTA3: (1, 2, 0),  # calcified, stent, non_calcified
}


def round_half_away(x):
    """Round to nearest integer, halves away from zero."""
    return int(math.copysign(math.floor(abs(x) + 0.5), x))


def majority_label(labels, taxonomy=OCT6):
    """Most frequent class in ``labels``, ties broken by :data:`PRIORITY`."""
    priority = PRIORITY[taxonomy]
    counts = np.bincount(np.asarray(labels, dtype=np.int64), minlength=len(priority))
    top = counts.max()
    for cls in priority:
        if counts[cls] == top:
            return cls
    raise AssertionError("unreachable")


@dataclass(frozen=True)
class RatioVector:
    """MPR slices per OCT frame, one entry per interval."""

    gammas: tuple

    def __post_init__(self):
        g = tuple(float(x) for x in self.gammas)
        if not all(x > 0 and math.isfinite(x) for x in g):
            raise InvalidValue(f"ratios must be positive and finite, got {g}")
        object.__setattr__(self, "gammas", g)

    def __len__(self):
        return len(self.gammas)

    def __getitem__(self, i):
        return self.gammas[i]


@dataclass(frozen=True)
class AlignmentMap:
    """Reference list augmented with the synthesized start and end pairs.

    ``augmented_pairs[0] == (0, p_start)`` and
    ``augmented_pairs[-1] == (oct_len, p_end)``. The original references are
    strictly increasing; the synthesized head/tail pairs may coincide in one
    coordinate with their neighbour (a reference at OCT frame 0, or a tail
    that rounds to zero MPR slices), producing an empty interval.
    """

    augmented_pairs: tuple
    gammas: RatioVector
    oct_len: int
    mpr_len: int
    clamp_log: tuple = field(default=())

    def __post_init__(self):
        pairs = tuple((int(o), int(m)) for o, m in self.augmented_pairs)
        object.__setattr__(self, "augmented_pairs", pairs)
        if len(self.gammas) != len(pairs) - 1:
            raise InvalidValue("need exactly one ratio per augmented interval")
        if pairs[0][0] != 0 or pairs[-1][0] != self.oct_len:
            raise InvalidValue("augmented pairs must span OCT frames [0, oct_len]")
        for (o0, m0), (o1, m1) in zip(pairs, pairs[1:]):
            if o1 < o0 or m1 < m0:
                raise InvalidValue(f"augmented pairs not monotone at ({o0},{m0})->({o1},{m1})")
        if pairs[0][1] < 0 or pairs[-1][1] > self.mpr_len:
            raise InvalidValue("MPR endpoints outside [0, mpr_len]")

    @property
    def p_start(self):
        return self.augmented_pairs[0][1]

    @property
    def p_end(self):
        return self.augmented_pairs[-1][1]

    def frame_to_slice(self, frames):
        """Continuous MPR position of OCT frame positions (piecewise linear)."""
        o = np.array([p[0] for p in self.augmented_pairs], dtype=np.float64)
        m = np.array([p[1] for p in self.augmented_pairs], dtype=np.float64)
        keep = np.concatenate([[True], np.diff(o) > 0])
        return np.interp(np.asarray(frames, dtype=np.float64), o[keep], m[keep])

    def to_dict(self):
        return {
            "augmented_pairs": [list(p) for p in self.augmented_pairs],
            "gammas": list(self.gammas.gammas),
            "oct_len": self.oct_len,
            "mpr_len": self.mpr_len,
            "p_start": self.p_start,
            "p_end": self.p_end,
            "clamp_log": [dict(e) for e in self.clamp_log],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            tuple(tuple(p) for p in d["augmented_pairs"]),
            RatioVector(d["gammas"]),
            int(d["oct_len"]),
            int(d["mpr_len"]),
            tuple(dict(e) for e in d.get("clamp_log", ())),
        )


def base_ratio(oct_thickness_mm, mpr_thickness_mm):
    if not (oct_thickness_mm > 0 and mpr_thickness_mm > 0):
        raise InvalidThickness(
            f"thicknesses must be positive, got OCT {oct_thickness_mm}, MPR {mpr_thickness_mm}"
        )
    return oct_thickness_mm / mpr_thickness_mm


def interval_ratios(refs):
    """Per-interval ratio between consecutive references (empty for one pair)."""
    out = []
    for (o0, m0), (o1, m1) in zip(refs.pairs, refs.pairs[1:]):
        if o1 == o0:
            raise DegenerateInterval(f"zero-length OCT interval at frame {o0}")
        out.append((m1 - m0) / (o1 - o0))
    return RatioVector(out)


def extend_ratios(interior, gamma_base):
    if not gamma_base > 0:
        raise InvalidThickness(f"base ratio must be positive, got {gamma_base}")
    g = interior.gammas
    if g:
        return RatioVector((g[0],) + g + (g[-1],))
    return RatioVector((gamma_base, gamma_base))


def determine_endpoints(refs, gammas, oct_len, mpr_len):
    """Synthesize the segment's start and end on the MPR axis."""
    first_o, first_m = refs.pairs[0]
    last_o, last_m = refs.pairs[-1]
    if oct_len <= last_o:
        raise UnalignableGeometry(f"OCT length {oct_len} does not extend past last reference frame {last_o}")
    if last_m >= mpr_len:
        raise UnalignableGeometry(f"reference MPR slice {last_m} outside MPR length {mpr_len}")
    if len(gammas) != len(refs) + 1:
        raise InvalidValue("ratios must be extended before determining endpoints")
    log = []
    p_start = first_m - round_half_away(gammas[0] * first_o)
    p_end = last_m + round_half_away(gammas[-1] * (oct_len - last_o))
    if p_start < 0:
        log.append({"endpoint": "start", "computed": p_start, "clamped_to": 0})
        p_start = 0
        if first_o > 0 and first_m == 0:
            raise UnalignableGeometry("start clamp collapses the head interval to zero MPR slices")
    if p_end > mpr_len:
        log.append({"endpoint": "end", "computed": p_end, "clamped_to": mpr_len})
        p_end = mpr_len
    pairs = ((0, p_start),) + refs.pairs + ((oct_len, p_end),)
    return AlignmentMap(pairs, gammas, oct_len, mpr_len, tuple(log))


def merge_labels(segment, target_len, taxonomy=OCT6):
    """Resample ``segment`` (k frames) onto ``target_len`` slices.

    Slice ``t`` covers frames ``[t*k//m, (t+1)*k//m)``, widened to one frame
    when empty, and takes the majority class of the covered frames.
    """
    seg = list(segment)
    k, m = len(seg), int(target_len)
    if k < 1:
        raise EmptySegment("cannot merge an empty label segment")
    if m < 1:
        raise InvalidValue(f"target length must be >= 1, got {m}")
    out = []
    for t in range(m):
        lo = t * k // m
        hi = max((t + 1) * k // m, lo + 1)
        out.append(majority_label(seg[lo:hi], taxonomy))
    return out


def align_labels(y_oct, amap, mpr_thickness_mm=None):
    """Transfer OCT labels to the MPR grid.

    Returns ``(labels, offset)`` where ``labels`` covers MPR slices
    ``[offset, offset + len(labels))`` and ``offset == amap.p_start``.
    Empty intervals (zero OCT or zero MPR width) contribute nothing.
    """
    if len(y_oct) != amap.oct_len:
        raise LengthMismatch(f"OCT labels have {len(y_oct)} frames, alignment expects {amap.oct_len}")
    if amap.p_end <= amap.p_start:
        raise UnalignableGeometry("alignment covers no MPR slices")
    labels = y_oct.labels
    out = []
    pairs = amap.augmented_pairs
    for (o0, m0), (o1, m1) in zip(pairs, pairs[1:]):
        if m1 == m0:
            continue
        if o1 == o0:
            raise UnalignableGeometry(f"MPR interval [{m0},{m1}) has no OCT frames")
        out.extend(merge_labels(labels[o0:o1], m1 - m0, y_oct.taxonomy))
    thickness = mpr_thickness_mm if mpr_thickness_mm is not None else y_oct.slice_thickness_mm
    return LabelSeq(y_oct.taxonomy, out, thickness), amap.p_start


@dataclass(frozen=True)
class AlignmentResult:
    labels: LabelSeq
    offset: int
    amap: AlignmentMap
    gamma_base: float
    interior: RatioVector

    def report(self):
        return {
            "gamma_base": self.gamma_base,
            "interior_gammas": list(self.interior.gammas),
            "branch": "interior" if len(self.interior) else "base",
            "offset": self.offset,
            "length": len(self.labels),
            **self.amap.to_dict(),
        }


def align(y_oct, refs, mpr_len, mpr_thickness_mm):
    """Run the full alignment for one patient."""
    refs.check_bounds(len(y_oct), mpr_len)
    gamma_base = base_ratio(y_oct.slice_thickness_mm, mpr_thickness_mm)
    interior = interval_ratios(refs)
    gammas = extend_ratios(interior, gamma_base)
    amap = determine_endpoints(refs, gammas, len(y_oct), mpr_len)
    labels, offset = align_labels(y_oct, amap, mpr_thickness_mm)
    return AlignmentResult(labels, offset, amap, gamma_base, interior)
