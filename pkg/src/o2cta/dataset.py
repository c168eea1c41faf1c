"""Model-ready sequences from aligned MPR volumes, plus folds and class mapping."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .align import majority_label
from .errors import EmptyInput, InsufficientPatients, InvalidValue, TooNarrow
from .volio import (
    CCTA3,
    OCT6,
    LabelSeq,
    Volume3D,
    load_labels,
    load_volume,
    save_labels,
    save_volume,
)

ABLATION_N = (6, 9, 12)
DEFAULT_N = 12

# healthy, calcified, lipid_rich, fibrous, thrombus, stent -> CCTA3
OCT6_TO_CCTA3 = (0, 1, 0, 0, 0, 2)


@dataclass(frozen=True, eq=False)
class SampleSeq:
    patient_id: str
    volumes: np.ndarray  # (L, N, D, D) float32
    labels: np.ndarray  # (L,) int64, OCT6 ids

    def __post_init__(self):
        vols = np.asarray(self.volumes, dtype=np.float32)
        labels = np.asarray(self.labels, dtype=np.int64)
        if vols.ndim != 4 or vols.shape[0] < 1:
            raise InvalidValue(f"volumes must be (L, N, D, D) with L >= 1, got {vols.shape}")
        if labels.shape != (vols.shape[0],):
            raise InvalidValue(f"{vols.shape[0]} volumes but labels of shape {labels.shape}")
        object.__setattr__(self, "volumes", vols)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return self.volumes.shape[0]

    @property
    def n(self):
        return self.volumes.shape[1]

    @property
    def d(self):
        return self.volumes.shape[2]


def center_crop(data, d):
    ny, nx = data.shape[1:]
    if ny < d or nx < d:
        raise TooNarrow(f"cross-section {ny}x{nx} smaller than {d}x{d}")
    y0 = (ny - d) // 2
    x0 = (nx - d) // 2
    return data[:, y0:y0 + d, x0:x0 + d]


def normalize_minmax(vol):
    """Per-patient min-max scaling to ``[0, 1]`` (constant volumes map to 0)."""
    data = vol.data.astype(np.float64)
    lo, hi = data.min(), data.max()
    scaled = (data - lo) / (hi - lo) if hi > lo else np.zeros_like(data)
    return Volume3D(scaled, vol.spacing_mm, vol.origin_mm)


def crop_slices(vol, offset, length):
    if offset < 0 or offset + length > vol.dims[0] or length < 1:
        raise InvalidValue(f"slice range [{offset}, {offset + length}) outside volume of {vol.dims[0]} slices")
    origin = list(vol.origin_mm)
    return Volume3D(vol.data[offset:offset + length], vol.spacing_mm, origin)


def split_sequence(mpr, labels, n, d, patient_id=""):
    """Cut the MPR into non-overlapping ``n``-slice windows.

    A trailing partial window is padded by repeating its last slice. Each
    window's label is the majority of its real slices.
    """
    data = mpr.data if isinstance(mpr, Volume3D) else np.asarray(mpr)
    slices = data.shape[0]
    if slices < 1:
        raise EmptyInput("MPR has no slices")
    if len(labels) != slices:
        raise InvalidValue(f"{len(labels)} labels for {slices} MPR slices")
    if n < 1:
        raise InvalidValue(f"window thickness must be >= 1, got {n}")
    data = center_crop(data, d)
    lab = labels.labels if isinstance(labels, LabelSeq) else tuple(labels)
    taxonomy = labels.taxonomy if isinstance(labels, LabelSeq) else OCT6
    count = -(-slices // n)
    vols = np.empty((count, n, d, d), dtype=np.float32)
    out_labels = np.empty(count, dtype=np.int64)
    for w in range(count):
        lo, hi = w * n, min((w + 1) * n, slices)
        chunk = data[lo:hi]
        if hi - lo < n:
            pad = np.repeat(chunk[-1:], n - (hi - lo), axis=0)
            chunk = np.concatenate([chunk, pad], axis=0)
        vols[w] = chunk
        out_labels[w] = majority_label(lab[lo:hi], taxonomy)
    return SampleSeq(patient_id, vols, out_labels)


def prepare_sequence(mpr, aligned, offset, n=DEFAULT_N, d=21, patient_id=""):
    """Crop the MPR to the aligned slices, normalize and cut into windows.

    ``aligned`` is the per-slice label strip starting at MPR slice ``offset``.
    Min-max normalization covers exactly the voxels the model will see.
    """
    seg = crop_slices(mpr, offset, len(aligned))
    seg = Volume3D(center_crop(seg.data, d), seg.spacing_mm, seg.origin_mm)
    return split_sequence(normalize_minmax(seg), aligned, n, d, patient_id)


def unsplit_sequence(seq, slices):
    """Inverse of :func:`split_sequence` on the volume (padding removed)."""
    flat = seq.volumes.reshape(-1, seq.d, seq.d)
    return flat[:slices]


def map_to_ccta3(y):
    """Collapse the six OCT classes onto the three CCTA reading classes."""
    if y.taxonomy == CCTA3:
        return y
    if y.taxonomy != OCT6:
        raise InvalidValue(f"cannot map taxonomy {y.taxonomy}")
    return LabelSeq(CCTA3, [OCT6_TO_CCTA3[v] for v in y.labels], y.slice_thickness_mm)


@dataclass(frozen=True)
class FoldPlan:
    k: int
    assignment: dict  # patient_id -> fold
    seed: int = 0

    def test_ids(self, fold):
        return sorted(p for p, f in self.assignment.items() if f == fold)

    def train_ids(self, fold):
        return sorted(p for p, f in self.assignment.items() if f != fold)

    def sizes(self):
        return [len(self.test_ids(f)) for f in range(self.k)]

    def to_dict(self):
        return {"k": self.k, "seed": self.seed, "assignment": dict(sorted(self.assignment.items()))}

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["k"]), {str(p): int(f) for p, f in d["assignment"].items()}, int(d.get("seed", 0)))


def make_folds(patient_ids, k, seed):
    """Seeded shuffle then round-robin, at patient level."""
    ids = sorted(set(str(p) for p in patient_ids))
    if k < 2:
        raise InvalidValue(f"need at least 2 folds, got {k}")
    if len(ids) < k:
        raise InsufficientPatients(f"{len(ids)} patients cannot fill {k} folds")
    order = np.random.default_rng(seed).permutation(len(ids))
    return FoldPlan(k, {ids[j]: i % k for i, j in enumerate(order)}, seed)


# ---------------------------------------------------------------------------
# sequence archive
# ---------------------------------------------------------------------------

def save_archive(out_dir, sequences, plan, n, d, seed, extra=None):
    """Write per-patient window blobs, window label CSVs and ``manifest.json``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    patients = []
    for seq in sequences:
        vol = Volume3D(seq.volumes.reshape(-1, seq.d, seq.d), (1.0, 1.0, 1.0))
        save_volume(vol, out_dir / f"{seq.patient_id}.json")
        save_labels(LabelSeq(OCT6, seq.labels, float(n)), out_dir / f"{seq.patient_id}_labels.csv")
        patients.append({"id": seq.patient_id, "windows": len(seq)})
    manifest = {"n": n, "d": d, "seed": seed, "patients": patients, "folds": plan.to_dict()}
    if extra:
        manifest.update(extra)
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out_dir / "manifest.json"


def load_archive(archive_dir):
    archive_dir = Path(archive_dir)
    manifest = json.loads((archive_dir / "manifest.json").read_text())
    n, d = int(manifest["n"]), int(manifest["d"])
    seqs = []
    for p in manifest["patients"]:
        vol = load_volume(archive_dir / f"{p['id']}.json")
        labels = load_labels(archive_dir / f"{p['id']}_labels.csv")
        seqs.append(SampleSeq(p["id"], vol.data.reshape(-1, n, d, d), labels.labels))
    return seqs, FoldPlan.from_dict(manifest["folds"]), manifest
