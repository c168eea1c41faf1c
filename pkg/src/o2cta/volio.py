"""Core data types and bit-exact file I/O.

Every 3-vector in the package (points, spacings, origins) is ordered
``(z, y, x)`` to match the array axes of :class:`Volume3D`.

On-disk formats
---------------
Volume
    JSON header ``{"dims": [nz, ny, nx], "spacing_mm": [sz, sy, sx],
    "origin_mm": [oz, oy, ox], "dtype": "float32", "data_file": "<name>.raw"}``
    next to a raw little-endian float32 blob of exactly ``4*nz*ny*nx`` bytes,
    z-major (x fastest).
Labels
    CSV with ``# taxonomy=<OCT6|CCTA3>`` and ``# thickness_mm=<v>`` comment
    lines, then ``index,label`` rows contiguous from 0.
References
    CSV with header ``oct_index,mpr_index``.
Centerline
    CSV with header ``z_mm,y_mm,x_mm``.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    CorruptData,
    InvalidValue,
    MalformedLabels,
    NonMonotoneReferences,
    NoReferences,
    SizeMismatch,
    UnknownClass,
    UnsupportedFormat,
)

OCT6 = "OCT6"
CCTA3 = "CCTA3"

TAXONOMIES = {
    OCT6: ("healthy", "calcified", "lipid_rich", "fibrous", "thrombus", "stent"),
    CCTA3: ("non_calcified", "calcified", "stent"),
}

# Display names used in report headers.
OCT6_DISPLAY = ("Healthy", "Calcified", "Lipid-rich", "Fibrous", "Thrombus", "Stent")

HEALTHY, CALCIFIED, LIPID_RICH, FIBROUS, THROMBUS, STENT = range(6)
NON_CALCIFIED, CCTA_CALCIFIED, CCTA_STENT = range(3)


def class_names(taxonomy):
    try:
        return TAXONOMIES[taxonomy]
    except KeyError:
        raise UnknownClass(f"unknown taxonomy {taxonomy!r}") from None


# ---------------------------------------------------------------------------
# Volume3D
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Volume3D:
    data: np.ndarray
    spacing_mm: tuple
    origin_mm: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float32, order="C")
        if data.ndim != 3 or min(data.shape) < 1:
            raise InvalidValue(f"volume data must be a non-empty 3D array, got shape {data.shape}")
        spacing = tuple(float(s) for s in self.spacing_mm)
        origin = tuple(float(o) for o in self.origin_mm)
        if len(spacing) != 3 or not all(s > 0 and math.isfinite(s) for s in spacing):
            raise InvalidValue(f"spacing must be three positive reals, got {self.spacing_mm}")
        if len(origin) != 3:
            raise InvalidValue(f"origin must have three components, got {self.origin_mm}")
        if not np.isfinite(data).all():
            raise CorruptData("volume contains non-finite values")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing_mm", spacing)
        object.__setattr__(self, "origin_mm", origin)

    @property
    def dims(self):
        return tuple(int(n) for n in self.data.shape)

    def index_to_world(self, idx):
        """Continuous voxel index ``(k, j, i)`` to world mm."""
        idx = np.asarray(idx, dtype=np.float64)
        return np.asarray(self.origin_mm) + idx * np.asarray(self.spacing_mm)

    def world_to_index(self, p_mm):
        p = np.asarray(p_mm, dtype=np.float64)
        return (p - np.asarray(self.origin_mm)) / np.asarray(self.spacing_mm)


def flat_index(dims, z, y, x):
    return np.ravel_multi_index((z, y, x), dims)


def unflat_index(dims, i):
    return np.unravel_index(i, dims)


def save_volume(vol, header_path, data_file=None):
    """Write ``vol`` as a JSON header plus raw float32 blob; returns the header path."""
    header_path = Path(header_path)
    data_file = data_file or header_path.with_suffix(".raw").name
    header = {
        "dims": list(vol.dims),
        "spacing_mm": list(vol.spacing_mm),
        "origin_mm": list(vol.origin_mm),
        "dtype": "float32",
        "data_file": data_file,
    }
    header_path.parent.mkdir(parents=True, exist_ok=True)
    header_path.write_text(json.dumps(header, indent=2) + "\n")
    (header_path.parent / data_file).write_bytes(vol.data.astype("<f4", copy=False).tobytes(order="C"))
    return header_path


def load_volume(header_path):
    header_path = Path(header_path)
    try:
        header = json.loads(header_path.read_text())
    except json.JSONDecodeError as exc:
        raise UnsupportedFormat(f"{header_path}: header is not JSON ({exc})") from None
    if header.get("dtype", "float32") != "float32":
        raise UnsupportedFormat(f"{header_path}: unsupported dtype {header.get('dtype')!r}")
    try:
        dims = tuple(int(n) for n in header["dims"])
        spacing = header["spacing_mm"] if "spacing_mm" in header else header["spacing"]
        data_file = header["data_file"]
    except KeyError as exc:
        raise UnsupportedFormat(f"{header_path}: missing header key {exc}") from None
    if len(dims) != 3 or min(dims) < 1:
        raise UnsupportedFormat(f"{header_path}: dims must be three positive integers")
    raw_path = header_path.parent / data_file
    if not raw_path.exists():
        raise SizeMismatch(f"{raw_path}: raw data file missing")
    raw = raw_path.read_bytes()
    expected = 4 * dims[0] * dims[1] * dims[2]
    if len(raw) != expected:
        raise SizeMismatch(f"{raw_path}: expected {expected} bytes, found {len(raw)}")
    data = np.frombuffer(raw, dtype="<f4").reshape(dims)
    if not np.isfinite(data).all():
        raise CorruptData(f"{raw_path}: non-finite values")
    return Volume3D(data, spacing, header.get("origin_mm", (0.0, 0.0, 0.0)))


# ---------------------------------------------------------------------------
# Centerline
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Centerline:
    points_mm: np.ndarray
    arc_length: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        pts = np.array(self.points_mm, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 2:
            raise InvalidValue(f"centerline needs at least 2 points of dimension 3, got {pts.shape}")
        if not np.isfinite(pts).all():
            raise CorruptData("centerline contains non-finite coordinates")
        seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        if (seg <= 1e-9).any():
            raise InvalidValue("consecutive centerline points coincide")
        arc = np.concatenate([[0.0], np.cumsum(seg)])
        pts.setflags(write=False)
        arc.setflags(write=False)
        object.__setattr__(self, "points_mm", pts)
        object.__setattr__(self, "arc_length", arc)

    @property
    def length_mm(self):
        return float(self.arc_length[-1])

    def __len__(self):
        return self.points_mm.shape[0]


def save_centerline(c, path):
    path = Path(path)
    lines = ["z_mm,y_mm,x_mm"] + [",".join(repr(float(v)) for v in p) for p in c.points_mm]
    path.write_text("\n".join(lines) + "\n")
    return path


def load_centerline(path):
    rows = list(csv.reader(io.StringIO(Path(path).read_text())))
    if not rows or [h.strip() for h in rows[0]] != ["z_mm", "y_mm", "x_mm"]:
        raise UnsupportedFormat(f"{path}: expected header z_mm,y_mm,x_mm")
    return Centerline([[float(v) for v in r] for r in rows[1:] if r])


# ---------------------------------------------------------------------------
# LabelSeq
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LabelSeq:
    taxonomy: str
    labels: tuple
    slice_thickness_mm: float

    def __post_init__(self):
        names = class_names(self.taxonomy)
        labels = tuple(int(v) for v in self.labels)
        if not labels:
            raise InvalidValue("label sequence must not be empty")
        bad = [v for v in labels if not 0 <= v < len(names)]
        if bad:
            raise UnknownClass(f"class id {bad[0]} invalid for taxonomy {self.taxonomy}")
        t = float(self.slice_thickness_mm)
        if not (t > 0 and math.isfinite(t)):
            raise InvalidValue(f"slice thickness must be positive, got {self.slice_thickness_mm}")
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "slice_thickness_mm", t)

    def __len__(self):
        return len(self.labels)

    @property
    def array(self):
        return np.asarray(self.labels, dtype=np.int64)

    @property
    def names(self):
        names = class_names(self.taxonomy)
        return [names[v] for v in self.labels]


def save_labels(seq, path):
    names = class_names(seq.taxonomy)
    out = io.StringIO()
    out.write(f"# taxonomy={seq.taxonomy}\n")
    out.write(f"# thickness_mm={seq.slice_thickness_mm!r}\n")
    out.write("index,label\n")
    for i, v in enumerate(seq.labels):
        out.write(f"{i},{names[v]}\n")
    Path(path).write_text(out.getvalue())
    return Path(path)


def load_labels(path, taxonomy=None):
    """Read a label CSV; ``taxonomy`` overrides the file's declaration."""
    meta = {}
    body = []
    for line in Path(path).read_text().splitlines():
        s = line.strip()
        if not s:
            continue
        if s.startswith("#"):
            key, _, value = s[1:].partition("=")
            meta[key.strip()] = value.strip()
        else:
            body.append(s)
    taxonomy = taxonomy or meta.get("taxonomy", OCT6)
    names = class_names(taxonomy)
    if "thickness_mm" not in meta:
        raise MalformedLabels(f"{path}: missing '# thickness_mm=' line")
    if not body or [h.strip() for h in body[0].split(",")] != ["index", "label"]:
        raise MalformedLabels(f"{path}: expected header index,label")
    labels = []
    for row in csv.reader(body[1:]):
        if len(row) != 2:
            raise MalformedLabels(f"{path}: malformed row {row}")
        idx, name = int(row[0]), row[1].strip()
        if idx != len(labels):
            raise MalformedLabels(f"{path}: expected index {len(labels)}, found {idx}")
        if name not in names:
            raise UnknownClass(f"{path}: unknown class {name!r} for taxonomy {taxonomy}")
        labels.append(names.index(name))
    if not labels:
        raise MalformedLabels(f"{path}: no label rows")
    return LabelSeq(taxonomy, labels, float(meta["thickness_mm"]))


# ---------------------------------------------------------------------------
# ReferencePairs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ReferencePairs:
    """Paired (OCT frame, MPR slice) landmarks, kept sorted by OCT index."""

    pairs: tuple

    def __post_init__(self):
        pairs = tuple(sorted((int(o), int(m)) for o, m in self.pairs))
        if not pairs:
            raise NoReferences("at least one reference pair is required")
        if any(o < 0 or m < 0 for o, m in pairs):
            raise NonMonotoneReferences("reference indices must be non-negative")
        for (o0, m0), (o1, m1) in zip(pairs, pairs[1:]):
            if not (o1 > o0 and m1 > m0):
                raise NonMonotoneReferences(f"references ({o0},{m0}) -> ({o1},{m1}) are not strictly increasing")
        object.__setattr__(self, "pairs", pairs)

    def __len__(self):
        return len(self.pairs)

    def __getitem__(self, i):
        return self.pairs[i]

    @property
    def oct(self):
        return [o for o, _ in self.pairs]

    @property
    def mpr(self):
        return [m for _, m in self.pairs]

    def check_bounds(self, oct_len, mpr_len):
        for o, m in self.pairs:
            if o >= oct_len or m >= mpr_len:
                raise NonMonotoneReferences(
                    f"reference ({o},{m}) outside sequence bounds (oct {oct_len}, mpr {mpr_len})"
                )


def save_references(refs, path):
    lines = ["oct_index,mpr_index"] + [f"{o},{m}" for o, m in refs.pairs]
    Path(path).write_text("\n".join(lines) + "\n")
    return Path(path)


def load_references(path):
    rows = [r for r in csv.reader(io.StringIO(Path(path).read_text())) if r]
    if not rows:
        raise NoReferences(f"{path}: empty reference file")
    if [h.strip() for h in rows[0]] != ["oct_index", "mpr_index"]:
        raise UnsupportedFormat(f"{path}: expected header oct_index,mpr_index")
    if len(rows) == 1:
        raise NoReferences(f"{path}: no reference rows")
    return ReferencePairs([(int(o), int(m)) for o, m in rows[1:]])
