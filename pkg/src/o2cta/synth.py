"""Synthetic paired phantoms: CCTA volume, centerline, OCT labels, references
and the ground-truth MPR label strip.

The label field lives on the MPR slice grid (slice ``k`` sits at arc length
``k * mpr_thickness_mm``). The simulated pullback traverses the segment
``[oct_start_mm, oct_end_mm)`` with a piecewise-uniform speed; reference
pairs are placed at every class change inside the segment plus optional
landmarks. Head and tail of the pullback move at the speed of the adjacent
interior interval (the base ratio when there is a single reference), which
is the regime in which the alignment is exact up to rounding.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from .align import AlignmentMap, RatioVector, align
from .dataset import prepare_sequence
from .errors import InvalidSpec
from .mprrec import compute_frames, reconstruct_mpr, resample_centerline, resampled_count
from .volio import (
    CALCIFIED,
    FIBROUS,
    HEALTHY,
    LIPID_RICH,
    OCT6,
    STENT,
    THROMBUS,
    Centerline,
    LabelSeq,
    ReferencePairs,
    Volume3D,
    class_names,
    save_centerline,
    save_labels,
    save_references,
    save_volume,
)

STYLES = class_names(OCT6)
PATH_TYPES = ("line", "helix", "spline")


@dataclass(frozen=True)
class PlaqueRun:
    cls: int
    start_mm: float
    end_mm: float
    style: str | None = None  # rendering signature; defaults to the class name

    @property
    def render_style(self):
        return self.style or STYLES[self.cls]


@dataclass(frozen=True)
class PhantomSpec:
    seed: int = 0
    path_type: str = "line"
    length_mm: float = 40.0
    helix_radius_mm: float = 6.0
    helix_pitch_mm: float = 40.0
    control_points: tuple = ()  # spline only; (z, y, x) mm, first point is the ostium
    rotate: bool = False
    lumen_radius_mm: float = 1.5
    wall_mm: float = 0.8
    runs: tuple = ()
    oct_start_mm: float = 5.0
    oct_end_mm: float = 35.0
    oct_thickness_mm: float = 0.2
    mpr_thickness_mm: float = 0.5
    ccta_spacing_mm: float = 0.5
    stretch: tuple = (1.0,)
    landmarks: int = 0
    noise_sigma: float = 0.08

    def __post_init__(self):
        runs = tuple(r if isinstance(r, PlaqueRun) else PlaqueRun(**r) for r in self.runs)
        object.__setattr__(self, "runs", runs)
        object.__setattr__(self, "stretch", tuple(float(s) for s in self.stretch))
        object.__setattr__(self, "control_points", tuple(tuple(float(v) for v in p) for p in self.control_points))
        self.validate()

    def validate(self):
        if self.path_type not in PATH_TYPES:
            raise InvalidSpec(f"path_type must be one of {PATH_TYPES}, got {self.path_type!r}")
        if self.path_type == "spline" and len(self.control_points) < 3:
            raise InvalidSpec("spline path needs at least 3 control points")
        for name in ("length_mm", "lumen_radius_mm", "wall_mm", "oct_thickness_mm", "mpr_thickness_mm", "ccta_spacing_mm"):
            if not getattr(self, name) > 0:
                raise InvalidSpec(f"{name} must be positive")
        if not self.stretch or min(self.stretch) <= 0:
            raise InvalidSpec("stretch factors must be positive")
        if not 0 <= self.oct_start_mm < self.oct_end_mm <= self.length_mm:
            raise InvalidSpec("pullback extent must satisfy 0 <= start < end <= length")
        ordered = sorted(self.runs, key=lambda r: r.start_mm)
        for r in ordered:
            if not 0 <= r.cls < len(STYLES):
                raise InvalidSpec(f"unknown class id {r.cls}")
            if r.render_style not in STYLES:
                raise InvalidSpec(f"unknown render style {r.render_style!r}")
            if not 0 <= r.start_mm < r.end_mm <= self.length_mm:
                raise InvalidSpec(f"run {r} outside vessel extent [0, {self.length_mm}]")
        for a, b in zip(ordered, ordered[1:]):
            if b.start_mm < a.end_mm:
                raise InvalidSpec(f"runs overlap: {a} and {b}")

    def to_dict(self):
        d = asdict(self)
        d["runs"] = [asdict(r) for r in self.runs]
        d["control_points"] = [list(p) for p in self.control_points]
        d["stretch"] = list(self.stretch)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass(eq=False)
class PhantomBundle:
    spec: PhantomSpec
    centerline: Centerline
    oct_labels: LabelSeq
    references: ReferencePairs
    truth_labels: LabelSeq
    truth_map: AlignmentMap
    truth_interior: tuple
    label_field: np.ndarray  # per MPR slice, OCT6
    style_field: np.ndarray  # per MPR slice, index into STYLES
    ccta: Volume3D | None = None

    @property
    def truth_offset(self):
        return self.truth_map.p_start

    def save(self, out_dir):
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        if self.ccta is not None:
            save_volume(self.ccta, out_dir / "ccta.json")
        save_centerline(self.centerline, out_dir / "centerline.csv")
        save_labels(self.oct_labels, out_dir / "oct_labels.csv")
        save_references(self.references, out_dir / "references.csv")
        save_labels(self.truth_labels, out_dir / "truth_mpr_labels.csv")
        truth = {"offset": self.truth_offset, "interior_gammas": list(self.truth_interior), **self.truth_map.to_dict()}
        (out_dir / "truth_alignment.json").write_text(json.dumps(truth, indent=2, sort_keys=True) + "\n")
        (out_dir / "phantom_spec.json").write_text(json.dumps(self.spec.to_dict(), indent=2, sort_keys=True) + "\n")
        return out_dir


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------

def _arc_resample(curve, n_fine, length, step):
    """Points of a parametric curve at uniform arc length ``0..length``."""
    u = np.linspace(0.0, 1.0, n_fine)
    pts = curve(u)
    arc = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(pts, axis=0), axis=1))])
    if arc[-1] < length - 1e-9:
        raise InvalidSpec(f"path is only {arc[-1]:.2f} mm long, {length} mm requested")
    s = np.linspace(0.0, length, int(math.ceil(length / step)) + 1)
    return np.stack([np.interp(s, arc, pts[:, i]) for i in range(3)], axis=1)


def vessel_path(spec, step=0.25):
    """Centerline polyline of the phantom, ``(n, 3)`` in local coordinates."""
    length = spec.length_mm
    if spec.path_type == "line":
        n = int(math.ceil(length / step)) + 1
        pts = np.zeros((n, 3))
        pts[:, 0] = np.linspace(0.0, length, n)
    elif spec.path_type == "helix":
        r, c = spec.helix_radius_mm, spec.helix_pitch_mm / (2 * math.pi)
        total_angle = length / math.hypot(r, c)
        theta = np.linspace(0.0, total_angle, int(math.ceil(length / step)) + 1)
        pts = np.stack([c * theta, r * np.sin(theta), r * np.cos(theta)], axis=1)
    else:
        cp = np.asarray(spec.control_points, dtype=np.float64)
        knots = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(cp, axis=0), axis=1))])
        spline = CubicSpline(knots / knots[-1], cp, bc_type="natural")
        pts = _arc_resample(spline, 20000, length, step)
    if spec.rotate:
        rot = Rotation.random(random_state=np.random.default_rng([spec.seed, 101]))
        pts = rot.apply(pts - pts[0])
    return pts


# ---------------------------------------------------------------------------
# label field and pullback simulation
# ---------------------------------------------------------------------------

def label_fields(spec, mpr_len):
    t = spec.mpr_thickness_mm
    labels = np.full(mpr_len, HEALTHY, dtype=np.int64)
    styles = np.full(mpr_len, STYLES.index("healthy"), dtype=np.int64)
    for r in spec.runs:
        lo = max(0, int(math.floor(r.start_mm / t + 0.5)))
        hi = min(mpr_len, int(math.floor(r.end_mm / t + 0.5)))
        labels[lo:hi] = r.cls
        styles[lo:hi] = STYLES.index(r.render_style)
    return labels, styles


def _round(x):
    return int(math.floor(x + 0.5)) if x >= 0 else -int(math.floor(-x + 0.5))


def simulate_pullback(spec, label_field, rng):
    """Reference pairs, OCT frame labels and the analytic alignment."""
    t = spec.mpr_thickness_mm
    mpr_len = label_field.size
    a = int(math.floor(spec.oct_start_mm / t + 0.5))
    b = min(mpr_len, int(math.floor(spec.oct_end_mm / t + 0.5)))
    if b - a < 2:
        raise InvalidSpec("pullback segment shorter than two MPR slices")
    ref_m = {k for k in range(a + 1, b) if label_field[k] != label_field[k - 1]}
    candidates = sorted(set(range(a + 1, b - 1)) - ref_m)
    if spec.landmarks and candidates:
        picks = rng.choice(len(candidates), size=min(spec.landmarks, len(candidates)), replace=False)
        ref_m.update(candidates[i] for i in picks)
    if not ref_m:
        ref_m.add((a + b) // 2)
    ref_m = sorted(ref_m)

    gamma_base = spec.oct_thickness_mm / t
    interior = []
    d_oct = []
    for j, (m0, m1) in enumerate(zip(ref_m, ref_m[1:])):
        target = gamma_base * spec.stretch[j % len(spec.stretch)]
        n_frames = max(1, _round((m1 - m0) / target))
        d_oct.append(n_frames)
        interior.append((m1 - m0) / n_frames)
    g_head = interior[0] if interior else gamma_base
    g_tail = interior[-1] if interior else gamma_base

    o0 = max(0, _round((ref_m[0] - a) / g_head))
    ref_o = [o0]
    for n_frames in d_oct:
        ref_o.append(ref_o[-1] + n_frames)
    n_tail = max(1, _round((b - ref_m[-1]) / g_tail))
    oct_len = ref_o[-1] + n_tail

    p_start = max(0, ref_m[0] - _round(g_head * o0))
    p_end = min(mpr_len, ref_m[-1] + _round(g_tail * n_tail))
    pairs = [(0, p_start)] + list(zip(ref_o, ref_m)) + [(oct_len, p_end)]
    gammas = [g_head] + interior + [g_tail]
    truth_map = AlignmentMap(tuple(pairs), RatioVector(gammas), oct_len, mpr_len)

    # OCT frame centers mapped onto the MPR axis
    centers = truth_map.frame_to_slice(np.arange(oct_len) + 0.5)
    slices = np.clip(np.floor(centers).astype(np.int64), p_start, p_end - 1)
    oct_labels = LabelSeq(OCT6, label_field[slices], spec.oct_thickness_mm)
    truth = LabelSeq(OCT6, label_field[p_start:p_end], t)
    refs = ReferencePairs(list(zip(ref_o, ref_m)))
    return refs, oct_labels, truth, truth_map, tuple(interior)


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def _intensity(style_idx, rho, theta, s, spec):
    """Stylized per-class intensity signature at polar vessel coordinates."""
    r_l, w = spec.lumen_radius_mm, spec.wall_mm
    out = np.zeros_like(rho)
    lumen = rho < r_l
    wall = (rho >= r_l) & (rho < r_l + w)
    out[lumen] = 1.0
    out[wall] = 0.35

    name = np.asarray(STYLES)[style_idx]
    calc = name == "calcified"
    out[calc & wall] = 2.2

    lipid = name == "lipid_rich"
    crescent = np.abs(np.angle(np.exp(1j * theta))) < 1.8
    out[lipid & wall & crescent] = -0.35

    fib = name == "fibrous"
    thick = (rho >= r_l) & (rho < r_l + w + 0.3)
    out[fib & thick] = 0.75

    stent = name == "stent"
    ring = np.abs(rho - r_l) < 0.3
    struts = np.cos(2 * np.pi * s / 1.5 + 3 * theta) > 0.2
    out[stent & ring & struts] = 1.8

    thr = name == "thrombus"
    bx = rho * np.cos(theta) - 0.6 * r_l
    by = rho * np.sin(theta)
    blob = np.hypot(bx, by) < 0.6 * r_l
    out[thr & lumen & blob] = 0.25
    return out


def render_ccta(spec, centerline, style_field, rng):
    """Render the vessel into a CCTA-like volume with Gaussian noise."""
    h = spec.ccta_spacing_mm
    margin = spec.lumen_radius_mm + spec.wall_mm + 2.5
    pts = centerline.points_mm
    lo = pts.min(axis=0) - margin
    hi = pts.max(axis=0) + margin
    dims = tuple(int(math.ceil((hi[i] - lo[i]) / h)) + 1 for i in range(3))
    vol = np.zeros(dims, dtype=np.float64)

    dense = resample_centerline(centerline, 0.1)
    frames = compute_frames(dense)
    arc = np.arange(len(dense)) * 0.1
    tree = cKDTree(dense.points_mm)
    grid = np.stack(np.meshgrid(*[lo[i] + h * np.arange(dims[i]) for i in range(3)], indexing="ij"), axis=-1)
    flat = grid.reshape(-1, 3)
    reach = spec.lumen_radius_mm + spec.wall_mm + 0.6
    dist, idx = tree.query(flat, distance_upper_bound=reach)
    near = np.isfinite(dist)
    p = flat[near]
    i = idx[near]
    rel = p - dense.points_mm[i]
    along = np.einsum("ij,ij->i", rel, frames.t[i])
    radial = rel - along[:, None] * frames.t[i]
    rho = np.linalg.norm(radial, axis=1)
    theta = np.arctan2(np.einsum("ij,ij->i", radial, frames.v[i]), np.einsum("ij,ij->i", radial, frames.u[i]))
    s = arc[i] + along
    k = np.clip(np.floor(s / spec.mpr_thickness_mm + 0.5).astype(np.int64), 0, style_field.size - 1)
    inside_ends = (s >= -0.05) & (s <= arc[-1] + 0.05)
    values = _intensity(style_field[k], rho, theta, s, spec) * inside_ends
    vol.reshape(-1)[np.flatnonzero(near)] = values
    vol += rng.normal(0.0, spec.noise_sigma, size=dims)
    return Volume3D(vol, (h, h, h), tuple(lo))


def gen_phantom(spec, render=True):
    """Generate one paired phantom from ``spec`` (deterministic in ``spec.seed``)."""
    rng = np.random.default_rng([spec.seed, 1])
    pts = vessel_path(spec)
    centerline = Centerline(pts - pts.min(axis=0) + spec.lumen_radius_mm + spec.wall_mm + 3.0)
    mpr_len = resampled_count(centerline.length_mm, spec.mpr_thickness_mm)
    labels, styles = label_fields(spec, mpr_len)
    refs, oct_labels, truth, truth_map, interior = simulate_pullback(spec, labels, rng)
    ccta = render_ccta(spec, centerline, styles, np.random.default_rng([spec.seed, 2])) if render else None
    return PhantomBundle(spec, centerline, oct_labels, refs, truth, truth_map, interior, labels, styles, ccta)


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DatasetSpec:
    """Distribution over phantoms.

    ``variant="standard"`` draws runs of all six classes. ``variant="context"``
    draws healthy, one calcified run and one long fibrous or stent run; in
    stent runs only the first window shows the stent signature and the rest
    render like fibrous tissue, so the class is only recoverable from context.
    Context patients come in matched pairs (same geometry, layout and noise)
    that differ only in the long run's class, so no nuisance factor can stand
    in for the context.
    """

    variant: str = "standard"
    window_slices: int = 12
    windows: tuple | None = None  # (min, max) windows per pullback; None picks per variant
    margin_slices: tuple = (8, 14)
    path_types: tuple = PATH_TYPES
    oct_thickness_mm: float = 0.2
    mpr_thickness_mm: float = 0.5
    ccta_spacing_mm: float = 0.5
    stretch_range: tuple = (0.75, 1.35)
    max_landmarks: int = 2
    noise_sigma: float = 0.08

    def __post_init__(self):
        if self.variant not in ("standard", "context"):
            raise InvalidSpec(f"unknown dataset variant {self.variant!r}")
        lo, hi = self.window_range
        if not 1 <= lo <= hi:
            raise InvalidSpec(f"invalid window range {self.window_range}")
        if self.window_slices < 1 or not 0 < self.stretch_range[0] <= self.stretch_range[1]:
            raise InvalidSpec("window_slices and stretch_range must be positive")
        if not set(self.path_types) <= set(PATH_TYPES) or not self.path_types:
            raise InvalidSpec(f"path_types must be a non-empty subset of {PATH_TYPES}")

    @property
    def window_range(self):
        if self.windows is not None:
            return tuple(self.windows)
        return (8, 9) if self.variant == "context" else (4, 6)

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def _window_layout(rng, ds, long_cls=None):
    """Per-window (class, style) list for the pullback segment."""
    lo, hi = ds.window_range
    n_win = int(rng.integers(lo, hi + 1))
    layout = []
    if ds.variant == "context":
        coin = rng.random()  # drawn even when forced, so twins share the rest of the stream
        if long_cls is None:
            long_cls = STENT if coin < 0.5 else FIBROUS
        run_len = max(2, n_win - 3)
        long_run = [(long_cls, "stent" if long_cls == STENT and i == 0 else "fibrous") for i in range(run_len)]
        pieces = [[(HEALTHY, "healthy")], [(CALCIFIED, "calcified")], long_run]
        order = rng.permutation(3)
        for j in order:
            layout.extend(pieces[j])
        while len(layout) < n_win:
            layout.append((HEALTHY, "healthy"))
        return layout[:n_win]
    plaque = (CALCIFIED, LIPID_RICH, FIBROUS, THROMBUS, STENT)
    if rng.random() < 0.5:
        layout.append((HEALTHY, "healthy"))
    while len(layout) < n_win:
        cls = plaque[int(rng.integers(len(plaque)))]
        layout.extend([(cls, STYLES[cls])] * int(rng.integers(1, 3)))
        layout.append((HEALTHY, "healthy"))
    return layout[:n_win]


def sample_spec(ds, seed, long_cls=None):
    """Draw one phantom spec; ``long_cls`` forces the context variant's long run."""
    if long_cls not in (None, STENT, FIBROUS):
        raise InvalidSpec("long_cls must be stent or fibrous")
    rng = np.random.default_rng([seed, 0])
    t = ds.mpr_thickness_mm
    g = ds.window_slices
    layout = _window_layout(rng, ds, long_cls)
    head = int(rng.integers(ds.margin_slices[0], ds.margin_slices[1] + 1))
    tail = int(rng.integers(ds.margin_slices[0], ds.margin_slices[1] + 1))
    a = head
    b = a + len(layout) * g
    total_slices = b + tail
    length = total_slices * t

    # merge consecutive windows with equal class and style into runs
    runs = []
    for w, (cls, style) in enumerate(layout):
        lo, hi = a + w * g, a + (w + 1) * g
        if w == 0:
            lo = 0
        if w == len(layout) - 1:
            hi = total_slices
        if runs and runs[-1][0] == cls and runs[-1][1] == style:
            runs[-1][3] = hi
        else:
            runs.append([cls, style, lo, hi])
    plaque_runs = tuple(
        PlaqueRun(cls, lo * t, hi * t, None if style == STYLES[cls] else style)
        for cls, style, lo, hi in runs
        if cls != HEALTHY
    )
    path_type = ds.path_types[int(rng.integers(len(ds.path_types)))]
    control = ()
    if path_type == "spline":
        zs = np.linspace(0.0, length * 0.9, 5)
        control = tuple((float(z), float(rng.uniform(-6, 6)), float(rng.uniform(-6, 6))) for z in zs)
        control = control + ((float(length * 1.3), control[-1][1], control[-1][2]),)
    # sized by window count, not run count, so context twins keep identical draws
    n_int = len(layout) + ds.max_landmarks
    stretch = tuple(float(x) for x in rng.uniform(ds.stretch_range[0], ds.stretch_range[1], size=n_int))
    return PhantomSpec(
        seed=int(seed),
        path_type=path_type,
        length_mm=length,
        helix_radius_mm=float(rng.uniform(4.0, 8.0)),
        helix_pitch_mm=float(rng.uniform(30.0, 50.0)),
        control_points=control,
        rotate=True,
        runs=plaque_runs,
        oct_start_mm=a * t,
        oct_end_mm=b * t,
        oct_thickness_mm=ds.oct_thickness_mm,
        mpr_thickness_mm=t,
        ccta_spacing_mm=ds.ccta_spacing_mm,
        stretch=stretch,
        landmarks=int(rng.integers(0, ds.max_landmarks + 1)),
        noise_sigma=ds.noise_sigma,
    )


def patient_seed(seed, index):
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def gen_dataset(n_patients, ds, seed, out_dir=None, render=True):
    """Generate ``n_patients`` phantoms; optionally write bundles and a manifest."""
    if n_patients < 1:
        raise InvalidSpec("need at least one patient")
    bundles = []
    ids = []
    for i in range(n_patients):
        pid = f"P{i:03d}"
        if ds.variant == "context":
            spec = sample_spec(ds, patient_seed(seed, i // 2), STENT if i % 2 == 0 else FIBROUS)
        else:
            spec = sample_spec(ds, patient_seed(seed, i))
        bundle = gen_phantom(spec, render=render)
        bundles.append(bundle)
        ids.append(pid)
        if out_dir is not None:
            bundle.save(Path(out_dir) / "patients" / pid)
    if out_dir is not None:
        manifest = {"n_patients": n_patients, "seed": seed, "distribution": ds.to_dict(), "patients": ids}
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "synth_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return ids, bundles


def phantom_sequence(bundle, patient_id="", n=12, d=21, in_plane_spacing_mm=0.3):
    """In-memory MPR, alignment and windowing of one rendered phantom."""
    thk = bundle.spec.mpr_thickness_mm
    mpr = reconstruct_mpr(bundle.ccta, bundle.centerline, thk, in_plane_spacing_mm, d)
    res = align(bundle.oct_labels, bundle.references, mpr.dims[0], thk)
    return prepare_sequence(mpr, res.labels, res.offset, n, d, patient_id)
