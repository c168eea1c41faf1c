"""Command-line front end: ``o2cta <subcommand> [--config FILE] [--seed S] [--out DIR]``.

Every run writes ``run_manifest.json`` (config snapshot, input and output
hashes, seed, version) into its output directory. Wall time goes to a
separate ``timing.json`` so that the manifest itself is reproducible byte
for byte.

Exit codes: 0 success, 1 runtime failure, 2 invalid configuration.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, metrics
from .align import align
from .dataset import (
    ABLATION_N,
    DEFAULT_N,
    load_archive,
    make_folds,
    map_to_ccta3,
    prepare_sequence,
    save_archive,
)
from .errors import ConfigError, O2CTAError
from .model import CNN_ONLY, TRANSFORMER, ModelConfig, TrainConfig, evaluate, load_model, train_fold
from .mprrec import DEFAULT_D, DEFAULT_IN_PLANE_SPACING_MM, DEFAULT_SLICE_THICKNESS_MM, reconstruct_mpr
from .synth import DatasetSpec, PhantomSpec, gen_dataset, gen_phantom
from .volio import (
    CCTA3,
    OCT6,
    OCT6_DISPLAY,
    LabelSeq,
    load_centerline,
    load_labels,
    load_references,
    load_volume,
    save_labels,
    save_volume,
)

SUMMARY_COLUMNS = OCT6_DISPLAY + ("Mean", "ACC")

DEFAULTS = {
    "seed": 0,
    "synth": {"n_patients": 40, **DatasetSpec().to_dict()},
    "mpr": {
        "slice_thickness_mm": DEFAULT_SLICE_THICKNESS_MM,
        "in_plane_spacing_mm": DEFAULT_IN_PLANE_SPACING_MM,
        "d": DEFAULT_D,
        "fill_value": 0.0,
    },
    "dataset": {"n": DEFAULT_N, "d": DEFAULT_D, "folds": 5},
    "model": {k: v for k, v in ModelConfig().to_dict().items() if k not in ("n", "d", "seed")},
    "train": {k: v for k, v in TrainConfig().to_dict().items() if k not in ("folds", "seed")},
    "kinds": [TRANSFORMER],
}


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def _merge(base, override, path=""):
    out = dict(base)
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(where, "unknown field")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(where, "expected an object")
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = value
    return out


# fields accepting either a scalar or a list; checked in validate_config
_SCALAR_OR_LIST = {"dataset.n"}


def _check_type(cfg, defaults, path=""):
    for key, default in defaults.items():
        where = f"{path}{key}"
        value = cfg[key]
        if where in _SCALAR_OR_LIST:
            continue
        if isinstance(default, dict):
            _check_type(value, default, where + ".")
        elif isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigError(where, f"expected true/false, got {value!r}")
        elif isinstance(default, int):
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(where, f"expected an integer, got {value!r}")
        elif isinstance(default, float):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(where, f"expected a number, got {value!r}")
        elif isinstance(default, (list, tuple)) and not isinstance(value, (list, tuple)):
            raise ConfigError(where, f"expected a list, got {value!r}")


def load_config(path=None, overrides=None):
    """Defaults <- JSON file <- flag overrides; validated field by field."""
    cfg = json.loads(json.dumps(DEFAULTS))
    if path:
        try:
            user = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError("--config", str(exc)) from None
        if not isinstance(user, dict):
            raise ConfigError("--config", "top level must be an object")
        cfg = _merge(cfg, user)
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        node = cfg
        *head, last = dotted.split(".")
        for part in head:
            node = node[part]
        node[last] = value
    _check_type(cfg, DEFAULTS)
    validate_config(cfg)
    return cfg


def _build(cls, section, values, **extra):
    try:
        return cls(**values, **extra)
    except (O2CTAError, TypeError, ValueError) as exc:
        raise ConfigError(section, str(exc)) from None


def validate_config(cfg):
    if cfg["seed"] < 0:
        raise ConfigError("seed", "must be non-negative")
    syn = dict(cfg["synth"])
    if syn.pop("n_patients") < 1:
        raise ConfigError("synth.n_patients", "must be >= 1")
    if syn["variant"] not in ("standard", "context"):
        raise ConfigError("synth.variant", "must be 'standard' or 'context'")
    try:
        DatasetSpec.from_dict(syn)
    except (O2CTAError, TypeError, ValueError) as exc:
        raise ConfigError("synth", str(exc)) from None
    m = cfg["mpr"]
    if m["d"] < 1 or m["d"] % 2 == 0:
        raise ConfigError("mpr.d", "must be a positive odd integer")
    for key in ("slice_thickness_mm", "in_plane_spacing_mm"):
        if not m[key] > 0:
            raise ConfigError(f"mpr.{key}", "must be positive")
    ds = cfg["dataset"]
    ns = ds["n"] if isinstance(ds["n"], list) else [ds["n"]]
    if not ns or any(isinstance(n, bool) or not isinstance(n, int) or n < 1 for n in ns):
        raise ConfigError("dataset.n", "must be a positive integer or a list of them")
    if ds["d"] > m["d"] or ds["d"] < 1:
        raise ConfigError("dataset.d", f"must be in [1, mpr.d={m['d']}]")
    if ds["folds"] < 2:
        raise ConfigError("dataset.folds", "must be >= 2")
    for kind in cfg["kinds"]:
        if kind not in (TRANSFORMER, CNN_ONLY):
            raise ConfigError("kinds", f"unknown model kind {kind!r}")
    for n in ns:
        model_config(cfg, n)
    train_config(cfg)


def model_config(cfg, n):
    return _build(ModelConfig, "model", cfg["model"], n=n, d=cfg["dataset"]["d"], seed=cfg["seed"])


def train_config(cfg):
    return _build(TrainConfig, "train", cfg["train"], folds=cfg["dataset"]["folds"], seed=cfg["seed"])


# ---------------------------------------------------------------------------
# provenance
# ---------------------------------------------------------------------------

# wall-time sidecar; never hashed so that manifests stay reproducible
TIMING_FILE = "timing.json"


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _hash_tree(paths, root=None):
    out = {}
    for p in paths:
        p = Path(p)
        files = sorted(f for f in p.rglob("*") if f.is_file() and f.name != TIMING_FILE) if p.is_dir() else [p]
        for f in files:
            key = f.relative_to(root).as_posix() if root else f.as_posix()
            out[key] = sha256_file(f)
    return out


def write_manifest(out_dir, subcommand, config, inputs, seed, started):
    """Write ``run_manifest.json`` (deterministic) and ``timing.json``."""
    out_dir = Path(out_dir)
    skip = {"run_manifest.json"}
    outputs = {k: v for k, v in _hash_tree([out_dir], out_dir).items() if k not in skip}
    manifest = {
        "subcommand": subcommand,
        "config": config,
        "inputs": _hash_tree(inputs),
        "outputs": outputs,
        "seed": seed,
        "tool_version": __version__,
    }
    _write_json(out_dir / "run_manifest.json", manifest)
    _write_json(out_dir / TIMING_FILE, {"wall_time_s": round(time.perf_counter() - started, 3)})
    return manifest


def _write_json(path, obj):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _log(msg):
    print(msg, file=sys.stderr, flush=True)


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def stage_mpr(case_dir, cfg):
    case_dir = Path(case_dir)
    m = cfg["mpr"]
    mpr = reconstruct_mpr(
        load_volume(case_dir / "ccta.json"),
        load_centerline(case_dir / "centerline.csv"),
        m["slice_thickness_mm"],
        m["in_plane_spacing_mm"],
        m["d"],
        m["fill_value"],
    )
    save_volume(mpr, case_dir / "mpr.json")
    return mpr


def stage_align(oct_labels, mpr_header, references, out_dir, mpr_thickness_mm=None):
    mpr = load_volume(mpr_header)
    thickness = mpr_thickness_mm or mpr.spacing_mm[0]
    result = align(load_labels(oct_labels, OCT6), load_references(references), mpr.dims[0], thickness)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_labels(result.labels, out_dir / "mpr_labels.csv")
    _write_json(out_dir / "alignment.json", result.report())
    return result


def case_sequence(case_dir, n, d, patient_id):
    case_dir = Path(case_dir)
    mpr = load_volume(case_dir / "mpr.json")
    labels = load_labels(case_dir / "mpr_labels.csv", OCT6)
    report = json.loads((case_dir / "alignment.json").read_text())
    return prepare_sequence(mpr, labels, int(report["offset"]), n, d, patient_id)


def build_archive(cases_dir, out_dir, n, d, folds, seed):
    case_dirs = sorted(p for p in Path(cases_dir).iterdir() if (p / "alignment.json").is_file())
    if not case_dirs:
        raise O2CTAError(f"no aligned cases under {cases_dir}")
    seqs = [case_sequence(p, n, d, p.name) for p in case_dirs]
    plan = make_folds([s.patient_id for s in seqs], folds, seed)
    save_archive(out_dir, seqs, plan, n, d, seed)
    return seqs, plan


def _split(seqs, plan, fold):
    test = set(plan.test_ids(fold))
    return [s for s in seqs if s.patient_id not in test], [s for s in seqs if s.patient_id in test]


def train_folds(archive_dir, out_dir, cfg, kinds, folds=None):
    seqs, plan, manifest = load_archive(archive_dir)
    mc = model_config(cfg, int(manifest["n"]))
    if mc.d != int(manifest["d"]):
        raise ConfigError("dataset.d", f"archive windows are {manifest['d']} wide")
    tc = train_config(cfg)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for kind in kinds:
        for fold in folds if folds is not None else range(plan.k):
            train, val = _split(seqs, plan, fold)
            _log(f"train {kind} fold {fold}: {len(train)} train / {len(val)} held-out patients")
            result = train_fold(train, val, mc, tc, kind)
            result.save(out_dir / f"{kind}_fold{fold}", {"fold": fold, "train_config": tc.to_dict()})


def _fmt_pct(v):
    return "n/a" if v is None else f"{100.0 * v:.2f}"


def summary_row(auc, mean_auc, acc):
    return [_fmt_pct(a) for a in auc] + [_fmt_pct(mean_auc), _fmt_pct(acc)]


def write_table(path, header, rows):
    lines = [",".join(header)] + [",".join(str(c) for c in row) for row in rows]
    Path(path).write_text("\n".join(lines) + "\n")


# strip image colours per OCT6 class
PALETTE = np.array(
    [[230, 230, 230], [250, 250, 90], [230, 60, 60], [70, 160, 230], [140, 60, 170], [60, 190, 90]], dtype=np.uint8
)


def write_ppm(path, rows, cell=8):
    """Label rows (equal length) as a P6 image, ``cell`` pixels per window."""
    img = PALETTE[np.asarray(rows, dtype=np.int64)]
    img = np.repeat(np.repeat(img, cell, axis=0), cell, axis=1)
    h, w = img.shape[:2]
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + img.tobytes())


def eval_folds(archive_dir, ckpt_dir, out_dir, kinds):
    """Pool held-out predictions over folds; write summary, strips and report."""
    seqs, plan, _ = load_archive(archive_dir)
    out_dir = Path(out_dir)
    (out_dir / "strips").mkdir(parents=True, exist_ok=True)
    rows, report = [], {"folds": {}, "reference_kappa": metrics.reference_kappa_note()}
    for kind in kinds:
        probs, labels, per_fold = [], [], []
        for fold in range(plan.k):
            _, val = _split(seqs, plan, fold)
            model = load_model(Path(ckpt_dir) / f"{kind}_fold{fold}.json")
            ev = evaluate(model, val)
            per_fold.append({"fold": fold, "acc": ev["acc"], "mean_auc": ev["mean_auc"], "auc": ev["auc"]})
            for s, p in zip(val, ev["probs"]):
                pred = p.argmax(axis=1)
                probs.append(p)
                labels.append(s.labels)
                strip = np.stack([s.labels, pred])
                write_table(
                    out_dir / "strips" / f"{kind}_{s.patient_id}.csv",
                    ("window", "annotation", "prediction"),
                    [(i, int(a), int(b)) for i, (a, b) in enumerate(strip.T)],
                )
                write_ppm(out_dir / "strips" / f"{kind}_{s.patient_id}.ppm", strip)
        p = np.concatenate(probs)
        y = np.concatenate(labels)
        auc, mean_auc = metrics.auc_table(p, y, p.shape[1])
        acc = metrics.accuracy(p.argmax(axis=1), y)
        rows.append([kind] + summary_row(auc, mean_auc, acc))
        pred = LabelSeq(OCT6, p.argmax(axis=1), 1.0)
        truth = LabelSeq(OCT6, y, 1.0)
        try:
            agreement = metrics.agreement_report(map_to_ccta3(pred), map_to_ccta3(truth), truth).to_dict()
        except O2CTAError as exc:
            agreement = {"error": str(exc)}
        report["folds"][kind] = per_fold
        report[kind] = {"acc": acc, "mean_auc": mean_auc, "auc": auc, "agreement_ccta3": agreement}
    write_table(out_dir / "summary.csv", ("model",) + SUMMARY_COLUMNS, rows)
    _write_json(out_dir / "report.json", report)
    return rows, report


def run_pipeline(cfg, out_dir):
    out_dir = Path(out_dir)
    syn = dict(cfg["synth"])
    n_patients = syn.pop("n_patients")
    ids, _ = gen_dataset(n_patients, DatasetSpec.from_dict(syn), cfg["seed"], out_dir / "patients_raw")
    cases = out_dir / "patients_raw" / "patients"
    for pid in ids:
        case = cases / pid
        stage_mpr(case, cfg)
        stage_align(case / "oct_labels.csv", case / "mpr.json", case / "references.csv", case)
    ns = cfg["dataset"]["n"] if isinstance(cfg["dataset"]["n"], list) else [cfg["dataset"]["n"]]
    ablation = []
    for n in ns:
        run = out_dir / f"n{n}"
        build_archive(cases, run / "archive", n, cfg["dataset"]["d"], cfg["dataset"]["folds"], cfg["seed"])
        train_folds(run / "archive", run / "checkpoints", cfg, cfg["kinds"])
        rows, _ = eval_folds(run / "archive", run / "checkpoints", run / "eval", cfg["kinds"])
        ablation.extend([n] + r for r in rows)
    if len(ns) == 1:
        (out_dir / "summary.csv").write_bytes((out_dir / f"n{ns[0]}" / "eval" / "summary.csv").read_bytes())
    else:
        write_table(out_dir / "ablation.csv", ("N", "model") + SUMMARY_COLUMNS, ablation)
    return ablation


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _int_list(text):
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    return values[0] if len(values) == 1 else values


def build_parser():
    p = argparse.ArgumentParser(prog="o2cta", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", required=out_required, help="output directory")
        return sp

    sp = common(sub.add_parser("synth", help="generate phantom bundles"))
    sp.add_argument("--patients", type=int)
    sp.add_argument("--variant", choices=("standard", "context"))
    sp.add_argument("--phantom", help="single PhantomSpec JSON instead of a dataset")

    sp = common(sub.add_parser("mpr", help="straightened MPR from CCTA + centerline"))
    sp.add_argument("--ccta", required=True, help="volume header JSON")
    sp.add_argument("--centerline", required=True)
    sp.add_argument("--slice-thickness", type=float)
    sp.add_argument("--spacing", type=float)
    sp.add_argument("--d", type=int)

    sp = common(sub.add_parser("align", help="transfer OCT labels onto MPR slices"))
    sp.add_argument("--oct-labels", required=True)
    sp.add_argument("--mpr", required=True, help="MPR volume header JSON")
    sp.add_argument("--references", required=True)
    sp.add_argument("--mpr-thickness", type=float, help="defaults to the MPR slice spacing")

    sp = common(sub.add_parser("dataset", help="windowed sequence archive with fold plan"))
    sp.add_argument("--cases", required=True, help="directory of aligned case folders")
    sp.add_argument("--n", type=int)
    sp.add_argument("--d", type=int)
    sp.add_argument("--folds", type=int)

    sp = common(sub.add_parser("train", help="train one model per fold"))
    sp.add_argument("--archive", required=True)
    sp.add_argument("--fold", type=int, help="train only this fold")
    sp.add_argument("--kind", choices=(TRANSFORMER, CNN_ONLY))
    sp.add_argument("--epochs", type=int)

    sp = common(sub.add_parser("eval", help="held-out evaluation over folds"))
    sp.add_argument("--archive", required=True)
    sp.add_argument("--checkpoints", required=True)
    sp.add_argument("--kind", choices=(TRANSFORMER, CNN_ONLY))

    sp = common(sub.add_parser("kappa", help="CCTA vs OCT agreement"))
    sp.add_argument("--ccta-labels", help="CCTA3 label CSV")
    sp.add_argument("--oct-labels", help="OCT6 or CCTA3 label CSV aligned to the same slices")
    sp.add_argument("--reference", action="store_true", help="recompute kappa from the published 2x2 counts")

    sp = common(sub.add_parser("pipeline", help="synth -> mpr -> align -> dataset -> train -> eval"))
    sp.add_argument("--patients", type=int)
    sp.add_argument("--variant", choices=("standard", "context"))
    sp.add_argument("--n", type=_int_list, help="window thickness, or a list such as 6,9,12 for the ablation")
    sp.add_argument("--ablation", action="store_true", help=f"shorthand for --n {','.join(map(str, ABLATION_N))}")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--folds", type=int)
    sp.add_argument("--kind", choices=(TRANSFORMER, CNN_ONLY, "both"))
    return p


def _overrides(args):
    get = lambda name: getattr(args, name, None)  # noqa: E731
    ov = {
        "seed": get("seed"),
        "synth.n_patients": get("patients"),
        "synth.variant": get("variant"),
        "mpr.slice_thickness_mm": get("slice_thickness"),
        "mpr.in_plane_spacing_mm": get("spacing"),
        "dataset.n": list(ABLATION_N) if get("ablation") else get("n"),
        "dataset.folds": get("folds"),
        "train.epochs": get("epochs"),
    }
    if args.command == "mpr":
        ov["mpr.d"] = get("d")
    elif args.command == "dataset":
        ov["dataset.d"] = get("d")
    kind = get("kind")
    if kind:
        ov["kinds"] = [TRANSFORMER, CNN_ONLY] if kind == "both" else [kind]
    return ov


def run(args):
    started = time.perf_counter()
    cfg = load_config(args.config, _overrides(args))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    inputs = [args.config] if args.config else []
    seed = cfg["seed"]
    cmd = args.command

    if cmd == "synth":
        if args.phantom:
            inputs.append(args.phantom)
            try:
                spec = PhantomSpec.from_dict(json.loads(Path(args.phantom).read_text()))
            except (TypeError, json.JSONDecodeError) as exc:
                raise ConfigError("--phantom", str(exc)) from None
            gen_phantom(spec).save(out)
        else:
            syn = dict(cfg["synth"])
            n_patients = syn.pop("n_patients")
            gen_dataset(n_patients, DatasetSpec.from_dict(syn), seed, out)
    elif cmd == "mpr":
        inputs += [args.ccta, args.centerline]
        m = cfg["mpr"]
        mpr = reconstruct_mpr(
            load_volume(args.ccta),
            load_centerline(args.centerline),
            m["slice_thickness_mm"],
            m["in_plane_spacing_mm"],
            m["d"],
            m["fill_value"],
        )
        save_volume(mpr, out / "mpr.json")
    elif cmd == "align":
        inputs += [args.oct_labels, args.mpr, args.references]
        stage_align(args.oct_labels, args.mpr, args.references, out, args.mpr_thickness)
    elif cmd == "dataset":
        inputs.append(args.cases)
        ds = cfg["dataset"]
        if isinstance(ds["n"], list):
            raise ConfigError("dataset.n", "the dataset subcommand takes a single window thickness")
        build_archive(args.cases, out, ds["n"], ds["d"], ds["folds"], seed)
    elif cmd == "train":
        inputs.append(args.archive)
        folds = None if args.fold is None else [args.fold]
        train_folds(args.archive, out, cfg, cfg["kinds"], folds)
    elif cmd == "eval":
        inputs += [args.archive, args.checkpoints]
        eval_folds(args.archive, args.checkpoints, out, cfg["kinds"])
    elif cmd == "kappa":
        if args.reference:
            _write_json(out / "kappa.json", metrics.reference_kappa_note())
        else:
            if not (args.ccta_labels and args.oct_labels):
                raise ConfigError("--ccta-labels/--oct-labels", "both label files are required without --reference")
            inputs += [args.ccta_labels, args.oct_labels]
            ccta = load_labels(args.ccta_labels, CCTA3)
            octl = load_labels(args.oct_labels)
            raw = octl if octl.taxonomy == OCT6 else None
            rep = metrics.agreement_report(ccta, map_to_ccta3(octl), raw)
            rep.save(out / "agreement")
            _write_json(out / "reference_kappa.json", metrics.reference_kappa_note())
    elif cmd == "pipeline":
        run_pipeline(cfg, out)
    write_manifest(out, cmd, cfg, inputs, seed, started)
    return 0


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return run(args)
    except ConfigError as exc:
        print(f"o2cta: invalid config: {exc}", file=sys.stderr)
        return 2
    except (O2CTAError, OSError) as exc:
        print(f"o2cta: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
