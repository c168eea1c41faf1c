"""Sequence classifier: a shallow 3D CNN embeds each window, a Transformer
encoder mixes information along the vessel, and a linear head labels every
position.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import metrics
from .errors import (
    DivergenceDetected,
    EmptySequence,
    IncompatibleCheckpoint,
    InvalidValue,
    ShapeError,
)
from .nn import functional as F
from .nn.checkpoint import load_checkpoint, save_checkpoint
from .nn.layers import Conv3d, EncoderLayer, LayerNorm, Linear, Module
from .nn.optim import AdamState, adam_step, cosine_lr
from .nn.tensor import Tensor, backward, relu

TRANSFORMER = "cnn_transformer"
CNN_ONLY = "cnn_only"


@dataclass(frozen=True)
class ModelConfig:
    n: int = 12
    d: int = 21
    d_model: int = 64
    heads: int = 4
    encoder_layers: int = 2
    cnn_channels: tuple = (8, 16)
    classes: int = 6
    dropout: float = 0.1
    d_ff: int = 128
    positional_encoding: bool = True
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "cnn_channels", tuple(int(c) for c in self.cnn_channels))
        if self.d_model % self.heads:
            raise InvalidValue(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if self.classes < 2:
            raise InvalidValue("need at least two classes")
        if min(self.n, self.d) < 1 or not self.cnn_channels:
            raise InvalidValue("window shape and channel list must be non-empty")
        if not 0.0 <= self.dropout < 1.0:
            raise InvalidValue(f"dropout must be in [0, 1), got {self.dropout}")
        z, y, _ = self.feature_grid()
        if min(z, y) < 1:
            raise InvalidValue(f"window {self.n}x{self.d}x{self.d} too small for {len(self.cnn_channels)} pooling stages")

    def feature_grid(self):
        z, y = self.n, self.d
        for _ in self.cnn_channels:
            z, y = z // 2, y // 2
        return z, y, y

    def to_dict(self):
        d = asdict(self)
        d["cnn_channels"] = list(self.cnn_channels)
        return d

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass(frozen=True)
class TrainConfig:
    """Defaults are desk-scale; :meth:`full_protocol` gives the 2000-epoch setting."""

    epochs: int = 200
    batch_sequences: int = 8
    lr_peak: float = 1e-3
    lr_floor: float = 1e-6
    folds: int = 5
    seed: int = 0
    eval_every: int = 10

    def __post_init__(self):
        if self.epochs < 1 or self.batch_sequences < 1 or self.eval_every < 1:
            raise InvalidValue("epochs, batch_sequences and eval_every must be >= 1")
        if not (self.lr_peak > 0 and self.lr_floor >= 0):
            raise InvalidValue("learning rates must be positive")

    @classmethod
    def full_protocol(cls, literal_lr=False, **kw):
        base = dict(epochs=2000, batch_sequences=8, folds=5, lr_floor=1e-6)
        if literal_lr:
            base["lr_peak"] = 1e-6
        base.update(kw)
        return cls(**base)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


class O2CTANet(Module):
    def __init__(self, config, kind=TRANSFORMER):
        if kind not in (TRANSFORMER, CNN_ONLY):
            raise InvalidValue(f"unknown model kind {kind!r}")
        self.config = config
        self.kind = kind
        rng = np.random.default_rng(config.seed)
        chans = (1,) + config.cnn_channels
        self.convs = [Conv3d(a, b, rng) for a, b in zip(chans, chans[1:])]
        z, y, x = config.feature_grid()
        self.embed = Linear(z * y * x * chans[-1], config.d_model, rng)
        if kind == TRANSFORMER:
            self.encoder = [
                EncoderLayer(config.d_model, config.heads, config.d_ff, config.dropout, np.random.default_rng([config.seed, i + 1]))
                for i in range(config.encoder_layers)
            ]
            self.final_norm = LayerNorm(config.d_model)
        self.head = Linear(config.d_model, config.classes, rng)

    # phi ------------------------------------------------------------------
    def embed_windows(self, windows):
        """``(M, N, D, D)`` array -> ``(M, d_model)`` features."""
        windows = np.asarray(windows, dtype=np.float64)
        c = self.config
        if windows.ndim != 4 or windows.shape[1:] != (c.n, c.d, c.d):
            raise ShapeError(f"phi: expected windows (M, {c.n}, {c.d}, {c.d}), got {windows.shape}")
        h = Tensor(windows[..., None])
        for conv in self.convs:
            h = F.maxpool3d(relu(conv(h)))
        return self.embed(h.reshape(h.shape[0], -1))

    def phi_forward(self, batch):
        """``(B, L, N, D, D)`` -> ``(B, L, d_model)``."""
        batch = np.asarray(batch, dtype=np.float64)
        if batch.ndim != 5:
            raise ShapeError(f"phi: expected (B, L, N, D, D), got {batch.shape}")
        b, l = batch.shape[:2]
        return self.embed_windows(batch.reshape(b * l, *batch.shape[2:])).reshape(b, l, -1)

    # sigma ----------------------------------------------------------------
    def sigma_forward(self, features, mask):
        """``(B, L, d_model)`` features and ``(B, L)`` validity mask -> logits."""
        mask = np.asarray(mask, dtype=bool)
        if features.ndim != 3 or features.shape[:2] != mask.shape or features.shape[2] != self.config.d_model:
            raise ShapeError(f"sigma: features {features.shape} with mask {mask.shape}")
        if not mask.any(axis=1).all():
            raise EmptySequence("a sequence in the batch has no valid positions")
        x = features
        if self.kind == TRANSFORMER:
            if self.config.positional_encoding:
                x = x + F.positional_encoding(mask.shape[1], self.config.d_model)
            bias = F.key_padding_bias(mask)
            for layer in self.encoder:
                x = layer(x, bias)
            x = self.final_norm(x)
        return self.head(x)

    def forward(self, volumes, mask):
        """Logits ``(B, L, C)``; padded windows are never embedded."""
        volumes = np.asarray(volumes)
        mask = np.asarray(mask, dtype=bool)
        if volumes.ndim != 5 or volumes.shape[:2] != mask.shape:
            raise ShapeError(f"forward: volumes {volumes.shape} with mask {mask.shape}")
        if not mask.any(axis=1).all():
            raise EmptySequence("a sequence in the batch has no valid positions")
        b, l = mask.shape
        idx = np.flatnonzero(mask.ravel())
        feats = self.embed_windows(volumes.reshape(b * l, *volumes.shape[2:])[idx])
        x = F.scatter_rows(feats, idx, b * l).reshape(b, l, self.config.d_model)
        return self.sigma_forward(x, mask)

    def state(self):
        return [(name, p.data.copy()) for name, p in self.named_parameters()]

    def load_state(self, arrays):
        params = dict(self.named_parameters())
        if set(params) != set(arrays):
            raise IncompatibleCheckpoint("checkpoint parameter names do not match the model")
        for name, p in params.items():
            if p.data.shape != arrays[name].shape:
                raise IncompatibleCheckpoint(f"{name}: shape {arrays[name].shape} != {p.data.shape}")
            p.data = np.array(arrays[name], dtype=np.float64)


def ce_loss(logits, labels, mask):
    return F.cross_entropy(logits, labels, mask)


def collate(seqs):
    """Pad a list of :class:`SampleSeq` to the longest; returns volumes, labels, mask."""
    n, d = seqs[0].n, seqs[0].d
    longest = max(len(s) for s in seqs)
    vols = np.zeros((len(seqs), longest, n, d, d), dtype=np.float64)
    labels = np.zeros((len(seqs), longest), dtype=np.int64)
    mask = np.zeros((len(seqs), longest), dtype=bool)
    for i, s in enumerate(seqs):
        if (s.n, s.d) != (n, d):
            raise ShapeError(f"sequence {s.patient_id} has window {s.n}x{s.d}, batch uses {n}x{d}")
        vols[i, : len(s)] = s.volumes
        labels[i, : len(s)] = s.labels
        mask[i, : len(s)] = True
    return vols, labels, mask


def _forward_chunks(model, seqs, batch_size):
    for start in range(0, len(seqs), batch_size):
        chunk = seqs[start:start + batch_size]
        vols, labels, mask = collate(chunk)
        yield chunk, model(vols, mask), labels, mask


def _probabilities(model, seqs, batch_size):
    out = []
    for chunk, logits, _, _ in _forward_chunks(model, seqs, batch_size):
        probs = np.exp(F.log_softmax_np(logits.data))
        out.extend(probs[i, : len(s)] for i, s in enumerate(chunk))
    return out


def evaluate(model, seqs, batch_size=8):
    """Pooled per-window metrics over ``seqs`` (model in eval mode)."""
    was_training = model.training
    model.eval()
    probs, loss_sum = [], 0.0
    for chunk, logits, labels, mask in _forward_chunks(model, seqs, batch_size):
        loss_sum += float(ce_loss(logits, labels, mask).data) * mask.sum()
        p = np.exp(F.log_softmax_np(logits.data))
        probs.extend(p[i, : len(s)] for i, s in enumerate(chunk))
    model.train(was_training)
    p = np.concatenate(probs)
    y = np.concatenate([s.labels for s in seqs])
    per_class, mean_auc = metrics.auc_table(p, y, model.config.classes)
    return {
        "loss": loss_sum / y.size,
        "acc": metrics.accuracy(p.argmax(axis=1), y),
        "mean_auc": mean_auc,
        "auc": per_class,
        "probs": probs,
    }


@dataclass
class TrainResult:
    model: O2CTANet
    history: list = field(default_factory=list)

    def save(self, stem, extra=None):
        meta = {
            "model_kind": self.model.kind,
            "model_config": self.model.config.to_dict(),
            "seed": self.model.config.seed,
        }
        if extra:
            meta.update(extra)
        path = save_checkpoint(stem, self.model.state(), meta)
        save_history(self.history, Path(stem).with_name(Path(stem).name + "_history.csv"))
        return path


HISTORY_COLUMNS = ("epoch", "lr", "train_loss", "val_loss", "val_acc", "val_mean_auc")


def save_history(history, path):
    lines = [",".join(HISTORY_COLUMNS)]
    for row in history:
        lines.append(",".join("" if row.get(c) is None else repr(row[c]) for c in HISTORY_COLUMNS))
    Path(path).write_text("\n".join(lines) + "\n")


def train_fold(train, val, mc, tc, kind=TRANSFORMER, progress=None):
    """Train one fold from a seeded initialization; deterministic given the seeds."""
    if not train:
        raise InvalidValue("empty training set")
    train_ids = {s.patient_id for s in train}
    if val and train_ids & {s.patient_id for s in val}:
        raise InvalidValue("training and validation patients overlap")
    for s in train:
        if (s.n, s.d) != (mc.n, mc.d):
            raise ShapeError(f"sequence {s.patient_id} window {s.n}x{s.d} != config {mc.n}x{mc.d}")
    model = O2CTANet(mc, kind)
    params = model.parameters()
    state = AdamState.for_params(params)
    order_rng = np.random.default_rng([tc.seed, 7919])
    result = TrainResult(model)
    with threadpool_limits(1):
        for epoch in range(tc.epochs):
            lr = cosine_lr(epoch, tc.epochs, tc.lr_peak, tc.lr_floor)
            model.train()
            snapshot = model.state()
            order = order_rng.permutation(len(train))
            total, count = 0.0, 0
            for start in range(0, len(order), tc.batch_sequences):
                batch = [train[i] for i in order[start:start + tc.batch_sequences]]
                vols, labels, mask = collate(batch)
                model.zero_grad()
                loss = ce_loss(model(vols, mask), labels, mask)
                if not np.isfinite(loss.data):
                    model.load_state(dict(snapshot))
                    raise DivergenceDetected(f"non-finite loss at epoch {epoch}", checkpoint=snapshot)
                backward(loss)
                adam_step(params, [p.grad for p in params], state, lr)
                n_valid = int(mask.sum())
                total += float(loss.data) * n_valid
                count += n_valid
            row = {"epoch": epoch, "lr": lr, "train_loss": total / count}
            if val and ((epoch + 1) % tc.eval_every == 0 or epoch == tc.epochs - 1):
                ev = evaluate(model, val, tc.batch_sequences)
                row.update(val_loss=ev["loss"], val_acc=ev["acc"], val_mean_auc=ev["mean_auc"])
            result.history.append(row)
            if progress:
                progress(row)
    model.eval()
    return result


def baseline_cnn_only(train, val, mc, tc, progress=None):
    """Same protocol with the Transformer replaced by a per-window linear head."""
    return train_fold(train, val, mc, tc, kind=CNN_ONLY, progress=progress)


def load_model(manifest_path):
    manifest, arrays = load_checkpoint(manifest_path)
    try:
        config = ModelConfig.from_dict(manifest["model_config"])
        kind = manifest["model_kind"]
    except (KeyError, TypeError, InvalidValue) as exc:
        raise IncompatibleCheckpoint(f"{manifest_path}: bad model metadata ({exc})") from None
    model = O2CTANet(config, kind)
    model.load_state(arrays)
    return model.eval()


def predict(checkpoint, sequences, batch_size=8):
    """Per-position class probabilities for each sequence, padding stripped."""
    model = checkpoint if isinstance(checkpoint, O2CTANet) else load_model(checkpoint)
    c = model.config
    for s in sequences:
        if (s.n, s.d) != (c.n, c.d):
            raise IncompatibleCheckpoint(f"checkpoint expects {c.n}x{c.d} windows, got {s.n}x{s.d}")
    was_training = model.training
    model.eval()
    try:
        return _probabilities(model, sequences, batch_size)
    finally:
        model.train(was_training)
