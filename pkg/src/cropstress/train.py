"""Training loop: Adam, continuously decayed learning rate, clamped binary
cross-entropy, per-epoch metric logging.

The schedule is lr(step) = init_lr * decay_rate ** (step / decay_every),
evaluated at every optimizer step (not staircased), with decay_every
defaulting to twice the number of steps per epoch. Partial trailing batches
are dropped; batch norm runs in train mode for updates and in infer mode
for the validation pass.
"""

import csv
import io
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .data import (
    AugmentationConfig,
    DatasetManifest,
    augment,
    load_patch,
    rescale_only,
    resolve_patch_path,
    split_validation,
)
from .errors import ConfigError, NumericError, ValidationError
from .model import Model
from .seeding import derive_seed, derived_rng
from .tensor import Tensor

BCE_CLAMP = 1e-7


@dataclass
class TrainConfig:
    batch_size: int = 128
    epochs: int = 50
    init_lr: float = 1e-3
    decay_rate: float = 0.9
    decay_every: int | None = None  # None: resolved to 2 * steps_per_epoch
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-7
    seed: int = 0

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not (self.init_lr > 0):
            raise ConfigError("init_lr must be positive")
        if not (0 < self.decay_rate <= 1):
            raise ConfigError("decay_rate must lie in (0, 1]")
        if self.decay_every is not None and self.decay_every < 1:
            raise ConfigError("decay_every must be >= 1 when given")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")
        if not (self.epsilon > 0):
            raise ConfigError("epsilon must be positive")

    def to_dict(self) -> dict:
        return {
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "init_lr": self.init_lr,
            "decay_rate": self.decay_rate,
            "decay_every": self.decay_every,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "epsilon": self.epsilon,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        extra = set(d) - set(cls.__dataclass_fields__)
        if extra:
            raise ConfigError(f"unknown train config keys: {sorted(extra)}")
        return cls(**d)


def steps_per_epoch(num_samples: int, batch_size: int) -> int:
    """floor(num_samples / batch_size); 0 means no full batch fits."""
    if num_samples < 1 or batch_size < 1:
        raise ConfigError(f"need positive sample and batch counts, got {num_samples}/{batch_size}")
    return num_samples // batch_size


def lr_at(step: int, config: TrainConfig) -> float:
    """Learning rate in effect for optimizer step ``step`` (0-based)."""
    if config.decay_every is None:
        raise ConfigError("lr_at needs a resolved decay_every (train() resolves it from the dataset)")
    if step < 0:
        raise ConfigError(f"step must be >= 0, got {step}")
    return config.init_lr * config.decay_rate ** (step / config.decay_every)


# -- loss ---------------------------------------------------------------------------


def bce_loss(pred: Tensor, labels) -> Tensor:
    """Mean binary cross-entropy with predictions clamped to
    [1e-7, 1 - 1e-7]. Gradients are zero where the clamp is active."""
    y = np.asarray(labels, dtype=pred.dtype).reshape(pred.shape)
    if not np.all((y == 0) | (y == 1)):
        raise ValidationError("bce_loss labels must be exactly 0 or 1")
    lo = pred.dtype.type(BCE_CLAMP)
    hi = pred.dtype.type(1.0 - BCE_CLAMP)
    p = np.clip(pred.data, lo, hi)
    per = -(y * np.log(p) + (1.0 - y) * np.log1p(-p))
    val = np.asarray(per.mean(), dtype=pred.dtype)
    if not np.isfinite(val):
        raise NumericError("bce_loss produced a non-finite value")
    inside = (pred.data >= lo) & (pred.data <= hi)
    n = pred.size

    def backward(g):
        return (g * inside * (p - y) / (p * (1.0 - p)) / n,)

    out = Tensor(val)
    if pred.requires_grad:
        out.requires_grad = True
        out._parents = (pred,)
        out._backward = backward
        out._op = "bce_loss"
    return out


def accuracy(probs: np.ndarray, labels: np.ndarray, threshold: float = 0.5) -> float:
    """Fraction of samples where (prob > threshold) matches the label.
    The comparison is strict, so a probability exactly at the threshold
    counts as the healthy class."""
    probs = np.asarray(probs).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if probs.shape != labels.shape:
        raise ValidationError(f"probs and labels differ in length: {probs.shape} vs {labels.shape}")
    if probs.size == 0:
        raise ValidationError("accuracy of an empty batch")
    return float(np.mean((probs > threshold).astype(np.int64) == labels.astype(np.int64)))


# -- optimizer ------------------------------------------------------------------------


class AdamState:
    """Per-parameter first/second moment buffers plus the shared step count."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-7):
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.t = 0
        self.m = {}
        self.v = {}


def adam_step(params: list, grads: list, state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, in place on ``params``.

    ``params`` is a list of (name, Tensor); ``grads`` aligns with it. A zero
    gradient leaves the parameter exactly unchanged.
    """
    if len(params) != len(grads):
        raise ConfigError(f"{len(params)} params but {len(grads)} grads")
    state.t += 1
    b1, b2, eps = state.beta1, state.beta2, state.epsilon
    bias1 = 1.0 - b1 ** state.t
    bias2 = 1.0 - b2 ** state.t
    for (name, p), g in zip(params, grads):
        g = np.asarray(g, dtype=p.dtype)
        if g.shape != p.shape:
            raise ConfigError(f"gradient for {name!r} has shape {g.shape}, parameter is {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        mhat = m / bias1
        vhat = v / bias2
        p.data = p.data - (lr * mhat / (np.sqrt(vhat) + eps)).astype(p.dtype, copy=False)


# -- logging ---------------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float | None
    val_acc: float | None
    lr: float
    wall_ms: int


@dataclass
class TrainLog:
    records: list = field(default_factory=list)
    batch_ids: list | None = None  # per epoch, per step, the sample ids batched

TRAINLOG_COLUMNS = ["epoch", "train_loss", "train_acc", "val_loss", "val_acc", "lr", "wall_ms"]


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, int):
        return str(v)
    return format(float(v), ".17g")


def write_trainlog_csv(log: TrainLog, path) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(TRAINLOG_COLUMNS)
    for r in log.records:
        writer.writerow([
            r.epoch, _fmt(r.train_loss), _fmt(r.train_acc),
            _fmt(r.val_loss), _fmt(r.val_acc), _fmt(r.lr), r.wall_ms,
        ])
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(buf.getvalue())


# -- the loop ---------------------------------------------------------------------------


class _PatchCache:
    def __init__(self, manifest_path):
        self.manifest_path = manifest_path
        self._cache = {}

    def get(self, row) -> np.ndarray:
        patch = self._cache.get(row.sample_id)
        if patch is None:
            patch = load_patch(resolve_patch_path(self.manifest_path, row))
            self._cache[row.sample_id] = patch
        return patch


def _batched_infer_probs(model: Model, rows, cache: _PatchCache, rescale: float, batch_size: int):
    probs = []
    for start in range(0, len(rows), batch_size):
        chunk = rows[start:start + batch_size]
        xb = np.stack([rescale_only(cache.get(r), rescale) for r in chunk])
        out = model.forward(Tensor(xb, dtype=model.dtype), mode="infer")
        probs.append(out.data.reshape(-1))
    return np.concatenate(probs) if probs else np.zeros(0)


def train(
    model: Model,
    manifest: DatasetManifest,
    manifest_path,
    aug_config: AugmentationConfig | None,
    train_config: TrainConfig,
    val_fraction: float = 0.1,
    record_batches: bool = False,
) -> tuple:
    """Fit ``model`` on the manifest's train split. Returns (model, TrainLog).

    ``aug_config=None`` (or a config with all geometry zeroed) trains on
    rescaled patches only. ``val_fraction=0`` skips the validation carve-out
    and leaves the val columns empty.
    """
    train_config.validate()
    aug = aug_config if aug_config is not None else AugmentationConfig().disabled()
    aug.validate()
    seed = train_config.seed

    rows = manifest.split_rows("train")
    if not rows:
        raise ConfigError("manifest has no train rows")
    if val_fraction:
        train_rows, val_rows = split_validation(rows, val_fraction, derive_seed(seed, "valsplit"))
    else:
        train_rows, val_rows = list(rows), []

    spe = steps_per_epoch(len(train_rows), train_config.batch_size)
    if spe == 0:
        raise ConfigError(
            f"batch_size {train_config.batch_size} exceeds the {len(train_rows)} available training samples"
        )
    config = replace(train_config, decay_every=train_config.decay_every or 2 * spe)

    cache = _PatchCache(manifest_path)
    state = AdamState(config.beta1, config.beta2, config.epsilon)
    log = TrainLog(batch_ids=[] if record_batches else None)
    trainables = model.store.trainable_items()
    global_step = 0

    for epoch in range(1, config.epochs + 1):
        tick = time.perf_counter()
        order = derived_rng(seed, "shuffle", epoch).permutation(len(train_rows))
        epoch_batches = []
        losses = []
        hits = 0
        seen = 0
        for step in range(spe):
            batch_rows = [train_rows[i] for i in order[step * config.batch_size:(step + 1) * config.batch_size]]
            imgs = []
            for r in batch_rows:
                rng = derived_rng(seed, "aug", r.sample_id, epoch)
                imgs.append(augment(cache.get(r), aug, rng))
            xb = np.stack(imgs)
            yb = np.array([[r.label] for r in batch_rows], dtype=np.float64)

            model.zero_grad()
            try:
                pred = model.forward(Tensor(xb, dtype=model.dtype), mode="train")
                loss = bce_loss(pred, yb)
            except NumericError as exc:
                raise NumericError(f"non-finite value at epoch {epoch}, step {step}: {exc}") from exc
            value = loss.item()
            if not np.isfinite(value):
                raise NumericError(f"training loss became non-finite at epoch {epoch}, step {step}")
            loss.backward()
            grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for _, p in trainables]
            adam_step(trainables, grads, state, lr_at(global_step, config))
            global_step += 1

            losses.append(value)
            hits += int(np.sum((pred.data.reshape(-1) > 0.5) == (yb.reshape(-1) == 1)))
            seen += len(batch_rows)
            if record_batches:
                epoch_batches.append([r.sample_id for r in batch_rows])

        val_loss = val_acc = None
        if val_rows:
            probs = _batched_infer_probs(model, val_rows, cache, aug.rescale, config.batch_size)
            yv = np.array([r.label for r in val_rows], dtype=np.float64)
            val_loss = bce_loss(Tensor(probs.reshape(-1, 1)), yv.reshape(-1, 1)).item()
            val_acc = accuracy(probs, yv)

        wall_ms = int(round((time.perf_counter() - tick) * 1000))
        log.records.append(EpochRecord(
            epoch=epoch,
            train_loss=float(np.mean(losses)),
            train_acc=hits / seen,
            val_loss=val_loss,
            val_acc=val_acc,
            lr=lr_at(global_step, config),
            wall_ms=wall_ms,
        ))
        if record_batches:
            log.batch_ids.append(epoch_batches)

    return model, log
