"""Influence scoring and removal-based unlearning.

A sample's influence is the L2 norm of the loss gradient that single sample
induces on the trained model (by default with respect to every trainable
parameter, flattened in store order; optionally with respect to the input
pixels). Lowest-influence samples are dropped, and the model is retrained
from a fresh seeded initialization on what remains; an audit record proves
the removed ids never entered a retraining batch.
"""

import hashlib
import json
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .data import AugmentationConfig, DatasetManifest, load_patch, rescale_only, resolve_patch_path
from .errors import ConfigError, NumericError, UninitializedStatisticsError, ValidationError
from .model import ArchitectureConfig, Model, build_model
from .seeding import derive_seed
from .tensor import Tensor
from .train import TrainConfig, bce_loss, train

GRAD_TARGETS = ("parameters", "input")


@dataclass
class InfluenceRecord:
    sample_id: str
    label: int
    score: float


@dataclass
class RemovalPlan:
    fraction: float
    removed_ids: list
    retained_ids: list
    score_file_hash: str | None = None


# -- gradients -----------------------------------------------------------------


def flat_loss_gradient(predict_fn, wrt: list, x, label) -> np.ndarray:
    """Gradient of the single-sample BCE loss, flattened and concatenated
    over ``wrt`` in order.

    ``predict_fn`` maps the input tensor to the probability tensor. Grads on
    ``wrt`` are zeroed first and read right after backward, so earlier
    backward passes can never bleed into the result.
    """
    for t in wrt:
        t.zero_grad()
    pred = predict_fn(x)
    loss = bce_loss(pred, np.full(pred.shape, float(label)))
    loss.backward()
    pieces = []
    for t in wrt:
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        pieces.append(np.asarray(g).reshape(-1))
    return np.concatenate(pieces) if pieces else np.zeros(0)


def sample_gradient(model: Model, patch: np.ndarray, label: int, grad_target: str = "parameters") -> np.ndarray:
    """Per-sample loss gradient on a trained model.

    The model runs in infer mode (batch norm uses its running statistics),
    the patch is preprocessed by rescale only, and the result is the
    flattened gradient for ``grad_target``. The model's parameters are not
    changed; only their grad buffers are touched.
    """
    if grad_target not in GRAD_TARGETS:
        raise ConfigError(f"grad_target must be one of {GRAD_TARGETS}, got {grad_target!r}")
    if label not in (0, 1):
        raise ValidationError(f"label must be 0 or 1, got {label!r}")
    if model.num_updates < 1:
        raise UninitializedStatisticsError(
            "sample_gradient needs a fitted model: batch norm running statistics were never populated"
        )
    x01 = rescale_only(patch)
    xt = Tensor(x01[None, ...], dtype=model.dtype)
    if grad_target == "input":
        xt.requires_grad = True
        wrt = [xt]
    else:
        wrt = [t for _name, t in model.store.trainable_items()]
    model.zero_grad()
    grad = flat_loss_gradient(lambda x: model.forward(x, mode="infer"), wrt, xt, label)
    if not np.all(np.isfinite(grad)):
        raise NumericError("sample gradient is non-finite")
    return grad


def influence_score(grad: np.ndarray) -> float:
    """Euclidean norm of a flattened gradient, accumulated in float64."""
    v = np.asarray(grad, dtype=np.float64).reshape(-1)
    return float(np.sqrt(v @ v))


# -- dataset scoring -----------------------------------------------------------


def _score_chunk(model: Model, rows, manifest_path, grad_target):
    records = []
    failures = []
    for row in rows:
        try:
            patch = load_patch(resolve_patch_path(manifest_path, row))
            grad = sample_gradient(model, patch, row.label, grad_target)
            records.append(InfluenceRecord(sample_id=row.sample_id, label=row.label, score=influence_score(grad)))
        except Exception as exc:  # collected, reported, then the run aborts
            failures.append((row.sample_id, exc))
    return records, failures


def score_dataset(
    model: Model,
    manifest: DatasetManifest,
    manifest_path,
    grad_target: str = "parameters",
    split: str = "train",
    workers: int = 1,
) -> list:
    """Influence scores for every manifest row of ``split``, in manifest order.

    ``workers > 1`` scores contiguous chunks on cloned models in parallel;
    results are reassembled in order and are identical to a serial run.
    """
    if grad_target not in GRAD_TARGETS:
        raise ConfigError(f"grad_target must be one of {GRAD_TARGETS}, got {grad_target!r}")
    if workers < 1:
        raise ConfigError(f"workers must be >= 1, got {workers}")
    rows = manifest.split_rows(split)
    if not rows:
        raise ValidationError(f"manifest has no rows with split {split!r}")

    if workers == 1 or len(rows) < 2 * workers:
        records, failures = _score_chunk(model, rows, manifest_path, grad_target)
    else:
        bounds = np.linspace(0, len(rows), workers + 1).astype(int)
        chunks = [rows[bounds[i]:bounds[i + 1]] for i in range(workers)]
        clones = [model] + [model.clone() for _ in range(workers - 1)]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [
                pool.submit(_score_chunk, clones[i], chunks[i], manifest_path, grad_target)
                for i in range(workers)
            ]
            parts = [f.result() for f in futures]
        records = [rec for part, _ in parts for rec in part]
        failures = [fail for _, fails in parts for fail in fails]

    if failures:
        detail = "; ".join(f"{sid}: {exc}" for sid, exc in failures[:5])
        raise NumericError(f"influence scoring failed for {len(failures)} sample(s): {detail}")
    return records


# -- removal selection -----------------------------------------------------------


def select_removal(records: list, fraction: float, score_file_hash: str | None = None) -> RemovalPlan:
    """Mark the floor(fraction * N) lowest-influence samples for removal.

    Ordering is by (score, sample_id) ascending, so ties resolve by id and
    the removal set grows monotonically with the fraction. ``retained_ids``
    preserves the original record order.
    """
    if not (0.0 < fraction < 1.0):
        raise ConfigError(f"removal fraction must lie in (0, 1), got {fraction}")
    if not records:
        raise ValidationError("no influence records to select from")
    ids = [r.sample_id for r in records]
    if len(set(ids)) != len(ids):
        raise ValidationError("duplicate sample ids in influence records")
    n_remove = math.floor(fraction * len(records))
    if n_remove == 0:
        warnings.warn(f"fraction {fraction} of {len(records)} samples removes nothing", stacklevel=2)
    ranked = sorted(records, key=lambda r: (r.score, r.sample_id))
    removed = [r.sample_id for r in ranked[:n_remove]]
    removed_set = set(removed)
    retained = [r.sample_id for r in records if r.sample_id not in removed_set]
    return RemovalPlan(
        fraction=fraction,
        removed_ids=removed,
        retained_ids=retained,
        score_file_hash=score_file_hash,
    )


# -- plan / scores serialization ---------------------------------------------------


def write_scores_csv(records: list, path) -> None:
    lines = ["sample_id,label,score"]
    for r in records:
        lines.append(f"{r.sample_id},{r.label},{format(r.score, '.17g')}")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("\n".join(lines) + "\n")


def parse_scores_csv(path) -> list:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != "sample_id,label,score":
        raise ValidationError(f"{path}: bad scores header")
    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        if len(parts) != 3:
            raise ValidationError(f"{path}:{lineno}: expected 3 fields")
        sid, label, score = parts
        if label not in ("0", "1"):
            raise ValidationError(f"{path}:{lineno}: label must be 0 or 1")
        records.append(InfluenceRecord(sample_id=sid, label=int(label), score=float(score)))
    return records


def score_file_sha256(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def write_plan_json(plan: RemovalPlan, path) -> None:
    payload = {
        "fraction": plan.fraction,
        "removed_ids": list(plan.removed_ids),
        "retained_ids": list(plan.retained_ids),
        "score_file_hash": plan.score_file_hash,
    }
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def parse_plan_json(path) -> RemovalPlan:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    try:
        return RemovalPlan(
            fraction=float(payload["fraction"]),
            removed_ids=[str(s) for s in payload["removed_ids"]],
            retained_ids=[str(s) for s in payload["retained_ids"]],
            score_file_hash=payload.get("score_file_hash"),
        )
    except KeyError as exc:
        raise ValidationError(f"{path}: removal plan is missing {exc}") from exc


# -- retraining ---------------------------------------------------------------------


def unlearn_retrain(
    model_config: ArchitectureConfig,
    manifest: DatasetManifest,
    manifest_path,
    plan: RemovalPlan,
    aug_config: AugmentationConfig | None,
    train_config: TrainConfig,
    val_fraction: float = 0.1,
) -> tuple:
    """Retrain from scratch on the retained training rows.

    Returns (model, TrainLog, audit). The fresh model is seeded by the same
    derivation a plain training run uses, so an empty removal plan
    reproduces it exactly. The audit dict counts, per epoch, how many
    batched sample ids belonged to the removal set; any number other than
    zero is a violation.
    """
    train_rows = manifest.split_rows("train")
    train_ids = {r.sample_id for r in train_rows}
    plan_ids = set(plan.removed_ids) | set(plan.retained_ids)
    unknown = plan_ids - train_ids
    if unknown:
        raise ConfigError(f"removal plan references ids not in the manifest train split: {sorted(unknown)[:5]}")
    if set(plan.removed_ids) & set(plan.retained_ids):
        raise ConfigError("removal plan has ids in both removed and retained sets")
    if plan_ids != train_ids:
        missing = sorted(train_ids - plan_ids)
        raise ConfigError(f"removal plan does not cover the manifest train split, missing: {missing[:5]}")

    removed = set(plan.removed_ids)
    reduced_rows = [r for r in manifest.rows if not (r.split == "train" and r.sample_id in removed)]
    reduced = DatasetManifest(rows=reduced_rows, seed=manifest.seed)

    model = build_model(model_config, seed=derive_seed(train_config.seed, "model-init"))
    model, log = train(
        model, reduced, manifest_path, aug_config, train_config,
        val_fraction=val_fraction, record_batches=True,
    )

    epochs_audit = []
    violations = 0
    for epoch_index, batches in enumerate(log.batch_ids, start=1):
        seen = [sid for batch in batches for sid in batch]
        bad = sum(1 for sid in seen if sid in removed)
        violations += bad
        epochs_audit.append({
            "epoch": epoch_index,
            "batches": len(batches),
            "samples_batched": len(seen),
            "removed_seen": bad,
        })
    audit = {
        "removed_ids": list(plan.removed_ids),
        "retained_count": len(plan.retained_ids),
        "epochs": epochs_audit,
        "total_removed_seen": violations,
    }
    return model, log, audit


def write_audit_json(audit: dict, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(json.dumps(audit, sort_keys=True, indent=2) + "\n")
