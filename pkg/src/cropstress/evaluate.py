"""Confusion-matrix evaluation and report emission.

The stressed class (label 1) is the positive class everywhere. Degenerate
ratios (zero denominators) evaluate to 0.0 and are flagged in the report
rather than raising.
"""

import csv
import io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .data import DatasetManifest, load_patch, rescale_only, resolve_patch_path
from .errors import ConfigError, ValidationError
from .model import Model
from .tensor import Tensor


@dataclass
class ConfusionMatrix:
    tp: int  # stressed predicted stressed
    fn: int  # stressed predicted healthy
    fp: int  # healthy predicted stressed
    tn: int  # healthy predicted healthy

    def validate(self) -> None:
        for name in ("tp", "fn", "fp", "tn"):
            if getattr(self, name) < 0:
                raise ValidationError(f"confusion count {name} is negative")

    @property
    def total(self) -> int:
        return self.tp + self.fn + self.fp + self.tn


@dataclass
class MetricsReport:
    scenario: str
    counts: ConfusionMatrix
    accuracy: float
    stressed: dict
    healthy: dict
    flags: list = field(default_factory=list)


def predict_labels(
    model: Model,
    manifest: DatasetManifest,
    manifest_path,
    split: str = "test",
    batch_size: int = 64,
    threshold: float = 0.5,
    workers: int = 1,
) -> list:
    """(sample_id, probability, predicted_label) per row of ``split``.

    Inference-mode preprocessing is rescale only. The threshold comparison
    is strict, so a probability of exactly 0.5 predicts healthy. Parallel
    batches reproduce the serial label vector exactly.
    """
    if workers < 1:
        raise ConfigError(f"workers must be >= 1, got {workers}")
    rows = manifest.split_rows(split)
    if not rows:
        raise ValidationError(f"manifest has no rows with split {split!r}")
    batches = [rows[i:i + batch_size] for i in range(0, len(rows), batch_size)]

    def run(chunk):
        xb = np.stack([rescale_only(load_patch(resolve_patch_path(manifest_path, r))) for r in chunk])
        out = model.forward(Tensor(xb, dtype=model.dtype), mode="infer")
        return out.data.reshape(-1)

    if workers == 1 or len(batches) == 1:
        probs = [run(chunk) for chunk in batches]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            probs = list(pool.map(run, batches))
    flat = np.concatenate(probs)
    return [
        (row.sample_id, float(p), int(p > threshold))
        for row, p in zip(rows, flat)
    ]


def confusion(y_true, y_pred) -> ConfusionMatrix:
    t = np.asarray(y_true).reshape(-1).astype(np.int64)
    p = np.asarray(y_pred).reshape(-1).astype(np.int64)
    if t.shape != p.shape:
        raise ValidationError(f"length mismatch: {t.shape} true vs {p.shape} predicted")
    if t.size == 0:
        raise ValidationError("empty evaluation set")
    bad = set(np.unique(np.concatenate([t, p]))) - {0, 1}
    if bad:
        raise ValidationError(f"labels must be 0/1, found {sorted(bad)}")
    return ConfusionMatrix(
        tp=int(np.sum((t == 1) & (p == 1))),
        fn=int(np.sum((t == 1) & (p == 0))),
        fp=int(np.sum((t == 0) & (p == 1))),
        tn=int(np.sum((t == 0) & (p == 0))),
    )


def _ratio(num: int, den: int, name: str, flags: list) -> float:
    if den == 0:
        flags.append(f"degenerate:{name}")
        return 0.0
    return num / den


def metrics(cm: ConfusionMatrix, scenario: str = "") -> MetricsReport:
    """Accuracy plus per-class precision/recall/F1 with stressed positive."""
    cm.validate()
    if cm.total == 0:
        raise ValidationError("confusion matrix is empty")
    flags: list = []

    prec_s = _ratio(cm.tp, cm.tp + cm.fp, "precision_stressed", flags)
    rec_s = _ratio(cm.tp, cm.tp + cm.fn, "recall_stressed", flags)
    prec_h = _ratio(cm.tn, cm.tn + cm.fn, "precision_healthy", flags)
    rec_h = _ratio(cm.tn, cm.tn + cm.fp, "recall_healthy", flags)

    def f1(p, r, name):
        if p + r == 0:
            flags.append(f"degenerate:{name}")
            return 0.0
        return 2 * p * r / (p + r)

    return MetricsReport(
        scenario=scenario,
        counts=cm,
        accuracy=(cm.tp + cm.tn) / cm.total,
        stressed={"precision": prec_s, "recall": rec_s, "f1": f1(prec_s, rec_s, "f1_stressed"), "support": cm.tp + cm.fn},
        healthy={"precision": prec_h, "recall": rec_h, "f1": f1(prec_h, rec_h, "f1_healthy"), "support": cm.tn + cm.fp},
        flags=flags,
    )


# -- emission -------------------------------------------------------------------


def report_to_dict(report: MetricsReport) -> dict:
    return {
        "scenario": report.scenario,
        "counts": {"tp": report.counts.tp, "fn": report.counts.fn, "fp": report.counts.fp, "tn": report.counts.tn},
        "metrics": {
            "accuracy": report.accuracy,
            "stressed": dict(report.stressed),
            "healthy": dict(report.healthy),
        },
        "flags": list(report.flags),
    }


def report_from_dict(d: dict) -> MetricsReport:
    cm = ConfusionMatrix(**{k: int(v) for k, v in d["counts"].items()})
    return MetricsReport(
        scenario=d["scenario"],
        counts=cm,
        accuracy=float(d["metrics"]["accuracy"]),
        stressed=dict(d["metrics"]["stressed"]),
        healthy=dict(d["metrics"]["healthy"]),
        flags=list(d["flags"]),
    )


def write_confusion_csv(cm: ConfusionMatrix, path) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["", "pred_healthy", "pred_stressed"])
    writer.writerow(["true_healthy", cm.tn, cm.fp])
    writer.writerow(["true_stressed", cm.fn, cm.tp])
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(buf.getvalue())


def render_curves_svg(records: list) -> str:
    """Minimal deterministic SVG line rendering of a training log: loss on
    the left panel, accuracy on the right, train solid and validation dashed."""
    width, height, pad = 840, 320, 42
    panel_w = (width - 3 * pad) / 2

    def polyline(xs, ys, x0, color, dash=""):
        pts = " ".join(f"{x0 + x:.2f},{y:.2f}" for x, y in zip(xs, ys))
        extra = f' stroke-dasharray="{dash}"' if dash else ""
        return f'<polyline fill="none" stroke="{color}" stroke-width="1.5"{extra} points="{pts}"/>'

    def series(values, lo, hi):
        n = len(values)
        xs = [panel_w * (i / max(n - 1, 1)) for i in range(n)]
        span = (hi - lo) or 1.0
        ys = [height - pad - (height - 2 * pad) * ((v - lo) / span) for v in values]
        return xs, ys

    train_loss = [r.train_loss for r in records]
    val_loss = [r.val_loss for r in records if r.val_loss is not None]
    train_acc = [r.train_acc for r in records]
    val_acc = [r.val_acc for r in records if r.val_acc is not None]

    loss_all = train_loss + val_loss
    lo_l, hi_l = min(loss_all), max(loss_all)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{pad}" y="{pad - 14}" font-family="monospace" font-size="13">loss per epoch</text>',
        f'<text x="{2 * pad + panel_w:.0f}" y="{pad - 14}" font-family="monospace" font-size="13">accuracy per epoch</text>',
    ]
    xs, ys = series(train_loss, lo_l, hi_l)
    parts.append(polyline(xs, ys, pad, "#c0392b"))
    if val_loss:
        xs, ys = series(val_loss, lo_l, hi_l)
        parts.append(polyline(xs, ys, pad, "#2980b9", dash="4 3"))
    xs, ys = series(train_acc, 0.0, 1.0)
    parts.append(polyline(xs, ys, 2 * pad + panel_w, "#c0392b"))
    if val_acc:
        xs, ys = series(val_acc, 0.0, 1.0)
        parts.append(polyline(xs, ys, 2 * pad + panel_w, "#2980b9", dash="4 3"))
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def emit_report(report: MetricsReport, out_dir, trainlog_records: list | None = None) -> dict:
    """Write report.json and confusion.csv (and curves.svg when a training
    log is supplied) into ``out_dir``. Returns {artifact: path}."""
    import os

    os.makedirs(out_dir, exist_ok=True)
    paths = {}
    report_path = os.path.join(out_dir, "report.json")
    with open(report_path, "w", encoding="utf-8", newline="") as fh:
        fh.write(json.dumps(report_to_dict(report), sort_keys=True, indent=2) + "\n")
    paths["report"] = report_path

    cm_path = os.path.join(out_dir, "confusion.csv")
    write_confusion_csv(report.counts, cm_path)
    paths["confusion"] = cm_path

    if trainlog_records:
        svg_path = os.path.join(out_dir, "curves.svg")
        with open(svg_path, "w", encoding="utf-8", newline="") as fh:
            fh.write(render_curves_svg(trainlog_records))
        paths["curves"] = svg_path
    return paths
