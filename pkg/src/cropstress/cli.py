"""Command-line interface.

Subcommands cover the whole pipeline: synth, extract, train, influence,
unlearn, retrain, evaluate, params. Settings resolve flag > config file >
default, the resolved configuration is echoed next to every run's outputs,
and all randomness derives from the single --seed. Exit codes: 0 success,
2 configuration/content error, 3 missing or unreadable files.
"""

import argparse
import json
import os
import sys

import numpy as np

from .data import (
    AugmentationConfig,
    DatasetManifest,
    ManifestRow,
    extract_windows,
    load_image_rgb,
    parse_annotation,
    parse_manifest,
    save_patch_png,
    synth_dataset,
    write_manifest,
)
from .errors import ConfigError, CropStressError, FormatError, ValidationError
from .evaluate import confusion, emit_report, metrics, predict_labels
from .model import ArchitectureConfig, build_model, count_parameters, expected_parameter_count
from .seeding import derive_seed
from .serialize import load_model, save_model
from .train import TrainConfig, train, write_trainlog_csv
from .unlearn import (
    parse_plan_json,
    parse_scores_csv,
    score_dataset,
    score_file_sha256,
    select_removal,
    unlearn_retrain,
    write_audit_json,
    write_plan_json,
    write_scores_csv,
)

MOBILENET_BASELINE_PARAMS = 3_500_000
REFERENCE_PARAM_CLAIM = 231_000  # published figure for this architecture


# -- config resolution -------------------------------------------------------------


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    with open(path, "r", encoding="utf-8") as fh:
        try:
            cfg = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: config root must be a JSON object")
    known = {"seed", "architecture", "train", "augment", "unlearn_fraction"}
    extra = set(cfg) - known
    if extra:
        raise ConfigError(f"{path}: unknown config sections {sorted(extra)}")
    return cfg


def _resolve_architecture(args, file_cfg: dict) -> ArchitectureConfig:
    arch = ArchitectureConfig.from_dict(file_cfg.get("architecture", {}))
    if getattr(args, "scale", None) is not None:
        arch.scale_factor = args.scale
    if getattr(args, "stem_filters", None) is not None:
        arch.stem_filters = args.stem_filters
    if getattr(args, "input_size", None) is not None:
        arch.input_size = (args.input_size, args.input_size)
    arch.validate()
    return arch


def _resolve_train(args, file_cfg: dict, seed: int) -> TrainConfig:
    tc = TrainConfig.from_dict(file_cfg.get("train", {}))
    if getattr(args, "epochs", None) is not None:
        tc.epochs = args.epochs
    if getattr(args, "batch_size", None) is not None:
        tc.batch_size = args.batch_size
    if getattr(args, "lr", None) is not None:
        tc.init_lr = args.lr
    tc.seed = seed
    tc.validate()
    return tc


def _resolve_augment(args, file_cfg: dict) -> AugmentationConfig | None:
    aug = AugmentationConfig.from_dict(file_cfg.get("augment", {}))
    aug.validate()
    if getattr(args, "no_augment", False):
        return aug.disabled()
    return aug


def _resolve_seed(args, file_cfg: dict) -> int:
    if getattr(args, "seed", None) is not None:
        return args.seed
    return int(file_cfg.get("seed", 0))


def _echo_config(out_dir, payload: dict) -> None:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "resolved-config.json")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(json.dumps(payload, sort_keys=True, indent=2) + "\n")


# -- subcommands ---------------------------------------------------------------------


def cmd_synth(args) -> int:
    file_cfg = _load_config_file(args.config)
    seed = _resolve_seed(args, file_cfg)
    manifest = synth_dataset(
        args.out_dir,
        n_train=args.n_train,
        n_test=args.n_test,
        image_size=args.size,
        class_balance=args.class_balance,
        seed=seed,
    )
    _echo_config(args.out_dir, {
        "command": "synth",
        "seed": seed,
        "n_train": args.n_train,
        "n_test": args.n_test,
        "size": args.size,
        "class_balance": args.class_balance,
    })
    print(f"wrote {len(manifest.rows)} samples under {args.out_dir}")
    return 0


def cmd_extract(args) -> int:
    xml_files = sorted(
        os.path.join(args.annotations, f)
        for f in os.listdir(args.annotations)
        if f.lower().endswith(".xml")
    )
    if not xml_files:
        raise ValidationError(f"no annotation XML files under {args.annotations}")
    os.makedirs(args.out_dir, exist_ok=True)
    patches_dir = os.path.join(args.out_dir, "patches")
    os.makedirs(patches_dir, exist_ok=True)

    rows = []
    manifest_path = os.path.join(args.out_dir, "manifest.csv")
    if args.append and os.path.exists(manifest_path):
        rows = parse_manifest(manifest_path).rows

    for xml_path in xml_files:
        ann = parse_annotation(xml_path)
        image_path = os.path.join(args.images, ann.source_image)
        if not os.path.exists(image_path):
            stem = os.path.splitext(os.path.basename(xml_path))[0]
            candidates = [
                os.path.join(args.images, stem + ext)
                for ext in (".png", ".jpg", ".jpeg", ".PNG", ".JPG", ".JPEG")
            ]
            image_path = next((c for c in candidates if os.path.exists(c)), image_path)
        image = load_image_rgb(image_path)
        for sample in extract_windows(ann, image, target_size=(args.target_size, args.target_size)):
            fname = sample.sample_id.replace("#", "_") + ".png"
            rel = os.path.join("patches", fname)
            save_patch_png(os.path.join(args.out_dir, rel), sample.patch)
            rows.append(ManifestRow(sample_id=sample.sample_id, path=rel, label=sample.label, split=args.split))

    write_manifest(DatasetManifest(rows=rows), manifest_path)
    print(f"extracted {len(rows)} window(s) into {args.out_dir}")
    return 0


def _run_training(args, retained_plan=None):
    file_cfg = _load_config_file(args.config)
    seed = _resolve_seed(args, file_cfg)
    arch = _resolve_architecture(args, file_cfg)
    tconf = _resolve_train(args, file_cfg, seed)
    aug = _resolve_augment(args, file_cfg)
    manifest = parse_manifest(args.manifest)

    if retained_plan is None:
        model = build_model(arch, seed=derive_seed(seed, "model-init"))
        model, log = train(model, manifest, args.manifest, aug, tconf, val_fraction=args.val_fraction)
        audit = None
    else:
        model, log, audit = unlearn_retrain(
            arch, manifest, args.manifest, retained_plan, aug, tconf, val_fraction=args.val_fraction
        )

    os.makedirs(args.out_dir, exist_ok=True)
    save_model(model, os.path.join(args.out_dir, "model.bin"))
    write_trainlog_csv(log, os.path.join(args.out_dir, "trainlog.csv"))
    if audit is not None:
        write_audit_json(audit, os.path.join(args.out_dir, "audit.json"))
    _echo_config(args.out_dir, {
        "command": "train" if retained_plan is None else "retrain",
        "seed": seed,
        "architecture": arch.to_dict(),
        "train": tconf.to_dict(),
        "augment": aug.to_dict(),
        "val_fraction": args.val_fraction,
    })
    return model, log, audit


def cmd_train(args) -> int:
    _, log, _ = _run_training(args)
    last = log.records[-1]
    val = f" val_acc={last.val_acc:.4f}" if last.val_acc is not None else ""
    print(f"trained {last.epoch} epoch(s): train_acc={last.train_acc:.4f}{val}; outputs in {args.out_dir}")
    return 0


def cmd_retrain(args) -> int:
    plan = parse_plan_json(args.plan)
    _, log, audit = _run_training(args, retained_plan=plan)
    last = log.records[-1]
    print(
        f"retrained on {audit['retained_count']} retained sample(s), "
        f"removed-id occurrences in batches: {audit['total_removed_seen']}; outputs in {args.out_dir}"
    )
    return 0


def cmd_influence(args) -> int:
    model = load_model(args.model)
    manifest = parse_manifest(args.manifest)
    records = score_dataset(
        model, manifest, args.manifest,
        grad_target=args.grad_target, split=args.split, workers=args.workers,
    )
    os.makedirs(os.path.dirname(os.path.abspath(args.out)) or ".", exist_ok=True)
    write_scores_csv(records, args.out)
    print(f"scored {len(records)} sample(s) -> {args.out}")
    return 0


def cmd_unlearn(args) -> int:
    records = parse_scores_csv(args.scores)
    manifest = parse_manifest(args.manifest)
    train_ids = {r.sample_id for r in manifest.split_rows("train")}
    score_ids = {r.sample_id for r in records}
    if not score_ids <= train_ids:
        raise ValidationError(
            f"scores reference ids outside the manifest train split: {sorted(score_ids - train_ids)[:5]}"
        )
    plan = select_removal(records, args.fraction, score_file_hash=score_file_sha256(args.scores))
    write_plan_json(plan, args.out)
    print(f"removal plan: {len(plan.removed_ids)} removed, {len(plan.retained_ids)} retained -> {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    model = load_model(args.model)
    manifest = parse_manifest(args.manifest)
    preds = predict_labels(model, manifest, args.manifest, split=args.split, workers=args.workers)
    rows = manifest.split_rows(args.split)
    cm = confusion([r.label for r in rows], [label for _, _, label in preds])
    report = metrics(cm, scenario=args.scenario)
    paths = emit_report(report, args.out_dir)
    print(
        f"{args.scenario or 'evaluation'}: acc={report.accuracy:.4f} "
        f"tp={cm.tp} fn={cm.fn} fp={cm.fp} tn={cm.tn} -> {paths['report']}"
    )
    return 0


def cmd_params(args) -> int:
    file_cfg = _load_config_file(args.config)
    arch = _resolve_architecture(args, file_cfg)
    model = build_model(arch, seed=0)
    trainable, frozen, rows = count_parameters(model)
    oracle = expected_parameter_count(arch)
    name_w = max(len(name) for name, _, _, _ in rows)
    print(f"{'tensor'.ljust(name_w)}  {'shape'.ljust(18)} {'params':>10}  trainable")
    for name, shape, count, is_trainable in rows:
        print(f"{name.ljust(name_w)}  {str(shape).ljust(18)} {count:>10}  {'yes' if is_trainable else 'no'}")
    print(f"trainable total:      {trainable}")
    print(f"non-trainable total:  {frozen}")
    print(f"closed-form total:    {oracle}")
    ratio = MOBILENET_BASELINE_PARAMS / trainable
    print(f"reference claim for this architecture: {REFERENCE_PARAM_CLAIM} (0.231M); measured: {trainable}")
    print(f"baseline 3.5M / measured = {ratio:.1f}x smaller")
    if trainable != oracle:
        raise ValidationError(f"store walk ({trainable}) disagrees with closed form ({oracle})")
    return 0


# -- wiring ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cropstress", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", default=None, help="JSON config file; flags override it")
        p.add_argument("--seed", type=int, default=None, help="root seed for all randomness")

    p = sub.add_parser("synth", help="generate the synthetic benchmark dataset")
    add_common(p)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--n-train", type=int, default=200)
    p.add_argument("--n-test", type=int, default=50)
    p.add_argument("--size", type=int, default=64, help="square patch edge in pixels")
    p.add_argument("--class-balance", type=float, default=0.5, help="stressed fraction per split")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("extract", help="cut annotated windows into training patches")
    p.add_argument("--images", required=True, help="directory of source images")
    p.add_argument("--annotations", required=True, help="directory of XML annotations")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--target-size", type=int, default=224)
    p.add_argument("--split", choices=["train", "test"], default="train")
    p.add_argument("--append", action="store_true", help="append to an existing manifest")
    p.set_defaults(fn=cmd_extract)

    def add_train_flags(p):
        add_common(p)
        p.add_argument("--manifest", required=True)
        p.add_argument("--out-dir", required=True)
        p.add_argument("--epochs", type=int, default=None)
        p.add_argument("--batch-size", type=int, default=None)
        p.add_argument("--lr", type=float, default=None)
        p.add_argument("--val-fraction", type=float, default=0.1)
        p.add_argument("--no-augment", action="store_true", help="train on rescaled patches only")
        p.add_argument("--scale", type=float, default=None, help="width scale factor")
        p.add_argument("--stem-filters", type=int, default=None)
        p.add_argument("--input-size", type=int, default=None)

    p = sub.add_parser("train", help="train a model on a manifest")
    add_train_flags(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("influence", help="score per-sample influence on a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="scores CSV path")
    p.add_argument("--grad-target", choices=["parameters", "input"], default="parameters")
    p.add_argument("--split", choices=["train", "test"], default="train")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(fn=cmd_influence)

    p = sub.add_parser("unlearn", help="select the lowest-influence samples for removal")
    p.add_argument("--scores", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--fraction", type=float, required=True)
    p.add_argument("--out", required=True, help="removal plan JSON path")
    p.set_defaults(fn=cmd_unlearn)

    p = sub.add_parser("retrain", help="retrain from scratch on a removal plan's retained set")
    add_train_flags(p)
    p.add_argument("--plan", required=True)
    p.set_defaults(fn=cmd_retrain)

    p = sub.add_parser("evaluate", help="confusion matrix and metrics on a split")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--split", choices=["train", "test"], default="test")
    p.add_argument("--scenario", default="", help="label recorded in the report")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("params", help="parameter count table and totals")
    p.add_argument("--config", default=None)
    p.add_argument("--scale", type=float, default=None)
    p.add_argument("--stem-filters", type=int, default=None)
    p.set_defaults(fn=cmd_params)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on bad usage, which matches the config-error code
        return int(exc.code or 0)
    try:
        return args.fn(args)
    except FileNotFoundError as exc:
        print(f"error: missing file or directory: {exc.filename or exc}", file=sys.stderr)
        return 3
    except IsADirectoryError as exc:
        print(f"error: expected a file: {exc}", file=sys.stderr)
        return 3
    except PermissionError as exc:
        print(f"error: permission denied: {exc}", file=sys.stderr)
        return 3
    except (ConfigError, ValidationError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except CropStressError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: I/O failure: {exc}", file=sys.stderr)
        return 3


def main_entry() -> None:
    sys.exit(main())
