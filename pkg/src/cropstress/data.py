"""Data pipeline: annotation parsing, window extraction, augmentation,
the synthetic benchmark dataset, manifests, and the validation split.

Label encoding is fixed: healthy = 0, stressed = 1.
"""

import csv
import io
import math
import os
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field, replace

import numpy as np
from PIL import Image

from .errors import AnnotationParseError, ConfigError, ValidationError
from .seeding import derived_rng

LABEL_NAMES = {"healthy": 0, "stressed": 1}
HEALTHY, STRESSED = 0, 1
SPLITS = ("train", "test")


# -- annotations --------------------------------------------------------------


@dataclass
class Box:
    xmin: int
    ymin: int
    xmax: int
    ymax: int
    label: int


@dataclass
class Annotation:
    source_image: str
    width: int
    height: int
    boxes: list


def _text_int(node, tag, path):
    child = node.find(tag)
    if child is None or child.text is None:
        raise ValidationError(f"{path}: missing <{tag}>")
    try:
        return int(float(child.text.strip()))
    except ValueError:
        raise ValidationError(f"{path}: <{tag}> is not a number: {child.text!r}")


def parse_annotation(path) -> Annotation:
    """Read one labeling-tool XML file (the object/bndbox dialect)."""
    try:
        tree = ET.parse(path)
    except ET.ParseError as exc:
        line, col = exc.position
        raise AnnotationParseError(f"{path}: malformed XML at line {line}, column {col}: {exc.msg}") from exc
    root = tree.getroot()
    fname = root.findtext("filename")
    if not fname:
        raise ValidationError(f"{path}: missing <filename>")
    size = root.find("size")
    if size is None:
        raise ValidationError(f"{path}: missing <size>")
    width = _text_int(size, "width", path)
    height = _text_int(size, "height", path)
    if width < 1 or height < 1:
        raise ValidationError(f"{path}: declared size {width}x{height} is not positive")

    boxes = []
    for i, obj in enumerate(root.iter("object")):
        name = (obj.findtext("name") or "").strip().lower()
        if name not in LABEL_NAMES:
            raise ValidationError(
                f"{path}: object {i} has unknown label {name!r}, expected one of {sorted(LABEL_NAMES)}"
            )
        bnd = obj.find("bndbox")
        if bnd is None:
            raise ValidationError(f"{path}: object {i} has no <bndbox>")
        xmin = _text_int(bnd, "xmin", path)
        ymin = _text_int(bnd, "ymin", path)
        xmax = _text_int(bnd, "xmax", path)
        ymax = _text_int(bnd, "ymax", path)
        if not (0 <= xmin < xmax <= width and 0 <= ymin < ymax <= height):
            raise ValidationError(
                f"{path}: object {i} box ({xmin},{ymin},{xmax},{ymax}) out of bounds for {width}x{height}"
            )
        boxes.append(Box(xmin, ymin, xmax, ymax, LABEL_NAMES[name]))
    return Annotation(source_image=fname, width=width, height=height, boxes=boxes)


# -- images --------------------------------------------------------------------


def load_image_rgb(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def save_patch_png(path, patch: np.ndarray) -> None:
    Image.fromarray(patch, mode="RGB").save(path, format="PNG")


def load_patch(path) -> np.ndarray:
    return load_image_rgb(path)


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with half-pixel-center sampling.

    Source coordinate for output index i is (i + 0.5) * in/out - 0.5, clamped
    to the valid range, so equal sizes reproduce the input exactly. Works on
    [H,W] or [H,W,C] float or integer arrays; returns float64.
    """
    if out_h < 1 or out_w < 1:
        raise ValidationError(f"resize target {out_h}x{out_w} is not positive")
    src = np.asarray(img, dtype=np.float64)
    h, w = src.shape[:2]
    ys = np.clip((np.arange(out_h) + 0.5) * (h / out_h) - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * (w / out_w) - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    if src.ndim == 3:
        fy = fy[..., None]
        fx = fx[..., None]
    tl = src[np.ix_(y0, x0)]
    tr = src[np.ix_(y0, x1)]
    bl = src[np.ix_(y1, x0)]
    br = src[np.ix_(y1, x1)]
    top = tl + (tr - tl) * fx
    bot = bl + (br - bl) * fx
    return top + (bot - top) * fy


@dataclass
class Sample:
    sample_id: str
    patch: np.ndarray
    label: int


def extract_windows(annotation: Annotation, image: np.ndarray, target_size=(224, 224)) -> list:
    """Crop every annotated box and resize it to ``target_size``.

    The crop happens before any resampling, so pixels outside a declared box
    can never leak into its patch. Sample ids are '<image stem>#<box index>'.
    """
    ih, iw = image.shape[:2]
    if (ih, iw) != (annotation.height, annotation.width):
        raise ValidationError(
            f"image is {iw}x{ih} but annotation declares {annotation.width}x{annotation.height}"
        )
    stem = os.path.splitext(os.path.basename(annotation.source_image))[0]
    th, tw = int(target_size[0]), int(target_size[1])
    out = []
    for i, box in enumerate(annotation.boxes):
        crop = image[box.ymin:box.ymax, box.xmin:box.xmax]
        resized = bilinear_resize(crop, th, tw)
        patch = np.clip(np.rint(resized), 0, 255).astype(np.uint8)
        out.append(Sample(sample_id=f"{stem}#{i}", patch=patch, label=box.label))
    return out


# -- augmentation -----------------------------------------------------------------


@dataclass
class AugmentationConfig:
    """Train-time geometry jitter plus the fixed intensity rescale.

    Ranges mirror the training recipe: rotation in degrees, shifts as
    fractions of the patch extent, shear as a dimensionless affine
    coefficient, flips as independent coin flips. Zoom is wired through but
    off by default. Geometry applies to training patches only; the rescale
    applies everywhere.
    """

    rescale: float = 1.0 / 255.0
    rotation_range: float = 30.0
    width_shift_range: float = 0.2
    height_shift_range: float = 0.2
    shear_range: float = 0.2
    zoom_range: float = 0.0
    horizontal_flip: bool = True
    vertical_flip: bool = True
    fill_mode: str = "nearest"

    def validate(self) -> None:
        if not (self.rescale > 0):
            raise ConfigError(f"rescale must be positive, got {self.rescale}")
        for name in ("rotation_range", "width_shift_range", "height_shift_range", "shear_range", "zoom_range"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.fill_mode != "nearest":
            raise ConfigError(f"only fill_mode='nearest' is supported, got {self.fill_mode!r}")

    def to_dict(self) -> dict:
        return {
            "rescale": self.rescale,
            "rotation_range": self.rotation_range,
            "width_shift_range": self.width_shift_range,
            "height_shift_range": self.height_shift_range,
            "shear_range": self.shear_range,
            "zoom_range": self.zoom_range,
            "horizontal_flip": self.horizontal_flip,
            "vertical_flip": self.vertical_flip,
            "fill_mode": self.fill_mode,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentationConfig":
        extra = set(d) - set(cls.__dataclass_fields__)
        if extra:
            raise ConfigError(f"unknown augmentation config keys: {sorted(extra)}")
        return cls(**d)

    def disabled(self) -> "AugmentationConfig":
        """Copy with all geometry off; the rescale is kept."""
        return replace(
            self,
            rotation_range=0.0,
            width_shift_range=0.0,
            height_shift_range=0.0,
            shear_range=0.0,
            zoom_range=0.0,
            horizontal_flip=False,
            vertical_flip=False,
        )


@dataclass
class AffineDraw:
    """One sampled geometric transform; pixels for shifts, degrees for angle."""

    angle_deg: float = 0.0
    shift_x: float = 0.0
    shift_y: float = 0.0
    shear: float = 0.0
    zoom: float = 1.0
    hflip: bool = False
    vflip: bool = False

    @property
    def is_identity(self) -> bool:
        return (
            self.angle_deg == 0.0
            and self.shift_x == 0.0
            and self.shift_y == 0.0
            and self.shear == 0.0
            and self.zoom == 1.0
            and not self.hflip
            and not self.vflip
        )


def sample_augmentation(config: AugmentationConfig, rng: np.random.Generator, size) -> AffineDraw:
    """Draw one transform. Disabled components consume no randomness, so a
    given seed yields the same draws regardless of unrelated config edits."""
    h, w = int(size[0]), int(size[1])
    draw = AffineDraw()
    if config.rotation_range > 0:
        draw.angle_deg = float(rng.uniform(-config.rotation_range, config.rotation_range))
    if config.width_shift_range > 0:
        draw.shift_x = float(rng.uniform(-config.width_shift_range, config.width_shift_range) * w)
    if config.height_shift_range > 0:
        draw.shift_y = float(rng.uniform(-config.height_shift_range, config.height_shift_range) * h)
    if config.shear_range > 0:
        draw.shear = float(rng.uniform(-config.shear_range, config.shear_range))
    if config.zoom_range > 0:
        draw.zoom = float(rng.uniform(1.0 - config.zoom_range, 1.0 + config.zoom_range))
    if config.horizontal_flip:
        draw.hflip = bool(rng.uniform() < 0.5)
    if config.vertical_flip:
        draw.vflip = bool(rng.uniform() < 0.5)
    return draw


def _compose_affine(draw: AffineDraw, h: int, w: int):
    """2x3 map from output pixel coordinates to input sampling coordinates.

    The content transform applies shear, then rotation, then zoom, then
    shift, then flips, all about the patch center; sampling inverts it.
    Coordinates are (x, y) with x along width.
    """
    def mat(a, b, c, d):
        return np.array([[a, b], [c, d]], dtype=np.float64)

    theta = math.radians(draw.angle_deg)
    shear = mat(1.0, draw.shear, 0.0, 1.0)
    rot = mat(math.cos(theta), -math.sin(theta), math.sin(theta), math.cos(theta))
    zoom = mat(draw.zoom, 0.0, 0.0, draw.zoom)
    flip = mat(-1.0 if draw.hflip else 1.0, 0.0, 0.0, -1.0 if draw.vflip else 1.0)
    lin = flip @ zoom @ rot @ shear
    shift = np.array([draw.shift_x, draw.shift_y], dtype=np.float64)
    # Content map: p_out = C + lin @ (p_in - C) + flip-adjusted shift. Invert.
    inv = np.linalg.inv(lin)
    center = np.array([(w - 1) / 2.0, (h - 1) / 2.0], dtype=np.float64)
    offset = center - inv @ (center + flip @ shift)
    return inv, offset


def apply_augmentation(patch: np.ndarray, draw: AffineDraw, rescale: float = 1.0 / 255.0) -> np.ndarray:
    """Warp a [H,W,3] uint8 patch by ``draw`` and rescale to float32.

    In-bounds sampling is bilinear; out-of-bounds coordinates clamp to the
    nearest edge pixel (nearest fill). An identity draw reduces to the bare
    rescale, bit for bit.
    """
    h, w = patch.shape[:2]
    divisor = np.float32(1.0 / float(rescale))
    if draw.is_identity:
        return patch.astype(np.float32) / divisor

    inv, offset = _compose_affine(draw, h, w)
    xs, ys = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    sx = inv[0, 0] * xs + inv[0, 1] * ys + offset[0]
    sy = inv[1, 0] * xs + inv[1, 1] * ys + offset[1]
    sx = np.clip(sx, 0, w - 1)
    sy = np.clip(sy, 0, h - 1)
    x0 = np.floor(sx).astype(int)
    y0 = np.floor(sy).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (sx - x0)[..., None]
    fy = (sy - y0)[..., None]
    src = patch.astype(np.float64)
    tl = src[y0, x0]
    tr = src[y0, x1]
    bl = src[y1, x0]
    br = src[y1, x1]
    top = tl + (tr - tl) * fx
    bot = bl + (br - bl) * fx
    warped = top + (bot - top) * fy
    return (warped.astype(np.float32)) / divisor


def augment(patch: np.ndarray, config: AugmentationConfig, rng: np.random.Generator) -> np.ndarray:
    config.validate()
    draw = sample_augmentation(config, rng, patch.shape[:2])
    return apply_augmentation(patch, draw, config.rescale)


def rescale_only(patch: np.ndarray, rescale: float = 1.0 / 255.0) -> np.ndarray:
    """The evaluation-path preprocessing: intensity rescale, no geometry."""
    return apply_augmentation(patch, AffineDraw(), rescale)


# -- manifests ----------------------------------------------------------------------


@dataclass
class ManifestRow:
    sample_id: str
    path: str
    label: int
    split: str


@dataclass
class DatasetManifest:
    rows: list
    seed: int | None = None

    def split_rows(self, split: str) -> list:
        return [r for r in self.rows if r.split == split]

    def ids(self) -> list:
        return [r.sample_id for r in self.rows]


def write_manifest(manifest: DatasetManifest, path) -> None:
    ids = [r.sample_id for r in manifest.rows]
    if len(set(ids)) != len(ids):
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        raise ValidationError(f"duplicate sample ids in manifest: {dupes[:5]}")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["id", "path", "label", "split"])
    for r in manifest.rows:
        if r.label not in (0, 1):
            raise ValidationError(f"sample {r.sample_id!r} has label {r.label!r}, expected 0 or 1")
        if r.split not in SPLITS:
            raise ValidationError(f"sample {r.sample_id!r} has split {r.split!r}, expected one of {SPLITS}")
        writer.writerow([r.sample_id, r.path, r.label, r.split])
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(buf.getvalue())


def parse_manifest(path) -> DatasetManifest:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValidationError(f"{path}: empty manifest")
        if header != ["id", "path", "label", "split"]:
            raise ValidationError(f"{path}: bad manifest header {header!r}")
        rows = []
        for lineno, rec in enumerate(reader, start=2):
            if len(rec) != 4:
                raise ValidationError(f"{path}:{lineno}: expected 4 fields, got {len(rec)}")
            sid, p, label, split = rec
            if label not in ("0", "1"):
                raise ValidationError(f"{path}:{lineno}: label must be 0 or 1, got {label!r}")
            if split not in SPLITS:
                raise ValidationError(f"{path}:{lineno}: split must be one of {SPLITS}, got {split!r}")
            rows.append(ManifestRow(sample_id=sid, path=p, label=int(label), split=split))
    ids = [r.sample_id for r in rows]
    if len(set(ids)) != len(ids):
        raise ValidationError(f"{path}: duplicate sample ids")
    return DatasetManifest(rows=rows)


def resolve_patch_path(manifest_path, row: ManifestRow) -> str:
    """Manifest paths are stored relative to the manifest file."""
    if os.path.isabs(row.path):
        return row.path
    return os.path.join(os.path.dirname(os.path.abspath(manifest_path)), row.path)


# -- validation split ----------------------------------------------------------------


def split_validation(rows: list, fraction: float, seed: int):
    """Stratified train/validation split of manifest rows.

    Per class, floor(fraction * count) rows go to validation, chosen by a
    seeded permutation; both parts keep the original manifest order. Classes
    with fewer than 2 rows cannot be stratified.
    """
    if not (0.0 < fraction <= 0.5):
        raise ConfigError(f"validation fraction must lie in (0, 0.5], got {fraction}")
    by_label = {}
    for r in rows:
        by_label.setdefault(r.label, []).append(r)
    val_ids = set()
    for label in sorted(by_label):
        group = by_label[label]
        if len(group) < 2:
            raise ValidationError(f"label {label} has only {len(group)} sample(s), cannot stratify")
        take = math.floor(fraction * len(group))
        rng = derived_rng(seed, "valsplit", label)
        order = rng.permutation(len(group))
        val_ids.update(group[i].sample_id for i in order[:take])
    train_part = [r for r in rows if r.sample_id not in val_ids]
    val_part = [r for r in rows if r.sample_id in val_ids]
    return train_part, val_part


# -- synthetic dataset ----------------------------------------------------------------


def _synth_patch(rng: np.random.Generator, size: int, label: int) -> np.ndarray:
    """One textured color-field patch. Healthy skews green, stressed skews
    toward dry yellow-brown; the green-channel gap is what makes the task
    linearly separable from mean color alone."""
    if label == STRESSED:
        base = np.array([185.0, 120.0, 45.0])
    else:
        base = np.array([70.0, 170.0, 60.0])
    coarse = rng.uniform(-25.0, 25.0, size=(8, 8, 3))
    blotch = bilinear_resize(coarse, size, size)
    grain = rng.uniform(-10.0, 10.0, size=(size, size, 3))
    img = base[None, None, :] + blotch + grain
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def synth_dataset(
    out_dir,
    n_train: int,
    n_test: int,
    image_size: int = 64,
    class_balance: float = 0.5,
    seed: int = 0,
) -> DatasetManifest:
    """Write a deterministic synthetic dataset and its manifest to ``out_dir``.

    ``class_balance`` is the stressed fraction within each split. Patch bytes
    and the manifest depend only on the arguments, never on the clock.
    """
    if n_train < 1 or n_test < 0:
        raise ConfigError(f"need n_train >= 1 and n_test >= 0, got {n_train}/{n_test}")
    if image_size < 8:
        raise ConfigError(f"image_size must be >= 8, got {image_size}")
    if not (0.0 < class_balance < 1.0):
        raise ConfigError(f"class_balance must lie in (0, 1), got {class_balance}")
    os.makedirs(out_dir, exist_ok=True)
    patches_dir = os.path.join(out_dir, "patches")
    os.makedirs(patches_dir, exist_ok=True)

    rows = []
    for split, count in (("train", n_train), ("test", n_test)):
        n_stressed = round(count * class_balance)
        for i in range(count):
            label = STRESSED if i < n_stressed else HEALTHY
            sid = f"synth_{split}_{i:04d}"
            rng = derived_rng(seed, "synth", sid)
            patch = _synth_patch(rng, image_size, label)
            rel = os.path.join("patches", f"{sid}.png")
            save_patch_png(os.path.join(out_dir, rel), patch)
            rows.append(ManifestRow(sample_id=sid, path=rel, label=label, split=split))
    manifest = DatasetManifest(rows=rows, seed=seed)
    write_manifest(manifest, os.path.join(out_dir, "manifest.csv"))
    return manifest
