"""Dataset ingestion, splits, and poison/style subset selection.

Images live in memory as channel-first float32 arrays in [0,1]; file
interchange is standard 8-bit PNG/JPEG trees (one directory per class)
or a packed .npz archive. Every sampling operation is a pure function
of (bundle, plan, seed).
"""

import json
import math
import os
import zlib
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .errors import CapacityError, ContractError, SchemaError

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp")


def child_seed(seed, tag):
    """Derive a stable sub-seed for a named purpose from a master seed."""
    return (int(seed) * 1000003 + zlib.crc32(tag.encode())) % (2**31 - 1)


@dataclass
class LabeledImage:
    """A single sample: float32 pixels (C,H,W) in [0,1] plus its class label.

    `sample_id` tracks provenance across stamping/relabeling; `origin` is one
    of {clean, poisoned, detoxicant, stamped}.
    """

    pixels: np.ndarray
    label: int
    sample_id: str
    origin: str = "clean"

    def validate(self, n_classes=None, image_shape=None):
        if self.pixels.ndim != 3:
            raise ContractError(f"{self.sample_id}: pixels must be (C,H,W), got {self.pixels.shape}")
        if not np.isfinite(self.pixels).all():
            raise ContractError(f"{self.sample_id}: non-finite pixel values")
        if self.pixels.min() < 0.0 or self.pixels.max() > 1.0:
            raise ContractError(f"{self.sample_id}: pixels outside [0,1]")
        if n_classes is not None and not (0 <= self.label < n_classes):
            raise ContractError(f"{self.sample_id}: label {self.label} outside [0,{n_classes})")
        if image_shape is not None and tuple(self.pixels.shape) != tuple(image_shape):
            raise ContractError(f"{self.sample_id}: shape {self.pixels.shape} != {image_shape}")


@dataclass
class DataBundle:
    """Train/test splits plus the style-domain image set.

    Read-only after construction; safe to share across workers. Style images
    keep a dummy label (their labels are ignored everywhere).
    """

    train: list
    test: list
    style_set: list
    n_classes: int
    image_shape: tuple

    def validate(self):
        train_ids = {im.sample_id for im in self.train}
        test_ids = {im.sample_id for im in self.test}
        shared = train_ids & test_ids
        if shared:
            raise ContractError(f"train/test share sample ids: {sorted(shared)[:5]}")
        for im in self.train + self.test:
            im.validate(self.n_classes, self.image_shape)
        for im in self.style_set:
            im.validate(None, self.image_shape)
        return self

    def by_class(self, split="train"):
        groups = {c: [] for c in range(self.n_classes)}
        for im in getattr(self, split):
            groups[im.label].append(im)
        return groups


@dataclass
class PoisonPlan:
    """Class-stratified sampling plan for the poison subset."""

    target_label: int
    poison_fraction: float
    per_class_counts: dict
    seed: int

    def validate(self, bundle):
        if not (0 < self.poison_fraction <= 1):
            raise ContractError(f"poison_fraction {self.poison_fraction} outside (0,1]")
        if not (0 <= self.target_label < bundle.n_classes):
            raise ContractError(f"target_label {self.target_label} outside [0,{bundle.n_classes})")
        want = math.ceil(self.poison_fraction * len(bundle.train))
        got = sum(self.per_class_counts.values())
        if abs(got - want) > bundle.n_classes:
            raise ContractError(f"per_class_counts sum {got} far from ceil(fraction*|train|)={want}")
        return self


@dataclass
class DatasetSpec:
    """Descriptor for load_dataset: where the files are and how to split them."""

    layout: str = "folders"  # folders | packed
    image_size: int = 32
    classes: list = None  # optional explicit class-name order
    split_fraction: float = 0.8
    seed: int = 0
    style_path: str = None  # folder of style-domain images (folders layout)


def make_poison_plan(bundle, target_label, poison_fraction, seed):
    """Spread ceil(fraction*|train|) picks across classes as evenly as the
    class populations allow, remainder to the lowest class indexes."""
    total = math.ceil(poison_fraction * len(bundle.train))
    avail = {c: len(v) for c, v in bundle.by_class("train").items()}
    counts = {c: 0 for c in range(bundle.n_classes)}
    remaining = total
    while remaining > 0:
        open_classes = [c for c in range(bundle.n_classes) if counts[c] < avail[c]]
        if not open_classes:
            break
        for c in open_classes:
            if remaining == 0:
                break
            counts[c] += 1
            remaining -= 1
    plan = PoisonPlan(target_label, poison_fraction, counts, seed)
    return plan.validate(bundle)


def select_poison_subset(bundle, plan):
    """Draw the class-stratified poison subset, reproducibly under plan.seed.

    Returned images keep their ORIGINAL labels; relabeling to the target
    happens when the poisoned training set is assembled.
    """
    plan.validate(bundle)
    rng = np.random.default_rng(plan.seed)
    groups = bundle.by_class("train")
    picked = []
    for c in range(bundle.n_classes):
        want = plan.per_class_counts.get(c, 0)
        pool = groups[c]
        if want > len(pool):
            raise CapacityError(f"class {c} has {len(pool)} samples, plan wants {want}")
        idx = rng.choice(len(pool), size=want, replace=False)
        picked.extend(pool[i] for i in sorted(idx))
    return picked


def _decode_image(path, image_size):
    try:
        with Image.open(path) as img:
            img = img.convert("RGB")
            if img.size != (image_size, image_size):
                img = img.resize((image_size, image_size), Image.BILINEAR)
            arr = np.asarray(img, dtype=np.float32) / 255.0
    except Exception as exc:
        raise IOError(f"cannot decode image {path}: {exc}") from exc
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def _list_images(folder):
    names = [n for n in sorted(os.listdir(folder)) if n.lower().endswith(IMAGE_EXTENSIONS)]
    return [os.path.join(folder, n) for n in names]


def _load_class_folder(root, classes, image_size, id_prefix):
    images = []
    for label, cname in enumerate(classes):
        folder = os.path.join(root, cname)
        for path in _list_images(folder):
            sid = f"{id_prefix}/{cname}/{os.path.basename(path)}"
            images.append(LabeledImage(_decode_image(path, image_size), label, sid))
    return images


def stratified_split(images, fraction, seed, n_classes):
    """Deterministic per-class split; first `fraction` of a seeded shuffle
    goes to train."""
    rng = np.random.default_rng(seed)
    train, test = [], []
    for c in range(n_classes):
        pool = [im for im in images if im.label == c]
        order = rng.permutation(len(pool))
        cut = int(round(fraction * len(pool)))
        train.extend(pool[i] for i in order[:cut])
        test.extend(pool[i] for i in order[cut:])
    return train, test


def load_dataset(path, spec):
    """Load a DataBundle from a directory tree or a packed .npz file.

    Folders layout: either <path>/<class>/*.png (split by spec.split_fraction)
    or pre-split <path>/train/<class>/ and <path>/test/<class>/. Style images
    come from spec.style_path (flat folder), if given.
    """
    if not os.path.exists(path):
        raise IOError(f"dataset path does not exist: {path}")
    if spec.layout == "packed":
        return _load_packed(path, spec)
    if spec.layout != "folders":
        raise SchemaError(f"unsupported dataset layout: {spec.layout!r}")

    pre_split = os.path.isdir(os.path.join(path, "train")) and os.path.isdir(os.path.join(path, "test"))
    class_root = os.path.join(path, "train") if pre_split else path
    classes = spec.classes or sorted(
        d for d in os.listdir(class_root)
        if os.path.isdir(os.path.join(class_root, d)) and d not in ("style",)
    )
    if not classes:
        raise SchemaError(f"no class folders found under {class_root}")
    if spec.classes is not None:
        missing = [c for c in spec.classes if not os.path.isdir(os.path.join(class_root, c))]
        if missing:
            raise SchemaError(f"declared classes missing on disk: {missing}")

    if pre_split:
        train = _load_class_folder(os.path.join(path, "train"), classes, spec.image_size, "train")
        test = _load_class_folder(os.path.join(path, "test"), classes, spec.image_size, "test")
    else:
        images = _load_class_folder(path, classes, spec.image_size, "all")
        train, test = stratified_split(images, spec.split_fraction, spec.seed, len(classes))

    style = []
    style_path = spec.style_path or os.path.join(path, "style")
    if os.path.isdir(style_path):
        for p in _list_images(style_path):
            style.append(LabeledImage(_decode_image(p, spec.image_size), 0, f"style/{os.path.basename(p)}"))

    shape = (3, spec.image_size, spec.image_size)
    bundle = DataBundle(train, test, style, len(classes), shape)
    return bundle.validate()


def _load_packed(path, spec):
    with np.load(path, allow_pickle=False) as z:
        required = ("train_images", "train_labels", "test_images", "test_labels")
        missing = [k for k in required if k not in z]
        if missing:
            raise SchemaError(f"packed dataset missing arrays: {missing}")
        def to_float(arr):
            arr = np.asarray(arr)
            if arr.dtype == np.uint8:
                arr = arr.astype(np.float32) / 255.0
            return arr.astype(np.float32)
        train_x, train_y = to_float(z["train_images"]), z["train_labels"].astype(int)
        test_x, test_y = to_float(z["test_images"]), z["test_labels"].astype(int)
        style_x = to_float(z["style_images"]) if "style_images" in z else np.zeros((0,) + train_x.shape[1:], np.float32)
    n_classes = int(max(train_y.max(), test_y.max())) + 1
    if spec.classes is not None and len(spec.classes) != n_classes:
        raise SchemaError(f"declared {len(spec.classes)} classes, labels imply {n_classes}")
    train = [LabeledImage(x, int(y), f"train/{i:05d}") for i, (x, y) in enumerate(zip(train_x, train_y))]
    test = [LabeledImage(x, int(y), f"test/{i:05d}") for i, (x, y) in enumerate(zip(test_x, test_y))]
    style = [LabeledImage(x, 0, f"style/{i:05d}") for i, x in enumerate(style_x)]
    bundle = DataBundle(train, test, style, n_classes, tuple(train_x.shape[1:]))
    return bundle.validate()


def select_style_subset(bundle, count, seed):
    """Random style-domain subset (domain B side of generator training)."""
    if not bundle.style_set:
        raise ContractError("bundle has no style images")
    rng = np.random.default_rng(seed)
    count = min(count, len(bundle.style_set))
    idx = rng.choice(len(bundle.style_set), size=count, replace=False)
    return [bundle.style_set[i] for i in sorted(idx)]


def select_domain_a_subset(bundle, fraction, seed):
    """Per-class random fraction of the train split (domain A side of
    generator training). Sampled independently of any poison subset."""
    rng = np.random.default_rng(seed)
    picked = []
    for c, pool in sorted(bundle.by_class("train").items()):
        want = int(round(fraction * len(pool)))
        idx = rng.choice(len(pool), size=want, replace=False)
        picked.extend(pool[i] for i in sorted(idx))
    return picked


def select_per_class(bundle, per_class, seed, split="train", exclude_ids=()):
    """Fresh stratified draw of `per_class` samples per class."""
    rng = np.random.default_rng(seed)
    exclude = set(exclude_ids)
    picked = []
    for c, pool in sorted(bundle.by_class(split).items()):
        pool = [im for im in pool if im.sample_id not in exclude]
        want = min(per_class, len(pool))
        idx = rng.choice(len(pool), size=want, replace=False)
        picked.extend(pool[i] for i in sorted(idx))
    return picked


def write_manifest(bundle, path, seed, notes=None):
    """JSON manifest: sample ids, labels, split assignment, sampling notes."""
    manifest = {
        "n_classes": bundle.n_classes,
        "image_shape": list(bundle.image_shape),
        "seed": seed,
        "counts": {"train": len(bundle.train), "test": len(bundle.test), "style": len(bundle.style_set)},
        "samples": [
            {"id": im.sample_id, "label": im.label, "split": split}
            for split in ("train", "test")
            for im in getattr(bundle, split)
        ],
        "notes": dict(notes or {}),
    }
    manifest["notes"].setdefault(
        "domain_a_sampling",
        "generator-training domain-A images are sampled independently of the poison subset",
    )
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    return path


def save_image(pixels, path):
    """Write a (C,H,W) [0,1] float array as an 8-bit PNG."""
    arr = np.clip(np.asarray(pixels), 0.0, 1.0)
    arr = (arr.transpose(1, 2, 0) * 255.0).round().astype(np.uint8)
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    Image.fromarray(arr).save(path)
    return path


def save_grid(rows, path, pad=2):
    """Write a grid image: rows is a list of lists of (C,H,W) arrays."""
    c, h, w = np.asarray(rows[0][0]).shape
    n_rows, n_cols = len(rows), max(len(r) for r in rows)
    canvas = np.ones((c, n_rows * (h + pad) + pad, n_cols * (w + pad) + pad), np.float32)
    for i, row in enumerate(rows):
        for j, img in enumerate(row):
            y, x = pad + i * (h + pad), pad + j * (w + pad)
            canvas[:, y:y + h, x:x + w] = np.clip(img, 0, 1)
    return save_image(canvas, path)


def images_to_array(images):
    return np.stack([im.pixels for im in images]).astype(np.float32)


def labels_to_array(images):
    return np.array([im.label for im in images], dtype=np.int64)
