"""Procedural 10-class toy dataset plus an orthogonal "warm sky" style set.

Class identity is carried by geometry (stripes, rings, crosses, ...) while
base colors are randomized per image, so a classifier has to key on shape.
The style images are smooth warm gradients with a bright disk - visually
orthogonal to every class pattern, which is exactly what the style-domain
side of generator training needs.
"""

import os

import numpy as np

from .data import DataBundle, LabeledImage, save_image

CLASS_NAMES = [
    "hstripes", "vstripes", "diagonal", "checker", "disk",
    "ring", "cross", "xcross", "corners", "frame",
]


def _pattern_mask(label, size, rng):
    y, x = np.mgrid[0:size, 0:size]
    cy = cx = (size - 1) / 2.0
    r = np.hypot(y - cy, x - cx)
    period = max(4, size // 4)
    if label == 0:
        mask = (y // (period // 2)) % 2 == 0
    elif label == 1:
        mask = (x // (period // 2)) % 2 == 0
    elif label == 2:
        mask = ((x + y) // (period // 2)) % 2 == 0
    elif label == 3:
        mask = ((x // (period // 2)) + (y // (period // 2))) % 2 == 0
    elif label == 4:
        mask = r <= size * 0.30
    elif label == 5:
        mask = (r >= size * 0.22) & (r <= size * 0.38)
    elif label == 6:
        bar = size // 6
        mask = (np.abs(y - cy) <= bar) | (np.abs(x - cx) <= bar)
    elif label == 7:
        bar = size // 6
        mask = (np.abs(y - x) <= bar) | (np.abs((size - 1 - y) - x) <= bar)
    elif label == 8:
        b = size // 3
        mask = ((y < b) | (y >= size - b)) & ((x < b) | (x >= size - b))
    elif label == 9:
        b = size // 8
        inner = (y >= b) & (y < size - b) & (x >= b) & (x < size - b)
        core = (y >= 3 * b) & (y < size - 3 * b) & (x >= 3 * b) & (x < size - 3 * b)
        mask = inner & ~core
    else:
        raise ValueError(f"no pattern for label {label}")
    shift = rng.integers(-3, 4, size=2)
    return np.roll(np.roll(mask, shift[0], axis=0), shift[1], axis=1)


def _two_colors(rng):
    # random hues with a guaranteed brightness gap so the pattern stays visible
    fg = rng.uniform(0.05, 0.95, size=3)
    bg = rng.uniform(0.05, 0.95, size=3)
    while abs(fg.mean() - bg.mean()) < 0.25:
        bg = rng.uniform(0.05, 0.95, size=3)
    return fg.astype(np.float32), bg.astype(np.float32)


def make_class_image(label, size, rng, noise=0.06):
    mask = _pattern_mask(label, size, rng)
    fg, bg = _two_colors(rng)
    img = np.where(mask[None], fg[:, None, None], bg[:, None, None]).astype(np.float32)
    img += rng.normal(0.0, noise, size=img.shape).astype(np.float32)
    return np.clip(img, 0.0, 1.0)


def make_style_image(size, rng, noise=0.04):
    """Warm-palette scene with real structure: gradient sky, sun disk,
    cloud streaks, and a dark jagged skyline.

    Structure matters: a purely smooth style domain would teach the
    generator to erase input content, while structured warm scenes make the
    color palette the domain signal.
    """
    y, x = np.mgrid[0:size, 0:size]
    t = (y / (size - 1)).astype(np.float32)
    top = np.array([1.0, 0.75, 0.25], np.float32) + rng.uniform(-0.1, 0.1, 3).astype(np.float32)
    bottom = np.array([0.55, 0.15, 0.30], np.float32) + rng.uniform(-0.1, 0.1, 3).astype(np.float32)
    img = top[:, None, None] * (1 - t)[None] + bottom[:, None, None] * t[None]

    sun_x = rng.uniform(0.15, 0.85) * size
    sun_y = rng.uniform(0.1, 0.5) * size
    d = np.hypot(y - sun_y, x - sun_x)
    glow = np.exp(-(d / (size * rng.uniform(0.1, 0.2))) ** 2).astype(np.float32)
    sun = np.array([1.0, 0.95, 0.7], np.float32)
    img = img * (1 - 0.85 * glow[None]) + sun[:, None, None] * 0.85 * glow[None]

    # horizontal cloud streaks (darker warm bands)
    for _ in range(rng.integers(2, 5)):
        cy = rng.uniform(0.05, 0.6) * size
        thick = rng.uniform(0.02, 0.06) * size
        band = np.exp(-((y - cy) / thick) ** 2).astype(np.float32)
        shade = rng.uniform(0.25, 0.5)
        img = img * (1 - shade * band[None]) + bottom[:, None, None] * shade * band[None]

    # jagged dark skyline silhouette along the bottom
    heights = rng.uniform(0.05, 0.35, size=size) * size
    heights = np.convolve(heights, np.ones(5) / 5, mode="same")
    silhouette = (y >= (size - heights[None, :])).astype(np.float32)
    dark = np.array([0.12, 0.06, 0.10], np.float32)
    img = img * (1 - silhouette[None]) + dark[:, None, None] * silhouette[None]

    img += rng.normal(0.0, noise, size=img.shape).astype(np.float32)
    return np.clip(img, 0.0, 1.0)


def build_synthetic_bundle(per_class_train=180, per_class_test=40, n_style=120,
                           image_size=32, seed=0, n_classes=10):
    """In-memory DataBundle of the toy task (no file IO)."""
    rng = np.random.default_rng(seed)
    train, test, style = [], [], []
    for c in range(n_classes):
        for i in range(per_class_train):
            train.append(LabeledImage(make_class_image(c, image_size, rng), c,
                                      f"train/{CLASS_NAMES[c]}/{i:04d}"))
        for i in range(per_class_test):
            test.append(LabeledImage(make_class_image(c, image_size, rng), c,
                                     f"test/{CLASS_NAMES[c]}/{i:04d}"))
    for i in range(n_style):
        style.append(LabeledImage(make_style_image(image_size, rng), 0, f"style/{i:04d}"))
    bundle = DataBundle(train, test, style, n_classes, (3, image_size, image_size))
    return bundle.validate()


def generate_dataset(root, per_class_train=180, per_class_test=40, n_style=120,
                     image_size=32, seed=0, n_classes=10):
    """Write the toy dataset as a pre-split PNG tree (plus style/ folder)."""
    bundle = build_synthetic_bundle(per_class_train, per_class_test, n_style,
                                    image_size, seed, n_classes)
    for split in ("train", "test"):
        for im in getattr(bundle, split):
            save_image(im.pixels, os.path.join(root, im.sample_id + ".png"))
    for im in bundle.style_set:
        save_image(im.pixels, os.path.join(root, im.sample_id + ".png"))
    return root
