"""Loading, cropping, resizing, splitting and synthesising image/mask pairs.

On-disk layout (RailSem19 compatible)::

    <root>/images/<stem>.jpg | <stem>.png
    <root>/masks/<stem>.png          8-bit single channel class ids

The class table is a small text file with one ``<id> = <name>`` line per
class.
"""

from __future__ import annotations

import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .errors import ConfigError, EmptyDataset, InvalidCrop, InvalidSize, MissingMask, SizeMismatch

TOY_CLASSES = {0: "background", 1: "rail", 2: "pole"}
TOY_RAIL_IDS = frozenset({1})
IMAGE_SUFFIXES = (".jpg", ".jpeg", ".png")


@dataclass(eq=False)
class ScenePair:
    image: np.ndarray
    mask: np.ndarray
    index: int
    source_id: str = ""

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.uint8)
        self.mask = np.asarray(self.mask, dtype=np.uint8)
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise InvalidSize(f"image must be HxWx3, got {self.image.shape}", shape=self.image.shape)
        if self.mask.ndim != 2:
            raise InvalidSize(f"mask must be HxW, got {self.mask.shape}", shape=self.mask.shape)
        if self.image.shape[:2] != self.mask.shape:
            raise SizeMismatch(
                f"{self.source_id or self.index}: image {self.image.shape[:2]} vs mask {self.mask.shape}",
                image_shape=self.image.shape[:2],
                mask_shape=self.mask.shape,
            )
        if self.index < 0:
            raise ValueError("index must be non-negative")

    @property
    def shape(self):
        return self.mask.shape

    def __eq__(self, other):
        if not isinstance(other, ScenePair):
            return NotImplemented
        return (
            self.index == other.index
            and self.source_id == other.source_id
            and np.array_equal(self.image, other.image)
            and np.array_equal(self.mask, other.mask)
        )


@dataclass
class DatasetSplit:
    train: list
    val: list
    seed: int
    ratio: float
    indices: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.indices:
            self.indices = {
                "train": [p.index for p in self.train],
                "val": [p.index for p in self.val],
            }


def natural_key(stem):
    return [int(tok) if tok.isdigit() else tok for tok in re.split(r"(\d+)", stem)]


def read_class_table(path):
    table = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            key, sep, value = line.partition(":")
        if not sep:
            raise ConfigError(f"class_table:{lineno}", f"expected '<id> = <name>', got {raw!r}")
        table[int(key.strip())] = value.strip()
    return table


def write_class_table(table, path):
    lines = [f"{k} = {v}" for k, v in sorted(table.items())]
    Path(path).write_text("\n".join(lines) + "\n")


def _load_one(args):
    stem, image_path, mask_path, index, class_table = args
    image = np.asarray(Image.open(image_path).convert("RGB"))
    mask_img = Image.open(mask_path)
    if mask_img.mode not in ("L", "P"):
        raise InvalidSize(f"mask {mask_path} must be 8-bit single channel, got mode {mask_img.mode}")
    # palette PNGs store class ids as palette indices
    mask = np.array(mask_img, dtype=np.uint8)
    if image.shape[:2] != mask.shape:
        raise SizeMismatch(
            f"{stem}: image {image.shape[:2]} vs mask {mask.shape}",
            stem=stem,
            image_shape=image.shape[:2],
            mask_shape=mask.shape,
        )
    if class_table is not None:
        unknown = set(np.unique(mask).tolist()) - set(class_table)
        if unknown:
            raise InvalidSize(f"{stem}: mask ids {sorted(unknown)} not in class table", stem=stem)
    return ScenePair(image, mask, index, stem)


def load_scene_pairs(root, class_table=None, workers=1):
    """Read every ``images/<stem>`` with its ``masks/<stem>.png``.

    Pairs come back in natural stem order (``rs2`` before ``rs10``), which is
    the dataset's native index order; ``index`` is the position in that
    order.
    """
    root = Path(root)
    images = {}
    for path in sorted((root / "images").iterdir()):
        if path.suffix.lower() in IMAGE_SUFFIXES:
            images.setdefault(path.stem, path)
    stems = sorted(images, key=natural_key)
    jobs = []
    for index, stem in enumerate(stems):
        mask_path = root / "masks" / f"{stem}.png"
        if not mask_path.exists():
            raise MissingMask(stem)
        jobs.append((stem, images[stem], mask_path, index, class_table))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(_load_one, jobs))
    return [_load_one(job) for job in jobs]


def save_scene_pairs(pairs, root, class_table=None):
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for pair in pairs:
        stem = pair.source_id or f"{pair.index:05d}"
        Image.fromarray(pair.image).save(root / "images" / f"{stem}.png")
        Image.fromarray(pair.mask).save(root / "masks" / f"{stem}.png")
    if class_table is not None:
        write_class_table(class_table, root / "classes.txt")


def center_crop(pair, target):
    """Keep the centred ``target = (H_t, W_t)`` window of image and mask.

    For 1920x1080 -> 1080x1080 this keeps columns ``[420, 1500)``.
    """
    th, tw = target
    h, w = pair.shape
    if th <= 0 or tw <= 0:
        raise InvalidSize(f"crop target must be positive, got {target}")
    if th > h or tw > w:
        raise InvalidCrop(f"crop {target} larger than source {(h, w)}", target=target, source=(h, w))
    top = (h - th) // 2
    left = (w - tw) // 2
    window = (slice(top, top + th), slice(left, left + tw))
    return ScenePair(pair.image[window].copy(), pair.mask[window].copy(), pair.index, pair.source_id)


def resize_image(image, size):
    h, w = size
    if h <= 0 or w <= 0:
        raise InvalidSize(f"size must be positive, got {size}", size=size)
    if image.shape[:2] == (h, w):
        return image.copy()
    return np.asarray(Image.fromarray(image).resize((w, h), Image.BILINEAR))


def resize_mask(mask, size):
    h, w = size
    if h <= 0 or w <= 0:
        raise InvalidSize(f"size must be positive, got {size}", size=size)
    if mask.shape == (h, w):
        return mask.copy()
    return np.asarray(Image.fromarray(mask).resize((w, h), Image.NEAREST))


def resize_pair(pair, size):
    """Bilinear for the image, nearest neighbour for the class-id mask."""
    return ScenePair(resize_image(pair.image, size), resize_mask(pair.mask, size), pair.index, pair.source_id)


def split_dataset(pairs, ratio, seed=0):
    """Partition into train/val with ``round(ratio * N)`` training items.

    ``seed == 0`` takes a contiguous prefix in native order; any other seed
    draws a seeded permutation.  Both halves are kept in index order.
    """
    pairs = list(pairs)
    n = len(pairs)
    if n == 0:
        raise EmptyDataset("cannot split an empty dataset")
    if n < 2:
        raise EmptyDataset(f"need at least 2 pairs to split, got {n}", n=n)
    if not 0.0 < ratio < 1.0:
        raise ConfigError("ratio", f"must lie in (0, 1), got {ratio}")
    n_train = int(math.floor(ratio * n + 0.5))
    if seed == 0:
        order = np.arange(n)
    else:
        order = np.random.default_rng(seed).permutation(n)
    train_pos = np.sort(order[:n_train])
    val_pos = np.sort(order[n_train:])
    return DatasetSplit(
        train=[pairs[i] for i in train_pos],
        val=[pairs[i] for i in val_pos],
        seed=seed,
        ratio=ratio,
    )


# --- procedural toy scenes -------------------------------------------------


def _rail_polygon(x_bottom, x_vanish, y_horizon, h, w_bottom, w_top):
    return [
        (x_vanish - w_top / 2, y_horizon),
        (x_vanish + w_top / 2, y_horizon),
        (x_bottom + w_bottom / 2, h - 1),
        (x_bottom - w_bottom / 2, h - 1),
    ]


def _toy_scene(rng, size, rails, poles, index):
    h, w = size
    s = w / 64.0
    y_horizon = h * rng.uniform(0.30, 0.42)

    # textured background: sky above the horizon, ballast/grass below
    yy = np.arange(h, dtype=float)[:, None] * np.ones((1, w))
    sky = np.array([rng.uniform(120, 190), rng.uniform(150, 200), rng.uniform(190, 240)])
    ground = np.array([rng.uniform(70, 120), rng.uniform(80, 130), rng.uniform(40, 80)])
    above = (yy < y_horizon)[..., None]
    image = np.where(above, sky, ground) + rng.normal(0.0, 14.0, (h, w, 3))
    blotches = rng.normal(0.0, 12.0, (max(h // 8, 1), max(w // 8, 1), 3))
    image += np.kron(blotches, np.ones((8, 8, 1)))[:h, :w]

    canvas = Image.fromarray(np.clip(image, 0, 255).astype(np.uint8))
    mask_canvas = Image.new("L", (w, h), 0)
    draw = ImageDraw.Draw(canvas)
    mdraw = ImageDraw.Draw(mask_canvas)

    if poles:
        for _ in range(rng.integers(1, 3)):
            px = rng.uniform(0.02, 0.98) * w
            pw = max(1.0, rng.uniform(1.0, 2.5) * s)
            top = rng.uniform(0.05, 0.3) * h
            bottom = rng.uniform(0.55, 0.85) * h
            shade = int(rng.integers(20, 60))
            box = [px, top, px + pw, bottom]
            draw.rectangle(box, fill=(shade, shade, shade + 10))
            mdraw.rectangle(box, fill=2)

    if rails:
        x_vanish = w * rng.uniform(0.4, 0.6)
        centres = sorted(rng.uniform([0.25, 0.6], [0.4, 0.8]) * w)
        for centre in centres:
            gauge = rng.uniform(0.16, 0.22) * w
            w_bottom = rng.uniform(2.0, 3.0) * s
            xv = x_vanish + rng.uniform(-1.5, 1.5) * s
            for side in (-0.5, 0.5):
                poly = _rail_polygon(centre + side * gauge, xv + side * s, y_horizon, h, w_bottom, 0.8 * s)
                tone = np.clip(ground + rng.uniform(45.0, 90.0), 0, 255).astype(int)
                draw.polygon(poly, fill=tuple(tone.tolist()))
                mdraw.polygon(poly, fill=1)

    image = np.asarray(canvas)
    mask = np.asarray(mask_canvas).copy()
    return ScenePair(image, mask, index, f"toy{index:05d}")


def generate_toy_dataset(n, size=(64, 64), seed=0, rails=True, poles=True):
    """Procedural railway-like scenes with exact {background, rail, pole} masks.

    Each scene holds two converging tracks (two rails each) drawn over a
    noisy sky/ground background, plus one or two pole rectangles when
    ``poles`` is set.  ``rails=False`` yields rail-free scenes.  Pair ``i``
    depends only on ``(seed, i)``.
    """
    if n < 1:
        raise EmptyDataset(f"n must be >= 1, got {n}")
    children = np.random.SeedSequence(seed).spawn(n)
    return [
        _toy_scene(np.random.default_rng(child), tuple(size), rails, poles, i)
        for i, child in enumerate(children)
    ]
