"""Galleries, image sets and corpora, plus ingestion and synthetic generators.

A corpus groups images by class into galleries; each gallery holds image sets
of a fixed size d that are classified as a unit.  Two generators ship:

* ``synthesize_corpus`` -- Gaussian blob per class, linearly separable at low
  noise; the fast fixture for tests.
* ``digit_glyph_corpus`` -- rendered 5x7 digit glyphs with jitter and noise, a
  desk-scale stand-in for handwritten-digit data (the "mnist-style" preset).

IDX-format files (big-endian, magic 0x00000803 / 0x00000801) are ingested by
``load_idx_corpus``.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from . import seeding
from .tensor import Tensor

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


class CorpusError(ValueError):
    pass


@dataclass
class Image:
    pixels: Tensor  # (channels, height, width), values >= 0
    id: str

    def __post_init__(self):
        if self.pixels.data.ndim != 3:
            raise CorpusError(f"image {self.id}: pixels must be (C, H, W)")
        if np.any(self.pixels.data < 0):
            raise CorpusError(f"image {self.id}: negative pixel values")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.pixels.shape


@dataclass
class ImageSet:
    images: list[Image]
    gallery_label: int

    def __post_init__(self):
        if not self.images:
            raise CorpusError("image set must contain at least one image")
        shapes = {img.shape for img in self.images}
        if len(shapes) != 1:
            raise CorpusError(f"image set mixes shapes {sorted(shapes)}")

    def __len__(self) -> int:
        return len(self.images)

    def stack(self) -> np.ndarray:
        """(d, C, H, W) array of all member images."""
        return np.stack([img.pixels.data for img in self.images])


@dataclass
class Gallery:
    label: int
    sets: list[ImageSet]

    def __post_init__(self):
        if not self.sets:
            raise CorpusError(f"gallery {self.label} has no image sets")
        for s in self.sets:
            if s.gallery_label != self.label:
                raise CorpusError(
                    f"gallery {self.label} contains a set labelled {s.gallery_label}"
                )

    @property
    def image_count(self) -> int:
        return sum(len(s) for s in self.sets)


@dataclass
class Corpus:
    train_galleries: list[Gallery]
    test_galleries: list[Gallery]
    class_count: int

    def __post_init__(self):
        train_labels = {g.label for g in self.train_galleries}
        test_labels = {g.label for g in self.test_galleries}
        if train_labels != test_labels:
            raise CorpusError(
                f"train labels {sorted(train_labels)} differ from test labels {sorted(test_labels)}"
            )
        if len(train_labels) != len(self.train_galleries):
            raise CorpusError("duplicate gallery labels")
        for label in train_labels:
            if not (0 <= label < self.class_count):
                raise CorpusError(f"gallery label {label} outside [0, {self.class_count})")

    @property
    def image_shape(self) -> tuple[int, ...]:
        return self.train_galleries[0].sets[0].images[0].shape

    def iter_test_sets(self) -> Iterator[tuple[int, int, ImageSet]]:
        """Yields (gallery_index, set_index, set) in stable order."""
        for gi, gallery in enumerate(self.test_galleries):
            for si, image_set in enumerate(gallery.sets):
                yield gi, si, image_set


@dataclass
class TrainingPool:
    clean: list[tuple[Image, int]]
    perturbed: Optional[list[tuple[Image, int]]] = None

    def __post_init__(self):
        if self.perturbed is not None:
            if len(self.perturbed) != len(self.clean):
                raise CorpusError("perturbed pool length differs from clean pool")
            for (_, lc), (_, lp) in zip(self.clean, self.perturbed):
                if lc != lp:
                    raise CorpusError("perturbed pool labels misaligned with clean pool")


# ---------------------------------------------------------------------------
# ingestion


def _read_idx(path, expected_magic: int) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise CorpusError(f"{path}: truncated IDX header")
    (magic,) = struct.unpack(">I", data[:4])
    if magic != expected_magic:
        raise CorpusError(
            f"{path}: bad IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}"
        )
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(data) < header:
        raise CorpusError(f"{path}: truncated IDX dimension table")
    dims = struct.unpack(f">{ndim}I", data[4:header])
    count = int(np.prod(dims))
    if len(data) - header < count:
        raise CorpusError(f"{path}: truncated IDX payload")
    return np.frombuffer(data, dtype=np.uint8, count=count, offset=header).reshape(dims)


def _partition_sets(images: list[Image], label: int, set_size: int) -> list[ImageSet]:
    sets = []
    for start in range(0, len(images) - set_size + 1, set_size):
        sets.append(ImageSet(images[start:start + set_size], label))
    return sets


def load_idx_corpus(images_path, labels_path, set_size: int, train_fraction: float,
                    shuffle_seed: Optional[int] = None) -> Corpus:
    """Build a corpus from an IDX image/label file pair.

    Images are grouped by label in file order (optionally seeded-shuffled),
    split per class by ``train_fraction``, then partitioned into consecutive
    sets of ``set_size``; final partial sets are dropped.
    """
    if set_size < 1:
        raise CorpusError("set size must be >= 1")
    if not (0.0 < train_fraction < 1.0):
        raise CorpusError(f"train fraction {train_fraction} outside (0, 1)")
    raw_images = _read_idx(images_path, IDX_IMAGE_MAGIC)
    raw_labels = _read_idx(labels_path, IDX_LABEL_MAGIC)
    if raw_images.shape[0] != raw_labels.shape[0]:
        raise CorpusError(
            f"image count {raw_images.shape[0]} does not match label count {raw_labels.shape[0]}"
        )
    order = np.arange(raw_images.shape[0])
    if shuffle_seed is not None:
        seeding.derive_rng(shuffle_seed, seeding.SHUFFLE).shuffle(order)
    labels = sorted(set(int(v) for v in raw_labels))
    class_count = max(labels) + 1
    by_label: dict[int, list[Image]] = {label: [] for label in labels}
    for idx in order:
        label = int(raw_labels[idx])
        pixels = raw_images[idx].astype(np.float64)[None, :, :]
        by_label[label].append(Image(Tensor(pixels), f"idx-{idx}"))
    train_galleries, test_galleries = [], []
    for label in labels:
        members = by_label[label]
        if set_size > len(members):
            raise CorpusError(
                f"set size exceeds gallery population: class {label} has {len(members)} images"
            )
        cut = int(len(members) * train_fraction)
        train_sets = _partition_sets(members[:cut], label, set_size)
        test_sets = _partition_sets(members[cut:], label, set_size)
        if not train_sets or not test_sets:
            raise CorpusError(
                f"set size exceeds gallery population: class {label} yields an empty split"
            )
        train_galleries.append(Gallery(label, train_sets))
        test_galleries.append(Gallery(label, test_sets))
    return Corpus(train_galleries, test_galleries, class_count)


# ---------------------------------------------------------------------------
# synthetic generators


def synthesize_corpus(class_count: int, sets_per_gallery: int, images_per_set: int,
                      image_shape: tuple[int, int, int], seed: int, *,
                      test_sets_per_gallery: int = 1, noise: float = 0.05) -> Corpus:
    """Deterministic blob corpus: class k is a Gaussian bump at a class-specific
    location on a circle, plus optional pixel noise."""
    if min(class_count, sets_per_gallery, images_per_set, test_sets_per_gallery) < 1:
        raise CorpusError("all corpus counts must be >= 1")
    channels, height, width = image_shape
    if min(channels, height, width) < 1:
        raise CorpusError(f"degenerate image shape {image_shape}")
    radius = min(height, width) / 4.0
    sigma = min(height, width) / 8.0
    yy, xx = np.mgrid[0:height, 0:width]

    def render(label: int, rng: np.random.Generator, img_id: str) -> Image:
        angle = 2.0 * np.pi * label / class_count
        cy = height / 2.0 + radius * np.sin(angle)
        cx = width / 2.0 + radius * np.cos(angle)
        bump = 0.9 * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * sigma ** 2))
        pixels = np.repeat(bump[None, :, :], channels, axis=0)
        if noise > 0:
            pixels = pixels + noise * rng.standard_normal(pixels.shape)
        return Image(Tensor(np.clip(pixels, 0.0, 1.0)), img_id)

    def build(kind: str, n_sets: int, base: int) -> list[Gallery]:
        galleries = []
        for label in range(class_count):
            sets = []
            for si in range(n_sets):
                rng = seeding.derive_rng(seed, seeding.CORPUS, base, label, si)
                images = [
                    render(label, rng, f"syn-{kind}-{label}-{si}-{ii}")
                    for ii in range(images_per_set)
                ]
                sets.append(ImageSet(images, label))
            galleries.append(Gallery(label, sets))
        return galleries

    return Corpus(build("train", sets_per_gallery, 0),
                  build("test", test_sets_per_gallery, 1), class_count)


# 5x7 glyph bitmaps for the digits 0-9
_GLYPHS = [
    ["01110", "10001", "10011", "10101", "11001", "10001", "01110"],
    ["00100", "01100", "00100", "00100", "00100", "00100", "01110"],
    ["01110", "10001", "00001", "00010", "00100", "01000", "11111"],
    ["11111", "00010", "00100", "00010", "00001", "10001", "01110"],
    ["00010", "00110", "01010", "10010", "11111", "00010", "00010"],
    ["11111", "10000", "11110", "00001", "00001", "10001", "01110"],
    ["00110", "01000", "10000", "11110", "10001", "10001", "01110"],
    ["11111", "00001", "00010", "00100", "01000", "01000", "01000"],
    ["01110", "10001", "10001", "01110", "10001", "10001", "01110"],
    ["01110", "10001", "10001", "01111", "00001", "00010", "01100"],
]
_GLYPH_ARRAYS = [
    np.array([[int(c) for c in row] for row in glyph], dtype=np.float64)
    for glyph in _GLYPHS
]


def _render_digit(label: int, rng: np.random.Generator, size: int) -> np.ndarray:
    """One raw-valued (1, size, size) digit image with jitter, scale and noise."""
    scale = int(rng.integers(2, 4))  # glyph upscaled to 10x14 or 15x21
    glyph = np.kron(_GLYPH_ARRAYS[label], np.ones((scale, scale)))
    gh, gw = glyph.shape
    canvas = np.zeros((size, size))
    oy = int(rng.integers(0, size - gh + 1))
    ox = int(rng.integers(0, size - gw + 1))
    intensity = rng.uniform(0.7, 1.0)
    canvas[oy:oy + gh, ox:ox + gw] = glyph * intensity
    canvas = canvas + 0.08 * rng.standard_normal(canvas.shape)
    return np.clip(canvas, 0.0, 1.0)[None, :, :] * 255.0


def digit_glyph_corpus(train_sets_per_gallery: int, test_set_counts: list[int],
                       images_per_set: int, seed: int, size: int = 28) -> Corpus:
    """Rendered-digit corpus with 10 galleries.

    ``test_set_counts`` gives the number of test sets per gallery, allowing
    uneven totals (e.g. 105 sets over 10 classes).
    """
    if len(test_set_counts) != 10:
        raise CorpusError("test_set_counts must list one entry per digit class")
    if size < 21 + 2:
        raise CorpusError(f"image size {size} too small for digit glyphs")
    train_galleries, test_galleries = [], []
    for label in range(10):
        train_sets, test_sets = [], []
        for si in range(train_sets_per_gallery):
            rng = seeding.derive_rng(seed, seeding.CORPUS, 0, label, si)
            images = [
                Image(Tensor(_render_digit(label, rng, size)), f"glyph-train-{label}-{si}-{ii}")
                for ii in range(images_per_set)
            ]
            train_sets.append(ImageSet(images, label))
        for si in range(test_set_counts[label]):
            rng = seeding.derive_rng(seed, seeding.CORPUS, 1, label, si)
            images = [
                Image(Tensor(_render_digit(label, rng, size)), f"glyph-test-{label}-{si}-{ii}")
                for ii in range(images_per_set)
            ]
            test_sets.append(ImageSet(images, label))
        train_galleries.append(Gallery(label, train_sets))
        test_galleries.append(Gallery(label, test_sets))
    return Corpus(train_galleries, test_galleries, 10)


# ---------------------------------------------------------------------------
# transforms


def normalize_set(image_set: ImageSet) -> ImageSet:
    """Divide every pixel by the maximum pixel value across the whole set."""
    peak = max(float(img.pixels.data.max()) for img in image_set.images)
    if peak <= 0.0:
        raise CorpusError("degenerate set: zero maximum")
    if peak == 1.0:
        return image_set
    return ImageSet(
        [Image(Tensor(img.pixels.data / peak), img.id) for img in image_set.images],
        image_set.gallery_label,
    )


def normalize_corpus(corpus: Corpus) -> Corpus:
    def norm(galleries):
        return [Gallery(g.label, [normalize_set(s) for s in g.sets]) for g in galleries]

    return Corpus(norm(corpus.train_galleries), norm(corpus.test_galleries), corpus.class_count)


def flatten_training_pool(corpus: Corpus) -> TrainingPool:
    """Flat (image, label) list in (gallery, set, image) order."""
    clean = [
        (img, gallery.label)
        for gallery in corpus.train_galleries
        for image_set in gallery.sets
        for img in image_set.images
    ]
    return TrainingPool(clean)


def resize_image(image: Image, size: int) -> Image:
    """Nearest-neighbour resample to (C, size, size)."""
    c, h, w = image.shape
    rows = (np.arange(size) * h // size).clip(0, h - 1)
    cols = (np.arange(size) * w // size).clip(0, w - 1)
    return Image(Tensor(image.pixels.data[:, rows][:, :, cols]), image.id)


def resize_corpus(corpus: Corpus, size: int) -> Corpus:
    def resize_galleries(galleries):
        return [
            Gallery(g.label, [
                ImageSet([resize_image(img, size) for img in s.images], s.gallery_label)
                for s in g.sets
            ])
            for g in galleries
        ]

    return Corpus(resize_galleries(corpus.train_galleries),
                  resize_galleries(corpus.test_galleries), corpus.class_count)


def content_hash(corpus: Corpus) -> str:
    """SHA-256 over the full structure and pixel payload."""
    h = hashlib.sha256()
    h.update(struct.pack("<I", corpus.class_count))
    for tag, galleries in (("train", corpus.train_galleries), ("test", corpus.test_galleries)):
        h.update(tag.encode())
        for gallery in galleries:
            h.update(struct.pack("<II", gallery.label, len(gallery.sets)))
            for image_set in gallery.sets:
                h.update(struct.pack("<I", len(image_set)))
                for img in image_set.images:
                    h.update(img.id.encode())
                    h.update(np.ascontiguousarray(img.pixels.data, dtype="<f8").tobytes())
    return h.hexdigest()
