"""Gradient-based adversarial example generation.

All attacks run against the deterministic-mode model so a given (checkpoint,
config, image) triple always yields the same adversarial image, and all
operate on [0, 1]-normalized pixels with per-image gradients.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .data import Gallery, Image, ImageSet
from .model import Model
from .tensor import Tensor

FGSM = "fgsm"
PGD = "pgd"
DEEPFOOL = "deepfool"
_KINDS = (FGSM, PGD, DEEPFOOL)


class AttackError(ValueError):
    pass


@dataclass(frozen=True)
class AttackConfig:
    kind: str = FGSM
    epsilon: float = 0.05          # L-inf budget, unused by deepfool
    pgd_step_size: Optional[float] = None  # defaults to epsilon / 4
    pgd_steps: int = 10
    deepfool_max_iter: int = 50
    deepfool_overshoot: float = 0.02

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise AttackError(f"unknown attack kind {self.kind!r}")
        if self.epsilon < 0:
            raise AttackError(f"epsilon {self.epsilon} must be >= 0")
        if self.pgd_step_size is not None and self.pgd_step_size < 0:
            raise AttackError("pgd step size must be >= 0")
        if self.pgd_steps < 0 or self.deepfool_max_iter < 0:
            raise AttackError("iteration counts must be >= 0")
        if self.deepfool_overshoot < 0:
            raise AttackError("deepfool overshoot must be >= 0")

    @property
    def step_size(self) -> float:
        return self.epsilon / 4.0 if self.pgd_step_size is None else self.pgd_step_size


@dataclass
class AdversarialRecord:
    original: Image
    adversarial: Image
    source_label: int
    model_fingerprint: str
    config: AttackConfig
    flipped: bool = True  # deepfool only: whether the label actually changed


def _checked_gradient(grad: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(grad)):
        raise AttackError("non-finite gradient")
    return grad


def fgsm(model: Model, image: Image, label: int, epsilon: float) -> AdversarialRecord:
    """Single signed-gradient step of size epsilon, clipped to [0, 1]."""
    x = image.pixels.data
    loss = model.network.loss_and_input_gradient(model.params, x, label)
    grad = _checked_gradient(loss.input_gradient.data)
    adv = np.clip(x + epsilon * np.sign(grad), 0.0, 1.0)
    return AdversarialRecord(image, Image(Tensor(adv), image.id), label,
                             model.fingerprint(), AttackConfig(FGSM, epsilon=epsilon))


def pgd(model: Model, image: Image, label: int, config: AttackConfig) -> AdversarialRecord:
    """Iterated signed steps projected onto the L-inf ball and the pixel box."""
    x = image.pixels.data
    lo = np.clip(x - config.epsilon, 0.0, 1.0)
    hi = np.clip(x + config.epsilon, 0.0, 1.0)
    adv = x.copy()
    for _ in range(config.pgd_steps):
        loss = model.network.loss_and_input_gradient(model.params, adv, label)
        grad = _checked_gradient(loss.input_gradient.data)
        adv = np.clip(adv + config.step_size * np.sign(grad), lo, hi)
    return AdversarialRecord(image, Image(Tensor(adv), image.id), label,
                             model.fingerprint(), config)


def deepfool(model: Model, image: Image, config: AttackConfig) -> AdversarialRecord:
    """Iterative minimal-norm push across the nearest linearized class boundary."""
    x = image.pixels.data
    label0 = int(np.argmax(model.network.logits(model.params, x)))
    class_count = model.network.class_count
    if class_count < 2:
        raise AttackError("deepfool needs at least two classes")
    overshoot = config.deepfool_overshoot
    r_total = np.zeros_like(x)
    flipped = False
    for _ in range(config.deepfool_max_iter):
        current = x + (1.0 + overshoot) * r_total
        logits = model.network.logits(model.params, current)
        if int(np.argmax(logits)) != label0:
            flipped = True
            break
        grads = [
            _checked_gradient(model.network.logit_input_gradient(model.params, current, k))
            for k in range(class_count)
        ]
        best_step = None
        best_dist = np.inf
        for k in range(class_count):
            if k == label0:
                continue
            w = grads[k] - grads[label0]
            f = logits[k] - logits[label0]
            norm2 = float(np.sum(w * w))
            if norm2 == 0.0:
                continue
            dist = abs(f) / np.sqrt(norm2)
            if dist < best_dist:
                best_dist = dist
                best_step = (abs(f) / norm2) * w
        if best_step is None:
            break
        r_total = r_total + best_step
    else:
        current = x + (1.0 + overshoot) * r_total
        flipped = int(np.argmax(model.network.logits(model.params, current))) != label0
    adv = np.clip(x + (1.0 + overshoot) * r_total, 0.0, 1.0)
    adv_label = int(np.argmax(model.network.logits(model.params, adv)))
    return AdversarialRecord(image, Image(Tensor(adv), image.id), label0,
                             model.fingerprint(), config, flipped=adv_label != label0)


def attack_image(model: Model, image: Image, label: int, config: AttackConfig) -> AdversarialRecord:
    if config.kind == FGSM:
        return fgsm(model, image, label, config.epsilon)
    if config.kind == PGD:
        return pgd(model, image, label, config)
    return deepfool(model, image, config)


def perturb_galleries(model: Model, galleries: list[Gallery],
                      config: AttackConfig) -> tuple[list[Gallery], list[AdversarialRecord]]:
    """Replace every image by its adversarial counterpart versus its true label.

    Gallery/set structure and image order are preserved exactly, so the output
    aligns index-wise with the input.
    """
    perturbed = []
    records = []
    for gallery in galleries:
        sets = []
        for image_set in gallery.sets:
            images = []
            for img in image_set.images:
                record = attack_image(model, img, gallery.label, config)
                records.append(record)
                images.append(record.adversarial)
            sets.append(ImageSet(images, gallery.label))
        perturbed.append(Gallery(gallery.label, sets))
    return perturbed, records


# ---------------------------------------------------------------------------
# on-disk cache of perturbed galleries


def cache_key(corpus_hash: str, model_fingerprint: str, config: AttackConfig) -> str:
    payload = "|".join([
        corpus_hash, model_fingerprint, config.kind,
        repr(config.epsilon), repr(config.step_size), str(config.pgd_steps),
        str(config.deepfool_max_iter), repr(config.deepfool_overshoot),
    ])
    return hashlib.sha256(payload.encode()).hexdigest()[:24]


def _write_tensor_record(out: bytearray, name: str, data: np.ndarray):
    raw = name.encode("utf-8")
    out += struct.pack("<I", len(raw)) + raw
    out += struct.pack("<I", len(data.shape))
    out += struct.pack(f"<{len(data.shape)}I", *data.shape)
    out += np.ascontiguousarray(data, dtype="<f8").tobytes()


def save_perturbed(cache_dir, key: str, galleries: list[Gallery], *, corpus_hash: str,
                   model_fingerprint: str, config: AttackConfig):
    entry = Path(cache_dir) / key
    entry.mkdir(parents=True, exist_ok=True)
    manifest = [
        f"attack = {config.kind}",
        f"epsilon = {config.epsilon!r}",
        f"pgd_step_size = {config.step_size!r}",
        f"pgd_steps = {config.pgd_steps}",
        f"deepfool_max_iter = {config.deepfool_max_iter}",
        f"deepfool_overshoot = {config.deepfool_overshoot!r}",
        f"source_hash = {corpus_hash}",
        f"model_fingerprint = {model_fingerprint}",
    ]
    (entry / "manifest.txt").write_text("\n".join(manifest) + "\n")
    out = bytearray()
    out += struct.pack("<I", len(galleries))
    for gallery in galleries:
        out += struct.pack("<II", gallery.label, len(gallery.sets))
        for image_set in gallery.sets:
            out += struct.pack("<I", len(image_set))
            for img in image_set.images:
                _write_tensor_record(out, img.id, img.pixels.data)
    (entry / "tensors.bin").write_bytes(bytes(out))


def load_perturbed(cache_dir, key: str) -> Optional[list[Gallery]]:
    entry = Path(cache_dir) / key / "tensors.bin"
    if not entry.exists():
        return None
    data = entry.read_bytes()
    pos = 0

    def take(fmt):
        nonlocal pos
        values = struct.unpack_from(fmt, data, pos)
        pos += struct.calcsize(fmt)
        return values

    (gallery_count,) = take("<I")
    galleries = []
    for _ in range(gallery_count):
        label, set_count = take("<II")
        sets = []
        for _ in range(set_count):
            (image_count,) = take("<I")
            images = []
            for _ in range(image_count):
                (name_len,) = take("<I")
                name = data[pos:pos + name_len].decode("utf-8")
                pos += name_len
                (rank,) = take("<I")
                shape = take(f"<{rank}I")
                count = int(np.prod(shape))
                pixels = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(shape)
                pos += count * 8
                images.append(Image(Tensor(pixels.copy()), name))
            sets.append(ImageSet(images, label))
        galleries.append(Gallery(label, sets))
    return galleries
