"""Training, set mixing, Monte-Carlo inference and defence evaluation.

The flow mirrors the block diagram of the defence: train a clean baseline,
generate adversarial counterparts of the training sets against it, train the
defended model on the interleaved union, then at test time mix clean and
perturbed images per set at a configurable attack ratio and classify each set
from T stochastic forward passes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import seeding
from .attacks import AttackConfig, perturb_galleries
from .data import Corpus, Gallery, Image, ImageSet, flatten_training_pool
from .model import Model
from .network import MODE_MC, MODE_TRAIN, Network, default_architecture
from .optim import AdamState, adam_step
from .voting import VotingConfig, vote


class PipelineError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    learning_rate: float = 0.0001
    batch_size: int = 64
    early_stop_accuracy: float = 0.995

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise PipelineError("epochs and batch size must be >= 1")
        if self.learning_rate <= 0:
            raise PipelineError("learning rate must be positive")


@dataclass(frozen=True)
class McConfig:
    passes: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.passes < 1:
            raise PipelineError("number of stochastic passes must be >= 1")


@dataclass
class MixedTestSet:
    images: list[Image]
    perturbed_mask: np.ndarray  # bool per image
    ratio: float
    gallery_label: int

    def __post_init__(self):
        self.perturbed_mask = np.asarray(self.perturbed_mask, dtype=bool)
        if len(self.images) != self.perturbed_mask.shape[0]:
            raise PipelineError("mask length differs from image count")

    def __len__(self):
        return len(self.images)

    def stack(self) -> np.ndarray:
        return np.stack([img.pixels.data for img in self.images])


@dataclass
class McPosterior:
    per_pass: np.ndarray        # (T, d, C)
    mean_per_image: np.ndarray  # (d, C)

    def __post_init__(self):
        if self.per_pass.ndim != 3:
            raise PipelineError("per_pass must be (T, d, C)")
        sums = self.per_pass.sum(axis=2)
        if not np.allclose(sums, 1.0, atol=1e-9):
            raise PipelineError("per-pass probability rows must sum to 1")
        if not np.allclose(self.mean_per_image, self.per_pass.mean(axis=0), atol=1e-12):
            raise PipelineError("mean_per_image inconsistent with per_pass")


@dataclass
class EpochLog:
    epoch: int
    loss: float
    accuracy: float


@dataclass
class ResultRow:
    model: str
    attack: str
    adv_train: bool
    epsilon: float
    ratio: float
    sv: float   # percentages, 0..100
    mv: float
    ewv: float


# ---------------------------------------------------------------------------
# training


def _accuracy(network: Network, model_params, x: np.ndarray, labels: np.ndarray,
              batch_size: int = 256) -> float:
    hits = 0
    for start in range(0, x.shape[0], batch_size):
        probs = network.forward(model_params, x[start:start + batch_size]).data
        hits += int((np.argmax(probs, axis=1) == labels[start:start + batch_size]).sum())
    return hits / x.shape[0]


def train_model(network: Network, images: np.ndarray, labels: np.ndarray,
                config: TrainConfig, master_seed: int, tag: str = "model",
                log: Optional[list[EpochLog]] = None) -> Model:
    """Adam training with per-epoch seeded shuffling and dropout streams."""
    if images.shape[0] == 0:
        raise PipelineError("empty training pool")
    labels = np.asarray(labels, dtype=np.int64)
    params = network.init_params(seeding.derive_rng(master_seed, seeding.INIT))
    state = AdamState()
    for epoch in range(config.epochs):
        order = seeding.derive_rng(master_seed, seeding.SHUFFLE, epoch).permutation(images.shape[0])
        losses = []
        for bi, start in enumerate(range(0, images.shape[0], config.batch_size)):
            idx = order[start:start + config.batch_size]
            rng = seeding.derive_rng(master_seed, seeding.DROPOUT, epoch, bi)
            loss, grads = network.parameter_gradients(
                params, images[idx], labels[idx], MODE_TRAIN, rng)
            if not np.isfinite(loss):
                raise PipelineError(f"divergent loss at epoch {epoch}")
            params = adam_step(params, grads, state, config.learning_rate)
            losses.append(loss)
        accuracy = _accuracy(network, params, images, labels)
        if log is not None:
            log.append(EpochLog(epoch, float(np.mean(losses)), accuracy))
        if accuracy >= config.early_stop_accuracy:
            break
    return Model(network, params, tag)


@dataclass
class AdversarialTrainResult:
    baseline: Model
    defended: Model
    perturbed_train: list[Gallery]
    baseline_log: list[EpochLog] = field(default_factory=list)
    defended_log: list[EpochLog] = field(default_factory=list)


def adversarial_train(corpus: Corpus, attack_config: AttackConfig,
                      train_config: TrainConfig, master_seed: int,
                      network: Optional[Network] = None,
                      adv_train_config: Optional[TrainConfig] = None) -> AdversarialTrainResult:
    """Train the clean baseline, perturb the training sets against it, then
    train the defended model on the index-interleaved clean/perturbed union."""
    if network is None:
        network = Network(default_architecture(corpus.class_count), corpus.image_shape)
    pool = flatten_training_pool(corpus)
    clean_x = np.stack([img.pixels.data for img, _ in pool.clean])
    clean_y = np.array([label for _, label in pool.clean], dtype=np.int64)
    baseline_log: list[EpochLog] = []
    baseline = train_model(network, clean_x, clean_y, train_config, master_seed,
                           tag="baseline", log=baseline_log)

    perturbed_galleries, _ = perturb_galleries(baseline, corpus.train_galleries, attack_config)
    adv_pool = [
        (img, gallery.label)
        for gallery in perturbed_galleries
        for image_set in gallery.sets
        for img in image_set.images
    ]
    if len(adv_pool) != len(pool.clean):
        raise PipelineError("perturbed pool size differs from clean pool")
    union_x = np.empty((2 * clean_x.shape[0],) + clean_x.shape[1:])
    union_x[0::2] = clean_x
    union_x[1::2] = np.stack([img.pixels.data for img, _ in adv_pool])
    union_y = np.empty(2 * clean_y.shape[0], dtype=np.int64)
    union_y[0::2] = clean_y
    union_y[1::2] = np.array([label for _, label in adv_pool], dtype=np.int64)
    defended_log: list[EpochLog] = []
    defended = train_model(network, union_x, union_y,
                           adv_train_config or train_config, master_seed + 1,
                           tag="defended", log=defended_log)
    return AdversarialTrainResult(baseline, defended, perturbed_galleries,
                                  baseline_log, defended_log)


# ---------------------------------------------------------------------------
# test-set mixing and Monte-Carlo inference


def round_half_up(value: float) -> int:
    return int(np.floor(value + 0.5))


def mix_test_set(clean_set: ImageSet, perturbed_set: ImageSet, ratio: float,
                 rng: np.random.Generator) -> MixedTestSet:
    """Substitute round-half-up(ratio * n) randomly chosen positions with their
    perturbed counterparts, preserving image order."""
    if not (0.0 <= ratio <= 1.0):
        raise PipelineError(f"attack ratio {ratio} outside [0, 1]")
    n = len(clean_set)
    if len(perturbed_set) != n or perturbed_set.gallery_label != clean_set.gallery_label:
        raise PipelineError("clean and perturbed sets are misaligned")
    count = round_half_up(ratio * n)
    mask = np.zeros(n, dtype=bool)
    mask[rng.choice(n, size=count, replace=False)] = True
    images = [
        perturbed_set.images[i] if mask[i] else clean_set.images[i]
        for i in range(n)
    ]
    return MixedTestSet(images, mask, ratio, clean_set.gallery_label)


def _stack(image_set) -> np.ndarray:
    return image_set.stack()


def mc_predict_set(model: Model, image_set, mc: McConfig,
                   gallery_index: int = 0, set_index: int = 0) -> McPosterior:
    """T stochastic forward passes over a set; pass t draws its dropout masks
    from a generator derived from (seed, gallery, set, t)."""
    batch = _stack(image_set)
    per_pass = np.empty((mc.passes, batch.shape[0], model.network.class_count))
    for t in range(mc.passes):
        rng = seeding.derive_rng(mc.seed, seeding.MC_PASS, gallery_index, set_index, t)
        per_pass[t] = model.network.forward(model.params, batch, MODE_MC, rng).data
    return McPosterior(per_pass, per_pass.mean(axis=0))


# ---------------------------------------------------------------------------
# evaluation


def _paired_test_sets(corpus: Corpus, perturbed_test: list[Gallery]):
    if len(perturbed_test) != len(corpus.test_galleries):
        raise PipelineError("perturbed test galleries misaligned with corpus")
    pairs = []
    for gi, gallery in enumerate(corpus.test_galleries):
        adv_gallery = perturbed_test[gi]
        if adv_gallery.label != gallery.label or len(adv_gallery.sets) != len(gallery.sets):
            raise PipelineError("perturbed test galleries misaligned with corpus")
        for si, clean_set in enumerate(gallery.sets):
            pairs.append((gi, si, clean_set, adv_gallery.sets[si]))
    return pairs


def evaluate_defence(model: Model, corpus: Corpus, perturbed_test: list[Gallery],
                     ratios: Sequence[float], mc: McConfig, voting: VotingConfig,
                     mix_seed: int, *, attack_tag: str = "", epsilon: float = 0.0,
                     adv_train: bool = False,
                     audit: Optional[list] = None) -> list[ResultRow]:
    """Set-level accuracy per attack ratio for all three voting rules.

    The per-(set, pass) dropout stream does not depend on the ratio, so the
    clean and perturbed posterior passes are computed once per set and mixed
    posteriors are assembled row-wise; the result is bitwise identical to
    calling mc_predict_set on each mixed set.
    """
    pairs = _paired_test_sets(corpus, perturbed_test)
    if not pairs:
        raise PipelineError("no test sets to evaluate")
    rows = []
    posteriors = []
    for gi, si, clean_set, adv_set in pairs:
        clean_post = mc_predict_set(model, clean_set, mc, gi, si)
        adv_post = mc_predict_set(model, adv_set, mc, gi, si)
        posteriors.append((gi, si, clean_set.gallery_label, clean_post, adv_post))
    for ri, ratio in enumerate(ratios):
        hits = {"sv": 0, "mv": 0, "ewv": 0}
        for (gi, si, label, clean_post, adv_post) in posteriors:
            n = clean_post.per_pass.shape[1]
            rng = seeding.derive_rng(mix_seed, seeding.MIX, ri, gi, si)
            count = round_half_up(ratio * n)
            mask = np.zeros(n, dtype=bool)
            mask[rng.choice(n, size=count, replace=False)] = True
            per_pass = np.where(mask[None, :, None], adv_post.per_pass, clean_post.per_pass)
            posterior = McPosterior(per_pass, per_pass.mean(axis=0))
            outcome = vote(posterior, voting)
            if audit is not None:
                audit.append({
                    "model": model.tag, "adv_train": adv_train, "ratio": float(ratio),
                    "gallery": gi, "set": si, "label": label,
                    "mv": outcome.mv, "sv": outcome.sv, "ewv": outcome.ewv,
                    "mv_scores": outcome.mv_scores.tolist(),
                    "sv_scores": outcome.sv_scores.tolist(),
                    "ewv_scores": outcome.ewv_scores.tolist(),
                })
            hits["sv"] += int(outcome.sv == label)
            hits["mv"] += int(outcome.mv == label)
            hits["ewv"] += int(outcome.ewv == label)
        total = len(posteriors)
        rows.append(ResultRow(
            model=model.tag, attack=attack_tag, adv_train=adv_train, epsilon=epsilon,
            ratio=float(ratio),
            sv=100.0 * hits["sv"] / total,
            mv=100.0 * hits["mv"] / total,
            ewv=100.0 * hits["ewv"] / total,
        ))
    return rows


def single_shot_eval(model: Model, galleries: list[Gallery], mc: McConfig) -> float:
    """Per-image accuracy: each image classified independently by the argmax of
    its mean posterior over T stochastic passes."""
    hits = 0
    total = 0
    for gi, gallery in enumerate(galleries):
        for si, image_set in enumerate(gallery.sets):
            posterior = mc_predict_set(model, image_set, mc, gi, si)
            preds = np.argmax(posterior.mean_per_image, axis=1)
            hits += int((preds == gallery.label).sum())
            total += len(image_set)
    if total == 0:
        raise PipelineError("no test images")
    return 100.0 * hits / total
