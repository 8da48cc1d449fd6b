"""Corpus model, IDX ingestion, synthetic generators and transforms."""

import struct

import numpy as np
import pytest

from setdefense.data import (Corpus, CorpusError, Gallery, Image, ImageSet,
                             TrainingPool, content_hash, digit_glyph_corpus,
                             flatten_training_pool, load_idx_corpus,
                             normalize_corpus, normalize_set, resize_corpus,
                             resize_image, synthesize_corpus)
from setdefense.data import IDX_IMAGE_MAGIC, IDX_LABEL_MAGIC
from setdefense.tensor import Tensor


def img(value, shape=(1, 2, 2), id="img"):
    return Image(Tensor(np.full(shape, float(value))), id)


def write_idx_images(path, images):
    arr = np.asarray(images, dtype=np.uint8)
    payload = struct.pack(">IIII", IDX_IMAGE_MAGIC, *arr.shape) + arr.tobytes()
    path.write_bytes(payload)


def write_idx_labels(path, labels):
    arr = np.asarray(labels, dtype=np.uint8)
    payload = struct.pack(">II", IDX_LABEL_MAGIC, arr.shape[0]) + arr.tobytes()
    path.write_bytes(payload)


@pytest.fixture
def idx_pair(tmp_path):
    """1000 tiny images over 10 classes, 100 per class, interleaved order."""
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, size=(1000, 8, 8), dtype=np.uint8)
    labels = np.tile(np.arange(10, dtype=np.uint8), 100)
    images_path = tmp_path / "images.idx"
    labels_path = tmp_path / "labels.idx"
    write_idx_images(images_path, images)
    write_idx_labels(labels_path, labels)
    return images_path, labels_path


class TestModelTypes:
    def test_image_requires_chw_and_nonnegative(self):
        with pytest.raises(CorpusError, match="\\(C, H, W\\)"):
            Image(Tensor(np.zeros((2, 2))), "flat")
        with pytest.raises(CorpusError, match="negative"):
            Image(Tensor(np.full((1, 2, 2), -1.0)), "neg")

    def test_set_rejects_mixed_shapes_and_empty(self):
        with pytest.raises(CorpusError, match="at least one image"):
            ImageSet([], 0)
        with pytest.raises(CorpusError, match="mixes shapes"):
            ImageSet([img(1), img(1, shape=(1, 3, 3))], 0)

    def test_gallery_label_consistency(self):
        with pytest.raises(CorpusError, match="labelled"):
            Gallery(0, [ImageSet([img(1)], 1)])

    def test_corpus_label_sets_must_match(self):
        train = [Gallery(0, [ImageSet([img(1)], 0)])]
        test = [Gallery(1, [ImageSet([img(1)], 1)])]
        with pytest.raises(CorpusError, match="differ"):
            Corpus(train, test, 2)

    def test_training_pool_alignment(self):
        clean = [(img(1), 0), (img(2), 1)]
        with pytest.raises(CorpusError, match="length"):
            TrainingPool(clean, perturbed=[(img(1), 0)])
        with pytest.raises(CorpusError, match="misaligned"):
            TrainingPool(clean, perturbed=[(img(1), 0), (img(2), 0)])


class TestIdxIngestion:
    def test_paper_style_partition(self, idx_pair):
        corpus = load_idx_corpus(*idx_pair, set_size=20, train_fraction=0.8)
        assert corpus.class_count == 10
        assert len(corpus.train_galleries) == 10
        for gallery in corpus.train_galleries:
            # 80 train images per class -> 4 sets of 20
            assert len(gallery.sets) == 4
            assert all(len(s) == 20 for s in gallery.sets)
        for gallery in corpus.test_galleries:
            assert len(gallery.sets) == 1

    def test_partition_soundness_with_partial_sets_dropped(self, idx_pair):
        # 100 per class: 80 train -> 5 sets of 15 (5 dropped), 20 test -> 1 set
        corpus = load_idx_corpus(*idx_pair, set_size=15, train_fraction=0.8)
        ids = [img.id
               for galleries in (corpus.train_galleries, corpus.test_galleries)
               for gallery in galleries
               for image_set in gallery.sets
               for img in image_set.images]
        assert len(ids) == len(set(ids))  # each image used at most once
        assert sum(g.image_count for g in corpus.train_galleries) == 10 * 75
        assert sum(g.image_count for g in corpus.test_galleries) == 10 * 15
        corpus20 = load_idx_corpus(*idx_pair, set_size=20, train_fraction=0.8)
        assert sum(g.image_count for g in corpus20.train_galleries) == 800
        assert sum(g.image_count for g in corpus20.test_galleries) == 200

    def test_ingestion_determinism(self, idx_pair):
        a = load_idx_corpus(*idx_pair, set_size=20, train_fraction=0.8)
        b = load_idx_corpus(*idx_pair, set_size=20, train_fraction=0.8)
        assert content_hash(a) == content_hash(b)

    def test_set_size_exceeding_population_rejected(self, idx_pair):
        with pytest.raises(CorpusError, match="set size exceeds gallery population"):
            load_idx_corpus(*idx_pair, set_size=101, train_fraction=0.8)

    def test_bad_magic_rejected(self, tmp_path, idx_pair):
        bad = tmp_path / "bad.idx"
        bad.write_bytes(struct.pack(">III", 0xDEADBEEF, 10, 8))
        with pytest.raises(CorpusError, match="bad IDX magic"):
            load_idx_corpus(bad, idx_pair[1], set_size=10, train_fraction=0.8)

    def test_truncated_payload_rejected(self, tmp_path, idx_pair):
        truncated = tmp_path / "short.idx"
        full = idx_pair[0].read_bytes()
        truncated.write_bytes(full[: len(full) // 2])
        with pytest.raises(CorpusError, match="truncated IDX payload"):
            load_idx_corpus(truncated, idx_pair[1], set_size=10, train_fraction=0.8)

    def test_count_mismatch_rejected(self, tmp_path, idx_pair):
        labels = tmp_path / "fewer.idx"
        write_idx_labels(labels, np.zeros(999, dtype=np.uint8))
        with pytest.raises(CorpusError, match="does not match label count"):
            load_idx_corpus(idx_pair[0], labels, set_size=10, train_fraction=0.8)

    def test_invalid_fractions_rejected(self, idx_pair):
        with pytest.raises(CorpusError, match="train fraction"):
            load_idx_corpus(*idx_pair, set_size=10, train_fraction=1.0)
        with pytest.raises(CorpusError, match="set size"):
            load_idx_corpus(*idx_pair, set_size=0, train_fraction=0.8)


class TestSyntheticCorpora:
    def test_same_seed_bitwise_identical(self):
        a = synthesize_corpus(3, 2, 4, (1, 10, 10), seed=7)
        b = synthesize_corpus(3, 2, 4, (1, 10, 10), seed=7)
        assert content_hash(a) == content_hash(b)

    def test_different_seed_differs(self):
        a = synthesize_corpus(3, 2, 4, (1, 10, 10), seed=7)
        b = synthesize_corpus(3, 2, 4, (1, 10, 10), seed=8)
        assert content_hash(a) != content_hash(b)

    def test_noise_zero_classes_identifiable_by_blob_position(self):
        corpus = synthesize_corpus(2, 1, 5, (1, 12, 12), seed=0, noise=0.0)
        centroids = {}
        for gallery in corpus.train_galleries:
            pixels = gallery.sets[0].images[0].pixels.data[0]
            yy, xx = np.mgrid[0:12, 0:12]
            total = pixels.sum()
            centroids[gallery.label] = (float((pixels * yy).sum() / total),
                                        float((pixels * xx).sum() / total))
        assert np.hypot(centroids[0][0] - centroids[1][0],
                        centroids[0][1] - centroids[1][1]) > 3.0

    def test_degenerate_shape_rejected(self):
        with pytest.raises(CorpusError, match="degenerate image shape"):
            synthesize_corpus(2, 1, 1, (0, 8, 8), seed=0)
        with pytest.raises(CorpusError, match=">= 1"):
            synthesize_corpus(0, 1, 1, (1, 8, 8), seed=0)

    def test_digit_corpus_structure_and_determinism(self):
        counts = [2] * 10
        a = digit_glyph_corpus(1, counts, 5, seed=3, size=28)
        b = digit_glyph_corpus(1, counts, 5, seed=3, size=28)
        assert content_hash(a) == content_hash(b)
        assert a.class_count == 10
        assert sum(len(g.sets) for g in a.test_galleries) == 20
        assert a.image_shape == (1, 28, 28)
        # raw pixel values before normalization live on the 0-255 scale
        peak = max(float(s.images[0].pixels.data.max())
                   for g in a.train_galleries for s in g.sets)
        assert peak > 1.5

    def test_digit_corpus_size_guard(self):
        with pytest.raises(CorpusError, match="too small"):
            digit_glyph_corpus(1, [1] * 10, 2, seed=0, size=16)
        with pytest.raises(CorpusError, match="one entry per digit"):
            digit_glyph_corpus(1, [1] * 9, 2, seed=0)


class TestNormalization:
    def test_divide_by_255(self):
        raw = ImageSet([Image(Tensor(np.full((1, 2, 2), 255.0)), "a"),
                        Image(Tensor(np.full((1, 2, 2), 51.0)), "b")], 0)
        out = normalize_set(raw)
        assert out.images[0].pixels.data.max() == pytest.approx(1.0)
        assert out.images[1].pixels.data.max() == pytest.approx(51.0 / 255.0)

    def test_idempotent_at_unit_max(self):
        unit = ImageSet([Image(Tensor(np.array([[[1.0, 0.25]]])), "a")], 0)
        assert normalize_set(unit) is unit

    def test_set_wide_maximum_rule(self):
        pair = ImageSet([img(100.0, id="a"), img(200.0, id="b")], 0)
        out = normalize_set(pair)
        assert out.images[0].pixels.data.max() == pytest.approx(0.5)
        assert out.images[1].pixels.data.max() == pytest.approx(1.0)

    def test_zero_set_rejected(self):
        with pytest.raises(CorpusError, match="degenerate set: zero maximum"):
            normalize_set(ImageSet([img(0.0)], 0))

    def test_normalized_corpus_bounds(self):
        corpus = normalize_corpus(digit_glyph_corpus(1, [1] * 10, 3, seed=1))
        for gallery in corpus.train_galleries + corpus.test_galleries:
            for image_set in gallery.sets:
                stacked = image_set.stack()
                assert stacked.min() >= 0.0
                assert stacked.max() == pytest.approx(1.0, abs=1e-12)


class TestPoolAndResize:
    def test_flatten_order_and_labels(self):
        galleries = [
            Gallery(label, [ImageSet([img(1, id=f"{label}-{i}") for i in range(3)], label)])
            for label in range(2)
        ]
        corpus = Corpus(galleries, galleries, 2)
        pool = flatten_training_pool(corpus)
        assert [label for _, label in pool.clean] == [0, 0, 0, 1, 1, 1]
        assert [image.id for image, _ in pool.clean] == \
            ["0-0", "0-1", "0-2", "1-0", "1-1", "1-2"]
        assert pool.perturbed is None

    def test_pool_length_accounting(self):
        corpus = synthesize_corpus(3, 2, 4, (1, 10, 10), seed=0)
        pool = flatten_training_pool(corpus)
        assert len(pool.clean) == 3 * 2 * 4

    def test_resize_integer_upscale_then_downscale_is_exact(self, rng):
        original = Image(Tensor(rng.uniform(size=(1, 8, 8))), "x")
        up = resize_image(original, 16)
        down = resize_image(up, 8)
        np.testing.assert_array_equal(down.pixels.data, original.pixels.data)

    def test_resize_corpus_shape(self):
        corpus = synthesize_corpus(2, 1, 2, (1, 12, 12), seed=0)
        resized = resize_corpus(corpus, 20)
        assert resized.image_shape == (1, 20, 20)

    def test_content_hash_sensitivity(self):
        corpus = synthesize_corpus(2, 1, 2, (1, 10, 10), seed=0)
        before = content_hash(corpus)
        corpus.train_galleries[0].sets[0].images[0].pixels.data[0, 0, 0] += 1e-9
        assert content_hash(corpus) != before
