import math
from collections import deque

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from scgseg.data import (
    ImageSample,
    batch_iterator,
    load_dataset,
    load_sample,
    make_synthetic_dataset,
    pair_directories,
    read_manifest,
    split_dataset,
    write_manifest,
)
from scgseg.errors import ValidationError


def _write(path, arr, mode="L"):
    Image.fromarray(arr, mode=mode).save(path)
    return path


def _samples(n, size=4):
    return [ImageSample(np.zeros((size, size), np.float32), np.zeros((size, size), np.uint8), f"s{i:03d}")
            for i in range(n)]


def count_components(mask):
    """4-connected components by breadth-first flood fill."""
    seen = np.zeros_like(mask, dtype=bool)
    h, w = mask.shape
    count = 0
    for y0, x0 in zip(*np.nonzero(mask)):
        if seen[y0, x0]:
            continue
        count += 1
        queue = deque([(y0, x0)])
        seen[y0, x0] = True
        while queue:
            y, x = queue.popleft()
            for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                yy, xx = y + dy, x + dx
                if 0 <= yy < h and 0 <= xx < w and mask[yy, xx] and not seen[yy, xx]:
                    seen[yy, xx] = True
                    queue.append((yy, xx))
    return count


class TestLoadSample:
    def test_source_resized_to_working_size(self, tmp_path, rng):
        img = rng.integers(0, 256, size=(650, 650), dtype=np.uint8)
        msk = np.zeros((650, 650), np.uint8)
        msk[200:400, 250:300] = 255
        s = load_sample(_write(tmp_path / "a.jpg", img), _write(tmp_path / "a_mask.png", msk), 512)
        assert s.image.shape == s.mask.shape == (512, 512)
        assert set(np.unique(s.mask)) == {0, 1}
        assert 0.0 <= s.image.min() and s.image.max() <= 1.0
        assert s.id == "a"

    def test_empty_mask_is_negative_slice(self, tmp_path):
        img = np.full((64, 64), 90, np.uint8)
        s = load_sample(_write(tmp_path / "i.png", img), _write(tmp_path / "m.png", np.zeros((64, 64), np.uint8)), 32)
        assert s.mask.sum() == 0

    def test_8bit_scaling_matches_division_by_255(self, tmp_path, rng):
        img = rng.integers(0, 256, size=(40, 40), dtype=np.uint8)
        img[3, 7] = 255
        s = load_sample(_write(tmp_path / "i.png", img), _write(tmp_path / "m.png", np.zeros((40, 40), np.uint8)), 40)
        expected = np.array([[v / 255.0 for v in row] for row in img.tolist()], dtype=np.float32)
        np.testing.assert_array_equal(s.image, expected)
        assert s.image.max() == 1.0

    def test_rgb_collapses_to_gray(self, tmp_path):
        rgb = np.zeros((16, 16, 3), np.uint8)
        rgb[..., :] = 200
        s = load_sample(_write(tmp_path / "i.png", rgb, "RGB"), _write(tmp_path / "m.png", np.zeros((16, 16), np.uint8)), 16)
        assert s.image.shape == (16, 16)
        assert s.image[0, 0] == pytest.approx(200 / 255, abs=1e-6)

    def test_mask_stored_as_zero_one(self, tmp_path):
        m = np.zeros((16, 16), np.uint8)
        m[4:8, 4:8] = 1
        s = load_sample(_write(tmp_path / "i.png", np.zeros((16, 16), np.uint8)), _write(tmp_path / "m.png", m), 16)
        assert s.mask.sum() == 16

    def test_nearest_resize_keeps_mask_binary(self, tmp_path, rng):
        m = (rng.random((100, 100)) > 0.5).astype(np.uint8) * 255
        s = load_sample(_write(tmp_path / "i.png", np.zeros((100, 100), np.uint8)), _write(tmp_path / "m.png", m), 48)
        assert set(np.unique(s.mask)) <= {0, 1}

    def test_unreadable_file_names_path(self, tmp_path):
        bad = tmp_path / "broken.png"
        bad.write_bytes(b"not an image")
        ok = _write(tmp_path / "m.png", np.zeros((8, 8), np.uint8))
        with pytest.raises(OSError, match="broken.png"):
            load_sample(bad, ok, 8)
        with pytest.raises(OSError, match="missing.png"):
            load_sample(tmp_path / "missing.png", ok, 8)

    def test_shape_mismatch_without_resize(self, tmp_path):
        with pytest.raises(ValidationError):
            load_sample(_write(tmp_path / "i.png", np.zeros((8, 8), np.uint8)),
                        _write(tmp_path / "m.png", np.zeros((8, 9), np.uint8)), None)


class TestDirectoriesAndManifest:
    def test_pairing_by_stem_and_manifest_roundtrip(self, tmp_path):
        (tmp_path / "img").mkdir()
        (tmp_path / "msk").mkdir()
        for name in ("b", "a", "c"):
            _write(tmp_path / "img" / f"{name}.jpg", np.zeros((8, 8), np.uint8))
            _write(tmp_path / "msk" / f"{name}.png", np.zeros((8, 8), np.uint8))
        pairs = pair_directories(tmp_path / "img", tmp_path / "msk")
        assert [p[2] for p in pairs] == ["a", "b", "c"]
        write_manifest(tmp_path / "m.tsv", [(f"img/{i.name}", f"msk/{m.name}", sid) for i, m, sid in pairs])
        entries = read_manifest(tmp_path / "m.tsv")
        assert [e[2] for e in entries] == ["a", "b", "c"]
        assert len(load_dataset(entries, 8)) == 3

    def test_missing_mask(self, tmp_path):
        (tmp_path / "img").mkdir()
        (tmp_path / "msk").mkdir()
        _write(tmp_path / "img" / "x.png", np.zeros((8, 8), np.uint8))
        with pytest.raises(ValidationError, match="no mask"):
            pair_directories(tmp_path / "img", tmp_path / "msk")

    def test_malformed_manifest(self, tmp_path):
        (tmp_path / "m.tsv").write_text("a.png b.png id\n", encoding="utf-8")
        with pytest.raises(ValidationError, match="tab-separated"):
            read_manifest(tmp_path / "m.tsv")


class TestSplit:
    def test_268_50_split(self):
        split = split_dataset(_samples(318), 268 / 318, seed=3)
        assert (len(split.train), len(split.test)) == (268, 50)

    def test_two_samples(self):
        split = split_dataset(_samples(2), 0.5, 0)
        assert (len(split.train), len(split.test)) == (1, 1)

    def test_deterministic(self):
        a = split_dataset(_samples(30), 0.7, 11)
        b = split_dataset(_samples(30), 0.7, 11)
        assert [s.id for s in a.train] == [s.id for s in b.train]
        assert [s.id for s in a.test] == [s.id for s in b.test]

    def test_input_order_irrelevant(self):
        s = _samples(20)
        a = split_dataset(s, 0.6, 5)
        b = split_dataset(s[::-1], 0.6, 5)
        assert [x.id for x in a.train] == [x.id for x in b.train]

    def test_too_few(self):
        with pytest.raises(ValidationError):
            split_dataset(_samples(1), 0.5, 0)

    @settings(max_examples=60, deadline=None)
    @given(n=st.integers(2, 200), frac=st.floats(0.01, 0.99), seed=st.integers(0, 2**31))
    def test_partition_property(self, n, frac, seed):
        s = _samples(n, 1)
        split = split_dataset(s, frac, seed)
        train, test = {x.id for x in split.train}, {x.id for x in split.test}
        assert not train & test
        assert train | test == {x.id for x in s}
        assert len(train) == min(max(math.floor(frac * n + 0.5), 1), n - 1)


class TestSynthetic:
    def test_component_counts(self):
        samples = make_synthetic_dataset(8, 128, 0)
        assert len(samples) == 8
        for s in samples:
            assert 1 <= count_components(s.mask) <= 3

    def test_bitwise_reproducible(self):
        a = make_synthetic_dataset(1, 64, 42)[0]
        b = make_synthetic_dataset(1, 64, 42)[0]
        assert np.array_equal(a.image, b.image) and np.array_equal(a.mask, b.mask)

    def test_mask_is_exact_blob_support(self):
        # blobs are stamped at >= 0.55 and background stays <= 0.45
        for s in make_synthetic_dataset(6, 96, 7):
            np.testing.assert_array_equal(s.mask.astype(bool), s.image > 0.5)

    def test_value_ranges(self):
        for s in make_synthetic_dataset(4, 32, 1):
            assert s.image.dtype == np.float32 and 0 <= s.image.min() and s.image.max() <= 1
            assert set(np.unique(s.mask)) <= {0, 1}

    def test_too_small(self):
        with pytest.raises(ValidationError):
            make_synthetic_dataset(1, 31, 0)


class TestBatchIterator:
    def test_counts(self):
        batches = list(batch_iterator(_samples(50), 8))
        assert len(batches) == 7
        assert batches[-1][0].shape[0] == 2
        assert batches[0][0].shape == (8, 1, 4, 4)

    def test_single(self):
        s = make_synthetic_dataset(1, 32, 3)
        (x, y), = list(batch_iterator(s, 1))
        assert torch.equal(x[0, 0], torch.from_numpy(s[0].image))
        assert torch.equal(y[0, 0], torch.from_numpy(s[0].mask).float())

    def test_shuffle_deterministic_and_source_order(self):
        s = make_synthetic_dataset(10, 32, 0)
        a = [x for x, _ in batch_iterator(s, 3, shuffle_seed=4)]
        b = [x for x, _ in batch_iterator(s, 3, shuffle_seed=4)]
        assert all(torch.equal(u, v) for u, v in zip(a, b))
        plain = torch.cat([x for x, _ in batch_iterator(s, 3)])
        assert all(torch.equal(plain[i, 0], torch.from_numpy(s[i].image)) for i in range(10))

    def test_errors(self):
        with pytest.raises(ValidationError):
            batch_iterator([], 2)
        with pytest.raises(ValidationError):
            batch_iterator(_samples(2), 0)

    @settings(max_examples=50, deadline=None)
    @given(n=st.integers(1, 40), bs=st.integers(1, 12))
    def test_batch_count_property(self, n, bs):
        sizes = [x.shape[0] for x, _ in batch_iterator(_samples(n, 1), bs)]
        assert len(sizes) == -(-n // bs) and sum(sizes) == n
