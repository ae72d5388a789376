import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tttlab.data import (FormatError, augment, load_cifar10,
                         serialize_cifar10, synth_recall_task,
                         write_synthetic_cifar)


def make_record(label, fill):
    return bytes([label]) + bytes([fill]) * 3072


class TestCifarLoader:
    def test_record_count(self, tmp_path):
        path = tmp_path / "batch.bin"
        path.write_bytes(make_record(0, 10) * 100)
        ds = load_cifar10(str(path))
        assert len(ds) == 100 and ds.images.shape == (100, 32, 32, 3)

    def test_constructed_fixture(self, tmp_path):
        path = tmp_path / "one.bin"
        path.write_bytes(make_record(3, 255))
        ds = load_cifar10(str(path))
        assert ds.labels[0] == 3
        assert np.array_equal(ds.images[0], np.ones((32, 32, 3), dtype=np.float32))

    def test_round_trip_bytes(self, tmp_path):
        rng = np.random.default_rng(0)
        raw = rng.integers(0, 256, size=5 * 3073, dtype=np.uint8)
        raw[::3073] = rng.integers(0, 10, size=5, dtype=np.uint8)  # label bytes
        path = tmp_path / "five.bin"
        path.write_bytes(raw.tobytes())
        ds = load_cifar10(str(path))
        assert serialize_cifar10(ds) == raw.tobytes()

    def test_bad_length(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(b"\x00" * 3072)
        with pytest.raises(FormatError):
            load_cifar10(str(path))

    def test_bad_label(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(make_record(11, 0))
        with pytest.raises(FormatError):
            load_cifar10(str(path))

    def test_directory_split_layout(self, tmp_path):
        write_synthetic_cifar(str(tmp_path), seed=1, n_train=50, n_test=20)
        train = load_cifar10(str(tmp_path), "train")
        test = load_cifar10(str(tmp_path), "test")
        assert len(train) == 50 and len(test) == 20
        assert train.images.min() >= 0.0 and train.images.max() <= 1.0
        assert set(np.unique(train.labels)) <= set(range(10))

    def test_missing_batch_file(self, tmp_path):
        with pytest.raises(FormatError):
            load_cifar10(str(tmp_path), "train")


class TestSynthRecall:
    def test_same_seed_identical(self):
        a = synth_recall_task(7, 10, 9, 4)
        b = synth_recall_task(7, 10, 9, 4)
        assert np.array_equal(a.tokens, b.tokens)
        assert np.array_equal(a.labels, b.labels)

    def test_different_seed_differs(self):
        a = synth_recall_task(7, 10, 9, 4)
        b = synth_recall_task(8, 10, 9, 4)
        assert not np.array_equal(a.tokens, b.tokens)

    def test_empty(self):
        a = synth_recall_task(0, 0, 9, 4)
        assert len(a) == 0 and a.tokens.shape[0] == 0

    def test_planted_pairs_collision_free_and_consistent(self):
        task = synth_recall_task(3, 20, 9, 4)
        for i in range(20):
            keys = task.pair_keys[i]
            assert len(set(keys.tolist())) == len(keys)  # no key collisions
            # tokens actually carry the planted codebook rows
            assert np.allclose(task.tokens[i, :-1, :4], task.key_book[keys], atol=1e-6)
            vals = task.pair_vals[i]
            assert np.allclose(task.tokens[i, :-1, 4:], task.val_book[vals], atol=1e-6)
            # the query token repeats a planted key with a zeroed value slot
            qkey = task.tokens[i, -1, :4]
            matches = np.where(np.abs(task.key_book[keys] - qkey).max(1) < 1e-6)[0]
            assert len(matches) == 1
            assert np.all(task.tokens[i, -1, 4:] == 0.0)
            assert task.labels[i] == vals[matches[0]]

    def test_query_label_in_range(self):
        task = synth_recall_task(5, 50, 9, 4, n_vals=10)
        assert task.labels.min() >= 0 and task.labels.max() < 10


class TestAugment:
    def test_flip_twice_is_identity(self):
        img = np.random.default_rng(1).random((32, 32, 3)).astype(np.float32)
        once = augment(img, seed=(5, 0), crop_pad=0)
        twice = augment(once, seed=(5, 0), crop_pad=0)
        assert np.array_equal(twice, img)

    def test_deterministic_per_seed(self):
        img = np.random.default_rng(2).random((32, 32, 3)).astype(np.float32)
        a = augment(img, seed=(9, 1))
        b = augment(img, seed=(9, 1))
        assert np.array_equal(a, b)

    def test_zero_shift_crop_is_identity(self):
        from tttlab.data import crop_shift
        img = np.random.default_rng(3).random((32, 32, 3)).astype(np.float32)
        assert np.array_equal(crop_shift(img, 4, 0, 0), img)

    def test_crop_shifts_content(self):
        from tttlab.data import crop_shift
        img = np.zeros((8, 8, 1), dtype=np.float32)
        img[0, 0, 0] = 1.0
        out = crop_shift(img, 2, 1, 1)
        assert out[1, 1, 0] == 1.0 and out[0, 0, 0] == 0.0

    @given(st.integers(0, 2 ** 31 - 1))
    @settings(max_examples=20, deadline=None)
    def test_range_preserved(self, seed):
        img = np.random.default_rng(seed).random((32, 32, 3)).astype(np.float32)
        out = augment(img, seed=seed)
        assert out.min() >= 0.0 and out.max() <= 1.0 and out.shape == img.shape
