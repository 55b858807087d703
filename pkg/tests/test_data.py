import gzip

import numpy as np
import pytest

from metamix.data import (CIFAR_RECORD, ArrayDataset, DataFormatError, load_cifar10, load_dataset,
                          load_mnist, make_blobs, prefetch, read_cifar_batch, read_idx,
                          write_cifar_batch, write_idx)


def _cifar(n, seed=0):
    rng = np.random.default_rng(seed)
    return rng.integers(0, 256, (n, 3, 32, 32), dtype=np.uint8), rng.integers(0, 10, n)


class TestIdx:
    @pytest.mark.parametrize("dtype", ["u1", "i1", ">i2", ">i4", ">f4", ">f8"])
    def test_round_trip(self, tmp_path, dtype):
        a = (np.arange(24).reshape(2, 3, 4) - 5).astype(dtype)
        write_idx(tmp_path / "a.idx", a)
        back = read_idx(tmp_path / "a.idx")
        assert back.shape == (2, 3, 4)
        np.testing.assert_array_equal(back, a)

    def test_header_bytes(self, tmp_path):
        write_idx(tmp_path / "l", np.array([7, 1, 2], dtype=np.uint8))
        raw = (tmp_path / "l").read_bytes()
        assert raw == bytes([0, 0, 8, 1, 0, 0, 0, 3, 7, 1, 2])

    def test_gzip_fallback(self, tmp_path):
        write_idx(tmp_path / "x", np.zeros((2, 2), np.uint8))
        (tmp_path / "x.gz").write_bytes(gzip.compress((tmp_path / "x").read_bytes()))
        (tmp_path / "x").unlink()
        assert read_idx(tmp_path / "x").shape == (2, 2)

    def test_bad_magic_names_offset(self, tmp_path):
        (tmp_path / "b").write_bytes(bytes([1, 0, 8, 1, 0, 0, 0, 1, 5]))
        with pytest.raises(DataFormatError, match="offset 0"):
            read_idx(tmp_path / "b")

    def test_unknown_type(self, tmp_path):
        (tmp_path / "b").write_bytes(bytes([0, 0, 0x42, 1, 0, 0, 0, 1, 5]))
        with pytest.raises(DataFormatError, match="offset 2"):
            read_idx(tmp_path / "b")

    def test_short_payload_names_offset(self, tmp_path):
        write_idx(tmp_path / "c", np.zeros((4, 5), np.uint8))
        raw = (tmp_path / "c").read_bytes()
        (tmp_path / "c").write_bytes(raw[:-3])
        with pytest.raises(DataFormatError, match="offset 12"):
            read_idx(tmp_path / "c")


class TestCifar:
    def test_record_size(self):
        assert CIFAR_RECORD == 3073

    def test_file_size_and_round_trip(self, tmp_path):
        x, y = _cifar(7)
        write_cifar_batch(tmp_path / "b.bin", x, y)
        assert (tmp_path / "b.bin").stat().st_size == 7 * 3073
        x2, y2 = read_cifar_batch(tmp_path / "b.bin")
        np.testing.assert_array_equal(x2, x)
        np.testing.assert_array_equal(y2, y)

    def test_channel_planes_are_contiguous(self, tmp_path):
        x = np.zeros((1, 3, 32, 32), np.uint8)
        x[0, 1] = 200  # green plane
        write_cifar_batch(tmp_path / "g.bin", x, [3])
        raw = (tmp_path / "g.bin").read_bytes()
        assert raw[0] == 3
        assert set(raw[1:1025]) == {0} and set(raw[1025:2049]) == {200} and set(raw[2049:]) == {0}

    def test_truncated_record(self, tmp_path):
        x, y = _cifar(3)
        write_cifar_batch(tmp_path / "t.bin", x, y)
        raw = (tmp_path / "t.bin").read_bytes()
        (tmp_path / "t.bin").write_bytes(raw[:-10])
        with pytest.raises(DataFormatError, match="record 2 is truncated at offset 6146"):
            read_cifar_batch(tmp_path / "t.bin")

    def test_label_out_of_range(self, tmp_path):
        x, y = _cifar(3)
        y[1] = 12
        write_cifar_batch(tmp_path / "l.bin", x, y)
        with pytest.raises(DataFormatError, match="offset 3073"):
            read_cifar_batch(tmp_path / "l.bin")

    def test_loader_normalizes_with_train_stats(self, tmp_path):
        for i in range(1, 3):
            write_cifar_batch(tmp_path / f"data_batch_{i}.bin", *_cifar(20, i))
        write_cifar_batch(tmp_path / "test_batch.bin", *_cifar(10, 9))
        train, test = load_cifar10(tmp_path)
        assert len(train) == 40 and len(test) == 10
        assert train.x.dtype == np.float32
        np.testing.assert_allclose(train.x.mean(axis=(0, 2, 3)), 0, atol=1e-5)
        np.testing.assert_allclose(train.x.std(axis=(0, 2, 3)), 1, atol=1e-4)

    def test_missing_directory(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_cifar10(tmp_path)


def test_mnist_padding(tmp_path):
    rng = np.random.default_rng(0)
    for prefix, n in (("train", 6), ("t10k", 3)):
        write_idx(tmp_path / f"{prefix}-images-idx3-ubyte", rng.integers(0, 256, (n, 28, 28), dtype=np.uint8))
        write_idx(tmp_path / f"{prefix}-labels-idx1-ubyte", rng.integers(0, 10, n).astype(np.uint8))
    train, test = load_mnist(tmp_path)
    assert train.x.shape == (6, 3, 32, 32) and test.x.shape == (3, 3, 32, 32)
    np.testing.assert_array_equal(train.x[:, 0], train.x[:, 2])


def test_mnist_length_mismatch(tmp_path):
    for prefix in ("train", "t10k"):
        write_idx(tmp_path / f"{prefix}-images-idx3-ubyte", np.zeros((4, 28, 28), np.uint8))
        write_idx(tmp_path / f"{prefix}-labels-idx1-ubyte", np.zeros(3, np.uint8))
    with pytest.raises(DataFormatError, match="disagree"):
        load_mnist(tmp_path)


class TestBatching:
    def test_every_sample_once_per_epoch(self):
        ds = ArrayDataset(np.arange(103, dtype=np.float32)[:, None], np.arange(103))
        seen = np.concatenate([yb for _, yb in ds.batches(10, seed=4, epoch=2)])
        assert sorted(seen.tolist()) == list(range(103))

    def test_drop_last(self):
        ds = ArrayDataset(np.zeros((103, 1)), np.arange(103))
        sizes = [len(yb) for _, yb in ds.batches(10, drop_last=True)]
        assert sizes == [10] * 10

    def test_order_depends_only_on_seed_and_epoch(self):
        ds = ArrayDataset(np.zeros((50, 1)), np.arange(50))

        def order(**kw):
            return np.concatenate([yb for _, yb in ds.batches(8, **kw)])

        np.testing.assert_array_equal(order(seed=1, epoch=3), order(seed=1, epoch=3))
        assert not np.array_equal(order(seed=1, epoch=3), order(seed=1, epoch=4))
        np.testing.assert_array_equal(order(shuffle=False), np.arange(50))

    def test_augment_keeps_shape_and_labels(self):
        ds = ArrayDataset(np.random.default_rng(0).standard_normal((9, 3, 8, 8)).astype(np.float32),
                          np.arange(9))
        plain = list(ds.batches(4, seed=0))
        aug = list(ds.batches(4, seed=0, augment=True))
        for (xa, ya), (xb, yb) in zip(plain, aug):
            assert xa.shape == xb.shape
            np.testing.assert_array_equal(ya, yb)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            ArrayDataset(np.zeros((3, 1)), np.zeros(2))

    def test_prefetch_preserves_order_and_errors(self):
        assert list(prefetch(iter(range(20)), size=3)) == list(range(20))

        def boom():
            yield 1
            raise RuntimeError("producer failed")

        with pytest.raises(RuntimeError, match="producer failed"):
            list(prefetch(boom()))


def test_blobs_linearly_separable():
    ds = make_blobs(400, num_classes=4, dim=16, separation=10.0, seed=0)
    # least-squares one-hot probe with a bias column
    X = np.hstack([ds.x, np.ones((len(ds), 1))]).astype(np.float64)
    W, *_ = np.linalg.lstsq(X, np.eye(4)[ds.y], rcond=None)
    assert (np.argmax(X @ W, axis=1) == ds.y).mean() == 1.0


def test_blobs_shape_and_dim_check():
    assert make_blobs(5, dim=12, shape=(3, 2, 2)).x.shape == (5, 3, 2, 2)
    with pytest.raises(ValueError):
        make_blobs(5, num_classes=8, dim=4)


class TestSynthetic:
    def test_generated_once_and_read_through_cifar_loader(self, tmp_path):
        train, test = load_dataset("synthetic_cifar", tmp_path, n_train=60, n_test=20, seed=1)
        assert train.x.shape == (60, 3, 32, 32) and len(test) == 20
        assert (tmp_path / "synthetic_60_20_1.ok").exists()
        stamp = (tmp_path / "data_batch_1.bin").stat().st_mtime_ns
        again, _ = load_dataset("synthetic_cifar", tmp_path, n_train=60, n_test=20, seed=1)
        assert (tmp_path / "data_batch_1.bin").stat().st_mtime_ns == stamp
        np.testing.assert_array_equal(again.x, train.x)

    def test_switching_configuration_regenerates(self, tmp_path):
        a, _ = load_dataset("synthetic_cifar", tmp_path, n_train=30, n_test=10, seed=0)
        load_dataset("synthetic_cifar", tmp_path, n_train=40, n_test=10, seed=0)
        back, _ = load_dataset("synthetic_cifar", tmp_path, n_train=30, n_test=10, seed=0)
        np.testing.assert_array_equal(back.y, a.y)
        assert list(tmp_path.glob("*.ok")) == [tmp_path / "synthetic_30_10_0.ok"]

    def test_needs_path(self):
        with pytest.raises(ValueError):
            load_dataset("synthetic_cifar")

    def test_unknown_kind(self):
        with pytest.raises(ValueError, match="imagenet"):
            load_dataset("imagenet")
