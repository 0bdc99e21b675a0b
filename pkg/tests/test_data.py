import numpy as np
import pytest

from advmoe.data import (
    Dataset,
    ParseError,
    gen_synthetic,
    load_cifar10_binary,
    save_cifar10_binary,
    synthetic_templates,
)


def test_zero_noise_images_identical_within_class():
    ds = gen_synthetic(3, 5, 16, 16, noise_sigma=0.0, seed=1)
    for c in range(3):
        block = ds.images[ds.labels == c]
        assert (block == block[0]).all()


def test_same_seed_bit_identical():
    a = gen_synthetic(3, 4, 16, 16, 0.1, seed=2)
    b = gen_synthetic(3, 4, 16, 16, 0.1, seed=2)
    np.testing.assert_array_equal(a.images, b.images)
    np.testing.assert_array_equal(a.labels, b.labels)


def test_splits_share_templates_but_not_noise():
    tr = gen_synthetic(2, 6, 16, 16, 0.1, seed=3, split="train")
    te = gen_synthetic(2, 6, 16, 16, 0.1, seed=3, split="test")
    assert not np.array_equal(tr.images, te.images)
    t = synthetic_templates(2, 16, 16, seed=3)
    # class means approach the shared template in both splits
    for ds in (tr, te):
        for c in range(2):
            m = ds.images[ds.labels == c].mean(axis=0)
            assert np.abs(m - t[c]).mean() < 0.06


def test_class_balance_exact_and_range():
    ds = gen_synthetic(4, 7, 16, 16, 0.3, seed=4)
    for c in range(4):
        assert (ds.labels == c).sum() == 7
    assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0


def test_nearest_template_oracle():
    # template-matching classifier: perfect at sigma=0, >95% at sigma=0.1
    for sigma, floor in ((0.0, 1.0), (0.1, 0.95)):
        ds = gen_synthetic(3, 50, 16, 16, sigma, seed=5, split="test")
        t = synthetic_templates(3, 16, 16, seed=5)
        d2 = ((ds.images[:, None] - t[None]) ** 2).sum(axis=(2, 3, 4))
        acc = (d2.argmin(axis=1) == ds.labels).mean()
        assert acc >= floor, f"sigma={sigma}: {acc}"


def test_min_size_enforced():
    with pytest.raises(Exception):
        gen_synthetic(2, 2, 4, 16, 0.1, seed=0)


# -- CIFAR-10 binary format ---------------------------------------------------

def fixture_dataset():
    g = np.random.default_rng(0)
    images = (g.integers(0, 256, size=(2, 3, 32, 32)) / 255.0).astype(np.float32)
    labels = np.array([3, 7], dtype=np.int64)
    return Dataset(images, labels)


def test_constructed_fixture_parses(tmp_path):
    p = tmp_path / "batch.bin"
    save_cifar10_binary(p, fixture_dataset())
    ds = load_cifar10_binary(p)
    assert ds.images.shape == (2, 3, 32, 32)
    assert ds.labels.tolist() == [3, 7]


def test_byte_255_is_exactly_one(tmp_path):
    img = np.zeros((1, 3, 32, 32), dtype=np.float32)
    img[0, 0, 0, 0] = 1.0
    p = tmp_path / "b.bin"
    save_cifar10_binary(p, Dataset(img, np.array([0], dtype=np.int64)))
    ds = load_cifar10_binary(p)
    assert ds.images[0, 0, 0, 0] == 1.0


def test_roundtrip_bit_identical(tmp_path):
    p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
    save_cifar10_binary(p1, fixture_dataset())
    ds = load_cifar10_binary(p1)
    save_cifar10_binary(p2, ds)
    assert p1.read_bytes() == p2.read_bytes()


def test_truncated_file_rejected(tmp_path):
    p = tmp_path / "t.bin"
    save_cifar10_binary(p, fixture_dataset())
    p.write_bytes(p.read_bytes()[:-10])
    with pytest.raises(ParseError):
        load_cifar10_binary(p)


def test_bad_label_reports_offset(tmp_path):
    p = tmp_path / "l.bin"
    save_cifar10_binary(p, fixture_dataset())
    raw = bytearray(p.read_bytes())
    raw[3073] = 42  # second record's label byte
    p.write_bytes(bytes(raw))
    with pytest.raises(ParseError, match="3073"):
        load_cifar10_binary(p)


def test_max_records_truncation(tmp_path):
    p = tmp_path / "m.bin"
    save_cifar10_binary(p, fixture_dataset())
    ds = load_cifar10_binary(p, max_records=1)
    assert len(ds) == 1
    assert ds.labels.tolist() == [3]
