import gzip
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ssatlab import data as ds
from ssatlab.errors import ConfigurationError, FormatError

from conftest import DATA


def test_committed_mnist_subset():
    train = ds.load_idx(DATA / "train-images-idx3-ubyte.gz", DATA / "train-labels-idx1-ubyte.gz")
    test = ds.load_idx(DATA / "t10k-images-idx3-ubyte.gz", DATA / "t10k-labels-idx1-ubyte.gz")
    assert train.images.shape == (4000, 1, 28, 28) and test.images.shape == (1000, 1, 28, 28)
    assert np.bincount(train.labels).tolist() == [400] * 10
    assert np.bincount(test.labels).tolist() == [100] * 10
    assert train.images.min() == 0.0 and train.images.max() == 1.0
    # pixels are k/255 exactly
    np.testing.assert_array_equal(np.round(train.images * 255) / 255, train.images)


def test_idx_roundtrip_plain_and_gzip(tmp_path):
    rng = np.random.default_rng(0)
    imgs = rng.integers(0, 256, (7, 28, 28), dtype=np.uint8)
    labels = rng.integers(0, 10, 7)
    for suffix in ("", ".gz"):
        ip, lp = tmp_path / f"i{suffix}", tmp_path / f"l{suffix}"
        ds.write_idx(ip, lp, imgs, labels)
        d = ds.load_idx(ip, lp)
        np.testing.assert_array_equal(d.images[:, 0], imgs / 255.0)
        np.testing.assert_array_equal(d.labels, labels)
    assert gzip.decompress((tmp_path / "i.gz").read_bytes()) == (tmp_path / "i").read_bytes()


def _write_pair(tmp_path, img_blob, lab_blob):
    (tmp_path / "i").write_bytes(img_blob)
    (tmp_path / "l").write_bytes(lab_blob)
    return tmp_path / "i", tmp_path / "l"


def test_idx_errors_report_offsets(tmp_path):
    imgs = np.zeros((2, 28, 28), np.uint8)
    good_img = struct.pack(">IIII", 0x803, 2, 28, 28) + imgs.tobytes()
    good_lab = struct.pack(">II", 0x801, 2) + bytes(2)
    i, l = _write_pair(tmp_path, struct.pack(">I", 0x802) + good_img[4:], good_lab)
    with pytest.raises(FormatError, match="magic") as info:
        ds.load_idx(i, l)
    assert info.value.offset == 0
    i, l = _write_pair(tmp_path, good_img[:-3], good_lab)
    with pytest.raises(FormatError, match="length mismatch"):
        ds.load_idx(i, l)
    i, l = _write_pair(tmp_path, good_img, struct.pack(">II", 0x801, 3) + bytes(3))
    with pytest.raises(FormatError, match="count mismatch"):
        ds.load_idx(i, l)
    i, l = _write_pair(tmp_path, b"\0\0", good_lab)
    with pytest.raises(FormatError, match="truncated"):
        ds.load_idx(i, l)


def test_cifar_binary(tmp_path):
    rng = np.random.default_rng(1)
    records = rng.integers(0, 256, (3, 3073), dtype=np.uint8)
    records[:, 0] = [0, 5, 9]
    (tmp_path / "b.bin").write_bytes(records.tobytes())
    d = ds.load_cifar_binary(tmp_path / "b.bin")
    assert d.images.shape == (3, 3, 32, 32)
    np.testing.assert_array_equal(d.labels, [0, 5, 9])
    np.testing.assert_array_equal(d.images[1, 2, 0, :3], records[1, 1 + 2048:1 + 2048 + 3] / 255.0)
    (tmp_path / "c.bin").write_bytes(records.tobytes()[:-1])
    with pytest.raises(FormatError) as info:
        ds.load_cifar_binary(tmp_path / "c.bin")
    assert info.value.offset == 2 * 3073


def test_dataset_validation():
    with pytest.raises(ConfigurationError):
        ds.Dataset(np.full((1, 1, 2, 2), 1.5), [0], "x", 2)
    with pytest.raises(ConfigurationError):
        ds.Dataset(np.zeros((1, 1, 2, 2)), [2], "x", 2)
    with pytest.raises(ConfigurationError):
        ds.Dataset(np.zeros((2, 1, 2, 2)), [0], "x", 2)


def test_synthetic_gaussians():
    d = ds.synthetic_gaussians(4, 25, 3, 0.2, seed=1)
    assert d.images.shape == (100, 1, 1, 3)
    assert d.images.min() == 0.0 and d.images.max() == 1.0
    again = ds.synthetic_gaussians(4, 25, 3, 0.2, seed=1)
    np.testing.assert_array_equal(d.images, again.images)
    with pytest.raises(ConfigurationError):
        ds.synthetic_gaussians(1, 5, 2, 0.2, 0)
    with pytest.raises(ConfigurationError):
        ds.synthetic_gaussians(3, 5, 2, 0.0, 0)


def test_export_csv(tmp_path):
    d = ds.synthetic_gaussians(2, 2, 2, 0.5, seed=0)
    ds.export_csv(d, tmp_path / "g.csv")
    lines = (tmp_path / "g.csv").read_text().splitlines()
    assert lines[0] == "label,x0,x1" and len(lines) == 5
    assert float(lines[1].split(",")[1]) == d.images[0, 0, 0, 0]


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 100), st.integers(0, 5), st.integers(1, 6))
def test_augment_depends_only_on_seed_epoch_index(seed, epoch, n):
    rng = np.random.default_rng(seed)
    imgs = rng.uniform(0, 1, (n, 1, 8, 8))
    idx = np.arange(n) + 10
    full = ds.augment(imgs, seed, epoch, idx)
    alone = ds.augment(imgs[-1:], seed, epoch, idx[-1:])
    np.testing.assert_array_equal(full[-1:], alone)
    assert full.shape == imgs.shape and full.min() >= 0 and full.max() <= 1


def test_augment_disabled_is_identity():
    imgs = np.random.default_rng(0).uniform(0, 1, (2, 1, 4, 4))
    assert ds.augment(imgs, 0, enabled=False) is imgs


def test_batches_cover_every_sample_once():
    d = ds.synthetic_gaussians(3, 10, 2, 0.3, seed=0)
    plan = ds.BatchPlan(batch_size=7, seed=3, epoch=1)
    seen = np.concatenate([idx for _, _, idx in ds.batches(d, plan)])
    assert sorted(seen.tolist()) == list(range(30))
    sizes = [len(y) for _, y, _ in ds.batches(d, plan)]
    assert sizes == [7, 7, 7, 7, 2]
    again = np.concatenate([idx for _, _, idx in ds.batches(d, ds.BatchPlan(7, 3, 1))])
    np.testing.assert_array_equal(seen, again)
    other = np.concatenate([idx for _, _, idx in ds.batches(d, ds.BatchPlan(7, 3, 2))])
    assert not np.array_equal(seen, other)


def test_stratified_split():
    d = ds.synthetic_gaussians(3, 10, 2, 0.3, seed=0)
    train, test = ds.stratified_split(d, 2, seed=0)
    assert len(train) == 24 and len(test) == 6
    assert np.bincount(test.labels).tolist() == [2, 2, 2]
