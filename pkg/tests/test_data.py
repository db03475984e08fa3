import numpy as np
import pytest
from scipy.stats import chi2_contingency

from ctxfed.data import (
    SyntheticSpec,
    generate_synthetic,
    load_csv_dir,
    load_idx,
    partition,
    write_csv_dir,
    write_idx,
)
from ctxfed.errors import (
    IdxCountMismatchError,
    IdxMagicError,
    IdxTruncatedError,
    InvalidInputError,
)
from ctxfed.model import LabeledDataset, SoftmaxModel, accuracy, gradient


def test_synthetic_shapes_and_determinism():
    spec = SyntheticSpec(iid=True, num_devices=10, num_features=5, num_classes=3, seed=1)
    a, b = generate_synthetic(spec), generate_synthetic(spec)
    assert a.num_devices == 10
    for da, db in zip(a.devices, b.devices):
        assert da.features.shape[1] == 5
        assert 0 <= da.labels.min() and da.labels.max() < 3
        np.testing.assert_array_equal(da.features, db.features)
        np.testing.assert_array_equal(da.labels, db.labels)
    np.testing.assert_array_equal(a.test.features, b.test.features)


def test_device_weights_sum_to_one():
    fd = generate_synthetic(SyntheticSpec(alpha=1, beta=1, num_devices=37, seed=5))
    assert abs(fd.device_weights.sum() - 1.0) <= 1e-12
    assert np.all(fd.device_weights > 0)
    assert np.all(fd.sizes >= 1)


def test_synthetic_rejects_bad_spec():
    with pytest.raises(InvalidInputError):
        generate_synthetic(SyntheticSpec(num_classes=1))
    with pytest.raises(InvalidInputError):
        generate_synthetic(SyntheticSpec(num_devices=0))
    with pytest.raises(InvalidInputError):
        generate_synthetic(SyntheticSpec(alpha=-1))


def test_iid_label_distributions_match():
    spec = SyntheticSpec(iid=True, num_devices=2, num_features=10, num_classes=5,
                         samples_min=1000, samples_max=1000, test_fraction=0.0, seed=3)
    fd = generate_synthetic(spec)
    table = np.array([np.bincount(dev.labels, minlength=5) for dev in fd.devices])
    table = table[:, table.sum(axis=0) > 0]
    assert chi2_contingency(table).pvalue > 0.01


def _fit(data, c, steps=300, lr=0.5):
    m = SoftmaxModel(c, data.num_features)
    for _ in range(steps):
        m = m.with_params(m.params - lr * gradient(m, data))
    return m


def test_non_iid_devices_have_different_optimal_models():
    spec = SyntheticSpec(alpha=1, beta=1, num_devices=6, num_features=10, num_classes=5,
                         samples_min=300, samples_max=300, test_fraction=0.0, seed=11)
    fd = generate_synthetic(spec)
    gaps = []
    for k in range(0, 6, 2):
        own, other = fd.devices[k], fd.devices[k + 1]
        m = _fit(own, 5, lr=0.05)
        gaps.append(accuracy(m, own) - accuracy(m, other))
    assert min(gaps) > 0.1


def test_iid_devices_transfer():
    spec = SyntheticSpec(iid=True, num_devices=2, num_features=10, num_classes=5,
                         samples_min=300, samples_max=300, test_fraction=0.0, seed=11)
    fd = generate_synthetic(spec)
    m = _fit(fd.devices[0], 5, lr=0.05)
    assert accuracy(m, fd.devices[0]) - accuracy(m, fd.devices[1]) < 0.1


# -- IDX ---------------------------------------------------------------------


def _write_pair(tmp_path, n=10, rows=3, cols=4, seed=0):
    rng = np.random.default_rng(seed)
    images = rng.integers(0, 256, size=(n, rows, cols), dtype=np.uint8)
    labels = rng.integers(0, 10, size=n, dtype=np.uint8)
    ip, lp = tmp_path / "images.idx", tmp_path / "labels.idx"
    write_idx(ip, images)
    write_idx(lp, labels)
    return ip, lp, images, labels


def test_idx_header_contract(tmp_path):
    ip, lp, images, labels = _write_pair(tmp_path)
    assert ip.read_bytes()[:4] == b"\x00\x00\x08\x03"
    assert lp.read_bytes()[:4] == b"\x00\x00\x08\x01"
    data = load_idx(ip, lp)
    assert len(data) == 10 and data.num_features == 12


def test_idx_round_trip(tmp_path):
    ip, lp, images, labels = _write_pair(tmp_path, n=25, rows=5, cols=2, seed=4)
    data = load_idx(ip, lp)
    np.testing.assert_array_equal(np.rint(data.features * 255).astype(np.uint8),
                                  images.reshape(25, -1))
    np.testing.assert_array_equal(data.labels, labels)
    assert data.features.min() >= 0 and data.features.max() <= 1


def test_idx_truncated_names_file(tmp_path):
    ip, lp, *_ = _write_pair(tmp_path)
    ip.write_bytes(ip.read_bytes()[:-5])
    with pytest.raises(IdxTruncatedError, match="images.idx"):
        load_idx(ip, lp)


def test_idx_bad_magic(tmp_path):
    ip, lp, *_ = _write_pair(tmp_path)
    with pytest.raises(IdxMagicError, match="labels.idx"):
        load_idx(lp, lp)


def test_idx_count_mismatch(tmp_path):
    ip, lp, *_ = _write_pair(tmp_path, n=10)
    write_idx(lp, np.zeros(9, dtype=np.uint8))
    with pytest.raises(IdxCountMismatchError):
        load_idx(ip, lp)


# -- partition ---------------------------------------------------------------


def _balanced(n, labels=10):
    return LabeledDataset(np.arange(n, dtype=float)[:, None], np.arange(n) % labels)


def test_partition_sizes():
    fd = partition(_balanced(100), num_devices=10, shards_per_device=2, seed=0)
    assert list(fd.sizes) == [10] * 10
    assert abs(fd.device_weights.sum() - 1) <= 1e-12
    # every sample lands on exactly one device
    ids = np.sort(np.concatenate([dev.features[:, 0] for dev in fd.devices]))
    np.testing.assert_array_equal(ids, np.arange(100))


def test_partition_one_shard_few_labels():
    fd = partition(_balanced(1000), num_devices=10, shards_per_device=1, seed=3)
    assert max(len(np.unique(dev.labels)) for dev in fd.devices) <= 2


def test_partition_deterministic():
    a = partition(_balanced(200), 10, 2, seed=9)
    b = partition(_balanced(200), 10, 2, seed=9)
    for da, db in zip(a.devices, b.devices):
        np.testing.assert_array_equal(da.features, db.features)


def test_partition_needs_enough_samples():
    with pytest.raises(InvalidInputError):
        partition(_balanced(15), num_devices=10, shards_per_device=2)


# -- CSV directory -----------------------------------------------------------


def test_csv_dir_round_trip(tmp_path, small_fed):
    write_csv_dir(small_fed, tmp_path)
    assert (tmp_path / "device_0.csv").exists() and (tmp_path / "test.csv").exists()
    back = load_csv_dir(tmp_path, num_classes=small_fed.num_classes)
    assert back.num_devices == small_fed.num_devices
    for a, b in zip(small_fed.devices, back.devices):
        np.testing.assert_array_equal(a.features, b.features)
        np.testing.assert_array_equal(a.labels, b.labels)
    np.testing.assert_array_equal(small_fed.test.features, back.test.features)


def test_csv_dir_gap_in_numbering(tmp_path, small_fed):
    write_csv_dir(small_fed, tmp_path)
    (tmp_path / "device_3.csv").unlink()
    with pytest.raises(InvalidInputError):
        load_csv_dir(tmp_path)
