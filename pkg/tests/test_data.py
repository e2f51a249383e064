import gzip
import struct

import numpy as np
import pytest

from actmark.data import (Dataset, SyntheticSpec, gen_synthetic, load_idx, load_mnist,
                          stratified_split, write_idx)
from actmark.errors import FormatError, InputError, SetupError


def _idx_pair(tmp_path, n=3, rows=2, cols=2):
    pixels = np.arange(n * rows * cols, dtype=np.uint8) * 10
    img = tmp_path / "img"
    lab = tmp_path / "lab"
    img.write_bytes(struct.pack(">IIII", 0x803, n, rows, cols) + pixels.tobytes())
    lab.write_bytes(struct.pack(">II", 0x801, n) + bytes(range(n)))
    return img, lab, pixels


def test_load_idx_scales_pixels(tmp_path):
    img, lab, pixels = _idx_pair(tmp_path)
    ds = load_idx(img, lab)
    assert ds.inputs.shape == (3, 4) and ds.labels.tolist() == [0, 1, 2]
    np.testing.assert_array_equal(ds.inputs.ravel(), pixels.astype(np.float32) / np.float32(255))


def test_load_idx_reads_gzip(tmp_path):
    img, lab, _ = _idx_pair(tmp_path)
    gz = tmp_path / "img.gz"
    gz.write_bytes(gzip.compress(img.read_bytes()))
    assert len(load_idx(gz, lab)) == 3


def test_truncated_file_is_a_format_error(tmp_path):
    img, lab, _ = _idx_pair(tmp_path)
    img.write_bytes(img.read_bytes()[:-1])
    with pytest.raises(FormatError) as info:
        load_idx(img, lab)
    assert info.value.offset is not None


def test_bad_magic_reports_offset_zero(tmp_path):
    img, lab, _ = _idx_pair(tmp_path)
    raw = bytearray(img.read_bytes())
    raw[3] = 0x01
    img.write_bytes(bytes(raw))
    with pytest.raises(FormatError) as info:
        load_idx(img, lab)
    assert info.value.offset == 0


def test_count_mismatch(tmp_path):
    img, lab, _ = _idx_pair(tmp_path)
    lab.write_bytes(struct.pack(">II", 0x801, 2) + bytes(2))
    with pytest.raises(FormatError):
        load_idx(img, lab)


def test_empty_files_give_empty_dataset(tmp_path):
    img, lab = tmp_path / "i", tmp_path / "l"
    img.write_bytes(struct.pack(">IIII", 0x803, 0, 28, 28))
    lab.write_bytes(struct.pack(">II", 0x801, 0))
    ds = load_idx(img, lab)
    assert len(ds) == 0 and ds.dim == 784


def test_write_then_load_round_trip(tmp_path):
    img, lab, _ = _idx_pair(tmp_path)
    ds = load_idx(img, lab)
    write_idx(ds, tmp_path / "a", tmp_path / "b", shape=(2, 2))
    back = load_idx(tmp_path / "a", tmp_path / "b")
    np.testing.assert_array_equal(back.inputs, ds.inputs)
    np.testing.assert_array_equal(back.labels, ds.labels)


def test_dataset_validation():
    with pytest.raises(InputError):
        Dataset(np.zeros((2, 3)), [0, 5], 3)
    with pytest.raises(InputError):
        Dataset(np.full((1, 3), np.nan), [0], 3)


def test_zero_sigma_reproduces_means():
    means = np.array([[0.2, 0.4], [0.7, 0.9]])
    ds = gen_synthetic(SyntheticSpec(means=means, n_per_class=5, sigma=0.0))
    np.testing.assert_allclose(ds.inputs, means[ds.labels].astype(np.float32))


def test_synthetic_is_deterministic_and_bounded():
    spec = SyntheticSpec(n_classes=3, dim=5, n_per_class=20, sigma=0.5, seed=11)
    a, b = gen_synthetic(spec), gen_synthetic(spec)
    np.testing.assert_array_equal(a.inputs, b.inputs)
    assert a.inputs.min() >= 0 and a.inputs.max() <= 1
    assert not np.array_equal(a.inputs, gen_synthetic(spec, "test").inputs)


def test_nearest_centroid_separates_two_blobs():
    means = np.array([[0.2] * 8, [0.8] * 8])
    ds = gen_synthetic(SyntheticSpec(means=means, n_per_class=200, sigma=0.1, seed=2))
    d = ((ds.inputs[:, None, :] - means[None]) ** 2).sum(-1)
    assert (d.argmin(1) == ds.labels).mean() >= 0.99


def test_stratified_split_keeps_class_balance():
    ds = gen_synthetic(SyntheticSpec(n_classes=4, dim=3, n_per_class=50, seed=0))
    train, test = stratified_split(ds, 0.2, 0)
    assert np.bincount(test.labels).tolist() == [10] * 4
    assert len(train) + len(test) == len(ds)


def test_missing_mnist_points_at_fetch_command(tmp_path):
    with pytest.raises(SetupError, match="fetch-mnist"):
        load_mnist(tmp_path)
