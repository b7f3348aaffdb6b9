import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import write_digits_idx
from tempered_laplace import data as dt


def _write_raw(path, magic, dims, body):
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I" + "I" * len(dims), magic, *dims))
        fh.write(bytes(body))


def test_images_become_flat_unit_rows(tmp_path):
    imgs = np.arange(3 * 28 * 28, dtype=np.uint64).reshape(3, 28, 28) % 256
    dt.write_idx_images(tmp_path / "i", imgs)
    dt.write_idx_labels(tmp_path / "l", [0, 9, 4])
    d = dt.load_idx_dataset(tmp_path / "i", tmp_path / "l")
    assert d.inputs.shape == (3, 784)
    assert d.inputs.min() >= 0 and d.inputs.max() <= 1
    np.testing.assert_allclose(d.inputs[0, :3], np.array([0, 1, 2]) / 255)
    np.testing.assert_array_equal(d.targets, [0, 9, 4])


def test_header_is_big_endian(tmp_path):
    dt.write_idx_labels(tmp_path / "l", [1, 2])
    raw = (tmp_path / "l").read_bytes()
    assert raw[:8] == bytes([0, 0, 8, 1, 0, 0, 0, 2])


def test_gzip_files_round_trip(tmp_path):
    img, lab = write_digits_idx(tmp_path, gzip=True)
    d = dt.load_idx_dataset(img, lab, subset=100)
    assert d.n == 100 and d.inputs.shape[1] == 64


def test_subset_takes_first_rows(tmp_path):
    img, lab = write_digits_idx(tmp_path)
    full = dt.load_idx_dataset(img, lab)
    sub = dt.load_idx_dataset(img, lab, subset=100)
    assert sub.n == 100
    np.testing.assert_array_equal(sub.inputs, full.inputs[:100])


def test_standardization(tmp_path):
    img, lab = write_digits_idx(tmp_path)
    d = dt.load_idx_dataset(img, lab, normalization="standardize")
    sd = d.inputs.std(axis=0)
    np.testing.assert_allclose(d.inputs.mean(axis=0), 0, atol=1e-12)
    assert np.all((np.abs(sd - 1) < 1e-12) | (sd == 0))
    with pytest.raises(ValueError):
        dt.load_idx_dataset(img, lab, normalization="minmax")


def test_label_range_checked(tmp_path):
    dt.write_idx_images(tmp_path / "i", np.zeros((2, 2, 2)))
    _write_raw(tmp_path / "ok", 0x801, [2], [0, 9])
    _write_raw(tmp_path / "bad", 0x801, [2], [0, 255])
    assert dt.load_idx_dataset(tmp_path / "i", tmp_path / "ok").n == 2
    with pytest.raises(dt.IdxFormatError, match="255"):
        dt.load_idx_dataset(tmp_path / "i", tmp_path / "bad")


def test_bad_magic_reports_observed_value(tmp_path):
    _write_raw(tmp_path / "l", 0x1234, [1], [0])
    dt.write_idx_images(tmp_path / "i", np.zeros((1, 2, 2)))
    with pytest.raises(dt.IdxFormatError, match="0x00001234"):
        dt.load_idx_dataset(tmp_path / "i", tmp_path / "l")


def test_truncated_and_mismatched_files(tmp_path):
    _write_raw(tmp_path / "i", 0x803, [2, 2, 2], [0] * 5)
    _write_raw(tmp_path / "l", 0x801, [2], [0, 1])
    with pytest.raises(dt.IdxFormatError):
        dt.load_idx_dataset(tmp_path / "i", tmp_path / "l")
    dt.write_idx_images(tmp_path / "i", np.zeros((3, 2, 2)))
    with pytest.raises(dt.IdxFormatError):
        dt.load_idx_dataset(tmp_path / "i", tmp_path / "l")


def test_missing_file_names_the_path(tmp_path):
    with pytest.raises(FileNotFoundError, match="nowhere.idx"):
        dt.load_idx_dataset(tmp_path / "nowhere.idx", tmp_path / "l")


def test_blobs_conditional_is_exact():
    d = dt.make_blobs(500, seed=3, num_classes=3)
    pd = d.conditional()
    np.testing.assert_allclose(pd.sum(axis=1), 1.0, atol=1e-12)
    # Bayes rule by hand for one row
    means = dt.blob_means(3, 2, 2.0)
    x = d.inputs[7]
    dens = np.exp(-((x - means) ** 2).sum(axis=1) / 2)
    np.testing.assert_allclose(pd[7], dens / dens.sum(), rtol=1e-12)


def test_generators_are_seeded():
    a, b = dt.make_spirals(100, seed=4), dt.make_spirals(100, seed=4)
    assert a.inputs.tobytes() == b.inputs.tobytes()
    assert dt.make_blobs(50, seed=1).inputs.tobytes() != dt.make_blobs(50, seed=2).inputs.tobytes()


@settings(max_examples=50, deadline=None)
@given(st.integers(3, 500), st.integers(0, 1000),
       st.lists(st.floats(0.05, 1.0), min_size=3, max_size=3))
def test_splits_partition_the_rows(n, seed, raw):
    fr = np.array(raw) / np.sum(raw)
    parts = dt.split_indices(n, fr, seed)
    joined = np.concatenate(parts)
    assert len(joined) == n
    assert len(np.unique(joined)) == n


def test_split_fractions_validated():
    with pytest.raises(ValueError):
        dt.split_indices(10, (0.5, 0.5, 0.1))
    with pytest.raises(ValueError):
        dt.split_indices(10, (1.0, 0.0, 0.0))
