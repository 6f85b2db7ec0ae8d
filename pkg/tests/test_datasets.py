import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from dynadp.datasets import (IMAGE_MAGIC, LABEL_MAGIC, Dataset, load_csv, load_idx,
                             parse_idx_images, parse_idx_labels, sample_batch, save_idx,
                             synth_attributes, train_test_split)
from dynadp.errors import (BadMagicError, CountMismatchError, InvalidParameterError, ParseError,
                           TruncatedPayloadError)
from dynadp.ndcore import Purpose, RngStream


def _idx_images(n, r, c, payload=None):
    body = payload if payload is not None else bytes(range(256)) * (n * r * c // 256 + 1)
    return struct.pack(">IIII", IMAGE_MAGIC, n, r, c) + body[: n * r * c]


def test_parse_idx_images_and_labels():
    imgs = parse_idx_images(_idx_images(3, 2, 2))
    assert imgs.shape == (3, 2, 2) and imgs.dtype == np.uint8
    assert imgs.ravel().tolist() == list(range(12))
    labels = parse_idx_labels(struct.pack(">II", LABEL_MAGIC, 3) + bytes([1, 2, 9]))
    assert labels.tolist() == [1, 2, 9]


def test_idx_errors_are_distinct():
    with pytest.raises(BadMagicError):
        parse_idx_images(struct.pack(">IIII", 0x1234, 1, 1, 1) + b"\0")
    with pytest.raises(TruncatedPayloadError):
        parse_idx_images(_idx_images(3, 2, 2)[:-1])
    with pytest.raises(TruncatedPayloadError):
        parse_idx_images(b"\0\0")
    with pytest.raises(BadMagicError):
        parse_idx_labels(_idx_images(1, 1, 1))


def test_load_idx_count_mismatch(tmp_path):
    (tmp_path / "i").write_bytes(_idx_images(3, 2, 2))
    (tmp_path / "l").write_bytes(struct.pack(">II", LABEL_MAGIC, 2) + bytes([0, 1]))
    with pytest.raises(CountMismatchError):
        load_idx(tmp_path / "i", tmp_path / "l")


def test_idx_roundtrip(tmp_path):
    g = np.random.default_rng(0)
    x = g.integers(0, 256, size=(7, 16)) / 255.0
    ds = Dataset(x, g.integers(0, 4, 7), 4, feature_shape=(4, 4))
    save_idx(ds, tmp_path / "i", tmp_path / "l")
    back = load_idx(tmp_path / "i", tmp_path / "l", 4)
    np.testing.assert_array_equal(back.features, ds.features)
    np.testing.assert_array_equal(back.labels, ds.labels)
    assert back.feature_shape == (4, 4)


def test_mnist_fixture_loads(mnist5k):
    assert len(mnist5k) == 5000 and mnist5k.num_features == 784
    assert mnist5k.features.min() >= 0.0 and mnist5k.features.max() <= 1.0
    assert set(np.unique(mnist5k.labels)) == set(range(10))


def test_dataset_validation_and_readonly():
    with pytest.raises(InvalidParameterError):
        Dataset(np.zeros((3, 2)), np.array([0, 1]), 2)
    with pytest.raises(InvalidParameterError):
        Dataset(np.zeros((2, 2)), np.array([0, 5]), 2)
    ds = Dataset(np.zeros((2, 2)), np.array([0, 1]), 2)
    with pytest.raises(ValueError):
        ds.features[0, 0] = 1.0


@settings(max_examples=20, deadline=None)
@given(st.integers(10, 300), st.integers(1, 30), st.integers(1, 10), st.integers(0, 2**32))
def test_synth_attributes_properties(n, f, k, seed):
    k = min(k, n)
    ds = synth_attributes(n, f, k, seed)
    assert ds.features.shape == (n, f)
    assert set(np.unique(ds.features)) <= {0.0, 1.0}
    counts = np.bincount(ds.labels, minlength=k)
    assert counts.max() - counts.min() <= 1
    again = synth_attributes(n, f, k, seed)
    np.testing.assert_array_equal(again.features, ds.features)


def test_synth_flip_rate_and_prototype_structure():
    ds = synth_attributes(4000, 200, 4, seed=11, flip_prob=0.1)
    for c in range(4):
        xc = ds.features[ds.labels == c]
        proto = xc.mean(axis=0) > 0.5
        flip_rate = np.mean(xc != proto)
        assert flip_rate == pytest.approx(0.1, abs=0.01)


def test_load_csv(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("a,b,label\n0,10,0\n5,10,1\n10,10,2\n")
    ds = load_csv(p)
    np.testing.assert_allclose(ds.features[:, 0], [0, 0.5, 1])
    np.testing.assert_allclose(ds.features[:, 1], 0)
    assert ds.num_classes == 3
    bad = tmp_path / "bad.csv"
    bad.write_text("a,label\n1,0\n2\n")
    with pytest.raises(ParseError):
        load_csv(bad)
    bad.write_text("a,label\nx,0\n")
    with pytest.raises(ParseError):
        load_csv(bad)
    bad.write_text("a,label\n1,0.5\n")
    with pytest.raises(ParseError):
        load_csv(bad)


def test_sample_batch_inclusion_is_uniform():
    ds = Dataset(np.zeros((20, 1)), np.zeros(20, dtype=int), 1)
    counts = np.zeros(20)
    for t in range(2000):
        b = sample_batch(ds, 5, RngStream(0, Purpose.SAMPLING, iteration=t))
        assert b.sampling_rate == 0.25 and len(b) == 5
        np.add.at(counts, b.indices, 1)
    assert stats.chisquare(counts).pvalue > 1e-4


def test_sample_batch_bounds():
    ds = Dataset(np.zeros((4, 1)), np.zeros(4, dtype=int), 1)
    with pytest.raises(InvalidParameterError):
        sample_batch(ds, 5, RngStream(0))
    with pytest.raises(InvalidParameterError):
        sample_batch(ds, 0, RngStream(0))


def test_train_test_split_partitions():
    ds = synth_attributes(100, 5, 3, 0)
    tr, te = train_test_split(ds, 0.25, seed=1)
    assert len(tr) == 75 and len(te) == 25
    def keyed(d):
        return sorted(map(tuple, np.column_stack([d.features, d.labels])))
    merged = np.vstack([np.column_stack([tr.features, tr.labels]),
                        np.column_stack([te.features, te.labels])])
    assert sorted(map(tuple, merged)) == keyed(ds)
    with pytest.raises(InvalidParameterError):
        train_test_split(ds, 0.0, 1)
    tr2, _ = train_test_split(ds, 0.25, seed=1)
    np.testing.assert_array_equal(tr.features, tr2.features)
