import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dpvae.data import Dataset, load_dataset, save_dataset, split, synth_dataset
from dpvae.errors import ConfigurationError, ParameterError
from dpvae.nn import Rng
from dpvae.tradeoff import ClassifierConfig, train_target_classifier


def _toy(n, classes=None, seed=0):
    x = Rng(seed).uniform(0, 1, (n, 3))
    y = None if classes is None else np.arange(n) % classes
    return Dataset(x, y)


def test_split_sizes():
    parts = split(_toy(10), (0.5, 0.2, 0.3), seed=1)
    assert [len(p) for p in parts] == [5, 2, 3]


@settings(max_examples=60, deadline=None)
@given(st.integers(3, 300), st.integers(0, 2**31 - 1), st.sampled_from([None, 2, 3, 5]))
def test_split_is_partition(n, seed, classes):
    data = _toy(n, classes)
    parts = split(data, (0.5, 0.2, 0.3), seed)
    ids = [set(p.ids.tolist()) for p in parts]
    assert set().union(*ids) == set(range(n))
    assert sum(len(s) for s in ids) == n
    assert [len(p) for p in parts] == [len(s) for s in ids]


def test_split_is_deterministic_and_seed_dependent():
    data = _toy(50, 2)
    a = split(data, (0.5, 0.2, 0.3), 4)
    b = split(data, (0.5, 0.2, 0.3), 4)
    c = split(data, (0.5, 0.2, 0.3), 5)
    assert all(np.array_equal(p.ids, q.ids) for p, q in zip(a, b))
    assert not np.array_equal(a[0].ids, c[0].ids)


def test_split_is_stratified():
    parts = split(_toy(100, 2), (0.5, 0.2, 0.3), 0)
    for p in parts:
        counts = np.bincount(p.y, minlength=2)
        assert abs(counts[0] - counts[1]) <= 1


def test_split_falls_back_when_a_class_is_tiny(caplog):
    data = Dataset(Rng(0).uniform(0, 1, (10, 2)), np.r_[np.zeros(8, int), np.ones(2, int)])
    with caplog.at_level(logging.WARNING):
        parts = split(data, (0.5, 0.2, 0.3), 0)
    assert "unstratified" in caplog.text
    assert [len(p) for p in parts] == [5, 2, 3]


@pytest.mark.parametrize("fractions", [(0.5, 0.5, 0.0), (0.5, 0.2, 0.2), (0.6, 0.4)])
def test_split_rejects_bad_fractions(fractions):
    with pytest.raises(ConfigurationError):
        split(_toy(10), fractions, 0)


def test_blob_images_construction():
    data = synth_dataset({"generator": "blob-images", "classes": 4, "n": 400}, seed=0)
    assert data.x.shape == (400, 256)
    assert data.record_shape == (16, 16)
    assert np.bincount(data.y).tolist() == [100, 100, 100, 100]
    assert data.x.min() >= 0.0 and data.x.max() <= 1.0


def test_toy_series_construction():
    data = synth_dataset({"generator": "toy-series", "classes": 3, "n": 30, "timesteps": 20, "channels": 2}, seed=0)
    assert data.x.shape == (30, 40)
    assert data.record_shape == (20, 2)
    assert data.x.min() >= -1.0 and data.x.max() <= 1.0
    # row-major: record i, timestep t, channel c lives at column 2 t + c
    series = data.x.reshape(30, 20, 2)
    np.testing.assert_array_equal(series[3, 5, 1], data.x[3, 11])


def test_synth_rejects_unknown_options():
    with pytest.raises(ConfigurationError):
        synth_dataset({"generator": "nope"})
    with pytest.raises(ConfigurationError):
        synth_dataset({"colour": 3})


def test_nearest_template_oracle_on_clean_blobs():
    data = synth_dataset({"generator": "blob-images", "classes": 4, "n": 400, "noise": 0.1}, seed=3)
    fit, rest = data.subset(np.arange(200)), data.subset(np.arange(200, 400))
    templates = np.stack([fit.x[fit.y == c].mean(axis=0) for c in range(4)])
    pred = np.argmin(((rest.x[:, None, :] - templates[None]) ** 2).sum(axis=2), axis=1)
    assert np.mean(pred == rest.y) >= 0.95


@pytest.mark.parametrize("generator", ["blob-images", "toy-series"])
def test_small_classifier_calibration(generator):
    data = synth_dataset({"generator": generator, "classes": 4, "n": 400}, seed=1)
    tr, _, te = split(data, (0.5, 0.2, 0.3), 0)
    _, acc = train_target_classifier(tr.x, tr.y, te.x, te.y, ClassifierConfig(hidden=(32,), max_epochs=100), Rng(0))
    assert acc >= 0.9


@pytest.mark.parametrize("name", ["d.csv", "d.bin", "d"])
def test_round_trip(tmp_path, name):
    data = synth_dataset({"generator": "toy-series", "classes": 3, "n": 12, "timesteps": 4, "channels": 2}, seed=0)
    save_dataset(tmp_path / name, data)
    back = load_dataset(tmp_path / name, record_shape=(4, 2))
    np.testing.assert_array_equal(back.x, data.x)
    np.testing.assert_array_equal(back.y, data.y)
    assert back.record_shape == (4, 2)


def test_unlabelled_binary_round_trip(tmp_path):
    data = Dataset(Rng(0).normal((5, 3)))
    save_dataset(tmp_path / "u", data)
    back = load_dataset(tmp_path / "u")
    assert back.y is None
    np.testing.assert_array_equal(back.x, data.x)


def test_dataset_validation():
    with pytest.raises(ParameterError):
        Dataset(np.zeros(3))
    with pytest.raises(ParameterError):
        Dataset(np.zeros((3, 4)), record_shape=(3, 3))
