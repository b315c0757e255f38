from __future__ import annotations

import json
import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from snmnet import linalg
from snmnet.dataio import (
    UNKNOWN,
    Dataset,
    RawSequence,
    SynthConfig,
    downsample_mean,
    generate_synthetic,
    load_dataset,
    save_dataset,
    zscore_channels,
)
from snmnet.errors import ConfigError, InvalidInputError, LoadError


def small_dataset(n=4, T=5, C=3, seed=0):
    rng = np.random.default_rng(seed)
    return Dataset(
        rng.standard_normal((n, T, C)),
        [i % 2 for i in range(n)],
        [0] * n,
        ["a", "b"],
        ["L1"],
    )


class TestDownsample:
    def test_constant(self):
        out = downsample_mean(RawSequence(np.full((2, 12), 3.25), 100.0), 4)
        np.testing.assert_array_equal(out.values, np.full((2, 3), 3.25))
        assert out.rate_hz == 25.0

    def test_hand_mean(self):
        out = downsample_mean(RawSequence([[1.0, 2.0, 3.0, 4.0]], 2.0), 2)
        np.testing.assert_array_equal(out.values, [[1.5, 3.5]])

    def test_vergara_length(self):
        out = downsample_mean(RawSequence(np.zeros((72, 26000)), 100.0), 100)
        assert out.values.shape == (72, 260)
        assert out.rate_hz == 1.0

    def test_trailing_partial_window_dropped(self):
        out = downsample_mean(RawSequence([[1.0, 1.0, 1.0, 1.0, 9.0]], 1.0), 2)
        np.testing.assert_array_equal(out.values, [[1.0, 1.0]])

    def test_empty_rejected(self):
        with pytest.raises(InvalidInputError):
            downsample_mean(RawSequence(np.zeros((1, 0)), 1.0), 2)

    def test_bad_window(self):
        with pytest.raises(InvalidInputError):
            downsample_mean(RawSequence(np.zeros((1, 4)), 1.0), 0)

    @settings(max_examples=50, deadline=None)
    @given(
        x=arrays(np.float64, st.integers(1, 60), elements=st.floats(-1e3, 1e3)),
        c=st.floats(-1e3, 1e3),
        window=st.integers(1, 8),
    )
    def test_commutes_with_shift(self, x, c, window):
        if len(x) < window:
            return
        a = downsample_mean(RawSequence(x[None, :] + c, 1.0), window).values
        b = downsample_mean(RawSequence(x[None, :], 1.0), window).values + c
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-9)


class TestZScore:
    def test_standard_normal_unchanged(self):
        rng = np.random.default_rng(3)
        X = rng.standard_normal((400, 50, 1))
        X = (X - X.mean()) / X.std()
        ds = Dataset(X, np.zeros(400), np.zeros(400), ["a"], ["L1"])
        out, stats = zscore_channels(ds)
        np.testing.assert_allclose(out.X, X, atol=1e-12)

    def test_constant_channel_clamped(self, caplog):
        X = np.full((3, 4, 2), 5.0)
        X[:, :, 1] = np.arange(12).reshape(3, 4)
        ds = Dataset(X, [0, 0, 0], [0, 0, 0], ["a"], ["L1"])
        with caplog.at_level(logging.WARNING):
            out, stats = zscore_channels(ds)
        assert stats.clamped == (0,)
        assert stats.std[0] == 1.0
        np.testing.assert_array_equal(out.X[:, :, 0], 0.0)
        assert "zero-variance" in caplog.text

    def test_population_std(self):
        X = np.array([[[0.0]], [[2.0]]])
        out, stats = zscore_channels(Dataset(X, [0, 0], [0, 0], ["a"], ["L1"]))
        np.testing.assert_array_equal(out.X.ravel(), [-1.0, 1.0])

    def test_fit_split_only(self):
        X = np.array([[[0.0]], [[2.0]], [[100.0]]])
        ds = Dataset(X, [0, 0, 0], [0, 0, 0], ["a"], ["L1"])
        out, stats = zscore_channels(ds, fit_indices=[0, 1])
        assert stats.mean[0] == 1.0 and stats.std[0] == 1.0
        assert out.X[2, 0, 0] == 99.0

    def test_reapply_is_bit_exact(self):
        ds = small_dataset(n=10)
        fit = [0, 2, 4, 6]
        out, stats = zscore_channels(ds, fit_indices=fit)
        assert np.array_equal(stats.apply(ds.X[fit]), out.X[fit])

    def test_normalized_fit_split_moments(self):
        ds = small_dataset(n=30, T=20, C=4)
        out, _ = zscore_channels(ds)
        flat = out.X.reshape(-1, 4)
        np.testing.assert_allclose(flat.mean(axis=0), 0.0, atol=1e-6)
        np.testing.assert_allclose(flat.std(axis=0), 1.0, atol=1e-6)


class TestDiskFormat:
    def test_empty_manifest(self, tmp_path):
        (tmp_path / "manifest.json").write_text(json.dumps(
            {"class_names": ["a"], "positions": ["L1"], "t_steps": 260, "channels": 72, "samples": []}
        ))
        ds = load_dataset(tmp_path)
        assert len(ds) == 0 and ds.X.shape == (0, 260, 72)

    def test_round_trip_full_size(self, tmp_path):
        rng = np.random.default_rng(5)
        ds = Dataset(rng.standard_normal((2, 260, 72)), [0, UNKNOWN], [0, 1], ["acetone"], ["L1", "L2"])
        save_dataset(ds, tmp_path)
        back = load_dataset(tmp_path / "manifest.json")
        assert len(back) == 2
        assert np.array_equal(back.X, ds.X)
        assert back.labels.tolist() == [0, UNKNOWN]
        assert back.positions.tolist() == [0, 1]

    def test_short_file_named(self, tmp_path):
        ds = small_dataset(n=2, T=260, C=3)
        save_dataset(ds, tmp_path)
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        victim = tmp_path / manifest["samples"][1]["file"]
        victim.write_text("\n".join(victim.read_text().splitlines()[:259]) + "\n")
        with pytest.raises(LoadError, match=victim.name) as info:
            load_dataset(tmp_path)
        assert "259x3" in str(info.value)

    def test_all_problems_reported(self, tmp_path):
        ds = small_dataset(n=3)
        save_dataset(ds, tmp_path)
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        (tmp_path / manifest["samples"][0]["file"]).unlink()
        (tmp_path / manifest["samples"][2]["file"]).write_text("1,2,x\n" * 5)
        with pytest.raises(LoadError) as info:
            load_dataset(tmp_path)
        msg = str(info.value)
        assert "2 invalid entries" in msg and "missing file" in msg and "non-numeric" in msg

    def test_bad_header(self, tmp_path):
        (tmp_path / "manifest.json").write_text(json.dumps({"class_names": ["a"], "samples": []}))
        with pytest.raises(LoadError, match="positions"):
            load_dataset(tmp_path)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(LoadError):
            load_dataset(tmp_path)


class TestSynthetic:
    def test_config_validation(self):
        with pytest.raises(ConfigError):
            SynthConfig(n_positions=2, position_decay=(1.0,))
        with pytest.raises(ConfigError):
            SynthConfig(n_positions=1, position_decay=(0.0,))
        with pytest.raises(ConfigError):
            SynthConfig(n_classes=0)

    def test_shapes_and_counts(self):
        cfg = SynthConfig(n_classes=3, samples_per_class_per_position=4, n_positions=2,
                          position_decay=(1.0, 0.5), t_steps=10, channels=5)
        ds = generate_synthetic(cfg)
        assert ds.X.shape == (24, 10, 5)
        assert np.bincount(ds.labels).tolist() == [8, 8, 8]
        assert np.bincount(ds.positions).tolist() == [12, 12]

    def test_same_seed_bit_identical(self):
        cfg = SynthConfig(n_classes=2, samples_per_class_per_position=5, n_positions=1,
                          position_decay=(1.0,))
        a, b = generate_synthetic(cfg), generate_synthetic(cfg)
        assert a.X.tobytes() == b.X.tobytes()
        assert np.array_equal(a.labels, b.labels)

    def test_no_drift_without_decay(self):
        # identical multipliers: positions differ only by sampling noise
        cfg = SynthConfig(n_classes=2, samples_per_class_per_position=300, n_positions=2,
                          position_decay=(1.0, 1.0), t_steps=16, channels=8)
        ds = generate_synthetic(cfg)
        for c in range(2):
            mags = [np.linalg.norm(ds.X[(ds.labels == c) & (ds.positions == p)], axis=(1, 2)).mean()
                    for p in range(2)]
            assert mags[1] / mags[0] == pytest.approx(1.0, abs=0.05)

    def test_decay_halves_magnitude(self):
        cfg = SynthConfig(n_classes=3, samples_per_class_per_position=100, n_positions=2,
                          position_decay=(1.0, 0.5))
        ds = generate_synthetic(cfg)
        mags = [np.linalg.norm(ds.X[ds.positions == p], axis=(1, 2)).mean() for p in range(2)]
        assert mags[1] / mags[0] == pytest.approx(0.5, rel=0.10)

    def test_anisotropy_matches_target(self):
        cfg = SynthConfig(n_classes=2, samples_per_class_per_position=200, n_positions=1,
                          position_decay=(1.0,), feature_anisotropy=100.0)
        ds = generate_synthetic(cfg)
        for c in range(2):
            X = ds.X[ds.labels == c].reshape(200, -1)
            S = linalg.sample_covariance(X, X.mean(axis=0))
            # amplitude space has `channels` dimensions; the rest is noise floor
            ev = np.linalg.eigvalsh(S)[::-1][: cfg.channels]
            cond = ev[0] / ev[-1]
            assert 100.0 / 3 <= cond <= 100.0 * 3
