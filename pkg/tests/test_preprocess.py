from fractions import Fraction

import numpy as np
import pytest

from fhrctg.preprocess import (
    FeatureBundle,
    build_features,
    canonicalize_samples,
    downsample_random,
    make_pretrain_sample,
    unmask,
    window_stats,
    zscore,
)
from fhrctg.types import EngineConfig, FhrRecord

CFG = EngineConfig()


def oracle_window_stats(x, w):
    """Exact rational mean/population-variance, converted to float at the end."""
    means, variances = [], []
    for i in range(0, len(x), w):
        window = [int(v) for v in x[i : i + w]]
        mu = Fraction(sum(window), w)
        var = sum((Fraction(v) - mu) ** 2 for v in window) / w
        means.append(float(mu))
        variances.append(float(var))
    return np.array(means), np.array(variances)


class TestWindowStats:
    def test_constant_window(self):
        m, v = window_stats([140] * 12, 12)
        assert m.tolist() == [140.0] and v.tolist() == [0.0]

    def test_hand_case_one_to_twelve(self):
        m, v = window_stats(list(range(1, 13)), 12)
        assert m[0] == 6.5
        assert v[0] == 143 / 12

    def test_matches_exact_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            x = rng.integers(0, 256, size=240)
            m, v = window_stats(x, 12)
            om, ov = oracle_window_stats(x, 12)
            assert np.array_equal(m, om)
            assert np.array_equal(v, ov)

    def test_rejects_partial_window(self):
        with pytest.raises(ValueError, match="canonicalize"):
            window_stats([1] * 13, 12)


class TestZscore:
    def test_constant_window_maps_to_zero(self):
        x = [140] * 12
        m, v = window_stats(x, 12)
        assert zscore(x, m, v, 12).tolist() == [0.0] * 12

    def test_hand_case(self):
        x = list(range(1, 13))
        m, v = window_stats(x, 12)
        z = zscore(x, m, v, 12)
        assert z[0] == pytest.approx((1 - 6.5) / np.sqrt(143 / 12), abs=1e-12)
        assert z[0] == pytest.approx(-1.5933, abs=1e-4)

    def test_standardization_identity(self):
        rng = np.random.default_rng(1)
        x = rng.integers(0, 256, size=600)
        m, v = window_stats(x, 12)
        z = zscore(x, m, v, 12).reshape(-1, 12)
        ok = v > 0
        assert np.abs(z[ok].mean(axis=1)).max() < 1e-9
        assert np.abs(z[ok].var(axis=1) - 1).max() < 1e-9

    def test_reconstruction_identity(self):
        rng = np.random.default_rng(2)
        x = rng.integers(0, 256, size=480).astype(np.float64)
        m, v = window_stats(x, 12)
        z = zscore(x, m, v, 12)
        rebuilt = np.repeat(m, 12) + z * np.sqrt(np.repeat(v, 12))
        keep = np.repeat(v, 12) > 0
        assert np.abs(rebuilt[keep] - x[keep]).max() < 1e-9


class TestDownsampleRandom:
    def test_constant_windows(self):
        out = downsample_random([7, 7, 7, 9, 9, 9], 3, 1, seed=123)
        assert out.tolist() == [7, 9]

    def test_deterministic_per_seed(self):
        x = np.arange(300)
        a = downsample_random(x, 3, 1, seed=5)
        b = downsample_random(x, 3, 1, seed=5)
        assert np.array_equal(a, b)
        c = downsample_random(x, 3, 1, seed=6)
        assert not np.array_equal(a, c)

    def test_uniformity(self):
        counts = np.zeros(3)
        for seed in range(10000):
            picked = downsample_random([1, 2, 3], 3, 1, seed=seed)[0]
            counts[picked - 1] += 1
        freqs = counts / 10000
        assert np.abs(freqs - 1 / 3).max() < 0.02

    def test_keep_two_without_replacement(self):
        out = downsample_random(np.arange(6), 3, 2, seed=0)
        assert len(out) == 4
        assert len(set(out[:2])) == 2 and len(set(out[2:])) == 2


class TestBuildFeatures:
    def test_shape_contract(self):
        rec = FhrRecord(id="r", samples=np.full(4800, 140))
        bundle = build_features(rec, CFG, seed=0)
        assert bundle.fused_len == 400
        assert len(bundle.sampled_raw) == 1600 == len(bundle.sampled_z)
        assert len(bundle.means) == 400 == len(bundle.variances)

    def test_constant_record(self):
        rec = FhrRecord(id="r", samples=np.full(240, 140))
        bundle = build_features(rec, CFG, seed=3)
        assert np.all(bundle.means == 140.0)
        assert np.all(bundle.variances == 0.0)
        assert np.all(bundle.sampled_z == 0.0)

    def test_only_sampling_is_stochastic(self):
        rng = np.random.default_rng(4)
        rec = FhrRecord(id="r", samples=rng.integers(60, 220, size=2400))
        b1 = build_features(rec, CFG, seed=1)
        b2 = build_features(rec, CFG, seed=2)
        assert np.array_equal(b1.means, b2.means)
        assert np.array_equal(b1.variances, b2.variances)
        assert not np.array_equal(b1.sampled_raw, b2.sampled_raw)

    def test_branch_length_invariant_enforced(self):
        with pytest.raises(ValueError, match="1:4"):
            FeatureBundle(
                sampled_raw=np.zeros(8),
                sampled_z=np.zeros(8),
                means=np.zeros(3),
                variances=np.zeros(3),
            )

    def test_canonicalize_right_trims(self):
        assert len(canonicalize_samples(np.arange(4805))) == 4800


class TestPretrainSampler:
    def test_span_and_budget_caps(self):
        x = np.arange(1000) % 256
        for seed in range(300):
            _, mask, _ = make_pretrain_sample(x, 480, seed)
            assert mask.total_masked <= 72
            for _, length in mask.spans:
                assert 4 <= length <= 12

    def test_spans_disjoint_and_in_bounds(self):
        x = np.arange(2000) % 256
        for seed in range(100):
            _, mask, _ = make_pretrain_sample(x, 480, seed)
            seen = np.zeros(480, dtype=bool)
            for start, length in mask.spans:
                assert 0 <= start and start + length <= 480
                assert not seen[start : start + length].any()
                seen[start : start + length] = True

    def test_unmask_round_trip(self):
        rng = np.random.default_rng(9)
        x = rng.integers(1, 256, size=1200)
        for seed in range(50):
            truncated, mask, targets = make_pretrain_sample(x, 480, seed)
            assert np.all(truncated[mask.positions()] == 0)
            restored = unmask(truncated, mask, targets)
            # the restored slice must appear verbatim in the original
            matched = any(
                np.array_equal(restored, x[s : s + 480])
                for s in range(len(x) - 480 + 1)
            )
            assert matched

    def test_rejects_short_input(self):
        with pytest.raises(ValueError, match="shorter"):
            make_pretrain_sample(np.arange(100), 480, 0)
