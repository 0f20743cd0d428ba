# tests/test_features.py
import math

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dataset import Sample, ZeroPrice
from features import (FEATURE_NAMES, FeatureSetting, SeriesTooShort, assemble, autocorrelation, count_peaks, entropy,
                      extract_features, feature_columns, feature_frame, per_class_values, write_feature_csv,
                      zero_crossings)


def _naive(x):
    """Direct-definition reference for every feature."""
    x = [float(v) for v in x]
    n = len(x)
    mean = sum(x) / n
    dev = [v - mean for v in x]
    m2 = sum(d * d for d in dev) / n
    m3 = sum(d ** 3 for d in dev) / n
    m4 = sum(d ** 4 for d in dev) / n
    ss = sum(d * d for d in dev)

    def acf(k):
        return 0.0 if ss == 0 else sum(dev[t] * dev[t + k] for t in range(n - k)) / ss

    diffs = [x[t + 1] - x[t] for t in range(n - 1)]
    lo, hi = min(x), max(x)
    if hi == lo:
        ent = 0.0
    else:
        counts = [0] * 10
        for v in x:
            counts[min(int((v - lo) / ((hi - lo) / 10)), 9)] += 1
        ent = -sum(c / n * math.log(c / n) for c in counts if c)
    signs = [1 if v > 0 else -1 for v in x if v != 0]
    return {
        "mean": mean, "variance": m2, "max": hi, "min": lo,
        "kurtosis": 0.0 if m2 == 0 else m4 / m2 ** 2 - 3,
        "skewness": 0.0 if m2 == 0 else m3 / m2 ** 1.5,
        "autocorr_1": acf(1), "autocorr_2": acf(2), "autocorr_3": acf(3),
        "mean_diff": sum(diffs) / len(diffs), "mean_abs_diff": sum(abs(d) for d in diffs) / len(diffs),
        "peak_to_peak": hi - lo,
        "auc": sum((x[t] + x[t + 1]) / 2 for t in range(n - 1)),
        "entropy": ent,
        "n_max_peaks": sum(1 for t in range(1, n - 1) if x[t] > x[t - 1] and x[t] > x[t + 1]),
        "n_min_peaks": sum(1 for t in range(1, n - 1) if x[t] < x[t - 1] and x[t] < x[t + 1]),
        "n_zero_crossings": sum(1 for a, b in zip(signs, signs[1:]) if a != b),
    }


def _sample(close, label=0, asset="A"):
    return Sample(np.asarray(close, dtype=float).reshape(-1, 1), label, asset, 0)


def test_hand_computed_features():
    f = extract_features([1, 2, 3, 4])
    assert (f.mean, f.variance, f.max, f.min, f.peak_to_peak) == (2.5, 1.25, 4.0, 1.0, 3.0)
    assert (f.mean_diff, f.mean_abs_diff, f.n_zero_crossings) == (1.0, 1.0, 0)
    assert f.autocorr_1 == pytest.approx(0.25)
    assert f.skewness == pytest.approx(0.0, abs=1e-12)
    assert f.auc == pytest.approx(7.5)


def test_peak_examples():
    assert count_peaks([0, 1, 0, 2, 0]) == (2, 1)
    assert count_peaks([1, 2, 3, 4]) == (0, 0)
    assert count_peaks([0, 1, 1, 0]) == (0, 0)
    with pytest.raises(SeriesTooShort):
        count_peaks([1, 2])


def test_zero_crossing_examples():
    assert zero_crossings([1, -1, 1]) == 2
    assert zero_crossings([100.0, 101.5, 99.0]) == 0
    assert zero_crossings([1, 0, -1]) == 1
    assert zero_crossings([0, 0]) == 0


def test_entropy_examples():
    assert entropy([3.0] * 20) == 0.0
    assert entropy(np.arange(10.0)) == pytest.approx(math.log(10))
    assert entropy(np.random.default_rng(0).standard_normal(500)) <= math.log(10) + 1e-12


def test_constant_series_is_total():
    f = extract_features([7.0] * 6)
    assert (f.autocorr_1, f.autocorr_2, f.autocorr_3, f.skewness, f.kurtosis, f.entropy) == (0, 0, 0, 0, 0, 0)


def test_too_short():
    with pytest.raises(SeriesTooShort):
        extract_features([1, 2, 3])
    with pytest.raises(SeriesTooShort):
        autocorrelation([1, 2, 3], 3)


def test_matches_direct_definitions():
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        n = int(rng.integers(4, 60))
        kind = rng.integers(0, 3)
        if kind == 0:
            x = rng.standard_normal(n)
        elif kind == 1:
            x = 100 * np.exp(np.cumsum(rng.standard_normal(n) * 0.01))
        else:
            x = rng.integers(-3, 4, n).astype(float)
        got = extract_features(x)
        expected = _naive(x)
        for name in FEATURE_NAMES:
            assert getattr(got, name) == pytest.approx(expected[name], rel=1e-9, abs=1e-9), name


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-100, 100, allow_nan=False), min_size=5, max_size=40), st.floats(0.5, 20),
       st.floats(-50, 50))
def test_invariances(values, scale, shift):
    x = np.array(values)
    base = extract_features(x)
    scaled = extract_features(x * scale)
    shifted = extract_features(x + shift)
    # positive scaling
    for name in ("autocorr_1", "autocorr_2", "autocorr_3", "skewness", "kurtosis"):
        if np.ptp(x) > 1e-3:
            assert getattr(scaled, name) == pytest.approx(getattr(base, name), rel=1e-7, abs=1e-9)
    # shift; ties stay ties, strict steps must survive rounding
    steps = np.abs(np.diff(x))
    if np.all(steps[steps > 0] > 1e-6):
        assert (shifted.n_max_peaks, shifted.n_min_peaks) == (base.n_max_peaks, base.n_min_peaks)
    assert base.variance >= 0 and base.max >= base.min
    assert base.peak_to_peak == base.max - base.min
    assert all(-1 - 1e-12 <= getattr(base, f"autocorr_{k}") <= 1 + 1e-12 for k in (1, 2, 3))
    assert base.entropy >= 0


# ---------------------------------------------------------------------------
# settings

def test_setting_row_lengths():
    sample = _sample(100 + np.sin(np.arange(50)))
    assert len(assemble(FeatureSetting.P, sample)) == 17
    assert len(assemble(FeatureSetting.P_R, sample)) == 34
    assert len(assemble("NP+NR", sample)) == 34


def test_normalized_price_moments():
    row = assemble(FeatureSetting.NP, _sample(100 + np.cumsum(np.random.default_rng(1).standard_normal(391))))
    assert row[FEATURE_NAMES.index("mean")] == pytest.approx(0.0, abs=1e-12)
    assert row[FEATURE_NAMES.index("variance")] == pytest.approx(1.0)


def test_returns_of_constant_prices():
    row = assemble(FeatureSetting.R, _sample([50.0] * 10))
    assert row[FEATURE_NAMES.index("mean")] == 0
    assert row[FEATURE_NAMES.index("variance")] == 0
    with pytest.raises(ZeroPrice):
        assemble(FeatureSetting.R, _sample([1.0, 0.0, 2.0, 3.0, 4.0]))


def test_combined_row_is_price_then_return():
    sample = _sample(100 + np.cos(np.arange(30)))
    row = assemble(FeatureSetting.P_R, sample)
    np.testing.assert_array_equal(row[:17], assemble(FeatureSetting.P, sample))
    np.testing.assert_array_equal(row[17:], assemble(FeatureSetting.R, sample))


def test_four_channel_samples_use_close():
    values = np.column_stack([np.full(10, 1.0), np.full(10, 2.0), np.full(10, 0.5), np.arange(1.0, 11.0)])
    row = assemble(FeatureSetting.P, Sample(values, 1, "A", 0))
    assert row[FEATURE_NAMES.index("max")] == 10


def test_feature_frame_and_csv(tmp_path):
    samples = [_sample(100 + np.sin(np.arange(20) + i), label=i % 2, asset=f"a{i}") for i in range(6)]
    frame = feature_frame(FeatureSetting.P_R, samples)
    assert list(frame.columns) == feature_columns(FeatureSetting.P_R) + ["label"]
    assert frame.columns[0] == "p_mean" and frame.columns[17] == "r_mean"
    assert frame["label"].tolist() == [0, 1, 0, 1, 0, 1]
    path = write_feature_csv(frame, tmp_path / "features" / "P_R.csv")
    assert pd.read_csv(path).shape == (6, 35)


def test_per_class_values():
    samples = [_sample([1.0, 2.0, 3.0, 4.0], label=1), _sample([2.0, 2.0, 2.0, 6.0], label=0)]
    assert per_class_values(samples, "mean", normalized=False) == {1: [2.5], 0: [3.0]}
    normalized = per_class_values(samples, "mean", normalized=True)
    assert normalized[1][0] == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError):
        per_class_values(samples, "median", normalized=False)
