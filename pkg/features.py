# features.py
"""Interpretable per-series statistics and the six feature settings built from them."""
import logging
from dataclasses import astuple, dataclass, fields
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import pandas as pd
from scipy import integrate, stats

from dataset import CLOSE, Sample, ZeroPrice
from utils import DataError

logger = logging.getLogger(__name__)

ENTROPY_BINS = 10
MIN_LENGTH = 4


class SeriesTooShort(DataError):
    pass


@dataclass(frozen=True)
class FeatureVector:
    mean: float
    variance: float
    max: float
    min: float
    kurtosis: float
    skewness: float
    autocorr_1: float
    autocorr_2: float
    autocorr_3: float
    mean_diff: float
    mean_abs_diff: float
    peak_to_peak: float
    auc: float
    entropy: float
    n_max_peaks: int
    n_min_peaks: int
    n_zero_crossings: int

    def as_array(self) -> np.ndarray:
        return np.array(astuple(self), dtype=np.float64)


FEATURE_NAMES = tuple(f.name for f in fields(FeatureVector))


class FeatureSetting(str, Enum):
    P = "P"
    R = "R"
    NP = "NP"
    NR = "NR"
    P_R = "P+R"
    NP_NR = "NP+NR"

    @property
    def parts(self) -> tuple[str, ...]:
        return tuple(self.value.split("+"))


def _series(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64).reshape(-1)


def autocorrelation(x, lag: int) -> float:
    """Sample autocorrelation at ``lag``; 0 for a constant series."""
    x = _series(x)
    if lag < 1 or lag >= len(x):
        raise SeriesTooShort(f"lag {lag} needs more than {lag} points, got {len(x)}")
    d = x - x.mean()
    denom = float(d @ d)
    if denom == 0:
        return 0.0
    return float(d[:-lag] @ d[lag:]) / denom


def count_peaks(x) -> tuple[int, int]:
    """Strict interior local maxima and minima."""
    x = _series(x)
    if len(x) < 3:
        raise SeriesTooShort(f"peak counting needs 3 points, got {len(x)}")
    mid, left, right = x[1:-1], x[:-2], x[2:]
    n_max = int(np.count_nonzero((mid > left) & (mid > right)))
    n_min = int(np.count_nonzero((mid < left) & (mid < right)))
    return n_max, n_min


def zero_crossings(x) -> int:
    signs = np.sign(_series(x))
    signs = signs[signs != 0]
    return int(np.count_nonzero(signs[:-1] != signs[1:]))


def entropy(x, bins: int = ENTROPY_BINS) -> float:
    """Shannon entropy (nats) of an equal-width histogram over ``[min, max]``."""
    x = _series(x)
    if len(x) == 0:
        raise SeriesTooShort("entropy of an empty series")
    if np.ptp(x) == 0:
        return 0.0
    counts, _ = np.histogram(x, bins=bins)
    return float(stats.entropy(counts))


def extract_features(x) -> FeatureVector:
    x = _series(x)
    if len(x) < MIN_LENGTH:
        raise SeriesTooShort(f"feature extraction needs {MIN_LENGTH} points, got {len(x)}")
    constant = np.ptp(x) == 0
    diffs = np.diff(x)
    n_max, n_min = count_peaks(x)
    return FeatureVector(
        mean=float(x.mean()),
        variance=float(x.var()),
        max=float(x.max()),
        min=float(x.min()),
        kurtosis=0.0 if constant else float(stats.kurtosis(x, fisher=True, bias=True)),
        skewness=0.0 if constant else float(stats.skew(x, bias=True)),
        autocorr_1=autocorrelation(x, 1),
        autocorr_2=autocorrelation(x, 2),
        autocorr_3=autocorrelation(x, 3),
        mean_diff=float(diffs.mean()),
        mean_abs_diff=float(np.abs(diffs).mean()),
        peak_to_peak=float(x.max() - x.min()),
        auc=float(integrate.trapezoid(x)),
        entropy=entropy(x),
        n_max_peaks=n_max,
        n_min_peaks=n_min,
        n_zero_crossings=zero_crossings(x),
    )


def zscore(x) -> np.ndarray:
    x = _series(x)
    std = x.std()
    if np.ptp(x) == 0:
        return np.zeros_like(x)
    return (x - x.mean()) / std


def returns(x) -> np.ndarray:
    x = _series(x)
    if np.any(x[:-1] == 0):
        raise ZeroPrice("zero price in return denominator")
    return np.diff(x) / x[:-1]


def close_series(sample: Sample) -> np.ndarray:
    values = np.asarray(sample.values, dtype=np.float64)
    if values.ndim == 1 or values.shape[1] == 1:
        return values.reshape(-1)
    return values[:, CLOSE]


def series_for(part: str, close: np.ndarray) -> np.ndarray:
    if part == "P":
        return close
    if part == "R":
        return returns(close)
    if part == "NP":
        return zscore(close)
    if part == "NR":
        return zscore(returns(close))
    raise DataError(f"unknown feature series {part!r}")


def feature_columns(setting: FeatureSetting) -> list[str]:
    setting = FeatureSetting(setting)
    if len(setting.parts) == 1:
        return list(FEATURE_NAMES)
    return [f"p_{n}" for n in FEATURE_NAMES] + [f"r_{n}" for n in FEATURE_NAMES]


def assemble(setting: FeatureSetting, sample: Sample) -> np.ndarray:
    """One feature row: 17 values, or 34 for a concatenated setting (price part first)."""
    setting = FeatureSetting(setting)
    close = close_series(sample)
    return np.concatenate([extract_features(series_for(part, close)).as_array() for part in setting.parts])


def feature_frame(setting: FeatureSetting, samples: Iterable[Sample]) -> pd.DataFrame:
    samples = list(samples)
    columns = feature_columns(setting)
    rows = np.array([assemble(setting, s) for s in samples]).reshape(len(samples), len(columns))
    frame = pd.DataFrame(rows, columns=columns)
    frame["label"] = [s.label for s in samples]
    logger.debug("[features] %s: %d rows x %d columns", FeatureSetting(setting).value, *rows.shape)
    return frame


def write_feature_csv(frame: pd.DataFrame, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format="%.10g")
    return path


def per_class_values(samples: Sequence[Sample], feature: str, normalized: bool) -> dict[int, list[float]]:
    """``feature`` of every sample's close series grouped by label."""
    if feature not in FEATURE_NAMES:
        raise DataError(f"unknown feature {feature!r}")
    out: dict[int, list[float]] = {}
    for sample in samples:
        close = close_series(sample)
        vector = extract_features(zscore(close) if normalized else close)
        out.setdefault(int(sample.label), []).append(float(getattr(vector, feature)))
    return out
