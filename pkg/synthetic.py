# synthetic.py
"""Synthetic calendars and minute-bar assets whose log prices follow an AR(1).

Crypto-like assets trade round the clock and go through the session filter;
stock-like assets trade inside the session only and have random gaps.
"""
import logging
from datetime import date, timedelta
from typing import Iterable, Optional

import numpy as np
import pandas as pd
from scipy.signal import lfilter

from dataset import Sample
from ingest import PRICE_COLUMNS, AlignedSeries, AssetClass, OhlcvSeries, TradingCalendar, align
from utils import DataError

logger = logging.getLogger(__name__)

DEFAULT_START = date(2023, 6, 1)
PHI_CRYPTO = 0.6
PHI_STOCK = 0.99


def synthetic_calendar(n_days: int, start: date = DEFAULT_START, holidays: Iterable[date] = (),
                       timezone: str = "America/New_York") -> TradingCalendar:
    """``n_days`` consecutive weekdays from ``start``, skipping ``holidays``."""
    if n_days < 1:
        raise DataError("a calendar needs at least one day")
    skip = set(holidays)
    days, day = [], start
    while len(days) < n_days:
        if day.weekday() < 5 and day not in skip:
            days.append(day)
        day += timedelta(days=1)
    return TradingCalendar(tuple(days), timezone=timezone)


def ar1_path(n: int, phi: float, rng: np.random.Generator) -> np.ndarray:
    """Stationary AR(1) with unit marginal variance."""
    if not -1 < phi < 1:
        raise DataError(f"AR(1) coefficient must lie in (-1, 1), got {phi}")
    shocks = rng.standard_normal(n) * np.sqrt(1 - phi * phi)
    if n:
        shocks[0] = rng.standard_normal()
    return lfilter([1.0], [1.0, -phi], shocks)


def _bars_from_path(path: np.ndarray, index: pd.DatetimeIndex, rng: np.random.Generator,
                    base_price: float, volatility: float) -> pd.DataFrame:
    close = base_price * np.exp(volatility * path)
    open_ = np.concatenate([[close[0]], close[:-1]])
    wiggle = np.abs(rng.standard_normal((2, len(close)))) * volatility * 0.1
    high = np.maximum(open_, close) * (1 + wiggle[0])
    low = np.minimum(open_, close) * (1 - wiggle[1])
    return pd.DataFrame(np.column_stack([open_, high, low, close]), columns=PRICE_COLUMNS, index=index)


def synthetic_ohlcv(asset_id: str, asset_class, calendar: TradingCalendar, phi: float,
                    rng: np.random.Generator, round_the_clock: Optional[bool] = None,
                    missing_rate: float = 0.05, base_price: float = 100.0,
                    volatility: float = 0.01) -> OhlcvSeries:
    asset_class = AssetClass(asset_class)
    if round_the_clock is None:
        round_the_clock = asset_class is AssetClass.CRYPTO
    if not 0 <= missing_rate < 1:
        raise DataError("missing_rate must lie in [0, 1)")

    if round_the_clock:
        first, last = calendar.trading_days[0], calendar.trading_days[-1]
        local = pd.date_range(pd.Timestamp(first), pd.Timestamp(last) + pd.Timedelta(minutes=24 * 60 - 1),
                              freq="min")
        index = local.tz_localize(calendar.timezone, ambiguous="NaT", nonexistent="NaT")
        index = index[~index.isna()].tz_convert("UTC").drop_duplicates().rename("timestamp")
        bars = _bars_from_path(ar1_path(len(index), phi, rng), index, rng, base_price, volatility)
    else:
        index = calendar.slots()
        bars = _bars_from_path(ar1_path(len(index), phi, rng), index, rng, base_price, volatility)
        per_day = calendar.session_length
        keep = rng.random(len(index)) >= missing_rate
        # at least one bar per day, or the day cannot be filled
        keep[np.arange(len(calendar)) * per_day + rng.integers(0, per_day, size=len(calendar))] = True
        bars = bars[keep]
    return OhlcvSeries(asset_id, asset_class, bars)


def synthetic_corpus(n_crypto: int, n_stock: int, calendar: TradingCalendar, phi_crypto: float = PHI_CRYPTO,
                     phi_stock: float = PHI_STOCK, seed: int = 0, missing_rate: float = 0.05) -> list[AlignedSeries]:
    """Aligned series for every synthetic asset, produced by the ingest pipeline."""
    specs = [(f"CRYPTO{i:02d}", AssetClass.CRYPTO, phi_crypto) for i in range(n_crypto)]
    specs += [(f"STOCK{i:02d}", AssetClass.STOCK, phi_stock) for i in range(n_stock)]
    rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(len(specs))]
    corpus = []
    for (asset_id, asset_class, phi), rng in zip(specs, rngs):
        raw = synthetic_ohlcv(asset_id, asset_class, calendar, phi, rng, missing_rate=missing_rate)
        corpus.append(align(raw, calendar))
    logger.info("[ingest] synthetic corpus: %d crypto + %d stock assets over %d days",
                n_crypto, n_stock, len(calendar))
    return corpus


def ar1_samples(n_per_class: int, length: int = 391, phi_crypto: float = PHI_CRYPTO,
                phi_stock: float = PHI_STOCK, seed: int = 0, volatility: float = 0.01) -> list[Sample]:
    """Labelled single-channel price samples, alternating crypto (label 1) and stock (label 0)."""
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(n_per_class):
        for asset_class, phi in ((AssetClass.CRYPTO, phi_crypto), (AssetClass.STOCK, phi_stock)):
            prices = 100.0 * np.exp(volatility * ar1_path(length, phi, rng))
            samples.append(Sample(prices[:, None], asset_class.label, f"{asset_class.value}-{i:04d}", i))
    return samples
