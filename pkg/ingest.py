# ingest.py
"""Minute-bar ingestion: CSV files, the public klines endpoint, trading
sessions and same-day gap filling."""
import asyncio
import logging
import weakref
from dataclasses import dataclass, field
from datetime import date
from enum import Enum
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd

from utils import DataError, NetworkError, api_call

logger = logging.getLogger(__name__)

PRICE_COLUMNS = ["open", "high", "low", "close"]
CSV_COLUMNS = ["timestamp", *PRICE_COLUMNS]
KLINES_LIMIT = 1000
MS_PER_MINUTE = 60_000
BUNDLED_CALENDAR = Path(__file__).resolve().parent / "data" / "nyse_2023_2024.txt"


class MalformedHeader(DataError):
    pass


class UnparseableTimestamp(DataError):
    def __init__(self, message: str, row: int):
        super().__init__(message)
        self.row = row


class EmptyFile(DataError):
    pass


class DuplicateTimestamp(DataError):
    pass


class InvalidBar(DataError):
    pass


class EmptyRange(DataError):
    pass


class KlinesRequestRejected(DataError):
    """The exchange refused the request itself (bad symbol, bad parameters)."""


class EmptyDay(DataError):
    def __init__(self, message: str, day: date):
        super().__init__(message)
        self.day = day


class AssetClass(str, Enum):
    CRYPTO = "crypto"
    STOCK = "stock"

    @property
    def label(self) -> int:
        return 1 if self is AssetClass.CRYPTO else 0


def _empty_bars() -> pd.DataFrame:
    return pd.DataFrame(columns=PRICE_COLUMNS, dtype=float,
                        index=pd.DatetimeIndex([], tz="UTC", name="timestamp"))


def _check_bars(bars: pd.DataFrame) -> None:
    if bars.index.has_duplicates:
        dup = bars.index[bars.index.duplicated()][0]
        raise DuplicateTimestamp(f"duplicate timestamp {dup.isoformat()}")
    if not bars.index.is_monotonic_increasing:
        raise DataError("bar timestamps must be strictly increasing")

    prices = bars[PRICE_COLUMNS].to_numpy(dtype=float)
    present = ~np.isnan(prices)
    if np.any(prices[present] <= 0):
        raise InvalidBar("prices must be positive")
    full = present.all(axis=1)
    o, h, l, c = prices[full].T
    bad = (l > np.minimum(o, c)) | (h < np.maximum(o, c))
    if bad.any():
        at = bars.index[full][np.flatnonzero(bad)[0]]
        raise InvalidBar(f"bar at {at.isoformat()} violates low <= open/close <= high")


@dataclass(frozen=True)
class TradingCalendar:
    trading_days: tuple[date, ...]
    session_open: int = 570
    session_close: int = 960
    timezone: str = "America/New_York"

    def __post_init__(self):
        days = tuple(self.trading_days)
        object.__setattr__(self, "trading_days", days)
        if any(b <= a for a, b in zip(days, days[1:])):
            raise DataError("calendar days must be strictly increasing")
        weekend = [d for d in days if d.weekday() >= 5]
        if weekend:
            raise DataError(f"calendar lists a weekend day: {weekend[0].isoformat()}")
        if not 0 <= self.session_open < self.session_close < 24 * 60:
            raise DataError("session_open must precede session_close within one day")

    @property
    def session_length(self) -> int:
        # both endpoints inclusive
        return self.session_close - self.session_open + 1

    def __len__(self) -> int:
        return len(self.trading_days)

    def slots(self, days=None) -> pd.DatetimeIndex:
        """UTC timestamps of every session minute on ``days``."""
        days = self.trading_days if days is None else tuple(days)
        if not days:
            return pd.DatetimeIndex([], tz="UTC", name="timestamp")
        day_starts = np.array(days, dtype="datetime64[D]").astype("datetime64[m]")
        minutes = np.arange(self.session_open, self.session_close + 1).astype("timedelta64[m]")
        local = (day_starts[:, None] + minutes[None, :]).ravel()
        index = pd.DatetimeIndex(local).tz_localize(self.timezone).tz_convert("UTC")
        return index.rename("timestamp")


@dataclass
class OhlcvSeries:
    asset_id: str
    asset_class: AssetClass
    bars: pd.DataFrame = field(default_factory=_empty_bars)
    # set by session_filter; the series then sits on the session grid
    session: Optional[TradingCalendar] = None

    def __post_init__(self):
        self.asset_class = AssetClass(self.asset_class)
        _check_bars(self.bars)

    def __len__(self) -> int:
        return len(self.bars)

    @property
    def present(self) -> np.ndarray:
        return self.bars[PRICE_COLUMNS].notna().all(axis=1).to_numpy()


@dataclass
class AlignedSeries:
    asset_id: str
    asset_class: AssetClass
    values: np.ndarray
    day_index: np.ndarray
    trading_days: tuple[date, ...]
    session_length: int = 391

    def __post_init__(self):
        self.asset_class = AssetClass(self.asset_class)
        expected = self.session_length * len(self.trading_days)
        if self.values.shape != (expected, 4):
            raise DataError(f"aligned values shape {self.values.shape} != ({expected}, 4)")
        if np.isnan(self.values).any():
            raise DataError(f"{self.asset_id}: aligned series still has missing values")

    @property
    def minutes_total(self) -> int:
        return len(self.values)

    def day(self, i: int) -> np.ndarray:
        return self.values[i * self.session_length:(i + 1) * self.session_length]


def load_calendar(path, session_open: int = 570, session_close: int = 960) -> TradingCalendar:
    """Read a calendar file: ``# timezone: <IANA name>`` then one ISO date per line."""
    lines = [ln.strip() for ln in Path(path).read_text(encoding="utf-8").splitlines()]
    lines = [ln for ln in lines if ln]
    if not lines or not lines[0].startswith("#") or "timezone" not in lines[0]:
        raise MalformedHeader(f"{path}: first line must be '# timezone: <IANA zone>'")
    tz = lines[0].split(":", 1)[1].strip()
    try:
        days = tuple(date.fromisoformat(ln) for ln in lines[1:] if not ln.startswith("#"))
    except ValueError as e:
        raise DataError(f"{path}: {e}") from e
    return TradingCalendar(days, session_open=session_open, session_close=session_close, timezone=tz)


def bundled_calendar() -> TradingCalendar:
    """NYSE trading days 2023-06-01..2024-05-31."""
    return load_calendar(BUNDLED_CALENDAR)


def load_csv(path, asset_id: str, asset_class) -> OhlcvSeries:
    path = Path(path)
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except pd.errors.EmptyDataError as e:
        raise EmptyFile(f"{path} is empty") from e

    columns = [str(c).strip().lower() for c in frame.columns]
    if columns[:len(CSV_COLUMNS)] != CSV_COLUMNS:
        raise MalformedHeader(f"{path}: header must be {','.join(CSV_COLUMNS)}, got {','.join(columns)}")
    frame.columns = columns
    if frame.empty:
        raise EmptyFile(f"{path} has a header but no rows")

    stamps = pd.to_datetime(frame["timestamp"].str.strip(), utc=True, errors="coerce", format="ISO8601")
    bad = stamps.isna().to_numpy()
    if bad.any():
        row = int(np.flatnonzero(bad)[0])
        raise UnparseableTimestamp(f"{path}: unparseable timestamp {frame['timestamp'].iloc[row]!r} at row {row}",
                                   row=row)

    prices = frame[PRICE_COLUMNS].apply(pd.to_numeric, errors="coerce")
    # one bad field makes the whole bar missing
    prices.loc[prices.isna().any(axis=1), :] = np.nan
    prices.index = pd.DatetimeIndex(stamps, name="timestamp")
    if prices.index.has_duplicates:
        dup = prices.index[prices.index.duplicated()][0]
        raise DuplicateTimestamp(f"{path}: duplicate timestamp {dup.isoformat()}")

    bars = prices.sort_index().astype(float)
    logger.info("[ingest] %s: %d bars from %s (%d missing)", asset_id, len(bars), path.name,
                int(bars.isna().any(axis=1).sum()))
    return OhlcvSeries(asset_id, asset_class, bars)


# one lock per endpoint per event loop; a lock must not outlive its loop
_endpoint_locks: weakref.WeakKeyDictionary = weakref.WeakKeyDictionary()


def _endpoint_lock(endpoint: str) -> asyncio.Lock:
    per_loop = _endpoint_locks.setdefault(asyncio.get_running_loop(), {})
    return per_loop.setdefault(endpoint, asyncio.Lock())


def _klines_frame(rows: list) -> pd.DataFrame:
    if not rows:
        return _empty_bars()
    opened = pd.to_datetime([int(r[0]) for r in rows], unit="ms", utc=True)
    bars = pd.DataFrame(
        [[float(r[1]), float(r[2]), float(r[3]), float(r[4])] for r in rows],
        columns=PRICE_COLUMNS,
        index=pd.DatetimeIndex(opened, name="timestamp"),
    )
    return bars[~bars.index.duplicated(keep="last")].sort_index()


async def fetch_klines(endpoint: str, symbol: str, start: int, end: int, interval: str = "1m",
                       asset_class=AssetClass.CRYPTO, transport=None, retries: int = 5,
                       backoff_factor: float = 0.5, retry_log: Optional[list] = None) -> OhlcvSeries:
    """Page through ``[start, end]`` (epoch ms, inclusive) at 1,000 klines per request."""
    if interval != "1m":
        raise DataError(f"only 1m klines are supported, got {interval!r}")
    if end < start:
        raise EmptyRange(f"empty range: start={start} end={end}")

    lock = _endpoint_lock(endpoint)
    rows: list = []
    cursor = start
    async with lock:
        while cursor <= end:
            params = {
                "symbol": symbol.upper(),
                "interval": interval,
                "startTime": cursor,
                "endTime": end,
                "limit": KLINES_LIMIT,
            }
            response, page = await api_call("get", endpoint, params=params, transport=transport,
                                            retries=retries, backoff_factor=backoff_factor,
                                            retry_log=retry_log)
            if 400 <= response.status_code < 500:
                raise KlinesRequestRejected(f"{endpoint}: HTTP {response.status_code}: {response.text[:200]}")
            if response.status_code >= 500:
                raise NetworkError(f"{endpoint}: HTTP {response.status_code}: {response.text[:200]}")
            if not isinstance(page, list):
                raise NetworkError(f"{endpoint}: unexpected klines payload {type(page).__name__}")
            if not page:
                break
            rows.extend(page)
            next_cursor = int(page[-1][0]) + MS_PER_MINUTE
            if next_cursor <= cursor:
                break
            cursor = next_cursor

    logger.info("[klines] %s: %d bars in %d..%d", symbol, len(rows), start, end)
    return OhlcvSeries(symbol.upper(), asset_class, _klines_frame(rows))


def session_filter(series: OhlcvSeries, cal: TradingCalendar) -> OhlcvSeries:
    """Materialize the session grid of every trading day the series touches."""
    if not cal.trading_days:
        raise DataError("calendar has no trading days")
    if series.bars.empty:
        return OhlcvSeries(series.asset_id, series.asset_class, _empty_bars(), session=cal)

    local = series.bars.index.tz_convert(cal.timezone)
    first, last = local[0].date(), local[-1].date()
    days = [d for d in cal.trading_days if first <= d <= last]
    slots = cal.slots(days)
    bars = series.bars.reindex(slots)
    logger.debug("[ingest] %s: %d session slots over %d days, %d present", series.asset_id,
                 len(slots), len(days), int(bars.notna().all(axis=1).sum()))
    return OhlcvSeries(series.asset_id, series.asset_class, bars, session=cal)


def fill_missing(series: OhlcvSeries) -> AlignedSeries:
    """Forward fill, then back fill a day's leading gap; never across days."""
    cal = series.session
    if cal is None:
        raise DataError(f"{series.asset_id}: fill_missing needs a session-filtered series")
    per_day = cal.session_length
    if len(series.bars) % per_day:
        raise DataError(f"{series.asset_id}: {len(series.bars)} slots is not a multiple of {per_day}")

    n_days = len(series.bars) // per_day
    day_index = np.repeat(np.arange(n_days), per_day)
    local_days = series.bars.index.tz_convert(cal.timezone)[::per_day]
    trading_days = tuple(ts.date() for ts in local_days)

    bars = series.bars[PRICE_COLUMNS].reset_index(drop=True)
    filled = bars.groupby(day_index).ffill()
    filled = filled.groupby(day_index).bfill()

    values = filled.to_numpy(dtype=float)
    holes = np.isnan(values).any(axis=1)
    if holes.any():
        day = trading_days[day_index[np.flatnonzero(holes)[0]]]
        raise EmptyDay(f"{series.asset_id}: no bars on trading day {day.isoformat()}", day=day)
    return AlignedSeries(series.asset_id, series.asset_class, values, day_index, trading_days,
                         session_length=per_day)


def align(series: OhlcvSeries, cal: TradingCalendar) -> AlignedSeries:
    return fill_missing(session_filter(series, cal))


def save_aligned(series: AlignedSeries, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(series.values, columns=PRICE_COLUMNS)
    frame.insert(0, "day", series.day_index)
    frame.insert(1, "date", [series.trading_days[i].isoformat() for i in series.day_index])
    frame["asset_id"] = series.asset_id
    frame["asset_class"] = series.asset_class.value
    frame.to_csv(path, index=False)
    return path


def load_aligned(path) -> AlignedSeries:
    frame = pd.read_csv(path, dtype={"asset_id": str})
    missing = {"day", "date", *PRICE_COLUMNS, "asset_id", "asset_class"} - set(frame.columns)
    if missing:
        raise MalformedHeader(f"{path}: missing columns {sorted(missing)}")
    if frame.empty:
        raise EmptyFile(f"{path} has no rows")
    day_index = frame["day"].to_numpy(dtype=int)
    dates = frame.drop_duplicates("day").sort_values("day")["date"]
    trading_days = tuple(date.fromisoformat(d) for d in dates)
    session_length = len(frame) // len(trading_days)
    return AlignedSeries(str(frame["asset_id"].iloc[0]), frame["asset_class"].iloc[0],
                         frame[PRICE_COLUMNS].to_numpy(dtype=float), day_index, trading_days,
                         session_length=session_length)
