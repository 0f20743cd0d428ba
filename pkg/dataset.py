# dataset.py
"""Daily/weekly samples, per-sample z-scoring, stratified splits and class balancing."""
import logging
from dataclasses import dataclass, field, replace
from datetime import timedelta
from enum import Enum
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from sqlalchemy import select

from database import get_db
from ingest import AlignedSeries
from models import STORE_FORMAT_VERSION, DatasetRecord, SampleRecord
from utils import DataError

logger = logging.getLogger(__name__)

MIN_PER_LABEL = 5
DAYS_PER_WEEK = 5
CLOSE = 3


class TooFewSamples(DataError):
    pass


class ZeroPrice(DataError):
    pass


class Granularity(str, Enum):
    DAILY = "daily"
    WEEKLY = "weekly"


class Channels(str, Enum):
    CLOSE_ONLY = "close"
    ALL_FOUR = "all"

    @property
    def count(self) -> int:
        return 1 if self is Channels.CLOSE_ONLY else 4


class Representation(str, Enum):
    PRICE = "price"
    RETURN = "return"


class Split(str, Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


@dataclass(frozen=True)
class Sample:
    values: np.ndarray  # [length x channels]
    label: int
    asset_id: str
    period_id: int

    @property
    def length(self) -> int:
        return self.values.shape[0]

    @property
    def channels(self) -> int:
        return self.values.shape[1]


@dataclass
class Dataset:
    samples: list[Sample]
    split_assignment: list[Split]
    seed: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.samples) != len(self.split_assignment):
            raise DataError("every sample needs exactly one split")

    def __len__(self) -> int:
        return len(self.samples)

    def subset(self, split: Split) -> list[Sample]:
        split = Split(split)
        return [s for s, a in zip(self.samples, self.split_assignment) if a is split]

    def arrays(self, split: Split) -> tuple[np.ndarray, np.ndarray]:
        """Stacked ``(N, length, channels)`` values and ``(N,)`` labels."""
        chosen = self.subset(split)
        if not chosen:
            return np.empty((0, 0, 0)), np.empty(0, dtype=int)
        return np.stack([s.values for s in chosen]), np.array([s.label for s in chosen], dtype=int)

    def counts(self) -> dict[str, dict[int, int]]:
        out: dict[str, dict[int, int]] = {s.value: {} for s in Split}
        for sample, split in zip(self.samples, self.split_assignment):
            per = out[split.value]
            per[sample.label] = per.get(sample.label, 0) + 1
        return out

    def map(self, fn: Callable[[Sample], Sample]) -> "Dataset":
        return Dataset([fn(s) for s in self.samples], list(self.split_assignment), self.seed, dict(self.meta))

    @property
    def input_shape(self) -> tuple[int, int]:
        return self.samples[0].values.shape


def _week_starts(days) -> list[int]:
    """Positions of Mondays followed by four consecutive trading days."""
    starts = []
    for i, day in enumerate(days):
        if day.weekday() != 0 or i + DAYS_PER_WEEK > len(days):
            continue
        if all(days[i + k] == day + timedelta(days=k) for k in range(1, DAYS_PER_WEEK)):
            starts.append(i)
    return starts


def segment(series: AlignedSeries, granularity: Granularity, channels: Channels) -> list[Sample]:
    granularity, channels = Granularity(granularity), Channels(channels)
    values = series.values if channels is Channels.ALL_FOUR else series.values[:, CLOSE:CLOSE + 1]
    per_day = series.session_length
    label = series.asset_class.label

    if granularity is Granularity.DAILY:
        return [Sample(values[i * per_day:(i + 1) * per_day].copy(), label, series.asset_id, i)
                for i in range(len(series.trading_days))]

    samples = []
    for start in _week_starts(series.trading_days):
        block = values[start * per_day:(start + DAYS_PER_WEEK) * per_day].copy()
        samples.append(Sample(block, label, series.asset_id, start))
    return samples


def normalize(sample: Sample) -> Sample:
    """Per-channel population z-score; constant channels map to zeros."""
    v = np.asarray(sample.values, dtype=float)
    mean = v.mean(axis=0)
    std = v.std(axis=0)
    constant = np.ptp(v, axis=0) == 0
    out = (v - mean) / np.where(constant, 1.0, std)
    out[:, constant] = 0.0
    return replace(sample, values=out)


def to_returns(sample: Sample) -> Sample:
    v = np.asarray(sample.values, dtype=float)
    prev = v[:-1]
    if np.any(prev == 0):
        raise ZeroPrice(f"{sample.asset_id}/{sample.period_id}: zero price in return denominator")
    return replace(sample, values=np.diff(v, axis=0) / prev)


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def stratified_split(samples: Sequence[Sample], seed: int, test_frac: float = 0.2,
                     val_frac: float = 0.2) -> Dataset:
    if not 0 <= test_frac < 1 or not 0 <= val_frac < 1:
        raise DataError("split fractions must lie in [0, 1)")
    labels = np.array([s.label for s in samples], dtype=int)
    rng = np.random.default_rng(seed)
    assignment = [Split.TRAIN] * len(samples)

    for label in np.unique(labels):
        idx = np.flatnonzero(labels == label)
        if len(idx) < MIN_PER_LABEL:
            raise TooFewSamples(f"label {label} has {len(idx)} samples, need at least {MIN_PER_LABEL}")
        idx = rng.permutation(idx)
        n_test = _round_half_up(len(idx) * test_frac)
        n_val = _round_half_up((len(idx) - n_test) * val_frac)
        for i in idx[:n_test]:
            assignment[i] = Split.TEST
        for i in idx[n_test:n_test + n_val]:
            assignment[i] = Split.VAL

    dataset = Dataset(list(samples), assignment, seed)
    logger.debug("[dataset] split seed=%d counts=%s", seed, dataset.counts())
    return dataset


def balance(samples: Sequence[Sample], seed: int) -> list[Sample]:
    """Undersample the majority label to the minority count, keeping input order."""
    labels = np.array([s.label for s in samples], dtype=int)
    present = np.unique(labels)
    if len(present) < 2:
        raise DataError("balancing needs two labels")
    counts = {int(lab): int((labels == lab).sum()) for lab in present}
    target = min(counts.values())
    rng = np.random.default_rng(seed)
    keep = np.zeros(len(samples), dtype=bool)
    for lab in present:
        idx = np.flatnonzero(labels == lab)
        if len(idx) > target:
            idx = rng.choice(idx, size=target, replace=False)
        keep[idx] = True
    logger.info("[dataset] balanced %s -> %d per label", counts, target)
    return [s for s, k in zip(samples, keep) if k]


def build_samples(corpus: Iterable[AlignedSeries], granularity: Granularity, channels: Channels,
                  representation: Representation = Representation.PRICE) -> list[Sample]:
    representation = Representation(representation)
    samples: list[Sample] = []
    for series in corpus:
        segmented = segment(series, granularity, channels)
        if representation is Representation.RETURN:
            segmented = [to_returns(s) for s in segmented]
        samples.extend(segmented)
    return samples


def save_dataset(dataset: Dataset, url: Optional[str] = None) -> int:
    meta = dataset.meta
    record = DatasetRecord(
        format_version=STORE_FORMAT_VERSION,
        seed=dataset.seed,
        granularity=str(meta.get("granularity", "")),
        channels=str(meta.get("channels", "")),
        representation=str(meta.get("representation", "")),
    )
    for position, (sample, split) in enumerate(zip(dataset.samples, dataset.split_assignment)):
        record.samples.append(SampleRecord(
            position=position,
            asset_id=sample.asset_id,
            period_id=int(sample.period_id),
            label=int(sample.label),
            split=split.value,
            length=sample.length,
            channels=sample.channels,
            values=np.ascontiguousarray(sample.values, dtype="<f4").tobytes(),
        ))
    with get_db(url) as db:
        db.add(record)
        db.commit()
        logger.info("[store] saved dataset %d with %d samples", record.id, len(dataset))
        return record.id


def load_dataset(url: Optional[str] = None, dataset_id: Optional[int] = None) -> Dataset:
    with get_db(url) as db:
        query = select(DatasetRecord)
        if dataset_id is None:
            query = query.order_by(DatasetRecord.id.desc()).limit(1)
        else:
            query = query.where(DatasetRecord.id == dataset_id)
        record = db.execute(query).scalars().first()
        if record is None:
            raise DataError(f"no dataset {dataset_id if dataset_id is not None else ''} in store".strip())
        if record.format_version != STORE_FORMAT_VERSION:
            raise DataError(f"dataset store format {record.format_version} != {STORE_FORMAT_VERSION}")

        samples, splits = [], []
        for row in record.samples:
            values = np.frombuffer(row.values, dtype="<f4").reshape(row.length, row.channels)
            samples.append(Sample(values.astype(float), row.label, row.asset_id, row.period_id))
            splits.append(Split(row.split))
        meta = {"granularity": record.granularity, "channels": record.channels,
                "representation": record.representation, "dataset_id": record.id}
        return Dataset(samples, splits, record.seed, meta)
