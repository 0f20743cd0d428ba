# harness.py
"""Experiment suites: sub-experiments, random-label controls, robustness sweeps,
return-rate and feature experiments, plus CDF exports.

Each repeat ``r`` of a run uses seed ``config.seed + r`` for balancing,
splitting, initialization and batching.
"""
import logging
import math
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Literal, Optional, Sequence, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from archdsl import ModelName, build_model, expand_variant, model_defaults, parse_arch
from classical import ClassifierKind, FeatureMatrix, fit_predict
from dataset import (Channels, Dataset, Granularity, Representation, Sample, Split, balance, build_samples,
                     normalize, stratified_split)
from features import FeatureSetting, feature_frame, per_class_values
from ingest import AlignedSeries, AssetClass
from train import TrainConfig, evaluate, fit, write_history_csv
from utils import DataError, write_jsonl

logger = logging.getLogger(__name__)

DEFAULT_REPEATS = 5
MIN_CONTROL_ASSETS = 4
CLASS_NAMES = {1: "crypto", 0: "stock"}
# raw-price distributions, then normalized peak counts
CDF_EXPORTS = (("mean", False), ("variance", False), ("n_max_peaks", True), ("n_min_peaks", True))


class LengthMismatch(DataError):
    pass


class TooFewAssets(DataError):
    pass


class EmptyClass(DataError):
    pass


class BalanceMode(str, Enum):
    BALANCED = "balanced"
    UNBALANCED = "unbalanced"


class NeuralTrack(BaseModel):
    model_config = ConfigDict(extra="forbid")

    type: Literal["neural"] = "neural"
    model: ModelName = ModelName.CNN
    arch: Optional[str] = None
    width_scale: float = 1.0
    train: TrainConfig = Field(default_factory=TrainConfig)

    @field_validator("model", mode="before")
    @classmethod
    def _model_alias(cls, v):
        return ModelName.parse(v)

    @field_validator("arch")
    @classmethod
    def _arch_parses(cls, v, info):
        if v is not None:
            parse_arch(expand_variant(info.data.get("model", ModelName.CNN), v))
        return v

    @field_validator("width_scale")
    @classmethod
    def _scale(cls, v):
        if not v > 0:
            raise ValueError("width_scale must be > 0")
        return v

    @property
    def name(self) -> str:
        return self.model.value if self.arch is None else f"{self.model.value}[{self.arch}]"

    def train_config(self, seed: int) -> TrainConfig:
        """Training settings for one run; the loss defaults per model unless set explicitly."""
        update = {"seed": seed}
        if "loss" not in self.train.model_fields_set:
            update["loss"] = model_defaults(self.model).loss
        return TrainConfig.model_validate({**self.train.model_dump(), **update})


class ClassicalTrack(BaseModel):
    model_config = ConfigDict(extra="forbid")

    type: Literal["classical"] = "classical"
    kind: ClassifierKind = ClassifierKind.RF
    setting: FeatureSetting = FeatureSetting.P
    params: dict = Field(default_factory=dict)

    @property
    def name(self) -> str:
        return f"{self.kind.value}:{self.setting.value}"


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    granularity: Granularity = Granularity.DAILY
    channels: Channels = Channels.ALL_FOUR
    balance: BalanceMode = BalanceMode.BALANCED
    representation: Representation = Representation.PRICE
    track: Union[NeuralTrack, ClassicalTrack] = Field(default_factory=NeuralTrack, discriminator="type")
    repeats: int = DEFAULT_REPEATS
    seed: int = 0
    test_frac: float = 0.2
    val_frac: float = 0.2
    workers: int = 1

    @field_validator("track", mode="before")
    @classmethod
    def _neural_by_default(cls, v):
        if isinstance(v, dict) and "type" not in v:
            return {"type": "neural", **v}
        return v

    @field_validator("repeats", "workers")
    @classmethod
    def _at_least_one(cls, v, info):
        if v < 1:
            raise ValueError(f"{info.field_name} must be >= 1")
        return v

    @field_validator("test_frac", "val_frac")
    @classmethod
    def _fraction(cls, v, info):
        if not 0 < v < 1:
            raise ValueError(f"{info.field_name} must lie in (0, 1)")
        return v

    @model_validator(mode="after")
    def _combination(self):
        if self.granularity is Granularity.WEEKLY and self.representation is Representation.RETURN:
            raise ValueError("return rates are only defined for daily samples")
        if isinstance(self.track, ClassicalTrack) and self.representation is Representation.RETURN:
            raise ValueError("classical tracks take returns through the feature setting, not the representation")
        return self

    def label(self) -> str:
        return "-".join([self.granularity.value, self.channels.value, self.balance.value,
                         self.representation.value, self.track.name])


@dataclass(frozen=True)
class Confusion:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def accuracy(self) -> float:
        return (self.tp + self.tn) / self.total if self.total else 0.0

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0

    def __add__(self, other: "Confusion") -> "Confusion":
        return Confusion(self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn)


@dataclass
class RepeatResult:
    repeat: int
    seed: int
    confusion: Confusion
    train_accuracy: float
    best_epoch: Optional[int] = None

    def record(self, label: str) -> dict:
        c = self.confusion
        return {"kind": "repeat", "label": label, "repeat": self.repeat, "seed": self.seed,
                "accuracy": c.accuracy, "f1": c.f1, "tp": c.tp, "fp": c.fp, "tn": c.tn, "fn": c.fn,
                "train_accuracy": self.train_accuracy, "best_epoch": self.best_epoch}


@dataclass
class MetricsReport:
    accuracy: float
    f1: float
    confusion: Confusion
    per_repeat: list[RepeatResult] = field(default_factory=list)
    accuracy_std: float = 0.0
    f1_std: float = 0.0
    train_accuracy: Optional[float] = None

    def summary(self, label: str, config: Optional[dict] = None) -> dict:
        c = self.confusion
        record = {"kind": "summary", "label": label, "repeats": len(self.per_repeat),
                  "accuracy": self.accuracy, "accuracy_std": self.accuracy_std,
                  "f1": self.f1, "f1_std": self.f1_std, "train_accuracy": self.train_accuracy,
                  "tp": c.tp, "fp": c.fp, "tn": c.tn, "fn": c.fn}
        if config is not None:
            record["config"] = config
        return record


def confusion(predictions, labels) -> Confusion:
    predictions = np.asarray(predictions, dtype=int).reshape(-1)
    labels = np.asarray(labels, dtype=int).reshape(-1)
    if len(predictions) != len(labels):
        raise LengthMismatch(f"{len(predictions)} predictions for {len(labels)} labels")
    if len(labels) == 0:
        raise LengthMismatch("metrics need at least one prediction")
    return Confusion(tp=int(np.sum((predictions == 1) & (labels == 1))),
                     fp=int(np.sum((predictions == 1) & (labels == 0))),
                     tn=int(np.sum((predictions == 0) & (labels == 0))),
                     fn=int(np.sum((predictions == 0) & (labels == 1))))


def metrics(predictions, labels) -> MetricsReport:
    """Accuracy, F1 and confusion counts with crypto (label 1) as the positive class."""
    c = confusion(predictions, labels)
    return MetricsReport(c.accuracy, c.f1, c)


def aggregate(results: Sequence[RepeatResult]) -> MetricsReport:
    if not results:
        raise DataError("nothing to aggregate")
    acc = np.array([r.confusion.accuracy for r in results])
    f1 = np.array([r.confusion.f1 for r in results])
    total = results[0].confusion
    for r in results[1:]:
        total = total + r.confusion
    return MetricsReport(float(acc.mean()), float(f1.mean()), total, list(results),
                         accuracy_std=float(acc.std()), f1_std=float(f1.std()),
                         train_accuracy=float(np.mean([r.train_accuracy for r in results])))


def _slug(label: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", label)


# ---------------------------------------------------------------------------
# one repeat

def prepare(samples: Sequence[Sample], config: ExperimentConfig, seed: int, normalized: bool = True) -> Dataset:
    """Balance (if configured), split and z-score every sample."""
    labels = {s.label for s in samples}
    if labels != {0, 1}:
        raise DataError(f"experiments need samples of both classes, got labels {sorted(labels)}")
    if config.balance is BalanceMode.BALANCED:
        samples = balance(samples, seed)
    dataset = stratified_split(samples, seed, config.test_frac, config.val_frac)
    dataset.meta.update(granularity=config.granularity.value, channels=config.channels.value,
                        representation=config.representation.value)
    return dataset.map(normalize) if normalized else dataset


def train_neural(track: NeuralTrack, dataset: Dataset, seed: int, repeat: int = 0,
                 out_dir: Optional[Path] = None, label: str = "run") -> RepeatResult:
    config = track.train_config(seed)
    model = build_model(track.model, dataset.input_shape, seed=seed, overrides=track.arch,
                        width_scale=track.width_scale, dropout=config.dropout)
    fitted = fit(model, dataset, config)
    X_test, y_test = dataset.arrays(Split.TEST)
    X_train, y_train = dataset.arrays(Split.TRAIN)
    test = evaluate(model, X_test, y_test, config)
    train = evaluate(model, X_train, y_train, config)
    if out_dir is not None:
        stem = f"{_slug(label)}_r{repeat}"
        write_history_csv(fitted.history, out_dir / "history" / f"{stem}.csv")
        model.save_checkpoint(out_dir / "checkpoints" / stem)
    return RepeatResult(repeat, seed, confusion((test.probabilities >= 0.5).astype(int), y_test),
                        train.accuracy, fitted.best_epoch)


def train_classical(track: ClassicalTrack, dataset: Dataset, seed: int, repeat: int = 0) -> RepeatResult:
    train_samples = dataset.subset(Split.TRAIN) + dataset.subset(Split.VAL)
    test_samples = dataset.subset(Split.TEST)
    train = FeatureMatrix.from_frame(feature_frame(track.setting, train_samples))
    test = FeatureMatrix.from_frame(feature_frame(track.setting, test_samples))
    prediction = fit_predict(track.kind, train, test, track.params, seed)
    train_accuracy = float(np.mean(prediction.train_labels == train.labels))
    return RepeatResult(repeat, seed, confusion(prediction.labels, test.labels), train_accuracy)


@dataclass
class _Job:
    config: ExperimentConfig
    samples: list
    repeat: int
    out_dir: Optional[Path]
    label: str


def _run_job(job: _Job) -> RepeatResult:
    config, seed = job.config, job.config.seed + job.repeat
    track = config.track
    if isinstance(track, NeuralTrack):
        dataset = prepare(job.samples, config, seed)
        result = train_neural(track, dataset, seed, job.repeat, job.out_dir, job.label)
    else:
        # features need raw prices; z-scoring happens inside the feature settings
        dataset = prepare(job.samples, config, seed, normalized=False)
        result = train_classical(track, dataset, seed, job.repeat)
    logger.info("[experiment] %s repeat %d: acc=%.4f f1=%.4f train_acc=%.4f", job.label, job.repeat,
                result.confusion.accuracy, result.confusion.f1, result.train_accuracy)
    return result


def _run_jobs(jobs: list[_Job], workers: int) -> list[RepeatResult]:
    if workers <= 1 or len(jobs) <= 1:
        return [_run_job(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
        # map keeps repeat order
        return list(pool.map(_run_job, jobs))


def _write(out_dir: Optional[Path], label: str, report: MetricsReport, config: ExperimentConfig) -> None:
    if out_dir is None:
        return
    records = [r.record(label) for r in report.per_repeat]
    records.append(report.summary(label, config.model_dump(mode="json")))
    write_jsonl(Path(out_dir) / "metrics.jsonl", records)


def samples_for(config: ExperimentConfig, corpus: Sequence[AlignedSeries]) -> list[Sample]:
    return build_samples(corpus, config.granularity, config.channels, config.representation)


# ---------------------------------------------------------------------------
# suites

def run_experiment(config: ExperimentConfig, corpus: Sequence[AlignedSeries], out_dir=None,
                   label: Optional[str] = None) -> MetricsReport:
    label = label or config.label()
    out_dir = Path(out_dir) if out_dir is not None else None
    samples = samples_for(config, corpus)
    logger.info("[experiment] %s: %d samples, %d repeats", label, len(samples), config.repeats)
    jobs = [_Job(config, samples, r, out_dir, label) for r in range(config.repeats)]
    report = aggregate(_run_jobs(jobs, config.workers))
    _write(out_dir, label, report, config)
    logger.info("[experiment] %s: acc=%.4f±%.4f f1=%.4f±%.4f", label, report.accuracy, report.accuracy_std,
                report.f1, report.f1_std)
    return report


def pseudo_labels(asset_ids: Sequence[str], seed: int) -> dict[str, int]:
    """Random half of the assets labelled 1, the rest 0."""
    order = np.random.default_rng(seed).permutation(len(asset_ids))
    half = len(asset_ids) // 2
    return {asset_ids[i]: int(rank < half) for rank, i in enumerate(order)}


def run_control(asset_class, config: ExperimentConfig, corpus: Sequence[AlignedSeries], out_dir=None,
                label: Optional[str] = None) -> MetricsReport:
    """Classify within one asset class under asset-level random labels; expect chance accuracy."""
    asset_class = AssetClass(asset_class)
    assets = [s for s in corpus if s.asset_class is asset_class]
    if len(assets) < MIN_CONTROL_ASSETS:
        raise TooFewAssets(f"control needs {MIN_CONTROL_ASSETS} {asset_class.value} assets, got {len(assets)}")
    label = label or f"control-{asset_class.value}-{config.label()}"
    out_dir = Path(out_dir) if out_dir is not None else None
    samples = samples_for(config, assets)
    asset_ids = sorted({s.asset_id for s in samples})

    jobs = []
    for r in range(config.repeats):
        mapping = pseudo_labels(asset_ids, config.seed + r)
        relabeled = [replace(s, label=mapping[s.asset_id]) for s in samples]
        jobs.append(_Job(config, relabeled, r, out_dir, label))
    report = aggregate(_run_jobs(jobs, config.workers))
    _write(out_dir, label, report, config)
    logger.info("[control] %s: test acc=%.4f train acc=%.4f", label, report.accuracy, report.train_accuracy)
    return report


def run_robustness(model_name, variants: Sequence[str], config: ExperimentConfig,
                   corpus: Sequence[AlignedSeries], out_dir=None) -> list[tuple[str, MetricsReport]]:
    """Train the baseline and every variant on one fixed split."""
    model_name = ModelName.parse(model_name)
    for variant in variants:
        parse_arch(expand_variant(model_name, variant))
    out_dir = Path(out_dir) if out_dir is not None else None
    base = config.track if isinstance(config.track, NeuralTrack) else NeuralTrack()
    dataset = prepare(samples_for(config, corpus), config, config.seed)

    results = []
    for arch in [None, *variants]:
        track = base.model_copy(update={"model": model_name, "arch": arch})
        label = f"robustness-{model_name.value}-{arch or 'baseline'}"
        result = train_neural(track, dataset, config.seed, 0, out_dir, label)
        report = aggregate([result])
        _write(out_dir, label, report, config.model_copy(update={"track": track}))
        logger.info("[robustness] %s: acc=%.4f f1=%.4f", label, report.accuracy, report.f1)
        results.append((arch or "baseline", report))
    return results


def sub_experiment_configs(track: Union[NeuralTrack, ClassicalTrack], repeats: int = DEFAULT_REPEATS,
                           seed: int = 0, **overrides) -> list[ExperimentConfig]:
    """Daily/weekly x four/one channel x balanced/unbalanced, all on prices."""
    return [ExperimentConfig(granularity=g, channels=c, balance=b, track=track, repeats=repeats, seed=seed,
                             **overrides)
            for g in Granularity for c in (Channels.ALL_FOUR, Channels.CLOSE_ONLY) for b in BalanceMode]


def run_return_experiment(track: NeuralTrack, corpus: Sequence[AlignedSeries], repeats: int = DEFAULT_REPEATS,
                          seed: int = 0, out_dir=None, **overrides) -> dict[str, MetricsReport]:
    """Daily close-price samples versus daily close return rates, balanced."""
    reports = {}
    for representation in Representation:
        config = ExperimentConfig(granularity=Granularity.DAILY, channels=Channels.CLOSE_ONLY,
                                  balance=BalanceMode.BALANCED, representation=representation, track=track,
                                  repeats=repeats, seed=seed, **overrides)
        reports[representation.value] = run_experiment(config, corpus, out_dir)
    return reports


def run_feature_experiments(corpus: Sequence[AlignedSeries], kinds: Sequence = tuple(ClassifierKind),
                            settings: Sequence = tuple(FeatureSetting), repeats: int = DEFAULT_REPEATS,
                            seed: int = 0, out_dir=None, params: Optional[dict] = None,
                            **overrides) -> pd.DataFrame:
    """Every feature setting against every classifier; one row per cell."""
    rows = []
    for setting in settings:
        for kind in kinds:
            kind = ClassifierKind(kind)
            track = ClassicalTrack(kind=kind, setting=setting, params=(params or {}).get(kind.value, {}))
            config = ExperimentConfig(granularity=Granularity.DAILY, channels=Channels.CLOSE_ONLY,
                                      track=track, repeats=repeats, seed=seed, **overrides)
            report = run_experiment(config, corpus, out_dir)
            rows.append({"setting": track.setting.value, "kind": kind.value, "accuracy": report.accuracy,
                         "accuracy_std": report.accuracy_std, "f1": report.f1, "f1_std": report.f1_std})
    return pd.DataFrame(rows)


# ---------------------------------------------------------------------------
# CDF exports

def export_cdf(feature: str, per_class: dict, path) -> Path:
    """Write the empirical CDF of each class's values as ``class,value,cdf`` rows."""
    if not per_class:
        raise EmptyClass(f"{feature}: no classes to export")
    frames = []
    for key in sorted(per_class, key=str):
        values = np.sort(np.asarray(per_class[key], dtype=np.float64))
        if len(values) == 0:
            raise EmptyClass(f"{feature}: class {key!r} has no values")
        name = CLASS_NAMES.get(key, str(key))
        frames.append(pd.DataFrame({"class": name, "value": values,
                                    "cdf": np.arange(1, len(values) + 1) / len(values)}))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.concat(frames, ignore_index=True).to_csv(path, index=False, float_format="%.10g")
    logger.info("[experiment] wrote %s CDF for %d classes to %s", feature, len(frames), path)
    return path


def feature_cdfs(samples: Sequence[Sample], exports=CDF_EXPORTS) -> dict[str, dict[int, list[float]]]:
    """Per-class values of each ``(feature, normalized)`` pair in ``exports``."""
    return {feature: per_class_values(samples, feature, normalized) for feature, normalized in exports}


def read_report(path) -> pd.DataFrame:
    """Mean and spread of the summary records in a metrics file, one row per label."""
    frame = pd.read_json(path, lines=True)
    if frame.empty or "kind" not in frame:
        raise DataError(f"{path}: no metrics records")
    repeats = frame[frame["kind"] == "repeat"]
    if repeats.empty:
        raise DataError(f"{path}: no per-repeat records")
    table = repeats.groupby("label", sort=True).agg(
        repeats=("repeat", "count"),
        accuracy=("accuracy", "mean"),
        accuracy_std=("accuracy", lambda s: float(np.std(s))),
        f1=("f1", "mean"),
        f1_std=("f1", lambda s: float(np.std(s))),
        train_accuracy=("train_accuracy", "mean"),
    )
    return table.reset_index()


def summarize(report: MetricsReport) -> str:
    train = "" if report.train_accuracy is None or math.isnan(report.train_accuracy) \
        else f" train_acc={report.train_accuracy:.4f}"
    return f"acc={report.accuracy:.4f}±{report.accuracy_std:.4f} f1={report.f1:.4f}±{report.f1_std:.4f}{train}"
