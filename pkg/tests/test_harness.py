# tests/test_harness.py
import json

import numpy as np
import pandas as pd
import pytest
from pydantic import ValidationError

from dataset import Channels, Granularity, Representation, Sample
from harness import (BalanceMode, ClassicalTrack, Confusion, EmptyClass, ExperimentConfig, LengthMismatch,
                     NeuralTrack, RepeatResult, TooFewAssets, aggregate, export_cdf, feature_cdfs, metrics,
                     prepare, pseudo_labels, read_report, run_control, run_experiment, run_robustness,
                     samples_for, sub_experiment_configs, summarize, train_neural)
from synthetic import ar1_samples, synthetic_calendar, synthetic_corpus
from train import TrainConfig
from utils import DataError, read_jsonl


def _neural(**train):
    return NeuralTrack(model="MLP", width_scale=0.125,
                       train=TrainConfig(**{"epochs": 2, "batch_size": 32, "dropout": 0.0, **train}))


def _classical(kind="KNN", setting="P"):
    return ClassicalTrack(kind=kind, setting=setting)


def _samples(corpus):
    return samples_for(_config(_neural()), corpus)


def _config(track, **kw):
    return ExperimentConfig(**{"granularity": "daily", "channels": "close", "track": track, "repeats": 1, **kw})


# ---------------------------------------------------------------------------
# metrics

def test_confusion_example():
    labels = [1, 1, 1, 0, 0, 0, 0, 0, 0, 0]
    predictions = [1, 1, 0, 1, 0, 0, 0, 0, 0, 0]
    report = metrics(predictions, labels)
    assert report.confusion == Confusion(tp=2, fp=1, tn=6, fn=1)
    assert report.accuracy == pytest.approx(0.8)
    assert report.f1 == pytest.approx(2 / 3)


def test_all_correct():
    report = metrics([1, 0, 1, 0], [1, 0, 1, 0])
    assert (report.accuracy, report.f1) == (1.0, 1.0)


def test_no_positives_scores_zero_f1():
    report = metrics([0, 0, 0], [0, 0, 0])
    assert report.accuracy == 1.0
    assert report.f1 == 0.0


def test_length_mismatch():
    with pytest.raises(LengthMismatch):
        metrics([1, 0], [1])
    with pytest.raises(LengthMismatch):
        metrics([], [])


def test_aggregate_means_and_spread():
    results = [RepeatResult(0, 0, Confusion(1, 0, 1, 0), 1.0), RepeatResult(1, 1, Confusion(0, 1, 0, 1), 0.5)]
    report = aggregate(results)
    assert report.accuracy == pytest.approx(0.5)
    assert report.accuracy_std == pytest.approx(0.5)
    assert report.train_accuracy == pytest.approx(0.75)
    assert report.confusion == Confusion(1, 1, 1, 1)
    assert "acc=0.5000±0.5000" in summarize(report)
    with pytest.raises(DataError):
        aggregate([])


# ---------------------------------------------------------------------------
# configuration

def test_config_defaults_and_label():
    config = ExperimentConfig()
    assert config.repeats == 5
    assert config.track.model.value == "CNN"
    assert config.label() == "daily-all-balanced-price-CNN"


def test_track_discriminator_from_json():
    config = ExperimentConfig.model_validate_json(json.dumps(
        {"track": {"type": "classical", "kind": "GB", "setting": "NP+NR"}, "channels": "close"}))
    assert isinstance(config.track, ClassicalTrack)
    assert config.track.name == "GB:NP+NR"
    neural = ExperimentConfig.model_validate({"track": {"model": "t-cnn"}})
    assert neural.track.model.value == "TimeCNN"


@pytest.mark.parametrize("bad", [
    {"granularity": "weekly", "representation": "return"},
    {"track": {"type": "classical"}, "representation": "return"},
    {"repeats": 0},
    {"workers": 0},
    {"test_frac": 1.0},
    {"val_frac": 0},
    {"track": {"model": "transformer"}},
    {"track": {"model": "CNN", "arch": "WARP(32)-FC(1)"}},
    {"track": {"width_scale": 0}},
    {"shuffle": True},
])
def test_invalid_configs(bad):
    with pytest.raises(ValidationError):
        ExperimentConfig.model_validate(bad)


def test_loss_defaults_per_model():
    assert NeuralTrack(model="TimeCNN").train_config(3).loss.value == "mse"
    assert NeuralTrack(model="CNN").train_config(3).loss.value == "bce"
    explicit = NeuralTrack(model="TimeCNN", train={"loss": "focal"}).train_config(3)
    assert (explicit.loss.value, explicit.seed) == ("focal", 3)


def test_sub_experiment_grid():
    configs = sub_experiment_configs(_neural(), repeats=2)
    assert len(configs) == 8
    assert len({c.label() for c in configs}) == 8
    assert {(c.granularity, c.channels, c.balance) for c in configs} == {
        (g, c, b) for g in Granularity for c in Channels for b in BalanceMode}
    assert all(c.representation is Representation.PRICE and c.repeats == 2 for c in configs)


# ---------------------------------------------------------------------------
# runs

def test_prepare_balances_and_normalizes(small_corpus):
    samples = _samples(small_corpus)
    dataset = prepare(samples, _config(_neural()), seed=0)
    labels = [s.label for s in dataset.samples]
    assert labels.count(0) == labels.count(1) == 20
    assert len(dataset.subset("test")) == 8
    assert all(abs(s.values.mean()) < 1e-9 for s in dataset.samples)
    unbalanced = prepare(samples, _config(_neural(), balance="unbalanced"), seed=0, normalized=False)
    assert len(unbalanced) == 50
    with pytest.raises(DataError):
        prepare([s for s in samples if s.label == 0], _config(_neural()), seed=0)


def test_repeats_use_consecutive_seeds(small_corpus, tmp_path):
    config = _config(_neural(), repeats=3, seed=10)
    report = run_experiment(config, small_corpus, tmp_path, label="mlp")
    assert [r.seed for r in report.per_repeat] == [10, 11, 12]
    records = read_jsonl(tmp_path / "metrics.jsonl")
    assert [r["kind"] for r in records] == ["repeat", "repeat", "repeat", "summary"]
    assert records[-1]["config"]["seed"] == 10
    assert 0.0 <= report.accuracy <= 1.0
    assert (tmp_path / "history" / "mlp_r2.csv").exists()

    table = read_report(tmp_path / "metrics.jsonl")
    assert table["label"].tolist() == ["mlp"]
    assert table["repeats"].tolist() == [3]
    assert table["accuracy"][0] == pytest.approx(report.accuracy)


def test_runs_are_reproducible(small_corpus, tmp_path):
    for track in (_neural(), ClassicalTrack(kind="RF", params={"n_trees": 10})):
        config = _config(track, repeats=2, seed=4)
        run_experiment(config, small_corpus, tmp_path / "a")
        run_experiment(config, small_corpus, tmp_path / "b")
    assert (tmp_path / "a" / "metrics.jsonl").read_bytes() == (tmp_path / "b" / "metrics.jsonl").read_bytes()


def test_parallel_workers_match_serial(small_corpus):
    serial = run_experiment(_config(_classical(), repeats=3), small_corpus)
    parallel = run_experiment(_config(_classical(), repeats=3, workers=2), small_corpus)
    assert [r.confusion for r in serial.per_repeat] == [r.confusion for r in parallel.per_repeat]


def test_pseudo_labels_split_assets_in_half():
    ids = [f"S{i}" for i in range(7)]
    mapping = pseudo_labels(ids, seed=2)
    assert sorted(mapping) == ids
    assert sum(mapping.values()) == 3
    assert mapping == pseudo_labels(ids, seed=2)


def test_control_relabels_whole_assets(two_week_calendar):
    corpus = synthetic_corpus(0, 4, two_week_calendar, seed=3)
    report = run_control("stock", _config(_classical(), repeats=2), corpus)
    assert len(report.per_repeat) == 2
    for result in report.per_repeat:
        assert result.confusion.total == 8


def test_control_needs_four_assets(small_corpus):
    with pytest.raises(TooFewAssets):
        run_control("crypto", _config(_classical()), small_corpus)


def test_robustness_trains_every_variant(small_corpus, tmp_path):
    results = run_robustness("mlp", ["32-32-64"], _config(_neural()), small_corpus, tmp_path)
    assert [name for name, _ in results] == ["baseline", "32-32-64"]
    labels = {r["label"] for r in read_jsonl(tmp_path / "metrics.jsonl")}
    assert labels == {"robustness-MLP-baseline", "robustness-MLP-32-32-64"}
    with pytest.raises(DataError):
        run_robustness("mlp", ["32-x-64"], _config(_neural()), small_corpus)


# ---------------------------------------------------------------------------
# CDF exports

def test_export_cdf(tmp_path):
    path = export_cdf("mean", {1: [3.0, 1.0, 2.0], 0: [5.0]}, tmp_path / "cdf" / "mean.csv")
    frame = pd.read_csv(path)
    crypto = frame[frame["class"] == "crypto"]
    assert crypto["value"].tolist() == [1.0, 2.0, 3.0]
    assert crypto["cdf"].tolist() == pytest.approx([1 / 3, 2 / 3, 1.0])
    assert frame[frame["class"] == "stock"]["cdf"].tolist() == [1.0]


def test_export_cdf_empty_class(tmp_path):
    with pytest.raises(EmptyClass):
        export_cdf("mean", {}, tmp_path / "x.csv")
    with pytest.raises(EmptyClass):
        export_cdf("mean", {1: [1.0], 0: []}, tmp_path / "x.csv")


def test_feature_cdfs_group_by_class():
    samples = [Sample(np.array([[1.0], [3.0], [2.0], [5.0]]), 1, "c", 0),
               Sample(np.array([[4.0], [4.0], [4.0], [4.0]]), 0, "s", 0)]
    cdfs = feature_cdfs(samples)
    assert set(cdfs) == {"mean", "variance", "n_max_peaks", "n_min_peaks"}
    assert cdfs["mean"] == {1: [2.75], 0: [4.0]}
    assert cdfs["n_max_peaks"] == {1: [1.0], 0: [0.0]}


# ---------------------------------------------------------------------------
# end to end

@pytest.fixture(scope="module")
def three_and_seven():
    return synthetic_corpus(3, 7, synthetic_calendar(20), seed=1)


@pytest.fixture(scope="module")
def three_and_seven_long():
    return synthetic_corpus(3, 7, synthetic_calendar(60), seed=1)


@pytest.fixture(scope="module")
def twelve_stocks():
    return synthetic_corpus(0, 12, synthetic_calendar(100), seed=9)


@pytest.mark.slow
def test_feature_classifier_separates_classes(three_and_seven):
    track = ClassicalTrack(kind="RF", setting="P", params={"n_trees": 30})
    report = run_experiment(_config(track, repeats=2), three_and_seven)
    assert report.accuracy >= 0.9


@pytest.mark.slow
def test_neural_classifier_separates_classes(three_and_seven_long):
    track = NeuralTrack(model="CNN", width_scale=0.25,
                        train=TrainConfig(epochs=30, batch_size=32, learning_rate=0.005, dropout=0.0))
    report = run_experiment(_config(track), three_and_seven_long)
    assert report.accuracy >= 0.9


@pytest.mark.slow
def test_control_stays_near_chance(twelve_stocks):
    report = run_control("stock", _config(ClassicalTrack(kind="RF", params={"n_trees": 30}), repeats=5),
                         twelve_stocks)
    assert 0.45 <= report.accuracy <= 0.55


@pytest.fixture(scope="module")
def ar1_dataset():
    config = _config(_neural())
    return prepare(ar1_samples(200, seed=5), config, seed=0)


@pytest.mark.slow
@pytest.mark.parametrize("model", ["CNN", "GRU", "Autoencoder"])
def test_neural_models_separate_ar1_classes(ar1_dataset, model):
    track = NeuralTrack(model=model, width_scale=0.25,
                        train=TrainConfig(epochs=25, batch_size=32, learning_rate=0.005, dropout=0.0))
    result = train_neural(track, ar1_dataset, seed=0)
    assert result.confusion.accuracy >= 0.9


@pytest.mark.slow
def test_architecture_variants_agree(three_and_seven_long):
    track = NeuralTrack(model="CNN", width_scale=0.25,
                        train=TrainConfig(epochs=30, batch_size=32, learning_rate=0.005, dropout=0.0))
    results = run_robustness("CNN", ["32-32-64", "32-32-64-64-128-128"], _config(track), three_and_seven_long)
    accuracies = [report.accuracy for _, report in results]
    assert min(accuracies) >= 0.9
    assert max(accuracies) - min(accuracies) <= 0.03


@pytest.mark.slow
@pytest.mark.parametrize("model", ["MLP", "CNN", "LSTM"])
def test_neural_control_stays_near_chance(twelve_stocks, model):
    track = NeuralTrack(model=model, width_scale=0.25, train=TrainConfig(epochs=5, batch_size=32))
    report = run_control("stock", _config(track, repeats=5), twelve_stocks)
    assert 0.45 <= report.accuracy <= 0.55
