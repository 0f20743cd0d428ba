# cli.py
"""Command-line entry point.

    python cli.py experiment --synthetic --granularity daily --channels close --model CNN
    python cli.py control --synthetic --class crypto --model MLP --repeats 5
    python cli.py report --out-dir runs

Values from ``--config`` (a JSON experiment config) are overridden by flags.
Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""
import argparse
import asyncio
import json
import logging
import sys
from datetime import date, datetime, timezone
from pathlib import Path
from typing import Optional

from pydantic import ValidationError

from archdsl import ROBUSTNESS_VARIANTS
from classical import ClassifierKind
from dataset import Channels, Granularity, Representation, Split, build_samples, load_dataset, save_dataset
from features import FeatureSetting, feature_frame, write_feature_csv
from harness import (CDF_EXPORTS, BalanceMode, ExperimentConfig, NeuralTrack, export_cdf,
                     feature_cdfs, prepare, read_report, run_control, run_experiment, run_feature_experiments,
                     run_return_experiment, run_robustness, sub_experiment_configs, summarize, train_neural)
from ingest import (AssetClass, align, bundled_calendar, fetch_klines, load_aligned, load_calendar, load_csv,
                    save_aligned)
from synthetic import PHI_CRYPTO, PHI_STOCK, synthetic_calendar, synthetic_corpus
from train import LossKind, grid_search
from utils import DataError, NumericError, write_jsonl, write_manifest

logger = logging.getLogger(__name__)

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3
TRAIN_FLAGS = {"epochs": "epochs", "batch_size": "batch_size", "lr": "learning_rate", "loss": "loss",
               "dropout": "dropout", "patience": "patience"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _common() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="single source of randomness (default 0)")
    common.add_argument("--config", type=Path, help="JSON experiment config; flags override its values")
    common.add_argument("--out-dir", type=Path, default=Path("runs"), help="artifact directory")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    return common


def _source() -> argparse.ArgumentParser:
    source = argparse.ArgumentParser(add_help=False)
    group = source.add_argument_group("data source")
    group.add_argument("--data-dir", type=Path, help="directory of aligned CSVs written by `ingest`")
    group.add_argument("--synthetic", action="store_true", help="use a synthetic AR(1) corpus")
    group.add_argument("--crypto-assets", type=int, default=3)
    group.add_argument("--stock-assets", type=int, default=7)
    group.add_argument("--days", type=int, default=252)
    group.add_argument("--phi-crypto", type=float, default=PHI_CRYPTO)
    group.add_argument("--phi-stock", type=float, default=PHI_STOCK)
    return source


def _experiment_flags() -> argparse.ArgumentParser:
    flags = argparse.ArgumentParser(add_help=False)
    group = flags.add_argument_group("experiment")
    group.add_argument("--granularity", choices=[g.value for g in Granularity])
    group.add_argument("--channels", choices=[c.value for c in Channels])
    group.add_argument("--balance", choices=[b.value for b in BalanceMode])
    group.add_argument("--representation", choices=[r.value for r in Representation])
    group.add_argument("--repeats", type=int)
    group.add_argument("--workers", type=int)
    group.add_argument("--model", help="neural model name, e.g. CNN, GRU, TimeCNN")
    group.add_argument("--arch", help="architecture override, notation or width list")
    group.add_argument("--width-scale", type=float)
    group.add_argument("--classifier", choices=[k.value for k in ClassifierKind], help="classical track instead")
    group.add_argument("--setting", choices=[s.value for s in FeatureSetting], help="feature setting")
    train = flags.add_argument_group("training")
    train.add_argument("--epochs", type=int)
    train.add_argument("--batch-size", type=int)
    train.add_argument("--lr", type=float)
    train.add_argument("--loss", choices=[k.value for k in LossKind])
    train.add_argument("--dropout", type=float)
    train.add_argument("--patience", type=int)
    return flags


def build_parser() -> argparse.ArgumentParser:
    common, source, flags = _common(), _source(), _experiment_flags()
    parser = _Parser(prog="cli.py", description="Crypto vs stock price-series classification toolkit")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")

    p = sub.add_parser("ingest", parents=[common, source], help="align raw bars to the trading session")
    p.add_argument("--csv", action="append", default=[], metavar="PATH:ASSET:CLASS",
                   help="minute-bar CSV with its asset id and class (crypto|stock); repeatable")
    p.add_argument("--klines", action="append", default=[], metavar="SYMBOL", help="fetch crypto klines")
    p.add_argument("--endpoint", default="https://api.binance.com/api/v3/klines")
    p.add_argument("--start", type=date.fromisoformat, help="first UTC date for --klines")
    p.add_argument("--end", type=date.fromisoformat, help="last UTC date for --klines")
    p.add_argument("--calendar", type=Path, help="calendar file (default: bundled NYSE calendar)")

    p = sub.add_parser("dataset", parents=[common, source, flags], help="build and store a split dataset")
    p.add_argument("--db-url", help="dataset store URL (default: $DATABASE_URL)")

    p = sub.add_parser("train", parents=[common, source, flags], help="train one model")
    p.add_argument("--db-url", help="dataset store URL")
    p.add_argument("--dataset-id", type=int, help="train on a stored dataset instead of a source")
    p.add_argument("--grid", type=json.loads, help='grid search, e.g. \'{"learning_rate": [0.001, 0.01]}\'')

    p = sub.add_parser("features", parents=[common, source], help="export feature matrices")
    p.add_argument("--setting", action="append", choices=[s.value for s in FeatureSetting],
                   help="feature setting (default: all six); repeatable")

    p = sub.add_parser("experiment", parents=[common, source, flags], help="run an experiment suite")
    p.add_argument("--suite", choices=["single", "sub", "returns", "features"], default="single",
                   help="one config, the eight sub-experiments, price vs return, or the feature table")

    p = sub.add_parser("control", parents=[common, source, flags], help="random-label control experiment")
    p.add_argument("--class", dest="asset_class", required=True, choices=[c.value for c in AssetClass])

    p = sub.add_parser("robustness", parents=[common, source, flags], help="baseline vs architecture variants")
    p.add_argument("--variants", nargs="+", help="width lists or notation (default: the two alternatives)")

    sub.add_parser("cdf", parents=[common, source], help="export per-class feature CDFs")

    p = sub.add_parser("report", parents=[common], help="summarize metrics.jsonl into report.csv")
    p.add_argument("--metrics", type=Path, help="metrics file (default: <out-dir>/metrics.jsonl)")
    return parser


# ---------------------------------------------------------------------------
# helpers

def load_corpus(args, seed: int):
    if args.synthetic:
        calendar = synthetic_calendar(args.days)
        return synthetic_corpus(args.crypto_assets, args.stock_assets, calendar, args.phi_crypto,
                                args.phi_stock, seed=seed)
    if args.data_dir:
        paths = sorted(Path(args.data_dir).glob("*.csv"))
        if not paths:
            raise DataError(f"no aligned CSVs in {args.data_dir}")
        return [load_aligned(p) for p in paths]
    raise DataError("choose a data source: --data-dir DIR or --synthetic")


def resolve_config(args) -> ExperimentConfig:
    """Config file values, then flags on top."""
    raw = {}
    if args.config:
        text = args.config.read_text(encoding="utf-8")
        ExperimentConfig.model_validate_json(text)
        raw = json.loads(text)
    for name in ("granularity", "channels", "balance", "representation", "repeats", "workers"):
        value = getattr(args, name, None)
        if value is not None:
            raw[name] = value
    if args.seed is not None:
        raw["seed"] = args.seed

    track = dict(raw.get("track") or {"type": "neural"})
    if getattr(args, "classifier", None):
        track = {"type": "classical", "kind": args.classifier,
                 "setting": args.setting or track.get("setting", FeatureSetting.P.value)}
    elif track.get("type") == "classical":
        if getattr(args, "setting", None):
            track["setting"] = args.setting
    else:
        for flag, key in (("model", "model"), ("arch", "arch"), ("width_scale", "width_scale")):
            if getattr(args, flag, None) is not None:
                track[key] = getattr(args, flag)
        train = dict(track.get("train") or {})
        for flag, key in TRAIN_FLAGS.items():
            if getattr(args, flag, None) is not None:
                train[key] = getattr(args, flag)
        track["train"] = train
    raw["track"] = track
    return ExperimentConfig.model_validate(raw)


def _manifest(args, config: Optional[ExperimentConfig] = None) -> None:
    flags = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items()}
    payload = {"flags": flags}
    if config is not None:
        payload["experiment"] = config.model_dump(mode="json")
    seed = config.seed if config is not None else (args.seed or 0)
    write_manifest(args.out_dir, args.command, payload, seed)


def _fresh_metrics(args) -> None:
    """Start this run's metrics.jsonl empty; records are appended from here on."""
    write_jsonl(args.out_dir / "metrics.jsonl", [], append=False)


# ---------------------------------------------------------------------------
# commands

def cmd_ingest(args) -> None:
    calendar = load_calendar(args.calendar) if args.calendar else bundled_calendar()
    seed = args.seed or 0
    _manifest(args)
    out = args.out_dir / "aligned"
    if args.synthetic:
        for series in load_corpus(args, seed):
            save_aligned(series, out / f"{series.asset_id}.csv")
    for spec in args.csv:
        try:
            path, asset_id, asset_class = spec.rsplit(":", 2)
        except ValueError as e:
            raise DataError(f"--csv expects PATH:ASSET:CLASS, got {spec!r}") from e
        series = align(load_csv(path, asset_id, asset_class), calendar)
        save_aligned(series, out / f"{asset_id}.csv")
        logger.info("[ingest] %s: %d aligned minutes", asset_id, series.minutes_total)
    if args.klines:
        if args.start is None or args.end is None:
            raise DataError("--klines needs --start and --end")
        start = int(datetime.combine(args.start, datetime.min.time(), timezone.utc).timestamp() * 1000)
        end = int(datetime.combine(args.end, datetime.max.time(), timezone.utc).timestamp() * 1000)
        for symbol in args.klines:
            raw = asyncio.run(fetch_klines(args.endpoint, symbol, start, end))
            series = align(raw, calendar)
            save_aligned(series, out / f"{symbol}.csv")
            logger.info("[ingest] %s: %d aligned minutes", symbol, series.minutes_total)


def cmd_dataset(args) -> None:
    config = resolve_config(args)
    _manifest(args, config)
    samples = build_samples(load_corpus(args, config.seed), config.granularity, config.channels,
                            config.representation)
    dataset = prepare(samples, config, config.seed)
    dataset_id = save_dataset(dataset, args.db_url)
    print(f"dataset {dataset_id}: {json.dumps(dataset.counts(), sort_keys=True)}")


def cmd_train(args) -> None:
    config = resolve_config(args)
    if not isinstance(config.track, NeuralTrack):
        raise DataError("train runs neural models; use `experiment --classifier` for classical ones")
    _manifest(args, config)
    _fresh_metrics(args)
    if args.dataset_id is not None or (args.db_url and not (args.synthetic or args.data_dir)):
        dataset = load_dataset(args.db_url, args.dataset_id)
    else:
        samples = build_samples(load_corpus(args, config.seed), config.granularity, config.channels,
                                config.representation)
        dataset = prepare(samples, config, config.seed)

    track = config.track
    label = f"train-{track.name}"
    if args.grid:
        result = grid_search(track.model, dataset, args.grid, base=track.train_config(config.seed),
                             arch=track.arch, width_scale=track.width_scale)
        write_jsonl(args.out_dir / "metrics.jsonl",
                    [{"kind": "grid", "label": label, "cell": c.index, "params": c.params, "val_acc": c.val_acc,
                      "val_loss": c.val_loss if not c.failed else None, "failed": c.failed}
                     for c in result.cells])
        track = track.model_copy(update={"train": result.best_config})
        print(f"best grid cell {result.best.index}: {result.best.params}")

    result = train_neural(track, dataset, config.seed, 0, args.out_dir, label)
    write_jsonl(args.out_dir / "metrics.jsonl", [result.record(label)])
    c = result.confusion
    print(f"{label}: test acc={c.accuracy:.4f} f1={c.f1:.4f} train acc={result.train_accuracy:.4f} "
          f"(best epoch {result.best_epoch}, {len(dataset.subset(Split.TEST))} test samples)")


def cmd_features(args) -> None:
    seed = args.seed or 0
    _manifest(args)
    samples = build_samples(load_corpus(args, seed), Granularity.DAILY, Channels.CLOSE_ONLY)
    for setting in args.setting or [s.value for s in FeatureSetting]:
        frame = feature_frame(setting, samples)
        path = write_feature_csv(frame, args.out_dir / "features" / f"{setting.replace('+', '_')}.csv")
        print(f"{setting}: {len(frame)} rows -> {path}")


def cmd_experiment(args) -> None:
    config = resolve_config(args)
    _manifest(args, config)
    _fresh_metrics(args)
    corpus = load_corpus(args, config.seed)
    overrides = {"test_frac": config.test_frac, "val_frac": config.val_frac, "workers": config.workers}

    if args.suite == "single":
        report = run_experiment(config, corpus, args.out_dir)
        print(f"{config.label()}: {summarize(report)}")
    elif args.suite == "sub":
        for sub_config in sub_experiment_configs(config.track, config.repeats, config.seed, **overrides):
            report = run_experiment(sub_config, corpus, args.out_dir)
            print(f"{sub_config.label()}: {summarize(report)}")
    elif args.suite == "returns":
        if not isinstance(config.track, NeuralTrack):
            raise DataError("the return-rate suite runs a neural model")
        for name, report in run_return_experiment(config.track, corpus, config.repeats, config.seed,
                                                  args.out_dir, **overrides).items():
            print(f"{name}: {summarize(report)}")
    else:
        table = run_feature_experiments(corpus, repeats=config.repeats, seed=config.seed, out_dir=args.out_dir,
                                        balance=config.balance, **overrides)
        print(table.to_string(index=False))


def cmd_control(args) -> None:
    config = resolve_config(args)
    _manifest(args, config)
    _fresh_metrics(args)
    report = run_control(args.asset_class, config, load_corpus(args, config.seed), args.out_dir)
    print(f"control {args.asset_class}: {summarize(report)}")


def cmd_robustness(args) -> None:
    config = resolve_config(args)
    if not isinstance(config.track, NeuralTrack):
        raise DataError("robustness sweeps run neural models")
    model = config.track.model
    variants = args.variants
    if not variants:
        if model not in ROBUSTNESS_VARIANTS:
            raise DataError(f"no default variants for {model.value}; pass --variants")
        variants = list(ROBUSTNESS_VARIANTS[model][1:])
    _manifest(args, config)
    _fresh_metrics(args)
    for name, report in run_robustness(model, variants, config, load_corpus(args, config.seed), args.out_dir):
        print(f"{model.value} {name}: {summarize(report)}")


def cmd_cdf(args) -> None:
    seed = args.seed or 0
    _manifest(args)
    samples = build_samples(load_corpus(args, seed), Granularity.DAILY, Channels.CLOSE_ONLY)
    for feature, per_class in feature_cdfs(samples, CDF_EXPORTS).items():
        print(export_cdf(feature, per_class, args.out_dir / "cdf" / f"{feature}.csv"))


def cmd_report(args) -> None:
    path = args.metrics or args.out_dir / "metrics.jsonl"
    if not Path(path).exists():
        raise DataError(f"{path} does not exist")
    table = read_report(path)
    out = args.out_dir / "report.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    table.to_csv(out, index=False, float_format="%.6f")
    print(table.to_string(index=False))


COMMANDS = {
    "ingest": cmd_ingest,
    "dataset": cmd_dataset,
    "train": cmd_train,
    "features": cmd_features,
    "experiment": cmd_experiment,
    "control": cmd_control,
    "robustness": cmd_robustness,
    "cdf": cmd_cdf,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:
        # --help
        return int(e.code or 0)
    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_USAGE

    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s - %(levelname)s - %(message)s")
    try:
        COMMANDS[args.command](args)
    except NumericError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValidationError as e:
        print(f"invalid configuration: {e.errors()[0]['msg']} ({e.error_count()} error(s))", file=sys.stderr)
        return EXIT_DATA
    except (DataError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    return 0


if __name__ == "__main__":
    sys.exit(main())
