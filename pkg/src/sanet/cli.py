"""Command-line entry point: ``sanet <command> [--config FILE] [--set key=value ...]``.

Commands: synth, train, evaluate, predict, report, map. Exit status is 0 on
success, 1 on configuration errors, 2 on data errors and 3 on numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cells import KINDS
from .checkpoint import Checkpoint, CheckpointError
from .data import DataError, DEFAULT_SPLIT, load_dataset, make_windows, split, synthesize, write_dataset
from .tensor import NonFiniteError
from .metrics import (
    MetricError,
    MetricsReport,
    average_reports,
    comparison_rows,
    format_table,
    morans_i,
    mpe_field,
    write_mpe_map,
    write_statistics,
)
from .trainer import (
    BASELINES,
    NumericError,
    TrainConfig,
    baseline_forecast,
    evaluate,
    evaluate_baseline,
    predict_next,
    predict_raw,
    train,
    write_log,
)

log = logging.getLogger("sanet")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
COMMANDS = ("synth", "train", "evaluate", "predict", "report", "map")


class ConfigError(ValueError):
    pass


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.split(",") if x.strip())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.split(",") if x.strip())


def _optional_float(text: str) -> float | None:
    return None if text.strip().lower() in ("", "none", "off") else float(text)


# key -> (parser, default)
KEYS = {
    "model": (str, "SA-Net"),
    "grid_rows": (int, 8),
    "grid_cols": (int, 8),
    "days": (int, 120),
    "look_back": (int, 6),
    "batch_size": (int, 64),
    "step_size": (float, 0.001),
    "max_epochs": (int, 300),
    "gamma": (float, 0.0),
    "lambda": (float, 10.0),
    "attribute": (str, "pct_black"),
    "threshold": (float, 0.5),
    "seed": (int, 0),
    "runs": (int, 1),
    "layers": (int, 1),
    "layer_sweep": (_ints, ()),
    "channels": (int, 64),
    "kernel_size": (int, 3),
    "temporal_hidden": (int, 32),
    "clip_norm": (_optional_float, None),
    "split": (_floats, DEFAULT_SPLIT),
    "eval_split": (str, "test"),
    "ma_mode": (str, "daily"),
    "demand": (str, ""),
    "sociodemo": (str, ""),
    "weather": (str, ""),
    "holidays": (str, ""),
    "output": (str, "."),
    "checkpoint": (str, ""),
    "evaluations": (str, ""),
    "labels": (str, ""),
}

DATA_FILES = {"demand": "demand.csv", "sociodemo": "sociodemo.csv", "weather": "weather.csv",
              "holidays": "holidays.txt"}


@dataclass
class RunConfig:
    values: dict

    def __getitem__(self, key):
        return self.values[key]

    @property
    def output(self) -> Path:
        return Path(self.values["output"])

    def data_path(self, key: str) -> Path:
        return Path(self.values[key]) if self.values[key] else self.output / DATA_FILES[key]

    def checkpoints(self) -> list[Path]:
        if self.values["checkpoint"]:
            return [Path(p.strip()) for p in self.values["checkpoint"].split(",") if p.strip()]
        single = self.output / "model.ckpt"
        if single.exists():
            return [single]
        return sorted(self.output.glob("model_run*.ckpt"))

    def train_config(self) -> TrainConfig:
        v = self.values
        try:
            return TrainConfig(
                batch_size=v["batch_size"], step_size=v["step_size"], max_epochs=v["max_epochs"],
                look_back=v["look_back"], layers=v["layers"], layer_sweep=v["layer_sweep"], runs=v["runs"],
                seed=v["seed"], gamma=v["gamma"], lam=v["lambda"], attribute=v["attribute"],
                threshold=v["threshold"], channels=v["channels"], kernel_size=v["kernel_size"],
                temporal_hidden=v["temporal_hidden"], clip_norm=v["clip_norm"], split=v["split"])
        except ValueError as exc:
            raise ConfigError(str(exc)) from None


def parse_config_text(text: str, origin: str = "config") -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        out[key.strip()] = value.strip()
    return out


def build_config(config_path: str | None, overrides: list[str]) -> RunConfig:
    raw: dict[str, str] = {}
    if config_path:
        path = Path(config_path)
        if not path.is_file():
            raise ConfigError(f"config file {path} does not exist")
        raw.update(parse_config_text(path.read_text(encoding="utf-8"), str(path)))
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        raw[key.strip()] = value.strip()
    unknown = sorted(set(raw) - set(KEYS))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    values = {k: default for k, (_, default) in KEYS.items()}
    for key, text in raw.items():
        parser = KEYS[key][0]
        try:
            values[key] = parser(text)
        except ValueError:
            raise ConfigError(f"bad value for {key}: {text!r}") from None
    if values["model"] not in KINDS + BASELINES:
        raise ConfigError(f"unknown model {values['model']!r}; choose from {', '.join(KINDS + BASELINES)}")
    if values["ma_mode"] not in ("daily", "hourly"):
        raise ConfigError("ma_mode must be 'daily' or 'hourly'")
    if values["eval_split"] not in ("train", "val", "test"):
        raise ConfigError("eval_split must be train, val or test")
    if len(values["split"]) != 3:
        raise ConfigError("split needs three comma-separated numbers")
    return RunConfig(values)


def _require(paths: list[Path], what: str) -> None:
    missing = [str(p) for p in paths if not p.exists()]
    if missing:
        raise ConfigError(f"{what} not found: {', '.join(missing)}")


def _dataset(cfg: RunConfig):
    paths = [cfg.data_path(k) for k in ("demand", "sociodemo", "weather")]
    holidays = cfg.data_path("holidays")
    _require(paths, "input file(s)")
    if cfg["holidays"]:
        _require([holidays], "holiday file")
    return load_dataset(*paths, holidays if holidays.exists() else None)


def _load_checkpoints(cfg: RunConfig) -> list[Checkpoint]:
    paths = cfg.checkpoints()
    if not paths:
        raise ConfigError(f"no checkpoint given and none found in {cfg.output}")
    _require(paths, "checkpoint(s)")
    return [Checkpoint.load(p) for p in paths]


# commands ------------------------------------------------------------------

def cmd_synth(cfg: RunConfig) -> None:
    try:
        dataset = synthesize(cfg["seed"], cfg["grid_rows"], cfg["grid_cols"], cfg["days"])
    except DataError as exc:
        raise ConfigError(str(exc)) from None
    write_dataset(dataset, *(cfg.output / DATA_FILES[k] for k in ("demand", "sociodemo", "weather", "holidays")))
    log.info("wrote synthetic dataset to %s", cfg.output)


def cmd_train(cfg: RunConfig) -> None:
    if cfg["model"] in BASELINES:
        raise ConfigError(f"{cfg['model']} is a baseline and needs no training")
    tc = cfg.train_config()
    dataset = _dataset(cfg)
    for run in range(tc.runs):
        result = train(cfg["model"], dataset, tc, run=run)
        suffix = "" if tc.runs == 1 else f"_run{run}"
        result.checkpoint.save(cfg.output / f"model{suffix}.ckpt")
        write_log(cfg.output / f"train_log{suffix}.csv", result.log)
        log.info("run %d: best validation loss %.6g at epoch %d", run, result.best_val_loss,
                 result.checkpoint.epoch)


def _evaluation_report(cfg: RunConfig, dataset) -> MetricsReport:
    if cfg["model"] in BASELINES:
        groups = {"pct_black": 0.5, "pct_low_income": 0.25, cfg["attribute"]: cfg["threshold"]}
        return evaluate_baseline(cfg["model"], dataset, cfg["split"], cfg["look_back"], cfg["eval_split"],
                                 cfg["ma_mode"], groups)
    checkpoints = _load_checkpoints(cfg)
    return average_reports([evaluate(c, dataset, cfg["eval_split"]) for c in checkpoints])


def cmd_evaluate(cfg: RunConfig) -> None:
    dataset = _dataset(cfg)
    report = _evaluation_report(cfg, dataset)
    report.write_csv(cfg.output / "metrics.csv")
    sys.stdout.write(format_table([(report.get("meta", "model", cfg["model"]), report)]))


def cmd_predict(cfg: RunConfig) -> None:
    dataset = _dataset(cfg)
    checkpoint = _load_checkpoints(cfg)[0]
    stamp, grid = predict_next(checkpoint, dataset)
    with open(cfg.output / "prediction.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["timestamp", "row", "col", "demand"])
        for r in range(grid.shape[0]):
            for c in range(grid.shape[1]):
                w.writerow([stamp.isoformat(), r, c, repr(float(grid[r, c]))])


def _label(report: MetricsReport, path: Path) -> str:
    model = report.get("meta", "model", "")
    gamma = report.get("meta", "gamma", "")
    if isinstance(model, str) and model:
        return f"{model} gamma={gamma}" if gamma not in ("", None) else model
    return path.stem


def cmd_report(cfg: RunConfig) -> None:
    from .plotting import plot_comparison

    paths = [Path(p.strip()) for p in cfg["evaluations"].split(",") if p.strip()]
    if not paths:
        raise ConfigError("report needs 'evaluations' (comma-separated metrics CSV paths)")
    _require(paths, "evaluation file(s)")
    reports = [MetricsReport.read_csv(p) for p in paths]
    labels = [x.strip() for x in cfg["labels"].split(",")] if cfg["labels"] else [
        _label(r, p) for r, p in zip(reports, paths)]
    if len(labels) != len(reports):
        raise ConfigError("labels must match the number of evaluations")
    pairs = list(zip(labels, reports))
    header, rows = comparison_rows(pairs)
    with open(cfg.output / "report.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([row[0]] + ["undefined" if np.isnan(v) else repr(float(v)) for v in row[1:]])
    plot_comparison(cfg.output / "report.png", pairs, cfg["attribute"])
    sys.stdout.write(format_table(pairs))


def write_map_outputs(y: np.ndarray, yhat: np.ndarray, output: Path, title: str = "") -> float | None:
    """Per-cell MPE CSV, Moran's I statistics CSV and heatmap; returns Moran's I or None."""
    from .plotting import plot_mpe_map

    field = mpe_field(y, yhat)
    write_mpe_map(output / "mpe_map.csv", field)
    try:
        moran = morans_i(field)
    except MetricError:
        moran = None
    write_statistics(output / "mpe_map_stats.csv", {"morans_i": float("nan") if moran is None else moran})
    plot_mpe_map(output / "mpe_map.png", field, title)
    return moran


def cmd_map(cfg: RunConfig) -> None:
    dataset = _dataset(cfg)
    if cfg["model"] in BASELINES:
        windows, pred = baseline_forecast(cfg["model"], dataset, cfg["split"], cfg["look_back"],
                                          cfg["eval_split"], cfg["ma_mode"])
        title = cfg["model"]
    else:
        checkpoint = _load_checkpoints(cfg)[0]
        fractions = _floats(checkpoint.extra["split"]) if "split" in checkpoint.extra else cfg["split"]
        part = dict(zip(("train", "val", "test"), split(dataset, fractions)))[cfg["eval_split"]]
        windows = make_windows(part, checkpoint.model_config.look_back, checkpoint.stats)
        model = checkpoint.model(dataset.sociodemo.standardized().values)
        pred = np.maximum(predict_raw(model, windows, checkpoint.stats), 0.0)
        title = f"{checkpoint.model_config.kind} gamma={checkpoint.extra.get('gamma', '')}"
    moran = write_map_outputs(windows.target, pred, cfg.output, title)
    sys.stdout.write(f"morans_i,{'undefined' if moran is None else repr(moran)}\n")


HANDLERS = {"synth": cmd_synth, "train": cmd_train, "evaluate": cmd_evaluate, "predict": cmd_predict,
            "report": cmd_report, "map": cmd_map}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sanet", description="Socially-aware demand forecasting.")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="flat 'key = value' configuration file")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one configuration key (repeatable)")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = build_config(args.config, args.overrides)
        cfg.output.mkdir(parents=True, exist_ok=True)
        HANDLERS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, NonFiniteError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, CheckpointError, MetricError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
