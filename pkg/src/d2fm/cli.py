"""Command-line entry point.

Every command except ``ingest`` reads a YAML run configuration::

    seed: 7                      # required
    target: GDPC1                # quarterly series to nowcast
    paths:
      data: data.csv             # raw panel (relative to the config file)
      meta: meta.csv
      output_dir: out
      checkpoint: out/model.json # default: <output_dir>/model.json
    standardize: {start: null, end: null}
    train: {n_factors: 2, input_lags: 1, ...}      # TrainConfig fields
    cv: {n_factors: [2, 3], input_lags: [0, 1], hidden_sizes: [null], h: 12, K: 3}
    backtest: {start: 2006-01-01, end: 2010-12-31, step_days: 7, retrain_months: 12}
    simulate: {n: 30, T: 360, r: 2, n_quarterly: 1, missing_rate: 0.1}

Exit codes: 0 success, 2 invalid configuration or arguments, 3 missing
prerequisite file, 4 failure inside a pipeline step.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import pandas as pd
import yaml

from .data import (DGPConfig, fit_standardizer, generate_synthetic_panel, load_panel,
                   make_vintage, meta_frame, transform_panel)
from .evaluation import (BacktestConfig, CVGrid, Nowcaster, actuals_for, ar1_benchmark,
                         ar1_monthly_benchmark, composite_indicator, cross_validate,
                         expanding_backtest, monthly_relative_rmsfe, rmsfe_report,
                         table_layout, write_forecasts)
from .training import FitResult, TrainConfig, train_d2fm

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_FAILURE = 0, 2, 3, 4
COMMANDS = ("ingest", "train", "nowcast", "backtest", "cv", "indicator", "simulate")

log = logging.getLogger("d2fm")


class ConfigError(ValueError):
    pass


class MissingArtifact(FileNotFoundError):
    pass


_TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"rng_seed"}
_SECTIONS = {
    "seed": None,
    "target": None,
    "paths": {"data", "meta", "output_dir", "checkpoint"},
    "standardize": {"start", "end"},
    "train": _TRAIN_KEYS,
    "cv": {"n_factors", "input_lags", "hidden_sizes", "h", "K"},
    "backtest": {"start", "end", "step_days", "retrain_months", "monthly_records"},
    "simulate": {"n", "T", "r", "n_quarterly", "missing_rate", "idio_phi", "idio_var",
                 "var_coefs", "var_cov", "start"},
}


@dataclass
class RunConfig:
    seed: int
    base_dir: Path
    data: Path = None
    meta: Path = None
    output_dir: Path = None
    checkpoint: Path = None
    target: str = None
    fit_range: tuple = (None, None)
    train: TrainConfig = None
    cv: CVGrid = field(default_factory=CVGrid)
    backtest: dict = field(default_factory=dict)
    simulate: dict = field(default_factory=dict)


def parse_config(path) -> RunConfig:
    """Load and validate a YAML run configuration; unknown keys are errors."""
    path = Path(path)
    if not path.exists():
        raise MissingArtifact(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" at line {mark.line + 1}, column {mark.column + 1}" if mark else ""
        raise ConfigError(f"cannot parse {path}{where}: {getattr(exc, 'problem', exc)}")
    if not isinstance(raw, dict):
        raise ConfigError("configuration must be a mapping")
    for key, value in raw.items():
        if key not in _SECTIONS:
            raise ConfigError(f"unknown key '{key}'")
        allowed = _SECTIONS[key]
        if allowed is not None:
            if not isinstance(value, dict):
                raise ConfigError(f"'{key}' must be a mapping")
            for sub in value:
                if sub not in allowed:
                    raise ConfigError(f"unknown key '{key}.{sub}'")
    if "seed" not in raw or not isinstance(raw["seed"], int) or isinstance(raw["seed"], bool):
        raise ConfigError("'seed' is required and must be an integer")

    base = path.resolve().parent
    paths = raw.get("paths", {})
    resolve = lambda p: None if p is None else (base / str(p)).resolve()
    out_dir = resolve(paths.get("output_dir", "out"))
    ckpt = resolve(paths.get("checkpoint")) or out_dir / "model.json"

    try:
        train = TrainConfig(rng_seed=raw["seed"], **raw.get("train", {}))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"train: {exc}")
    cv_raw = dict(raw.get("cv", {}))
    for key in ("n_factors", "input_lags", "hidden_sizes"):
        if key in cv_raw:
            cv_raw[key] = tuple(cv_raw[key])
    cv = CVGrid(**cv_raw)
    std = raw.get("standardize", {})
    return RunConfig(
        seed=raw["seed"], base_dir=base, data=resolve(paths.get("data")),
        meta=resolve(paths.get("meta")), output_dir=out_dir, checkpoint=ckpt,
        target=raw.get("target"), fit_range=(std.get("start"), std.get("end")),
        train=train, cv=cv, backtest=dict(raw.get("backtest", {})),
        simulate=dict(raw.get("simulate", {})),
    )


def _require(path, what):
    if path is None:
        raise ConfigError(f"no {what} path configured")
    if not Path(path).exists():
        raise MissingArtifact(f"{what} not found: {path}")
    return path


def _transformed_panel(cfg: RunConfig):
    return transform_panel(load_panel(_require(cfg.data, "data file"),
                                      _require(cfg.meta, "meta file")))


def _standardized(panel, fit_range):
    lo, hi = fit_range
    rows = slice(0, len(panel.dates))
    if lo is not None or hi is not None:
        lo = panel.dates[0] if lo is None else np.datetime64(str(lo)[:7], "M")
        hi = panel.dates[-1] if hi is None else np.datetime64(str(hi)[:7], "M")
        rows = slice(int(np.searchsorted(panel.dates, lo)),
                     int(np.searchsorted(panel.dates, hi, side="right")))
    scaler = fit_standardizer(panel.rows(rows.start, rows.stop))
    return panel.replace(values=scaler.apply(panel.values)), scaler


def _need_target(cfg):
    if not cfg.target:
        raise ConfigError("'target' is required for this command")
    return cfg.target


def cmd_ingest(args):
    panel = transform_panel(load_panel(_require(args.data, "data file"),
                                       _require(args.meta, "meta file")))
    if args.as_of:
        panel = make_vintage(panel, args.as_of).panel
    panel.to_csv(args.out)
    return [args.out]


def cmd_simulate(cfg: RunConfig):
    s = dict(cfg.simulate)
    n_q = int(s.pop("n_quarterly", 1))
    n = int(s.get("n", 30))
    quarterly = np.zeros(n, bool)
    if n_q:
        quarterly[-n_q:] = True
    dgp = DGPConfig(quarterly=quarterly, **s)
    panel, factors, loadings = generate_synthetic_panel(dgp, cfg.seed)
    if cfg.data is None or cfg.meta is None:
        raise ConfigError("simulate needs paths.data and paths.meta to write to")
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    panel.to_csv(cfg.data)
    meta_frame(panel.meta).to_csv(cfg.meta, index=False)
    truth = pd.DataFrame(factors, columns=[f"f{k + 1}" for k in range(factors.shape[1])])
    truth.insert(0, "date", [str(d) for d in panel.dates])
    truth_path = cfg.output_dir / "true_factors.csv"
    truth.to_csv(truth_path, index=False, float_format="%.17g")
    return [cfg.data, cfg.meta, truth_path]


def cmd_train(cfg: RunConfig):
    panel = _transformed_panel(cfg)
    std, scaler = _standardized(panel, cfg.fit_range)
    fit = train_d2fm(std, cfg.train, scaler)
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    cfg.checkpoint.parent.mkdir(parents=True, exist_ok=True)
    fit.save(cfg.checkpoint)
    log_path = cfg.output_dir / "training_log.csv"
    fit.write_log(log_path)
    return [cfg.checkpoint, log_path]


def _load_fit(cfg):
    return FitResult.load(_require(cfg.checkpoint, "checkpoint"))


def cmd_nowcast(cfg: RunConfig, as_of):
    target = _need_target(cfg)
    fit = _load_fit(cfg)
    panel = _transformed_panel(cfg)
    records = Nowcaster(fit).records(panel, as_of, target)
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    path = cfg.output_dir / f"nowcast_{str(as_of)[:10]}.csv"
    write_forecasts(records, path)
    return [path]


def _schedule(cfg):
    bt = cfg.backtest
    if "start" not in bt or "end" not in bt:
        raise ConfigError("backtest.start and backtest.end are required")
    step = int(bt.get("step_days", 7))
    start = np.datetime64(str(bt["start"])[:10], "D")
    end = np.datetime64(str(bt["end"])[:10], "D")
    return list(np.arange(start, end + 1, step))


def cmd_backtest(cfg: RunConfig):
    target = _need_target(cfg)
    panel = _transformed_panel(cfg)
    schedule = _schedule(cfg)
    bt_cfg = BacktestConfig(cfg.train, target, int(cfg.backtest.get("retrain_months", 12)),
                            bool(cfg.backtest.get("monthly_records", True)))
    result = expanding_backtest(panel, bt_cfg, schedule)
    bench = ar1_benchmark(panel, target, schedule)
    records = result.records
    actuals = actuals_for(panel, records + bench)
    scored = lambda recs: [r for r in recs if (r.series, str(r.target_period)) in actuals]
    model_t = scored([r for r in records if r.series == target])
    report = rmsfe_report(model_t, actuals, scored(bench))

    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "backtest_forecasts.csv", out / "benchmark_forecasts.csv",
             out / "report.csv", out / "report_detail.csv"]
    write_forecasts(records, paths[0])
    write_forecasts(bench, paths[1])
    table_layout(report).to_csv(paths[2], float_format="%.6f")
    report.to_csv(paths[3], index=False, float_format="%.6f")
    if bt_cfg.monthly_records:
        monthly_bench = ar1_monthly_benchmark(panel, records)
        rel = monthly_relative_rmsfe(panel, records, monthly_bench)
        monthly = pd.DataFrame([{f"{w} weeks": v for w, v in rel.items()}],
                               index=pd.Index(["D2FM"], name="model"))
        paths.append(out / "report_monthly.csv")
        monthly.to_csv(paths[-1], float_format="%.6f")
    if result.failures:
        paths.append(out / "backtest_failures.csv")
        pd.DataFrame(result.failures, columns=["as_of", "error"]).to_csv(paths[-1], index=False)
    return paths


def cmd_cv(cfg: RunConfig, workers=1):
    target = _need_target(cfg)
    panel = _transformed_panel(cfg)
    std, _ = _standardized(panel, cfg.fit_range)
    best, table = cross_validate(std, cfg.cv, cfg.train, target, workers=workers)
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    table_path, best_path = out / "cv_results.csv", out / "cv_best.json"
    table.to_csv(table_path, index=False, float_format="%.17g")
    best_path.write_text(json.dumps({"n_factors": best.n_factors, "input_lags": best.input_lags,
                                     "hidden_sizes": best.hidden_sizes}, indent=2) + "\n")
    return [table_path, best_path]


def cmd_indicator(cfg: RunConfig):
    fit = _load_fit(cfg)
    target = None
    if cfg.target:
        panel = _transformed_panel(cfg)
        j = panel.column(cfg.target)
        series = pd.Series(panel.values[:, j], index=[str(d) for d in panel.dates])
        target = series.reindex([str(d) for d in fit.dates]).to_numpy()
    ci, _ = composite_indicator(fit, target)
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    path = cfg.output_dir / "indicator.csv"
    pd.DataFrame({"date": [str(d) for d in fit.dates], "value": ci}).to_csv(
        path, index=False, float_format="%.17g")
    return [path]


def build_parser():
    parser = argparse.ArgumentParser(
        prog="d2fm", description="Nowcasting with a deep dynamic factor model.",
        epilog="exit codes: 0 ok, 2 bad config/arguments, 3 missing prerequisite, 4 step failure")
    parser.add_argument("--workers", type=int, default=1,
                        help="maximum parallel worker processes (default 1)")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("ingest", help="load and transform a raw panel, write it as CSV")
    p.add_argument("--data", required=True, type=Path, help="raw data CSV")
    p.add_argument("--meta", required=True, type=Path, help="series metadata CSV")
    p.add_argument("--out", required=True, type=Path, help="output CSV")
    p.add_argument("--as-of", help="blank values not yet released at this date")
    for name, text in (("train", "train a model and write a checkpoint"),
                       ("backtest", "pseudo-real-time backtest and RMSFE report"),
                       ("cv", "cross-validate hyperparameters"),
                       ("indicator", "composite indicator from a checkpoint"),
                       ("simulate", "write a synthetic panel")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", required=True, type=Path, help="YAML run configuration")
    p = sub.add_parser("nowcast", help="backcast/nowcast/forecast at one date")
    p.add_argument("--config", required=True, type=Path, help="YAML run configuration")
    p.add_argument("--as-of", required=True, help="vintage date (YYYY-MM-DD)")
    return parser


def run_command(args) -> list:
    if args.command == "ingest":
        return cmd_ingest(args)
    cfg = parse_config(args.config)
    if args.command == "simulate":
        return cmd_simulate(cfg)
    if args.command == "train":
        return cmd_train(cfg)
    if args.command == "nowcast":
        return cmd_nowcast(cfg, args.as_of)
    if args.command == "backtest":
        return cmd_backtest(cfg)
    if args.command == "cv":
        return cmd_cv(cfg, max(1, args.workers))
    return cmd_indicator(cfg)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        for path in run_command(args):
            print(path)
    except ConfigError as exc:
        print(f"error: {args.command}: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifact as exc:
        print(f"error: {args.command}: missing prerequisite: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except Exception as exc:  # noqa: BLE001 - surfaced as a structured failure
        print(f"error: {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
