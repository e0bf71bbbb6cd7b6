"""Pseudo-real-time evaluation: backtests, RMSFE reports, CV and the composite indicator.

Forecast values are expressed in the units of the panel handed to these
functions (normally the standardized transformed panel); models trained
on a vintage re-standardize internally and map their output back.
"""

from __future__ import annotations

import itertools
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

from .data import Panel, fit_standardizer, make_vintage, period_end
from .statespace import assemble_state_space, kalman_filter, kalman_smooth
from .training import FitResult, TrainConfig, TrainingError, train_d2fm

log = logging.getLogger(__name__)

TARGET_BUCKETS = (30, 26, 20, 14, 8, 2)
MONTHLY_BUCKETS = (6, 4, 2)
BUCKET_HALF_WIDTH = 2


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class ForecastRecord:
    as_of: np.datetime64
    target_period: np.datetime64
    series: str
    horizon_type: str
    weeks_to_release: int
    value: float
    model_tag: str = "D2FM"

    @property
    def key(self):
        return (self.model_tag, self.series, str(self.target_period), str(self.as_of))


def records_frame(records) -> pd.DataFrame:
    rows = [(str(r.as_of), str(r.target_period), r.series, r.horizon_type,
             r.weeks_to_release, r.value, r.model_tag) for r in records]
    return pd.DataFrame(rows, columns=["as_of", "target_period", "series", "horizon_type",
                                       "weeks_to_release", "value", "model"])


def write_forecasts(records, path):
    frame = records_frame(sorted(records, key=lambda r: r.key))
    frame[["as_of", "target_period", "series", "horizon_type", "value"]].to_csv(
        path, index=False, float_format="%.17g")


def _month(as_of):
    return np.datetime64(str(as_of)[:7], "M")


def quarter_end(month):
    month = np.datetime64(month, "M")
    return month + (2 - month.astype(int) % 3)


def weeks_to_release(as_of, period, delay_days):
    release = period_end(period) + np.timedelta64(int(delay_days), "D")
    days = (release - np.datetime64(as_of, "D")).astype(int)
    return int(days // 7)


def target_quarters(as_of, delay_days):
    """Unreleased quarters around ``as_of``: (quarter end, horizon type) pairs."""
    as_of = np.datetime64(str(as_of)[:10], "D")
    current = quarter_end(_month(as_of))
    out = []
    for k, kind in ((-3, "backcast"), (0, "nowcast"), (3, "forecast")):
        qe = current + k
        if period_end(qe) + np.timedelta64(int(delay_days), "D") > as_of:
            out.append((qe, kind))
    return out


def ar1_benchmark(panel: Panel, target: str, as_of_dates, min_obs=20):
    """AR(1) with intercept on the released history of a quarterly target."""
    j = panel.column(target)
    meta = panel.meta[j]
    qrows = np.flatnonzero(panel.dates.astype(int) % 3 == 2)
    qdates = panel.dates[qrows]
    records = []
    for as_of in as_of_dates:
        as_of = np.datetime64(str(as_of)[:10], "D")
        x = make_vintage(panel, as_of).panel.values[qrows, j]
        seen = np.flatnonzero(~np.isnan(x))
        if seen.size < min_obs:
            raise EvaluationError(f"{seen.size} quarterly observations before {as_of}, need {min_obs}")
        last = seen[-1]
        hist = x[: last + 1]
        Y, X = hist[1:], hist[:-1]
        ok = ~np.isnan(Y) & ~np.isnan(X)
        design = np.column_stack([np.ones(ok.sum()), X[ok]])
        (c, phi), *_ = np.linalg.lstsq(design, Y[ok], rcond=None)
        for qe, kind in target_quarters(as_of, meta.delay_days):
            steps = int(np.searchsorted(qdates, qe)) - last
            value = x[last]
            for _ in range(max(steps, 0)):
                value = c + phi * value
            records.append(ForecastRecord(as_of, qe, target, kind,
                                          weeks_to_release(as_of, qe, meta.delay_days),
                                          float(value), "AR1"))
    return records


def ar1_monthly_benchmark(panel: Panel, model_records, min_obs=20):
    """AR(1) forecasts matching every monthly-series record in ``model_records``."""
    cache = {}
    out = []
    for rec in model_records:
        if rec.horizon_type != "monthly":
            continue
        key = (str(rec.as_of), rec.series)
        if key not in cache:
            j = panel.column(rec.series)
            x = make_vintage(panel, rec.as_of).panel.values[:, j]
            seen = np.flatnonzero(~np.isnan(x))
            if seen.size < min_obs:
                raise EvaluationError(f"{rec.series}: too little history at {rec.as_of}")
            Y, X = x[1:seen[-1] + 1], x[:seen[-1]]
            ok = ~np.isnan(Y) & ~np.isnan(X)
            (c, phi), *_ = np.linalg.lstsq(np.column_stack([np.ones(ok.sum()), X[ok]]), Y[ok],
                                           rcond=None)
            cache[key] = (c, phi, panel.dates[seen[-1]], x[seen[-1]])
        c, phi, last, value = cache[key]
        for _ in range(int(np.datetime64(rec.target_period, "M") - last)):
            value = c + phi * value
        out.append(replace(rec, value=float(value), model_tag="AR1"))
    return out


class Nowcaster:
    """Runs the state space of a fitted model over vintages of ``panel``."""

    def __init__(self, fit: FitResult, tag="D2FM"):
        self.fit = fit
        self.tag = tag
        self.ss = assemble_state_space(fit)

    def smoothed_values(self, panel: Panel, as_of, end_month=None):
        """Smoothed measurement means (panel units) on the vintage grid up to ``end_month``."""
        vintage = make_vintage(panel, as_of).panel
        if end_month is None:
            end_month = quarter_end(_month(as_of)) + 3
        T = int(end_month - vintage.dates[0]) + 1
        if T > len(vintage.dates):
            vintage = vintage.extend(T - len(vintage.dates))
        vintage = vintage.rows(0, T)
        scaler = self.fit.standardizer
        data = vintage.values if scaler is None else scaler.apply(vintage.values)
        out = kalman_filter(self.ss, data, vintage.dates)
        mean, _ = kalman_smooth(self.ss, out)
        fitted = mean @ self.ss.design.T + self.ss.obs_intercept
        if scaler is not None:
            fitted = scaler.inverse(fitted)
        return vintage, fitted

    def records(self, panel: Panel, as_of, target, monthly=True, monthly_weeks=8):
        as_of = np.datetime64(str(as_of)[:10], "D")
        vintage, fitted = self.smoothed_values(panel, as_of)
        index = {d: t for t, d in enumerate(vintage.dates)}
        out = []
        j = vintage.column(target)
        delay = vintage.meta[j].delay_days
        for qe, kind in target_quarters(as_of, delay):
            out.append(ForecastRecord(as_of, qe, target, kind,
                                      weeks_to_release(as_of, qe, delay),
                                      float(fitted[index[qe], j]), self.tag))
        if monthly:
            released = vintage.release_dates()
            for i, m in enumerate(vintage.meta):
                if m.quarterly:
                    continue
                for t in range(len(vintage.dates)):
                    if released[t, i] <= as_of:
                        continue
                    w = weeks_to_release(as_of, vintage.dates[t], m.delay_days)
                    if 0 <= w <= monthly_weeks:
                        out.append(ForecastRecord(as_of, vintage.dates[t], m.code, "monthly",
                                                  w, float(fitted[t, i]), self.tag))
        return out


@dataclass
class BacktestConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    target: str = None
    retrain_months: int = 12
    monthly_records: bool = True


@dataclass
class BacktestResult:
    records: list
    failures: list
    audit: list
    fits: dict


def expanding_backtest(panel: Panel, cfg: BacktestConfig, schedule) -> BacktestResult:
    """Replay ``schedule`` as-of dates with models trained on each vintage.

    A model is (re)trained on the vintage at the first date and then
    whenever ``retrain_months`` have passed; in between, the latest model
    is only re-filtered on the new vintage.
    """
    if cfg.target is None:
        raise EvaluationError("backtest needs a target series")
    schedule = sorted(np.datetime64(str(d)[:10], "D") for d in schedule)
    if not schedule:
        raise EvaluationError("empty schedule")
    if schedule[0] < period_end(panel.dates[0]):
        raise EvaluationError("schedule starts before the panel")
    records, failures, audit, fits = [], [], [], {}
    model, trained_at = None, None
    for as_of in schedule:
        month = _month(as_of)
        due = model is None or int(month - trained_at) >= cfg.retrain_months
        vintage = make_vintage(panel, as_of).panel
        if due:
            try:
                model = _train_on_vintage(vintage, month, cfg.train)
                trained_at = month
                fits[str(as_of)] = model.fit
            except (TrainingError, ValueError, FloatingPointError) as exc:
                log.warning("training failed at %s: %s", as_of, exc)
                failures.append((str(as_of), str(exc)))
                if model is None:
                    continue
        used = vintage.release_dates()[vintage.mask]
        audit.append((as_of, used.max() if used.size else None))
        records.extend(model.records(panel, as_of, cfg.target, cfg.monthly_records))
    return BacktestResult(records, failures, audit, fits)


def _train_on_vintage(vintage: Panel, month, train_cfg: TrainConfig) -> Nowcaster:
    T = int(month - vintage.dates[0]) + 1
    window = vintage.rows(0, min(T, len(vintage.dates)))
    scaler = fit_standardizer(window)
    std = window.replace(values=scaler.apply(window.values))
    return Nowcaster(train_d2fm(std, train_cfg, scaler))


def actuals_for(panel: Panel, records):
    """Map (series, period) -> realized value for every record."""
    out = {}
    for r in records:
        j = panel.column(r.series)
        t = int(np.datetime64(r.target_period, "M") - panel.dates[0])
        if 0 <= t < len(panel.dates) and not np.isnan(panel.values[t, j]):
            out[(r.series, str(r.target_period))] = float(panel.values[t, j])
    return out


def bucket_of(weeks, buckets=TARGET_BUCKETS, half_width=BUCKET_HALF_WIDTH):
    for b in buckets:
        if b - half_width <= weeks < b + half_width:
            return b
    return None


def _rmse(errors):
    errors = np.sort(np.asarray(errors, float) ** 2)
    return float(np.sqrt(errors.mean())) if errors.size else float("nan")


def rmsfe_report(records, actuals, benchmark_records=None, buckets=TARGET_BUCKETS,
                 series=None):
    """RMSFE by weeks-to-release bucket, absolute and relative to a benchmark.

    ``actuals`` maps ``(series, str(period))`` to the realized value. Every
    record must have an actual.
    """
    def errors_by_bucket(recs):
        grouped = {b: [] for b in buckets}
        for r in sorted(recs, key=lambda r: r.key):
            if series is not None and r.series != series:
                continue
            key = (r.series, str(r.target_period))
            if key not in actuals:
                raise EvaluationError(f"no actual for {key}")
            b = bucket_of(r.weeks_to_release, buckets)
            if b is not None:
                grouped[b].append(r.value - actuals[key])
        return grouped

    model = errors_by_bucket(records)
    bench = errors_by_bucket(benchmark_records) if benchmark_records is not None else None
    rows = []
    for b in buckets:
        m = _rmse(model[b])
        row = {"weeks": b, "n": len(model[b]), "rmsfe": m}
        if bench is not None:
            br = _rmse(bench[b])
            row.update(rmsfe_benchmark=br, relative=m / br if br > 0 else float("nan"))
        rows.append(row)
    return pd.DataFrame(rows)


def table_layout(report: pd.DataFrame, model_tag="D2FM") -> pd.DataFrame:
    """One row per model, one relative-RMSFE column per weeks bucket."""
    row = {f"{int(w)} weeks": rel for w, rel in zip(report["weeks"], report["relative"])}
    return pd.DataFrame([row], index=pd.Index([model_tag], name="model"))


def monthly_relative_rmsfe(panel, records, benchmark_records, buckets=MONTHLY_BUCKETS):
    """Average over monthly series of model/benchmark RMSFE ratios per bucket."""
    actuals = actuals_for(panel, records)
    codes = sorted({r.series for r in records if r.horizon_type == "monthly"})
    ratios = {b: [] for b in buckets}
    for code in codes:
        rep = rmsfe_report([r for r in records if r.series == code and (r.series, str(r.target_period)) in actuals],
                           actuals,
                           [r for r in benchmark_records if r.series == code and (r.series, str(r.target_period)) in actuals],
                           buckets)
        for b, rel in zip(rep["weeks"], rep["relative"]):
            if np.isfinite(rel):
                ratios[b].append(rel)
    return {b: float(np.mean(v)) if v else float("nan") for b, v in ratios.items()}


def cv_folds(T, h, K):
    """Expanding-window folds ``[(train_lo, train_hi), (valid_lo, valid_hi)]``, inclusive.

    For ``k = K, ..., 1`` the training span is ``[0, T - k*h - 1]`` and the
    validation span ``[T - k*h, T - (k-1)*h]``.
    """
    if h < 1 or K < 1:
        raise EvaluationError("h and K must be positive")
    if K * h >= T - 1:
        raise EvaluationError(f"K*h = {K * h} must be below T-1 = {T - 1}")
    return [((0, T - k * h - 1), (T - k * h, T - (k - 1) * h)) for k in range(K, 0, -1)]


@dataclass
class CVGrid:
    n_factors: tuple = (2, 3, 4, 5, 6, 7, 8)
    input_lags: tuple = (0, 1, 2, 3)
    hidden_sizes: tuple = (None,)
    h: int = 12
    K: int = 3

    def candidates(self, base: TrainConfig):
        for r, q, hs in itertools.product(self.n_factors, self.input_lags, self.hidden_sizes):
            yield replace(base, n_factors=int(r), input_lags=int(q),
                          hidden_sizes=None if hs is None else tuple(hs))


def validation_loss(panel: Panel, cfg: TrainConfig, target, h, K):
    """Mean squared error of the target over the K validation spans."""
    T = len(panel.dates)
    j = panel.column(target)
    losses = []
    for (_, train_hi), (v_lo, v_hi) in cv_folds(T, h, K):
        train = panel.rows(0, train_hi + 1)
        fit = train_d2fm(train, cfg)
        stop = min(v_hi, T - 1) + 1
        window = panel.rows(0, stop)
        values = window.values.copy()
        values[v_lo:, j] = np.nan
        ss = assemble_state_space(fit)
        out = kalman_filter(ss, values)
        mean, _ = kalman_smooth(ss, out)
        pred = mean @ ss.design[j] + ss.obs_intercept[j]
        actual = window.values[v_lo:stop, j]
        seen = ~np.isnan(actual)
        if seen.any():
            losses.append(np.mean((pred[v_lo:stop][seen] - actual[seen]) ** 2))
    if not losses:
        raise EvaluationError("no target observations in any validation span")
    return float(np.mean(losses))


def cross_validate(panel: Panel, grid: CVGrid, cfg: TrainConfig, target, loss_fn=None,
                   workers=1):
    """Grid search; returns ``(best_config, table)``.

    Ties go to the candidate with fewer parameters. ``loss_fn`` defaults to
    :func:`validation_loss` and exists so the selection logic can be run
    with a cheap surrogate. With ``workers > 1`` candidates are scored in
    separate processes; results do not depend on the worker count.
    """
    candidates = list(grid.candidates(cfg))
    if not candidates:
        raise EvaluationError("empty hyperparameter grid")
    T = len(panel.dates)
    folds = cv_folds(T, grid.h, grid.K)
    if folds[0][0][1] + 1 < cfg.batch_size:
        raise EvaluationError("first fold leaves fewer training rows than one batch")
    loss_fn = loss_fn or validation_loss
    n = panel.shape[1]
    args = [(panel, c, target, grid.h, grid.K) for c in candidates]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            losses = list(pool.map(loss_fn, *zip(*args)))
    else:
        losses = [loss_fn(*a) for a in args]
    table = []
    for c, loss in zip(candidates, losses):
        table.append({"n_factors": c.n_factors, "input_lags": c.input_lags,
                      "hidden_sizes": c.hidden_sizes, "n_params": c.n_parameters(n),
                      "loss": loss})
    best = min(range(len(candidates)), key=lambda i: (table[i]["loss"], table[i]["n_params"], i))
    return candidates[best], pd.DataFrame(table)


def composite_indicator(fit: FitResult, target=None):
    """Factors weighted by their share of the squared loadings norm.

    The sign of each factor is a free normalisation of the model (flipping
    a factor and its loadings column changes nothing), so each factor is
    first oriented to correlate positively with ``target`` (a series on the
    fit's monthly grid, NaN where unobserved) or, without a target, to have
    a non-negative loadings column sum. The weighted sum is then flipped if
    it still correlates negatively with the target.
    Returns ``(indicator, weights)``.
    """
    lam = fit.network.loadings
    total = np.sum(lam ** 2)
    if total == 0:
        raise EvaluationError("all loadings are zero")
    weights = np.sum(lam ** 2, axis=0) / total
    signs = np.where(lam.sum(axis=0) < 0, -1.0, 1.0)
    ok = None
    if target is not None:
        target = np.asarray(target, float)
        ok = ~np.isnan(target)
        if ok.sum() > 2:
            for k in range(fit.factors.shape[1]):
                c = np.corrcoef(fit.factors[ok, k], target[ok])[0, 1]
                if np.isfinite(c) and c != 0:
                    signs[k] = np.sign(c)
    ci = (fit.factors * signs) @ weights
    if ok is not None and ok.sum() > 2 and np.corrcoef(ci[ok], target[ok])[0, 1] < 0:
        ci = -ci
    return ci, weights
