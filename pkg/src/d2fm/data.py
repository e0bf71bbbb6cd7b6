"""Panel ingestion, stationarity transforms, standardization and vintages.

Dates live on a contiguous monthly grid stored as ``datetime64[M]``.
Quarterly series occupy the row of the quarter-ending month (Mar, Jun,
Sep, Dec) and are missing in the other two months of each quarter.
Missing entries are NaN in ``values`` and False in ``mask``; the two are
kept consistent by :class:`Panel`.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd
from scipy.interpolate import CubicSpline

from ._rng import substream
from .network import MM_WEIGHTS

MONTHLY = "monthly"
QUARTERLY = "quarterly"
_FREQ_ALIASES = {"m": MONTHLY, "monthly": MONTHLY, "q": QUARTERLY, "quarterly": QUARTERLY}
META_COLUMNS = ["code", "tcode", "frequency", "delay_days", "group"]


class PanelError(ValueError):
    """Raised for malformed panel input or invalid transform requests."""


@dataclass(frozen=True)
class SeriesMeta:
    code: str
    tcode: int = 1
    frequency: str = MONTHLY
    delay_days: int = 0
    group: int = 0

    def __post_init__(self):
        freq = _FREQ_ALIASES.get(str(self.frequency).strip().lower())
        if freq is None:
            raise PanelError(f"{self.code}: unknown frequency {self.frequency!r}")
        object.__setattr__(self, "frequency", freq)
        if int(self.tcode) not in (1, 2, 3, 4, 5, 6):
            raise PanelError(f"{self.code}: tcode must be in 1..6, got {self.tcode}")
        if int(self.delay_days) < -3:
            raise PanelError(f"{self.code}: delay_days must be >= -3, got {self.delay_days}")
        object.__setattr__(self, "tcode", int(self.tcode))
        object.__setattr__(self, "delay_days", int(self.delay_days))
        object.__setattr__(self, "group", int(self.group))

    @property
    def quarterly(self) -> bool:
        return self.frequency == QUARTERLY


def month_grid(start, periods: int) -> np.ndarray:
    return np.datetime64(str(start)[:7], "M") + np.arange(periods)


def period_end(dates) -> np.ndarray:
    """Last calendar day of each month in ``dates``."""
    dates = np.asarray(dates, dtype="datetime64[M]")
    return (dates + 1).astype("datetime64[D]") - 1


def is_quarter_end(dates) -> np.ndarray:
    months = np.asarray(dates, dtype="datetime64[M]").astype(int) % 12
    return months % 3 == 2


def _frozen(a):
    a = np.array(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Panel:
    """Monthly-grid panel of series values with an observation mask."""

    dates: np.ndarray
    values: np.ndarray
    meta: tuple
    mask: np.ndarray = field(default=None)

    def __post_init__(self):
        dates = np.asarray(self.dates, dtype="datetime64[M]")
        values = np.array(self.values, dtype=float)
        if values.ndim != 2:
            raise PanelError("values must be a T x n matrix")
        T, n = values.shape
        if dates.shape != (T,):
            raise PanelError(f"{dates.shape[0]} dates for {T} rows")
        if T > 1 and np.any(np.diff(dates.astype(int)) != 1):
            raise PanelError("monthly grid must be contiguous and strictly increasing")
        meta = tuple(self.meta)
        if len(meta) != n:
            raise PanelError(f"{len(meta)} metadata rows for {n} series")
        mask = ~np.isnan(values)
        if self.mask is not None:
            mask &= np.asarray(self.mask, dtype=bool)
        values[~mask] = np.nan
        qcols = np.array([m.quarterly for m in meta], dtype=bool)
        off_quarter = ~is_quarter_end(dates)
        if np.any(mask[np.ix_(off_quarter, qcols)]):
            raise PanelError("quarterly series observed outside quarter-ending months")
        object.__setattr__(self, "dates", _frozen(dates))
        object.__setattr__(self, "values", _frozen(values))
        object.__setattr__(self, "mask", _frozen(mask))
        object.__setattr__(self, "meta", meta)

    @property
    def shape(self):
        return self.values.shape

    @property
    def codes(self) -> list:
        return [m.code for m in self.meta]

    @property
    def quarterly(self) -> np.ndarray:
        return np.array([m.quarterly for m in self.meta], dtype=bool)

    def column(self, code: str) -> int:
        try:
            return self.codes.index(code)
        except ValueError:
            raise KeyError(f"no series {code!r} in panel") from None

    def replace(self, **changes) -> "Panel":
        if "values" in changes and "mask" not in changes:
            changes["mask"] = None
        return dataclasses.replace(self, **changes)

    def rows(self, start: int, stop: int) -> "Panel":
        """Rows ``start:stop`` (Python slice semantics)."""
        return Panel(self.dates[start:stop], self.values[start:stop], self.meta)

    def extend(self, periods: int) -> "Panel":
        """Append ``periods`` all-missing months to the end of the grid."""
        if periods <= 0:
            return self
        T, n = self.shape
        dates = month_grid(self.dates[0], T + periods)
        values = np.vstack([self.values, np.full((periods, n), np.nan)])
        return Panel(dates, values, self.meta)

    def release_dates(self) -> np.ndarray:
        """T x n matrix of calendar release dates for every cell."""
        delays = np.array([m.delay_days for m in self.meta], dtype="timedelta64[D]")
        return period_end(self.dates)[:, None] + delays[None, :]

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.values, columns=self.codes)
        frame.insert(0, "date", [str(d) for d in self.dates])
        return frame

    def to_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False, float_format="%.17g")


def meta_frame(meta: Sequence[SeriesMeta]) -> pd.DataFrame:
    return pd.DataFrame(
        [[m.code, m.tcode, m.frequency, m.delay_days, m.group] for m in meta],
        columns=META_COLUMNS,
    )


def read_meta(path) -> list:
    frame = pd.read_csv(path, dtype={"code": str})
    missing = set(META_COLUMNS) - set(frame.columns)
    if missing:
        raise PanelError(f"meta file lacks columns {sorted(missing)}")
    if frame["code"].duplicated().any():
        raise PanelError("duplicate series codes in meta file")
    return [
        SeriesMeta(row.code, row.tcode, row.frequency, row.delay_days, row.group)
        for row in frame.itertuples(index=False)
    ]


def load_panel(data_csv, meta_csv) -> Panel:
    """Read a raw (untransformed) panel and its series metadata.

    Quarterly observations dated in any month of a quarter are moved to
    that quarter's ending month.
    """
    meta = read_meta(meta_csv)
    frame = pd.read_csv(data_csv, float_precision="round_trip")
    if "date" not in frame.columns:
        raise PanelError("data file has no 'date' column")
    codes = [c for c in frame.columns if c != "date"]
    known = [m.code for m in meta]
    unknown = sorted(set(codes) - set(known))
    if unknown:
        raise PanelError(f"unknown series in data file: {unknown}")
    absent = [c for c in known if c not in codes]
    if absent:
        raise PanelError(f"missing series in data file: {absent}")

    dates = pd.to_datetime(frame["date"].astype(str)).values.astype("datetime64[M]")
    if len(np.unique(dates)) != len(dates):
        raise PanelError("duplicate dates in data file")
    order = np.argsort(dates, kind="stable")
    dates = dates[order]
    raw = frame[known].to_numpy(dtype=float)[order]
    if len(dates) > 1 and np.any(np.diff(dates.astype(int)) != 1):
        raise PanelError("non-monthly gap in data dates")

    qcols = np.array([m.quarterly for m in meta])
    last = dates[-1]
    if qcols.any() and not is_quarter_end(last):
        last = last + (2 - last.astype(int) % 12 % 3)
    grid = np.arange(dates[0], last + 1)
    values = np.full((len(grid), len(meta)), np.nan)
    values[: len(dates)] = raw
    for j in np.flatnonzero(qcols):
        column = np.full(len(grid), np.nan)
        for t in np.flatnonzero(~np.isnan(raw[:, j])):
            slot = t + 2 - dates[t].astype(int) % 12 % 3
            if not np.isnan(column[slot]):
                raise PanelError(f"{meta[j].code}: two observations in one quarter")
            column[slot] = raw[t, j]
        values[:, j] = column
    return Panel(grid, values, meta)


def apply_tcode(series, tcode: int) -> np.ndarray:
    """Stationarity transform selected by ``tcode`` (1..6).

    Lag-consumed leading entries are NaN; NaN inputs propagate.
    """
    x = np.asarray(series, dtype=float)
    if tcode not in (1, 2, 3, 4, 5, 6):
        raise PanelError(f"unknown tcode {tcode}")
    if tcode >= 4:
        seen = x[~np.isnan(x)]
        if np.any(seen <= 0):
            raise PanelError(f"non-positive value under log transform (tcode {tcode})")
        x = np.log(x)
    kind = tcode if tcode < 4 else tcode - 3
    if kind == 1:
        return x.copy()
    out = np.full_like(x, np.nan)
    if kind == 2:
        out[1:] = x[1:] - x[:-1]
        return out
    # (1-L)(1-L^12)
    out[13:] = x[13:] - x[12:-1] - x[1:-12] + x[:-13]
    return out


def _lagged(x: np.ndarray, k: int) -> np.ndarray:
    out = np.full_like(x, np.nan)
    out[k:] = x[:-k]
    return out


def transform_panel(panel: Panel) -> Panel:
    """Apply each series' tcode.

    Quarterly series are differenced across consecutive quarters, so their
    lag ``k`` is ``3k`` monthly rows.
    """
    out = np.full(panel.shape, np.nan)
    for j, m in enumerate(panel.meta):
        col = panel.values[:, j]
        if m.quarterly:
            rows = np.flatnonzero(is_quarter_end(panel.dates))
            tc = m.tcode
            if tc in (3, 6):
                raise PanelError(f"{m.code}: seasonal tcode {tc} unsupported for quarterly data")
            out[rows, j] = apply_tcode(col[rows], tc)
        else:
            out[:, j] = apply_tcode(col, m.tcode)
    return Panel(panel.dates, out, panel.meta)


@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, values):
        return (np.asarray(values, dtype=float) - self.mean) / self.std

    def inverse(self, values):
        return np.asarray(values, dtype=float) * self.std + self.mean

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["mean"], dtype=float), np.asarray(d["std"], dtype=float))


def _row_range(dates: np.ndarray, fit_range) -> slice:
    if fit_range is None:
        return slice(0, len(dates))
    lo, hi = fit_range
    lo = dates[0] if lo is None else np.datetime64(str(lo)[:7], "M")
    hi = dates[-1] if hi is None else np.datetime64(str(hi)[:7], "M")
    return slice(int(np.searchsorted(dates, lo)), int(np.searchsorted(dates, hi, side="right")))


def fit_standardizer(panel: Panel, fit_range=None) -> Standardizer:
    rows = _row_range(panel.dates, fit_range)
    window = panel.values[rows]
    counts = np.sum(~np.isnan(window), axis=0)
    if np.any(counts < 2):
        bad = [panel.codes[j] for j in np.flatnonzero(counts < 2)]
        raise PanelError(f"fewer than 2 observations in fit range for {bad}")
    mean = np.nanmean(window, axis=0)
    std = np.nanstd(window, axis=0, ddof=1)
    if np.any(std == 0):
        bad = [panel.codes[j] for j in np.flatnonzero(std == 0)]
        raise PanelError(f"zero variance in fit range for {bad}")
    return Standardizer(mean, std)


def standardize(panel: Panel, fit_range=None):
    """Scale each series to zero mean and unit sample std over ``fit_range``.

    ``fit_range`` is an inclusive ``(start, end)`` month pair (either end
    may be None). Rows outside the range reuse the in-range statistics.
    """
    scaler = fit_standardizer(panel, fit_range)
    return Panel(panel.dates, scaler.apply(panel.values), panel.meta), scaler


def spline_fill(series) -> np.ndarray:
    """Fill interior gaps with a natural cubic spline; hold values at the edges."""
    x = np.array(series, dtype=float)
    obs = np.flatnonzero(~np.isnan(x))
    if obs.size < 2:
        raise PanelError("spline_fill needs at least 2 observed points")
    if obs.size == x.size:
        return x
    first, last = obs[0], obs[-1]
    gaps = np.flatnonzero(np.isnan(x[first:last + 1])) + first
    if gaps.size:
        spline = CubicSpline(obs, x[obs], bc_type="natural")
        x[gaps] = spline(gaps)
    x[:first] = x[first]
    x[last + 1:] = x[last]
    return x


def fill_panel(values: np.ndarray) -> np.ndarray:
    """Column-wise :func:`spline_fill` of a T x n matrix."""
    return np.column_stack([spline_fill(values[:, j]) for j in range(values.shape[1])])


@dataclass(frozen=True)
class Vintage:
    as_of: np.datetime64
    panel: Panel


def make_vintage(panel: Panel, as_of) -> Vintage:
    """Blank every cell whose release date falls after ``as_of``."""
    as_of = np.datetime64(str(as_of)[:10], "D")
    released = panel.release_dates() <= as_of
    return Vintage(as_of, Panel(panel.dates, panel.values, panel.meta, mask=panel.mask & released))


@dataclass
class DGPConfig:
    """Linear factor data-generating process with mixed frequencies.

    ``var_coefs`` has shape (p, r, r). ``quarterly`` flags the columns
    published as Mariano-Murasawa aggregates of their monthly latents.
    """

    n: int = 30
    T: int = 600
    r: int = 2
    var_coefs: object = None
    var_cov: object = None
    idio_phi: object = 0.5
    idio_var: object = 1.0
    loadings: object = None
    missing_rate: float = 0.0
    quarterly: object = None
    delay_days: object = None
    start: str = "1970-01"
    burn_in: int = 200

    def resolved(self):
        r, n = self.r, self.n
        B = np.zeros((2, r, r)) if self.var_coefs is None else np.asarray(self.var_coefs, float)
        if self.var_coefs is None:
            B[0] = 0.7 * np.eye(r)
            B[1] = -0.1 * np.eye(r)
        if B.ndim == 2:
            B = B[None]
        U = np.eye(r) if self.var_cov is None else np.atleast_2d(np.asarray(self.var_cov, float))
        phi = np.broadcast_to(np.asarray(self.idio_phi, float), (n,)).copy()
        sig2 = np.broadcast_to(np.asarray(self.idio_var, float), (n,)).copy()
        q = np.zeros(n, bool) if self.quarterly is None else np.asarray(self.quarterly, bool)
        if self.delay_days is None:
            cycle = np.array([-3, 0, 2, 7, 14, 20, 30])
            delays = cycle[np.arange(n) % cycle.size]
            delays[q] = 30
        else:
            delays = np.broadcast_to(np.asarray(self.delay_days, int), (n,)).copy()
        return B, U, phi, sig2, q, delays


def companion(B: np.ndarray) -> np.ndarray:
    """Companion matrix of VAR coefficients with shape (p, r, r)."""
    p, r, _ = B.shape
    A = np.zeros((r * p, r * p))
    A[:r] = np.concatenate(list(B), axis=1)
    A[r:, :-r] = np.eye(r * (p - 1))
    return A


def generate_synthetic_panel(cfg: DGPConfig, rng_seed: int):
    """Simulate a panel from a linear dynamic factor model.

    Returns ``(panel, factors, loadings)`` where ``factors`` is T x r and
    ``loadings`` is n x r. Quarterly columns hold the MM aggregate of the
    monthly latent ``loadings @ f + idio`` at quarter-ending months.
    """
    B, U, phi, sig2, qcols, delays = cfg.resolved()
    r, n, T = cfg.r, cfg.n, cfg.T
    if B.shape[1:] != (r, r):
        raise PanelError(f"VAR coefficients must be (p, {r}, {r}), got {B.shape}")
    if np.max(np.abs(np.linalg.eigvals(companion(B)))) >= 1:
        raise PanelError("unstable VAR specification")
    if np.any(np.abs(phi) >= 1):
        raise PanelError("idiosyncratic AR coefficients must satisfy |phi| < 1")

    rng = substream(rng_seed, "dgp")
    p = B.shape[0]
    total = T + cfg.burn_in
    evals, evecs = np.linalg.eigh(U)
    chol = evecs * np.sqrt(np.clip(evals, 0, None))
    f = np.zeros((total, r))
    shocks = rng.standard_normal((total, r)) @ chol.T
    for t in range(p, total):
        f[t] = sum(B[k] @ f[t - k - 1] for k in range(p)) + shocks[t]
    e = np.zeros((total, n))
    innov = rng.standard_normal((total, n)) * np.sqrt(sig2)
    for t in range(1, total):
        e[t] = phi * e[t - 1] + innov[t]
    lam = rng.standard_normal((n, r)) if cfg.loadings is None else np.asarray(cfg.loadings, float)
    latent = f @ lam.T + e

    dates = month_grid(cfg.start, T)
    y = latent[cfg.burn_in:].copy()
    qend = is_quarter_end(dates)
    for j in np.flatnonzero(qcols):
        agg = np.full(T, np.nan)
        for t in np.flatnonzero(qend):
            tt = t + cfg.burn_in
            agg[t] = MM_WEIGHTS @ latent[tt - 4: tt + 1, j]
        y[:, j] = agg
    if cfg.missing_rate > 0:
        drop = rng.random((T, n)) < cfg.missing_rate
        y[drop] = np.nan

    meta = [
        SeriesMeta(f"S{j + 1:02d}", 1, QUARTERLY if qcols[j] else MONTHLY, int(delays[j]), 0)
        for j in range(n)
    ]
    return Panel(dates, y, meta), f[cfg.burn_in:].copy(), lam
