"""Linear dynamics: per-series AR(d) idiosyncratic models and a VAR(p) for factors."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_discrete_lyapunov

MAX_ROOT = 0.99


class DynamicsError(ValueError):
    pass


@dataclass(frozen=True)
class ARModel:
    """Independent AR(d) models, one row of ``coefs`` per series."""

    coefs: np.ndarray
    q: np.ndarray

    @property
    def order(self):
        return self.coefs.shape[1]

    @property
    def n_series(self):
        return self.coefs.shape[0]

    @classmethod
    def zeros(cls, n, d=1):
        return cls(np.zeros((n, d)), np.zeros(n))

    def to_dict(self):
        return {"coefs": self.coefs.tolist(), "q": self.q.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["coefs"], float).reshape(len(d["q"]), -1), np.asarray(d["q"], float))


@dataclass(frozen=True)
class VARModel:
    coefs: np.ndarray  # (p, r, r)
    cov: np.ndarray

    @property
    def order(self):
        return self.coefs.shape[0]

    @property
    def n_factors(self):
        return self.coefs.shape[1]

    def companion(self):
        p, r, _ = self.coefs.shape
        A = np.zeros((r * p, r * p))
        A[:r] = np.concatenate(list(self.coefs), axis=1)
        A[r:, :-r] = np.eye(r * (p - 1))
        return A

    def spectral_radius(self):
        return float(np.max(np.abs(np.linalg.eigvals(self.companion()))))

    def to_dict(self):
        return {"coefs": self.coefs.tolist(), "cov": self.cov.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["coefs"], float), np.asarray(d["cov"], float))


def _ar_design(x, d):
    """Targets and lag matrix over windows with no missing value."""
    T = len(x)
    if T <= d:
        return np.empty(0), np.empty((0, d))
    Y = x[d:]
    X = np.column_stack([x[d - k - 1:T - k - 1] for k in range(d)])
    ok = ~np.isnan(Y) & ~np.isnan(X).any(axis=1)
    return Y[ok], X[ok]


def _clip_stationary(phi):
    if len(phi) == 1:
        return np.clip(phi, -MAX_ROOT, MAX_ROOT)
    comp = np.zeros((len(phi), len(phi)))
    comp[0] = phi
    comp[1:, :-1] = np.eye(len(phi) - 1)
    rho = np.max(np.abs(np.linalg.eigvals(comp)))
    if rho <= MAX_ROOT:
        return phi
    # scaling every root by s maps phi_k to phi_k * s**k
    s = MAX_ROOT / rho
    return phi * s ** np.arange(1, len(phi) + 1)


def fit_ar(series, d=1, min_rows=10):
    """OLS AR(d) without intercept, fitted column by column.

    ``series`` is a vector or a T x n matrix with NaN for missing values;
    regression rows containing a missing value are skipped. Coefficients
    are pulled back inside the stationary region and ``q`` is the mean
    squared residual under the clipped coefficients.
    """
    x = np.asarray(series, dtype=float)
    x = x[:, None] if x.ndim == 1 else x
    n = x.shape[1]
    coefs = np.zeros((n, d))
    q = np.zeros(n)
    for j in range(n):
        Y, X = _ar_design(x[:, j], d)
        if len(Y) < min_rows:
            raise DynamicsError(f"series {j}: {len(Y)} usable AR rows, need {min_rows}")
        if not np.any(X) or not np.any(Y):
            continue
        phi, *_ = np.linalg.lstsq(X, Y, rcond=None)
        phi = _clip_stationary(phi)
        coefs[j] = phi
        q[j] = np.mean((Y - X @ phi) ** 2)
    return ARModel(coefs, q)


def idio_filter(y, ar: ARModel, eps_hat, spacing=1):
    """Remove the one-step predictable idiosyncratic part from ``y``.

    ``y_t - sum_k phi_k * eps_hat_{t - k*spacing}`` per column; lags that fall
    before the sample or are missing count as zero. ``spacing`` may be a
    per-column vector (3 for series living on a quarterly clock).
    """
    y = np.asarray(y, dtype=float)
    eps = np.nan_to_num(np.asarray(eps_hat, dtype=float))
    T, n = y.shape
    spacing = np.broadcast_to(np.asarray(spacing, int), (n,))
    pred = np.zeros_like(y)
    for k in range(ar.order):
        for j in range(n):
            lag = (k + 1) * spacing[j]
            if lag < T:
                pred[lag:, j] += ar.coefs[j, k] * eps[:-lag, j]
    return y - pred


def unconditional_variance(ar: ARModel):
    """Stationary variance of each AR process."""
    out = np.empty(ar.n_series)
    for j in range(ar.n_series):
        phi, q = ar.coefs[j], ar.q[j]
        if ar.order == 1:
            if abs(phi[0]) >= 1:
                raise DynamicsError(f"series {j}: non-stationary AR coefficient {phi[0]}")
            out[j] = q / (1.0 - phi[0] ** 2)
            continue
        comp = np.zeros((ar.order, ar.order))
        comp[0] = phi
        comp[1:, :-1] = np.eye(ar.order - 1)
        if np.max(np.abs(np.linalg.eigvals(comp))) >= 1:
            raise DynamicsError(f"series {j}: non-stationary AR model")
        noise = np.zeros_like(comp)
        noise[0, 0] = q
        out[j] = solve_discrete_lyapunov(comp, noise)[0, 0]
    return out


def fit_var(factors, p=2):
    """Equation-by-equation OLS VAR(p) without intercept."""
    f = np.asarray(factors, dtype=float)
    T, r = f.shape
    if T < r * p + 10:
        raise DynamicsError(f"{T} rows too few for a VAR({p}) in {r} variables")
    Y = f[p:]
    X = np.hstack([f[p - k - 1:T - k - 1] for k in range(p)])
    if np.linalg.matrix_rank(X) < r * p:
        raise DynamicsError("rank-deficient VAR regressor matrix")
    coef, *_ = np.linalg.lstsq(X, Y, rcond=None)  # (r*p, r)
    resid = Y - X @ coef
    B = np.stack([coef[k * r:(k + 1) * r].T for k in range(p)])
    model = VARModel(B, resid.T @ resid / len(resid))
    if model.spectral_radius() >= 1:
        warnings.warn("fitted factor VAR is not stationary", RuntimeWarning, stacklevel=2)
    return model
