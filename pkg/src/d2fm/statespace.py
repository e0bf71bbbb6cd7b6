"""Linear Gaussian state space built from a fitted model, with Kalman filter and smoother.

State vector, top to bottom:

* factors ``f_t, ..., f_{t-L+1}`` with ``L = max(p, 5)`` when a quarterly
  series is present (the MM layer needs four factor lags), else ``L = p``;
* one AR(1) idiosyncratic state per monthly series;
* a five-month chain ``e_t, ..., e_{t-4}`` of the monthly latent
  idiosyncratic component of each quarterly series.

Measurement rows are ``y_t = H s_t + d + v_t`` with a small fixed jitter
``v_t ~ N(0, R)``. Missing observations are dropped row by row.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_discrete_lyapunov

from .dynamics import ARModel, VARModel
from .network import MM_WEIGHTS

OBS_JITTER = 1e-6
DIFFUSE_SCALE = 1e4


class StateSpaceError(ValueError):
    pass


@dataclass
class StateSpace:
    transition: np.ndarray
    state_cov: np.ndarray
    design: np.ndarray
    obs_intercept: np.ndarray
    obs_cov: np.ndarray
    init_mean: np.ndarray = None
    init_cov: np.ndarray = None
    quarterly: np.ndarray = None
    n_factors: int = 0

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.transition, float))
        m = A.shape[0]
        H = np.atleast_2d(np.asarray(self.design, float))
        n = H.shape[0]
        if A.shape != (m, m) or H.shape[1] != m:
            raise StateSpaceError(f"inconsistent dimensions: A {A.shape}, H {H.shape}")
        Q = np.atleast_2d(np.asarray(self.state_cov, float))
        R = np.atleast_2d(np.asarray(self.obs_cov, float))
        if Q.shape != (m, m) or R.shape != (n, n):
            raise StateSpaceError("covariance shapes do not match the system")
        self.transition, self.design, self.state_cov, self.obs_cov = A, H, Q, R
        self.obs_intercept = (np.zeros(n) if self.obs_intercept is None
                              else np.asarray(self.obs_intercept, float).reshape(n))
        if self.init_mean is None:
            self.init_mean = np.zeros(m)
        if self.init_cov is None:
            self.init_cov = stationary_cov(A, Q)
        self.init_mean = np.asarray(self.init_mean, float).reshape(m)
        self.init_cov = np.atleast_2d(np.asarray(self.init_cov, float))
        self.quarterly = (np.zeros(n, bool) if self.quarterly is None
                          else np.asarray(self.quarterly, bool))

    @property
    def k_states(self):
        return self.transition.shape[0]

    @property
    def k_obs(self):
        return self.design.shape[0]


def stationary_cov(A, Q):
    """Unconditional state covariance, or a diffuse prior if A is unstable."""
    if A.size and np.max(np.abs(np.linalg.eigvals(A))) >= 1:
        warnings.warn("non-stationary transition; using a diffuse initial covariance",
                      RuntimeWarning, stacklevel=3)
        return DIFFUSE_SCALE * np.eye(A.shape[0])
    P = solve_discrete_lyapunov(A, Q)
    return 0.5 * (P + P.T)


def monthly_chain_params(phi_q, q_q):
    """Monthly AR(1) for a quarterly idiosyncratic component.

    The monthly coefficient is the cube root of the quarterly one and the
    innovation variance is set so the MM aggregate of the monthly chain has
    the same unconditional variance as the quarterly AR process.
    """
    phi_q = float(np.clip(phi_q, -0.99, 0.99))
    phi_m = np.sign(phi_q) * abs(phi_q) ** (1 / 3)
    target = q_q / (1 - phi_q ** 2)
    lags = np.abs(np.subtract.outer(np.arange(5), np.arange(5)))
    c = MM_WEIGHTS @ (phi_m ** lags) @ MM_WEIGHTS
    return phi_m, target * (1 - phi_m ** 2) / c


def build_state_space(loadings, bias, var: VARModel, idio: ARModel, quarterly,
                      jitter=OBS_JITTER) -> StateSpace:
    """Assemble transition and measurement matrices.

    ``idio`` holds AR(1) models; quarterly rows are on the quarterly clock
    and are converted with :func:`monthly_chain_params`.
    """
    lam = np.atleast_2d(np.asarray(loadings, float))
    n, r = lam.shape
    quarterly = np.asarray(quarterly, bool)
    if idio.order != 1:
        raise StateSpaceError("state space supports AR(1) idiosyncratic components only")
    p = var.order
    L = max(p, 5) if quarterly.any() else p
    mon = np.flatnonzero(~quarterly)
    qtr = np.flatnonzero(quarterly)
    kf = r * L
    m = kf + len(mon) + 5 * len(qtr)

    A = np.zeros((m, m))
    Q = np.zeros((m, m))
    A[:r, :r * p] = np.concatenate(list(var.coefs), axis=1)
    A[r:kf, :kf - r] = np.eye(kf - r)
    Q[:r, :r] = var.cov

    H = np.zeros((n, m))
    d = np.asarray(bias, float).copy()
    for k, i in enumerate(mon):
        s = kf + k
        A[s, s] = idio.coefs[i, 0]
        Q[s, s] = idio.q[i]
        H[i, :r] = lam[i]
        H[i, s] = 1.0
    base = kf + len(mon)
    for k, i in enumerate(qtr):
        s = base + 5 * k
        phi_m, q_m = monthly_chain_params(idio.coefs[i, 0], idio.q[i])
        A[s, s] = phi_m
        A[s + 1:s + 5, s:s + 4] = np.eye(4)
        Q[s, s] = q_m
        for lag in range(5):
            w = MM_WEIGHTS[4 - lag]
            H[i, lag * r:(lag + 1) * r] = w * lam[i]
            H[i, s + lag] = w
        d[i] = MM_WEIGHTS.sum() * bias[i]

    if var.spectral_radius() >= 1:
        warnings.warn("factor VAR is not stationary", RuntimeWarning, stacklevel=2)
    return StateSpace(A, Q, H, d, jitter * np.eye(n), quarterly=quarterly, n_factors=r)


def assemble_state_space(fit) -> StateSpace:
    """State space for a :class:`~d2fm.training.FitResult`."""
    return build_state_space(fit.network.loadings, fit.network.bias, fit.var, fit.idio,
                             fit.quarterly)


@dataclass
class FilterOutput:
    pred_mean: np.ndarray
    pred_cov: np.ndarray
    filt_mean: np.ndarray
    filt_cov: np.ndarray
    loglik: float
    steps: list
    dates: np.ndarray = None


def kalman_filter(ss: StateSpace, data, dates=None) -> FilterOutput:
    """Kalman filter over a T x n data matrix with NaN for missing entries."""
    y = np.atleast_2d(np.asarray(data, float))
    T, n = y.shape
    if n != ss.k_obs:
        raise StateSpaceError(f"data has {n} columns, system has {ss.k_obs} measurement rows")
    m = ss.k_states
    A, Q, H, d, R = ss.transition, ss.state_cov, ss.design, ss.obs_intercept, ss.obs_cov
    pred_mean = np.empty((T, m))
    pred_cov = np.empty((T, m, m))
    filt_mean = np.empty((T, m))
    filt_cov = np.empty((T, m, m))
    steps = []
    a, P = ss.init_mean.copy(), ss.init_cov.copy()
    loglik = 0.0
    for t in range(T):
        pred_mean[t], pred_cov[t] = a, P
        obs = np.flatnonzero(~np.isnan(y[t]))
        if obs.size:
            Z = H[obs]
            v = y[t, obs] - d[obs] - Z @ a
            PZt = P @ Z.T
            F = Z @ PZt + R[np.ix_(obs, obs)]
            F = 0.5 * (F + F.T)
            try:
                cf = cho_factor(F, lower=True)
            except np.linalg.LinAlgError:
                raise StateSpaceError(f"innovation covariance not positive definite at t={t}")
            Finv_v = cho_solve(cf, v)
            gain = cho_solve(cf, PZt.T).T  # P Z' F^-1
            a = a + gain @ v
            P = P - gain @ PZt.T
            P = 0.5 * (P + P.T)
            logdet = 2.0 * np.sum(np.log(np.diag(cf[0])))
            loglik -= 0.5 * (obs.size * np.log(2 * np.pi) + logdet + v @ Finv_v)
            steps.append((obs, Z, v, cf))
        else:
            steps.append(None)
        filt_mean[t], filt_cov[t] = a, P
        a = A @ a
        P = A @ P @ A.T + Q
        P = 0.5 * (P + P.T)
    return FilterOutput(pred_mean, pred_cov, filt_mean, filt_cov, float(loglik), steps,
                        None if dates is None else np.asarray(dates, "datetime64[M]"))


def kalman_smooth(ss: StateSpace, out: FilterOutput):
    """Fixed-interval smoothed state means and covariances (backward recursion)."""
    T, m = out.pred_mean.shape
    A = ss.transition
    mean = np.empty((T, m))
    cov = np.empty((T, m, m))
    r = np.zeros(m)
    N = np.zeros((m, m))
    for t in range(T - 1, -1, -1):
        a, P = out.pred_mean[t], out.pred_cov[t]
        step = out.steps[t]
        if step is None:
            r_prev, N_prev = A.T @ r, A.T @ N @ A
        else:
            _, Z, v, cf = step
            Finv_Z = cho_solve(cf, Z)
            K = A @ P @ Finv_Z.T
            Lmat = A - K @ Z
            r_prev = Z.T @ cho_solve(cf, v) + Lmat.T @ r
            N_prev = Z.T @ Finv_Z + Lmat.T @ N @ Lmat
        mean[t] = a + P @ r_prev
        V = P - P @ N_prev @ P
        cov[t] = 0.5 * (V + V.T)
        r, N = r_prev, 0.5 * (N_prev + N_prev.T)
    return mean, cov


@dataclass
class Projection:
    states: np.ndarray
    values: np.ndarray
    dates: np.ndarray = None


def project_forecasts(ss: StateSpace, out: FilterOutput, horizon_months: int) -> Projection:
    """Iterate the transition from the last filtered state, with no updates.

    ``values[h-1]`` is the measurement mean ``H s + d`` for month ``T-1+h``.
    When the filter carried dates, quarterly columns are NaN outside
    quarter-ending months.
    """
    if horizon_months < 1:
        raise StateSpaceError("horizon must be >= 1")
    s = out.filt_mean[-1]
    states = np.empty((horizon_months, ss.k_states))
    for h in range(horizon_months):
        s = ss.transition @ s
        states[h] = s
    values = states @ ss.design.T + ss.obs_intercept
    dates = None
    if out.dates is not None:
        dates = out.dates[-1] + np.arange(1, horizon_months + 1)
        off = dates.astype(int) % 3 != 2
        values[np.ix_(off, ss.quarterly)] = np.nan
    return Projection(states, values, dates)


def latent_monthly(ss: StateSpace, states, loadings, bias):
    """Monthly latent values (common + idiosyncratic) of every series.

    For quarterly series this is the un-aggregated monthly latent that the
    MM layer sums.
    """
    r = ss.n_factors
    lam = np.atleast_2d(loadings)
    quarterly = ss.quarterly
    out = np.atleast_2d(states)[:, :r] @ lam.T + np.asarray(bias)
    mon = np.flatnonzero(~quarterly)
    L = ss.k_states - len(mon) - 5 * quarterly.sum()
    for k, i in enumerate(mon):
        out[:, i] += states[:, L + k]
    base = L + len(mon)
    for k, i in enumerate(np.flatnonzero(quarterly)):
        out[:, i] += states[:, base + 5 * k]
    return out
