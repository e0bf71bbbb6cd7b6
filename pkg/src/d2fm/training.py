"""Model estimation: pre-training followed by the denoising outer loop.

Each outer iteration filters the predictable idiosyncratic part out of the
data, trains the autoencoder for a number of epochs on noisy copies of the
filtered inputs (noise drawn from the unconditional idiosyncratic
distribution), re-extracts the factors as an average over noisy encodings,
and re-estimates the idiosyncratic AR models on the new residuals. After
the loop a VAR is fitted to the factors.

Series on a quarterly clock (observed at quarter-ending months only) enter
the encoder as spline-interpolated monthly columns, leave the decoder
through the fixed MM layer, and have their idiosyncratic AR fitted on
consecutive quarters.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from ._rng import substream
from .data import Panel, SeriesMeta, Standardizer, fill_panel, spline_fill
from .dynamics import (ARModel, DynamicsError, VARModel, fit_ar, fit_var, idio_filter,
                       unconditional_variance)
from .network import (MM_WEIGHTS, AdamConfig, Batch, DivergenceError, EncoderSpec,
                      NetworkState, adam_step, decode_linear, encode_forward, forward, init_network,
                      loss_and_grads, masked_mse, output_layer, update_running_stats)

log = logging.getLogger(__name__)

LOSS_FLOOR = 1e-12


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    n_factors: int = 2
    input_lags: int = 1
    hidden_sizes: tuple = None
    epochs_per_iteration: int = 100
    pretrain_epochs: int = 100
    batch_size: int = 100
    mc_draws: int = 10
    convergence_tol: float = 1e-4
    max_iterations: int = 50
    rng_seed: int = 0
    ar_order: int = 1
    var_order: int = 2
    learning_rate: float = 0.001

    def __post_init__(self):
        if self.batch_size < 100:
            raise ValueError(f"batch_size must be >= 100 monthly rows, got {self.batch_size}")
        if self.epochs_per_iteration < 1 or self.pretrain_epochs < 0:
            raise ValueError("epoch counts must be positive")
        if self.mc_draws < 1:
            raise ValueError("mc_draws must be >= 1")
        if self.n_factors < 1 or self.input_lags < 0:
            raise ValueError("n_factors must be >= 1 and input_lags >= 0")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.hidden_sizes is not None:
            self.hidden_sizes = tuple(int(h) for h in self.hidden_sizes)

    def encoder_spec(self, n_series) -> EncoderSpec:
        width = n_series * (self.input_lags + 1)
        sizes = self.hidden_sizes or default_hidden_sizes(width, self.n_factors)
        if sizes[-1] != self.n_factors:
            sizes = tuple(sizes[:2]) + (self.n_factors,)
        return EncoderSpec.d2fm(width, sizes)

    def n_parameters(self, n_series) -> int:
        spec = self.encoder_spec(n_series)
        w = spec.widths
        count = n_series * (self.n_factors + 1)
        for k in range(len(spec.hidden_sizes)):
            per_unit = 2 if k in spec.batchnorm_positions else 1
            count += w[k] * w[k + 1] + per_unit * w[k + 1]
        return count


def default_hidden_sizes(input_width, r):
    """Geometric taper from the input width down to ``r``."""
    ratio = (r / input_width) ** (1 / 3)
    h1 = max(int(round(input_width * ratio)), r + 1)
    h2 = max(int(round(input_width * ratio ** 2)), r)
    return (h1, max(min(h2, h1), r), r)


@dataclass
class FitResult:
    network: NetworkState
    factors: np.ndarray
    idio: ARModel
    var: VARModel
    loss_trace: list
    config: TrainConfig
    dates: np.ndarray
    meta: tuple
    standardizer: Standardizer = None
    converged: bool = False
    log_rows: list = field(default_factory=list)

    @property
    def quarterly(self):
        return np.array([m.quarterly for m in self.meta], dtype=bool)

    def common_component(self):
        """Monthly latent common component ``loadings @ f + bias`` (T x n)."""
        return decode_linear(self.network, self.factors)

    def to_dict(self):
        return {
            "network": self.network.to_dict(),
            "factors": self.factors.tolist(),
            "idio": self.idio.to_dict(),
            "var": self.var.to_dict(),
            "loss_trace": list(self.loss_trace),
            "config": asdict(self.config),
            "dates": [str(d) for d in self.dates],
            "meta": [asdict(m) for m in self.meta],
            "standardizer": None if self.standardizer is None else self.standardizer.to_dict(),
            "converged": self.converged,
            "log_rows": self.log_rows,
        }

    @classmethod
    def from_dict(cls, d):
        cfg = dict(d["config"])
        return cls(
            network=NetworkState.from_dict(d["network"]),
            factors=np.asarray(d["factors"], float),
            idio=ARModel.from_dict(d["idio"]),
            var=VARModel.from_dict(d["var"]),
            loss_trace=list(d["loss_trace"]),
            config=TrainConfig(**cfg),
            dates=np.asarray(d["dates"], dtype="datetime64[M]"),
            meta=tuple(SeriesMeta(**m) for m in d["meta"]),
            standardizer=None if d["standardizer"] is None else Standardizer.from_dict(d["standardizer"]),
            converged=bool(d["converged"]),
            log_rows=[list(r) for r in d.get("log_rows", [])],
        )

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def write_log(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "loss", "delta_loss", "mean_abs_phi"])
            for row in self.log_rows:
                w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])


def converged(loss_prev, loss_curr, tol):
    return abs(loss_curr - loss_prev) / max(loss_prev, LOSS_FLOOR) < tol


def lag_stack(Z, rows, q):
    """Rows of ``[Z_t, Z_{t-1}, ..., Z_{t-q}]``; lags before the sample repeat row 0."""
    rows = np.asarray(rows)
    return np.hstack([Z[np.maximum(rows - k, 0)] for k in range(q + 1)])


def _input_lags(net: NetworkState, n_series):
    width = net.spec.input_width
    if width % n_series:
        raise TrainingError(f"input width {width} is not a multiple of {n_series} series")
    return width // n_series - 1


def corrupt(Z, sigma_eps, rng):
    """``Z`` plus independent Gaussian noise with per-column variance ``sigma_eps``."""
    return Z + rng.standard_normal(np.shape(Z)) * np.sqrt(np.asarray(sigma_eps, dtype=float))


def encode_expected(net: NetworkState, y_tilde, sigma_eps, M, rng):
    """Average infer-mode encoding over ``M`` noisy copies of ``y_tilde``.

    ``y_tilde`` is a complete T x n matrix; noise is drawn per cell with
    variance ``sigma_eps`` per column before the lag stacking.
    """
    if M < 1:
        raise ValueError("M must be >= 1")
    Z = np.asarray(y_tilde, dtype=float)
    T, n = Z.shape
    q = _input_lags(net, n)
    rows = np.arange(T)
    if not np.any(sigma_eps):
        return encode_forward(net, lag_stack(Z, rows, q), "infer")[0]
    total = np.zeros((T, net.spec.n_factors))
    for _ in range(M):
        noisy = corrupt(Z, sigma_eps, rng)
        total += encode_forward(net, lag_stack(noisy, rows, q), "infer")[0]
    return total / M


def fitted_values(net: NetworkState, factors, quarterly):
    """T x n fitted values: monthly latents, MM aggregates for quarterly columns.

    Quarterly entries are NaN where the five-month window leaves the sample.
    """
    latent = decode_linear(net, factors)
    T = len(latent)
    windows = np.arange(T)[:, None] + np.arange(-4, 1)[None, :]
    windows[windows < 0] = -1
    return output_layer(latent, windows, quarterly)


def _spacing(quarterly):
    return np.where(quarterly, 3, 1)


def quarterly_rows(dates):
    return np.asarray(dates, dtype="datetime64[M]").astype(int) % 3 == 2


def fit_idio(resid, quarterly, dates, d=1):
    """Per-series AR(d) on residuals; quarterly columns on their own clock.

    Series with too little contiguous data fall back to white noise with
    the sample variance of the observed residuals.
    """
    T, n = resid.shape
    qrows = quarterly_rows(dates)
    coefs = np.zeros((n, d))
    q = np.zeros(n)
    for j in range(n):
        col = resid[qrows, j] if quarterly[j] else resid[:, j]
        try:
            m = fit_ar(col, d)
            coefs[j], q[j] = m.coefs[0], m.q[0]
        except DynamicsError:
            seen = col[~np.isnan(col)]
            q[j] = np.mean(seen ** 2) if seen.size else 1.0
    return ARModel(coefs, q)


def _residual_fill(resid, quarterly, dates):
    """Residuals on the monthly grid with no NaN, for the idiosyncratic filter.

    Monthly columns use 0 where missing; quarterly columns are spline
    interpolated between quarter-ending months.
    """
    out = np.nan_to_num(resid)
    for j in np.flatnonzero(quarterly):
        col = resid[:, j]
        if np.sum(~np.isnan(col)) >= 2:
            out[:, j] = spline_fill(col)
    return out


def pretrain_design(panel: Panel, q, min_rows=50, max_missing=0.2):
    """Rows, targets and target mask for the plain-autoencoder warm-up.

    Uses rows ``t >= q`` where every series is observed at ``t`` and its
    ``q`` lags (a quarterly series counts as observed when its quarter is).
    With fewer than ``min_rows`` such rows, series missing more than
    ``max_missing`` of their expected observations are excluded from the
    loss and all rows are used with spline-filled values.
    Returns ``(rows, mask, dropped)``.
    """
    Y = panel.values
    T, n = Y.shape
    quarterly = panel.quarterly
    obs = ~np.isnan(Y)
    qend = quarterly_rows(panel.dates)
    seen = obs.copy()
    for j in np.flatnonzero(quarterly):
        # month t is covered if the value of its quarter is observed
        slot = np.minimum(np.arange(T) + (2 - panel.dates.astype(int) % 3), T - 1)
        seen[:, j] = obs[slot, j] & qend[slot]
    full = seen.all(axis=1)
    complete = np.array([t >= q and full[t - q:t + 1].all() for t in range(T)])
    rows = np.flatnonzero(complete)
    if rows.size >= min_rows:
        return rows, np.ones((rows.size, n), bool), np.zeros(n, bool)
    expected = np.where(quarterly, qend.sum(), T)
    missing_share = 1.0 - obs.sum(axis=0) / expected
    dropped = missing_share > max_missing
    if dropped.all():
        raise TrainingError("no usable series for pre-training")
    rows = np.arange(q, T)
    mask = np.broadcast_to(~dropped, (rows.size, n)).copy()
    return rows, mask, dropped


def _batches(rows, size, rng):
    order = rng.permutation(rows)
    return [order[i:i + size] for i in range(0, len(order), size)]


def _adam(cfg: TrainConfig):
    return AdamConfig(learning_rate=cfg.learning_rate)


def _fill_missing_inputs(panel: Panel) -> np.ndarray:
    Y = panel.values
    T, n = Y.shape
    Z = np.empty_like(Y)
    for j in range(n):
        if np.sum(~np.isnan(Y[:, j])) < 2:
            raise TrainingError(f"series {panel.codes[j]} has fewer than 2 observations")
        Z[:, j] = spline_fill(Y[:, j])
    return Z


def pretrain(panel: Panel, net: NetworkState, cfg: TrainConfig) -> NetworkState:
    """Plain autoencoder warm-up on complete rows; ADAM state is reset afterwards."""
    q = cfg.input_lags
    Z = _fill_missing_inputs(panel)
    rows, mask, dropped = pretrain_design(panel, q)
    if dropped.any():
        log.info("pre-training without %d sparse series", dropped.sum())
    rng = substream(cfg.rng_seed, "pretrain-batching")
    position = {t: i for i, t in enumerate(rows)}
    for epoch in range(cfg.pretrain_epochs):
        for idx in _batches(rows, cfg.batch_size, rng):
            if len(idx) < 2:
                continue
            b_mask = mask[[position[t] for t in idx]]
            batch = Batch.static(lag_stack(Z, idx, q), Z[idx], b_mask)
            _, grads, caches = loss_and_grads(net, batch, np.zeros(Z.shape[1], bool))
            net = adam_step(update_running_stats(net, caches), grads, _adam(cfg))
    return net.reset_adam()


def _training_batch(Z_noisy, targets, obs, idx, q, quarterly):
    """Batch for target rows ``idx`` (all >= q) with MM windows when needed."""
    if quarterly.any():
        win = idx[:, None] + np.arange(-4, 1)[None, :]
        needed, inverse = np.unique(win[win >= q], return_inverse=True)
        windows = np.full(win.shape, -1)
        windows[win >= q] = inverse
    else:
        needed = idx
        windows = np.full((len(idx), 5), -1)
        windows[:, -1] = np.arange(len(idx))
    mask = obs[idx].copy()
    incomplete = np.any(windows < 0, axis=1)
    mask[np.ix_(incomplete, quarterly)] = False
    return Batch(lag_stack(Z_noisy, needed, q), windows, np.nan_to_num(targets[idx]), mask)


def train_d2fm(panel: Panel, cfg: TrainConfig, standardizer: Standardizer = None,
               net: NetworkState = None) -> FitResult:
    """Estimate the model on a standardized panel.

    Returns a :class:`FitResult`; ``converged`` is False when the loop
    stopped at ``max_iterations``.
    """
    Y = np.asarray(panel.values, dtype=float)
    T, n = Y.shape
    q = cfg.input_lags
    quarterly = panel.quarterly
    obs = ~np.isnan(Y)
    spacing = _spacing(quarterly)
    if T - q < cfg.batch_size:
        raise TrainingError(f"{T - q} training rows, need at least {cfg.batch_size}")
    Z = _fill_missing_inputs(panel)

    if net is None:
        spec = cfg.encoder_spec(n)
        net = init_network(spec, n, substream(cfg.rng_seed, "init"), seed=cfg.rng_seed)
        net = pretrain(panel, net, cfg)

    batch_rng = substream(cfg.rng_seed, "batching")
    noise_rng = substream(cfg.rng_seed, "noise")
    encode_rng = substream(cfg.rng_seed, "encode")

    def refresh(net, sigma):
        f = encode_expected(net, Z_tilde, sigma, cfg.mc_draws, encode_rng)
        fit = fitted_values(net, f, quarterly)
        resid = np.where(obs, Y - fit, np.nan)
        return f, fit, resid

    # initial idiosyncratic estimates from the pre-trained network
    ar = ARModel.zeros(n, cfg.ar_order)
    eps_fill = np.zeros_like(Y)
    Z_tilde = Z
    f, fit, resid = refresh(net, np.zeros(n))
    ar = fit_idio(resid, quarterly, panel.dates, cfg.ar_order)
    eps_fill = _residual_fill(resid, quarterly, panel.dates)
    sigma = unconditional_variance(ar)

    rows = np.arange(q, T)
    trace, log_rows = [], []
    is_converged = False
    for it in range(cfg.max_iterations):
        y_tilde = idio_filter(Y, ar, eps_fill, spacing)
        Z_tilde = idio_filter(Z, ar, eps_fill, spacing)
        for epoch in range(cfg.epochs_per_iteration):
            for idx in _batches(rows, cfg.batch_size, batch_rng):
                if len(idx) < 2:
                    continue
                noisy = corrupt(Z_tilde, sigma, noise_rng)
                batch = _training_batch(noisy, y_tilde, obs, idx, q, quarterly)
                if not batch.mask.any():
                    continue
                _, grads, caches = loss_and_grads(net, batch, quarterly)
                net = adam_step(update_running_stats(net, caches), grads, _adam(cfg))

        f, fit, resid = refresh(net, sigma)
        ar = fit_idio(resid, quarterly, panel.dates, cfg.ar_order)
        sigma = unconditional_variance(ar)
        eps_fill = _residual_fill(resid, quarterly, panel.dates)
        # missing monthly inputs take the model's common-component value
        miss = ~obs & ~quarterly[None, :]
        Z = np.where(miss, decode_linear(net, f), Z)

        scored = obs & ~np.isnan(fit)
        loss = masked_mse(Y, np.nan_to_num(fit), scored)
        if not np.isfinite(loss):
            raise DivergenceError(f"non-finite loss at iteration {it}")
        delta = loss - trace[-1] if trace else float("nan")
        trace.append(loss)
        log_rows.append([it, loss, delta, float(np.mean(np.abs(ar.coefs)))])
        log.debug("iteration %d loss %.6f", it, loss)
        if len(trace) > 1 and converged(trace[-2], trace[-1], cfg.convergence_tol):
            is_converged = True
            break

    if not is_converged:
        log.warning("no convergence after %d iterations", cfg.max_iterations)
    var = fit_var(f, cfg.var_order)
    return FitResult(net, f, ar, var, trace, cfg, panel.dates, panel.meta, standardizer,
                     is_converged, log_rows)


def fit_autoencoder(net: NetworkState, inputs, targets, epochs, batch_size, adam: AdamConfig,
                    rng, mask=None):
    """Plain static autoencoder training loop; returns ``(net, losses)``.

    ``losses`` holds the full-data train-mode loss after each epoch.
    """
    inputs = np.asarray(inputs, float)
    targets = np.asarray(targets, float)
    full = Batch.static(inputs, targets, mask)
    no_q = np.zeros(targets.shape[1], bool)
    rows = np.arange(len(inputs))
    losses = []
    for epoch in range(epochs):
        for idx in _batches(rows, batch_size, rng):
            if len(idx) < 2 and net.spec.batchnorm_positions:
                continue
            batch = Batch.static(inputs[idx], targets[idx], full.mask[idx])
            _, grads, caches = loss_and_grads(net, batch, no_q)
            net = adam_step(update_running_stats(net, caches), grads, adam)
        fitted, _ = forward(net, full, no_q, "train")
        losses.append(masked_mse(full.targets, fitted, full.mask))
    return net, losses
