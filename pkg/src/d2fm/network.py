"""Asymmetric autoencoder with a tanh/batch-norm encoder and a linear decoder.

Parameters are plain numpy arrays held in a :class:`NetworkState`. Forward
passes are pure: batch-norm running statistics are folded in only by
:func:`update_running_stats`, and parameters change only through
:func:`adam_step`.

A training batch is described by :class:`Batch`. Its ``inputs`` are the
unique encoder rows needed by the batch, and ``windows[b]`` lists, in
chronological order, the five input-row positions ending at target row
``b``. Monthly series are scored on the last position of the window;
quarterly series on the Mariano-Murasawa aggregate of all five.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

#: Mariano-Murasawa weights over five consecutive months, oldest first.
MM_WEIGHTS = np.array([1.0, 2.0, 3.0, 2.0, 1.0]) / 3.0
MM_WEIGHTS.setflags(write=False)

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


class NetworkError(ValueError):
    pass


class DivergenceError(FloatingPointError):
    """Non-finite values met during training."""


@dataclass(frozen=True)
class EncoderSpec:
    input_width: int
    hidden_sizes: tuple = (16, 8, 2)
    batchnorm_positions: tuple = (0, 1)
    activation: str = "tanh"

    def __post_init__(self):
        sizes = tuple(int(h) for h in self.hidden_sizes)
        bn = tuple(sorted(int(k) for k in self.batchnorm_positions))
        object.__setattr__(self, "hidden_sizes", sizes)
        object.__setattr__(self, "batchnorm_positions", bn)
        if not sizes or min(sizes) < 1:
            raise NetworkError("hidden sizes must be positive")
        if sizes[-1] >= self.input_width:
            raise NetworkError("factor count must be below the input width")
        if any(k < 0 or k >= len(sizes) for k in bn) or len(set(bn)) != len(bn):
            raise NetworkError(f"invalid batch-norm positions {bn}")
        if self.activation not in ("tanh", "linear"):
            raise NetworkError(f"unknown activation {self.activation!r}")

    @classmethod
    def d2fm(cls, input_width, hidden_sizes):
        """Three-layer tanh encoder with batch norm on the first two layers."""
        if len(hidden_sizes) != 3:
            raise NetworkError("the encoder has exactly 3 hidden layers")
        return cls(input_width, tuple(hidden_sizes), (0, 1), "tanh")

    @property
    def n_factors(self):
        return self.hidden_sizes[-1]

    @property
    def widths(self):
        return (self.input_width,) + self.hidden_sizes


@dataclass(frozen=True)
class AdamConfig:
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise NetworkError("ADAM betas must lie in (0, 1)")
        if self.learning_rate <= 0:
            raise NetworkError("learning rate must be positive")


@dataclass
class NetworkState:
    spec: EncoderSpec
    params: dict
    running: dict
    adam_m: dict = field(default_factory=dict)
    adam_v: dict = field(default_factory=dict)
    step: int = 0
    seed: int = 0

    @property
    def n_series(self):
        return self.params["loadings"].shape[0]

    @property
    def loadings(self):
        return self.params["loadings"]

    @property
    def bias(self):
        return self.params["bias"]

    def reset_adam(self):
        return replace(self, adam_m={}, adam_v={}, step=0)

    def copy(self):
        cp = lambda d: {k: v.copy() for k, v in d.items()}
        return NetworkState(self.spec, cp(self.params), cp(self.running),
                            cp(self.adam_m), cp(self.adam_v), self.step, self.seed)

    def to_dict(self):
        arrays = lambda d: {k: {"shape": list(v.shape), "data": v.ravel().tolist()}
                            for k, v in sorted(d.items())}
        return {
            "spec": {
                "input_width": self.spec.input_width,
                "hidden_sizes": list(self.spec.hidden_sizes),
                "batchnorm_positions": list(self.spec.batchnorm_positions),
                "activation": self.spec.activation,
            },
            "params": arrays(self.params),
            "running": arrays(self.running),
            "adam_m": arrays(self.adam_m),
            "adam_v": arrays(self.adam_v),
            "step": self.step,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d):
        arrays = lambda blob: {k: np.asarray(v["data"], dtype=float).reshape(v["shape"])
                               for k, v in blob.items()}
        s = d["spec"]
        spec = EncoderSpec(s["input_width"], tuple(s["hidden_sizes"]),
                           tuple(s["batchnorm_positions"]), s["activation"])
        return cls(spec, arrays(d["params"]), arrays(d["running"]), arrays(d["adam_m"]),
                   arrays(d["adam_v"]), int(d["step"]), int(d["seed"]))

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def xavier_init(n_in, n_out, rng):
    """Gaussian (n_out, n_in) matrix with variance 2 / (n_in + n_out)."""
    if n_in < 1 or n_out < 1:
        raise NetworkError("layer sizes must be >= 1")
    return rng.standard_normal((n_out, n_in)) * np.sqrt(2.0 / (n_in + n_out))


def init_network(spec: EncoderSpec, n_series: int, rng, seed: int = 0) -> NetworkState:
    params, running = {}, {}
    widths = spec.widths
    for k in range(len(spec.hidden_sizes)):
        params[f"W{k}"] = xavier_init(widths[k], widths[k + 1], rng)
        if k in spec.batchnorm_positions:
            params[f"gamma{k}"] = np.ones(widths[k + 1])
            params[f"beta{k}"] = np.zeros(widths[k + 1])
            running[f"mean{k}"] = np.zeros(widths[k + 1])
            running[f"var{k}"] = np.ones(widths[k + 1])
        else:
            params[f"b{k}"] = np.zeros(widths[k + 1])
    params["loadings"] = xavier_init(spec.n_factors, n_series, rng)
    params["bias"] = np.zeros(n_series)
    return NetworkState(spec, params, running, seed=seed)


def _act(spec, z):
    return np.tanh(z) if spec.activation == "tanh" else z


def encode_forward(state: NetworkState, x, mode="infer"):
    """Encode a batch of input rows into factors.

    Batch-normalised layers (no affine bias of their own) normalise the
    pre-activation with batch statistics in ``"train"`` mode and running
    statistics in ``"infer"`` mode, then apply scale and shift before the
    activation. Returns ``(factors, caches)``.
    """
    spec = state.spec
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] != spec.input_width:
        raise NetworkError(f"input width {x.shape[-1]} != {spec.input_width}")
    if mode not in ("train", "infer"):
        raise NetworkError(f"unknown mode {mode!r}")
    if mode == "train" and spec.batchnorm_positions and x.shape[0] < 2:
        raise NetworkError("train mode needs a batch of at least 2 rows")
    p = state.params
    h = x
    caches = []
    for k in range(len(spec.hidden_sizes)):
        z = h @ p[f"W{k}"].T
        cache = {"h_in": h}
        if k in spec.batchnorm_positions:
            if mode == "train":
                mu = z.mean(axis=0)
                var = z.var(axis=0)
            else:
                mu, var = state.running[f"mean{k}"], state.running[f"var{k}"]
            inv_std = 1.0 / np.sqrt(var + BN_EPS)
            zhat = (z - mu) * inv_std
            pre = p[f"gamma{k}"] * zhat + p[f"beta{k}"]
            cache.update(mu=mu, var=var, inv_std=inv_std, zhat=zhat)
        else:
            pre = z + p[f"b{k}"]
        h = _act(spec, pre)
        cache["out"] = h
        caches.append(cache)
    return h, {"layers": caches, "mode": mode, "n": x.shape[0]}


def update_running_stats(state: NetworkState, caches) -> NetworkState:
    """Fold train-mode batch statistics into the running averages."""
    if caches["mode"] != "train":
        return state
    running = dict(state.running)
    n = caches["n"]
    for k in state.spec.batchnorm_positions:
        c = caches["layers"][k]
        unbiased = c["var"] * n / max(n - 1, 1)
        running[f"mean{k}"] = BN_MOMENTUM * running[f"mean{k}"] + (1 - BN_MOMENTUM) * c["mu"]
        running[f"var{k}"] = BN_MOMENTUM * running[f"var{k}"] + (1 - BN_MOMENTUM) * unbiased
    return replace(state, running=running)


def decode_linear(state: NetworkState, factors):
    """Monthly fitted values ``factors @ loadings.T + bias`` for every series."""
    factors = np.atleast_2d(np.asarray(factors, dtype=float))
    if factors.shape[1] != state.spec.n_factors:
        raise NetworkError(f"factor width {factors.shape[1]} != {state.spec.n_factors}")
    return factors @ state.loadings.T + state.bias


def mm_aggregate(monthly_fitted, w=MM_WEIGHTS):
    """Quarterly value from five consecutive monthly values (oldest first)."""
    v = np.asarray(monthly_fitted, dtype=float)
    if v.shape[-1] != 5:
        raise NetworkError("MM aggregation needs exactly 5 consecutive months")
    if np.any(np.isnan(v)):
        raise NetworkError("MM window crosses the start of the sample")
    return v @ w


def masked_mse(targets, fitted, mask):
    """Mean squared error over the entries where ``mask`` is True."""
    mask = np.asarray(mask, dtype=bool)
    count = mask.sum()
    if count == 0:
        raise NetworkError("all entries masked out")
    resid = np.where(mask, np.asarray(fitted) - np.asarray(targets), 0.0)
    return float(np.sum(resid ** 2) / count)


@dataclass
class Batch:
    inputs: np.ndarray
    windows: np.ndarray
    targets: np.ndarray
    mask: np.ndarray

    @classmethod
    def static(cls, inputs, targets, mask=None):
        """Batch where every input row is its own target row (no MM layer)."""
        n_rows = len(inputs)
        windows = np.full((n_rows, 5), -1)
        windows[:, -1] = np.arange(n_rows)
        if mask is None:
            mask = np.ones(np.shape(targets), dtype=bool)
        return cls(np.asarray(inputs, float), windows, np.asarray(targets, float),
                   np.asarray(mask, bool))


def output_layer(latent, windows, quarterly):
    """Map monthly latent rows to fitted values at the batch's target rows.

    Quarterly columns with an incomplete window come out as NaN.
    """
    windows = np.asarray(windows)
    fitted = latent[windows[:, -1]].copy()
    quarterly = np.asarray(quarterly, dtype=bool)
    if quarterly.any():
        valid = np.all(windows >= 0, axis=1)
        lat_q = latent[:, quarterly]
        agg = np.full((len(windows), lat_q.shape[1]), np.nan)
        safe = np.where(windows >= 0, windows, 0)
        agg[valid] = np.einsum("j,bjk->bk", MM_WEIGHTS, lat_q[safe[valid]])
        fitted[:, quarterly] = agg
    return fitted


def forward(state: NetworkState, batch: Batch, quarterly, mode="train"):
    factors, caches = encode_forward(state, batch.inputs, mode)
    latent = decode_linear(state, factors)
    fitted = output_layer(latent, batch.windows, quarterly)
    caches.update(factors=factors, fitted=fitted)
    return fitted, caches


def backprop_grads(state: NetworkState, batch: Batch, quarterly, caches):
    """Exact gradients of :func:`masked_mse` for every trainable parameter.

    ``caches`` must come from :func:`forward` on the same batch.
    """
    spec, p = state.spec, state.params
    quarterly = np.asarray(quarterly, dtype=bool)
    mask = batch.mask
    count = mask.sum()
    if count == 0:
        raise NetworkError("all entries masked out")
    fitted = caches["fitted"]
    resid = np.where(mask, fitted - batch.targets, 0.0)
    if not np.all(np.isfinite(resid)):
        raise DivergenceError("non-finite residuals in backward pass")
    d_fit = 2.0 * resid / count

    n_rows = batch.inputs.shape[0]
    d_lat = np.zeros((n_rows, state.n_series))
    monthly = ~quarterly
    np.add.at(d_lat, (batch.windows[:, -1][:, None], np.flatnonzero(monthly)[None, :]),
              d_fit[:, monthly])
    if quarterly.any():
        qidx = np.flatnonzero(quarterly)
        for j, w in enumerate(MM_WEIGHTS):
            rows = batch.windows[:, j]
            ok = rows >= 0
            np.add.at(d_lat, (rows[ok][:, None], qidx[None, :]), w * d_fit[ok][:, qidx])

    factors = caches["factors"]
    grads = {"loadings": d_lat.T @ factors, "bias": d_lat.sum(axis=0)}
    dh = d_lat @ p["loadings"]
    train = caches["mode"] == "train"
    for k in reversed(range(len(spec.hidden_sizes))):
        c = caches["layers"][k]
        d_pre = dh * (1.0 - c["out"] ** 2) if spec.activation == "tanh" else dh
        if k in spec.batchnorm_positions:
            zhat = c["zhat"]
            grads[f"gamma{k}"] = np.sum(d_pre * zhat, axis=0)
            grads[f"beta{k}"] = d_pre.sum(axis=0)
            d_zhat = d_pre * p[f"gamma{k}"]
            if train:
                m = zhat.shape[0]
                dz = c["inv_std"] / m * (m * d_zhat - d_zhat.sum(axis=0)
                                         - zhat * np.sum(d_zhat * zhat, axis=0))
            else:
                dz = d_zhat * c["inv_std"]
        else:
            dz = d_pre
            grads[f"b{k}"] = dz.sum(axis=0)
        grads[f"W{k}"] = dz.T @ c["h_in"]
        dh = dz @ p[f"W{k}"]
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for {name}")
    return grads


def loss_and_grads(state: NetworkState, batch: Batch, quarterly, mode="train"):
    fitted, caches = forward(state, batch, quarterly, mode)
    loss = masked_mse(batch.targets, fitted, batch.mask)
    return loss, backprop_grads(state, batch, quarterly, caches), caches


def adam_step(state: NetworkState, grads, config: AdamConfig = AdamConfig()) -> NetworkState:
    """One bias-corrected ADAM update of every parameter present in ``grads``."""
    t = state.step + 1
    b1, b2 = config.beta1, config.beta2
    params, m_buf, v_buf = dict(state.params), dict(state.adam_m), dict(state.adam_v)
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, g in grads.items():
        m = b1 * m_buf.get(name, 0.0) + (1 - b1) * g
        v = b2 * v_buf.get(name, 0.0) + (1 - b2) * g * g
        m_buf[name], v_buf[name] = m, v
        params[name] = params[name] - config.learning_rate * (m / c1) / (np.sqrt(v / c2) + config.eps)
    return replace(state, params=params, adam_m=m_buf, adam_v=v_buf, step=t)
