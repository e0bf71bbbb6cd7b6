"""Synthetic panels shared by several test modules."""

import numpy as np

from d2fm.data import DGPConfig


def recovery_dgp():
    """n=30, T=600, r=2 linear DFM with VAR(2) factors and three quarterly columns."""
    B = np.zeros((2, 2, 2))
    B[0] = [[0.6, 0.1], [0.0, 0.5]]
    B[1] = 0.2 * np.eye(2)
    quarterly = np.zeros(30, bool)
    quarterly[-3:] = True
    return DGPConfig(n=30, T=600, r=2, var_coefs=B, idio_phi=0.5, idio_var=0.5,
                     missing_rate=0.1, quarterly=quarterly)


def cycle_dgp(T=600, missing_rate=0.1):
    """Same dynamics with a dominant common cycle: every series loads positively on it."""
    cfg = recovery_dgp()
    rng = np.random.default_rng(11)
    cfg.loadings = np.column_stack([1 + 0.3 * rng.standard_normal(30),
                                    0.5 * rng.standard_normal(30)])
    cfg.T = T
    cfg.missing_rate = missing_rate
    return cfg


def small_dgp(n=8, T=240, n_quarterly=1, missing_rate=0.05):
    quarterly = np.zeros(n, bool)
    if n_quarterly:
        quarterly[-n_quarterly:] = True
    return DGPConfig(n=n, T=T, r=2, idio_phi=0.3, idio_var=0.5, missing_rate=missing_rate,
                     quarterly=quarterly)


SMALL_RUN = """\
seed: 7
target: S08
paths: {data: data.csv, meta: meta.csv, output_dir: out}
simulate: {n: 8, T: 240, r: 2, n_quarterly: 1, missing_rate: 0.05, idio_phi: 0.3,
           idio_var: 0.5}
train: {epochs_per_iteration: 10, pretrain_epochs: 10, max_iterations: 3}
backtest: {start: "1985-02-06", end: "1985-04-30", step_days: 28, retrain_months: 2}
"""


def write_config(directory, text=SMALL_RUN):
    path = directory / "run.yaml"
    path.write_text(text)
    return path
