"""Train the model on a simulated mixed-frequency panel.

The panel has 30 monthly series driven by two VAR(2) factors, three of
them published quarterly, and 10% of cells missing at random. After
training we compare the estimated factor space with the true one.
"""

import numpy as np

from d2fm import DGPConfig, TrainConfig, generate_synthetic_panel, standardize, train_d2fm

B = np.zeros((2, 2, 2))
B[0] = [[0.6, 0.1], [0.0, 0.5]]
B[1] = 0.2 * np.eye(2)
quarterly = np.zeros(30, bool)
quarterly[-3:] = True
dgp = DGPConfig(n=30, T=600, r=2, var_coefs=B, idio_phi=0.5, idio_var=0.5,
                missing_rate=0.1, quarterly=quarterly)

panel, true_factors, _ = generate_synthetic_panel(dgp, rng_seed=1)
std, scaler = standardize(panel)
fit = train_d2fm(std, TrainConfig(n_factors=2, input_lags=1), scaler)

print(f"iterations: {len(fit.loss_trace)}, converged: {fit.converged}")
print(f"final reconstruction loss: {fit.loss_trace[-1]:.4f}")

# canonical correlations between the true and the estimated factor spaces
a = np.linalg.qr(true_factors - true_factors.mean(0))[0]
b = np.linalg.qr(fit.factors - fit.factors.mean(0))[0]
print("canonical correlations:", np.round(np.linalg.svd(a.T @ b, compute_uv=False), 3))
print("mean |AR(1)| of idiosyncratic terms:", np.round(np.abs(fit.idio.coefs).mean(), 3))
