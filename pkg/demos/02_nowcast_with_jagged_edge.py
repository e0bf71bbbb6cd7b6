"""Nowcast a quarterly target from a real-time vintage.

Series are released with different delays, so at any date the end of the
panel is ragged. The fitted model is cast in state-space form and the
Kalman filter fills the gaps and projects ahead.
"""

import numpy as np

from d2fm import (DGPConfig, Nowcaster, TrainConfig, generate_synthetic_panel, make_vintage,
                  standardize, train_d2fm)

quarterly = np.zeros(12, bool)
quarterly[-1] = True
panel, _, _ = generate_synthetic_panel(
    DGPConfig(n=12, T=300, r=2, idio_phi=0.3, idio_var=0.5, quarterly=quarterly), rng_seed=4)
target = panel.codes[-1]
as_of = "1993-11-20"

# train only on what was known at the as-of date
vintage = make_vintage(panel, as_of).panel
months = int(np.datetime64(as_of[:7], "M") - panel.dates[0]) + 1
history = vintage.rows(0, months)
std, scaler = standardize(history)
fit = train_d2fm(std, TrainConfig(n_factors=2, input_lags=1, max_iterations=10), scaler)

print("last released month per series at", as_of)
released = vintage.mask[:months]
for j, code in enumerate(panel.codes):
    last = panel.dates[np.flatnonzero(released[:, j])[-1]]
    print(f"  {code}: {last}  (delay {panel.meta[j].delay_days:+d} days)")

for rec in Nowcaster(fit).records(panel, as_of, target, monthly=False):
    t = int(rec.target_period - panel.dates[0])
    print(f"{rec.horizon_type:9s} {rec.target_period}  {rec.value:+.3f}   "
          f"outcome {panel.values[t, -1]:+.3f}   {rec.weeks_to_release} weeks to release")
