"""Replay a weekly nowcasting schedule and score it against an AR(1).

At each date the model sees only the data released by then, is retrained
once a year and otherwise refiltered. Errors are grouped by the number of
weeks left before the target's release.
"""

import numpy as np

from d2fm import (BacktestConfig, DGPConfig, TrainConfig, ar1_benchmark, expanding_backtest,
                  generate_synthetic_panel, rmsfe_report)
from d2fm.evaluation import actuals_for

quarterly = np.zeros(15, bool)
quarterly[-2:] = True
panel, _, _ = generate_synthetic_panel(
    DGPConfig(n=15, T=300, r=2, idio_phi=0.5, idio_var=0.5, missing_rate=0.05,
              quarterly=quarterly), rng_seed=2)
target = panel.codes[-1]
schedule = np.arange(np.datetime64("1988-01-06"), np.datetime64("1994-12-31"), 7)

cfg = BacktestConfig(TrainConfig(n_factors=2, input_lags=1, max_iterations=10), target,
                     retrain_months=12, monthly_records=False)
result = expanding_backtest(panel, cfg, schedule)
bench = ar1_benchmark(panel, target, schedule)

actuals = actuals_for(panel, result.records + bench)
scored = lambda recs: [r for r in recs if (r.series, str(r.target_period)) in actuals]
report = rmsfe_report(scored(result.records), actuals, scored(bench))
print(f"{len(result.records)} forecasts, {len(result.fits)} trained models")
print(report.to_string(index=False, float_format="%.3f"))
