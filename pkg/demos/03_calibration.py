"""Calibrate a 3PL form by Metropolis-within-Gibbs and compare with the truth.

The slopes come back well. Difficulties of weakly discriminating items trade
off against their lower asymptotes, so their errors are larger.
"""

import numpy as np

from mirtlink import Family, Format, TestForm
from mirtlink.calibration import CalibrationSpec, calibrate_mcmc
from mirtlink.model import DichotomousItem
from mirtlink.simulation import default_item_bank, generate_responses, sample_thetas

base, _ = default_item_bank()
truth_2d = [it for it in base.items if it.format is Format.MC][:20]
mc = [DichotomousItem(it.id, (it.a[0],), it.d, it.c) for it in truth_2d]
thetas = sample_thetas(1000, 1.0, seed=1)  # rho = 1, so the 2D truth is a unidimensional test
y = generate_responses(TestForm("mc", truth_2d), thetas, seed=2)

res = calibrate_mcmc(y, mc, CalibrationSpec(model_family=Family.UIRT, chain_length=1000, burn_in=500, seed=3))
print("acceptance rates:", {k: round(v, 3) for k, v in res.acceptance_rates.items()})
print(f"{'item':>10} {'a':>6} {'a_hat':>6} {'b':>6} {'b_hat':>6} {'c':>5} {'c_hat':>5}")
for t, e in zip(mc[:8], res.items):
    print(f"{t.id:>10} {t.a[0]:6.2f} {e.a[0]:6.2f} {t.b:6.2f} {e.b:6.2f} {t.c:5.2f} {e.c:5.2f}")
a = np.array([t.a[0] for t in mc]), np.array([e.a[0] for e in res.items])
print("RMSE(a) =", round(float(np.sqrt(np.mean((a[0] - a[1]) ** 2))), 3))
