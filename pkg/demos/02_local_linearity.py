"""The posterior mean is nearly linear in a neighbourhood that grows with noise.

Along a random unit direction dx we compare f(x + lam dx) with the first-order
model f(x) + lam J dx.  The mismatch scales like lam^2 times the signal-to-
noise ratio alpha / (1 - alpha), so at high noise even lam = 40 barely bends.
"""

import numpy as np

from locolab.harness import calibrate_linearity, linearity_curve, linearity_trials
from locolab.molrg import random_model

model = random_model(32, [2, 2], seed=0)

for t in (0.5, 0.9):
    table = linearity_curve(model, t, (1, 5, 10, 40), n_samples=15,
                            rng=np.random.default_rng(1))
    print(f"t = {t}")
    for lam, ratio, cos in zip(table.column("lambda"), table.column("norm_ratio"),
                               table.column("cosine")):
        print(f"  lambda {lam:5.1f}: norm ratio {ratio:.4f}, cosine {cos:.4f}")

# One constant C, calibrated at t = 0.5, bounds the residual at later times.
lams = [1.0, 5.0, 10.0, 40.0]
c_hat = calibrate_linearity(model, lams, np.random.default_rng(2), n_draws=300)
later = linearity_trials(model, [0.6, 0.7, 0.8, 0.9], lams, 50, np.random.default_rng(3))
print(f"\ncalibrated C = {c_hat:.3f}; fraction of later trials within "
      f"C lam^2 snr_t: {np.mean(np.all(later <= c_hat, axis=(1, 2))):.2f}")
