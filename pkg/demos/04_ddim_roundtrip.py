"""Deterministic DDIM inversion followed by denoising does not return exactly
to the start.

For a point on a subspace each step multiplies by
sqrt(a a') + sqrt((1 - a)(1 - a')), the cosine of the step's angle in
(sqrt(a), sqrt(1 - a)) coordinates, in both directions.  The product of N
such factors is 1 - O(theta^2 / N), so the roundtrip error is first order in
the step size with a constant of about theta^2 (theta = 0.3 pi for t = 0.6 on
the cosine schedule).
"""

import numpy as np

from locolab.molrg import random_model, sample_x0
from locolab.sampler import roundtrip_error

model = random_model(8, [2, 2], seed=0)
rng = np.random.default_rng(5)
x0s = [sample_x0(model, rng).x0 for _ in range(10)]

prev = None
for n in (50, 100, 200, 400, 800):
    err = np.mean([roundtrip_error(model, x0, 0.6, n) for x0 in x0s])
    ratio = "" if prev is None else f"   ratio {err / prev:.3f}"
    print(f"N = {n:4d}: mean relative error {err:.2e}{ratio}   N * error {n * err:.3f}")
    prev = err
