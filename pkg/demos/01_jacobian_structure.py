"""How the posterior-mean Jacobian looks across noise levels.

We build a 32-dimensional model whose clean data live on two orthogonal
planes and noise a few samples at several timesteps.  For each noisy point
we look at the numerical rank of the closed-form posterior-mean Jacobian.
We also check how well its dominant singular vectors line up with the planes.
"""

import numpy as np

from locolab.harness import (rank_ratio_curve, subspace_convergence_curve, symmetry_curve)
from locolab.molrg import random_model

model = random_model(32, [2, 2], seed=0)
grid = (0.1, 0.3, 0.5, 0.7, 0.9)
rng = np.random.default_rng(0)

# The Jacobian never has more than sum(r_k) = 4 significant directions, even
# though it is a 32 x 32 matrix.
rank = rank_ratio_curve(model, grid, eta=0.99, n_samples=15, rng=rng)
print("t      mean rank   max rank")
for t, mean, hi in zip(rank.column("t"), rank.column("rank_mean"), rank.column("rank_max")):
    print(f"{t:4.2f}   {mean:8.2f}   {int(hi):8d}")

# It is symmetric to rounding: it is the Hessian of a log-partition function.
sym = symmetry_curve(model, grid, n_samples=5, rng=rng)
print("\nworst relative asymmetry:", f"{sym.column('asym_max').max():.1e}")

# Its top left singular vectors span the union of the planes.  At small t the
# posterior is so sure of the component that the other plane's singular
# values drop below machine precision, and the distance stops being zero.
sub = subspace_convergence_curve(model, grid, n_samples=15, rng=rng)
print("\nt      subspace distance   perturbation bound (min)")
for t, dist, bound in zip(sub.column("t"), sub.column("distance_mean"), sub.column("bound_min")):
    print(f"{t:4.2f}   {dist:17.2e}   {bound:24.2e}")
