"""Posterior mean predictor (PMP) of the subspace model and its Jacobian.

For the mixture of low-rank Gaussians the posterior mean is a softmax-weighted
sum of projections of ``x_t`` onto the component subspaces::

    f(x) = sqrt(a) * sum_k w_k(x) P_k x,      P_k = M_k M_k^T, a = alpha_t

and its Jacobian splits as ``sqrt(a) A + c (B - C)`` with
``c = a sqrt(a) / (1 - a)``, ``A = sum_k w_k P_k``,
``B = sum_k w_k p_k p_k^T`` and ``C = m m^T`` where ``p_k = P_k x`` and
``m = A x``.  ``B - C`` is the w-weighted covariance of the ``p_k``, so the
Jacobian is symmetric positive semidefinite with range inside ``span(M)``.

Everything here accepts a batch of points ``x`` with shape ``(..., d)``
unless stated otherwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import softmax

from .errors import CapacityError, DomainError
from .molrg import SubspaceModel, sample_batch, score

__all__ = [
    "MAX_DENSE_DIM",
    "weights",
    "posterior_mean",
    "posterior_mean_via_tweedie",
    "jacobian_dense",
    "JacobianOperator",
    "jvp",
    "vjp",
    "epsilon_predictor",
    "epsilon_jacobian_dense",
    "fit_linear_denoiser",
    "population_linear_denoiser",
    "linearization_error",
]

MAX_DENSE_DIM = 4096


def _alpha(model, t, allow_one=True):
    a = model.alpha(t)
    if a >= 1.0:
        raise DomainError("posterior-mean quantities require t > 0")
    if not allow_one and a <= 0.0:
        raise DomainError("this quantity requires t < 1")
    return a


def weights(model: SubspaceModel, x, t: float) -> np.ndarray:
    """Posterior component probabilities ``w_k(x_t)``; shape ``(..., K)``.

    The logit of component ``k`` is ``a / (2 (1 - a)) * |M_k^T x|^2`` plus the
    log-determinant offset ``(r_k / 2) log(1 - a)``.  The offset is common to
    all components when the ranks are equal; with unequal ranks it is needed
    for the weights to be the exact posterior.
    """
    a = _alpha(model, t)
    x = np.asarray(x, dtype=float)
    gain = a / (2.0 * (1.0 - a))
    logits = np.stack(
        [gain * np.sum((x @ M) ** 2, axis=-1) + 0.5 * M.shape[1] * math.log1p(-a)
         for M in model.bases],
        axis=-1,
    )
    return softmax(logits, axis=-1)


def _projections(model, x):
    return [(x @ M) @ M.T for M in model.bases]


def posterior_mean(model: SubspaceModel, x, t: float) -> np.ndarray:
    a = _alpha(model, t)
    x = np.asarray(x, dtype=float)
    w = weights(model, x, t)
    out = np.zeros_like(x)
    for k, p in enumerate(_projections(model, x)):
        out += w[..., k, None] * p
    return math.sqrt(a) * out


def posterior_mean_via_tweedie(model: SubspaceModel, x, t: float) -> np.ndarray:
    """``(x + (1 - a) score(x)) / sqrt(a)``, built on :func:`molrg.score`."""
    a = _alpha(model, t, allow_one=False)
    x = np.asarray(x, dtype=float)
    return (x + (1.0 - a) * score(model, x, t)) / math.sqrt(a)


def jacobian_dense(model: SubspaceModel, x, t: float) -> np.ndarray:
    """Materialized Jacobian of :func:`posterior_mean` at a single point."""
    if model.d > MAX_DENSE_DIM:
        raise CapacityError(f"d = {model.d} exceeds the dense limit {MAX_DENSE_DIM}")
    a = _alpha(model, t)
    x = np.asarray(x, dtype=float)
    w = weights(model, x, t)
    P = [M @ M.T for M in model.bases]
    p = [Pk @ x for Pk in P]
    A = sum(wk * Pk for wk, Pk in zip(w, P))
    B = sum(wk * np.outer(pk, pk) for wk, pk in zip(w, p))
    m = A @ x
    C = np.outer(m, m)
    c = a * math.sqrt(a) / (1.0 - a)
    return math.sqrt(a) * A + c * (B - C)


@dataclass(frozen=True, eq=False)
class JacobianOperator:
    """Matrix-free Jacobian of the PMP at a fixed ``(x_t, t)``.

    ``mode="analytic"`` applies the A/B/C decomposition without forming the
    matrix; ``mode="finite-difference"`` differentiates :func:`posterior_mean`
    numerically.  With a ``mask`` (index array), outputs outside the mask are
    zeroed, i.e. the operator is ``P_mask J``.
    """

    model: SubspaceModel
    x: np.ndarray
    t: float
    mode: str = "analytic"
    mask: Optional[np.ndarray] = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if self.mode not in ("analytic", "finite-difference"):
            raise ValueError(f"unknown Jacobian mode {self.mode!r}")
        x = np.array(self.x, dtype=float)
        x.setflags(write=False)
        object.__setattr__(self, "x", x)
        if self.mask is not None:
            object.__setattr__(self, "mask", np.unique(np.asarray(self.mask, dtype=int)))
        a = _alpha(self.model, self.t)
        w = weights(self.model, x, self.t)
        p = np.stack(_projections(self.model, x), axis=-1)  # d x K
        self._cache.update(a=a, w=w, p=p, m=p @ w)

    @property
    def d(self) -> int:
        return self.model.d

    def _mask_rows(self, y):
        if self.mask is None:
            return y
        out = np.zeros_like(y)
        out[self.mask] = y[self.mask]
        return out

    def _analytic(self, v):
        a, w, p, m = (self._cache[k] for k in ("a", "w", "p", "m"))
        proj = sum(wk * (M @ (M.T @ v)) for wk, M in zip(w, self.model.bases))
        c = a * math.sqrt(a) / (1.0 - a)
        coef = p.T @ v  # K (x k)
        if v.ndim == 1:
            cov = p @ (w * coef) - m * (m @ v)
        else:
            cov = p @ (w[:, None] * coef) - np.outer(m, m @ v)
        return math.sqrt(a) * proj + c * cov

    def _f(self, pts):
        return posterior_mean(self.model, pts, self.t)

    def _fd_jvp(self, v):
        V = v[:, None] if v.ndim == 1 else v
        nv = np.maximum(np.linalg.norm(V, axis=0), 1e-12)
        h = np.maximum(1e-5, 1e-7 * np.linalg.norm(self.x) / nv)
        plus = self._f(self.x[None, :] + (h * V).T)
        minus = self._f(self.x[None, :] - (h * V).T)
        out = ((plus - minus) / (2.0 * h[:, None])).T
        return out[:, 0] if v.ndim == 1 else out

    def _fd_vjp(self, u):
        d = self.d
        h = max(1e-5, 1e-7 * float(np.linalg.norm(self.x)))
        E = h * np.eye(d)
        fp = self._f(self.x[None, :] + E)
        fm = self._f(self.x[None, :] - E)
        return (fp - fm) @ u / (2.0 * h)

    def jvp(self, v) -> np.ndarray:
        """``P_mask J v``; ``v`` may be a vector or a ``d x k`` block."""
        v = np.asarray(v, dtype=float)
        out = self._analytic(v) if self.mode == "analytic" else self._fd_jvp(v)
        return self._mask_rows(out)

    def vjp(self, u) -> np.ndarray:
        """``J^T P_mask u``."""
        u = self._mask_rows(np.asarray(u, dtype=float))
        if self.mode == "analytic":
            return self._analytic(u)
        return self._fd_vjp(u)

    def matrix(self) -> np.ndarray:
        if self.d > MAX_DENSE_DIM:
            raise CapacityError(f"d = {self.d} exceeds the dense limit {MAX_DENSE_DIM}")
        return self.jvp(np.eye(self.d))


def jvp(op: JacobianOperator, v) -> np.ndarray:
    return op.jvp(v)


def vjp(op: JacobianOperator, u) -> np.ndarray:
    return op.vjp(u)


def epsilon_predictor(model: SubspaceModel, x, t: float) -> np.ndarray:
    """Noise prediction matching the analytic PMP,
    ``(x - sqrt(a) f(x)) / sqrt(1 - a)``."""
    a = _alpha(model, t)
    x = np.asarray(x, dtype=float)
    return (x - math.sqrt(a) * posterior_mean(model, x, t)) / math.sqrt(1.0 - a)


def epsilon_jacobian_dense(model: SubspaceModel, x, t: float) -> np.ndarray:
    """``d eps / d x = (I - sqrt(a) J) / sqrt(1 - a)``."""
    a = _alpha(model, t)
    J = jacobian_dense(model, x, t)
    return (np.eye(model.d) - math.sqrt(a) * J) / math.sqrt(1.0 - a)


def fit_linear_denoiser(model: SubspaceModel, t: float, n_samples: int,
                        rng: np.random.Generator) -> np.ndarray:
    """Least-squares linear PMP ``x0 ~ W x_t`` from ``n_samples`` noised pairs.

    ``W = S_0t (S_tt + ridge I)^{-1}`` with empirical second moments and
    ``ridge = 1e-8 trace(S_tt) / d``.
    """
    d = model.d
    if n_samples < 10 * d:
        raise DomainError(f"n_samples={n_samples} < 10 d = {10 * d}: ill-conditioned fit")
    a = model.alpha(t)
    x0, _ = sample_batch(model, n_samples, rng)
    xt = math.sqrt(a) * x0 + math.sqrt(1.0 - a) * rng.standard_normal(x0.shape)
    S0t = x0.T @ xt / n_samples
    Stt = xt.T @ xt / n_samples
    ridge = 1e-8 * np.trace(Stt) / d
    return np.linalg.solve(Stt + ridge * np.eye(d), S0t.T).T


def population_linear_denoiser(model: SubspaceModel, t: float) -> np.ndarray:
    """Population optimum ``sqrt(a) S0 (a S0 + (1 - a) I)^{-1}``,
    ``S0 = (1/K) sum_k P_k``."""
    a = model.alpha(t)
    S0 = sum(M @ M.T for M in model.bases) / model.K
    return math.sqrt(a) * np.linalg.solve(a * S0 + (1.0 - a) * np.eye(model.d), S0).T


def linearization_error(model: SubspaceModel, x, t: float, dx, lam: float) -> float:
    """``|f(x + lam dx) - f(x) - lam J dx|`` at a single point."""
    x = np.asarray(x, dtype=float)
    dx = np.asarray(dx, dtype=float)
    op = JacobianOperator(model, x, t)
    r = posterior_mean(model, x + lam * dx, t) - posterior_mean(model, x, t) - lam * op.jvp(dx)
    return float(np.linalg.norm(r))
