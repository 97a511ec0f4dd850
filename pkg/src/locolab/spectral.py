"""Truncated SVD of matrix-free operators and related subspace tools."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import CapacityError, DomainError

__all__ = [
    "LinearMap",
    "TruncatedSvd",
    "gpm_topk",
    "dense_svd",
    "numerical_rank",
    "principal_angles",
    "nullspace_projector",
    "drop_null_directions",
    "SIGMA_FLOOR",
]

MAX_DENSE_DIM = 4096
# singular directions at or below SIGMA_FLOOR * sigma_ref count as null
SIGMA_FLOOR = 1e-8


class LinearMap:
    """A linear map known only through its action and the action of its adjoint.

    Both callables take a vector or a block of column vectors.  On construction
    the pair is probed with random vectors and rejected when
    ``<u, A v>`` and ``<A^T u, v>`` disagree beyond ``adjoint_rtol``.
    """

    def __init__(self, apply: Callable, apply_adjoint: Callable, shape: tuple,
                 check: bool = True, adjoint_rtol: float = 1e-8, n_probes: int = 10):
        self.apply = apply
        self.apply_adjoint = apply_adjoint
        self.shape = (int(shape[0]), int(shape[1]))
        if check:
            self.check_adjoint(adjoint_rtol, n_probes)

    @classmethod
    def from_matrix(cls, A, **kwargs) -> "LinearMap":
        A = np.asarray(A, dtype=float)
        return cls(lambda v: A @ v, lambda u: A.T @ u, A.shape, **kwargs)

    @property
    def n_in(self) -> int:
        return self.shape[1]

    @property
    def n_out(self) -> int:
        return self.shape[0]

    def __matmul__(self, v):
        return self.apply(v)

    def adjoint_mismatch(self, n_probes: int = 10, seed: int = 12345) -> float:
        """Largest relative adjoint inconsistency over random probe pairs."""
        rng = np.random.default_rng(seed)
        worst = 0.0
        for _ in range(n_probes):
            u = rng.standard_normal(self.n_out)
            v = rng.standard_normal(self.n_in)
            Av = self.apply(v)
            Atu = self.apply_adjoint(u)
            scale = np.linalg.norm(u) * np.linalg.norm(Av) + np.linalg.norm(Atu) * np.linalg.norm(v)
            if scale == 0.0:
                continue
            worst = max(worst, abs(u @ Av - Atu @ v) / scale)
        return worst

    def check_adjoint(self, rtol: float = 1e-8, n_probes: int = 10) -> None:
        mismatch = self.adjoint_mismatch(n_probes)
        if mismatch > rtol:
            raise ValueError(f"adjoint inconsistent: relative mismatch {mismatch:.3e} > {rtol:.1e}")

    def dense(self) -> np.ndarray:
        return self.apply(np.eye(self.n_in))


@dataclass(frozen=True)
class TruncatedSvd:
    """Top-k singular triplets ``A V = U diag(sigma)``.

    ``residual`` is ``max_i |A^T u_i - sigma_i v_i| / sigma_1`` at exit and
    ``converged`` says whether the stopping rule fired before ``max_iters``.
    """

    U: np.ndarray
    sigma: np.ndarray
    V: np.ndarray
    residual: float
    iterations: int
    converged: bool
    sigma_history: list = field(default_factory=list, repr=False)


def _sign_fix(U, V):
    # largest-magnitude entry of each right vector made positive
    idx = np.argmax(np.abs(V), axis=0)
    s = np.sign(V[idx, np.arange(V.shape[1])])
    s[s == 0] = 1.0
    return U * s, V * s


def _subspace_step(V_old, V_new) -> float:
    """Sine of the largest principal angle between two equal-size blocks."""
    if V_old.shape[1] == 0:
        return 0.0
    R = V_old - V_new @ (V_new.T @ V_old)
    return float(np.linalg.norm(R, 2))


def gpm_topk(A: LinearMap, k: int, max_iters: int = 500, tol: float = 1e-9,
             rng: Optional[np.random.Generator] = None, V0=None,
             subspace_tol: float = 1e-8) -> TruncatedSvd:
    """Generalized power method for the top-``k`` singular triplets of ``A``.

    Each sweep applies the map to the whole block (``U = A V``), pulls back
    through the adjoint (``V_hat = A^T U``) and refreshes ``(V, sigma)`` from
    the reduced SVD of ``V_hat``.  ``U`` is orthonormalized every sweep, which
    turns the singular values of ``V_hat`` into direct estimates of sigma and
    keeps the block well conditioned.

    Iteration stops once (a) the largest change of a retained sigma, relative
    to ``max(sigma_i, 1e-6 sigma_1)``, is below ``tol`` and (b) the span of the
    significant right vectors (sigma above ``1e-6 sigma_1``) moved by less than
    ``subspace_tol`` during the sweep.  Sigma errors are quadratic in the
    vector error, so (a) alone stops too early for the vectors.  A final
    Rayleigh-Ritz step makes ``A v_i = sigma_i u_i`` hold to rounding.

    Non-convergence is not an error: the last iterate is returned with
    ``converged=False``.
    """
    n = A.n_in
    if not 1 <= k <= min(A.shape):
        raise DomainError(f"k={k} must lie in [1, {min(A.shape)}]")
    rng = np.random.default_rng() if rng is None else rng
    V = rng.standard_normal((n, k)) if V0 is None else np.array(V0, dtype=float)
    V, _ = np.linalg.qr(V)

    sigma = None
    history = []
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        U, _ = np.linalg.qr(A.apply(V))
        V_prev = V
        V, s, _ = np.linalg.svd(A.apply_adjoint(U), full_matrices=False)
        history.append(s.copy())
        if sigma is not None:
            scale = np.maximum(sigma, 1e-6 * sigma[0]) if sigma[0] > 0 else np.ones_like(sigma)
            change = np.max(np.abs(s - sigma) / scale)
            sigma = s
            j = int(np.count_nonzero(s > 1e-6 * s[0]))
            if change < tol and _subspace_step(V_prev[:, :j], V[:, :j]) < subspace_tol:
                converged = True
                break
        else:
            sigma = s
            if s[0] == 0.0:
                # zero map: any orthonormal block is exact
                converged = True
                break

    AV = A.apply(V)
    Q, R = np.linalg.qr(AV)
    a, s, bt = np.linalg.svd(R)
    U = Q @ a
    V = V @ bt.T
    U, V = _sign_fix(U, V)
    resid = np.linalg.norm(A.apply_adjoint(U) - V * s, axis=0)
    residual = float(np.max(resid) / s[0]) if s[0] > 0 else 0.0
    return TruncatedSvd(U, s, V, residual, it, converged, history)


def dense_svd(A):
    """Full SVD ``(U, sigma, Vt)`` of a dense matrix via LAPACK."""
    A = np.asarray(A, dtype=float)
    if max(A.shape) > MAX_DENSE_DIM:
        raise CapacityError(f"matrix of shape {A.shape} exceeds the dense limit")
    return np.linalg.svd(A)


def numerical_rank(sigma, eta: float = 0.99) -> int:
    """Smallest ``r`` whose leading energy fraction
    ``sum_{i<=r} sigma_i^2 / sum_i sigma_i^2`` exceeds ``eta**2``.

    An all-zero spectrum has rank 0.
    """
    if not 0.0 < eta < 1.0:
        raise DomainError(f"eta={eta} must lie in (0, 1)")
    s = np.asarray(sigma, dtype=float)
    if np.any(s < 0) or np.any(np.diff(s) > 0):
        raise DomainError("sigma must be nonnegative and nonincreasing")
    energy = np.cumsum(s * s)
    if energy.size == 0 or energy[-1] == 0.0:
        return 0
    return int(np.argmax(energy / energy[-1] > eta * eta)) + 1


def _check_orthonormal(X, name):
    G = X.T @ X
    if np.max(np.abs(G - np.eye(X.shape[1]))) > 1e-8:
        raise DomainError(f"{name} does not have orthonormal columns")


def principal_angles(A, B) -> np.ndarray:
    """Principal angles (radians, ascending) between ``span(A)`` and ``span(B)``."""
    A = np.atleast_2d(np.asarray(A, dtype=float).T).T
    B = np.atleast_2d(np.asarray(B, dtype=float).T).T
    _check_orthonormal(A, "A")
    _check_orthonormal(B, "B")
    cos = np.linalg.svd(A.T @ B, compute_uv=False)
    return np.arccos(np.clip(cos, 0.0, 1.0))


def drop_null_directions(V, sigma, reference: Optional[float] = None,
                         floor: float = SIGMA_FLOOR) -> np.ndarray:
    """Keep the columns of ``V`` whose singular value exceeds
    ``floor * reference`` (``reference`` defaults to ``sigma[0]``)."""
    sigma = np.asarray(sigma, dtype=float)
    ref = (sigma[0] if sigma.size else 0.0) if reference is None else reference
    return np.asarray(V)[:, sigma > floor * ref]


def nullspace_projector(Vbar) -> Callable:
    """``v -> (I - Vbar Vbar^T) v``; ``Vbar`` must have orthonormal columns."""
    Vbar = np.atleast_2d(np.asarray(Vbar, dtype=float).T).T
    if Vbar.shape[1]:
        _check_orthonormal(Vbar, "Vbar")

    def project(v):
        v = np.asarray(v, dtype=float)
        return v - Vbar @ (Vbar.T @ v)

    return project
