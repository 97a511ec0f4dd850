"""Mixture of low-rank Gaussians: the ground-truth data model.

Clean data lives on a union of ``K`` mutually orthogonal subspaces with
orthonormal bases ``M_k`` (``d x r_k``).  A clean point is drawn by picking a
component uniformly and setting ``x0 = M_k a`` with ``a ~ N(0, I)``.  After
forward noising the marginal at time ``t`` is the Gaussian mixture

    p_t(x) = (1/K) sum_k N(x; 0, alpha_t M_k M_k^T + (1 - alpha_t) I),

whose inverse covariances and log-determinants have closed forms, so the
density and score never need a dense ``d x d`` solve.

Arrays of points may carry leading batch axes: ``x`` has shape ``(..., d)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import logsumexp, softmax

from .errors import DomainError, ModelError
from .schedule import COSINE, NoiseSchedule

__all__ = [
    "SubspaceModel",
    "Sample",
    "random_model",
    "localized_model",
    "sample_x0",
    "sample_batch",
    "forward_noise",
    "log_density",
    "score",
    "save_model",
    "load_model",
]

ORTHO_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class SubspaceModel:
    """Orthonormal, mutually orthogonal subspace bases plus the noise schedule
    used to evaluate every time-dependent quantity.

    The bases are validated on construction; a violation raises
    :class:`~locolab.errors.ModelError`.
    """

    bases: tuple
    schedule: NoiseSchedule = field(default=COSINE)

    def __post_init__(self):
        bases = tuple(np.array(M, dtype=float, copy=True) for M in self.bases)
        if not bases:
            raise ModelError("need at least one component")
        d = bases[0].shape[0]
        for k, M in enumerate(bases):
            if M.ndim != 2 or M.shape[0] != d or M.shape[1] < 1:
                raise ModelError(f"basis {k} has shape {M.shape}, expected ({d}, r>=1)")
            M.setflags(write=False)
        if sum(M.shape[1] for M in bases) > d:
            raise ModelError("total rank exceeds the ambient dimension")
        for i, Mi in enumerate(bases):
            for j, Mj in enumerate(bases):
                G = Mi.T @ Mj
                target = np.eye(Mi.shape[1]) if i == j else 0.0
                if np.max(np.abs(G - target)) > ORTHO_TOL:
                    what = "orthonormal" if i == j else "mutually orthogonal"
                    raise ModelError(f"bases {i} and {j} are not {what}")
        object.__setattr__(self, "bases", bases)

    @property
    def d(self) -> int:
        return self.bases[0].shape[0]

    @property
    def K(self) -> int:
        return len(self.bases)

    @property
    def ranks(self) -> tuple:
        return tuple(M.shape[1] for M in self.bases)

    @property
    def total_rank(self) -> int:
        return sum(self.ranks)

    @property
    def stacked(self) -> np.ndarray:
        """``M = [M_1 ... M_K]``, a ``d x sum(r_k)`` orthonormal matrix."""
        return np.hstack(self.bases)

    def alpha(self, t: float) -> float:
        return self.schedule.alpha(t)

    def with_schedule(self, schedule: NoiseSchedule) -> "SubspaceModel":
        return SubspaceModel(self.bases, schedule)

    def __eq__(self, other):
        if not isinstance(other, SubspaceModel):
            return NotImplemented
        return (
            self.schedule == other.schedule
            and self.ranks == other.ranks
            and all(np.array_equal(a, b) for a, b in zip(self.bases, other.bases))
        )

    __hash__ = None


@dataclass(frozen=True)
class Sample:
    x0: np.ndarray
    cls: int  # zero-based component index
    coeff: np.ndarray


def random_model(d: int, ranks: Sequence[int], seed: int = 0,
                 schedule: NoiseSchedule = COSINE) -> SubspaceModel:
    """Bases from the QR factor of a seeded ``d x sum(ranks)`` Gaussian matrix,
    sliced column-wise per component."""
    ranks = [int(r) for r in ranks]
    if any(r < 1 for r in ranks):
        raise ModelError("ranks must be positive")
    if sum(ranks) > d:
        raise ModelError(f"sum of ranks {sum(ranks)} exceeds dimension {d}")
    rng = np.random.default_rng(seed)
    Q, _ = np.linalg.qr(rng.standard_normal((d, sum(ranks))))
    splits = np.cumsum(ranks)[:-1]
    return SubspaceModel(tuple(np.split(Q, splits, axis=1)), schedule)


def localized_model(d: int, ranks: Sequence[int], supports: Sequence[Sequence[int]],
                    seed: int = 0, schedule: NoiseSchedule = COSINE) -> SubspaceModel:
    """Like :func:`random_model`, but basis ``k`` is confined to the coordinate
    set ``supports[k]``.  Supports must be pairwise disjoint, which makes the
    bases mutually orthogonal by construction.

    Coordinate-local bases mimic spatially separated semantics and are what
    makes masked editing meaningful on this model.
    """
    if len(supports) != len(ranks):
        raise ModelError("need one support per component")
    sets = [sorted(set(int(i) for i in sup)) for sup in supports]
    seen = set()
    for sup in sets:
        if seen.intersection(sup):
            raise ModelError("supports must be disjoint")
        if sup and (sup[0] < 0 or sup[-1] >= d):
            raise ModelError("support index out of range")
        seen.update(sup)
    rng = np.random.default_rng(seed)
    bases = []
    for r, sup in zip(ranks, sets):
        if len(sup) < r or r < 1:
            raise ModelError("each support needs at least r_k >= 1 coordinates")
        Q, _ = np.linalg.qr(rng.standard_normal((len(sup), r)))
        M = np.zeros((d, r))
        M[sup] = Q
        bases.append(M)
    return SubspaceModel(tuple(bases), schedule)


def sample_x0(model: SubspaceModel, rng: np.random.Generator) -> Sample:
    k = int(rng.integers(model.K))
    a = rng.standard_normal(model.ranks[k])
    return Sample(model.bases[k] @ a, k, a)


def sample_batch(model: SubspaceModel, n: int, rng: np.random.Generator):
    """Vectorized draw of ``n`` clean points; returns ``(x0, classes)``."""
    classes = rng.integers(model.K, size=n)
    x0 = np.zeros((n, model.d))
    for k, M in enumerate(model.bases):
        idx = np.flatnonzero(classes == k)
        x0[idx] = rng.standard_normal((len(idx), M.shape[1])) @ M.T
    return x0, classes


def forward_noise(model: SubspaceModel, x0, t: float, rng: np.random.Generator,
                  return_noise: bool = False):
    """``x_t = sqrt(alpha_t) x0 + sqrt(1 - alpha_t) eps``."""
    x0 = np.asarray(x0, dtype=float)
    a = model.alpha(t)
    eps = rng.standard_normal(x0.shape)
    xt = math.sqrt(a) * x0 + math.sqrt(1.0 - a) * eps
    return (xt, eps) if return_noise else xt


def _require_positive_time(model, t):
    a = model.alpha(t)
    if a >= 1.0:
        raise DomainError("the noised density is degenerate at t = 0")
    return a


def component_log_densities(model: SubspaceModel, x, t: float) -> np.ndarray:
    """``log N(x; 0, Sigma_k)`` for every component; shape ``(..., K)``.

    Uses ``Sigma_k^{-1} = (I - alpha M_k M_k^T) / (1 - alpha)`` and
    ``log det Sigma_k = (d - r_k) log(1 - alpha)``.
    """
    a = _require_positive_time(model, t)
    x = np.asarray(x, dtype=float)
    d = model.d
    sq = np.sum(x * x, axis=-1)
    out = []
    for M in model.bases:
        proj = x @ M
        quad = (sq - a * np.sum(proj * proj, axis=-1)) / (1.0 - a)
        logdet = (d - M.shape[1]) * math.log1p(-a)
        out.append(-0.5 * (d * math.log(2 * math.pi) + logdet + quad))
    return np.stack(out, axis=-1)


def log_density(model: SubspaceModel, x, t: float):
    logs = component_log_densities(model, x, t)
    return logsumexp(logs, axis=-1) - math.log(model.K)


def score(model: SubspaceModel, x, t: float) -> np.ndarray:
    """Closed-form ``grad_x log p_t(x)``.

    The per-component gradient is ``-(x - alpha P_k x) / (1 - alpha)``;
    mixing them by the component responsibilities gives the result.
    """
    a = _require_positive_time(model, t)
    x = np.asarray(x, dtype=float)
    resp = softmax(component_log_densities(model, x, t), axis=-1)
    mixed = np.zeros_like(x)
    for k, M in enumerate(model.bases):
        mixed += resp[..., k, None] * ((x @ M) @ M.T)
    return (-x + a * mixed) / (1.0 - a)


def save_model(model: SubspaceModel, path) -> None:
    """Plain-text model file: header ``d K r_1 ... r_K``, then one line per
    basis column (components in order), 17 significant digits."""
    lines = [" ".join(str(v) for v in (model.d, model.K, *model.ranks))]
    for M in model.bases:
        for col in M.T:
            lines.append(" ".join(f"{v:.17g}" for v in col))
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_model(path, schedule: NoiseSchedule = COSINE) -> SubspaceModel:
    with open(path) as fh:
        rows = [ln.split() for ln in fh if ln.strip()]
    if not rows:
        raise ModelError(f"{path}: empty model file")
    try:
        header = [int(v) for v in rows[0]]
        d, K, ranks = header[0], header[1], header[2:]
        if len(ranks) != K:
            raise ModelError(f"{path}: header lists {len(ranks)} ranks for K={K}")
        cols = np.array([[float(v) for v in r] for r in rows[1:]])
    except ValueError as exc:
        if isinstance(exc, ModelError):
            raise
        raise ModelError(f"{path}: malformed model file ({exc})") from exc
    if cols.shape != (sum(ranks), d):
        raise ModelError(f"{path}: expected {sum(ranks)} columns of length {d}")
    splits = np.cumsum(ranks)[:-1]
    return SubspaceModel(tuple(c.T for c in np.split(cols, splits, axis=0)), schedule)
