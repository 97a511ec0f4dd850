"""Masked Jacobian editing: direction discovery, nullspace projection, and
one-step / full-trajectory edits on the subspace model.

A mask is a set of coordinates (the region of interest).  The editing
direction is a top right-singular vector of ``P_mask J``; it is then projected
away from the leading right-singular vectors of ``P_complement J`` so that, to
first order, the edit leaves the complement untouched.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from .errors import DegenerateDirectionError, DomainError
from .molrg import SubspaceModel
from .pmp import JacobianOperator, epsilon_predictor, posterior_mean
from .sampler import integrate
from .spectral import LinearMap, drop_null_directions, gpm_topk, nullspace_projector

__all__ = [
    "Mask",
    "EditDirection",
    "masked_jacobian",
    "find_edit_directions",
    "one_step_edit",
    "apply_edit",
    "transfer_edit",
    "compose_directions",
    "disentanglement_score",
    "save_direction",
    "load_direction",
]


@dataclass(frozen=True, eq=False)
class Mask:
    """Sorted, unique coordinate indices in ``[0, d)``."""

    indices: np.ndarray
    d: int

    def __post_init__(self):
        idx = np.unique(np.asarray(self.indices, dtype=int).ravel())
        if idx.size and (idx[0] < 0 or idx[-1] >= self.d):
            raise DomainError(f"mask indices must lie in [0, {self.d})")
        idx.setflags(write=False)
        object.__setattr__(self, "indices", idx)

    @classmethod
    def parse(cls, text: str, d: int) -> "Mask":
        """Parse ``"0,1,5"`` or ranges like ``"0-7,12"`` (inclusive)."""
        out = []
        for part in filter(None, (p.strip() for p in text.split(","))):
            if "-" in part:
                lo, hi = part.split("-")
                out.extend(range(int(lo), int(hi) + 1))
            else:
                out.append(int(part))
        return cls(np.array(out, dtype=int), d)

    def complement(self) -> "Mask":
        return Mask(np.setdiff1d(np.arange(self.d), self.indices), self.d)

    def apply(self, y):
        """Zero every coordinate (along the first axis) outside the mask."""
        y = np.asarray(y, dtype=float)
        out = np.zeros_like(y)
        out[self.indices] = y[self.indices]
        return out

    def __len__(self):
        return int(self.indices.size)

    def __eq__(self, other):
        return isinstance(other, Mask) and self.d == other.d and np.array_equal(
            self.indices, other.indices)

    __hash__ = None


@dataclass(frozen=True, eq=False)
class EditDirection:
    v_p: np.ndarray
    t: float
    omega: Mask
    pick: int
    sigma: float

    def __post_init__(self):
        v = np.array(self.v_p, dtype=float)
        if abs(np.linalg.norm(v) - 1.0) > 1e-12:
            raise DomainError("editing direction must have unit norm")
        v.setflags(write=False)
        object.__setattr__(self, "v_p", v)

    def __eq__(self, other):
        return (isinstance(other, EditDirection) and self.t == other.t
                and self.pick == other.pick and self.sigma == other.sigma
                and self.omega == other.omega and np.array_equal(self.v_p, other.v_p))

    @property
    def source_rank_index(self) -> int:
        """Alias of ``pick``: which top singular vector was selected (1-based)."""
        return self.pick

    __hash__ = None


def masked_jacobian(model: SubspaceModel, x_t, t: float, omega: Mask,
                    mode: str = "analytic") -> LinearMap:
    """``v -> P_omega J v`` with adjoint ``u -> J P_omega u``.

    An empty mask yields the zero map; the handle then carries
    ``is_zero = True``.
    """
    if not 0.0 < t < 1.0:
        raise DomainError("masked Jacobians are taken at t in (0, 1)")
    op = JacobianOperator(model, x_t, t, mode=mode, mask=omega.indices)
    rtol = 1e-8 if mode == "analytic" else 1e-6
    handle = LinearMap(op.jvp, op.vjp, (model.d, model.d), adjoint_rtol=rtol)
    handle.is_zero = len(omega) == 0
    return handle


def _top_svd(handle, k, rng):
    return gpm_topk(handle, min(k, min(handle.shape)), rng=rng)


def find_edit_directions(model: SubspaceModel, x_t, t: float, omega: Mask,
                         r: int = 5, r_null: int = 5, pick: int = 1,
                         rng: Optional[np.random.Generator] = None,
                         project: bool = True, mode: str = "analytic") -> EditDirection:
    """Discover a localized editing direction at ``(x_t, t)``.

    ``pick`` is 1-based into the top-``r`` right singular vectors of the
    masked Jacobian.  With ``project=False`` the nullspace projection is
    skipped (useful for ablations).  Raises
    :class:`~locolab.errors.DegenerateDirectionError` when the picked
    direction is numerically null or vanishes under the projection.
    """
    if not 1 <= pick <= r:
        raise DomainError(f"pick={pick} must lie in [1, r={r}]")
    rng = np.random.default_rng(0) if rng is None else rng
    roi = _top_svd(masked_jacobian(model, x_t, t, omega, mode), r, rng)
    if pick > roi.sigma.size:
        raise DomainError(f"pick={pick} exceeds the available {roi.sigma.size} directions")
    v = roi.V[:, pick - 1]
    sigma = float(roi.sigma[pick - 1])

    outside = omega.complement()
    if len(outside) and project:
        null = _top_svd(masked_jacobian(model, x_t, t, outside, mode), r_null, rng)
        ref = max(float(roi.sigma[0]), float(null.sigma[0]))
        Vbar = drop_null_directions(null.V, null.sigma, reference=ref)
    else:
        ref = float(roi.sigma[0])
        Vbar = np.zeros((model.d, 0))
    if sigma <= 1e-8 * ref or sigma == 0.0:
        raise DegenerateDirectionError(
            f"picked singular value {sigma:.3e} is numerically zero; the mask does not "
            "reach the data subspaces")

    v_p = nullspace_projector(Vbar)(v)
    norm = np.linalg.norm(v_p)
    if norm < 1e-8:
        raise DegenerateDirectionError(
            f"projected direction has norm {norm:.3e}; the picked direction lies in the "
            "span that drives the region outside the mask")
    return EditDirection(v_p / norm, float(t), omega, int(pick), sigma)


def one_step_edit(model: SubspaceModel, x_t, t: float, direction: EditDirection,
                  lam: float) -> np.ndarray:
    """Predicted clean point after moving ``x_t`` by ``lam * v_p``."""
    if direction.t != t:
        raise DomainError("direction was found at another timestep; use transfer_edit")
    return posterior_mean(model, np.asarray(x_t, dtype=float) + lam * direction.v_p, t)


def _eps(model):
    return lambda x, t: epsilon_predictor(model, x, t)


def _edit_pipeline(model, x0, t, v_p, lam, n_steps, grid):
    xt = integrate(x0, 0.0, t, n_steps, _eps(model), model.schedule, grid)
    return integrate(xt + lam * v_p, t, 0.0, n_steps, _eps(model), model.schedule, grid)


def apply_edit(model: SubspaceModel, x0, t: float, direction: EditDirection, lam: float,
               n_steps: int = 100, grid: str = "uniform") -> np.ndarray:
    """Invert ``x0`` to ``t``, step along the direction, denoise back to 0."""
    if direction.t != t:
        raise DomainError("direction was found at another timestep; use transfer_edit")
    return _edit_pipeline(model, x0, t, direction.v_p, lam, n_steps, grid)


def transfer_edit(model: SubspaceModel, direction: EditDirection, other_x0,
                  t_target: Optional[float] = None, lam: float = 1.0,
                  n_steps: int = 100, grid: str = "uniform") -> np.ndarray:
    """Reuse a discovered direction on another sample and/or timestep,
    without any rescaling."""
    t = direction.t if t_target is None else t_target
    return _edit_pipeline(model, other_x0, t, direction.v_p, lam, n_steps, grid)


def compose_directions(pairs: Iterable, d: Optional[int] = None):
    """``sum_i lam_i v_p_i`` for ``(lam_i, direction_i)`` pairs sharing one
    timestep.  Not renormalized.  An empty sequence gives zeros of length
    ``d`` (or the scalar 0 when ``d`` is not given)."""
    pairs = list(pairs)
    if not pairs:
        return np.zeros(d) if d is not None else 0.0
    ts = {float(direction.t) for _, direction in pairs}
    if len(ts) > 1:
        raise DomainError(f"cannot compose directions from different timesteps {sorted(ts)}")
    return sum(lam * direction.v_p for lam, direction in pairs)


def disentanglement_score(model: SubspaceModel, x_t, t: float, direction: EditDirection,
                          lam: float):
    """Norms of the predicted change inside and outside the direction's mask."""
    x_t = np.asarray(x_t, dtype=float)
    delta = posterior_mean(model, x_t + lam * direction.v_p, t) - posterior_mean(model, x_t, t)
    inside = direction.omega.apply(delta)
    return float(np.linalg.norm(inside)), float(np.linalg.norm(delta - inside))


def save_direction(direction: EditDirection, path) -> None:
    """Header ``d t pick sigma``; mask indices on line 2; then one component of
    ``v_p`` per line (17 significant digits)."""
    d = direction.v_p.size
    lines = [f"{d} {direction.t:.17g} {direction.pick} {direction.sigma:.17g}",
             " ".join(str(int(i)) for i in direction.omega.indices)]
    lines += [f"{v:.17g}" for v in direction.v_p]
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_direction(path) -> EditDirection:
    with open(path) as fh:
        lines = fh.read().split("\n")
    head = lines[0].split()
    d, t, pick, sigma = int(head[0]), float(head[1]), int(head[2]), float(head[3])
    omega = Mask(np.array([int(v) for v in lines[1].split()], dtype=int), d)
    v = np.array([float(v) for v in lines[2:2 + d]])
    if v.size != d:
        raise DomainError(f"{path}: expected {d} direction components, got {v.size}")
    return EditDirection(v, t, omega, pick, sigma)
