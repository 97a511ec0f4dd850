"""Deterministic DDIM integration in both directions.

One step from ``t`` to ``t_next`` with noise prediction ``e = eps_fn(x, t)``::

    x_next = sqrt(a') (x - sqrt(1 - a) e) / sqrt(a) + sqrt(1 - a') e

Denoising uses ``t_next < t``; inversion is the same update with
``t_next > t``.
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

from .errors import DomainError
from .schedule import COSINE, NoiseSchedule

__all__ = ["time_grid", "ddim_step", "integrate", "roundtrip_error", "GENERATION_START"]

# generation starts just below t = 1, where the PMP prefactor vanishes
GENERATION_START = 1.0 - 1e-3

EpsFn = Callable[[np.ndarray, float], np.ndarray]


def time_grid(t_from: float, t_to: float, n_steps: int, kind: str = "uniform") -> np.ndarray:
    """``n_steps + 1`` monotone timesteps from ``t_from`` to ``t_to``.

    ``kind="quadratic"`` spaces the points quadratically in distance from the
    smaller endpoint so they crowd towards small t.
    """
    if n_steps < 1:
        raise DomainError("n_steps must be at least 1")
    for t in (t_from, t_to):
        if not 0.0 <= t <= 1.0:
            raise DomainError(f"timestep {t} outside [0, 1]")
    u = np.linspace(0.0, 1.0, n_steps + 1)
    if kind == "uniform":
        return t_from + (t_to - t_from) * u
    if kind == "quadratic":
        lo, hi = min(t_from, t_to), max(t_from, t_to)
        pts = lo + (hi - lo) * u ** 2
        return pts if t_to > t_from else pts[::-1]
    raise DomainError(f"unknown grid kind {kind!r}")


def ddim_step(x, t: float, t_next: float, eps_fn: EpsFn,
              schedule: NoiseSchedule = COSINE) -> np.ndarray:
    """One deterministic DDIM update from ``t`` to ``t_next``.

    When inverting from exactly ``t = 0`` the predictor is evaluated at
    ``t_next`` instead, since the noise prediction is 0/0 at ``t = 0``.
    """
    if t == t_next:
        raise DomainError("t_next must differ from t")
    a = schedule.alpha(t)
    a_next = schedule.alpha(t_next)
    x = np.asarray(x, dtype=float)
    if a == 0.0:
        raise DomainError("cannot take a DDIM step from alpha_t = 0")
    if t == 0.0:
        e = eps_fn(x, t_next)
    else:
        e = eps_fn(x, t)
    x0_hat = (x - math.sqrt(1.0 - a) * e) / math.sqrt(a)
    return math.sqrt(a_next) * x0_hat + math.sqrt(1.0 - a_next) * e


def integrate(x, t_from: float, t_to: float, n_steps: int, eps_fn: EpsFn,
              schedule: NoiseSchedule = COSINE, grid: str = "uniform") -> np.ndarray:
    """Compose :func:`ddim_step` along a grid from ``t_from`` to ``t_to``.

    ``t_to < t_from`` is DDIM sampling, ``t_to > t_from`` is DDIM inversion,
    equal endpoints return ``x`` unchanged.
    """
    x = np.array(x, dtype=float)
    if t_from == t_to:
        if n_steps < 1:
            raise DomainError("n_steps must be at least 1")
        return x
    ts = time_grid(t_from, t_to, n_steps, grid)
    for t, t_next in zip(ts[:-1], ts[1:]):
        x = ddim_step(x, float(t), float(t_next), eps_fn, schedule)
    return x


def roundtrip_error(model, x0, t_mid: float, n_steps: int, grid: str = "uniform") -> float:
    """Relative error of inverting ``x0`` to ``t_mid`` and denoising back,
    using the model's analytic noise predictor."""
    from .pmp import epsilon_predictor

    x0 = np.asarray(x0, dtype=float)
    if t_mid == 0.0:
        return 0.0

    def eps(x, t):
        return epsilon_predictor(model, x, t)

    xt = integrate(x0, 0.0, t_mid, n_steps, eps, model.schedule, grid)
    back = integrate(xt, t_mid, 0.0, n_steps, eps, model.schedule, grid)
    return float(np.linalg.norm(back - x0) / np.linalg.norm(x0))
