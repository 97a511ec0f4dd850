"""Noise schedules t -> alpha_t on the unit interval.

Both schedules satisfy alpha(0) = 1 and alpha(1) = 0 exactly, and are
strictly decreasing in between.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import DomainError

__all__ = ["NoiseSchedule", "COSINE", "LINEAR", "alpha_at", "snr_ratio"]

_KINDS = {"cosine": "cosine", "linear": "linear-alpha", "linear-alpha": "linear-alpha"}


@dataclass(frozen=True)
class NoiseSchedule:
    """Signal-retention schedule.

    Parameters
    ----------
    kind : {"cosine", "linear-alpha"}
        ``cosine`` gives ``cos(pi t / 2)**2``, ``linear-alpha`` gives ``1 - t``.
        ``"linear"`` is accepted as an alias of ``"linear-alpha"``.
    """

    kind: str = "cosine"

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        object.__setattr__(self, "kind", _KINDS[self.kind])

    def alpha(self, t: float) -> float:
        t = _check_time(t)
        if t == 0.0:
            return 1.0
        if t == 1.0:
            return 0.0
        if self.kind == "cosine":
            return math.cos(0.5 * math.pi * t) ** 2
        return 1.0 - t

    def snr(self, t: float) -> float:
        """alpha_t / (1 - alpha_t); undefined at t = 0."""
        a = self.alpha(t)
        if a >= 1.0:
            raise DomainError("snr ratio is singular at t = 0 (alpha = 1)")
        return a / (1.0 - a)


COSINE = NoiseSchedule("cosine")
LINEAR = NoiseSchedule("linear-alpha")


def _check_time(t) -> float:
    t = float(t)
    if not (0.0 <= t <= 1.0):
        raise DomainError(f"timestep {t!r} outside [0, 1]")
    return t


def alpha_at(schedule: NoiseSchedule, t: float) -> float:
    return schedule.alpha(t)


def snr_ratio(schedule: NoiseSchedule, t: float) -> float:
    return schedule.snr(t)
