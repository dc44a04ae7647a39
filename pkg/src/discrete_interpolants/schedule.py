"""Masking schedules kappa(t), their derivatives, and schedule-derived quantities.

kappa(t) is the per-token probability of being revealed (unmasked) at time t,
with kappa(0) = 0 and kappa(1) = 1.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

KINDS = ("root", "linear", "cosine", "arccos", "quadratic", "cubic")

DEFAULT_EPSILON = 1e-3
DEFAULT_RATE_FLOOR = 1e-12


class ScheduleError(ValueError):
    pass


class SingularityError(ScheduleError):
    """Raised when a rate is requested where 1 - kappa(t) vanishes."""


def _check_t(t: float) -> float:
    t = float(t)
    if not (0.0 <= t <= 1.0) or math.isnan(t):
        raise ScheduleError(f"t must lie in [0, 1], got {t!r}")
    return t


@dataclass(frozen=True)
class Schedule:
    kind: str = "linear"
    cubic_a: float = 0.0
    cubic_b: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ScheduleError(f"unknown schedule kind {self.kind!r}; expected one of {KINDS}")
        if self.kind == "cubic":
            # kappa_dot is a quadratic in t, so a dense grid is a reliable monotonicity check
            grid = np.linspace(0.0, 1.0, 10_001)
            a, b = self.cubic_a, self.cubic_b
            slope = (-6 + 3 * a + 3 * b) * grid**2 + (6 - 4 * a - 2 * b) * grid + a
            if np.any(slope < -1e-12):
                raise ScheduleError(
                    f"cubic schedule with a={a}, b={b} is not monotone on [0, 1]"
                )

    @classmethod
    def parse(cls, text: str) -> "Schedule":
        """Parse ``"linear"`` or ``"cubic:a=<real>,b=<real>"``."""
        text = text.strip()
        if ":" not in text:
            return cls(text)
        kind, _, params = text.partition(":")
        if kind.strip() != "cubic":
            raise ScheduleError(f"only the cubic schedule takes parameters, got {text!r}")
        values = {"a": 0.0, "b": 0.0}
        for item in params.split(","):
            if not item.strip():
                continue
            key, eq, val = item.partition("=")
            key = key.strip()
            if not eq or key not in values:
                raise ScheduleError(f"bad cubic parameter {item!r} in {text!r}")
            try:
                values[key] = float(val)
            except ValueError as exc:
                raise ScheduleError(f"bad cubic parameter {item!r} in {text!r}") from exc
        return cls("cubic", values["a"], values["b"])

    def __str__(self) -> str:
        if self.kind == "cubic":
            return f"cubic:a={self.cubic_a!r},b={self.cubic_b!r}"
        return self.kind

    def kappa(self, t: float) -> float:
        return kappa(self, t)

    def kappa_dot(self, t: float) -> float:
        return kappa_dot(self, t)


def kappa(schedule: Schedule, t: float) -> float:
    t = _check_t(t)
    kind = schedule.kind
    if kind == "linear":
        return t
    if kind == "root":
        return math.sqrt(t)
    if kind == "cosine":
        return 1.0 - math.cos(math.pi * t / 2.0)
    if kind == "arccos":
        return 1.0 - 2.0 * math.acos(t) / math.pi
    if kind == "quadratic":
        return t * t
    a, b = schedule.cubic_a, schedule.cubic_b
    t2, t3 = t * t, t * t * t
    return -2.0 * t3 + 3.0 * t2 + b * (t3 - t2) + a * (t3 - 2.0 * t2 + t)


def kappa_dot(schedule: Schedule, t: float) -> float:
    t = _check_t(t)
    kind = schedule.kind
    if kind == "linear":
        return 1.0
    if kind == "root":
        if t == 0.0:
            raise SingularityError("root schedule derivative is singular at t=0")
        return 0.5 / math.sqrt(t)
    if kind == "cosine":
        return math.pi / 2.0 * math.sin(math.pi * t / 2.0)
    if kind == "arccos":
        if t == 1.0:
            raise SingularityError("arccos schedule derivative is singular at t=1")
        return 2.0 / (math.pi * math.sqrt(1.0 - t * t))
    if kind == "quadratic":
        return 2.0 * t
    a, b = schedule.cubic_a, schedule.cubic_b
    return (-6.0 + 3.0 * a + 3.0 * b) * t * t + (6.0 - 4.0 * a - 2.0 * b) * t + a


def unmask_rate(schedule: Schedule, t: float, floor: float = DEFAULT_RATE_FLOOR) -> float:
    """Hazard kappa_dot(t) / (1 - kappa(t)) at which a masked token is revealed."""
    remaining = 1.0 - kappa(schedule, t)
    if remaining < floor:
        raise SingularityError(
            f"1 - kappa({t!r}) = {remaining!r} is below the floor {floor!r}; "
            "clamp t to [eps, 1 - eps]"
        )
    return kappa_dot(schedule, t) / remaining


@dataclass(frozen=True)
class CouplingSpec:
    ratio: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.ratio <= 1.0:
            raise ScheduleError(f"coupling ratio must lie in [0, 1], got {self.ratio!r}")


def coupling_endpoints(x1, spec: CouplingSpec, rng: np.random.Generator, mask_id: int):
    """Return ``(x0_bar, x1_bar)`` for conditional coupling.

    ``round(ratio * L)`` positions, chosen uniformly without replacement, copy
    ``x1`` into the source; every other source position is ``mask_id``.
    """
    x1 = np.asarray(x1)
    if np.any(x1 == mask_id):
        raise ValueError("coupling endpoints need a clean x1 without mask tokens")
    length = x1.shape[-1]
    n_copy = int(round(spec.ratio * length))
    x0 = np.full_like(x1, mask_id)
    keep = rng.permutation(length)[:n_copy]
    x0[..., keep] = x1[..., keep]
    return x0, x1.copy()


@dataclass(frozen=True)
class SmoothingSpec:
    s: float = 0.0

    def __post_init__(self):
        if not self.s >= 0.0:
            raise ScheduleError(f"smoothing strength must be nonnegative, got {self.s!r}")


def smoothing_weights(spec: SmoothingSpec, schedule: Schedule, t: float):
    """Mixture weights ``(w_mask, w_uniform, w_data)`` of the smoothed interpolant.

    The uniform component gets ``s * k * (1 - k)``, clipped to ``1 - |2k - 1|``
    so that both the mask and the data weight stay nonnegative.
    """
    k = kappa(schedule, t)
    w_uniform = min(spec.s * k * (1.0 - k), 1.0 - abs(2.0 * k - 1.0))
    w_mask = max((1.0 - k) - w_uniform / 2.0, 0.0)
    w_data = max(k - w_uniform / 2.0, 0.0)
    return w_mask, w_uniform, w_data
