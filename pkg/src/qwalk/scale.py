"""Quantum time scale and finite surrogates for infinitesimal/appreciable/limited."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import InvalidPolicyError, InvalidScaleError, InvalidValueError


@dataclass(frozen=True)
class QuantumScale:
    """Time grid ``{k * delta_t | 0 <= k <= n_q}`` on [0, 1]."""

    n_q: int

    def __post_init__(self):
        if isinstance(self.n_q, bool) or not isinstance(self.n_q, (int, np.integer)):
            raise InvalidScaleError(f"n_q must be an integer, got {self.n_q!r}")
        if self.n_q < 2:
            raise InvalidScaleError(f"n_q must be >= 2, got {self.n_q}")
        object.__setattr__(self, "n_q", int(self.n_q))

    @property
    def delta_t(self) -> float:
        return 1.0 / self.n_q

    @property
    def sqrt_dt(self) -> float:
        return math.sqrt(1.0 / self.n_q)

    def grid(self) -> np.ndarray:
        # k / n_q rather than k * delta_t: endpoints land exactly on 0 and 1
        return np.arange(self.n_q + 1, dtype=np.float64) / self.n_q

    def time(self, k: int) -> float:
        return k / self.n_q

    def index_of(self, t: float) -> int:
        """Nearest grid index to time ``t``."""
        k = int(round(t * self.n_q))
        if not 0 <= k <= self.n_q:
            raise InvalidScaleError(f"time {t!r} outside [0, 1]")
        return k


def make_scale(n_q: int) -> QuantumScale:
    return QuantumScale(n_q)


class Classification(str, Enum):
    INFINITESIMAL = "infinitesimal"
    SMALL_GAP = "small-gap"
    APPRECIABLE = "appreciable"
    LARGE_GAP = "large-gap"
    UNLIMITED = "unlimited"


# ordered from smallest to largest magnitude
CLASS_ORDER = (
    Classification.INFINITESIMAL,
    Classification.SMALL_GAP,
    Classification.APPRECIABLE,
    Classification.LARGE_GAP,
    Classification.UNLIMITED,
)


@dataclass(frozen=True)
class TolerancePolicy:
    infinitesimal_cut: float
    appreciable_low: float = 1e-2
    appreciable_high: float = 1e2
    limited_cut: float = 1e6

    def __post_init__(self):
        vals = (self.infinitesimal_cut, self.appreciable_low, self.appreciable_high, self.limited_cut)
        if not all(math.isfinite(v) and v > 0 for v in vals):
            raise InvalidPolicyError(f"policy bounds must be positive and finite: {vals}")
        if not (self.infinitesimal_cut < self.appreciable_low <= self.appreciable_high <= self.limited_cut):
            raise InvalidPolicyError(
                "require infinitesimal_cut < appreciable_low <= appreciable_high <= limited_cut, "
                f"got {vals}"
            )

    @classmethod
    def default(cls, scale: QuantumScale | int, **overrides) -> "TolerancePolicy":
        """Scale-tied default policy.

        The infinitesimal cut is ``n_q**-0.25``, capped at a tenth of the
        appreciable floor so the band ordering survives at desk-scale ``n_q``.
        """
        n_q = scale.n_q if isinstance(scale, QuantumScale) else int(scale)
        low = overrides.pop("appreciable_low", 1e-2)
        cut = overrides.pop("infinitesimal_cut", None)
        if cut is None:
            cut = min(n_q ** -0.25, low / 10.0)
        return cls(infinitesimal_cut=cut, appreciable_low=low, **overrides)

    def to_dict(self) -> dict:
        return {
            "infinitesimal_cut": self.infinitesimal_cut,
            "appreciable_low": self.appreciable_low,
            "appreciable_high": self.appreciable_high,
            "limited_cut": self.limited_cut,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TolerancePolicy":
        try:
            return cls(**{k: float(d[k]) for k in ("infinitesimal_cut", "appreciable_low",
                                                   "appreciable_high", "limited_cut")})
        except KeyError as exc:
            raise InvalidPolicyError(f"tolerance_policy missing key {exc.args[0]!r}") from None


def classify(value: float, policy: TolerancePolicy) -> Classification:
    if math.isnan(value):
        raise InvalidValueError("cannot classify NaN")
    return CLASS_ORDER[int(_class_index(np.abs(np.float64(value)), policy))]


def classify_array(values, policy: TolerancePolicy) -> np.ndarray:
    """Vectorized :func:`classify`; returns integer indices into ``CLASS_ORDER``."""
    values = np.asarray(values, dtype=np.float64)
    if np.isnan(values).any():
        raise InvalidValueError("cannot classify NaN")
    return _class_index(np.abs(values), policy)


def _class_index(a, policy: TolerancePolicy):
    # bands are closed on the side nearer the appreciable zone
    return (
        (a > policy.infinitesimal_cut).astype(np.int64)
        + (a >= policy.appreciable_low)
        + (a > policy.appreciable_high)
        + (a > policy.limited_cut)
    )


def class_counts(indices: np.ndarray) -> dict[str, int]:
    counts = np.bincount(np.asarray(indices).ravel(), minlength=len(CLASS_ORDER))
    return {c.value: int(n) for c, n in zip(CLASS_ORDER, counts)}
