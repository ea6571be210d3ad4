"""Delay distributions.

Two roles live here.  ``DelayModel`` is a parametric family the EM
estimator can fit (only the exponential family is fitted).  ``DelayLaw``
is a fully specified ground-truth law the simulator draws from.
"""

from __future__ import annotations

import math
from abc import ABC, abstractmethod
from dataclasses import dataclass

import numpy as np


class DelayModel(ABC):
    """A delay family with a single positive parameter."""

    name: str

    @abstractmethod
    def cdf(self, e, param: float): ...

    def sf(self, e, param: float):
        return 1.0 - self.cdf(e, param)

    def cdf_sf(self, e, param: float):
        """``(cdf, survival)`` in one pass."""
        f = self.cdf(e, param)
        return f, 1.0 - f

    @abstractmethod
    def logpdf(self, d, param: float): ...

    @abstractmethod
    def m_step(
        self,
        n_convert: int,
        converted_delay_sum: float,
        converted_delays: np.ndarray,
        elapsed: np.ndarray,
        weighted_counts: np.ndarray,
    ) -> float:
        """Maximise the weighted complete-data delay likelihood.

        ``weighted_counts[j]`` is the expected number of eventual converters
        among unconverted clicks censored at ``elapsed[j]``.  Returns ``nan``
        when the weighted exposure is zero.
        """


class ExponentialModel(DelayModel):
    name = "exponential"

    def cdf(self, e, param):
        return -np.expm1(-param * np.asarray(e, dtype=float))

    def sf(self, e, param):
        return np.exp(-param * np.asarray(e, dtype=float))

    def cdf_sf(self, e, param):
        em1 = np.expm1(-param * np.asarray(e, dtype=float))
        return -em1, 1.0 + em1

    def logpdf(self, d, param):
        return math.log(param) - param * np.asarray(d, dtype=float)

    def loglik_converted(self, n_convert, converted_delay_sum, converted_delays, param):
        # closed form so aggregated statistics suffice
        return n_convert * math.log(param) - param * converted_delay_sum

    def m_step(self, n_convert, converted_delay_sum, converted_delays, elapsed, weighted_counts):
        exposure = converted_delay_sum + float(np.dot(weighted_counts, elapsed))
        if exposure <= 0.0:
            return math.nan
        return n_convert / exposure


EXPONENTIAL = ExponentialModel()


class DelayLaw(ABC):
    """Ground-truth delay law used to generate data."""

    @abstractmethod
    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray: ...

    @abstractmethod
    def cdf(self, e): ...

    @property
    @abstractmethod
    def mean(self) -> float: ...

    @abstractmethod
    def to_dict(self) -> dict: ...


@dataclass(frozen=True)
class Exponential(DelayLaw):
    rate: float

    def __post_init__(self):
        if not self.rate > 0:
            raise ValueError("rate must be positive")

    def sample(self, rng, size):
        return rng.exponential(1.0 / self.rate, size)

    def cdf(self, e):
        return -np.expm1(-self.rate * np.asarray(e, dtype=float))

    @property
    def mean(self):
        return 1.0 / self.rate

    def to_dict(self):
        return {"law": "exponential", "rate": self.rate}


@dataclass(frozen=True)
class Weibull(DelayLaw):
    shape: float
    scale: float

    def __post_init__(self):
        if not (self.shape > 0 and self.scale > 0):
            raise ValueError("shape and scale must be positive")

    def sample(self, rng, size):
        return self.scale * rng.weibull(self.shape, size)

    def cdf(self, e):
        e = np.maximum(np.asarray(e, dtype=float), 0.0)
        return -np.expm1(-((e / self.scale) ** self.shape))

    @property
    def mean(self):
        return self.scale * math.gamma(1.0 + 1.0 / self.shape)

    def to_dict(self):
        return {"law": "weibull", "shape": self.shape, "scale": self.scale}


@dataclass(frozen=True)
class ExponentialMixture(DelayLaw):
    """Finite mixture of exponentials, parameterised by component means."""

    weights: tuple[float, ...]
    means: tuple[float, ...]

    def __post_init__(self):
        if len(self.weights) != len(self.means) or not self.weights:
            raise ValueError("weights and means must be non-empty and aligned")
        if any(w < 0 for w in self.weights) or not math.isclose(sum(self.weights), 1.0):
            raise ValueError("mixture weights must be nonnegative and sum to 1")
        if any(m <= 0 for m in self.means):
            raise ValueError("component means must be positive")

    @classmethod
    def with_mean(cls, mean: float, fast_weight: float = 0.25, fast_mean: float = 0.05):
        """Two components: a quick-converting share and a slow remainder."""
        slow = (mean - fast_weight * fast_mean) / (1.0 - fast_weight)
        if slow <= 0:
            raise ValueError("fast component leaves no room for the target mean")
        return cls((fast_weight, 1.0 - fast_weight), (fast_mean, slow))

    def sample(self, rng, size):
        comp = rng.choice(len(self.weights), size=size, p=np.asarray(self.weights))
        return rng.exponential(1.0, size) * np.asarray(self.means)[comp]

    def cdf(self, e):
        e = np.asarray(e, dtype=float)
        return sum(w * -np.expm1(-e / m) for w, m in zip(self.weights, self.means))

    @property
    def mean(self):
        return float(sum(w * m for w, m in zip(self.weights, self.means)))

    def to_dict(self):
        return {"law": "mixture", "weights": list(self.weights), "means": list(self.means)}


@dataclass(frozen=True)
class NoDelay(DelayLaw):
    """Conversions happen at the click instant."""

    def sample(self, rng, size):
        return np.zeros(size)

    def cdf(self, e):
        return np.ones_like(np.asarray(e, dtype=float))

    @property
    def mean(self):
        return 0.0

    def to_dict(self):
        return {"law": "none"}


_LAW_FIELDS = {
    "exponential": ("rate",),
    "weibull": ("shape", "scale"),
    "mixture": ("weights", "means"),
    "none": (),
}


def law_from_dict(d: dict) -> DelayLaw:
    kind = d.get("law")
    if kind not in _LAW_FIELDS:
        raise ValueError(f"unknown delay law {kind!r}")
    fields = _LAW_FIELDS[kind]
    extra = set(d) - set(fields) - {"law"}
    if extra:
        raise ValueError(f"unknown delay law field(s): {', '.join(sorted(extra))}")
    missing = [f for f in fields if f not in d]
    if missing:
        raise ValueError(f"delay law {kind!r} is missing {missing[0]!r}")
    if kind == "exponential":
        return Exponential(float(d["rate"]))
    if kind == "weibull":
        return Weibull(float(d["shape"]), float(d["scale"]))
    if kind == "mixture":
        return ExponentialMixture(
            tuple(float(w) for w in d["weights"]), tuple(float(m) for m in d["means"])
        )
    return NoDelay()
