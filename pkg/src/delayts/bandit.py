"""Posterior updates, assignment plans, index policies and the stopping rule."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .core import ObservationSnapshot


class PolicyKind(str, enum.Enum):
    RANDOM = "random"
    NAIVE_TS = "naive-ts"
    DTS = "d-ts"
    DUCB = "d-ucb"
    FULL_BAYES = "full-bayes"


@dataclass(frozen=True)
class BetaPosterior:
    alpha: float
    beta: float

    def __post_init__(self):
        if not (self.alpha > 0 and self.beta > 0):
            raise ValueError(f"Beta parameters must be positive, got {self.alpha}, {self.beta}")

    @property
    def mean(self) -> float:
        return self.alpha / (self.alpha + self.beta)


@dataclass(frozen=True)
class AssignmentPlan:
    probs: np.ndarray
    step: int = 0

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=float)
        if p.ndim != 1 or len(p) == 0:
            raise ValueError("probs must be a non-empty vector")
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
            raise ValueError(f"probs must be nonnegative and sum to 1, got {p}")
        p.flags.writeable = False
        object.__setattr__(self, "probs", p)

    @classmethod
    def uniform(cls, k: int, step: int = 0) -> "AssignmentPlan":
        return cls(np.full(k, 1.0 / k), step)

    @classmethod
    def pick(cls, k: int, winner: int, step: int = 0) -> "AssignmentPlan":
        p = np.zeros(k)
        p[winner] = 1.0
        return cls(p, step)


@dataclass(frozen=True)
class StoppingRule:
    prob_threshold: float = 0.9
    dwell_steps: int = 24

    def __post_init__(self):
        if not 0 < self.prob_threshold < 1:
            raise ValueError("prob_threshold must lie in (0, 1)")
        if self.dwell_steps < 1:
            raise ValueError("dwell_steps must be >= 1")


def update_beta_dts(n_convert: int, theta_star: float) -> BetaPosterior:
    """Beta posterior whose pseudo-trials are the delay-corrected sample size."""
    if n_convert < 0:
        raise ValueError("n_convert must be >= 0")
    if not 0 < theta_star <= 1:
        raise ValueError(f"theta_star must lie in (0, 1], got {theta_star}")
    return BetaPosterior(
        1.0 + n_convert, max(1.0 - n_convert + n_convert / theta_star, 1.0)
    )


def update_beta_naive(n_convert: int, n_clicks: int) -> BetaPosterior:
    if not 0 <= n_convert <= n_clicks:
        raise ValueError("need 0 <= n_convert <= n_clicks")
    return BetaPosterior(1.0 + n_convert, 1.0 + n_clicks - n_convert)


def group_streams(seed, k: int) -> list[np.random.Generator]:
    """Independent per-group generators derived from ``seed``.

    ``seed`` may be an int, a sequence of ints, or a SeedSequence.
    """
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return [np.random.Generator(np.random.PCG64(c)) for c in ss.spawn(k)]


def _beta_draws(rng, a, b, n):
    # X/(X+Y) with gamma X, Y is exactly Beta(a, b); it is what numpy does
    # internally once a or b exceeds 1, minus a slow path at Beta(1, 1)
    if a >= 1 and b >= 1:
        x = rng.standard_gamma(a, n)
        y = rng.standard_gamma(b, n)
        return x / (x + y)
    return rng.beta(a, b, n)


def assignment_probs_mc(
    posteriors: Sequence[BetaPosterior],
    n_samples: int = 10_000,
    rng_seed=0,
    streams: Sequence[np.random.Generator] | None = None,
    step: int = 0,
) -> AssignmentPlan:
    """Share of Monte-Carlo draws in which each group's Beta sample is largest.

    Group ``k`` draws from ``streams[k]`` (derived from ``rng_seed`` when not
    given), so permuting posteriors together with their streams permutes the
    result exactly.  Ties split the sample uniformly among the tied groups.
    """
    k = len(posteriors)
    if k < 2:
        raise ValueError("need at least two groups")
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if streams is None:
        streams = group_streams(rng_seed, k)
    draws = np.empty((k, n_samples))
    for i, (post, rng) in enumerate(zip(posteriors, streams)):
        draws[i] = _beta_draws(rng, post.alpha, post.beta, n_samples)
    top = draws[0].copy()
    for row in draws[1:]:
        np.maximum(top, row, out=top)
    is_top = draws == top
    counts = np.count_nonzero(is_top, axis=1).astype(float)
    if counts.sum() > n_samples:
        counts = (is_top / is_top.sum(axis=0)).sum(axis=1)
    return AssignmentPlan(counts / n_samples, step)


def ducb_scores(estimates, effective_n, t: int) -> np.ndarray:
    """UCB1 indices using the delay-corrected sample size.

    Groups with no effective samples get ``+inf`` so they are tried first.
    """
    est = np.asarray(estimates, dtype=float)
    eff = np.asarray(effective_n, dtype=float)
    bonus_num = 2.0 * math.log(max(t, 1))
    scores = np.full(len(est), np.inf)
    ok = eff > 0
    scores[ok] = est[ok] + np.sqrt(bonus_num / eff[ok])
    return scores


def ducb_plan(estimates, effective_n, t: int, step: int = 0) -> AssignmentPlan:
    scores = ducb_scores(estimates, effective_n, t)
    return AssignmentPlan.pick(len(scores), int(np.argmax(scores)), step)


@dataclass(frozen=True)
class GridConfig:
    n_theta: int = 100
    n_lambda: int = 100
    lam_min: float = 1e-4
    lam_max: float = 1.0
    theta_prior: tuple[float, float] = (1.0, 1.0)
    lam_prior: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        if self.n_theta < 1 or self.n_lambda < 1:
            raise ValueError("grid sizes must be >= 1")
        if not 0 < self.lam_min <= self.lam_max:
            raise ValueError("need 0 < lam_min <= lam_max")

    def theta_grid(self) -> np.ndarray:
        return (np.arange(self.n_theta) + 0.5) / self.n_theta

    def lambda_grid(self) -> np.ndarray:
        if self.n_lambda == 1:
            return np.array([math.sqrt(self.lam_min * self.lam_max)])
        return np.geomspace(self.lam_min, self.lam_max, self.n_lambda)


@dataclass(frozen=True)
class GridPosterior:
    theta: np.ndarray
    lam: np.ndarray
    mass: np.ndarray  # shape (n_theta, n_lambda), sums to 1

    @property
    def theta_marginal(self) -> np.ndarray:
        return self.mass.sum(axis=1)

    @property
    def theta_mean(self) -> float:
        return float(np.dot(self.theta, self.theta_marginal))

    def theta_quantile(self, q: float) -> float:
        cdf = np.cumsum(self.theta_marginal)
        i = int(np.searchsorted(cdf, q * cdf[-1], side="left"))
        return float(self.theta[min(i, len(self.theta) - 1)])


def _log_beta_density(x, a, b):
    return (a - 1.0) * np.log(x) + (b - 1.0) * np.log1p(-x)


def grid_posterior(snapshot: ObservationSnapshot, grid: GridConfig = GridConfig()) -> GridPosterior:
    """Numerical posterior over (theta, lam) for one group's censored data.

    The lam prior is a Beta density on ``lam / lam_max``; because the lam grid
    is log-spaced each node carries prior mass proportional to its cell width
    (``lam`` itself).  Normalisation happens in log space.
    """
    th = grid.theta_grid()
    lg = grid.lambda_grid()
    logp = _log_beta_density(th, *grid.theta_prior)[:, None]
    x = np.clip(lg / grid.lam_max, 1e-300, 1.0 - 1e-12)
    logp = logp + (_log_beta_density(x, *grid.lam_prior) + np.log(lg))[None, :]

    if snapshot.n_total:
        nc = snapshot.n_convert
        if nc:
            logp = logp + nc * np.log(th)[:, None]
            logp = logp + (nc * np.log(lg) - lg * snapshot.converted_delay_sum)[None, :]
        mask = snapshot.unconverted > 0
        if mask.any():
            e = snapshot.elapsed[mask]
            u = snapshot.unconverted[mask].astype(float)
            cens = np.empty((len(th), len(lg)))
            for j, lam in enumerate(lg):
                matured = -np.expm1(-lam * e)
                cens[:, j] = np.log1p(-th[:, None] * matured[None, :]) @ u
            logp = logp + cens
    logp = np.where(np.isfinite(logp), logp, -np.inf)
    norm = logsumexp(logp)
    if not np.isfinite(norm):
        mass = np.full(logp.shape, 1.0 / logp.size)
    else:
        mass = np.exp(logp - norm)
    return GridPosterior(th, lg, mass)


def full_bayes_grid(
    snapshots: Sequence[ObservationSnapshot],
    grid: GridConfig = GridConfig(),
    t: int | None = None,
) -> tuple[list[GridPosterior], AssignmentPlan]:
    """Grid posteriors for each group plus a Bayes-UCB pick.

    The pick is the group with the highest posterior ``1 - 1/t`` quantile of
    theta (``t`` floored at 2 so the level is never zero).
    """
    posts = [grid_posterior(s, grid) for s in snapshots]
    if t is None:
        t = max(s.t for s in snapshots)
    level = 1.0 - 1.0 / max(t, 2)
    q = [p.theta_quantile(level) for p in posts]
    return posts, AssignmentPlan.pick(len(posts), int(np.argmax(q)), t)


def check_stopping(plan_history: Sequence, rule: StoppingRule) -> int | None:
    """Group holding ``prob_threshold`` for the last ``dwell_steps`` plans, if any."""
    if len(plan_history) < rule.dwell_steps:
        return None
    recent = np.array(
        [getattr(p, "probs", p) for p in plan_history[-rule.dwell_steps :]], dtype=float
    )
    held = np.all(recent >= rule.prob_threshold, axis=0)
    winners = np.flatnonzero(held)
    return int(winners[0]) if len(winners) else None


def with_floor(plan: AssignmentPlan, p_min: float) -> AssignmentPlan:
    """Mix a minimum exploration share into a plan."""
    k = len(plan.probs)
    if p_min <= 0:
        return plan
    if p_min * k > 1:
        raise ValueError("p_min * K must not exceed 1")
    return AssignmentPlan(p_min + (1.0 - k * p_min) * plan.probs, plan.step)


__all__ = [
    "AssignmentPlan",
    "BetaPosterior",
    "GridConfig",
    "GridPosterior",
    "PolicyKind",
    "StoppingRule",
    "assignment_probs_mc",
    "check_stopping",
    "ducb_plan",
    "ducb_scores",
    "full_bayes_grid",
    "grid_posterior",
    "group_streams",
    "update_beta_dts",
    "update_beta_naive",
    "with_floor",
]
