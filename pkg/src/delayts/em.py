"""Delay-corrected EM estimation of eventual conversion rate and delay rate.

Every routine works on batch-aggregated statistics: unconverted clicks of
the same batch share one elapsed time and therefore one posterior weight,
so a cycle costs O(#batches) no matter how many clicks were logged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from .core import ObservationSnapshot
from .delays import EXPONENTIAL, DelayModel

WEIGHT_EPS = 1e-12

THETA_UPDATE_MODES = ("delay_corrected", "pure_em")


class InconsistentSnapshotError(ValueError):
    pass


@dataclass(frozen=True)
class GroupEstimate:
    theta: float
    lam: float
    n_em_cycles: int = 0
    converged: bool = True
    flags: frozenset = field(default_factory=frozenset)


# initial values used before a group has produced any conversion
DEFAULT_PRIOR = GroupEstimate(theta=0.1, lam=1.0 / 105)


@dataclass(frozen=True)
class EmConfig:
    max_cycles: int = 10
    rel_tol: float = 1e-6
    theta_update_mode: str = "delay_corrected"
    theta_min: float = 1e-6
    lam_min: float = 1e-9
    lam_max: float = 1e9

    def __post_init__(self):
        if self.max_cycles < 1:
            raise ValueError("max_cycles must be >= 1")
        if self.rel_tol < 0:
            raise ValueError("rel_tol must be >= 0")
        if self.theta_update_mode not in THETA_UPDATE_MODES:
            raise ValueError(
                f"theta_update_mode must be one of {THETA_UPDATE_MODES}, "
                f"got {self.theta_update_mode!r}"
            )
        if not 0 < self.theta_min < 1:
            raise ValueError("theta_min must lie in (0, 1)")
        if not 0 < self.lam_min < self.lam_max:
            raise ValueError("need 0 < lam_min < lam_max")


class ThetaUpdate(NamedTuple):
    theta: float
    raw: float
    flag: str | None


def e_step_weight(theta, survival, converted=False):
    """Posterior probability that a click eventually converts.

    Converted clicks get weight 1.  For unconverted ones the weight is
    ``S*theta / (1 - theta + S*theta)`` with ``S`` the delay survival at the
    click's elapsed time; ``theta`` is clamped into ``[1e-12, 1 - 1e-12]``.
    Vectorised over ``survival`` and ``converted``.
    """
    survival = np.asarray(survival, dtype=float)
    th = min(max(float(theta), WEIGHT_EPS), 1.0 - WEIGHT_EPS)
    num = th * survival
    w = num / (1.0 - th + num)
    w = np.where(converted, 1.0, w)
    return float(w) if w.ndim == 0 else w


def m_step_lambda(
    snapshot: ObservationSnapshot,
    unconverted_weights,
    prior_lam: float,
    model: DelayModel = EXPONENTIAL,
) -> float:
    """Closed-form delay-parameter update.

    ``unconverted_weights`` is aligned with ``snapshot.batch_steps``.  With no
    conversions the prior is returned unchanged.
    """
    if snapshot.n_convert == 0:
        return prior_lam
    weighted = np.asarray(unconverted_weights, dtype=float) * snapshot.unconverted
    lam = model.m_step(
        snapshot.n_convert,
        snapshot.converted_delay_sum,
        snapshot.converted_delays,
        snapshot.elapsed,
        weighted,
    )
    if math.isnan(lam):
        raise InconsistentSnapshotError(
            f"group {snapshot.group} at t={snapshot.t}: {snapshot.n_convert} conversions "
            "but zero weighted exposure"
        )
    return lam


def _corrected_theta(n_convert, clicks, matured, prior_theta, theta_min) -> ThetaUpdate:
    denom = float(np.dot(clicks, matured))
    if denom <= 0.0:
        return ThetaUpdate(prior_theta, math.nan, "no_information")
    raw = n_convert / denom
    if raw > 1.0:
        return ThetaUpdate(1.0, raw, "clamped")
    if raw < theta_min:
        return ThetaUpdate(theta_min, raw, "clamped")
    return ThetaUpdate(raw, raw, None)


def delay_corrected_theta(
    snapshot: ObservationSnapshot,
    lam: float | None = None,
    prior_theta: float = DEFAULT_PRIOR.theta,
    model: DelayModel = EXPONENTIAL,
    cdf=None,
    theta_min: float = 1e-6,
) -> ThetaUpdate:
    """Conversions divided by the delay-discounted click count.

    Pass ``cdf`` to plug in a known delay law instead of ``model``/``lam``.
    """
    if cdf is None:
        matured = model.cdf(snapshot.elapsed, lam)
    else:
        matured = cdf(snapshot.elapsed)
    return _corrected_theta(
        snapshot.n_convert, snapshot.clicks, matured, prior_theta, theta_min
    )


def pure_em_theta(weights, n_total: int) -> float:
    if n_total <= 0:
        raise ValueError("n_total must be positive")
    return float(np.sum(weights)) / n_total


def effective_sample_size(
    snapshot: ObservationSnapshot, lam: float, model: DelayModel = EXPONENTIAL
) -> float:
    """Clicks weighted by the probability their conversion would have shown up."""
    if snapshot.n_total == 0:
        return 0.0
    return float(np.dot(snapshot.clicks, model.cdf(snapshot.elapsed, lam)))


def censored_log_likelihood(
    snapshot: ObservationSnapshot,
    theta: float,
    lam: float,
    model: DelayModel = EXPONENTIAL,
) -> float:
    """Observed-data log-likelihood of a censored snapshot."""
    if snapshot.n_total == 0:
        return 0.0
    theta = min(max(float(theta), WEIGHT_EPS), 1.0)
    ll = 0.0
    if snapshot.n_convert:
        if hasattr(model, "loglik_converted"):
            ll_delay = model.loglik_converted(
                snapshot.n_convert,
                snapshot.converted_delay_sum,
                snapshot.converted_delays,
                lam,
            )
        else:
            ll_delay = float(np.sum(model.logpdf(snapshot.converted_delays, lam)))
        ll += snapshot.n_convert * math.log(theta) + ll_delay
    mask = snapshot.unconverted > 0
    if mask.any():
        matured = model.cdf(snapshot.elapsed[mask], lam)
        ll += float(np.dot(snapshot.unconverted[mask], np.log1p(-theta * matured)))
    return ll


def run_em(
    snapshot: ObservationSnapshot,
    prior: GroupEstimate = DEFAULT_PRIOR,
    config: EmConfig = EmConfig(),
    model: DelayModel = EXPONENTIAL,
    history: list | None = None,
) -> GroupEstimate:
    """Warm-started EM cycles for one group at one observation step.

    Each cycle computes batch weights from the current (theta, lam), updates
    lam in closed form, then updates theta either with the delay-corrected
    ratio (default) or the exact EM maximiser.  Stops early once both
    parameters move by less than ``rel_tol`` relative.  If ``history`` is a
    list, ``(theta, lam)`` after every cycle is appended to it.
    """
    if snapshot.n_total == 0 or snapshot.n_convert == 0:
        return replace(prior, n_em_cycles=0, converged=True, flags=frozenset({"cold_start"}))

    n_convert = snapshot.n_convert
    n_total = snapshot.n_total
    delay_sum = snapshot.converted_delay_sum
    delays = snapshot.converted_delays
    elapsed = snapshot.elapsed.astype(float)
    clicks = snapshot.clicks.astype(float)
    # batches with nothing pending carry zero weight, so one array serves both steps
    pending = snapshot.unconverted.astype(float)
    corrected = config.theta_update_mode == "delay_corrected"
    lam_min, lam_max, theta_min = config.lam_min, config.lam_max, config.theta_min
    rel_tol = config.rel_tol

    theta, lam = float(prior.theta), float(prior.lam)
    _, survival = model.cdf_sf(elapsed, lam)
    flags: set[str] = set()
    converged = False
    cycles = 0
    for cycles in range(1, config.max_cycles + 1):
        th = min(max(theta, WEIGHT_EPS), 1.0 - WEIGHT_EPS)
        num = th * survival
        wc = num / ((1.0 - th) + num) * pending
        new_lam = model.m_step(n_convert, delay_sum, delays, elapsed, wc)
        if math.isnan(new_lam) or new_lam > lam_max:
            new_lam = lam_max
            flags.add("lambda_clamped")
        elif new_lam < lam_min:
            new_lam = lam_min
            flags.add("lambda_clamped")
        matured, survival = model.cdf_sf(elapsed, new_lam)

        if corrected:
            upd = _corrected_theta(n_convert, clicks, matured, theta, theta_min)
            new_theta = upd.theta
            if upd.flag:
                flags.add("theta_" + upd.flag)
        else:
            new_theta = (n_convert + float(wc.sum())) / n_total
            if new_theta < theta_min:
                new_theta = theta_min
                flags.add("theta_clamped")

        converged = abs(new_theta - theta) <= rel_tol * abs(theta) and abs(
            new_lam - lam
        ) <= rel_tol * abs(lam)
        theta, lam = new_theta, new_lam
        if history is not None:
            history.append((theta, lam))
        if converged:
            break
    return GroupEstimate(theta, lam, cycles, converged, frozenset(flags))
