"""Stateful bandit policies that turn per-group snapshots into a plan.

A policy is called once per observation step with one snapshot per group.
Stateful pieces (EM warm starts) live on the policy object; call
``reset()`` between independent runs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .bandit import (
    AssignmentPlan,
    GridConfig,
    PolicyKind,
    assignment_probs_mc,
    ducb_plan,
    full_bayes_grid,
    group_streams,
    update_beta_dts,
    update_beta_naive,
    with_floor,
)
from .core import ObservationSnapshot
from .em import DEFAULT_PRIOR, EmConfig, GroupEstimate, effective_sample_size, run_em

# domain tag mixed into per-step seeds so MC draws never share a stream with
# the environment
MC_STREAM = 1


def mc_seed(seed: int, t: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, MC_STREAM, t])


@dataclass
class Decision:
    plan: AssignmentPlan
    theta: np.ndarray
    lam: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray


def _nan(k):
    return np.full(k, np.nan)


class Policy:
    kind: PolicyKind | None = None
    uses_data = True

    def __init__(self, n_groups: int, p_min: float = 0.0):
        self.n_groups = n_groups
        self.p_min = p_min

    def reset(self) -> None:
        pass

    def initial_plan(self) -> AssignmentPlan:
        return AssignmentPlan.uniform(self.n_groups, 0)

    def update(self, snapshots: Sequence[ObservationSnapshot] | None, t: int, seed: int = 0) -> Decision:
        raise NotImplementedError

    def _floor(self, plan: AssignmentPlan) -> AssignmentPlan:
        return with_floor(plan, self.p_min) if self.p_min > 0 else plan


class RandomPolicy(Policy):
    kind = PolicyKind.RANDOM
    uses_data = False

    def update(self, snapshots, t, seed=0):
        k = self.n_groups
        return Decision(AssignmentPlan.uniform(k, t), _nan(k), _nan(k), _nan(k), _nan(k))


class NaiveTSPolicy(Policy):
    """Thompson sampling on observed conversions, treating pending clicks as failures."""

    kind = PolicyKind.NAIVE_TS

    def __init__(self, n_groups, mc_samples: int = 10_000, p_min: float = 0.0):
        super().__init__(n_groups, p_min)
        self.mc_samples = mc_samples

    def update(self, snapshots, t, seed=0):
        posts = [update_beta_naive(s.n_convert, s.n_total) for s in snapshots]
        plan = assignment_probs_mc(
            posts, self.mc_samples, streams=group_streams(mc_seed(seed, t), len(posts)), step=t
        )
        return Decision(
            self._floor(plan),
            np.array([s.naive_cvr for s in snapshots]),
            _nan(len(posts)),
            np.array([p.alpha for p in posts]),
            np.array([p.beta for p in posts]),
        )


class _EmPolicy(Policy):
    def __init__(self, n_groups, em_config: EmConfig = EmConfig(), prior: GroupEstimate = DEFAULT_PRIOR, p_min=0.0):
        super().__init__(n_groups, p_min)
        self.em_config = em_config
        self.prior = prior
        self.reset()

    def reset(self):
        self.estimates = [self.prior] * self.n_groups

    def _estimate(self, snapshots):
        self.estimates = [
            run_em(s, prior, self.em_config) for s, prior in zip(snapshots, self.estimates)
        ]
        return self.estimates


class DTSPolicy(_EmPolicy):
    """Thompson sampling over delay-corrected EM estimates."""

    kind = PolicyKind.DTS

    def __init__(self, n_groups, em_config=EmConfig(), mc_samples: int = 10_000, prior=DEFAULT_PRIOR, p_min=0.0):
        super().__init__(n_groups, em_config, prior, p_min)
        self.mc_samples = mc_samples

    def update(self, snapshots, t, seed=0):
        ests = self._estimate(snapshots)
        posts = [update_beta_dts(s.n_convert, e.theta) for s, e in zip(snapshots, ests)]
        plan = assignment_probs_mc(
            posts, self.mc_samples, streams=group_streams(mc_seed(seed, t), len(posts)), step=t
        )
        return Decision(
            self._floor(plan),
            np.array([e.theta for e in ests]),
            np.array([e.lam for e in ests]),
            np.array([p.alpha for p in posts]),
            np.array([p.beta for p in posts]),
        )


class DUCBPolicy(_EmPolicy):
    """UCB1 with the EM delay-corrected sample size in the exploration bonus."""

    kind = PolicyKind.DUCB

    def update(self, snapshots, t, seed=0):
        ests = self._estimate(snapshots)
        eff = [effective_sample_size(s, e.lam) for s, e in zip(snapshots, ests)]
        theta = np.array([e.theta for e in ests])
        plan = ducb_plan(theta, eff, t, step=t)
        k = self.n_groups
        return Decision(self._floor(plan), theta, np.array([e.lam for e in ests]), _nan(k), _nan(k))


class FullBayesPolicy(Policy):
    """Grid posterior over (theta, lam) per group with a Bayes-UCB pick."""

    kind = PolicyKind.FULL_BAYES

    def __init__(self, n_groups, grid: GridConfig = GridConfig(), p_min=0.0):
        super().__init__(n_groups, p_min)
        self.grid = grid

    def update(self, snapshots, t, seed=0):
        posts, plan = full_bayes_grid(snapshots, self.grid, t)
        theta = np.array([p.theta_mean for p in posts])
        lam = np.array([float(np.dot(p.lam, p.mass.sum(axis=0))) for p in posts])
        k = self.n_groups
        return Decision(self._floor(plan), theta, lam, _nan(k), _nan(k))


class FixedArmPolicy(Policy):
    """Always routes all traffic to one group; a reference for regret checks."""

    uses_data = False

    def __init__(self, n_groups, arm: int):
        super().__init__(n_groups)
        if not 0 <= arm < n_groups:
            raise ValueError("arm out of range")
        self.arm = arm

    def initial_plan(self):
        return AssignmentPlan.pick(self.n_groups, self.arm, 0)

    def update(self, snapshots, t, seed=0):
        k = self.n_groups
        return Decision(AssignmentPlan.pick(k, self.arm, t), _nan(k), _nan(k), _nan(k), _nan(k))


def make_policy(
    kind: PolicyKind | str,
    n_groups: int,
    em_config: EmConfig = EmConfig(),
    mc_samples: int = 10_000,
    grid: GridConfig = GridConfig(),
    p_min: float = 0.0,
) -> Policy:
    kind = PolicyKind(kind)
    if kind is PolicyKind.RANDOM:
        return RandomPolicy(n_groups, p_min)
    if kind is PolicyKind.NAIVE_TS:
        return NaiveTSPolicy(n_groups, mc_samples, p_min)
    if kind is PolicyKind.DTS:
        return DTSPolicy(n_groups, em_config, mc_samples, p_min=p_min)
    if kind is PolicyKind.DUCB:
        return DUCBPolicy(n_groups, em_config, p_min=p_min)
    return FullBayesPolicy(n_groups, grid, p_min)
