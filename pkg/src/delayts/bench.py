"""Timing one assignment update per policy on a fixed workload."""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass

import numpy as np

from .bandit import GridConfig, PolicyKind
from .core import GroupStats
from .em import EmConfig
from .policies import make_policy
from .simulator import Scenario, vector_batch_of

BENCH_COLUMNS = ["policy", "repetitions", "min", "mean", "median", "max"]


@dataclass(frozen=True)
class BenchRow:
    policy: str
    times: tuple[float, ...]

    @property
    def mean(self) -> float:
        return statistics.fmean(self.times)

    def as_row(self) -> list:
        t = self.times
        return [self.policy, len(t), min(t), self.mean, statistics.median(t), max(t)]


def bench_workload(scenario: Scenario, steps: int, seed: int = 0) -> list[GroupStats]:
    """Per-group statistics for ``steps`` batches of uniformly routed clicks.

    Built directly from per-click arrays so every policy sees the identical
    data at observation step ``steps``.
    """
    rng = np.random.default_rng(seed)
    k, n, dt = scenario.n_groups, scenario.clicks_per_step, scenario.step_duration
    batch = np.repeat(np.arange(steps), n)
    group = rng.integers(0, k, size=len(batch))
    theta = np.asarray(scenario.theta_true)
    conv = rng.random(len(batch)) < theta[group]
    delay = np.full(len(batch), np.inf)
    for g in range(k):
        sel = conv & (group == g)
        delay[sel] = scenario.delays[g].sample(rng, int(sel.sum()))
    click_ts = batch * dt
    conv_ts = click_ts + delay
    seen = conv & (vector_batch_of(np.where(conv, conv_ts, 0.0), dt) < steps)

    stats = []
    for g in range(k):
        st = GroupStats(g, dt, capacity=steps + 1)
        counts = np.bincount(batch[group == g], minlength=steps)
        for s in np.flatnonzero(counts):
            st.add_clicks(int(s), int(counts[s]))
        sel = seen & (group == g)
        st.add_conversions(batch[sel], conv_ts[sel] - click_ts[sel])
        stats.append(st)
    return stats


def bench_policies(
    scenario: Scenario,
    repetitions: int = 50,
    steps: int | None = None,
    seed: int = 0,
    policies=tuple(PolicyKind),
    em_config: EmConfig = EmConfig(),
    mc_samples: int = 10_000,
    grid: GridConfig = GridConfig(),
) -> list[BenchRow]:
    """Wall time of snapshotting the workload and producing one plan.

    Each repetition starts the policy from its cold prior, so the EM policies
    pay for a full set of cycles every time.
    """
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    t = steps or scenario.horizon
    stats = bench_workload(scenario, t, seed)
    rows = []
    for kind in policies:
        policy = make_policy(kind, scenario.n_groups, em_config, mc_samples, grid)
        times = []
        for _ in range(repetitions):
            policy.reset()
            t0 = time.perf_counter()
            snaps = [s.snapshot(t) for s in stats] if policy.uses_data else None
            policy.update(snaps, t, seed)
            times.append(time.perf_counter() - t0)
        rows.append(BenchRow(PolicyKind(kind).value, tuple(times)))
    return rows
