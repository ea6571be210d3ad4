"""Closed-loop batch experiments against a known ground truth.

Step ``j`` (0-based) routes ``clicks_per_step`` clicks stamped at
``j * step_duration`` using the current plan, draws their latent outcomes,
then observes at step ``t = j + 1``: every conversion with timestamp below
``t * step_duration`` is visible.  The policy sees the snapshots and
produces the plan for the next batch.

Rewards are eventual conversions credited at assignment time.  Regret
compares them with the best single group on the same clicks (common
random numbers: click ``i`` converts under group ``k`` iff ``u_i <
theta_k``), so per-step regret is never negative.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Iterator, Sequence

import numpy as np

from .bandit import GridConfig, PolicyKind, StoppingRule, check_stopping
from .core import ClickEvent, ConversionEvent, GroupStats
from .delays import DelayLaw, Exponential, ExponentialMixture, Weibull
from .em import EmConfig
from .policies import Policy, make_policy

PRESETS_VERSION = "1"

ENV_STREAM = 0
REGRET_MODES = ("realized", "expected")


@dataclass(frozen=True)
class Scenario:
    name: str
    theta_true: tuple[float, ...]
    delays: tuple[DelayLaw, ...]
    clicks_per_step: int = 100
    horizon: int = 2000
    step_duration: float = 1.0

    def __post_init__(self):
        if len(self.theta_true) != len(self.delays):
            raise ValueError("theta_true and delays must have one entry per group")
        if len(self.theta_true) < 2:
            raise ValueError("need at least two groups")
        if any(not 0 <= th <= 1 for th in self.theta_true):
            raise ValueError("theta_true entries must lie in [0, 1]")
        if self.clicks_per_step < 1 or self.horizon < 1:
            raise ValueError("clicks_per_step and horizon must be >= 1")
        if not self.step_duration > 0:
            raise ValueError("step_duration must be > 0")

    @property
    def n_groups(self) -> int:
        return len(self.theta_true)

    @property
    def best_arm(self) -> int:
        return int(np.argmax(self.theta_true))

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "theta_true": list(self.theta_true),
            "delays": [d.to_dict() for d in self.delays],
            "clicks_per_step": self.clicks_per_step,
            "horizon": self.horizon,
            "step_duration": self.step_duration,
        }


def scenario_presets() -> dict[str, Scenario]:
    """The four benchmark environments, keyed by name.

    Time is in abstract units with one step per unit, except ``criteo_like``
    whose unit is the day and whose step is one hour.
    """
    rates = (1 / 1000, 1 / 750, 1 / 500)
    high = (0.5, 0.4, 0.3)
    low = (0.1, 0.05, 0.03)
    return {
        "high_cvr": Scenario("high_cvr", high, tuple(Exponential(r) for r in rates)),
        "low_cvr": Scenario("low_cvr", low, tuple(Exponential(r) for r in rates)),
        "weibull": Scenario(
            "weibull", low, tuple(Weibull(1.5, 1.0 / r) for r in rates)
        ),
        "criteo_like": Scenario(
            "criteo_like",
            (0.225, 0.18, 0.135),
            tuple(ExponentialMixture.with_mean(m) for m in (7.4, 5.6, 3.7)),
            step_duration=1.0 / 24,
        ),
    }


def get_preset(name: str) -> Scenario:
    presets = scenario_presets()
    if name not in presets:
        raise KeyError(f"unknown preset {name!r}; choose from {', '.join(presets)}")
    return presets[name]


@dataclass(frozen=True)
class RunConfig:
    scenario: Scenario
    policy: PolicyKind | str = PolicyKind.DTS
    seed: int = 0
    em_config: EmConfig = EmConfig()
    mc_samples: int = 10_000
    stopping: StoppingRule | None = None
    regret_mode: str = "realized"
    p_min: float = 0.0
    grid: GridConfig = GridConfig()
    record_events: bool = False

    def __post_init__(self):
        if self.regret_mode not in REGRET_MODES:
            raise ValueError(f"regret_mode must be one of {REGRET_MODES}")
        if self.mc_samples < 1:
            raise ValueError("mc_samples must be >= 1")
        if isinstance(self.policy, str):
            object.__setattr__(self, "policy", PolicyKind(self.policy))

    def build_policy(self) -> Policy:
        return make_policy(
            self.policy, self.scenario.n_groups, self.em_config, self.mc_samples, self.grid, self.p_min
        )


@dataclass
class StepEvents:
    """Raw events of one batch, kept only when ``record_events`` is set."""

    step: int
    groups: np.ndarray  # assigned group of every click in the batch
    # conversions timestamped inside this step's interval, keyed by their click
    conv_click_step: np.ndarray
    conv_click_index: np.ndarray
    conv_ts: np.ndarray


@dataclass
class RegretTrace:
    """Per-step record of one run; row ``i`` is observation step ``i + 1``."""

    policy: str
    seed: int
    n_groups: int
    assigned: np.ndarray
    rewards: np.ndarray
    regret_step: np.ndarray
    revealed: np.ndarray
    latent: np.ndarray
    naive_cvr: np.ndarray
    theta_hat: np.ndarray
    lambda_hat: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    plans: np.ndarray
    winner: int | None = None
    stopped_at: int | None = None
    events: list[StepEvents] = field(default_factory=list)

    @property
    def n_steps(self) -> int:
        return len(self.regret_step)

    @property
    def steps(self) -> np.ndarray:
        return np.arange(1, self.n_steps + 1)

    @property
    def cumulative(self) -> np.ndarray:
        return cumulative_regret(self)


def vector_batch_of(ts: np.ndarray, step_duration: float) -> np.ndarray:
    """Vectorised ``core.batch_of``."""
    s = np.floor(ts / step_duration).astype(np.int64)
    s -= (s * step_duration > ts) & (s > 0)
    s += (s + 1) * step_duration <= ts
    return s


def sample_click_outcome(group: int, scenario: Scenario, rng: np.random.Generator) -> tuple[bool, float | None]:
    """Latent (eventual conversion, delay) for one click of ``group``."""
    if not 0 <= group < scenario.n_groups:
        raise ValueError("group out of range")
    if rng.random() >= scenario.theta_true[group]:
        return False, None
    return True, float(scenario.delays[group].sample(rng, 1)[0])


def realized_rewards(assignments, converted, n_groups: int) -> np.ndarray:
    """Eventual conversions per group among one batch's clicks."""
    a = np.asarray(assignments, dtype=np.int64)
    c = np.asarray(converted, dtype=bool)
    return np.bincount(a[c], minlength=n_groups)


def cumulative_regret(trace: RegretTrace) -> np.ndarray:
    """``R_0 = 0`` followed by the running sum of per-step regret."""
    return np.concatenate([[0.0], np.cumsum(trace.regret_step, dtype=float)])


def step_seed(seed: int, tag: int, step: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, tag, step])


def run_experiment(config: RunConfig, policy: Policy | None = None) -> RegretTrace:
    """Simulate one closed-loop experiment; deterministic in ``config.seed``."""
    sc = config.scenario
    k, n, dt = sc.n_groups, sc.clicks_per_step, sc.step_duration
    horizon = sc.horizon
    theta = np.asarray(sc.theta_true, dtype=float)
    theta_best = theta.max()
    if policy is None:
        policy = config.build_policy()
    policy.reset()
    seed = config.seed

    stats = [GroupStats(g, dt, capacity=horizon + 1) for g in range(k)]
    pending: dict[int, list[tuple[int, np.ndarray, np.ndarray]]] = {}

    shape = (horizon, k)
    assigned = np.zeros(shape, dtype=np.int64)
    rewards = np.zeros(shape, dtype=np.int64)
    revealed = np.zeros(shape, dtype=np.int64)
    latent = np.zeros(shape, dtype=np.int64)
    naive = np.zeros(shape)
    theta_hat = np.full(shape, np.nan)
    lambda_hat = np.full(shape, np.nan)
    alpha = np.full(shape, np.nan)
    beta = np.full(shape, np.nan)
    plans = np.zeros(shape)
    regret = np.zeros(horizon)
    latent_cum = np.zeros(k, dtype=np.int64)
    clicks_log: list[np.ndarray] = []
    conv_log: dict[int, list[tuple[int, np.ndarray, np.ndarray]]] = {}
    plan_history: list[np.ndarray] = []
    winner = stopped_at = None

    plan = policy.initial_plan()
    steps_run = 0
    for j in range(horizon):
        env = np.random.Generator(np.random.PCG64(step_seed(seed, ENV_STREAM, j)))
        a = env.choice(k, size=n, p=plan.probs)
        u = env.random(n)
        conv = u < theta[a]
        counts = np.bincount(a, minlength=k)
        r = realized_rewards(a, conv, k)
        if config.regret_mode == "realized":
            best = int(np.count_nonzero(u < theta_best))
            regret[j] = best - int(r.sum())
        else:
            regret[j] = n * theta_best - float(np.dot(counts, theta))
        assigned[j] = counts
        rewards[j] = r
        latent_cum += r

        click_ts = j * dt
        for g in range(k):
            if counts[g]:
                stats[g].add_clicks(j, int(counts[g]))
        conv_idx = np.flatnonzero(conv)
        if len(conv_idx):
            conv_groups = a[conv_idx]
            delays = np.empty(len(conv_idx))
            for g in range(k):
                sel = conv_groups == g
                m = int(sel.sum())
                if m:
                    delays[sel] = sc.delays[g].sample(env, m)
            conv_ts = click_ts + delays
            observed_delay = conv_ts - click_ts
            reveal = vector_batch_of(conv_ts, dt) + 1
            for rs in np.unique(reveal):
                if rs > horizon:
                    continue
                sel = reveal == rs
                pending.setdefault(int(rs), []).append((j, conv_groups[sel], observed_delay[sel]))
                if config.record_events:
                    conv_log.setdefault(int(rs) - 1, []).append((j, conv_idx[sel], conv_ts[sel]))

        t = j + 1
        parts = pending.pop(t, None)
        if parts:
            batches = np.concatenate([np.full(len(gs), b, dtype=np.int64) for b, gs, _ in parts])
            groups = np.concatenate([gs for _, gs, _ in parts])
            dly = np.concatenate([d for _, _, d in parts])
            for g in range(k):
                sel = groups == g
                if sel.any():
                    stats[g].add_conversions(batches[sel], dly[sel])
        if config.record_events:
            clicks_log.append(a)
        snaps = [s.snapshot(t) for s in stats] if policy.uses_data else None
        decision = policy.update(snaps, t, seed)
        plan = decision.plan
        for g in range(k):
            revealed[j, g] = stats[g].n_convert
            naive[j, g] = stats[g].n_convert / stats[g].n_total if stats[g].n_total else 0.0
        latent[j] = latent_cum
        theta_hat[j] = decision.theta
        lambda_hat[j] = decision.lam
        alpha[j] = decision.alpha
        beta[j] = decision.beta
        plans[j] = plan.probs
        steps_run = t
        if config.stopping is not None:
            plan_history.append(plan.probs)
            w = check_stopping(plan_history, config.stopping)
            if w is not None:
                winner, stopped_at = w, t
                break

    events = [_step_events(j, a, conv_log.get(j, ())) for j, a in enumerate(clicks_log)]

    cut = slice(0, steps_run)
    return RegretTrace(
        policy=PolicyKind(config.policy).value if policy.kind else type(policy).__name__,
        seed=seed,
        n_groups=k,
        assigned=assigned[cut],
        rewards=rewards[cut],
        regret_step=regret[cut],
        revealed=revealed[cut],
        latent=latent[cut],
        naive_cvr=naive[cut],
        theta_hat=theta_hat[cut],
        lambda_hat=lambda_hat[cut],
        alpha=alpha[cut],
        beta=beta[cut],
        plans=plans[cut],
        winner=winner,
        stopped_at=stopped_at,
        events=events,
    )


def _step_events(step, groups, parts) -> StepEvents:
    if parts:
        cstep = np.concatenate([np.full(len(idx), b, dtype=np.int64) for b, idx, _ in parts])
        cidx = np.concatenate([idx for _, idx, _ in parts])
        cts = np.concatenate([ts for _, _, ts in parts])
    else:
        cstep = cidx = np.empty(0, dtype=np.int64)
        cts = np.empty(0)
    return StepEvents(step, groups, cstep, cidx, cts)


def click_id(step: int, index: int) -> str:
    return f"{step}-{index}"


def iter_events(trace: RegretTrace, step_duration: float) -> Iterator[ClickEvent | ConversionEvent]:
    """Events of a recorded run in time order (clicks of a step before its conversions)."""
    if not trace.events:
        raise ValueError("run was not recorded; set RunConfig.record_events=True")
    for ev in trace.events:
        ts = ev.step * step_duration
        for i, g in enumerate(ev.groups):
            yield ClickEvent(click_id(ev.step, i), int(g), ts)
        for o in np.argsort(ev.conv_ts, kind="stable"):
            cid = click_id(int(ev.conv_click_step[o]), int(ev.conv_click_index[o]))
            yield ConversionEvent(cid, float(ev.conv_ts[o]))


@dataclass
class ReplicateResult:
    steps: np.ndarray
    mean: np.ndarray
    q20: np.ndarray
    q80: np.ndarray
    traces: list[RegretTrace]

    @property
    def terminal(self) -> np.ndarray:
        return np.array([t.cumulative[-1] for t in self.traces])


def _run_one(config: RunConfig) -> RegretTrace:
    return run_experiment(config)


def run_many(configs: Sequence[RunConfig], workers: int = 1) -> list[RegretTrace]:
    """Run configurations in order; results do not depend on ``workers``."""
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            return list(pool.map(_run_one, configs))
    return [run_experiment(c) for c in configs]


def replicate(config: RunConfig, n_runs: int, workers: int = 1) -> ReplicateResult:
    """Run ``n_runs`` seeds (``seed + i``) and summarise cumulative regret."""
    if n_runs < 1:
        raise ValueError("n_runs must be >= 1")
    configs = [replace(config, seed=config.seed + i) for i in range(n_runs)]
    return summarize(run_many(configs, workers), config.scenario.horizon)


def summarize(traces: Sequence[RegretTrace], horizon: int) -> ReplicateResult:
    """Mean and 20/80% quantiles of cumulative regret over runs.

    Runs that stopped early are padded with their final cumulative regret.
    """
    n_runs = len(traces)
    curves = np.empty((n_runs, horizon + 1))
    for i, tr in enumerate(traces):
        c = tr.cumulative
        curves[i, : len(c)] = c
        curves[i, len(c) :] = c[-1]
    return ReplicateResult(
        steps=np.arange(horizon + 1),
        mean=curves.mean(axis=0),
        q20=np.quantile(curves, 0.2, axis=0),
        q80=np.quantile(curves, 0.8, axis=0),
        traces=list(traces),
    )


def terminal_share(trace: RegretTrace, arm: int, last_fraction: float = 0.1) -> float:
    """Share of clicks routed to ``arm`` over the final part of a run."""
    m = max(1, int(math.ceil(trace.n_steps * last_fraction)))
    a = trace.assigned[-m:]
    return float(a[:, arm].sum() / a.sum())


__all__ = [
    "PRESETS_VERSION",
    "ReplicateResult",
    "RegretTrace",
    "RunConfig",
    "Scenario",
    "cumulative_regret",
    "get_preset",
    "iter_events",
    "realized_rewards",
    "replicate",
    "run_experiment",
    "run_many",
    "summarize",
    "sample_click_outcome",
    "scenario_presets",
    "terminal_share",
]
