"""Per-click reference implementations used as independent oracles.

Everything here loops over individual clicks in plain Python and never
touches the package's batch-aggregated code paths.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass
class Click:
    group: int
    batch: int
    ts: float
    conv_ts: float | None = None  # None: not (yet) observed


def random_log(rng, n_clicks, n_groups=2, n_steps=20, dt=1.0, theta=0.3, mean_delay=5.0, t_obs=None):
    """Random per-click log observed at step ``t_obs`` (default ``n_steps``)."""
    t_obs = n_steps if t_obs is None else t_obs
    clicks = []
    for _ in range(n_clicks):
        s = int(rng.integers(0, n_steps))
        ts = (s + float(rng.random())) * dt
        g = int(rng.integers(0, n_groups))
        conv = None
        if rng.random() < theta:
            c = ts + float(rng.exponential(mean_delay))
            if c < t_obs * dt:
                conv = c
        clicks.append(Click(g, s, ts, conv))
    return clicks


def brute_snapshot_fields(clicks, group, t, dt):
    """Counting statistics of one group at step ``t`` by scanning clicks."""
    clicks_by = {}
    unconv_by = {}
    delays = []
    for c in clicks:
        if c.group != group or c.batch >= t:
            continue
        clicks_by[c.batch] = clicks_by.get(c.batch, 0) + 1
        if c.conv_ts is not None and math.floor(c.conv_ts / dt) < t:
            delays.append(c.conv_ts - c.ts)
        else:
            unconv_by[c.batch] = unconv_by.get(c.batch, 0) + 1
    return {
        "clicks_by_batch": clicks_by,
        "unconverted_by_batch": unconv_by,
        "delays": sorted(delays),
        "delay_sum": math.fsum(delays),
        "n_convert": len(delays),
        "n_total": sum(clicks_by.values()),
    }


def per_click_records(snapshot):
    """Expand a snapshot into one (converted, delay_or_elapsed, elapsed) row per click."""
    rows = []
    elapsed = dict(zip(snapshot.batch_steps.tolist(), snapshot.elapsed.tolist()))
    conv_left = {b: int(c - u) for b, c, u in zip(snapshot.batch_steps, snapshot.clicks, snapshot.unconverted)}
    for b, u in zip(snapshot.batch_steps.tolist(), snapshot.unconverted.tolist()):
        rows += [(False, None, elapsed[b])] * int(u)
    delays = list(snapshot.converted_delays)
    # converted clicks keep their batch's elapsed time for the corrected denominator
    conv_batches = [b for b, n in conv_left.items() for _ in range(n)]
    for d, b in zip(delays, conv_batches):
        rows.append((True, float(d), elapsed[b]))
    return rows


def e_step(theta, survival):
    theta = min(max(theta, 1e-12), 1 - 1e-12)
    return survival * theta / (1 - theta + survival * theta)


def brute_em(rows, theta, lam, cycles, mode="delay_corrected", theta_min=1e-6, lam_min=1e-9, lam_max=1e9):
    """Exponential-delay EM over per-click rows for a fixed number of cycles."""
    n = len(rows)
    nc = sum(1 for r in rows if r[0])
    if n == 0 or nc == 0:
        return theta, lam
    for _ in range(cycles):
        w = [1.0 if conv else e_step(theta, math.exp(-lam * e)) for conv, _, e in rows]
        denom = math.fsum(d for conv, d, _ in rows if conv) + math.fsum(
            wi * e for wi, (conv, _, e) in zip(w, rows) if not conv
        )
        lam = nc / denom if denom > 0 else lam_max
        lam = min(max(lam, lam_min), lam_max)
        if mode == "delay_corrected":
            eff = math.fsum(-math.expm1(-lam * e) for _, _, e in rows)
            if eff > 0:
                theta = min(max(nc / eff, theta_min), 1.0)
        else:
            theta = max(math.fsum(w) / n, theta_min)
    return theta, lam


def brute_loglik(rows, theta, lam):
    theta = min(max(theta, 1e-12), 1.0)
    ll = 0.0
    for conv, d, e in rows:
        if conv:
            ll += math.log(theta) + math.log(lam) - lam * d
        else:
            ll += math.log(1 - theta + theta * math.exp(-lam * e))
    return ll


def p_beta_greater(a1, b1, a2, b2, n=20001):
    """P(X > Y) for independent Beta variables by quadrature on a fine grid."""
    from scipy import integrate, stats

    x = np.linspace(0, 1, n)
    return float(integrate.trapezoid(stats.beta.pdf(x, a1, b1) * stats.beta.cdf(x, a2, b2), x))


def make_snapshot(clicks_by_batch, converted=(), t=None, dt=1.0, group=0):
    """Snapshot from ``{batch: n_clicks}`` and ``[(batch, delay), ...]`` conversions."""
    from delayts.core import GroupStats

    gs = GroupStats(group, dt)
    for b, n in sorted(clicks_by_batch.items()):
        gs.add_clicks(b, n)
    if converted:
        b, d = zip(*converted)
        gs.add_conversions(list(b), list(d))
    if t is None:
        t = max(clicks_by_batch) + 1
    return gs.snapshot(t)


def snapshot_from_clicks(clicks, group, t, dt=1.0):
    """Snapshot of one group built from a per-click log (clicks before ``t``)."""
    fields = brute_snapshot_fields(clicks, group, t, dt)
    conv = []
    for c in clicks:
        if c.group == group and c.batch < t and c.conv_ts is not None and math.floor(c.conv_ts / dt) < t:
            conv.append((c.batch, c.conv_ts - c.ts))
    if not fields["clicks_by_batch"]:
        from delayts.core import GroupStats

        return GroupStats(group, dt).snapshot(t)
    return make_snapshot(fields["clicks_by_batch"], conv, t, dt, group)
