"""Event logs, run configuration documents, replay and CSV output."""

from __future__ import annotations

import csv
import io
import json
import math
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Iterable, Sequence

import numpy as np

from .bandit import AssignmentPlan, GridConfig, PolicyKind, StoppingRule
from .core import ClickEvent, ConversionEvent, ExperimentState, batch_of
from .delays import law_from_dict
from .em import EmConfig
from .policies import DTSPolicy
from .simulator import RegretTrace, ReplicateResult, RunConfig, Scenario, get_preset

SCHEMA_VERSION = 1


class EventLogError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}")


# -- event logs -------------------------------------------------------------

_CLICK_KEYS = {"event", "click_id", "group", "ts"}
_CONV_KEYS = {"event", "click_id", "ts"}


def _number(rec, key, line):
    v = rec.get(key)
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise EventLogError(f"field {key!r} must be a finite number", line)
    return float(v)


def parse_event_log(stream: IO[str] | Iterable[str]) -> list[ClickEvent | ConversionEvent]:
    """Parse and validate a line-delimited JSON event log.

    Blank lines are skipped.  Every other line must be a click or conversion
    record; a conversion must follow its click in file order and may not
    predate it.
    """
    events: list[ClickEvent | ConversionEvent] = []
    clicks: dict[str, float] = {}
    pending_orphans: dict[str, int] = {}
    for lineno, raw in enumerate(stream, start=1):
        if not raw.strip():
            continue
        try:
            rec = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise EventLogError(f"malformed JSON ({exc.msg})", lineno) from None
        if not isinstance(rec, dict):
            raise EventLogError("record must be a JSON object", lineno)
        kind = rec.get("event")
        if kind == "click":
            extra = set(rec) - _CLICK_KEYS
            missing = _CLICK_KEYS - set(rec)
        elif kind == "conversion":
            extra = set(rec) - _CONV_KEYS
            missing = _CONV_KEYS - set(rec)
        else:
            raise EventLogError(f"unknown event type {kind!r}", lineno)
        if missing:
            raise EventLogError(f"missing field(s) {', '.join(sorted(missing))}", lineno)
        if extra:
            raise EventLogError(f"unknown field(s) {', '.join(sorted(extra))}", lineno)
        cid = rec["click_id"]
        if not isinstance(cid, str) or not cid:
            raise EventLogError("click_id must be a non-empty string", lineno)
        ts = _number(rec, "ts", lineno)
        if ts < 0:
            raise EventLogError("ts must be nonnegative", lineno)
        if kind == "click":
            group = rec["group"]
            if isinstance(group, bool) or not isinstance(group, int) or group < 0:
                raise EventLogError("group must be a nonnegative integer", lineno)
            if cid in clicks:
                raise EventLogError(f"duplicate click_id {cid!r}", lineno)
            if cid in pending_orphans:
                raise EventLogError(
                    f"conversion for click_id {cid!r} (line {pending_orphans[cid]}) precedes its click",
                    lineno,
                )
            clicks[cid] = ts
            events.append(ClickEvent(cid, group, ts))
        else:
            if cid not in clicks:
                pending_orphans.setdefault(cid, lineno)
                continue
            if ts < clicks[cid]:
                raise EventLogError(
                    f"conversion for {cid!r} at ts={ts} precedes its click at ts={clicks[cid]}",
                    lineno,
                )
            events.append(ConversionEvent(cid, ts))
    if pending_orphans:
        ids = ", ".join(sorted(pending_orphans))
        first = min(pending_orphans.values())
        raise EventLogError(f"orphan conversion(s) for unknown click_id: {ids}", first)
    return events


def read_event_log(path: str | Path) -> list[ClickEvent | ConversionEvent]:
    with open(path, encoding="utf-8") as fh:
        return parse_event_log(fh)


def event_to_json(ev: ClickEvent | ConversionEvent) -> str:
    if isinstance(ev, ClickEvent):
        rec = {"event": "click", "click_id": ev.click_id, "group": ev.group, "ts": ev.ts}
    else:
        rec = {"event": "conversion", "click_id": ev.click_id, "ts": ev.ts}
    return json.dumps(rec)


def write_event_log(events: Iterable[ClickEvent | ConversionEvent], stream: IO[str]) -> int:
    n = 0
    for ev in events:
        stream.write(event_to_json(ev) + "\n")
        n += 1
    return n


# -- replay -----------------------------------------------------------------


ESTIMATE_COLUMNS = ["step", "group", "theta_hat", "lambda_hat", "naive_cvr", "alpha", "beta", "p_assign"]


@dataclass
class EstimateSeries:
    """Per-step, per-group estimates; arrays have shape (steps, groups)."""

    steps: np.ndarray
    theta: np.ndarray
    lam: np.ndarray
    naive: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        if np.any(np.diff(self.steps) <= 0):
            raise ValueError("steps must be strictly increasing")

    @property
    def n_groups(self) -> int:
        return self.theta.shape[1] if self.theta.ndim == 2 else 0

    @classmethod
    def empty(cls, n_groups: int = 0) -> "EstimateSeries":
        z = np.zeros((0, n_groups))
        return cls(np.zeros(0, dtype=np.int64), z, z.copy(), z.copy(), z.copy(), z.copy(), z.copy())

    @classmethod
    def from_trace(cls, trace: RegretTrace) -> "EstimateSeries":
        return cls(
            trace.steps,
            trace.theta_hat,
            trace.lambda_hat,
            trace.naive_cvr,
            trace.alpha,
            trace.beta,
            trace.plans,
        )

    def rows(self):
        for i, step in enumerate(self.steps):
            for g in range(self.n_groups):
                yield [
                    int(step),
                    g,
                    self.theta[i, g],
                    self.lam[i, g],
                    self.naive[i, g],
                    self.alpha[i, g],
                    self.beta[i, g],
                    self.p[i, g],
                ]


def replay_estimates(
    events: Sequence[ClickEvent | ConversionEvent],
    step_duration: float = 1.0,
    em_config: EmConfig = EmConfig(),
    n_groups: int | None = None,
    seed: int = 0,
    mc_samples: int = 10_000,
    last_step: int | None = None,
) -> EstimateSeries:
    """Step a clock through a log and record delay-corrected and naive estimates.

    Observation step ``t`` sees every event with ``ts < t * step_duration``.
    Estimates, Beta posteriors and assignment probabilities are those D-TS
    would compute with the same seed, so a simulated run's recorded series
    is reproduced exactly from its exported log.
    """
    if n_groups is None:
        n_groups = 1 + max((e.group for e in events if isinstance(e, ClickEvent)), default=-1)
    if n_groups == 0 or not events:
        return EstimateSeries.empty(n_groups)

    # click-first within a step keeps same-step conversions valid
    keyed = sorted(
        (batch_of(e.ts, step_duration), isinstance(e, ConversionEvent), e.ts, i, e)
        for i, e in enumerate(events)
    )
    if last_step is None:
        last_step = keyed[-1][0] + 1

    state = ExperimentState(n_groups, step_duration)
    policy = DTSPolicy(n_groups, em_config, mc_samples) if n_groups > 1 else None
    shape = (last_step, n_groups)
    out = {name: np.full(shape, np.nan) for name in ("theta", "lam", "naive", "alpha", "beta", "p")}
    pos = 0
    for t in range(1, last_step + 1):
        while pos < len(keyed) and keyed[pos][0] < t:
            ev = keyed[pos][4]
            if isinstance(ev, ClickEvent):
                state.ingest_click(ev)
            else:
                state.ingest_conversion(ev)
            pos += 1
        snaps = state.snapshots(t)
        if policy is not None:
            d = policy.update(snaps, t, seed)
            out["theta"][t - 1], out["lam"][t - 1] = d.theta, d.lam
            out["alpha"][t - 1], out["beta"][t - 1] = d.alpha, d.beta
            out["p"][t - 1] = d.plan.probs
        else:
            out["p"][t - 1] = AssignmentPlan.uniform(1).probs
        out["naive"][t - 1] = [s.naive_cvr for s in snaps]
    return EstimateSeries(np.arange(1, last_step + 1), **out)


def matured_cvr(
    events: Sequence[ClickEvent | ConversionEvent],
    window: float,
    as_of: float | None = None,
    n_groups: int | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """CVR over clicks at least ``window`` old, counting conversions within ``window``.

    Returns ``(cvr, n_clicks)`` per group.  ``as_of`` defaults to the latest
    timestamp in the log.
    """
    clicks = {e.click_id: e for e in events if isinstance(e, ClickEvent)}
    if n_groups is None:
        n_groups = 1 + max((c.group for c in clicks.values()), default=-1)
    if as_of is None:
        as_of = max((e.ts for e in events), default=0.0)
    first_conv: dict[str, float] = {}
    for e in events:
        if isinstance(e, ConversionEvent):
            first_conv[e.click_id] = min(e.ts, first_conv.get(e.click_id, math.inf))
    n = np.zeros(n_groups, dtype=np.int64)
    conv = np.zeros(n_groups, dtype=np.int64)
    for cid, c in clicks.items():
        if c.ts + window > as_of:
            continue
        n[c.group] += 1
        if first_conv.get(cid, math.inf) - c.ts <= window:
            conv[c.group] += 1
    with np.errstate(invalid="ignore", divide="ignore"):
        cvr = np.where(n > 0, conv / np.maximum(n, 1), np.nan)
    return cvr, n


# -- configuration ----------------------------------------------------------

_TOP_KEYS = {
    "schema_version",
    "scenario",
    "policy",
    "seed",
    "runs",
    "em",
    "mc_samples",
    "stopping",
    "output_dir",
    "regret_mode",
    "p_min",
    "grid",
    "time_unit",
    "bench",
}
_SCENARIO_KEYS = {"preset", "name", "theta_true", "delays", "clicks_per_step", "horizon", "step_duration"}
_EM_KEYS = {"max_cycles", "rel_tol", "theta_update_mode"}
_STOP_KEYS = {"prob_threshold", "dwell_steps"}
_GRID_KEYS = {"n_theta", "n_lambda", "lam_min", "lam_max"}
_BENCH_KEYS = {"repetitions", "workload_steps"}


@dataclass(frozen=True)
class BenchConfig:
    repetitions: int = 50
    workload_steps: int = 5000


@dataclass(frozen=True)
class ExperimentConfig:
    """A parsed run configuration document with defaults filled in."""

    scenario: Scenario
    policy: PolicyKind = PolicyKind.DTS
    seed: int = 0
    runs: int = 50
    em: EmConfig = EmConfig()
    mc_samples: int = 10_000
    stopping: StoppingRule | None = None
    output_dir: str = "out"
    regret_mode: str = "realized"
    p_min: float = 0.0
    grid: GridConfig = GridConfig()
    time_unit: str = "unit"
    bench: BenchConfig = BenchConfig()
    schema_version: int = SCHEMA_VERSION

    def run_config(self, **overrides) -> RunConfig:
        kw = dict(
            scenario=self.scenario,
            policy=self.policy,
            seed=self.seed,
            em_config=self.em,
            mc_samples=self.mc_samples,
            stopping=self.stopping,
            regret_mode=self.regret_mode,
            p_min=self.p_min,
            grid=self.grid,
        )
        kw.update(overrides)
        return RunConfig(**kw)

    def to_dict(self) -> dict:
        d = {
            "schema_version": self.schema_version,
            "scenario": self.scenario.to_dict(),
            "policy": self.policy.value,
            "seed": self.seed,
            "runs": self.runs,
            "em": {
                "max_cycles": self.em.max_cycles,
                "rel_tol": self.em.rel_tol,
                "theta_update_mode": self.em.theta_update_mode,
            },
            "mc_samples": self.mc_samples,
            "output_dir": self.output_dir,
            "regret_mode": self.regret_mode,
            "p_min": self.p_min,
            "grid": {
                "n_theta": self.grid.n_theta,
                "n_lambda": self.grid.n_lambda,
                "lam_min": self.grid.lam_min,
                "lam_max": self.grid.lam_max,
            },
            "time_unit": self.time_unit,
            "bench": {
                "repetitions": self.bench.repetitions,
                "workload_steps": self.bench.workload_steps,
            },
        }
        if self.stopping is not None:
            d["stopping"] = {
                "prob_threshold": self.stopping.prob_threshold,
                "dwell_steps": self.stopping.dwell_steps,
            }
        return d


def _check_keys(section: str, d, allowed: set[str]) -> dict:
    if not isinstance(d, dict):
        raise ConfigError(section, "must be an object")
    for key in d:
        if key not in allowed:
            raise ConfigError(f"{section}.{key}" if section else key, "unknown field")
    return d


def _typed(key, value, kind, positive=False, nonneg=False):
    if kind is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    else:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    if not ok:
        raise ConfigError(key, f"expected {kind.__name__}, got {value!r}")
    if positive and not value > 0:
        raise ConfigError(key, "must be positive")
    if nonneg and value < 0:
        raise ConfigError(key, "must be nonnegative")
    return kind(value)


def _scenario_from(d) -> Scenario:
    d = _check_keys("scenario", d, _SCENARIO_KEYS)
    base: dict = {}
    if "preset" in d:
        try:
            base = get_preset(d["preset"]).to_dict()
        except KeyError as exc:
            raise ConfigError("scenario.preset", str(exc.args[0])) from None
    merged = {**base, **{k: v for k, v in d.items() if k != "preset"}}
    for key in ("theta_true", "delays"):
        if key not in merged:
            raise ConfigError(f"scenario.{key}", "required when no preset is given")
    try:
        delays = tuple(law_from_dict(x) for x in merged["delays"])
    except (TypeError, ValueError, AttributeError) as exc:
        raise ConfigError("scenario.delays", str(exc)) from None
    try:
        return Scenario(
            name=str(merged.get("name", "custom")),
            theta_true=tuple(float(x) for x in merged["theta_true"]),
            delays=delays,
            clicks_per_step=_typed("scenario.clicks_per_step", merged.get("clicks_per_step", 100), int, positive=True),
            horizon=_typed("scenario.horizon", merged.get("horizon", 2000), int, positive=True),
            step_duration=_typed("scenario.step_duration", merged.get("step_duration", 1.0), float, positive=True),
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError("scenario", str(exc)) from None


def config_from_dict(d: dict) -> ExperimentConfig:
    d = _check_keys("", d, _TOP_KEYS)
    version = d.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError("schema_version", f"unsupported version {version!r}")
    if "scenario" not in d:
        raise ConfigError("scenario", "required")
    kw: dict = {"scenario": _scenario_from(d["scenario"])}
    if "policy" in d:
        try:
            kw["policy"] = PolicyKind(d["policy"])
        except ValueError:
            choices = ", ".join(p.value for p in PolicyKind)
            raise ConfigError("policy", f"must be one of {choices}") from None
    if "seed" in d:
        kw["seed"] = _typed("seed", d["seed"], int, nonneg=True)
    if "runs" in d:
        kw["runs"] = _typed("runs", d["runs"], int, positive=True)
    if "mc_samples" in d:
        kw["mc_samples"] = _typed("mc_samples", d["mc_samples"], int, positive=True)
    if "em" in d:
        em = _check_keys("em", d["em"], _EM_KEYS)
        try:
            kw["em"] = EmConfig(
                max_cycles=_typed("em.max_cycles", em.get("max_cycles", 10), int, positive=True),
                rel_tol=_typed("em.rel_tol", em.get("rel_tol", 1e-6), float, nonneg=True),
                theta_update_mode=em.get("theta_update_mode", "delay_corrected"),
            )
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError("em.theta_update_mode", str(exc)) from None
    if d.get("stopping") is not None:
        st = _check_keys("stopping", d["stopping"], _STOP_KEYS)
        thr = _typed("stopping.prob_threshold", st.get("prob_threshold", 0.9), float)
        if not 0 < thr < 1:
            raise ConfigError("stopping.prob_threshold", "must lie in (0, 1)")
        dwell = _typed("stopping.dwell_steps", st.get("dwell_steps", 24), int, positive=True)
        kw["stopping"] = StoppingRule(thr, dwell)
    if "output_dir" in d:
        if not isinstance(d["output_dir"], str):
            raise ConfigError("output_dir", "must be a string")
        kw["output_dir"] = d["output_dir"]
    if "regret_mode" in d:
        if d["regret_mode"] not in ("realized", "expected"):
            raise ConfigError("regret_mode", "must be 'realized' or 'expected'")
        kw["regret_mode"] = d["regret_mode"]
    if "p_min" in d:
        kw["p_min"] = _typed("p_min", d["p_min"], float, nonneg=True)
        if kw["p_min"] * kw["scenario"].n_groups > 1:
            raise ConfigError("p_min", "p_min * groups must not exceed 1")
    if "grid" in d:
        g = _check_keys("grid", d["grid"], _GRID_KEYS)
        try:
            kw["grid"] = GridConfig(
                n_theta=_typed("grid.n_theta", g.get("n_theta", 100), int, positive=True),
                n_lambda=_typed("grid.n_lambda", g.get("n_lambda", 100), int, positive=True),
                lam_min=_typed("grid.lam_min", g.get("lam_min", 1e-4), float, positive=True),
                lam_max=_typed("grid.lam_max", g.get("lam_max", 1.0), float, positive=True),
            )
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError("grid", str(exc)) from None
    if "time_unit" in d:
        kw["time_unit"] = str(d["time_unit"])
    if "bench" in d:
        b = _check_keys("bench", d["bench"], _BENCH_KEYS)
        kw["bench"] = BenchConfig(
            repetitions=_typed("bench.repetitions", b.get("repetitions", 50), int, positive=True),
            workload_steps=_typed("bench.workload_steps", b.get("workload_steps", 5000), int, positive=True),
        )
    return ExperimentConfig(**kw)


def read_config_dict(path: str | Path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"invalid JSON at line {exc.lineno}: {exc.msg}") from None
    if not isinstance(d, dict):
        raise ConfigError("config", "top level must be an object")
    return d


def load_config(path: str | Path) -> ExperimentConfig:
    return config_from_dict(read_config_dict(path))


# -- tabular output ---------------------------------------------------------

REGRET_COLUMNS = [
    "run",
    "step",
    "policy",
    "group",
    "assigned",
    "revealed_conversions",
    "theta_hat",
    "lambda_hat",
    "p_assign",
    "regret_step",
    "regret_cum",
]
SUMMARY_COLUMNS = ["step", "mean", "q20", "q80"]


def fmt(x) -> str:
    """Shortest round-tripping text for a number; empty for NaN."""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if math.isnan(x):
        return ""
    if x.is_integer() and abs(x) < 2**53:
        return str(int(x))
    return repr(x)


def write_rows(stream, header, rows):
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([v if isinstance(v, str) else fmt(v) for v in row])


def regret_rows(traces: Sequence[RegretTrace], run_offset: int = 0):
    for r, tr in enumerate(traces):
        cum = tr.cumulative
        for i in range(tr.n_steps):
            for g in range(tr.n_groups):
                yield [
                    r + run_offset,
                    i + 1,
                    tr.policy,
                    g,
                    tr.assigned[i, g],
                    tr.revealed[i, g],
                    tr.theta_hat[i, g],
                    tr.lambda_hat[i, g],
                    tr.plans[i, g],
                    tr.regret_step[i],
                    cum[i + 1],
                ]


def write_regret_csv(traces: Sequence[RegretTrace], stream: IO[str]) -> None:
    write_rows(stream, REGRET_COLUMNS, regret_rows(traces))


def write_estimates_csv(series: EstimateSeries, stream: IO[str], run: int | None = None) -> None:
    header = (["run"] if run is not None else []) + ESTIMATE_COLUMNS
    rows = series.rows() if run is None else ([run, *row] for row in series.rows())
    write_rows(stream, header, rows)


def write_run_estimates_csv(traces: Sequence[RegretTrace], stream: IO[str]) -> None:
    def rows():
        for r, tr in enumerate(traces):
            for row in EstimateSeries.from_trace(tr).rows():
                yield [r, *row]

    write_rows(stream, ["run"] + ESTIMATE_COLUMNS, rows())


def write_summary_csv(result: ReplicateResult, stream: IO[str]) -> None:
    write_rows(
        stream,
        SUMMARY_COLUMNS,
        zip(result.steps, result.mean, result.q20, result.q80),
    )


def read_estimates_csv(stream: IO[str]) -> list[dict]:
    return list(csv.DictReader(stream))


def atomic_write_text(path: str | Path, text: str) -> None:
    """Write via a temp file in the same directory, then rename into place."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.chmod(tmp, 0o644)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def render(writer, *args) -> str:
    buf = io.StringIO()
    writer(*args, buf)
    return buf.getvalue()
