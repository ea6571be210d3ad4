"""Click/conversion event model and incremental per-group statistics.

Clicks are bucketed into batches of length ``step_duration``; a click with
timestamp ``ts`` belongs to batch ``s`` when ``s * step_duration <= ts <
(s + 1) * step_duration``.  An observation at step ``t`` sees every event
with ``ts < t * step_duration``, so the most recent batch has an elapsed
time of one step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class EventError(ValueError):
    """Base class for rejected events."""


class DuplicateClickError(EventError):
    pass


class UnknownClickError(EventError):
    pass


class EventOrderError(EventError):
    """A conversion predates its click, or an event falls outside the clock step."""


@dataclass(frozen=True)
class ClickEvent:
    click_id: str
    group: int
    ts: float


@dataclass(frozen=True)
class ConversionEvent:
    click_id: str
    ts: float


@dataclass
class ExperimentClock:
    step: int = 0
    step_duration: float = 1.0

    def __post_init__(self):
        if self.step < 0:
            raise ValueError("step must be >= 0")
        if not self.step_duration > 0:
            raise ValueError("step_duration must be > 0")

    def time_of(self, step: int) -> float:
        return step * self.step_duration

    def batch_of(self, ts: float) -> int:
        return batch_of(ts, self.step_duration)

    def advance(self) -> int:
        self.step += 1
        return self.step


def batch_of(ts: float, step_duration: float) -> int:
    """Batch index of ``ts``, consistent with ``s * step_duration`` products."""
    if ts < 0:
        raise EventOrderError(f"negative timestamp {ts!r}")
    s = int(math.floor(ts / step_duration))
    # float division can land one off the product-defined boundary
    while s > 0 and s * step_duration > ts:
        s -= 1
    while (s + 1) * step_duration <= ts:
        s += 1
    return s


class ExactSum:
    """Order-independent float accumulator (Shewchuk partials, as in math.fsum).

    ``value`` is the correctly rounded sum of everything added, so two
    accumulators fed the same multiset agree bit for bit.
    """

    __slots__ = ("_partials",)

    def __init__(self):
        self._partials: list[float] = []

    def add(self, x: float) -> None:
        partials = self._partials
        i = 0
        for y in partials:
            if abs(x) < abs(y):
                x, y = y, x
            hi = x + y
            lo = y - (hi - x)
            if lo:
                partials[i] = lo
                i += 1
            x = hi
        partials[i:] = [x]

    def extend(self, values) -> None:
        for v in values:
            self.add(float(v))

    @property
    def value(self) -> float:
        return math.fsum(self._partials)


@dataclass(frozen=True, eq=False)
class ObservationSnapshot:
    """Censored view of one group at observation step ``t``.

    Batch-level arrays are aligned: ``batch_steps[j]`` had ``clicks[j]``
    clicks of which ``unconverted[j]`` show no conversion yet.  Only
    batches with at least one click are listed.
    """

    group: int
    t: int
    step_duration: float
    batch_steps: np.ndarray
    clicks: np.ndarray
    unconverted: np.ndarray
    converted_delays: np.ndarray
    converted_delay_sum: float
    n_convert: int
    n_total: int

    @property
    def elapsed(self) -> np.ndarray:
        """Elapsed time ``(t - s) * step_duration`` for every listed batch."""
        return (self.t - self.batch_steps) * self.step_duration

    @property
    def clicks_by_batch(self) -> dict[int, int]:
        return {int(s): int(n) for s, n in zip(self.batch_steps, self.clicks)}

    @property
    def unconverted_by_batch(self) -> dict[int, int]:
        return {
            int(s): int(u) for s, u in zip(self.batch_steps, self.unconverted) if u > 0
        }

    @property
    def naive_cvr(self) -> float:
        return self.n_convert / self.n_total if self.n_total else 0.0

    def check(self) -> None:
        """Raise AssertionError if a counting identity is violated."""
        assert self.n_convert == len(self.converted_delays)
        assert self.n_total == int(self.clicks.sum())
        assert int(self.unconverted.sum()) == self.n_total - self.n_convert
        assert np.all(self.unconverted <= self.clicks)
        assert np.all(self.batch_steps <= self.t)

    def same_as(self, other: "ObservationSnapshot") -> bool:
        """Exact equality; converted delays compared as multisets."""
        return (
            self.group == other.group
            and self.t == other.t
            and self.step_duration == other.step_duration
            and np.array_equal(self.batch_steps, other.batch_steps)
            and np.array_equal(self.clicks, other.clicks)
            and np.array_equal(self.unconverted, other.unconverted)
            and np.array_equal(
                np.sort(self.converted_delays), np.sort(other.converted_delays)
            )
            and self.converted_delay_sum == other.converted_delay_sum
            and self.n_convert == other.n_convert
            and self.n_total == other.n_total
        )


def _frozen(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


class GroupStats:
    """Incrementally maintained sufficient statistics for one group.

    Counts live in dense arrays indexed by batch so snapshots cost
    O(#batches) regardless of click volume.
    """

    def __init__(self, group: int = 0, step_duration: float = 1.0, capacity: int = 64):
        self.group = group
        self.step_duration = step_duration
        self._clicks = np.zeros(capacity, dtype=np.int64)
        self._unconverted = np.zeros(capacity, dtype=np.int64)
        self._delays = np.empty(max(capacity, 16), dtype=np.float64)
        self._delay_sum = ExactSum()
        self.n_convert = 0
        self.n_total = 0
        self.max_batch = -1

    def _grow(self, batch: int) -> None:
        if batch >= len(self._clicks):
            size = max(2 * len(self._clicks), batch + 1)
            for name in ("_clicks", "_unconverted"):
                old = getattr(self, name)
                new = np.zeros(size, dtype=np.int64)
                new[: len(old)] = old
                setattr(self, name, new)

    def add_clicks(self, batch: int, n: int = 1) -> None:
        if batch < 0:
            raise EventOrderError(f"negative batch {batch}")
        self._grow(batch)
        self._clicks[batch] += n
        self._unconverted[batch] += n
        self.n_total += n
        if n and batch > self.max_batch:
            self.max_batch = batch

    def add_conversion(self, batch: int, delay: float) -> None:
        self.add_conversions(np.array([batch]), np.array([delay], dtype=np.float64))

    def add_conversions(self, batches, delays) -> None:
        """Move clicks of the given batches from unconverted to converted."""
        batches = np.asarray(batches, dtype=np.int64)
        delays = np.asarray(delays, dtype=np.float64)
        if len(batches) == 0:
            return
        if np.any(delays < 0):
            raise EventOrderError("negative conversion delay")
        if batches.max() >= len(self._unconverted):
            raise UnknownClickError("conversion for a batch with no clicks")
        dec = np.bincount(batches, minlength=len(self._unconverted))
        if np.any(dec > self._unconverted):
            raise UnknownClickError("more conversions than unconverted clicks in batch")
        self._unconverted -= dec
        m = len(delays)
        if self.n_convert + m > len(self._delays):
            # reallocate rather than resize: old snapshot views keep the old buffer
            new = np.empty(max(2 * len(self._delays), self.n_convert + m))
            new[: self.n_convert] = self._delays[: self.n_convert]
            self._delays = new
        self._delays[self.n_convert : self.n_convert + m] = delays
        self.n_convert += m
        self._delay_sum.extend(delays)

    def snapshot(self, t: int) -> ObservationSnapshot:
        if t < self.max_batch:
            raise ValueError(f"observation step {t} precedes ingested batch {self.max_batch}")
        upto = min(t + 1, len(self._clicks))
        idx = np.flatnonzero(self._clicks[:upto])
        delays = self._delays[: self.n_convert].view()
        return ObservationSnapshot(
            group=self.group,
            t=t,
            step_duration=self.step_duration,
            batch_steps=_frozen(idx),
            clicks=_frozen(self._clicks[idx]),
            unconverted=_frozen(self._unconverted[idx]),
            converted_delays=_frozen(delays),
            converted_delay_sum=self._delay_sum.value,
            n_convert=self.n_convert,
            n_total=self.n_total,
        )


@dataclass
class _ClickRecord:
    group: int
    batch: int
    ts: float
    converted: bool = False


@dataclass
class ExperimentState:
    """Per-click registry plus per-group statistics for an event log."""

    n_groups: int
    step_duration: float = 1.0
    duplicate_conversions: int = 0
    groups: list[GroupStats] = field(init=False)
    _clicks: dict[str, _ClickRecord] = field(init=False, default_factory=dict)

    def __post_init__(self):
        if self.n_groups < 1:
            raise ValueError("n_groups must be >= 1")
        self.groups = [GroupStats(k, self.step_duration) for k in range(self.n_groups)]

    def ingest_click(self, ev: ClickEvent, clock: ExperimentClock | None = None) -> None:
        if ev.click_id in self._clicks:
            raise DuplicateClickError(f"duplicate click_id {ev.click_id!r}")
        if not 0 <= ev.group < self.n_groups:
            raise EventError(f"group {ev.group} outside 0..{self.n_groups - 1}")
        batch = batch_of(ev.ts, self.step_duration)
        if clock is not None and batch != clock.step:
            raise EventOrderError(
                f"click {ev.click_id!r} at ts={ev.ts} is not in step {clock.step}"
            )
        self._clicks[ev.click_id] = _ClickRecord(ev.group, batch, ev.ts)
        self.groups[ev.group].add_clicks(batch)

    def ingest_conversion(self, ev: ConversionEvent) -> None:
        rec = self._clicks.get(ev.click_id)
        if rec is None:
            raise UnknownClickError(f"conversion for unknown click_id {ev.click_id!r}")
        if ev.ts < rec.ts:
            raise EventOrderError(
                f"conversion ts={ev.ts} precedes click ts={rec.ts} for {ev.click_id!r}"
            )
        if rec.converted:
            # earliest order defines the conversion; later ones are counted and dropped
            self.duplicate_conversions += 1
            return
        rec.converted = True
        self.groups[rec.group].add_conversion(rec.batch, ev.ts - rec.ts)

    def snapshot_at(self, group: int, t: int) -> ObservationSnapshot:
        return self.groups[group].snapshot(t)

    def snapshots(self, t: int) -> list[ObservationSnapshot]:
        return [g.snapshot(t) for g in self.groups]
