"""Command-line entry point: simulate, replay, bench, presets.

Exit codes: 0 success, 2 configuration or usage error, 3 bad input data,
4 internal error.
"""

from __future__ import annotations

import argparse
import io
import json
import platform
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .bench import BENCH_COLUMNS, bench_policies
from .bandit import PolicyKind
from .em import EmConfig
from .logio import (
    ConfigError,
    EventLogError,
    ExperimentConfig,
    atomic_write_text,
    config_from_dict,
    read_config_dict,
    read_event_log,
    render,
    replay_estimates,
    write_estimates_csv,
    write_event_log,
    write_regret_csv,
    write_run_estimates_csv,
    write_summary_csv,
    write_rows,
)
from .simulator import PRESETS_VERSION, iter_events, run_many, scenario_presets, summarize

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INPUT = 3
EXIT_INTERNAL = 4


class UsageError(Exception):
    pass


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _nonneg_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {v}")
    return v


def build_parser() -> argparse.ArgumentParser:
    # argparse exits with 2 on usage errors, matching the config-error code
    p = argparse.ArgumentParser(prog="delayts", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, with_policy=True):
        sp.add_argument("--config", type=Path, help="JSON run configuration")
        sp.add_argument("--preset", help="scenario preset (see `presets`)")
        sp.add_argument("--seed", type=_nonneg_int)
        sp.add_argument("--out", type=Path, help="output directory")
        sp.add_argument("--steps", type=_positive_int, help="horizon in steps")
        sp.add_argument("--batch", type=_positive_int, help="clicks per step")
        if with_policy:
            sp.add_argument("--policy", choices=[k.value for k in PolicyKind])

    sim = sub.add_parser("simulate", help="run seeded closed-loop experiments")
    common(sim)
    sim.add_argument("--runs", type=_positive_int)
    sim.add_argument("--workers", type=_positive_int, default=1)
    sim.add_argument("--mc-samples", type=_positive_int)
    sim.add_argument(
        "--export-log", action="store_true", help="also write run 0 as events.jsonl"
    )

    rep = sub.add_parser("replay", help="estimate CVR over time from an event log")
    rep.add_argument("log", type=Path)
    rep.add_argument("--config", type=Path)
    rep.add_argument("--seed", type=_nonneg_int)
    rep.add_argument("--out", type=Path)
    rep.add_argument("--step-duration", type=float)
    rep.add_argument("--groups", type=_positive_int)
    rep.add_argument("--mc-samples", type=_positive_int)

    bench = sub.add_parser("bench", help="time one assignment update per policy")
    common(bench, with_policy=False)
    bench.add_argument("--repetitions", type=_positive_int)

    pre = sub.add_parser("presets", help="list scenario presets as JSON")
    pre.add_argument("--out", type=Path)
    return p


def resolve_config(args) -> ExperimentConfig:
    """Merge a config file with command-line overrides and validate once."""
    d = read_config_dict(args.config) if getattr(args, "config", None) else {}
    d = json.loads(json.dumps(d))  # private copy
    scenario = d.setdefault("scenario", {})
    if not isinstance(scenario, dict):
        raise ConfigError("scenario", "must be an object")
    if getattr(args, "preset", None):
        scenario.clear()
        scenario["preset"] = args.preset
    elif not scenario:
        scenario["preset"] = "high_cvr"
    for flag, key in (("steps", "horizon"), ("batch", "clicks_per_step")):
        if getattr(args, flag, None) is not None:
            scenario[key] = getattr(args, flag)
    for flag in ("policy", "seed", "runs", "mc_samples"):
        if getattr(args, flag, None) is not None:
            d[flag] = getattr(args, flag)
    if getattr(args, "out", None) is not None:
        d["output_dir"] = str(args.out)
    if getattr(args, "repetitions", None) is not None:
        d.setdefault("bench", {})["repetitions"] = args.repetitions
    return config_from_dict(d)


def _out_dir(cfg_dir: str) -> Path:
    out = Path(cfg_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {out}: {exc.strerror}") from None
    return out


def _manifest(command: str, cfg: ExperimentConfig, **extra) -> str:
    doc = {
        "command": command,
        "tool_version": __version__,
        "presets_version": PRESETS_VERSION,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "config": cfg.to_dict(),
        **extra,
    }
    return json.dumps(doc, indent=2) + "\n"


def cmd_simulate(args) -> int:
    cfg = resolve_config(args)
    out = _out_dir(cfg.output_dir)
    base = cfg.run_config()
    seeds = [cfg.seed + i for i in range(cfg.runs)]
    configs = [
        replace(base, seed=s, record_events=args.export_log and i == 0)
        for i, s in enumerate(seeds)
    ]
    traces = run_many(configs, args.workers)
    result = summarize(traces, cfg.scenario.horizon)

    atomic_write_text(out / "regret_trace.csv", render(write_regret_csv, traces))
    atomic_write_text(out / "estimates.csv", render(write_run_estimates_csv, traces))
    atomic_write_text(out / "regret_summary.csv", render(write_summary_csv, result))
    artifacts = ["regret_trace.csv", "estimates.csv", "regret_summary.csv"]
    if args.export_log:
        buf = io.StringIO()
        write_event_log(iter_events(traces[0], cfg.scenario.step_duration), buf)
        atomic_write_text(out / "events.jsonl", buf.getvalue())
        artifacts.append("events.jsonl")
    manifest = _manifest(
        "simulate",
        cfg,
        seeds=seeds,
        artifacts=artifacts,
        stopped_at=[t.stopped_at for t in traces],
        winners=[t.winner for t in traces],
    )
    atomic_write_text(out / "manifest.json", manifest)
    print(
        f"{cfg.policy.value} on {cfg.scenario.name}: {cfg.runs} run(s), "
        f"mean terminal regret {result.terminal.mean():.1f} -> {out}"
    )
    return EXIT_OK


def cmd_replay(args) -> int:
    d = read_config_dict(args.config) if args.config else None
    cfg = config_from_dict(d) if d is not None else None
    if args.step_duration is not None:
        if not args.step_duration > 0:
            raise ConfigError("step_duration", "must be positive")
        step = args.step_duration
    else:
        step = cfg.scenario.step_duration if cfg else 1.0
    seed = args.seed if args.seed is not None else (cfg.seed if cfg else 0)
    mc = args.mc_samples or (cfg.mc_samples if cfg else 10_000)
    n_groups = args.groups or (cfg.scenario.n_groups if cfg else None)
    out = _out_dir(str(args.out) if args.out else (cfg.output_dir if cfg else "out"))

    try:
        events = read_event_log(args.log)
    except OSError as exc:
        raise EventLogError(f"cannot read {args.log}: {exc.strerror}") from None
    if n_groups is not None:
        for ev in events:
            if getattr(ev, "group", 0) >= n_groups:
                raise EventLogError(f"click {ev.click_id!r} has group {ev.group} >= {n_groups}")
    em = cfg.em if cfg else EmConfig()
    series = replay_estimates(events, step, em, n_groups=n_groups, seed=seed, mc_samples=mc)
    atomic_write_text(out / "estimates.csv", render(write_estimates_csv, series))
    manifest = {
        "command": "replay",
        "tool_version": __version__,
        "log": str(args.log),
        "step_duration": step,
        "seed": seed,
        "mc_samples": mc,
        "n_groups": series.n_groups,
        "n_events": len(events),
        "em": {
            "max_cycles": em.max_cycles,
            "rel_tol": em.rel_tol,
            "theta_update_mode": em.theta_update_mode,
        },
    }
    atomic_write_text(out / "manifest.json", json.dumps(manifest, indent=2) + "\n")
    print(f"replayed {len(events)} events over {len(series.steps)} steps -> {out}")
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = resolve_config(args)
    out = _out_dir(cfg.output_dir)
    steps = args.steps or cfg.bench.workload_steps
    rows = bench_policies(
        cfg.scenario,
        repetitions=cfg.bench.repetitions,
        steps=steps,
        seed=cfg.seed,
        em_config=cfg.em,
        mc_samples=cfg.mc_samples,
        grid=cfg.grid,
    )
    buf = io.StringIO()
    write_rows(buf, BENCH_COLUMNS, (r.as_row() for r in rows))
    atomic_write_text(out / "bench.csv", buf.getvalue())
    atomic_write_text(
        out / "manifest.json", _manifest("bench", cfg, workload_steps=steps, artifacts=["bench.csv"])
    )
    width = max(len(r.policy) for r in rows)
    for r in rows:
        print(f"{r.policy:<{width}}  mean {r.mean:.6f}s  median {r.as_row()[4]:.6f}s")
    return EXIT_OK


def presets_document() -> dict:
    return {
        "presets_version": PRESETS_VERSION,
        "presets": {name: sc.to_dict() for name, sc in scenario_presets().items()},
    }


def cmd_presets(args) -> int:
    text = json.dumps(presets_document(), indent=2) + "\n"
    if args.out:
        out = _out_dir(str(args.out))
        atomic_write_text(out / "presets.json", text)
    sys.stdout.write(text)
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "replay": cmd_replay,
    "bench": cmd_bench,
    "presets": cmd_presets,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, UsageError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except EventLogError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:  # noqa: BLE001 - last-resort handler maps to exit 4
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
