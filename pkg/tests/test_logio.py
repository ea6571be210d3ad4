import io
import json

import numpy as np
import pytest

from delayts.bandit import PolicyKind
from delayts.core import ClickEvent, ConversionEvent
from delayts.delays import Exponential, NoDelay
from delayts.em import EmConfig
from delayts.logio import (
    ConfigError,
    EstimateSeries,
    EventLogError,
    atomic_write_text,
    config_from_dict,
    fmt,
    load_config,
    matured_cvr,
    parse_event_log,
    render,
    replay_estimates,
    write_estimates_csv,
    write_event_log,
    write_regret_csv,
)
from delayts.simulator import RunConfig, Scenario, iter_events, run_experiment


def lines(*recs):
    return [json.dumps(r) + "\n" for r in recs]


def click(cid, g, ts):
    return {"event": "click", "click_id": cid, "group": g, "ts": ts}


def conv(cid, ts):
    return {"event": "conversion", "click_id": cid, "ts": ts}


# -- parsing ----------------------------------------------------------------


def test_empty_log():
    assert parse_event_log(io.StringIO("")) == []
    assert parse_event_log(["\n", "  \n"]) == []


def test_two_clicks_one_conversion_replay_invariants():
    events = parse_event_log(lines(click("a", 0, 0.5), click("b", 1, 1.5), conv("a", 2.25)))
    assert events == [ClickEvent("a", 0, 0.5), ClickEvent("b", 1, 1.5), ConversionEvent("a", 2.25)]
    series = replay_estimates(events, 1.0, mc_samples=200)
    assert series.steps.tolist() == [1, 2, 3]
    assert series.naive[-1].tolist() == [1.0, 0.0]
    np.testing.assert_allclose(series.p.sum(1), 1.0)


def test_orphan_conversion_names_click():
    with pytest.raises(EventLogError, match="ghost"):
        parse_event_log(lines(click("a", 0, 0.0), conv("ghost", 1.0)))


def test_conversion_before_its_click_in_file():
    with pytest.raises(EventLogError, match="precedes its click") as exc:
        parse_event_log(lines(conv("a", 3.0), click("a", 0, 1.0)))
    assert exc.value.line == 2


@pytest.mark.parametrize(
    "bad,line",
    [
        ("{not json", 2),
        (json.dumps([1, 2]), 2),
        (json.dumps({"event": "view", "click_id": "x", "ts": 1}), 2),
        (json.dumps({"event": "click", "click_id": "x", "group": 0}), 2),
        (json.dumps({"event": "click", "click_id": "x", "group": 0, "ts": 1, "extra": 1}), 2),
        (json.dumps({"event": "click", "click_id": "x", "group": -1, "ts": 1}), 2),
        (json.dumps({"event": "click", "click_id": "x", "group": 0.5, "ts": 1}), 2),
        (json.dumps({"event": "click", "click_id": "x", "group": 0, "ts": "1"}), 2),
        (json.dumps({"event": "click", "click_id": "x", "group": 0, "ts": -1}), 2),
        (json.dumps({"event": "click", "click_id": "", "group": 0, "ts": 1}), 2),
        (json.dumps({"event": "click", "click_id": "a", "group": 0, "ts": 1}), 2),
        (json.dumps({"event": "conversion", "click_id": "a", "ts": 0.1}), 2),
    ],
)
def test_malformed_lines_rejected_with_line_number(bad, line):
    src = lines(click("a", 0, 0.5)) + [bad + "\n"]
    with pytest.raises(EventLogError) as exc:
        parse_event_log(src)
    assert exc.value.line == line
    assert f"line {line}" in str(exc.value)


def test_duplicate_conversions_kept_for_state_to_count():
    events = parse_event_log(lines(click("a", 0, 0.0), conv("a", 1.0), conv("a", 2.0)))
    assert len(events) == 3


def test_write_parse_round_trip():
    events = [ClickEvent("x-1", 2, 0.1 + 0.2), ConversionEvent("x-1", 1e-300 + 7.3)]
    buf = io.StringIO()
    assert write_event_log(events, buf) == 2
    assert parse_event_log(io.StringIO(buf.getvalue())) == events


# -- replay -----------------------------------------------------------------


def test_instant_conversions_corrected_equals_naive():
    rng = np.random.default_rng(0)
    events = []
    for i in range(3000):
        ts = float(rng.uniform(0, 30))
        g = int(rng.integers(0, 2))
        events.append(ClickEvent(str(i), g, ts))
        if rng.random() < 0.2 + 0.1 * g:
            events.append(ConversionEvent(str(i), ts))
    series = replay_estimates(events, 1.0, mc_samples=100)
    np.testing.assert_allclose(series.theta, series.naive, atol=1e-6)


def sim_log(theta, rate, steps=300, n=200, seed=0):
    sc = Scenario("one", (theta, theta), (Exponential(rate),) * 2, n, steps)
    tr = run_experiment(RunConfig(sc, "random", seed=seed, record_events=True))
    return list(iter_events(tr, 1.0)), tr


def test_replay_recovers_theta_and_naive_is_biased():
    events, tr = sim_log(0.1, 1 / 105, steps=600, n=100)
    series = replay_estimates(events, 1.0, EmConfig(max_cycles=10), mc_samples=100)
    n_clicks = tr.assigned.sum(0)
    # SE of the matured-sample proportion; the last ~105 steps add little information
    se = np.sqrt(0.1 * 0.9 / (n_clicks * 0.8))
    assert np.all(np.abs(series.theta[-1] - 0.1) < 3 * se)
    # unmatured phase: the naive rate sits strictly below the corrected one
    early = slice(20, 200)
    assert np.all(series.naive[early] < series.theta[early])


def test_matured_cvr_matches_latent_cvr():
    # days as the unit, 15-day window, delays with a 2-day mean
    sc = Scenario("m", (0.2, 0.1), (Exponential(0.5), Exponential(0.5)), 200, 24 * 40, step_duration=1 / 24)
    tr = run_experiment(RunConfig(sc, "random", seed=3, record_events=True))
    events = list(iter_events(tr, sc.step_duration))
    cvr, n = matured_cvr(events, window=15.0)
    se = np.sqrt(np.array(sc.theta_true) * (1 - np.array(sc.theta_true)) / n)
    assert np.all(np.abs(cvr - sc.theta_true) < 3 * se)


def test_replay_reproduces_simulation_exactly():
    sc = Scenario("rt", (0.3, 0.2, 0.25), (Exponential(1 / 15),) * 3, 50, 80)
    cfg = RunConfig(sc, "d-ts", seed=21, mc_samples=700, record_events=True)
    tr = run_experiment(cfg)
    events = list(iter_events(tr, 1.0))
    buf = io.StringIO()
    write_event_log(events, buf)
    parsed = parse_event_log(io.StringIO(buf.getvalue()))
    series = replay_estimates(parsed, 1.0, cfg.em_config, n_groups=3, seed=21, mc_samples=700)
    sim = EstimateSeries.from_trace(tr)
    assert render(write_estimates_csv, series) == render(write_estimates_csv, sim)


def test_single_group_replay():
    events = [ClickEvent("a", 0, 0.0), ConversionEvent("a", 0.5)]
    series = replay_estimates(events, 1.0)
    assert series.p.tolist() == [[1.0]]


def test_empty_replay_is_header_only():
    series = replay_estimates([], 1.0)
    assert render(write_estimates_csv, series) == (
        "step,group,theta_hat,lambda_hat,naive_cvr,alpha,beta,p_assign\n"
    )


def test_estimate_series_requires_increasing_steps():
    z = np.zeros((2, 1))
    with pytest.raises(ValueError):
        EstimateSeries(np.array([2, 2]), z, z, z, z, z, z)


# -- config -----------------------------------------------------------------


def test_config_defaults():
    cfg = config_from_dict({"scenario": {"preset": "low_cvr"}})
    assert cfg.policy is PolicyKind.DTS
    assert (cfg.seed, cfg.runs, cfg.mc_samples) == (0, 50, 10_000)
    assert cfg.em == EmConfig()
    assert cfg.stopping is None
    assert cfg.scenario.theta_true == (0.1, 0.05, 0.03)


def test_config_overrides_and_round_trip():
    d = {
        "schema_version": 1,
        "scenario": {"preset": "high_cvr", "horizon": 50, "clicks_per_step": 10},
        "policy": "naive-ts",
        "seed": 3,
        "runs": 2,
        "em": {"max_cycles": 4, "rel_tol": 0.0, "theta_update_mode": "pure_em"},
        "mc_samples": 100,
        "stopping": {"prob_threshold": 0.95, "dwell_steps": 24},
        "output_dir": "x",
        "time_unit": "minutes",
    }
    cfg = config_from_dict(d)
    assert cfg.scenario.horizon == 50 and cfg.em.max_cycles == 4
    assert config_from_dict(cfg.to_dict()) == cfg


def test_explicit_scenario():
    cfg = config_from_dict(
        {
            "scenario": {
                "name": "mine",
                "theta_true": [0.2, 0.1],
                "delays": [{"law": "exponential", "rate": 0.1}, {"law": "none"}],
            }
        }
    )
    assert cfg.scenario.delays == (Exponential(0.1), NoDelay())


@pytest.mark.parametrize(
    "d,key",
    [
        ({"scenario": {"preset": "high_cvr"}, "colour": 1}, "colour"),
        ({"scenario": {"preset": "high_cvr", "typo": 1}}, "scenario.typo"),
        ({"scenario": {"preset": "nope"}}, "scenario.preset"),
        ({"scenario": {"preset": "high_cvr"}, "em": {"cycles": 3}}, "em.cycles"),
        ({"scenario": {"preset": "high_cvr"}, "runs": 0}, "runs"),
        ({"scenario": {"preset": "high_cvr"}, "policy": "greedy"}, "policy"),
        ({"scenario": {"preset": "high_cvr"}, "schema_version": 2}, "schema_version"),
        ({"scenario": {"preset": "high_cvr"}, "seed": "7"}, "seed"),
        ({"scenario": {"preset": "high_cvr"}, "stopping": {"prob_threshold": 1.5}}, "stopping.prob_threshold"),
        ({"scenario": {"theta_true": [0.1, 0.2]}}, "scenario.delays"),
        ({}, "scenario"),
    ],
)
def test_config_errors_name_the_key(d, key):
    with pytest.raises(ConfigError) as exc:
        config_from_dict(d)
    assert exc.value.key == key


def test_load_config_file(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"scenario": {"preset": "weibull"}, "seed": 5}))
    assert load_config(p).seed == 5
    p.write_text("{oops")
    with pytest.raises(ConfigError):
        load_config(p)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")


# -- tables -----------------------------------------------------------------


def test_fmt_round_trips():
    for x in (0.1, 1 / 3, 1e-300, 12345.678, 2.0, 0):
        assert float(fmt(x)) == x
    assert fmt(float("nan")) == ""
    assert fmt(np.int64(7)) == "7"


def test_regret_csv_columns():
    sc = Scenario("c", (0.5, 0.2), (Exponential(0.5),) * 2, 10, 5)
    tr = run_experiment(RunConfig(sc, "d-ucb", seed=0))
    text = render(write_regret_csv, [tr, tr])
    rows = text.strip().split("\n")
    assert rows[0] == (
        "run,step,policy,group,assigned,revealed_conversions,theta_hat,"
        "lambda_hat,p_assign,regret_step,regret_cum"
    )
    assert len(rows) == 1 + 2 * 5 * 2
    last = rows[-1].split(",")
    assert last[0] == "1" and last[1] == "5" and last[2] == "d-ucb"
    assert float(last[-1]) == tr.cumulative[-1]


def test_atomic_write(tmp_path):
    p = tmp_path / "f.txt"
    atomic_write_text(p, "one")
    atomic_write_text(p, "two")
    assert p.read_text() == "two"
    assert [x.name for x in tmp_path.iterdir()] == ["f.txt"]
