import numpy as np
import pytest

from delayts.bandit import GridConfig, PolicyKind
from delayts.em import EmConfig
from delayts.policies import DTSPolicy, FixedArmPolicy, make_policy, mc_seed

from oracles import make_snapshot


def snaps():
    return [
        make_snapshot({0: 300, 5: 300}, [(0, 2.0)] * 40 + [(5, 1.0)] * 10, t=10, group=0),
        make_snapshot({0: 300, 5: 300}, [(0, 2.0)] * 20 + [(5, 1.0)] * 5, t=10, group=1),
        make_snapshot({0: 300, 5: 300}, [(0, 2.0)] * 10, t=10, group=2),
    ]


@pytest.mark.parametrize("kind", list(PolicyKind))
def test_every_policy_returns_valid_plan(kind):
    pol = make_policy(kind, 3, mc_samples=2000, grid=GridConfig(20, 20))
    d = pol.update(snaps(), 10, seed=1)
    assert d.plan.probs.sum() == pytest.approx(1.0, abs=1e-9)
    assert d.plan.step == 10
    assert d.theta.shape == (3,)


@pytest.mark.parametrize("kind", [PolicyKind.DTS, PolicyKind.NAIVE_TS])
def test_ts_policies_deterministic(kind):
    a = make_policy(kind, 3, mc_samples=3000).update(snaps(), 10, seed=4)
    b = make_policy(kind, 3, mc_samples=3000).update(snaps(), 10, seed=4)
    assert np.array_equal(a.plan.probs, b.plan.probs)
    assert np.array_equal(a.alpha, b.alpha, equal_nan=True)


def test_dts_warm_start_and_reset():
    pol = DTSPolicy(3, EmConfig(max_cycles=2), mc_samples=100)
    first = pol.update(snaps(), 10)
    second = pol.update(snaps(), 10)
    assert not np.array_equal(first.theta, second.theta)  # continued from first
    pol.reset()
    again = pol.update(snaps(), 10)
    np.testing.assert_array_equal(first.theta, again.theta)


def test_dts_prefers_best_group():
    d = make_policy("d-ts", 3).update(snaps(), 10)
    assert int(np.argmax(d.plan.probs)) == 0


def test_p_min_floor_applied():
    d = make_policy("d-ucb", 3, p_min=0.1).update(snaps(), 10)
    assert d.plan.probs.min() == pytest.approx(0.1)


def test_fixed_arm_policy():
    pol = FixedArmPolicy(3, 2)
    assert pol.initial_plan().probs.tolist() == [0, 0, 1]
    with pytest.raises(ValueError):
        FixedArmPolicy(3, 3)


def test_mc_seed_is_step_specific():
    assert mc_seed(1, 2).generate_state(2).tolist() != mc_seed(1, 3).generate_state(2).tolist()
