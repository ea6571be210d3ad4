import numpy as np

from delayts.bench import bench_policies, bench_workload
from delayts.simulator import get_preset


def test_workload_is_deterministic_and_censored():
    sc = get_preset("high_cvr")
    a = [s.snapshot(300) for s in bench_workload(sc, 300, seed=1)]
    b = [s.snapshot(300) for s in bench_workload(sc, 300, seed=1)]
    assert all(x.same_as(y) for x, y in zip(a, b))
    assert sum(s.n_total for s in a) == 300 * sc.clicks_per_step
    for s, th in zip(a, sc.theta_true):
        s.check()
        assert 0 < s.naive_cvr < th  # censoring keeps the naive rate low


def test_bench_rows():
    rows = bench_policies(get_preset("low_cvr"), repetitions=3, steps=30, policies=["random", "d-ts"])
    assert [r.policy for r in rows] == ["random", "d-ts"]
    for r in rows:
        assert len(r.times) == 3 and np.all(np.array(r.times) > 0)
        row = r.as_row()
        assert row[2] <= row[4] <= row[5]
