"""Forward lineage forest: event law, paths, distances, fixation types."""

import math

import numpy as np
import pytest

from moranlines import (ParamError, cat_fixation_type, genealogical_distance,
                        init_forest, neutral_pair_distance_samples, path_value,
                        run_until, simulate_types, step_forest)

from helpers import mk, philox, three_se


def test_init_forest_structure():
    p = mk(2)
    f = init_forest(p, -1.0, (0, 1))
    assert f.now == -1.0 and f.time_origin == -1.0
    assert len(f.nodes) == 2 and f.heads == [0, 1]
    assert genealogical_distance(f, 0, 1) == 0.0
    assert path_value(f, 0, -1.0) == (0, 0)
    assert path_value(f, 1, -1.0) == (1, 1)


def test_init_forest_errors():
    p = mk(2)
    with pytest.raises(ParamError, match="one initial type per site"):
        init_forest(p, 0.0, (0,))
    with pytest.raises(ParamError, match="initial type outside type space"):
        init_forest(p, 0.0, (0, 2))


def test_extreme_selection_event_law():
    # d=2, S=N: ordered rates are 1 (fit->unfit), 0 (unfit->fit), 1/2 (equal)
    p = mk(2, B=0.0, S=2.0)
    rng = philox(7, 0)
    counts = {}
    n = 4000
    for _ in range(n):
        f = init_forest(p, 0.0, (0, 1))
        _, evt = step_forest(f, p, rng)
        assert evt.kind == "resample"
        counts[(evt.src, evt.dst)] = counts.get((evt.src, evt.dst), 0) + 1
    assert (0, 1) not in counts          # zero-rate direction never fires
    frac = counts[(1, 0)] / n
    assert abs(frac - 0.5) <= 3 * math.sqrt(0.25 / n)
    for self_pair in [(0, 0), (1, 1)]:
        assert abs(counts[self_pair] / n - 0.25) <= 3 * math.sqrt(0.1875 / n)


def test_holding_time_mean():
    p = mk(2, B=0.0)
    total = 2.0  # N*B + N^2/2
    rng = philox(8, 0)
    f = init_forest(p, 0.0, (0, 1))
    times = [f.now]
    for _ in range(100_000):
        f, evt = step_forest(f, p, rng)
        times.append(evt.time)
    dts = np.diff(times)
    assert abs(dts.mean() - 1.0 / total) <= 0.01 / total


def test_run_until_exact_horizon_and_errors():
    p = mk(3)
    rng = philox(9, 0)
    f = init_forest(p, -2.0, (0, 1, 0))
    run_until(f, p, -2.0, rng)
    assert f.now == -2.0 and len(f.nodes) == 3
    run_until(f, p, 0.5, rng)
    assert f.now == 0.5
    assert f.now - f.time_origin == 0.5 - (-2.0)
    with pytest.raises(ParamError, match="horizon before current time"):
        run_until(f, p, 0.0, rng)


def test_no_resampling_probability():
    # N=2, B=0, S=0: effective (src != dst) resamplings occur at rate 1
    p = mk(2, B=0.0)
    rng = philox(10, 0)
    T = 0.5
    hits = np.empty(100_000)
    for r in range(hits.size):
        f = init_forest(p, 0.0, (0, 1))
        run_until(f, p, T, rng)
        hits[r] = 1.0 if len(f.nodes) == 2 else 0.0
    mean, tol = three_se(hits)
    assert abs(mean - math.exp(-T)) <= tol


def test_distance_tracks_last_effective_resample():
    p = mk(2, B=0.7)
    rng = philox(11, 0)
    T = 3.0
    seen_merge = seen_none = 0
    for _ in range(200):
        f = init_forest(p, 0.0, (0, 1))
        trace = []
        run_until(f, p, T, rng, trace=trace)
        eff = [e.time for e in trace if e.kind == "resample" and e.src != e.dst]
        if eff:
            assert genealogical_distance(f, 0, 1) == 2.0 * (T - eff[-1])
            seen_merge += 1
        else:
            assert genealogical_distance(f, 0, 1) == 2.0 * T
            seen_none += 1
        assert genealogical_distance(f, 0, 0) == 0.0
    assert seen_merge > 0 and seen_none >= 0


def test_distance_is_ultrametric_on_simulated_forests():
    p = mk(5, B=1.0, S=1.0)
    rng = philox(12, 0)
    for _ in range(10):
        f = init_forest(p, 0.0, rng.integers(0, 2, size=5))
        run_until(f, p, 2.0, rng)
        D = np.array([[genealogical_distance(f, i, j) for j in range(5)]
                      for i in range(5)])
        assert np.all(D >= 0) and np.all(np.diag(D) == 0)
        assert np.array_equal(D, D.T)
        for i in range(5):
            for j in range(5):
                for k in range(5):
                    assert D[i, j] <= max(D[i, k], D[k, j]) + 1e-12
    with pytest.raises(ParamError, match="site outside population"):
        genealogical_distance(f, 0, 5)


def test_path_value_reconstructs_mutation_history():
    p = mk(1, B=5.0, b=((0.0, 1.0), (1.0, 0.0)))
    rng = philox(13, 0)
    f = init_forest(p, 0.0, (0,))
    run_until(f, p, 2.0, rng)
    events = sorted(f.mutation_events)
    assert events, "flip kernel at B=5 should mutate"
    for s in np.linspace(0.0, 2.0, 41):
        u = 0
        for (mt, _i, _old, new) in events:
            if mt <= s:
                u = new
        assert path_value(f, 0, float(s)) == (u, 0)
    # right-continuity at an event time
    t0 = events[0][0]
    assert path_value(f, 0, t0) == (events[0][3], 0)
    with pytest.raises(ParamError, match="time outside forest window"):
        path_value(f, 0, 2.5)


def test_cat_fixation_degenerate_cases():
    rng = philox(14, 0)
    p1 = mk(1, B=0.0)
    assert cat_fixation_type(p1, 0.0, (1,), 0.0, rng) == 1
    p3 = mk(3, B=0.0)
    for u in (0, 1):
        assert cat_fixation_type(p3, 0.0, (u, u, u), 0.5, rng) == u
    with pytest.raises(ParamError, match="evaluation time before start"):
        cat_fixation_type(p3, 0.0, (0, 0, 0), -1.0, rng)
    assert cat_fixation_type(p3, 0.0, (0, 1, 0), 5.0, rng,
                             horizon_cap=1e-9) == "pending"


def test_cat_fixation_neutral_probability():
    # neutral, B=0: P(common-ancestor type = 1) equals the initial frequency,
    # for the time-0 evaluation and for later evaluation times alike
    p = mk(4, B=0.0)
    rng = philox(15, 0)
    for t_eval in (0.0, 0.3):
        hits = np.empty(50_000)
        for r in range(hits.size):
            out = cat_fixation_type(p, 0.0, (0, 0, 1, 1), t_eval, rng)
            assert out in (0, 1)
            hits[r] = out
        mean, tol = three_se(hits)
        assert abs(mean - 0.5) <= tol, (t_eval, mean, tol)


def test_type_marginals_are_exchangeable():
    p = mk(3, S=1.0, b=((0.7, 0.3), (0.2, 0.8)))
    rng = philox(16, 0)
    reps = 30_000
    j01 = np.empty((reps, 2))
    m0 = np.empty(reps)
    m2 = np.empty(reps)
    for r in range(reps):
        start = tuple(int(x) for x in rng.random(3) < 0.4)
        out = simulate_types(p, start, 0.7, rng)
        j01[r] = (out[0], out[1])
        m0[r], m2[r] = out[0], out[2]
    p01 = np.mean((j01[:, 0] == 0) & (j01[:, 1] == 1))
    p10 = np.mean((j01[:, 0] == 1) & (j01[:, 1] == 0))
    se = math.sqrt((p01 * (1 - p01) + p10 * (1 - p10)) / reps)
    assert abs(p01 - p10) <= 3 * se
    se_m = math.sqrt((m0.var(ddof=1) + m2.var(ddof=1)) / reps)
    assert abs(m0.mean() - m2.mean()) <= 3 * se_m


def test_neutral_fixation_shares_one_root():
    p = mk(3, B=0.0)
    rng = philox(17, 0)
    for _ in range(30):
        f = init_forest(p, 0.0, (0, 1, 0))
        run_until(f, p, 40.0, rng)
        assert len(set(f.current_types)) == 1
        for i in range(3):
            for j in range(3):
                assert genealogical_distance(f, i, j) < 2 * 40.0


def test_neutral_distance_survival_function():
    samples = neutral_pair_distance_samples(4, 2.0, 20_000, seed=18)
    assert samples.shape == (20_000,)
    assert np.all(samples <= 2 * 2.0 + 1e-12)
    for t in (0.25, 0.5, 1.0):
        ind = (samples > 2 * t).astype(float)
        mean, tol = three_se(ind)
        assert abs(mean - math.exp(-t)) <= tol, (t, mean)


def test_fast_sampler_matches_forest_reference():
    p = mk(3, B=0.0)
    rng = philox(19, 0)
    T = 1.5
    slow = np.empty(4000)
    for r in range(slow.size):
        f = init_forest(p, 0.0, (0, 0, 0))
        run_until(f, p, T, rng)
        slow[r] = genealogical_distance(f, 0, 1)
    fast = neutral_pair_distance_samples(3, T, 200_000, seed=20)
    for t in (0.3, 0.9):
        ps, ss = np.mean(slow > 2 * t), np.std(slow > 2 * t, ddof=1) / math.sqrt(slow.size)
        pf_, sf = np.mean(fast > 2 * t), np.std(fast > 2 * t, ddof=1) / math.sqrt(fast.size)
        assert abs(ps - pf_) <= 3 * math.hypot(ss, sf)


def test_neutral_sampler_validation():
    with pytest.raises(ParamError, match="population of at least two"):
        neutral_pair_distance_samples(1, 1.0, 10, seed=0)
    with pytest.raises(ParamError, match="distinct sites inside the population"):
        neutral_pair_distance_samples(3, 1.0, 10, seed=0, pair=(0, 0))
