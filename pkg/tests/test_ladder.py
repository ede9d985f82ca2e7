from __future__ import annotations

import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from orderedwalks import rng
from orderedwalks.ladder import (
    LadderClock,
    ladder_gaps,
    replay,
    run_excursion,
    run_excursions,
    tau_of,
)
from orderedwalks.oracle import brute_force_h_excursion, dp_h_excursion
from orderedwalks.walk import Censored, GapPath, independent_components, simulate_gap_path


def excursion_sums_by_replay(path: GapPath, probes, truncation):
    """Reference excursion sums computed from a stored path in plain Python."""
    clock = LadderClock(path.start)
    sums = np.zeros(len(probes))
    prev_max = np.array(path.start)
    for n, y in enumerate(path.values[1:], start=1):
        if n > truncation:
            return sums, None
        ev = clock.advance(y)
        if ev.is_J:
            return sums, n
        for i, pr in enumerate(probes):
            sums[i] += bool(np.all(prev_max - y < np.asarray(pr)))
        prev_max = clock.running_max
    return sums, None


class TestLadderClock:
    def test_common_ascent_is_J(self):
        clock = LadderClock([0, 0])
        ev = clock.advance([1, 1])
        assert ev.is_J and not ev.is_beta
        assert clock.j_times == [1]

    def test_descent_in_one_component(self):
        clock = LadderClock([0, 0])
        ev = clock.advance([1, -1])
        assert ev.is_beta and not ev.is_J
        assert ev.components == (1,)

    def test_ties_are_not_events(self):
        clock = LadderClock([0, 0])
        ev = clock.advance([0, 0])
        assert not ev.is_J and not ev.is_beta
        weak = LadderClock([0, 0], weak=True)
        assert weak.advance([0, 3]).components == (0,)

    def test_beta_zero_convention(self):
        clock = LadderClock([0])
        assert clock.beta(0) == 1
        clock.advance([1])
        clock.advance([-1])
        assert clock.beta(1) == 2

    def test_max_equals_value_at_J(self, lazy3):
        path = simulate_gap_path(lazy3, [0, 0], 5000, seed=1, stop_at_tau=False)
        clock, events = replay(path)
        vals = path.values
        assert clock.j_times == sorted(set(clock.j_times))
        for j in clock.j_times:
            assert np.all(vals[:j].max(axis=0) < vals[j])
            assert np.array_equal(np.maximum.accumulate(vals, axis=0)[j], vals[j])

    @pytest.mark.parametrize("weak", [False, True])
    def test_beta_is_union_of_component_ladders(self, lazy3, weak):
        path = simulate_gap_path(lazy3, [0, 0], 5000, seed=2, stop_at_tau=False)
        clock, _ = replay(path, weak=weak)
        vals = path.values
        union = set()
        for k in range(vals.shape[1]):
            col = vals[:, k]
            prior_min = np.minimum.accumulate(col)[:-1]
            hit = col[1:] <= prior_min if weak else col[1:] < prior_min
            union |= set((np.flatnonzero(hit) + 1).tolist())
        assert clock.beta_times == sorted(union)

    def test_no_common_ascent_for_ssrw3(self, ssrw3):
        # no single step of the d=3 simple walk raises both gaps
        assert ssrw3.p_gap_step_positive() == 0.0
        path = simulate_gap_path(ssrw3, [0, 0], 20_000, seed=3, stop_at_tau=False)
        clock, _ = replay(path)
        assert clock.j_times == []


class TestTauOf:
    def test_first_nonpositive(self):
        p = GapPath(np.array([2]), np.array([[0], [0], [-2], [2]]), 3)
        assert tau_of(p) == 3

    def test_censored(self):
        p = GapPath(np.array([2]), np.array([[0], [2], [-2]]), Censored(3))
        assert tau_of(p) == Censored(3)
        assert repr(tau_of(p)) == "censored(3)"

    def test_zero_start_is_not_exit(self):
        p = GapPath(np.array([0, 4]), np.array([[2, 0]]), Censored(1))
        assert tau_of(p) == Censored(1)

    def test_matches_simulator(self, ssrw3):
        for r in range(100):
            p = simulate_gap_path(ssrw3, [1, 2], 300, seed=5, replica=r)
            assert tau_of(p) == p.tau


class TestExcursions:
    def test_probe_zero_is_zero(self, ssrw2, lazy3):
        for law in (ssrw2, lazy3):
            b = run_excursions(law, [[0] * law.m], [0.1], truncation=2000, replicas=2000, seed=1)
            assert np.all(b.counts == 0) and np.all(b.dsums == 0)

    def test_discounted_below_plain(self, lazy3):
        b = run_excursions(lazy3, [[1, 1], [2, 4]], [0.5, 0.05], 2000, 2000, seed=2)
        assert np.all(b.dsums <= b.counts[:, :, None])
        assert np.all(b.dsums[:, :, 0] <= b.dsums[:, :, 1])

    def test_monotone_in_probe(self, lazy3):
        b = run_excursions(lazy3, [[1, 1], [2, 2], [2, 5]], [], 2000, 2000, seed=3)
        assert np.all(b.counts[:, 0] <= b.counts[:, 1])
        assert np.all(b.counts[:, 1] <= b.counts[:, 2])

    @pytest.mark.parametrize("fixture, probes", [("ssrw2", [[1], [2], [4]]),
                                                 ("lazy3", [[1, 1], [2, 3]])])
    def test_kernel_matches_python_replay(self, request, fixture, probes):
        law = request.getfixturevalue(fixture)
        T = 400
        b = run_excursions(law, probes, [], T, 300, seed=7)
        for r in range(300):
            path = simulate_gap_path(law, [0] * law.m, T + 1, seed=7, replica=r,
                                     stop_at_tau=False, stream=rng.EXCURSION)
            sums, j1 = excursion_sums_by_replay(path, probes, T)
            assert np.array_equal(b.counts[r], sums)
            rec = b.record(r)
            if j1 is None:
                assert isinstance(rec.J1, Censored) and b.censored[r]
            else:
                assert rec.J1 == j1

    def test_single_replica_matches_batch(self, ssrw2):
        b = run_excursions(ssrw2, [[2]], [0.1], 500, 10, seed=4)
        rec = run_excursion(ssrw2, [[2]], [0.1], 500, seed=4, replica=6)
        assert rec.indicator_sum[0] == b.counts[6, 0]
        assert rec.discounted_sum[0, 0] == b.dsums[6, 0, 0]

    def test_truncated_mean_matches_brute_force(self, ssrw2):
        # exhaustive enumeration to depth 12 is exact for truncation 12
        T = 12
        br = brute_force_h_excursion(ssrw2, [1], depth=T, horizon=T)
        assert br.lower == br.upper
        dp = dp_h_excursion(ssrw2, [[1]], T)
        assert float(br.lower) == pytest.approx(dp.values[0], abs=1e-12)
        n = 200_000
        b = run_excursions(ssrw2, [[1]], [], T, n, seed=8)
        x = b.counts[:, 0]
        est = 1 + x.mean()
        assert abs(est - float(br.lower)) < 4 * x.std(ddof=1) / np.sqrt(n)

    def test_first_ladder_time_probability(self, ssrw2):
        # gap steps -2, 0, +2 with probabilities 1/4, 1/2, 1/4
        g = ladder_gaps(ssrw2, 1, truncation=10, replicas=100_000, seed=1)
        p = np.mean(g[:, 0] == 1)
        assert abs(p - 0.25) < 4 * np.sqrt(0.25 * 0.75 / 100_000)

    def test_ladder_gaps_match_replay(self, lazy3):
        g = ladder_gaps(lazy3, 3, truncation=3000, replicas=50, seed=9)
        for r in range(50):
            path = simulate_gap_path(lazy3, [0, 0], 9001, seed=9, replica=r, stop_at_tau=False,
                                     stream=rng.LADDER)
            clock, _ = replay(path)
            times = [0] + clock.j_times
            for i in range(3):
                if g[r, i] < 0:
                    assert len(times) <= i + 1 or times[i + 1] - times[i] > 3000
                    break
                assert times[i + 1] - times[i] == g[r, i]

    def test_ssrw3_never_completes(self, ssrw3):
        b = run_excursions(ssrw3, [[1, 1]], [], 1000, 500, seed=1)
        assert np.all(b.censored)

    def test_csv(self, ssrw2, tmp_path):
        b = run_excursions(ssrw2, [[0], [2]], [0.1], 100, 5, seed=1)
        out = tmp_path / "exc.csv"
        b.to_csv(out)
        rows = list(csv.DictReader(open(out)))
        assert len(rows) == 10
        assert set(rows[0]) >= {"replica", "probe", "J1", "censored", "indicator_sum"}

    def test_validation(self, ssrw2):
        with pytest.raises(ValueError):
            run_excursions(ssrw2, [[1]], [], 0, 1)
        with pytest.raises(ValueError):
            run_excursions(ssrw2, [[1]], [0.0], 10, 1)
        with pytest.raises(ValueError):
            run_excursions(ssrw2, [[1, 1]], [], 10, 1)


@settings(deadline=None, max_examples=15)
@given(st.integers(0, 10_000), st.integers(1, 6), st.integers(1, 6))
def test_truncation_does_not_change_draws(r, y1, y2):
    law = independent_components([{-1: 0.25, 0: 0.5, 1: 0.25}] * 3)
    a = run_excursions(law, [[y1, y2]], [], 200, 1, seed=3, first_replica=r)
    b = run_excursions(law, [[y1, y2], [0, 0]], [0.2], 5000, 1, seed=3, first_replica=r)
    if a.status[0] == 0:
        assert a.counts[0, 0] == b.counts[0, 0]
        assert a.steps[0] == b.steps[0]
    else:
        assert a.counts[0, 0] <= b.counts[0, 0]
