from __future__ import annotations

import math

import numpy as np
import pytest

from orderedwalks import estimators as est
from orderedwalks import rng
from orderedwalks.oracle import dp_h_c, dp_h_excursion, dp_survival
from orderedwalks.walk import independent_components

NEG2 = independent_components([{-1: 0.3, 1: 0.7}, {-1: 0.7, 1: 0.3}])
POS3 = independent_components([{-1: 0.5, 0: 0.4, 1: 0.1}, {-1: 1 / 3, 0: 1 / 3, 1: 1 / 3},
                               {-1: 0.1, 0: 0.4, 1: 0.5}])


def combined_z(a: est.HEstimate, b: est.HEstimate) -> float:
    return abs(a.value - b.value) / math.hypot(a.std_error, b.std_error)


def exit_time_ratio(law, y, n_max=600):
    """E_y tau / E_0 tau from exact survival curves (E tau = sum_n P(tau > n))."""
    num = dp_survival(law, y, n_max)
    den = dp_survival(law, [0] * law.m, n_max)
    assert num.curve[-1] < 1e-13
    return math.fsum(num.curve) / math.fsum(den.curve)


class TestHEstimate:
    def test_row_and_interval(self):
        e = est.HEstimate(2.0, 0.1, 100, 10, 0.0, est.EXCURSION, (2, 4))
        assert e.row()["y"] == "2 4"
        assert e.interval() == pytest.approx((1.6, 2.4))


class TestFinitenessScreen:
    def test_conditions(self, ssrw2, ssrw3, lazy3):
        assert est.finiteness_screen(NEG2).negative_drift
        assert est.finiteness_screen(POS3).positive_drift_and_escape
        assert est.finiteness_screen(ssrw2).zero_mean_and_finite
        assert est.finiteness_screen(lazy3).zero_mean_and_finite
        assert not est.finiteness_screen(ssrw3).passed

    def test_warning(self, ssrw3):
        with pytest.warns(est.FinitenessWarning):
            e = est.estimate_h_excursion(ssrw3, [1, 1], replicas=200, truncation=100, seed=1)
        assert e.censored_fraction == 1.0


class TestZeroGap:
    @pytest.mark.parametrize("call", [
        lambda law: est.estimate_h_c(law, [0], 0.1, replicas=500, seed=1),
        lambda law: est.estimate_h_excursion(law, [0], replicas=500, seed=1),
        lambda law: est.estimate_h_renewal(law, [0], replicas=500, seed=1),
        lambda law: est.estimate_h_drift_negative(law, [0], replicas=500, seed=1),
    ])
    def test_exactly_one(self, call):
        e = call(NEG2)
        assert e.value == 1.0 and e.std_error == 0.0

    def test_drift_positive(self):
        e = est.estimate_h_drift_positive(POS3, [0, 0], replicas=100, seed=1)
        assert e.value == 1.0 and e.std_error == 0.0


class TestGeometricRatio:
    def test_large_c(self, ssrw2):
        e = est.estimate_h_c(ssrw2, [4], 20.0, replicas=10_000, seed=1)
        assert e.value == pytest.approx(1.0, abs=1e-6)

    def test_matches_dp(self, ssrw2):
        e = est.estimate_h_c(ssrw2, [2], 0.1, replicas=100_000, seed=2)
        ref = dp_h_c(ssrw2, [2], 0.1, n_max=2000)
        assert abs(e.value - ref.value) < 4 * e.std_error
        assert e.bias_bound == pytest.approx(est.geometric_tail(0.1, e.truncation))
        assert e.bias_bound <= 1e-12

    def test_matches_dp_d3(self, lazy3):
        e = est.estimate_h_c(lazy3, [1, 2], 0.2, replicas=100_000, seed=3)
        ref = dp_h_c(lazy3, [1, 2], 0.2)
        assert abs(e.value - ref.value) < 4 * e.std_error

    def test_rejects_nonpositive_c(self, ssrw2):
        with pytest.raises(ValueError):
            est.estimate_h_c(ssrw2, [2], 0.0)
        with pytest.raises(ValueError):
            est.estimate_h_c(ssrw2, [2], -1.0)

    def test_monotone_along_grid(self, lazy3):
        grid = [0.5, 0.2, 0.1, 0.05, 0.02]
        probes = [[1, 1], [2, 3], [5, 1]]
        res = est.estimate_h_c_grid(lazy3, probes, grid, replicas=20_000, seed=4)
        exc = est.estimate_h_excursion_grid(lazy3, probes, replicas=20_000, seed=4)
        for y, e_exc in zip(probes, exc):
            vals = [res[(tuple(y), c)].value for c in grid]
            assert all(a <= b for a, b in zip(vals, vals[1:]))
            assert vals[-1] <= e_exc.value

    def test_pathwise_below_excursion(self, lazy3):
        from orderedwalks.ladder import run_excursions

        b = run_excursions(lazy3, [[2, 2]], [0.5, 0.1, 0.02], 10_000, 5000, seed=5)
        d = b.dsums[:, 0, :]
        assert np.all(np.diff(d, axis=1) >= 0)
        assert np.all(d[:, -1] <= b.counts[:, 0])


class TestExcursionForm:
    def test_matches_truncated_oracle(self, ssrw2):
        T = 2000
        probes = [[1], [2], [4]]
        es = est.estimate_h_excursion_grid(ssrw2, probes, replicas=100_000, truncation=T, seed=6)
        ref = dp_h_excursion(ssrw2, probes, T)
        for e, v in zip(es, ref.values):
            assert abs(e.value - v) < 4 * e.std_error + ref.overflow * T

    def test_at_least_one(self, lazy3):
        for e in est.estimate_h_excursion_grid(lazy3, [[1, 1], [3, 2]], replicas=2000, seed=7):
            assert e.value >= 1.0 and e.std_error >= 0.0

    def test_monotone_in_y(self, lazy3):
        a = est.estimate_h_excursion(lazy3, [1, 1], replicas=5000, seed=8)
        b = est.estimate_h_excursion(lazy3, [2, 2], replicas=5000, seed=8)
        assert a.value <= b.value

    def test_censoring_reported(self, ssrw2):
        e = est.estimate_h_excursion(ssrw2, [2], replicas=5000, truncation=50, seed=9)
        assert 0 < e.censored_fraction < 1

    def test_deterministic(self, lazy3):
        a = est.estimate_h_excursion(lazy3, [2, 1], replicas=3000, seed=10)
        b = est.estimate_h_excursion(lazy3, [2, 1], replicas=3000, seed=10)
        c = est.estimate_h_excursion(lazy3, [2, 1], replicas=3000, seed=11)
        assert a == b and a.value != c.value


class TestRenewalForm:
    def test_agrees_with_excursion_d2(self, ssrw2):
        r = est.estimate_h_renewal(ssrw2, [2], replicas=100_000, seed=12)
        e = est.estimate_h_excursion(ssrw2, [2], replicas=100_000, seed=12)
        assert combined_z(r, e) < 4

    def test_negative_drift_tail_vanishes(self):
        short = est.estimate_h_renewal(NEG2, [2], replicas=50_000, max_beta_events=20, seed=13)
        long = est.estimate_h_renewal(NEG2, [2], replicas=50_000, max_beta_events=1000, seed=13)
        assert long.value - short.value < 1e-3
        last = float(long.note.split("last summand ")[1])
        assert last < 1e-6

    def test_validation(self, ssrw2):
        with pytest.raises(ValueError):
            est.estimate_h_renewal(ssrw2, [2], max_beta_events=0)
        with pytest.raises(ValueError):
            est.estimate_h_renewal(ssrw2, [2], ladder="sideways")


class TestDriftNegative:
    def test_requires_negative_drift(self):
        law = independent_components([{-1: 0.4, 1: 0.6}] * 3)
        with pytest.raises(ValueError, match="negative drift"):
            est.estimate_h_drift_negative(law, [1, 1])

    def test_matches_exact_ratio(self):
        ref = exit_time_ratio(NEG2, [2])
        e = est.estimate_h_drift_negative(NEG2, [2], replicas=100_000, seed=14)
        assert abs(e.value - ref) < 4 * e.std_error

    def test_agrees_with_excursion(self):
        a = est.estimate_h_drift_negative(NEG2, [2], replicas=100_000, seed=15)
        b = est.estimate_h_excursion(NEG2, [2], replicas=100_000, seed=15)
        assert combined_z(a, b) < 4


class TestDriftPositive:
    def test_requires_positive_drift(self, ssrw2):
        with pytest.raises(ValueError, match="drift upward"):
            est.estimate_h_drift_positive(ssrw2, [2])
        with pytest.raises(ValueError):
            est.estimate_h_drift_positive(NEG2, [2])

    def test_survival_nested_in_horizon(self):
        starts = np.array([[3, 3], [0, 0]], dtype=np.int64)
        safe = est._renewal_safe(POS3, 1e-12)
        never = np.full(2, 2**62, dtype=np.int64)
        short = est._exit_times(POS3, starts, 200, 1, rng.DRIFT_POSITIVE, 5000, never)
        long = est._exit_times(POS3, starts, 2000, 1, rng.DRIFT_POSITIVE, 5000, never)
        assert np.all((long < 0) <= (short < 0))
        early = est._exit_times(POS3, starts, 2000, 1, rng.DRIFT_POSITIVE, 5000, safe)
        assert np.mean(early < 0) == pytest.approx(np.mean(long < 0), abs=0.01)

    def test_pilot_flattens(self):
        pilot = est.survival_pilot(POS3, [0, 0], 10_000, 5000, seed=2)
        assert pilot.flattened
        assert np.all(np.diff(pilot.survival) <= 0)

    def test_agrees_with_excursion(self):
        a = est.estimate_h_drift_positive(POS3, [3, 3], replicas=50_000, seed=16)
        b = est.estimate_h_excursion(POS3, [3, 3], replicas=20_000, seed=16)
        assert combined_z(a, b) < 4
        assert a.value >= 1.0
