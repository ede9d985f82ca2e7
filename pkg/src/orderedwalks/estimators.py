"""Monte Carlo estimators of the h-function in each of its forms.

Every estimator returns an :class:`HEstimate`.  Standard errors are
replica-level sample standard deviations over sqrt(replicas); ratio forms use
the delta method.  Forms draw from separate streams (see :mod:`rng`) except
the discounted and undiscounted excursion forms, which share paths on
purpose so that they can be compared pathwise.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import _kernels
from . import rng as _rng
from .ladder import BIG_INT, DEFAULT_EPS, run_excursions
from .walk import DRIFT_TOL, StepLaw, _as_state, lundberg_exponent

GEOMETRIC_RATIO = "geometric-ratio"
EXCURSION = "excursion"
RENEWAL = "renewal"
DRIFT_NEGATIVE = "drift-negative"
DRIFT_POSITIVE = "drift-positive"

DEFAULT_REPLICAS = 100_000
DEFAULT_TRUNCATION = 10_000
DEFAULT_MAX_BETA = 1_000
DEFAULT_HORIZON = 10_000


class FinitenessWarning(UserWarning):
    """None of the sufficient conditions for a finite h could be verified."""


@dataclass(frozen=True)
class HEstimate:
    value: float
    std_error: float
    replicas: int
    truncation: int
    censored_fraction: float
    form: str
    y: tuple
    c: float | None = None
    bias_bound: float = 0.0
    note: str = ""

    def row(self) -> dict:
        out = asdict(self)
        out["y"] = " ".join(str(v) for v in self.y)
        return out

    def interval(self, k: float = 4.0) -> tuple[float, float]:
        return self.value - k * self.std_error, self.value + k * self.std_error


def _gap(law: StepLaw, y: Sequence[float]) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if y.shape != (law.m,):
        raise ValueError(f"gap must have {law.m} components")
    return _as_state(law, y)


def _is_zero(y: np.ndarray) -> bool:
    return bool(np.all(y == 0))


def _exact_one(form: str, y: np.ndarray, replicas: int, truncation: int,
               c: float | None = None) -> HEstimate:
    return HEstimate(1.0, 0.0, replicas, truncation, 0.0, form, tuple(y.tolist()), c)


def _mean_se(x: np.ndarray) -> tuple[float, float]:
    n = len(x)
    mean = float(np.mean(x))
    se = float(np.std(x, ddof=1) / math.sqrt(n)) if n > 1 else math.inf
    return mean, se


def _ratio_se(a: np.ndarray, b: np.ndarray) -> tuple[float, float]:
    """mean(a)/mean(b) with its delta-method standard error."""
    ma, mb = float(np.mean(a)), float(np.mean(b))
    r = ma / mb
    n = len(a)
    resid = a - r * b
    se = float(np.std(resid, ddof=1) / math.sqrt(n) / abs(mb)) if n > 1 else math.inf
    return r, se


# ---------------------------------------------------------------------------
# finiteness screen


@dataclass(frozen=True)
class FinitenessScreen:
    negative_drift: bool
    positive_drift_and_escape: bool
    zero_mean_and_finite: bool

    @property
    def passed(self) -> bool:
        return self.negative_drift or self.positive_drift_and_escape or self.zero_mean_and_finite


def finiteness_screen(law: StepLaw) -> FinitenessScreen:
    """Check the sufficient conditions for finiteness of h that the law exposes.

    (a) some gap component drifts to minus infinity; (b) every gap component
    drifts to plus infinity and the first step can put every gap above 0,
    so that P(tau = infinity) > 0 from every start; (c) every gap component
    has zero drift and a common ascending ladder step has positive
    probability, so that the excursion is nondegenerate.
    """
    gd = law.gap_drift
    p_up = law.p_gap_step_positive()
    neg = bool(np.any(gd < -DRIFT_TOL))
    pos = bool(np.all(gd > DRIFT_TOL) and p_up > 0)
    zero = bool(np.all(np.abs(gd) <= DRIFT_TOL) and p_up > 0)
    return FinitenessScreen(neg, pos, zero)


# ---------------------------------------------------------------------------
# excursion forms


def _auto_truncation(c: float, eps: float = 1e-12) -> int:
    """Smallest T with sum_{n>T} e^{-cn} <= eps."""
    return max(1, math.ceil(math.log(1.0 / (eps * -math.expm1(-c))) / c))


def geometric_tail(c: float, truncation: int) -> float:
    return math.exp(-c * (truncation + 1)) / -math.expm1(-c)


def estimate_h_c_grid(law: StepLaw, probes: Sequence[Sequence[float]], c_list: Sequence[float],
                      replicas: int = DEFAULT_REPLICAS, truncation: int | None = None,
                      seed: int | None = None) -> dict[tuple[tuple, float], HEstimate]:
    """h_c for every (probe, c) pair from one batch of excursions.

    The truncation defaults to the smallest value making the geometric tail
    bound below 1e-12 for the smallest rate.  Results are keyed by
    ``(tuple(y), c)``.
    """
    if any(not c > 0 for c in c_list):
        raise ValueError("c must be > 0")
    if truncation is None:
        truncation = _auto_truncation(min(c_list))
    batch = run_excursions(law, probes, c_list, truncation, replicas, seed)
    cens = float(np.mean(batch.censored))
    out = {}
    for p, y in enumerate(batch.probes):
        key_y = tuple(y.tolist())
        for ci, c in enumerate(batch.c_list):
            if _is_zero(y):
                est = _exact_one(GEOMETRIC_RATIO, y, replicas, truncation, c)
            else:
                mean, se = _mean_se(batch.dsums[:, p, ci])
                est = HEstimate(1.0 + mean, se, replicas, truncation, cens, GEOMETRIC_RATIO,
                                key_y, c, geometric_tail(c, truncation))
            out[(key_y, c)] = est
    return out


def estimate_h_c(law: StepLaw, y: Sequence[float], c: float, replicas: int = DEFAULT_REPLICAS,
                 truncation: int | None = None, seed: int | None = None) -> HEstimate:
    """Discounted h_c(y) = 1 + E sum_{n<J_1} e^{-cn} 1{Ybar_{n-1} - Y_n < y}.

    ``bias_bound`` is the worst-case truncation bias
    e^{-c(T+1)} / (1 - e^{-c}).  Calls with the same seed reuse the same
    excursions, so estimates at different y or c are comparable pathwise.
    """
    if not c > 0:
        raise ValueError("c must be > 0")
    y = _gap(law, y)
    return estimate_h_c_grid(law, [y], [c], replicas, truncation, seed)[(tuple(y.tolist()), c)]


def estimate_h_excursion_grid(law: StepLaw, probes: Sequence[Sequence[float]],
                              replicas: int = DEFAULT_REPLICAS,
                              truncation: int = DEFAULT_TRUNCATION,
                              seed: int | None = None) -> list[HEstimate]:
    screen = finiteness_screen(law)
    if not screen.passed:
        warnings.warn("no finiteness condition verifiable for this law; "
                      "inspect censored_fraction", FinitenessWarning, stacklevel=3)
    batch = run_excursions(law, probes, (), truncation, replicas, seed)
    cens = float(np.mean(batch.censored))
    out = []
    for p, y in enumerate(batch.probes):
        if _is_zero(y):
            out.append(_exact_one(EXCURSION, y, replicas, truncation))
            continue
        mean, se = _mean_se(batch.counts[:, p])
        out.append(HEstimate(1.0 + mean, se, replicas, truncation, cens, EXCURSION,
                             tuple(y.tolist()), note="censoring can only under-count"))
    return out


def estimate_h_excursion(law: StepLaw, y: Sequence[float], replicas: int = DEFAULT_REPLICAS,
                         truncation: int = DEFAULT_TRUNCATION,
                         seed: int | None = None) -> HEstimate:
    """h(y) = 1 + E sum_{n<J_1} 1{Ybar_{n-1} - Y_n < y}.

    Excursions still running after ``truncation`` steps are cut; their
    share is ``censored_fraction``.  Cutting only removes nonnegative terms,
    so censoring biases the estimate downward.
    """
    return estimate_h_excursion_grid(law, [_gap(law, y)], replicas, truncation, seed)[0]


# ---------------------------------------------------------------------------
# renewal form


def _renewal_safe(law: StepLaw, eps: float) -> np.ndarray:
    out = []
    for k in range(law.m):
        theta = lundberg_exponent(law, k, "down")
        if theta == 0.0:
            out.append(BIG_INT if law.is_lattice else math.inf)
        elif math.isinf(theta):
            out.append(1)
        else:
            out.append(math.ceil(math.log(law.m / eps) / theta) + 1)
    return np.array(out, dtype=np.int64 if law.is_lattice else np.float64)


def estimate_h_renewal_grid(law: StepLaw, probes: Sequence[Sequence[float]],
                            replicas: int = DEFAULT_REPLICAS,
                            max_beta_events: int = DEFAULT_MAX_BETA,
                            seed: int | None = None, ladder: str = "weak",
                            truncation: int = DEFAULT_TRUNCATION,
                            eps: float = DEFAULT_EPS) -> list[HEstimate]:
    if max_beta_events < 1:
        raise ValueError("max_beta_events must be >= 1")
    if ladder not in ("weak", "strict"):
        raise ValueError("ladder must be 'weak' or 'strict'")
    seed = law.seed_base if seed is None else seed
    pr = np.vstack([_gap(law, y) for y in np.atleast_2d(np.asarray(probes, dtype=float))])
    key = _rng.stream_key(seed, _rng.RENEWAL)
    sums, last, _, _, status = _kernels.renewal(
        *law.kernel_args(), pr, ladder == "weak", int(max_beta_events), int(truncation),
        _renewal_safe(law, eps), key, 0, int(replicas))
    cens = float(np.mean((status == 1) | (status == 3)))
    out = []
    for p, y in enumerate(pr):
        if _is_zero(y):
            out.append(_exact_one(RENEWAL, y, replicas, truncation))
            continue
        mean, se = _mean_se(sums[:, p])
        tail = float(np.mean(last[:, p]))
        out.append(HEstimate(1.0 + mean, se, replicas, truncation, cens, RENEWAL,
                             tuple(y.tolist()), note=f"{ladder} ladder; last summand {tail:.3g}"))
    return out


def estimate_h_renewal(law: StepLaw, y: Sequence[float], replicas: int = DEFAULT_REPLICAS,
                       max_beta_events: int = DEFAULT_MAX_BETA, seed: int | None = None,
                       ladder: str = "weak", truncation: int = DEFAULT_TRUNCATION) -> HEstimate:
    """h(y) = 1 + sum_n P(-min_{1..beta_n} Y < y) over descending ladder times beta_n.

    The partial sum over the first ``max_beta_events`` ladder times is
    estimated; the note reports the last summand as a tail diagnostic.
    ``ladder='weak'`` counts ties with the previous minimum as ladder
    events, which is what makes the identity hold on lattices;
    ``'strict'`` uses strict descents only.
    """
    return estimate_h_renewal_grid(law, [_gap(law, y)], replicas, max_beta_events, seed,
                                   ladder, truncation)[0]


# ---------------------------------------------------------------------------
# drift forms


def _exit_times(law: StepLaw, starts: np.ndarray, horizon: int, seed: int, stream: str,
                replicas: int, safe: np.ndarray) -> np.ndarray:
    key = _rng.stream_key(seed, stream)
    return _kernels.exit_times(*law.kernel_args(), starts, int(horizon), safe, key, 0,
                               int(replicas))


def estimate_h_drift_negative(law: StepLaw, y: Sequence[float],
                              replicas: int = DEFAULT_REPLICAS,
                              truncation: int = DEFAULT_TRUNCATION,
                              seed: int | None = None) -> HEstimate:
    """h(y) = E_y tau / E_0 tau when some gap component drifts to minus infinity.

    Both exit times are driven by the same increments; unexited paths are
    cut at ``truncation`` and counted at that value.
    """
    if not np.any(law.gap_drift < -DRIFT_TOL):
        raise ValueError("drift-negative form needs a gap component with negative drift")
    y = _gap(law, y)
    if _is_zero(y):
        return _exact_one(DRIFT_NEGATIVE, y, replicas, truncation)
    seed = law.seed_base if seed is None else seed
    starts = np.vstack([y, np.zeros_like(y)])
    never = np.full(law.m, BIG_INT if law.is_lattice else math.inf,
                    dtype=np.int64 if law.is_lattice else np.float64)
    tau = _exit_times(law, starts, truncation, seed, _rng.DRIFT_NEGATIVE, replicas, never)
    cens = float(np.mean(tau[:, 0] < 0))
    t = np.where(tau < 0, truncation, tau).astype(np.float64)
    r, se = _ratio_se(t[:, 0], t[:, 1])
    return HEstimate(r, se, replicas, truncation, cens, DRIFT_NEGATIVE, tuple(y.tolist()))


@dataclass(frozen=True)
class SurvivalPilot:
    n: np.ndarray
    survival: np.ndarray
    relative_change: float
    flattened: bool


def survival_pilot(law: StepLaw, y: Sequence[float], horizon: int, replicas: int,
                   seed: int | None = None, eps: float = DEFAULT_EPS) -> SurvivalPilot:
    """Empirical P_y(tau > n) on a log grid, and its change over the last decade."""
    seed = law.seed_base if seed is None else seed
    y = _gap(law, y)
    tau = _exit_times(law, y[None, :], horizon, seed, _rng.DRIFT_POSITIVE + "-pilot", replicas,
                      _renewal_safe(law, eps))[:, 0]
    grid = np.unique(np.geomspace(1, horizon, 25).astype(np.int64))
    surv = np.array([np.mean((tau < 0) | (tau > n)) for n in grid])
    s_h = surv[-1]
    s_10 = float(np.mean((tau < 0) | (tau > max(1, horizon // 10))))
    change = abs(s_10 - s_h) / s_h if s_h > 0 else math.inf
    return SurvivalPilot(grid, surv, change, change < 0.01)


def estimate_h_drift_positive(law: StepLaw, y: Sequence[float],
                              replicas: int = DEFAULT_REPLICAS,
                              horizon: int = DEFAULT_HORIZON, seed: int | None = None,
                              pilot_replicas: int = 10_000,
                              eps: float = DEFAULT_EPS) -> HEstimate:
    """h(y) = P_y(tau = inf) / P_0(tau = inf) when every gap drifts to plus infinity.

    P(tau = inf) is approximated by P(tau > horizon) from both starts on the
    same increments; paths whose gaps all sit far enough above 0 that a later
    exit has probability below ``eps`` are counted as survivors early.  A
    pilot run from 0 checks that the survival curve has flattened (relative
    change below 1% over the last decade of n).
    """
    if not np.all(law.gap_drift > DRIFT_TOL):
        raise ValueError("drift-positive form needs every gap component to drift upward")
    y = _gap(law, y)
    if _is_zero(y):
        return _exact_one(DRIFT_POSITIVE, y, replicas, horizon)
    seed = law.seed_base if seed is None else seed
    pilot = survival_pilot(law, np.zeros_like(y), horizon, pilot_replicas, seed, eps)
    if pilot.survival[-1] == 0:
        raise ValueError("pilot run found P(tau > horizon) = 0 from the origin")
    starts = np.vstack([y, np.zeros_like(y)])
    tau = _exit_times(law, starts, horizon, seed, _rng.DRIFT_POSITIVE, replicas,
                      _renewal_safe(law, eps))
    alive = (tau < 0).astype(np.float64)
    r, se = _ratio_se(alive[:, 0], alive[:, 1])
    cens = float(np.mean(tau[:, 0] == -1))
    note = f"pilot relative change {pilot.relative_change:.3g}"
    if not pilot.flattened:
        note += " (not flattened)"
        warnings.warn("survival curve has not flattened at the horizon", RuntimeWarning,
                      stacklevel=2)
    return HEstimate(r, se, replicas, horizon, cens, DRIFT_POSITIVE, tuple(y.tolist()), note=note)


FORMS = {
    GEOMETRIC_RATIO: estimate_h_c,
    EXCURSION: estimate_h_excursion,
    RENEWAL: estimate_h_renewal,
    DRIFT_NEGATIVE: estimate_h_drift_negative,
    DRIFT_POSITIVE: estimate_h_drift_positive,
}
