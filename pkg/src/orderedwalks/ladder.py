"""Common ascending ladder times, descending ladder times and excursions.

``J_1 < J_2 < ...`` are the times at which every gap component strictly
exceeds its own running maximum at once.  ``beta_1 < beta_2 < ...`` are the
times at which at least one component reaches a new strict running minimum
(optionally a weak one, i.e. ties count).
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import _kernels
from . import rng as _rng
from .walk import Censored, GapPath, StepLaw, _as_state, lundberg_exponent

DEFAULT_EPS = 1e-12
BIG_INT = 2**62


@dataclass(frozen=True)
class LadderEvent:
    n: int
    is_J: bool
    is_beta: bool
    components: tuple[int, ...]
    """Components with a descending ladder event at ``n``."""


@dataclass
class LadderClock:
    """Online ladder detector fed one gap value at a time.

    Parameters
    ----------
    y0
        Starting gap Y_0.
    weak
        If true a component also has a descending ladder event when it ties
        its previous minimum.  The default is strict.
    """

    y0: Sequence[float]
    weak: bool = False
    n: int = 0
    running_max: np.ndarray = field(init=False)
    low_before: np.ndarray = field(init=False)
    running_min: np.ndarray | None = field(init=False, default=None)
    j_times: list[int] = field(init=False, default_factory=list)
    beta_times: list[int] = field(init=False, default_factory=list)

    def __post_init__(self) -> None:
        y0 = np.array(self.y0)
        self.y0 = y0
        self.running_max = y0.copy()
        self.low_before = y0.copy()

    def beta(self, i: int) -> int:
        """beta_i, with the convention beta_0 = 1."""
        return 1 if i == 0 else self.beta_times[i - 1]

    def advance(self, y_n: Sequence[float]) -> LadderEvent:
        y = np.asarray(y_n)
        self.n += 1
        is_j = bool(np.all(self.running_max < y))
        if self.weak:
            desc = y <= self.low_before
        else:
            desc = y < self.low_before
        comps = tuple(int(k) for k in np.flatnonzero(desc))
        self.running_max = np.maximum(self.running_max, y)
        self.low_before = np.minimum(self.low_before, y)
        self.running_min = y.copy() if self.running_min is None else np.minimum(self.running_min, y)
        if is_j:
            self.j_times.append(self.n)
        if comps:
            self.beta_times.append(self.n)
        return LadderEvent(self.n, is_j, bool(comps), comps)


def replay(path: GapPath, weak: bool = False) -> tuple[LadderClock, list[LadderEvent]]:
    """Feed a stored path through a fresh clock."""
    clock = LadderClock(path.start, weak=weak)
    events = [clock.advance(v) for v in path.values[1:]]
    return clock, events


def tau_of(path: GapPath) -> int | Censored:
    """Exit index of ``path`` (first n >= 1 with a gap <= 0) or censored."""
    vals = path.values[1:]
    bad = np.flatnonzero(np.any(vals <= 0, axis=1))
    if bad.size:
        return int(bad[0]) + 1
    return Censored(len(vals))


def excursion_stop(law: StepLaw, probes: np.ndarray, eps: float = DEFAULT_EPS) -> np.ndarray:
    """Distance below the running max beyond which an excursion may be cut.

    Only components with negative drift get a finite threshold: once such a
    component is ``L`` below its maximum with ``exp(-theta L) <= eps``, the
    chance that it ever climbs back within probe range is at most ``eps``.
    """
    ymax = probes.max(axis=0) if len(probes) else np.zeros(law.m)
    out = []
    for k in range(law.m):
        theta = lundberg_exponent(law, k, "up")
        if theta == 0.0:
            out.append(BIG_INT if law.is_lattice else math.inf)
        else:
            extra = 0.0 if math.isinf(theta) else math.log(1.0 / eps) / theta
            out.append(ymax[k] + math.ceil(extra) + 1)
    dtype = np.int64 if law.is_lattice else np.float64
    return np.array(out, dtype=dtype)


def _probe_array(law: StepLaw, probes: Sequence[Sequence[float]]) -> np.ndarray:
    arr = np.atleast_2d(np.asarray(probes, dtype=np.float64))
    if arr.shape[1] != law.m:
        raise ValueError(f"probe gaps must have {law.m} components")
    if np.any(arr < 0):
        raise ValueError("probe gaps must be nonnegative")
    return np.vstack([_as_state(law, row) for row in arr]) if len(arr) else arr


@dataclass(frozen=True)
class ExcursionRecord:
    """One excursion of the gap walk from 0 up to J_1 (or its truncation)."""

    J1: int | Censored
    probes: np.ndarray
    c_list: tuple[float, ...]
    indicator_sum: np.ndarray
    discounted_sum: np.ndarray
    steps: int
    drifted_away: bool = False


@dataclass(frozen=True)
class ExcursionBatch:
    """Per-replica excursion sums, arrays indexed by replica first."""

    probes: np.ndarray
    c_list: tuple[float, ...]
    truncation: int
    counts: np.ndarray
    dsums: np.ndarray
    steps: np.ndarray
    status: np.ndarray
    seed: int
    first_replica: int = 0

    @property
    def replicas(self) -> int:
        return len(self.steps)

    @property
    def censored(self) -> np.ndarray:
        return self.status == 1

    def record(self, i: int) -> ExcursionRecord:
        st = int(self.status[i])
        j1: int | Censored = int(self.steps[i]) if st == 0 else Censored(int(self.steps[i]))
        return ExcursionRecord(j1, self.probes, self.c_list, self.counts[i], self.dsums[i],
                               int(self.steps[i]), st == 2)

    def to_csv(self, path: str | Path) -> None:
        """One row per (replica, probe): J1, censored flag and the sums."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["replica", "probe", "J1", "censored", "indicator_sum"]
                       + [f"discounted_sum_c{c!r}" for c in self.c_list])
            for i in range(self.replicas):
                j1 = int(self.steps[i]) if self.status[i] == 0 else ""
                for p, y in enumerate(self.probes):
                    w.writerow([self.first_replica + i, " ".join(map(str, y.tolist())), j1,
                                int(self.status[i] == 1), repr(float(self.counts[i, p]))]
                               + [repr(float(v)) for v in self.dsums[i, p]])


def run_excursions(law: StepLaw, probes: Sequence[Sequence[float]], c_list: Sequence[float] = (),
                   truncation: int = 10_000, replicas: int = 1, seed: int | None = None,
                   first_replica: int = 0, stream: str = _rng.EXCURSION,
                   eps: float = DEFAULT_EPS) -> ExcursionBatch:
    """Simulate ``replicas`` excursions, each serving every probe and rate.

    Replica ``first_replica + i`` always sees the same increments for a given
    ``(seed, stream)``, whatever the probes, rates or truncation.
    """
    if truncation < 1:
        raise ValueError("truncation must be >= 1")
    if any(not c > 0 for c in c_list):
        raise ValueError("rates c must be > 0")
    seed = law.seed_base if seed is None else seed
    pr = _probe_array(law, probes)
    qs = np.exp(-np.asarray(c_list, dtype=np.float64))
    stop = excursion_stop(law, pr, eps)
    key = _rng.stream_key(seed, stream)
    counts, dsums, steps, status = _kernels.excursions(
        *law.kernel_args(), pr, qs, int(truncation), stop, key, int(first_replica), int(replicas))
    return ExcursionBatch(pr, tuple(float(c) for c in c_list), int(truncation), counts, dsums,
                          steps, status, seed, first_replica)


def run_excursion(law: StepLaw, probes: Sequence[Sequence[float]], c_list: Sequence[float] = (),
                  truncation: int = 10_000, seed: int | None = None, replica: int = 0,
                  stream: str = _rng.EXCURSION) -> ExcursionRecord:
    """Single excursion; replica ``replica`` of :func:`run_excursions`."""
    batch = run_excursions(law, probes, c_list, truncation, 1, seed, replica, stream)
    return batch.record(0)


def ladder_gaps(law: StepLaw, n_j: int, truncation: int, replicas: int, seed: int | None = None,
                stream: str = _rng.LADDER) -> np.ndarray:
    """J_1, J_2 - J_1, ... per replica; -1 marks censored segments."""
    seed = law.seed_base if seed is None else seed
    key = _rng.stream_key(seed, stream)
    return _kernels.ladder_gaps(*law.kernel_args(), law.m, int(n_j), int(truncation), key, 0,
                                int(replicas))
