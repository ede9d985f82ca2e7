"""The conditioned walk: h-transform chain, geometric rejection, harmonicity.

States are d-dimensional integer vectors in the Weyl chamber; h only depends
on the gap vector of a state.
"""
from __future__ import annotations

import csv
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import _kernels
from . import rng as _rng
from .estimators import HEstimate
from .oracle import HTable
from .walk import StepLaw, gap_of, in_weyl

log = logging.getLogger(__name__)

ROW_TOL = 1e-6
H_TRANSFORM = "h-transform"
GEOMETRIC_REJECTION = "geometric-rejection"


class RowMassError(ValueError):
    """Row mass of the h-transform exceeds 1 beyond what noise explains."""


@dataclass(frozen=True)
class HFunction:
    """h on the gap box [0, ymax]^m, with standard errors.

    ``values`` and ``errors`` are arrays of shape ``(ymax+1,)*m`` indexed by
    gap vectors in the walk's own units.  An optional ``estimator`` is
    called (and cached) for gaps outside the table.
    """

    values: np.ndarray
    errors: np.ndarray
    provenance: str
    estimator: Callable[[tuple], HEstimate] | None = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def m(self) -> int:
        return self.values.ndim

    @property
    def ymax(self) -> int:
        return self.values.shape[0] - 1

    @classmethod
    def from_table(cls, values: np.ndarray, errors: np.ndarray | None = None,
                   provenance: str = "table") -> "HFunction":
        values = np.asarray(values, dtype=np.float64)
        errors = np.zeros_like(values) if errors is None else np.asarray(errors, dtype=np.float64)
        if errors.shape != values.shape:
            raise ValueError("errors must match values")
        return cls(values, errors, provenance)

    @classmethod
    def from_oracle(cls, table: HTable) -> "HFunction":
        return cls.from_table(table.values, table.errors, table.provenance)

    @classmethod
    def from_function(cls, f: Callable[[tuple], float], m: int, ymax: int,
                      provenance: str = "function") -> "HFunction":
        idx = list(np.ndindex(*(ymax + 1,) * m))
        vals = np.array([f(y) for y in idx], dtype=np.float64).reshape((ymax + 1,) * m)
        return cls.from_table(vals, None, provenance)

    @classmethod
    def from_estimates(cls, estimates: Mapping[tuple, HEstimate], m: int, ymax: int,
                       provenance: str = "monte-carlo") -> "HFunction":
        vals = np.full((ymax + 1,) * m, np.nan)
        errs = np.full((ymax + 1,) * m, np.nan)
        for y, est in estimates.items():
            vals[tuple(int(v) for v in y)] = est.value
            errs[tuple(int(v) for v in y)] = est.std_error
        return cls(vals, errs, provenance)

    def __call__(self, y: Sequence[int]) -> tuple[float, float]:
        y = tuple(int(v) for v in y)
        if len(y) != self.m:
            raise ValueError(f"gap must have {self.m} components")
        if all(0 <= v <= self.ymax for v in y):
            v, e = self.values[y], self.errors[y]
            if not np.isnan(v):
                return float(v), float(e)
        if self.estimator is None:
            raise KeyError(f"h not available at gap {y}")
        if y not in self._cache:
            est = self.estimator(y)
            self._cache[y] = (est.value, est.std_error)
        return self._cache[y]

    def check(self, k: float = 4.0) -> list[str]:
        """Violations of h(0)=1, h>=1 on positive gaps and monotonicity (within k sigma)."""
        problems = []
        origin = (0,) * self.m
        if self.values[origin] != 1.0:
            problems.append(f"h(0) = {self.values[origin]!r}")
        for y in np.ndindex(*self.values.shape):
            v, e = self.values[y], self.errors[y]
            if np.isnan(v):
                continue
            if min(y) > 0 and v < 1.0 - k * e:
                problems.append(f"h{y} = {v:.6g} < 1")
            for axis in range(self.m):
                if y[axis] < self.ymax:
                    z = list(y)
                    z[axis] += 1
                    w, f = self.values[tuple(z)], self.errors[tuple(z)]
                    if not np.isnan(w) and w < v - k * math.hypot(e, f):
                        problems.append(f"h not monotone between {y} and {tuple(z)}")
        return problems


@dataclass(frozen=True)
class TransitionRow:
    """One row of the h-transform kernel from state ``w``."""

    w: tuple
    targets: np.ndarray
    weights: np.ndarray
    sigma: float

    @property
    def mass(self) -> float:
        return math.fsum(self.weights)

    @property
    def killing(self) -> float:
        return max(0.0, 1.0 - self.mass)


def _require_lattice(law: StepLaw) -> None:
    if not law.is_lattice:
        raise ValueError("the h-transform is realized for lattice laws only")


def transition_row(law: StepLaw, h: HFunction, w: Sequence[int]) -> TransitionRow:
    """Weights 1{z in W} h(z)/h(w) p(w, z) over the support of the step law."""
    _require_lattice(law)
    w = np.asarray(w, dtype=np.int64)
    if not in_weyl(w):
        raise ValueError(f"state {tuple(w)} is not in the Weyl chamber")
    hw, ew = h(gap_of(w))
    targets = w + law.atoms
    keep = np.all(np.diff(targets, axis=1) > 0, axis=1)
    weights = np.zeros(len(targets))
    var = 0.0
    for i in np.flatnonzero(keep):
        hz, ez = h(np.diff(targets[i]))
        weights[i] = law.probs[i] * hz / hw
        var += (law.probs[i] * ez / hw) ** 2
    mass = math.fsum(weights)
    var += (mass * ew / hw) ** 2
    return TransitionRow(tuple(w.tolist()), targets, weights, math.sqrt(var))


def _check_row(row: TransitionRow, k: float = 4.0) -> None:
    excess = row.mass - 1.0
    if excess <= 0:
        return
    if excess > ROW_TOL + k * row.sigma:
        raise RowMassError(f"row mass {row.mass!r} at {row.w} exceeds 1 beyond noise")
    if excess > 1e-12:
        log.info("row mass %.12g at %s clamped; killing mass set to 0", row.mass, row.w)


def h_transform_step(law: StepLaw, h: HFunction, w: Sequence[int],
                     rng: np.random.Generator) -> np.ndarray | None:
    """One step of the h-transform chain from ``w``; ``None`` means killed.

    Raises :class:`RowMassError` if the row mass exceeds 1 by more than
    ``1e-6`` plus four standard errors of the row (zero for exact tables).
    Smaller overshoots are clamped and logged.
    """
    row = transition_row(law, h, w)
    _check_row(row)
    total = max(row.mass, 1.0)
    probs = np.append(row.weights, total - row.mass) / total
    i = rng.choice(len(probs), p=probs)
    return None if i == len(row.weights) else row.targets[i]


@dataclass(frozen=True)
class Residual:
    w: tuple
    value: float
    std_error: float

    @property
    def harmonic(self) -> bool:
        return abs(self.value) <= 4.0 * self.std_error + 1e-12

    @property
    def strictly_subharmonic(self) -> bool:
        return self.value < -4.0 * self.std_error - 1e-12


def harmonicity_residual(law: StepLaw, h: HFunction, w: Sequence[int]) -> Residual:
    """E_w[h(X_1); tau > 1] - h(w) with a propagated standard error."""
    _require_lattice(law)
    w = np.asarray(w, dtype=np.int64)
    hw, ew = h(gap_of(w))
    terms = []
    var = ew**2
    for a, p in zip(law.atoms, law.probs):
        z = w + a
        if in_weyl(z):
            hz, ez = h(gap_of(z))
            terms.append(p * hz)
            var += (p * ez) ** 2
    return Residual(tuple(w.tolist()), math.fsum(terms) - hw, math.sqrt(var))


def state_of_gap(y: Sequence[int], x1: int = 0) -> np.ndarray:
    return np.concatenate([[x1], x1 + np.cumsum(np.asarray(y, dtype=np.int64))])


def interior_gaps(law: StepLaw, h: HFunction) -> list[tuple]:
    """Positive gaps whose whole one-step neighbourhood lies inside the table."""
    lo = np.minimum(law.gap_atoms.min(axis=0), 0)
    hi = np.maximum(law.gap_atoms.max(axis=0), 0)
    out = []
    for y in np.ndindex(*h.values.shape):
        ya = np.array(y)
        if np.all(ya > 0) and np.all(ya + hi <= h.ymax) and np.all(ya + lo >= 0):
            out.append(y)
    return out


@dataclass(frozen=True)
class ResidualScan:
    residuals: list[Residual]

    @property
    def harmonic_fraction(self) -> float:
        return float(np.mean([r.harmonic for r in self.residuals]))

    @property
    def subharmonic_fraction(self) -> float:
        return float(np.mean([r.strictly_subharmonic for r in self.residuals]))

    @property
    def classification(self) -> str:
        if all(r.harmonic for r in self.residuals):
            return "harmonic"
        if self.subharmonic_fraction >= 0.9:
            return "subharmonic"
        return "inconclusive"


def residual_scan(law: StepLaw, h: HFunction) -> ResidualScan:
    return ResidualScan([harmonicity_residual(law, h, state_of_gap(y))
                         for y in interior_gaps(law, h)])


# ---------------------------------------------------------------------------
# path samplers


@dataclass(frozen=True)
class ConditionedPath:
    states: np.ndarray
    killed_at: int | None
    mode: str
    attempts: int = 1


@dataclass(frozen=True)
class ConditionedBatch:
    """Paths of shape (n, T+1, d); ``killed_at[i] = -1`` when alive at T."""

    paths: np.ndarray
    killed_at: np.ndarray
    mode: str
    attempts: np.ndarray

    def __len__(self) -> int:
        return len(self.paths)

    def path(self, i: int) -> ConditionedPath:
        k = int(self.killed_at[i])
        return ConditionedPath(self.paths[i] if k < 0 else self.paths[i, :k],
                               None if k < 0 else k, self.mode, int(self.attempts[i]))

    def path_counts(self) -> Counter:
        """Frequencies of the complete (unkilled) paths, keyed by tuples."""
        alive = self.killed_at < 0
        flat = self.paths[alive].reshape(int(alive.sum()), -1)
        return Counter(map(tuple, flat.tolist()))

    def to_csv(self, path: str | Path) -> None:
        n, t1, d = self.paths.shape
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["replica", "step"] + [f"x{k + 1}" for k in range(d)] + ["killed"])
            for i in range(n):
                k = int(self.killed_at[i])
                last = t1 if k < 0 else k
                for s in range(last):
                    w.writerow([i, s] + self.paths[i, s].tolist() + [0])
                if k >= 0:
                    w.writerow([i, k] + [""] * d + [1])


def sample_h_transform(law: StepLaw, h: HFunction, x0: Sequence[int], T: int, n: int,
                       seed: int | None = None) -> ConditionedBatch:
    """``n`` independent runs of the h-transform chain for ``T`` steps.

    Rows are computed once per visited gap and cached.  ``killed_at`` is the
    step at which the chain was killed, or -1.
    """
    _require_lattice(law)
    x0 = np.asarray(x0, dtype=np.int64)
    if not in_weyl(x0):
        raise ValueError("x0 must be in the Weyl chamber")
    seed = law.seed_base if seed is None else seed
    gen = _rng.generator(seed, _rng.H_TRANSFORM)
    rows: dict[tuple, np.ndarray] = {}
    k_atoms = len(law.atoms)

    def cdf_of(y: tuple) -> np.ndarray:
        if y not in rows:
            row = transition_row(law, h, state_of_gap(y))
            _check_row(row)
            rows[y] = np.cumsum(row.weights / max(row.mass, 1.0))
        return rows[y]

    paths = np.zeros((n, T + 1, law.d), dtype=np.int64)
    paths[:, 0] = x0
    killed = np.full(n, -1, dtype=np.int64)
    alive = np.ones(n, dtype=bool)
    for t in range(1, T + 1):
        u = gen.random(n)
        idx = np.flatnonzero(alive)
        gaps = np.diff(paths[idx, t - 1], axis=1)
        # gaps are positive here: encode each row as one mixed-radix integer
        base = int(gaps.max()) + 1 if len(gaps) else 1
        codes = gaps @ (base ** np.arange(law.m - 1, -1, -1, dtype=np.int64))
        uniq, first, inv = np.unique(codes, return_index=True, return_inverse=True)
        table = np.vstack([cdf_of(tuple(gaps[i].tolist())) for i in first]) if len(idx) \
            else np.zeros((0, k_atoms))
        choice = (u[idx, None] >= table[inv]).sum(axis=1)
        dead = choice >= k_atoms
        killed[idx[dead]] = t
        alive[idx[dead]] = False
        paths[:, t] = paths[:, t - 1]
        live = idx[~dead]
        paths[live, t] += law.atoms[choice[~dead]]
    if np.any(np.diff(paths[killed < 0], axis=2) <= 0):
        raise AssertionError("h-transform chain left the Weyl chamber")
    return ConditionedBatch(paths, killed, H_TRANSFORM, np.ones(n, dtype=np.int64))


def sample_conditioned_geometric_batch(law: StepLaw, x0: Sequence[float], c: float, T: int,
                                       n: int, seed: int | None = None,
                                       max_attempts: int = 1_000_000,
                                       first_replica: int = 0) -> ConditionedBatch:
    """``n`` accepted draws of the walk conditioned to stay ordered up to N >= T.

    N is an independent geometric time with P(N >= k) = e^{-ck}.  Each
    returned path is restricted to times 0..T.
    """
    if not c > 0:
        raise ValueError("c must be > 0")
    if T < 1:
        raise ValueError("T must be >= 1")
    dtype = np.int64 if law.is_lattice else np.float64
    x0 = np.asarray(x0, dtype=dtype)
    if not in_weyl(x0):
        raise ValueError("x0 must be in the Weyl chamber")
    seed = law.seed_base if seed is None else seed
    key = _rng.stream_key(seed, _rng.REJECTION)
    paths, attempts, ok = _kernels.geometric_rejection(
        *law.state_kernel_args(), x0, -float(c), int(T), int(max_attempts), key,
        int(first_replica), int(n))
    if not np.all(ok):
        bad = int(np.argmin(ok))
        rate = float(ok.sum()) / float(attempts.sum())
        raise RuntimeError(f"replica {first_replica + bad} not accepted within {max_attempts} "
                           f"attempts (observed acceptance rate {rate:.3g})")
    return ConditionedBatch(paths, np.full(n, -1, dtype=np.int64), GEOMETRIC_REJECTION, attempts)


def sample_conditioned_geometric(law: StepLaw, x0: Sequence[float], c: float, T: int,
                                 seed: int | None = None, max_attempts: int = 1_000_000,
                                 replica: int = 0) -> ConditionedPath:
    """A single accepted path; see :func:`sample_conditioned_geometric_batch`."""
    return sample_conditioned_geometric_batch(law, x0, c, T, 1, seed, max_attempts,
                                              replica).path(0)


def empirical_tv(a: ConditionedBatch, b: ConditionedBatch) -> float:
    """Total variation distance between the empirical path laws of two batches."""
    ca, cb = a.path_counts(), b.path_counts()
    na, nb = sum(ca.values()), sum(cb.values())
    keys = set(ca) | set(cb)
    return 0.5 * math.fsum(abs(ca[k] / na - cb[k] / nb) for k in keys)
