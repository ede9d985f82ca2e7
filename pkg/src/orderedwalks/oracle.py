"""Exact computations on bounded integer gap lattices.

All routines work in reduced gap units: component k of the gap lattice is
divided by ``g_k``, the gcd of its increments, and a starting gap ``y`` is
mapped to ``ceil(y / g_k)``.  This preserves the events ``Y > 0`` and
``Y < y`` exactly.
"""
from __future__ import annotations

import itertools
import math
import warnings
from collections import defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from functools import reduce
from typing import Mapping, Sequence

import numpy as np

from . import _kernels
from .walk import StepLaw

DEFAULT_MAX_CELLS = 1 << 23
ENUMERATION_LIMIT = 10**8


class OracleWarning(UserWarning):
    """An oracle result did not reach its requested precision."""


def _require_lattice(law: StepLaw) -> None:
    if not law.is_lattice:
        raise ValueError("exact oracles need a lattice law")


@dataclass(frozen=True)
class ReducedLattice:
    """Gap increments divided by their per-component gcd."""

    g: np.ndarray
    atoms: np.ndarray
    probs: np.ndarray

    @classmethod
    def of(cls, law: StepLaw) -> "ReducedLattice":
        _require_lattice(law)
        g = np.array([reduce(math.gcd, (abs(int(v)) for v in col)) for col in law.gap_atoms.T],
                     dtype=np.int64)
        return cls(g, law.gap_atoms // g, law.gap_probs)

    @property
    def m(self) -> int:
        return len(self.g)

    @property
    def reach(self) -> int:
        return max(1, int(np.abs(self.atoms).max()))

    @property
    def sigma(self) -> float:
        mean = self.probs @ self.atoms
        return float(np.sqrt((self.probs @ (self.atoms - mean) ** 2).max()))

    @property
    def speed(self) -> float:
        return float(np.abs(self.probs @ self.atoms).max())

    def reduce(self, y: Sequence[float]) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64).reshape(-1)
        if y.shape != (self.m,):
            raise ValueError(f"gap must have {self.m} components")
        if np.any(y < 0):
            raise ValueError("gap components must be nonnegative")
        return np.ceil(y / self.g).astype(np.int64)

    def default_box(self, u0: np.ndarray, n: int, k_sigma: float = 8.0) -> int:
        return int(u0.max() + self.reach + math.ceil(k_sigma * self.sigma * math.sqrt(n)
                                                     + self.speed * n) + 4)


# ---------------------------------------------------------------------------
# survival tables


@dataclass
class DpTable:
    """Probability mass of the killed gap walk on the box [1, M]^m.

    Reduced coordinates run over ``[-w, M + w]`` per axis (``w`` is the largest
    jump), flattened with a margin so that every stencil read stays in range.
    Cells with some coordinate <= 0 collect exited mass, cells above ``M``
    collect overflow; both are emptied after each step.
    """

    lattice: ReducedLattice
    M: int
    n: int = 0
    absorbed: float = 0.0
    overflow: float = 0.0
    mass: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        m, w = self.lattice.m, self.lattice.reach
        self.w = w
        self.side = self.M + 2 * w + 1
        self.strides = np.array([self.side ** (m - 1 - k) for k in range(m)], dtype=np.int64)
        self.offs = self.lattice.atoms @ self.strides
        self.margin = int(np.abs(self.offs).max()) + 1
        n_cells = self.side**m
        self.size = n_cells + 2 * self.margin
        coords = np.indices((self.side,) * m).reshape(m, -1).T - w
        low = np.any(coords <= 0, axis=1)
        high = ~low & np.any(coords > self.M, axis=1)
        flat = self.margin + np.arange(n_cells)
        self.low_idx = flat[low]
        self.high_idx = flat[high]
        self.mass = np.zeros(self.size)

    @staticmethod
    def cells(lattice: ReducedLattice, M: int) -> int:
        return (M + 2 * lattice.reach + 1) ** lattice.m

    def index(self, u: Sequence[int]) -> int:
        u = np.asarray(u, dtype=np.int64)
        if np.any(u < -self.w) or np.any(u > self.M + self.w):
            raise IndexError("cell outside the padded box")
        return int(self.margin + (u + self.w) @ self.strides)

    def place(self, u0: Sequence[int], p: float = 1.0) -> None:
        self.mass[self.index(u0)] += p

    def run(self, n_steps: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Advance ``n_steps``; return alive, absorbed and overflow curves."""
        alive, absorbed, overflow, mass = _kernels.forward_survival(
            self.mass, self.offs, self.lattice.probs, self.margin, self.size - self.margin,
            self.low_idx, self.high_idx, int(n_steps))
        absorbed += self.absorbed
        overflow += self.overflow
        self.mass = mass
        self.n += n_steps
        self.absorbed = float(absorbed[-1])
        self.overflow = float(overflow[-1])
        return alive, absorbed, overflow

    def alive(self) -> float:
        return math.fsum(self.mass)

    def conservation_error(self) -> float:
        return abs(self.alive() + self.absorbed + self.overflow - 1.0)

    def interior(self) -> np.ndarray:
        """Mass on [1, M]^m as an m-dimensional array."""
        m, w = self.lattice.m, self.w
        grid = self.mass[self.margin:self.size - self.margin].reshape((self.side,) * m)
        return grid[(slice(w + 1, w + 1 + self.M),) * m]


@dataclass(frozen=True)
class SurvivalResult:
    """P_y(tau > n) with bounds: ``probability <= truth <= probability + overflow_bound``."""

    y0: tuple
    n: int
    probability: float
    overflow_bound: float
    M: int
    flagged: bool
    curve: np.ndarray
    overflow_curve: np.ndarray
    exact: Fraction | None = None

    @property
    def upper(self) -> float:
        return self.probability + self.overflow_bound


def _exact_survival(law: StepLaw, y0: Sequence[int], n: int) -> list[Fraction]:
    probs = [Fraction(float(p)) for p in law.gap_probs]
    atoms = [tuple(int(v) for v in a) for a in law.gap_atoms]
    state: dict[tuple[int, ...], Fraction] = {tuple(int(v) for v in y0): Fraction(1)}
    curve = [Fraction(1)]
    for _ in range(n):
        nxt: dict[tuple[int, ...], Fraction] = defaultdict(Fraction)
        for y, p in state.items():
            for a, q in zip(atoms, probs):
                z = tuple(yi + ai for yi, ai in zip(y, a))
                if min(z) > 0:
                    nxt[z] += p * q
        state = nxt
        curve.append(sum(state.values(), Fraction(0)))
    return curve


def dp_survival(law: StepLaw, y0: Sequence[float], n: int, M: int | None = None, *,
                exact: bool = False, tol: float = 1e-12,
                max_cells: int = DEFAULT_MAX_CELLS) -> SurvivalResult:
    """P_{y0}(all gaps > 0 at steps 1..n) for a lattice law.

    The box ``[1, M]^(d-1)`` (reduced units) is doubled until the mass that
    left it is below ``tol`` or the next box would exceed ``max_cells``; in
    the latter case the result is flagged.  ``exact=True`` (allowed for
    n <= 20) also returns the exact rational value.
    """
    lat = ReducedLattice.of(law)
    if n < 0:
        raise ValueError("n must be >= 0")
    u0 = lat.reduce(y0)
    adaptive = M is None
    if adaptive:
        cap = int(max_cells ** (1.0 / lat.m)) - 2 * lat.reach - 1
        M = max(int(u0.max()) + 1, min(lat.default_box(u0, n, 7.5), cap))
    while True:
        table = DpTable(lat, int(M))
        table.place(u0)
        alive, _, overflow = table.run(n)
        flagged = bool(overflow[-1] > tol)
        if not flagged or not adaptive or DpTable.cells(lat, 2 * M) > max_cells:
            break
        M *= 2
    if flagged:
        warnings.warn(f"box M={M} leaks {overflow[-1]:.3g} > {tol:g}", OracleWarning, stacklevel=2)
    ex = None
    if exact:
        if n > 20:
            raise ValueError("exact arithmetic is limited to n <= 20")
        ex = _exact_survival(law, np.asarray(y0, dtype=np.int64), n)[-1]
    return SurvivalResult(tuple(np.asarray(y0).tolist()), n, float(alive[-1]),
                          float(overflow[-1]), int(M), bool(flagged), alive, overflow, ex)


def survival_table(law: StepLaw, M: int, n_max: int, weights: np.ndarray,
                   checkpoints: Sequence[int], out_box: int) -> tuple[np.ndarray, np.ndarray]:
    """Weighted survival sums for every start in [0, out_box]^m (reduced units).

    Returns lower and upper bounds of ``sum_{n<=k} weights[c, n] P_u(tau > n)``
    for each checkpoint ``k``, as arrays of shape
    ``(len(checkpoints), n_weights, out_box+1, ..., out_box+1)``.
    """
    lat = ReducedLattice.of(law)
    if out_box > M:
        raise ValueError("output box exceeds the DP box")
    table = DpTable(lat, int(M))
    m = lat.m
    coords = np.indices((out_box + 1,) * m).reshape(m, -1).T
    out_idx = table.margin + (coords + table.w) @ table.strides
    weights = np.atleast_2d(np.asarray(weights, dtype=np.float64))[:, :n_max + 1]
    chk = np.array(sorted(checkpoints), dtype=np.int64)
    lo, hi = _kernels.backward_survival(table.offs, lat.probs, table.size, table.margin,
                                        table.size - table.margin, table.low_idx,
                                        table.high_idx, out_idx, weights, chk)
    shape = (len(chk), weights.shape[0]) + (out_box + 1,) * m
    return lo.reshape(shape), hi.reshape(shape)


# ---------------------------------------------------------------------------
# h_c from the ratio of discounted survival sums


@dataclass(frozen=True)
class DpHc:
    value: float
    lower: float
    upper: float
    tail_bound: float
    n_max: int
    flagged: bool


def geometric_tail(c: float, n_max: int) -> float:
    """sum_{n > n_max} e^{-cn}."""
    return math.exp(-c * (n_max + 1)) / -math.expm1(-c)


def dp_h_c(law: StepLaw, y: Sequence[float], c: float, n_max: int | None = None,
           M: int | None = None, precision: float = 1e-10) -> DpHc:
    """Exact discounted h-function as a ratio of survival sums.

    ``(1 + sum_n e^{-cn} P_y(tau>n)) / (1 + sum_n e^{-cn} P_0(tau>n))``,
    truncated at ``n_max`` with the geometric tail bound on both sums.
    """
    if not c > 0:
        raise ValueError("c must be > 0")
    if n_max is None:
        n_max = max(1, math.ceil(math.log(1.0 / (precision * -math.expm1(-c))) / c))
    tail = geometric_tail(c, n_max)
    flagged = tail > precision
    if flagged:
        warnings.warn(f"n_max={n_max} leaves a tail bound {tail:.3g} above {precision:g}",
                      OracleWarning, stacklevel=2)
    w = np.exp(-c * np.arange(n_max + 1))
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    num = dp_survival(law, y, n_max, M)
    den = num if np.all(ReducedLattice.of(law).reduce(y) == 0) else dp_survival(
        law, np.zeros_like(y), n_max, M)
    a = math.fsum(w * num.curve)
    b = math.fsum(w * den.curve)
    a_hi = a + math.fsum(w * num.overflow_curve) + tail
    b_hi = b + math.fsum(w * den.overflow_curve) + tail
    return DpHc(a / b, a / b_hi, a_hi / b, tail, n_max, bool(flagged or num.flagged or den.flagged))


# ---------------------------------------------------------------------------
# excursion form


@dataclass(frozen=True)
class DpExcursion:
    """``1 + sum_{n<=truncation} q^n P(Ybar_{n-1} - Y_n < y, J_1 > n)`` per probe."""

    values: np.ndarray
    truncation: int
    killed: float
    overflow: float
    remaining: float
    M: int


def dp_h_excursion(law: StepLaw, probes: Sequence[Sequence[float]], truncation: int,
                   c: float | None = None, M: int | None = None) -> DpExcursion:
    """Exact truncated excursion sums via the reflected chain R = Ybar - Y.

    Matches the Monte Carlo excursion estimator with the same truncation.
    Mass leaving the box ``[0, M]^m`` is dropped, so values are lower bounds
    whose defect is at most ``overflow * truncation``.
    """
    lat = ReducedLattice.of(law)
    pr = np.vstack([lat.reduce(y) for y in np.atleast_2d(np.asarray(probes, dtype=float))])
    if M is None:
        M = int(pr.max()) + lat.default_box(np.zeros(1, np.int64), truncation, 8.0)
    strides = np.array([(M + 1) ** (lat.m - 1 - k) for k in range(lat.m)], dtype=np.int64)
    qs = np.array([1.0 if c is None else math.exp(-c)])
    tally, killed, overflow, remaining = _kernels.reflected_chain(
        lat.atoms, lat.probs, int(M), strides, pr, qs, int(truncation))
    return DpExcursion(1.0 + tally[:, 0], int(truncation), killed, overflow, remaining, int(M))


@dataclass(frozen=True)
class Bracket:
    """Exact bounds ``lower <= h <= upper`` from enumeration to ``depth``."""

    lower: Fraction
    upper: Fraction | float
    p_unfinished: Fraction
    depth: int
    horizon: int | None

    def contains(self, x: float) -> bool:
        return float(self.lower) <= x <= float(self.upper)


def brute_force_h_excursion(law: StepLaw, y: Sequence[int], depth: int,
                            horizon: int | None = None) -> Bracket:
    """Exact partial expectation of the excursion sum up to ``depth`` steps.

    Enumerates every increment sequence of length ``depth`` (paths sharing
    the same distance below the running maximum are merged, which keeps the
    arithmetic exact).  The lower end counts the terms n <= depth.  The
    remaining terms n in (depth, horizon] contribute at most one each on
    the event J_1 > depth, giving the upper end; with no horizon it is
    infinite.
    """
    _require_lattice(law)
    if depth < 1:
        raise ValueError("depth must be >= 1")
    k = len(law.gap_probs)
    if k**depth > ENUMERATION_LIMIT:
        raise ValueError(f"refusing to enumerate {k}^{depth} > {ENUMERATION_LIMIT} paths")
    y = tuple(int(v) for v in y)
    probs = [Fraction(float(p)) for p in law.gap_probs]
    atoms = [tuple(int(v) for v in a) for a in law.gap_atoms]
    state: dict[tuple[int, ...], Fraction] = {(0,) * law.m: Fraction(1)}
    total = Fraction(0)
    for _ in range(depth):
        nxt: dict[tuple[int, ...], Fraction] = defaultdict(Fraction)
        for r, p in state.items():
            for a, q in zip(atoms, probs):
                t = tuple(ri - ai for ri, ai in zip(r, a))
                if max(t) < 0:
                    continue
                pq = p * q
                if all(ti < yi for ti, yi in zip(t, y)):
                    total += pq
                nxt[tuple(max(ti, 0) for ti in t)] += pq
        state = nxt
    alive = sum(state.values(), Fraction(0))
    lower = 1 + total
    if horizon is None:
        upper: Fraction | float = math.inf if alive > 0 else lower
    else:
        upper = lower + alive * max(0, horizon - depth)
    return Bracket(lower, upper, alive, depth, horizon)


# ---------------------------------------------------------------------------
# duality


def duality_probabilities(law: StepLaw, y: Sequence[int], n: int) -> tuple[Fraction, Fraction]:
    """Exact ``P(-y < min_{1..n} Y)`` and ``P(max_{0..n-1} Y - Y_n < y)``, Y_0 = 0.

    The first is computed forward on (Y, running min), the second forward on
    (Y, running max); they agree by time reversal of the increments.
    """
    _require_lattice(law)
    if n < 1:
        raise ValueError("n must be >= 1")
    y = tuple(int(v) for v in y)
    probs = [Fraction(float(p)) for p in law.gap_probs]
    atoms = [tuple(int(v) for v in a) for a in law.gap_atoms]
    m = law.m
    lows: dict[tuple, Fraction] = {((0,) * m, None): Fraction(1)}
    highs: dict[tuple, Fraction] = {((0,) * m, (0,) * m): Fraction(1)}
    for step in range(n):
        nl: dict[tuple, Fraction] = defaultdict(Fraction)
        nh: dict[tuple, Fraction] = defaultdict(Fraction)
        for (pos, low), p in lows.items():
            for a, q in zip(atoms, probs):
                z = tuple(u + v for u, v in zip(pos, a))
                nl[(z, z if low is None else tuple(map(min, low, z)))] += p * q
        for (pos, top), p in highs.items():
            for a, q in zip(atoms, probs):
                z = tuple(u + v for u, v in zip(pos, a))
                key = (z, top) if step == n - 1 else (z, tuple(map(max, top, z)))
                nh[key] += p * q
        lows, highs = nl, nh
    left = sum((p for (_, low), p in lows.items() if all(-yi < li for yi, li in zip(y, low))),
               Fraction(0))
    right = sum((p for (pos, top), p in highs.items()
                 if all(t - z < yi for t, z, yi in zip(top, pos, y))), Fraction(0))
    return left, right


# ---------------------------------------------------------------------------
# Vandermonde and Karlin-McGregor


def vandermonde(x: Sequence[float]) -> float:
    """prod_{i<j} (x_j - x_i)."""
    x = np.asarray(x, dtype=np.float64)
    return float(math.prod(x[j] - x[i] for i in range(len(x)) for j in range(i + 1, len(x))))


def vandermonde_det(x: Sequence[float]) -> float:
    """The same quantity as det[x_i^(j-1)], by exact elimination.

    Each float entry is converted to a Fraction, so the only rounding is the
    final conversion; floating LU loses digits on these ill-conditioned
    matrices.
    """
    xs = [Fraction(float(v)) for v in x]
    a = [[xi**j for j in range(len(xs))] for xi in xs]
    det = Fraction(1)
    n = len(a)
    for col in range(n):
        piv = next((r for r in range(col, n) if a[r][col] != 0), None)
        if piv is None:
            return 0.0
        if piv != col:
            a[col], a[piv] = a[piv], a[col]
            det = -det
        det *= a[col][col]
        for r in range(col + 1, n):
            f = a[r][col] / a[col][col]
            if f:
                a[r] = [u - f * v for u, v in zip(a[r], a[col])]
    return float(det)


def _identical_marginal(law: StepLaw) -> dict[int, float]:
    marg = [defaultdict(float) for _ in range(law.d)]
    for a, p in zip(law.atoms, law.probs):
        for k in range(law.d):
            marg[k][int(a[k])] += float(p)
    marg = [dict(sorted(mk.items())) for mk in marg]
    base = marg[0]
    for mk in marg[1:]:
        if mk.keys() != base.keys() or any(abs(mk[v] - base[v]) > 1e-12 for v in base):
            raise ValueError("Karlin-McGregor needs identical component laws")
    for a, p in zip(law.atoms, law.probs):
        prod = math.prod(base[int(v)] for v in a)
        if abs(prod - p) > 1e-12:
            raise ValueError("Karlin-McGregor needs independent components")
    return base


def km_ordered_probability(p: Mapping[int, float] | StepLaw, start: Sequence[int], n: int) -> float:
    """P_start(X_1 < ... < X_d at times 0..n) for i.i.d. components with kernel ``p``.

    Sums det[p_n(j_l - i_k)] over ordered endpoints j.  The determinant
    identity needs components that cannot overtake each other without
    meeting, so the difference of two steps must lie in {-g, 0, g} and the
    starting gaps must be multiples of g.
    """
    if isinstance(p, StepLaw):
        _require_lattice(p)
        p = _identical_marginal(p)
    p = {int(k): float(v) for k, v in p.items() if v > 0}
    start = [int(v) for v in start]
    d = len(start)
    if any(start[k] >= start[k + 1] for k in range(d - 1)):
        return 0.0
    if n == 0:
        return 1.0
    diffs = {a - b for a in p for b in p} - {0}
    g = reduce(math.gcd, (abs(v) for v in diffs)) if diffs else 1
    if any(abs(v) != g for v in diffs) or any((start[k + 1] - start[k]) % g for k in range(d - 1)):
        raise ValueError("components can overtake without meeting; determinant formula invalid")
    lo_s, hi_s = min(p), max(p)
    # n-step kernel as a dense vector over displacements lo_s*n .. hi_s*n
    pn = np.array([1.0])
    base = np.zeros(hi_s - lo_s + 1)
    for v, q in p.items():
        base[v - lo_s] = q
    for _ in range(n):
        pn = np.convolve(pn, base)
    lo_n = lo_s * n

    def kern(disp: int) -> float:
        j = disp - lo_n
        return float(pn[j]) if 0 <= j < len(pn) else 0.0

    ends = sorted({s + v for s in start for v in range(lo_n, hi_s * n + 1) if kern(v) > 0})
    total = []
    for js in itertools.combinations(ends, d):
        mat = np.array([[kern(j - i) for j in js] for i in start])
        total.append(np.linalg.det(mat))
    return math.fsum(total)


# ---------------------------------------------------------------------------
# h tables


@dataclass(frozen=True)
class HTable:
    """h on the gap box [0, ymax]^m in original units, with error estimates."""

    values: np.ndarray
    errors: np.ndarray
    ymax: int
    provenance: str


def oracle_h_table(law: StepLaw, ymax: int, n_max: int = 4096, c: float | None = None,
                   M: int | None = None) -> HTable:
    """Exact-DP table of h (c=None) or h_c on the gap box [0, ymax]^m.

    With ``c`` given, h_c is the ratio of discounted survival sums and the
    error is the truncation tail plus box leakage.  Without ``c``, the
    undiscounted ratio r(N) = sum_{n<=N} P_y(tau>n) / sum_{n<=N} P_0(tau>n)
    converges like N^{-1/2}; the table reports the quadratic extrapolation
    in N^{-1/2} through r(N/16), r(N/4), r(N), with its distance to the
    linear extrapolation 2 r(N) - r(N/4) as the error.
    """
    lat = ReducedLattice.of(law)
    out_box = int(math.ceil(ymax / lat.g.min()))
    if M is None:
        M = lat.default_box(np.array([out_box]), n_max, 7.5)
    n = np.arange(n_max + 1)
    if c is None:
        weights = np.ones((1, n_max + 1))
        chk = [n_max // 16, n_max // 4, n_max]
    else:
        weights = np.exp(-c * n)[None, :]
        chk = [n_max]
    lo, hi = survival_table(law, M, n_max, weights, chk, out_box)
    lo = lo[:, 0]
    hi = hi[:, 0]
    origin = (0,) * lat.m
    ratio_lo = lo / hi[(slice(None),) + origin][(...,) + (None,) * lat.m]
    ratio_hi = hi / lo[(slice(None),) + origin][(...,) + (None,) * lat.m]
    mid = 0.5 * (ratio_lo + ratio_hi)
    if c is None:
        # polynomial extrapolation in x = N^{-1/2} through x, 2x, 4x
        rich2 = 2 * mid[2] - mid[1]
        red_val = (8 * mid[2] - 6 * mid[1] + mid[0]) / 3
        red_err = np.abs(red_val - rich2) + 0.5 * (ratio_hi[2] - ratio_lo[2])
        prov = f"dp-richardson(n_max={n_max},M={M})"
    else:
        tail = geometric_tail(c, n_max)
        den = lo[(0,) + origin]
        red_val = mid[0]
        red_err = 0.5 * (ratio_hi[0] - ratio_lo[0]) + tail / den * (1 + red_val)
        prov = f"dp-h_c(c={c!r},n_max={n_max},M={M})"
    red_val[origin] = 1.0
    red_err[origin] = 0.0
    ys = np.indices((ymax + 1,) * lat.m).reshape(lat.m, -1).T
    us = np.ceil(ys / lat.g).astype(np.int64)
    vals = red_val[tuple(us.T)].reshape((ymax + 1,) * lat.m)
    errs = red_err[tuple(us.T)].reshape((ymax + 1,) * lat.m)
    return HTable(vals, errs, ymax, prov)
