"""Step laws, the gap transformation and raw path simulation."""
from __future__ import annotations

import itertools
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from scipy.optimize import brentq

from . import rng as _rng

LATTICE_PMF = "lattice-pmf"
GAUSSIAN_IID = "gaussian-iid"
COMPONENT_TABLE = "component-table"
KINDS = (LATTICE_PMF, GAUSSIAN_IID, COMPONENT_TABLE)

PROB_TOL = 1e-12
DRIFT_TOL = 1e-12


class LawError(ValueError):
    """Raised for malformed or trivial step laws."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class StepLaw:
    """Law of the i.i.d. increment W of a d-dimensional walk.

    Lattice kinds carry the joint pmf as ``atoms`` (K x d integer increments)
    and ``probs``.  The gaussian kind has independent N(mean_k, std^2)
    components.  ``drift`` and ``gap_sign_check`` are derived on
    construction; use :func:`make_step_law` or the helpers below rather than
    calling the constructor directly.
    """

    d: int
    kind: str
    atoms: np.ndarray | None = None
    probs: np.ndarray | None = None
    mean: np.ndarray | None = None
    std: float | None = None
    seed_base: int = 0
    drift: np.ndarray = field(init=False, repr=False)
    gap_drift: np.ndarray = field(init=False, repr=False)
    gap_atoms: np.ndarray | None = field(init=False, repr=False, default=None)
    gap_probs: np.ndarray | None = field(init=False, repr=False, default=None)
    gap_sign_check: tuple[bool, ...] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if self.d < 2:
            raise LawError("dimension d must be >= 2")
        if self.kind not in KINDS:
            raise LawError(f"unknown law kind {self.kind!r}")
        set_ = lambda name, value: object.__setattr__(self, name, value)  # noqa: E731
        if self.is_lattice:
            atoms = np.asarray(self.atoms, dtype=np.int64)
            probs = np.asarray(self.probs, dtype=np.float64)
            if atoms.ndim != 2 or atoms.shape[1] != self.d:
                raise LawError(f"atoms must have shape (K, {self.d})")
            if probs.shape != (atoms.shape[0],):
                raise LawError("one probability per atom required")
            if np.any(probs < 0):
                raise LawError("probabilities must be nonnegative")
            total = math.fsum(probs)
            if abs(total - 1.0) > PROB_TOL:
                raise LawError(f"probabilities sum to {total!r}, not 1")
            keep = probs > 0
            atoms, probs = _merge_atoms(atoms[keep], probs[keep])
            set_("atoms", _frozen(atoms))
            set_("probs", _frozen(probs))
            set_("drift", _frozen(probs @ atoms.astype(np.float64)))
            gaps = np.diff(atoms, axis=1)
            gap_atoms, gap_probs = _merge_atoms(gaps, probs)
            set_("gap_atoms", _frozen(gap_atoms))
            set_("gap_probs", _frozen(gap_probs))
            check = tuple(
                bool(np.any(gap_atoms[:, k] > 0) and np.any(gap_atoms[:, k] < 0))
                for k in range(self.d - 1)
            )
            for k in range(self.d - 1):
                col = gap_atoms[:, k]
                if np.all(col == 0):
                    raise LawError(f"gap component {k} degenerate at 0")
                if not check[k]:
                    sign = ">= 0" if np.all(col >= 0) else "<= 0"
                    raise LawError(f"gap component {k} is a.s. {sign}")
        else:
            mean = np.broadcast_to(np.asarray(self.mean, dtype=np.float64), (self.d,))
            if self.std is None or not self.std > 0:
                raise LawError("gaussian-iid law needs std > 0")
            set_("mean", _frozen(mean.copy()))
            set_("std", float(self.std))
            set_("drift", _frozen(mean.copy()))
            check = (True,) * (self.d - 1)
        set_("gap_drift", _frozen(np.diff(self.drift)))
        set_("gap_sign_check", check)

    @property
    def is_lattice(self) -> bool:
        return self.kind in (LATTICE_PMF, COMPONENT_TABLE)

    @property
    def m(self) -> int:
        """Number of gap components, d - 1."""
        return self.d - 1

    def gap_variance(self) -> np.ndarray:
        if self.is_lattice:
            centered = self.gap_atoms - self.gap_drift
            return self.gap_probs @ centered**2
        return np.full(self.m, 2.0 * self.std**2)

    def gap_component_pmf(self, k: int) -> dict[int, float]:
        if not self.is_lattice:
            raise LawError("marginal pmf only exists for lattice laws")
        out: dict[int, float] = defaultdict(float)
        for v, p in zip(self.gap_atoms[:, k], self.gap_probs):
            out[int(v)] += float(p)
        return dict(sorted(out.items()))

    def p_gap_step_positive(self) -> float:
        """P(Y_1 > 0 in every gap component)."""
        if not self.is_lattice:
            return 1.0 if self.m else 0.0
        mask = np.all(self.gap_atoms > 0, axis=1)
        return float(self.gap_probs[mask].sum())

    def kernel_args(self) -> tuple:
        """Arguments describing the gap increment sampler to the kernels."""
        if self.is_lattice:
            alias_p, alias_i = alias_table(self.gap_probs)
            return (0, self.gap_atoms, alias_p, alias_i, np.zeros(self.d), 1.0)
        return (1, np.zeros((0, self.m)), np.ones(1), np.zeros(1, np.int64), self.mean, self.std)

    def state_kernel_args(self) -> tuple:
        """Arguments describing the full increment sampler (state level)."""
        if self.is_lattice:
            alias_p, alias_i = alias_table(self.probs)
            return (0, self.atoms, alias_p, alias_i, np.zeros(self.d), 1.0)
        return (1, np.zeros((0, self.d)), np.ones(1), np.zeros(1, np.int64), self.mean, self.std)

    def to_descriptor(self) -> dict[str, Any]:
        if self.is_lattice:
            return {
                "d": self.d,
                "kind": LATTICE_PMF,
                "atoms": [[a.tolist(), float(p)] for a, p in zip(self.atoms, self.probs)],
                "seed_base": self.seed_base,
            }
        return {
            "d": self.d,
            "kind": GAUSSIAN_IID,
            "mean": self.mean.tolist(),
            "std": self.std,
            "seed_base": self.seed_base,
        }


def alias_table(probs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Walker alias table (Vose's construction) for sampling index j w.p. probs[j]."""
    k = len(probs)
    scaled = np.asarray(probs, dtype=np.float64) * k / math.fsum(probs)
    accept = np.ones(k)
    alias = np.arange(k, dtype=np.int64)
    small = [j for j in range(k) if scaled[j] < 1.0]
    large = [j for j in range(k) if scaled[j] >= 1.0]
    while small and large:
        s, g = small.pop(), large.pop()
        accept[s] = scaled[s]
        alias[s] = g
        scaled[g] -= 1.0 - scaled[s]
        (small if scaled[g] < 1.0 else large).append(g)
    return accept, alias


def _merge_atoms(atoms: np.ndarray, probs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    acc: dict[tuple[int, ...], float] = defaultdict(float)
    for a, p in zip(map(tuple, atoms.tolist()), probs.tolist()):
        acc[a] += p
    keys = sorted(acc)
    return (
        np.array(keys, dtype=np.int64).reshape(len(keys), atoms.shape[1]),
        np.array([acc[k] for k in keys], dtype=np.float64),
    )


def _parse_pmf(spec: Any) -> dict[int, float]:
    if isinstance(spec, dict):
        return {int(k): float(v) for k, v in spec.items()}
    return {int(v): float(p) for v, p in spec}


def make_step_law(spec: dict[str, Any] | str | Path) -> StepLaw:
    """Build a validated :class:`StepLaw` from a descriptor.

    ``spec`` is a mapping (or a JSON string / path to a JSON file) of one of
    the forms::

        {"d": 3, "kind": "lattice-pmf", "atoms": [[[1, 1, -1], 0.125], ...]}
        {"d": 3, "kind": "component-table",
         "components": [{"-1": 0.6, "1": 0.4}, ...]}   # independent components
        {"d": 3, "kind": "gaussian-iid", "mean": [0, 0, 0], "std": 1.0}

    An optional ``"seed_base"`` entry is carried along.  A component table with
    a single entry is applied to every component.
    """
    if isinstance(spec, Path) or (isinstance(spec, str) and not spec.lstrip().startswith("{")):
        spec = json.loads(Path(spec).read_text())
    elif isinstance(spec, str):
        spec = json.loads(spec)
    try:
        d = int(spec["d"])
        kind = spec["kind"]
    except (KeyError, TypeError) as exc:
        raise LawError(f"malformed law descriptor: {exc}") from None
    seed_base = int(spec.get("seed_base", 0))
    if kind == LATTICE_PMF:
        rows = spec["atoms"]
        atoms = np.array([r[0] for r in rows], dtype=np.int64).reshape(len(rows), -1)
        probs = np.array([r[1] for r in rows], dtype=np.float64)
        return StepLaw(d, LATTICE_PMF, atoms, probs, seed_base=seed_base)
    if kind == COMPONENT_TABLE:
        comps = [_parse_pmf(c) for c in spec["components"]]
        if len(comps) == 1:
            comps = comps * d
        if len(comps) != d:
            raise LawError(f"component table needs {d} entries, got {len(comps)}")
        for c in comps:
            if any(p < 0 for p in c.values()):
                raise LawError("probabilities must be nonnegative")
            if abs(math.fsum(c.values()) - 1.0) > PROB_TOL:
                raise LawError("component pmf does not sum to 1")
        atoms, probs = [], []
        for combo in itertools.product(*(sorted(c.items()) for c in comps)):
            atoms.append([v for v, _ in combo])
            probs.append(math.prod(p for _, p in combo))
        law = StepLaw(d, COMPONENT_TABLE, np.array(atoms), np.array(probs), seed_base=seed_base)
        return law
    if kind == GAUSSIAN_IID:
        return StepLaw(d, GAUSSIAN_IID, mean=spec.get("mean", 0.0),
                       std=spec.get("std", 1.0), seed_base=seed_base)
    raise LawError(f"unknown law kind {kind!r}")


def simple_symmetric(d: int, seed_base: int = 0) -> StepLaw:
    """Independent simple symmetric +-1 components."""
    return make_step_law({"d": d, "kind": COMPONENT_TABLE,
                          "components": [{-1: 0.5, 1: 0.5}], "seed_base": seed_base})


def independent_components(pmfs: Sequence[dict[int, float]], d: int | None = None,
                           seed_base: int = 0) -> StepLaw:
    """Independent components with the given marginal pmfs."""
    d = len(pmfs) if d is None else d
    return make_step_law({"d": d, "kind": COMPONENT_TABLE,
                          "components": list(pmfs), "seed_base": seed_base})


def gaussian_iid(d: int, mean: float | Sequence[float] = 0.0, std: float = 1.0,
                 seed_base: int = 0) -> StepLaw:
    return make_step_law({"d": d, "kind": GAUSSIAN_IID, "mean": mean, "std": std,
                          "seed_base": seed_base})


def gap_of(x: Sequence[float]) -> np.ndarray:
    """Adjacent differences (x_2 - x_1, ..., x_d - x_{d-1})."""
    return np.diff(np.asarray(x))


def in_weyl(x: Sequence[float]) -> bool:
    """True iff x_1 < x_2 < ... < x_d (strictly)."""
    return bool(np.all(gap_of(x) > 0))


def lundberg_exponent(law: StepLaw, k: int, direction: str) -> float:
    """Exponent theta with P(gap k ever moves ``direction`` by L) <= exp(-theta L).

    ``direction`` is ``"up"`` (for a negatively drifting component) or
    ``"down"`` (positively drifting).  Returns 0.0 when the component does not
    drift away from that direction, and ``inf`` when the move is impossible.
    """
    sign = 1.0 if direction == "up" else -1.0
    mu = sign * law.gap_drift[k]
    if mu >= -DRIFT_TOL:
        return 0.0
    if not law.is_lattice:
        return -2.0 * mu / law.gap_variance()[k]
    pmf = law.gap_component_pmf(k)
    vals = sign * np.array(list(pmf), dtype=np.float64)
    probs = np.array(list(pmf.values()))
    if not np.any(vals > 0):
        return math.inf

    def logmgf(theta: float) -> float:
        return float(np.log(np.sum(probs * np.exp(theta * vals))))

    hi = 1.0
    while logmgf(hi) <= 0:
        hi *= 2.0
    return brentq(logmgf, 1e-12, hi, xtol=1e-14)


@dataclass(frozen=True)
class Censored:
    """Marker for an exit time not observed before ``at``."""

    at: int

    def __repr__(self) -> str:
        return f"censored({self.at})"


@dataclass(frozen=True)
class GapPath:
    """A realized trajectory Y_0, ..., Y_n of the gap process."""

    start: np.ndarray
    increments: np.ndarray
    tau: int | Censored

    @property
    def values(self) -> np.ndarray:
        return np.vstack([self.start, self.start + np.cumsum(self.increments, axis=0)])

    @property
    def running_max(self) -> np.ndarray:
        return np.maximum.accumulate(self.values, axis=0)

    @property
    def running_min(self) -> np.ndarray:
        """Componentwise min over indices 1..n (row n-1 holds the value at n)."""
        return np.minimum.accumulate(self.values[1:], axis=0)

    def __len__(self) -> int:
        return len(self.increments)


def simulate_gap_path(law: StepLaw, y0: Sequence[float], horizon: int, seed: int | None = None,
                      replica: int = 0, stop_at_tau: bool = True,
                      stream: str = _rng.PATHS) -> GapPath:
    """Simulate the gap process from ``y0`` for up to ``horizon`` steps.

    The increments of replica ``replica`` are the same draws the batch
    kernels use for that replica and stream, so paths can be replayed.
    """
    from . import _kernels

    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    seed = law.seed_base if seed is None else seed
    key = _rng.stream_key(seed, stream)
    y0 = np.asarray(y0)
    incs, length, tau = _kernels.gap_path(*law.kernel_args(), _as_state(law, y0), horizon,
                                          stop_at_tau, key, replica)
    inc = incs[:length]
    return GapPath(start=y0.copy(), increments=inc, tau=int(tau) if tau > 0 else Censored(horizon))


def _as_state(law: StepLaw, y: Sequence[float]) -> np.ndarray:
    if law.is_lattice:
        arr = np.asarray(y)
        if not np.all(arr == np.round(arr)):
            raise ValueError("lattice laws need integer gap coordinates")
        return np.ascontiguousarray(arr, dtype=np.int64)
    return np.ascontiguousarray(y, dtype=np.float64)
