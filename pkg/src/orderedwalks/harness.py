"""Experiment configuration, result files and the survival tail fit."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import platform
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from scipy import stats

from . import __version__
from . import chain as _chain
from . import estimators as _est
from . import oracle as _oracle
from .walk import LawError, StepLaw, make_step_law

KINDS = ("estimate-h", "oracle-check", "conditioned-sample", "tail-exponent", "residual-scan")


class ConfigError(ValueError):
    """The experiment configuration is invalid."""


class AcceptanceFailure(RuntimeError):
    """An oracle check did not pass."""


@dataclass
class ExperimentConfig:
    """One experiment.  Serialized as a single JSON document.

    ``out`` and ``threads`` do not enter the config hash: results must not
    depend on them.
    """

    kind: str
    law: dict[str, Any]
    probes: list[list[float]] = field(default_factory=list)
    c_grid: list[float] = field(default_factory=list)
    forms: list[str] = field(default_factory=lambda: [_est.GEOMETRIC_RATIO, _est.EXCURSION])
    replicas: int = 100_000
    truncation: int = _est.DEFAULT_TRUNCATION
    max_beta_events: int = _est.DEFAULT_MAX_BETA
    horizon: int = _est.DEFAULT_HORIZON
    n_max: int = 10_000
    window: list[int] = field(default_factory=lambda: [100, 10_000])
    burn_in: int = 0
    y0: list[float] = field(default_factory=list)
    x0: list[float] = field(default_factory=list)
    T: int = 3
    c: float = 0.1
    samples: int = 10_000
    modes: list[str] = field(default_factory=lambda: [_chain.H_TRANSFORM,
                                                      _chain.GEOMETRIC_REJECTION])
    ymax: int = 10
    seed_base: int = 0
    out: str = "results"
    threads: int | None = None

    HASH_EXCLUDE = ("out", "threads")

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ExperimentConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            cfg = cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        cfg.validate()
        return cfg

    @classmethod
    def from_json(cls, path: str | Path) -> "ExperimentConfig":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_dict(data)

    def step_law(self) -> StepLaw:
        try:
            return make_step_law(self.law)
        except (LawError, KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid law: {exc}") from None

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ConfigError(f"kind must be one of {KINDS}")
        law = self.step_law()
        if self.replicas < 1:
            raise ConfigError("replicas must be >= 1")
        if any(not c > 0 for c in self.c_grid):
            raise ConfigError("c-grid entries must be > 0")
        if any(b >= a for a, b in zip(self.c_grid, self.c_grid[1:])):
            raise ConfigError("c-grid must be strictly decreasing")
        for y in self.probes:
            if len(y) != law.m:
                raise ConfigError(f"probe {y} needs {law.m} components")
        unknown = set(self.forms) - set(_est.FORMS)
        if unknown:
            raise ConfigError(f"unknown forms {sorted(unknown)}")
        if self.seed_base < 0:
            raise ConfigError("seed_base must be nonnegative")
        if self.kind == "tail-exponent" and len(self.window) != 2:
            raise ConfigError("window must be [lo, hi]")
        if self.kind == "conditioned-sample":
            if len(self.x0) != law.d:
                raise ConfigError(f"x0 needs {law.d} components")
            if self.T < 1 or not self.c > 0:
                raise ConfigError("need T >= 1 and c > 0")

    def canonical(self) -> str:
        data = {k: v for k, v in asdict(self).items() if k not in self.HASH_EXCLUDE}
        return json.dumps(data, sort_keys=True, separators=(",", ":"))

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# tail fit


@dataclass(frozen=True)
class TailFit:
    n: np.ndarray
    survival: np.ndarray
    slope: float
    ci: tuple[float, float]
    intercept: float
    window: tuple[int, int]

    def to_dict(self) -> dict:
        return {"slope": self.slope, "ci": list(self.ci), "intercept": self.intercept,
                "window": list(self.window), "points": int(len(self.n))}


def tail_exponent_fit(n: Sequence[float], survival: Sequence[float],
                      window: tuple[int, int] | None = None, burn_in: int = 0,
                      points: int = 40, level: float = 0.95) -> TailFit:
    """Least-squares slope of log P(tau > n) against log n.

    Points inside ``window`` and beyond ``burn_in`` are thinned to about
    ``points`` log-spaced abscissae so that large n does not dominate.  The
    confidence interval uses the t distribution with the residual variance.
    """
    n = np.asarray(n, dtype=np.float64)
    p = np.asarray(survival, dtype=np.float64)
    lo, hi = window if window is not None else (n.min(), n.max())
    lo = max(lo, burn_in)
    sel = np.flatnonzero((n >= lo) & (n <= hi))
    if len(sel) > points:
        targets = np.geomspace(n[sel[0]], n[sel[-1]], points)
        pick = np.unique(np.searchsorted(n[sel], targets).clip(0, len(sel) - 1))
        sel = sel[pick]
    if len(sel) < 10:
        raise ValueError(f"degenerate window: {len(sel)} points, need at least 10")
    if np.any(p[sel] <= 0):
        raise ValueError("survival values must be > 0 in the window")
    x, yv = np.log(n[sel]), np.log(p[sel])
    res = stats.linregress(x, yv)
    k = len(sel)
    half = stats.t.ppf(0.5 + level / 2, k - 2) * res.stderr
    return TailFit(n[sel], p[sel], float(res.slope), (float(res.slope - half),
                   float(res.slope + half)), float(res.intercept), (int(lo), int(hi)))


# ---------------------------------------------------------------------------
# output helpers


def _fmt(v: Any) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (list, tuple, np.ndarray)):
        return " ".join(_fmt(x) for x in v)
    return str(v)


class _Writer:
    """Collects output files in memory and writes them at the end."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.files: dict[str, str] = {}

    def csv(self, name: str, header: list[str], rows: list[list[Any]]) -> None:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["config_hash", "seed"] + header)
        for r in rows:
            w.writerow([self.cfg.config_hash, self.cfg.seed_base] + [_fmt(v) for v in r])
        self.files[name] = buf.getvalue()

    def json(self, name: str, data: Any) -> None:
        self.files[name] = json.dumps(data, sort_keys=True, indent=2) + "\n"

    def flush(self, out: Path) -> dict[str, Path]:
        try:
            out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise ConfigError(f"cannot create output directory {out}: {exc}") from None
        written = {}
        for name, text in sorted(self.files.items()):
            path = out / name
            try:
                path.write_text(text)
            except OSError as exc:
                raise ConfigError(f"cannot write {path}: {exc}") from None
            written[name] = path
        return written


def _versions() -> dict[str, str]:
    import numba
    import scipy

    return {"orderedwalks": __version__, "numpy": np.__version__, "numba": numba.__version__,
            "scipy": scipy.__version__, "python": platform.python_version()}


# ---------------------------------------------------------------------------
# experiments


def _estimate_h(cfg: ExperimentConfig, law: StepLaw, w: _Writer) -> dict:
    rows = []
    seed = cfg.seed_base
    probes = cfg.probes or [[0.0] * law.m]
    for form in cfg.forms:
        if form == _est.GEOMETRIC_RATIO:
            if not cfg.c_grid:
                raise ConfigError("geometric-ratio form needs a c-grid")
            grid = _est.estimate_h_c_grid(law, probes, cfg.c_grid, cfg.replicas, seed=seed)
            ests = [grid[(tuple(_est._gap(law, y).tolist()), c)] for y in probes
                    for c in cfg.c_grid]
        elif form == _est.EXCURSION:
            ests = _est.estimate_h_excursion_grid(law, probes, cfg.replicas, cfg.truncation, seed)
        elif form == _est.RENEWAL:
            ests = _est.estimate_h_renewal_grid(law, probes, cfg.replicas, cfg.max_beta_events,
                                                seed, truncation=cfg.truncation)
        elif form == _est.DRIFT_NEGATIVE:
            ests = [_est.estimate_h_drift_negative(law, y, cfg.replicas, cfg.truncation, seed)
                    for y in probes]
        else:
            ests = [_est.estimate_h_drift_positive(law, y, cfg.replicas, cfg.horizon, seed)
                    for y in probes]
        for e in ests:
            rows.append([e.form] + list(e.y) + ["" if e.c is None else e.c, e.value,
                                                e.std_error, e.replicas, e.censored_fraction])
    w.csv("estimates.csv", ["form"] + [f"y{k + 1}" for k in range(law.m)]
          + ["c", "value", "std_error", "replicas", "censored_fraction"], rows)
    return {"estimates": len(rows)}


@dataclass(frozen=True)
class Check:
    name: str
    y: tuple
    c: float | None
    estimate: float
    std_error: float
    reference: float
    lower: float
    upper: float

    @property
    def passed(self) -> bool:
        lo = min(self.lower, self.reference) - 4 * self.std_error
        hi = max(self.upper, self.reference) + 4 * self.std_error
        return lo <= self.estimate <= hi


def oracle_checks(law: StepLaw, probes: Sequence[Sequence[float]], c_grid: Sequence[float],
                  replicas: int, truncation: int, seed: int) -> list[Check]:
    """Every applicable estimator against its exact counterpart."""
    checks = []
    if c_grid:
        grid = _est.estimate_h_c_grid(law, probes, c_grid, replicas, seed=seed)
        for y in probes:
            for c in c_grid:
                e = grid[(tuple(_est._gap(law, y).tolist()), c)]
                ref = _oracle.dp_h_c(law, y, c)
                checks.append(Check("h_c vs dp_h_c", e.y, c, e.value, e.std_error, ref.value,
                                    ref.lower, ref.upper))
    exc = _est.estimate_h_excursion_grid(law, probes, replicas, truncation, seed)
    ref = _oracle.dp_h_excursion(law, probes, truncation)
    for e, v in zip(exc, ref.values):
        slack = ref.overflow * truncation
        checks.append(Check("excursion vs dp_h_excursion", e.y, None, e.value, e.std_error,
                            float(v), float(v), float(v) + slack))
    return checks


def _oracle_check(cfg: ExperimentConfig, law: StepLaw, w: _Writer) -> dict:
    if not law.is_lattice:
        raise ConfigError("oracle-check needs a lattice law")
    probes = cfg.probes or [[0.0] * law.m]
    checks = oracle_checks(law, probes, cfg.c_grid, cfg.replicas, cfg.truncation, cfg.seed_base)
    w.csv("checks.csv", ["check", "y", "c", "estimate", "std_error", "reference", "lower",
                         "upper", "passed"],
          [[k.name, list(k.y), "" if k.c is None else k.c, k.estimate, k.std_error, k.reference,
            k.lower, k.upper, int(k.passed)] for k in checks])
    return {"checks": len(checks), "failed": sum(not k.passed for k in checks)}


def _tail_exponent(cfg: ExperimentConfig, law: StepLaw, w: _Writer) -> dict:
    y0 = cfg.y0 or [1.0] * law.m
    res = _oracle.dp_survival(law, y0, cfg.n_max)
    n = np.arange(cfg.n_max + 1)
    w.csv("survival.csv", ["n", "p", "overflow_bound"],
          [[int(k), float(res.curve[k]), float(res.overflow_curve[k])] for k in n])
    fit = tail_exponent_fit(n[1:], res.curve[1:], tuple(cfg.window), cfg.burn_in)
    return {"tail_fit": fit.to_dict(), "target_slope": -law.d * (law.d - 1) / 4}


def _conditioned(cfg: ExperimentConfig, law: StepLaw, w: _Writer) -> dict:
    batches = {}
    for mode in cfg.modes:
        if mode == _chain.GEOMETRIC_REJECTION:
            batches[mode] = _chain.sample_conditioned_geometric_batch(
                law, cfg.x0, cfg.c, cfg.T, cfg.samples, cfg.seed_base)
        elif mode == _chain.H_TRANSFORM:
            ymax = int(max(np.diff(cfg.x0)) + cfg.T * np.abs(law.gap_atoms).max())
            table = _oracle.oracle_h_table(law, ymax, n_max=min(cfg.n_max, 16_384))
            batches[mode] = _chain.sample_h_transform(law, _chain.HFunction.from_oracle(table),
                                                      cfg.x0, cfg.T, cfg.samples, cfg.seed_base)
        else:
            raise ConfigError(f"unknown sampling mode {mode!r}")
    summary: dict[str, Any] = {}
    for mode, b in batches.items():
        rows = []
        n, t1, d = b.paths.shape
        for i in range(n):
            k = int(b.killed_at[i])
            for s in range(t1 if k < 0 else k):
                rows.append([i, s] + b.paths[i, s].tolist() + [0])
            if k >= 0:
                rows.append([i, k] + [""] * d + [1])
        w.csv(f"paths-{mode}.csv", ["replica", "step"] + [f"x{j + 1}" for j in range(d)]
              + ["killed"], rows)
        summary[mode] = {"samples": n, "mean_attempts": float(b.attempts.mean())}
    if len(batches) == 2:
        summary["tv"] = _chain.empirical_tv(*batches.values())
    return summary


def _residual_scan(cfg: ExperimentConfig, law: StepLaw, w: _Writer) -> dict:
    table = _oracle.oracle_h_table(law, cfg.ymax, n_max=min(cfg.n_max, 16_384))
    scan = _chain.residual_scan(law, _chain.HFunction.from_oracle(table))
    w.csv("residuals.csv", ["w", "residual", "std_error", "harmonic", "subharmonic"],
          [[list(r.w), r.value, r.std_error, int(r.harmonic), int(r.strictly_subharmonic)]
           for r in scan.residuals])
    return {"classification": scan.classification, "points": len(scan.residuals),
            "subharmonic_fraction": scan.subharmonic_fraction}


_RUNNERS = {
    "estimate-h": _estimate_h,
    "oracle-check": _oracle_check,
    "tail-exponent": _tail_exponent,
    "conditioned-sample": _conditioned,
    "residual-scan": _residual_scan,
}


def run_experiment(cfg: ExperimentConfig) -> dict[str, Path]:
    """Run ``cfg`` and write its CSV files, summary.json and manifest.json.

    Raises :class:`ConfigError` for invalid configurations or unwritable
    outputs and :class:`AcceptanceFailure` (after writing everything) when
    an oracle check fails.
    """
    cfg.validate()
    law = cfg.step_law()
    w = _Writer(cfg)
    summary = _RUNNERS[cfg.kind](cfg, law, w)
    summary.update({"kind": cfg.kind, "config_hash": cfg.config_hash, "seed": cfg.seed_base})
    w.json("summary.json", summary)
    manifest = {
        "config_hash": cfg.config_hash,
        "config": json.loads(cfg.canonical()),
        "seed": cfg.seed_base,
        "versions": _versions(),
        "files": {name: hashlib.sha256(text.encode()).hexdigest()
                  for name, text in sorted(w.files.items())},
    }
    w.json("manifest.json", manifest)
    written = w.flush(Path(cfg.out))
    if cfg.kind == "oracle-check" and summary["failed"]:
        raise AcceptanceFailure(f"{summary['failed']} of {summary['checks']} checks failed")
    return written
