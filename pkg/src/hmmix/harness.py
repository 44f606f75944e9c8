"""Monte Carlo risk estimation, sweeps, rate-slope fits and C calibration.

Every trial draws its data from the stream ``make_rng(master_seed, trial)``,
so trial ``t`` sees the same labels and noise in every cell that shares
``(n, d, delta)``: comparisons between estimators are paired by
construction, and results do not depend on the execution schedule.
"""

from __future__ import annotations

import itertools
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from . import estimators as est
from .model import (DomainError, ModelConfig, Noise, gen_dataset, gen_labels,
                    make_rng, make_theta)
from .spectral import sq_sign_loss

log = logging.getLogger(__name__)

C_CANDIDATES = (0.5, 1.0, 2.0, 4.0, 8.0)
MAX_FAILED_FRACTION = 0.05


class Cell(NamedTuple):
    n: int
    d: int
    delta: float
    theta_norm_sq: float
    estimator: str


@dataclass
class ExperimentSpec:
    n: Sequence[int]
    d: Sequence[int]
    delta: Sequence[float]
    theta_norm_sq: Sequence[float]
    estimators: Sequence[str]
    trials: int = 200
    master_seed: int = 0
    C: float = est.DEFAULT_C
    noise: Noise = Noise.GAUSSIAN
    theta_mode: str = "axis"

    def __post_init__(self):
        if self.trials < 1:
            raise DomainError("trials must be >= 1")
        for name in self.estimators:
            if name not in est.VARIANTS:
                raise DomainError(f"unknown estimator {name!r}")
        if max(self.d) > min(self.n):
            raise DomainError("every swept d must be <= every swept n")
        for x in self.delta:
            if not 0.0 <= x < 1.0:
                raise DomainError(f"delta must lie in [0, 1), got {x}")
        for x in self.theta_norm_sq:
            if not (x >= 0 and math.isfinite(x)):
                raise DomainError(f"theta_norm_sq must be finite and >= 0, got {x}")
        self.noise = Noise(self.noise)

    def cells(self) -> list[Cell]:
        return sorted(Cell(*c) for c in itertools.product(
            self.n, self.d, self.delta, self.theta_norm_sq, self.estimators))


@dataclass
class RiskReport:
    cell: Cell
    trials: int
    mean_sq_loss: float
    stderr: float
    q50: float
    q90: float
    q95: float
    mean_ell_used: float
    phi_reference: float
    global_rate_reference: float
    valid: bool
    failures: int = 0
    losses: np.ndarray = field(default=None, repr=False)
    ells: np.ndarray = field(default=None, repr=False)


class TrialResult(NamedTuple):
    sq_loss: float
    ell_used: int
    ok: bool


def cell_config(cell: Cell, master_seed: int, noise=Noise.GAUSSIAN,
                theta_mode="axis") -> ModelConfig:
    """Model instance for a cell; theta depends only on the cell and master seed."""
    theta = make_theta(cell.d, math.sqrt(cell.theta_norm_sq), theta_mode, master_seed)
    return ModelConfig(d=cell.d, n=cell.n, delta=cell.delta, theta=theta,
                       noise=noise, seed=master_seed)


def run_trial(config: ModelConfig, variant: str, C: float, trial_index: int,
              master_seed: int, theta_norm_sq: float | None = None) -> TrialResult:
    """One draw and one estimate; returns the squared sign-invariant loss.

    Oracle variants receive ``theta_norm_sq`` when given (the nominal value of
    a cell) rather than ``||theta||^2`` recomputed from the vector, whose last
    bit can push ``ceil(n * ||theta||^2)`` past a bucket-count boundary.
    """
    rng = make_rng(master_seed, trial_index)
    data = gen_dataset(config, rng)
    if theta_norm_sq is None:
        theta_norm_sq = config.theta_norm_sq
    try:
        e = est.estimate(variant, data.Y, delta=config.delta,
                         theta_norm_sq=theta_norm_sq, C=C)
    except (ArithmeticError, RuntimeError, np.linalg.LinAlgError) as exc:
        log.warning("trial %d of %s failed: %s", trial_index, variant, exc)
        return TrialResult(math.nan, -1, False)
    return TrialResult(sq_sign_loss(e.theta_hat, config.theta), e.ell_used, True)


def _trial_task(args):
    return run_trial(*args)


def _resolve_threads(threads):
    if threads is None:
        threads = int(os.environ.get("MML_THREADS", "1"))
    return max(1, int(threads))


def _map(fn, tasks, threads):
    threads = _resolve_threads(threads)
    if threads == 1 or len(tasks) < 2:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, tasks, chunksize=max(1, len(tasks) // (4 * threads))))


def _reference_delta(delta):
    return min(delta, 1.0 - delta)


def summarize(cell: Cell, results: Sequence[TrialResult]) -> RiskReport:
    ok = [r for r in results if r.ok]
    failures = len(results) - len(ok)
    losses = np.array([r.sq_loss for r in ok])
    ells = np.array([r.ell_used for r in ok])
    dref = _reference_delta(cell.delta)
    phi = est.phi_rate(est.RateQuery(cell.theta_norm_sq, cell.n, cell.d, dref))
    glob = est.global_rate(cell.n, cell.d, dref)
    valid = failures <= MAX_FAILED_FRACTION * len(results) and len(ok) > 0
    if not ok:
        nan = math.nan
        return RiskReport(cell, len(results), nan, nan, nan, nan, nan, nan, phi, glob,
                          False, failures, losses, ells)
    m = len(losses)
    mean = math.fsum(losses) / m
    stderr = 0.0 if m == 1 else math.sqrt(math.fsum((losses - mean) ** 2) / (m - 1) / m)
    q50, q90, q95 = (float(q) for q in np.quantile(losses, [0.5, 0.9, 0.95]))
    return RiskReport(cell, len(results), mean, stderr, q50, q90, q95,
                      math.fsum(ells) / m, phi, glob, valid, failures, losses, ells)


def sweep(spec: ExperimentSpec, threads: int | None = None,
          cells: Sequence[Cell] | None = None) -> list[RiskReport]:
    cells = spec.cells() if cells is None else sorted(cells)
    tasks = []
    for cell in cells:
        cfg = cell_config(cell, spec.master_seed, spec.noise, spec.theta_mode)
        tasks.extend((cfg, cell.estimator, spec.C, t, spec.master_seed, cell.theta_norm_sq)
                     for t in range(spec.trials))
    results = _map(_trial_task, tasks, threads)
    reports = []
    for i, cell in enumerate(cells):
        chunk = results[i * spec.trials:(i + 1) * spec.trials]
        reports.append(summarize(cell, chunk))
        log.info("cell %s: median %.4g", cell, reports[-1].q50)
    return reports


def mc_risk(spec: ExperimentSpec, cell: Cell, threads: int | None = None) -> RiskReport:
    return sweep(spec, threads, cells=[cell])[0]


# -- slopes ---------------------------------------------------------------------

@dataclass
class SlopeFit:
    axis: str
    points: list
    slope: float
    intercept: float
    r_squared: float


_STATS = {"mean": "mean_sq_loss", "median": "q50", "q50": "q50"}


def fit_loglog_slope(reports: Sequence[RiskReport], axis: str, stat: str = "mean") -> SlopeFit:
    """OLS fit of log(loss statistic) against log(n) or log(delta).

    Points with a non-positive statistic are dropped.
    """
    if axis not in ("n", "delta"):
        raise DomainError(f"axis must be 'n' or 'delta', got {axis!r}")
    attr = _STATS[stat]
    pts = []
    for r in reports:
        x = getattr(r.cell, axis)
        y = getattr(r, attr)
        if y > 0 and x > 0:
            pts.append((math.log(x), math.log(y)))
    if len(pts) < 3:
        raise DomainError(f"need at least 3 positive points, got {len(pts)}")
    xs, ys = np.array(pts).T
    slope, intercept = np.polyfit(xs, ys, 1)
    resid = ys - (slope * xs + intercept)
    ss_tot = float(np.sum((ys - ys.mean()) ** 2))
    r2 = 1.0 if ss_tot == 0 else max(0.0, 1.0 - float(np.sum(resid**2)) / ss_tot)
    return SlopeFit(axis, pts, float(slope), float(intercept), r2)


# -- calibration of C -----------------------------------------------------------

@dataclass
class Calibration:
    C: float
    warning: bool
    table: list  # rows (C, n, d, delta, theta_norm_sq, over_selection_frequency)


def frozen_calibration() -> dict:
    """The calibration grid and C value shipped in ``calibration.cfg``."""
    from importlib import resources

    from .files import parse_config
    text = resources.files("hmmix").joinpath("calibration.cfg").read_text()
    return parse_config(text, "calibration.cfg")


def calibrated_C() -> float:
    return float(frozen_calibration()["C"])


def choose_C(table, candidates=C_CANDIDATES, level: float = 0.10) -> Calibration:
    """Smallest candidate whose over-selection frequency is below ``level`` in every row."""
    for c in sorted(candidates):
        rows = [r for r in table if r[0] == c]
        if rows and all(r[5] < level for r in rows):
            return Calibration(c, False, list(table))
    worst = max(candidates)
    log.warning("no C in %s keeps over-selection below %.0f%%; using %s",
                tuple(candidates), 100 * level, worst)
    return Calibration(worst, True, list(table))


def _selected_ells(args):
    cfg, trial, master_seed, candidates = args
    data = gen_dataset(cfg, make_rng(master_seed, trial))
    cache = est.grid_estimates(data.Y)
    return [est.lepski_select(data.Y, c, cache=cache).ell_used for c in candidates]


def calibrate_C(spec: ExperimentSpec, candidates=C_CANDIDATES, level: float = 0.10,
                threads: int | None = None) -> Calibration:
    """Estimate P(l~ > 4 l**) on every (n, d, delta, theta_norm_sq) point of ``spec``.

    The grid estimates of a trial do not depend on C, so they are computed
    once and reused for every candidate.
    """
    points = sorted(set(itertools.product(spec.n, spec.d, spec.delta, spec.theta_norm_sq)))
    tasks = []
    for p in points:
        cfg = cell_config(Cell(*p, "lepski_global"), spec.master_seed, spec.noise,
                          spec.theta_mode)
        tasks.extend((cfg, t, spec.master_seed, tuple(candidates)) for t in range(spec.trials))
    ells = np.array(_map(_selected_ells, tasks, threads)).reshape(len(points), spec.trials, -1)
    table = []
    for ci, c in enumerate(candidates):
        for pi, (n, d, delta, s) in enumerate(points):
            oracle = est.ell_double_star(n, d, _reference_delta(delta), s)
            freq = float(np.mean(ells[pi, :, ci] > 4 * oracle))
            table.append((c, n, d, delta, s, freq))
    return choose_C(table, candidates, level)


# -- concentration of ||eta_bar||^2 -----------------------------------------------

@dataclass
class ConcentrationReport:
    ell: int
    delta: float
    n: int
    d: int
    trials: int
    freq_bracket: float     # P(ell/4 <= ||eta_bar||^2 <= ell)
    freq_upper: float       # P(||eta_bar||^2 <= ell)
    freq_deviation: float   # P(| ||eta_bar||^2 - ell g | <= sqrt(d ell))
    mean_norm_sq: float
    stderr_norm_sq: float
    expected_norm_sq: float


def eta_bar_norm_sq(labels: np.ndarray, ell: int) -> float:
    k = len(labels) // ell
    means = labels[:k * ell].reshape(ell, k).mean(axis=1)
    return float(means @ means)


def concentration_check(ell: int, delta: float, n: int, trials: int, seed: int = 0,
                        d: int = 1) -> ConcentrationReport:
    if not 1 <= d <= ell <= n:
        raise DomainError(f"requires d <= ell <= n, got d={d}, ell={ell}, n={n}")
    if n * delta > ell:
        raise DomainError(f"requires n * delta <= ell, got {n * delta} > {ell}")
    if not 0.0 <= delta <= 0.5:
        raise DomainError(f"delta must lie in [0, 1/2], got {delta}")
    k = n // ell
    expected = ell * est.g_of_delta(delta, k)
    vals = np.array([eta_bar_norm_sq(gen_labels(n, delta, make_rng(seed, t)).labels
                                     .astype(float), ell) for t in range(trials)])
    slack = 1e-9 * ell  # bucket means of +-1 labels are exact; this only absorbs the sum
    return ConcentrationReport(
        ell=ell, delta=delta, n=n, d=d, trials=trials,
        freq_bracket=float(np.mean((vals >= ell / 4 - slack) & (vals <= ell + slack))),
        freq_upper=float(np.mean(vals <= ell + slack)),
        freq_deviation=float(np.mean(np.abs(vals - expected) <= math.sqrt(d * ell))),
        mean_norm_sq=float(vals.mean()),
        stderr_norm_sq=float(vals.std(ddof=1) / math.sqrt(trials)) if trials > 1 else 0.0,
        expected_norm_sq=expected,
    )
