"""Spectral center estimators and bucket-count selection rules.

Two estimators share the bucketed Gram matrix ``S = Yt Yt^T / ell``:

* ``estimate_known_delta`` rescales the debiased top eigenvalue by the
  expected signal attenuation ``E||eta_bar||^2 = ell * g(delta)``;
* ``estimate_plain`` drops that factor, so it needs no knowledge of ``delta``.

The number of buckets is picked by an oracle (``ell_star``,
``ell_double_star``), by the two-stage plug-in rule of
``adaptive_known_delta``, or by the Lepski-type comparisons of
``lepski_select`` / ``lepski_refined`` on the grid ``d * 2^i``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import NamedTuple

import numpy as np

from .model import DomainError, flip_even
from .spectral import bucketize, gram, sq_sign_loss, top_eigenpair

VARIANTS = (
    "known_oracle",
    "known_adaptive",
    "plain_oracle",
    "lepski_global",
    "lepski_refined",
    "vanilla_spectral",
)
NEEDS_DELTA = {"known_oracle", "known_adaptive", "plain_oracle"}
NEEDS_NORM = {"known_oracle", "plain_oracle"}

DEFAULT_C = 1.0


class LepskiStep(NamedTuple):
    index: int          # grid index k of the pair (g_{k-1}, g_k)
    ell: int            # g_k
    threshold: float    # omega_k^2
    discrepancy: float  # sq sign loss between the two grid estimates


class AdaptiveStep(NamedTuple):
    ell_pilot: int
    s_hat: float
    target: int
    ell_hat: int


@dataclass
class Estimate:
    theta_hat: np.ndarray
    variant: str
    ell_used: int
    lambda_max: float
    selector_trace: list = field(default_factory=list)

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.theta_hat))


# -- signal attenuation -------------------------------------------------------

def g_of_delta(delta: float, k: int) -> float:
    """``E(eta_bar^2)`` for a bucket of ``k`` consecutive labels.

    Closed form with ``rho = 1 - 2 delta``:
    ``k^2 g = k (1 + rho) / (1 - rho) - 2 (rho - rho^(k+1)) / (1 - rho)^2``.
    For small ``(k + 1) delta`` that expression cancels catastrophically, so
    the binomial expansion of ``rho^(k+1)`` is summed instead; the terms of
    order <= 2 cancel exactly, leaving ``g = 1 + R / (2 k^2 delta^2)`` with
    ``R = sum_{m>=3} C(k+1, m) (-2 delta)^m``.
    """
    if not 0.0 <= delta <= 0.5:
        raise DomainError(f"delta must lie in [0, 1/2], got {delta}")
    k = int(k)
    if k < 1:
        raise DomainError(f"bucket length must be >= 1, got {k}")
    if delta == 0.0 or k == 1:
        return 1.0
    if (k + 1) * delta <= 0.25:
        x = -2.0 * delta
        term = (k + 1) * k / 2.0  # C(k+1, 2), without the x^2 factor
        rem = 0.0
        m = 2
        # term_m / x^2 = C(k+1, m) x^(m-2)
        while True:
            m += 1
            if m > k + 1:
                break
            term *= x * (k + 2 - m) / m
            rem += term
            if abs(term) <= 1e-18 * max(abs(rem), 1e-300):
                break
        # R / (2 k^2 delta^2) with R = x^2 * rem and x^2 = 4 delta^2
        return 1.0 + 2.0 * rem / (k * k)
    rho = 1.0 - 2.0 * delta
    one_minus = 2.0 * delta
    k2g = k * (1.0 + rho) / one_minus - 2.0 * (rho - rho ** (k + 1)) / one_minus**2
    return k2g / (k * k)


def _reduce_delta(Y, delta):
    """Map flip rates above 1/2 to ``1 - delta`` by negating even samples."""
    if not 0.0 <= delta < 1.0:
        raise DomainError(f"delta must lie in [0, 1), got {delta}")
    if delta > 0.5:
        return flip_even(Y), 1.0 - delta
    return Y, delta


# -- estimators -----------------------------------------------------------------

def _spectral(Y, ell, attenuation=None):
    B = bucketize(Y, ell)
    pair = top_eigenpair(gram(B), strict=True)
    excess = max(pair.lambda_max - 1.0 / B.k, 0.0)
    if attenuation is not None:
        # ell / E||eta_bar||^2 with E||eta_bar||^2 = ell * g
        excess /= attenuation(B.k)
    return math.sqrt(excess) * pair.v_max, pair.lambda_max


def estimate_known_delta(Y, ell: int, delta: float, variant: str = "known_oracle") -> Estimate:
    Y = np.asarray(Y, dtype=float)
    Y, delta = _reduce_delta(Y, delta)
    theta, lam = _spectral(Y, ell, lambda k: g_of_delta(delta, k))
    return Estimate(theta, variant, int(ell), lam)


def estimate_plain(Y, ell: int, variant: str = "plain_oracle") -> Estimate:
    theta, lam = _spectral(np.asarray(Y, dtype=float), ell)
    return Estimate(theta, variant, int(ell), lam)


def vanilla_spectral(Y) -> Estimate:
    Y = np.asarray(Y, dtype=float)
    return estimate_plain(Y, Y.shape[1], variant="vanilla_spectral")


# -- oracle bucket counts ---------------------------------------------------------

def _check_dims(n, d):
    if d < 1 or n < 1:
        raise DomainError(f"d and n must be >= 1, got d={d}, n={n}")
    if d > n:
        raise DomainError(f"requires d <= n, got d={d}, n={n}")


def _exact(x) -> Fraction:
    # the shortest decimal that round-trips to x: 0.1 means 1/10, not its binary neighbour
    return Fraction(repr(float(x)))


def _ceil_mul(n, x) -> int:
    return math.ceil(Fraction(n) * _exact(x))


def ell_star(n: int, d: int, delta: float, theta_norm_sq: float) -> int:
    _check_dims(n, d)
    return min(max(d, _ceil_mul(n, max(delta, theta_norm_sq))), n)


def _ceil_cbrt(r: Fraction) -> int:
    """Smallest integer m >= 0 with m^3 >= r, exactly."""
    if r <= 0:
        return 0
    m = max(int(math.ceil(float(r) ** (1.0 / 3.0))), 0)
    while m**3 < r:
        m += 1
    while m > 0 and (m - 1) ** 3 >= r:
        m -= 1
    return m


def ell_double_star(n: int, d: int, delta: float, theta_norm_sq: float) -> int:
    """``d v ceil(n delta v delta^(2/3) n^(4/3) |theta|^(4/3) / d^(1/3) v n |theta|^2) ^ n``.

    The middle term is ``(delta^2 n^4 |theta|^4 / d)^(1/3)``, ceiled exactly
    in rational arithmetic.
    """
    _check_dims(n, d)
    fd, fs = _exact(delta), _exact(theta_norm_sq)
    middle = _ceil_cbrt(fd * fd * Fraction(n) ** 4 * fs * fs / d)
    top = max(_ceil_mul(n, delta), middle, _ceil_mul(n, theta_norm_sq))
    return min(max(d, top), n)


def oracle_known(Y, delta: float, theta_norm_sq: float) -> Estimate:
    d, n = np.shape(Y)
    reduced = min(delta, 1.0 - delta)
    return estimate_known_delta(Y, ell_star(n, d, reduced, theta_norm_sq), delta)


def oracle_plain(Y, delta: float, theta_norm_sq: float) -> Estimate:
    d, n = np.shape(Y)
    reduced = min(delta, 1.0 - delta)
    return estimate_plain(Y, ell_double_star(n, d, reduced, theta_norm_sq))


# -- adaptation with known delta ----------------------------------------------

def round_to_grid(target: int, n: int, d: int) -> int:
    """``d * 2^m ^ n`` with ``m`` minimal such that ``d * 2^m >= target``."""
    ell = d
    while ell < target and ell < n:
        ell *= 2
    return min(ell, n)


def adaptive_known_delta(Y, delta: float, C: float = DEFAULT_C) -> Estimate:
    """Two-stage rule: pilot norm at ``d v ceil(n delta) ^ n``, then rebucket.

    The second-stage target is ``ceil(n (3 delta v s^2) v C d) ^ n`` rounded
    up onto the grid ``d * 2^m`` (capped at ``n``).
    """
    if C <= 0:
        raise DomainError("C must be positive")
    Y = np.asarray(Y, dtype=float)
    d, n = Y.shape
    _check_dims(n, d)
    Y, delta = _reduce_delta(Y, delta)
    ell1 = min(max(d, _ceil_mul(n, delta)), n)
    s_hat = estimate_known_delta(Y, ell1, delta).norm
    target = min(math.ceil(max(n * max(3.0 * delta, s_hat**2), C * d)), n)
    ell_hat = round_to_grid(target, n, d)
    est = estimate_known_delta(Y, ell_hat, delta, variant="known_adaptive")
    est.selector_trace = [AdaptiveStep(ell1, s_hat, target, ell_hat)]
    return est


# -- Lepski selection ------------------------------------------------------------

def lepski_grid(n: int, d: int) -> list[int]:
    _check_dims(n, d)
    grid = [d]
    while grid[-1] * 2 <= n:
        grid.append(grid[-1] * 2)
    return grid


def lepski_thresholds(grid, n, d, C, norms_sq) -> list[float]:
    """``4 C^2 (sqrt(d g) / n  ^  d g / (n^2 s))`` per grid point; s = 0 drops the second branch."""
    out = []
    for g, s in zip(grid, norms_sq):
        first = math.sqrt(d * g) / n
        second = d * g / (n * n * s) if s > 0 else math.inf
        out.append(4.0 * C * C * min(first, second))
    return out


def select_index(discrepancies, thresholds) -> int:
    """Smallest m such that discrepancies[k] <= thresholds[k] for every k >= m + 1.

    Both sequences are indexed by grid position; entry 0 is ignored.
    """
    m = 0
    for k in range(1, len(discrepancies)):
        if discrepancies[k] > thresholds[k]:
            m = k
    return m


def grid_estimates(Y) -> tuple[list[int], list[Estimate]]:
    Y = np.asarray(Y, dtype=float)
    d, n = Y.shape
    grid = lepski_grid(n, d)
    return grid, [estimate_plain(Y, g) for g in grid]


def _discrepancies(ests):
    return [math.nan] + [sq_sign_loss(ests[i].theta_hat, ests[i - 1].theta_hat)
                         for i in range(1, len(ests))]


def _lepski(grid, ests, n, d, C, norms_sq, variant):
    disc = _discrepancies(ests)
    thr = lepski_thresholds(grid, n, d, C, norms_sq)
    m = select_index(disc, thr)
    trace = [LepskiStep(i, grid[i], thr[i], disc[i]) for i in range(1, len(grid))]
    chosen = ests[m]
    return Estimate(chosen.theta_hat.copy(), variant, grid[m], chosen.lambda_max, trace)


def lepski_select(Y, C: float = DEFAULT_C, cache=None) -> Estimate:
    """Globally adaptive choice ``l~ = d 2^m~`` using each grid estimate's own norm."""
    if C <= 0:
        raise DomainError("C must be positive")
    Y = np.asarray(Y, dtype=float)
    d, n = Y.shape
    grid, ests = cache if cache is not None else grid_estimates(Y)
    norms = [e.norm ** 2 for e in ests]
    return _lepski(grid, ests, n, d, C, norms, "lepski_global")


def lepski_refined(Y, C: float = DEFAULT_C, cache=None) -> Estimate:
    """Second pass with every threshold using the pilot norm ``||theta~(l~)||``.

    The grid estimates of the first pass are reused, not recomputed.
    """
    if C <= 0:
        raise DomainError("C must be positive")
    Y = np.asarray(Y, dtype=float)
    d, n = Y.shape
    cache = cache if cache is not None else grid_estimates(Y)
    grid, ests = cache
    pilot = lepski_select(Y, C, cache=cache)
    s2 = pilot.norm ** 2
    return _lepski(grid, ests, n, d, C, [s2] * len(grid), "lepski_refined")


# -- reference rates -------------------------------------------------------------

@dataclass(frozen=True)
class RateQuery:
    theta_norm_sq: float
    n: int
    d: int
    delta: float


def global_rate(n: int, d: int, delta: float) -> float:
    return math.sqrt(delta * d / n) + d / n


def worst_case_norm_sq(n: int, d: int, delta: float) -> float:
    return max(math.sqrt(delta * d / n), d / n)


def phi_rate(q: RateQuery) -> float:
    """Local rate; at regime boundaries the smallest applicable branch wins."""
    _check_dims(q.n, q.d)
    if not 0.0 <= q.delta <= 0.5:
        raise DomainError(f"delta must lie in [0, 1/2], got {q.delta}")
    s, dn = q.theta_norm_sq, q.d / q.n
    low = math.sqrt(q.delta * dn)
    values = []
    if s <= max(low, dn):
        values.append(low + dn)
    if max(low, dn) <= s <= max(q.delta, dn):
        values.append(q.delta * dn / s if s > 0 else math.inf)
    if max(q.delta, dn) <= s:
        values.append(dn)
    return min(values)


def estimate(variant: str, Y, delta: float | None = None,
             theta_norm_sq: float | None = None, C: float = DEFAULT_C) -> Estimate:
    """Dispatch by variant name (the names used on the CLI and in CSV files)."""
    if variant not in VARIANTS:
        raise DomainError(f"unknown estimator variant {variant!r}; expected one of {VARIANTS}")
    if variant in NEEDS_DELTA and delta is None:
        raise DomainError(f"variant {variant!r} requires delta")
    if variant in NEEDS_NORM and theta_norm_sq is None:
        raise DomainError(f"variant {variant!r} requires the true squared norm of theta")
    if variant == "known_oracle":
        return oracle_known(Y, delta, theta_norm_sq)
    if variant == "known_adaptive":
        return adaptive_known_delta(Y, delta, C)
    if variant == "plain_oracle":
        return oracle_plain(Y, delta, theta_norm_sq)
    if variant == "lepski_global":
        return lepski_select(Y, C)
    if variant == "lepski_refined":
        return lepski_refined(Y, C)
    return vanilla_spectral(Y)
