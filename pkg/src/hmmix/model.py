"""Data generation for the binary hidden-Markov sub-Gaussian mixture.

Observations are ``Y_i = eta_i * theta + xi_i`` where the labels ``eta`` form a
symmetric two-state Markov chain that changes sign with probability ``delta``
at every step, and ``xi_i`` are i.i.d. isotropic 1-sub-Gaussian vectors.
Matrices are stored with one observation per column (shape ``(d, n)``).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np


class DomainError(ValueError):
    """Raised when an argument falls outside the domain of an operation."""


class Noise(str, enum.Enum):
    GAUSSIAN = "gaussian"
    RADEMACHER = "rademacher"
    ZERO = "zero"  # deterministic tests only


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    """Counter-based stream for ``(seed, *keys)``.

    Philox keyed through a SeedSequence, so streams for different trial
    indices are independent and can be produced in any order.
    """
    if seed < 0 or seed >= 2**64:
        raise DomainError(f"seed must be a 64-bit unsigned integer, got {seed}")
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, *keys])))


# Sub-stream tags; keep fixed, they are part of the reproducibility contract.
_THETA_STREAM = 0x7E7A
_DATA_STREAM = 0xDA7A


def make_theta(d: int, norm: float, mode: str = "axis", seed: int = 0) -> np.ndarray:
    """Center of norm ``norm``: along e1 (``axis``) or a uniform random direction."""
    if d < 1:
        raise DomainError("d must be >= 1")
    if not (math.isfinite(norm) and norm >= 0):
        raise DomainError(f"theta norm must be finite and >= 0, got {norm}")
    if mode == "axis":
        direction = np.zeros(d)
        direction[0] = 1.0
    elif mode == "random":
        z = make_rng(seed, _THETA_STREAM).standard_normal(d)
        direction = z / np.linalg.norm(z)
    else:
        raise DomainError(f"theta_mode must be 'axis' or 'random', got {mode!r}")
    return norm * direction


@dataclass(frozen=True)
class ModelConfig:
    d: int
    n: int
    delta: float
    theta: np.ndarray
    noise: Noise = Noise.GAUSSIAN
    seed: int = 0

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=float).reshape(-1)
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "noise", Noise(self.noise))
        if self.d < 1 or self.n < 1:
            raise DomainError(f"d and n must be >= 1, got d={self.d}, n={self.n}")
        check_delta(self.delta)
        if theta.shape != (self.d,):
            raise DomainError(f"theta must have {self.d} coordinates, got {theta.size}")
        if not np.all(np.isfinite(theta)):
            raise DomainError("theta must be finite")
        if not 0 <= self.seed < 2**64:
            raise DomainError(f"seed must be a 64-bit unsigned integer, got {self.seed}")

    @classmethod
    def from_norm(cls, d, n, delta, theta_norm, theta_mode="axis",
                  noise=Noise.GAUSSIAN, seed=0) -> "ModelConfig":
        theta = make_theta(d, theta_norm, theta_mode, seed)
        return cls(d=d, n=n, delta=delta, theta=theta, noise=noise, seed=seed)

    @property
    def theta_norm_sq(self) -> float:
        return float(self.theta @ self.theta)


@dataclass(frozen=True)
class LabelPath:
    labels: np.ndarray  # int8, values +-1, length n
    flips: np.ndarray   # int8, flips[i] = labels[i+1] * labels[i], length n-1


@dataclass(frozen=True)
class Dataset:
    Y: np.ndarray
    hidden: LabelPath
    config: ModelConfig = field(repr=False)


def check_delta(delta: float) -> None:
    if not (0.0 <= delta < 1.0):
        raise DomainError(f"delta must lie in [0, 1), got {delta}")


def gen_labels(n: int, delta: float, rng: np.random.Generator) -> LabelPath:
    if n < 1:
        raise DomainError(f"n must be >= 1, got {n}")
    check_delta(delta)
    first = np.int8(1 if rng.random() < 0.5 else -1)
    flips = np.where(rng.random(n - 1) < delta, -1, 1).astype(np.int8)
    labels = np.empty(n, dtype=np.int8)
    labels[0] = first
    labels[1:] = first * np.cumprod(flips, dtype=np.int8)
    return LabelPath(labels=labels, flips=flips)


def gen_noise(d: int, n: int, noise: Noise | str, rng: np.random.Generator) -> np.ndarray:
    if d < 1 or n < 1:
        raise DomainError(f"d and n must be >= 1, got d={d}, n={n}")
    noise = Noise(noise)
    if noise is Noise.GAUSSIAN:
        return rng.standard_normal((d, n))
    if noise is Noise.RADEMACHER:
        return 2.0 * rng.integers(0, 2, size=(d, n)) - 1.0
    return np.zeros((d, n))


def gen_dataset(config: ModelConfig, rng: np.random.Generator | None = None) -> Dataset:
    """Draw labels then noise from ``rng`` (default: the config's own stream)."""
    if rng is None:
        rng = make_rng(config.seed, _DATA_STREAM)
    hidden = gen_labels(config.n, config.delta, rng)
    xi = gen_noise(config.d, config.n, config.noise, rng)
    Y = config.theta[:, None] * hidden.labels[None, :] + xi
    return Dataset(Y=Y, hidden=hidden, config=config)


def flip_even(Y: np.ndarray) -> np.ndarray:
    """Negate columns with even 1-based index (turns flip rate delta into 1 - delta)."""
    out = np.array(Y, dtype=float, copy=True)
    out[:, 1::2] *= -1.0
    return out
