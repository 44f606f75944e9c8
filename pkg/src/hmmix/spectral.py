"""Bucketing, Gram matrices, top eigenpair and the sign-invariant loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import DomainError

EIG_TOL = 1e-10
EIG_MAX_ITER = 10_000
_AUX_SEED = 20240601  # restart stream for the power iteration


class ConvergenceError(RuntimeError):
    def __init__(self, message, pair):
        super().__init__(message)
        self.pair = pair


@dataclass(frozen=True)
class BucketMatrix:
    Ytilde: np.ndarray  # (d, ell) bucket means
    ell: int
    k: int
    n_used: int


@dataclass(frozen=True)
class SigmaHat:
    S: np.ndarray
    ell: int
    k: int


@dataclass(frozen=True)
class EigenPair:
    lambda_max: float
    v_max: np.ndarray
    iterations: int
    residual: float
    converged: bool = True


def bucketize(Y: np.ndarray, ell: int) -> BucketMatrix:
    """Average ``ell`` consecutive blocks of ``k = n // ell`` columns.

    The trailing ``n - k * ell`` columns are dropped so every bucket has the
    same length.
    """
    Y = np.asarray(Y, dtype=float)
    d, n = Y.shape
    ell = int(ell)
    if not 1 <= ell <= n:
        raise DomainError(f"number of buckets must lie in [1, {n}], got {ell}")
    k = n // ell
    used = k * ell
    Ytilde = Y[:, :used].reshape(d, ell, k).mean(axis=2) if k > 1 else Y[:, :used].copy()
    return BucketMatrix(Ytilde=Ytilde, ell=ell, k=k, n_used=used)


def gram(B: BucketMatrix) -> SigmaHat:
    S = (B.Ytilde @ B.Ytilde.T) / B.ell
    S = 0.5 * (S + S.T)
    return SigmaHat(S=S, ell=B.ell, k=B.k)


def _canonical_sign(v):
    idx = np.flatnonzero(np.abs(v) > 1e-8)
    if idx.size and v[idx[0]] < 0:
        return -v
    return v


def top_eigenpair(S, tol: float = EIG_TOL, max_iter: int = EIG_MAX_ITER,
                  strict: bool = False) -> EigenPair:
    """Top eigenpair of a symmetric PSD matrix by power iteration.

    Each step applies the current matrix power ``A = S^(2^j)`` (rescaled) to
    the iterate and then squares ``A``, so the contraction factor of the
    subdominant components is squared at every step. Convergence is declared
    when ``||S v - lambda v|| <= tol * max(lambda, 1)``. The start vector is
    the normalized all-ones vector; if it is (numerically) orthogonal to the
    dominant subspace, the iteration restarts from a fixed auxiliary stream,
    and a converged pair is cross-checked against one random probe before
    being returned.

    With ``strict=True`` a non-converged result raises ``ConvergenceError``
    (carrying the best iterate); otherwise it is returned with
    ``converged=False``.
    """
    if tol <= 0:
        raise DomainError("tol must be positive")
    S = np.asarray(S.S if isinstance(S, SigmaHat) else S, dtype=float)
    d = S.shape[0]
    scale = np.max(np.abs(S)) if S.size else 0.0
    if scale == 0.0:
        e1 = np.zeros(d)
        e1[0] = 1.0
        return EigenPair(0.0, e1, 0, 0.0, True)

    aux = np.random.default_rng(_AUX_SEED)
    A = S / scale
    v = np.full(d, 1.0 / np.sqrt(d))
    best = None
    probed = False
    for it in range(1, max_iter + 1):
        w = S @ v
        lam = float(v @ w)
        res = float(np.linalg.norm(w - lam * v))
        if best is None or res < best[2]:
            best = (lam, v, res)
        if res <= tol * max(lam, 1.0):
            if probed:
                return EigenPair(lam, _canonical_sign(v), it, res, True)
            # a start vector that is an exact non-top eigenvector stagnates here
            probed = True
            u = A @ aux.standard_normal(d)
            nu = np.linalg.norm(u)
            if nu > 0:
                u /= nu
                if float(u @ S @ u) > lam + tol * max(lam, 1.0):
                    v = u
                    continue
            return EigenPair(lam, _canonical_sign(v), it, res, True)
        u = A @ v
        nu = np.linalg.norm(u)
        if nu <= 1e-13 * np.linalg.norm(A):
            u = aux.standard_normal(d)
            nu = np.linalg.norm(u)
        v = u / nu
        A = A @ A
        A = 0.5 * (A + A.T)
        A /= np.max(np.abs(A))
    lam, v, res = best
    pair = EigenPair(lam, _canonical_sign(v), max_iter, res, False)
    if strict:
        raise ConvergenceError(f"power iteration did not converge in {max_iter} steps "
                               f"(residual {res:.3e})", pair)
    return pair


def sign_loss(a, b) -> float:
    """min(||a - b||, ||a + b||)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise DomainError(f"length mismatch: {a.shape} vs {b.shape}")
    return float(min(np.linalg.norm(a - b), np.linalg.norm(a + b)))


def sq_sign_loss(a, b) -> float:
    return sign_loss(a, b) ** 2
