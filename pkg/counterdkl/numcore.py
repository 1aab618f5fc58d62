"""
Dense symmetric linear algebra for exact GP inference

Cholesky with an escalating jitter ladder, triangular solves and log-determinants.
All matrices are dense float64.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import linalg
from loguru import logger

from counterdkl.config import settings
from counterdkl.errors import DimensionMismatch, NotPositiveDefinite


@dataclass(frozen=True, eq=False)
class CholFactor:
    """Lower Cholesky factor of a + jitter_used * I"""

    lower: np.ndarray
    jitter_used: float

    @property
    def n(self) -> int:
        return self.lower.shape[0]

    def reconstruct(self) -> np.ndarray:
        return self.lower @ self.lower.T


def symmetrize(a: np.ndarray) -> np.ndarray:
    """
    Return (A + A^T) / 2 as a float64 array

    Args:
        a: Square matrix

    Returns:
        Exactly symmetric copy

    Raises:
        DimensionMismatch: a is not square
        ValueError: a has non-finite entries
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionMismatch(f"expected a square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix has non-finite entries")
    return 0.5 * (a + a.T)


def cholesky(a: np.ndarray, base_jitter: Optional[float] = None) -> CholFactor:
    """
    Cholesky factorization with adaptive jitter

    The jitter starts at base_jitter and is multiplied by settings.jitter_factor after
    every failure (a zero base restarts the ladder at settings.jitter_base) until it
    exceeds settings.jitter_cap.

    Args:
        a: Symmetric matrix (symmetrized on entry)
        base_jitter: First jitter tried; defaults to settings.jitter_base

    Returns:
        CholFactor with the jitter actually used

    Raises:
        NotPositiveDefinite: Factorization failed at the jitter cap
    """
    a = symmetrize(a)
    n = a.shape[0]
    jitter = settings.jitter_base if base_jitter is None else float(base_jitter)
    if jitter < 0:
        raise ValueError(f"base_jitter must be nonnegative, got {jitter}")
    start = jitter

    while jitter <= settings.jitter_cap:
        try:
            lower = linalg.cholesky(a + jitter * np.eye(n), lower=True, check_finite=False)
        except linalg.LinAlgError:
            jitter = max(jitter * settings.jitter_factor, settings.jitter_base)
            continue
        if jitter > start and jitter > settings.jitter_base:
            logger.warning(f"⚠️ Cholesky needed jitter {jitter:.1e} (n={n})")
        return CholFactor(lower=lower, jitter_used=jitter)

    raise NotPositiveDefinite(f"matrix of order {n} is not positive definite at jitter cap {settings.jitter_cap:.1e}")


def solve_posdef(f: CholFactor, b: np.ndarray) -> np.ndarray:
    """
    Solve (A + jitter I) x = b from its Cholesky factor

    Args:
        f: Cholesky factor
        b: Right-hand side, vector of length n or n x k matrix

    Returns:
        Solution with the shape of b
    """
    b = np.asarray(b, dtype=np.float64)
    if b.shape[0] != f.n:
        raise DimensionMismatch(f"right-hand side has {b.shape[0]} rows, factor has order {f.n}")
    return linalg.cho_solve((f.lower, True), b, check_finite=False)


def solve_lower(f: CholFactor, b: np.ndarray) -> np.ndarray:
    """L^{-1} b (used for posterior variances)"""
    b = np.asarray(b, dtype=np.float64)
    if b.shape[0] != f.n:
        raise DimensionMismatch(f"right-hand side has {b.shape[0]} rows, factor has order {f.n}")
    return linalg.solve_triangular(f.lower, b, lower=True, check_finite=False)


def inverse(f: CholFactor) -> np.ndarray:
    """(A + jitter I)^{-1}, symmetrized"""
    return symmetrize(solve_posdef(f, np.eye(f.n)))


def logdet(f: CholFactor) -> float:
    """log det(A + jitter I) = 2 * sum(log diag(L))"""
    return float(2.0 * np.sum(np.log(np.diag(f.lower))))
