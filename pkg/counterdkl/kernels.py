"""
Base kernels k(x, z) with analytic gradients

Hyperparameters are stored in log space. RBF is always ARD (one lengthscale per input
dimension); an isotropic kernel is obtained by tying the lengthscales. The linear kernel
is s * <x, z> and ignores the lengthscales (their gradients are zero).
"""

from dataclasses import dataclass, field
from typing import Tuple

import numpy as np

from counterdkl.errors import DimensionMismatch
from counterdkl.schemas import KernelKind


@dataclass(frozen=True, eq=False)
class BaseKernelParams:
    """Log lengthscales (one per input dimension) and log signal variance"""

    log_lengthscales: np.ndarray
    log_signal_variance: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "log_lengthscales", np.atleast_1d(np.asarray(self.log_lengthscales, dtype=np.float64)))
        values = np.append(np.exp(self.log_lengthscales), np.exp(self.log_signal_variance))
        if not np.all(np.isfinite(values)) or np.any(values <= 0):
            raise ValueError("kernel hyperparameters must have finite, strictly positive exponentials")

    @classmethod
    def default(cls, dim: int) -> "BaseKernelParams":
        return cls(log_lengthscales=np.zeros(dim), log_signal_variance=0.0)

    @property
    def dim(self) -> int:
        return self.log_lengthscales.shape[0]

    @property
    def lengthscales(self) -> np.ndarray:
        return np.exp(self.log_lengthscales)

    @property
    def signal_variance(self) -> float:
        return float(np.exp(self.log_signal_variance))


@dataclass(frozen=True, eq=False)
class KernelGrads:
    """
    Gradients of K(X, X)

    lengthscales[d] is dK/d(log l_d), signal_variance is dK/d(log s). inputs[i, j, d] is the
    derivative of k(x_i, x_j) with respect to coordinate d of its first argument x_i; the
    derivative with respect to the second argument is inputs[j, i, d].
    """

    lengthscales: np.ndarray
    signal_variance: np.ndarray
    inputs: np.ndarray = field(repr=False)


def _as_matrix(x: np.ndarray, dim: int, name: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != dim:
        raise DimensionMismatch(f"{name} must have {dim} columns, got shape {x.shape}")
    return x


def _scaled_sqdist(params: BaseKernelParams, x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
    a = x1 / params.lengthscales
    b = x2 / params.lengthscales
    d2 = np.sum(a**2, axis=1)[:, None] + np.sum(b**2, axis=1)[None, :] - 2.0 * a @ b.T
    return np.maximum(d2, 0.0)


def kernel_eval(kind: KernelKind, params: BaseKernelParams, x: np.ndarray, z: np.ndarray) -> float:
    """
    Evaluate k(x, z) for a single pair of points

    Args:
        kind: RBF or Linear
        params: Kernel hyperparameters
        x, z: Points with params.dim coordinates

    Returns:
        RBF: s * exp(-0.5 * sum_d (x_d - z_d)^2 / l_d^2); Linear: s * <x, z>
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    z = np.asarray(z, dtype=np.float64).ravel()
    if x.shape[0] != params.dim or z.shape[0] != params.dim:
        raise DimensionMismatch(f"points must have {params.dim} coordinates, got {x.shape[0]} and {z.shape[0]}")
    if kind == KernelKind.LINEAR:
        return params.signal_variance * float(x @ z)
    r = (x - z) / params.lengthscales
    return params.signal_variance * float(np.exp(-0.5 * r @ r))


def kernel_matrix(kind: KernelKind, params: BaseKernelParams, x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
    """
    Kernel matrix K[i, j] = k(x1_i, x2_j)

    Returns:
        n1 x n2 matrix; exactly symmetric when x1 is x2
    """
    same = x1 is x2
    x1 = _as_matrix(x1, params.dim, "X1")
    x2 = x1 if same else _as_matrix(x2, params.dim, "X2")
    if kind == KernelKind.LINEAR:
        k = params.signal_variance * (x1 @ x2.T)
    else:
        k = params.signal_variance * np.exp(-0.5 * _scaled_sqdist(params, x1, x2))
    if same:
        k = 0.5 * (k + k.T)
        if kind == KernelKind.RBF:
            np.fill_diagonal(k, params.signal_variance)
    return k


def kernel_diag(kind: KernelKind, params: BaseKernelParams, x: np.ndarray) -> np.ndarray:
    """Diagonal k(x_i, x_i) without forming the full matrix"""
    x = _as_matrix(x, params.dim, "X")
    if kind == KernelKind.LINEAR:
        return params.signal_variance * np.sum(x**2, axis=1)
    return np.full(x.shape[0], params.signal_variance)


def kernel_grads(kind: KernelKind, params: BaseKernelParams, x: np.ndarray) -> KernelGrads:
    """
    Full gradient matrices of K(X, X) in log-parameter space

    Meant for small n (memory is n^2 * d); training uses kernel_vjp instead.
    """
    x = _as_matrix(x, params.dim, "X")
    k = kernel_matrix(kind, params, x, x)
    diff = x[:, None, :] - x[None, :, :]
    if kind == KernelKind.LINEAR:
        d_ls = np.zeros((params.dim,) + k.shape)
        d_in = np.broadcast_to(params.signal_variance * x[None, :, :], diff.shape).copy()
    else:
        inv_l2 = 1.0 / params.lengthscales**2
        d_ls = np.moveaxis(k[:, :, None] * diff**2 * inv_l2, 2, 0)
        d_in = -k[:, :, None] * diff * inv_l2
    return KernelGrads(lengthscales=d_ls, signal_variance=k.copy(), inputs=d_in)


def kernel_vjp(
    kind: KernelKind,
    params: BaseKernelParams,
    x: np.ndarray,
    g: np.ndarray,
    k: np.ndarray = None,
) -> Tuple[np.ndarray, float, np.ndarray]:
    """
    Contract the gradients of K(X, X) with an upstream matrix G

    Computes sum_ij G_ij dK_ij / dtheta without materializing per-parameter matrices.

    Args:
        kind: Kernel kind
        params: Kernel hyperparameters
        x: n x d inputs
        g: n x n upstream gradient
        k: Precomputed K(X, X), optional

    Returns:
        (gradient wrt log lengthscales, gradient wrt log signal variance, n x d gradient wrt X)
    """
    x = _as_matrix(x, params.dim, "X")
    if k is None:
        k = kernel_matrix(kind, params, x, x)
    p = g * k
    d_sv = float(np.sum(p))
    if kind == KernelKind.LINEAR:
        d_x = params.signal_variance * (g + g.T) @ x
        return np.zeros(params.dim), d_sv, d_x

    inv_l2 = 1.0 / params.lengthscales**2
    row = p.sum(axis=1)
    col = p.sum(axis=0)
    x2 = x**2
    d_ls = inv_l2 * (row @ x2 + col @ x2 - 2.0 * np.einsum("id,ij,jd->d", x, p, x))
    s = p + p.T
    d_x = -inv_l2 * (x * s.sum(axis=1)[:, None] - s @ x)
    return d_ls, d_sv, d_x
