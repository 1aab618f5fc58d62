"""
Coregionalization over actions and outcomes

B = L L^T + diag(exp(log_diag)) per factor; the multitask covariance between rows i, j is
sum_q B_Y,q[m_i, m_j] * B_A,q[a_i, a_j] * k_q(x_i, x_j). A component without an outcome
(or action) factor contributes a multiplier of 1 and requires that dimension to have size 1.
"""

import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from counterdkl.config import settings
from counterdkl.errors import DimensionMismatch, TaskOutOfRange
from counterdkl.kernels import BaseKernelParams, kernel_diag, kernel_matrix
from counterdkl.schemas import KernelKind


@dataclass(frozen=True, order=True)
class TaskIndex:
    """(action, outcome) pair; flat index is outcome * D + action"""

    action: int
    outcome: int = 0

    def flat(self, n_actions: int) -> int:
        return self.outcome * n_actions + self.action

    @classmethod
    def from_flat(cls, index: int, n_actions: int) -> "TaskIndex":
        return cls(action=index % n_actions, outcome=index // n_actions)


TaskArg = Union[Sequence[TaskIndex], np.ndarray]


@dataclass(frozen=True, eq=False)
class CoregionFactor:
    """Low-rank-plus-diagonal factor of a T x T coregionalization matrix"""

    L: np.ndarray
    log_diag: np.ndarray

    def __post_init__(self):
        L = np.atleast_2d(np.asarray(self.L, dtype=np.float64))
        log_diag = np.atleast_1d(np.asarray(self.log_diag, dtype=np.float64))
        if L.shape[0] != log_diag.shape[0] or L.shape[1] > L.shape[0]:
            raise DimensionMismatch(f"factor L {L.shape} incompatible with log_diag {log_diag.shape}")
        object.__setattr__(self, "L", L)
        object.__setattr__(self, "log_diag", log_diag)

    @property
    def num_tasks(self) -> int:
        return self.L.shape[0]

    @property
    def rank(self) -> int:
        return self.L.shape[1]

    @classmethod
    def identity_like(cls, num_tasks: int, rank: int, diag: float, rng: np.random.Generator) -> "CoregionFactor":
        """L[a][r] = 1 if a == r else 0.01 * N(0, 1)"""
        L = 0.01 * rng.standard_normal((num_tasks, rank))
        for r in range(min(num_tasks, rank)):
            L[r, r] = 1.0
        return cls(L=L, log_diag=np.full(num_tasks, math.log(diag)))


@dataclass(frozen=True, eq=False)
class KernelComponent:
    """One separable term B_Y (x) B_A (x) k"""

    kind: KernelKind
    base: BaseKernelParams
    action_factor: Optional[CoregionFactor] = None
    outcome_factor: Optional[CoregionFactor] = None


@dataclass(frozen=True, eq=False)
class MultitaskKernelSpec:
    """Sum of Q separable components over a D x M task grid"""

    components: Tuple[KernelComponent, ...]
    n_actions: int = 1
    n_outcomes: int = 1

    def __post_init__(self):
        if not self.components:
            raise ValueError("a multitask kernel needs at least one component")
        for comp in self.components:
            for factor, size, name in ((comp.action_factor, self.n_actions, "action"), (comp.outcome_factor, self.n_outcomes, "outcome")):
                if factor is None and size != 1:
                    raise DimensionMismatch(f"component without {name} factor requires a single {name}, got {size}")
                if factor is not None and factor.num_tasks != size:
                    raise DimensionMismatch(f"{name} factor has {factor.num_tasks} tasks, kernel has {size}")

    @property
    def num_tasks(self) -> int:
        return self.n_actions * self.n_outcomes


def _diag_floor() -> float:
    return math.log(settings.coregion_diag_floor)


def build_B(f: CoregionFactor) -> np.ndarray:
    """
    Coregionalization matrix L L^T + diag(exp(log_diag))

    log_diag is floored at log(settings.coregion_diag_floor), so B is positive definite.
    """
    b = f.L @ f.L.T + np.diag(np.exp(np.maximum(f.log_diag, _diag_floor())))
    return 0.5 * (b + b.T)


def _factor_matrix(f: Optional[CoregionFactor]) -> np.ndarray:
    return np.ones((1, 1)) if f is None else build_B(f)


def task_arrays(spec: MultitaskKernelSpec, tasks: TaskArg) -> Tuple[np.ndarray, np.ndarray]:
    """Action and outcome index arrays, range-checked against the task grid"""
    if isinstance(tasks, np.ndarray) and tasks.ndim == 2:
        a, m = tasks[:, 0].astype(int), tasks[:, 1].astype(int)
    else:
        a = np.array([t.action for t in tasks], dtype=int)
        m = np.array([t.outcome for t in tasks], dtype=int)
    if a.size and (a.min() < 0 or a.max() >= spec.n_actions or m.min() < 0 or m.max() >= spec.n_outcomes):
        raise TaskOutOfRange(f"tasks outside the {spec.n_actions} x {spec.n_outcomes} grid")
    return a, m


def task_cov(spec: MultitaskKernelSpec, t: TaskIndex, t2: TaskIndex) -> float:
    """
    Scalar multiplier of the base kernel between tasks t and t2

    Returns:
        sum_q B_Y,q[m, m'] * B_A,q[a, a'] (components share one base kernel form;
        for Q > 1 the per-component products are summed)
    """
    task_arrays(spec, [t, t2])
    total = 0.0
    for comp in spec.components:
        ba = _factor_matrix(comp.action_factor)
        by = _factor_matrix(comp.outcome_factor)
        ai, ai2 = (t.action, t2.action) if comp.action_factor is not None else (0, 0)
        mi, mi2 = (t.outcome, t2.outcome) if comp.outcome_factor is not None else (0, 0)
        total += by[mi, mi2] * ba[ai, ai2]
    return float(total)


def component_task_matrix(
    comp: KernelComponent,
    a1: np.ndarray,
    m1: np.ndarray,
    a2: np.ndarray,
    m2: np.ndarray,
) -> np.ndarray:
    """Row-by-row task multiplier B_Y[m1_i, m2_j] * B_A[a1_i, a2_j] of one component"""
    ba = _factor_matrix(comp.action_factor)
    by = _factor_matrix(comp.outcome_factor)
    if comp.action_factor is None:
        a1, a2 = np.zeros_like(a1), np.zeros_like(a2)
    if comp.outcome_factor is None:
        m1, m2 = np.zeros_like(m1), np.zeros_like(m2)
    return by[np.ix_(m1, m2)] * ba[np.ix_(a1, a2)]


def _check_rows(x: np.ndarray, n: int, name: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != n:
        raise DimensionMismatch(f"{name} must have {n} rows aligned with its tasks, got shape {x.shape}")
    return x


def assemble_train_cov(spec: MultitaskKernelSpec, x: np.ndarray, tasks: TaskArg, noise: np.ndarray) -> np.ndarray:
    """
    Training covariance of the block-design rows

    Args:
        spec: Multitask kernel
        x: n x d features, one row per observation
        tasks: Observed (action, outcome) of each row
        noise: Noise variance per flat task index (length D * M)

    Returns:
        Symmetric n x n matrix K + diag(noise[t_i])
    """
    a, m = task_arrays(spec, tasks)
    x = _check_rows(x, a.shape[0], "X")
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != (spec.num_tasks,):
        raise DimensionMismatch(f"noise must have one entry per task ({spec.num_tasks}), got {noise.shape}")
    k = np.zeros((a.shape[0], a.shape[0]))
    for comp in spec.components:
        k += component_task_matrix(comp, a, m, a, m) * kernel_matrix(comp.kind, comp.base, x, x)
    k = 0.5 * (k + k.T)
    k[np.diag_indices_from(k)] += noise[m * spec.n_actions + a]
    return k


def assemble_cross_cov(
    spec: MultitaskKernelSpec,
    x_train: np.ndarray,
    tasks_train: TaskArg,
    x_query: np.ndarray,
    tasks_query: TaskArg,
) -> np.ndarray:
    """n_query x n_train cross-covariance (no noise)"""
    a, m = task_arrays(spec, tasks_train)
    aq, mq = task_arrays(spec, tasks_query)
    x_train = _check_rows(x_train, a.shape[0], "X_train")
    x_query = _check_rows(x_query, aq.shape[0], "X_query")
    k = np.zeros((aq.shape[0], a.shape[0]))
    for comp in spec.components:
        k += component_task_matrix(comp, aq, mq, a, m) * kernel_matrix(comp.kind, comp.base, x_query, x_train)
    return k


def assemble_prior_diag(spec: MultitaskKernelSpec, x_query: np.ndarray, tasks_query: TaskArg) -> np.ndarray:
    """Prior variance of each query row (diagonal of the query covariance, no noise)"""
    aq, mq = task_arrays(spec, tasks_query)
    x_query = _check_rows(x_query, aq.shape[0], "X_query")
    out = np.zeros(aq.shape[0])
    for comp in spec.components:
        ba = _factor_matrix(comp.action_factor)
        by = _factor_matrix(comp.outcome_factor)
        ai = aq if comp.action_factor is not None else np.zeros_like(aq)
        mi = mq if comp.outcome_factor is not None else np.zeros_like(mq)
        out += by[mi, mi] * ba[ai, ai] * kernel_diag(comp.kind, comp.base, x_query)
    return out


# ========== GRADIENTS ==========

def factor_grads_from_b(f: CoregionFactor, gb: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Chain dL/dB into the factor parameters

    Args:
        f: Factor
        gb: T x T gradient with respect to the entries of B

    Returns:
        (gradient wrt L, gradient wrt log_diag)
    """
    d_l = (gb + gb.T) @ f.L
    active = f.log_diag >= _diag_floor()
    d_ld = np.where(active, np.diag(gb) * np.exp(f.log_diag), 0.0)
    return d_l, d_ld


def _one_hot(idx: np.ndarray, size: int) -> np.ndarray:
    e = np.zeros((idx.shape[0], size))
    e[np.arange(idx.shape[0]), idx] = 1.0
    return e


def component_vjp(
    comp: KernelComponent,
    a: np.ndarray,
    m: np.ndarray,
    g: np.ndarray,
) -> Dict[str, np.ndarray]:
    """
    Contract dK/d(factor parameters) of one component with an upstream matrix

    Args:
        comp: Component
        a, m: Local action / outcome index of each row
        g: n x n upstream gradient already multiplied by the component's base kernel matrix

    Returns:
        Dict with keys action_L, action_log_diag, outcome_L, outcome_log_diag (present factors only)
    """
    out: Dict[str, np.ndarray] = {}
    ba = _factor_matrix(comp.action_factor)
    by = _factor_matrix(comp.outcome_factor)
    if comp.action_factor is not None:
        w = g * (by[np.ix_(m, m)] if comp.outcome_factor is not None else 1.0)
        e = _one_hot(a, comp.action_factor.num_tasks)
        out["action_L"], out["action_log_diag"] = factor_grads_from_b(comp.action_factor, e.T @ w @ e)
    if comp.outcome_factor is not None:
        w = g * (ba[np.ix_(a, a)] if comp.action_factor is not None else 1.0)
        e = _one_hot(m, comp.outcome_factor.num_tasks)
        out["outcome_L"], out["outcome_log_diag"] = factor_grads_from_b(comp.outcome_factor, e.T @ w @ e)
    return out


def coregion_grads(spec: MultitaskKernelSpec, x: np.ndarray, tasks: TaskArg) -> List[Dict[str, np.ndarray]]:
    """
    Full gradient matrices of the assembled covariance with respect to every factor entry

    Meant for small n. For component q the dict maps
      action_L -> array (D, R, n, n), action_log_diag -> array (D, n, n),
      outcome_L -> array (M, R, n, n), outcome_log_diag -> array (M, n, n).
    """
    a, m = task_arrays(spec, tasks)
    x = _check_rows(x, a.shape[0], "X")
    out = []
    for comp in spec.components:
        kb = kernel_matrix(comp.kind, comp.base, x, x)
        ba = _factor_matrix(comp.action_factor)
        by = _factor_matrix(comp.outcome_factor)
        grads: Dict[str, np.ndarray] = {}
        for name, factor, own, other in (
            ("action", comp.action_factor, a, by[np.ix_(m, m)] if comp.outcome_factor is not None else 1.0),
            ("outcome", comp.outcome_factor, m, ba[np.ix_(a, a)] if comp.action_factor is not None else 1.0),
        ):
            if factor is None:
                continue
            t, r = factor.L.shape
            d_l = np.zeros((t, r, a.shape[0], a.shape[0]))
            d_ld = np.zeros((t, a.shape[0], a.shape[0]))
            for u in range(t):
                for k in range(r):
                    db = np.zeros((t, t))
                    db[u, :] += factor.L[:, k]
                    db[:, u] += factor.L[:, k]
                    d_l[u, k] = db[np.ix_(own, own)] * other * kb
                if factor.log_diag[u] >= _diag_floor():
                    d_ld[u] = np.exp(factor.log_diag[u]) * np.outer(own == u, own == u) * other * kb
            grads[f"{name}_L"] = d_l
            grads[f"{name}_log_diag"] = d_ld
        out.append(grads)
    return out
