"""
Causal estimands and evaluation metrics

Every function takes a "model": anything exposing predict_batch(X, TaskIndex) -> (mean,
variance) plus n_actions / n_outcomes, i.e. a TrainedModel or an OracleModel. Value
sources (value_fn) are callables (X, a, m) -> per-unit expected outcomes; a
GroundTruthOracle is one, model_surface(model) turns a model into one.
"""

from dataclasses import dataclass
from enum import Enum
from typing import Callable, List, Optional, Sequence, Union

import numpy as np

from counterdkl.config import settings
from counterdkl.coregion import TaskIndex
from counterdkl.dataset import Dataset
from counterdkl.errors import InvalidPolicy, LengthMismatch, NoTreatedUnits, NotBinaryActions
from counterdkl.schemas import ModelVariant, PosteriorPrediction
from counterdkl.simgen import GroundTruthOracle

ValueFn = Callable[[np.ndarray, int, int], np.ndarray]

POLICY_TOL = 1e-12


# ========== ORACLE AS A MODEL ==========

class OracleModel:
    """Ground truth behind the model interface: exact means, zero variance"""

    variant = ModelVariant.ORACLE

    def __init__(self, oracle: GroundTruthOracle):
        self.oracle = oracle

    @property
    def n_actions(self) -> int:
        return self.oracle.n_actions

    @property
    def n_outcomes(self) -> int:
        return self.oracle.n_outcomes

    def predict_batch(self, x: np.ndarray, task: TaskIndex):
        mean = self.oracle.true_surface(x, task.action, task.outcome)
        return mean, np.zeros_like(mean)

    def predict(self, x_star: np.ndarray, task: TaskIndex) -> PosteriorPrediction:
        mean, var = self.predict_batch(np.asarray(x_star, dtype=np.float64).reshape(1, -1), task)
        return PosteriorPrediction.from_moments(mean[0], var[0])


def model_surface(model) -> ValueFn:
    """Posterior-mean value source of a model"""

    def value_fn(x: np.ndarray, a: int, m: int = 0) -> np.ndarray:
        return model.predict_batch(x, TaskIndex(a, m))[0]

    return value_fn


def _as_rows(x: np.ndarray) -> np.ndarray:
    return np.atleast_2d(np.asarray(x, dtype=np.float64))


# ========== EFFECTS ==========

def ice(model, x: np.ndarray, a: int, m: int = 0) -> PosteriorPrediction:
    """Posterior of E(Y_m | do(A = a), X = x)"""
    return model.predict(x, TaskIndex(a, m))


def cate(model, x: np.ndarray, a: int, b: int, m: int = 0) -> float:
    """Posterior-mean difference f_a(x) - f_b(x)"""
    if a == b:
        raise ValueError("cate needs two distinct actions")
    return float(ice(model, x, a, m).mean - ice(model, x, b, m).mean)


def cate_batch(model, x: np.ndarray, a: int, b: int, m: int = 0) -> np.ndarray:
    if a == b:
        raise ValueError("cate needs two distinct actions")
    x = _as_rows(x)
    return model.predict_batch(x, TaskIndex(a, m))[0] - model.predict_batch(x, TaskIndex(b, m))[0]


def att(model, data: Dataset, a: int, b: int, m: int = 0) -> float:
    """
    Average effect of a versus b over units observed under a

    Raises:
        NoTreatedUnits: no unit has A == a
    """
    treated = data.A == a
    if not treated.any():
        raise NoTreatedUnits(f"no unit was observed under action {a}")
    return float(np.mean(cate_batch(model, data.X[treated], a, b, m)))


# ========== POLICIES ==========

class PolicyKind(str, Enum):
    UNIFORM = "uniform"
    DETERMINISTIC = "deterministic"
    STOCHASTIC = "stochastic"


@dataclass(frozen=True)
class PolicySpec:
    """
    Action-assignment rule over D actions

    rule maps an n x P covariate matrix to per-unit actions (deterministic) or to an n x D
    probability matrix (stochastic); the uniform policy needs no rule.
    """

    kind: PolicyKind
    n_actions: int
    rule: Optional[Callable[[np.ndarray], np.ndarray]] = None

    @classmethod
    def uniform(cls, n_actions: int) -> "PolicySpec":
        return cls(PolicyKind.UNIFORM, n_actions)

    @classmethod
    def deterministic(cls, n_actions: int, rule: Union[Callable[[np.ndarray], np.ndarray], np.ndarray]) -> "PolicySpec":
        return cls(PolicyKind.DETERMINISTIC, n_actions, rule if callable(rule) else _constant(rule))

    @classmethod
    def stochastic(cls, n_actions: int, rule: Union[Callable[[np.ndarray], np.ndarray], np.ndarray]) -> "PolicySpec":
        return cls(PolicyKind.STOCHASTIC, n_actions, rule if callable(rule) else _constant(rule))

    def probabilities(self, x: np.ndarray) -> np.ndarray:
        """
        n x D action probabilities at x

        Raises:
            InvalidPolicy: actions out of range, or rows not nonnegative / summing to 1 within 1e-12
        """
        x = _as_rows(x)
        n, d = x.shape[0], self.n_actions
        if self.kind == PolicyKind.UNIFORM:
            return np.full((n, d), 1.0 / d)
        out = np.asarray(self.rule(x))
        if self.kind == PolicyKind.DETERMINISTIC:
            actions = out.astype(np.int64).reshape(-1)
            if actions.shape[0] != n or actions.min() < 0 or actions.max() >= d:
                raise InvalidPolicy(f"deterministic policy must give one action in 0..{d - 1} per unit")
            probs = np.zeros((n, d))
            probs[np.arange(n), actions] = 1.0
            return probs
        probs = out.astype(np.float64)
        if probs.shape != (n, d):
            raise InvalidPolicy(f"stochastic policy must give an {n} x {d} matrix, got {probs.shape}")
        if np.any(probs < 0) or np.any(np.abs(probs.sum(axis=1) - 1.0) > POLICY_TOL):
            raise InvalidPolicy("policy probabilities must be nonnegative and sum to 1")
        return probs


def _constant(values: np.ndarray) -> Callable[[np.ndarray], np.ndarray]:
    values = np.asarray(values)

    def rule(x: np.ndarray) -> np.ndarray:
        if values.shape[0] != x.shape[0]:
            raise InvalidPolicy(f"policy was tabulated for {values.shape[0]} units, got {x.shape[0]}")
        return values

    return rule


def policy_value(value_fn: ValueFn, policy: PolicySpec, x: np.ndarray, m: int = 0) -> float:
    """(1/N) sum_i sum_a pi(a | x_i) value_fn(x_i, a, m)"""
    x = _as_rows(x)
    probs = policy.probabilities(x)
    values = np.column_stack([value_fn(x, a, m) for a in range(policy.n_actions)])
    return float(np.mean(np.sum(probs * values, axis=1)))


def unit_values(value_fn: ValueFn, policy: PolicySpec, x: np.ndarray, m: int = 0) -> np.ndarray:
    """Per-unit policy values sum_a pi(a | x_i) value_fn(x_i, a, m)"""
    x = _as_rows(x)
    values = np.column_stack([value_fn(x, a, m) for a in range(policy.n_actions)])
    return np.sum(policy.probabilities(x) * values, axis=1)


def optimal_policy(model, x: np.ndarray, weights: Optional[Sequence[float]] = None) -> np.ndarray:
    """
    Per-unit argmax over actions of sum_m w_m * posterior mean

    Args:
        model: Model exposing predict_batch
        x: n x P covariates
        weights: Outcome weights (nonnegative, summing to 1); equal by default

    Returns:
        Action per unit; ties go to the lowest index
    """
    x = _as_rows(x)
    m_count = model.n_outcomes
    w = np.full(m_count, 1.0 / m_count) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (m_count,) or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
        raise ValueError(f"outcome weights must be {m_count} nonnegative values summing to 1")
    score = np.zeros((x.shape[0], model.n_actions))
    for m in range(m_count):
        if w[m] == 0:
            continue
        for a in range(model.n_actions):
            score[:, a] += w[m] * model.predict_batch(x, TaskIndex(a, m))[0]
    return np.argmax(score, axis=1)


def oar(predicted: Sequence[int], true_best: Sequence[int]) -> float:
    """Fraction of units allocated to their true best action"""
    predicted = np.asarray(predicted)
    true_best = np.asarray(true_best)
    if predicted.shape != true_best.shape:
        raise LengthMismatch(f"{predicted.shape[0]} predicted actions vs {true_best.shape[0]} true best actions")
    if predicted.size == 0:
        raise LengthMismatch("oar needs at least one unit")
    return float(np.mean(predicted == true_best))


# ========== UNCERTAINTY AND RISK ==========

def coverage95(model, oracle: ValueFn, x: np.ndarray, tasks: Optional[Sequence[TaskIndex]] = None) -> float:
    """
    Share of (unit, task) pairs whose true surface lies inside the 95% credible band

    Args:
        model: Model exposing predict_batch
        oracle: True surface source
        x: n x P covariates
        tasks: Tasks to check; all D x M by default
    """
    x = _as_rows(x)
    if tasks is None:
        tasks = [TaskIndex(a, m) for m in range(model.n_outcomes) for a in range(model.n_actions)]
    hits = []
    for task in tasks:
        mean, var = model.predict_batch(x, task)
        half = settings.credible_z * np.sqrt(np.maximum(var, 0.0))
        truth = oracle(x, task.action, task.outcome)
        hits.append((mean - half <= truth) & (truth <= mean + half))
    return float(np.mean(np.concatenate(hits)))


def ice_sign_policy(model, x: np.ndarray, m: int = 0) -> np.ndarray:
    """Treat (action 1) wherever the estimated effect of 1 versus 0 is positive"""
    if model.n_actions != 2:
        raise NotBinaryActions(f"the ICE-sign rule needs two actions, model has {model.n_actions}")
    return (cate_batch(model, x, 1, 0, m) > 0).astype(np.int64)


def policy_risk(value_fn: ValueFn, actions: Sequence[int], x: np.ndarray, m: int = 0, n_actions: int = 2) -> float:
    """
    1 - [E(Y | do(1), pi = 1) p(pi = 1) + E(Y | do(0), pi = 0) p(pi = 0)]

    Args:
        value_fn: True surface source
        actions: Binary treatment rule per unit (e.g. ice_sign_policy)
        x: n x P covariates
        m: Outcome
        n_actions: Number of actions of the setting

    Raises:
        NotBinaryActions: the setting is not binary
    """
    if n_actions != 2:
        raise NotBinaryActions(f"policy risk needs two actions, got {n_actions}")
    x = _as_rows(x)
    actions = np.asarray(actions, dtype=np.int64)
    if actions.shape != (x.shape[0],):
        raise LengthMismatch(f"{actions.shape[0]} actions for {x.shape[0]} units")
    value = 0.0
    for a in (0, 1):
        chosen = actions == a
        if chosen.any():
            value += float(np.mean(value_fn(x[chosen], a, m))) * float(np.mean(chosen))
    return 1.0 - value


def ope_regret(estimated_value: float, oracle_value: float) -> float:
    """|V_hat - V|"""
    if not (np.isfinite(estimated_value) and np.isfinite(oracle_value)):
        raise ValueError("policy values must be finite")
    return float(abs(estimated_value - oracle_value))


def rmse(pred: Sequence[float], truth: Sequence[float]) -> float:
    """Root mean squared error of paired vectors"""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    truth = np.asarray(truth, dtype=np.float64).reshape(-1)
    if pred.shape != truth.shape:
        raise LengthMismatch(f"{pred.shape[0]} predictions vs {truth.shape[0]} targets")
    if pred.size == 0:
        raise LengthMismatch("rmse needs at least one pair")
    return float(np.sqrt(np.mean((pred - truth) ** 2)))


def ice_rmse(
    model,
    value_fn: ValueFn,
    x: np.ndarray,
    actions: Optional[Sequence[int]] = None,
    m: int = 0,
    mask: Optional[np.ndarray] = None,
) -> float:
    """
    RMSE of posterior means against the true surfaces, pooled over actions

    Args:
        model: Model exposing predict_batch
        value_fn: True surface source
        x: n x P covariates
        actions: Actions to pool; all by default
        m: Outcome
        mask: Optional boolean row filter (e.g. a poor-overlap region)
    """
    x = _as_rows(x)
    if mask is not None:
        x = x[np.asarray(mask, dtype=bool)]
    actions = range(model.n_actions) if actions is None else actions
    preds: List[np.ndarray] = []
    truths: List[np.ndarray] = []
    for a in actions:
        preds.append(model.predict_batch(x, TaskIndex(a, m))[0])
        truths.append(value_fn(x, a, m))
    return rmse(np.concatenate(preds), np.concatenate(truths))
