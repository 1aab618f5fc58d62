"""
Multitask GP / deep-kernel models

The six variants share one implementation. A variant is a list of blocks, each block an
exact GP over a subset of the (action, outcome) task grid:
  gp / dkl               one block per (action, outcome), no coregionalization
  countergp / counterdkl one block per outcome, coregionalized over actions
  mogp / modkl           a single block, coregionalized over actions and outcomes
Deep variants put an MLP in front of the base kernel of every block. Training rows follow
the block design: unit i contributes one row per outcome, labelled with its observed action.
"""

import math
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from loguru import logger
from pydantic import BaseModel, Field, ValidationError

from counterdkl import mlp as mlp_ops
from counterdkl.coregion import (
    CoregionFactor,
    KernelComponent,
    MultitaskKernelSpec,
    TaskIndex,
    assemble_cross_cov,
    assemble_train_cov,
    assemble_prior_diag,
    component_task_matrix,
    component_vjp,
)
from counterdkl.dataset import Dataset
from counterdkl.errors import CounterDKLError, DimensionMismatch, Divergence, EmptyDataset, ModelFormatError, TaskOutOfRange
from counterdkl.kernels import BaseKernelParams, kernel_matrix, kernel_vjp
from counterdkl.mlp import MlpParams
from counterdkl.numcore import CholFactor, cholesky, inverse, logdet, solve_lower, solve_posdef
from counterdkl.schemas import Activation, FitConfig, KernelKind, ModelVariant, ParamGroup, PosteriorPrediction, PriorMean
from counterdkl.seeding import make_rng

LOG_2PI = math.log(2.0 * math.pi)
MODEL_FORMAT = "counterdkl-model"
MODEL_FORMAT_VERSION = 1


# ========== STANDARDIZATION ==========

@dataclass(frozen=True, eq=False)
class StandardizationRecord:
    """Training statistics; constant columns have shift 0 and scale 1"""

    x_mean: np.ndarray
    x_scale: np.ndarray
    x_constant: np.ndarray
    y_mean: np.ndarray
    y_scale: np.ndarray
    y_constant: np.ndarray

    @classmethod
    def identity(cls, n_covariates: int, n_outcomes: int) -> "StandardizationRecord":
        return cls(
            x_mean=np.zeros(n_covariates), x_scale=np.ones(n_covariates), x_constant=np.zeros(n_covariates, dtype=bool),
            y_mean=np.zeros(n_outcomes), y_scale=np.ones(n_outcomes), y_constant=np.zeros(n_outcomes, dtype=bool),
        )

    def transform_x(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.x_mean) / self.x_scale

    def transform_y(self, y: np.ndarray) -> np.ndarray:
        return (np.asarray(y, dtype=np.float64) - self.y_mean) / self.y_scale

    def inverse_y(self, y: np.ndarray) -> np.ndarray:
        return np.asarray(y, dtype=np.float64) * self.y_scale + self.y_mean

    def to_dict(self) -> Dict[str, list]:
        return {k: getattr(self, k).tolist() for k in ("x_mean", "x_scale", "x_constant", "y_mean", "y_scale", "y_constant")}

    @classmethod
    def from_dict(cls, d: Dict[str, list]) -> "StandardizationRecord":
        return cls(
            x_mean=np.asarray(d["x_mean"], dtype=np.float64), x_scale=np.asarray(d["x_scale"], dtype=np.float64),
            x_constant=np.asarray(d["x_constant"], dtype=bool), y_mean=np.asarray(d["y_mean"], dtype=np.float64),
            y_scale=np.asarray(d["y_scale"], dtype=np.float64), y_constant=np.asarray(d["y_constant"], dtype=bool),
        )


def _column_stats(values: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    mean = values.mean(axis=0)
    std = values.std(axis=0)
    constant = ~(std > 0)
    return np.where(constant, 0.0, mean), np.where(constant, 1.0, std), constant


def standardize(data: Dataset) -> Tuple[Dataset, StandardizationRecord]:
    """
    Shift/scale covariates and outcomes to zero mean and unit variance

    Args:
        data: Training data (N >= 2)

    Returns:
        (standardized dataset, record able to invert predictions)
    """
    if data.n_units < 2:
        raise EmptyDataset(f"standardization needs at least 2 units, got {data.n_units}")
    x_mean, x_scale, x_const = _column_stats(data.X)
    y_mean, y_scale, y_const = _column_stats(data.Y)
    if x_const.any():
        logger.debug(f"Constant covariate columns passed through: {np.flatnonzero(x_const).tolist()}")
    record = StandardizationRecord(x_mean, x_scale, x_const, y_mean, y_scale, y_const)
    return data.with_arrays(X=record.transform_x(data.X), Y=record.transform_y(data.Y)), record


def destandardize(record: StandardizationRecord, y: np.ndarray) -> np.ndarray:
    """Inverse of the outcome transform (N x M)"""
    return record.inverse_y(y)


# ========== BLOCK LAYOUT ==========

@dataclass(frozen=True)
class Block:
    """Global actions and outcomes covered by one exact GP"""

    actions: Tuple[int, ...]
    outcomes: Tuple[int, ...]

    @property
    def n_actions(self) -> int:
        return len(self.actions)

    @property
    def n_outcomes(self) -> int:
        return len(self.outcomes)

    def local(self, task: TaskIndex) -> Optional[TaskIndex]:
        if task.action in self.actions and task.outcome in self.outcomes:
            return TaskIndex(self.actions.index(task.action), self.outcomes.index(task.outcome))
        return None


def block_layout(variant: ModelVariant, n_actions: int, n_outcomes: int) -> List[Block]:
    """Blocks of a variant over a D x M task grid"""
    if variant == ModelVariant.ORACLE:
        raise ValueError("the oracle variant has no model blocks")
    actions = tuple(range(n_actions))
    outcomes = tuple(range(n_outcomes))
    if variant.shares_outcomes:
        return [Block(actions, outcomes)]
    if variant.shares_actions:
        return [Block(actions, (m,)) for m in outcomes]
    return [Block((a,), (m,)) for m in outcomes for a in actions]


# ========== PARAMETERS ==========

def _group_of(name: str) -> ParamGroup:
    if name.startswith("mlp."):
        return ParamGroup.MLP
    if name == "log_noise":
        return ParamGroup.NOISE
    if name == "mean":
        return ParamGroup.MEAN
    if name.endswith("_L") or name.endswith("_log_diag"):
        return ParamGroup.COREGION
    return ParamGroup.KERNEL


@dataclass(frozen=True, eq=False)
class ThetaParams:
    """Trainable parameters of one block: network, base kernels, coregionalization, noise, task means"""

    components: Tuple[KernelComponent, ...]
    log_noise: np.ndarray
    mlp: Optional[MlpParams] = None
    n_actions: int = 1
    n_outcomes: int = 1
    mean: Optional[np.ndarray] = None

    def __post_init__(self):
        n_tasks = self.n_actions * self.n_outcomes
        object.__setattr__(self, "log_noise", np.atleast_1d(np.asarray(self.log_noise, dtype=np.float64)))
        if self.log_noise.shape != (n_tasks,):
            raise ValueError(f"log_noise needs one entry per task ({n_tasks})")
        mean = np.zeros(n_tasks) if self.mean is None else np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        if mean.shape != (n_tasks,):
            raise ValueError(f"mean needs one entry per task ({n_tasks})")
        object.__setattr__(self, "mean", mean)
        self.spec()

    def spec(self) -> MultitaskKernelSpec:
        return MultitaskKernelSpec(components=tuple(self.components), n_actions=self.n_actions, n_outcomes=self.n_outcomes)

    @property
    def noise(self) -> np.ndarray:
        return np.exp(self.log_noise)

    def named_arrays(self) -> "OrderedDict[str, np.ndarray]":
        """Every trainable array under a stable name"""
        out: "OrderedDict[str, np.ndarray]" = OrderedDict()
        if self.mlp is not None:
            for k, (w, b) in enumerate(zip(self.mlp.weights, self.mlp.biases)):
                out[f"mlp.W{k}"] = w
                out[f"mlp.b{k}"] = b
        for q, comp in enumerate(self.components):
            out[f"k{q}.log_lengthscales"] = comp.base.log_lengthscales
            out[f"k{q}.log_signal_variance"] = np.asarray(comp.base.log_signal_variance, dtype=np.float64)
            if comp.action_factor is not None:
                out[f"k{q}.action_L"] = comp.action_factor.L
                out[f"k{q}.action_log_diag"] = comp.action_factor.log_diag
            if comp.outcome_factor is not None:
                out[f"k{q}.outcome_L"] = comp.outcome_factor.L
                out[f"k{q}.outcome_log_diag"] = comp.outcome_factor.log_diag
        out["log_noise"] = self.log_noise
        out["mean"] = self.mean
        return out

    @property
    def kinds(self) -> List[KernelKind]:
        return [c.kind for c in self.components]

    def with_arrays(self, arrays: Dict[str, np.ndarray]) -> "ThetaParams":
        """Same structure, new values"""
        return _theta_from_arrays(
            arrays, self.kinds, self.mlp.activation if self.mlp is not None else None, self.n_actions, self.n_outcomes
        )

    def to_vector(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.named_arrays().values()])

    def with_vector(self, vec: np.ndarray) -> "ThetaParams":
        arrays, offset = {}, 0
        for name, a in self.named_arrays().items():
            arrays[name] = np.asarray(vec[offset: offset + a.size], dtype=np.float64).reshape(a.shape)
            offset += a.size
        return self.with_arrays(arrays)

    def group_mask(self, groups: Sequence[ParamGroup]) -> np.ndarray:
        """Boolean mask over to_vector() selecting the given groups"""
        return np.concatenate([np.full(a.size, _group_of(n) in groups) for n, a in self.named_arrays().items()])

    def decay_mask(self) -> np.ndarray:
        """Network weight matrices (biases excluded)"""
        return np.concatenate([np.full(a.size, n.startswith("mlp.W")) for n, a in self.named_arrays().items()])

    def to_dict(self) -> dict:
        return {
            "n_actions": self.n_actions,
            "n_outcomes": self.n_outcomes,
            "kinds": [k.value for k in self.kinds],
            "activation": self.mlp.activation.value if self.mlp is not None else None,
            "arrays": {n: a.tolist() for n, a in self.named_arrays().items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ThetaParams":
        arrays = {n: np.asarray(v, dtype=np.float64) for n, v in d["arrays"].items()}
        activation = Activation(d["activation"]) if d.get("activation") else None
        return _theta_from_arrays(arrays, [KernelKind(k) for k in d["kinds"]], activation, d["n_actions"], d["n_outcomes"])


def _theta_from_arrays(
    arrays: Dict[str, np.ndarray],
    kinds: Sequence[KernelKind],
    activation: Optional[Activation],
    n_actions: int,
    n_outcomes: int,
) -> ThetaParams:
    net = None
    if "mlp.W0" in arrays:
        depth = sum(1 for n in arrays if n.startswith("mlp.W"))
        net = MlpParams(
            weights=tuple(np.atleast_2d(np.asarray(arrays[f"mlp.W{k}"], dtype=np.float64)) for k in range(depth)),
            biases=tuple(np.atleast_1d(np.asarray(arrays[f"mlp.b{k}"], dtype=np.float64)) for k in range(depth)),
            activation=activation or Activation.TANH,
        )
    comps = []
    for q, kind in enumerate(kinds):
        base = BaseKernelParams(
            log_lengthscales=arrays[f"k{q}.log_lengthscales"],
            log_signal_variance=float(np.asarray(arrays[f"k{q}.log_signal_variance"])),
        )
        action = outcome = None
        if f"k{q}.action_L" in arrays:
            action = CoregionFactor(L=arrays[f"k{q}.action_L"], log_diag=arrays[f"k{q}.action_log_diag"])
        if f"k{q}.outcome_L" in arrays:
            outcome = CoregionFactor(L=arrays[f"k{q}.outcome_L"], log_diag=arrays[f"k{q}.outcome_log_diag"])
        comps.append(KernelComponent(kind=kind, base=base, action_factor=action, outcome_factor=outcome))
    return ThetaParams(
        components=tuple(comps), log_noise=arrays["log_noise"], mlp=net,
        n_actions=n_actions, n_outcomes=n_outcomes, mean=arrays.get("mean"),
    )


def init_params(
    variant: ModelVariant,
    n_actions: int,
    n_outcomes: int,
    n_covariates: int,
    config: FitConfig,
    rng: np.random.Generator,
) -> List[ThetaParams]:
    """
    Seeded initialization of every block of a variant

    Kernel hyperparameters start at log 0, coregionalization factors near identity,
    networks Glorot-uniform, noise at config.init_noise, task means at 0 (fit moves them to
    the per-task outcome averages when config.prior_mean is constant).
    """
    thetas = []
    for block in block_layout(variant, n_actions, n_outcomes):
        net = None
        feature_dim = n_covariates
        if variant.is_deep:
            net = MlpParams.initialize([n_covariates] + list(config.hidden), rng, config.activation)
            feature_dim = net.output_dim
        comps = []
        for _ in range(config.components):
            action = outcome = None
            if variant.shares_actions:
                rank = min(config.rank or block.n_actions, block.n_actions)
                action = CoregionFactor.identity_like(block.n_actions, rank, config.init_coregion_diag, rng)
            if variant.shares_outcomes:
                rank = min(config.rank or block.n_outcomes, block.n_outcomes)
                outcome = CoregionFactor.identity_like(block.n_outcomes, rank, config.init_coregion_diag, rng)
            comps.append(KernelComponent(config.kernel, BaseKernelParams.default(feature_dim), action, outcome))
        thetas.append(ThetaParams(
            components=tuple(comps),
            log_noise=np.full(block.n_actions * block.n_outcomes, math.log(config.init_noise)),
            mlp=net, n_actions=block.n_actions, n_outcomes=block.n_outcomes,
        ))
    return thetas


# ========== OBJECTIVE ==========

@dataclass(frozen=True, eq=False)
class BlockRows:
    """Block-design rows of one block (local task indices)"""

    x: np.ndarray
    a: np.ndarray
    m: np.ndarray
    y: np.ndarray

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def tasks(self) -> np.ndarray:
        return np.column_stack([self.a, self.m])


def block_rows(block: Block, data: Dataset) -> BlockRows:
    """Observed rows of a block: unit-major, one row per covered outcome"""
    units = np.flatnonzero(np.isin(data.A, block.actions))
    a_local = np.searchsorted(np.asarray(block.actions), data.A[units])
    n_m = block.n_outcomes
    return BlockRows(
        x=np.repeat(data.X[units], n_m, axis=0),
        a=np.repeat(a_local, n_m),
        m=np.tile(np.arange(n_m), units.shape[0]),
        y=data.Y[np.ix_(units, list(block.outcomes))].reshape(-1),
    )


def _features(theta: ThetaParams, x: np.ndarray):
    if theta.mlp is None:
        return x, None
    return mlp_ops.forward(theta.mlp, x)


def _block_objective(theta: ThetaParams, rows: BlockRows, with_grad: bool):
    """NLL of one block and, optionally, its gradient dict keyed like named_arrays"""
    if rows.n == 0:
        grads = {n: np.zeros_like(a) for n, a in theta.named_arrays().items()} if with_grad else None
        return 0.0, grads

    feats, trace = _features(theta, rows.x)
    spec = theta.spec()
    kbs = [kernel_matrix(c.kind, c.base, feats, feats) for c in spec.components]
    cms = [component_task_matrix(c, rows.a, rows.m, rows.a, rows.m) for c in spec.components]
    t_flat = rows.m * theta.n_actions + rows.a
    noise = theta.noise
    k = sum(cm * kb for cm, kb in zip(cms, kbs))
    k = 0.5 * (k + k.T)
    k[np.diag_indices_from(k)] += noise[t_flat]

    resid = rows.y - theta.mean[t_flat]
    factor = cholesky(k)
    alpha = solve_posdef(factor, resid)
    value = 0.5 * float(resid @ alpha) + 0.5 * logdet(factor) + 0.5 * rows.n * LOG_2PI
    if not with_grad:
        return value, None

    w = 0.5 * (inverse(factor) - np.outer(alpha, alpha))
    grads: Dict[str, np.ndarray] = {}
    d_feats = np.zeros_like(feats)
    for q, (comp, kb, cm) in enumerate(zip(spec.components, kbs, cms)):
        d_ls, d_sv, d_f = kernel_vjp(comp.kind, comp.base, feats, w * cm, k=kb)
        grads[f"k{q}.log_lengthscales"] = d_ls
        grads[f"k{q}.log_signal_variance"] = np.asarray(d_sv)
        d_feats += d_f
        for name, g in component_vjp(comp, rows.a, rows.m, w * kb).items():
            grads[f"k{q}.{name}"] = g
    if theta.mlp is not None:
        net_grads = mlp_ops.backward(theta.mlp, trace, d_feats)
        for i, (gw, gb) in enumerate(zip(net_grads.weights, net_grads.biases)):
            grads[f"mlp.W{i}"] = gw
            grads[f"mlp.b{i}"] = gb
    grads["log_noise"] = np.bincount(t_flat, weights=np.diag(w) * noise[t_flat], minlength=noise.shape[0])
    grads["mean"] = -np.bincount(t_flat, weights=alpha, minlength=noise.shape[0])
    return value, OrderedDict((n, grads[n]) for n in theta.named_arrays())


def _check_thetas(thetas: Sequence[ThetaParams], variant: ModelVariant, data: Dataset) -> List[Block]:
    blocks = block_layout(variant, data.n_actions, data.n_outcomes)
    if len(thetas) != len(blocks):
        raise ValueError(f"variant {variant.value} needs {len(blocks)} parameter blocks, got {len(thetas)}")
    for theta, block in zip(thetas, blocks):
        if (theta.mlp is not None) != variant.is_deep:
            raise ValueError(f"network presence does not match variant {variant.value}")
        if (theta.n_actions, theta.n_outcomes) != (block.n_actions, block.n_outcomes):
            raise ValueError("parameter block does not match the variant's task layout")
    return blocks


def nll(thetas: Sequence[ThetaParams], variant: ModelVariant, data: Dataset) -> float:
    """
    Negative log marginal likelihood summed over the variant's blocks

    Data are used as given (fit standardizes before calling this).
    """
    if data.n_units == 0:
        raise EmptyDataset("nll needs at least one unit")
    blocks = _check_thetas(thetas, variant, data)
    return float(sum(_block_objective(t, block_rows(b, data), False)[0] for t, b in zip(thetas, blocks)))


def nll_grad(thetas: Sequence[ThetaParams], variant: ModelVariant, data: Dataset) -> List["OrderedDict[str, np.ndarray]"]:
    """
    Analytic gradient of nll, one dict per block keyed like ThetaParams.named_arrays

    dL/dK = (H - H r r^T H) / 2 with residual r = y - m(task) is chained into the kernel,
    coregionalization, network and noise parameters; dL/dm is -H r summed per task.
    """
    return value_and_grad(thetas, variant, data)[1]


def value_and_grad(thetas: Sequence[ThetaParams], variant: ModelVariant, data: Dataset):
    if data.n_units == 0:
        raise EmptyDataset("nll needs at least one unit")
    blocks = _check_thetas(thetas, variant, data)
    total, grads = 0.0, []
    for theta, block in zip(thetas, blocks):
        value, g = _block_objective(theta, block_rows(block, data), True)
        total += value
        grads.append(g)
    return total, grads


# ========== OPTIMIZER ==========

class Adam:
    """Adam with bias correction over a flat parameter vector"""

    def __init__(self, learning_rate: float = 0.05, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: Optional[np.ndarray] = None
        self.v: Optional[np.ndarray] = None

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad**2
        m_hat = self.m / (1.0 - self.beta1**self.t)
        v_hat = self.v / (1.0 - self.beta2**self.t)
        return params - self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)


# ========== TRAINED MODEL ==========

@dataclass(frozen=True, eq=False)
class _BlockPosterior:
    feats: np.ndarray
    tasks: np.ndarray
    factor: Optional[CholFactor]
    alpha: np.ndarray


@dataclass(eq=False)
class TrainedModel:
    """
    Parameters conditioned on standardized training data

    Immutable after construction; predictions are read-only.
    """

    variant: ModelVariant
    thetas: List[ThetaParams]
    train_data: Dataset
    record: StandardizationRecord
    trajectory: List[float] = field(default_factory=list)
    config: FitConfig = field(default_factory=FitConfig)
    blocks: List[Block] = field(init=False)
    posteriors: List[_BlockPosterior] = field(init=False, repr=False)

    def __post_init__(self):
        self.blocks = _check_thetas(self.thetas, self.variant, self.train_data)
        self.posteriors = [self._condition(t, block_rows(b, self.train_data)) for t, b in zip(self.thetas, self.blocks)]

    @staticmethod
    def _condition(theta: ThetaParams, rows: BlockRows) -> _BlockPosterior:
        if rows.n == 0:
            return _BlockPosterior(feats=np.zeros((0, 0)), tasks=rows.tasks, factor=None, alpha=np.zeros(0))
        feats, _ = _features(theta, rows.x)
        factor = cholesky(assemble_train_cov(theta.spec(), feats, rows.tasks, theta.noise))
        resid = rows.y - theta.mean[rows.m * theta.n_actions + rows.a]
        return _BlockPosterior(feats=feats, tasks=rows.tasks, factor=factor, alpha=solve_posdef(factor, resid))

    @property
    def n_actions(self) -> int:
        return self.train_data.n_actions

    @property
    def n_outcomes(self) -> int:
        return self.train_data.n_outcomes

    @property
    def n_covariates(self) -> int:
        return self.train_data.n_covariates

    def _locate(self, task: TaskIndex) -> Tuple[int, TaskIndex]:
        for i, block in enumerate(self.blocks):
            local = block.local(task)
            if local is not None:
                return i, local
        raise TaskOutOfRange(f"task {task} outside the {self.n_actions} x {self.n_outcomes} grid")

    def predict_batch(self, x: np.ndarray, task: TaskIndex) -> Tuple[np.ndarray, np.ndarray]:
        """
        Posterior mean and latent variance for many queries of one task

        Args:
            x: n x P covariates in original units
            task: Global (action, outcome)

        Returns:
            (mean, variance) arrays in original outcome units
        """
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.n_covariates:
            raise DimensionMismatch(f"queries need {self.n_covariates} covariates, got {x.shape[1]}")
        i, local = self._locate(task)
        theta, post = self.thetas[i], self.posteriors[i]
        spec = theta.spec()
        feats, _ = _features(theta, self.record.transform_x(x))
        tq = np.tile([local.action, local.outcome], (x.shape[0], 1))
        prior = assemble_prior_diag(spec, feats, tq)
        mean = np.full(x.shape[0], theta.mean[local.flat(theta.n_actions)])
        if post.factor is None:
            var = prior
        else:
            kx = assemble_cross_cov(spec, post.feats, post.tasks, feats, tq)
            mean = mean + kx @ post.alpha
            v = solve_lower(post.factor, kx.T)
            var = np.maximum(prior - np.sum(v**2, axis=0), 0.0)
        m = task.outcome
        return mean * self.record.y_scale[m] + self.record.y_mean[m], var * self.record.y_scale[m] ** 2

    def predict(self, x_star: np.ndarray, task: TaskIndex) -> PosteriorPrediction:
        mean, var = self.predict_batch(np.asarray(x_star, dtype=np.float64).reshape(1, -1), task)
        return PosteriorPrediction.from_moments(mean[0], var[0])

    @property
    def final_nll(self) -> float:
        return min(self.trajectory) if self.trajectory else float("nan")


def build_model(
    variant: ModelVariant,
    data: Dataset,
    thetas: Sequence[ThetaParams],
    standardize_data: bool = True,
    config: Optional[FitConfig] = None,
) -> TrainedModel:
    """
    Condition given parameters on data without training

    Args:
        variant: Model variant
        data: Training data in original units
        thetas: One ThetaParams per block of the variant
        standardize_data: Standardize with the data's statistics (else identity record)
        config: Stored with the model for reference
    """
    if standardize_data:
        train, record = standardize(data)
    else:
        train, record = data, StandardizationRecord.identity(data.n_covariates, data.n_outcomes)
    return TrainedModel(variant=variant, thetas=list(thetas), train_data=train, record=record, config=config or FitConfig())


def predict(model: TrainedModel, x_star: np.ndarray, task: TaskIndex) -> PosteriorPrediction:
    """Exact posterior of the latent surface at one query (original units, noise excluded)"""
    return model.predict(x_star, task)


def predict_batch(model: TrainedModel, x: np.ndarray, task: TaskIndex) -> Tuple[np.ndarray, np.ndarray]:
    return model.predict_batch(x, task)


# ========== TRAINING ==========

def _stack(thetas: Sequence[ThetaParams]) -> Tuple[np.ndarray, List[int]]:
    vecs = [t.to_vector() for t in thetas]
    return np.concatenate(vecs), [v.size for v in vecs]


def _unstack(thetas: Sequence[ThetaParams], vec: np.ndarray, sizes: List[int]) -> List[ThetaParams]:
    out, offset = [], 0
    for t, s in zip(thetas, sizes):
        out.append(t.with_vector(vec[offset: offset + s]))
        offset += s
    return out


def _with_task_means(theta: ThetaParams, rows: BlockRows) -> ThetaParams:
    """Start each task mean at the average of its observed outcomes (0 when unobserved)"""
    n_tasks = theta.n_actions * theta.n_outcomes
    t_flat = rows.m * theta.n_actions + rows.a
    counts = np.bincount(t_flat, minlength=n_tasks)
    sums = np.bincount(t_flat, weights=rows.y, minlength=n_tasks)
    arrays = dict(theta.named_arrays())
    arrays["mean"] = np.where(counts > 0, sums / np.maximum(counts, 1), 0.0)
    return theta.with_arrays(arrays)


def fit(variant: ModelVariant, data: Dataset, config: Optional[FitConfig] = None) -> TrainedModel:
    """
    Train a variant by full-batch Adam on the negative log marginal likelihood

    Args:
        variant: Model variant (not ORACLE)
        data: Training data in original units
        config: Optimizer and architecture settings

    Returns:
        TrainedModel holding the lowest-NLL iterate and the NLL trajectory

    Raises:
        Divergence: NLL became non-finite, or an iterate left the valid parameter range
        NotPositiveDefinite: Kernel matrix could not be factorized
    """
    config = config or FitConfig()
    if variant == ModelVariant.ORACLE:
        raise ValueError("the oracle variant is not trainable")
    train, record = standardize(data)
    thetas = init_params(variant, train.n_actions, train.n_outcomes, train.n_covariates, config, make_rng(config.seed, "init"))
    freeze = list(config.freeze)
    if config.prior_mean == PriorMean.CONSTANT:
        blocks = block_layout(variant, train.n_actions, train.n_outcomes)
        thetas = [_with_task_means(t, block_rows(b, train)) for t, b in zip(thetas, blocks)]
    else:
        freeze.append(ParamGroup.MEAN)
    vec, sizes = _stack(thetas)
    frozen = np.concatenate([t.group_mask(freeze) for t in thetas])
    decay = np.concatenate([t.decay_mask() for t in thetas])
    optimizer = Adam(config.learning_rate, config.adam_beta1, config.adam_beta2, config.adam_eps)

    logger.info(f"Fitting {variant.value}: {train.n_units} units, {len(thetas)} block(s), {vec.size} parameters")
    started = time.perf_counter()
    trajectory: List[float] = []
    best_vec, best_value = vec, math.inf
    for it in range(config.iterations + 1):
        if not np.all(np.isfinite(vec)):
            raise Divergence(it, float("nan"))
        try:
            current = _unstack(thetas, vec, sizes)
            value, grads = value_and_grad(current, variant, train)
        except CounterDKLError:
            raise
        except ValueError as e:
            raise Divergence(it, float("nan")) from e
        if not math.isfinite(value):
            raise Divergence(it, value)
        trajectory.append(value)
        if value < best_value:
            best_vec, best_value = vec, value
        if it % 50 == 0:
            logger.debug(f"{variant.value} iteration {it}: nll={value:.6f}")
        if it == config.iterations:
            break
        grad = np.concatenate([np.concatenate([g.ravel() for g in block.values()]) for block in grads])
        if config.weight_decay > 0:
            grad = grad + config.weight_decay * np.where(decay, vec, 0.0)
        grad[frozen] = 0.0
        if not np.all(np.isfinite(grad)):
            raise Divergence(it, value)
        vec = optimizer.step(vec, grad)

    logger.info(f"✅ {variant.value} fitted in {time.perf_counter() - started:.2f}s: nll {trajectory[0]:.4f} -> {best_value:.4f}")
    return TrainedModel(
        variant=variant, thetas=_unstack(thetas, best_vec, sizes), train_data=train,
        record=record, trajectory=trajectory, config=config,
    )


# ========== SERIALIZATION ==========

class ModelDump(BaseModel):
    """Self-describing model file: variant, parameters, standardization and training data"""

    format: str = Field(default=MODEL_FORMAT)
    version: int = Field(default=MODEL_FORMAT_VERSION)
    variant: ModelVariant
    n_actions: int
    dgp: str = "unknown"
    config: FitConfig
    record: Dict[str, list]
    thetas: List[dict]
    train_X: List[List[float]]
    train_A: List[int]
    train_Y: List[List[float]]
    trajectory: List[float] = Field(default_factory=list)


def save_model(model: TrainedModel, path: Union[str, Path]) -> Path:
    """Write the model as JSON (floats round-trip exactly)"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    dump = ModelDump(
        variant=model.variant, n_actions=model.n_actions, dgp=model.train_data.dgp, config=model.config,
        record=model.record.to_dict(), thetas=[t.to_dict() for t in model.thetas],
        train_X=model.train_data.X.tolist(), train_A=model.train_data.A.tolist(), train_Y=model.train_data.Y.tolist(),
        trajectory=list(model.trajectory),
    )
    path.write_text(dump.model_dump_json(), encoding="utf-8")
    logger.info(f"Saved {model.variant.value} model to {path}")
    return path


def load_model(path: Union[str, Path]) -> TrainedModel:
    """Read a model written by save_model"""
    try:
        dump = ModelDump.model_validate_json(Path(path).read_text(encoding="utf-8"))
    except ValidationError as e:
        raise ModelFormatError(f"unreadable model file {path}: {e}") from e
    if dump.format != MODEL_FORMAT or dump.version != MODEL_FORMAT_VERSION:
        raise ModelFormatError(f"unsupported model format {dump.format} v{dump.version}")
    train = Dataset(X=np.asarray(dump.train_X), A=np.asarray(dump.train_A), Y=np.asarray(dump.train_Y), n_actions=dump.n_actions, dgp=dump.dgp)
    return TrainedModel(
        variant=dump.variant, thetas=[ThetaParams.from_dict(t) for t in dump.thetas], train_data=train,
        record=StandardizationRecord.from_dict(dump.record), trajectory=dump.trajectory, config=dump.config,
    )
