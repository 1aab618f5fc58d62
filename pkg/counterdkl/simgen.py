"""
Simulated data-generating processes with ground-truth oracles

Every generator draws covariates, actions and noise from separate seeded substreams, so
the oracle can regenerate the outcomes of a dataset exactly from (X, A, seed).
"""

from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from loguru import logger
from pydantic import BaseModel, Field
from scipy.special import softmax
from scipy.stats import norm

from counterdkl.dataset import Dataset
from counterdkl.errors import DegenerateSplit, InvalidDims, LabelGap
from counterdkl.schemas import DgpConfig, DgpName, SplitSpec
from counterdkl.seeding import make_rng

# ========== CONSTANTS ==========

B1_NOISE_SD = 0.75
B2_NOISE_SD = 0.5
OPE_NOISE_VAR = 0.5
B2_MIN_P = 7

# Behavior-policy coefficients of gen_b2, one row per action; zero-padded to p.
# The first and last actions share coefficients.
B2_BETAS = (
    (-1.0, -0.8, -0.1, -0.1),
    (0.0, 0.0, 1.0, 0.8, 0.2),
    (1.5, -0.8, -0.1, -0.1),
    (-1.0, -0.8, -0.1, -0.1),
)

OPE_BETA_VALUES = (0.4, 0.2, 0.0)
OPE_BETA_PROBS = (0.6, 0.25, 0.15)


# ========== SURFACES ==========

def _b1_surface(x: np.ndarray, a: int) -> np.ndarray:
    f0 = 2.0 + 0.3 * np.exp(x[:, 0])
    return f0 + 3.0 * a


def _b2_surface(x: np.ndarray, a: int, m: int) -> np.ndarray:
    x0, x1, x2, x3, x4, x5, x6 = (x[:, j] for j in range(7))
    if m == 0:
        base = 3.0 + 0.4 * x0 * x1 - 0.3 * x2**2 + 0.2 * np.exp(x3) + 0.6 * np.sin(x4)
        shifts = (0.0, -1.0 + 0.1 * x5, 1.0 + 0.3 * x5, 0.5 + 0.5 * x6)
    else:
        base = 1.0 + 0.2 * x0 * x1 - 0.2 * x2**2 + 0.1 * np.exp(x3)
        shifts = (0.0, -2.0 + 0.2 * x5, 2.0 + 0.4 * x5, 1.0 + 0.5 * x6)
    return base + shifts[a]


def b2_betas(p: int) -> np.ndarray:
    """4 x p coefficient matrix of the gen_b2 behavior policy"""
    betas = np.zeros((len(B2_BETAS), p))
    for a, row in enumerate(B2_BETAS):
        betas[a, : len(row)] = row
    return betas


# ========== ORACLE ==========

class OracleSpec(BaseModel):
    """Structured sidecar of a generated dataset: tag, seed and parameters (surfaces are closed-form)"""

    dgp: DgpName
    seed: int = Field(ge=0)
    p: int = Field(ge=1)
    n_actions: int = Field(ge=2)
    n_outcomes: int = Field(ge=1)
    gamma: float = Field(default=0.0, ge=0)
    betas: Optional[List[List[float]]] = Field(default=None, description="Per-action coefficients (ope-synth)")
    label_freqs: Optional[List[float]] = Field(default=None, description="Empirical action shares (ope-synth)")


class GroundTruthOracle:
    """Noiseless counterfactual surfaces, behavior policy and noise of one simulator"""

    def __init__(self, spec: OracleSpec):
        self.spec = spec
        self._betas = np.asarray(spec.betas, dtype=np.float64) if spec.betas is not None else None

    @property
    def dgp(self) -> DgpName:
        return self.spec.dgp

    @property
    def seed(self) -> int:
        return self.spec.seed

    @property
    def n_actions(self) -> int:
        return self.spec.n_actions

    @property
    def n_outcomes(self) -> int:
        return self.spec.n_outcomes

    def _check(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.spec.p:
            raise InvalidDims(f"oracle expects {self.spec.p} covariates, got {x.shape[1]}")
        return x

    def true_surface(self, x: np.ndarray, a: int, m: int = 0) -> np.ndarray:
        """f_{m,a}(x) for every row of x"""
        x = self._check(x)
        if not (0 <= a < self.n_actions and 0 <= m < self.n_outcomes):
            raise InvalidDims(f"task ({a}, {m}) outside the {self.n_actions} x {self.n_outcomes} grid")
        if self.dgp == DgpName.B1:
            return _b1_surface(x, a)
        if self.dgp == DgpName.OPE_SYNTH:
            return np.exp(x @ self._betas[a])
        return _b2_surface(x, a, m)

    __call__ = true_surface

    def surfaces(self, x: np.ndarray, m: int = 0) -> np.ndarray:
        """n x D matrix of all action surfaces for outcome m"""
        return np.column_stack([self.true_surface(x, a, m) for a in range(self.n_actions)])

    def behavior_probs(self, x: np.ndarray) -> np.ndarray:
        """n x D behavior-policy probabilities"""
        x = self._check(x)
        if self.dgp == DgpName.B1:
            p1 = norm.cdf(0.2 + x[:, 0])
            return np.column_stack([1.0 - p1, p1])
        if self.dgp == DgpName.OPE_SYNTH:
            return np.tile(np.asarray(self.spec.label_freqs, dtype=np.float64), (x.shape[0], 1))
        logits = x @ b2_betas(self.spec.p).T
        if self.dgp == DgpName.CONFOUNDED:
            logits[:, -2:] += self.spec.gamma
        return softmax(logits, axis=1)

    def noise_sd(self) -> np.ndarray:
        """D x M noise standard deviations (independent across tasks)"""
        if self.dgp == DgpName.B1:
            sd = B1_NOISE_SD
        elif self.dgp == DgpName.OPE_SYNTH:
            sd = float(np.sqrt(OPE_NOISE_VAR))
        else:
            sd = B2_NOISE_SD
        return np.full((self.n_actions, self.n_outcomes), sd)

    def noise_var(self) -> np.ndarray:
        """Per-task noise variances indexed by flat task (outcome * D + action)"""
        return (self.noise_sd() ** 2).T.reshape(-1)

    def best_actions(self, x: np.ndarray, weights: Optional[Sequence[float]] = None) -> np.ndarray:
        """Per-unit argmax of the weighted surfaces; ties go to the lowest action"""
        w = np.full(self.n_outcomes, 1.0 / self.n_outcomes) if weights is None else np.asarray(weights, dtype=np.float64)
        total = sum(w[m] * self.surfaces(x, m) for m in range(self.n_outcomes))
        return np.argmax(total, axis=1)

    def policy_value(self, x: np.ndarray, probs: np.ndarray, m: int = 0) -> float:
        """Mean over units of sum_a probs[i, a] f_a(x_i)"""
        return float(np.mean(np.sum(np.asarray(probs) * self.surfaces(x, m), axis=1)))

    def uniform_value(self, x: np.ndarray, m: int = 0) -> float:
        """Value of the uniformly random policy on the sample x"""
        return float(np.mean(self.surfaces(x, m)))

    def regenerate_outcomes(self, x: np.ndarray, actions: np.ndarray) -> np.ndarray:
        """Outcomes reproduced from the surfaces and the recorded noise substream"""
        x = self._check(x)
        actions = np.asarray(actions, dtype=np.int64)
        eps = make_rng(self.seed, "noise").standard_normal((x.shape[0], self.n_outcomes))
        sd = self.noise_sd()
        y = np.empty((x.shape[0], self.n_outcomes))
        for m in range(self.n_outcomes):
            f = self.surfaces(x, m)
            y[:, m] = f[np.arange(x.shape[0]), actions] + eps[:, m] * sd[actions, m]
        return y

    # ========== SIDECAR ==========

    def to_json(self) -> str:
        return self.spec.model_dump_json(indent=2)

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json(), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "GroundTruthOracle":
        return cls(OracleSpec.model_validate_json(Path(path).read_text(encoding="utf-8")))


def sidecar_path(data_path: Union[str, Path]) -> Path:
    """Oracle sidecar stored next to a dataset CSV"""
    data_path = Path(data_path)
    return data_path.with_name(data_path.stem + ".oracle.json")


# ========== GENERATORS ==========

def _draw(oracle: GroundTruthOracle, x: np.ndarray, dgp: str) -> Tuple[Dataset, GroundTruthOracle]:
    probs = oracle.behavior_probs(x)
    rng = make_rng(oracle.seed, "actions")
    u = rng.random(x.shape[0])
    actions = np.minimum((u[:, None] > np.cumsum(probs, axis=1)).sum(axis=1), oracle.n_actions - 1)
    y = oracle.regenerate_outcomes(x, actions)
    return Dataset(X=x, A=actions, Y=y, n_actions=oracle.n_actions, seed=oracle.seed, dgp=dgp), oracle


def gen_b1(n: int, seed: int) -> Tuple[Dataset, GroundTruthOracle]:
    """
    One covariate, two actions, constant effect 3

    X ~ U(-3, 3), p(A = 1 | x) = Phi(0.2 + x), f_0 = 2 + 0.3 exp(x), f_1 = 3 + f_0,
    noise N(0, 0.75^2).
    """
    if n < 2:
        raise InvalidDims(f"gen_b1 needs n >= 2, got {n}")
    x = make_rng(seed, "covariates").uniform(-3.0, 3.0, size=(n, 1))
    oracle = GroundTruthOracle(OracleSpec(dgp=DgpName.B1, seed=seed, p=1, n_actions=2, n_outcomes=1))
    return _draw(oracle, x, DgpName.B1.value)


def _gen_softmax(name: DgpName, n: int, p: int, gamma: float, seed: int) -> Tuple[Dataset, GroundTruthOracle]:
    if p < B2_MIN_P:
        raise InvalidDims(f"{name.value} needs p >= {B2_MIN_P}, got {p}")
    if n < len(B2_BETAS):
        raise InvalidDims(f"{name.value} needs n >= {len(B2_BETAS)}, got {n}")
    if gamma < 0:
        raise InvalidDims(f"gamma must be nonnegative, got {gamma}")
    x = make_rng(seed, "covariates").uniform(-3.0, 3.0, size=(n, p))
    oracle = GroundTruthOracle(OracleSpec(dgp=name, seed=seed, p=p, n_actions=4, n_outcomes=2, gamma=gamma))
    return _draw(oracle, x, name.value)


def gen_b2(n: int, p: int, seed: int) -> Tuple[Dataset, GroundTruthOracle]:
    """
    Four actions, two outcomes, softmax behavior policy

    Only X_0..X_6 enter the surfaces; the policy coefficients are zero beyond X_4.
    """
    return _gen_softmax(DgpName.B2, n, p, 0.0, seed)


def gen_confounded(n: int, p: int, gamma: float, seed: int) -> Tuple[Dataset, GroundTruthOracle]:
    """gen_b2 with +gamma on the logits of the two highest-index actions (gamma = 0 is gen_b2)"""
    return _gen_softmax(DgpName.CONFOUNDED if gamma > 0 else DgpName.B2, n, p, gamma, seed)


def gen_ope_synth(x_source: np.ndarray, labels: np.ndarray, seed: int) -> Tuple[Dataset, GroundTruthOracle]:
    """
    Turn a classification table into a bandit dataset

    Labels become the logged actions; Y = exp(x beta_a) + N(0, 0.5) with beta entries drawn
    from {0.4, 0.2, 0.0} with probabilities (0.6, 0.25, 0.15).

    Raises:
        LabelGap: labels are not exactly 0..D-1
    """
    x = np.asarray(x_source, dtype=np.float64)
    labels = np.asarray(labels)
    if x.ndim != 2 or labels.shape != (x.shape[0],):
        raise InvalidDims(f"x_source {x.shape} and labels {labels.shape} disagree")
    if not np.all(labels == np.round(labels)):
        raise LabelGap("labels must be integers")
    labels = labels.astype(np.int64)
    present = np.unique(labels)
    if present[0] != 0 or not np.array_equal(present, np.arange(present.shape[0])) or present.shape[0] < 2:
        raise LabelGap(f"labels must cover 0..D-1 contiguously with D >= 2, got {present.tolist()}")
    d = present.shape[0]
    betas = make_rng(seed, "betas").choice(OPE_BETA_VALUES, size=(d, x.shape[1]), p=OPE_BETA_PROBS)
    freqs = np.bincount(labels, minlength=d) / labels.shape[0]
    oracle = GroundTruthOracle(OracleSpec(
        dgp=DgpName.OPE_SYNTH, seed=seed, p=x.shape[1], n_actions=d, n_outcomes=1,
        betas=betas.tolist(), label_freqs=freqs.tolist(),
    ))
    y = oracle.regenerate_outcomes(x, labels)
    logger.debug(f"ope-synth: {x.shape[0]} units, {x.shape[1]} covariates, {d} actions")
    return Dataset(X=x, A=labels, Y=y, n_actions=d, seed=seed, dgp=DgpName.OPE_SYNTH.value), oracle


def gen_classification_source(n: int, p: int, n_classes: int, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Synthetic stand-in for a classification table

    Standard-normal covariates, labels from a random linear softmax classifier; every class
    is guaranteed to appear.
    """
    if n < n_classes or n_classes < 2 or p < 1:
        raise InvalidDims(f"need n >= n_classes >= 2 and p >= 1, got n={n}, p={p}, n_classes={n_classes}")
    rng = make_rng(seed, "labels")
    x = make_rng(seed, "covariates").standard_normal((n, p))
    scores = x @ rng.standard_normal((p, n_classes)) + rng.gumbel(size=(n, n_classes))
    labels = np.argmax(scores, axis=1)
    labels[rng.permutation(n)[:n_classes]] = np.arange(n_classes)
    return x, labels


def read_classification_source(path: Union[str, Path], label_column: str = "label") -> Tuple[np.ndarray, np.ndarray]:
    """Covariates and labels of a CSV table; the label column defaults to 'label', else the last column"""
    frame = pd.read_csv(path, encoding="utf-8", float_precision="round_trip")
    column = label_column if label_column in frame.columns else frame.columns[-1]
    x = frame.drop(columns=[column]).to_numpy(dtype=np.float64)
    return x, frame[column].to_numpy()


# ========== SPLIT ==========

def split(data: Dataset, spec: SplitSpec) -> Tuple[Dataset, Dataset]:
    """
    Seeded shuffle then partition into train / test

    Train size is round(train_fraction * N); both partitions keep the original row order.

    Raises:
        DegenerateSplit: a partition would be empty
    """
    n = data.n_units
    n_train = int(np.floor(spec.train_fraction * n + 0.5))
    if n_train < 1 or n_train >= n:
        raise DegenerateSplit(f"train fraction {spec.train_fraction} on {n} rows leaves an empty partition")
    perm = make_rng(spec.seed, "split").permutation(n)
    return data.subset(np.sort(perm[:n_train])), data.subset(np.sort(perm[n_train:]))


def generate(config: DgpConfig, seed: int) -> Tuple[Dataset, GroundTruthOracle]:
    """Run the simulator named by config (ope-synth draws its own classification source)"""
    if config.name == DgpName.B1:
        return gen_b1(config.n, seed)
    if config.name == DgpName.B2:
        return gen_b2(config.n, config.p, seed)
    if config.name == DgpName.CONFOUNDED:
        return gen_confounded(config.n, config.p, config.gamma, seed)
    x, labels = gen_classification_source(config.n, config.p, config.n_actions, seed)
    return gen_ope_synth(x, labels, seed)
