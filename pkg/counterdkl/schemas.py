"""
Pydantic schemas for counterdkl
Configuration objects, predictions and result rows shared by the model, the harness and the CLI
"""

import math
from enum import Enum
from typing import Dict, List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from counterdkl.config import settings


# ========== ENUMS ==========

class ModelVariant(str, Enum):
    """Model variants; ORACLE plugs the ground truth in and is evaluation-only"""

    GP = "gp"
    COUNTER_GP = "countergp"
    MOGP = "mogp"
    DKL = "dkl"
    COUNTER_DKL = "counterdkl"
    MODKL = "modkl"
    ORACLE = "oracle"

    @property
    def is_deep(self) -> bool:
        return self in (ModelVariant.DKL, ModelVariant.COUNTER_DKL, ModelVariant.MODKL)

    @property
    def shares_actions(self) -> bool:
        """Coregionalizes over actions"""
        return self in (ModelVariant.COUNTER_GP, ModelVariant.COUNTER_DKL, ModelVariant.MOGP, ModelVariant.MODKL)

    @property
    def shares_outcomes(self) -> bool:
        """Coregionalizes over outcomes"""
        return self in (ModelVariant.MOGP, ModelVariant.MODKL)


class KernelKind(str, Enum):
    RBF = "rbf"
    LINEAR = "linear"


class Activation(str, Enum):
    TANH = "tanh"
    RELU = "relu"


class Task(str, Enum):
    """Evaluation tasks of an experiment"""

    ICE = "ICE"
    OPE = "OPE"
    OPL = "OPL"
    COVERAGE = "COVERAGE"
    POLICY_RISK = "POLICY_RISK"
    OPE_REGRET = "OPE_REGRET"
    ATT = "ATT"


class DgpName(str, Enum):
    B1 = "b1"
    B2 = "b2"
    CONFOUNDED = "confounded"
    OPE_SYNTH = "ope-synth"


class SweepAxis(str, Enum):
    N = "n"
    P = "p"
    GAMMA = "gamma"


class ParamGroup(str, Enum):
    """Parameter groups that can be frozen during training"""

    MLP = "mlp"
    KERNEL = "kernel"
    COREGION = "coregion"
    NOISE = "noise"
    MEAN = "mean"


class PriorMean(str, Enum):
    """Prior mean of each task in standardized units"""

    ZERO = "zero"
    CONSTANT = "constant"


# ========== MODEL CONFIGURATION ==========

class FitConfig(BaseModel):
    """Adam settings plus the model architecture choices"""

    model_config = ConfigDict(extra="forbid")

    learning_rate: float = Field(default=0.05, gt=0, description="Adam step size")
    iterations: int = Field(default=500, ge=0, description="Number of Adam steps")
    adam_beta1: float = Field(default=0.9, gt=0, lt=1)
    adam_beta2: float = Field(default=0.999, gt=0, lt=1)
    adam_eps: float = Field(default=1e-8, gt=0)
    seed: int = Field(default=0, ge=0, lt=2**64, description="Initialization seed")
    weight_decay: float = Field(default=0.0, ge=0, description="L2 penalty on network weights")

    kernel: KernelKind = Field(default=KernelKind.RBF, description="Base kernel")
    components: int = Field(default=1, ge=1, description="Number Q of separable terms (1 = ICM)")
    rank: Optional[int] = Field(default=None, ge=1, description="Rank of each coregionalization factor; None = full")
    hidden: List[int] = Field(default_factory=lambda: [50, 50, 2], description="Hidden layer sizes, last = feature dim")
    activation: Activation = Field(default=Activation.TANH)
    init_noise: float = Field(default=0.1, gt=0, description="Initial noise variance (standardized units)")
    init_coregion_diag: float = Field(default=0.01, gt=0, description="Initial diagonal term of each B")
    prior_mean: PriorMean = Field(
        default=PriorMean.CONSTANT, description="zero: m(.) = 0; constant: one learned constant per task"
    )
    freeze: List[ParamGroup] = Field(default_factory=list, description="Parameter groups kept fixed")

    @field_validator("hidden")
    @classmethod
    def _positive_layers(cls, value: List[int]) -> List[int]:
        if not value or any(h < 1 for h in value):
            raise ValueError("hidden layer sizes must be a nonempty list of positive integers")
        return value


class SplitSpec(BaseModel):
    """Seeded train/test split"""

    model_config = ConfigDict(extra="forbid")

    train_fraction: float = Field(default=0.8, gt=0, lt=1)
    seed: int = Field(default=0, ge=0)


class DgpConfig(BaseModel):
    """Simulator selection and arguments"""

    model_config = ConfigDict(extra="forbid")

    name: DgpName = Field(default=DgpName.B2)
    n: int = Field(default=500, ge=2, description="Number of units")
    p: int = Field(default=10, ge=1, description="Number of covariates (b2 / confounded / ope-synth)")
    gamma: float = Field(default=0.0, ge=0, description="Confounding strength (confounded)")
    n_actions: int = Field(default=2, ge=2, description="Number of classes/actions (ope-synth)")

    @property
    def num_actions(self) -> int:
        if self.name == DgpName.B1:
            return 2
        if self.name == DgpName.OPE_SYNTH:
            return self.n_actions
        return 4

    @property
    def num_outcomes(self) -> int:
        return 2 if self.name in (DgpName.B2, DgpName.CONFOUNDED) else 1

    @model_validator(mode="after")
    def _check_dims(self) -> "DgpConfig":
        if self.name in (DgpName.B2, DgpName.CONFOUNDED) and self.p < 7:
            raise ValueError(f"dgp {self.name.value} needs p >= 7, got {self.p}")
        if self.n < self.num_actions:
            raise ValueError(f"n={self.n} is smaller than the number of actions {self.num_actions}")
        return self


class SweepSpec(BaseModel):
    """Grid over one simulator argument"""

    model_config = ConfigDict(extra="forbid")

    axis: SweepAxis
    values: List[float] = Field(min_length=1, description="Grid values, run in the given order")


class ExperimentConfig(BaseModel):
    """One benchmark experiment: simulator, variants, replications and tasks"""

    model_config = ConfigDict(extra="forbid")

    dgp: DgpConfig = Field(default_factory=DgpConfig)
    variants: List[ModelVariant] = Field(default_factory=lambda: [ModelVariant.GP, ModelVariant.COUNTER_DKL])
    replications: int = Field(default=1, ge=1, description="Monte Carlo replications B")
    fit: FitConfig = Field(default_factory=FitConfig)
    split: SplitSpec = Field(default_factory=SplitSpec)
    tasks: List[Task] = Field(default_factory=lambda: [Task.ICE])
    base_seed: int = Field(default=0, ge=0, lt=2**64)
    outcome_weights: Optional[List[float]] = Field(default=None, description="OPL scalarization weights; None = equal")
    sweep: Optional[SweepSpec] = Field(default=None, description="Optional sweep run by the benchmark command")

    @model_validator(mode="after")
    def _check_compatible(self) -> "ExperimentConfig":
        if not self.tasks:
            raise ValueError("tasks must be nonempty")
        if not self.variants:
            raise ValueError("variants must be nonempty")
        binary_only = {Task.POLICY_RISK, Task.ATT} & set(self.tasks)
        if binary_only and self.dgp.num_actions != 2:
            names = ", ".join(sorted(t.value for t in binary_only))
            raise ValueError(f"{names} need a binary-action dgp, {self.dgp.name.value} has {self.dgp.num_actions} actions")
        if self.outcome_weights is not None:
            w = self.outcome_weights
            if len(w) != self.dgp.num_outcomes or any(v < 0 for v in w) or not math.isclose(sum(w), 1.0, abs_tol=1e-9):
                raise ValueError("outcome_weights must be nonnegative, one per outcome, summing to 1")
        return self

    def weights(self) -> List[float]:
        m = self.dgp.num_outcomes
        return list(self.outcome_weights) if self.outcome_weights is not None else [1.0 / m] * m


# ========== PREDICTIONS AND RESULTS ==========

class PosteriorPrediction(BaseModel):
    """Posterior mean/variance of the latent surface with its 95% credible band"""

    mean: float
    variance: float = Field(ge=0)
    lower95: float
    upper95: float

    @classmethod
    def from_moments(cls, mean: float, variance: float) -> "PosteriorPrediction":
        variance = max(float(variance), 0.0)
        half = settings.credible_z * math.sqrt(variance)
        return cls(mean=float(mean), variance=variance, lower95=float(mean) - half, upper95=float(mean) + half)


class ResultRow(BaseModel):
    """One metric value of one fitted variant in one replication"""

    dgp: str = Field(description="Simulator tag")
    variant: str = Field(description="Model variant tag")
    task: str = Field(description="Task name")
    outcome: str = Field(description="Outcome index or 'all' for the equal-weight average")
    replication: int
    seed: int = Field(description="Replication seed")
    value: Optional[float] = Field(None, description="Metric value; None when the fit failed")
    failed: bool = Field(default=False, description="Fit failed (Divergence / NotPositiveDefinite)")
    error: str = Field(default="", description="Failure message")
    seconds: float = Field(default=0.0, description="Wall-clock seconds of the fit")
    axis: str = Field(default="", description="Sweep axis, empty outside sweeps")
    axis_value: Optional[float] = Field(None, description="Sweep grid value")


class MetricReport(BaseModel):
    """Per-outcome values of each metric and their equal-weight aggregate"""

    per_outcome: Dict[str, List[float]] = Field(default_factory=dict)

    def add(self, metric: str, values: List[float]) -> None:
        self.per_outcome[metric] = [float(v) for v in values]

    @property
    def aggregate(self) -> Dict[str, float]:
        return {k: float(sum(v) / len(v)) for k, v in self.per_outcome.items() if v}

    def rows(self, metric: str) -> List[Tuple[str, float]]:
        """(outcome, value) pairs of one metric, followed by ('all', aggregate)"""
        values = self.per_outcome[metric]
        return [(str(m), v) for m, v in enumerate(values)] + [("all", self.aggregate[metric])]
