"""
Observational dataset (X_i, A_i, Y_i) and its CSV format

CSV header: x0,...,x{P-1},a,y0,...,y{M-1}; floats written with 17 significant digits.
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np
import pandas as pd
from loguru import logger

from counterdkl.config import settings
from counterdkl.errors import DimensionMismatch


@dataclass(frozen=True, eq=False)
class Dataset:
    """Covariates X (N x P), observed actions A (N), outcomes Y (N x M)"""

    X: np.ndarray
    A: np.ndarray
    Y: np.ndarray
    n_actions: int
    seed: Optional[int] = None
    dgp: str = "unknown"
    extra: Dict[str, Any] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        A = np.asarray(self.A).astype(np.int64)
        Y = np.asarray(self.Y, dtype=np.float64)
        if X.ndim == 1:
            X = X[:, None]
        if Y.ndim == 1:
            Y = Y[:, None]
        if not (X.shape[0] == A.shape[0] == Y.shape[0]) or A.ndim != 1:
            raise DimensionMismatch(f"row counts disagree: X {X.shape}, A {A.shape}, Y {Y.shape}")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
            raise ValueError("dataset contains non-finite values")
        if A.size and (A.min() < 0 or A.max() >= self.n_actions):
            raise ValueError(f"actions must lie in 0..{self.n_actions - 1}")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "Y", Y)

    @property
    def n_units(self) -> int:
        return self.X.shape[0]

    @property
    def n_covariates(self) -> int:
        return self.X.shape[1]

    @property
    def n_outcomes(self) -> int:
        return self.Y.shape[1]

    def subset(self, index: np.ndarray) -> "Dataset":
        """Rows selected by an index array, metadata kept"""
        index = np.asarray(index)
        return Dataset(
            X=self.X[index], A=self.A[index], Y=self.Y[index],
            n_actions=self.n_actions, seed=self.seed, dgp=self.dgp, extra=self.extra,
        )

    def with_arrays(self, X: Optional[np.ndarray] = None, Y: Optional[np.ndarray] = None) -> "Dataset":
        return Dataset(
            X=self.X if X is None else X, A=self.A, Y=self.Y if Y is None else Y,
            n_actions=self.n_actions, seed=self.seed, dgp=self.dgp, extra=self.extra,
        )

    def to_frame(self) -> pd.DataFrame:
        columns: Dict[str, Any] = {f"x{j}": self.X[:, j] for j in range(self.n_covariates)}
        columns["a"] = self.A
        columns.update({f"y{m}": self.Y[:, m] for m in range(self.n_outcomes)})
        return pd.DataFrame(columns)

    @classmethod
    def from_frame(
        cls,
        frame: pd.DataFrame,
        n_actions: Optional[int] = None,
        seed: Optional[int] = None,
        dgp: str = "unknown",
    ) -> "Dataset":
        """
        Build a dataset from a frame with x*/a/y* columns

        Args:
            frame: Table in the CSV layout
            n_actions: Number of actions; defaults to max(a) + 1
            seed: Generator seed, if known
            dgp: Simulator tag
        """
        x_cols = sorted((c for c in frame.columns if c.startswith("x")), key=lambda c: int(c[1:]))
        y_cols = sorted((c for c in frame.columns if c.startswith("y")), key=lambda c: int(c[1:]))
        if "a" not in frame.columns or not x_cols or not y_cols:
            raise DimensionMismatch("frame needs x0.., a and y0.. columns")
        a = frame["a"].to_numpy().astype(np.int64)
        d = int(n_actions) if n_actions is not None else int(a.max()) + 1
        return cls(
            X=frame[x_cols].to_numpy(dtype=np.float64),
            A=a,
            Y=frame[y_cols].to_numpy(dtype=np.float64),
            n_actions=d, seed=seed, dgp=dgp,
        )


def write_csv(data: Dataset, path: Union[str, Path]) -> Path:
    """Write the dataset CSV (UTF-8, round-trip exact floats)"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data.to_frame().to_csv(path, index=False, float_format=settings.csv_float_format, encoding="utf-8")
    logger.debug(f"Wrote {data.n_units} rows to {path}")
    return path


def read_csv(path: Union[str, Path], n_actions: Optional[int] = None, seed: Optional[int] = None, dgp: str = "unknown") -> Dataset:
    """Read a dataset CSV written by write_csv"""
    frame = pd.read_csv(path, encoding="utf-8", float_precision="round_trip")
    return Dataset.from_frame(frame, n_actions=n_actions, seed=seed, dgp=dgp)
