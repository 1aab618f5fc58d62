"""
Error types raised by counterdkl
Every error derives from CounterDKLError and from the closest builtin exception
"""

from typing import Optional

import numpy as np


class CounterDKLError(Exception):
    """Base class of every library error"""


class DimensionMismatch(CounterDKLError, ValueError):
    """Array shapes disagree"""


class LengthMismatch(CounterDKLError, ValueError):
    """Paired vectors have different lengths"""


class NotPositiveDefinite(CounterDKLError, np.linalg.LinAlgError):
    """Cholesky failed even at the jitter cap"""


class TaskOutOfRange(CounterDKLError, IndexError):
    """Action or outcome index outside the model's task grid"""


class TraceMismatch(CounterDKLError, ValueError):
    """Forward trace was produced by different network parameters"""


class EmptyDataset(CounterDKLError, ValueError):
    """Dataset has too few rows for the requested operation"""


class Divergence(CounterDKLError, RuntimeError):
    """Objective became non-finite during training"""

    def __init__(self, iteration: int, value: Optional[float] = None):
        self.iteration = iteration
        self.value = value
        super().__init__(f"negative log marginal likelihood is {value} at iteration {iteration}")


class NoTreatedUnits(CounterDKLError, ValueError):
    """No unit was observed under the treated action"""


class NotBinaryActions(CounterDKLError, ValueError):
    """Operation needs exactly two actions"""


class InvalidDims(CounterDKLError, ValueError):
    """Generator arguments out of the supported range"""


class LabelGap(CounterDKLError, ValueError):
    """Class labels are not the contiguous range 0..D-1"""


class DegenerateSplit(CounterDKLError, ValueError):
    """Train/test split would leave a partition empty"""


class ConfigInvalid(CounterDKLError, ValueError):
    """Experiment configuration failed validation"""


class InvalidPolicy(CounterDKLError, ValueError):
    """Policy probabilities are malformed"""


class ModelFormatError(CounterDKLError, ValueError):
    """Serialized model file is unreadable or has an unsupported version"""
