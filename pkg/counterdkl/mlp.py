"""
Fully connected feature extractor for deep kernels

h_k = act(h_{k-1} W_k^T + b_k) with the activation applied on every layer, the last one
included, so the features feeding the kernel stay bounded under tanh.
"""

from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from counterdkl.errors import DimensionMismatch, TraceMismatch
from counterdkl.schemas import Activation


@dataclass(frozen=True, eq=False)
class MlpParams:
    """Weights W_k (h_k x h_{k-1}), biases b_k (h_k) and the activation"""

    weights: Tuple[np.ndarray, ...]
    biases: Tuple[np.ndarray, ...]
    activation: Activation = Activation.TANH

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise DimensionMismatch("need one bias per weight matrix and at least one layer")
        prev = self.weights[0].shape[1]
        for w, b in zip(self.weights, self.biases):
            if w.ndim != 2 or w.shape[1] != prev or b.shape != (w.shape[0],):
                raise DimensionMismatch(f"inconsistent layer shapes: W {w.shape}, b {b.shape}, input {prev}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError("network parameters must be finite")
            prev = w.shape[0]

    @property
    def layer_sizes(self) -> List[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[0]

    @classmethod
    def initialize(
        cls,
        layer_sizes: Sequence[int],
        rng: np.random.Generator,
        activation: Activation = Activation.TANH,
    ) -> "MlpParams":
        """
        Glorot-uniform weights in +-sqrt(6 / (fan_in + fan_out)), zero biases

        Args:
            layer_sizes: [P, h_1, ..., d_z]
            rng: Seeded generator
            activation: Activation of every layer
        """
        if len(layer_sizes) < 2 or any(s < 1 for s in layer_sizes):
            raise ValueError(f"invalid layer sizes {list(layer_sizes)}")
        weights, biases = [], []
        for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
            biases.append(np.zeros(fan_out))
        return cls(weights=tuple(weights), biases=tuple(biases), activation=activation)


@dataclass(frozen=True, eq=False)
class ForwardTrace:
    """Per-layer inputs and pre-activations of one forward pass"""

    inputs: Tuple[np.ndarray, ...]
    pre_activations: Tuple[np.ndarray, ...]
    weights: Tuple[np.ndarray, ...]


@dataclass(frozen=True, eq=False)
class MlpGrads:
    weights: Tuple[np.ndarray, ...]
    biases: Tuple[np.ndarray, ...]
    inputs: np.ndarray


def _act(kind: Activation, z: np.ndarray) -> np.ndarray:
    return np.tanh(z) if kind == Activation.TANH else np.maximum(z, 0.0)


def _act_grad(kind: Activation, z: np.ndarray) -> np.ndarray:
    if kind == Activation.TANH:
        return 1.0 - np.tanh(z) ** 2
    return (z > 0).astype(np.float64)


def forward(params: MlpParams, x: np.ndarray) -> Tuple[np.ndarray, ForwardTrace]:
    """
    Map an n x P input batch to its n x d_z representation

    Returns:
        (features, trace for backward)
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.input_dim:
        raise DimensionMismatch(f"input must have {params.input_dim} columns, got shape {x.shape}")
    inputs, pre = [], []
    h = x
    for w, b in zip(params.weights, params.biases):
        inputs.append(h)
        z = h @ w.T + b
        pre.append(z)
        h = _act(params.activation, z)
    return h, ForwardTrace(inputs=tuple(inputs), pre_activations=tuple(pre), weights=params.weights)


def backward(params: MlpParams, trace: ForwardTrace, g: np.ndarray) -> MlpGrads:
    """
    Reverse-mode gradients of sum_ij G_ij H_ij

    Args:
        params: Network parameters used for the forward pass
        trace: Trace returned by forward
        g: n x d_z upstream gradient

    Returns:
        Gradients for every W_k, b_k and the n x P input
    """
    if len(trace.weights) != len(params.weights) or any(
        tw.shape != w.shape or not np.array_equal(tw, w) for tw, w in zip(trace.weights, params.weights)
    ):
        raise TraceMismatch("trace was not produced by these parameters")
    g = np.asarray(g, dtype=np.float64)
    if g.shape != trace.pre_activations[-1].shape:
        raise DimensionMismatch(f"upstream gradient shape {g.shape} != output shape {trace.pre_activations[-1].shape}")

    d_w, d_b = [], []
    upstream = g
    for w, h_in, z in reversed(list(zip(params.weights, trace.inputs, trace.pre_activations))):
        dz = upstream * _act_grad(params.activation, z)
        d_w.append(dz.T @ h_in)
        d_b.append(dz.sum(axis=0))
        upstream = dz @ w
    return MlpGrads(weights=tuple(reversed(d_w)), biases=tuple(reversed(d_b)), inputs=upstream)
