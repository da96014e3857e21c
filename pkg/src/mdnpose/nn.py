"""Layers of the feature extractor: linear lift plus residual blocks."""

from __future__ import annotations

from typing import Iterator, List, Optional

import numba
import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, DataError
from .tensor import Tensor

TRAIN = "train"
EVAL = "eval"
MODES = (TRAIN, EVAL)


def _check_mode(mode: str) -> None:
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")


class LinearLayer:
    """Affine map ``x @ weight + bias``; ``weight`` is stored as ``[in, out]``."""

    def __init__(self, in_features: int, out_features: int, name: str = "linear"):
        self.in_features = in_features
        self.out_features = out_features
        self.name = name
        self.weight = Tensor(np.zeros((in_features, out_features)), requires_grad=True, name=f"{name}.weight")
        self.bias = Tensor(np.zeros(out_features), requires_grad=True, name=f"{name}.bias")

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise DimensionError(f"{self.name}: expected width {self.in_features}, got input shape {x.shape}")
        return T.linear(x, self.weight, self.bias)

    def parameters(self) -> List[Tensor]:
        return [self.weight, self.bias]


def kaiming_init(layer: LinearLayer, rng: np.random.Generator) -> None:
    std = np.sqrt(2.0 / layer.in_features)
    layer.weight.data = rng.normal(0.0, std, size=(layer.in_features, layer.out_features))
    layer.bias.data = np.zeros(layer.out_features)


def max_norm_project(layer: LinearLayer, bound: float = 1.0) -> None:
    """Rescale every weight column whose Euclidean norm exceeds ``bound``.

    Columns already within ``bound * (1 + 1e-12)`` are left bit-for-bit
    untouched, which keeps the projection idempotent under rounding.
    """
    if bound <= 0:
        raise ConfigError(f"max-norm bound must be positive, got {bound}")
    _max_norm_kernel(layer.weight.data, float(bound), bound * (1.0 + 1e-12))


@numba.njit(cache=True)
def _max_norm_kernel(w, bound, limit):  # pragma: no cover - compiled
    rows, cols = w.shape
    sq = np.zeros(cols)
    for i in range(rows):
        for j in range(cols):
            sq[j] += w[i, j] * w[i, j]
    scale = np.ones(cols)
    any_over = False
    for j in range(cols):
        norm = np.sqrt(sq[j])
        if norm > limit:
            scale[j] = bound / norm
            any_over = True
    if any_over:
        for i in range(rows):
            for j in range(cols):
                w[i, j] *= scale[j]


class BatchNormLayer:
    def __init__(self, features: int, momentum: float = 0.1, epsilon: float = 1e-5, name: str = "bn"):
        if not 0.0 < momentum < 1.0:
            raise ConfigError(f"batch-norm momentum must lie in (0, 1), got {momentum}")
        self.features = features
        self.momentum = momentum
        self.epsilon = epsilon
        self.name = name
        self.gamma = Tensor(np.ones(features), requires_grad=True, name=f"{name}.gamma")
        self.beta = Tensor(np.zeros(features), requires_grad=True, name=f"{name}.beta")
        self.running_mean = np.zeros(features)
        self.running_var = np.ones(features)

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        return batchnorm_forward(self, x, mode)

    def parameters(self) -> List[Tensor]:
        return [self.gamma, self.beta]


def batchnorm_forward(layer: BatchNormLayer, x: Tensor, mode: str) -> Tensor:
    """Batch normalization over the rows of ``x``.

    Train mode normalizes with the biased batch variance and folds the batch
    statistics into the running estimates; eval mode reads the running
    estimates only and mutates nothing.
    """
    _check_mode(mode)
    if x.ndim != 2 or x.shape[1] != layer.features:
        raise DimensionError(f"{layer.name}: expected width {layer.features}, got input shape {x.shape}")
    gamma, beta = layer.gamma, layer.beta
    if mode == EVAL:
        inv = 1.0 / np.sqrt(layer.running_var + layer.epsilon)
        xhat = (x.data - layer.running_mean) * inv
        out = xhat * gamma.data + beta.data

        def back_eval(g):
            return g * (gamma.data * inv), (g * xhat).sum(axis=0), g.sum(axis=0)

        return Tensor.from_op(out, (x, gamma, beta), back_eval)

    n = x.shape[0]
    if n < 2:
        raise DataError(f"{layer.name}: train-mode batch norm needs a batch of at least 2, got {n}")
    mean = x.data.mean(axis=0)
    centered = x.data - mean
    var = (centered * centered).mean(axis=0)
    inv = 1.0 / np.sqrt(var + layer.epsilon)
    xhat = centered * inv
    out = xhat * gamma.data + beta.data
    m = layer.momentum
    layer.running_mean = (1.0 - m) * layer.running_mean + m * mean
    layer.running_var = (1.0 - m) * layer.running_var + m * var

    def back_train(g):
        dxhat = g * gamma.data
        dx = inv / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return Tensor.from_op(out, (x, gamma, beta), back_train)


def dropout_forward(x: Tensor, rate: float, mode: str, rng: Optional[np.random.Generator]) -> Tensor:
    """Inverted dropout: survivors are scaled by ``1 / (1 - rate)`` at train time."""
    _check_mode(mode)
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    if mode == EVAL or rate == 0.0:
        return x
    if rng is None:
        raise ConfigError("train-mode dropout needs an rng")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return Tensor.from_op(x.data * keep, (x,), lambda g: (g * keep,))


class ResidualBlock:
    """Two (linear, batch norm, ReLU, dropout) stacks plus an identity skip."""

    def __init__(self, width: int, dropout: float = 0.5, name: str = "block", **bn_kwargs):
        self.width = width
        self.dropout = dropout
        self.linear1 = LinearLayer(width, width, name=f"{name}.linear1")
        self.bn1 = BatchNormLayer(width, name=f"{name}.bn1", **bn_kwargs)
        self.linear2 = LinearLayer(width, width, name=f"{name}.linear2")
        self.bn2 = BatchNormLayer(width, name=f"{name}.bn2", **bn_kwargs)

    def __call__(self, x: Tensor, mode: str, rng=None) -> Tensor:
        h = x
        for lin, bn in ((self.linear1, self.bn1), (self.linear2, self.bn2)):
            h = dropout_forward(T.relu(bn(lin(h), mode)), self.dropout, mode, rng)
        return x + h

    def linear_layers(self) -> List[LinearLayer]:
        return [self.linear1, self.linear2]

    def batchnorm_layers(self) -> List[BatchNormLayer]:
        return [self.bn1, self.bn2]


class FeatureExtractor:
    """Lifts ``2N`` input coordinates to ``width`` features."""

    def __init__(self, in_features: int, width: int = 1024, n_blocks: int = 2, dropout: float = 0.5, **bn_kwargs):
        if n_blocks < 0:
            raise ConfigError(f"block count must be non-negative, got {n_blocks}")
        self.in_features = in_features
        self.width = width
        self.lift = LinearLayer(in_features, width, name="lift")
        self.blocks = [ResidualBlock(width, dropout, name=f"block{i}", **bn_kwargs) for i in range(n_blocks)]

    def __call__(self, x: Tensor, mode: str, rng=None) -> Tensor:
        return feature_forward(self, x, mode, rng)

    def linear_layers(self) -> List[LinearLayer]:
        layers = [self.lift]
        for block in self.blocks:
            layers.extend(block.linear_layers())
        return layers

    def batchnorm_layers(self) -> List[BatchNormLayer]:
        return [bn for block in self.blocks for bn in block.batchnorm_layers()]

    def parameters(self) -> Iterator[Tensor]:
        for layer in self.linear_layers():
            yield from layer.parameters()
        for bn in self.batchnorm_layers():
            yield from bn.parameters()


def feature_forward(fe: FeatureExtractor, x: Tensor, mode: str, rng=None) -> Tensor:
    _check_mode(mode)
    if x.ndim != 2 or x.shape[1] != fe.in_features:
        raise DimensionError(f"feature extractor expects width {fe.in_features}, got input shape {x.shape}")
    h = fe.lift(x)
    for block in fe.blocks:
        h = block(h, mode, rng)
    return h
