"""Mixture-density head and the training objective.

The head turns a feature vector into mixing coefficients, kernel means and
isotropic kernel widths.  The objective is the mixture negative
log-likelihood plus a Dirichlet penalty on the mixing coefficients, both
averaged over the batch.  All likelihood arithmetic stays in the log domain.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations
from typing import List, Sequence, Tuple, Union

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, DomainError, NumericError
from .nn import LinearLayer
from .tensor import Tensor

LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class MdnConfig:
    M: int = 5
    gamma_elu: float = 1.0
    lam: Union[float, Sequence[float]] = 2.0
    alpha_clip: Tuple[float, float] = (1e-8, 1.0)
    sigma_clip: Tuple[float, float] = (1e-15, 1e15)

    def __post_init__(self):
        self.alpha_clip = tuple(float(v) for v in self.alpha_clip)
        self.sigma_clip = tuple(float(v) for v in self.sigma_clip)
        self.validate()

    @property
    def lambdas(self) -> np.ndarray:
        if np.ndim(self.lam) == 0:
            return np.full(self.M, float(self.lam))
        return np.asarray(self.lam, dtype=np.float64)

    def validate(self) -> None:
        if int(self.M) != self.M or self.M < 1:
            raise ConfigError(f"M must be a positive integer, got {self.M}")
        if self.gamma_elu <= 0:
            raise ConfigError(f"gamma_elu must be positive, got {self.gamma_elu}")
        lam = self.lambdas
        if lam.shape != (self.M,):
            raise ConfigError(f"lambda needs {self.M} entries, got {lam.shape}")
        if (lam <= 0).any():
            raise ConfigError(f"Dirichlet hyperparameters must be positive, got {lam.tolist()}")
        for name, (lo, hi) in (("alpha_clip", self.alpha_clip), ("sigma_clip", self.sigma_clip)):
            if not 0 < lo < hi:
                raise ConfigError(f"{name} bounds must be positive and ordered, got {(lo, hi)}")


@dataclass
class MdnParams:
    """Per-sample mixture parameters: ``alpha [B, M]``, ``mu [B, M, d]``, ``sigma [B, M]``."""

    alpha: Tensor
    mu: Tensor
    sigma: Tensor

    @property
    def M(self) -> int:
        return self.alpha.shape[1]

    @property
    def d(self) -> int:
        return self.mu.shape[2]

    def permuted(self, order: Sequence[int]) -> "MdnParams":
        order = list(order)
        return MdnParams(
            Tensor(self.alpha.data[:, order]), Tensor(self.mu.data[:, order]), Tensor(self.sigma.data[:, order])
        )


def modified_elu(t: Tensor, gamma: float = 1.0) -> Tensor:
    """``t + 1`` for ``t >= 0``, ``gamma * (exp(t) - 1) + 1`` otherwise."""
    if gamma <= 0:
        raise ConfigError(f"gamma must be positive, got {gamma}")
    x = t.data
    pos = x >= 0
    e = np.exp(np.minimum(x, 0.0))
    out = np.where(pos, x + 1.0, gamma * (e - 1.0) + 1.0)
    slope = np.where(pos, 1.0, gamma * e)
    return Tensor.from_op(out, (t,), lambda g: (g * slope,))


def _clip_renormalize_rows(p: Tensor, lo: float, hi: float) -> Tensor:
    """Clip rows to ``[lo, hi]`` and restore a unit row sum.

    Entries held at the floor stay there; only the free mass is rescaled,
    repeating while the rescale drags further entries under ``lo``.  A plain
    divide-by-sum would push floored entries slightly below ``lo``.
    """
    x = np.clip(p.data, lo, hi)
    fixed = p.data < lo
    for _ in range(p.shape[1]):
        free_mass = np.where(fixed, 0.0, x).sum(axis=1, keepdims=True)
        budget = 1.0 - lo * fixed.sum(axis=1, keepdims=True)
        factor = budget / np.where(free_mass > 0, free_mass, 1.0)
        out = np.where(fixed, lo, x * factor)
        newly = ~fixed & (out < lo)
        if not newly.any():
            break
        fixed |= newly
    inside = ~fixed & (p.data <= hi)

    def back(g):
        # free entries are p_i * budget / sum_free(p); fixed ones are constant
        gf = np.where(inside, g, 0.0)
        return (inside * factor * (gf - (gf * out).sum(axis=1, keepdims=True) / budget),)

    return Tensor.from_op(out, (p,), back)


class MdnHead:
    """Three linear heads reading the same features."""

    def __init__(self, width: int, out_dim: int, cfg: MdnConfig):
        self.width = width
        self.d = out_dim
        self.cfg = cfg
        self.alpha_layer = LinearLayer(width, cfg.M, name="head.alpha")
        self.mu_layer = LinearLayer(width, cfg.M * out_dim, name="head.mu")
        self.sigma_layer = LinearLayer(width, cfg.M, name="head.sigma")

    def __call__(self, features: Tensor) -> MdnParams:
        return mdn_head_forward(self, features)

    def linear_layers(self) -> List[LinearLayer]:
        return [self.alpha_layer, self.mu_layer, self.sigma_layer]


def mdn_head_forward(head: MdnHead, features: Tensor) -> MdnParams:
    cfg = head.cfg
    if features.ndim != 2 or features.shape[1] != head.width:
        raise DimensionError(f"MDN head expects width {head.width}, got features of shape {features.shape}")
    batch = features.shape[0]
    alpha = _clip_renormalize_rows(T.softmax_rows(head.alpha_layer(features)), *cfg.alpha_clip)
    mu = T.reshape(head.mu_layer(features), (batch, cfg.M, head.d))
    sigma = T.clip(modified_elu(head.sigma_layer(features), cfg.gamma_elu), *cfg.sigma_clip)
    return MdnParams(alpha, mu, sigma)


def log_gaussian_kernels(y: Tensor, mu: Tensor, sigma: Tensor) -> Tensor:
    """Log density of ``y [B, d]`` under every isotropic kernel; returns ``[B, M]``."""
    if mu.ndim != 3 or y.ndim != 2 or mu.shape[0] != y.shape[0] or mu.shape[2] != y.shape[1]:
        raise DimensionError(f"targets {y.shape} do not match kernel means {mu.shape}")
    if sigma.shape != mu.shape[:2]:
        raise DimensionError(f"kernel widths {sigma.shape} do not match kernel means {mu.shape}")
    s = sigma.data
    if not (s > 0).all():
        idx = tuple(int(i) for i in np.argwhere(~(s > 0))[0])
        raise DomainError(f"kernel width must be positive, got {s[idx]!r} at {idx}", index=idx)
    d = y.shape[1]
    diff = y.data[:, None, :] - mu.data
    sqd = (diff * diff).sum(axis=2)
    inv_var = 1.0 / (s * s)
    out = -0.5 * d * LOG_2PI - d * np.log(s) - 0.5 * sqd * inv_var

    def back(g):
        w = (g * inv_var)[:, :, None] * diff
        dsigma = g * (-d / s + sqd * inv_var / s)
        return -w.sum(axis=1), w, dsigma

    return Tensor.from_op(out, (y, mu, sigma), back)


def log_gaussian_kernel(y: Tensor, mu_i: Tensor, sigma_i: Tensor) -> Tensor:
    """Log density of ``y [B, d]`` under one kernel with mean ``mu_i [B, d]``."""
    batch, d = mu_i.shape
    out = log_gaussian_kernels(y, T.reshape(mu_i, (batch, 1, d)), T.reshape(sigma_i, (batch, 1)))
    return T.reshape(out, (batch,))


def _check_finite_rows(values: np.ndarray, what: str) -> None:
    bad = ~np.isfinite(values)
    if bad.any():
        row = int(np.argwhere(bad)[0][0])
        raise NumericError(f"{what} is not finite for sample {row}", index=row)


def log_mixture(alpha: Tensor, log_phi: Tensor) -> Tensor:
    """Per-row ``log(sum_i alpha_i exp(log_phi_i) / sum_i alpha_i)``.

    Shifting by the largest kernel log-density keeps every exponential in
    (0, 1].  Dividing by the mass actually present in ``alpha`` is a no-op on
    the simplex, but it cancels the rounding of the simplex projection, so
    coinciding kernels reproduce the single-kernel value bit for bit.
    """
    if alpha.shape != log_phi.shape or alpha.ndim != 2:
        raise DimensionError(f"alpha {alpha.shape} and kernel densities {log_phi.shape} must be equal [B, M]")
    a = alpha.data
    if (a < 0).any():
        raise DomainError("mixing coefficients must be non-negative", tuple(np.argwhere(a < 0)[0]))
    m = log_phi.data.max(axis=1, keepdims=True)
    w = np.exp(log_phi.data - m)
    S = (a * w).sum(axis=1, keepdims=True)
    A = a.sum(axis=1, keepdims=True)
    with np.errstate(divide="ignore"):
        out = (m + (np.log(S) - np.log(A)))[:, 0]

    def back(g):
        g = g[:, None]
        return g * (w / S - 1.0 / A), g * a * w / S

    return Tensor.from_op(out, (alpha, log_phi), back)


def per_sample_nll(params: MdnParams, y: Tensor) -> Tensor:
    for name in ("alpha", "mu", "sigma"):
        data = getattr(params, name).data
        if np.isnan(data).any():
            row = int(np.argwhere(np.isnan(data))[0][0])
            raise NumericError(f"NaN in {name} for sample {row}", index=row)
    if np.isnan(y.data).any():
        row = int(np.argwhere(np.isnan(y.data))[0][0])
        raise NumericError(f"NaN in target for sample {row}", index=row)
    nll = T.neg(log_mixture(params.alpha, log_gaussian_kernels(y, params.mu, params.sigma)))
    _check_finite_rows(nll.data[:, None], "mixture negative log-likelihood")
    return nll


def nll_loss(params: MdnParams, y: Tensor) -> Tensor:
    """Batch mean of ``-log sum_i alpha_i phi_i(y)``."""
    return T.reduce_mean(per_sample_nll(params, y))


def dirichlet_prior_loss(alpha: Tensor, lam) -> Tensor:
    """Batch mean of ``-sum_i (lambda_i - 1) log alpha_i`` (normalizer dropped)."""
    lam = np.broadcast_to(np.asarray(lam, dtype=np.float64), (alpha.shape[1],))
    if (lam <= 0).any():
        raise ConfigError(f"Dirichlet hyperparameters must be positive, got {lam.tolist()}")
    weights = Tensor(np.broadcast_to(lam - 1.0, alpha.shape).copy())
    return T.neg(T.reduce_mean(T.reduce_sum(T.log(alpha) * weights, axis=1)))


def total_loss(params: MdnParams, y: Tensor, cfg: MdnConfig) -> Tensor:
    return nll_loss(params, y) + dirichlet_prior_loss(params.alpha, cfg.lambdas)


def hypothesis_spread(params) -> np.ndarray:
    """Mean pairwise distance between kernel means, scaled by ``1/sqrt(d)``.

    Accepts :class:`MdnParams` or a raw ``[B, M, d]`` array of means.
    """
    mu = params.mu.data if isinstance(params, MdnParams) else np.asarray(params, dtype=np.float64)
    if mu.ndim == 2:
        mu = mu[None]
    batch, M, d = mu.shape
    if M < 2:
        raise ConfigError("hypothesis spread is undefined for a single kernel")
    pairs = list(combinations(range(M), 2))
    dist = np.stack([np.linalg.norm(mu[:, i] - mu[:, j], axis=1) for i, j in pairs], axis=1)
    return dist.mean(axis=1) / math.sqrt(d)
