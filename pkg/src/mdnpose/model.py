"""The full network: feature extractor followed by the mixture-density head."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Dict, List, Optional

import numpy as np

from .mdn import MdnConfig, MdnHead, MdnParams
from .nn import BatchNormLayer, FeatureExtractor, LinearLayer, kaiming_init
from .tensor import Tensor, no_grad


@dataclass
class Architecture:
    n_joints: int
    M: int = 5
    width: int = 1024
    n_blocks: int = 2
    dropout: float = 0.5
    gamma_elu: float = 1.0
    lam: float = 2.0
    alpha_clip: tuple = (1e-8, 1.0)
    sigma_clip: tuple = (1e-15, 1e15)
    bn_momentum: float = 0.1
    bn_epsilon: float = 1e-5

    @property
    def in_dim(self) -> int:
        return 2 * self.n_joints

    @property
    def out_dim(self) -> int:
        return 3 * self.n_joints

    def mdn_config(self) -> MdnConfig:
        return MdnConfig(M=self.M, gamma_elu=self.gamma_elu, lam=self.lam,
                         alpha_clip=self.alpha_clip, sigma_clip=self.sigma_clip)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["alpha_clip"] = list(self.alpha_clip)
        out["sigma_clip"] = list(self.sigma_clip)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        d = dict(d)
        d["alpha_clip"] = tuple(d["alpha_clip"])
        d["sigma_clip"] = tuple(d["sigma_clip"])
        return cls(**d)


class MdnPoseNet:
    def __init__(self, arch: Architecture, rng: Optional[np.random.Generator] = None):
        self.arch = arch
        self.cfg = arch.mdn_config()
        bn = dict(momentum=arch.bn_momentum, epsilon=arch.bn_epsilon)
        self.features = FeatureExtractor(arch.in_dim, arch.width, arch.n_blocks, arch.dropout, **bn)
        self.head = MdnHead(arch.width, arch.out_dim, self.cfg)
        if rng is not None:
            for layer in self.linear_layers():
                kaiming_init(layer, rng)

    def __call__(self, x, mode: str = "eval", rng=None) -> MdnParams:
        if not isinstance(x, Tensor):
            x = Tensor(x)
        return self.head(self.features(x, mode, rng))

    def linear_layers(self) -> List[LinearLayer]:
        return self.features.linear_layers() + self.head.linear_layers()

    def batchnorm_layers(self) -> List[BatchNormLayer]:
        return self.features.batchnorm_layers()

    def parameters(self) -> List[Tensor]:
        params = []
        for layer in self.linear_layers():
            params.extend(layer.parameters())
        for bn in self.batchnorm_layers():
            params.extend(bn.parameters())
        return params

    def state_arrays(self) -> Dict[str, np.ndarray]:
        """Every learnable and running-statistic array, in a fixed order."""
        out = {p.name: p.data for p in self.parameters()}
        for bn in self.batchnorm_layers():
            out[f"{bn.name}.running_mean"] = bn.running_mean
            out[f"{bn.name}.running_var"] = bn.running_var
        return out

    def load_state_arrays(self, arrays: Dict[str, np.ndarray]) -> None:
        for p in self.parameters():
            p.data = np.array(arrays[p.name], dtype=np.float64).reshape(p.data.shape)
        for bn in self.batchnorm_layers():
            bn.running_mean = np.array(arrays[f"{bn.name}.running_mean"], dtype=np.float64)
            bn.running_var = np.array(arrays[f"{bn.name}.running_var"], dtype=np.float64)

    def predict(self, x: np.ndarray, batch_size: int = 1024) -> Dict[str, np.ndarray]:
        """Eval-mode forward over ``x [K, 2N]`` in chunks; returns plain arrays."""
        x = np.asarray(x, dtype=np.float64)
        alphas, mus, sigmas = [], [], []
        with no_grad():
            for start in range(0, len(x), batch_size):
                p = self(Tensor(x[start:start + batch_size]), "eval")
                alphas.append(p.alpha.data)
                mus.append(p.mu.data)
                sigmas.append(p.sigma.data)
        if not alphas:
            M, d = self.arch.M, self.arch.out_dim
            return {"alpha": np.zeros((0, M)), "mu": np.zeros((0, M, d)), "sigma": np.zeros((0, M))}
        return {"alpha": np.concatenate(alphas), "mu": np.concatenate(mus), "sigma": np.concatenate(sigmas)}
