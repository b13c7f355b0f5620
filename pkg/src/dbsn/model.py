"""Trained-model container shared by the trainer, ensembles and evaluation.

``Model.draw`` produces the logits of one Monte-Carlo member. What is random
in a member depends on the method:

=================  ==========================  ===========================
method             structure                   weights
=================  ==========================  ===========================
dbsn               sharpened concrete          point (MAP)
map                softmax(theta / tau)        point
map_fixed_alpha    fixed (uniform by default)  point
mc_dropout         softmax(theta / tau)        point, dropout masks
bbb                softmax(theta / tau)        mean-field Gaussian
fbn                sharpened concrete          mean-field Gaussian
=================  ==========================  ===========================
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import streams
from . import tensor as T
from .concrete import EdgeSample, SharpTemp, sample_gumbel, sample_sharpened
from .network import NetworkSpec, WeightStore, network_forward
from .tensor import Tensor

METHODS = ("dbsn", "map", "map_fixed_alpha", "mc_dropout", "bbb", "fbn")


@dataclass
class Draw:
    logits: Tensor
    structure: EdgeSample
    weights: dict


@dataclass
class Model:
    method: str
    spec: NetworkSpec
    weights: WeightStore
    theta: Tensor | None = None
    rho: WeightStore | None = None
    fixed_structure: EdgeSample | None = None
    dropout_rate: float = 0.0
    prior_sigma: float = 1.0
    tau: float = 1.0
    beta: float = 0.5
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes

    @property
    def structure_is_stochastic(self) -> bool:
        return self.method in ("dbsn", "fbn")

    @property
    def weights_are_stochastic(self) -> bool:
        return self.method in ("bbb", "fbn")

    @property
    def learns_structure(self) -> bool:
        return self.method != "map_fixed_alpha"

    def temperature(self) -> SharpTemp:
        return SharpTemp(beta=self.beta if self.structure_is_stochastic else 0.0, tau=self.tau)

    def weight_params(self) -> dict[str, Tensor]:
        """Parameters updated by the momentum-SGD group."""
        params = dict(self.weights)
        if self.rho is not None:
            params.update({f"rho:{k}": v for k, v in self.rho.items()})
        return params

    def sample_structure(self, st: SharpTemp, key: tuple[int, ...]) -> EdgeSample:
        if not self.learns_structure:
            return self.fixed_structure
        if not self.structure_is_stochastic or st.beta == 0.0:
            return sample_sharpened(self.theta, SharpTemp(beta=0.0, tau=st.tau), np.zeros(self.theta.shape))
        edges, k = self.theta.shape
        noise = np.stack(
            [sample_gumbel(k, streams.substream(self.seed, *key, streams.STRUCTURE, e)).eps for e in range(edges)]
        )
        return sample_sharpened(self.theta, st, noise)

    def sample_weights(self, key: tuple[int, ...]) -> dict[str, Tensor]:
        if not self.weights_are_stochastic:
            return self.weights
        rng = streams.substream(self.seed, *key, streams.WEIGHTS)
        out = {}
        for name, mu in self.weights.items():
            eps = rng.standard_normal(mu.shape)
            out[name] = mu + T.softplus(self.rho[name]) * Tensor(eps, dtype=mu.dtype)
        return out

    def _dropout_hook(self, key: tuple[int, ...]):
        if self.method != "mc_dropout" or self.dropout_rate <= 0:
            return None
        rng = streams.substream(self.seed, *key, streams.DROPOUT)
        keep = 1.0 - self.dropout_rate

        def hook(h: Tensor) -> Tensor:
            return T.dropout(h, rng.random(h.shape) < keep, keep)

        return hook

    def draw(self, x, key: tuple[int, ...], st: SharpTemp | None = None) -> Draw:
        """One Monte-Carlo member evaluated on ``x``; ``key`` picks its substreams."""
        st = st or self.temperature()
        structure = self.sample_structure(st, key)
        weights = self.sample_weights(key)
        logits = network_forward(x, structure, weights, self.spec, hook=self._dropout_hook(key))
        return Draw(logits, structure, weights)

    def member_probs(self, x, S: int, seed: int, st: SharpTemp | None = None) -> list[Tensor]:
        return [T.softmax(self.draw(x, (seed, streams.EVAL, s), st).logits, axis=1) for s in range(S)]

    def predictive_tensor(self, x, S: int, seed: int = 0, st: SharpTemp | None = None) -> Tensor:
        """MC-mean class probabilities (recorded on the tape if inputs need grads)."""
        probs = self.member_probs(x, S, seed, st)
        total = probs[0]
        for p in probs[1:]:
            total = total + p
        return total * (1.0 / S)

    def weight_kl(self) -> Tensor:
        """Closed-form KL of the mean-field Gaussian against N(0, prior_sigma^2)."""
        total = None
        s2 = self.prior_sigma**2
        for name, mu in self.weights.items():
            sigma = T.softplus(self.rho[name])
            term = (
                T.tensor_sum(T.log(sigma)) * -1.0
                + T.tensor_sum(sigma * sigma + mu * mu) * (0.5 / s2)
                + mu.values.size * (math.log(self.prior_sigma) - 0.5)
            )
            total = term if total is None else total + term
        return total


@dataclass
class EnsembleModel:
    """Uniform probability average of independently trained members."""

    members: list[Model]
    meta: dict = field(default_factory=dict)

    @property
    def num_classes(self) -> int:
        return self.members[0].num_classes

    def member_probs(self, x, S: int, seed: int, st=None) -> list[Tensor]:
        return [m.predictive_tensor(x, 1, seed) for m in self.members]

    def predictive_tensor(self, x, S: int = 1, seed: int = 0, st=None) -> Tensor:
        probs = self.member_probs(x, S, seed)
        total = probs[0]
        for p in probs[1:]:
            total = total + p
        return total * (1.0 / len(probs))
