"""Sharpened concrete distribution over per-edge operation masks.

A sample is ``softmax((theta + beta * eps) / tau)`` with standard Gumbel noise
``eps``. ``beta = 1`` is the ordinary concrete (Gumbel-softmax) distribution;
``beta = 0`` collapses to the deterministic ``softmax(theta / tau)``.

All functions accept either a single edge (vectors of length K) or a stack of
edges (``[E, K]`` arrays); densities of stacked edges are summed since edges
are independent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any

import numpy as np

from . import tensor as T
from .tensor import Tensor

SIMPLEX_TOL = 1e-6
_TINY = np.finfo(np.float64).tiny


@dataclass(frozen=True)
class SharpTemp:
    beta: float
    tau: float

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta must lie in [0, 1], got {self.beta}")


@dataclass(frozen=True)
class GumbelNoise:
    eps: np.ndarray
    provenance: Any = None


@dataclass
class EdgeSample:
    """Relaxed mask(s), stored in log space."""

    log_alpha: Tensor

    @property
    def alpha(self) -> np.ndarray:
        return np.exp(self.log_alpha.values)

    @property
    def num_ops(self) -> int:
        return self.log_alpha.shape[-1]

    def alpha_tensor(self) -> Tensor:
        return T.exp(self.log_alpha)

    @classmethod
    def from_alpha(cls, alpha) -> EdgeSample:
        alpha = np.asarray(alpha, dtype=np.float64)
        if np.any(alpha <= 0):
            raise ValueError("alpha entries must be positive")
        _check_simplex(alpha)
        return cls(Tensor(np.log(alpha)))


def _check_simplex(alpha: np.ndarray) -> None:
    err = np.max(np.abs(alpha.sum(axis=-1) - 1.0))
    if err > SIMPLEX_TOL:
        raise ValueError(f"alpha off the simplex by {err:.3g}")


def gumbel_from_uniform(u) -> np.ndarray:
    u = np.clip(np.asarray(u, dtype=np.float64), _TINY, 1.0 - np.finfo(np.float64).epsneg)
    return -np.log(-np.log(u))


def sample_gumbel(k: int, rng: np.random.Generator, edges: int | None = None) -> GumbelNoise:
    """Standard Gumbel noise of shape ``[k]`` or ``[edges, k]``."""
    if k < 2:
        raise ValueError("need at least two categories")
    shape = (k,) if edges is None else (edges, k)
    return GumbelNoise(gumbel_from_uniform(rng.random(shape)), provenance="rng")


def sample_sharpened(logits: Tensor, st: SharpTemp, noise: GumbelNoise | np.ndarray) -> EdgeSample:
    eps = noise.eps if isinstance(noise, GumbelNoise) else np.asarray(noise)
    if eps.shape != logits.shape:
        raise T.ShapeError(f"noise {eps.shape} vs logits {logits.shape}")
    if st.beta == 0.0:
        z = logits
    else:
        z = logits + Tensor(st.beta * eps, dtype=logits.dtype)
    return EdgeSample(T.log_softmax(z * (1.0 / st.tau), axis=-1))


def _rowwise_terms(sample: EdgeSample, logits: Tensor, st: SharpTemp) -> Tensor:
    if st.beta == 0.0:
        raise ValueError("density is degenerate at beta = 0")
    if sample.log_alpha.shape != logits.shape:
        raise T.ShapeError(f"sample {sample.log_alpha.shape} vs logits {logits.shape}")
    _check_simplex(sample.alpha)
    la = sample.log_alpha
    k = la.shape[-1]
    z = (logits - la * st.tau) * (1.0 / st.beta)
    const = math.lgamma(k) + (k - 1) * (math.log(st.tau) - math.log(st.beta))
    return (T.tensor_sum(z - la, axis=-1) - T.logsumexp(z, axis=-1) * float(k)) + const


def log_pdf_sharpened(
    sample: EdgeSample, logits: Tensor, st: SharpTemp, per_edge: bool = False
) -> Tensor:
    """Log-density of ``sample`` under the sharpened concrete with ``logits``.

    Differentiable in both ``logits`` and the sample's ``log_alpha``. With
    ``per_edge`` the result keeps one entry per row instead of summing.
    """
    terms = _rowwise_terms(sample, logits, st)
    if per_edge or terms.shape == ():
        return terms
    return T.tensor_sum(terms)


def log_pdf_prior(sample: EdgeSample, tau: float, per_edge: bool = False) -> Tensor:
    """Uniform-class concrete prior: zero logits, ``beta = 1``."""
    zeros = Tensor(np.zeros(sample.log_alpha.shape), dtype=sample.log_alpha.dtype)
    return log_pdf_sharpened(sample, zeros, SharpTemp(beta=1.0, tau=tau), per_edge=per_edge)


def kl_mc_term(sample: EdgeSample, logits: Tensor, st: SharpTemp, tau_prior: float | None = None) -> Tensor:
    """Single-sample estimate ``log q(alpha) - log p(alpha)``."""
    tau_prior = st.tau if tau_prior is None else tau_prior
    return log_pdf_sharpened(sample, logits, st) - log_pdf_prior(sample, tau_prior)
