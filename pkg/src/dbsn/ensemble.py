"""Bayes-ensemble prediction and per-structure ensemble refinement."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from . import streams
from . import tensor as T
from .concrete import EdgeSample, SharpTemp
from .model import EnsembleModel, Model
from .tensor import Tensor
from .train import TrainConfig, Trainer


@dataclass
class PredictiveDistribution:
    probs: np.ndarray  # [batch, classes]
    num_samples: int
    sample_probs: np.ndarray | None = None  # [S, batch, classes]

    def __post_init__(self):
        if np.any(self.probs < 0) or np.max(np.abs(self.probs.sum(axis=1) - 1.0)) > 1e-6:
            raise ValueError("predictive rows must lie on the simplex")

    @property
    def predictions(self) -> np.ndarray:
        return self.probs.argmax(axis=1)

    def nll(self, labels) -> float:
        p = self.probs[np.arange(len(labels)), np.asarray(labels)]
        return float(-np.mean(np.log(np.maximum(p, 1e-300))))

    def error(self, labels) -> float:
        return float(np.mean(self.predictions != np.asarray(labels)))


def threads_from_env() -> int:
    """Worker cap from ``DBSN_THREADS``; 0 (default) means sequential."""
    try:
        return max(int(os.environ.get("DBSN_THREADS", "0")), 0)
    except ValueError:
        return 0


def member_probabilities(model, x: np.ndarray, S: int, seed: int = 0, st: SharpTemp | None = None, threads: int | None = None) -> np.ndarray:
    """Per-member class probabilities ``[S, batch, classes]``.

    Member ``s`` always uses substream ``(seed, EVAL, s)``, so the first ``s``
    members of a larger run coincide with a smaller one.
    """
    if S < 1:
        raise ValueError("S must be >= 1")
    xt = Tensor(np.asarray(x, dtype=np.float64))
    if isinstance(model, EnsembleModel):
        with T.no_grad():
            return np.stack([p.values for p in model.member_probs(xt, S, seed)])
    threads = threads_from_env() if threads is None else threads

    def one(s: int) -> np.ndarray:
        with T.no_grad():
            return T.softmax(model.draw(xt, (seed, streams.EVAL, s), st).logits, axis=1).values

    if threads > 1 and S > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return np.stack(list(pool.map(one, range(S))))
    return np.stack([one(s) for s in range(S)])


def bayes_ensemble_predict(
    model,
    x: np.ndarray,
    S: int = 100,
    seed: int = 0,
    st: SharpTemp | None = None,
    keep_samples: bool = False,
    threads: int | None = None,
) -> PredictiveDistribution:
    """Average the softmax outputs of ``S`` posterior members."""
    members = member_probabilities(model, x, S, seed, st, threads)
    return PredictiveDistribution(members.mean(axis=0), len(members), members if keep_samples else None)


def pairwise_disagreement(member_probs: np.ndarray) -> float:
    """Mean fraction of inputs on which two members' argmax labels differ."""
    preds = member_probs.argmax(axis=2)
    m = len(preds)
    if m < 2:
        return 0.0
    total = [np.mean(preds[i] != preds[j]) for i in range(m) for j in range(i + 1, m)]
    return float(np.mean(total))


def structure_ensemble_refinement(
    dbsn: Model,
    x_train,
    y_train,
    num_structures: int,
    config: TrainConfig,
    seed: int = 0,
    control: bool = False,
    x_test=None,
    y_test=None,
) -> EnsembleModel:
    """Train one weight set per structure drawn from the learned posterior.

    Members train with the MAP recipe on a frozen mask and differ in weight
    seed. With ``control`` a single drawn structure is replicated instead.
    """
    if dbsn.theta is None:
        raise ValueError("refinement needs a model with learned structure logits")
    if num_structures < 1:
        raise ValueError("num_structures must be >= 1")
    st = SharpTemp(beta=dbsn.beta, tau=dbsn.tau)
    with T.no_grad():
        structures = [
            _frozen(dbsn.sample_structure(st, (seed, streams.REFINE, m)))
            for m in range(num_structures)
        ]
    if control:
        pick = streams.substream(seed, streams.REFINE, 10**6).integers(num_structures)
        structures = [structures[pick]] * num_structures
    members = []
    for m, structure in enumerate(structures):
        member_cfg = replace(config, seed=seed * 1000 + m + 1)
        trainer = Trainer("map_fixed_alpha", dbsn.spec, member_cfg, x_train, y_train, x_test, y_test, fixed_structure=structure)
        trainer.fit()
        members.append(trainer.model)
    return EnsembleModel(members, meta={"control": control, "num_structures": num_structures, "seed": seed})


def _frozen(sample: EdgeSample) -> EdgeSample:
    return EdgeSample(Tensor(sample.log_alpha.values.copy()))
