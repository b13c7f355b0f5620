"""Stochastic variational training of structure logits and shared weights.

The per-batch objective is

    N * mean_batch_nll + KL / num_batches + weight_decay * ||w||^2

averaged over ``mc_samples`` structure draws. Weights take a momentum-SGD step
with a clipped gradient; structure logits take an Adam step from the same
backward pass.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, NamedTuple

import numpy as np

from . import streams
from . import tensor as T
from .concrete import EdgeSample, SharpTemp, kl_mc_term
from .model import METHODS, Model
from .network import NetworkSpec, cross_entropy, init_theta, init_weights, uniform_structure
from .tensor import Tensor

log = logging.getLogger(__name__)

# The reference schedule reaches its floor at about 94% of its training run;
# tau_decay="auto" rescales the decay so shorter runs do the same.
AUTO_TAU_FLOOR_FRACTION = 0.94


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 64
    mc_samples: int = 4
    weight_decay: float = 1e-4
    lr_w: float = 0.1
    momentum: float = 0.9
    lr_milestones: tuple[float, ...] = (0.5, 0.75)
    lr_theta: float = 3e-4
    adam_betas: tuple[float, float] = (0.5, 0.999)
    adam_eps: float = 1e-8
    grad_clip_norm: float = 5.0
    tau_init: float = 3.0
    tau_decay: float | str = 1.5e-5
    tau_min: float = 1.0
    beta_start: float = 1.0
    beta_end: float = 0.5
    beta_horizon: int | None = None
    theta_init_scale: float = 1e-3
    dropout_rate: float = 0.2
    prior_sigma: float = 1.0
    rho_init: float = -5.0
    monitor_mc: int = 10
    seed: int = 0

    def __post_init__(self):
        self.lr_milestones = tuple(self.lr_milestones)
        self.adam_betas = tuple(self.adam_betas)
        if self.mc_samples < 1:
            raise ValueError("mc_samples must be >= 1")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.lr_w <= 0 or self.lr_theta <= 0:
            raise ValueError("learning rates must be positive")
        if self.grad_clip_norm <= 0:
            raise ValueError("grad_clip_norm must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if isinstance(self.tau_decay, str) and self.tau_decay != "auto":
            raise ValueError("tau_decay must be a number or 'auto'")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def field_names(cls) -> set[str]:
        return {f.name for f in fields(cls)}


# -- schedules ------------------------------------------------------------------


def tau_schedule(t: int, init: float = 3.0, decay: float = 1.5e-5, floor: float = 1.0) -> float:
    if t < 0:
        raise ValueError("step must be nonnegative")
    return max(init * math.exp(-decay * t), floor)


def beta_schedule(t: int, horizon: int, start: float = 1.0, end: float = 0.5) -> float:
    """Linear decay from ``start`` at step 0 to ``end`` at ``horizon`` and beyond."""
    if t < 0 or horizon <= 0:
        raise ValueError("need t >= 0 and horizon > 0")
    frac = min(t / horizon, 1.0)
    return start + (end - start) * frac


def milestone_lr(base: float, epoch_fraction: float, milestones=(0.5, 0.75), factor: float = 0.1) -> float:
    passed = sum(1 for m in milestones if epoch_fraction >= m)
    return base * factor**passed


# -- optimizers -------------------------------------------------------------------


def sgd_momentum_step(param: np.ndarray, grad: np.ndarray, buf: np.ndarray | None, lr: float, momentum: float) -> np.ndarray:
    """In-place heavy-ball step; returns the updated momentum buffer."""
    buf = grad.copy() if buf is None else momentum * buf + grad
    param -= lr * buf
    return buf


@dataclass
class AdamSlots:
    m: np.ndarray
    v: np.ndarray
    count: int = 0


def adam_step(param: np.ndarray, grad: np.ndarray, slots: AdamSlots, lr: float, betas=(0.9, 0.999), eps: float = 1e-8) -> None:
    b1, b2 = betas
    slots.count += 1
    slots.m = b1 * slots.m + (1 - b1) * grad
    slots.v = b2 * slots.v + (1 - b2) * grad * grad
    m_hat = slots.m / (1 - b1**slots.count)
    v_hat = slots.v / (1 - b2**slots.count)
    param -= lr * m_hat / (np.sqrt(v_hat) + eps)


def clip_grad_norm(grads: list[np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place to global norm ``max_norm``; returns the pre-clip norm."""
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads:
            g *= scale
    return norm


# -- objective --------------------------------------------------------------------


class ElboTerms(NamedTuple):
    nll: Tensor
    kl: Tensor
    l2: Tensor

    @property
    def loss(self) -> Tensor:
        return self.nll + self.kl + self.l2


def elbo_terms(
    model: Model,
    x: np.ndarray,
    y: np.ndarray,
    st: SharpTemp,
    key: tuple[int, ...],
    mc_samples: int,
    dataset_size: int,
    num_batches: int,
    weight_decay: float,
    tau_prior: float | None = None,
) -> ElboTerms:
    """Monte-Carlo estimate of the three loss terms on one minibatch.

    Sample ``s`` uses the substreams under ``key + (s,)``. The structure KL is
    skipped at ``beta = 0`` where the density is degenerate.
    """
    if len(y) == 0:
        raise ValueError("empty batch")
    xt = Tensor(x, dtype=model.weights["stem.W"].dtype)
    nll = None
    kl = None
    for s in range(mc_samples):
        draw = model.draw(xt, (*key, s), st)
        term = T.mean(cross_entropy(draw.logits, y)) * float(dataset_size)
        nll = term if nll is None else nll + term
        if model.structure_is_stochastic and st.beta > 0:
            k = kl_mc_term(draw.structure, model.theta, st, tau_prior)
            kl = k if kl is None else kl + k
    nll = nll * (1.0 / mc_samples)
    if kl is None:
        kl = Tensor(0.0)
    else:
        kl = kl * (1.0 / (mc_samples * num_batches))
    if model.weights_are_stochastic:
        kl = kl + model.weight_kl() * (1.0 / num_batches)
        l2 = Tensor(0.0)
    elif weight_decay > 0:
        l2 = None
        for w in model.weights.values():
            sq = T.tensor_sum(w * w)
            l2 = sq if l2 is None else l2 + sq
        l2 = l2 * weight_decay
    else:
        l2 = Tensor(0.0)
    return ElboTerms(nll, kl, l2)


# -- trainer ----------------------------------------------------------------------


def build_model(method: str, spec: NetworkSpec, config: TrainConfig, fixed_structure: EdgeSample | None = None) -> Model:
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    weights = init_weights(spec, streams.substream(config.seed, streams.INIT, 0))
    theta = None
    if method != "map_fixed_alpha":
        theta = init_theta(spec, streams.substream(config.seed, streams.INIT, 1), config.theta_init_scale)
    elif fixed_structure is None:
        fixed_structure = uniform_structure(spec)
    rho = None
    if method in ("bbb", "fbn"):
        rho = {k: Tensor(np.full(v.shape, config.rho_init), requires_grad=True) for k, v in weights.items()}
    return Model(
        method=method,
        spec=spec,
        weights=weights,
        theta=theta,
        rho=rho,
        fixed_structure=fixed_structure,
        dropout_rate=config.dropout_rate if method == "mc_dropout" else 0.0,
        prior_sigma=config.prior_sigma,
        tau=config.tau_init,
        beta=config.beta_start,
        seed=config.seed,
    )


@dataclass
class TrainState:
    step: int = 0
    momentum: dict[str, np.ndarray] = field(default_factory=dict)
    adam: AdamSlots | None = None
    epoch_sums: dict[str, float] = field(default_factory=dict)
    history: list[dict] = field(default_factory=list)


class Trainer:
    """Joint optimisation of one model on a fixed training set.

    ``freeze_beta`` pins the sharpness at a constant (the degenerate
    ``beta = 0`` case reproduces MAP training).
    """

    def __init__(
        self,
        method: str,
        spec: NetworkSpec,
        config: TrainConfig,
        x_train: np.ndarray,
        y_train: np.ndarray,
        x_test: np.ndarray | None = None,
        y_test: np.ndarray | None = None,
        fixed_structure: EdgeSample | None = None,
        freeze_beta: float | None = None,
    ):
        self.method = method
        self.spec = spec
        self.config = config
        self.x_train = np.asarray(x_train, dtype=np.float64)
        self.y_train = np.asarray(y_train, dtype=np.int64)
        self.x_test = None if x_test is None else np.asarray(x_test, dtype=np.float64)
        self.y_test = None if y_test is None else np.asarray(y_test, dtype=np.int64)
        self.freeze_beta = freeze_beta
        self.model = build_model(method, spec, config, fixed_structure)
        self.state = TrainState()
        if self.model.theta is not None:
            self.state.adam = AdamSlots(np.zeros(self.model.theta.shape), np.zeros(self.model.theta.shape))
        self.sync_temperature()

    @property
    def dataset_size(self) -> int:
        return len(self.y_train)

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(self.dataset_size / self.config.batch_size)

    @property
    def total_steps(self) -> int:
        return self.config.epochs * self.steps_per_epoch

    @property
    def tau_decay(self) -> float:
        c = self.config
        if c.tau_decay == "auto":
            return math.log(c.tau_init / c.tau_min) / (AUTO_TAU_FLOOR_FRACTION * self.total_steps)
        return c.tau_decay

    def temperature_at(self, t: int) -> SharpTemp:
        c = self.config
        tau = tau_schedule(t, c.tau_init, self.tau_decay, c.tau_min)
        if self.freeze_beta is not None:
            beta = self.freeze_beta
        elif self.model.structure_is_stochastic:
            beta = beta_schedule(t, c.beta_horizon or self.total_steps, c.beta_start, c.beta_end)
        else:
            beta = 0.0
        return SharpTemp(beta=beta, tau=tau)

    def lr_at(self, t: int) -> float:
        epoch = t // self.steps_per_epoch
        return milestone_lr(self.config.lr_w, epoch / self.config.epochs, self.config.lr_milestones)

    def sync_temperature(self) -> None:
        st = self.temperature_at(self.state.step)
        self.model.tau = st.tau
        self.model.beta = st.beta

    def batch_indices(self, t: int) -> np.ndarray:
        epoch, pos = divmod(t, self.steps_per_epoch)
        perm = streams.substream(self.config.seed, streams.SHUFFLE, epoch).permutation(self.dataset_size)
        bs = self.config.batch_size
        return perm[pos * bs : (pos + 1) * bs]

    def zero_grad(self) -> None:
        for p in self.model.weight_params().values():
            p.zero_grad()
        if self.model.theta is not None:
            self.model.theta.zero_grad()

    def compute_terms(self, idx: np.ndarray, t: int | None = None) -> ElboTerms:
        t = self.state.step if t is None else t
        c = self.config
        return elbo_terms(
            self.model,
            self.x_train[idx],
            self.y_train[idx],
            self.temperature_at(t),
            (c.seed, streams.TRAIN, t),
            c.mc_samples,
            self.dataset_size,
            self.steps_per_epoch,
            c.weight_decay,
        )

    def train_step(self, idx: np.ndarray | None = None) -> dict:
        t = self.state.step
        idx = self.batch_indices(t) if idx is None else idx
        c = self.config
        self.zero_grad()
        terms = self.compute_terms(idx, t)
        loss = terms.loss
        if not np.isfinite(loss.values):
            raise T.NonFiniteError(f"non-finite loss at step {t}: nll={terms.nll.item()} kl={terms.kl.item()}")
        T.backward(loss)

        params = self.model.weight_params()
        grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.values)) for k, p in params.items()}
        gnorm = clip_grad_norm(list(grads.values()), c.grad_clip_norm)
        lr = self.lr_at(t)
        for k, p in params.items():
            self.state.momentum[k] = sgd_momentum_step(p.values, grads[k], self.state.momentum.get(k), lr, c.momentum)
        theta = self.model.theta
        if theta is not None and self.model.learns_structure:
            g = theta.grad if theta.grad is not None else np.zeros_like(theta.values)
            adam_step(theta.values, g, self.state.adam, c.lr_theta, c.adam_betas, c.adam_eps)

        record = {
            "loss": loss.item(),
            "nll": terms.nll.item(),
            "kl": terms.kl.item(),
            "l2": terms.l2.item(),
            "grad_norm": gnorm,
        }
        sums = self.state.epoch_sums
        for k, v in record.items():
            sums[k] = sums.get(k, 0.0) + v
        sums["count"] = sums.get("count", 0.0) + 1
        self.state.step += 1
        self.sync_temperature()
        if self.state.step % self.steps_per_epoch == 0:
            self.end_epoch()
        return record

    def end_epoch(self) -> dict:
        sums = self.state.epoch_sums
        n = max(sums.get("count", 1.0), 1.0)
        t = self.state.step
        rec = {
            "epoch": t // self.steps_per_epoch,
            "step": t,
            "loss": sums.get("loss", 0.0) / n,
            "nll": sums.get("nll", 0.0) / n,
            "kl": sums.get("kl", 0.0) / n,
            "l2": sums.get("l2", 0.0) / n,
            "tau": self.model.tau,
            "beta": self.model.beta,
            "lr": self.lr_at(t - 1),
            "train_error": self.error(self.x_train, self.y_train),
            "test_error": float("nan") if self.x_test is None else self.error(self.x_test, self.y_test),
        }
        self.state.history.append(rec)
        self.state.epoch_sums = {}
        log.debug("epoch %(epoch)d loss %(loss).4f test_error %(test_error).4f", rec)
        return rec

    def error(self, x: np.ndarray, y: np.ndarray) -> float:
        with T.no_grad():
            probs = self.model.predictive_tensor(Tensor(x), self.config.monitor_mc, seed=self.config.seed).values
        return float(np.mean(probs.argmax(axis=1) != y))

    def fit(self, until_step: int | None = None, callback: Callable[[Trainer], None] | None = None) -> Model:
        stop = self.total_steps if until_step is None else min(until_step, self.total_steps)
        while self.state.step < stop:
            self.train_step()
            if callback is not None:
                callback(self)
        return self.model


def train(method: str, spec: NetworkSpec, config: TrainConfig, x_train, y_train, x_test=None, y_test=None, **kwargs) -> Trainer:
    trainer = Trainer(method, spec, config, x_train, y_train, x_test, y_test, **kwargs)
    trainer.fit()
    return trainer


def train_dbsn(spec, config, x_train, y_train, x_test=None, y_test=None) -> Trainer:
    return train("dbsn", spec, config, x_train, y_train, x_test, y_test)


def train_map(spec, config, x_train, y_train, x_test=None, y_test=None) -> Trainer:
    return train("map", spec, config, x_train, y_train, x_test, y_test)


def train_map_fixed_alpha(spec, config, x_train, y_train, x_test=None, y_test=None, fixed_structure=None) -> Trainer:
    return train("map_fixed_alpha", spec, config, x_train, y_train, x_test, y_test, fixed_structure=fixed_structure)


def train_mc_dropout(spec, config, x_train, y_train, x_test=None, y_test=None) -> Trainer:
    return train("mc_dropout", spec, config, x_train, y_train, x_test, y_test)


def train_bbb(spec, config, x_train, y_train, x_test=None, y_test=None) -> Trainer:
    return train("bbb", spec, config, x_train, y_train, x_test, y_test)


def train_fbn(spec, config, x_train, y_train, x_test=None, y_test=None) -> Trainer:
    return train("fbn", spec, config, x_train, y_train, x_test, y_test)
