"""Calibration, entropy, adversarial and OOD instrumentation."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import stats

from . import tensor as T
from .ensemble import PredictiveDistribution, bayes_ensemble_predict, member_probabilities
from .tensor import Tensor

DEFAULT_BINS = 15
SIMPLEX_TOL = 1e-6


@dataclass
class CalibrationReport:
    num_bins: int
    edges: np.ndarray
    confidence: np.ndarray  # mean confidence per bin (0 for empty bins)
    accuracy: np.ndarray
    counts: np.ndarray
    ece: float


def _probs(pred) -> np.ndarray:
    return pred.probs if isinstance(pred, PredictiveDistribution) else np.asarray(pred, dtype=np.float64)


def ece(pred, labels, num_bins: int = DEFAULT_BINS) -> CalibrationReport:
    """Expected calibration error with equal-width bins on (0, 1].

    A confidence lying exactly on an interior edge belongs to the lower bin.
    """
    probs = _probs(pred)
    labels = np.asarray(labels)
    n = len(labels)
    if n == 0:
        raise ValueError("empty dataset")
    if num_bins < 1:
        raise ValueError("num_bins must be >= 1")
    if labels.min() < 0 or labels.max() >= probs.shape[1]:
        raise ValueError("labels out of range")
    conf = probs.max(axis=1)
    correct = (probs.argmax(axis=1) == labels).astype(np.float64)
    edges = np.arange(num_bins + 1) / num_bins  # correctly rounded b / n
    idx = np.clip(np.searchsorted(edges, conf, side="left") - 1, 0, num_bins - 1)
    counts = np.bincount(idx, minlength=num_bins)
    conf_sum = np.bincount(idx, weights=conf, minlength=num_bins)
    acc_sum = np.bincount(idx, weights=correct, minlength=num_bins)
    safe = np.maximum(counts, 1)
    mean_conf = np.where(counts > 0, conf_sum / safe, 0.0)
    mean_acc = np.where(counts > 0, acc_sum / safe, 0.0)
    value = float(np.sum(counts / n * np.abs(mean_acc - mean_conf)))
    return CalibrationReport(num_bins, edges, mean_conf, mean_acc, counts, value)


def reliability_data(report: CalibrationReport) -> list[dict]:
    mids = 0.5 * (report.edges[:-1] + report.edges[1:])
    return [
        {
            "midpoint": float(mids[b]),
            "accuracy": float(report.accuracy[b]),
            "confidence": float(report.confidence[b]),
            "count": int(report.counts[b]),
        }
        for b in range(report.num_bins)
    ]


def predictive_entropy(probs) -> float | np.ndarray:
    """Natural-log entropy of one row or of every row of a matrix."""
    p = np.asarray(probs, dtype=np.float64)
    if np.any(p < -SIMPLEX_TOL) or np.any(np.abs(p.sum(axis=-1) - 1.0) > SIMPLEX_TOL):
        raise ValueError("probabilities off the simplex")
    p = np.clip(p, 0.0, 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p), 0.0)
    h = -terms.sum(axis=-1)
    return float(h) if h.ndim == 0 else h


# -- attacks --------------------------------------------------------------------


def input_gradient(model, x: np.ndarray, y: np.ndarray, S: int, seed: int) -> np.ndarray:
    """Gradient of the summed NLL of the MC-mean predictive w.r.t. the inputs."""
    xt = Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)
    probs = model.predictive_tensor(xt, S, seed)
    nll = -T.tensor_sum(T.log(T.gather(probs, np.asarray(y))))
    T.backward(nll)
    if xt.grad is None:
        raise ValueError("model output does not depend on its inputs")
    return xt.grad


def _bounds(x, lo, hi):
    lo = np.min(x, axis=0) if lo is None else np.asarray(lo, dtype=np.float64)
    hi = np.max(x, axis=0) if hi is None else np.asarray(hi, dtype=np.float64)
    return lo, hi


def fgsm_attack(model, x, y, eps_size, S_attack: int = 30, seed: int = 0, lo=None, hi=None) -> np.ndarray:
    """One signed-gradient step of size ``eps_size`` (scalar or per-feature)."""
    x = np.asarray(x, dtype=np.float64)
    eps = np.asarray(eps_size, dtype=np.float64)
    if np.any(eps < 0):
        raise ValueError("eps_size must be nonnegative")
    lo, hi = _bounds(x, lo, hi)
    if np.all(eps == 0):
        return x.copy()
    g = input_gradient(model, x, y, S_attack, seed)
    return np.clip(x + eps * np.sign(g), lo, hi)


def bim_attack(model, x, y, eps_size, iters: int = 3, S_attack: int = 30, seed: int = 0, lo=None, hi=None) -> np.ndarray:
    """Iterated FGSM with step ``eps_size / iters``, projected every step."""
    if iters < 1:
        raise ValueError("iters must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    eps = np.asarray(eps_size, dtype=np.float64)
    if np.any(eps < 0):
        raise ValueError("eps_size must be nonnegative")
    lo, hi = _bounds(x, lo, hi)
    step = eps / iters
    adv = x.copy()
    if np.all(eps == 0):
        return adv
    for _ in range(iters):
        g = input_gradient(model, adv, y, S_attack, seed)
        adv = np.clip(adv + step * np.sign(g), x - eps, x + eps)
        adv = np.clip(adv, lo, hi)
    return adv


@dataclass
class EntropyCurve:
    sizes: list[float]
    mean_entropy: list[float]
    accuracy: list[float]

    def rows(self) -> list[dict]:
        return [
            {"eps": s, "mean_entropy": h, "accuracy": a}
            for s, h, a in zip(self.sizes, self.mean_entropy, self.accuracy)
        ]


def entropy_curve(
    model,
    x,
    y,
    fractions: Sequence[float],
    input_range,
    lo=None,
    hi=None,
    attack: str = "fgsm",
    S_attack: int = 30,
    S_eval: int = 30,
    iters: int = 3,
    seed: int = 0,
) -> EntropyCurve:
    """Mean predictive entropy and accuracy on attacked inputs per size.

    Perturbation sizes are ``fraction * input_range`` per feature.
    """
    fractions = list(fractions)
    if any(b <= a for a, b in zip(fractions, fractions[1:])):
        raise ValueError("sizes must be strictly increasing")
    y = np.asarray(y)
    ent, acc = [], []
    for f in fractions:
        eps = f * np.asarray(input_range, dtype=np.float64)
        if attack == "fgsm":
            adv = fgsm_attack(model, x, y, eps, S_attack, seed, lo, hi)
        elif attack == "bim":
            adv = bim_attack(model, x, y, eps, iters, S_attack, seed, lo, hi)
        else:
            raise ValueError(f"unknown attack {attack!r}")
        pred = bayes_ensemble_predict(model, adv, S_eval, seed=seed + 1)
        ent.append(float(np.mean(predictive_entropy(pred.probs))))
        acc.append(1.0 - pred.error(y))
    return EntropyCurve(fractions, ent, acc)


# -- OOD and MC sweeps ------------------------------------------------------------


def empirical_cdf(values) -> list[tuple[float, float]]:
    v = np.sort(np.asarray(values, dtype=np.float64))
    if len(v) == 0:
        raise ValueError("no values")
    frac = np.searchsorted(v, v, side="right") / len(v)
    return list(zip(v.tolist(), frac.tolist()))


def ood_entropy_cdf(model, ood_x, S: int = 100, seed: int = 0) -> list[tuple[float, float]]:
    if len(ood_x) == 0:
        raise ValueError("ood_data must be nonempty")
    pred = bayes_ensemble_predict(model, ood_x, S, seed)
    return empirical_cdf(predictive_entropy(pred.probs))


def mc_sweep(model, x, y, sample_counts: Sequence[int], seed: int = 0, num_bins: int = DEFAULT_BINS) -> list[dict]:
    """Loss, error and ECE of the Bayes ensemble for each sample count.

    All counts share one run of members, so the count-S ensemble is a prefix
    of the largest one.
    """
    counts = list(sample_counts)
    if not counts or min(counts) < 1:
        raise ValueError("sample counts must be >= 1")
    y = np.asarray(y)
    members = member_probabilities(model, x, max(counts), seed)
    csum = np.cumsum(members, axis=0)
    out = []
    for S in counts:
        pred = PredictiveDistribution(csum[S - 1] / S, S)
        out.append({"S": S, "nll": pred.nll(y), "error": pred.error(y), "ece": ece(pred, y, num_bins).ece})
    return out


def sign_test(successes: int, trials: int) -> float:
    """One-sided sign-test p-value for ``successes`` out of ``trials``."""
    return float(stats.binomtest(successes, trials, 0.5, alternative="greater").pvalue)


# -- tabular output ---------------------------------------------------------------


def write_csv(path, rows: Sequence[dict] | Sequence[Sequence], header: Sequence[str] | None = None) -> None:
    """Write rows with a one-line header (taken from dict keys when omitted)."""
    rows = list(rows)
    if header is None:
        if not rows or not isinstance(rows[0], dict):
            raise ValueError("header required for non-dict rows")
        header = list(rows[0].keys())
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            vals = [r[h] for h in header] if isinstance(r, dict) else list(r)
            w.writerow([_fmt(v) for v in vals])


def read_csv(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return [{k: _parse(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    if isinstance(v, np.integer):
        return int(v)
    return v


def _parse(v: str):
    for cast in (int, float):
        try:
            return cast(v)
        except ValueError:
            pass
    return v


def prediction_rows(pred: PredictiveDistribution, labels) -> list[dict]:
    """One row per datum: label, prediction, class probabilities, entropy."""
    ent = predictive_entropy(pred.probs)
    rows = []
    for i, (p, label) in enumerate(zip(pred.probs, labels)):
        row = {"label": int(label), "predicted": int(p.argmax())}
        row.update({f"p{c}": float(v) for c, v in enumerate(p)})
        row["entropy"] = float(ent[i])
        rows.append(row)
    return rows
