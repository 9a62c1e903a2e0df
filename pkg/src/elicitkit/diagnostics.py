"""Energy statistic between samples, and Bayes-factor model selection."""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial.distance import cdist

from .bayes import _xy
from .elicitation import MixturePrior
from .errors import ElicitError
from .probe import icl_predict
from .seeding import derive_rng

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EnergyResult:
    distance_sq: float
    statistic: float
    n_x: int
    n_y: int


def _mean_distance(A: np.ndarray, B: np.ndarray, same: bool, unbiased: bool, chunk: int = 1024) -> float:
    total = 0.0
    for start in range(0, len(A), chunk):
        total += float(cdist(A[start:start + chunk], B).sum())
    if same and unbiased:
        n = len(A)
        return total / (n * (n - 1)) if n > 1 else 0.0
    return total / (len(A) * len(B))


def _canonical(X: np.ndarray, Y: np.ndarray):
    """Fix the argument order so that energy(X, Y) and energy(Y, X) run identical arithmetic."""
    kx = (X.shape, X.tobytes())
    ky = (Y.shape, Y.tobytes())
    return (Y, X) if ky < kx else (X, Y)


def energy(X_samples, Y_samples, unbiased: bool = False) -> EnergyResult:
    """Energy distance and the [0, 1] energy statistic.

    Within-sample expectations average over all n^2 ordered pairs, zero
    diagonal included; ``unbiased=True`` drops the diagonal instead.
    """
    X = np.asarray(X_samples, float)
    Y = np.asarray(Y_samples, float)
    X = X[:, None] if X.ndim == 1 else X
    Y = Y[:, None] if Y.ndim == 1 else Y
    if len(X) == 0 or len(Y) == 0:
        raise ValueError("both samples must be non-empty")
    if X.shape[1] != Y.shape[1]:
        raise ValueError(f"dimension mismatch: {X.shape[1]} vs {Y.shape[1]}")
    A, B = _canonical(X, Y)
    e_ab = _mean_distance(A, B, False, unbiased)
    e_aa = _mean_distance(A, A, True, unbiased)
    e_bb = _mean_distance(B, B, True, unbiased)
    d2 = 2.0 * e_ab - e_aa - e_bb
    if not unbiased:
        d2 = max(d2, 0.0)
    stat = 0.0 if e_ab == 0.0 else d2 / (2.0 * e_ab)
    return EnergyResult(d2, stat, len(X), len(Y))


def compare_elicited_vs_extracted(prior: MixturePrior, extracted, n: int = 10000, seed: int = 0) -> EnergyResult:
    """Energy statistic between ``n`` elicited-prior draws and extracted in-context parameters."""
    if n < 1:
        raise ValueError("n must be at least 1")
    phi = extracted.matrix if hasattr(extracted, "matrix") else np.asarray(extracted, float)
    if phi.shape[1] != prior.dim:
        raise ValueError(f"extracted parameters have dimension {phi.shape[1]}, prior has {prior.dim}")
    draws = prior.sample(n, derive_rng(seed, 6))
    return energy(draws, phi)


def bayes_factor(loglik_a: Sequence[float], loglik_b: Sequence[float]) -> float:
    """Log Bayes factor from likelihood samples; positive favours ``a``."""
    a = np.asarray(loglik_a, float)
    b = np.asarray(loglik_b, float)
    if a.size == 0 or b.size == 0:
        raise ValueError("log-likelihood vectors must be non-empty")
    return float(a.mean()) - float(b.mean())


@dataclass
class BayesFactorReport:
    method_a: str
    method_b: str
    mean_loglik_a: list[float] = field(default_factory=list)
    mean_loglik_b: list[float] = field(default_factory=list)
    log_bayes_factor: list[float] = field(default_factory=list)

    def add_split(self, loglik_a, loglik_b) -> float:
        bf = bayes_factor(loglik_a, loglik_b)
        self.mean_loglik_a.append(float(np.mean(loglik_a)))
        self.mean_loglik_b.append(float(np.mean(loglik_b)))
        self.log_bayes_factor.append(bf)
        return bf

    @property
    def mean(self) -> float:
        return float(np.mean(self.log_bayes_factor))

    @property
    def std(self) -> float:
        return float(np.std(self.log_bayes_factor))

    def records(self, dataset: str) -> list[dict]:
        out = []
        for split, (la, lb, bf) in enumerate(zip(self.mean_loglik_a, self.mean_loglik_b, self.log_bayes_factor)):
            out.append({"dataset": dataset, "split": split, "method": self.method_a, "mean_loglik": la, "log_bf": bf})
            out.append({"dataset": dataset, "split": split, "method": self.method_b, "mean_loglik": lb, "log_bf": -bf})
        return out


def icl_prior_predictive_loglik(
    llm,
    descriptions,
    data_subset,
    task_kind: str,
    noise_sd: float = 1.0,
    eps_p: float = 1e-3,
    workers: int = 4,
    retry_limit: int = 3,
) -> np.ndarray:
    """One total log-likelihood per description from in-context predictions."""
    X, y = _xy(data_subset)
    model_class = "logistic" if task_kind == "classification" else "linear"

    def one(desc):
        try:
            pred = icl_predict(llm, desc, X, None, model_class, retry_limit=retry_limit)
        except ElicitError as exc:
            log.warning("dropping description %s from ICL likelihood: %s", desc.origin, exc)
            return None
        return prediction_loglik(pred, y, task_kind, noise_sd, eps_p)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        values = [v for v in pool.map(one, descriptions) if v is not None]
    return np.array(values)


def prediction_loglik(pred, y, task_kind: str, noise_sd: float = 1.0, eps_p: float = 1e-3) -> float:
    pred = np.asarray(pred, float)
    y = np.asarray(y, float)
    if task_kind == "classification":
        p = np.clip(pred, eps_p, 1 - eps_p)
        return float(np.sum(y * np.log(p) + (1 - y) * np.log1p(-p)))
    n = len(y)
    return float(-0.5 * n * np.log(2 * np.pi) - n * np.log(noise_sd) - 0.5 * np.sum((pred - y) ** 2) / noise_sd**2)
