"""Bayesian linear and logistic regression under a mixture (or any) prior.

Parameter layout: ``[w_1 .. w_d, bias]`` followed, for regression with a
sampled noise scale, by ``log(sigma)``.  Posterior sample sets store sigma
itself in the last column.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Protocol, Sequence

import numpy as np
from scipy.special import expit

from .datasets import Dataset
from .errors import NumericError, SamplerHealthError
from .nuts import SamplerSettings, run_chain
from .seeding import derive_rng

_LOG_2PI = math.log(2 * math.pi)


class Prior(Protocol):
    dim: int

    def logpdf_grad(self, theta: np.ndarray) -> tuple[float, np.ndarray]: ...

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray: ...


@dataclass(frozen=True)
class LinearModelSpec:
    task_kind: Literal["classification", "regression"]
    d: int
    prior: Prior
    noise_scale: float = 1.0  # Half-Cauchy scale beta
    noise_sd: float | None = None  # fixed noise instead of sampling it

    def __post_init__(self):
        if self.task_kind not in ("classification", "regression"):
            raise ValueError(f"unknown task kind {self.task_kind!r}")
        if not self.noise_scale > 0:
            raise ValueError("Half-Cauchy scale must be positive")
        if self.prior.dim != self.d + 1:
            raise ValueError(f"prior has dimension {self.prior.dim}, model needs {self.d + 1}")
        if self.noise_sd is not None and not self.noise_sd > 0:
            raise ValueError("fixed noise_sd must be positive")

    @property
    def samples_noise(self) -> bool:
        return self.task_kind == "regression" and self.noise_sd is None

    @property
    def n_params(self) -> int:
        return self.d + 1 + int(self.samples_noise)


def _xy(data) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(data, Dataset):
        return data.features, data.targets
    X, y = data
    return np.asarray(X, float), np.asarray(y, float)


class LogPosterior:
    """Callable returning (log density, gradient) for a model and data set."""

    def __init__(self, spec: LinearModelSpec, data):
        X, y = _xy(data)
        if X.size and X.shape[1] != spec.d:
            raise ValueError(f"data has {X.shape[1]} features, model expects {spec.d}")
        self.spec = spec
        self.X1 = np.hstack([X.reshape(-1, spec.d), np.ones((len(y), 1))])
        self.y = y
        self.n = len(y)
        d1 = spec.d + 1
        if spec.task_kind == "regression":
            self.xty = self.X1.T @ y
            self.xtx = self.X1.T @ self.X1
            self.yty = float(y @ y)
        self._d1 = d1

    def __call__(self, theta: np.ndarray) -> tuple[float, np.ndarray]:
        spec = self.spec
        theta = np.asarray(theta, float)
        if theta.shape != (spec.n_params,):
            raise ValueError(f"expected {spec.n_params} parameters, got shape {theta.shape}")
        beta = theta[: self._d1]
        value, g_prior = spec.prior.logpdf_grad(beta)
        grad = np.zeros(spec.n_params)
        grad[: self._d1] = g_prior
        if spec.task_kind == "classification":
            if self.n:
                z = self.X1 @ beta
                value += float(np.sum(self.y * z - np.logaddexp(0.0, z)))
                grad[: self._d1] += self.X1.T @ (self.y - expit(z))
        else:
            # residual sum of squares through sufficient statistics
            xb = self.xtx @ beta
            rss = self.yty - 2.0 * float(beta @ self.xty) + float(beta @ xb)
            rss = max(rss, 0.0)
            g_rss = -2.0 * (self.xty - xb)
            if spec.samples_noise:
                u = theta[-1]
                if not -350 < u < 350:
                    raise NumericError(f"log noise scale {u:.4g} out of range", spec.n_params - 1)
                s2 = math.exp(2 * u)
                ratio = s2 / spec.noise_scale**2
                value += math.log(2 / (math.pi * spec.noise_scale)) - math.log1p(ratio) + u
                grad[-1] = -2 * ratio / (1 + ratio) + 1.0
                value += -0.5 * self.n * _LOG_2PI - self.n * u - 0.5 * rss / s2
                grad[-1] += -self.n + rss / s2
                grad[: self._d1] += -0.5 * g_rss / s2
            else:
                s2 = spec.noise_sd**2
                value += -0.5 * self.n * _LOG_2PI - self.n * math.log(spec.noise_sd) - 0.5 * rss / s2
                grad[: self._d1] += -0.5 * g_rss / s2
        if not math.isfinite(value):
            bad = np.flatnonzero(~np.isfinite(theta))
            raise NumericError("log posterior is not finite", int(bad[0]) if bad.size else None)
        if not np.isfinite(grad).all():
            raise NumericError("log posterior gradient is not finite", int(np.flatnonzero(~np.isfinite(grad))[0]))
        return value, grad


def log_posterior(spec: LinearModelSpec, theta_ext, data) -> tuple[float, np.ndarray]:
    return LogPosterior(spec, data)(theta_ext)


@dataclass(frozen=True, eq=False)
class PosteriorSampleSet:
    samples: np.ndarray  # S x (d+1 [+ sigma])
    chain_ids: np.ndarray
    columns: tuple[str, ...]
    task_kind: str
    diagnostics: list[dict] = field(default_factory=list)

    @property
    def weights(self) -> np.ndarray:
        return self.samples[:, : self.d + 1]

    @property
    def d(self) -> int:
        return self.samples.shape[1] - 1 - int("noise" in self.columns)

    def chain(self, c: int) -> np.ndarray:
        return self.samples[self.chain_ids == c]

    def save(self, path: str | Path) -> None:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["chain", *self.columns])
            for cid, row in zip(self.chain_ids, self.samples):
                w.writerow([int(cid), *(repr(float(v)) for v in row)])
        sidecar = path.with_suffix(".diagnostics.json")
        sidecar.write_text(json.dumps({"task_kind": self.task_kind, "chains": self.diagnostics}, indent=1))

    @classmethod
    def load(cls, path: str | Path) -> "PosteriorSampleSet":
        path = Path(path)
        with path.open(newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        arr = np.array([[float(v) for v in r[1:]] for r in body]).reshape(len(body), len(header) - 1)
        meta = json.loads(path.with_suffix(".diagnostics.json").read_text())
        return cls(arr, np.array([int(r[0]) for r in body]), tuple(header[1:]), meta["task_kind"], meta["chains"])


def parameter_columns(spec: LinearModelSpec, feature_names: Sequence[str] | None = None) -> tuple[str, ...]:
    names = list(feature_names) if feature_names is not None else [f"w{j}" for j in range(spec.d)]
    return (*names, "bias", *(["noise"] if spec.samples_noise else []))


def sample_posterior(
    spec: LinearModelSpec,
    data,
    chains: int = 5,
    samples_per_chain: int = 5000,
    seed: int = 0,
    settings: SamplerSettings | None = None,
    feature_names: Sequence[str] | None = None,
    max_divergence_rate: float = 0.1,
) -> PosteriorSampleSet:
    settings = settings or SamplerSettings()
    target = LogPosterior(spec, data)
    draws, ids, diags = [], [], []
    for c in range(chains):
        rng = derive_rng(seed, c)
        init = rng.uniform(-settings.init_radius, settings.init_radius, spec.n_params)
        result = run_chain(target, init, samples_per_chain, rng, settings)
        s = result.samples
        if spec.samples_noise:
            s = s.copy()
            s[:, -1] = np.exp(s[:, -1])
        draws.append(s)
        ids.append(np.full(samples_per_chain, c))
        diags.append(result.summary())
    total_div = sum(d["divergences"] for d in diags)
    out = PosteriorSampleSet(
        np.vstack(draws), np.concatenate(ids), parameter_columns(spec, feature_names), spec.task_kind, diags
    )
    if chains * samples_per_chain and total_div / (chains * samples_per_chain) > max_divergence_rate:
        raise SamplerHealthError(
            f"{total_div} divergent transitions out of {chains * samples_per_chain}", {"chains": diags}
        )
    return out


def _weights_bias(samples) -> np.ndarray:
    if isinstance(samples, PosteriorSampleSet):
        return samples.weights
    return np.atleast_2d(np.asarray(samples, float))


def posterior_predictive(samples, X_test, task_kind: str) -> np.ndarray:
    """Per-sample predictions (rows = samples): hard labels or regression means."""
    wb = _weights_bias(samples)
    X = np.asarray(X_test, float)
    d = X.shape[1]
    z = wb[:, :d] @ X.T + wb[:, d : d + 1]
    if task_kind == "classification":
        # p >= 0.5 exactly when the logit is >= 0; ties go to label 1
        return (z >= 0).astype(float)
    return z


@dataclass(frozen=True)
class MetricSummary:
    metric: str
    per_sample: np.ndarray
    mean: float


def evaluate(samples, test_data, task_kind: str | None = None) -> MetricSummary:
    X, y = _xy(test_data)
    if len(y) == 0:
        raise ValueError("test set is empty")
    kind = task_kind or (test_data.task_kind if isinstance(test_data, Dataset) else None)
    if kind is None:
        kind = samples.task_kind
    pred = posterior_predictive(samples, X, kind)
    if kind == "classification":
        per = (pred == y).mean(axis=1)
        return MetricSummary("accuracy", per, float(per.mean()))
    per = ((pred - y) ** 2).mean(axis=1)
    return MetricSummary("mse", per, float(per.mean()))


def dataset_loglik(params: np.ndarray, X, y, task_kind: str, noise: np.ndarray | float | None = None) -> np.ndarray:
    """Total log-likelihood of (X, y) under each parameter row.

    Classification uses the Bernoulli (cross-entropy) likelihood; regression a
    Gaussian with per-row noise scale ``noise``.
    """
    wb = np.atleast_2d(np.asarray(params, float))
    X = np.asarray(X, float)
    y = np.asarray(y, float)
    d = X.shape[1]
    z = wb[:, :d] @ X.T + wb[:, d : d + 1]
    if task_kind == "classification":
        return np.sum(y * z - np.logaddexp(0.0, z), axis=1)
    sigma = np.broadcast_to(np.asarray(1.0 if noise is None else noise, float), (wb.shape[0],))
    n = len(y)
    rss = np.sum((z - y) ** 2, axis=1)
    return -0.5 * n * _LOG_2PI - n * np.log(sigma) - 0.5 * rss / sigma**2


def prior_predictive_loglik(
    spec: LinearModelSpec,
    data_subset,
    n_samples: int = 500,
    seed: int = 0,
    noise: Literal["sampled", "unit"] = "sampled",
) -> np.ndarray:
    """Log-likelihood of the subset under ``n_samples`` prior draws."""
    X, y = _xy(data_subset)
    if len(y) < 1:
        raise ValueError("need at least one data point")
    rng = derive_rng(seed, 5)
    params = spec.prior.sample(n_samples, rng)
    sigma = None
    if spec.task_kind == "regression":
        if spec.noise_sd is not None:
            sigma = spec.noise_sd
        elif noise == "sampled":
            sigma = spec.noise_scale * np.abs(np.tan(0.5 * np.pi * rng.uniform(size=n_samples)))
            sigma = np.maximum(sigma, 1e-300)
        else:
            sigma = 1.0
    return dataset_loglik(params, X, y, spec.task_kind, sigma)
