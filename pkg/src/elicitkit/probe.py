"""Recovering the in-context model's implicit parameter distribution.

The LLM is asked to predict on random probe inputs; an ordinary least-squares
fit to those predictions (or to their logits, for a logistic model class)
gives one parameter sample per (description, repetition).  A Gaussian KDE on
the prior samples then serves as a differentiable prior for an MCMC posterior
that can be set against the extracted in-context posterior.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Literal, Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular
from scipy.special import logit, logsumexp

from .bayes import LinearModelSpec, _xy, sample_posterior
from .errors import ElicitError, ProbeError, SingularDesignError
from .gateway import Gateway, strip_thinking
from .nuts import SamplerSettings
from .prompts import TaskDescription
from .seeding import derive_rng

log = logging.getLogger(__name__)

EPS_P = 1e-3
DECIMALS = 4  # precision of numbers shown to the model
ModelClass = Literal["linear", "logistic"]
_NUMBER = r"[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?"


@dataclass(frozen=True)
class ProbeDesign:
    n_features: int
    n_points: int = 25
    repetitions: int = 5
    input_low: float = -5.0
    input_high: float = 5.0
    model_class: ModelClass = "linear"

    def __post_init__(self):
        if self.n_points < self.n_features + 1:
            raise ValueError("n_points must be at least d + 1 for an identifiable fit")
        if not self.input_low < self.input_high:
            raise ValueError("input_low must be below input_high")
        if self.model_class not in ("linear", "logistic"):
            raise ValueError(f"unknown model class {self.model_class!r}")


@dataclass(frozen=True, eq=False)
class MLEParamSample:
    phi: np.ndarray  # weights then bias
    approximation_mse: float
    origin: tuple[int, int] = (0, 0)


@dataclass(frozen=True, eq=False)
class ExtractedDistribution:
    kind: Literal["prior", "posterior"]
    samples: tuple[MLEParamSample, ...]
    demos: tuple[np.ndarray, np.ndarray] | None = None

    def __post_init__(self):
        if self.kind == "posterior" and self.demos is None:
            raise ValueError("a posterior extraction needs its demonstrations")
        if self.kind == "prior" and self.demos is not None:
            raise ValueError("a prior extraction must not carry demonstrations")
        object.__setattr__(self, "samples", tuple(self.samples))

    @property
    def matrix(self) -> np.ndarray:
        return np.array([s.phi for s in self.samples])

    @property
    def mse(self) -> np.ndarray:
        return np.array([s.approximation_mse for s in self.samples])

    def save(self, path: str | Path) -> None:
        d = self.matrix.shape[1] - 1
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["origin", *[f"phi_{j}" for j in range(d)], "phi_bias", "mse"])
            for s in self.samples:
                w.writerow([f"{s.origin[0]}:{s.origin[1]}", *(repr(float(v)) for v in s.phi), repr(float(s.approximation_mse))])

    @classmethod
    def load(cls, path: str | Path, kind: str = "prior", demos=None) -> "ExtractedDistribution":
        with Path(path).open(newline="") as fh:
            rows = list(csv.reader(fh))[1:]
        samples = []
        for r in rows:
            a, b = r[0].split(":")
            samples.append(MLEParamSample(np.array([float(v) for v in r[1:-1]]), float(r[-1]), (int(a), int(b))))
        return cls(kind, tuple(samples), demos)


def _row(values) -> str:
    return "[" + ", ".join(f"{v:.{DECIMALS}f}" for v in values) + "]"


def format_demos(X, y) -> str:
    return "\n".join(f"features: {_row(x)} -> label: {t:.{DECIMALS}f}" for x, t in zip(np.asarray(X), np.asarray(y)))


def build_prediction_prompt(description: TaskDescription, X, demos=None, model_class: ModelClass = "linear") -> tuple[str, str]:
    target = "the probability of the positive class (a number between 0 and 1)" if model_class == "logistic" else "the predicted value"
    parts = [description.user]
    if demos is not None:
        parts.append("Here are labelled examples:\n" + format_demos(*demos))
    parts.append(
        f"Predict {target} for each of the following {len(X)} samples. Reply with exactly "
        f"{len(X)} lines, one number per line, in order:\n"
        + "\n".join(f"features: {_row(x)}" for x in np.asarray(X))
    )
    return description.system, "\n\n".join(parts)


def parse_predictions(reply: str, n: int) -> np.ndarray:
    """Extract ``n`` numbers from a reply; raises ValueError when the count is off."""
    text = strip_thinking(reply).strip()
    text = re.sub(r"```[a-zA-Z]*", "", text)
    try:
        value = json.loads(text)
        if isinstance(value, dict):
            value = next(iter(value.values()))
        if isinstance(value, list) and len(value) == n:
            return np.array([float(v) for v in value])
    except (json.JSONDecodeError, TypeError, ValueError, StopIteration):
        pass
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if len(lines) == n:
        values = []
        for ln in lines:
            tail = ln.rsplit("->", 1)[-1].rsplit(":", 1)[-1]
            nums = re.findall(_NUMBER, tail)
            if not nums:
                break
            values.append(float(nums[-1]))
        if len(values) == n:
            return np.array(values)
    nums = re.findall(_NUMBER, text)
    if len(nums) == n:
        return np.array([float(v) for v in nums])
    raise ValueError(f"expected {n} predictions, could not parse them from the reply")


def icl_predict(
    llm: Gateway,
    description: TaskDescription,
    X,
    demos=None,
    model_class: ModelClass = "linear",
    retry_limit: int = 3,
) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, float))
    system, user = build_prediction_prompt(description, X, demos, model_class)
    request = llm.request(system, user)
    problem = ""
    for attempt in range(retry_limit + 1):
        req = request if attempt == 0 else request.with_message(
            "user", f"Attempt {attempt + 1}: {problem}. Reply with exactly {len(X)} numbers, one per line."
        )
        try:
            pred = parse_predictions(llm.complete(req), len(X))
        except ValueError as exc:
            problem = str(exc)
            continue
        if not np.all(np.isfinite(pred)):
            problem = "non-finite predictions"
            continue
        if model_class == "logistic" and np.any((pred < 0) | (pred > 1)):
            problem = "probabilities must lie in [0, 1]"
            continue
        return pred
    raise ProbeError(f"no usable predictions for description {description.origin}: {problem}")


def fit_mle(X, predictions, model_class: ModelClass = "linear", eps_p: float = EPS_P,
            origin: tuple[int, int] = (0, 0)) -> MLEParamSample:
    """Least squares with intercept via the normal equations."""
    X = np.atleast_2d(np.asarray(X, float))
    t = np.asarray(predictions, float)
    if model_class == "logistic":
        t = logit(np.clip(t, eps_p, 1 - eps_p))
    A = np.hstack([X, np.ones((len(X), 1))])
    if len(X) < A.shape[1] or np.linalg.matrix_rank(A) < A.shape[1]:
        raise SingularDesignError("probe design is rank deficient")
    gram = A.T @ A
    try:
        phi = cho_solve(cho_factor(gram), A.T @ t)
    except np.linalg.LinAlgError:
        raise SingularDesignError("normal equations are not positive definite") from None
    # one refinement step keeps residuals orthogonal to the design at ~1e-12
    phi = phi + cho_solve(cho_factor(gram), A.T @ (t - A @ phi))
    resid = t - A @ phi
    return MLEParamSample(phi, float(np.mean(resid**2)), origin)


def probe_inputs(design: ProbeDesign, seed: int, origin: tuple[int, int]) -> np.ndarray:
    rng = derive_rng(seed, 8, *origin)
    # rounded so the fit sees exactly the inputs the model was shown
    X = rng.uniform(design.input_low, design.input_high, (design.n_points, design.n_features))
    return np.round(X, DECIMALS)


def extract_distribution(
    llm: Gateway,
    descriptions: Sequence[TaskDescription],
    design: ProbeDesign,
    demos: tuple[np.ndarray, np.ndarray] | None = None,
    seed: int = 0,
    workers: int = 4,
    retry_limit: int = 3,
) -> ExtractedDistribution:
    if not descriptions:
        raise ValueError("need at least one description")
    jobs = [(k, r) for k in range(len(descriptions)) for r in range(design.repetitions)]

    def one(job):
        k, r = job
        X = probe_inputs(design, seed, (k, r))
        try:
            pred = icl_predict(llm, descriptions[k], X, demos, design.model_class, retry_limit)
            return fit_mle(X, pred, design.model_class, origin=(k, r))
        except ElicitError as exc:
            log.warning("probe (%d, %d) failed: %s", k, r, exc)
            return None

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = list(pool.map(one, jobs))
    kept = [s for s in results if s is not None]
    for k in range(len(descriptions)):
        if not any(s.origin[0] == k for s in kept):
            log.warning("description %d produced no usable probes and is dropped", k)
    if not kept:
        raise ProbeError("every probe failed")
    if demos is not None:
        demos = (np.round(np.asarray(demos[0], float), DECIMALS), np.round(np.asarray(demos[1], float), DECIMALS))
    return ExtractedDistribution("posterior" if demos is not None else "prior", tuple(kept), demos)


class GaussianKDE:
    """Gaussian KDE with bandwidth matrix ``factor**2 * sample covariance``."""

    def __init__(self, samples, bandwidth_factor: float = 0.25, jitter: float = 1e-8):
        pts = np.asarray(samples, float)
        pts = pts[:, None] if pts.ndim == 1 else pts
        if len(pts) < 2:
            raise ValueError("a KDE needs at least two samples")
        self.points = pts
        self.n, self.dim = pts.shape
        self.factor = bandwidth_factor
        cov = np.atleast_2d(np.cov(pts, rowvar=False)) * bandwidth_factor**2
        try:
            chol = np.linalg.cholesky(cov)
            if np.min(np.diag(chol)) <= 1e-12 * max(1.0, np.max(np.diag(chol))):
                raise np.linalg.LinAlgError
        except np.linalg.LinAlgError:
            log.warning("singular KDE covariance; adding diagonal jitter %g", jitter)
            cov = cov + jitter * np.eye(self.dim)
            chol = np.linalg.cholesky(cov)
        self.covariance = cov
        self._chol = chol
        self._white = solve_triangular(chol, pts.T, lower=True).T
        self._log_norm = -np.sum(np.log(np.diag(chol))) - 0.5 * self.dim * math.log(2 * math.pi) - math.log(self.n)

    def log_density(self, x) -> np.ndarray | float:
        x = np.asarray(x, float)
        single = x.ndim == 1 and self.dim > 1 or x.ndim == 0
        xs = np.atleast_2d(x) if self.dim > 1 else x.reshape(-1, 1)
        u = solve_triangular(self._chol, xs.T, lower=True).T
        sq = (u**2).sum(1)[:, None] - 2 * u @ self._white.T + (self._white**2).sum(1)[None, :]
        out = logsumexp(-0.5 * np.maximum(sq, 0.0), axis=1) + self._log_norm
        return float(out[0]) if single else out

    def logpdf_grad(self, x) -> tuple[float, np.ndarray]:
        x = np.asarray(x, float).reshape(self.dim)
        u = solve_triangular(self._chol, x, lower=True)
        diff = self._white - u
        a = -0.5 * np.einsum("ij,ij->i", diff, diff)
        top = a.max()
        w = np.exp(a - top)
        s = w.sum()
        value = top + math.log(s) + self._log_norm
        g_white = (w @ diff) / s
        return float(value), solve_triangular(self._chol, g_white, lower=True, trans="T")

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        idx = rng.integers(0, self.n, n)
        return self.points[idx] + rng.standard_normal((n, self.dim)) @ self._chol.T


def kde_fit(samples, bandwidth_factor: float = 0.25) -> GaussianKDE:
    if isinstance(samples, ExtractedDistribution):
        samples = samples.matrix
    return GaussianKDE(samples, bandwidth_factor)


def mc_posterior_on_extracted_prior(
    kde: GaussianKDE,
    data,
    model_class: ModelClass = "linear",
    chains: int = 100,
    samples_per_chain: int = 10000,
    adaptation: int = 1000,
    seed: int = 0,
    noise_sd: float | None = None,
    max_tree_depth: int = 10,
) -> np.ndarray:
    """MCMC on log KDE-prior plus the likelihood of the demonstrations; returns phi draws."""
    X, y = _xy(data) if data is not None else (np.empty((0, kde.dim - 1)), np.empty(0))
    task = "classification" if model_class == "logistic" else "regression"
    spec = LinearModelSpec(task, kde.dim - 1, kde, noise_sd=noise_sd)
    settings = SamplerSettings(warmup=adaptation, max_tree_depth=max_tree_depth)
    post = sample_posterior(spec, (X, y), chains, samples_per_chain, seed, settings)
    return post.weights
