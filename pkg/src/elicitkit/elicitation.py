"""Eliciting per-feature Gaussians from an LLM and mixing them into a prior."""
from __future__ import annotations

import json
import logging
import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .errors import ComponentRejectedError, ElicitError
from .gateway import Gateway, extract_json, strip_thinking
from .prompts import TaskDescription
from .seeding import derive_rng

log = logging.getLogger(__name__)

STD_CAP = 100.0
_LOG_2PI = math.log(2 * math.pi)
_MEAN_KEYS = ("mean", "mu", "average")
_STD_KEYS = ("std", "sd", "stdev", "std_dev", "standard_deviation", "standard deviation", "sigma")


@dataclass(frozen=True, eq=False)
class ElicitedPriorTable:
    """K x d grid of elicited (mean, std) pairs, one row per task description."""

    means: np.ndarray
    stds: np.ndarray
    feature_names: tuple[str, ...]
    descriptions: tuple[TaskDescription, ...] = ()
    dataset_id: str = "dataset"

    def __post_init__(self):
        means = np.atleast_2d(np.asarray(self.means, float))
        stds = np.atleast_2d(np.asarray(self.stds, float))
        if means.shape != stds.shape:
            raise ValueError("means and stds must share a shape")
        if means.shape[1] != len(self.feature_names):
            raise ValueError("table width must equal the number of features")
        if not np.all(np.isfinite(means)):
            raise ValueError("elicited means must be finite")
        if not np.all(np.isfinite(stds) & (stds > 0)):
            raise ValueError("elicited stds must be finite and positive")
        if self.descriptions and len(self.descriptions) != means.shape[0]:
            raise ValueError("one description per table row")
        for name, arr in (("means", means), ("stds", stds)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "feature_names", tuple(self.feature_names))
        object.__setattr__(self, "descriptions", tuple(self.descriptions))

    @property
    def k(self) -> int:
        return self.means.shape[0] if self.means.size else 0

    def rows(self, indices: Sequence[int]) -> "ElicitedPriorTable":
        idx = list(indices)
        return ElicitedPriorTable(
            self.means[idx],
            self.stds[idx],
            self.feature_names,
            tuple(self.descriptions[i] for i in idx) if self.descriptions else (),
            self.dataset_id,
        )

    def to_json(self) -> dict:
        return {
            "dataset_id": self.dataset_id,
            "feature_names": list(self.feature_names),
            "descriptions": [
                {"system": d.system, "user": d.user, "origin": list(d.origin)} for d in self.descriptions
            ],
            "components": [
                [{"mean": float(m), "std": float(s)} for m, s in zip(mr, sr)]
                for mr, sr in zip(self.means, self.stds)
            ],
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1), encoding="utf-8")

    @classmethod
    def from_json(cls, data: dict) -> "ElicitedPriorTable":
        comps = data["components"]
        if not comps:
            raise ValueError("table has no components")
        names = data.get("feature_names") or [f"feature {j}" for j in range(len(comps[0]))]
        return cls(
            np.array([[c["mean"] for c in row] for row in comps], float),
            np.array([[c["std"] for c in row] for row in comps], float),
            tuple(names),
            tuple(TaskDescription(d["system"], d["user"], tuple(d["origin"])) for d in data.get("descriptions", [])),
            data.get("dataset_id", "dataset"),
        )

    @classmethod
    def load(cls, path: str | Path) -> "ElicitedPriorTable":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


class MixturePrior:
    """Independent K-component Gaussian mixture in every parameter dimension.

    The last dimension is the bias.  Weights are the Dirichlet(1) expectation,
    i.e. 1/K per component; duplicate components within a dimension are merged
    (with summed weight) for speed, which leaves the density unchanged.
    """

    def __init__(self, means: np.ndarray, stds: np.ndarray, feature_names: Sequence[str] | None = None):
        means = np.atleast_2d(np.asarray(means, float))
        stds = np.atleast_2d(np.asarray(stds, float))
        if means.shape != stds.shape or means.size == 0:
            raise ValueError("need a non-empty K x D grid of means and stds")
        if not np.all(np.isfinite(stds) & (stds > 0)):
            raise ValueError("component stds must be finite and positive")
        self.means = means
        self.stds = stds
        self.k, self.dim = means.shape
        self.feature_names = tuple(feature_names) if feature_names is not None else None
        self._compact()

    def _compact(self):
        cols = []
        for j in range(self.dim):
            pairs, counts = np.unique(np.stack([self.means[:, j], self.stds[:, j]], 1), axis=0, return_counts=True)
            cols.append((pairs, counts))
        m = max(len(c[1]) for c in cols)
        mu = np.zeros((m, self.dim))
        sd = np.ones((m, self.dim))
        logw = np.full((m, self.dim), -np.inf)
        for j, (pairs, counts) in enumerate(cols):
            u = len(counts)
            mu[:u, j], sd[:u, j] = pairs[:, 0], pairs[:, 1]
            logw[:u, j] = np.log(counts / self.k)
        self._mu, self._sd, self._logw = mu, sd, logw
        self._lognorm = logw - np.log(sd) - 0.5 * _LOG_2PI
        self._single = m == 1

    @property
    def bias_means(self) -> np.ndarray:
        return self.means[:, -1]

    @property
    def bias_stds(self) -> np.ndarray:
        return self.stds[:, -1]

    def _check(self, theta) -> np.ndarray:
        theta = np.asarray(theta, float)
        if theta.shape[-1] != self.dim:
            raise ValueError(f"parameter vector must have length {self.dim}, got {theta.shape[-1]}")
        return theta

    def log_density_per_dim(self, theta) -> np.ndarray:
        theta = self._check(theta)
        z = (theta[..., None, :] - self._mu) / self._sd
        return logsumexp(self._lognorm - 0.5 * z * z, axis=-2)

    def log_density(self, theta) -> float | np.ndarray:
        return self.log_density_per_dim(theta).sum(axis=-1)

    def logpdf_grad(self, theta) -> tuple[float, np.ndarray]:
        theta = self._check(theta)
        diff = theta - self._mu
        if self._single:
            z = diff[0] / self._sd[0]
            return float(self._lognorm[0].sum() - 0.5 * z @ z), -z / self._sd[0]
        a = self._lognorm - 0.5 * (diff / self._sd) ** 2
        top = a.max(axis=0)
        e = np.exp(a - top)
        s = e.sum(axis=0)
        value = float(np.sum(top + np.log(s)))
        grad = -(e * diff / self._sd**2).sum(axis=0) / s
        return value, grad

    def sample(self, n: int, rng: np.random.Generator, return_components: bool = False):
        comp = rng.integers(0, self.k, size=(n, self.dim))
        cols = np.arange(self.dim)
        draws = self.means[comp, cols] + self.stds[comp, cols] * rng.standard_normal((n, self.dim))
        return (draws, comp) if return_components else draws

    @classmethod
    def uninformative(cls, d: int, feature_names=None) -> "MixturePrior":
        return cls(np.zeros((1, d + 1)), np.ones((1, d + 1)), feature_names)

    @classmethod
    def uninformative_mixture(cls, d: int, k: int = 100, seed: int = 0, feature_names=None) -> "MixturePrior":
        """K unit-variance components whose means are themselves N(0, 1) draws."""
        rng = derive_rng(seed, 3)
        means = rng.standard_normal((k, d + 1))
        means[:, -1] = 0.0
        return cls(means, np.ones((k, d + 1)), feature_names)


def build_mixture(table: ElicitedPriorTable) -> MixturePrior:
    if table.k == 0:
        raise ValueError("cannot build a mixture from an empty table")
    k = table.k
    means = np.hstack([table.means, np.zeros((k, 1))])
    stds = np.hstack([table.stds, np.ones((k, 1))])
    return MixturePrior(means, stds, table.feature_names)


def mixture_log_density(prior: MixturePrior, theta) -> float:
    return float(prior.log_density(theta))


def sample_prior(prior: MixturePrior, n: int, seed: int = 0) -> np.ndarray:
    if n < 1:
        raise ValueError("n must be at least 1")
    return prior.sample(n, derive_rng(seed, 4))


def _pick(entry: dict, keys: Sequence[str]):
    lowered = {str(k).strip().lower(): v for k, v in entry.items()}
    for k in keys:
        if k in lowered:
            return lowered[k]
    raise KeyError(keys[0])


def parse_component(reply: dict, feature_names: Sequence[str], std_cap: float = STD_CAP) -> tuple[np.ndarray, np.ndarray]:
    """Validate a ``{feature: {mean, std}}`` mapping; raises ValueError on any defect."""
    keys = set(reply)
    expected = set(feature_names)
    if keys != expected:
        missing, extra = sorted(expected - keys), sorted(keys - expected)
        raise ValueError(f"feature keys mismatch: missing {missing}, unexpected {extra}")
    means, stds = [], []
    for name in feature_names:
        entry = reply[name]
        if not isinstance(entry, dict):
            raise ValueError(f"entry for {name!r} is not an object")
        try:
            mean = float(_pick(entry, _MEAN_KEYS))
            std = float(_pick(entry, _STD_KEYS))
        except (KeyError, TypeError, ValueError):
            raise ValueError(f"entry for {name!r} lacks numeric mean/std") from None
        if not (math.isfinite(mean) and math.isfinite(std)) or std <= 0:
            raise ValueError(f"invalid (mean, std) = ({mean}, {std}) for {name!r}")
        if std > std_cap:
            log.warning("clamping elicited std %.3g for %r to %g", std, name, std_cap)
            std = std_cap
        means.append(mean)
        stds.append(std)
    return np.array(means), np.array(stds)


_NUM = r"([-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)"
_BLANKET_MEAN = re.compile(r"\b(?:mean|mu)\s*(?:=|:|of|is)\s*" + _NUM, re.I)
_BLANKET_STD = re.compile(r"\b(?:std|sd|standard deviation|sigma)\s*(?:=|:|of|is)\s*" + _NUM, re.I)
_BLANKET_SCOPE = re.compile(r"\b(?:every|each|all)\b", re.I)


def blanket_component(text: str, feature_names: Sequence[str]) -> dict | None:
    """Read prose such as "mean = 0 and std = 1 for every feature" as one entry per feature."""
    means, stds = _BLANKET_MEAN.findall(text), _BLANKET_STD.findall(text)
    if len(means) != 1 or len(stds) != 1 or not _BLANKET_SCOPE.search(text):
        return None
    return {name: {"mean": float(means[0]), "std": float(stds[0])} for name in feature_names}


def elicit_component(
    description: TaskDescription,
    feature_names: Sequence[str],
    llm: Gateway,
    max_retries: int = 3,
    std_cap: float = STD_CAP,
) -> tuple[np.ndarray, np.ndarray]:
    request = llm.request(description.system, description.user)
    problem = ""
    for attempt in range(max_retries + 1):
        req = request
        if attempt:
            req = request.with_message(
                "user",
                f"Attempt {attempt + 1}: the previous answer was invalid ({problem}). Give a JSON object "
                f"whose keys are exactly {list(feature_names)}, each mapping to "
                '{"mean": <number>, "std": <positive number>}.',
            )
        raw = llm.complete(req)
        try:
            reply = extract_json(raw)
        except ValueError:
            reply = blanket_component(strip_thinking(raw), feature_names)
        try:
            if reply is None:
                raise ValueError("no JSON object in reply")
            return parse_component(reply, feature_names, std_cap)
        except ValueError as exc:
            problem = str(exc)
            log.info("component rejected (attempt %d): %s", attempt + 1, problem)
    raise ComponentRejectedError(f"description {description.origin} rejected: {problem}")


def elicit_table(
    descriptions: Sequence[TaskDescription],
    feature_names: Sequence[str],
    llm: Gateway,
    dataset_id: str = "dataset",
    max_retries: int = 3,
    workers: int = 4,
) -> ElicitedPriorTable:
    """Elicit every description; rejected ones are dropped with a warning."""

    def one(desc):
        try:
            return elicit_component(desc, feature_names, llm, max_retries)
        except ElicitError as exc:
            log.warning("dropping description %s: %s", desc.origin, exc)
            return None

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = list(pool.map(one, descriptions))
    kept = [(d, r) for d, r in zip(descriptions, results) if r is not None]
    if not kept:
        raise ComponentRejectedError("every description was rejected")
    return ElicitedPriorTable(
        np.array([r[0] for _, r in kept]),
        np.array([r[1] for _, r in kept]),
        tuple(feature_names),
        tuple(d for d, _ in kept),
        dataset_id,
    )
