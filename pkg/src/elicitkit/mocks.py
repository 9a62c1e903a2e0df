"""Scripted providers for offline runs and tests.

Every factory here returns a callable ``ChatRequest -> str`` suitable for
``Gateway(config, responder=...)`` or for ``ProviderConfig.responder`` as
``"elicitkit.mocks:<factory>"``.  Randomised mocks seed themselves from the
request's cache key, so a given request always receives the same reply.
"""
from __future__ import annotations

import ast
import hashlib
import json
import re
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigurationError
from .gateway import ChatRequest
from .memorisation import SYSTEM_PROMPT as AUTOCOMPLETE_SYSTEM

Handler = Callable[[ChatRequest], str]
_NAME_LIST = re.compile(r"\[(?:'[^'\n]*'(?:,\s*)?)+\]")
_ROW = re.compile(r"features:\s*\[([-+0-9.eE,\s]*)\]")


def _first_user(request: ChatRequest) -> str:
    return next((c for r, c in request.messages if r == "user"), "")


def _system(request: ChatRequest) -> str:
    return next((c for r, c in request.messages if r == "system"), "")


def request_rng(request: ChatRequest) -> np.random.Generator:
    digest = hashlib.sha256(request.key().encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def feature_names_in(text: str) -> list[str]:
    match = _NAME_LIST.search(text)
    return list(ast.literal_eval(match.group(0))) if match else []


def parse_prediction_request(text: str) -> tuple[np.ndarray, tuple[np.ndarray, np.ndarray] | None]:
    """Recover query rows and demonstrations from a prediction prompt."""
    queries, demo_x, demo_y = [], [], []
    for line in text.splitlines():
        row = _ROW.search(line)
        if not row:
            continue
        values = [float(v) for v in row.group(1).split(",") if v.strip()]
        if "->" in line:
            demo_x.append(values)
            demo_y.append(float(line.rsplit(":", 1)[-1]))
        else:
            queries.append(values)
    demos = (np.array(demo_x), np.array(demo_y)) if demo_x else None
    return np.array(queries), demos


def _format(values) -> str:
    return "\n".join(repr(float(v)) for v in values)


class ScriptedLLM:
    """Routes a request to the handler for its kind of prompt."""

    def __init__(self, elicit: Handler | None = None, predict: Handler | None = None,
                 paraphrase: Handler | None = None, complete: Handler | None = None):
        self.handlers = {
            "elicit": elicit or gaussian_elicitor(),
            "predict": predict,
            "paraphrase": paraphrase or tagging_paraphraser(),
            "complete": complete or guessing_completer(),
        }

    @staticmethod
    def kind(request: ChatRequest) -> str:
        user = _first_user(request)
        if _system(request) == AUTOCOMPLETE_SYSTEM:
            return "complete"
        if user.startswith("Rephrase the following text"):
            return "paraphrase"
        if _ROW.search(user):
            return "predict"
        return "elicit"

    def __call__(self, request: ChatRequest) -> str:
        kind = self.kind(request)
        handler = self.handlers[kind]
        if handler is None:
            raise ConfigurationError(f"this mock does not answer {kind} requests")
        return handler(request)


# -- elicitation -------------------------------------------------------------

def gaussian_elicitor(means: Sequence[float] | float = 0.0, stds: Sequence[float] | float = 1.0) -> Handler:
    """Reply with the same per-feature (mean, std) for every description."""

    def handler(request: ChatRequest) -> str:
        names = feature_names_in(request.text)
        mu = np.broadcast_to(np.asarray(means, float), (len(names),)) if np.ndim(means) == 0 else means
        sd = np.broadcast_to(np.asarray(stds, float), (len(names),)) if np.ndim(stds) == 0 else stds
        return json.dumps({n: {"mean": float(m), "std": float(s)} for n, m, s in zip(names, mu, sd)})

    return handler


# -- paraphrasing ------------------------------------------------------------

def _paraphrase_parts(request: ChatRequest) -> tuple[int, str]:
    user = _first_user(request)
    index = re.search(r"rephrasing number (\d+)", user)
    text = user.split("Text:\n", 1)[-1]
    return int(index.group(1)) if index else 0, text


def tagging_paraphraser() -> Handler:
    def handler(request: ChatRequest) -> str:
        index, text = _paraphrase_parts(request)
        return f"(Variant {index}) {text}"

    return handler


def defective_paraphraser(failures: int = 1) -> Handler:
    """Drops every placeholder on the first ``failures`` attempts."""

    def handler(request: ChatRequest) -> str:
        index, text = _paraphrase_parts(request)
        attempt = sum(1 for r, _ in request.messages if r == "user") - 1
        if attempt < failures:
            return re.sub(r"\{[A-Za-z_]+\}", "it", text)
        return f"(Variant {index}) {text}"

    return handler


# -- prediction --------------------------------------------------------------

def linear_predictor(weights: Sequence[float], bias: float = 0.0, model_class: str = "linear") -> Handler:
    """Noiseless planted predictor: X w + b, or its sigmoid for a logistic class."""
    w = np.asarray(weights, float)

    def handler(request: ChatRequest) -> str:
        X, _ = parse_prediction_request(_first_user(request))
        z = X @ w + bias
        return _format(1 / (1 + np.exp(-z)) if model_class == "logistic" else z)

    return handler


def constant_predictor(value: float = 0.0) -> Handler:
    def handler(request: ChatRequest) -> str:
        X, _ = parse_prediction_request(_first_user(request))
        return _format(np.full(len(X), value))

    return handler


def bayesian_predictor(
    means: Sequence[float],
    stds: Sequence[float],
    noise_sd: float = 1.0,
    bias_mean: float = 0.0,
    bias_std: float = 1.0,
    ignore_demos: bool = False,
) -> Handler:
    """Predict with one parameter draw from the exact Gaussian posterior.

    Without demonstrations (or with ``ignore_demos``) the draw comes from the
    prior N(means, stds) x N(bias_mean, bias_std), so the mock "replays" the
    prior it would report when elicited.
    """
    m0 = np.append(np.asarray(means, float), bias_mean)
    s0 = np.append(np.asarray(stds, float), bias_std)

    def handler(request: ChatRequest) -> str:
        X, demos = parse_prediction_request(_first_user(request))
        rng = request_rng(request)
        mean, cov = m0, np.diag(s0**2)
        if demos is not None and not ignore_demos:
            A = np.hstack([demos[0], np.ones((len(demos[1]), 1))])
            precision = np.diag(1 / s0**2) + A.T @ A / noise_sd**2
            cov = np.linalg.inv(precision)
            mean = cov @ (m0 / s0**2 + A.T @ demos[1] / noise_sd**2)
        phi = rng.multivariate_normal(mean, cov)
        return _format(X @ phi[:-1] + phi[-1])

    return handler


# -- autocomplete ------------------------------------------------------------

def _joined(text: str) -> str:
    return "\n".join(ln for ln in text.splitlines() if ln.strip())


def echo_completer(text: str = "", path: str | None = None, max_chars: int = 500) -> Handler:
    """Continues the prompt verbatim from the true dataset text."""
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    full = _joined(text)

    def handler(request: ChatRequest) -> str:
        prompt = _first_user(request)
        at = full.find(prompt)
        return full[at + len(prompt):][:max_chars] if at >= 0 else ""

    return handler


def guessing_completer(rows: int = 3) -> Handler:
    """Knows nothing about the data: continues with random rows of the right width."""

    def handler(request: ChatRequest) -> str:
        prompt = _first_user(request)
        width = max(len(ln.split(",")) for ln in prompt.splitlines() if ln.strip())
        rng = request_rng(request)
        lines = [",".join(repr(round(float(v), 6)) for v in rng.standard_normal(width)) for _ in range(rows)]
        lead = "" if prompt.endswith("\n") else "\n"
        return lead + "\n".join(lines)

    return handler


def garbage_completer(char: str = "#", length: int = 40) -> Handler:
    def handler(request: ChatRequest) -> str:
        return char * length

    return handler


# -- ready-made scripted LLMs ------------------------------------------------

def synthetic_sharp(means: Sequence[float] = (2.0, -1.0, 1.0), std: float = 0.1) -> ScriptedLLM:
    """Confident and correct about the synthetic task; also predicts with those weights."""
    return ScriptedLLM(
        elicit=gaussian_elicitor(list(means), [std] * len(means)),
        predict=bayesian_predictor(list(means), [std] * len(means)),
    )


def uninformed(mean: float = 0.0, std: float = 1.0) -> ScriptedLLM:
    """Elicits N(mean, std) everywhere and predicts a constant."""
    return ScriptedLLM(elicit=gaussian_elicitor(mean, std), predict=constant_predictor(0.0))


def prior_replay(means: Sequence[float], stds: Sequence[float], noise_sd: float = 1.0,
                 ignore_demos: bool = False) -> ScriptedLLM:
    """Elicits a Gaussian prior and predicts by (conjugate) Bayesian updating of it."""
    return ScriptedLLM(
        elicit=gaussian_elicitor(list(means), list(stds)),
        predict=bayesian_predictor(means, stds, noise_sd, ignore_demos=ignore_demos),
    )


def planted(weights: Sequence[float], bias: float = 0.0, model_class: str = "linear") -> ScriptedLLM:
    return ScriptedLLM(predict=linear_predictor(weights, bias, model_class))


def echo(text: str = "", path: str | None = None, max_chars: int = 500) -> ScriptedLLM:
    return ScriptedLLM(complete=echo_completer(text, path, max_chars))


def garbage(char: str = "#", length: int = 40) -> ScriptedLLM:
    return ScriptedLLM(complete=garbage_completer(char, length))
