"""Header- and row-completion tests for dataset memorisation."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np

from .gateway import Gateway, strip_thinking
from .seeding import derive_rng

SYSTEM_PROMPT = (
    "You are an autocomplete engine for tabular datasets stored as CSV text. "
    "Continue the text you are given exactly where it stops. Output only the continuation."
)


def levenshtein(s1: str, s2: str) -> int:
    """Edit distance with unit-cost insertions, deletions and substitutions."""
    if len(s1) < len(s2):
        s1, s2 = s2, s1
    if not s2:
        return len(s1)
    target = np.frombuffer(s2.encode("utf-32-le"), dtype=np.uint32)
    offsets = np.arange(len(s2) + 1)
    prev = offsets.copy()
    for i, ch in enumerate(s1, start=1):
        cur = np.empty_like(prev)
        cur[0] = i
        # substitution / match and deletion, then resolve insertions as a running minimum
        cur[1:] = np.minimum(prev[:-1] + (target != ord(ch)), prev[1:] + 1)
        cur = np.minimum.accumulate(cur - offsets) + offsets
        prev = cur
    return int(prev[-1])


def normalized_levenshtein(s1: str, s2: str, denominator: Literal["max", "min"] = "max") -> float:
    if not s1 and not s2:
        return 0.0
    size = max(len(s1), len(s2)) if denominator == "max" else min(len(s1), len(s2))
    if size == 0:
        return 1.0
    return levenshtein(s1, s2) / size


@dataclass
class MemorisationResult:
    test_kind: Literal["header", "row"]
    trials: list[float]
    dataset: str = "dataset"
    transcripts: list[dict] = field(default_factory=list, repr=False)
    denominator: str = "max"

    def __post_init__(self):
        # the min-length variant is unbounded above; only the default is range-checked
        if self.denominator == "max" and any(not 0.0 <= t <= 1.0 for t in self.trials):
            raise ValueError("normalised distances must lie in [0, 1]")

    @property
    def mean(self) -> float:
        return float(np.mean(self.trials)) if self.trials else float("nan")

    @property
    def std(self) -> float:
        return float(np.std(self.trials)) if self.trials else float("nan")

    def to_json(self) -> dict:
        return {"dataset": self.dataset, "test_kind": self.test_kind, "trials": self.trials,
                "mean": self.mean, "std": self.std}


def _lines(dataset_text: str | Sequence[str]) -> list[str]:
    if isinstance(dataset_text, str):
        return [ln for ln in dataset_text.splitlines() if ln.strip()]
    return [str(ln) for ln in dataset_text]


def _score(completion: str, truth: str, denominator: str) -> float:
    if not completion:
        return 1.0
    return normalized_levenshtein(completion, truth[: len(completion)], denominator)


def header_test(
    llm: Gateway,
    dataset_text: str,
    n_seed_rows: int = 5,
    max_tokens: int = 500,
    dataset: str = "dataset",
    denominator: Literal["max", "min"] = "max",
) -> MemorisationResult:
    """Header plus first rows, the last cut at its midpoint; score the continuation."""
    lines = _lines(dataset_text)
    if len(lines) < n_seed_rows + 1:
        raise ValueError(f"need a header and at least {n_seed_rows} rows")
    full = "\n".join(lines)
    shown = lines[: n_seed_rows + 1]
    last = shown[-1]
    cut = len(last) // 2
    prompt = "\n".join(shown[:-1] + [last[:cut]])
    truth = full[len(prompt):]
    request = llm.request(SYSTEM_PROMPT, prompt, max_tokens=max_tokens)
    completion = strip_thinking(llm.complete(request))
    score = _score(completion, truth, denominator)
    return MemorisationResult(
        "header", [score], dataset,
        [{"prompt": prompt, "completion": completion, "truth": truth[: len(completion)]}], denominator,
    )


def row_test(
    llm: Gateway,
    dataset_text: str | Sequence[str],
    n_trials: int = 25,
    context_rows: int = 10,
    seed: int = 0,
    has_header: bool = True,
    dataset: str = "dataset",
    denominator: Literal["max", "min"] = "max",
) -> MemorisationResult:
    """Show ``context_rows`` consecutive rows, score the completion of the next one."""
    rows = _lines(dataset_text)[1 if has_header else 0:]
    if len(rows) < context_rows + 1:
        raise ValueError(f"need at least {context_rows + 1} data rows")
    rng = derive_rng(seed, 7)
    n_starts = len(rows) - context_rows
    starts = rng.choice(n_starts, size=n_trials, replace=n_trials > n_starts)
    trials, transcripts = [], []
    for s in starts:
        context = rows[s : s + context_rows]
        truth = rows[s + context_rows]
        prompt = "\n".join(context) + "\n"
        completion = strip_thinking(llm.complete(llm.request(SYSTEM_PROMPT, prompt)))
        first = next((ln for ln in completion.splitlines() if ln.strip()), "").strip()
        score = normalized_levenshtein(first, truth, denominator) if first else 1.0
        trials.append(score)
        transcripts.append({"prompt": prompt, "completion": completion, "truth": truth})
    return MemorisationResult("row", trials, dataset, transcripts, denominator)
