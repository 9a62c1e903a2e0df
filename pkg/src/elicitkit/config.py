"""Experiment configuration: one YAML file, one section per subsystem.

Unknown keys anywhere are rejected so that a typo never silently changes an
experiment.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import ConfigurationError
from .gateway import ProviderConfig

# provider settings that change how replies are obtained but not what they are
_TRANSPORT_FIELDS = {
    "kind", "endpoint", "credential", "requests_per_minute", "retry_limit", "timeout", "cache_dir",
}


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ExperimentSection(_Section):
    name: str = "experiment"
    seed: int = 0
    output_dir: str = "runs"
    workers: int = Field(1, ge=1)


class DatasetSection(_Section):
    kind: Literal["synthetic", "csv"] = "synthetic"
    # synthetic
    n: int = Field(200, ge=2)
    noise_sd: float = Field(0.05, ge=0)
    # csv
    path: str | None = None
    target: str | None = None
    task_kind: Literal["classification", "regression"] = "regression"
    categorical: list[str] = Field(default_factory=list)
    group: str | None = None
    features: list[str] | None = None
    name: str | None = None
    # shared
    normalize: bool = True
    raw_text: str | None = None  # ordered raw file for memorisation tests

    @model_validator(mode="after")
    def _check(self):
        if self.kind == "csv" and not (self.path and self.target):
            raise ValueError("csv datasets need path and target")
        return self

    @property
    def dataset_id(self) -> str:
        if self.name:
            return self.name
        return "synthetic" if self.kind == "synthetic" else Path(self.path).stem


class PromptSection(_Section):
    builtin: str = "synthetic"  # asset folder used when no directories are given
    system_dir: str | None = None
    user_dir: str | None = None
    icl_builtin: str = "synthetic_icl"
    icl_system_dir: str | None = None
    icl_user_dir: str | None = None
    n_system: int = Field(10, ge=1)  # variants per role after paraphrasing
    n_user: int = Field(10, ge=1)
    paraphrase_retries: int = Field(3, ge=0)
    target_name: str | None = None
    expert_info: str | None = None
    synthetic_preset: str | None = None


class ElicitationSection(_Section):
    k: int = Field(100, ge=1)
    k_sweep: list[int] = Field(default_factory=list)
    max_retries: int = Field(3, ge=0)
    std_cap: float = Field(100.0, gt=0)
    table_path: str | None = None  # reuse a saved table instead of eliciting


class BayesSection(_Section):
    n_folds: int = Field(10, ge=1)
    test_fraction: float = Field(0.5, gt=0, lt=1)
    split: Literal["plain", "stratified", "grouped"] = "plain"
    train_sizes: list[int] = Field(default_factory=lambda: [5, 10, 20, 30, 40, 50])
    prior_sources: list[Literal["elicited", "uninformative", "uninformative_mixture"]] = Field(
        default_factory=lambda: ["elicited", "uninformative"]
    )
    mixture_k: int = Field(100, ge=1)
    chains: int = Field(5, ge=1)
    samples_per_chain: int = Field(5000, ge=1)
    warmup: int = Field(1000, ge=0)
    max_tree_depth: int = Field(10, ge=1)
    target_accept: float = Field(0.8, gt=0, lt=1)
    max_divergence_rate: float = Field(0.1, ge=0, le=1)


class ProbeSection(_Section):
    k: int = Field(100, ge=1)
    n_points: int = Field(25, ge=2)
    repetitions: int = Field(5, ge=1)
    input_low: float = -5.0
    input_high: float = 5.0
    model_class: Literal["linear", "logistic"] | None = None  # default follows the task kind
    n_demos: int = Field(25, ge=0)  # 0 skips the posterior probe
    bandwidth_factor: float = Field(0.25, gt=0)
    mc_chains: int = Field(100, ge=1)
    mc_samples_per_chain: int = Field(10000, ge=1)
    mc_adaptation: int = Field(1000, ge=0)
    mc_noise_sd: float | None = Field(None, gt=0)  # fixed noise; None samples it
    energy_n: int = Field(10000, ge=1)


class SelectionSection(_Section):
    n_splits: int = Field(5, ge=1)
    subset_size: int = Field(25, ge=1)
    prior_samples: int = Field(500, ge=1)
    k: int = Field(100, ge=1)  # ICL descriptions
    compare: list[Literal["icl", "uninformative"]] = Field(default_factory=lambda: ["icl"])
    noise: Literal["unit", "sampled"] = "unit"


class MemorisationSection(_Section):
    n_seed_rows: int = Field(5, ge=1)
    max_tokens: int = Field(500, ge=1)
    n_trials: int = Field(25, ge=1)
    context_rows: int = Field(10, ge=1)
    has_header: bool = True
    denominator: Literal["max", "min"] = "max"


class ExperimentConfig(_Section):
    experiment: ExperimentSection = Field(default_factory=ExperimentSection)
    dataset: DatasetSection = Field(default_factory=DatasetSection)
    gateway: ProviderConfig = Field(default_factory=ProviderConfig)
    prompts: PromptSection = Field(default_factory=PromptSection)
    elicitation: ElicitationSection = Field(default_factory=ElicitationSection)
    bayes: BayesSection = Field(default_factory=BayesSection)
    probe: ProbeSection = Field(default_factory=ProbeSection)
    selection: SelectionSection = Field(default_factory=SelectionSection)
    memorisation: MemorisationSection = Field(default_factory=MemorisationSection)

    @model_validator(mode="after")
    def _check(self):
        if any(m < 1 for m in self.bayes.train_sizes):
            raise ValueError("training sizes must be positive")
        if self.elicitation.k_sweep and max(self.elicitation.k_sweep) > self.elicitation.k:
            raise ValueError("k_sweep values cannot exceed elicitation.k")
        for label, path in self.referenced_paths():
            if not Path(path).exists():
                raise ValueError(f"{label} does not exist: {path}")
        return self

    def referenced_paths(self):
        d, p = self.dataset, self.prompts
        for label, path in (
            ("dataset.path", d.path), ("dataset.raw_text", d.raw_text),
            ("prompts.system_dir", p.system_dir), ("prompts.user_dir", p.user_dir),
            ("prompts.icl_system_dir", p.icl_system_dir), ("prompts.icl_user_dir", p.icl_user_dir),
            ("elicitation.table_path", self.elicitation.table_path),
        ):
            if path is not None:
                yield label, path

    def config_hash(self) -> str:
        """Hash of everything that determines results; transport and output location excluded."""
        data = self.model_dump(mode="json")
        data["experiment"].pop("output_dir")
        data["experiment"].pop("workers")
        for key in _TRANSPORT_FIELDS:
            data["gateway"].pop(key)
        blob = json.dumps(data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def with_overrides(self, seed: int | None = None, provider: str | None = None,
                       output_dir: str | None = None) -> "ExperimentConfig":
        data = self.model_dump()
        if seed is not None:
            data["experiment"]["seed"] = seed
        if provider is not None:
            data["gateway"]["kind"] = provider
        if output_dir is not None:
            data["experiment"]["output_dir"] = output_dir
        return validate_config(data)


def _resolve(data: dict, base: Path) -> dict:
    """Make relative paths in a loaded file relative to that file."""
    keys = {
        "dataset": ("path", "raw_text"),
        "prompts": ("system_dir", "user_dir", "icl_system_dir", "icl_user_dir"),
        "elicitation": ("table_path",),
        "gateway": ("cache_dir",),
    }
    for section, fields in keys.items():
        block = data.get(section)
        if not isinstance(block, dict):
            continue
        for f in fields:
            value = block.get(f)
            if isinstance(value, str) and not Path(value).is_absolute():
                block[f] = str(base / value)
    return data


def validate_config(data: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigurationError(str(exc)) from None


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigurationError("config must be a mapping of sections")
    return validate_config(_resolve(data, path.parent.resolve()))
