from __future__ import annotations

import numpy as np
import pytest

from elicitkit.gateway import Gateway, ProviderConfig

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")


@pytest.fixture
def gateway():
    """Build an in-memory mock gateway around a responder."""

    def make(responder=None, **config):
        return Gateway(ProviderConfig(kind="mock", **config), responder=responder)

    return make


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# small, fast defaults for harness runs; tests override sections as needed
BASE_CONFIG = {
    "experiment": {"name": "t", "seed": 0},
    "dataset": {"kind": "synthetic", "n": 60},
    "gateway": {"kind": "mock", "responder": "elicitkit.mocks:synthetic_sharp"},
    "prompts": {"n_system": 2, "n_user": 2},
    "elicitation": {"k": 4},
    "bayes": {"n_folds": 2, "train_sizes": [5, 10], "chains": 1, "samples_per_chain": 150, "warmup": 200,
              "target_accept": 0.95},
    "probe": {"k": 4, "n_demos": 25, "mc_chains": 2, "mc_samples_per_chain": 300, "mc_adaptation": 300,
              "mc_noise_sd": 1.0, "energy_n": 2000},
    "selection": {"k": 4, "n_splits": 5, "prior_samples": 200, "compare": ["icl", "uninformative"]},
    "memorisation": {"n_trials": 5},
}


def merged(base: dict, override: dict) -> dict:
    out = {k: dict(v) if isinstance(v, dict) else v for k, v in base.items()}
    for section, values in override.items():
        out[section] = {**out.get(section, {}), **values}
    return out


@pytest.fixture
def make_config(tmp_path):
    """Write a YAML config (base merged with overrides) and return its path."""
    import yaml

    def make(name="run.yaml", **sections):
        data = merged(BASE_CONFIG, sections)
        data["experiment"].setdefault("output_dir", str(tmp_path / "runs"))
        path = tmp_path / name
        path.write_text(yaml.safe_dump(data), encoding="utf-8")
        return path

    return make
