import json

import pytest
import yaml
from click.testing import CliRunner

from elicitkit.cli import main
from elicitkit.config import ExperimentConfig, load_config, validate_config
from elicitkit.errors import ConfigurationError


class TestConfig:
    def test_defaults_mirror_reference_settings(self):
        cfg = ExperimentConfig()
        assert (cfg.bayes.chains, cfg.bayes.samples_per_chain, cfg.bayes.warmup) == (5, 5000, 1000)
        assert (cfg.probe.n_points, cfg.probe.repetitions, cfg.probe.bandwidth_factor) == (25, 5, 0.25)
        assert (cfg.probe.mc_chains, cfg.probe.mc_samples_per_chain, cfg.probe.mc_adaptation) == (100, 10000, 1000)
        assert (cfg.selection.n_splits, cfg.selection.subset_size, cfg.selection.prior_samples) == (5, 25, 500)
        assert (cfg.elicitation.k, cfg.memorisation.n_trials, cfg.memorisation.context_rows) == (100, 25, 10)

    @pytest.mark.parametrize("data", [
        {"bayes": {"chain": 3}},
        {"surprise": {}},
        {"gateway": {"kind": "mock", "colour": "red"}},
    ])
    def test_unknown_keys_rejected(self, data):
        with pytest.raises(ConfigurationError):
            validate_config(data)

    def test_missing_paths_rejected(self, tmp_path):
        with pytest.raises(ConfigurationError, match="does not exist"):
            validate_config({"dataset": {"kind": "csv", "path": str(tmp_path / "nope.csv"), "target": "y"}})

    def test_k_sweep_bounded(self):
        with pytest.raises(ConfigurationError):
            validate_config({"elicitation": {"k": 16, "k_sweep": [16, 49]}})

    def test_relative_paths_resolved_against_file(self, tmp_path):
        (tmp_path / "data.csv").write_text("a,y\n1,2\n")
        (tmp_path / "cfg.yaml").write_text(yaml.safe_dump(
            {"dataset": {"kind": "csv", "path": "data.csv", "target": "y"},
             "gateway": {"kind": "mock", "cache_dir": "cache"}}))
        cfg = load_config(tmp_path / "cfg.yaml")
        assert cfg.dataset.path == str(tmp_path / "data.csv")
        assert cfg.gateway.cache_dir == str(tmp_path / "cache")

    def test_unreadable_file(self, tmp_path):
        (tmp_path / "bad.yaml").write_text("a: [unclosed")
        with pytest.raises(ConfigurationError):
            load_config(tmp_path / "bad.yaml")

    def test_hash_stability(self, tmp_path):
        cfg = ExperimentConfig()
        assert cfg.config_hash() == ExperimentConfig().config_hash()
        assert cfg.with_overrides(output_dir=str(tmp_path)).config_hash() == cfg.config_hash()
        replay = validate_config({"gateway": {"kind": "replay", "cache_dir": str(tmp_path)}})
        mock = validate_config({"gateway": {"kind": "mock", "cache_dir": str(tmp_path / "x")}})
        assert replay.config_hash() == mock.config_hash()
        assert cfg.with_overrides(seed=1).config_hash() != cfg.config_hash()
        assert validate_config({"bayes": {"chains": 4}}).config_hash() != cfg.config_hash()

    def test_shipped_config_loads(self):
        from pathlib import Path
        cfg = load_config(Path(__file__).parents[1] / "configs" / "synthetic_mock.yaml")
        assert cfg.experiment.name == "synthetic_mock" and cfg.gateway.kind == "mock"


class TestCli:
    def _invoke(self, *args):
        return CliRunner().invoke(main, list(args))

    def test_help_lists_commands(self):
        out = self._invoke("--help").output
        for name in ("elicit", "fit", "probe", "select", "memtest", "replay"):
            assert name in out

    def test_success_exit_zero(self, make_config, tmp_path):
        res = self._invoke("elicit", "-c", str(make_config()))
        assert res.exit_code == 0, res.output
        out = tmp_path / "runs" / "t" / "elicit"
        assert (out / "prior_table.csv").exists() and json.loads((out / "metadata.json").read_text())["n_failures"] == 0

    def test_overrides(self, make_config, tmp_path):
        res = self._invoke("memtest", "-c", str(make_config()), "--seed", "7", "--output-dir", str(tmp_path / "o"))
        assert res.exit_code == 0, res.output
        assert (tmp_path / "o" / "t" / "memtest" / "memorisation.csv").exists()

    def test_failed_cell_exit_one(self, make_config):
        # 60 rows split in half leave 30 training rows; size 40 cannot be drawn
        path = make_config(bayes={"train_sizes": [40], "prior_sources": ["uninformative"]})
        res = self._invoke("fit", "-c", str(path))
        assert res.exit_code == 1 and "2 failures" in res.output

    def test_config_error_exit_two(self, tmp_path):
        path = tmp_path / "bad.yaml"
        path.write_text("bayes: {chain: 3}\n")
        res = self._invoke("fit", "-c", str(path))
        assert res.exit_code == 2 and "error" in res.output

    def test_cold_replay_exit_two(self, make_config, tmp_path):
        path = make_config(gateway={"cache_dir": str(tmp_path / "empty")})
        res = self._invoke("replay", "elicit", "-c", str(path))
        assert res.exit_code == 2 and "cache" in res.output.lower()

    def test_replay_rejects_other_provider(self, make_config):
        res = self._invoke("replay", "elicit", "-c", str(make_config()), "--provider", "mock")
        assert res.exit_code == 2
