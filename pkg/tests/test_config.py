"""Tests for config.py: INI loading, value coercion, validation, seeds and the resolved dump."""

from __future__ import annotations

import pytest

import config
from config import REGIME_MIXES, RESOLVED_NAME, ExperimentConfig
from utils import UsageError


# ---------------------------------------------------------------------------
# Loading
# ---------------------------------------------------------------------------

class TestFromText:
    def test_defaults_without_file(self):
        cfg = ExperimentConfig.load(None)
        assert cfg.embedding.kind == "ivector"
        assert cfg.experiment.seed is None
        assert cfg.enhancer.hidden_sizes == (1500, 1500, 1500)

    def test_coerces_types(self):
        cfg = ExperimentConfig.from_text(
            "[enhancer]\ncontext = 3\nlearning_rate = 0.05\ntelephone = no\nhidden_sizes = 16, 8\n"
            "[experiment]\nseed = 0x10\n"
        )
        assert cfg.enhancer.context == 3
        assert cfg.enhancer.learning_rate == 0.05
        assert cfg.enhancer.telephone is False
        assert cfg.enhancer.hidden_sizes == (16, 8)
        assert cfg.experiment.seed == 16

    def test_string_tuples(self):
        cfg = ExperimentConfig.from_text("[augment]\nreplica_recipe = reverb, music\n")
        assert cfg.augment.replica_recipe == ("reverb", "music")

    def test_empty_seed_stays_unset(self):
        assert ExperimentConfig.from_text("[experiment]\nseed =\n").experiment.seed is None

    def test_unknown_section(self):
        with pytest.raises(UsageError, match=r"unknown config section \[model\]"):
            ExperimentConfig.from_text("[model]\nx = 1\n")

    def test_unknown_key(self):
        with pytest.raises(UsageError, match="unknown key 'dims'"):
            ExperimentConfig.from_text("[plda]\ndims = 3\n")

    def test_bad_value_names_the_key(self):
        with pytest.raises(UsageError, match=r"\[plda\] rank: invalid value 'many'"):
            ExperimentConfig.from_text("[plda]\nrank = many\n")

    def test_bad_boolean(self):
        with pytest.raises(UsageError, match="telephone"):
            ExperimentConfig.from_text("[enhancer]\ntelephone = sometimes\n")

    def test_seed_out_of_range(self):
        with pytest.raises(UsageError, match="seed"):
            ExperimentConfig.from_text("[experiment]\nseed = -1\n")

    def test_syntax_error(self):
        with pytest.raises(UsageError, match="cannot parse"):
            ExperimentConfig.from_text("no section header\n")


class TestLoad:
    def test_relative_paths_resolve_against_config_dir(self, tmp_path):
        path = tmp_path / "exp.ini"
        path.write_text("[paths]\ncorpus = data/corpus.txt\nworkdir = /abs/work\n")
        cfg = ExperimentConfig.load(path)
        assert cfg.paths.corpus == str((tmp_path / "data" / "corpus.txt").resolve())
        assert cfg.paths.workdir == "/abs/work"
        assert cfg.source == path

    def test_missing_file(self, tmp_path):
        with pytest.raises(UsageError, match="config file not found"):
            ExperimentConfig.load(tmp_path / "nope.ini")


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------

class TestValidate:
    def test_defaults_are_valid(self):
        ExperimentConfig().validate()

    @pytest.mark.parametrize("text, where", [
        ("[embedding]\nkind = dvector\n", "[embedding] kind"),
        ("[embedding]\nextractor_data = noisy\n", "[embedding] extractor_data"),
        ("[experiment]\nenhancement = always\n", "[experiment] enhancement"),
        ("[experiment]\nplda_regime = N+RR\n", "[experiment] plda_regime"),
        ("[experiment]\nnum_speakers = 3\n", "[experiment] num_speakers"),
        ("[enhancer]\nclean_fraction = 1.5\n", "[enhancer] clean_fraction"),
        ("[enhancer]\nsnr_min = 20\nsnr_max = 10\n", "[enhancer] snr_min"),
        ("[xvector]\nframe_sizes = 8, 8\n", "[xvector] frame_sizes"),
        ("[xvector]\nchunk_min = 500\nchunk_max = 400\n", "[xvector] chunk_min"),
        ("[evaluation]\nenroll_sessions = 10\n", "[evaluation] enroll_sessions"),
        ("[evaluation]\noperating_points = 1.5:1:1\n", "[evaluation] operating_points"),
    ])
    def test_rejects(self, text, where):
        cfg = ExperimentConfig.from_text(text)
        with pytest.raises(UsageError) as exc:
            cfg.validate()
        assert str(exc.value).startswith(where)

    @pytest.mark.parametrize("source", config.EXTRACTOR_DATA)
    def test_extractor_data_choices(self, source):
        cfg = ExperimentConfig.from_text(f"[embedding]\nextractor_data = {source}\n").validate()
        assert cfg.embedding.extractor_data == source

    def test_zero_learning_rate_allowed(self):
        ExperimentConfig.from_text("[enhancer]\nlearning_rate = 0\n").validate()

    def test_missing_path(self, tmp_path):
        cfg = ExperimentConfig.from_text(f"[paths]\nnoises = {tmp_path / 'absent'}\n")
        with pytest.raises(UsageError, match="path does not exist"):
            cfg.validate()
        cfg.validate(check_paths=False)

    def test_operating_points_parse(self):
        cfg = ExperimentConfig.from_text("[evaluation]\noperating_points = 0.01, 0.005:10:1\n")
        assert cfg.evaluation.points() == [(0.01, 1.0, 1.0), (0.005, 10.0, 1.0)]

    def test_operating_points_unparseable(self):
        cfg = ExperimentConfig.from_text("[evaluation]\noperating_points = low\n")
        with pytest.raises(UsageError, match="cannot parse 'low'"):
            cfg.evaluation.points()


class TestSeedAndWorkdir:
    def test_require_seed(self):
        with pytest.raises(UsageError, match="seed is required"):
            ExperimentConfig().require_seed()
        assert ExperimentConfig.from_text("[experiment]\nseed = 7\n").require_seed() == 7

    def test_workdir_falls_back_to_env_default(self, monkeypatch, tmp_path):
        monkeypatch.setattr(config, "DEFAULT_WORKDIR", tmp_path / "env-work")
        assert ExperimentConfig().workdir() == tmp_path / "env-work"

    def test_workdir_from_config(self, tmp_path):
        cfg = ExperimentConfig.from_text(f"[paths]\nworkdir = {tmp_path}\n")
        assert cfg.workdir() == tmp_path


# ---------------------------------------------------------------------------
# Dumping
# ---------------------------------------------------------------------------

class TestDump:
    def test_dump_round_trips_every_value(self, tmp_path):
        cfg = ExperimentConfig.from_text(
            "[experiment]\nseed = 42\nplda_regime = RR+N\n[enhancer]\nhidden_sizes = 32, 16\ntelephone = false\n"
        )
        path = cfg.dump(tmp_path)
        assert path == tmp_path / RESOLVED_NAME
        back = ExperimentConfig.load(path)
        assert back.experiment.seed == 42
        assert back.experiment.plda_regime == "RR+N"
        assert back.enhancer.hidden_sizes == (32, 16)
        assert back.enhancer.telephone is False
        assert back.xvector == cfg.xvector

    def test_unset_seed_renders_empty(self):
        text = ExperimentConfig().to_text()
        assert "seed = \n" in text
        assert "[evaluation]" in text


class TestRegimeMixes:
    def test_every_regime_has_a_mix(self):
        assert set(REGIME_MIXES) == set(config.PLDA_REGIMES)
        assert REGIME_MIXES["clean"] == {}
        assert set(REGIME_MIXES["RR"]) == {"reverb"}

    def test_extractor_data_covers_every_augmented_regime(self):
        assert set(config.EXTRACTOR_DATA) == set(config.PLDA_REGIMES) | {"replicas"}


class TestEnvDefaults:
    def test_log_level_is_a_level_name(self):
        assert config.LOG_LEVEL.upper() in {"DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"}
