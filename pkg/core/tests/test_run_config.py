"""
Tests for RunConfig parsing, flag precedence and seed derivation.
"""

import pytest
from django.conf import settings

from core.exceptions import ConfigError
from core.network import DwanSpec
from core.run_config import RunConfig
from core.utils import derive_seed

PRESETS = settings.BASE_DIR / "presets"


def write_config(tmp_path, text):
    path = tmp_path / "run.cfg"
    path.write_text(text)
    return path


class TestConfigFile:

    def test_standard_preset(self):
        config = RunConfig.from_file(PRESETS / "standard.cfg")
        assert config.sigma == 120.0
        assert config.outlier_rate == 0.0
        assert config.split == (20, 5, 10)
        assert config.global_dilations == (2, 4, 8, 16)
        assert config.dwan_spec() == DwanSpec()
        assert config.method_name == "dwan-lfn-l1"
        assert config.intensity_scale == 1.0 / 128.0
        assert config.init_scheme == "residual"
        assert (config.batch_size, config.epochs) == (16, 150)

    def test_outlier_preset(self):
        config = RunConfig.from_file(PRESETS / "outliers.cfg")
        noise = config.noise_model()
        assert noise.outlier_rate == 0.1
        assert noise.outlier_scale == 10.0

    def test_comments_quotes_and_booleans(self, tmp_path):
        path = write_config(tmp_path, "# comment\n\nloss = 'l2'\nshuffle = false\nnoise_seed = 17\n")
        config = RunConfig.from_file(path)
        assert config.loss == "l2"
        assert config.shuffle is False
        assert config.noise_seed == 17

    def test_unknown_key_is_rejected(self, tmp_path):
        with pytest.raises(ConfigError, match="unknown config keys"):
            RunConfig.from_file(write_config(tmp_path, "sigmaa = 3\n"))

    @pytest.mark.parametrize("text", [
        "epochs = many\n",
        "split = 20,five,10\n",
        "shuffle = sometimes\n",
        "loss = huber\n",
        "mode = supervised\n",
        "split = 20,5\n",
        "init_scheme = xavier\n",
        "intensity_scale = 0\n",
        "intensity_scale = tiny\n",
    ])
    def test_bad_values(self, tmp_path, text):
        with pytest.raises(ConfigError):
            RunConfig.from_file(write_config(tmp_path, text))

    def test_line_without_assignment(self, tmp_path):
        with pytest.raises(ConfigError, match=":2:"):
            RunConfig.from_file(write_config(tmp_path, "seed = 1\nepochs\n"))

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            RunConfig.from_file(tmp_path / "absent.cfg")


class TestOverrides:

    def test_flags_win_over_file(self, tmp_path):
        path = write_config(tmp_path, "sigma = 120\nloss = l2\n")
        config = RunConfig.load(path, {"sigma": "60", "loss": None, "split": "1,1,1"})
        assert config.sigma == 60.0
        assert config.loss == "l2"
        assert config.split == (1, 1, 1)

    def test_native_values_are_accepted(self):
        config = RunConfig().merge({"epochs": 3, "shuffle": False, "global_dilations": (2, 4)})
        assert config.epochs == 3
        assert config.shuffle is False
        assert config.global_dilations == (2, 4)

    def test_unknown_flag_key(self):
        with pytest.raises(ConfigError):
            RunConfig().merge({"bogus": "1"})


class TestDerivedValues:

    def test_seeds_derive_from_master(self):
        config = RunConfig(seed=7)
        for label in ("geometry", "noise", "init", "train"):
            assert config.seed_for(label) == derive_seed(7, label)
        assert len({config.seed_for(label) for label in ("geometry", "noise", "init", "train")}) == 4

    def test_explicit_seed_wins(self):
        config = RunConfig(seed=7, init_seed=123)
        assert config.seed_for("init") == 123
        assert config.train_config().seed == derive_seed(7, "train")
        with pytest.raises(ConfigError):
            config.seed_for("shuffle")

    def test_invalid_subsystem_values_surface_as_config_errors(self):
        with pytest.raises(ConfigError):
            RunConfig(blocks_per_pathway=4, global_dilations=(2, 4)).dwan_spec()
        with pytest.raises(ConfigError):
            RunConfig(outlier_rate=1.5).noise_model()
        with pytest.raises(ConfigError):
            RunConfig(batch_size=0).train_config()

    def test_to_dict_records_resolved_seeds(self):
        data = RunConfig(seed=3, noise_seed=5).to_dict()
        assert data["resolved_seeds"]["noise"] == 5
        assert data["resolved_seeds"]["geometry"] == derive_seed(3, "geometry")
        assert data["split"] == (20, 5, 10)

    def test_intensity_scale_reaches_the_network(self):
        config = RunConfig().merge({"intensity_scale": "0.015625", "init_scheme": "he"})
        assert config.dwan_spec().intensity_scale == 1.0 / 64.0
        assert config.init_scheme == "he"
