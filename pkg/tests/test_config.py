import json
import math

import pytest

from pacda.config import Config, load_config
from pacda.errors import ConfigError


class TestConfig:
    def test_defaults(self):
        cfg = Config()
        assert cfg.n_domains == 4
        assert cfg.keep == [0.25] * 4
        assert cfg.rotations[3] == pytest.approx(math.pi / 2)

    def test_json_roundtrip(self, tmp_path):
        cfg = Config(seed=7, keep_fractions=[0.4, 0.2, 0.2, 0.2])
        path = tmp_path / "c.json"
        path.write_text(cfg.to_json())
        assert load_config(path) == cfg

    @pytest.mark.parametrize("bad", [
        {"sede": 1},
        {"seed": "1"},
        {"hidden_widths": [64, 6.5]},
        {"keep_fractions": [0.5, 0.5, 0.5, 0.5]},
        {"keep_fractions": [0.5, 0.5]},
        {"bn_reset": "zero"},
        {"rotations": [0.0, 1.0]},
        {"batch_size": 0},
        {"route_batch_size": 1},
        {"rotated_pairs": 9},
        {"smoothing_alpha": 1.5},
    ])
    def test_rejected(self, bad):
        with pytest.raises(ConfigError):
            Config.from_dict(bad)

    def test_missing_and_malformed_files(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "nope.json")
        (tmp_path / "bad.json").write_text("{")
        with pytest.raises(ConfigError):
            load_config(tmp_path / "bad.json")
        (tmp_path / "list.json").write_text(json.dumps([1]))
        with pytest.raises(ConfigError):
            load_config(tmp_path / "list.json")
