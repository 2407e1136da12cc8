import math
from pathlib import Path

import numpy as np
import pytest
import yaml

from src.config import fingerprint, load_config, substream, validate_config
from src.errors import ConfigError
from src.version_manager import VersionManager

SETTINGS = Path(__file__).parent.parent / "config" / "settings.yaml"


class TestValidation:
    def test_defaults(self):
        config = validate_config({})
        assert config["split"] == {"shared": 4, "src_private": 0, "tgt_private": 3}
        assert config["scoring"]["rejection"] is True
        assert config["loss"]["lambda"] == 0.01
        assert config["loss"]["alpha"] == 0.1 and config["loss"]["T"] == 0.1
        assert config["source_optim"]["momentum"] == 0.9
        assert config["source_optim"]["weight_decay"] == 1e-3
        assert config["source_optim"]["batch_size"] == 64
        assert config["shift"]["rotation"] == math.pi / 8

    def test_shipped_settings_match_defaults(self):
        assert load_config(str(SETTINGS), required=True) == validate_config({})

    @pytest.mark.parametrize("scenario, split", [
        ("opda", {"shared": 4, "src_private": 2, "tgt_private": 3}),
        ("pda", {"shared": 4, "src_private": 2, "tgt_private": 0}),
        ("closed", {"shared": 4, "src_private": 0, "tgt_private": 0}),
    ])
    def test_scenario_presets(self, scenario, split):
        assert validate_config({"run": {"scenario": scenario}})["split"] == split

    def test_partial_set_turns_rejection_off(self):
        config = validate_config({"run": {"scenario": "pda"}, "scoring": {"rejection": True}})
        assert config["scoring"]["rejection"] is False

    def test_explicit_split_wins_over_preset(self):
        config = validate_config({"split": {"tgt_private": 5}})
        assert config["split"]["tgt_private"] == 5
        assert config["split"]["shared"] == 4

    @pytest.mark.parametrize("raw", [
        {"split": {"shared": 0}},
        {"loss": {"T": 1.5}},
        {"run": {"scenario": "semi"}},
        {"run": {"seeds": []}},
        {"scoring": {"kind": "margin"}},
        {"optimizer": {}},
    ])
    def test_invalid_configs(self, raw):
        with pytest.raises(ConfigError):
            validate_config(raw)


class TestLoading:
    def test_overrides_win_over_file(self, tmp_path):
        path = tmp_path / "c.yaml"
        path.write_text(yaml.safe_dump({"loss": {"T": 0.3, "alpha": 0.2}}))
        config = load_config(str(path), {"loss": {"T": 0.7}})
        assert config["loss"]["T"] == 0.7
        assert config["loss"]["alpha"] == 0.2

    def test_scenario_flag_drops_file_split(self, tmp_path):
        path = tmp_path / "c.yaml"
        path.write_text(yaml.safe_dump({"split": {"shared": 4, "src_private": 0, "tgt_private": 3}}))
        config = load_config(str(path), {"run": {"scenario": "pda"}})
        assert config["split"]["tgt_private"] == 0

    def test_missing_file(self, tmp_path):
        assert load_config(str(tmp_path / "absent.yaml")) == validate_config({})
        with pytest.raises(ConfigError):
            load_config(str(tmp_path / "absent.yaml"), required=True)

    def test_unparsable_file(self, tmp_path):
        path = tmp_path / "bad.yaml"
        path.write_text("loss: [unclosed\n")
        with pytest.raises(ConfigError):
            load_config(str(path))


class TestFingerprint:
    def test_ignores_output_location_and_workers(self):
        a = validate_config({"run": {"out_dir": "a"}, "performance": {"max_workers": 4}})
        b = validate_config({"run": {"out_dir": "b"}})
        assert fingerprint(a) == fingerprint(b)

    def test_tracks_run_settings(self):
        assert fingerprint(validate_config({})) != fingerprint(validate_config({"loss": {"T": 0.2}}))


class TestSubstreams:
    def test_named_streams_are_reproducible_and_distinct(self):
        assert np.array_equal(substream(3, "mixup").random(5), substream(3, "mixup").random(5))
        assert not np.array_equal(substream(3, "mixup").random(5), substream(3, "batching").random(5))
        assert not np.array_equal(substream(3, "mixup").random(5), substream(4, "mixup").random(5))

    def test_unknown_stream(self):
        with pytest.raises(ConfigError):
            substream(0, "dropout")


class TestVersionManager:
    def test_versions_are_read_from_the_version_file(self):
        assert VersionManager.tool_version() == "0.2.0"
        assert VersionManager.report_schema_version() == "1.0.0"

    @pytest.mark.parametrize("found, ok", [("1.0.0", True), ("1.4.2", True), ("2.0.0", False), ("not-a-version", False)])
    def test_major_version_decides_compatibility(self, found, ok):
        assert VersionManager.is_compatible(found, "1.0.0") is ok
