#!/usr/bin/env python3
"""
Tests for configuration loading, validation and environment handling
"""

import json
import shutil
import tempfile
from pathlib import Path

import pytest

from helpers import tiny_model_config, tiny_train_config, write_config
from mtl_config import (RUN_ROOT_ENV, AttributeSchema, AttributeSpec, ConfigurationError, MarginMode,
                        TrainConfig, Topology, load_train_config, market_attribute_schema, parse_size,
                        resolve_run_root)

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"


class TestTrainConfig:

    def setup_method(self):
        self.temp_dir = Path(tempfile.mkdtemp())

    def teardown_method(self):
        shutil.rmtree(self.temp_dir, ignore_errors=True)

    def test_round_trip(self):
        config = tiny_train_config(self.temp_dir / "data" / "manifest.json")
        loaded = load_train_config(write_config(config, self.temp_dir / "config.json"))
        assert loaded.to_dict() == config.to_dict()
        assert loaded.triplet_margin_mode == MarginMode.SOFTPLUS

    def test_relative_manifest_resolves_against_config(self):
        data = tiny_train_config("data/manifest.json").to_dict()
        path = self.temp_dir / "configs" / "run.json"
        path.parent.mkdir()
        with open(path, "w", encoding="utf-8") as f:
            json.dump(data, f)
        config = load_train_config(path)
        assert Path(config.datasets[0].manifest) == (path.parent / "data" / "manifest.json").resolve()

    def test_unknown_key(self):
        data = tiny_train_config("m.json").to_dict()
        data["learning_rate"] = 0.1
        with pytest.raises(ConfigurationError) as info:
            TrainConfig.from_dict(data)
        assert info.value.field == "config"

    def test_unreadable_file(self):
        with pytest.raises(ConfigurationError):
            load_train_config(self.temp_dir / "missing.json")

    @pytest.mark.parametrize("change,field_name", [
        (lambda c: setattr(c.datasets[0], "losses", ["focal"]), "losses"),
        (lambda c: setattr(c.datasets[0], "losses", []), "losses"),
        (lambda c: setattr(c.datasets[0], "pk_k", 1), "pk_p"),
        (lambda c: c.loss_weights.update(triplet=0.0), "loss_weights"),
        (lambda c: setattr(c, "keep_fraction", 1.5), "keep_fraction"),
        (lambda c: setattr(c, "total_steps", -1), "total_steps"),
        (lambda c: setattr(c, "limit_identities", 0), "limit_identities"),
        (lambda c: setattr(c, "datasets", []), "datasets"),
    ])
    def test_invalid_fields(self, change, field_name):
        config = tiny_train_config("m.json")
        change(config)
        with pytest.raises(ConfigurationError) as info:
            config.validate()
        assert info.value.field == field_name

    def test_loss_needs_its_head(self):
        config = tiny_train_config("m.json")
        config.model = tiny_model_config(["reid"])
        with pytest.raises(ConfigurationError):
            config.validate()

    def test_unknown_margin_mode(self):
        with pytest.raises(ConfigurationError):
            TrainConfig(triplet_margin_mode="squared")

    @pytest.mark.parametrize("name", ["synthetic_single", "synthetic_multi", "synthetic_split", "market_mpii_lip"])
    def test_example_configs_validate(self, name):
        config = load_train_config(CONFIG_DIR / f"{name}.json").validate()
        assert config.datasets and all(Path(entry.manifest).is_absolute() for entry in config.datasets)

    def test_example_multi_branch_config(self):
        config = load_train_config(CONFIG_DIR / "synthetic_multi.json")
        assert config.model.backbone.topology == Topology.MULTI_BRANCH
        assert config.model.backbone.num_branches == 4


class TestModelConfig:

    def test_attribute_task_needs_schema(self):
        config = tiny_model_config()
        config.heads.attribute_schema = AttributeSchema()
        config.validate(require_data_sizes=False)
        with pytest.raises(ConfigurationError):
            config.validate()

    def test_split_channels_must_match_joints(self):
        config = tiny_model_config(topology=Topology.SPLIT_OUTPUT)
        config.heads.num_joints = 12
        with pytest.raises(ConfigurationError) as info:
            config.validate()
        assert info.value.field == "split_channels"

    def test_round_robin_branches(self):
        config = tiny_model_config(topology=Topology.MULTI_BRANCH, num_branches=2)
        assert [config.branch_index(t) for t in ("reid", "attributes", "pose", "segmentation")] == [0, 1, 0, 1]
        config.heads.task_branches = {"pose": 1}
        assert config.branch_index("pose") == 1


class TestAttributeSchema:

    def test_market_schema(self):
        assert len(market_attribute_schema()) == 10
        colours = market_attribute_schema(include_colors=True)
        assert colours.get("upper_color").num_classes == 8 and colours.get("lower_color").num_classes == 9

    def test_duplicates_rejected(self):
        with pytest.raises(ConfigurationError):
            AttributeSchema([AttributeSpec("hat", 2), AttributeSpec("hat", 2)])

    def test_single_class_rejected(self):
        with pytest.raises(ConfigurationError):
            AttributeSchema([AttributeSpec("hat", 1)])


class TestEnvironment:

    def test_parse_size(self):
        assert parse_size("128x64") == (128, 64)
        for text in ("128", "0x64", "axb"):
            with pytest.raises(ConfigurationError):
                parse_size(text)

    def test_run_root_from_environment(self, monkeypatch):
        monkeypatch.setenv(RUN_ROOT_ENV, "/tmp/person_runs")
        assert resolve_run_root() == Path("/tmp/person_runs")
        monkeypatch.delenv(RUN_ROOT_ENV)
        assert resolve_run_root() == Path("runs")
