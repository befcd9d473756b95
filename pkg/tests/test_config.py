import json
import os

import pytest

from config import (
    CONFIG_DIR,
    LR_FLOOR,
    apply_overrides,
    load_config,
    parse_config,
    require_train,
    write_resolved,
)
from utils import ConfigError, MissingInputError


def write_config(tmp_path, data, name="run.json"):
    path = tmp_path / name
    path.write_text(json.dumps(data), encoding="utf-8")
    return str(path)


class TestLoadConfig:

    def test_defaults(self):
        cfg = load_config()
        assert cfg.seed == 1
        assert cfg.split.ratios == (0.8, 0.1, 0.1)
        assert cfg.lora.rank == 8 and cfg.lora.targets == ["q", "v"]
        assert cfg.train is None

    def test_shipped_configs_parse(self):
        for name in ("t1_tiny.json", "t1.json"):
            cfg = load_config(os.path.join(CONFIG_DIR, name))
            assert require_train(cfg).token_batch_size > 0
            assert cfg.train.lr_min == LR_FLOOR

    def test_early_stopping_patience(self, tiny_train_section):
        assert parse_config({"train": {"token_batch_size": 64}}).train.patience == 4
        assert load_config(os.path.join(CONFIG_DIR, "t1.json")).train.patience == 4
        # desk-scale synthetic runs wait longer for the first BLEU gains
        assert load_config(os.path.join(CONFIG_DIR, "t1_tiny.json")).train.patience == 8
        assert tiny_train_section.patience == 8

    def test_overrides_and_seed(self, tmp_path):
        path = write_config(tmp_path, {"seed": 4, "train": {"token_batch_size": 64}})
        cfg = load_config(path, ["train.lr_initial=5e-5", "train.scheduler=cyclic", "bpe.num_merges=10"], seed=9)
        assert cfg.seed == 9
        assert cfg.train.lr_initial == 5e-5
        assert cfg.train.scheduler == "cyclic"
        assert cfg.bpe.num_merges == 10

    def test_missing_token_batch_size(self, tmp_path):
        path = write_config(tmp_path, {"train": {"epochs": 3}})
        with pytest.raises(ConfigError, match="token_batch_size"):
            load_config(path)

    def test_train_section_required_for_training(self):
        with pytest.raises(ConfigError, match="token_batch_size"):
            require_train(load_config())

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="learning_rate"):
            parse_config({"train": {"token_batch_size": 8, "learning_rate": 0.1}})

    @pytest.mark.parametrize("ratios", [[0.5, 0.3, 0.1], [1.2, -0.1, -0.1]])
    def test_bad_ratios(self, ratios):
        with pytest.raises(ConfigError):
            parse_config({"split": {"ratios": ratios}})

    def test_lr_min_above_initial(self):
        with pytest.raises(ConfigError):
            parse_config({"train": {"token_batch_size": 8, "lr_initial": 1e-5, "lr_min": 1e-3}})

    def test_missing_file(self, tmp_path):
        with pytest.raises(MissingInputError):
            load_config(str(tmp_path / "absent.json"))

    def test_non_object_root(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(write_config(tmp_path, [1, 2]))


class TestOverrides:

    def test_nested_values_are_json(self):
        raw = apply_overrides({}, ["lora.targets=[\"q\",\"k\"]", "paths.src=data/x.fr", "seed=3"])
        assert raw == {"lora": {"targets": ["q", "k"]}, "paths": {"src": "data/x.fr"}, "seed": 3}

    def test_does_not_mutate_input(self):
        raw = {"bpe": {"num_merges": 5}}
        apply_overrides(raw, ["bpe.num_merges=7"])
        assert raw["bpe"]["num_merges"] == 5

    def test_malformed(self):
        with pytest.raises(ConfigError):
            apply_overrides({}, ["train.epochs"])

    def test_below_scalar(self):
        with pytest.raises(ConfigError):
            apply_overrides({"seed": 1}, ["seed.x=2"])


def test_write_resolved_roundtrip(tmp_path):
    cfg = load_config(overrides=["train.token_batch_size=32"])
    path = write_resolved(cfg, str(tmp_path))
    assert os.path.basename(path) == "resolved_config.json"
    again = parse_config(json.loads((tmp_path / "resolved_config.json").read_text(encoding="utf-8")))
    assert again == cfg
