import pytest

from msnmt.config import ConfigError, load_config, model_config, synthetic_spec


def test_defaults():
    cfg = load_config(env={})
    assert (cfg["model"]["emb_dim"], cfg["model"]["hidden_dim"]) == (200, 400)
    assert cfg["train"]["lr"] == 0.0004
    assert (cfg["train"]["batch_size"], cfg["train"]["patience"]) == (64, 15)
    assert (cfg["train"]["pretrain_patience"], cfg["train"]["finetune_batch_size"], cfg["train"]["finetune_patience"]) == (10, 32, 5)
    assert cfg["model"]["dropout_emb"] == 0.4 and cfg["data"]["max_len"] == 100


def test_precedence_file_env_override(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text("[train]\nk = 3\nlr = 0.01\nseed = 4\n[model]\nhidden_dim = 32\n")
    assert load_config(path, env={})["train"]["k"] == "3"
    env = {"MSNMT_TRAIN_K": "5", "MSNMT_TRAIN_LR": "0.02", "HOME": "/x"}
    cfg = load_config(path, env=env, overrides={"train.k": "7", "train.seed": None})
    assert cfg["train"]["k"] == "7"
    assert cfg["train"]["lr"] == 0.02
    assert cfg["train"]["seed"] == 4
    assert cfg["model"]["hidden_dim"] == 32


def test_env_keys_with_underscores():
    cfg = load_config(env={"MSNMT_TRAIN_BATCH_SIZE": "8", "MSNMT_MODEL_MULTIMODAL": "false"})
    assert cfg["train"]["batch_size"] == 8 and cfg["model"]["multimodal"] is False


def test_unknown_key_is_named(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text("[train]\nlrr = 0.1\n")
    with pytest.raises(ConfigError, match=r"\[train\] lrr"):
        load_config(path, env={})
    with pytest.raises(ConfigError, match="nosuch"):
        load_config(env={}, overrides={"nosuch.key": 1})


def test_bad_values(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text("[train]\nbatch_size = many\n")
    with pytest.raises(ConfigError, match="batch_size"):
        load_config(path, env={})
    with pytest.raises(ConfigError):
        load_config(env={"MSNMT_MODEL_MULTIMODAL": "maybe"})
    with pytest.raises(FileNotFoundError):
        load_config(tmp_path / "missing.ini", env={})


def test_optional_values_parse():
    cfg = load_config(env={"MSNMT_TRAIN_CLIP_NORM": "5", "MSNMT_MODEL_ATT_DIM": "none"})
    assert cfg["train"]["clip_norm"] == 5.0 and cfg["model"]["att_dim"] is None


def test_builders():
    cfg = load_config(env={}, overrides={"model.hidden_dim": "8", "synth.size": 12})
    assert model_config(cfg, vocab_size=20).vocab_size == 20
    assert model_config(cfg).hidden_dim == 8
    assert synthetic_spec(cfg).size == 12
