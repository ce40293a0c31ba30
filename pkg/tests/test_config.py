import pytest

from protodiv.config import Config, ConfigError, default_config_yaml, load_config


def test_defaults_validate():
    Config().validate()


def test_paper_defaults():
    cfg = Config()
    assert cfg.trainer.learning_rate == 1e-5
    assert cfg.trainer.weight_decay == 0.003
    assert cfg.trainer.batch_size == 10
    assert cfg.trainer.epochs == 10
    assert cfg.trainer.lambda_div == 0.5
    assert cfg.refiner.alpha == 0.45
    assert cfg.bank.k == 3
    assert cfg.num_classes == 4


def test_dict_round_trip():
    cfg = Config()
    cfg.bank.k = 7
    cfg.trainer.lambda_sim = 0.2
    again = Config.from_dict(cfg.to_dict())
    assert again.to_dict() == cfg.to_dict()


def test_yaml_file_round_trip(tmp_path):
    cfg = Config()
    cfg.refiner.alpha = 0.3
    cfg.encoder.stage_channels = [8, 16, 24, 32]
    path = tmp_path / "cfg.yaml"
    path.write_text(cfg.to_yaml())
    loaded = Config.from_file(path)
    assert loaded.to_dict() == cfg.to_dict()


def test_overrides_parse_yaml_values():
    cfg = Config()
    cfg.apply_overrides(
        [
            "bank.k=10",
            "trainer.lambda_div=0.25",
            "bank.background=false",
            "refiner.fusion_weights=[1,0,0,0]",
            "trainer.warmup_steps=null",
            "seed=42",
        ]
    )
    assert cfg.bank.k == 10 and isinstance(cfg.bank.k, int)
    assert cfg.trainer.lambda_div == 0.25
    assert cfg.bank.background is False
    assert cfg.refiner.fusion_weights == [1, 0, 0, 0]
    assert cfg.trainer.warmup_steps is None
    assert cfg.seed == 42


def test_override_errors_are_collected():
    cfg = Config()
    with pytest.raises(ConfigError) as excinfo:
        cfg.apply_overrides(["nosuch.key=1", "bank.k"])
    message = str(excinfo.value)
    assert "nosuch.key" in message
    assert "bank.k" in message


def test_validate_lists_every_problem():
    cfg = Config()
    cfg.trainer.learning_rate = -1.0
    cfg.refiner.alpha = 1.5
    cfg.bank.k = 0
    with pytest.raises(ConfigError) as excinfo:
        cfg.validate()
    message = str(excinfo.value)
    assert "trainer.learning_rate" in message
    assert "refiner.alpha" in message
    assert "bank.k" in message


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError, match="unknown key"):
        Config.from_dict({"bank": {"prototype_count": 3}})
    with pytest.raises(ConfigError, match="unknown key"):
        Config.from_dict({"banks": {}})


def test_section_not_assignable():
    cfg = Config()
    with pytest.raises(ConfigError, match="section"):
        cfg.apply_overrides(["bank={}"])


def test_load_config_seed_override(tmp_path):
    path = tmp_path / "cfg.yaml"
    path.write_text(default_config_yaml())
    cfg = load_config(path, overrides=["trainer.epochs=2"], seed=9)
    assert cfg.seed == 9
    assert cfg.trainer.epochs == 2


def test_load_config_validates():
    with pytest.raises(ConfigError):
        load_config(None, overrides=["trainer.epochs=0"])


def test_nondecreasing_strides_enforced():
    cfg = Config()
    cfg.encoder.stage_strides = [4, 8, 4, 32]
    with pytest.raises(ConfigError, match="nondecreasing"):
        cfg.validate()


def test_default_yaml_documents_all_sections():
    text = default_config_yaml()
    for section in ("encoder", "bank", "refiner", "diversity", "trainer", "crf"):
        assert f"{section}:" in text
