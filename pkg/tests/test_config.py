import pytest

from topicid.config import (
    SYSTEM_NAMES,
    ConfigError,
    SystemConfig,
    apply_overrides,
    default_config,
    load_config,
    parse_config,
)


@pytest.mark.parametrize("name", SYSTEM_NAMES)
def test_ini_round_trip(name):
    cfg = default_config(name, "pretrain" if name in ("emb_transfer", "multi_task") else "single", seed=3)
    assert parse_config(cfg.to_ini()) == cfg
    assert parse_config(cfg.to_ini()).digest() == cfg.digest()


def test_overrides_coerce_types():
    cfg = apply_overrides(default_config("audio_only"), {
        "optimizer.lr": "0.05", "epochs": "3", "audio_encoder.conv_channels": "8, 8, 8",
        "decode.length_normalize": "yes", "data.max_duration_s": "30",
    })
    assert cfg.optimizer.lr == 0.05 and cfg.epochs == 3
    assert cfg.audio_encoder.conv_channels == (8, 8, 8)
    assert cfg.decode.length_normalize is True
    assert cfg.data.max_duration_s == 30.0


@pytest.mark.parametrize("pairs", [
    {"optimizer.learning_rate": "1"},
    {"nosuch.key": "1"},
    {"epochs": "many"},
    {"decode.length_normalize": "perhaps"},
    {"optimizer": "adam"},
    {"epochs": "0"},
    {"name": "text_bert"},
    {"stage": "finetune"},
])
def test_bad_overrides(pairs):
    with pytest.raises(ConfigError):
        apply_overrides(default_config("audio_only"), pairs)


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "missing.ini")
    (tmp_path / "bad.ini").write_text("epochs = 3\n")
    with pytest.raises(ConfigError, match="malformed"):
        load_config(tmp_path / "bad.ini")


def test_partial_file_keeps_base(tmp_path):
    (tmp_path / "c.ini").write_text("[optimizer]\nlr = 0.123\n")
    base = default_config("text_man_trn")
    cfg = load_config(tmp_path / "c.ini", base)
    assert cfg.optimizer.lr == 0.123 and cfg.epochs == base.epochs


def test_ctc_defaults():
    cfg = SystemConfig(name="asr_standalone")
    assert cfg.objectives.ctc_weight == 0.5 and cfg.objectives.ctc_cutoff_epoch == 20
    assert cfg.decode.beam_size == 10
