import pytest
from hypothesis import given, settings, strategies as st

from densepipe.config import (KEYS, SCHEMA, CliConfig, config_text, load_config,
                              parse_config_text, parse_value)
from densepipe.errors import ConfigError, ConfigFileError, ConfigValueError, UnknownKeyError
from densepipe.model import HEAD_PRESETS


def test_empty_config_reproduces_table5(tmp_path):
    p = tmp_path / "empty.cfg"
    p.write_text("")
    cfg = load_config(str(p), environ={})
    assert (cfg.learning_rate, cfg.batch_size, cfg.dropout_rate, cfg.epochs, cfg.optimizer) == \
        (0.0001, 16, 0.5, 50, "adam")
    assert cfg == load_config(environ={}) == CliConfig()


def test_parse_error_names_key():
    with pytest.raises(ConfigValueError) as e:
        parse_config_text("learning_rate = abc")
    assert "learning_rate" in str(e.value)


def test_flag_overrides_file(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("epochs = 50\nseed = 3  # trailing comment\n")
    cfg = load_config(str(p), {"epochs": 10}, environ={})
    assert cfg.epochs == 10 and cfg.seed == 3


def test_seed_env_is_last_resort(tmp_path):
    assert load_config(environ={"DENSEPIPE_SEED": "17"}).seed == 17
    p = tmp_path / "c.cfg"
    p.write_text("seed = 4\n")
    assert load_config(str(p), environ={"DENSEPIPE_SEED": "17"}).seed == 4
    assert load_config(str(p), {"seed": 9}, environ={"DENSEPIPE_SEED": "17"}).seed == 9


def test_distinct_errors(tmp_path):
    with pytest.raises(UnknownKeyError):
        parse_config_text("learnign_rate = 0.1")
    with pytest.raises(ConfigFileError):
        load_config(str(tmp_path / "missing.cfg"))
    with pytest.raises(ConfigFileError):
        parse_config_text("just words")
    for err in (UnknownKeyError, ConfigValueError, ConfigFileError):
        assert issubclass(err, ConfigError)
    assert len({UnknownKeyError, ConfigValueError, ConfigFileError}) == 3


def test_value_parsers():
    assert parse_value("block_sizes", "6, 12,24,16") == [6, 12, 24, 16]
    assert parse_value("head", "b") == "B"
    assert parse_value("head", "64,32") == "64,32"
    assert parse_value("equalize", "no") is False
    with pytest.raises(ConfigValueError):
        parse_value("optimizer", "lbfgs")
    with pytest.raises(ConfigValueError):
        parse_value("batch_size", "0")


def test_schema_covers_config_fields():
    assert set(KEYS) == set(SCHEMA)


def test_model_config_presets():
    cfg = load_config(overrides={"head": "D", "resolution": 128}, environ={})
    m = cfg.model_config()
    assert m.head.dense_widths == list(HEAD_PRESETS["D"]) and m.input_resolution == 128
    toy = load_config(overrides={"architecture": "toy", "head": "64"}, environ={}).model_config()
    assert (toy.stem_channels, toy.block_sizes, toy.growth_rate, toy.head.dense_widths) == \
        (16, [3, 3], 12, [64])
    with pytest.raises(ConfigError):
        load_config(overrides={"resolution": 100}, environ={}).model_config()


settable = st.fixed_dictionaries({}, optional={
    "learning_rate": st.floats(1e-6, 1.0),
    "batch_size": st.integers(1, 512),
    "optimizer": st.sampled_from(["adam", "sgd", "rmsprop"]),
    "dropout_rate": st.floats(0, 0.99),
    "seed": st.integers(0, 2**63 - 1),
    "block_sizes": st.lists(st.integers(0, 30), min_size=1, max_size=5),
    "head": st.sampled_from(["A", "B", "C", "D", "64,32"]),
    "equalize": st.booleans(),
    "manifest": st.sampled_from(["data/m.csv", "x y.csv"]),
    "stem_pool": st.booleans(),
})


@settings(max_examples=60, deadline=None)
@given(settable)
def test_config_text_round_trip(values):
    cfg = CliConfig(**values)
    again = load_config(overrides=parse_config_text(config_text(cfg)), environ={})
    assert again == cfg
