"""Config loading: defaults, key=value files, overrides, rejection rules."""

import dataclasses

import pytest

from sella.config import (
    ConfigError,
    RunConfig,
    apply_overrides,
    config_dict,
    load_config,
)


def test_defaults_construct_and_roundtrip():
    config = RunConfig()
    d = config_dict(config)
    assert d["seed"] == 0
    assert d["lam"] == pytest.approx(0.1)
    assert set(d) == {f.name for f in dataclasses.fields(RunConfig)}


def test_every_field_has_a_default():
    for f in dataclasses.fields(RunConfig):
        assert f.default is not dataclasses.MISSING, f.name


def test_apply_overrides_coerces_types():
    config = apply_overrides(RunConfig(), {"d_c": "16", "lam": "0.5",
                                           "out_dir": "elsewhere"})
    assert config.d_c == 16 and isinstance(config.d_c, int)
    assert config.lam == pytest.approx(0.5)
    assert config.out_dir == "elsewhere"
    # the original is untouched
    assert RunConfig().d_c != 16 or RunConfig().lam != 0.5


def test_unknown_key_rejected_with_valid_list():
    with pytest.raises(ConfigError, match="unknown config keys: d_cc"):
        apply_overrides(RunConfig(), {"d_cc": "16"})


def test_bad_literal_rejected():
    with pytest.raises(ConfigError, match="d_c"):
        apply_overrides(RunConfig(), {"d_c": "sixteen"})


def test_load_config_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# comment line\n"
                    "seed = 7\n"
                    "tau=0.2  # trailing comment\n"
                    "\n"
                    "data_dir = /tmp/ds\n")
    config = load_config(str(path))
    assert config.seed == 7
    assert config.tau == pytest.approx(0.2)
    assert config.data_dir == "/tmp/ds"


def test_load_config_bad_line_reports_lineno(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("seed = 1\nnot a pair\n")
    with pytest.raises(ConfigError, match=":2"):
        load_config(str(path))


def test_validation_head_dim():
    with pytest.raises(ConfigError, match="divisible"):
        apply_overrides(RunConfig(), {"d_l": "10", "n_heads": "4"})


def test_validation_positive_counts():
    with pytest.raises(ConfigError, match="stage1_epochs"):
        apply_overrides(RunConfig(), {"stage1_epochs": "0"})
    with pytest.raises(ConfigError, match="tau"):
        apply_overrides(RunConfig(), {"tau": "-1"})
    with pytest.raises(ConfigError, match=">= 0"):
        apply_overrides(RunConfig(), {"lam": "-0.1"})
