import dataclasses

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from usermoe.config import RunConfig, dump_text, from_dict, load_config, parse_text
from usermoe.errors import ConfigError


def test_every_field_has_a_default():
    for f in dataclasses.fields(RunConfig):
        assert f.default is not dataclasses.MISSING, f.name
    assert from_dict({}) == RunConfig()


def test_parse_text_types_and_comments():
    cfg = parse_text("""
        # model
        d_model = 16   # width
        heads = 4
        bilevel = true
        lr = 3e-3
        preset = siupd-like
        lambda_init = [1.5, 0.5]
    """)
    assert (cfg.d_model, cfg.heads, cfg.bilevel, cfg.lr, cfg.preset) == (16, 4, True, 3e-3, "siupd-like")
    assert cfg.lambda_init == (1.5, 0.5)


@pytest.mark.parametrize("text", [
    "nonsense = 1", "d_model = sixteen", "d_model 16", "heads = 3", "mask_rate = 1.5",
    "pooling = sum", "val_ratio = 0.7\ntest_ratio = 0.5", "lambda_init = [-1, 2]", "lr = 0",
    "bilevel = maybe", "gate_convention = soft",
])
def test_bad_configs(text):
    with pytest.raises(ConfigError):
        parse_text(text)


def test_dump_parse_round_trip():
    cfg = RunConfig(seed=9, d_model=12, heads=3, bilevel=True, lambda_init=(0.5, 1.5), preset="mcp-like")
    assert parse_text(dump_text(cfg)) == cfg


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.sampled_from([1, 2, 4]), st.floats(1e-5, 1.0), st.booleans())
def test_round_trip_property(seed, heads, lr, bilevel):
    cfg = RunConfig(seed=seed, d_model=8 * heads, heads=heads, lr=lr, bilevel=bilevel)
    assert parse_text(dump_text(cfg)) == cfg


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.cfg")


def test_overrides_validate():
    with pytest.raises(ConfigError):
        RunConfig().with_overrides(experts=0)
    assert RunConfig().with_overrides(experts="3").experts == 3
