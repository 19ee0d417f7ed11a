import pytest

from zofa.config import (
    build_run_config,
    desk_adapt_defaults,
    env_overrides,
    load_run_config,
    merge_layers,
    parse_config_text,
    validate_run_config,
    RunConfig,
)
from zofa.errors import ConfigError

SAMPLE = """
# experiment configuration
[task]
seed = 11
dim = 16
hidden = [24, 12]
noise = 1.5
with_offset = false

[adapt]   # adaptation block
mode = "zofa-entropy"
lr = 0.01
batch = 4
params = "norm:0"

[run]
out = "runs/demo # not a comment"
"""


def test_parse_values_and_types():
    parsed = parse_config_text(SAMPLE)
    assert parsed["task"]["seed"] == 11
    assert parsed["task"]["hidden"] == [24, 12]
    assert parsed["task"]["noise"] == 1.5
    assert parsed["task"]["with_offset"] is False
    assert parsed["adapt"]["mode"] == "zofa-entropy"
    assert parsed["run"]["out"] == "runs/demo # not a comment"


def test_parse_rejects_malformed_lines():
    with pytest.raises(ConfigError, match="table"):
        parse_config_text("[task\nseed = 1")
    with pytest.raises(ConfigError, match="key = value"):
        parse_config_text("[task]\njust words")
    with pytest.raises(ConfigError, match="outside"):
        parse_config_text("seed = 1")
    with pytest.raises(ConfigError, match="cannot parse"):
        parse_config_text("[task]\nseed = maybe")
    with pytest.raises(ConfigError, match="nested"):
        parse_config_text("[task]\nhidden = [[1], [2]]")
    with pytest.raises(ConfigError, match="close"):
        parse_config_text("[task]\nhidden = [1, 2")


def test_unknown_sections_and_keys_rejected():
    with pytest.raises(ConfigError, match=r"unknown section"):
        build_run_config({"model": {"x": 1}})
    with pytest.raises(ConfigError, match=r"unknown key"):
        build_run_config({"task": {"dims": 3}})


def test_type_mismatch_rejected():
    with pytest.raises(ConfigError, match="expects"):
        build_run_config({"task": {"seed": "eleven"}})
    with pytest.raises(ConfigError, match="expects"):
        build_run_config({"adapt": {"balance": 1}})
    # int promotes to float silently
    cfg = build_run_config({"adapt": {"lr": 1}})
    assert cfg.adapt.lr == 1.0


def test_defaults_are_the_calibrated_desk_settings():
    cfg = RunConfig()
    assert cfg.adapt == desk_adapt_defaults()
    assert cfg.task.radius == 4.0
    assert cfg.protocol.samples_per_domain == 2400
    validate_run_config(cfg)


def test_precedence_file_env_cli(tmp_path):
    path = tmp_path / "run.conf"
    path.write_text("[adapt]\nlr = 0.1\nbatch = 4\nmode = \"zofa\"\n")
    env = {"ZOFA_ADAPT_LR": "0.2", "ZOFA_ADAPT_MU": "0.5", "ZOFA_THREADS": "2"}
    cli = {"adapt": {"lr": 0.3}}
    cfg = load_run_config(path, env=env, cli=cli)
    assert cfg.adapt.lr == 0.3      # cli beats env beats file
    assert cfg.adapt.mu == 0.5      # env beats default
    assert cfg.adapt.batch == 4     # file beats default
    assert cfg.adapt.mode == "zofa"


def test_env_overrides_shape():
    env = {"ZOFA_TASK_DIM": "8", "ZOFA_RUN_OUT": '"x/y"', "HOME": "/root", "ZOFA_THREADS": "4"}
    layer = env_overrides(env)
    assert layer == {"task": {"dim": 8}, "run": {"out": "x/y"}}


def test_merge_layers_later_wins():
    merged = merge_layers({"a": {"x": 1, "y": 2}}, {"a": {"x": 3}}, {"b": {"z": 4}})
    assert merged == {"a": {"x": 3, "y": 2}, "b": {"z": 4}}


def test_validation_rules():
    cfg = build_run_config({"adapt": {"mode": "nope"}})
    with pytest.raises(ConfigError):
        validate_run_config(cfg)
    cfg = build_run_config({"protocol": {"policy": "loop"}})
    with pytest.raises(ConfigError):
        validate_run_config(cfg)
    cfg = build_run_config({"protocol": {"severity": 7}})
    with pytest.raises(ConfigError):
        validate_run_config(cfg)
    cfg = build_run_config({"run": {"quantize_bits": 1}})
    with pytest.raises(ConfigError):
        validate_run_config(cfg)
