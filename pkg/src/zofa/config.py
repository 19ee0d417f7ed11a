"""Run configuration: a small TOML-subset file format plus override layers.

The grammar covers what experiment configs need and nothing else: [tables],
`key = value` lines, strings, integers, floats, booleans, and single-line
arrays of those. Unknown sections or keys are rejected rather than ignored.
Precedence is file < environment (ZOFA_<SECTION>_<KEY>) < command line; the
effective result is echoed into every run summary.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields

from .engine import MODES, AdaptConfig
from .errors import ConfigError


def _parse_scalar(tok: str, where: str):
    tok = tok.strip()
    if tok.startswith('"') and tok.endswith('"') and len(tok) >= 2:
        return tok[1:-1]
    if tok == "true":
        return True
    if tok == "false":
        return False
    try:
        return int(tok)
    except ValueError:
        pass
    try:
        return float(tok)
    except ValueError:
        pass
    raise ConfigError(f"cannot parse value {tok!r} at {where}")


def _strip_comment(s: str) -> str:
    in_str = False
    for i, ch in enumerate(s):
        if ch == '"':
            in_str = not in_str
        elif ch == "#" and not in_str:
            return s[:i]
    return s


def _split_array(body: str, where: str):
    items = []
    depth = 0
    buf = ""
    in_str = False
    for ch in body:
        if ch == '"':
            in_str = not in_str
            buf += ch
        elif ch == "," and depth == 0 and not in_str:
            items.append(buf)
            buf = ""
        else:
            if ch == "[":
                raise ConfigError(f"nested arrays are not supported at {where}")
            buf += ch
    if buf.strip():
        items.append(buf)
    return [_parse_scalar(i, where) for i in items]


def parse_config_text(text: str) -> dict:
    """Parse the TOML subset into {section: {key: value}}."""
    out: dict = {}
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        where = f"line {lineno}"
        if line.startswith("["):
            line = _strip_comment(line).strip()
            if not line.endswith("]"):
                raise ConfigError(f"malformed table header at {where}")
            section = line[1:-1].strip()
            if not section:
                raise ConfigError(f"empty table name at {where}")
            out.setdefault(section, {})
            continue
        if "=" not in line:
            raise ConfigError(f"expected key = value at {where}")
        if section is None:
            raise ConfigError(f"key outside of any [table] at {where}")
        key, _, val = line.partition("=")
        key = key.strip()
        val = _strip_comment(val).strip()
        if not key:
            raise ConfigError(f"empty key at {where}")
        if val.startswith("["):
            if not val.endswith("]"):
                raise ConfigError(f"array must close on the same line at {where}")
            out[section][key] = _split_array(val[1:-1], where)
        else:
            out[section][key] = _parse_scalar(val, where)
    return out


@dataclass
class TaskConfig:
    seed: int = 7
    dim: int = 32
    classes: int = 10
    n_train: int = 4000
    n_test: int = 2000
    hidden: list = field(default_factory=lambda: [32])
    radius: float = 4.0
    noise: float = 1.0
    with_offset: bool = False
    tap: str = "first-norm"


@dataclass
class PretrainConfig:
    steps: int = 300
    lr: float = 0.05
    batch: int = 0
    seed: int = 0
    store_stats: bool = True


@dataclass
class ProtocolConfig:
    preset: str = "synthetic15"
    severity: int = 5
    samples_per_domain: int = 2400
    order_seed: int = 0
    policy: str = "single"


@dataclass
class RunIOConfig:
    out: str = "runs/run"
    model: str = "runs/model.zofa"
    quantize_bits: int = 0


def desk_adapt_defaults() -> AdaptConfig:
    """Adaptation settings calibrated once for the shipped synthetic task.

    The bare AdaptConfig defaults carry the reference-scale values; these
    are the desk-scale counterparts every CLI run starts from.
    """
    return AdaptConfig(
        mode="zofa",
        mu=0.12,
        lr=0.03,
        gamma=0.001,
        k=1,
        align_lambda=10.0,
        align_rho=0.05,
        center_ema=0.9,
        moment_ema=0.9,
        anchor_ema=0.0,
        batch=8,
        balance=True,
        params="norm:0",
        seed=0,
    )


@dataclass
class RunConfig:
    task: TaskConfig = field(default_factory=TaskConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    protocol: ProtocolConfig = field(default_factory=ProtocolConfig)
    adapt: AdaptConfig = field(default_factory=desk_adapt_defaults)
    run: RunIOConfig = field(default_factory=RunIOConfig)


_SECTIONS = {
    "task": TaskConfig,
    "pretrain": PretrainConfig,
    "protocol": ProtocolConfig,
    "adapt": AdaptConfig,
    "run": RunIOConfig,
}


def _coerce(section: str, key: str, value, target_type):
    if target_type is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if target_type is list:
        return list(value) if isinstance(value, list) else [value]
    if not isinstance(value, target_type) or (
        target_type is int and isinstance(value, bool)
    ):
        raise ConfigError(
            f"[{section}] {key} expects {target_type.__name__}, got {value!r}"
        )
    return value


def _apply_section(cfg_obj, section: str, values: dict):
    known = {f.name: f for f in fields(cfg_obj)}
    for key, value in values.items():
        if key not in known:
            raise ConfigError(f"unknown key {key!r} in section [{section}]")
        current = getattr(cfg_obj, key)
        target = type(current) if current is not None else type(value)
        setattr(cfg_obj, key, _coerce(section, key, value, target))


def build_run_config(parsed: dict) -> RunConfig:
    cfg = RunConfig()
    for section, values in parsed.items():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        _apply_section(getattr(cfg, section), section, values)
    return cfg


def env_overrides(environ=None) -> dict:
    """Collect ZOFA_<SECTION>_<KEY> variables into a parsed-config dict."""
    environ = os.environ if environ is None else environ
    out: dict = {}
    for name, raw in environ.items():
        if not name.startswith("ZOFA_") or name == "ZOFA_THREADS":
            continue
        parts = name[5:].lower().split("_", 1)
        if len(parts) != 2 or parts[0] not in _SECTIONS:
            continue
        section, key = parts
        out.setdefault(section, {})[key] = _parse_scalar(raw, f"env {name}")
    return out


def merge_layers(*layers: dict) -> dict:
    """Later layers win; each layer is {section: {key: value}}."""
    out: dict = {}
    for layer in layers:
        for section, values in layer.items():
            out.setdefault(section, {}).update(values)
    return out


def load_run_config(path=None, env=None, cli: dict | None = None) -> RunConfig:
    file_layer = {}
    if path is not None:
        with open(path, "r", encoding="utf-8") as f:
            file_layer = parse_config_text(f.read())
    merged = merge_layers(file_layer, env_overrides(env), cli or {})
    cfg = build_run_config(merged)
    validate_run_config(cfg)
    return cfg


def validate_run_config(cfg: RunConfig) -> None:
    if cfg.adapt.mode not in MODES:
        raise ConfigError(f"unknown mode {cfg.adapt.mode!r}; expected one of {MODES}")
    if cfg.protocol.policy not in ("single", "continual"):
        raise ConfigError(f"unknown protocol policy {cfg.protocol.policy!r}")
    if cfg.protocol.severity not in (1, 2, 3, 4, 5):
        raise ConfigError("severity must be in 1..5")
    if cfg.run.quantize_bits and not (2 <= cfg.run.quantize_bits <= 16):
        raise ConfigError("quantize_bits must be 0 (off) or in 2..16")


def config_echo(cfg: RunConfig) -> dict:
    from dataclasses import asdict

    return asdict(cfg)
