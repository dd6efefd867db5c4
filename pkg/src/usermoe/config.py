"""Run configuration: one flat, typed, fully-defaulted record.

File format, one setting per line::

    # comment
    seed = 7
    d_model = 32
    bilevel = true
    preset = "siupd-like"

Values are parsed as JSON when possible (numbers, ``true``/``false``,
quoted strings, lists) and otherwise taken as bare strings, then coerced to
the field's declared type.  Unknown keys are rejected.
"""

import json
from dataclasses import asdict, dataclass, fields, replace

from .errors import ConfigError
from .moe import EncoderConfig


@dataclass
class RunConfig:
    # data
    seed: int = 0
    data: str = ""                 # dataset file (line-delimited JSON); empty -> synthetic
    schema: str = ""               # schema sidecar; default <data dir>/schema.json
    preset: str = "custom"
    n_instances: int = 0           # 0 -> preset default
    val_ratio: float = 0.2
    test_ratio: float = 0.0
    max_len: int = 0               # 0 -> longest sequence in the batch
    # model
    d_model: int = 32
    d_ff: int = 64
    heads: int = 2
    blocks: int = 2
    experts: int = 4
    init_std: float = 0.02
    dtype: str = "float64"
    gate_convention: str = "switch"
    aux_balance_loss: float = 0.0
    positional_encoding: bool = False
    pooling: str = "max"
    # optimisation
    optimizer: str = "adam"
    lr: float = 1e-3
    warmup_frac: float = 0.05
    batch_size: int = 32
    epochs: int = 1
    max_steps: int = 0             # 0 -> run all epochs
    mask_rate: float = 0.15
    # multi-task weights
    bilevel: bool = False
    lambda_init: tuple = ()        # starting loss weights (projected to sum K); empty -> uniform
    eta_out: float = 0.1
    inner_outer_ratio: int = 50
    p_max: int = 100_000
    outer_batch_size: int = 256    # train/validation samples per outer step
    outer_aggregate: str = "mean"  # mean | weighted
    hypergrad: str = "unrolled"    # unrolled | finite-difference
    surrogate_space: str = "probability"  # probability | logit: what the validation hinge compares
    # fine-tuning
    freeze_encoder: bool = False
    eval_every: int = 0            # steps between validation records; 0 -> per epoch

    def encoder_config(self, max_len=0):
        return EncoderConfig(
            d_model=self.d_model, d_ff=self.d_ff, heads=self.heads, blocks=self.blocks,
            experts=self.experts, init_std=self.init_std, gate_convention=self.gate_convention,
            positional_encoding=self.positional_encoding, max_len=max_len or self.max_len,
            dtype=self.dtype,
        )

    def to_dict(self):
        d = asdict(self)
        d["lambda_init"] = list(d["lambda_init"])
        return d

    def with_overrides(self, **kw):
        return from_dict({**self.to_dict(), **kw})


_CHOICES = {
    "dtype": ("float64", "float32"),
    "gate_convention": ("switch", "literal"),
    "pooling": ("max", "mean"),
    "optimizer": ("adam", "sgd"),
    "outer_aggregate": ("mean", "weighted"),
    "hypergrad": ("unrolled", "finite-difference"),
    "surrogate_space": ("probability", "logit"),
}


def _coerce(name, value, typ):
    if typ in ("bool", bool):
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false", "1", "0", "yes", "no"):
            return value.lower() in ("true", "1", "yes")
        if value in (0, 1):
            return bool(value)
    elif typ in ("int", int):
        if isinstance(value, bool):
            raise ConfigError(f"{name}: expected int, got {value!r}")
        if isinstance(value, int) or (isinstance(value, float) and value.is_integer()):
            return int(value)
        if isinstance(value, str):
            try:
                return int(value)
            except ValueError:
                pass
    elif typ in ("float", float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        if isinstance(value, str):
            try:
                return float(value)
            except ValueError:
                pass
    elif typ in ("tuple", tuple):
        if isinstance(value, (list, tuple)) and all(
                isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
            return tuple(float(v) for v in value)
    elif typ in ("str", str):
        if isinstance(value, str):
            return value
        return str(value)
    raise ConfigError(f"{name}: cannot interpret {value!r} as {typ}")


def from_dict(d):
    known = {f.name: f for f in fields(RunConfig)}
    unknown = sorted(set(d) - set(known))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    values = {k: _coerce(k, v, known[k].type) for k, v in d.items()}
    cfg = replace(RunConfig(), **values)
    validate(cfg)
    return cfg


def validate(cfg):
    for name, allowed in _CHOICES.items():
        if getattr(cfg, name) not in allowed:
            raise ConfigError(f"{name} must be one of {allowed}, got {getattr(cfg, name)!r}")
    for name in ("d_model", "d_ff", "heads", "experts", "batch_size", "inner_outer_ratio", "p_max",
                 "outer_batch_size"):
        if getattr(cfg, name) < 1:
            raise ConfigError(f"{name} must be positive")
    for name in ("blocks", "epochs", "max_steps", "max_len", "n_instances", "eval_every"):
        if getattr(cfg, name) < 0:
            raise ConfigError(f"{name} must be non-negative")
    if cfg.d_model % cfg.heads:
        raise ConfigError("d_model must be divisible by heads")
    if not 0.0 <= cfg.mask_rate <= 1.0:
        raise ConfigError("mask_rate must lie in [0, 1]")
    if not (0.0 <= cfg.val_ratio <= 1.0 and 0.0 <= cfg.test_ratio <= 1.0) \
            or cfg.val_ratio + cfg.test_ratio > 1.0:
        raise ConfigError("val_ratio and test_ratio must lie in [0, 1] and sum to at most 1")
    if any(v < 0 for v in cfg.lambda_init):
        raise ConfigError("lambda_init must be non-negative")
    if cfg.lr <= 0 or cfg.eta_out < 0:
        raise ConfigError("learning rates must be positive (eta_out may be 0)")


def parse_text(text):
    d = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        try:
            d[key] = json.loads(val)
        except json.JSONDecodeError:
            d[key] = val
    return from_dict(d)


def load_config(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return parse_text(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None


def dump_text(cfg):
    return "".join(f"{k} = {json.dumps(v)}\n" for k, v in cfg.to_dict().items())
