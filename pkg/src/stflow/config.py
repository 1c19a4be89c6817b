"""Flat key=value run configuration with section prefixes (model.L=3).

The canonical serialization is a fixpoint: parse(serialize(cfg)) == cfg and
serializing again reproduces the same text. Unknown keys are hard errors so
typos cannot pass silently.
"""

import math
from dataclasses import dataclass, field, replace

from .model import ModelConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    # optimizer
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.99
    lr_decay: float = 0.5
    lr_decay_every: int = 200000
    grad_clip: float = 100.0
    ema_decay: float = 0.999
    # training
    epochs: int = 300
    batch: int = 64
    steps: int = 0  # when > 0, overrides the epoch count
    val_every: int = 100
    val_windows: int = 64
    checkpoint_every: int = 500
    # data
    data_path: str = ""
    context: int = 2
    fractions: tuple = (0.7, 0.2, 0.1)
    min_z: float = math.nan  # fitted during training; nan = not yet fitted
    max_z: float = math.nan
    # sampling / evaluation
    temperature: float = 1.0
    trajectories: int = 4
    leads: tuple = (1, 3, 5, 10)
    eval_windows: int = 8
    oracle: bool = False
    # run
    seed: int = 0
    outdir: str = "runs/run"


# key -> (owner, attribute, kind); owner "model" resolves against cfg.model
_SCHEMA = {
    "model.in_channels": ("model", "in_channels", "int"),
    "model.height": ("model", "height", "int"),
    "model.width": ("model", "width", "int"),
    "model.L": ("model", "levels", "int"),
    "model.K": ("model", "flow_steps", "int"),
    "model.Ch": ("model", "cond_channels", "int"),
    "model.coupling_hidden": ("model", "coupling_hidden", "int"),
    "model.gated_hidden": ("model", "gated_hidden", "int"),
    "model.gated_layers": ("model", "gated_layers", "int"),
    "model.actnorm": ("model", "actnorm", "bool"),
    "model.gated_residual": ("model", "gated_residual", "bool"),
    "model.cond_adapter": ("model", "cond_adapter", "str"),
    "optim.lr": ("", "lr", "float"),
    "optim.beta1": ("", "beta1", "float"),
    "optim.beta2": ("", "beta2", "float"),
    "optim.lr_decay": ("", "lr_decay", "float"),
    "optim.lr_decay_every": ("", "lr_decay_every", "int"),
    "optim.grad_clip": ("", "grad_clip", "float"),
    "optim.ema_decay": ("", "ema_decay", "float"),
    "train.epochs": ("", "epochs", "int"),
    "train.batch": ("", "batch", "int"),
    "train.steps": ("", "steps", "int"),
    "train.val_every": ("", "val_every", "int"),
    "train.val_windows": ("", "val_windows", "int"),
    "train.checkpoint_every": ("", "checkpoint_every", "int"),
    "data.path": ("", "data_path", "str"),
    "data.context": ("", "context", "int"),
    "data.fractions": ("", "fractions", "floats"),
    "data.min_z": ("", "min_z", "float"),
    "data.max_z": ("", "max_z", "float"),
    "sample.temperature": ("", "temperature", "float"),
    "eval.trajectories": ("", "trajectories", "int"),
    "eval.leads": ("", "leads", "ints"),
    "eval.windows": ("", "eval_windows", "int"),
    "eval.oracle": ("", "oracle", "bool"),
    "run.seed": ("", "seed", "int"),
    "run.outdir": ("", "outdir", "str"),
}

PRESETS = {
    # 16x16 single-channel runs that fit on a CPU
    "desk": {
        "model.height": "16", "model.width": "16", "model.L": "2",
        "model.K": "2", "model.Ch": "32", "model.coupling_hidden": "48",
        "model.gated_hidden": "32", "model.gated_layers": "1",
        "train.batch": "16",
    },
    # full-scale depth/width defaults
    "full": {
        "model.L": "3", "model.K": "4", "model.Ch": "64",
        "model.coupling_hidden": "512", "model.gated_hidden": "128",
        "model.gated_layers": "6", "train.batch": "64",
    },
}


def _parse_value(key, kind, raw):
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            if raw == "true":
                return True
            if raw == "false":
                return False
            raise ValueError("expected true or false")
        if kind == "floats":
            return tuple(float(p) for p in raw.split(",") if p != "")
        if kind == "ints":
            return tuple(int(p) for p in raw.split(",") if p != "")
        return raw
    except ValueError as e:
        raise ConfigError(f"bad value for {key}: {raw!r} ({e})") from None


def _format_value(kind, value):
    if kind == "int":
        return str(int(value))
    if kind == "float":
        return repr(float(value))
    if kind == "bool":
        return "true" if value else "false"
    if kind == "floats":
        return ",".join(repr(float(v)) for v in value)
    if kind == "ints":
        return ",".join(str(int(v)) for v in value)
    return str(value)


def _owner(cfg, owner_name):
    return cfg.model if owner_name == "model" else cfg


def set_key(cfg, key, raw_value):
    if key not in _SCHEMA:
        raise ConfigError(f"unknown config key: {key}")
    owner_name, attr, kind = _SCHEMA[key]
    setattr(_owner(cfg, owner_name), attr, _parse_value(key, kind, raw_value))


def parse_config(text, base=None):
    """Apply key=value lines (comments start with #) over a base config."""
    cfg = clone(base) if base is not None else RunConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = stripped.split("=", 1)
        try:
            set_key(cfg, key.strip(), raw)
        except ConfigError as e:
            raise ConfigError(f"line {lineno}: {e}") from None
    return cfg


def serialize_config(cfg):
    lines = []
    for key, (owner_name, attr, kind) in _SCHEMA.items():
        lines.append(f"{key}={_format_value(kind, getattr(_owner(cfg, owner_name), attr))}")
    return "\n".join(lines) + "\n"


def clone(cfg):
    return replace(cfg, model=replace(cfg.model))


def apply_preset(cfg, name):
    if name not in PRESETS:
        raise ConfigError(f"unknown preset: {name} (have {sorted(PRESETS)})")
    for key, raw in PRESETS[name].items():
        set_key(cfg, key, raw)
    return cfg


def apply_overrides(cfg, pairs):
    """pairs: iterable of 'section.key=value' strings (CLI pass-through)."""
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override must be key=value, got {pair!r}")
        key, raw = pair.split("=", 1)
        set_key(cfg, key.strip(), raw)
    return cfg
