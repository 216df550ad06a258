"""Run configuration: one JSON document holding encoder, training, seed, dtype and paths.

Unknown keys and wrongly typed values are rejected with their key path
(``encoder.C``). ``M3D_SEED`` in the environment overrides ``seed``.
"""

from __future__ import annotations

import json
import os
from dataclasses import MISSING, dataclass, field, fields

from .encoder import EncoderConfig
from .training import TrainHyper

SEED_ENV = "M3D_SEED"
DTYPES = ("f32", "f64")


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


@dataclass
class RunConfig:
    seed: int = 0
    dtype: str = "f64"
    data: str | None = None  # dataset directory or manifest
    out: str | None = None  # output directory
    init_checkpoint: str | None = None  # encoder weights to fine-tune from
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainHyper = field(default_factory=TrainHyper)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["encoder"] = self.encoder.to_dict()
        d["train"] = self.train.to_dict()
        return d

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


PRESETS = {
    "full": {},
    "desk": {"dtype": "f32",
             "encoder": {"depth": 4, "C": 64, "L": 16, "K": 16, "N": 256, "n_classes": 3},
             "train": {"epochs": 50}},
    "tiny": {"encoder": {"depth": 1, "C": 16, "k": 3, "L": 8, "K": 8, "N": 64, "d_state": 4,
                         "embed_dims": [8, 16, 16], "pos_hidden": 8, "head_hidden": 16, "n_classes": 3},
             "train": {"epochs": 5, "batch_size": 8, "warmup_epochs": 1, "decoder_depth": 1}},
}


def _default(f):
    if f.default is not MISSING:
        return f.default
    return f.default_factory()


def _check_value(path: str, value, default):
    """Type check against the field default: ints stay ints, floats accept ints, tuples come as lists."""
    if default is None:
        if value is not None and (not isinstance(value, int) or isinstance(value, bool)):
            raise ConfigError(path, f"expected an integer or null, got {value!r}")
    elif isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected true or false, got {value!r}")
    elif isinstance(default, int):
        if not isinstance(value, int) or isinstance(value, bool):
            raise ConfigError(path, f"expected an integer, got {value!r}")
    elif isinstance(default, float):
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise ConfigError(path, f"expected a number, got {value!r}")
    elif isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
    elif isinstance(default, tuple):
        if not isinstance(value, list) or len(value) != len(default):
            raise ConfigError(path, f"expected a list of {len(default)} numbers, got {value!r}")
        for i, (v, d) in enumerate(zip(value, default)):
            _check_value(f"{path}[{i}]", v, d)


def _section(path: str, cls, d):
    if not isinstance(d, dict):
        raise ConfigError(path, f"expected an object, got {type(d).__name__}")
    known = {f.name: f for f in fields(cls)}
    for key, value in d.items():
        if key not in known:
            raise ConfigError(f"{path}.{key}", f"unknown key; expected one of {sorted(known)}")
        _check_value(f"{path}.{key}", value, _default(known[key]))
    try:
        return cls(**d)
    except (ValueError, TypeError) as e:
        raise ConfigError(path, str(e)) from None


def from_dict(d: dict) -> RunConfig:
    if not isinstance(d, dict):
        raise ConfigError("", f"config must be a JSON object, got {type(d).__name__}")
    kw = {}
    for key, value in d.items():
        if key == "encoder":
            kw[key] = _section("encoder", EncoderConfig, value)
        elif key == "train":
            kw[key] = _section("train", TrainHyper, value)
        elif key == "seed":
            _check_value(key, value, 0)
            kw[key] = value
        elif key == "dtype":
            if value not in DTYPES:
                raise ConfigError(key, f"expected one of {DTYPES}, got {value!r}")
            kw[key] = value
        elif key in ("data", "out", "init_checkpoint"):
            if value is not None and not isinstance(value, str):
                raise ConfigError(key, f"expected a path string or null, got {value!r}")
            kw[key] = value
        else:
            raise ConfigError(key, f"unknown key; expected one of {sorted(f.name for f in fields(RunConfig))}")
    return RunConfig(**kw)


def loads(text: str) -> RunConfig:
    try:
        d = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError("", f"invalid JSON at line {e.lineno} column {e.colno}: {e.msg}") from None
    return from_dict(d)


def load(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return loads(fh.read())


def merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        out[k] = merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def preset(name: str) -> RunConfig:
    if name not in PRESETS:
        raise ConfigError("preset", f"unknown preset {name!r}; expected one of {sorted(PRESETS)}")
    return from_dict(PRESETS[name])


def apply_env(cfg: RunConfig, environ=None) -> RunConfig:
    environ = os.environ if environ is None else environ
    raw = environ.get(SEED_ENV)
    if raw is None or raw == "":
        return cfg
    try:
        cfg.seed = int(raw)
    except ValueError:
        raise ConfigError(SEED_ENV, f"expected an integer, got {raw!r}") from None
    return cfg
