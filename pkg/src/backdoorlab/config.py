"""Run configuration: flat TOML key=value files with full defaults.

Every hyperparameter of a run is a named key so that one config file
(plus a seed) pins an experiment completely. Unknown keys are rejected
rather than ignored.
"""

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

DATA_DIR_ENV = "BACKDOORLAB_DATA"


class ConfigError(ValueError):
    """Bad or inconsistent run configuration."""


def default_data_dir():
    return os.environ.get(DATA_DIR_ENV, "data")


@dataclass
class RunConfig:
    # dataset
    dataset: str = "synthetic"            # synthetic | idx | cifar10
    data_dir: str = field(default_factory=default_data_dir)
    classes: int = 10
    train_per_class: int = 200
    test_per_class: int = 100
    image_shape: list = field(default_factory=lambda: [1, 28, 28])
    noise: float = 0.25
    max_shift: int = 2

    # attack
    attack: str = "badnet"                # badnet | blend | sig | tact | adaptive_blend | none
    poison_ratio: float = 0.05
    cover_rate: float = 0.01
    target: int = 1
    source: int = 0
    blend_alpha: float = 0.2
    sig_delta: float = 20.0 / 255.0
    sig_freq: int = 6

    # model
    model: str = "cnn"                    # cnn | mlp
    conv_channels: list = field(default_factory=lambda: [16, 32])
    mlp_hidden: list = field(default_factory=lambda: [64])

    # defense schedule
    eps: float = 0.001
    patch_size: int = 2
    gamma: float = 0.05
    enhance_epochs: int = 10
    standard_epochs: int = 30
    lr_train: float = 0.1
    lr_unlearn: float = 0.0001
    batch_size: int = 32
    unlearn_clip: float = 5.0
    perturb_mode: str = "replace"         # replace | add

    # relabel-and-relearn stage
    relearn: bool = False
    relearn_epochs: int = 10
    relearn_lr: float = 0.05

    # undefended baseline training
    baseline_epochs: int = 10

    # kernel oracle
    kernel_gamma: float = 0.0             # 0 -> auto 1/(2*pixels)
    kernel_ratios: list = field(default_factory=lambda: [0.1, 0.25, 0.5, 1.0])

    seed: int = 0
    out: str = "runs/run"

    def validate(self):
        if self.dataset not in ("synthetic", "idx", "cifar10"):
            raise ConfigError(f"unknown dataset {self.dataset!r}")
        if self.attack not in ("badnet", "blend", "sig", "tact", "adaptive_blend", "none"):
            raise ConfigError(f"unknown attack {self.attack!r}")
        if self.model not in ("cnn", "mlp"):
            raise ConfigError(f"unknown model {self.model!r}")
        if self.perturb_mode not in ("replace", "add"):
            raise ConfigError(f"unknown perturb_mode {self.perturb_mode!r}")
        if len(self.image_shape) != 3:
            raise ConfigError("image_shape must be [C, H, W]")
        if self.classes < 2:
            raise ConfigError("need at least 2 classes")
        if not (0 <= self.target < self.classes):
            raise ConfigError("target class out of range")
        if self.attack == "tact" and not (0 <= self.source < self.classes):
            raise ConfigError("source class out of range")
        if self.attack == "tact" and self.source == self.target:
            raise ConfigError("tact source and target classes must differ")
        return self


_FIELD_TYPES = {f.name: f for f in fields(RunConfig)}


def _coerce(key, value):
    ftype = _FIELD_TYPES[key].type
    if ftype in ("float", float) and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    return value


def make_config(overrides=None, **kwargs):
    """RunConfig from a dict of overrides, validated."""
    values = dict(overrides or {})
    values.update(kwargs)
    unknown = set(values) - set(_FIELD_TYPES)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    cfg = RunConfig(**{k: _coerce(k, v) for k, v in values.items()})
    return cfg.validate()


def load_config(path):
    try:
        with open(path, "rb") as f:
            raw = tomllib.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"cannot parse {path}: {e}")
    return make_config(raw)


def parse_override(text):
    """Parse a --set key=value string; value read as a TOML literal."""
    if "=" not in text:
        raise ConfigError(f"override must look like key=value, got {text!r}")
    key, value = text.split("=", 1)
    key = key.strip()
    try:
        parsed = tomllib.loads(f"v = {value.strip()}")["v"]
    except tomllib.TOMLDecodeError:
        parsed = value.strip()
    return key, parsed


def _toml_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, list):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    return json.dumps(str(v))


def write_config_echo(cfg, path):
    """Flat TOML echo of the effective configuration, keys sorted."""
    lines = [f"{k} = {_toml_value(v)}" for k, v in sorted(asdict(cfg).items())]
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def config_hash(cfg):
    blob = json.dumps(asdict(cfg), sort_keys=True)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()
