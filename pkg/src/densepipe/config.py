"""``key = value`` run configuration shared by every CLI subcommand.

Precedence, highest first: command-line flags, the config file, the
``DENSEPIPE_SEED`` environment variable (seed only), built-in defaults.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, fields

from .errors import ConfigError, ConfigFileError, ConfigValueError, UnknownKeyError
from .model import HEAD_PRESETS, DenseNetConfig, HeadConfig
from .train import TrainConfig

SEED_ENV = "DENSEPIPE_SEED"
RESOLUTION_PRESETS = (96, 128, 224)
ARCHITECTURES = ("densenet121", "toy")


def _bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError("expected true/false")


def _int_list(text):
    parts = [p.strip() for p in text.split(",") if p.strip()]
    if not parts:
        raise ValueError("expected a comma-separated list of integers")
    return [int(p) for p in parts]


def _head(text):
    t = text.strip()
    if t.upper() in HEAD_PRESETS:
        return t.upper()
    widths = _int_list(t)
    if any(w < 1 for w in widths):
        raise ValueError("head widths must be positive")
    return ",".join(str(w) for w in widths)


def _choice(*options):
    def parse(text):
        t = text.strip().lower()
        if t not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return t
    return parse


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise ValueError("must be >= 1")
    return v


def _fraction(text):
    v = float(text)
    if not 0.0 <= v <= 1.0:
        raise ValueError("must lie in [0, 1]")
    return v


def _path(text):
    return text.strip() or None


# key -> (parser, help); defaults live on CliConfig
SCHEMA = {
    # training (Table 5 defaults)
    "learning_rate": (float, "optimizer step size"),
    "batch_size": (_positive_int, "mini-batch size"),
    "epochs": (_positive_int, "maximum epochs"),
    "optimizer": (_choice("adam", "sgd", "rmsprop"), "adam, sgd or rmsprop"),
    "dropout_rate": (float, "dropout after each head dense layer"),
    "seed": (int, "master seed (falls back to $DENSEPIPE_SEED, then 0)"),
    "early_stop_patience": (int, "epochs without improvement before stopping; 0 disables"),
    "class_weighting": (_choice("none", "inverse_frequency"), "loss class weighting"),
    # model
    "architecture": (_choice(*ARCHITECTURES), "base layout the model keys below modify"),
    "model_kind": (_choice("dense", "plain"), "dense connectivity or a plain chain"),
    "growth_rate": (_positive_int, "feature maps added per dense layer"),
    "block_sizes": (_int_list, "layers per dense block, comma separated"),
    "compression": (float, "transition compression factor"),
    "stem_channels": (_positive_int, "stem output channels"),
    "stem_kernel": (_positive_int, "stem kernel size"),
    "stem_stride": (_positive_int, "stem stride"),
    "stem_pool": (_bool, "2x2 pool after the stem"),
    "bottleneck_multiplier": (_positive_int, "1x1 bottleneck width in units of the growth rate"),
    "head": (_head, "head preset A-D or comma-separated dense widths"),
    "resolution": (_positive_int, "input size (presets 96, 128, 224)"),
    "channels": (_choice("1", "3"), "input planes"),
    "equalize": (_bool, "histogram-equalize images before resizing"),
    # data and paths
    "manifest": (_path, "dataset manifest CSV"),
    "val_manifest": (_path, "explicit validation manifest (skips splitting)"),
    "test_manifest": (_path, "explicit test manifest (skips splitting)"),
    "checkpoint": (_path, "checkpoint file to write or read"),
    "base_checkpoint": (_path, "checkpoint to transfer a backbone from"),
    "out_dir": (_path, "output directory"),
    "split_train": (float, "train fraction"),
    "split_validation": (float, "validation fraction"),
    "split_test": (float, "test fraction"),
    # command specific
    "freeze": (_choice("none", "backbone"), "parameters to freeze when transferring"),
    "folds": (_positive_int, "cross-validation folds"),
    "n": (_positive_int, "synthetic images to generate"),
    "class_balance": (_fraction, "share of class 0 in synthetic data"),
    "variant": (str, "synthetic stream name"),
    "target_layer": (_path, "Grad-CAM layer (default: last dense block)"),
    "alpha": (_fraction, "overlay opacity"),
    "warmup": (int, "untimed benchmark passes"),
    "runs": (_positive_int, "timed benchmark passes"),
    "threads": (_positive_int, "BLAS thread cap"),
}


@dataclass
class CliConfig:
    learning_rate: float = 1e-4
    batch_size: int = 16
    epochs: int = 50
    optimizer: str = "adam"
    dropout_rate: float = 0.5
    seed: int = 0
    early_stop_patience: int = 5
    class_weighting: str = "inverse_frequency"
    architecture: str = "densenet121"
    model_kind: str = "dense"
    growth_rate: int | None = None
    block_sizes: list | None = None
    compression: float | None = None
    stem_channels: int | None = None
    stem_kernel: int | None = None
    stem_stride: int | None = None
    stem_pool: bool | None = None
    bottleneck_multiplier: int | None = None
    head: str | None = None
    resolution: int | None = None
    channels: str | None = None
    equalize: bool = True
    manifest: str | None = None
    val_manifest: str | None = None
    test_manifest: str | None = None
    checkpoint: str | None = None
    base_checkpoint: str | None = None
    out_dir: str | None = None
    split_train: float = 0.64
    split_validation: float = 0.16
    split_test: float = 0.20
    freeze: str = "none"
    folds: int = 5
    n: int = 1000
    class_balance: float = 0.5
    variant: str = "main"
    target_layer: str | None = None
    alpha: float = 0.4
    warmup: int = 3
    runs: int = 20
    threads: int | None = None

    def train_config(self):
        cfg = TrainConfig(self.learning_rate, self.batch_size, self.epochs, self.optimizer,
                          self.dropout_rate, self.seed, self.early_stop_patience,
                          self.class_weighting)
        cfg.validate()
        return cfg

    def model_config(self, num_classes=2):
        """Start from the named architecture, then apply every explicit model key."""
        base = DenseNetConfig.toy() if self.architecture == "toy" else DenseNetConfig.densenet121()
        for key in ("growth_rate", "compression", "stem_channels", "stem_kernel", "stem_stride",
                    "stem_pool", "bottleneck_multiplier"):
            value = getattr(self, key)
            if value is not None:
                setattr(base, key, value)
        if self.block_sizes is not None:
            base.block_sizes = list(self.block_sizes)
        if self.head is not None:
            if self.head in HEAD_PRESETS:
                base.head = HeadConfig.preset(self.head, self.dropout_rate)
            else:
                base.head = HeadConfig(_int_list(self.head), self.dropout_rate)
        base.head.dropout_rate = self.dropout_rate
        if self.resolution is not None:
            base.input_resolution = self.resolution
        if self.channels is not None:
            base.in_channels = int(self.channels)
        base.num_classes = num_classes
        base.seed = self.seed
        base.validate()
        return base

    def effective_resolution(self):
        if self.resolution is not None:
            return self.resolution
        return 32 if self.architecture == "toy" else 224


KEYS = tuple(f.name for f in fields(CliConfig))


def parse_value(key, text):
    if key not in SCHEMA:
        raise UnknownKeyError(key)
    parser = SCHEMA[key][0]
    try:
        return parser(text)
    except (ValueError, TypeError) as exc:
        raise ConfigValueError(key, text, str(exc)) from None


def parse_config_text(text, source="<config>"):
    """Parse ``key = value`` lines into a dict of typed values."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigFileError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, _, value = line.partition("=")
        key = key.strip().replace("-", "_")
        value = value.strip()
        if not value:
            # an empty value leaves the key at its default
            if key not in SCHEMA:
                raise UnknownKeyError(key)
            values.pop(key, None)
            continue
        values[key] = parse_value(key, value)
    return values


def read_config_file(path):
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except FileNotFoundError:
        raise ConfigFileError(f"config file not found: {path}") from None
    except (OSError, UnicodeDecodeError) as exc:
        raise ConfigFileError(f"cannot read config file {path}: {exc}") from None
    return parse_config_text(text, path)


def load_config(path=None, overrides=None, environ=None):
    """Build a CliConfig from defaults, environment, file and flag overrides.

    ``overrides`` maps keys to typed values (flags already parsed) or raw
    strings, which are parsed like file values.
    """
    environ = os.environ if environ is None else environ
    values = {}
    if environ.get(SEED_ENV, "").strip():
        values["seed"] = parse_value("seed", environ[SEED_ENV])
    if path is not None:
        values.update(read_config_file(path))
    for key, value in (overrides or {}).items():
        key = key.replace("-", "_")
        if key not in SCHEMA:
            raise UnknownKeyError(key)
        values[key] = parse_value(key, value) if isinstance(value, str) else value
    cfg = CliConfig(**values)
    validate_config(cfg)
    return cfg


def validate_config(cfg):
    if not cfg.learning_rate > 0:
        raise ConfigValueError("learning_rate", cfg.learning_rate, "must be positive")
    if not 0.0 <= cfg.dropout_rate < 1.0:
        raise ConfigValueError("dropout_rate", cfg.dropout_rate, "must lie in [0, 1)")
    if cfg.early_stop_patience < 0:
        raise ConfigValueError("early_stop_patience", cfg.early_stop_patience, "must be >= 0")
    fracs = (cfg.split_train, cfg.split_validation, cfg.split_test)
    if any(not f > 0 for f in fracs) or abs(sum(fracs) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must be positive and sum to 1, got {fracs}")


def format_value(value):
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, list):
        return ",".join(str(v) for v in value)
    return str(value)


def config_text(cfg):
    lines = [f"{key} = {format_value(getattr(cfg, key))}" for key in KEYS]
    return "\n".join(lines) + "\n"


def write_config(cfg, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(config_text(cfg))
