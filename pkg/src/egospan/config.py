"""Run configuration dataclasses and plain-text key=value parsing.

Every tunable lives here rather than in the model code: channel widths,
bottleneck sizes, optimizer settings, and loss weights. Config files are
plain ``key = value`` lines so they diff cleanly and need no parser
beyond the standard library.
"""

from dataclasses import dataclass, fields, replace

from .exceptions import ConfigError
from .volume import DEFAULT_VOLUME_SIDE

VARIANTS = ("fused", "motion_only", "shape_only")


@dataclass(frozen=True)
class NetConfig:
    """Architecture widths for every network in the pipeline.

    The two bottleneck sizes (motion_feature_dim, balanced_dim) are the
    load-bearing ones: the balanced shape feature is deliberately much
    narrower than the motion feature so neither input can drown out the
    other. Everything else is sized for desk-scale training.
    """

    motion_channels: tuple = (8, 16, 32, 64)
    motion_feature_dim: int = 512
    shape_pool: int = 4
    shapefeat_channels: tuple = (8, 16, 16)
    balanced_dim: int = 16
    body_hidden: int = 128
    head_hidden: int = 32
    seg_encoder_channels: tuple = (8, 12, 16, 24)
    seg_decoder_channels: tuple = (16, 12, 8)
    use_coordinate_maps: bool = True
    use_height_channel: bool = True
    variant: str = "fused"
    volume_channels: tuple = (4, 8, 8)
    volume_fc_dim: int = 128
    stage2_hidden: int = 128

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS},"
                              f" got {self.variant!r}")
        if len(self.seg_decoder_channels) != len(
                self.seg_encoder_channels) - 1:
            raise ConfigError(
                "segmentation decoder needs exactly one fewer stage than"
                f" the encoder, got {self.seg_decoder_channels} against"
                f" {self.seg_encoder_channels}")


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings shared by all training entry points."""

    seed: int = 0
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 1e-3
    lr_decay: float = 1.0
    optimizer: str = "adam"
    momentum: float = 0.9
    alpha: float = 0.01
    beta: float = 0.01
    gamma: float = 0.001
    consistency_downscale: int = 4
    deterministic: bool = True
    preflight: bool = True
    history_rows: int = 64
    volume_side: float = DEFAULT_VOLUME_SIDE

    def __post_init__(self):
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(
                f"optimizer must be adam or sgd, got {self.optimizer!r}")
        for name in ("alpha", "beta", "gamma"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ConfigError(
                f"lr_decay must be in (0, 1], got {self.lr_decay}")


def _coerce(name, text, example):
    """Parse `text` into the type of the default value `example`."""
    text = text.strip()
    if isinstance(example, bool):
        low = text.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {text!r}")
    if isinstance(example, int):
        try:
            return int(text)
        except ValueError:
            raise ConfigError(f"{name}: expected an integer, got {text!r}")
    if isinstance(example, float):
        try:
            return float(text)
        except ValueError:
            raise ConfigError(f"{name}: expected a number, got {text!r}")
    if isinstance(example, tuple):
        try:
            return tuple(int(v) for v in text.split(",") if v.strip())
        except ValueError:
            raise ConfigError(
                f"{name}: expected comma-separated integers, got {text!r}")
    return text


def apply_settings(cfg, items):
    """Return a copy of a config dataclass with key=value overrides.

    Args:
        cfg: a NetConfig or TrainConfig (any dataclass instance).
        items: iterable of (key, value-string) pairs.

    Unknown keys are rejected with the full list of valid ones, so a
    typo cannot silently fall back to a default.
    """
    valid = {f.name: getattr(cfg, f.name) for f in fields(cfg)}
    updates = {}
    for key, value in items:
        key = key.strip()
        if key not in valid:
            known = ", ".join(sorted(valid))
            raise ConfigError(f"unknown setting {key!r} (valid: {known})")
        updates[key] = _coerce(key, value, valid[key])
    return replace(cfg, **updates)


def parse_settings(text):
    """Split key=value lines into (key, value) pairs.

    Blank lines and lines starting with # are skipped; anything else
    must contain an equals sign.
    """
    pairs = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(
                f"line {lineno}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        pairs.append((key.strip(), value.strip()))
    return pairs


def load_config(path, cfg):
    """Apply a key=value file on top of a config dataclass."""
    with open(path, "r", encoding="ascii") as fh:
        text = fh.read()
    return apply_settings(cfg, parse_settings(text))
