"""Dataclass configuration for the network, augmentation, schedule, and runs.

RunConfig is parsed from a flat INI-style ``key = value`` text file ('#'
starts a comment, later assignments win). Unknown keys are rejected. Every
command echoes its fully resolved config for provenance.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from fractions import Fraction
from pathlib import Path

from .errors import ConfigError


def _parse_bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("true", "yes", "1", "on"):
        return True
    if v in ("false", "no", "0", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {s!r}")


def _parse_int_tuple(s: str) -> tuple[int, ...]:
    try:
        return tuple(int(part) for part in s.replace(" ", "").split(",") if part)
    except ValueError as e:
        raise ConfigError(f"expected comma-separated integers, got {s!r}") from e


def _parse_ratio(s: str) -> Fraction:
    s = s.strip()
    try:
        if "/" in s:
            num, den = s.split("/")
            return Fraction(int(num), int(den))
        return Fraction(s).limit_denominator(10_000)
    except (ValueError, ZeroDivisionError) as e:
        raise ConfigError(f"expected a ratio like 1/16, got {s!r}") from e


@dataclass(frozen=True)
class NetworkConfig:
    """Channel plans, dilation rates, and SE ratio of the network."""

    input_channels: int = 3
    encoder_channels: tuple[int, ...] = (64, 128, 256, 512)
    md_output_channels: int = 0      # 0 -> 2 * last encoder stage
    decoder_channels: tuple[int, ...] = ()   # () -> reversed encoder plan
    dilation_rates: tuple[int, ...] = (1, 2, 3, 4)
    se_ratio: Fraction = Fraction(1, 16)
    transposed_conv_bias: bool = True

    def __post_init__(self):
        if self.input_channels not in (1, 3):
            raise ConfigError(f"input_channels must be 1 or 3, got {self.input_channels}")
        enc = tuple(self.encoder_channels)
        if not enc or any(c < 1 for c in enc):
            raise ConfigError(f"bad encoder channel plan {enc}")
        for prev, cur in zip(enc, enc[1:]):
            if cur != 2 * prev:
                raise ConfigError(
                    f"encoder channels must double stage to stage (decoder halves them), got {enc}"
                )
        object.__setattr__(self, "encoder_channels", enc)
        if self.md_output_channels == 0:
            object.__setattr__(self, "md_output_channels", 2 * enc[-1])
        if self.md_output_channels != 2 * enc[-1]:
            raise ConfigError(
                f"md_output_channels must be 2x the last encoder stage "
                f"({2 * enc[-1]}), got {self.md_output_channels}"
            )
        dec = tuple(self.decoder_channels) or tuple(reversed(enc))
        if dec != tuple(reversed(enc)):
            raise ConfigError(
                f"decoder channels {dec} must be the reverse of encoder channels {enc}"
            )
        object.__setattr__(self, "decoder_channels", dec)
        rates = tuple(self.dilation_rates)
        if not rates or any(r < 1 for r in rates) or len(set(rates)) != len(rates):
            raise ConfigError(f"dilation rates must be distinct and >= 1, got {rates}")
        object.__setattr__(self, "dilation_rates", rates)
        ratio = self.se_ratio
        if not isinstance(ratio, Fraction):
            ratio = _parse_ratio(str(ratio))
            object.__setattr__(self, "se_ratio", ratio)
        if not 0 < ratio <= 1:
            raise ConfigError(f"se_ratio must be in (0, 1], got {ratio}")
        for c in dec:
            if (c * ratio.numerator) % ratio.denominator or c * ratio < 1:
                raise ConfigError(
                    f"se_ratio {ratio} does not give a positive integer bottleneck for {c} channels"
                )

    def se_bottleneck(self, channels: int) -> int:
        return int(channels * self.se_ratio)

    @property
    def num_blocks(self) -> int:
        return len(self.encoder_channels)

    @property
    def spatial_divisor(self) -> int:
        return 2 ** self.num_blocks

    def to_text(self) -> str:
        return (
            f"input_channels = {self.input_channels}\n"
            f"encoder_channels = {','.join(map(str, self.encoder_channels))}\n"
            f"md_output_channels = {self.md_output_channels}\n"
            f"dilation_rates = {','.join(map(str, self.dilation_rates))}\n"
            f"se_ratio = {self.se_ratio.numerator}/{self.se_ratio.denominator}\n"
            f"transposed_conv_bias = {str(self.transposed_conv_bias).lower()}\n"
        )

    @classmethod
    def from_text(cls, text: str) -> "NetworkConfig":
        kwargs = {}
        for key, value in _iter_assignments(text):
            if key == "input_channels":
                kwargs["input_channels"] = int(value)
            elif key == "encoder_channels":
                kwargs["encoder_channels"] = _parse_int_tuple(value)
            elif key == "md_output_channels":
                kwargs["md_output_channels"] = int(value)
            elif key == "dilation_rates":
                kwargs["dilation_rates"] = _parse_int_tuple(value)
            elif key == "se_ratio":
                kwargs["se_ratio"] = _parse_ratio(value)
            elif key == "transposed_conv_bias":
                kwargs["transposed_conv_bias"] = _parse_bool(value)
            else:
                raise ConfigError(f"unknown network config key {key!r}")
        return cls(**kwargs)


@dataclass(frozen=True)
class AugmentConfig:
    """Which augmentations run and how strong the colour jitter is.

    Enabled geometric transforms and the jitter are applied as independent
    p=0.5 coin flips per sample; the crop (when set) always runs.
    """

    rot90: bool = True
    rot180: bool = True
    hflip: bool = True
    color_jitter: bool = True
    brightness: float = 0.2
    contrast: float = 0.2
    saturation: float = 0.2
    crop_size: int | None = 288

    def __post_init__(self):
        for name in ("brightness", "contrast", "saturation"):
            if getattr(self, name) < 0:
                raise ConfigError(f"jitter amplitude {name} must be >= 0")
        if self.crop_size is not None and self.crop_size < 1:
            raise ConfigError(f"crop_size must be positive, got {self.crop_size}")


@dataclass(frozen=True)
class Schedule:
    """Piecewise-constant learning rate: base divided by decay at each milestone."""

    base_lr: float = 0.01
    decay_factor: float = 10.0
    milestones: tuple[int, ...] = (50, 80, 110)
    epochs: int = 120

    def __post_init__(self):
        if self.base_lr <= 0 or self.decay_factor <= 1:
            raise ConfigError("base_lr must be > 0 and decay_factor > 1")
        ms = tuple(self.milestones)
        if any(m2 <= m1 for m1, m2 in zip(ms, ms[1:])) or any(
            not 0 < m < self.epochs for m in ms
        ):
            raise ConfigError(f"milestones {ms} must be increasing and inside (0, {self.epochs})")
        object.__setattr__(self, "milestones", ms)
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")


@dataclass
class RunConfig:
    """Everything one run needs; see configs/ for the shipped recipes."""

    network: NetworkConfig = field(default_factory=NetworkConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    schedule: Schedule = field(default_factory=Schedule)
    batch_size: int = 1
    momentum: float = 0.9
    weight_decay: float = 0.0001
    seed: int = 0
    checkpoint_every: int = 0            # 0 -> only the final checkpoint
    manifest: str = ""                   # single manifest, split at runtime...
    train_fraction: float = 0.0          # ...with this fraction (0 -> no split)
    train_manifest: str = ""             # or explicit train/test manifests
    test_manifest: str = ""
    model_path: str = ""
    out_dir: str = ""
    tile_size: int = 512
    threshold: float = 0.5
    margin: int = 2
    overlay_min: float = 0.05

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigError("threshold must be in [0, 1]")
        if self.margin < 0:
            raise ConfigError("margin must be >= 0")
        if self.train_fraction and not 0.0 < self.train_fraction < 1.0:
            raise ConfigError("train_fraction must be in (0, 1)")


# key -> (target, attribute, parser); targets are RunConfig sub-objects
_KEYS = {
    "input_channels": ("network", "input_channels", int),
    "encoder_channels": ("network", "encoder_channels", _parse_int_tuple),
    "md_output_channels": ("network", "md_output_channels", int),
    "dilation_rates": ("network", "dilation_rates", _parse_int_tuple),
    "se_ratio": ("network", "se_ratio", _parse_ratio),
    "transposed_conv_bias": ("network", "transposed_conv_bias", _parse_bool),
    "rot90": ("augment", "rot90", _parse_bool),
    "rot180": ("augment", "rot180", _parse_bool),
    "hflip": ("augment", "hflip", _parse_bool),
    "color_jitter": ("augment", "color_jitter", _parse_bool),
    "jitter_brightness": ("augment", "brightness", float),
    "jitter_contrast": ("augment", "contrast", float),
    "jitter_saturation": ("augment", "saturation", float),
    "crop_size": ("augment", "crop_size", lambda s: None if s.strip() in ("", "none") else int(s)),
    "base_lr": ("schedule", "base_lr", float),
    "lr_decay": ("schedule", "decay_factor", float),
    "lr_milestones": ("schedule", "milestones", _parse_int_tuple),
    "epochs": ("schedule", "epochs", int),
    "batch_size": ("", "batch_size", int),
    "momentum": ("", "momentum", float),
    "weight_decay": ("", "weight_decay", float),
    "seed": ("", "seed", int),
    "checkpoint_every": ("", "checkpoint_every", int),
    "manifest": ("", "manifest", str),
    "train_fraction": ("", "train_fraction", float),
    "train_manifest": ("", "train_manifest", str),
    "test_manifest": ("", "test_manifest", str),
    "model_path": ("", "model_path", str),
    "out_dir": ("", "out_dir", str),
    "tile_size": ("", "tile_size", int),
    "threshold": ("", "threshold", float),
    "margin": ("", "margin", int),
    "overlay_min": ("", "overlay_min", float),
}


def _iter_assignments(text: str):
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        yield key.strip(), value.strip()


def parse_run_config(text: str, overrides: dict[str, str] | None = None) -> RunConfig:
    """Parse key=value text (plus CLI overrides) into a validated RunConfig."""
    raw: dict[str, str] = {}
    for key, value in _iter_assignments(text):
        if key not in _KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        raw[key] = value
    for key, value in (overrides or {}).items():
        if key not in _KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        raw[key] = str(value)

    grouped: dict[str, dict[str, object]] = {"": {}, "network": {}, "augment": {}, "schedule": {}}
    for key, value in raw.items():
        target, attr, parser = _KEYS[key]
        try:
            grouped[target][attr] = parser(value)
        except ConfigError:
            raise
        except (TypeError, ValueError) as e:
            raise ConfigError(f"bad value for {key!r}: {value!r}") from e

    return RunConfig(
        network=NetworkConfig(**grouped["network"]),
        augment=AugmentConfig(**grouped["augment"]),
        schedule=Schedule(**grouped["schedule"]),
        **grouped[""],
    )


def load_run_config(path: str | Path, overrides: dict[str, str] | None = None) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from e
    return parse_run_config(text, overrides)


def run_config_text(cfg: RunConfig) -> str:
    """Serialize the fully resolved config back to parseable key=value text."""
    net, aug, sch = cfg.network, cfg.augment, cfg.schedule
    lines = [
        net.to_text().rstrip("\n"),
        f"rot90 = {str(aug.rot90).lower()}",
        f"rot180 = {str(aug.rot180).lower()}",
        f"hflip = {str(aug.hflip).lower()}",
        f"color_jitter = {str(aug.color_jitter).lower()}",
        f"jitter_brightness = {aug.brightness}",
        f"jitter_contrast = {aug.contrast}",
        f"jitter_saturation = {aug.saturation}",
        f"crop_size = {'none' if aug.crop_size is None else aug.crop_size}",
        f"base_lr = {sch.base_lr}",
        f"lr_decay = {sch.decay_factor}",
        f"lr_milestones = {','.join(map(str, sch.milestones))}",
        f"epochs = {sch.epochs}",
    ]
    for key in (
        "batch_size", "momentum", "weight_decay", "seed", "checkpoint_every",
        "manifest", "train_fraction", "train_manifest", "test_manifest",
        "model_path", "out_dir", "tile_size", "threshold", "margin", "overlay_min",
    ):
        lines.append(f"{key} = {getattr(cfg, key)}")
    return "\n".join(lines) + "\n"
