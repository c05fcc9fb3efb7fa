"""Run configuration: typed dataclasses plus a flat dotted-key document format.

A config file is a YAML mapping whose keys are dotted paths, e.g.::

    mode: DCL
    data.root: datasets/horse2zebra
    nce.temperature: 0.07
    loss.lambda_nce: 2.0

Nested mappings (``nce: {temperature: 0.07}``) are flattened on load.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from .errors import ConfigError

MODES = ("DCL", "SimDCL")
GAN_VARIANTS = ("hinge", "lsgan", "log")
DEFAULT_NCE_LAYERS = ("down1", "down2", "res1", "res5")
TAP_NAMES = ("rgb",) + DEFAULT_NCE_LAYERS

# per-mode defaults applied when epochs / lr are left unset
MODE_DEFAULTS = {"DCL": {"epochs": 400, "lr": 1e-4}, "SimDCL": {"epochs": 200, "lr": 2e-4}}
DEFAULT_CYCLE_WEIGHT = 10.0


@dataclass
class AblationFlags:
    include_rgb_layer: bool = False  # I
    external_negatives: bool = False  # II
    shared_embedding: bool = False  # III
    cycle_loss: bool = False  # IV
    single_direction: bool = False  # V

    def validate(self, mode: str) -> None:
        if self.single_direction:
            clash = [
                name
                for name in ("external_negatives", "shared_embedding", "cycle_loss")
                if getattr(self, name)
            ]
            if mode == "SimDCL":
                clash.append("mode=SimDCL")
            if clash:
                raise ConfigError(
                    "single_direction cannot be combined with " + ", ".join(clash)
                )

    def active(self) -> list[str]:
        return [f.name for f in fields(self) if getattr(self, f.name)]


ABLATIONS = {
    "I": "include_rgb_layer",
    "II": "external_negatives",
    "III": "shared_embedding",
    "IV": "cycle_loss",
    "V": "single_direction",
}


@dataclass
class LossWeights:
    lambda_gan: float = 1.0
    lambda_nce: float = 2.0
    lambda_idt: float = 1.0
    lambda_sim: float = 10.0
    lambda_cycle: float | None = None  # resolved: 0, or 10 under ablation IV
    gan_variant: str = "hinge"

    def validate(self) -> None:
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "gan_variant":
                if v not in GAN_VARIANTS:
                    raise ConfigError(f"loss.gan_variant must be one of {GAN_VARIANTS}, got {v!r}")
            elif v is not None and v < 0:
                raise ConfigError(f"loss.{f.name} must be >= 0, got {v}")


@dataclass
class NCEConfig:
    temperature: float = 0.07
    num_patches: int = 256
    layers: tuple[str, ...] = DEFAULT_NCE_LAYERS
    include_rgb_layer: bool = False
    external_negatives: bool = False

    def validate(self) -> None:
        if not self.temperature > 0:
            raise ConfigError(f"nce.temperature must be > 0, got {self.temperature}")
        if self.num_patches < 2:
            raise ConfigError("nce.num_patches must be >= 2")
        bad = [l for l in self.layers if l not in DEFAULT_NCE_LAYERS]
        if bad or not self.layers:
            raise ConfigError(f"nce.layers must be a non-empty subset of {DEFAULT_NCE_LAYERS}, got {bad}")

    def tap_layers(self) -> tuple[str, ...]:
        return (("rgb",) if self.include_rgb_layer else ()) + tuple(self.layers)


@dataclass
class NetConfig:
    n_residual_blocks: int = 9
    base_width: int = 64
    antialias: bool = True
    proj_dim: int = 256
    light_dim: int = 64
    init_gain: float = 0.02  # xavier gain; only affects initialization

    def validate(self) -> None:
        if self.init_gain <= 0:
            raise ConfigError(f"net.init_gain must be > 0, got {self.init_gain}")
        if self.n_residual_blocks < 5:
            raise ConfigError("net.n_residual_blocks must be >= 5 (res5 is a feature tap)")
        if self.base_width < 1 or self.proj_dim < 1 or self.light_dim < 1:
            raise ConfigError("network widths must be positive")


@dataclass
class DataConfig:
    root: str | None = None
    dir_x: str | None = None
    dir_y: str | None = None
    load_size: int = 286
    crop_size: int = 256
    flip: bool = True
    workers: int = 0

    def resolved_dirs(self) -> tuple[str, str]:
        if self.dir_x and self.dir_y:
            return self.dir_x, self.dir_y
        if self.root:
            return str(Path(self.root) / "trainA"), str(Path(self.root) / "trainB")
        raise ConfigError("set data.root or both data.dir_x and data.dir_y")

    def validate(self) -> None:
        if self.crop_size > self.load_size:
            raise ConfigError("data.crop_size must be <= data.load_size")
        if self.crop_size % 4:
            raise ConfigError("data.crop_size must be divisible by 4")


@dataclass
class TrainConfig:
    mode: str = "DCL"
    epochs: int | None = None
    lr: float | None = None
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    batch_size: int = 1
    buffer_capacity: int = 50
    seed: int = 0
    checkpoint_every: int = 5
    max_steps: int | None = None  # optional hard cap, for smoke runs
    ablation: AblationFlags = field(default_factory=AblationFlags)
    loss: LossWeights = field(default_factory=LossWeights)
    nce: NCEConfig = field(default_factory=NCEConfig)
    net: NetConfig = field(default_factory=NetConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def __post_init__(self):
        self.resolve()

    def resolve(self) -> "TrainConfig":
        """Fill mode-dependent defaults and mirror ablation flags; idempotent."""
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        d = MODE_DEFAULTS[self.mode]
        if self.epochs is None:
            self.epochs = d["epochs"]
        if self.lr is None:
            self.lr = d["lr"]
        # the two NCE ablations live under nce.* in the file format
        self.ablation.include_rgb_layer = self.ablation.include_rgb_layer or self.nce.include_rgb_layer
        self.ablation.external_negatives = self.ablation.external_negatives or self.nce.external_negatives
        self.nce.include_rgb_layer = self.ablation.include_rgb_layer
        self.nce.external_negatives = self.ablation.external_negatives
        if self.loss.lambda_cycle is None:
            self.loss.lambda_cycle = DEFAULT_CYCLE_WEIGHT if self.ablation.cycle_loss else 0.0
        self.nce.layers = tuple(self.nce.layers)
        return self

    def validate(self) -> "TrainConfig":
        self.resolve()
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if not self.lr > 0:
            raise ConfigError("lr must be > 0")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ConfigError("adam betas must lie in [0, 1)")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.buffer_capacity < 0:
            raise ConfigError("buffer_capacity must be >= 0")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every must be >= 1")
        self.ablation.validate(self.mode)
        self.loss.validate()
        self.nce.validate()
        self.net.validate()
        self.data.validate()
        return self

    # ---- flat key/value view -------------------------------------------------

    def to_flat(self) -> dict[str, Any]:
        return flatten(dataclasses.asdict(self))

    def fingerprint(self) -> str:
        """Hash of the settings that determine the network structure."""
        keys = {
            "mode": self.mode,
            "ablation": dataclasses.asdict(self.ablation),
            "nce.layers": list(self.nce.tap_layers()),
            "net": {k: v for k, v in dataclasses.asdict(self.net).items() if k != "init_gain"},
        }
        return hashlib.sha256(json.dumps(keys, sort_keys=True).encode()).hexdigest()[:16]


def flatten(d: dict, prefix: str = "") -> dict[str, Any]:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(flatten(v, key + "."))
        else:
            out[key] = list(v) if isinstance(v, tuple) else v
    return out


def _section_types() -> dict[str, type]:
    return {
        "ablation": AblationFlags,
        "loss": LossWeights,
        "nce": NCEConfig,
        "net": NetConfig,
        "data": DataConfig,
    }


def _coerce(key: str, value: Any, annotation: str) -> Any:
    """Convert ``value`` to the type implied by the field's annotation/default."""
    if isinstance(value, str):
        try:
            value = yaml.safe_load(value) if value.strip() else value
        except yaml.YAMLError:
            pass
    if value is None:
        if "None" in annotation:
            return None
        raise ConfigError(f"{key}: value required")
    ann = annotation.replace(" | None", "")
    try:
        if ann == "bool":
            if isinstance(value, bool):
                return value
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        if ann == "int":
            if isinstance(value, bool) or float(value) != int(value):
                raise ConfigError(f"{key}: expected an integer, got {value!r}")
            return int(value)
        if ann == "float":
            if isinstance(value, bool):
                raise ConfigError(f"{key}: expected a number, got {value!r}")
            return float(value)
        if ann == "str":
            return str(value)
        if ann.startswith("tuple"):
            if isinstance(value, str):
                value = [v.strip() for v in value.split(",") if v.strip()]
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"{key}: expected a list, got {value!r}")
            return tuple(str(v) for v in value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{key}: cannot interpret {value!r} ({exc})") from exc
    return value


def from_flat(flat: dict[str, Any]) -> TrainConfig:
    """Build a config from dotted keys; unknown keys are rejected by name."""
    sections = _section_types()
    top = {f.name: f for f in fields(TrainConfig) if f.name not in sections}
    kwargs: dict[str, Any] = {}
    section_kwargs: dict[str, dict[str, Any]] = {s: {} for s in sections}
    for key, value in flat.items():
        head, _, tail = key.partition(".")
        if tail:
            sfields = {f.name: f for f in fields(sections[head])} if head in sections else {}
            if tail not in sfields:
                raise ConfigError(f"unknown config key: {key}")
            f = sfields[tail]
            section_kwargs[head][tail] = _coerce(key, value, str(f.type))
        else:
            if key not in top:
                raise ConfigError(f"unknown config key: {key}")
            kwargs[key] = _coerce(key, value, str(top[key].type))
    for name, typ in sections.items():
        kwargs[name] = typ(**section_kwargs[name])
    return TrainConfig(**kwargs)


def parse_override(text: str) -> tuple[str, Any]:
    key, sep, value = text.partition("=")
    if not sep or not key.strip():
        raise ConfigError(f"override must look like key=value, got {text!r}")
    return key.strip(), value


def load_config(path: str | Path | None, overrides: list[str] | tuple[str, ...] = ()) -> TrainConfig:
    flat: dict[str, Any] = {}
    if path is not None:
        try:
            doc = yaml.safe_load(Path(path).read_text()) or {}
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse config {path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"config {path} must be a key/value mapping")
        flat = flatten(doc)
    for item in overrides:
        k, v = parse_override(item)
        flat[k] = v
    return from_flat(flat).validate()


def dump_config(cfg: TrainConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_flat(), sort_keys=True))
