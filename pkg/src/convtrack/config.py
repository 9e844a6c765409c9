"""Tracker configuration: every hyperparameter plus the gap-filling choices.

Two presets ship: ``desk_defaults`` (small patches, rescaled learning rates,
interactive on CPU) and ``reference_defaults`` (the original large-backbone
constants, which presume a big pretrained extractor). Config files are YAML; unknown keys
are a hard error.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import yaml


class ConfigError(ValueError):
    """Bad config file or override."""


@dataclass
class TrackerConfig:
    # geometry
    padding_factor: float = 2.0
    patch_size: int = 64
    label_sigma_factor: float = 0.1
    # feature extractor
    feature_mode: str = "stack"  # "stack" | "raw"
    stack_init_std: float = 0.1
    # regression training
    momentum: float = 0.9
    lambda_offline: float = 0.005
    lambda_first_frame: float = 0.01
    lambda_update: float = 0.005
    lr_offline: float = 2e-4  # joint stack+filter gradients are large; >1e-3 diverges
    lr_first_frame: float = 1e-3
    lr_update: float = 1e-4
    first_frame_steps: int = 50
    epochs: int = 30
    filter_init_std: float = 0.01
    translation_jitter: float = 0.05
    scale_jitter: float = 0.03
    # update gating
    gate_mode: str = "both"  # "both" | "rmax_only" | "always"
    beta_pnr: float = 0.7
    beta_rmax: float = 0.7
    pnr_epsilon: float = 1e-6
    history_window: int = 0  # 0 = unbounded
    # scale branch
    scale_mode: str = "branch"  # "branch" | "multires" | "none"
    num_scales: int = 33
    scale_factor: float = 1.02
    scale_template_size: int = 32
    scale_sigma_taps: float = 0.0  # 0 = num_scales / 16
    scale_clamp_exponent: int = 4  # per-frame multiplier clamp = a**exponent
    scale_feature_dims: int = 256
    scale_lr: float = 1e-3
    scale_lambda: float = 0.01
    scale_first_frame_steps: int = 50
    scale_gated: bool = True  # gate estimation too, not only filter updates
    multires_exponents: int = 4  # multires candidates span a**[-e, e]
    multires_count: int = 33  # candidates evenly spaced in exponent, must be odd
    multires_penalty: float = 0.97  # response discount per exponent unit
    multires_damping: float = 0.1  # fraction of the winning scale step applied per frame
    # misc
    subpixel: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.num_scales % 2 == 0 or self.num_scales < 1:
            raise ConfigError(f"num_scales must be odd and positive, got {self.num_scales}")
        if self.multires_count % 2 == 0 or self.multires_count < 3:
            raise ConfigError(
                f"multires_count must be odd and >= 3, got {self.multires_count}"
            )
        if self.scale_factor <= 1.0:
            raise ConfigError(f"scale_factor must be > 1, got {self.scale_factor}")
        if self.patch_size < 2 or self.padding_factor <= 0:
            raise ConfigError("patch_size/padding_factor out of range")
        for name in ("lr_offline", "lr_first_frame", "lr_update", "scale_lr",
                     "label_sigma_factor", "beta_pnr", "beta_rmax", "pnr_epsilon"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.feature_mode not in ("stack", "raw"):
            raise ConfigError(f"unknown feature_mode {self.feature_mode!r}")
        if self.gate_mode not in ("both", "rmax_only", "always"):
            raise ConfigError(f"unknown gate_mode {self.gate_mode!r}")
        if self.scale_mode not in ("branch", "multires", "none"):
            raise ConfigError(f"unknown scale_mode {self.scale_mode!r}")

    @property
    def scale_sigma(self) -> float:
        return self.scale_sigma_taps if self.scale_sigma_taps > 0 else self.num_scales / 16.0

    @property
    def scale_clamp(self) -> float:
        return self.scale_factor**self.scale_clamp_exponent

    def multires_scales(self) -> list[float]:
        e = self.multires_exponents
        half = (self.multires_count - 1) // 2
        return [self.scale_factor ** (e * i / half) for i in range(-half, half + 1)]

    def replace(self, **kwargs) -> "TrackerConfig":
        return dataclasses.replace(self, **kwargs)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def desk_defaults() -> TrackerConfig:
    """Desk-scale preset: the package defaults."""
    return TrackerConfig()


def reference_defaults() -> TrackerConfig:
    """Original large-backbone constants: 224px patches, tiny learning rates.

    These presume feature magnitudes from a large pretrained network and are
    kept selectable for reference, not as the working preset.
    """
    return TrackerConfig(
        patch_size=224,
        lr_offline=1e-5,
        lr_first_frame=5e-7,
        lr_update=1e-7,
        lambda_offline=0.005,
        lambda_first_frame=0.01,
        momentum=0.9,
        epochs=30,
        num_scales=33,
        scale_factor=1.02,
        translation_jitter=0.05,
        scale_jitter=0.03,
    )


PRESETS = {"desk_defaults": desk_defaults, "reference_defaults": reference_defaults}

_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(TrackerConfig)}


def _coerce(name: str, value):
    if name not in _FIELD_TYPES:
        valid = ", ".join(sorted(_FIELD_TYPES) + ["preset"])
        raise ConfigError(f"unknown config key {name!r}; valid keys: {valid}")
    default = getattr(TrackerConfig(), name)
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        if str(value).lower() in ("true", "1", "yes"):
            return True
        if str(value).lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"cannot parse boolean for {name!r}: {value!r}")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    return str(value)


def config_from_dict(raw: dict) -> TrackerConfig:
    """Build a config from a plain dict, honoring an optional 'preset' key."""
    raw = dict(raw or {})
    preset = raw.pop("preset", "desk_defaults")
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; valid: {sorted(PRESETS)}")
    base = PRESETS[preset]().to_dict()
    for key, value in raw.items():
        base[key] = _coerce(key, value)
    return TrackerConfig(**base)


def load_config(path: str | None, overrides: list[str] | None = None) -> TrackerConfig:
    """Load YAML config (optional) and apply dotted-key overrides on top."""
    raw: dict = {}
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            loaded = yaml.safe_load(fh)
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {path} must contain a mapping")
        raw = loaded
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like key=value")
        key, value = item.split("=", 1)
        raw[key.strip()] = value.strip()
    return config_from_dict(raw)


def save_config(cfg: TrackerConfig, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=True)
