"""Pipeline configuration: defaults < TOML config file < CLI flags.

Each field carries a provenance tag: "paper" for values published with the
method, "default" for choices this implementation had to make.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib


class ConfigError(Exception):
    """Invalid configuration (bad value, unknown key, unreadable file)."""


@dataclass
class PipelineConfig:
    seed: int = 0
    # superpixel-guided correction
    superpixels: int = 200
    compactness: float = 10.0
    slic_iters: int = 10
    regions: int = 8
    high_conf_thresh: float = 0.5
    ratio_thresh: float = 0.6
    ratio_mode: str = "mass"
    w_clip: float = 0.4
    w_dino: float = 0.6
    prop_steps: int = 2
    attn_layers: int = 4  # how many final layers of each attention stack to average
    bg_thresh: float = 0.45
    # prototype alignment
    lr: float = 1e-5
    weight_decay: float = 2e-3
    gamma: float = 0.1
    tau_init: float = 0.05
    refresh_interval: int = 5000
    batch_size: int = 128
    iters: int = 30000
    k_prototypes: int = 0  # 0 -> number of foreground classes
    d2: int = 0            # 0 -> feature_dim // 4
    workers: int = 1

    def validate(self):
        if abs(self.w_clip + self.w_dino - 1.0) > 1e-9 or self.w_clip < 0 or self.w_dino < 0:
            raise ConfigError(f"w_clip + w_dino must be 1 with both >= 0, got {self.w_clip}, {self.w_dino}")
        for name in ("high_conf_thresh", "ratio_thresh", "bg_thresh"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {v}")
        for name in ("superpixels", "slic_iters", "regions", "prop_steps", "attn_layers",
                     "refresh_interval", "batch_size", "iters", "workers"):
            v = getattr(self, name)
            if v < 1 and not (name == "slic_iters" and v == 0):
                raise ConfigError(f"{name} must be positive, got {v}")
        if self.ratio_mode not in ("mass", "count"):
            raise ConfigError(f"ratio_mode must be 'mass' or 'count', got {self.ratio_mode!r}")
        if self.tau_init <= 0:
            raise ConfigError(f"tau_init must be > 0, got {self.tau_init}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        return self


PROVENANCE = {
    "seed": "default",
    "superpixels": "default",
    "compactness": "default",
    "slic_iters": "default",
    "regions": "default",
    "high_conf_thresh": "default",
    "ratio_thresh": "default",
    "ratio_mode": "default",
    "w_clip": "paper",
    "w_dino": "paper",
    "prop_steps": "default",
    "attn_layers": "default",
    "bg_thresh": "default",
    "lr": "paper",
    "weight_decay": "paper",
    "gamma": "paper",
    "tau_init": "paper",
    "refresh_interval": "paper",
    "batch_size": "paper",
    "iters": "paper",
    "k_prototypes": "default",
    "d2": "default",
    "workers": "default",
}


def load_config(config_path=None, overrides=None):
    """Build a validated PipelineConfig from defaults, an optional TOML file,
    and a dict of CLI overrides (None values are ignored)."""
    values = {}
    field_names = {f.name: f.type for f in dataclasses.fields(PipelineConfig)}
    if config_path is not None:
        try:
            with open(Path(config_path), "rb") as fh:
                data = tomllib.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {config_path}") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{config_path}: invalid TOML: {exc}") from None
        for key, val in data.items():
            if key not in field_names:
                raise ConfigError(f"{config_path}: unknown config key {key!r}")
            values[key] = val
    for key, val in (overrides or {}).items():
        if val is None:
            continue
        if key not in field_names:
            raise ConfigError(f"unknown config override {key!r}")
        values[key] = val
    cfg = PipelineConfig(**values)
    return cfg.validate()


def echo_toml(cfg):
    """Resolved config as TOML text; pasting it into --config reruns bitwise."""
    lines = ["# resolved configuration (reusable via --config)"]
    for f in dataclasses.fields(PipelineConfig):
        v = getattr(cfg, f.name)
        if isinstance(v, str):
            rendered = f'"{v}"'
        elif isinstance(v, bool):
            rendered = "true" if v else "false"
        else:
            rendered = repr(v)
        lines.append(f"{f.name} = {rendered}  # {PROVENANCE[f.name]}")
    return "\n".join(lines) + "\n"


def as_dict(cfg):
    return dataclasses.asdict(cfg)
