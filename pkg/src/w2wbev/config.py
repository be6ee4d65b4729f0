"""Run configuration: a flat key=value text format with strict validation."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass


class ConfigError(ValueError):
    """Invalid configuration value or file."""


@dataclass
class RunConfig:
    """Every tunable in one place.

    Desk-scale defaults: a 32x128 panorama / 64x64 aerial world with a
    16x16 BEV grid trains on a single core in minutes.  Full-scale
    reference values (192x768 images, 28x28 grid, lr 1e-4, batch 16) are
    documented in the README; they are not desk defaults.
    """

    # model
    c_model: int = 32
    depth_bins: int = 16
    grid_h: int = 16
    grid_w: int = 16
    n_windows: int = 4
    num_blocks: int = 3
    num_heads: int = 4
    ffn_expansion: int = 4
    embed_dim: int = 64
    bev_init_enabled: bool = True
    shared_backbone: bool = False
    # loss / optimizer
    temperature: float = 0.05
    learning_rate: float = 0.002
    min_lr: float = 0.0002
    weight_decay: float = 0.01
    steps: int = 300
    batch_size: int = 8
    # data / world
    fov: float = 90.0
    pano_h: int = 32
    pano_w: int = 128
    aerial_size: int = 64
    num_scenes: int = 256
    train_frac: float = 0.75
    val_frac: float = 0.0
    test_frac: float = 0.25
    landmarks: int = 6
    # run plumbing
    seed: int = 0
    dataset: str = "dataset"
    checkpoint: str = ""
    out: str = "runs"

    def validate(self) -> "RunConfig":
        def positive(key):
            if getattr(self, key) <= 0:
                raise ConfigError(f"config key '{key}' must be positive, got {getattr(self, key)}")

        for key in ("c_model", "depth_bins", "grid_h", "grid_w", "n_windows",
                    "num_blocks", "num_heads", "ffn_expansion", "embed_dim",
                    "batch_size", "pano_h", "pano_w", "aerial_size",
                    "num_scenes", "learning_rate", "temperature"):
            positive(key)
        if self.steps < 0:
            raise ConfigError(f"config key 'steps' must be >= 0, got {self.steps}")
        if self.min_lr < 0 or self.min_lr > self.learning_rate:
            raise ConfigError("config key 'min_lr' must lie in [0, learning_rate]")
        if self.c_model % self.num_heads:
            raise ConfigError(
                f"config key 'num_heads' ({self.num_heads}) must divide 'c_model' ({self.c_model})")
        root = math.isqrt(self.n_windows)
        if root * root != self.n_windows:
            raise ConfigError(
                f"config key 'n_windows' ({self.n_windows}) must be a perfect square")
        if self.grid_h % root or self.grid_w % root:
            raise ConfigError(
                f"config key 'n_windows': sqrt ({root}) must divide 'grid_h' "
                f"({self.grid_h}) and 'grid_w' ({self.grid_w})")
        if self.pano_h % 16:
            raise ConfigError(f"config key 'pano_h' ({self.pano_h}) must be divisible by 16")
        if self.pano_w % (16 * self.n_windows):
            raise ConfigError(
                f"config key 'pano_w' ({self.pano_w}) must be divisible by "
                f"16*n_windows ({16 * self.n_windows})")
        if self.aerial_size % 16:
            raise ConfigError(
                f"config key 'aerial_size' ({self.aerial_size}) must be divisible by 16")
        if not 0 < self.fov <= 360:
            raise ConfigError(f"config key 'fov' ({self.fov}) must lie in (0, 360]")
        if abs(self.train_frac + self.val_frac + self.test_frac - 1.0) > 1e-9:
            raise ConfigError("config keys 'train_frac'+'val_frac'+'test_frac' must sum to 1")
        if min(self.train_frac, self.val_frac, self.test_frac) < 0:
            raise ConfigError("config split fractions must be non-negative")
        if self.landmarks < 3:
            raise ConfigError(f"config key 'landmarks' ({self.landmarks}) must be >= 3")
        return self

    @classmethod
    def from_file(cls, path: str, **overrides) -> "RunConfig":
        fields = {f.name: f.type for f in dataclasses.fields(cls)}
        values = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, 1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw.strip()!r}")
                key, _, val = line.partition("=")
                key, val = key.strip(), val.strip()
                if key not in fields:
                    raise ConfigError(f"{path}:{lineno}: unknown config key '{key}'")
                values[key] = _parse(key, val, fields[key])
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values).validate()

    def to_file(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("# resolved run configuration\n")
            for f in dataclasses.fields(self):
                fh.write(f"{f.name} = {getattr(self, f.name)}\n")

    def replace(self, **kwargs) -> "RunConfig":
        return dataclasses.replace(self, **kwargs).validate()


def _parse(key: str, val: str, typ) -> object:
    name = typ if isinstance(typ, str) else typ.__name__
    try:
        if name == "bool":
            low = val.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(val)
        if name == "int":
            return int(val)
        if name == "float":
            return float(val)
        return val
    except ValueError as exc:
        raise ConfigError(f"config key '{key}': cannot parse {val!r} as {name}") from exc
