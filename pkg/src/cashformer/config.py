"""Model/training presets stored as ``key = value`` text."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from pathlib import Path


@dataclass
class ModelConfig:
    # mesh network
    channels: tuple = (16, 32, 64, 128)
    spiral_length: tuple = (9, 9, 9, 9, 9)
    dilation: tuple = (1, 1, 1, 1, 1)
    downsample: tuple = (1, 2, 2, 2, 2)
    norm: str = "instance"
    gamma_depth: int = 1
    template_subdivisions: int = 3
    # transformer
    latent_dim: int = 768
    blocks: int = 12
    hidden: int = 3072
    heads: int = 12
    max_len: int = 8
    # training
    lr: float = 1e-3
    epochs: int = 1000
    max_steps: int = 0
    batch_size: int = 4
    patience: int = 0
    lambda_cda: float = 1e-6
    mask_frac: float = 0.35
    shuffle_frac: float = 0.15
    # std of positional/cognitive embeddings; 0 selects 1/sqrt(latent_dim)
    init_scale: float = 0.0

    def __post_init__(self):
        if self.latent_dim % self.heads:
            raise ValueError(f"latent_dim {self.latent_dim} not divisible by heads {self.heads}")
        n = len(self.channels) + 1
        for key in ("spiral_length", "dilation", "downsample"):
            if len(getattr(self, key)) != n:
                raise ValueError(f"{key} needs {n} entries (one per hierarchy level)")

    @property
    def embedding_std(self) -> float:
        return self.init_scale if self.init_scale > 0 else self.latent_dim ** -0.5

    @property
    def level_specs(self) -> list[tuple[int, int, int]]:
        return list(zip(self.downsample, self.spiral_length, self.dilation))

    def replace(self, **kw) -> "ModelConfig":
        return dataclasses.replace(self, **kw)

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        types = {f.name: f for f in dataclasses.fields(cls)}
        kw = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"line {lineno}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ValueError(f"line {lineno}: unknown key {key!r}")
            default = types[key].default
            if isinstance(default, tuple):
                kw[key] = tuple(int(x) for x in value.split(",") if x.strip())
            elif isinstance(default, bool):
                kw[key] = value.lower() in ("1", "true", "on", "yes")
            elif isinstance(default, int):
                kw[key] = int(value)
            elif isinstance(default, float):
                kw[key] = float(value)
            else:
                kw[key] = value
        return cls(**kw)


PRESETS: dict[str, ModelConfig] = {
    "gpt2": ModelConfig(latent_dim=768, blocks=12, hidden=3072, heads=12),
    "vit_base": ModelConfig(latent_dim=768, blocks=12, hidden=3072, heads=12),
    "vit_large": ModelConfig(latent_dim=1024, blocks=24, hidden=4096, heads=16),
    # desk-scale model used by the tests and the acceptance runs
    "toy": ModelConfig(channels=(8, 16), spiral_length=(9, 9, 9), dilation=(1, 1, 1),
                       downsample=(1, 2, 2), norm="none", template_subdivisions=2,
                       latent_dim=32, blocks=2, hidden=64, heads=2, epochs=200),
    # smallest end-to-end configuration (icosahedron template, 12 vertices)
    "tiny": ModelConfig(channels=(4, 8), spiral_length=(7, 7, 5), dilation=(1, 1, 1),
                        downsample=(1, 2, 1), template_subdivisions=0,
                        latent_dim=16, blocks=2, hidden=32, heads=2, epochs=10),
}


def load_config(name_or_path) -> ModelConfig:
    """Resolve a preset name or read a config file."""
    if str(name_or_path) in PRESETS:
        return PRESETS[str(name_or_path)]
    return ModelConfig.from_text(Path(name_or_path).read_text())
