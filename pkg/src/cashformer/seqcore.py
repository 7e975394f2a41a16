"""Pre-LN transformer over visit slots, with LN-only fine-tuning support."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .config import ModelConfig
from .diffcore import ParameterStore, load_checkpoint, save_checkpoint

logger = logging.getLogger(__name__)

LN_EPS = 1e-6
PREFIX = "tf."


@dataclass(frozen=True)
class TransformerConfig:
    blocks: int
    dim: int
    hidden: int
    heads: int
    max_len: int = 8

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by {self.heads} heads")

    @classmethod
    def from_model(cls, cfg: ModelConfig) -> "TransformerConfig":
        return cls(cfg.blocks, cfg.latent_dim, cfg.hidden, cfg.heads, cfg.max_len)


TRANSFORMER_PRESETS = {
    "gpt2": TransformerConfig(12, 768, 3072, 12),
    "vit_base": TransformerConfig(12, 768, 3072, 12),
    "vit_large": TransformerConfig(24, 1024, 4096, 16),
}


def transformer_shapes(cfg: TransformerConfig, prefix: str = PREFIX) -> dict[str, tuple]:
    """Names and shapes of every transformer parameter."""
    D, H = cfg.dim, cfg.hidden
    shapes = {}
    for b in range(cfg.blocks):
        p = f"{prefix}blocks.{b}."
        shapes.update({
            p + "ln1.scale": (D,), p + "ln1.shift": (D,),
            p + "attn.qkv.weight": (D, 3 * D), p + "attn.qkv.bias": (3 * D,),
            p + "attn.proj.weight": (D, D), p + "attn.proj.bias": (D,),
            p + "ln2.scale": (D,), p + "ln2.shift": (D,),
            p + "mlp.fc1.weight": (D, H), p + "mlp.fc1.bias": (H,),
            p + "mlp.fc2.weight": (H, D), p + "mlp.fc2.bias": (D,),
        })
    shapes[prefix + "ln_f.scale"] = (D,)
    shapes[prefix + "ln_f.shift"] = (D,)
    return shapes


def is_layernorm(name: str) -> bool:
    leaf = name.split(".")
    return len(leaf) >= 2 and leaf[-2].startswith("ln") and leaf[-1] in ("scale", "shift")


def random_transformer_weights(cfg: TransformerConfig, seed: int, std: float | None = None,
                               prefix: str = PREFIX) -> dict[str, np.ndarray]:
    """Seeded stand-in for a pretrained checkpoint.

    Matrices are N(0, std^2) with ``std = 1/sqrt(fan_in)`` by default (unit
    gain per projection at any width); residual output projections are further
    scaled by ``1/sqrt(2 * blocks)``.
    """
    rng = np.random.default_rng(seed)
    out = {}
    for name, shape in transformer_shapes(cfg, prefix).items():
        if name.endswith(".scale"):
            out[name] = np.ones(shape)
        elif name.endswith("bias") or name.endswith(".shift"):
            out[name] = np.zeros(shape)
        else:
            sd = std if std is not None else 1.0 / math.sqrt(shape[0])
            out[name] = rng.normal(0.0, sd, size=shape)
            if name.endswith("attn.proj.weight") or name.endswith("mlp.fc2.weight"):
                out[name] /= math.sqrt(2 * cfg.blocks)
    return out


def write_pretrained(path, cfg: TransformerConfig, seed: int, dtype: str = "f32") -> None:
    weights = random_transformer_weights(cfg, seed)
    save_checkpoint(path, weights, dtype=dtype, trainable={n: is_layernorm(n) for n in weights})


def read_name_map(path) -> dict[str, str]:
    """Parse ``external_name -> internal_name`` lines."""
    mapping = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "->" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'external -> internal'")
        ext, internal = (s.strip() for s in line.split("->", 1))
        mapping[ext] = internal
    return mapping


def load_pretrained(checkpoint, cfg: TransformerConfig, store: ParameterStore,
                    name_map: dict[str, str] | None = None, frozen: bool = True) -> ParameterStore:
    """Load transformer weights into ``store``.

    With ``frozen`` only layer-norm scale/shift remain trainable. Every
    transformer parameter must be present with the right shape.
    """
    arrays = load_checkpoint(checkpoint) if not isinstance(checkpoint, dict) else checkpoint
    if name_map:
        inverse = {v: k for k, v in name_map.items()}
    else:
        inverse = {}
    for name, shape in transformer_shapes(cfg).items():
        ext = inverse.get(name, name)
        if ext not in arrays:
            raise KeyError(f"checkpoint is missing {ext!r} (for {name})")
        value = arrays[ext]
        if tuple(value.shape) != tuple(shape):
            raise ValueError(f"{ext!r}: shape {tuple(value.shape)} != expected {tuple(shape)}")
        trainable = is_layernorm(name) or not frozen
        if name in store:
            store.assign(name, value)
            store.set_trainable(name, trainable)
        else:
            store.add(name, value, trainable)
    return store


def init_sequence_embeddings(store: ParameterStore, cfg: ModelConfig, rng: np.random.Generator,
                             n_cognitive: int = 21) -> None:
    store.add("pos.table", rng.normal(0.0, cfg.embedding_std, (cfg.max_len, cfg.latent_dim)))
    if n_cognitive:
        store.add("ce.table", rng.normal(0.0, cfg.embedding_std, (n_cognitive, cfg.latent_dim)))


def modulate(z: torch.Tensor, pos: torch.Tensor, ce: torch.Tensor | None = None) -> torch.Tensor:
    """Slot input = mesh embedding + positional embedding (+ cognitive embedding)."""
    if z.shape[-1] != pos.shape[-1] or (ce is not None and ce.shape[-1] != z.shape[-1]):
        raise ValueError("embedding dimensions differ")
    out = z + pos
    return out if ce is None else out + ce


def layer_norm(x: torch.Tensor, store: ParameterStore, name: str) -> torch.Tensor:
    mu = x.mean(dim=-1, keepdim=True)
    var = ((x - mu) ** 2).mean(dim=-1, keepdim=True)
    return (x - mu) / torch.sqrt(var + LN_EPS) * store[name + ".scale"] + store[name + ".shift"]


def attention(x: torch.Tensor, key_mask: torch.Tensor, store: ParameterStore, prefix: str,
              heads: int, return_weights: bool = False):
    """Multi-head self-attention; ``key_mask`` (N, T) is True where a key is ignored."""
    n, t, d = x.shape
    if bool(key_mask.all(dim=-1).any()):
        raise ValueError("every key of a sequence is masked")
    qkv = x @ store[prefix + "qkv.weight"] + store[prefix + "qkv.bias"]
    q, k, v = qkv.split(d, dim=-1)
    hd = d // heads
    q = q.reshape(n, t, heads, hd).transpose(1, 2)
    k = k.reshape(n, t, heads, hd).transpose(1, 2)
    v = v.reshape(n, t, heads, hd).transpose(1, 2)
    logits = q @ k.transpose(-1, -2) / math.sqrt(hd)
    logits = logits.masked_fill(key_mask[:, None, None, :], float("-inf"))
    w = torch.softmax(logits, dim=-1)
    out = (w @ v).transpose(1, 2).reshape(n, t, d)
    out = out @ store[prefix + "proj.weight"] + store[prefix + "proj.bias"]
    return (out, w) if return_weights else out


def encoder_block(x: torch.Tensor, key_mask: torch.Tensor, store: ParameterStore, prefix: str,
                  heads: int) -> torch.Tensor:
    x = x + attention(layer_norm(x, store, prefix + "ln1"), key_mask, store, prefix + "attn.", heads)
    h = layer_norm(x, store, prefix + "ln2")
    h = F.gelu(h @ store[prefix + "mlp.fc1.weight"] + store[prefix + "mlp.fc1.bias"])
    return x + h @ store[prefix + "mlp.fc2.weight"] + store[prefix + "mlp.fc2.bias"]


def transformer_forward(slots: torch.Tensor, key_mask: torch.Tensor, cfg: TransformerConfig,
                        store: ParameterStore, prefix: str = PREFIX) -> torch.Tensor:
    """Run all blocks and the final LN. Outputs exist at masked positions too."""
    x = slots
    if x.ndim == 2:
        x, key_mask = x.unsqueeze(0), key_mask.unsqueeze(0)
    for b in range(cfg.blocks):
        x = encoder_block(x, key_mask, store, f"{prefix}blocks.{b}.", cfg.heads)
    x = layer_norm(x, store, prefix + "ln_f")
    return x if slots.ndim == 3 else x[0]


def count_transformer(cfg: TransformerConfig, frozen: bool = True) -> tuple[int, int]:
    """(trainable, total) transformer parameter counts from the shapes alone."""
    total = trainable = 0
    for name, shape in transformer_shapes(cfg).items():
        n = int(np.prod(shape))
        total += n
        if is_layernorm(name) or not frozen:
            trainable += n
    return trainable, total
