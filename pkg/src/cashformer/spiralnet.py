"""SpiralResNet mesh encoder/decoder.

Features are ``(N, V, C)`` tensors: N meshes, V vertices of the current
hierarchy level, C channels. Parameters are read from a ParameterStore by
name, so every function here is a pure function of (store, inputs).
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

from .config import ModelConfig
from .diffcore import DTYPE, ParameterStore
from .meshgeom import MeshHierarchy

NORM_EPS = 1e-5


class LevelTensors:
    """Torch views of a MeshHierarchy (spirals, selections, dense up-matrices)."""

    def __init__(self, hierarchy: MeshHierarchy):
        self.hierarchy = hierarchy
        self.counts = hierarchy.vertex_counts
        self.spirals = [torch.as_tensor(lv.spiral.indices, dtype=torch.long) for lv in hierarchy.levels]
        self.selections = [torch.as_tensor(lv.selection, dtype=torch.long) for lv in hierarchy.levels]
        self.ups = [torch.as_tensor(lv.up.toarray(), dtype=DTYPE) for lv in hierarchy.levels]
        self.template = torch.as_tensor(hierarchy.template.vertices, dtype=DTYPE)

    def __len__(self):
        return len(self.counts)


def _init(rng: np.random.Generator, shape, fan_in: int, gain: float = 1.0) -> np.ndarray:
    return rng.normal(0.0, gain / np.sqrt(fan_in), size=shape)


# ----------------------------------------------------------------------------
# Layers
# ----------------------------------------------------------------------------

def init_spiral_conv(store: ParameterStore, prefix: str, length: int, din: int, dout: int,
                     rng: np.random.Generator, depth: int = 1, gain: float = 1.0) -> None:
    fan = length * din
    for k in range(depth):
        store.add(f"{prefix}.w{k}", _init(rng, (fan, dout), fan, gain))
        store.add(f"{prefix}.b{k}", np.zeros(dout))
        fan = dout


def spiral_conv(x: torch.Tensor, spiral: torch.Tensor, store: ParameterStore, prefix: str,
                depth: int = 1) -> torch.Tensor:
    """Concatenate features along each vertex's spiral and apply the MLP.

    Pad entries (index == V) gather a zero feature vector.
    """
    n, v, c = x.shape
    if spiral.shape[0] != v:
        raise ValueError(f"spiral table has {spiral.shape[0]} vertices, features have {v}")
    padded = torch.cat([x, x.new_zeros(n, 1, c)], dim=1)
    h = padded[:, spiral].reshape(n, v, -1)
    for k in range(depth):
        if k:
            h = F.elu(h)
        h = h @ store[f"{prefix}.w{k}"] + store[f"{prefix}.b{k}"]
    return h


def init_norm(store: ParameterStore, prefix: str, channels: int) -> None:
    store.add(f"{prefix}.scale", np.ones(channels))
    store.add(f"{prefix}.shift", np.zeros(channels))


def normalize(x: torch.Tensor, store: ParameterStore, prefix: str, mode: str = "instance") -> torch.Tensor:
    """Per-channel normalization; ``instance`` pools over vertices of one mesh,
    ``batch`` over all meshes in the call, ``none`` only applies the affine map."""
    if mode == "instance":
        dims = (1,)
    elif mode == "batch":
        dims = (0, 1)
    elif mode == "none":
        dims = None
    else:
        raise ValueError(f"unknown norm mode {mode!r}")
    if dims is not None:
        mu = x.mean(dim=dims, keepdim=True)
        var = ((x - mu) ** 2).mean(dim=dims, keepdim=True)
        x = (x - mu) / torch.sqrt(var + NORM_EPS)
    return x * store[f"{prefix}.scale"] + store[f"{prefix}.shift"]


def init_res_block(store: ParameterStore, prefix: str, length: int, din: int, dout: int,
                   rng: np.random.Generator, depth: int = 1) -> None:
    init_spiral_conv(store, f"{prefix}.conv1", length, din, dout, rng, depth)
    init_norm(store, f"{prefix}.norm1", dout)
    init_spiral_conv(store, f"{prefix}.conv2", length, dout, dout, rng, depth)
    init_norm(store, f"{prefix}.norm2", dout)
    if din != dout:
        store.add(f"{prefix}.skip", _init(rng, (din, dout), din))


def res_block(x: torch.Tensor, spiral: torch.Tensor, store: ParameterStore, prefix: str,
              norm: str = "instance", depth: int = 1) -> torch.Tensor:
    h = spiral_conv(x, spiral, store, f"{prefix}.conv1", depth)
    h = F.elu(normalize(h, store, f"{prefix}.norm1", norm))
    h = spiral_conv(h, spiral, store, f"{prefix}.conv2", depth)
    h = normalize(h, store, f"{prefix}.norm2", norm)
    skip = x @ store[f"{prefix}.skip"] if f"{prefix}.skip" in store else x
    return F.elu(h + skip)


# ----------------------------------------------------------------------------
# Encoder / decoder
# ----------------------------------------------------------------------------

def init_mesh_networks(store: ParameterStore, cfg: ModelConfig, counts: list[int],
                       rng: np.random.Generator, prefix: str = "", in_channels: int = 6,
                       decoder: bool = True) -> None:
    """Create encoder (and decoder) parameters for a hierarchy with ``counts`` vertices per level."""
    ch = list(cfg.channels)
    nb = len(ch)
    if len(counts) != nb + 1:
        raise ValueError(f"{nb} blocks need {nb + 1} hierarchy levels, got {len(counts)}")
    D = cfg.latent_dim
    L = cfg.spiral_length
    cin = in_channels
    for k in range(nb):
        init_res_block(store, f"{prefix}enc.blocks.{k}", L[k], cin, ch[k], rng, cfg.gamma_depth)
        cin = ch[k]
    flat = counts[nb] * ch[-1]
    store.add(f"{prefix}enc.head.weight", _init(rng, (flat, D), flat))
    store.add(f"{prefix}enc.head.bias", np.zeros(D))
    if not decoder:
        return
    store.add(f"{prefix}dec.head.weight", _init(rng, (D, flat), D))
    store.add(f"{prefix}dec.head.bias", np.zeros(flat))
    for k in reversed(range(nb)):
        dout = ch[k - 1] if k > 0 else ch[0]
        init_res_block(store, f"{prefix}dec.blocks.{k}", L[k], ch[k], dout, rng, cfg.gamma_depth)
    # small output head: training starts close to the zero-deformation solution
    init_spiral_conv(store, f"{prefix}dec.out", L[0], ch[0], 3, rng, cfg.gamma_depth, gain=0.1)


INPUT_FEATURES = ("template", "reference")


def encode(store: ParameterStore, vertices: torch.Tensor, levels: LevelTensors, cfg: ModelConfig,
           prefix: str = "", reference: torch.Tensor | None = None,
           features: tuple = INPUT_FEATURES) -> torch.Tensor:
    """Embed meshes ``(N, V, 3)`` into ``(N, D)``.

    Per-vertex input features are offsets from the template and/or from the
    subject's reference mesh (zero when no reference is given); the network
    must have been initialized with ``3 * len(features)`` input channels.
    Blocks alternate with pooling that keeps the retained vertices of the next
    level.
    """
    if vertices.ndim == 2:
        vertices = vertices.unsqueeze(0)
    if vertices.shape[1] != levels.counts[0]:
        raise ValueError(f"mesh has {vertices.shape[1]} vertices, template has {levels.counts[0]}")
    if reference is None:
        reference = vertices
    elif reference.ndim == 2:
        reference = reference.unsqueeze(0)
    offsets = {"template": lambda: vertices - levels.template, "reference": lambda: vertices - reference}
    x = torch.cat([offsets[f]() for f in features], dim=-1)
    for k in range(len(cfg.channels)):
        x = res_block(x, levels.spirals[k], store, f"{prefix}enc.blocks.{k}", cfg.norm, cfg.gamma_depth)
        x = x[:, levels.selections[k + 1]]
    z = x.reshape(x.shape[0], -1) @ store[f"{prefix}enc.head.weight"] + store[f"{prefix}enc.head.bias"]
    return z


def decode(store: ParameterStore, z: torch.Tensor, levels: LevelTensors, cfg: ModelConfig,
           prefix: str = "") -> torch.Tensor:
    """Map embeddings ``(N, D)`` to deformation fields ``(N, V, 3)``."""
    if z.shape[-1] != cfg.latent_dim:
        raise ValueError(f"embedding dimension {z.shape[-1]} != {cfg.latent_dim}")
    nb = len(cfg.channels)
    h = z @ store[f"{prefix}dec.head.weight"] + store[f"{prefix}dec.head.bias"]
    x = h.reshape(z.shape[0], levels.counts[nb], cfg.channels[-1])
    for k in reversed(range(nb)):
        x = levels.ups[k + 1] @ x
        x = res_block(x, levels.spirals[k], store, f"{prefix}dec.blocks.{k}", cfg.norm, cfg.gamma_depth)
    return spiral_conv(x, levels.spirals[0], store, f"{prefix}dec.out", cfg.gamma_depth)
