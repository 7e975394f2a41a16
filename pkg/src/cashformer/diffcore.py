"""Parameters, gradients, optimizer and the finite-difference checker.

Autodiff is delegated to torch in float64. Everything the model owns lives in
a :class:`ParameterStore`; frozen entries never get ``requires_grad`` so no
gradient buffer exists for them.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

DTYPE = torch.float64
CHECKPOINT_MAGIC = b"CSHW"
CHECKPOINT_VERSION = 1
_DTYPE_TAGS = {"f32": (0, "<f4"), "f64": (1, "<f8")}
_TAG_DTYPES = {v[0]: v[1] for v in _DTYPE_TAGS.values()}


class NonFiniteError(FloatingPointError):
    pass


class ParameterStore:
    """Named float64 tensors with a per-parameter trainable flag."""

    def __init__(self):
        self._params: dict[str, torch.Tensor] = {}
        self._trainable: dict[str, bool] = {}

    def add(self, name: str, value, trainable: bool = True) -> torch.Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = torch.as_tensor(np.asarray(value, dtype=np.float64)).clone().to(DTYPE)
        t.requires_grad_(trainable)
        self._params[name] = t
        self._trainable[name] = bool(trainable)
        return t

    def __getitem__(self, name: str) -> torch.Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self._params if n.startswith(prefix)]

    def items(self):
        return self._params.items()

    def is_trainable(self, name: str) -> bool:
        return self._trainable[name]

    def set_trainable(self, name: str, flag: bool) -> None:
        self._trainable[name] = bool(flag)
        t = self._params[name]
        t.grad = None
        t.requires_grad_(bool(flag))

    def trainable_names(self) -> list[str]:
        return [n for n, f in self._trainable.items() if f]

    def assign(self, name: str, value) -> None:
        """Overwrite values in place (shape must match)."""
        t = self._params[name]
        v = torch.as_tensor(np.asarray(value, dtype=np.float64))
        if tuple(v.shape) != tuple(t.shape):
            raise ValueError(f"{name}: shape {tuple(v.shape)} != {tuple(t.shape)}")
        with torch.no_grad():
            t.copy_(v)

    def numpy(self, name: str) -> np.ndarray:
        return self._params[name].detach().numpy().copy()

    def count(self, trainable_only: bool = False, prefix: str = "") -> int:
        return sum(t.numel() for n, t in self._params.items()
                   if n.startswith(prefix) and (self._trainable[n] or not trainable_only))

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: self.numpy(n) for n in self._params}

    def copy(self) -> "ParameterStore":
        out = ParameterStore()
        for n, t in self._params.items():
            out.add(n, t.detach().numpy(), self._trainable[n])
        return out


# ----------------------------------------------------------------------------
# Checkpoint files
# ----------------------------------------------------------------------------

def save_checkpoint(path, arrays, dtype: str = "f32", trainable: dict[str, bool] | None = None) -> None:
    """Write named arrays; ``arrays`` is a ParameterStore or a name->array mapping.

    A sidecar ``<path>.trainable`` lists ``name 0|1`` per parameter.
    """
    if isinstance(arrays, ParameterStore):
        if trainable is None:
            trainable = {n: arrays.is_trainable(n) for n in arrays}
        arrays = arrays.snapshot()
    tag, np_dtype = _DTYPE_TAGS[dtype]
    names = list(arrays)
    manifest = bytearray()
    payload = bytearray()
    entries = []
    for n in names:
        a = np.asarray(arrays[n]).astype(np_dtype, order="C")
        entries.append((n, a))
    # manifest size is needed for absolute offsets; compute it first
    manifest_size = sum(4 + len(n.encode()) + 1 + 1 + 4 * a.ndim + 8 for n, a in entries)
    base = 4 + 4 + 4 + manifest_size
    for n, a in entries:
        raw = n.encode()
        manifest += struct.pack("<I", len(raw)) + raw
        manifest += struct.pack("<BB", tag, a.ndim)
        manifest += struct.pack(f"<{a.ndim}I", *a.shape)
        manifest += struct.pack("<Q", base + len(payload))
        payload += a.tobytes()
    data = CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(entries)) + bytes(manifest) + bytes(payload)
    Path(path).write_bytes(data)
    if trainable is not None:
        lines = [f"{n} {int(bool(trainable.get(n, False)))}" for n in names]
        Path(str(path) + ".trainable").write_text("\n".join(lines) + "\n")


def load_checkpoint(path) -> dict[str, np.ndarray]:
    """Read named arrays, preserving the stored dtype."""
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, count = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos:pos + nlen].decode()
        pos += nlen
        tag, ndim = struct.unpack_from("<BB", data, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        (offset,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        dt = np.dtype(_TAG_DTYPES[tag])
        n = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(data, dt, n, offset).reshape(shape).copy()
    return out


def load_trainable_flags(path) -> dict[str, bool]:
    side = Path(str(path) + ".trainable")
    flags = {}
    for line in side.read_text().splitlines():
        if line.strip():
            name, flag = line.rsplit(" ", 1)
            flags[name] = flag == "1"
    return flags


# ----------------------------------------------------------------------------
# Gradients
# ----------------------------------------------------------------------------

def forward_backward(loss_fn: Callable[[], torch.Tensor], store: ParameterStore):
    """Evaluate ``loss_fn`` and return (loss value, gradients of trainable params)."""
    names = store.trainable_names()
    loss = loss_fn()
    if loss.numel() != 1:
        raise ValueError("loss must be a scalar")
    if not torch.isfinite(loss):
        raise NonFiniteError(f"non-finite loss {loss.item()}")
    tensors = [store[n] for n in names]
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    out = {}
    for n, t, g in zip(names, tensors, grads):
        g = torch.zeros_like(t) if g is None else g.detach()
        if not torch.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for {n}")
        out[n] = g
    return float(loss.detach()), out


@dataclass
class GradCheckReport:
    errors: dict[str, float]
    tolerance: float

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """``|a - n| / max(|a|, |n|, floor)``; below ``floor`` the error is absolute,
    so structurally zero gradients are not judged on round-off alone."""
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def grad_check(fn: Callable[[dict[str, torch.Tensor]], torch.Tensor], params: dict[str, np.ndarray],
               step: float = 1e-5, tolerance: float = 1e-4, n_samples: int = 32,
               seed: int = 0) -> GradCheckReport:
    """Compare autograd against central differences on sampled coordinates.

    ``fn`` maps a dict of tensors to a scalar tensor. At least ``n_samples``
    coordinates per parameter are probed (all of them if fewer exist).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    rng = np.random.default_rng(seed)
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    def evaluate(values, requires_grad=False):
        ts = {k: torch.tensor(v, dtype=DTYPE, requires_grad=requires_grad) for k, v in values.items()}
        return fn(ts), ts

    out, ts = evaluate(base, requires_grad=True)
    grads = torch.autograd.grad(out, list(ts.values()), allow_unused=True)
    analytic = {k: (np.zeros_like(base[k]) if g is None else g.numpy())
                for k, g in zip(ts, grads)}
    errors = {}
    with torch.no_grad():
        for k, v in base.items():
            flat = v.reshape(-1)
            idx = np.arange(flat.size) if flat.size <= n_samples else rng.choice(flat.size, n_samples, replace=False)
            num = np.empty(len(idx))
            for j, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + step
                fp = float(evaluate(base)[0])
                flat[i] = orig - step
                fm = float(evaluate(base)[0])
                flat[i] = orig
                num[j] = (fp - fm) / (2 * step)
            errors[k] = float(relative_error(analytic[k].reshape(-1)[idx], num).max())
    return GradCheckReport(errors, tolerance)


# ----------------------------------------------------------------------------
# Adam
# ----------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)
    t: int = 0


def adam_step(store: ParameterStore, grads: dict[str, torch.Tensor], state: AdamState, t: int,
              lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> ParameterStore:
    """One Adam update (bias-corrected) on the trainable entries of ``store``.

    Gradients for frozen parameters are ignored. Moment buffers live in ``state``.
    """
    if t < 1:
        raise ValueError("Adam step index starts at 1")
    with torch.no_grad():
        for name, g in grads.items():
            if not store.is_trainable(name):
                continue
            p = store[name]
            if tuple(g.shape) != tuple(p.shape):
                raise ValueError(f"gradient shape {tuple(g.shape)} != parameter shape {tuple(p.shape)} for {name}")
            m = state.m.get(name)
            if m is None:
                m = state.m[name] = torch.zeros_like(p)
                state.v[name] = torch.zeros_like(p)
            v = state.v[name]
            m.mul_(beta1).add_(g, alpha=1 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1 - beta2)
            mhat = m / (1 - beta1 ** t)
            vhat = v / (1 - beta2 ** t)
            p.sub_(lr * mhat / (vhat.sqrt() + eps))
    state.t = t
    return store
