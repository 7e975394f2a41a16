"""ADAS quantization, cognitive embeddings and the cognition-aware losses."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

ADAS_MIN, ADAS_MAX = 0.0, 85.0
N_BINS = 20
MISSING_BIN = N_BINS  # index of the extra "missing" embedding


@dataclass
class AdasQuantizer:
    """19 interior edges; ``bin(v)`` counts edges strictly below ``v``."""

    edges: np.ndarray

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=np.float64)
        if self.edges.shape != (N_BINS - 1,):
            raise ValueError(f"expected {N_BINS - 1} edges, got {self.edges.shape}")
        if np.any(np.diff(self.edges) < 0):
            raise ValueError("edges must be non-decreasing")

    def bin(self, value) -> int:
        if value is None or (isinstance(value, float) and np.isnan(value)):
            return MISSING_BIN
        if value >= ADAS_MAX:
            return N_BINS - 1
        return min(int(np.searchsorted(self.edges, value, side="left")), N_BINS - 1)

    def to_text(self) -> str:
        return " ".join(repr(float(e)) for e in self.edges)

    @classmethod
    def from_text(cls, text: str) -> "AdasQuantizer":
        return cls(np.array([float(x) for x in text.split()]))


def fit_quantizer(scores) -> AdasQuantizer:
    """Edges at the 5%, 10%, ..., 95% nearest-rank quantiles of the training scores."""
    s = np.sort(np.asarray([x for x in scores if x is not None], dtype=np.float64))
    if s.size == 0:
        raise ValueError("no training scores")
    if s.size < N_BINS:
        raise ValueError(f"need at least {N_BINS} training scores, got {s.size}")
    ranks = np.ceil(np.arange(1, N_BINS) * 5 * s.size / 100 - 1e-12).astype(int) - 1
    return AdasQuantizer(s[np.clip(ranks, 0, s.size - 1)])


def cda_endpoints(adas) -> tuple[int, float, float] | None:
    """(T, ADAS(0), ADAS(T)) using the last observed score as the endpoint.

    ``adas`` is a per-visit list with None for missing scores. Returns None
    when the baseline score is missing or no later score exists.
    """
    if not adas or adas[0] is None:
        return None
    last = max((t for t, a in enumerate(adas) if a is not None), default=0)
    if last < 1:
        return None
    return last, float(adas[0]), float(adas[last])


def cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Cosine similarity, 0 when either vector is all-zero."""
    na, nb = torch.linalg.vector_norm(a), torch.linalg.vector_norm(b)
    if float(na.detach()) == 0.0 or float(nb.detach()) == 0.0:
        return a.new_zeros(())
    return (a @ b) / (na * nb)


def cda_loss(norms, adas_start: float, adas_end: float, T: int | None = None) -> torch.Tensor:
    """Cosine similarity between deformation norms and the linear ADAS ramp.

    ``norms`` holds ``[|delta(0)|, ..., |delta(T)|]``; the ramp is
    ``m * [0, ..., T]`` with ``m = (adas_end - adas_start) / T``.
    """
    norms = torch.as_tensor(norms, dtype=torch.float64)
    if T is None:
        T = norms.shape[0] - 1
    if T < 1:
        raise ValueError("T must be >= 1")
    if norms.shape[0] != T + 1:
        raise ValueError(f"expected {T + 1} norms, got {norms.shape[0]}")
    m = (adas_end - adas_start) / T
    ramp = m * torch.arange(T + 1, dtype=norms.dtype)
    return cosine(norms, ramp)


def frobenius(delta: torch.Tensor) -> torch.Tensor:
    """Per-field Frobenius norm over the trailing (V, 3) axes."""
    # vector_norm has a zero subgradient at the origin, sqrt(sum) would give NaN
    return torch.linalg.vector_norm(delta.flatten(-2), dim=-1)


def patient_loss(reference: torch.Tensor, deltas: torch.Tensor, targets, adas, lam: float):
    """Loss of one patient.

    ``deltas`` is (T_slots, V, 3); ``targets`` a per-slot list of meshes with
    None where no ground truth exists; ``adas`` the per-visit score list.
    Returns (reconstruction term, CDA term).
    """
    observed = [t for t, m in enumerate(targets) if m is not None]
    if not observed:
        raise ValueError("patient has no observed visits")
    errs = []
    for t in observed:
        diff = reference + deltas[t] - targets[t]
        errs.append((diff ** 2).sum())
    recon = torch.stack(errs).mean()
    ends = cda_endpoints(adas)
    if ends is None or lam == 0.0:
        cda = recon.new_zeros(())
    else:
        T, a0, aT = ends
        cda = cda_loss(frobenius(deltas[:T + 1]), a0, aT, T)
    return recon, cda


def total_loss(references, deltas, targets, adas, lam: float = 1e-6) -> torch.Tensor:
    """Mean over patients of (mean observed-visit squared error - lam * CDA)."""
    terms = []
    for ref, d, tgt, a in zip(references, deltas, targets, adas):
        recon, cda = patient_loss(ref, d, tgt, a, lam)
        terms.append(recon - lam * cda)
    return torch.stack(terms).mean()
