"""Interpolation, extrapolation and trajectory protocols with Table-style metrics."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .trainkit import CashformerModel, PatientSequence, predict_batch

logger = logging.getLogger(__name__)

EXPERIMENTS = ("interp", "extrap", "traj")
TRAJECTORY_MIN_MONTH = 24
REPORT_SCALE = 1e3


def interpolation_removal(p: PatientSequence) -> list[int] | None:
    """Slot of the middle observed visit, ``obs[floor(T_i / 2)]``; None if < 3 visits."""
    obs = p.observed
    if len(obs) < 3:
        return None
    return [obs[(len(obs) - 1) // 2]]


def extrapolation_removal(p: PatientSequence) -> list[int] | None:
    obs = p.observed
    if len(obs) < 2:
        return None
    return [obs[-1]]


def trajectory_targets(p: PatientSequence) -> list[int] | None:
    """Observed visits at least 24 months after baseline; the rest is withheld too."""
    targets = [t for t in p.observed if t > 0 and p.months[t] >= TRAJECTORY_MIN_MONTH]
    return targets or None


def protocol(name: str, p: PatientSequence):
    """Return (corrupted input sequence, target slots) or None when the patient is skipped."""
    if name == "interp":
        targets = interpolation_removal(p)
        removed = targets
    elif name == "extrap":
        targets = extrapolation_removal(p)
        removed = targets
    elif name == "traj":
        targets = trajectory_targets(p)
        removed = [t for t in p.observed if t > 0]
    else:
        raise ValueError(f"unknown experiment {name!r}")
    if targets is None:
        return None
    return p.without(removed), targets


def median_mad(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=np.float64)
    med = float(np.median(v))
    return med, float(np.median(np.abs(v - med)))


@dataclass
class ExperimentResult:
    experiment: str
    model: str
    records: list[tuple[str, int, int, float]] = field(default_factory=list)  # (patient, slot, month, MAE)
    vertex_error: np.ndarray | None = None  # mean |error| per template vertex
    skipped: int = 0

    @property
    def errors(self) -> np.ndarray:
        return np.array([r[3] for r in self.records])

    def summary(self) -> tuple[float, float]:
        """(median, MAD) of the per-visit MAE, both x 10^3."""
        med, mad = median_mad(self.errors)
        return med * REPORT_SCALE, mad * REPORT_SCALE


def run_experiment(name: str, patients: list[PatientSequence], model: CashformerModel | None,
                   label: str = "model", batch_size: int = 16) -> ExperimentResult:
    """Evaluate ``model`` on one protocol; ``model=None`` is the copy-reference baseline."""
    jobs = []
    skipped = 0
    for p in patients:
        job = protocol(name, p)
        if job is None:
            skipped += 1
        else:
            jobs.append((p, *job))
    if skipped:
        logger.info("%s: skipped %d patients without qualifying visits", name, skipped)
    result = ExperimentResult(name, label if model is not None else "copy-reference", skipped=skipped)
    if not jobs:
        return result
    vsum = None
    count = 0
    for i in range(0, len(jobs), batch_size):
        chunk = jobs[i:i + batch_size]
        if model is None:
            preds = [np.broadcast_to(c[1].reference, (max(c[2]) + 1,) + c[1].reference.shape) for c in chunk]
        else:
            preds = [pr.reconstructions for pr in predict_batch(model, [c[1] for c in chunk])]
        for (orig, _, targets), rec in zip(chunk, preds):
            for t in targets:
                err = np.abs(rec[t] - orig.meshes[t])
                result.records.append((orig.patient_id, t, orig.months[t], float(err.mean())))
                per_vertex = err.mean(axis=1)
                vsum = per_vertex if vsum is None else vsum + per_vertex
                count += 1
    result.vertex_error = vsum / count
    return result
