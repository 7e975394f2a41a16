"""Slot assembly, augmentation, the training loop and imputation."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import spiralnet
from .cognition import MISSING_BIN, AdasQuantizer, fit_quantizer, patient_loss
from .config import ModelConfig, load_config
from .datakit import DatasetManifest
from .diffcore import (DTYPE, AdamState, NonFiniteError, ParameterStore, adam_step, forward_backward,
                       load_checkpoint, load_trainable_flags, save_checkpoint)
from .meshgeom import MeshHierarchy, read_mesh
from .seqcore import (TransformerConfig, init_sequence_embeddings, is_layernorm, load_pretrained,
                      modulate, random_transformer_weights, transformer_forward)

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class PatientSequence:
    """One subject's visits in slot order; meshes are in template (normalized) coordinates."""

    patient_id: str
    months: list[int]
    meshes: list[np.ndarray | None]
    adas: list[float | None]
    label: str = "stable"

    def __post_init__(self):
        if not self.meshes or self.meshes[0] is None:
            raise ValueError(f"patient {self.patient_id}: baseline mesh missing")
        if any(b <= a for a, b in zip(self.months, self.months[1:])):
            raise ValueError(f"patient {self.patient_id}: months must increase")

    @property
    def n_visits(self) -> int:
        return len(self.meshes)

    @property
    def reference(self) -> np.ndarray:
        return self.meshes[0]

    @property
    def observed(self) -> list[int]:
        return [t for t, m in enumerate(self.meshes) if m is not None]

    def without(self, slots) -> "PatientSequence":
        """Copy with the meshes and scores of ``slots`` withheld."""
        drop = set(slots)
        return PatientSequence(self.patient_id, list(self.months),
                               [None if t in drop else m for t, m in enumerate(self.meshes)],
                               [None if t in drop else a for t, a in enumerate(self.adas)], self.label)


def patients_from_manifest(manifest: DatasetManifest, hierarchy: MeshHierarchy) -> list[PatientSequence]:
    out = []
    for p in manifest.patients:
        meshes = [None if v.mesh is None else hierarchy.normalize(read_mesh(manifest.resolve(v.mesh)).vertices)
                  for v in p.visits]
        out.append(PatientSequence(p.patient_id, [v.month for v in p.visits], meshes,
                                   [v.adas for v in p.visits], p.label))
    return out


# ----------------------------------------------------------------------------
# Augmentation
# ----------------------------------------------------------------------------

def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class AugmentationPlan:
    """Substituted slots get the reference embedding; ``shuffled[i]`` receives the
    mesh embedding (and score embedding) of ``source[i]``."""

    substituted: tuple = ()
    shuffled: tuple = ()
    source: tuple = ()


def make_plan(observed, rng: np.random.Generator, mask_frac: float = 0.35,
              shuffle_frac: float = 0.15) -> AugmentationPlan:
    observed = list(observed)
    n = len(observed)
    n_sub, n_shuf = round_half_up(mask_frac * n), round_half_up(shuffle_frac * n)
    picked = rng.permutation(observed)[:n_sub + n_shuf]
    sub = tuple(sorted(int(s) for s in picked[:n_sub]))
    shuf = tuple(sorted(int(s) for s in picked[n_sub:]))
    src = shuf
    if len(shuf) > 1:
        # derangement: every shuffled slot receives another slot's embedding
        while True:
            perm = tuple(int(x) for x in rng.permutation(shuf))
            if all(a != b for a, b in zip(perm, shuf)):
                src = perm
                break
    return AugmentationPlan(sub, shuf, src)


# ----------------------------------------------------------------------------
# Model
# ----------------------------------------------------------------------------

@dataclass
class SlotBatch:
    """Transformer inputs for a batch of patients."""

    inputs: torch.Tensor      # (P, T, D) modulated slot embeddings
    key_mask: torch.Tensor    # (P, T) True = ignored as key
    observed: torch.Tensor    # (P, T) slot carries a real mesh
    augmented: torch.Tensor   # (P, T) slot altered by augmentation
    ce_index: torch.Tensor    # (P, T) cognitive-embedding row per slot


class CashformerModel:
    """Mesh encoder + transformer + mesh decoder bound to one hierarchy."""

    def __init__(self, cfg: ModelConfig, hierarchy: MeshHierarchy, store: ParameterStore,
                 quantizer: AdasQuantizer | None = None):
        self.cfg = cfg
        self.hierarchy = hierarchy
        self.levels = spiralnet.LevelTensors(hierarchy)
        self.store = store
        self.quantizer = quantizer
        self.tcfg = TransformerConfig.from_model(cfg)
        self.encode_hooks: list[Callable[[np.ndarray], None]] = []

    @classmethod
    def create(cls, cfg: ModelConfig, hierarchy: MeshHierarchy, seed: int = 0, pretrained=None,
               frozen: bool = True, quantizer: AdasQuantizer | None = None) -> "CashformerModel":
        """Fresh mesh nets and embeddings; transformer from ``pretrained``
        (checkpoint path or arrays) or a seeded random stand-in."""
        rng = np.random.default_rng([seed, 1])
        store = ParameterStore()
        spiralnet.init_mesh_networks(store, cfg, hierarchy.vertex_counts, rng)
        init_sequence_embeddings(store, cfg, rng)
        tcfg = TransformerConfig.from_model(cfg)
        if pretrained is None:
            pretrained = random_transformer_weights(tcfg, seed)
        load_pretrained(pretrained, tcfg, store, frozen=frozen)
        return cls(cfg, hierarchy, store, quantizer)

    # -- pieces -------------------------------------------------------------

    def encode_meshes(self, meshes: np.ndarray, references: np.ndarray) -> torch.Tensor:
        for hook in self.encode_hooks:
            hook(meshes)
        return spiralnet.encode(self.store, torch.as_tensor(meshes, dtype=DTYPE), self.levels, self.cfg,
                                reference=torch.as_tensor(references, dtype=DTYPE))

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return spiralnet.decode(self.store, z, self.levels, self.cfg)

    def score_bin(self, value) -> int:
        if value is None or self.quantizer is None:
            return MISSING_BIN
        return self.quantizer.bin(value)

    def assemble(self, patients: list[PatientSequence], plans=None) -> SlotBatch:
        """Embed every slot; missing slots carry the reference embedding and are key-masked."""
        T, D = self.cfg.max_len, self.cfg.latent_dim
        stack, refs, owner = [], [], []
        for b, p in enumerate(patients):
            if p.n_visits > T:
                raise ValueError(f"patient {p.patient_id}: {p.n_visits} visits exceed {T} slots")
            for t in p.observed:
                stack.append(p.meshes[t])
                refs.append(p.reference)
                owner.append((b, t))
        z_all = self.encode_meshes(np.stack(stack), np.stack(refs))
        where = {k: i for i, k in enumerate(owner)}
        rows_z, ce_idx = [], []
        observed = torch.zeros(len(patients), T, dtype=torch.bool)
        augmented = torch.zeros(len(patients), T, dtype=torch.bool)
        for b, p in enumerate(patients):
            ref = where[(b, 0)]
            zi = [ref] * T
            ci = [MISSING_BIN] * T
            for t in p.observed:
                zi[t] = where[(b, t)]
                ci[t] = self.score_bin(p.adas[t])
                observed[b, t] = True
            plan = plans[b] if plans is not None else None
            if plan is not None:
                if not set(plan.substituted) | set(plan.shuffled) <= set(p.observed):
                    raise ValueError(f"patient {p.patient_id}: plan touches unobserved slots")
                orig_z, orig_c = list(zi), list(ci)
                for t in plan.substituted:
                    zi[t], ci[t] = ref, MISSING_BIN
                    augmented[b, t] = True
                for dst, src in zip(plan.shuffled, plan.source):
                    zi[dst], ci[dst] = orig_z[src], orig_c[src]
                    augmented[b, dst] = True
            rows_z.append(zi)
            ce_idx.append(ci)
        z = z_all[torch.as_tensor(rows_z)]
        ce_index = torch.as_tensor(ce_idx)
        inputs = modulate(z, self.store["pos.table"], self.store["ce.table"][ce_index])
        return SlotBatch(inputs, ~observed, observed, augmented, ce_index)

    def forward(self, patients: list[PatientSequence], plans=None, n_slots: int | None = None) -> torch.Tensor:
        """Deformation fields (P, n_slots, V, 3) for the first ``n_slots`` slots."""
        batch = self.assemble(patients, plans)
        out = transformer_forward(batch.inputs, batch.key_mask, self.tcfg, self.store)
        n_slots = n_slots or self.cfg.max_len
        out = out[:, :n_slots]
        P = out.shape[0]
        delta = self.decode(out.reshape(P * n_slots, -1))
        return delta.reshape(P, n_slots, *delta.shape[1:])

    def patient_losses(self, patients: list[PatientSequence], plans=None):
        n_slots = max(p.n_visits for p in patients)
        deltas = self.forward(patients, plans, n_slots)
        out = []
        for b, p in enumerate(patients):
            ref = torch.as_tensor(p.reference, dtype=DTYPE)
            targets = [None if m is None else torch.as_tensor(m, dtype=DTYPE) for m in p.meshes]
            recon, cda = patient_loss(ref, deltas[b, :p.n_visits], targets, p.adas, self.cfg.lambda_cda)
            out.append((recon, cda))
        return out

    def loss(self, patients, plans=None) -> torch.Tensor:
        terms = self.patient_losses(patients, plans)
        for p, (recon, cda) in zip(patients, terms):
            if not (torch.isfinite(recon) and torch.isfinite(cda)):
                raise TrainingError(f"non-finite loss for patient {p.patient_id}")
        return torch.stack([r - self.cfg.lambda_cda * c for r, c in terms]).mean()

    def parameter_counts(self) -> tuple[int, int]:
        return self.store.count(trainable_only=True), self.store.count()

    # -- persistence --------------------------------------------------------

    def save(self, run_dir, seed: int = 0, splits: dict | None = None, name: str = "model.cshw") -> Path:
        run = Path(run_dir)
        run.mkdir(parents=True, exist_ok=True)
        self.cfg.save(run / "config.txt")
        self.hierarchy.save(run / "hierarchy.cshh")
        ckpt = run / name
        save_checkpoint(ckpt, self.store, dtype="f64")
        lines = [f"seed\t{seed}", f"config\tconfig.txt", f"config_hash\t{self.cfg.digest()}",
                 f"hierarchy\thierarchy.cshh", f"checkpoint\t{name}",
                 f"quantizer\t{self.quantizer.to_text() if self.quantizer else '-'}"]
        for key, value in (splits or {}).items():
            lines.append(f"split_{key}\t{value}")
        (run / "run_manifest.txt").write_text("\n".join(lines) + "\n")
        return ckpt

    @classmethod
    def load(cls, checkpoint) -> "CashformerModel":
        ckpt = Path(checkpoint)
        run = ckpt.parent
        manifest = read_run_manifest(run / "run_manifest.txt")
        cfg = load_config(run / manifest["config"])
        hierarchy = MeshHierarchy.load(run / manifest["hierarchy"])
        arrays = load_checkpoint(ckpt)
        flags = load_trainable_flags(ckpt)
        store = ParameterStore()
        for n, a in arrays.items():
            store.add(n, a, flags.get(n, True))
        q = manifest.get("quantizer", "-")
        quantizer = None if q == "-" else AdasQuantizer.from_text(q)
        return cls(cfg, hierarchy, store, quantizer)


def read_run_manifest(path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if "\t" in line:
            k, v = line.split("\t", 1)
            out[k] = v
    return out


# ----------------------------------------------------------------------------
# Training
# ----------------------------------------------------------------------------

@dataclass
class TrainResult:
    history: list[tuple[int, float, float]] = field(default_factory=list)
    steps: int = 0
    best_epoch: int = -1
    best_val: float = float("inf")
    seconds: float = 0.0


def evaluate_loss(model: CashformerModel, patients, batch_size: int = 16) -> float:
    if not patients:
        return float("nan")
    total = 0.0
    with torch.no_grad():
        for i in range(0, len(patients), batch_size):
            chunk = patients[i:i + batch_size]
            total += float(model.loss(chunk)) * len(chunk)
    return total / len(patients)


def train(model: CashformerModel, train_set: list[PatientSequence], val_set: list[PatientSequence] | None = None,
          seed: int = 0, epochs: int | None = None, max_steps: int | None = None, log_path=None,
          augment: bool = True, keep_best: bool = True) -> TrainResult:
    """Adam on the reconstruction + CDA objective over mini-batches of patients.

    Tracks validation loss per epoch, restores the best-validation parameters
    when ``keep_best`` and stops early after ``cfg.patience`` stale epochs
    (0 disables early stopping).
    """
    if not train_set:
        raise TrainingError("empty training split")
    cfg = model.cfg
    if model.quantizer is None:
        scores = [a for p in train_set for a in p.adas if a is not None]
        model.quantizer = fit_quantizer(scores) if len(scores) >= 20 else None
    epochs = cfg.epochs if epochs is None else epochs
    max_steps = (cfg.max_steps or None) if max_steps is None else max_steps
    rng = np.random.default_rng([seed, 2])
    state = AdamState()
    result = TrainResult()
    best = None
    stale = 0
    log = open(log_path, "w") if log_path else None
    t0 = time.perf_counter()
    try:
        for epoch in range(epochs):
            order = rng.permutation(len(train_set))
            running = []
            for i in range(0, len(order), cfg.batch_size):
                batch = [train_set[j] for j in order[i:i + cfg.batch_size]]
                plans = ([make_plan(p.observed, rng, cfg.mask_frac, cfg.shuffle_frac) for p in batch]
                         if augment else None)
                try:
                    value, grads = forward_backward(lambda: model.loss(batch, plans), model.store)
                except NonFiniteError as exc:
                    raise TrainingError(f"{exc} (batch {[p.patient_id for p in batch]})") from exc
                result.steps += 1
                adam_step(model.store, grads, state, result.steps, lr=cfg.lr)
                running.append(value)
                if max_steps and result.steps >= max_steps:
                    break
            train_loss = float(np.mean(running))
            val_loss = evaluate_loss(model, val_set) if val_set else train_loss
            result.history.append((epoch, train_loss, val_loss))
            if log:
                log.write(f"{epoch} {train_loss!r} {val_loss!r}\n")
            if val_loss < result.best_val:
                result.best_val, result.best_epoch, stale = val_loss, epoch, 0
                if keep_best:
                    best = model.store.snapshot()
            else:
                stale += 1
            if cfg.patience and stale >= cfg.patience:
                logger.info("early stop at epoch %d", epoch)
                break
            if max_steps and result.steps >= max_steps:
                break
    finally:
        if log:
            log.close()
    if keep_best and best is not None:
        for n, a in best.items():
            if model.store.is_trainable(n):
                model.store.assign(n, a)
    result.seconds = time.perf_counter() - t0
    return result


# ----------------------------------------------------------------------------
# Inference
# ----------------------------------------------------------------------------

@dataclass
class Prediction:
    deltas: np.ndarray          # (T_max, V, 3)
    reconstructions: np.ndarray  # reference + deltas


def predict_batch(model: CashformerModel, patients: list[PatientSequence]) -> list[Prediction]:
    with torch.no_grad():
        deltas = model.forward(patients).numpy()
    return [Prediction(d, p.reference[None] + d) for p, d in zip(patients, deltas)]


def predict_sequence(patient: PatientSequence, model: CashformerModel) -> Prediction:
    """Outputs at every slot, imputing the missing ones; no augmentation."""
    return predict_batch(model, [patient])[0]


def reconstruction_mse(model: CashformerModel, patients: list[PatientSequence]) -> float:
    """Mean squared per-coordinate error over observed visits."""
    errs = []
    for p, pred in zip(patients, predict_batch(model, patients)):
        for t in p.observed:
            errs.append(np.mean((pred.reconstructions[t] - p.meshes[t]) ** 2))
    return float(np.mean(errs))
