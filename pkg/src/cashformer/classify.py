"""Stable/converter trajectory classification with and without imputation.

The classifier is a separate network: a fresh SpiralResNet encoder, a fully
trainable transformer and a linear head on the mean of the unmasked slot
outputs. Slots carry baseline-relative shape only (no cognitive scores), so
the label has to be read from the anatomy change.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from . import spiralnet
from .config import ModelConfig
from .diffcore import DTYPE, AdamState, ParameterStore, adam_step, forward_backward
from .meshgeom import MeshHierarchy
from .seqcore import (TransformerConfig, init_sequence_embeddings, load_pretrained, modulate,
                      random_transformer_weights, transformer_forward)
from .trainkit import CashformerModel, PatientSequence, predict_batch

logger = logging.getLogger(__name__)

ARMS = ("raw", "imputed")


def balanced_accuracy(labels, predictions) -> float:
    """Mean of the per-class recalls over the classes present in ``labels``."""
    y = np.asarray(labels, dtype=int)
    p = np.asarray(predictions, dtype=int)
    if y.shape != p.shape:
        raise ValueError("labels and predictions differ in length")
    recalls = [np.mean(p[y == c] == c) for c in np.unique(y)]
    if not recalls:
        raise ValueError("no labels")
    return float(np.mean(recalls))


def impute_sequences(patients: list[PatientSequence], model: CashformerModel,
                     batch_size: int = 16) -> list[PatientSequence]:
    """Fill every empty slot up to ``max_len`` with the model's reconstruction."""
    T = model.cfg.max_len
    out = []
    for i in range(0, len(patients), batch_size):
        chunk = patients[i:i + batch_size]
        for p, pred in zip(chunk, predict_batch(model, chunk)):
            meshes = [p.meshes[t] if t < p.n_visits and p.meshes[t] is not None else pred.reconstructions[t]
                      for t in range(T)]
            # months of imputed padding slots are unknown; only their order matters
            months = list(p.months) + [p.months[-1] + k for k in range(1, T - p.n_visits + 1)]
            out.append(PatientSequence(p.patient_id, months, meshes, [None] * T, p.label))
    return out


class SequenceClassifier:
    """Encoder + transformer + mean-pool + linear head, all trainable."""

    def __init__(self, cfg: ModelConfig, hierarchy: MeshHierarchy, seed: int = 0):
        self.cfg = cfg
        self.levels = spiralnet.LevelTensors(hierarchy)
        self.tcfg = TransformerConfig.from_model(cfg)
        self.store = ParameterStore()
        rng = np.random.default_rng([seed, 3])
        spiralnet.init_mesh_networks(self.store, cfg, self.levels.counts, rng, in_channels=3, decoder=False)
        init_sequence_embeddings(self.store, cfg, rng, n_cognitive=0)
        load_pretrained(random_transformer_weights(self.tcfg, seed), self.tcfg, self.store, frozen=False)
        self.store.add("head.weight", rng.normal(0.0, cfg.latent_dim ** -0.5, (cfg.latent_dim, 1)))
        self.store.add("head.bias", np.zeros(1))

    def logits(self, patients: list[PatientSequence]) -> torch.Tensor:
        T, D = self.cfg.max_len, self.cfg.latent_dim
        stack, refs, owner = [], [], []
        for b, p in enumerate(patients):
            for t in p.observed[:T]:
                stack.append(p.meshes[t])
                refs.append(p.reference)
                owner.append((b, t))
        z_all = spiralnet.encode(self.store, torch.as_tensor(np.stack(stack), dtype=DTYPE), self.levels,
                                 self.cfg, reference=torch.as_tensor(np.stack(refs), dtype=DTYPE),
                                 features=("reference",))
        z = torch.zeros(len(patients), T, D, dtype=DTYPE)
        mask = torch.ones(len(patients), T, dtype=torch.bool)
        rows = torch.as_tensor([b for b, _ in owner])
        cols = torch.as_tensor([t for _, t in owner])
        z = z.index_put((rows, cols), z_all)
        mask[rows, cols] = False
        out = transformer_forward(modulate(z, self.store["pos.table"]), mask, self.tcfg, self.store)
        keep = (~mask).to(DTYPE).unsqueeze(-1)
        pooled = (out * keep).sum(1) / keep.sum(1)
        return (pooled @ self.store["head.weight"] + self.store["head.bias"]).squeeze(-1)

    def loss(self, patients: list[PatientSequence]) -> torch.Tensor:
        y = torch.as_tensor([float(p.label == "converter") for p in patients], dtype=DTYPE)
        return F.binary_cross_entropy_with_logits(self.logits(patients), y)

    def fit(self, patients: list[PatientSequence], epochs: int = 30, seed: int = 0,
            lr: float | None = None) -> list[float]:
        rng = np.random.default_rng([seed, 4])
        state = AdamState()
        lr = self.cfg.lr if lr is None else lr
        history, step = [], 0
        for _ in range(epochs):
            order = rng.permutation(len(patients))
            losses = []
            for i in range(0, len(order), self.cfg.batch_size):
                batch = [patients[j] for j in order[i:i + self.cfg.batch_size]]
                value, grads = forward_backward(lambda: self.loss(batch), self.store)
                step += 1
                adam_step(self.store, grads, state, step, lr=lr)
                losses.append(value)
            history.append(float(np.mean(losses)))
        return history

    def predict(self, patients: list[PatientSequence], batch_size: int = 16) -> np.ndarray:
        out = []
        with torch.no_grad():
            for i in range(0, len(patients), batch_size):
                out.append(self.logits(patients[i:i + batch_size]).numpy() > 0)
        return np.concatenate(out).astype(int)


@dataclass
class ClassificationResult:
    scores: dict[str, list[float]] = field(default_factory=dict)  # arm -> balanced accuracy per seed

    def summary(self) -> dict[str, tuple[float, float]]:
        return {arm: (float(np.mean(v)), float(np.std(v))) for arm, v in self.scores.items()}


def classify_trajectories(train_set: list[PatientSequence], test_set: list[PatientSequence],
                          cfg: ModelConfig, hierarchy: MeshHierarchy, model: CashformerModel | None = None,
                          seeds=(0,), epochs: int = 30) -> ClassificationResult:
    """Balanced test accuracy per seed for the raw arm and, given ``model``, the imputed arm."""
    arms = {"raw": (train_set, test_set)}
    if model is not None:
        arms["imputed"] = (impute_sequences(train_set, model), impute_sequences(test_set, model))
    labels = [int(p.label == "converter") for p in test_set]
    result = ClassificationResult({arm: [] for arm in arms})
    for seed in seeds:
        for arm, (tr, te) in arms.items():
            clf = SequenceClassifier(cfg, hierarchy, seed=seed)
            clf.fit(tr, epochs=epochs, seed=seed)
            acc = balanced_accuracy(labels, clf.predict(te))
            logger.info("classification arm=%s seed=%d balanced accuracy %.3f", arm, seed, acc)
            result.scores[arm].append(acc)
    return result
