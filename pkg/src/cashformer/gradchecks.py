"""Central-difference checks of the hand-assembled forward passes.

Every component reads its weights by name, so a plain dict of tensors can
stand in for the ParameterStore while the checker perturbs coordinates.
"""

from __future__ import annotations

import logging

import numpy as np
import torch

from . import spiralnet
from .config import ModelConfig
from .diffcore import DTYPE, GradCheckReport, ParameterStore, grad_check
from .meshgeom import hippocampus_template, icosahedron, precompute_hierarchy
from .seqcore import TransformerConfig, encoder_block, random_transformer_weights
from .trainkit import AugmentationPlan, CashformerModel, PatientSequence

logger = logging.getLogger(__name__)

STEP = 1e-5
TOLERANCE = 1e-4


def _projection(rng, shape):
    # random linear read-out so no output coordinate cancels another; unit
    # overall scale keeps the central-difference round-off near 1e-11
    return torch.as_tensor(rng.normal(size=shape) / np.sqrt(np.prod(shape)), dtype=DTYPE)


def check_spiral_conv(levels, cfg: ModelConfig, rng, n_samples: int) -> GradCheckReport:
    V, spiral = levels.counts[0], levels.spirals[0]
    store = ParameterStore()
    spiralnet.init_spiral_conv(store, "c", spiral.shape[1], 3, 5, rng, depth=cfg.gamma_depth)
    params = store.snapshot()
    params["x"] = rng.normal(size=(2, V, 3))
    R = _projection(rng, (2, V, 5))
    return grad_check(lambda p: (spiralnet.spiral_conv(p["x"], spiral, p, "c", cfg.gamma_depth) * R).sum(),
                      params, STEP, TOLERANCE, n_samples)


def check_res_block(levels, cfg: ModelConfig, rng, n_samples: int) -> GradCheckReport:
    V, spiral = levels.counts[0], levels.spirals[0]
    store = ParameterStore()
    spiralnet.init_res_block(store, "r", spiral.shape[1], 3, 4, rng, cfg.gamma_depth)
    params = store.snapshot()
    params["x"] = rng.normal(size=(2, V, 3))
    R = _projection(rng, (2, V, 4))
    # the normalized path is the one with non-trivial gradients
    norm = cfg.norm if cfg.norm != "none" else "instance"
    return grad_check(lambda p: (spiralnet.res_block(p["x"], spiral, p, "r", norm, cfg.gamma_depth) * R).sum(),
                      params, STEP, TOLERANCE, n_samples)


def check_encoder_block(cfg: ModelConfig, rng, n_samples: int, T: int = 4) -> GradCheckReport:
    tcfg = TransformerConfig.from_model(cfg)
    weights = random_transformer_weights(tcfg, int(rng.integers(1 << 31)))
    params = {k[len("tf.blocks.0."):]: v for k, v in weights.items() if k.startswith("tf.blocks.0.")}
    # perturb the LN affine maps away from (1, 0) so their gradients are generic
    for k in params:
        if k.endswith("scale") or k.endswith("shift") or k.endswith("bias"):
            params[k] = params[k] + 0.1 * rng.normal(size=params[k].shape)
    params["x"] = rng.normal(size=(2, T, tcfg.dim))
    mask = torch.zeros(2, T, dtype=torch.bool)
    mask[1, T - 1] = True
    R = _projection(rng, (2, T, tcfg.dim))
    return grad_check(lambda p: (encoder_block(p["x"], mask, p, "", tcfg.heads) * R).sum(),
                      params, STEP, TOLERANCE, n_samples)


def check_pipeline(hierarchy, cfg: ModelConfig, rng, n_samples: int, T: int = 4) -> GradCheckReport:
    """Loss of two patients with T visits (one with a gap and a substituted slot)."""
    # a non-negligible CDA weight so its gradient is visible next to the reconstruction term
    model = CashformerModel.create(cfg.replace(lambda_cda=0.5, max_len=T), hierarchy, seed=int(rng.integers(1 << 31)))
    base = hierarchy.template.vertices
    patients = []
    for i in range(2):
        meshes = [base + 0.01 * rng.normal(size=base.shape) for _ in range(T)]
        adas = [10.0 + 3.0 * t + i for t in range(T)]
        if i == 1:
            meshes[2], adas[2] = None, None
        patients.append(PatientSequence(f"G{i}", [6 * t for t in range(T)], meshes, adas))
    plans = [AugmentationPlan((1,), (), ()), None]
    params = model.store.snapshot()

    def loss(p):
        saved, model.store = model.store, p
        try:
            return model.loss(patients, plans)
        finally:
            model.store = saved

    return grad_check(loss, params, STEP, TOLERANCE, n_samples)


def run_gradchecks(cfg: ModelConfig, seed: int = 0, n_samples: int = 8) -> dict[str, GradCheckReport]:
    """Gradient checks of spiral_conv, res_block, encoder_block and the full loss.

    The template is the icosahedron when ``cfg.template_subdivisions == 0``
    (12 vertices) and the hippocampus-like template otherwise.
    """
    rng = np.random.default_rng(seed)
    template = icosahedron() if cfg.template_subdivisions == 0 else hippocampus_template(cfg.template_subdivisions)
    hierarchy = precompute_hierarchy(template, cfg.level_specs)
    levels = spiralnet.LevelTensors(hierarchy)
    reports = {
        "spiral_conv": check_spiral_conv(levels, cfg, rng, n_samples),
        "res_block": check_res_block(levels, cfg, rng, n_samples),
        "encoder_block": check_encoder_block(cfg, rng, n_samples),
        "pipeline": check_pipeline(hierarchy, cfg, rng, n_samples),
    }
    for name, r in reports.items():
        logger.info("gradcheck %s: max relative error %.3e", name, r.max_error)
    return reports
