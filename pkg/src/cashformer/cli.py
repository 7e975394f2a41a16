"""Command-line entry point: ``cashformer <command> [flags]``."""

from __future__ import annotations

import argparse
import logging
import os
import shutil
import sys
from dataclasses import replace
from pathlib import Path


logger = logging.getLogger("cashformer")

COMMANDS = ("precompute", "synth", "split", "train", "eval", "impute", "classify", "gradcheck")


def _seed(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2 ** 64:
        raise argparse.ArgumentTypeError(f"seed must be in [0, 2^64), got {text}")
    return value


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default="toy", help="preset name or key = value config file (default: toy)")
    common.add_argument("--seed", type=_seed, default=0)
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--checkpoint", type=Path, help="model checkpoint (.cshw)")
    common.add_argument("--frozen", choices=("on", "off"), default="on",
                        help="train only LayerNorm parameters of the transformer (default: on)")

    parser = argparse.ArgumentParser(prog="cashformer", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("precompute", parents=[common], help="template -> mesh hierarchy")
    p.add_argument("--template", type=Path, help="template mesh file (default: built-in template)")

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic longitudinal dataset")
    p.add_argument("--patients", type=int, default=200)
    p.add_argument("--profile", default="default")
    p.add_argument("--template", type=Path)

    p = sub.add_parser("split", parents=[common], help="stratified train/val/test split")
    p.add_argument("--data", type=Path, required=True, help="manifest.tsv or a directory holding one")

    p = sub.add_parser("train", parents=[common], help="train a model on a split directory")
    p.add_argument("--data", type=Path, required=True, help="directory with train.tsv and val.tsv")
    p.add_argument("--hierarchy", type=Path, help="precomputed hierarchy (default: built from the data template)")
    p.add_argument("--name-map", type=Path, help="checkpoint name map (lines 'external -> internal')")
    p.add_argument("--epochs", type=int)
    p.add_argument("--max-steps", type=int)

    p = sub.add_parser("eval", parents=[common], help="run evaluation protocols and write a report")
    p.add_argument("--experiment", choices=("interp", "extrap", "traj"), action="append",
                   help="protocol to run; repeatable (default: all three)")
    p.add_argument("--data", type=Path, required=True, help="test manifest or split directory")
    p.add_argument("--no-figures", action="store_true")

    p = sub.add_parser("impute", parents=[common], help="write reconstructed meshes for every slot")
    p.add_argument("--data", type=Path, required=True)

    p = sub.add_parser("classify", parents=[common], help="stable/converter classification, raw vs imputed")
    p.add_argument("--data", type=Path, required=True, help="split directory")
    p.add_argument("--repeats", type=int, default=5, help="number of seeded repetitions")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--shuffle-labels", action="store_true")
    p.add_argument("--no-figures", action="store_true")

    p = sub.add_parser("gradcheck", parents=[common], help="central-difference gradient checks")
    p.add_argument("--samples", type=int, default=8, help="probed coordinates per parameter")
    return parser


# ----------------------------------------------------------------------------
# helpers
# ----------------------------------------------------------------------------

def _manifest_path(path: Path, name: str = "manifest.tsv") -> Path:
    return path / name if path.is_dir() else path


def _template(args, cfg):
    from .meshgeom import hippocampus_template, read_mesh
    if getattr(args, "template", None):
        return read_mesh(args.template)
    data = getattr(args, "data", None)
    if data is not None:
        candidate = (data if data.is_dir() else data.parent) / "template.mesh"
        if candidate.exists():
            return read_mesh(candidate)
    return hippocampus_template(cfg.template_subdivisions)


def _hierarchy(args, cfg):
    from .meshgeom import MeshHierarchy, precompute_hierarchy
    if getattr(args, "hierarchy", None):
        return MeshHierarchy.load(args.hierarchy)
    return precompute_hierarchy(_template(args, cfg), cfg.level_specs)


def _rebase(manifest, new_root: Path):
    """Rewrite mesh paths relative to ``new_root``."""
    from .datakit import DatasetManifest
    patients = []
    for p in manifest.patients:
        visits = [replace(v, mesh=None if v.mesh is None
                          else os.path.relpath(manifest.resolve(v.mesh).resolve(), new_root.resolve()))
                  for v in p.visits]
        patients.append(replace(p, visits=visits))
    return DatasetManifest(patients, new_root)


def _load_model(args):
    from .trainkit import CashformerModel
    return CashformerModel.load(args.checkpoint)


def _out(args, default: str) -> Path:
    out = args.out or Path(default)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ----------------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------------

def cmd_precompute(args, cfg) -> int:
    from .meshgeom import write_mesh
    out = _out(args, "hierarchy")
    template = _template(args, cfg)
    h = _hierarchy(args, cfg)
    h.save(out / "hierarchy.cshh")
    write_mesh(out / "template.mesh", template)
    print(f"levels\t{' '.join(str(c) for c in h.vertex_counts)}")
    print(f"hierarchy\t{out / 'hierarchy.cshh'}")
    return 0


def cmd_synth(args, cfg) -> int:
    from .datakit import PROFILES, synth_generate
    if args.profile not in PROFILES:
        raise ValueError(f"unknown profile {args.profile!r} (choose from {', '.join(PROFILES)})")
    out = _out(args, "data")
    manifest = synth_generate(_template(args, cfg), args.patients, args.seed, out, PROFILES[args.profile])
    n_visits = sum(len(p.visits) for p in manifest.patients)
    print(f"patients\t{len(manifest)}\nvisits\t{n_visits}\nmanifest\t{out / 'manifest.tsv'}")
    return 0


def cmd_split(args, cfg) -> int:
    from .datakit import load_manifest, save_manifest, stratified_split
    src = _manifest_path(args.data)
    manifest = load_manifest(src)
    out = _out(args, "splits")
    for name, part in zip(("train", "val", "test"), stratified_split(manifest, seed=args.seed)):
        save_manifest(out / f"{name}.tsv", _rebase(part, out))
        print(f"{name}\t{len(part)}")
    template = src.parent / "template.mesh"
    if template.exists() and template.resolve() != (out / "template.mesh").resolve():
        shutil.copyfile(template, out / "template.mesh")
    return 0


def cmd_train(args, cfg) -> int:
    from .datakit import load_manifest
    from .diffcore import load_checkpoint
    from .seqcore import read_name_map
    from .trainkit import CashformerModel, patients_from_manifest, train
    h = _hierarchy(args, cfg)
    train_m = load_manifest(args.data / "train.tsv", h.template.n_vertices)
    val_path = args.data / "val.tsv"
    val_m = load_manifest(val_path, h.template.n_vertices) if val_path.exists() else None
    pretrained = None
    if args.checkpoint:
        pretrained = load_checkpoint(args.checkpoint)
        if args.name_map:
            names = read_name_map(args.name_map)
            pretrained = {names.get(k, k): v for k, v in pretrained.items()}
    model = CashformerModel.create(cfg, h, seed=args.seed, pretrained=pretrained, frozen=args.frozen == "on")
    trainable, total = model.parameter_counts()
    logger.info("trainable parameters: %d of %d (frozen=%s)", trainable, total, args.frozen)
    print(f"trainable\t{trainable}\ntotal\t{total}")
    out = _out(args, "run")
    result = train(model, patients_from_manifest(train_m, h),
                   patients_from_manifest(val_m, h) if val_m else None,
                   seed=args.seed, epochs=args.epochs, max_steps=args.max_steps, log_path=out / "train_log.txt")
    ckpt = model.save(out, seed=args.seed, splits={"train": (args.data / "train.tsv").resolve(),
                                                   "val": val_path.resolve() if val_m else "-"})
    print(f"steps\t{result.steps}\nbest_epoch\t{result.best_epoch}\nbest_val\t{result.best_val!r}\n"
          f"checkpoint\t{ckpt}")
    return 0


def cmd_eval(args, cfg) -> int:
    from .datakit import load_manifest
    from .experiments import EXPERIMENTS, run_experiment
    from .report import format_results, write_report
    from .trainkit import patients_from_manifest
    model = _load_model(args)
    h = model.hierarchy
    manifest = load_manifest(_manifest_path(args.data, "test.tsv"), h.template.n_vertices)
    patients = patients_from_manifest(manifest, h)
    results = []
    for name in args.experiment or EXPERIMENTS:
        results.append(run_experiment(name, patients, model, label="cashformer"))
        results.append(run_experiment(name, patients, None))
    out = _out(args, "report")
    write_report(out, results, template=h.template.vertices, figures=not args.no_figures)
    print(format_results(results))
    return 0


def cmd_impute(args, cfg) -> int:
    from .datakit import load_manifest
    from .meshgeom import TemplateMesh, write_mesh
    from .trainkit import patients_from_manifest, predict_batch
    model = _load_model(args)
    h = model.hierarchy
    manifest = load_manifest(_manifest_path(args.data), h.template.n_vertices)
    patients = patients_from_manifest(manifest, h)
    out = _out(args, "imputed")
    (out / "meshes").mkdir(exist_ok=True)
    lines = ["patient_id\tslot\tkind\tmesh"]
    for i in range(0, len(patients), 16):
        chunk = patients[i:i + 16]
        for p, pred in zip(chunk, predict_batch(model, chunk)):
            for t, rec in enumerate(pred.reconstructions):
                kind = "observed" if t < p.n_visits and p.meshes[t] is not None else "imputed"
                rel = f"meshes/{p.patient_id}_s{t}.mesh"
                write_mesh(out / rel, TemplateMesh(h.denormalize(rec), h.template.faces))
                lines.append(f"{p.patient_id}\t{t}\t{kind}\t{rel}")
    (out / "imputed.tsv").write_text("\n".join(lines) + "\n")
    print(f"patients\t{len(patients)}\nindex\t{out / 'imputed.tsv'}")
    return 0


def cmd_classify(args, cfg) -> int:
    from .classify import classify_trajectories
    from .datakit import load_manifest, shuffle_labels
    from .plotting import plot_classification
    from .trainkit import CashformerModel, patients_from_manifest
    model = CashformerModel.load(args.checkpoint) if args.checkpoint else None
    h = model.hierarchy if model else _hierarchy(args, cfg)
    parts = []
    for name in ("train", "test"):
        m = load_manifest(args.data / f"{name}.tsv", h.template.n_vertices)
        if args.shuffle_labels:
            m = shuffle_labels(m, args.seed)
        parts.append(patients_from_manifest(m, h))
    seeds = [args.seed + k for k in range(args.repeats)]
    result = classify_trajectories(parts[0], parts[1], model.cfg if model else cfg, h, model, seeds, args.epochs)
    out = _out(args, "classification")
    lines = ["arm\tseed\tbalanced_accuracy"]
    for arm, scores in result.scores.items():
        lines.extend(f"{arm}\t{s}\t{a!r}" for s, a in zip(seeds, scores))
    (out / "classification.tsv").write_text("\n".join(lines) + "\n")
    if not args.no_figures:
        plot_classification(result.scores, out / "classification.png")
    for arm, (mean, std) in result.summary().items():
        print(f"{arm}\t{mean:.4f}\t{std:.4f}")
    return 0


def cmd_gradcheck(args, cfg) -> int:
    from .gradchecks import TOLERANCE, run_gradchecks
    reports = run_gradchecks(cfg, seed=args.seed, n_samples=args.samples)
    worst = max(r.max_error for r in reports.values())
    for name, r in reports.items():
        print(f"{name}\t{r.max_error:.3e}")
    print(f"max relative error {worst:.3e}")
    return 0 if worst < TOLERANCE else 1


HANDLERS = {name: globals()[f"cmd_{name}"] for name in COMMANDS}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    if args.command in ("eval", "impute") and args.checkpoint is None:
        parser.print_usage(sys.stderr)
        print(f"cashformer {args.command}: error: --checkpoint is required", file=sys.stderr)
        return 2

    import torch
    torch.set_num_threads(1)
    from .config import load_config
    from .datakit import ManifestError
    from .meshgeom import MeshError
    from .trainkit import TrainingError
    try:
        cfg = load_config(args.config)
        return HANDLERS[args.command](args, cfg)
    except (ValueError, OSError, ManifestError, MeshError, TrainingError) as exc:
        print(f"cashformer {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
