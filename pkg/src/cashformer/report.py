"""Result tables (text + TSV), parameter-count rows and the per-vertex error file."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import spiralnet
from .config import PRESETS, ModelConfig
from .diffcore import ParameterStore
from .experiments import ExperimentResult
from .seqcore import TransformerConfig, count_transformer

logger = logging.getLogger(__name__)

# vertices of the subdivision-3 icosphere template used by the full presets
DEFAULT_TEMPLATE_VERTICES = 642


def level_counts(n_vertices: int, downsample) -> list[int]:
    """Vertices per hierarchy level; a factor f keeps ceil(V / f)."""
    out, v = [], int(n_vertices)
    for f in downsample:
        v = -(-v // int(f))
        out.append(v)
    return out


@dataclass(frozen=True)
class ParameterRow:
    preset: str
    mesh: int
    embeddings: int
    transformer_trainable: int
    transformer_total: int

    @property
    def trainable(self) -> int:
        return self.mesh + self.embeddings + self.transformer_trainable

    @property
    def total(self) -> int:
        return self.mesh + self.embeddings + self.transformer_total

    @property
    def fraction(self) -> float:
        return self.trainable / self.total


def preset_parameters(name: str, cfg: ModelConfig | None = None, n_vertices: int | None = None,
                      frozen: bool = True) -> ParameterRow:
    """Parameter counts of a preset without instantiating its transformer.

    Mesh networks are built for real (they are small); transformer counts come
    from the checkpoint shapes alone.
    """
    cfg = cfg or PRESETS[name]
    if n_vertices is None:
        n_vertices = 10 * 4 ** cfg.template_subdivisions + 2
    store = ParameterStore()
    spiralnet.init_mesh_networks(store, cfg, level_counts(n_vertices, cfg.downsample), np.random.default_rng(0))
    embeddings = cfg.max_len * cfg.latent_dim + 21 * cfg.latent_dim
    tt, tn = count_transformer(TransformerConfig.from_model(cfg), frozen=frozen)
    return ParameterRow(name, store.count(), embeddings, tt, tn)


def parameter_rows(names=("gpt2", "vit_base", "vit_large", "toy"), frozen: bool = True) -> list[ParameterRow]:
    return [preset_parameters(n, frozen=frozen) for n in names]


# ----------------------------------------------------------------------------
# Tables
# ----------------------------------------------------------------------------

def _align(rows: list[list[str]]) -> str:
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    lines = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths))).rstrip()
             for r in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def experiment_rows(results: list[ExperimentResult]) -> list[list[str]]:
    """One row per model, one ``median +- MAD`` cell per experiment (x 10^3)."""
    experiments = list(dict.fromkeys(r.experiment for r in results))
    models = list(dict.fromkeys(r.model for r in results))
    cell = {(r.model, r.experiment): r for r in results}
    rows = [["model"] + experiments]
    for m in models:
        row = [m]
        for e in experiments:
            r = cell.get((m, e))
            if r is None or not r.records:
                row.append("-")
            else:
                med, mad = r.summary()
                row.append(f"{med:.3f} +- {mad:.3f}")
        rows.append(row)
    return rows


def format_results(results: list[ExperimentResult]) -> str:
    return _align(experiment_rows(results))


def format_parameters(rows: list[ParameterRow]) -> str:
    table = [["preset", "trainable", "total", "fraction"]]
    for r in rows:
        table.append([r.preset, f"{r.trainable:,}", f"{r.total:,}", f"{100 * r.fraction:.2f}%"])
    return _align(table)


def write_results_tsv(path, results: list[ExperimentResult]) -> None:
    lines = ["experiment\tmodel\tn\tskipped\tmedian_x1e3\tmad_x1e3"]
    for r in results:
        med, mad = r.summary() if r.records else (float("nan"), float("nan"))
        lines.append(f"{r.experiment}\t{r.model}\t{len(r.records)}\t{r.skipped}\t{float(med)!r}\t{float(mad)!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def write_records_tsv(path, results: list[ExperimentResult]) -> None:
    lines = ["experiment\tmodel\tpatient_id\tslot\tmonth\tmae"]
    for r in results:
        lines.extend(f"{r.experiment}\t{r.model}\t{pid}\t{slot}\t{month}\t{float(mae)!r}" for pid, slot, month, mae in r.records)
    Path(path).write_text("\n".join(lines) + "\n")


def write_parameters_tsv(path, rows: list[ParameterRow]) -> None:
    lines = ["preset\tmesh\tembeddings\ttransformer_trainable\ttransformer_total\ttrainable\ttotal"]
    lines.extend(f"{r.preset}\t{r.mesh}\t{r.embeddings}\t{r.transformer_trainable}\t{r.transformer_total}"
                 f"\t{r.trainable}\t{r.total}" for r in rows)
    Path(path).write_text("\n".join(lines) + "\n")


def write_vertex_field(path, field) -> None:
    """One float per template vertex, template order."""
    v = np.asarray(field, dtype=np.float64).ravel()
    Path(path).write_text("".join(f"{float(x)!r}\n" for x in v))


def read_vertex_field(path) -> np.ndarray:
    return np.array([float(x) for x in Path(path).read_text().split()])


def write_report(out_dir, results: list[ExperimentResult], parameters: list[ParameterRow] | None = None,
                 classification=None, template=None, figures: bool = True) -> dict[str, Path]:
    """Write the text table, TSV files, vertex-error fields and (optionally) figures."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = {}
    text = format_results(results)
    if parameters:
        text += "\n\n" + format_parameters(parameters)
        write_parameters_tsv(out / "parameters.tsv", parameters)
        written["parameters"] = out / "parameters.tsv"
    if classification is not None:
        summary = classification.summary()
        text += "\n\n" + _align([["arm", "balanced accuracy"]]
                                + [[arm, f"{m:.3f} +- {s:.3f}"] for arm, (m, s) in summary.items()])
    (out / "report.txt").write_text(text + "\n")
    written["report"] = out / "report.txt"
    write_results_tsv(out / "results.tsv", results)
    write_records_tsv(out / "records.tsv", results)
    written["results"] = out / "results.tsv"
    for r in results:
        if r.vertex_error is not None:
            p = out / f"vertex_error_{r.experiment}_{r.model}.txt"
            write_vertex_field(p, r.vertex_error)
            written[p.stem] = p
    if figures:
        from . import plotting
        written.update(plotting.render_all(out, results, classification, template))
    logger.info("report written to %s", out)
    return written
