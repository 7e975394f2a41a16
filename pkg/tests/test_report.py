import numpy as np
import pytest

from cashformer.classify import ClassificationResult
from cashformer.experiments import ExperimentResult
from cashformer.meshgeom import icosphere
from cashformer.report import (ParameterRow, format_parameters, format_results, level_counts, parameter_rows,
                               preset_parameters, read_vertex_field, write_report, write_vertex_field)


def fake_results():
    rng = np.random.default_rng(0)
    out = []
    for exp in ("interp", "extrap"):
        for model in ("cashformer", "copy-reference"):
            r = ExperimentResult(exp, model)
            r.records = [(f"P{i}", 1, 6, float(e)) for i, e in enumerate(np.array([1, 2, 3, 4, 5]) * 1e-3)]
            r.vertex_error = rng.random(42)
            out.append(r)
    return out


def test_level_counts():
    assert level_counts(642, (1, 2, 2, 2, 2)) == [642, 321, 161, 81, 41]


def test_vit_large_row():
    row = preset_parameters("vit_large")
    assert row.transformer_trainable == 100_352
    assert row.fraction < 0.10
    assert row.trainable == row.mesh + row.embeddings + 100_352


def test_unfrozen_rows_are_fully_trainable():
    for r in parameter_rows(("toy",), frozen=False):
        assert r.trainable == r.total


def test_results_table_uses_median_and_mad():
    text = format_results(fake_results())
    assert "3.000 +- 1.000" in text
    assert text.splitlines()[0].split() == ["model", "interp", "extrap"]


def test_parameter_table():
    text = format_parameters([ParameterRow("x", 10, 5, 5, 80)])
    assert "20" in text and "95" in text and "21.05%" in text


def test_vertex_field_roundtrip(tmp_path):
    v = np.random.default_rng(1).normal(size=50)
    write_vertex_field(tmp_path / "f.txt", v)
    assert np.array_equal(read_vertex_field(tmp_path / "f.txt"), v)


def test_write_report_files_and_figures(tmp_path):
    template = icosphere(1).vertices
    cls = ClassificationResult({"raw": [0.7, 0.8], "imputed": [0.75, 0.85]})
    written = write_report(tmp_path, fake_results(), parameter_rows(("toy",)), cls, template)
    for key in ("report", "results", "parameters", "fig_errors", "fig_classification",
                "fig_vertex_interp_cashformer"):
        assert written[key].exists() and written[key].stat().st_size > 0
    assert written["fig_errors"].read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    rows = (tmp_path / "results.tsv").read_text().splitlines()
    assert rows[0].split("\t") == ["experiment", "model", "n", "skipped", "median_x1e3", "mad_x1e3"]
    assert float(rows[1].split("\t")[4]) == pytest.approx(3.0)
    assert len((tmp_path / "records.tsv").read_text().splitlines()) == 1 + 4 * 5
    assert "raw" in (tmp_path / "report.txt").read_text()


def test_write_report_without_figures(tmp_path):
    written = write_report(tmp_path, fake_results(), figures=False)
    assert not (tmp_path / "figures").exists()
    assert len(read_vertex_field(written["vertex_error_interp_cashformer"])) == 42
