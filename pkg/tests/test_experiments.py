import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cashformer.experiments import (extrapolation_removal, interpolation_removal, median_mad, protocol,
                                    run_experiment, trajectory_targets)
from cashformer.trainkit import CashformerModel, PatientSequence
from oracles import hand_median_mad


def patient(months, V=12, seed=0, gaps=()):
    rng = np.random.default_rng(seed)
    meshes = [None if k in gaps else rng.normal(size=(V, 3)) for k in range(len(months))]
    return PatientSequence("P", list(months), meshes, [None] * len(months))


def test_interpolation_indices():
    assert interpolation_removal(patient([0, 6, 12])) == [1]
    assert interpolation_removal(patient([0, 6, 12, 18, 24])) == [2]
    assert interpolation_removal(patient([0, 6, 12, 18])) == [1]
    assert interpolation_removal(patient([0, 6])) is None
    # observed-visit indexing skips gaps
    assert interpolation_removal(patient([0, 6, 12, 18, 24], gaps=(1,))) == [2]


def test_extrapolation_and_trajectory_indices():
    assert extrapolation_removal(patient([0, 6, 12])) == [2]
    assert extrapolation_removal(patient([0])) is None
    assert trajectory_targets(patient([0, 6, 36])) == [2]
    assert trajectory_targets(patient([0, 24, 48, 72])) == [1, 2, 3]
    assert trajectory_targets(patient([0, 6, 18])) is None


def test_trajectory_keeps_only_baseline():
    corrupted, targets = protocol("traj", patient([0, 6, 24, 36]))
    assert corrupted.observed == [0] and targets == [2, 3]
    with pytest.raises(ValueError):
        protocol("forecast", patient([0, 6]))


def test_median_mad_hand_values():
    med, mad = median_mad(np.array([1, 2, 3, 4, 5]) * 1e-3)
    assert med * 1e3 == pytest.approx(3.0) and mad * 1e3 == pytest.approx(1.0)
    assert median_mad([0.25] * 4) == (0.25, 0.0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=30))
def test_median_mad_matches_hand_rule(values):
    med, mad = median_mad(values)
    hm, hmad = hand_median_mad(values)
    assert med == pytest.approx(hm, abs=1e-9) and mad == pytest.approx(hmad, abs=1e-9)


def test_copy_baseline_error():
    pts = [patient([0, 6, 12], seed=s) for s in range(3)]
    res = run_experiment("interp", pts, None)
    assert res.model == "copy-reference"
    expect = [np.abs(p.meshes[0] - p.meshes[1]).mean() for p in pts]
    assert np.allclose(res.errors, expect)
    assert res.summary() == pytest.approx((np.median(expect) * 1e3, np.median(np.abs(expect - np.median(expect))) * 1e3))


def test_removed_meshes_never_reach_the_encoder(tiny_cfg, tiny_hierarchy):
    model = CashformerModel.create(tiny_cfg, tiny_hierarchy, seed=0)
    t = tiny_hierarchy.template.vertices
    pts = [PatientSequence(f"P{i}", [0, 6, 12, 24, 36], [t + 0.01 * (i + 1) + 0.1 * k for k in range(5)], [None] * 5)
           for i in range(3)]
    seen = []
    model.encode_hooks.append(lambda m: seen.extend(np.asarray(m)))
    for name, withheld in (("interp", [2]), ("extrap", [4]), ("traj", [1, 2, 3, 4])):
        seen.clear()
        res = run_experiment(name, pts, model)
        for p in pts:
            for k in withheld:
                assert not any(np.array_equal(m, p.meshes[k]) for m in seen)
        assert res.vertex_error.shape == (12,)
        assert len(res.records) == 3 * (2 if name == "traj" else 1)


def test_skipped_patients_counted():
    res = run_experiment("interp", [patient([0, 6]), patient([0, 6, 12])], None)
    assert res.skipped == 1 and len(res.records) == 1
