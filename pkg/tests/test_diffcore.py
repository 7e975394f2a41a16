import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from cashformer.diffcore import (AdamState, NonFiniteError, ParameterStore, adam_step, forward_backward, grad_check,
                                 load_checkpoint, load_trainable_flags, relative_error, save_checkpoint)


def test_gradient_of_sum_is_ones():
    s = ParameterStore()
    s.add("p", np.arange(5.0))
    _, g = forward_backward(lambda: s["p"].sum(), s)
    assert torch.equal(g["p"], torch.ones(5, dtype=torch.float64))


def test_gradient_of_half_square_is_identity():
    s = ParameterStore()
    p = np.array([0.5, -2.0, 3.0])
    s.add("p", p)
    value, g = forward_backward(lambda: 0.5 * (s["p"] ** 2).sum(), s)
    assert value == pytest.approx(0.5 * (p ** 2).sum())
    assert np.array_equal(g["p"].numpy(), p)


def test_frozen_parameters_get_no_gradient():
    s = ParameterStore()
    s.add("a", np.ones(2))
    s.add("b", np.ones(2), trainable=False)
    _, g = forward_backward(lambda: (s["a"] * s["b"]).sum(), s)
    assert set(g) == {"a"}
    assert not s["b"].requires_grad


def test_non_finite_loss_is_rejected():
    s = ParameterStore()
    s.add("p", np.zeros(1))
    with pytest.raises(NonFiniteError):
        forward_backward(lambda: (s["p"] / 0.0).sum(), s)


def test_unused_parameter_gets_zero_gradient():
    s = ParameterStore()
    s.add("a", np.ones(2))
    s.add("unused", np.ones(3))
    _, g = forward_backward(lambda: s["a"].sum(), s)
    assert torch.equal(g["unused"], torch.zeros(3, dtype=torch.float64))


def test_grad_check_linear_is_exact():
    w = np.array([1.5, -2.0, 0.25])
    rep = grad_check(lambda t: (t["x"] * torch.as_tensor(w)).sum(), {"x": np.zeros(3)})
    assert rep.max_error < 1e-10


def test_grad_check_flags_wrong_gradient():
    class Wrong(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            ctx.save_for_backward(x)
            return (x ** 3).sum()

        @staticmethod
        def backward(ctx, g):
            (x,) = ctx.saved_tensors
            return g * 2 * x  # should be 3 x^2

    rep = grad_check(lambda t: Wrong.apply(t["x"]), {"x": np.array([1.0, 2.0])})
    assert not rep.passed


def test_relative_error_floor():
    assert relative_error(np.array([1e-9]), np.array([0.0]))[0] == pytest.approx(1e-3)
    assert relative_error(np.array([2.0]), np.array([1.0]))[0] == pytest.approx(0.5)


def test_adam_zero_gradient_leaves_parameters():
    s = ParameterStore()
    s.add("p", np.array([1.0, -1.0]))
    adam_step(s, {"p": torch.zeros(2, dtype=torch.float64)}, AdamState(), 1, lr=0.1)
    assert np.array_equal(s.numpy("p"), [1.0, -1.0])


def test_adam_first_step_closed_form():
    s = ParameterStore()
    s.add("p", np.array([0.0, 0.0]))
    g = np.array([0.3, -4.0])
    eps, lr = 1e-8, 0.01
    adam_step(s, {"p": torch.as_tensor(g)}, AdamState(), 1, lr=lr, eps=eps)
    # bias correction makes the first moments equal g and sqrt(v) equal |g|
    assert np.allclose(s.numpy("p"), -lr * g / (np.abs(g) + eps), rtol=1e-12)


def test_adam_skips_frozen_parameters():
    s = ParameterStore()
    s.add("frozen", np.array([0.1, 0.2]), trainable=False)
    before = s.numpy("frozen").tobytes()
    adam_step(s, {"frozen": torch.ones(2, dtype=torch.float64)}, AdamState(), 1)
    assert s.numpy("frozen").tobytes() == before


def test_checkpoint_roundtrip_with_sidecar(tmp_path):
    rng = np.random.default_rng(0)
    arrays = {"a.weight": rng.normal(size=(3, 4)), "a.bias": rng.normal(size=4), "scalar": np.array(2.5)}
    path = tmp_path / "w.cshw"
    save_checkpoint(path, arrays, dtype="f64", trainable={"a.bias": True})
    back = load_checkpoint(path)
    assert list(back) == list(arrays)
    for k in arrays:
        assert back[k].dtype == np.float64 and np.array_equal(back[k], arrays[k])
    assert load_trainable_flags(path) == {"a.weight": False, "a.bias": True, "scalar": False}
    assert path.read_bytes()[:4] == b"CSHW"


def test_checkpoint_f32_resave_is_byte_identical(tmp_path):
    arrays = {"x": np.random.default_rng(1).normal(size=(5, 2))}
    save_checkpoint(tmp_path / "a.cshw", arrays)
    save_checkpoint(tmp_path / "b.cshw", load_checkpoint(tmp_path / "a.cshw"))
    assert (tmp_path / "a.cshw").read_bytes() == (tmp_path / "b.cshw").read_bytes()


def test_checkpoint_rejects_foreign_file(tmp_path):
    (tmp_path / "x").write_bytes(b"NOPE" + bytes(8))
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "x")


def test_store_assign_checks_shape():
    s = ParameterStore()
    s.add("p", np.zeros(3))
    with pytest.raises(ValueError):
        s.assign("p", np.zeros(4))
    with pytest.raises(KeyError):
        s.add("p", np.zeros(3))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=8), st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=8))
def test_relative_error_is_bounded(a, n):
    k = min(len(a), len(n))
    e = relative_error(np.array(a[:k]), np.array(n[:k]))
    assert np.all(e >= 0)
    # opposite signs can at most double the larger magnitude
    assert np.all(e <= 2.0 + 1e-12)
