import numpy as np
import pytest
import torch
import torch.nn.functional as F

from cashformer import spiralnet
from cashformer.diffcore import DTYPE, ParameterStore, grad_check
from cashformer.meshgeom import TemplateMesh, spiral_table
from oracles import random_closed_mesh


def as_t(x):
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def test_unit_spiral_identity_map():
    s = ParameterStore()
    s.add("c.w0", np.eye(3))
    s.add("c.b0", np.zeros(3))
    x = as_t(np.random.default_rng(0).normal(size=(2, 5, 3)))
    spiral = torch.arange(5).reshape(5, 1)
    assert torch.equal(spiralnet.spiral_conv(x, spiral, s, "c"), x)


def test_two_vertex_hand_multiply():
    a, b, c = 0.7, -1.3, 0.25
    s = ParameterStore()
    s.add("c.w0", np.array([[a], [b]]))
    s.add("c.b0", np.array([c]))
    x = as_t([[[2.0], [5.0]]])
    spiral = torch.tensor([[0, 1], [1, 0]])
    out = spiralnet.spiral_conv(x, spiral, s, "c")
    assert out[0, 0, 0].item() == pytest.approx(a * 2.0 + b * 5.0 + c, abs=1e-15)
    assert out[0, 1, 0].item() == pytest.approx(a * 5.0 + b * 2.0 + c, abs=1e-15)


def test_pad_gathers_zero_feature():
    s = ParameterStore()
    s.add("c.w0", np.ones((2, 1)))
    s.add("c.b0", np.zeros(1))
    x = as_t([[[3.0], [4.0]]])
    spiral = torch.tensor([[0, 2], [1, 2]])  # second entry is the pad sentinel
    assert spiralnet.spiral_conv(x, spiral, s, "c")[0, :, 0].tolist() == [3.0, 4.0]


def test_zero_features_zero_bias():
    s = ParameterStore()
    spiralnet.init_spiral_conv(s, "c", 4, 3, 5, np.random.default_rng(0))
    spiral = torch.as_tensor(np.random.default_rng(1).integers(0, 7, size=(6, 4)))
    assert torch.equal(spiralnet.spiral_conv(torch.zeros(1, 6, 3, dtype=DTYPE), spiral, s, "c"),
                       torch.zeros(1, 6, 5, dtype=DTYPE))


def test_res_block_with_zero_convs_is_elu():
    s = ParameterStore()
    spiralnet.init_res_block(s, "r", 3, 4, 4, np.random.default_rng(0))
    for name in s.names("r.conv"):
        s.assign(name, np.zeros(s[name].shape))
    x = as_t(np.random.default_rng(1).normal(size=(2, 6, 4)))
    spiral = torch.as_tensor(np.random.default_rng(2).integers(0, 6, size=(6, 3)))
    for mode in ("instance", "batch", "none"):
        assert torch.allclose(spiralnet.res_block(x, spiral, s, "r", mode), F.elu(x), atol=1e-15)


def test_res_block_projection_skip_shape():
    s = ParameterStore()
    spiralnet.init_res_block(s, "r", 3, 2, 5, np.random.default_rng(0))
    assert tuple(s["r.skip"].shape) == (2, 5)
    spiral = torch.zeros(7, 3, dtype=torch.long)
    out = spiralnet.res_block(torch.ones(1, 7, 2, dtype=DTYPE), spiral, s, "r")
    assert tuple(out.shape) == (1, 7, 5)


def test_res_block_gradient_on_ten_vertices():
    rng = np.random.default_rng(3)
    p, f = random_closed_mesh(rng, 10)
    spiral = torch.as_tensor(spiral_table(TemplateMesh(p, f), 7).indices)
    s = ParameterStore()
    spiralnet.init_res_block(s, "r", 7, 3, 4, rng)
    params = s.snapshot()
    params["x"] = rng.normal(size=(1, 10, 3))
    R = torch.as_tensor(rng.normal(size=(1, 10, 4)) / np.sqrt(40))
    rep = grad_check(lambda t: (spiralnet.res_block(t["x"], spiral, t, "r") * R).sum(), params, n_samples=16)
    assert rep.max_error < 1e-4, rep.errors


def test_unknown_norm_mode():
    s = ParameterStore()
    spiralnet.init_norm(s, "n", 2)
    with pytest.raises(ValueError):
        spiralnet.normalize(torch.zeros(1, 3, 2, dtype=DTYPE), s, "n", "group")


@pytest.fixture(scope="module")
def tiny_nets(tiny_cfg, tiny_hierarchy):
    s = ParameterStore()
    levels = spiralnet.LevelTensors(tiny_hierarchy)
    spiralnet.init_mesh_networks(s, tiny_cfg, levels.counts, np.random.default_rng(0))
    return s, levels


def test_encode_deterministic_and_sensitive(tiny_cfg, tiny_nets):
    s, levels = tiny_nets
    m = levels.template + 0.05 * torch.as_tensor(np.random.default_rng(1).normal(size=(12, 3)))
    ref = levels.template.clone()
    z1 = spiralnet.encode(s, m, levels, tiny_cfg, reference=ref)
    z2 = spiralnet.encode(s, m.clone(), levels, tiny_cfg, reference=ref)
    assert torch.equal(z1, z2)
    m2 = m.clone()
    m2[5, 1] += 0.01
    assert not torch.allclose(z1, spiralnet.encode(s, m2, levels, tiny_cfg, reference=ref))


def test_encode_rejects_wrong_vertex_count(tiny_cfg, tiny_nets):
    s, levels = tiny_nets
    with pytest.raises(ValueError):
        spiralnet.encode(s, torch.zeros(1, 11, 3, dtype=DTYPE), levels, tiny_cfg)


def test_zero_decoder_output_gives_reference(tiny_cfg, tiny_nets):
    s, levels = tiny_nets
    s = s.copy()
    for name in s.names("dec.out"):
        s.assign(name, np.zeros(s[name].shape))
    delta = spiralnet.decode(s, torch.ones(3, tiny_cfg.latent_dim, dtype=DTYPE), levels, tiny_cfg)
    assert tuple(delta.shape) == (3, 12, 3)
    assert torch.equal(levels.template + delta[0], levels.template)


def test_encode_decode_gradient(tiny_cfg, tiny_nets):
    s, levels = tiny_nets
    rng = np.random.default_rng(4)
    params = s.snapshot()
    params["x"] = levels.template.numpy() + 0.05 * rng.normal(size=(12, 3))
    ref = levels.template
    R = torch.as_tensor(rng.normal(size=(1, 12, 3)) / 6.0)

    def fn(t):
        z = spiralnet.encode(t, t["x"], levels, tiny_cfg, reference=ref)
        return (spiralnet.decode(t, z, levels, tiny_cfg) * R).sum()

    rep = grad_check(fn, params, n_samples=6)
    assert rep.max_error < 1e-4, rep.errors
