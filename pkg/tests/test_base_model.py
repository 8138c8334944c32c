import numpy as np
import pytest
from hypothesis import given, strategies as st

from unsupmeta import tensor as T
from unsupmeta.base_model import ACTIVATIONS, ArchSpec, BaseParams, embed, forward, init_params, sample_arch

from oracles import base_forward


def test_init_shapes():
    p = init_params(ArchSpec((4, 8, 32)), 0)
    assert p.W[0].shape == (4, 8) and p.V[1].shape == (8, 32) and p.b[1].shape == (32,)
    assert np.all(p.bn_scale[0].data == 1) and np.all(p.bn_offset[1].data == 0) and np.all(p.b[0].data == 0)


def test_init_deterministic():
    a, b = init_params(ArchSpec((5, 7, 3)), 11), init_params(ArchSpec((5, 7, 3)), 11)
    assert all(np.array_equal(a.arrays()[k], b.arrays()[k]) for k in a.arrays())


def test_init_std_fan_in():
    p = init_params(ArchSpec((256, 64, 32)), 0)
    assert abs(p.W[0].data.std() - 1 / 16) < 0.1 / 16
    assert abs(p.V[0].data.std() - 1 / 16) < 0.1 / 16


@pytest.mark.parametrize("sizes", [(1,), (3, 0)])
def test_arch_validation(sizes):
    with pytest.raises(ValueError):
        ArchSpec(sizes)


def test_unknown_activation():
    with pytest.raises(ValueError):
        ArchSpec((2, 2), "gelu")


def test_zero_weights_give_activation_of_zero():
    arch = ArchSpec((3, 4, 2), "sigmoid" if "sigmoid" in ACTIVATIONS else "tanh")
    p = init_params(arch, 0)
    zero = BaseParams(arch, [T.Tensor(np.zeros_like(w.data)) for w in p.W], p.V, p.b, p.bn_scale, p.bn_offset)
    tr = forward(np.random.default_rng(0).normal(size=(5, 3)), zero)
    for l in range(2):
        np.testing.assert_array_equal(tr.z[l].data, 0.0)


def test_forward_matches_composition_oracle(rng):
    arch = ArchSpec((5, 6, 4))
    p = init_params(arch, 3)
    A = p.arrays()
    A["bn_scale1"] = rng.uniform(0.5, 2, size=6)
    A["bn_offset2"] = rng.normal(size=4)
    A["b1"] = rng.normal(size=6)
    p = BaseParams.from_arrays(arch, A)
    x = rng.normal(size=(7, 5))
    xs, zs = base_forward(x, [A["W1"], A["W2"]], [A["b1"], A["b2"]], [A["bn_scale1"], A["bn_scale2"]],
                          [A["bn_offset1"], A["bn_offset2"]])
    tr = forward(x, p)
    for l in range(2):
        np.testing.assert_allclose(tr.z[l].data, zs[l], atol=1e-12)
        np.testing.assert_allclose(tr.x[l + 1].data, xs[l + 1], atol=1e-12)


@given(st.integers(0, 10_000))
def test_input_permutation_equivariance(seed):
    r = np.random.default_rng(seed)
    arch = ArchSpec((6, 5, 3))
    p = init_params(arch, seed)
    x = r.normal(size=(4, 6))
    perm = r.permutation(6)
    A = p.arrays()
    A["W1"] = A["W1"][perm]
    q = BaseParams.from_arrays(arch, A)
    a, b = forward(x, p), forward(x[:, perm], q)
    for l in range(2):
        np.testing.assert_allclose(a.z[l].data, b.z[l].data, atol=1e-12)


@pytest.mark.parametrize("act", ACTIVATIONS)
def test_trace_consistency_all_activations(act):
    from unsupmeta.base_model import _ACT_FN

    p = init_params(ArchSpec((3, 5, 4), act), 0)
    tr = forward(np.random.default_rng(1).normal(size=(6, 3)), p)
    for l in range(2):
        np.testing.assert_array_equal(tr.x[l + 1].data, _ACT_FN[act](tr.z[l]).data)
        assert np.all(np.isfinite(tr.x[l + 1].data))


def test_step_activation_values():
    from unsupmeta.base_model import _ACT_FN

    np.testing.assert_array_equal(_ACT_FN["step"](T.Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 1.0])


def test_embed_equals_forward(rng):
    p = init_params(ArchSpec((3, 4, 5)), 0)
    x = rng.normal(size=(4, 3))
    e = embed(x, p)
    assert e.shape == (4, 5)
    np.testing.assert_array_equal(e.data, forward(x, p).x[-1].data)
    np.testing.assert_array_equal(e.data, embed(x, p).data)


def test_forward_errors():
    p = init_params(ArchSpec((3, 4)), 0)
    with pytest.raises(ValueError):
        forward(np.ones((1, 3)), p)
    with pytest.raises(T.ShapeError):
        forward(np.ones((4, 2)), p)


def test_sample_arch_ranges():
    r = np.random.default_rng(0)
    for _ in range(200):
        a = sample_arch(r, 10, (2, 3), (16, 64))
        assert 2 <= a.n_layers - 1 <= 3
        assert all(16 <= s <= 64 for s in a.layer_sizes[1:-1]) and a.embed_dim == 32


def test_from_arrays_checks_shapes():
    arch = ArchSpec((3, 4))
    A = init_params(arch, 0).arrays()
    A["W1"] = np.zeros((4, 3))
    with pytest.raises(T.ShapeError):
        BaseParams.from_arrays(arch, A)
