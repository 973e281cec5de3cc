import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gradcases import network_cases, primitive_cases, render_loss_case
from xmpi.autodiff import (Adam, AdamState, DiscriminatorSpec, GraphError, MLPSpec, NonFiniteError, adam_step,
                           backward, build_network, encode_coordinates, gradcheck, load_checkpoint, network_forward,
                           parameter, positional_encoding, save_checkpoint)
from xmpi.autodiff import tensor as T
from xmpi.autodiff.checkpoint import CheckpointFormatError
from xmpi.autodiff.nn import ArchError, spec_from_dict

TOL = 1e-4


@pytest.mark.parametrize("name", sorted(primitive_cases()))
def test_primitive_gradients(name):
    fn, params = primitive_cases()[name]
    assert gradcheck(fn, params, probes=None) < TOL


@pytest.mark.parametrize("name", ["mlp", "discriminator"])
def test_network_gradients(name):
    fn, params = network_cases()[name]
    assert gradcheck(fn, params, probes=6) < TOL


def test_render_loss_graph_gradients():
    fn, params = render_loss_case()
    assert gradcheck(fn, params, probes=5) < TOL


def test_gradcheck_detects_wrong_gradient():
    x = parameter(np.array([1.0, 2.0]))

    def cube_with_wrong_backward():
        return T._make(x.data**3, (x,), lambda g: (g * 2 * x.data,), "cube").sum()

    assert gradcheck(cube_with_wrong_backward, [x]) > 0.1


def test_gradcheck_requires_float64():
    x = parameter(np.ones(2, np.float32))
    with pytest.raises(TypeError):
        gradcheck(lambda: T.square(x).sum(), [x])


def test_nan_is_an_error():
    x = parameter(np.array([-1.0, 1.0]))
    with pytest.raises(NonFiniteError):
        T.log(x)
    with pytest.raises(NonFiniteError):
        T.exp(parameter(np.array([1e4])))


def test_unreachable_parameter():
    x, y = parameter(np.ones(2)), parameter(np.ones(2))
    loss = T.square(x).sum()
    with pytest.raises(GraphError):
        backward(loss, [x, y])
    gx, gy = backward(loss, [x, y], allow_unused=True)
    np.testing.assert_array_equal(gy, 0)
    np.testing.assert_array_equal(gx, 2)


def test_nonscalar_loss_rejected():
    x = parameter(np.ones(3))
    with pytest.raises(GraphError):
        backward(x * 2, [x])


def test_shared_subexpression_accumulates():
    x = parameter(np.array(3.0))
    y = x * x
    (g,) = backward(y + y * x, [x])
    assert g == pytest.approx(2 * 3 + 3 * 9)


def test_constants_carry_no_graph():
    a = T.Tensor(np.ones(3))
    out = T.exp(a) * 2
    assert not out.requires_grad and out.parents == ()


@given(st.integers(1, 12), st.lists(st.floats(-1, 1), min_size=1, max_size=5))
def test_positional_encoding_layout(levels, vals):
    p = np.array(vals)
    enc = positional_encoding(p, levels)
    assert enc.shape == (len(vals), 2 * levels)
    for k in range(levels):
        np.testing.assert_allclose(enc[:, 2 * k], np.sin(2**k * np.pi * p), atol=1e-12)
        np.testing.assert_allclose(enc[:, 2 * k + 1], np.cos(2**k * np.pi * p), atol=1e-12)


def test_encode_coordinates_shape():
    e = encode_coordinates(np.zeros((4, 3)), 0.5, 10, 6)
    assert e.shape == (4, 72)
    with pytest.raises(ValueError):
        positional_encoding(np.zeros(2), 0)


def test_adam_matches_reference():
    rng = np.random.default_rng(0)
    p = parameter(rng.normal(size=5))
    p_ref = p.data.copy()
    m = np.zeros(5)
    v = np.zeros(5)
    st_ = AdamState(lr=1e-2)
    for k in range(1, 6):
        g = rng.normal(size=5)
        adam_step([p], [g], st_)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        p_ref -= 1e-2 * (m / (1 - 0.9**k)) / (np.sqrt(v / (1 - 0.999**k)) + 1e-8)
    np.testing.assert_allclose(p.data, p_ref, rtol=1e-12)
    assert st_.step == 5


def test_adam_first_step_is_lr_sign():
    p = parameter(np.array([1.0, -1.0, 2.0]))
    Adam([p], lr=0.1).step([np.array([3.0, -0.5, 1e-3])])
    np.testing.assert_allclose(p.data, [0.9, -0.9, 1.9], atol=1e-5)


def test_adam_shape_checks():
    p = parameter(np.zeros(3))
    with pytest.raises(ValueError):
        adam_step([p], [np.zeros(2)], AdamState())
    with pytest.raises(ValueError):
        adam_step([p], [], AdamState())


def test_adam_minimizes_quadratic():
    p = parameter(np.array([3.0, -2.0]))
    opt = Adam([p], lr=0.1)
    for _ in range(300):
        opt.step(backward(T.square(p).sum(), [p]))
    assert np.abs(p.data).max() < 0.05


def test_mlp_shapes_and_nonnegative():
    rng = np.random.default_rng(0)
    net = build_network(MLPSpec(6, 8, 3, zero_output=False), rng)
    out = network_forward(net, rng.normal(size=(10, 6)))
    assert out.shape == (10, 1) and np.all(out.data >= 0)
    with pytest.raises(ArchError):
        network_forward(net, np.zeros((2, 5)))


def test_mlp_default_architecture():
    net = build_network(MLPSpec(80), np.random.default_rng(0))
    hidden = [p for k, p in net.params.items() if k.startswith("w") and k != "w_out"]
    assert len(hidden) == 8 and all(p.shape[1] == 128 for p in hidden)


def test_discriminator_logits():
    rng = np.random.default_rng(0)
    d = build_network(DiscriminatorSpec(), rng)
    assert network_forward(d, rng.normal(size=(3, 32, 32))).shape == (3,)
    assert len([k for k in d.params if k.endswith("_w") and k.startswith("conv")]) == 4
    with pytest.raises(ArchError):
        build_network(DiscriminatorSpec(patch=30), rng)


def test_forward_deterministic():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(4, 32, 32))
    a = build_network(DiscriminatorSpec(), np.random.default_rng(5))
    b = build_network(DiscriminatorSpec(), np.random.default_rng(5))
    np.testing.assert_array_equal(network_forward(a, x).data, network_forward(b, x).data)


def test_checkpoint_roundtrip(tmp_path):
    net = build_network(MLPSpec(4, 8, 2), np.random.default_rng(0))
    path = tmp_path / "n.ckpt"
    save_checkpoint(path, net.state_dict(), net.arch())
    tensors, arch = load_checkpoint(path)
    net2 = build_network(spec_from_dict(arch), np.random.default_rng(9))
    net2.load_state_dict(tensors)
    x = np.random.default_rng(2).normal(size=(3, 4))
    np.testing.assert_array_equal(network_forward(net, x).data, network_forward(net2, x).data)


def test_checkpoint_corruption(tmp_path):
    net = build_network(MLPSpec(4, 8, 2), np.random.default_rng(0))
    path = tmp_path / "n.ckpt"
    save_checkpoint(path, net.state_dict(), net.arch())
    raw = path.read_bytes()
    path.write_bytes(raw[:-7])
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(path)
    path.write_bytes(b"JUNK" + raw[4:])
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(path)
