import numpy as np
import pytest

import gradcases
from oracles import conv2d_oracle

from bevroad import tensor_core as tc
from bevroad.errors import ContractError, MalformedFileError, ShapeError
from bevroad.tensor_core import Tensor, backward, no_grad


def param(a):
    return Tensor(np.asarray(a, float), requires_grad=True)


# -- autodiff core ------------------------------------------------------------


def test_sum_grad_is_ones():
    x = param(np.arange(6.0).reshape(2, 3))
    backward(tc.sum(x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_square_grad():
    x = param([3.0])
    backward(tc.sum(x * x))
    assert x.grad[0] == 6.0


def test_shared_subexpression_accumulates():
    x = param([2.0])
    y = x * x
    backward(tc.sum(y + y * x))  # d/dx (x^2 + x^3) = 2x + 3x^2
    assert x.grad[0] == pytest.approx(16.0)


def test_backward_needs_scalar_on_graph():
    x = param(np.ones(3))
    with pytest.raises(ContractError):
        backward(x * 2.0)
    with pytest.raises(ContractError):
        backward(Tensor(1.0))


def test_no_grad_records_nothing():
    x = param(np.ones(2))
    with no_grad():
        y = tc.sum(x * x)
    assert y.node is None and not y.requires_grad


# -- forward values -----------------------------------------------------------


def test_conv_identity_1x1():
    x = np.random.default_rng(0).normal(size=(2, 3, 4, 3))
    out = tc.conv2d(Tensor(x), Tensor(np.eye(3).reshape(1, 1, 3, 3)), Tensor(np.zeros(3)))
    np.testing.assert_array_equal(out.data, x)


def test_conv_ones_center_and_corner():
    out = tc.conv2d(Tensor(np.ones((1, 3, 3, 1))), Tensor(np.ones((3, 3, 1, 1))), Tensor(np.zeros(1))).data
    assert out[0, 1, 1, 0] == 9.0
    assert out[0, 0, 0, 0] == 4.0
    assert out[0, 0, 1, 0] == 6.0


@pytest.mark.parametrize("k", [1, 3, 5])
def test_conv_matches_loop_oracle(k):
    rng = np.random.default_rng(k)
    x, w, b = rng.normal(size=(2, 5, 4, 3)), rng.normal(size=(k, k, 3, 2)), rng.normal(size=2)
    np.testing.assert_allclose(tc.conv2d(Tensor(x), Tensor(w), Tensor(b)).data, conv2d_oracle(x, w, b), atol=1e-12)


def test_conv_shape_errors():
    with pytest.raises(ShapeError):
        tc.conv2d(Tensor(np.ones((1, 3, 3, 2))), Tensor(np.ones((3, 3, 1, 1))), Tensor(np.zeros(1)))
    with pytest.raises(ShapeError):
        tc.conv2d(Tensor(np.ones((1, 3, 3, 1))), Tensor(np.ones((2, 2, 1, 1))), Tensor(np.zeros(1)))


def test_maxpool_values_and_ties():
    assert tc.maxpool2(Tensor(np.array([1.0, 2, 3, 4]).reshape(1, 2, 2, 1))).data.item() == 4.0
    const = tc.maxpool2(Tensor(np.full((1, 4, 4, 2), 7.0))).data
    assert const.shape == (1, 2, 2, 2) and np.all(const == 7.0)
    x = param(np.full((1, 2, 2, 1), 5.0))
    backward(tc.sum(tc.maxpool2(x)))
    np.testing.assert_array_equal(x.grad[0, :, :, 0], [[1.0, 0.0], [0.0, 0.0]])
    with pytest.raises(ShapeError):
        tc.maxpool2(Tensor(np.ones((1, 3, 2, 1))))


def test_pool_chain_800x400():
    shape = (800, 400)
    for _ in range(4):
        shape = (shape[0] // 2, shape[1] // 2)
    assert shape == (50, 25)
    x = Tensor(np.zeros((1, 800, 400, 1)))
    for _ in range(4):
        x = tc.maxpool2(x)
    assert x.shape == (1, 50, 25, 1)


def test_transpose_conv_unit_and_chain():
    k = np.arange(4.0).reshape(2, 2, 1, 1)
    out = tc.conv2d_transpose(Tensor(np.ones((1, 1, 1, 1))), Tensor(k), Tensor(np.zeros(1))).data
    np.testing.assert_array_equal(out[0, :, :, 0], k[:, :, 0, 0])
    x = Tensor(np.zeros((1, 50, 25, 1)))
    for _ in range(4):
        x = tc.conv2d_transpose(x, Tensor(np.ones((2, 2, 1, 1))), Tensor(np.zeros(1)))
    assert x.shape == (1, 800, 400, 1)


def test_dense_identity_and_channel_sum():
    x = np.random.default_rng(1).normal(size=(1, 2, 3, 2))
    out = tc.dense_channelwise(Tensor(x), Tensor(np.eye(2)), Tensor(np.zeros(2))).data
    np.testing.assert_array_equal(out, x)
    s = tc.dense_channelwise(Tensor(x), Tensor(np.ones((2, 1))), Tensor(np.zeros(1))).data
    np.testing.assert_allclose(s[..., 0], x.sum(axis=-1))
    with pytest.raises(ShapeError):
        tc.dense_channelwise(Tensor(x), Tensor(np.ones((3, 1))), Tensor(np.zeros(1)))


def test_relu_sigmoid_values():
    np.testing.assert_array_equal(tc.relu(Tensor(np.array([-1.0, 2.0]))).data, [0.0, 2.0])
    assert tc.sigmoid(Tensor(np.array(0.0))).data == 0.5
    x = param(np.array([0.0]))
    backward(tc.sum(tc.sigmoid(x)))
    assert x.grad[0] == 0.25
    extreme = tc.sigmoid(Tensor(np.array([-700.0, 700.0, -30.0, 30.0]))).data
    assert np.all((extreme > 0) & (extreme < 1))


def test_dropout_modes():
    x = Tensor(np.ones((100, 1000)))
    assert tc.dropout(x, 0.0, np.random.default_rng(0), True) is x
    assert tc.dropout(x, 0.9, None, False) is x
    out = tc.dropout(x, 0.5, np.random.default_rng(0), True).data
    assert abs(out.mean() - 1.0) <= 0.02
    assert set(np.unique(out)) == {0.0, 2.0}
    with pytest.raises(ValueError):
        tc.dropout(x, 1.0, np.random.default_rng(0), True)


def test_concat_slice_identity_and_grad_split():
    rng = np.random.default_rng(2)
    a, b = param(rng.normal(size=(1, 2, 2, 16))), param(rng.normal(size=(1, 2, 2, 16)))
    cat = tc.concat_channels(a, b)
    assert cat.shape == (1, 2, 2, 32)
    np.testing.assert_array_equal(tc.slice_channels(cat, 0, 16).data, a.data)
    np.testing.assert_array_equal(tc.slice_channels(cat, 16, 32).data, b.data)
    g = rng.normal(size=cat.shape)
    backward(tc.sum(tc.mul(cat, Tensor(g))))
    np.testing.assert_array_equal(a.grad, g[..., :16])
    np.testing.assert_array_equal(b.grad, g[..., 16:])
    zero = tc.concat_channels(Tensor(a.data), Tensor(np.zeros((1, 2, 2, 4))))
    np.testing.assert_array_equal(zero.data[..., :16], a.data)
    with pytest.raises(ShapeError):
        tc.concat_channels(a, Tensor(np.zeros((1, 3, 2, 1))))


# -- gradient checks ----------------------------------------------------------


def test_linear_function_is_exact():
    w = np.random.default_rng(0).normal(size=(3, 4))
    err = tc.finite_diff_check(lambda t: tc.sum(tc.mul(t, Tensor(w))), np.zeros((3, 4)))
    assert err <= 1e-9


def test_relu_kink_excluded():
    x = np.array([0.0, 1.0, -1.0])
    f = lambda t: tc.sum(tc.relu(t))  # noqa: E731
    assert tc.finite_diff_check(f, x, exclude=np.array([True, False, False])) <= 1e-9


@pytest.mark.parametrize("seed", range(5))
def test_every_op_gradient(seed):
    for label, f, x, exclude in gradcases.cases(seed):
        err = tc.finite_diff_check(f, x, gradcases.EPS, exclude)
        assert err <= gradcases.TOL, f"{label}: {err}"


def test_composite_conv_relu_sum():
    rng = np.random.default_rng(9)
    k, b = rng.normal(size=(3, 3, 2, 2)), rng.normal(size=2)
    x = rng.normal(size=(1, 4, 4, 2))
    f = lambda t: tc.sum(tc.relu(tc.conv2d(t, Tensor(k), Tensor(b))))  # noqa: E731
    pre = tc.conv2d(Tensor(x), Tensor(k), Tensor(b)).data
    assert np.abs(pre).min() > 1e-3  # away from the relu kink
    assert tc.finite_diff_check(f, x) <= 1e-4


# -- checkpoints --------------------------------------------------------------


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    params = {"b/kernel": rng.normal(size=(3, 3, 2, 4)), "a/bias": rng.normal(size=4), "c": np.array(np.pi)}
    tc.save_parameters(tmp_path / "m.ckpt", params, {"variant": "A"})
    back, meta = tc.load_parameters(tmp_path / "m.ckpt")
    assert meta == {"variant": "A"}
    for k, v in params.items():
        assert back[k].shape == v.shape
        assert back[k].tobytes() == v.tobytes()
    tc.save_parameters(tmp_path / "again.ckpt", back, meta)
    assert (tmp_path / "m.ckpt").read_bytes() == (tmp_path / "again.ckpt").read_bytes()


def test_checkpoint_rejects_foreign_file(tmp_path):
    (tmp_path / "x").write_bytes(b"PK\x03\x04junk")
    with pytest.raises(MalformedFileError):
        tc.load_parameters(tmp_path / "x")
