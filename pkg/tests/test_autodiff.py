import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dsfcn import autodiff as ad
from dsfcn.autodiff import GraphError, ParamSet, SgdConfig, ShapeError, Tensor

from oracles import (conv2d_oracle, conv2d_transpose_oracle, max_rel_error,
                     numeric_grad, softmax_ce_oracle)


def t32(a, requires_grad=False):
    return Tensor(np.asarray(a, dtype=np.float32), requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# conv2d


def test_conv2d_identity_kernel():
    x = t32(np.arange(9).reshape(1, 1, 3, 3))
    w = t32(np.ones((1, 1, 1, 1)))
    b = t32(np.zeros(1))
    out = ad.conv2d(x, w, b, stride=1, pad=0)
    assert np.array_equal(out.data, x.data)


def test_conv2d_zero_weights_annihilate(rng):
    x = t32(rng.standard_normal((2, 3, 5, 5)))
    w = t32(np.zeros((4, 3, 3, 3)))
    b = t32(np.zeros(4))
    out = ad.conv2d(x, w, b, stride=1, pad=1)
    assert np.array_equal(out.data, np.zeros_like(out.data))


def test_conv2d_matches_loop_oracle(rng):
    x = rng.standard_normal((1, 2, 4, 4)).astype(np.float32)
    w = rng.standard_normal((3, 2, 3, 3)).astype(np.float32)
    b = rng.standard_normal(3).astype(np.float32)
    out = ad.conv2d(t32(x), t32(w), t32(b), stride=1, pad=1)
    expected = conv2d_oracle(x, w, b, stride=1, pad=1)
    assert np.abs(out.data - expected).max() < 1e-5


@pytest.mark.parametrize("stride,pad", [(1, 0), (2, 1), (3, 2)])
def test_conv2d_strided_matches_oracle(rng, stride, pad):
    x = rng.standard_normal((2, 3, 8, 7)).astype(np.float32)
    w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
    b = rng.standard_normal(4).astype(np.float32)
    out = ad.conv2d(t32(x), t32(w), t32(b), stride=stride, pad=pad)
    expected = conv2d_oracle(x, w, b, stride=stride, pad=pad)
    assert out.data.shape == expected.shape
    assert np.abs(out.data - expected).max() < 1e-5


def test_conv2d_channel_mismatch_names_both_operands():
    x = t32(np.zeros((1, 2, 8, 8)))
    w = t32(np.zeros((3, 4, 3, 3)))
    b = t32(np.zeros(3))
    with pytest.raises(ShapeError) as err:
        ad.conv2d(x, w, b)
    assert "(1, 2, 8, 8)" in str(err.value) and "(3, 4, 3, 3)" in str(err.value)


def test_conv2d_kernel_larger_than_padded_input_rejected():
    x = t32(np.zeros((1, 1, 2, 2)))
    w = t32(np.zeros((1, 1, 5, 5)))
    b = t32(np.zeros(1))
    with pytest.raises(ShapeError):
        ad.conv2d(x, w, b, stride=1, pad=1)


# ---------------------------------------------------------------------------
# conv2d_transpose


def test_conv2d_transpose_identity_kernel():
    x = t32(np.arange(16).reshape(1, 1, 4, 4))
    w = t32(np.ones((1, 1, 1, 1)))
    b = t32(np.zeros(1))
    out = ad.conv2d_transpose(x, w, b, stride=1, pad=0)
    assert np.array_equal(out.data, x.data)


def test_conv2d_transpose_block_upsample_matches_scatter_oracle():
    x = np.ones((1, 1, 2, 2), dtype=np.float32)
    w = np.ones((1, 1, 2, 2), dtype=np.float32)
    b = np.zeros(1, dtype=np.float32)
    out = ad.conv2d_transpose(t32(x), t32(w), t32(b), stride=2, pad=0)
    expected = conv2d_transpose_oracle(x, w, b, stride=2, pad=0)
    assert out.data.shape == (1, 1, 4, 4)
    assert np.array_equal(out.data, expected.astype(np.float32))
    assert np.array_equal(out.data, np.ones((1, 1, 4, 4), dtype=np.float32))


@pytest.mark.parametrize("stride,pad", [(1, 0), (2, 0), (2, 1), (3, 1)])
def test_conv2d_transpose_matches_scatter_oracle(rng, stride, pad):
    x = rng.standard_normal((2, 3, 4, 5)).astype(np.float32)
    w = rng.standard_normal((3, 2, 4, 4)).astype(np.float32)
    b = rng.standard_normal(2).astype(np.float32)
    out = ad.conv2d_transpose(t32(x), t32(w), t32(b), stride=stride, pad=pad)
    expected = conv2d_transpose_oracle(x, w, b, stride=stride, pad=pad)
    assert out.data.shape == expected.shape
    assert np.abs(out.data - expected).max() < 1e-5


def test_conv2d_transpose_output_size_formula(rng):
    x = t32(rng.standard_normal((1, 2, 5, 6)))
    w = t32(rng.standard_normal((2, 3, 4, 4)))
    b = t32(np.zeros(3))
    out = ad.conv2d_transpose(x, w, b, stride=2, pad=1)
    assert out.shape == (1, 3, (5 - 1) * 2 - 2 + 4, (6 - 1) * 2 - 2 + 4)


def test_adjoint_identity_20_random_configs():
    rng = np.random.default_rng(7)
    done = 0
    while done < 20:
        stride = int(rng.integers(1, 4))
        pad = int(rng.integers(0, 3))
        kh = int(rng.integers(1, 5))
        c = int(rng.integers(1, 4))
        k = int(rng.integers(1, 4))
        ho = int(rng.integers(1, 7))
        # pick H so the conv output size inverts exactly under the transpose
        h = (ho - 1) * stride + kh - 2 * pad
        if h < 1:
            continue
        done += 1
        x = rng.standard_normal((2, c, h, h)).astype(np.float32)
        w = rng.standard_normal((k, c, kh, kh)).astype(np.float32)
        zero_k = np.zeros(k, dtype=np.float32)
        zero_c = np.zeros(c, dtype=np.float32)
        cx = ad.conv2d(t32(x), t32(w), t32(zero_k), stride=stride, pad=pad)
        y = rng.standard_normal(cx.shape).astype(np.float32)
        # same weight array drives the transpose: [K,C,kh,kw] reads as [in=K,out=C]
        ty = ad.conv2d_transpose(t32(y), t32(w), t32(zero_c), stride=stride, pad=pad)
        assert ty.shape == x.shape
        lhs = float(np.sum(cx.data.astype(np.float64) * y))
        rhs = float(np.sum(x.astype(np.float64) * ty.data))
        assert abs(lhs - rhs) <= 1e-4 * max(1.0, abs(lhs), abs(rhs))


# ---------------------------------------------------------------------------
# softmax cross-entropy


def test_softmax_ce_uniform_logits_is_ln3():
    logits = t32(np.zeros((1, 3, 2, 2)))
    loss = ad.softmax_cross_entropy(logits, np.zeros((1, 2, 2), dtype=np.int64))
    assert abs(loss.item() - np.log(3.0)) < 1e-6


def test_softmax_ce_saturated_correct_prediction():
    logits = np.zeros((1, 3, 1, 1), dtype=np.float32)
    logits[0, 1] = 50.0
    loss = ad.softmax_cross_entropy(t32(logits), np.ones((1, 1, 1), dtype=np.int64))
    assert loss.item() < 1e-9


def test_softmax_ce_matches_formula_oracle(rng):
    logits = rng.standard_normal((1, 3, 2, 2)).astype(np.float32)
    targets = rng.integers(0, 3, size=(1, 2, 2))
    loss = ad.softmax_cross_entropy(t32(logits), targets)
    assert abs(loss.item() - softmax_ce_oracle(logits, targets)) < 1e-6


def test_softmax_ce_rejects_out_of_range_class():
    logits = t32(np.zeros((1, 3, 2, 2)))
    with pytest.raises(ValueError):
        ad.softmax_cross_entropy(logits, np.full((1, 2, 2), 3, dtype=np.int64))
    with pytest.raises(ValueError):
        ad.softmax_cross_entropy(logits, np.full((1, 2, 2), -1, dtype=np.int64))


# ---------------------------------------------------------------------------
# backward contracts


def test_backward_of_sum_is_ones():
    x = t32(np.arange(6).reshape(2, 3), requires_grad=True)
    ad.tensor_sum(x).backward()
    assert np.array_equal(x.grad, np.ones((2, 3), dtype=np.float32))


def test_backward_loss_independent_of_tensor():
    x = t32(np.ones((2, 2)), requires_grad=True)
    y = t32(np.ones((2, 2)), requires_grad=True)
    ad.tensor_sum(ad.relu(y)).backward()
    assert x.grad is None
    assert y.grad is not None


def test_backward_requires_scalar():
    x = t32(np.ones((2, 2)), requires_grad=True)
    out = ad.relu(x)
    with pytest.raises(GraphError):
        ad.backward(out)


def test_backward_twice_is_an_error():
    x = t32(np.ones(4), requires_grad=True)
    loss = ad.tensor_sum(x)
    loss.backward()
    with pytest.raises(GraphError):
        loss.backward()


def test_backward_without_recorded_graph_is_an_error():
    leaf = t32(np.asarray(1.0), requires_grad=True)
    with pytest.raises(GraphError):
        ad.backward(leaf)


def test_no_grad_suppresses_tape():
    x = t32(np.ones(4), requires_grad=True)
    with ad.no_grad():
        loss = ad.tensor_sum(x)
    with pytest.raises(GraphError):
        ad.backward(loss)


# ---------------------------------------------------------------------------
# finite-difference gradient checks

_FD_CASES = {
    "conv2d": lambda rng, dt: _conv_case(rng, dt),
    "conv2d_transpose": lambda rng, dt: _convt_case(rng, dt),
    "relu": lambda rng, dt: _unary_case(ad.relu, rng, dt),
    "add": lambda rng, dt: _binary_case(ad.add, rng, dt),
    "mul": lambda rng, dt: _binary_case(ad.mul, rng, dt),
    "bilinear_resize": lambda rng, dt: _resize_case(rng, dt),
    "softmax_cross_entropy": lambda rng, dt: _ce_case(rng, dt),
    "tensor_sum": lambda rng, dt: _unary_case(ad.tensor_sum, rng, dt),
}


def _rand_shape(rng):
    return tuple(int(rng.integers(1, hi + 1)) for hi in (2, 4, 8, 8))


def _conv_case(rng, dt):
    n, c, h, w = _rand_shape(rng)
    k = int(rng.integers(1, 4))
    kh = int(rng.integers(1, min(h, 3) + 1))
    stride = int(rng.integers(1, 3))
    pad = int(rng.integers(0, 2))
    inputs = [Tensor(rng.standard_normal((n, c, h, w)).astype(dt), requires_grad=True),
              Tensor(rng.standard_normal((k, c, kh, kh)).astype(dt), requires_grad=True),
              Tensor(rng.standard_normal(k).astype(dt), requires_grad=True)]
    return inputs, lambda x, wt, b: ad.conv2d(x, wt, b, stride=stride, pad=pad)


def _convt_case(rng, dt):
    n, c, h, w = _rand_shape(rng)
    k = int(rng.integers(1, 4))
    kh = int(rng.integers(1, 4))
    stride = int(rng.integers(1, 3))
    inputs = [Tensor(rng.standard_normal((n, c, h, w)).astype(dt), requires_grad=True),
              Tensor(rng.standard_normal((c, k, kh, kh)).astype(dt), requires_grad=True),
              Tensor(rng.standard_normal(k).astype(dt), requires_grad=True)]
    return inputs, lambda x, wt, b: ad.conv2d_transpose(x, wt, b, stride=stride, pad=0)


def _unary_case(op, rng, dt):
    shape = _rand_shape(rng)
    # keep values away from the ReLU kink so finite differences stay valid
    data = rng.standard_normal(shape).astype(dt)
    data[np.abs(data) < 0.05] = 0.2
    return [Tensor(data, requires_grad=True)], op


def _binary_case(op, rng, dt):
    shape = _rand_shape(rng)
    return [Tensor(rng.standard_normal(shape).astype(dt), requires_grad=True),
            Tensor(rng.standard_normal(shape).astype(dt), requires_grad=True)], op


def _resize_case(rng, dt):
    n, c, h, w = _rand_shape(rng)
    oh, ow = int(rng.integers(1, 13)), int(rng.integers(1, 13))
    return ([Tensor(rng.standard_normal((n, c, h, w)).astype(dt), requires_grad=True)],
            lambda x: ad.bilinear_resize(x, oh, ow))


def _ce_case(rng, dt):
    n, c, h, w = _rand_shape(rng)
    c = max(c, 2)
    targets = rng.integers(0, c, size=(n, h, w))
    return ([Tensor(rng.standard_normal((n, c, h, w)).astype(dt), requires_grad=True)],
            lambda x: ad.softmax_cross_entropy(x, targets))


def check_gradients(name, dtype, step, n_shapes=5, seed=99):
    """Max relative error between analytic and central-difference gradients
    over ``n_shapes`` random cases. The scalar loss is <op output, r> for a
    per-case fixed direction r; the numeric side reduces in float64 so the
    comparison measures the op's gradient, not summation noise."""
    case_id = sorted(_FD_CASES).index(name)
    rng = np.random.default_rng([seed, case_id])
    worst = 0.0
    for trial in range(n_shapes):
        inputs, op = _FD_CASES[name](rng, dtype)
        probe = op(*inputs)
        r = np.random.default_rng([seed, case_id, trial]) \
            .standard_normal(probe.shape).astype(dtype)

        loss = ad.tensor_sum(ad.mul(probe, Tensor(r))) if probe.ndim else probe
        loss.backward()

        def loss_value():
            out = op(*inputs).data
            return float(np.sum(out.astype(np.float64) * r)) if out.ndim else float(out)

        for t in inputs:
            numeric = numeric_grad(loss_value, t.data, step)
            worst = max(worst, max_rel_error(t.grad, numeric))
            t.grad = None
    return worst


PRIMITIVES = sorted(_FD_CASES)


@pytest.mark.parametrize("name", PRIMITIVES)
def test_gradients_float32(name):
    worst = check_gradients(name, np.float32, step=1e-3)
    assert worst <= 1e-2, f"{name}: max relative error {worst}"


@pytest.mark.parametrize("name", PRIMITIVES)
def test_gradients_float64(name):
    worst = check_gradients(name, np.float64, step=1e-6)
    assert worst <= 1e-5, f"{name}: max relative error {worst}"


# ---------------------------------------------------------------------------
# ReLU properties


@given(st.lists(st.floats(-10, 10, allow_nan=False, width=32), min_size=1, max_size=64))
def test_relu_output_nonnegative_and_gradient_mask(values):
    x = Tensor(np.asarray(values, dtype=np.float32), requires_grad=True)
    out = ad.relu(x)
    assert (out.data >= 0).all()
    ad.tensor_sum(out).backward()
    assert np.all(x.grad[x.data < 0] == 0)
    assert np.all(x.grad[x.data > 0] == 1)


def test_forward_and_gradients_deterministic():
    def run():
        rng = np.random.default_rng(5)
        x = Tensor(rng.standard_normal((1, 2, 6, 6)).astype(np.float32), requires_grad=True)
        w = Tensor(rng.standard_normal((3, 2, 3, 3)).astype(np.float32), requires_grad=True)
        b = Tensor(rng.standard_normal(3).astype(np.float32), requires_grad=True)
        out = ad.relu(ad.conv2d(x, w, b, stride=1, pad=1))
        loss = ad.softmax_cross_entropy(out, rng.integers(0, 3, size=(1, 6, 6)))
        loss.backward()
        return loss.item(), x.grad.copy(), w.grad.copy(), b.grad.copy()

    first, second = run(), run()
    assert first[0] == second[0]
    for a, b_ in zip(first[1:], second[1:]):
        assert np.array_equal(a, b_)


# ---------------------------------------------------------------------------
# SGD


def _param_set(values):
    ps = ParamSet()
    for name, v in values.items():
        ps.add(name, Tensor(np.asarray(v, dtype=np.float32), requires_grad=True))
    return ps


def test_sgd_zero_learning_rate_is_identity():
    ps = _param_set({"w": [1.0, 2.0]})
    ps["w"].grad = np.asarray([3.0, 4.0], dtype=np.float32)
    ad.sgd_step(ps, SgdConfig(learning_rate=0.0, epochs=1))
    assert np.array_equal(ps["w"].data, np.asarray([1.0, 2.0], dtype=np.float32))


def test_sgd_direct_arithmetic():
    ps = _param_set({"w": [1.0]})
    ps["w"].grad = np.asarray([2.0], dtype=np.float32)
    ad.sgd_step(ps, SgdConfig(learning_rate=0.0005, epochs=1))
    assert abs(ps["w"].data[0] - 0.999) < 1e-7


def test_sgd_two_steps_sum_like_one():
    cfg = SgdConfig(learning_rate=0.01, epochs=1)
    g1 = np.asarray([1.0, -2.0], dtype=np.float32)
    g2 = np.asarray([0.5, 0.25], dtype=np.float32)
    two = _param_set({"w": [1.0, 1.0]})
    two["w"].grad = g1.copy()
    ad.sgd_step(two, cfg)
    two["w"].grad = g2.copy()
    ad.sgd_step(two, cfg)
    one = _param_set({"w": [1.0, 1.0]})
    one["w"].grad = g1 + g2
    ad.sgd_step(one, cfg)
    assert np.allclose(two["w"].data, one["w"].data, atol=1e-7)


def test_sgd_missing_grad_is_state_error():
    ps = _param_set({"a": [1.0], "b": [1.0]})
    ps["a"].grad = np.asarray([1.0], dtype=np.float32)
    with pytest.raises(GraphError, match="b"):
        ad.sgd_step(ps, SgdConfig())
    # nothing was touched
    assert ps["a"].data[0] == 1.0


def test_sgd_clears_gradients():
    ps = _param_set({"w": [1.0]})
    ps["w"].grad = np.asarray([1.0], dtype=np.float32)
    ad.sgd_step(ps, SgdConfig())
    assert ps["w"].grad is None


def test_sgd_config_validation():
    with pytest.raises(ValueError):
        SgdConfig(learning_rate=-1.0)
    with pytest.raises(ValueError):
        SgdConfig(epochs=-1)
    with pytest.raises(ValueError):
        SgdConfig(batch_size=0)


def test_param_set_rejects_duplicates_and_frozen_tensors():
    ps = ParamSet()
    ps.add("w", Tensor(np.zeros(1), requires_grad=True))
    with pytest.raises(ValueError):
        ps.add("w", Tensor(np.zeros(1), requires_grad=True))
    with pytest.raises(ValueError):
        ps.add("frozen", Tensor(np.zeros(1)))


def test_param_set_iteration_is_lexicographic():
    ps = ParamSet()
    for name in ("b", "a", "c.2", "c.10"):
        ps.add(name, Tensor(np.zeros(1), requires_grad=True))
    assert ps.names() == ["a", "b", "c.10", "c.2"]


# ---------------------------------------------------------------------------
# add / mul / resize basics


def test_add_requires_same_shape():
    with pytest.raises(ShapeError):
        ad.add(t32(np.zeros((2, 2))), t32(np.zeros((2, 3))))


def test_bilinear_resize_same_size_is_identity(rng):
    x = t32(rng.standard_normal((1, 2, 5, 7)))
    out = ad.bilinear_resize(x, 5, 7)
    assert np.array_equal(out.data, x.data)


def test_bilinear_resize_preserves_constants():
    x = t32(np.full((1, 1, 4, 4), 3.5))
    out = ad.bilinear_resize(x, 9, 6)
    assert np.allclose(out.data, 3.5, atol=1e-6)
