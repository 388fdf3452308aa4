import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lasan.errors import ConfigurationError, ContractError, DimensionError, NumericError
from lasan.numerics import Tensor, Trace, backward, gradcheck, kernels, ops
from lasan.numerics.nn import BatchNorm1d, Conv1d, LayerNorm, Linear, MultiHeadAttention, TransformerEncoderLayer


def leaf(arr, name=None):
    return Tensor(np.asarray(arr, dtype=np.float32), requires_grad=True, name=name)


# ---------------------------------------------------------------- forward oracles


def test_conv1d_dot_product_oracle():
    x = Tensor([[1.0, 2.0, 3.0]])
    w = Tensor([[[1.0, 0.0, -1.0]]])
    out = ops.conv1d(x, w, Tensor([0.0]))
    assert out.shape == (1, 1)
    assert out.data[0, 0] == -2.0


def test_conv1d_same_padding_keeps_length():
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=(1, 2500)))
    w = Tensor(rng.normal(size=(3, 1, 15)))
    assert ops.conv1d(x, w, None, stride=1, padding=7).shape == (3, 2500)


def test_conv1d_zero_kernel_gives_bias():
    x = Tensor(np.random.default_rng(1).normal(size=(2, 40)))
    out = ops.conv1d(x, Tensor(np.zeros((3, 2, 5))), Tensor([0.5, -1.0, 2.0]), stride=2, padding=1)
    assert out.shape == (3, (40 + 2 - 5) // 2 + 1)
    np.testing.assert_array_equal(out.data, np.repeat([[0.5], [-1.0], [2.0]], out.shape[1], axis=1).astype(np.float32))


def test_conv1d_channel_mismatch_is_dimension_error():
    with pytest.raises(DimensionError):
        ops.conv1d(Tensor(np.zeros((2, 10))), Tensor(np.zeros((1, 3, 3))))


@settings(max_examples=40, deadline=None)
@given(
    length=st.integers(3, 30),
    k=st.integers(1, 7),
    stride=st.integers(1, 3),
    pad=st.integers(0, 3),
    seed=st.integers(0, 10_000),
)
def test_conv1d_matches_numpy_correlate(length, k, stride, pad, seed):
    if k > length + 2 * pad:
        return
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, length)).astype(np.float32)
    w = rng.normal(size=(3, 2, k)).astype(np.float32)
    b = rng.normal(size=3).astype(np.float32)
    out = ops.conv1d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=pad).data
    xp = np.pad(x.astype(np.float64), ((0, 0), (pad, pad)))
    expect = np.stack([sum(np.correlate(xp[c], w[o, c].astype(np.float64), "valid") for c in range(2)) + b[o] for o in range(3)])
    np.testing.assert_allclose(out, expect[:, ::stride], rtol=1e-5, atol=1e-5)


def test_attention_identity_projection_oracle():
    eye = Tensor(np.eye(2))
    params = {"wq": eye, "wk": eye, "wv": eye, "wo": eye}
    out = ops.multi_head_attention(Tensor([[1.0, 0.0], [0.0, 1.0]]), 1, params).data
    s = 1 / math.sqrt(2)
    p = math.exp(s) / (math.exp(s) + 1)
    np.testing.assert_allclose(out[0], [p, 1 - p], atol=1e-6)
    np.testing.assert_allclose(out[0], [0.6698, 0.3302], atol=1e-4)


def test_attention_identical_rows_and_single_token():
    rng = np.random.default_rng(3)
    mha = MultiHeadAttention(8, 2, rng)
    row = rng.normal(size=8)
    out = mha(Tensor(np.tile(row, (5, 1)))).data
    np.testing.assert_allclose(out, np.tile(out[0], (5, 1)), atol=1e-6)
    eye = Tensor(np.eye(4))
    x = Tensor(rng.normal(size=(1, 4)))
    single = ops.multi_head_attention(x, 2, {"wq": eye, "wk": eye, "wv": eye, "wo": eye})
    np.testing.assert_allclose(single.data, x.data, atol=1e-6)


def test_attention_heads_must_divide_dim():
    with pytest.raises(ConfigurationError):
        MultiHeadAttention(6, 4, np.random.default_rng(0))
    eye = Tensor(np.eye(6))
    with pytest.raises(ConfigurationError):
        ops.multi_head_attention(Tensor(np.zeros((2, 6))), 4, {"wq": eye, "wk": eye, "wv": eye, "wo": eye})


def test_softmax_rows_positive_and_normalised():
    x = Tensor(np.random.default_rng(0).normal(scale=30, size=(50, 7)))
    p = ops.softmax(x, axis=-1).data
    assert np.all(p > 0)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-6)


def test_dropout_eval_identity_and_train_expectation():
    x = Tensor(np.full((10_000,), 3.0))
    assert ops.dropout(x, 0.3, None, training=False) is x
    out = ops.dropout(x, 0.3, np.random.default_rng(0), training=True).data
    assert set(np.unique(out).round(5)) <= {0.0, round(3.0 / 0.7, 5)}
    assert abs(out.mean() - 3.0) / 3.0 < 0.02
    with pytest.raises(ConfigurationError):
        ops.dropout(x, 1.0, np.random.default_rng(0), training=True)
    with pytest.raises(ConfigurationError):
        ops.dropout(x, 0.5, None, training=True)


def test_maxpool_floor_halving():
    x = Tensor(np.arange(2 * 3 * 7, dtype=np.float32).reshape(2, 3, 7))
    out = ops.maxpool1d(x)
    assert out.shape == (2, 3, 3)
    np.testing.assert_array_equal(out.data[0, 0], [1, 3, 5])
    lengths = [2500]
    for _ in range(4):
        lengths.append(lengths[-1] // 2)
    assert lengths == [2500, 1250, 625, 312, 156]


def test_batchnorm_train_normalises_and_updates_running_stats():
    rng = np.random.default_rng(0)
    bn = BatchNorm1d(3)
    x = Tensor(rng.normal(2.0, 3.0, size=(16, 3, 50)))
    y = bn(x).data
    np.testing.assert_allclose(y.mean(axis=(0, 2)), 0, atol=1e-5)
    np.testing.assert_allclose(y.std(axis=(0, 2)), 1, atol=1e-3)
    mean = x.data.astype(np.float64).mean(axis=(0, 2))
    var = x.data.astype(np.float64).var(axis=(0, 2), ddof=1)
    np.testing.assert_allclose(bn.running_mean, 0.1 * mean, rtol=1e-5)
    np.testing.assert_allclose(bn.running_var, 0.9 + 0.1 * var, rtol=1e-5)
    bn.eval()
    before = bn.running_mean.copy()
    bn(x)
    np.testing.assert_array_equal(bn.running_mean, before)


def test_layer_norm_rows():
    ln = LayerNorm(6)
    y = ln(Tensor(np.random.default_rng(2).normal(5, 2, size=(4, 6)))).data
    np.testing.assert_allclose(y.mean(-1), 0, atol=1e-5)
    np.testing.assert_allclose(y.std(-1), 1, atol=1e-3)


def test_nonfinite_forward_raises():
    with pytest.raises(NumericError):
        ops.log(Tensor([-1.0]))
    with pytest.raises(NumericError):
        ops.exp(Tensor([1000.0]))


def test_forward_determinism():
    def run():
        rng = np.random.default_rng(5)
        layer = TransformerEncoderLayer(8, 2, 16, 0.1, rng)
        x = Tensor(rng.normal(size=(3, 8, 8)))
        return layer(x, np.random.default_rng(1)).data

    assert run().tobytes() == run().tobytes()


# ---------------------------------------------------------------- backward contract


def test_backward_linear_and_relu_examples():
    x = np.array([1.0, -2.0, 3.0], np.float32)
    w = leaf([0.5, 0.5, 0.5])
    with Trace() as tr:
        loss = ops.sum(ops.mul(w, x))
    grads = tr.backward(loss)
    np.testing.assert_array_equal(grads[w], x)

    v = leaf([-1.0, 2.0])
    with Trace() as tr:
        loss = ops.sum(ops.relu(v))
    tr.backward(loss)
    np.testing.assert_array_equal(v.grad, [0.0, 1.0])


def test_gradient_accumulates_over_use_sites():
    a = leaf([2.0])
    with Trace() as tr:
        loss = ops.sum(ops.add(ops.mul(a, a), a))
    tr.backward(loss)
    assert a.grad[0] == pytest.approx(5.0)


def test_backward_contract_errors():
    a = leaf([1.0, 2.0])
    with Trace() as tr:
        y = ops.mul(a, 2.0)
    with pytest.raises(ContractError):
        tr.backward(y)
    with Trace() as tr:
        loss = ops.sum(ops.mul(a, 2.0))
    tr.backward(loss)
    with pytest.raises(ContractError):
        tr.backward(loss)
    with pytest.raises(ContractError):
        backward(ops.sum(ops.mul(a, 2.0)))


def test_no_trace_records_nothing():
    a = leaf([1.0])
    out = ops.mul(a, 3.0)
    assert out._node is None


# ---------------------------------------------------------------- finite differences


def _small_graphs(rng):
    """(name, fn, params, modules) for every differentiable primitive."""
    x2 = leaf(rng.normal(size=(3, 4)))
    y2 = leaf(rng.normal(size=(3, 4)))
    pos = leaf(rng.uniform(0.5, 2.0, size=(3, 4)))
    wts = rng.normal(size=(3, 4)).astype(np.float32)
    c = Tensor(wts)

    def wsum(t):
        return ops.sum(ops.mul(t, Tensor(rng_fixed[: t.size].reshape(t.shape))))

    rng_fixed = np.random.default_rng(99).normal(size=10_000).astype(np.float32)

    conv_x = leaf(rng.normal(size=(2, 2, 11)))
    conv = Conv1d(2, 3, 3, rng, stride=2, padding=1)
    bn = BatchNorm1d(3)
    bn_x = leaf(rng.normal(size=(4, 3, 6)))
    lin = Linear(4, 5, rng)
    ln = LayerNorm(4)
    mha = MultiHeadAttention(4, 2, rng)
    tok = leaf(rng.normal(size=(2, 3, 4)))
    table = leaf(rng.normal(size=(5, 4)))
    pool_x = leaf(rng.permutation(60).reshape(2, 3, 10).astype(np.float32) / 10)

    return [
        ("add", lambda: wsum(ops.add(x2, y2)), [x2, y2], []),
        ("sub", lambda: wsum(ops.sub(x2, y2)), [x2, y2], []),
        ("mul", lambda: wsum(ops.mul(x2, y2)), [x2, y2], []),
        ("div", lambda: wsum(ops.div(x2, pos)), [x2, pos], []),
        ("relu", lambda: wsum(ops.relu(x2)), [x2], []),
        ("sigmoid", lambda: wsum(ops.sigmoid(x2)), [x2], []),
        ("exp", lambda: wsum(ops.exp(x2)), [x2], []),
        ("log", lambda: wsum(ops.log(pos)), [pos], []),
        ("pow", lambda: wsum(ops.pow_scalar(pos, 2.5)), [pos], []),
        ("mean", lambda: wsum(ops.mean(x2, axis=0)), [x2], []),
        ("matmul", lambda: wsum(ops.matmul(x2, ops.transpose(y2, (1, 0)))), [x2, y2], []),
        ("softmax", lambda: wsum(ops.softmax(x2, axis=-1)), [x2], []),
        ("concat", lambda: wsum(ops.concat([x2, y2], axis=1)), [x2, y2], []),
        ("getitem", lambda: wsum(x2[1:, ::2]), [x2], []),
        ("embedding", lambda: wsum(ops.embedding(table, np.array([0, 2, 2, 4]))), [table], []),
        ("linear", lambda: wsum(lin(x2)), [x2], [lin]),
        ("layer_norm", lambda: wsum(ln(x2)), [x2], [ln]),
        ("conv1d", lambda: wsum(conv(conv_x)), [conv_x], [conv]),
        ("batch_norm", lambda: wsum(bn(bn_x)), [bn_x], [bn]),
        ("maxpool", lambda: wsum(ops.maxpool1d(pool_x)), [pool_x], []),
        ("global_avg_pool", lambda: wsum(ops.global_avg_pool(conv_x)), [conv_x], []),
        ("attention", lambda: wsum(mha(tok)), [tok], [mha]),
        ("weighted", lambda: wsum(ops.mul(x2, c)), [x2], []),
    ]


@pytest.mark.parametrize("precision", ["float32", "float64"])
def test_every_primitive_matches_finite_differences(precision):
    rng = np.random.default_rng(11)
    failures = []
    for name, fn, params, modules in _small_graphs(rng):
        res = gradcheck(fn, params, modules, precision=precision, samples_per_tensor=12, seed=1)
        if not res.passed:
            failures.append(f"{name}: {res}")
    assert not failures, failures


def test_dropout_gradient_uses_same_mask():
    x = leaf(np.ones((50,)))
    with Trace() as tr:
        y = ops.dropout(x, 0.5, np.random.default_rng(3), training=True)
        loss = ops.sum(y)
    tr.backward(loss)
    np.testing.assert_array_equal(x.grad, y.data)


# ---------------------------------------------------------------- numba vs numpy kernels


@pytest.mark.parametrize("c_in,k,stride,pad", [(1, 15, 1, 7), (4, 15, 1, 7), (8, 7, 4, 3), (3, 5, 2, 0)])
def test_conv_kernels_agree(c_in, k, stride, pad):
    rng = np.random.default_rng(c_in * 100 + k)
    x = rng.normal(size=(5, c_in, 64)).astype(np.float32)
    w = rng.normal(size=(6, c_in, k)).astype(np.float32)
    b = rng.normal(size=6).astype(np.float32)
    y_np = kernels.conv1d_forward(x, w, b, stride, pad, use_numba=False)
    y_nb = kernels.conv1d_forward(x, w, b, stride, pad, use_numba=True)
    np.testing.assert_allclose(y_nb, y_np, rtol=1e-5, atol=1e-5)
    g = rng.normal(size=y_np.shape).astype(np.float32)
    for a, bb in zip(
        kernels.conv1d_backward(x, w, g, stride, pad, True, use_numba=False),
        kernels.conv1d_backward(x, w, g, stride, pad, True, use_numba=True),
    ):
        np.testing.assert_allclose(bb, a, rtol=1e-4, atol=1e-4)


def test_pool_and_batchnorm_kernels_agree():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(3, 4, 21)).astype(np.float32)
    for flag in (False, True):
        out, arg = kernels.maxpool2_forward(x, use_numba=flag)
        assert out.shape == (3, 4, 10)
    a = kernels.maxpool2_forward(x, use_numba=False)
    b = kernels.maxpool2_forward(x, use_numba=True)
    np.testing.assert_array_equal(a[0], b[0])
    m0, v0 = kernels.batchnorm_stats(x, use_numba=False)
    m1, v1 = kernels.batchnorm_stats(x, use_numba=True)
    np.testing.assert_allclose(m0, m1, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(v0, v1, rtol=1e-10)


def test_backward_releases_graph():
    w = leaf(np.ones(4))
    with Trace() as tr:
        hidden = ops.mul(w, 2.0)
        loss = ops.sum(hidden)
    tr.backward(loss)
    assert loss._node is None and hidden._node is None
    assert len(tr) == 0 and tr.consumed
