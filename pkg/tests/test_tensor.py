"""Autodiff engine checks: closed-form kernel values and finite differences."""

import numpy as np
import pytest

from fluidbench import tensor as T


def rng(seed=0):
    return np.random.Generator(np.random.PCG64(seed))


# --- closed-form kernel values ----------------------------------------------

def test_softmax_uniform_pair():
    out = T.softmax(T.Tensor(np.zeros(2)))
    assert np.allclose(out.data, [0.5, 0.5], atol=1e-12)


def test_matmul_identity():
    a = rng(1).normal(size=(3, 5))
    out = T.matmul(T.Tensor(np.eye(3)), T.Tensor(a))
    assert np.abs(out.data - a).max() <= 1e-12


def test_matmul_folds_batched_lhs():
    a = rng(2).normal(size=(4, 6, 5))
    w = rng(3).normal(size=(5, 7))
    out = T.matmul(T.Tensor(a), T.Tensor(w))
    ref = np.einsum("bnk,km->bnm", a, w)
    assert np.abs(out.data - ref).max() <= 1e-12


def test_gelu_known_values():
    x = T.Tensor(np.array([0.0, 1.0, -1.0]))
    out = T.gelu(x).data
    # tanh form: x * 0.5 * (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
    phi1 = 0.5 * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * 1.044715))
    assert abs(out[0]) <= 1e-12
    assert abs(out[1] - phi1) <= 1e-12
    assert abs(out[2] - (phi1 - 1.0)) <= 1e-12


def test_gelu_tracks_exact_gaussian_cdf():
    from scipy.special import erf
    xs = np.linspace(-8.0, 8.0, 4001)
    exact = xs * 0.5 * (1.0 + erf(xs / np.sqrt(2.0)))
    out = T.gelu(T.Tensor(xs)).data
    assert np.abs(out - exact).max() <= 1e-3  # true max dev ~4.7e-4 near |x|=2.7


def test_layer_norm_closed_form():
    x = T.Tensor(np.array([[1.0, 3.0]]))
    g = T.Tensor(np.ones(2))
    b = T.Tensor(np.zeros(2))
    out = T.layer_norm(x, g, b).data
    # mean 2, var 1 -> normalized to [-1, 1]
    assert np.abs(out - np.array([[-1.0, 1.0]])).max() <= 1e-9


def test_cross_entropy_uniform_logits():
    v = 16
    logits = T.Tensor(np.zeros((4, v)))
    ids = np.array([0, 3, 7, 15])
    out = T.cross_entropy(logits, ids)
    assert abs(float(out.data) - np.log(v)) <= 1e-12


def test_mse_known_value():
    p = T.Tensor(np.array([1.0, 2.0]))
    t = T.Tensor(np.array([0.0, 0.0]))
    assert abs(float(T.mse_loss(p, t).data) - 2.5) <= 1e-12


def test_causal_position_zero_sees_only_itself():
    r = rng(4)
    q, k, v = (r.normal(size=(2, 5, 8)) for _ in range(3))
    out = T.attention(T.Tensor(q), T.Tensor(k), T.Tensor(v), num_heads=2, causal=True)
    assert np.abs(out.data[:, 0, :] - v[:, 0, :]).max() <= 1e-12


def test_attention_decode_offset_matches_full():
    r = rng(5)
    q, k, v = (r.normal(size=(1, 6, 8)) for _ in range(3))
    full = T.attention(T.Tensor(q), T.Tensor(k), T.Tensor(v), num_heads=4, causal=True)
    # last two queries against the full key set must equal the full-forward suffix
    tail = T.attention(T.Tensor(q[:, 4:, :]), T.Tensor(k), T.Tensor(v), num_heads=4, causal=True)
    assert np.abs(full.data[:, 4:, :] - tail.data).max() <= 1e-12


# --- gradients ----------------------------------------------------------------

def test_sum_of_squares_gradient():
    x = T.Tensor(np.array([1.0, 2.0]), requires_grad=True)
    with T.Graph() as g:
        loss = T.sum_all(T.mul(x, x))
    grads = g.backward(loss)
    assert np.abs(grads[x] - np.array([2.0, 4.0])).max() <= 1e-12


def test_embedding_scatter_accumulates_duplicates():
    table = T.Tensor(rng(6).normal(size=(4, 3)), requires_grad=True)
    ids = np.array([0, 0, 2])
    with T.Graph() as g:
        loss = T.sum_all(T.embedding(ids, table))
    grad = g.backward(loss)[table]
    assert np.allclose(grad[0], 2.0) and np.allclose(grad[2], 1.0) and np.allclose(grad[1], 0.0)


@pytest.mark.parametrize("name,builder", [
    ("matmul", lambda x: T.sum_all(T.matmul(x, T.Tensor(rng(7).normal(size=(5, 4)))))),
    ("linear", lambda x: T.sum_all(T.linear(x, T.Tensor(rng(7).normal(size=(5, 4))),
                                            T.Tensor(rng(27).normal(size=(4,)))))),
    ("gelu", lambda x: T.sum_all(T.gelu(x))),
    ("softmax", lambda x: T.sum_all(T.mul(T.softmax(x), T.Tensor(rng(8).normal(size=(3, 5)))))),
    ("mse", lambda x: T.mse_loss(x, T.Tensor(rng(9).normal(size=(3, 5))))),
])
def test_primitive_finite_difference(name, builder):
    x = T.Tensor(rng(10).normal(size=(3, 5)), requires_grad=True)
    report = T.gradient_check(builder, x, rel_tol=1e-4)
    assert report.passed, f"{name}: max rel err {report.max_rel_err:.3e}"


def test_layer_norm_finite_difference():
    c = 6
    gain = T.Tensor(rng(11).normal(size=(c,)) * 0.5 + 1.0)
    bias = T.Tensor(rng(12).normal(size=(c,)) * 0.1)
    w = T.Tensor(rng(13).normal(size=(c,)))

    def f(x):
        return T.sum_all(T.mul(T.layer_norm(x, gain, bias), w))

    x = T.Tensor(rng(14).normal(size=(4, c)), requires_grad=True)
    report = T.gradient_check(f, x)
    assert report.passed, report.max_rel_err


def test_attention_finite_difference():
    B, n, c, h = 2, 4, 8, 2
    r = rng(15)
    k = T.Tensor(r.normal(size=(B, n, c)))
    v = T.Tensor(r.normal(size=(B, n, c)))
    w = T.Tensor(r.normal(size=(B, n, c)))

    def f(q):
        return T.sum_all(T.mul(T.attention(q, k, v, num_heads=h, causal=True), w))

    q = T.Tensor(r.normal(size=(B, n, c)), requires_grad=True)
    report = T.gradient_check(f, q, rel_tol=1e-4)
    assert report.passed, report.max_rel_err


def test_cross_entropy_finite_difference():
    ids = np.array([1, 0, 3])

    def f(x):
        return T.cross_entropy(x, ids)

    x = T.Tensor(rng(16).normal(size=(3, 4)), requires_grad=True)
    report = T.gradient_check(f, x)
    assert report.passed, report.max_rel_err


def test_linear_weight_and_bias_finite_difference():
    r = rng(21)
    x3 = T.Tensor(r.normal(size=(2, 3, 5)))  # folded leading axes
    s = T.Tensor(r.normal(size=(2, 3, 4)))
    w0 = T.Tensor(r.normal(size=(5, 4)))

    def fw(w):
        return T.sum_all(T.mul(T.linear(x3, w, T.Tensor(np.zeros(4))), s))

    def fb(b):
        return T.sum_all(T.mul(T.linear(x3, w0, b), s))

    w = T.Tensor(rng(22).normal(size=(5, 4)), requires_grad=True)
    assert T.gradient_check(fw, w, rel_tol=1e-4).passed
    b = T.Tensor(rng(23).normal(size=(4,)), requires_grad=True)
    assert T.gradient_check(fb, b, rel_tol=1e-4).passed


def test_linear_matches_matmul_add():
    r = rng(24)
    x = r.normal(size=(3, 7, 5))
    w = r.normal(size=(5, 6))
    b = r.normal(size=(6,))
    fused = T.linear(T.Tensor(x), T.Tensor(w), T.Tensor(b)).data
    split = T.add(T.matmul(T.Tensor(x), T.Tensor(w)), T.Tensor(b)).data
    assert np.array_equal(fused, split)


def test_attention_packed_finite_difference():
    B, n, c, h = 2, 4, 6, 2
    w = T.Tensor(rng(25).normal(size=(B, n, c)))

    def f(qkv):
        return T.sum_all(T.mul(T.attention_packed(qkv, num_heads=h, causal=True), w))

    qkv = T.Tensor(rng(26).normal(size=(B, n, 3 * c)), requires_grad=True)
    report = T.gradient_check(f, qkv, rel_tol=1e-4)
    assert report.passed, report.max_rel_err


def test_attention_kv_packed_finite_difference():
    B, nq, nk, c, h = 2, 3, 5, 6, 2
    r = rng(28)
    q = T.Tensor(r.normal(size=(B, nq, c)))
    w = T.Tensor(r.normal(size=(B, nq, c)))

    def f(kv):
        return T.sum_all(T.mul(T.attention_kv_packed(q, kv, num_heads=h), w))

    kv = T.Tensor(rng(29).normal(size=(B, nk, 2 * c)), requires_grad=True)
    report = T.gradient_check(f, kv, rel_tol=1e-4)
    assert report.passed, report.max_rel_err


def test_attention_packed_matches_split_attention():
    B, n, c, h = 2, 5, 8, 2
    r = rng(30)
    qkv = r.normal(size=(B, n, 3 * c))
    packed = T.attention_packed(T.Tensor(qkv), num_heads=h, causal=True).data
    split = T.attention(T.Tensor(qkv[..., :c]), T.Tensor(qkv[..., c:2 * c]),
                        T.Tensor(qkv[..., 2 * c:]), num_heads=h, causal=True).data
    assert np.abs(packed - split).max() <= 1e-12


def test_transformer_block_finite_difference():
    """Composite: layernorm -> qkv matmul -> causal attention -> gelu MLP."""
    c, n, h = 8, 5, 2
    r = rng(17)
    wqkv = T.Tensor(r.normal(size=(c, 3 * c)) * 0.3)
    wo = T.Tensor(r.normal(size=(c, c)) * 0.3)
    g1, b1 = T.Tensor(np.ones(c)), T.Tensor(np.zeros(c))
    wf = T.Tensor(r.normal(size=(c, 2 * c)) * 0.3)
    wb = T.Tensor(r.normal(size=(2 * c, c)) * 0.3)

    def f(x):
        xn = T.layer_norm(x, g1, b1)
        qkv = T.matmul(xn, wqkv)
        q = T.reshape(T.take_rows(T.transpose(T.reshape(qkv, (n, 3, c)), (1, 0, 2)), np.array([0])), (1, n, c))
        k = T.reshape(T.take_rows(T.transpose(T.reshape(qkv, (n, 3, c)), (1, 0, 2)), np.array([1])), (1, n, c))
        v = T.reshape(T.take_rows(T.transpose(T.reshape(qkv, (n, 3, c)), (1, 0, 2)), np.array([2])), (1, n, c))
        a = T.reshape(T.attention(q, k, v, num_heads=h, causal=True), (n, c))
        x2 = T.add(x, T.matmul(a, wo))
        y = T.matmul(T.gelu(T.matmul(x2, wf)), wb)
        return T.mean_all(T.mul(y, y))

    x = T.Tensor(rng(18).normal(size=(n, c)), requires_grad=True)
    report = T.gradient_check(f, x, rel_tol=1e-4)
    assert report.passed, f"max rel err {report.max_rel_err:.3e}"


def test_gradient_unbroadcast_bias():
    b = T.Tensor(rng(19).normal(size=(4,)), requires_grad=True)
    x = T.Tensor(rng(20).normal(size=(3, 2, 4)))
    with T.Graph() as g:
        loss = T.sum_all(T.add(x, b))
    grad = g.backward(loss)[b]
    assert np.allclose(grad, 6.0)


# --- graph discipline ---------------------------------------------------------

def test_backward_twice_raises():
    x = T.Tensor(np.array([1.0]), requires_grad=True)
    with T.Graph() as g:
        loss = T.sum_all(T.mul(x, x))
    g.backward(loss)
    with pytest.raises(T.GraphError):
        g.backward(loss)


def test_backward_non_scalar_raises():
    x = T.Tensor(np.ones(3), requires_grad=True)
    with T.Graph() as g:
        y = T.mul(x, x)
    with pytest.raises(T.GraphError):
        g.backward(y)


def test_backward_foreign_loss_raises():
    x = T.Tensor(np.ones(2), requires_grad=True)
    with T.Graph():
        pass
    with T.Graph() as g2:
        loss = T.sum_all(x)
    fresh = T.Graph()
    with pytest.raises(T.GraphError):
        fresh.backward(loss)
    g2.backward(loss)  # the owning graph still works


def test_no_graph_means_no_tape():
    x = T.Tensor(np.ones(2), requires_grad=True)
    y = T.mul(x, x)
    assert y._graph is None and y.grad is None


# --- errors and modes ---------------------------------------------------------

def test_shape_error_names_dimensions():
    with pytest.raises(T.ShapeError, match="K=3"):
        T.matmul(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((4, 5))))


def test_embedding_range_check():
    with pytest.raises(T.ShapeError, match="out of range"):
        T.embedding(np.array([5]), T.Tensor(np.ones((4, 2))))


def test_checked_mode_catches_nonfinite():
    big = T.Tensor(np.array([1e308]))
    with np.errstate(over="ignore"):
        with pytest.raises(T.NumericsError):
            T.mul(big, big)
        with T.checked(False):
            out = T.mul(big, big)
            assert np.isinf(out.data[0])
        with pytest.raises(T.NumericsError):
            T.mul(big, big)


def test_flop_meter_counts_matmul():
    a = T.Tensor(np.ones((3, 4)))
    b = T.Tensor(np.ones((4, 5)))
    with T.measure_flops() as m:
        T.matmul(a, b)
    assert m.value == 2 * 3 * 4 * 5


def test_forward_primitive_dispatch():
    out = T.forward_primitive("add", (T.Tensor(np.ones(2)), T.Tensor(np.ones(2))))
    assert np.allclose(out.data, 2.0)
    with pytest.raises(KeyError):
        T.forward_primitive("conv9d", ())
