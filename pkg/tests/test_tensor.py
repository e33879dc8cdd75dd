import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from easwin import tensor as T
from easwin.tensor import (
    ContractError,
    DimensionError,
    NonFiniteError,
    Parameter,
    Tensor,
    bce_with_logits,
    count_macs,
    feed_forward,
    gelu,
    layer_norm,
    linear,
    matmul,
    no_grad,
    softmax_lastdim,
    verification_mode,
)
from oracles import matmul_loops, numeric_grad


def leaf(arr):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=True, dtype=np.float64)


def grad_of(build, *arrays):
    """Analytic gradients of scalar ``build(*tensors)`` w.r.t. each array."""
    ts = [leaf(a) for a in arrays]
    build(*ts).backward()
    return [t.grad for t in ts]


def check_fd(build, arrays, tol=1e-6):
    analytic = grad_of(build, *arrays)
    for arr, g in zip(arrays, analytic):
        def f():
            with no_grad():
                return float(build(*[Tensor(a, dtype=np.float64) for a in arrays]).data)

        num = numeric_grad(f, arr)
        scale = max(1.0, np.abs(num).max())
        assert np.abs(g - num).max() / scale < tol


# -- dtype and contexts -----------------------------------------------------

def test_default_dtype_is_float32():
    assert Tensor([1.0, 2.0]).dtype == np.float32
    assert Parameter(np.zeros(3)).dtype == np.float32


def test_verification_mode_switches_to_float64_and_restores():
    with verification_mode():
        assert Tensor([1.0]).dtype == np.float64
    assert Tensor([1.0]).dtype == np.float32


def test_constructor_copies_input():
    a = np.ones(3)
    t = Tensor(a)
    a[0] = 5
    assert t.data[0] == 1


def test_zero_extent_rejected():
    with pytest.raises(ContractError):
        Tensor(np.zeros((0, 3)))


def test_no_grad_builds_no_graph():
    x = leaf([1.0, 2.0])
    with no_grad():
        y = (x * x).sum()
    assert not y.requires_grad and y._parents == ()


def test_backward_needs_scalar():
    x = leaf([1.0, 2.0])
    with pytest.raises(ContractError):
        (x * 2.0).backward()


def test_grad_accumulates_over_reuse():
    x = leaf([3.0])
    (x * x + x).sum().backward()
    assert x.grad[0] == pytest.approx(7.0)


@pytest.mark.filterwarnings("ignore:overflow")
def test_non_finite_output_raises():
    x = Tensor([1e30, 1.0], dtype=np.float32)
    with pytest.raises(NonFiniteError) as info:
        x * 1e30
    assert info.value.op == "mul"


# -- matmul -----------------------------------------------------------------

@pytest.mark.parametrize("seed", range(20))
def test_matmul_matches_triple_loop(seed):
    rng = np.random.default_rng(seed)
    n, k, m = rng.integers(1, 7, size=3)
    a, b = rng.standard_normal((n, k)), rng.standard_normal((k, m))
    with verification_mode():
        got = matmul(Tensor(a), Tensor(b)).data
    np.testing.assert_allclose(got, matmul_loops(a, b), atol=1e-12)


def test_batched_matmul_broadcasts_and_matches_loops():
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal((2, 3, 4, 5)), rng.standard_normal((3, 5, 2))
    with verification_mode():
        got = matmul(Tensor(a), Tensor(b)).data
    for i in range(2):
        for j in range(3):
            np.testing.assert_allclose(got[i, j], matmul_loops(a[i, j], b[j]), atol=1e-12)


def test_matmul_shape_errors():
    with pytest.raises(DimensionError):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(DimensionError):
        matmul(Tensor(np.ones(3)), Tensor(np.ones((3, 2))))


def test_mac_counter_counts_matmul_and_linear():
    with count_macs() as c:
        matmul(Tensor(np.ones((2, 3, 4))), Tensor(np.ones((4, 5))))
        linear(Tensor(np.ones((7, 4))), Tensor(np.ones((4, 2))))
    assert c["total"] == 2 * 3 * 4 * 5 + 7 * 4 * 2


# -- finite-difference checks of every differentiable op --------------------

OPS = {
    "add_broadcast": (lambda a, b: (a + b * 2.0).sum(), [(3, 4), (4,)]),
    "mul_broadcast": (lambda a, b: (a * b).sum(), [(2, 3, 4), (3, 1)]),
    "sub": (lambda a, b: ((a - b) * (a - b)).sum(), [(5,), (5,)]),
    "matmul": (lambda a, b: (matmul(a, b) * matmul(a, b)).sum(), [(2, 3, 4), (4, 5)]),
    "batched_matmul": (lambda a, b: matmul(a, b).sum() * 0.5 + (matmul(a, b) * matmul(a, b)).sum(), [(2, 3, 4), (2, 4, 2)]),
    "gelu": (lambda a: (gelu(a) * gelu(a)).sum(), [(4, 6)]),
    "sigmoid": (lambda a: (T.sigmoid(a) * a).sum(), [(7,)]),
    "mean_axis": (lambda a: (a.mean(axis=1) * a.mean(axis=1)).sum(), [(3, 4)]),
    "reshape_transpose": (lambda a: (a.reshape(2, 6).transpose(1, 0) * a.reshape(6, 2)).sum(), [(3, 4)]),
    "roll": (lambda a: (T.roll(a, 2, 1) * a).sum(), [(2, 5)]),
    "pad": (lambda a: (T.pad_axis(a, 1, 3) * T.pad_axis(a, 1, 3)).sum(), [(2, 3)]),
    "getitem": (lambda a: (a[:, 1:3] * a[:, 0:2]).sum(), [(3, 4)]),
    "take_rows": (
        lambda a: (T.take_rows(a, np.array([[0, 2], [2, 1]])) * T.take_rows(a, np.array([[1, 1], [0, 2]]))).sum(),
        [(3, 2)],
    ),
    "concat": (lambda a, b: (T.concat([a, b], axis=1) * T.concat([b, a], axis=1)).sum(), [(2, 3), (2, 3)]),
    "softmax": (lambda a: (softmax_lastdim(a) * softmax_lastdim(a * 2.0)).sum(), [(3, 5)]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_match_finite_differences(name):
    build, shapes = OPS[name]
    for trial in range(8):
        rng = np.random.default_rng([trial, len(name)])
        arrays = [rng.standard_normal(s) for s in shapes]
        with verification_mode():
            check_fd(build, arrays)


def test_linear_gradients():
    rng = np.random.default_rng(3)
    for trial in range(10):
        x, w, b = rng.standard_normal((2, 3, 4)), rng.standard_normal((4, 5)), rng.standard_normal(5)
        with verification_mode():
            check_fd(lambda x, w, b: (linear(x, w, b) * linear(x, w, b)).sum(), [x, w, b])


@pytest.mark.parametrize("rows", [1, 3, 512])
def test_feed_forward_gradients_across_chunking(rows, monkeypatch):
    monkeypatch.setattr(T, "_FF_ROWS", rows)
    rng = np.random.default_rng(rows)
    x = rng.standard_normal((5, 3))
    w1, b1 = rng.standard_normal((3, 8)), rng.standard_normal(8)
    w2, b2 = rng.standard_normal((8, 2)), rng.standard_normal(2)

    def build(x, w1, b1, w2, b2):
        y = feed_forward(x, w1, b1, w2, b2)
        return (y * y).sum()

    with verification_mode():
        check_fd(build, [x, w1, b1, w2, b2])


def test_feed_forward_equals_unfused_composition():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((7, 4))
    w1, b1, w2, b2 = rng.standard_normal((4, 16)), rng.standard_normal(16), rng.standard_normal((16, 3)), rng.standard_normal(3)
    with verification_mode():
        fused = feed_forward(Tensor(x), Tensor(w1), Tensor(b1), Tensor(w2), Tensor(b2)).data
        plain = linear(gelu(linear(Tensor(x), Tensor(w1), Tensor(b1))), Tensor(w2), Tensor(b2)).data
    np.testing.assert_allclose(fused, plain, atol=1e-12)


def test_layer_norm_gradients_and_statistics():
    rng = np.random.default_rng(4)
    for trial in range(10):
        x, g, b = rng.standard_normal((3, 6)), rng.standard_normal(6), rng.standard_normal(6)
        with verification_mode():
            check_fd(lambda x, g, b: (layer_norm(x, g, b) * layer_norm(x, g, b * 0.5)).sum(), [x, g, b])
    with verification_mode():
        y = layer_norm(Tensor(rng.standard_normal((4, 8)) * 3 + 1), Tensor(np.ones(8)), Tensor(np.zeros(8))).data
    np.testing.assert_allclose(y.mean(axis=-1), 0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=-1), 1, atol=1e-4)


def test_bce_gradients():
    rng = np.random.default_rng(5)
    for trial in range(10):
        z = rng.standard_normal(6) * 3
        y = rng.integers(0, 2, 6)
        with verification_mode():
            check_fd(lambda z: bce_with_logits(z, y), [z])


# -- values -----------------------------------------------------------------

def test_gelu_values_match_tanh_formula():
    xs = np.linspace(-4, 4, 17)
    with verification_mode():
        got = gelu(Tensor(xs)).data
    want = [0.5 * x * (1 + math.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x**3))) for x in xs]
    np.testing.assert_allclose(got, want, atol=1e-14)


def test_bce_values():
    with verification_mode():
        assert float(bce_with_logits(Tensor([0.0]), [1]).data) == pytest.approx(math.log(2))
        # large margins stay finite and exact
        assert float(bce_with_logits(Tensor([100.0, -100.0]), [1, 0]).data) == pytest.approx(0.0, abs=1e-40)
        assert float(bce_with_logits(Tensor([-100.0]), [1]).data) == pytest.approx(100.0)


def test_bce_rejects_label_shape_mismatch():
    with pytest.raises(DimensionError):
        bce_with_logits(Tensor([0.0, 1.0]), [1])


def test_softmax_masked_entries_get_exact_zero():
    with verification_mode():
        x = Tensor([[1.0, T.MASK_VALUE, 2.0], [T.MASK_VALUE, T.MASK_VALUE, T.MASK_VALUE]])
        p = softmax_lastdim(x).data
    assert p[0, 1] == 0.0
    assert p[0].sum() == pytest.approx(1.0)
    np.testing.assert_array_equal(p[1], 0.0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=1, max_size=12))
def test_softmax_rows_sum_to_one(row):
    with verification_mode():
        p = softmax_lastdim(Tensor([row])).data
    assert p.sum() == pytest.approx(1.0)
    assert (p >= 0).all()


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_reshape_roll_transpose_round_trip(seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((2, 3, 4)))
    y = T.roll(T.roll(x.transpose(2, 0, 1).transpose(1, 2, 0), 2, 1), -2, 1).reshape(6, 4).reshape(2, 3, 4)
    np.testing.assert_array_equal(y.data, x.data)
