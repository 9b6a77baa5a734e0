"""Autodiff kernel: forward oracles, gradient checks, tape and MAC counting."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from skiplift import tensor as tt
from skiplift.tensor import (
    FlopCounter,
    ShapeError,
    Tape,
    TapeError,
    Tensor,
    backward,
    concat,
    counting,
    gelu,
    inverse_permutation,
    layer_norm,
    matmul,
    relu,
    reshape,
    sigmoid,
    softmax,
    sqrt,
    square,
    strided_gather,
    tabs,
    take,
    tmean,
    transpose,
    tsum,
)

from helpers import check_grads, numeric_grad

RNG = np.random.default_rng(20240811)


# ---------------------------------------------------------------------------
# forward oracles


def test_matmul_hand_values():
    # hand arithmetic: rows of A dotted with columns of B
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    b = Tensor([[5.0, 6.0], [7.0, 8.0]])
    np.testing.assert_array_equal((a @ b).data, [[19.0, 22.0], [43.0, 50.0]])


def test_matmul_identity():
    a = Tensor(RNG.normal(size=(4, 4)))
    np.testing.assert_array_equal((a @ Tensor(np.eye(4))).data, a.data)


def test_matmul_zero_annihilates():
    a = Tensor(RNG.normal(size=(3, 5)))
    out = a @ Tensor(np.zeros((5, 2)))
    np.testing.assert_array_equal(out.data, np.zeros((3, 2)))


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))
    with pytest.raises(ShapeError):
        matmul(Tensor(np.ones((2, 2, 3))), Tensor(np.ones((3, 3, 2))))


def test_matmul_stacked_matches_einsum():
    a = RNG.normal(size=(4, 2, 3, 5))
    b = RNG.normal(size=(4, 2, 5, 7))
    out = matmul(Tensor(a), Tensor(b)).data
    np.testing.assert_allclose(out, np.einsum("bhik,bhkj->bhij", a, b), atol=1e-12)


def test_matmul_folded_weight_matches_einsum():
    a = RNG.normal(size=(4, 6, 5))
    w = RNG.normal(size=(5, 3))
    out = matmul(Tensor(a), Tensor(w)).data
    np.testing.assert_allclose(out, np.einsum("btk,km->btm", a, w), atol=1e-12)


def test_softmax_uniform_and_log_weights():
    np.testing.assert_allclose(
        softmax(Tensor([0.0, 0.0, 0.0])).data, np.full(3, 1 / 3), atol=1e-15
    )
    logs = np.log([1.0, 2.0, 3.0])
    np.testing.assert_allclose(
        softmax(Tensor(logs)).data, [1 / 6, 2 / 6, 3 / 6], atol=1e-12
    )


@given(
    st.lists(
        st.floats(min_value=-30, max_value=30, allow_nan=False), min_size=2, max_size=12
    )
)
def test_softmax_rows_sum_to_one(row):
    y = softmax(Tensor([row, row])).data
    assert np.all(np.abs(y.sum(axis=-1) - 1.0) < 1e-12)
    assert np.all(y >= 0.0)


def test_sigmoid_values():
    assert sigmoid(Tensor(0.0)).item() == 0.5
    assert abs(sigmoid(Tensor(math.log(3.0))).item() - 0.75) < 1e-12


@given(st.floats(min_value=-50, max_value=50, allow_nan=False))
def test_sigmoid_symmetry_and_range(x):
    a = sigmoid(Tensor(x)).item()
    b = sigmoid(Tensor(-x)).item()
    assert abs(a + b - 1.0) < 1e-12
    assert 0.0 <= a <= 1.0


def test_layer_norm_constant_input_is_zero():
    out = layer_norm(Tensor([4.0, 4.0, 4.0]), Tensor(np.ones(3)), Tensor(np.zeros(3)))
    np.testing.assert_allclose(out.data, np.zeros(3), atol=1e-12)


def test_layer_norm_two_point_example():
    out = layer_norm(Tensor([1.0, 3.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)))
    np.testing.assert_allclose(out.data, [-1.0, 1.0], atol=1e-2)


def test_layer_norm_normalizes_before_affine():
    x = Tensor(RNG.normal(size=(5, 16)) * 3.0 + 2.0)
    out = layer_norm(x, Tensor(np.ones(16)), Tensor(np.zeros(16))).data
    np.testing.assert_allclose(out.mean(axis=-1), np.zeros(5), atol=1e-12)
    np.testing.assert_allclose(out.std(axis=-1), np.ones(5), atol=1e-3)


def test_layer_norm_affine_shape_check():
    with pytest.raises(ShapeError):
        layer_norm(Tensor(np.ones((2, 4))), Tensor(np.ones(3)), Tensor(np.zeros(3)))


def test_gelu_fixed_points():
    assert gelu(Tensor(0.0)).item() == 0.0
    # gelu(x) ~ x for large positive x, ~0 for large negative x
    assert abs(gelu(Tensor(10.0)).item() - 10.0) < 1e-6
    assert abs(gelu(Tensor(-10.0)).item()) < 1e-6


def test_take_basic_rows():
    x = Tensor(np.arange(18.0).reshape(9, 2))
    np.testing.assert_array_equal(
        take(x, [0, 3, 6]).data, x.data[[0, 3, 6]]
    )
    np.testing.assert_array_equal(
        strided_gather(x, [4, 2, 0]).data, x.data[[4, 2, 0]]
    )


def test_take_out_of_range():
    x = Tensor(np.zeros((4, 2)))
    with pytest.raises(IndexError):
        take(x, [0, 4])


@given(st.integers(min_value=1, max_value=40), st.randoms())
def test_gather_scatter_roundtrip_bit_exact(n, rnd):
    perm = list(range(n))
    rnd.shuffle(perm)
    x = np.arange(n * 3, dtype=np.float64).reshape(n, 3)
    gathered = take(Tensor(x), perm)
    restored = take(gathered, inverse_permutation(perm))
    assert np.array_equal(restored.data, x)


def test_concat_and_split_backward():
    a = Tensor(RNG.normal(size=(2, 3)), requires_grad=True)
    b = Tensor(RNG.normal(size=(4, 3)), requires_grad=True)
    with Tape():
        out = tsum(concat([a, b], axis=0))
        backward(out)
    np.testing.assert_array_equal(a.grad, np.ones((2, 3)))
    np.testing.assert_array_equal(b.grad, np.ones((4, 3)))


# ---------------------------------------------------------------------------
# backward oracles and per-op gradient checks


def test_backward_of_sum_is_ones():
    x = Tensor(RNG.normal(size=(3, 4)), requires_grad=True)
    with Tape():
        backward(tsum(x))
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))


def test_sigmoid_grad_at_zero():
    x = Tensor(np.zeros(4), requires_grad=True)
    with Tape():
        backward(tsum(sigmoid(x)))
    np.testing.assert_allclose(x.grad, np.full(4, 0.25), atol=1e-12)


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape():
        y = sigmoid(x)
        with pytest.raises(ShapeError):
            backward(y)


def test_backward_requires_tape():
    x = Tensor(np.ones(3), requires_grad=True)
    y = tsum(sigmoid(x))  # no tape active: nothing recorded
    with pytest.raises(TapeError):
        backward(y)


def test_grad_accumulates_over_reuses():
    x = Tensor(np.array([2.0]), requires_grad=True)
    with Tape():
        backward(tsum(x + x))
    np.testing.assert_array_equal(x.grad, [2.0])


def test_tape_entries_are_topologically_ordered():
    x = Tensor(RNG.normal(size=(3,)), requires_grad=True)
    with Tape() as tape:
        y = sigmoid(x)
        z = tsum(y * y)
    pos = {id(e.out): i for i, e in enumerate(tape.entries)}
    for i, e in enumerate(tape.entries):
        for inp in e.inputs:
            if id(inp) in pos:
                assert pos[id(inp)] < i


UNARY_OPS = [
    ("sigmoid", sigmoid, (-3.0, 3.0)),
    ("relu", relu, (0.1, 3.0)),  # keep away from the kink at 0
    ("gelu", gelu, (-3.0, 3.0)),
    ("abs", tabs, (0.2, 3.0)),
    ("square", square, (-3.0, 3.0)),
    ("sqrt", sqrt, (0.5, 4.0)),
    ("softmax", lambda t: softmax(t, axis=-1), (-2.0, 2.0)),
]


@pytest.mark.parametrize("name,op,rng_range", UNARY_OPS, ids=[u[0] for u in UNARY_OPS])
def test_unary_op_gradcheck(name, op, rng_range):
    lo, hi = rng_range
    x = Tensor(RNG.uniform(lo, hi, size=(3, 5)), requires_grad=True)
    w = RNG.normal(size=(3, 5))  # fixed projection makes the loss non-symmetric
    check_grads(lambda: tsum(op(x) * w), [x])


def test_matmul_gradcheck_both_modes():
    a = Tensor(RNG.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(RNG.normal(size=(4, 2)), requires_grad=True)
    check_grads(lambda: tsum(square(a @ b)), [a, b])
    s = Tensor(RNG.normal(size=(2, 3, 4)), requires_grad=True)
    t = Tensor(RNG.normal(size=(2, 4, 5)), requires_grad=True)
    check_grads(lambda: tsum(square(s @ t)), [s, t])
    f = Tensor(RNG.normal(size=(2, 3, 4)), requires_grad=True)
    w = Tensor(RNG.normal(size=(4, 5)), requires_grad=True)
    check_grads(lambda: tsum(square(f @ w)), [f, w])


def test_layer_norm_gradcheck():
    x = Tensor(RNG.normal(size=(4, 6)), requires_grad=True)
    g = Tensor(RNG.normal(size=(6,)), requires_grad=True)
    b = Tensor(RNG.normal(size=(6,)), requires_grad=True)
    w = RNG.normal(size=(4, 6))
    check_grads(lambda: tsum(layer_norm(x, g, b) * w), [x, g, b])


def test_structure_op_gradchecks():
    x = Tensor(RNG.normal(size=(2, 3, 4)), requires_grad=True)
    w = RNG.normal(size=(4, 6))
    check_grads(lambda: tsum(square(reshape(x, (4, 6)) * w)), [x])
    wt = RNG.normal(size=(4, 2, 3))
    check_grads(lambda: tsum(square(transpose(x, (2, 0, 1)) * wt)), [x])
    wk = RNG.normal(size=(3, 3, 4))
    check_grads(lambda: tsum(square(take(x, [1, 0, 1], axis=0) * wk)), [x])


def test_broadcast_add_mul_gradcheck():
    x = Tensor(RNG.normal(size=(3, 4, 5)), requires_grad=True)
    b = Tensor(RNG.normal(size=(4, 5)), requires_grad=True)
    c = Tensor(RNG.normal(size=(5,)), requires_grad=True)
    check_grads(lambda: tsum(square((x + b) * c)), [x, b, c])


def test_mean_and_div_gradcheck():
    x = Tensor(RNG.uniform(0.5, 2.0, size=(3, 4)), requires_grad=True)
    y = Tensor(RNG.uniform(0.5, 2.0, size=(3, 4)), requires_grad=True)
    check_grads(lambda: tmean(square(x / y)), [x, y])
    check_grads(lambda: tsum(square(tmean(x, axis=1) * np.arange(3.0))), [x])


def test_every_op_chain_gradcheck():
    # one composite expression touching most of the op set at once
    rng = np.random.default_rng(99)
    x = Tensor(rng.uniform(0.3, 1.5, size=(4, 6)), requires_grad=True)
    w = Tensor(rng.normal(size=(6, 6)), requires_grad=True)
    g = Tensor(rng.uniform(0.5, 1.5, size=(6,)), requires_grad=True)
    b = Tensor(rng.normal(size=(6,)), requires_grad=True)
    wproj = rng.normal(size=(4, 12))  # keeps per-element gradients well away from 0

    def loss():
        h = gelu(x @ w)
        h = layer_norm(h, g, b)
        h = softmax(h, axis=-1)
        h = concat([h, sigmoid(h)], axis=1)
        return tsum(sqrt(square(h) + 1.0) * wproj)

    check_grads(loss, [x, w, g, b])


# ---------------------------------------------------------------------------
# tape behavior


def test_no_tape_means_no_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    y = sigmoid(x)
    assert y._tape is None and not y.requires_grad


def test_constants_receive_no_grad():
    x = Tensor(np.ones(3), requires_grad=True)
    c = Tensor(np.full(3, 2.0))
    with Tape():
        backward(tsum(x * c))
    assert c.grad is None
    np.testing.assert_array_equal(x.grad, c.data)


def test_strict_finite_mode():
    tt.strict_finite(True)
    try:
        with pytest.raises(FloatingPointError):
            sqrt(Tensor([-1.0]))
    finally:
        tt.strict_finite(False)


# ---------------------------------------------------------------------------
# MAC counting


def test_matmul_mac_count_exact():
    c = FlopCounter()
    with counting(c):
        matmul(Tensor(np.ones((7, 3))), Tensor(np.ones((3, 5))))
    assert c.total_macs() == 7 * 3 * 5


def test_chain_of_matmuls_counts_closed_form():
    dims = [(4, 6), (6, 3), (3, 8), (8, 2)]
    c = FlopCounter()
    x = Tensor(np.ones((5, 4)))
    expected = 0
    with counting(c):
        for a, b in dims:
            x = x @ Tensor(np.ones((a, b)))
            expected += 5 * a * b
    assert c.total_macs() == expected


def test_stacked_matmul_macs_include_batch():
    c = FlopCounter()
    with counting(c):
        matmul(Tensor(np.ones((2, 3, 4, 5))), Tensor(np.ones((2, 3, 5, 6))))
    assert c.total_macs() == 2 * 3 * 4 * 5 * 6


def test_scopes_attribute_to_innermost():
    c = FlopCounter()
    with counting(c):
        with c.scope("outer"):
            matmul(Tensor(np.ones((2, 2))), Tensor(np.ones((2, 2))))
            with c.scope("inner"):
                matmul(Tensor(np.ones((3, 3))), Tensor(np.ones((3, 3))))
    assert c.macs["outer"] == 8
    assert c.macs["inner"] == 27
    assert c.total_macs() == 35
    assert c.total_macs("inn") == 27


def test_elementwise_tallied_separately():
    c = FlopCounter()
    with counting(c):
        with c.scope("s"):
            gelu(Tensor(np.ones((4, 4))))
    assert c.total_macs() == 0
    assert c.elementwise["s"] >= 16


# ---------------------------------------------------------------------------
# init helpers


def test_uniform_param_is_deterministic_and_bounded():
    a = tt.uniform_param(np.random.default_rng(7), (64, 32))
    b = tt.uniform_param(np.random.default_rng(7), (64, 32))
    assert np.array_equal(a.data, b.data)
    bound = math.sqrt(1.0 / 64)
    assert np.all(np.abs(a.data) <= bound)
    assert a.requires_grad
