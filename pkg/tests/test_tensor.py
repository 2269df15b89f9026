"""Tensor ops: forward math against hand values, gradients against central
finite differences in float64, and backward-pass bookkeeping."""

import numpy as np
import pytest

from elastic_moe import tensor as T
from elastic_moe.tensor import DoubleBackwardError, ShapeMismatchError, Tensor

from conftest import finite_diff_gradcheck, max_rel_error


def t64(arr, requires_grad=True):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# forward values
# ---------------------------------------------------------------------------

def test_matmul_identity():
    ident = Tensor(np.eye(2))
    m = Tensor([[3.0, 4.0], [5.0, 6.0]])
    out = ident @ m
    np.testing.assert_allclose(out.data, m.data)


def test_matmul_hand_dot_product():
    out = Tensor([[1.0, 2.0]]) @ Tensor([[3.0], [4.0]])
    assert out.data.shape == (1, 1)
    assert out.data[0, 0] == pytest.approx(11.0)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeMismatchError, match=r"\(2, 3\).*\(2, 2\)"):
        Tensor(np.zeros((2, 3))) @ Tensor(np.zeros((2, 2)))


def test_softmax_uniform():
    out = T.softmax(Tensor([0.0, 0.0, 0.0, 0.0]), axis=-1)
    np.testing.assert_allclose(out.data, [0.25, 0.25, 0.25, 0.25], atol=1e-7)


def test_softmax_closed_form_ratios():
    out = T.softmax(Tensor([np.log(1.0), np.log(2.0), np.log(3.0)]), axis=-1)
    np.testing.assert_allclose(out.data, [1 / 6, 2 / 6, 3 / 6], atol=1e-6)


def test_softmax_large_inputs_stable():
    out = T.softmax(Tensor([1000.0, 0.0]), axis=-1)
    assert np.all(np.isfinite(out.data))
    np.testing.assert_allclose(out.data, [1.0, 0.0], atol=1e-6)


def test_softmax_rows_sum_to_one_and_shift_invariant(rng):
    x = rng.normal(size=(50, 9)).astype(np.float32)
    out = T.softmax(Tensor(x), axis=-1)
    np.testing.assert_allclose(out.data.sum(axis=-1), 1.0, atol=1e-6)
    shifted = T.softmax(Tensor(x + 3.25), axis=-1)
    np.testing.assert_allclose(out.data, shifted.data, atol=1e-6)


def test_cross_entropy_uniform_is_log_vocab():
    logits = Tensor(np.zeros((5, 16)))
    loss = T.cross_entropy(logits, np.array([3, 0, 15, 7, 9]))
    assert float(loss.data) == pytest.approx(np.log(16.0), abs=1e-6)


def test_cross_entropy_confident_is_near_zero():
    logits = np.full((4, 8), -30.0)
    targets = np.array([1, 5, 2, 7])
    logits[np.arange(4), targets] = 30.0
    loss = T.cross_entropy(Tensor(logits), targets)
    assert float(loss.data) == pytest.approx(0.0, abs=1e-6)


def test_cross_entropy_matches_per_token_oracle(rng):
    logits = rng.normal(size=(3, 5))
    targets = rng.integers(0, 5, size=3)
    # independent per-token log-softmax
    expected = 0.0
    for t in range(3):
        row = logits[t]
        expected += -(row[targets[t]] - np.log(np.exp(row).sum()))
    expected /= 3
    loss = T.cross_entropy(t64(logits, requires_grad=False), targets)
    assert float(loss.data) == pytest.approx(expected, rel=1e-9)


def test_cross_entropy_rejects_out_of_range_targets():
    with pytest.raises(IndexError):
        T.cross_entropy(Tensor(np.zeros((2, 4))), np.array([0, 4]))
    with pytest.raises(IndexError):
        T.cross_entropy(Tensor(np.zeros((2, 4))), np.array([-1, 0]))


def test_debug_checks_flag_nan():
    T.set_debug_checks(True)
    try:
        with np.errstate(invalid="ignore"), pytest.raises(FloatingPointError):
            T.tlog(Tensor([-1.0]))
    finally:
        T.set_debug_checks(False)


# ---------------------------------------------------------------------------
# backward bookkeeping
# ---------------------------------------------------------------------------

def test_backward_sum_gives_ones():
    p = t64([1.0, 2.0, 3.0])
    p.sum().backward()
    np.testing.assert_allclose(p.grad, [1.0, 1.0, 1.0])


def test_backward_sum_of_squares():
    p = t64([1.0, 2.0])
    (p**2).sum().backward()
    np.testing.assert_allclose(p.grad, [2.0, 4.0])


def test_backward_twice_raises():
    p = t64([1.0, 2.0])
    loss = (p * p).sum()
    loss.backward()
    with pytest.raises(DoubleBackwardError):
        loss.backward()


def test_unused_leaf_keeps_zero_grad():
    used = t64([1.0, 2.0])
    unused = t64([3.0])
    unused.zero_grad()
    used.sum().backward()
    np.testing.assert_allclose(unused.grad, [0.0])


def test_grad_accumulates_across_graphs():
    p = t64([2.0])
    p.sum().backward()
    (p * 3.0).sum().backward()
    np.testing.assert_allclose(p.grad, [4.0])


def test_no_grad_blocks_recording():
    p = t64([1.0, 2.0])
    with T.no_grad():
        out = (p * p).sum()
    assert out._backward_fn is None and not out.requires_grad


def test_shared_subexpression_gradient():
    # y = (x + x) * x  =>  dy/dx = 4x
    x = t64([3.0])
    ((x + x) * x).sum().backward()
    np.testing.assert_allclose(x.grad, [12.0])


# ---------------------------------------------------------------------------
# finite-difference gradient checks (float64)
# ---------------------------------------------------------------------------

def test_grad_matmul_against_ones_bt(rng):
    a = t64(rng.normal(size=(3, 4)))
    b = t64(rng.normal(size=(4, 2)))
    (a @ b).sum().backward()
    np.testing.assert_allclose(a.grad, np.ones((3, 2)) @ b.data.T, rtol=1e-9)
    np.testing.assert_allclose(b.grad, a.data.T @ np.ones((3, 2)), rtol=1e-9)


@pytest.mark.parametrize(
    "name,builder",
    [
        ("matmul", lambda r: (
            [t64(r.normal(size=(3, 4))), t64(r.normal(size=(4, 5)))],
            lambda ls: (ls[0] @ ls[1]).sum(),
        )),
        ("batched_matmul", lambda r: (
            [t64(r.normal(size=(2, 3, 4))), t64(r.normal(size=(2, 4, 3)))],
            lambda ls: ((ls[0] @ ls[1]) ** 2).sum(),
        )),
        ("add_broadcast", lambda r: (
            [t64(r.normal(size=(3, 4))), t64(r.normal(size=(4,)))],
            lambda ls: ((ls[0] + ls[1]) ** 2).sum(),
        )),
        ("mul_broadcast", lambda r: (
            [t64(r.normal(size=(3, 4))), t64(r.normal(size=(3, 1)))],
            lambda ls: (ls[0] * ls[1]).sum(),
        )),
        ("div", lambda r: (
            [t64(r.normal(size=(3, 4))), t64(r.normal(size=(3, 4)) + 3.0)],
            lambda ls: (ls[0] / ls[1]).sum(),
        )),
        ("softmax", lambda r: (
            [t64(r.normal(size=(4, 6)))],
            lambda ls: (T.softmax(ls[0], axis=-1) * T.softmax(ls[0], axis=-1)).sum(),
        )),
        ("gelu", lambda r: (
            [t64(r.normal(size=(3, 5)))],
            lambda ls: T.gelu(ls[0]).sum(),
        )),
        ("silu", lambda r: (
            [t64(r.normal(size=(3, 5)))],
            lambda ls: T.silu(ls[0]).sum(),
        )),
        ("sigmoid", lambda r: (
            [t64(r.normal(size=(3, 5)))],
            lambda ls: (T.sigmoid(ls[0]) ** 2).sum(),
        )),
        ("relu", lambda r: (
            [t64(r.normal(size=(3, 5)) + 0.3)],
            lambda ls: (T.relu(ls[0]) ** 2).sum(),
        )),
        ("rms_norm", lambda r: (
            [t64(r.normal(size=(4, 6))), t64(r.normal(size=(6,)))],
            lambda ls: (T.rms_norm(ls[0], ls[1]) ** 2).sum(),
        )),
        ("mean_axis", lambda r: (
            [t64(r.normal(size=(4, 6)))],
            lambda ls: (ls[0].mean(axis=0) ** 2).sum(),
        )),
        ("sum_keepdims", lambda r: (
            [t64(r.normal(size=(4, 6)))],
            lambda ls: (ls[0].sum(axis=1, keepdims=True) * ls[0]).sum(),
        )),
        ("transpose_reshape", lambda r: (
            [t64(r.normal(size=(2, 3, 4)))],
            lambda ls: (ls[0].transpose((1, 0, 2)).reshape(3, 8) ** 2).sum(),
        )),
        ("exp_log", lambda r: (
            [t64(r.normal(size=(3, 4)))],
            lambda ls: T.tlog(T.texp(ls[0]) + 1.0).sum(),
        )),
    ],
)
def test_gradcheck_elementary_ops(name, builder):
    r = np.random.default_rng(hash(name) % 2**32)
    leaves, make = builder(r)
    finite_diff_gradcheck(lambda: make(leaves), leaves)


def test_gradcheck_cross_entropy(rng):
    logits = t64(rng.normal(size=(5, 7)))
    targets = rng.integers(0, 7, size=5)
    finite_diff_gradcheck(lambda: T.cross_entropy(logits, targets), [logits])


def test_gradcheck_gather_scatter(rng):
    table = t64(rng.normal(size=(6, 3)))
    ids = np.array([[1, 1, 4], [5, 0, 1]])
    finite_diff_gradcheck(lambda: (T.take(table, ids) ** 2).sum(), [table])

    x = t64(rng.normal(size=(5, 3)))
    idx = np.array([4, 0, 2])
    finite_diff_gradcheck(
        lambda: (T.take_rows(x, idx, unique=True) ** 2).sum(), [x]
    )
    vals = t64(rng.normal(size=(3, 2)))
    finite_diff_gradcheck(
        lambda: (T.scatter_rows(vals, np.array([1, 3, 0]), 5) ** 2).sum(), [vals]
    )
    w = t64(rng.normal(size=(4, 4)))
    finite_diff_gradcheck(
        lambda: (T.take_pairs(w, np.array([0, 2, 2]), np.array([1, 1, 3])) ** 2).sum(),
        [w],
    )


def test_gradcheck_repeated_row_gather(rng):
    x = t64(rng.normal(size=(4, 3)))
    idx = np.array([2, 2, 0])  # duplicates require the accumulating path
    finite_diff_gradcheck(lambda: (T.take_rows(x, idx) ** 2).sum(), [x])


def test_f32_reduction_uses_float64_accumulation():
    # 2^24 + 1 is not representable in f32; naive f32 summation stalls
    big = np.full(2**14, 1024.0, dtype=np.float32)
    small = np.full(2**14, 2.0**-11, dtype=np.float32)
    out = Tensor(np.concatenate([big, small])).sum()
    expected = 1024.0 * 2**14 + 2.0**-11 * 2**14
    assert float(out.data) == pytest.approx(expected, rel=1e-7)


def test_determinism_same_ops_same_bits(rng):
    x = rng.normal(size=(64, 32)).astype(np.float32)
    w = rng.normal(size=(32, 16)).astype(np.float32)

    def run():
        out = T.softmax(Tensor(x) @ Tensor(w), axis=-1)
        return out.data.tobytes()

    assert run() == run()
