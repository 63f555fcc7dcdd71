import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from msnmt import tensor as T
from msnmt.tensor import BACKWARD, ContractError, ShapeError, Tape, Tensor, backward, grad_check

from oracles import mp_cross_entropy, mp_softmax, naive_matmul

finite = st.floats(-5, 5, allow_nan=False, width=64)


def wide(data, grad=True):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=grad)


# ------------------------------------------------------------------ matmul


def test_matmul_identity():
    out = T.matmul(Tensor(np.eye(2)), Tensor([[1.0, 2.0], [3.0, 4.0]]))
    np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])


def test_matmul_zero():
    out = T.matmul(Tensor(np.zeros((2, 2))), Tensor(np.arange(6.0).reshape(2, 3)))
    np.testing.assert_array_equal(out.data, np.zeros((2, 3)))


def test_matmul_against_triple_loop():
    a, b = [[1, 2], [3, 4]], [[5, 6], [7, 8]]
    assert naive_matmul(a, b) == [[19, 22], [43, 50]]
    np.testing.assert_array_equal(T.matmul(Tensor(a), Tensor(b)).data, naive_matmul(a, b))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.data())
def test_matmul_random_matches_oracle(m, k, n, data):
    a = data.draw(hnp.arrays(np.float64, (m, k), elements=finite))
    b = data.draw(hnp.arrays(np.float64, (k, n), elements=finite))
    np.testing.assert_allclose(T.matmul(Tensor(a), Tensor(b)).data, naive_matmul(a.tolist(), b.tolist()), atol=1e-12)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 2))))


def test_matmul_backward_rule():
    a, b = wide(np.arange(6.0).reshape(2, 3)), wide(np.arange(12.0).reshape(3, 4) / 7)
    with Tape() as tape:
        c = T.matmul(a, b)
        loss = T.sum(c * Tensor(np.arange(8.0).reshape(2, 4)))
    backward(loss, tape)
    dc = np.arange(8.0).reshape(2, 4)
    np.testing.assert_allclose(a.grad, dc @ b.data.T)
    np.testing.assert_allclose(b.grad, a.data.T @ dc)


# ----------------------------------------------------------------- softmax


def test_softmax_symmetric():
    np.testing.assert_allclose(T.softmax(Tensor([2.5, 2.5, 2.5])).data, [1 / 3] * 3, atol=1e-12)


def test_softmax_singleton():
    assert T.softmax(Tensor([7.0])).data.tolist() == [1.0]


def test_softmax_against_arbitrary_precision():
    expected = mp_softmax([1, 2, 3])
    np.testing.assert_allclose(expected, [0.09003, 0.24473, 0.66524], atol=5e-6)
    np.testing.assert_allclose(T.softmax(Tensor([1.0, 2.0, 3.0])).data, expected, rtol=1e-12)


def test_softmax_empty_is_domain_error():
    with pytest.raises(ValueError):
        T.softmax(Tensor(np.zeros(0)))


def test_softmax_large_inputs_stable():
    out = T.softmax(Tensor([1000.0, 1000.0])).data
    np.testing.assert_allclose(out, [0.5, 0.5])


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(np.float64, st.integers(1, 12), elements=st.floats(-50, 50)), st.floats(-100, 100))
def test_softmax_sums_to_one_and_shift_invariant(v, c):
    p = T.softmax(Tensor(v)).data
    assert np.all(p >= 0)
    assert abs(p.sum() - 1) <= 1e-6
    assert np.max(np.abs(T.softmax(Tensor(v + c)).data - p)) <= 1e-6


# ------------------------------------------------------------ cross entropy


def test_cross_entropy_uniform_is_log_v():
    loss = T.cross_entropy_loss(Tensor(np.zeros((3, 7))), [0, 4, 6])
    assert loss.item() == pytest.approx(np.log(7), abs=1e-12)


def test_cross_entropy_peaked_tends_to_zero():
    logits = np.zeros((2, 5))
    logits[0, 1] = logits[1, 3] = 200.0
    assert T.cross_entropy_loss(Tensor(logits), [1, 3]).item() < 1e-12


def test_cross_entropy_hand_example_against_oracle():
    rows = [[0.5, -1.0, 2.0], [1.5, 0.25, -0.75]]
    expected = mp_cross_entropy(rows, [2, 0])
    assert T.cross_entropy_loss(Tensor(rows), [2, 0]).item() == pytest.approx(expected, rel=1e-13)


def test_cross_entropy_out_of_range_target():
    with pytest.raises(IndexError):
        T.cross_entropy_loss(Tensor(np.zeros((2, 3))), [0, 3])


def test_cross_entropy_ignore_index_excludes_rows():
    rows = np.array([[0.5, -1.0, 2.0], [1.5, 0.25, -0.75], [9.0, 0.0, 0.0]])
    full = T.cross_entropy_loss(Tensor(rows[:2]), [2, 0]).item()
    assert T.cross_entropy_loss(Tensor(rows), [2, 0, 1], ignore_index=1).item() == pytest.approx(full, rel=1e-14)


# ----------------------------------------------------------------- backward


def test_backward_of_sum_is_ones():
    x = wide(np.arange(5.0))
    with Tape() as tape:
        loss = T.sum(x)
    backward(loss, tape)
    np.testing.assert_array_equal(x.grad, np.ones(5))


def test_backward_of_square_sum_is_two_x():
    x = wide([0.5, -2.0, 3.0])
    with Tape() as tape:
        loss = T.sum(x * x)
    backward(loss, tape)
    np.testing.assert_allclose(x.grad, 2 * x.data)


def test_backward_non_scalar_is_contract_error():
    x = wide([1.0, 2.0])
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(ContractError):
        backward(y, tape)


def test_unreachable_tensor_has_no_grad():
    x, unused = wide([1.0, 2.0]), wide([3.0])
    with Tape() as tape:
        loss = T.sum(x)
        _ = unused * 2.0
    backward(loss, tape)
    assert unused.grad is None


def test_tape_records_in_topological_order():
    x = wide([1.0, 2.0])
    with Tape() as tape:
        loss = T.sum(T.tanh(x * 3.0))
    produced = set()
    for rec in tape.records:
        for inp in rec.inputs:
            if inp.requires_grad and inp is not x:
                assert id(inp) in produced
        produced.add(id(rec.out))
    assert tape.records[-1].out is loss


def test_no_recording_without_tape_or_grad():
    x = wide([1.0])
    y = x * 2.0
    assert not y.requires_grad
    with Tape() as tape:
        Tensor([1.0]) * 2.0
    assert len(tape) == 0


def test_tapes_are_thread_local():
    seen = []

    def worker():
        seen.append(T.active_tape())

    with Tape():
        th = threading.Thread(target=worker)
        th.start()
        th.join()
    assert seen == [None]


def test_embedding_backward_accumulates_repeats():
    table = wide(np.arange(8.0).reshape(4, 2))
    with Tape() as tape:
        loss = T.sum(T.embedding(table, [[1, 1], [3, 1]]))
    backward(loss, tape)
    np.testing.assert_array_equal(table.grad, [[0, 0], [3, 3], [0, 0], [1, 1]])


def test_embedding_out_of_range():
    with pytest.raises(IndexError):
        T.embedding(Tensor(np.zeros((3, 2))), [0, 3])


def test_item_requires_single_element():
    with pytest.raises(ShapeError):
        Tensor([1.0, 2.0]).item()


# ---------------------------------------------------------------- dropout


def test_dropout_eval_mode_is_identity():
    x = Tensor(np.ones(10))
    assert T.dropout(x, 0.5, None) is x


def test_dropout_seeded_and_inverted():
    x = Tensor(np.ones(10_000))
    a = T.dropout(x, 0.4, np.random.default_rng(3)).data
    b = T.dropout(x, 0.4, np.random.default_rng(3)).data
    np.testing.assert_array_equal(a, b)
    assert set(np.unique(a).round(6)) == {0.0, round(1 / 0.6, 6)}
    assert a.mean() == pytest.approx(1.0, abs=0.05)


# --------------------------------------------------------------- grad_check


def test_grad_check_linear_is_exact():
    w = wide(np.array([0.3, -1.2, 2.0]))
    x = Tensor(np.array([1.5, 0.5, -2.0]))
    assert grad_check(lambda w: T.sum(w * x), [w]) <= 1e-9


def test_grad_check_softmax_cross_entropy():
    rng = np.random.default_rng(0)
    v = wide(rng.normal(size=(1, 5)))
    assert grad_check(lambda v: T.cross_entropy_loss(v, [3]), [v]) <= 1e-6


def test_grad_check_detects_nondeterminism():
    rng = np.random.default_rng(0)
    w = wide([1.0, 2.0])
    with pytest.raises(ContractError):
        grad_check(lambda w: T.sum(w * Tensor(rng.normal(size=2))), [w])


def test_grad_check_rejects_bad_epsilon():
    with pytest.raises(ValueError):
        grad_check(lambda w: T.sum(w), [wide([1.0])], epsilon=0)


def test_grad_check_restores_parameters():
    w = wide([0.5, 0.25])
    before = w.data.copy()
    grad_check(lambda w: T.sum(T.tanh(w)), [w])
    np.testing.assert_array_equal(w.data, before)
    assert w.data.dtype == np.float64


def test_grad_check_catches_corrupted_rule(monkeypatch):
    monkeypatch.setitem(BACKWARD, "tanh", lambda g, rec: (g * (1 - rec.out.data),))
    w = wide([0.5, -0.3, 0.8])
    assert grad_check(lambda w: T.sum(T.tanh(w)), [w]) > 1e-2


def _unary(name):
    return {
        "tanh": T.tanh, "sigmoid": T.sigmoid, "exp": T.exp,
        "log": lambda a: T.log(T.exp(a) + 1.0), "neg": T.neg,
        "transpose": T.transpose, "softmax": lambda a: T.softmax(a, axis=-1),
        "reshape": lambda a: T.reshape(a, (-1,)), "mean": lambda a: T.mean(a, axis=0),
        "getitem": lambda a: a[1:, ::2], "fancy": lambda a: a[[0, 0, 2]],
        "sum_keep": lambda a: T.sum(a, axis=1, keepdims=True),
        "masked": lambda a: T.masked_fill(a, np.array([True, False, True, True]), 0.0),
    }[name]


@pytest.mark.parametrize(
    "name",
    ["tanh", "sigmoid", "exp", "log", "neg", "transpose", "softmax", "reshape", "mean", "getitem", "fancy", "sum_keep", "masked"],
)
def test_every_unary_op_passes_grad_check(name):
    rng = np.random.default_rng(1)
    x = wide(rng.normal(size=(3, 4)))
    weights = Tensor(rng.normal(size=_unary(name)(Tensor(x.data)).shape))
    assert grad_check(lambda x: T.sum(_unary(name)(x) * weights), [x]) <= 1e-6


@pytest.mark.parametrize("op", ["add", "sub", "mul", "matmul", "concat", "stack"])
def test_every_binary_op_passes_grad_check(op):
    rng = np.random.default_rng(2)
    a = wide(rng.normal(size=(2, 3)))
    b = wide(rng.normal(size=(3, 3) if op == "matmul" else (1, 3)))
    fn = {
        "add": lambda a, b: a + b, "sub": lambda a, b: a - b, "mul": lambda a, b: a * b,
        "matmul": lambda a, b: a @ b, "concat": lambda a, b: T.concat([a, b], axis=0),
        "stack": lambda a, b: T.stack([a, a * b], axis=1),
    }[op]
    weights = Tensor(rng.normal(size=fn(Tensor(a.data), Tensor(b.data)).shape))
    assert grad_check(lambda a, b: T.sum(fn(a, b) * weights), [a, b]) <= 1e-6


def test_standard_precision_grad_check_within_1e4():
    rng = np.random.default_rng(4)
    x = Tensor(rng.normal(size=(2, 3)).astype(np.float32), requires_grad=True)
    w = Tensor(rng.normal(size=(3, 2)).astype(np.float32))
    assert grad_check(lambda x: T.sum(T.tanh(x @ w)), [x], epsilon=1e-3) <= 1e-4


def test_forward_is_deterministic():
    rng = np.random.default_rng(5)
    x = Tensor(rng.normal(size=(4, 4)))
    a = T.softmax(T.tanh(x @ x)).data
    b = T.softmax(T.tanh(x @ x)).data
    np.testing.assert_array_equal(a, b)


def test_precisions():
    assert T.dtype_for("standard") is np.float32
    assert T.dtype_for("wide") is np.float64
    with pytest.raises(ValueError):
        T.dtype_for("half")
