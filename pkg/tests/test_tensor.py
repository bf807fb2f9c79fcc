import zlib

import numpy as np
import pytest
from hypothesis import given, strategies as st

from draftlab import tensor as T
from draftlab.errors import DimensionError, InvalidMaskError, RankError, SequenceTooShortError
from draftlab.gradcheck import finite_difference_check
from draftlab.params import Group, ParamStore
from draftlab.tensor import Tensor, double_precision


def test_matmul_examples():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal((a @ Tensor(np.eye(2))).data, a.data)
    np.testing.assert_array_equal((a @ Tensor([[5.0], [6.0]])).data, [[17.0], [39.0]])
    assert not (Tensor(np.zeros((2, 2))) @ Tensor(np.random.rand(2, 3))).data.any()


def test_matmul_shape_error_names_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_layer_norm_examples():
    one, zero = Tensor(np.ones(4)), Tensor(np.zeros(4))
    assert not T.layer_norm(Tensor(np.full((1, 4), 7.0)), one, zero).data.any()
    out = T.layer_norm(Tensor([[1.0, -1.0]]), Tensor([1.0, 1.0]), Tensor([0.0, 0.0]), eps=1e-12)
    np.testing.assert_allclose(out.data, [[1.0, -1.0]], atol=1e-6)
    bias = Tensor([0.5, -2.0, 3.0, 1.0])
    out = T.layer_norm(Tensor(np.random.rand(3, 4)), Tensor(np.zeros(4)), bias)
    np.testing.assert_array_equal(out.data, np.broadcast_to(bias.data, (3, 4)))
    with pytest.raises(DimensionError):
        T.layer_norm(Tensor(np.ones((2, 3))), one, zero)


def test_masked_softmax_examples():
    p = T.masked_softmax(Tensor(np.zeros((4, 4))), np.ones((4, 4), bool))
    np.testing.assert_allclose(p.data, 0.25)
    causal = np.tril(np.ones((3, 3), bool))
    p = T.masked_softmax(Tensor(np.random.rand(3, 3)), causal)
    assert p.data[0, 0] == 1.0 and (p.data[0, 1:] == 0).all()
    p = T.masked_softmax(Tensor([[0.0, np.log(3.0)]]), np.ones((1, 2), bool))
    np.testing.assert_allclose(p.data, [[0.25, 0.75]], rtol=1e-6)
    with pytest.raises(InvalidMaskError):
        T.masked_softmax(Tensor(np.zeros((2, 2))), np.array([[True, False], [False, False]]))


@given(st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_masked_softmax_rows_sum_to_one(t, seed):
    r = np.random.default_rng(seed)
    mask = r.random((t, t)) < 0.6
    mask[np.arange(t), r.integers(0, t, t)] = True
    p = T.masked_softmax(Tensor(r.normal(0, 3, (t, t))), mask).data
    np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-6)
    assert (p[~mask] == 0).all()


def test_conv1d_examples():
    x = Tensor(np.random.rand(5, 3))
    ident = Tensor(np.eye(3)[None])
    np.testing.assert_array_equal(T.conv1d(x, ident, 1, Tensor(np.zeros(3))).data, x.data)
    assert T.conv1d_length(8, 3, 2) == 3
    assert T.conv1d(Tensor(np.ones((8, 2))), Tensor(np.ones((3, 2, 4))), 2).shape == (3, 4)
    bias = Tensor([1.0, 2.0])
    out = T.conv1d(Tensor(np.random.rand(6, 3)), Tensor(np.zeros((3, 3, 2))), 2, bias)
    np.testing.assert_array_equal(out.data, np.broadcast_to(bias.data, out.shape))
    with pytest.raises(SequenceTooShortError):
        T.conv1d(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 3, 1))), 1)


def test_conv1d_matches_direct_loop(rng):
    x, k, b = rng.normal(size=(11, 3)), rng.normal(size=(3, 3, 2)), rng.normal(size=2)
    out = T.conv1d(Tensor(x), Tensor(k), 2, Tensor(b)).data
    ref = np.array([sum(x[2 * t + j] @ k[j] for j in range(3)) + b for t in range(5)])
    np.testing.assert_allclose(out, ref, rtol=1e-5, atol=1e-5)


def test_backward_examples():
    p = Tensor(np.random.rand(3, 2), requires_grad=True)
    p.sum().backward()
    np.testing.assert_array_equal(p.grad, np.ones((3, 2)))
    q = Tensor([3.0], requires_grad=True)
    (q * q).sum().backward()
    np.testing.assert_array_equal(q.grad, [6.0])
    with pytest.raises(RankError):
        (Tensor([1.0, 2.0], requires_grad=True) * 2.0).backward()


def test_gradients_accumulate_until_cleared():
    q = Tensor([1.0, 2.0], requires_grad=True)
    (q * 2.0).sum().backward()
    (q * 2.0).sum().backward()
    np.testing.assert_array_equal(q.grad, [4.0, 4.0])
    q.zero_grad()
    assert q.grad is None or not q.grad.any()


def test_frozen_leaf_gets_no_gradient():
    s = ParamStore()
    a = s.add("a", np.ones(3), Group.BACKBONE, trainable=False)
    b = s.add("b", np.ones(3), Group.ADAPTER)
    (a * b).sum().backward()
    assert a.grad is None and b.grad is not None


def test_deterministic_graph(rng):
    x = rng.normal(size=(4, 5))

    def run():
        w = Tensor(np.arange(15.0).reshape(5, 3) / 10, requires_grad=True)
        loss = T.log_softmax(Tensor(x) @ w).mean()
        loss.backward()
        return loss.data.tobytes(), w.grad.tobytes()

    assert run() == run()


# -- gradient checks for every registered op (double-precision mode, tol 1e-6) ----------
def _op_cases(r):
    pos = lambda *s: np.abs(r.normal(size=s)) + 0.5  # noqa: E731
    return {
        "add": (lambda a, b: (a + b) * a, [(3, 4), (4,)]),
        "sub": (lambda a, b: (a - b) * a, [(3, 4), (3, 1)]),
        "mul": (lambda a, b: a * b, [(2, 3), (2, 3)]),
        "div": (lambda a, b: a / b, [(2, 3), pos(2, 3)]),
        "neg": (lambda a: -a * a, [(5,)]),
        "exp": (lambda a: T.exp(a), [(4,)]),
        "log": (lambda a: T.log(a), [pos(4)]),
        "sqrt": (lambda a: T.sqrt(a), [pos(4)]),
        "tanh": (lambda a: T.tanh(a), [(4,)]),
        "relu": (lambda a: T.relu(a), [(6,)]),
        "absolute": (lambda a: T.absolute(a), [(6,)]),
        "where": (lambda a, b: T.where(np.array([True, False, True]), a, b) * a, [(3,), (3,)]),
        "sum": (lambda a: T.tsum(a * a, axis=0), [(3, 2)]),
        "mean": (lambda a: T.mean(a * a, axis=1, keepdims=True), [(3, 2)]),
        "reshape": (lambda a: T.reshape(a, (3, 2)) * Tensor(np.arange(6.0).reshape(3, 2)), [(2, 3)]),
        "transpose": (lambda a: T.transpose(a, (1, 0)) * Tensor(np.arange(6.0).reshape(3, 2)), [(2, 3)]),
        "getitem": (lambda a: a[np.array([0, 2, 2]), 1:] * 3.0, [(4, 3)]),
        "concat": (lambda a, b: T.concat([a, b], axis=1) * Tensor(np.arange(10.0).reshape(2, 5)), [(2, 2), (2, 3)]),
        "stack": (lambda a, b: T.stack([a, b], axis=0) * Tensor(np.arange(6.0).reshape(2, 3)), [(3,), (3,)]),
        "matmul": (lambda a, b: a @ b, [(2, 3), (3, 4)]),
        "matmul_batched": (lambda a, b: a @ b, [(2, 3, 4), (2, 4, 2)]),
        "linear": (lambda a, b, c: T.linear(a, b, c), [(2, 3), (3, 2), (2,)]),
        "layer_norm": (lambda a, b, c: T.layer_norm(a, b, c) * Tensor(np.arange(8.0).reshape(2, 4)),
                       [(2, 4), (4,), (4,)]),
        "masked_softmax": (lambda a: T.masked_softmax(a, np.tril(np.ones((3, 3), bool)))
                           * Tensor(np.arange(9.0).reshape(3, 3)), [(3, 3)]),
        "softmax": (lambda a: T.softmax(a) * Tensor(np.arange(4.0)), [(2, 4)]),
        "log_softmax": (lambda a: T.log_softmax(a) * Tensor(np.arange(4.0)), [(2, 4)]),
        "l2_normalize": (lambda a: T.l2_normalize(a) * Tensor(np.arange(3.0)), [(2, 3)]),
        "conv1d": (lambda a, b, c: T.conv1d(a, b, 2, c), [(2, 7, 3), (3, 3, 2), (2,)]),
    }


def _check_op(name, precision, tol):
    r = np.random.default_rng(zlib.crc32(name.encode()))
    fn, shapes = _op_cases(r)[name]
    arrays = [s if isinstance(s, np.ndarray) else r.normal(size=s) for s in shapes]
    if name in ("relu", "absolute"):  # keep clear of the kink
        arrays = [np.sign(a) * (np.abs(a) + 0.1) for a in arrays]
    reports = []
    with precision():
        store = ParamStore()
        for i, a in enumerate(arrays):
            store.add(f"x{i}", a, Group.BACKBONE)
        f = lambda s: (fn(*[s[f"x{i}"] for i in range(len(arrays))]) * 1.0).sum()  # noqa: E731
        for i in range(len(arrays)):
            reports.append(finite_difference_check(f, store, f"x{i}", tol=tol, n_coords=30))
    return reports


OPS = sorted(_op_cases(np.random.default_rng(0)))


@pytest.mark.parametrize("name", OPS)
def test_op_gradients_double(name):
    for rep in _check_op(name, double_precision, 1e-6):
        assert rep.passed, rep


@pytest.mark.parametrize("name", OPS)
def test_op_gradients_single(name):
    import contextlib
    for rep in _check_op(name, contextlib.nullcontext, 1e-3):
        assert rep.passed, rep


def test_getitem_repeated_index_accumulates():
    a = Tensor(np.zeros(3), requires_grad=True)
    a[np.array([1, 1, 2])].sum().backward()
    np.testing.assert_array_equal(a.grad, [0.0, 2.0, 1.0])
