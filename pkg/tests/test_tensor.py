"""Core tensor ops: forward oracles, gradient checks, RNG streams, serialization."""
import io
import math

import numpy as np
import pytest

from alignkit import tensor as T
from alignkit.tensor import (
    ContractError,
    DegenerateRowError,
    NumericError,
    RngStream,
    ShapeError,
    Tensor,
    grad_check,
)


def matmul_loops(a, b):
    """Element-by-element triple-loop reference product."""
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for l in range(k):
                s += a[i, l] * b[l, j]
            out[i, j] = s
    return out


class TestMatmul:
    def test_identity(self):
        a = Tensor([[1.0, 0.0], [0.0, 1.0]])
        b = Tensor([[2.0, 3.0], [4.0, 5.0]])
        np.testing.assert_array_equal(T.matmul(a, b).data, b.data)

    def test_hand_arithmetic(self):
        out = T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
        np.testing.assert_array_equal(out.data, [[11.0]])

    def test_against_triple_loop(self):
        rng = np.random.default_rng(7)
        a = rng.normal(size=(8, 8))
        b = rng.normal(size=(8, 8))
        got = T.matmul(Tensor(a), Tensor(b)).data
        np.testing.assert_allclose(got, matmul_loops(a, b), atol=1e-12)

    def test_shape_mismatch_reports_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_gradients(self):
        rng = np.random.default_rng(3)
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(4, 2))
        assert grad_check(lambda x: T.tsum(T.matmul(x, Tensor(b))), Tensor(a)) < 1e-8
        assert grad_check(lambda x: T.tsum(T.matmul(Tensor(a), x)), Tensor(b)) < 1e-8


class TestSoftmaxRows:
    def test_symmetry(self):
        out = T.softmax_rows(Tensor([[0.0, 0.0]]))
        np.testing.assert_allclose(out.data, [[0.5, 0.5]], atol=1e-12)

    def test_closed_form(self):
        out = T.softmax_rows(Tensor([[1.0, 0.0]]))
        e = math.e
        np.testing.assert_allclose(out.data, [[e / (e + 1), 1 / (e + 1)]], atol=1e-9)
        np.testing.assert_allclose(out.data, [[0.73106, 0.26894]], atol=1e-5)

    def test_stability(self):
        out = T.softmax_rows(Tensor([[1000.0, 0.0]])).data
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out, [[1.0, 0.0]], atol=1e-12)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(11)
        x = rng.normal(scale=20, size=(50, 7))
        out = T.softmax_rows(Tensor(x)).data
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-9)

    def test_shift_invariance(self):
        rng = np.random.default_rng(12)
        x = rng.normal(size=(4, 5))
        shifted = x + rng.normal(size=(4, 1))
        np.testing.assert_allclose(T.softmax_rows(Tensor(x)).data,
                                   T.softmax_rows(Tensor(shifted)).data, atol=1e-9)

    def test_nan_input(self):
        with pytest.raises(NumericError):
            T.softmax_rows(Tensor([[np.nan, 0.0]]))


class TestL2NormalizeRows:
    def test_hand_arithmetic(self):
        out = T.l2_normalize_rows(Tensor([[3.0, 4.0]]))
        np.testing.assert_allclose(out.data, [[0.6, 0.8]], atol=1e-12)

    def test_idempotent_on_unit_rows(self):
        v = np.array([[1.0 / math.sqrt(2), 1.0 / math.sqrt(2)]])
        np.testing.assert_allclose(T.l2_normalize_rows(Tensor(v)).data, v, atol=1e-12)

    def test_degenerate_row(self):
        with pytest.raises(DegenerateRowError, match="row 1"):
            T.l2_normalize_rows(Tensor([[1.0, 0.0], [0.0, 0.0]]))


class TestGradCheck:
    def test_quadratic(self):
        x = Tensor([1.0, 2.0])
        err = grad_check(lambda t: T.tsum(T.mul(t, t)), x, eps=1e-5)
        assert err < 1e-8

    def test_quadratic_analytic_value(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        T.tsum(T.mul(x, x)).backward()
        np.testing.assert_allclose(x.grad, [2.0, 4.0], atol=1e-12)

    def test_softmax_dot_fixed_vector(self):
        rng = np.random.default_rng(5)
        c = Tensor(rng.normal(size=(1, 6)))
        x = Tensor(rng.normal(size=(1, 6)))
        err = grad_check(lambda t: T.tsum(T.mul(T.softmax_rows(t), c)), x)
        assert err < 1e-6

    def test_constant_function(self):
        err = grad_check(lambda t: T.tsum(T.mul(t, 0.0)), Tensor([1.0, 2.0, 3.0]))
        assert err < 1e-10

    def test_non_scalar_rejected(self):
        with pytest.raises(ContractError):
            grad_check(lambda t: t, Tensor([1.0, 2.0]))


def _op_cases():
    rng = RngStream(99, 0)
    fixed = np.random.default_rng(17)
    b2 = fixed.normal(size=(4, 5))
    b1 = fixed.normal(size=(4, 5))
    cases = {
        "add": lambda x: T.tsum(T.add(x, Tensor(b1))),
        "sub": lambda x: T.tsum(T.sub(Tensor(b1), x)),
        "mul": lambda x: T.tsum(T.mul(x, Tensor(b1))),
        "div": lambda x: T.tsum(T.div(x, Tensor(np.abs(b1) + 1.0))),
        "scalar_mul": lambda x: T.tsum(T.mul(x, 2.5)),
        "row_broadcast": lambda x: T.tsum(T.mul(T.add(x, Tensor(b1[:1])), Tensor(b2))),
        "transpose": lambda x: T.tsum(T.mul(T.transpose(x), Tensor(b2.T))),
        "matmul": lambda x: T.tsum(T.matmul(x, Tensor(b2.T))),
        "exp": lambda x: T.tsum(T.exp(x)),
        "log": lambda x: T.tsum(T.log(T.add(T.mul(x, x), 1.0))),
        "sqrt": lambda x: T.tsum(T.sqrt(T.add(T.mul(x, x), 1.0))),
        "tanh": lambda x: T.tsum(T.tanh(x)),
        "sigmoid": lambda x: T.tsum(T.sigmoid(x)),
        "softmax_rows": lambda x: T.tsum(T.mul(T.softmax_rows(x), Tensor(b1))),
        "log_softmax_rows": lambda x: T.tsum(T.mul(T.log_softmax_rows(x), Tensor(b1))),
        "l2_normalize_rows": lambda x: T.tsum(T.mul(T.l2_normalize_rows(T.add(x, 3.0)), Tensor(b1))),
        "sum_axis0": lambda x: T.tsum(T.mul(T.tsum(x, axis=0, keepdims=True), Tensor(b1[:1]))),
        "mean_axis1": lambda x: T.tsum(T.mul(T.tmean(x, axis=1, keepdims=True), Tensor(b1[:, :1]))),
        "mean_all": lambda x: T.tmean(x),
        "concat_rows": lambda x: T.tsum(T.mul(T.concat([x, Tensor(b1)], axis=0), 1.5)),
        "concat_cols": lambda x: T.tsum(T.mul(T.concat([x, Tensor(b1)], axis=1),
                                              Tensor(np.concatenate([b2, b2], axis=1) + 0.5))),
        "narrow_rows": lambda x: T.tsum(T.mul(T.slice_rows(x, 1, 3), Tensor(b1[1:3]))),
        "narrow_cols": lambda x: T.tsum(T.mul(T.slice_cols(x, 2, 4), Tensor(b1[:, 2:4]))),
        "dropout": lambda x: T.tsum(T.dropout(x, 0.3, RngStream(1234, 5))),
    }
    return cases, rng


@pytest.mark.parametrize("name", sorted(_op_cases()[0]))
def test_every_op_passes_grad_check(name):
    """Each differentiable op: 10 random double-precision inputs, error < 1e-5."""
    cases, rng = _op_cases()
    f = cases[name]
    for trial in range(10):
        x = Tensor(rng.substream(trial).normal(size=(4, 5)))
        assert grad_check(f, x) < 1e-5, f"{name} trial {trial}"


class TestDeterminismAndPurity:
    def test_ops_do_not_mutate_inputs(self):
        rng = np.random.default_rng(2)
        a = rng.normal(size=(3, 3))
        t = Tensor(a.copy())
        T.matmul(t, t)
        T.softmax_rows(t)
        T.l2_normalize_rows(t)
        T.add(t, 1.0)
        np.testing.assert_array_equal(t.data, a)

    def test_bit_identical_reruns(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(6, 6))
        first = T.softmax_rows(T.matmul(Tensor(x), Tensor(x))).data
        second = T.softmax_rows(T.matmul(Tensor(x), Tensor(x))).data
        assert np.array_equal(first, second)

    def test_backward_populates_contributing_grads(self):
        a = Tensor(np.ones((2, 2)), requires_grad=True)
        b = Tensor(np.ones((2, 2)), requires_grad=True)
        c = Tensor(np.ones((2, 2)))  # no grad requested
        out = T.tsum(T.matmul(a, T.add(b, c)))
        out.backward()
        assert a.grad is not None and b.grad is not None and c.grad is None


class TestRngStream:
    def test_reproducible(self):
        a = RngStream(42, 7).normal(size=5)
        b = RngStream(42, 7).normal(size=5)
        np.testing.assert_array_equal(a, b)

    def test_streams_differ(self):
        a = RngStream(42, 7).normal(size=5)
        b = RngStream(42, 8).normal(size=5)
        assert not np.allclose(a, b)

    def test_substream_deterministic(self):
        a = RngStream(1, 2).substream(3).uniform(size=4)
        b = RngStream(1, 2).substream(3).uniform(size=4)
        np.testing.assert_array_equal(a, b)

    def test_choice_p_respects_weights(self):
        rng = RngStream(0, 0)
        counts = np.zeros(3)
        for _ in range(6000):
            counts[rng.choice_p(np.array([0.0, 0.75, 0.25]))] += 1
        assert counts[0] == 0
        assert abs(counts[1] / 6000 - 0.75) < 0.03


class TestSerialization:
    def test_roundtrip_double(self):
        rng = np.random.default_rng(8)
        arr = rng.normal(size=(3, 4, 2))
        buf = io.BytesIO()
        T.write_tensor(buf, arr)
        buf.seek(0)
        np.testing.assert_array_equal(T.read_tensor(buf), arr)

    def test_roundtrip_single(self):
        arr = np.random.default_rng(9).normal(size=(5,)).astype(np.float32)
        buf = io.BytesIO()
        T.write_tensor(buf, arr)
        buf.seek(0)
        out = T.read_tensor(buf)
        assert out.dtype == np.float32
        np.testing.assert_array_equal(out, arr)

    def test_header_layout(self):
        buf = io.BytesIO()
        T.write_tensor(buf, np.zeros((2, 3)))
        raw = buf.getvalue()
        # rank=2, dims 2 and 3, width 8, all u64 little-endian
        assert raw[:32] == (2).to_bytes(8, "little") + (2).to_bytes(8, "little") \
            + (3).to_bytes(8, "little") + (8).to_bytes(8, "little")
        assert len(raw) == 32 + 6 * 8
