"""Tensor helpers against naive scalar-loop references."""

import numpy as np
import pytest

from pgate.tensor import (
    INT_DTYPE,
    REAL_DTYPE,
    ShapeError,
    elementwise,
    int_tensor,
    reduce_tensor,
    require_same_shape,
    require_shape,
    tensor,
)


def scalar_elementwise(op, a, b):
    out = np.empty(a.shape, dtype=np.float64 if a.dtype.kind == "f" else np.int64)
    fns = {"add": lambda x, y: x + y, "sub": lambda x, y: x - y,
           "mul": lambda x, y: x * y, "div": lambda x, y: x / y,
           "min": min, "max": max}
    flat_a, flat_b, flat_o = a.ravel(), b.ravel(), out.ravel()
    for i in range(flat_a.size):
        flat_o[i] = fns[op](flat_a[i].item(), flat_b[i].item())
    return out.reshape(a.shape)


def scalar_reduce_sum(a, axis):
    # sequential float64 accumulation in index order
    moved = np.moveaxis(a, axis, -1)
    out = np.zeros(moved.shape[:-1], dtype=np.float64)
    flat = moved.reshape(-1, moved.shape[-1])
    of = out.ravel()
    for i in range(flat.shape[0]):
        acc = 0.0
        for j in range(flat.shape[1]):
            acc += float(flat[i, j])
        of[i] = acc
    return out


class TestConstructors:
    def test_tensor_dtype_and_shape(self):
        t = tensor([[1, 2], [3, 4]], shape=(2, 2))
        assert t.dtype == REAL_DTYPE and t.shape == (2, 2)

    def test_tensor_shape_mismatch(self):
        with pytest.raises(ShapeError):
            tensor([1.0, 2.0], shape=(3,))

    def test_tensor_rejects_non_finite(self):
        with pytest.raises(ValueError):
            tensor([1.0, np.nan])
        with pytest.raises(ValueError):
            tensor([np.inf])

    def test_int_tensor_exact(self):
        t = int_tensor([1, 2, 3])
        assert t.dtype == INT_DTYPE
        assert np.array_equal(t, [1, 2, 3])

    def test_int_tensor_rejects_fractions(self):
        with pytest.raises(ValueError):
            int_tensor([1.5])

    def test_int_tensor_rejects_overflow(self):
        with pytest.raises(ValueError):
            int_tensor([2 ** 40])

    def test_shape_guards(self):
        a = np.zeros((2, 3), dtype=REAL_DTYPE)
        require_shape(a, (2, 3))
        with pytest.raises(ShapeError):
            require_shape(a, (3, 2))
        with pytest.raises(ShapeError):
            require_same_shape(a, np.zeros((2, 4), dtype=REAL_DTYPE))


class TestElementwise:
    @pytest.mark.parametrize("op", ["add", "sub", "mul", "div", "min", "max"])
    def test_real_ops_match_scalar_loop(self, op):
        rng = np.random.default_rng(7)
        a = tensor(rng.uniform(-4, 4, size=(5, 7)))
        b = tensor(rng.uniform(0.5, 4, size=(5, 7)))
        got = elementwise(op, a, b)
        want = scalar_elementwise(op, a, b).astype(REAL_DTYPE)
        np.testing.assert_allclose(got, want, rtol=1e-6)

    @pytest.mark.parametrize("op", ["add", "sub", "mul", "min", "max"])
    def test_integer_ops_bit_exact(self, op):
        rng = np.random.default_rng(8)
        a = int_tensor(rng.integers(-50, 50, size=(4, 6)))
        b = int_tensor(rng.integers(1, 50, size=(4, 6)))
        got = elementwise(op, a, b)
        want = scalar_elementwise(op, a, b)
        assert got.dtype == INT_DTYPE
        assert np.array_equal(got, want)

    def test_callable_op(self):
        a = tensor([1.0, 2.0])
        b = tensor([3.0, 4.0])
        got = elementwise(lambda x, y: x * 2 + y, a, b)
        np.testing.assert_allclose(got, [5.0, 8.0])

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2,\).*\(3,\)"):
            elementwise("add", tensor([1.0, 2.0]), tensor([1.0, 2.0, 3.0]))

    def test_unknown_op(self):
        with pytest.raises(ValueError, match="unknown elementwise op"):
            elementwise("pow", tensor([1.0]), tensor([2.0]))


class TestReduce:
    def test_sum_example(self):
        got = reduce_tensor("sum", tensor([[1, 2], [3, 4]]), axis=0)
        np.testing.assert_array_equal(got, [4.0, 6.0])

    def test_mean_of_constant(self):
        got = reduce_tensor("mean", tensor(np.full((3, 5), 2.5)))
        assert got == REAL_DTYPE(2.5)

    def test_sum_within_one_ulp_of_scalar_loop(self):
        rng = np.random.default_rng(9)
        a = tensor(rng.uniform(-1, 1, size=(11, 203)))
        got = reduce_tensor("sum", a, axis=1)
        want = scalar_reduce_sum(a, 1).astype(REAL_DTYPE)
        assert np.all(np.abs(got - want) <= np.spacing(np.abs(want)))

    def test_full_sum_large(self):
        rng = np.random.default_rng(10)
        a = tensor(rng.uniform(-1, 1, size=(4000,)))
        got = reduce_tensor("sum", a)
        want = REAL_DTYPE(scalar_reduce_sum(a[None, :], 1)[0])
        assert abs(float(got) - float(want)) <= float(np.spacing(abs(want)))

    def test_max_matches_scalar_scan(self):
        rng = np.random.default_rng(11)
        a = tensor(rng.uniform(-5, 5, size=(6, 9)))
        got = reduce_tensor("max", a, axis=0)
        flat = a
        want = np.empty(9, dtype=REAL_DTYPE)
        for j in range(9):
            best = flat[0, j]
            for i in range(1, 6):
                if flat[i, j] > best:
                    best = flat[i, j]
            want[j] = best
        assert np.array_equal(got, want)

    def test_integer_sum_exact(self):
        a = int_tensor(np.arange(100).reshape(10, 10))
        got = reduce_tensor("sum", a)
        assert got == 4950

    def test_invalid_axis(self):
        with pytest.raises(ShapeError):
            reduce_tensor("sum", tensor([[1.0]]), axis=5)

    def test_unknown_reduction(self):
        with pytest.raises(ValueError):
            reduce_tensor("median", tensor([1.0]))

    def test_empty_mean_rejected(self):
        with pytest.raises(ValueError):
            reduce_tensor("mean", tensor(np.zeros((0,))))
