"""Dense tensor helpers shared by the quantizer, gating, and kernel modules.

Tensors are plain numpy arrays in row-major order: float32 for real-valued
data, int32 for integer bit-plane codes. Nothing here tries to be clever;
the value added over raw numpy is strict shape discipline (no silent
broadcasting between mismatched operands) and float64 accumulation for
real-valued reductions so results do not depend on numpy's pairwise
summation blocking.

Arrays are treated as immutable once handed to another module. The only
sanctioned in-place mutation is the optimizer updating parameter arrays it
owns exclusively.
"""

from __future__ import annotations

from typing import Callable, Sequence, Union

import numpy as np

REAL_DTYPE = np.float32
INT_DTYPE = np.int32

ArrayLike = Union[np.ndarray, Sequence, float, int]


class ShapeError(ValueError):
    """Raised when operand shapes do not line up."""


def tensor(data: ArrayLike, shape: tuple[int, ...] | None = None) -> np.ndarray:
    """Build a float32 array, optionally checking its shape.

    Non-finite input is rejected up front so NaNs cannot leak into the
    compute kernels, where they would be expensive to trace back.
    """
    arr = np.asarray(data, dtype=REAL_DTYPE)
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor data must be finite")
    if shape is not None and arr.shape != tuple(shape):
        raise ShapeError(f"expected shape {tuple(shape)}, got {arr.shape}")
    return arr


def int_tensor(data: ArrayLike, shape: tuple[int, ...] | None = None) -> np.ndarray:
    """Build an int32 array, rejecting values that would not round-trip."""
    arr = np.asarray(data)
    if arr.dtype.kind == "f":
        if not np.all(arr == np.floor(arr)):
            raise ValueError("int tensor data must be whole numbers")
    arr = arr.astype(np.int64)
    info = np.iinfo(INT_DTYPE)
    if arr.size and (arr.min() < info.min or arr.max() > info.max):
        raise ValueError("int tensor data out of int32 range")
    arr = arr.astype(INT_DTYPE)
    if shape is not None and arr.shape != tuple(shape):
        raise ShapeError(f"expected shape {tuple(shape)}, got {arr.shape}")
    return arr


def zeros(shape: tuple[int, ...], dtype=REAL_DTYPE) -> np.ndarray:
    return np.zeros(shape, dtype=dtype)


def require_shape(arr: np.ndarray, shape: tuple[int, ...], what: str = "tensor") -> None:
    if arr.shape != tuple(shape):
        raise ShapeError(f"{what}: expected shape {tuple(shape)}, got {arr.shape}")


def require_same_shape(a: np.ndarray, b: np.ndarray, what: str = "operands") -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes {a.shape} and {b.shape} do not match")


def require_ndim(arr: np.ndarray, ndim: int, what: str = "tensor") -> None:
    if arr.ndim != ndim:
        raise ShapeError(f"{what}: expected {ndim} dimensions, got {arr.ndim} (shape {arr.shape})")


_BINARY_OPS: dict[str, Callable[[np.ndarray, np.ndarray], np.ndarray]] = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
    "div": np.divide,
    "min": np.minimum,
    "max": np.maximum,
}


def elementwise(op: str | Callable, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Apply a binary op position by position.

    Shapes must match exactly; there is deliberately no broadcasting here.
    `op` is either a name from add/sub/mul/div/min/max or a callable taking
    the two arrays. Integer inputs stay integer (bit-exact), real inputs
    stay float32.
    """
    require_same_shape(a, b, "elementwise")
    if callable(op):
        fn = op
    else:
        try:
            fn = _BINARY_OPS[op]
        except KeyError:
            raise ValueError(f"unknown elementwise op {op!r}") from None
    out = fn(a, b)
    out = np.asarray(out)
    if a.dtype.kind in "iu" and b.dtype.kind in "iu":
        return out.astype(INT_DTYPE)
    return out.astype(REAL_DTYPE)


def reduce_tensor(op: str, a: np.ndarray, axis: int | tuple[int, ...] | None = None) -> np.ndarray:
    """Reduce along an axis (or fully, when axis is None).

    Real-valued sum and mean accumulate in float64 and cast back to
    float32 at the end, so the result matches a sequential scalar loop to
    within one ulp regardless of array size. Integer reductions are exact.
    """
    if axis is not None:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        for ax in axes:
            if not -a.ndim <= ax < a.ndim:
                raise ShapeError(f"reduce axis {ax} invalid for shape {a.shape}")
    if op == "sum":
        out = a.sum(axis=axis, dtype=np.float64 if a.dtype.kind == "f" else np.int64)
    elif op == "mean":
        if a.size == 0:
            raise ValueError("mean of empty tensor")
        out = a.mean(axis=axis, dtype=np.float64)
    elif op == "max":
        if a.size == 0:
            raise ValueError("max of empty tensor")
        out = a.max(axis=axis)
    else:
        raise ValueError(f"unknown reduction {op!r}")
    out = np.asarray(out)
    if a.dtype.kind in "iu" and op != "mean":
        return out.astype(np.int64)
    return out.astype(REAL_DTYPE)
