"""Dense float64 tensor primitives.

Tensors are plain ``numpy.ndarray`` objects in float64, C-contiguous. The
functions here add the shape checks and error semantics the rest of the
package relies on; layers use numpy directly where no check is needed.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import DimensionError, DomainError

Tensor = np.ndarray

_BINARY = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
}


def as_tensor(x) -> Tensor:
    """Return a fresh C-contiguous float64 copy of ``x``."""
    return np.array(x, dtype=np.float64, order="C", copy=True)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return np.ascontiguousarray(a @ b)


def elementwise(op: str, a: Tensor, b=None) -> Tensor:
    """Pointwise ``add``, ``sub``, ``mul``, ``scale``, ``exp`` or ``neg``.

    For the binary ops ``b`` is a tensor of the same shape, a scalar, or a
    vector matching the trailing (channel) axis of ``a``.
    """
    a = np.asarray(a, dtype=np.float64)
    if op == "exp":
        return np.exp(a)
    if op == "neg":
        return -a
    if op == "scale":
        if not np.isscalar(b):
            raise DimensionError("scale: factor must be a scalar")
        return a * float(b)
    if op not in _BINARY:
        raise DomainError(f"elementwise: unknown op {op!r}")
    if np.isscalar(b):
        return _BINARY[op](a, float(b))
    b = np.asarray(b, dtype=np.float64)
    if b.shape != a.shape and not (b.ndim == 1 and a.ndim >= 1 and b.shape[0] == a.shape[-1]):
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not match")
    return _BINARY[op](a, b)


def reduce(op: str, a: Tensor, axis: int) -> Tensor:
    """Reduce along ``axis``; argmax breaks ties toward the lowest index."""
    a = np.asarray(a, dtype=np.float64)
    if not -a.ndim <= axis < a.ndim:
        raise DimensionError(f"reduce: axis {axis} invalid for shape {a.shape}")
    if a.shape[axis] == 0:
        raise DomainError(f"reduce: {op} over empty axis {axis}")
    if op == "sum":
        return np.sum(a, axis=axis)
    if op == "mean":
        return np.mean(a, axis=axis)
    if op == "max":
        return np.max(a, axis=axis)
    if op == "argmax":
        return np.argmax(a, axis=axis)  # numpy returns the first occurrence
    raise DomainError(f"reduce: unknown op {op!r}")


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    arrays = [np.asarray(t, dtype=np.float64) for t in tensors]
    if not arrays:
        raise DimensionError("concat: no tensors given")
    ref = arrays[0]
    for t in arrays[1:]:
        if t.ndim != ref.ndim:
            raise DimensionError(f"concat: rank mismatch {ref.shape} vs {t.shape}")
        for d in range(ref.ndim):
            if d != axis % ref.ndim and t.shape[d] != ref.shape[d]:
                raise DimensionError(f"concat: off-axis mismatch {ref.shape} vs {t.shape} on axis {axis}")
    return np.concatenate(arrays, axis=axis)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    a = np.asarray(a, dtype=np.float64)
    if int(np.prod(shape)) != a.size:
        raise DimensionError(f"reshape: cannot view {a.shape} as {tuple(shape)}")
    return np.array(a.reshape(shape), copy=True)
