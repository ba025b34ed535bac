"""Dense N-order tensor arithmetic used by the deep CP model.

Tensors are stored as float64 numpy arrays in C (row-major) order, so the
last index varies fastest. Mode-n matricization and :func:`kron_complement`
share that convention, which is what makes

    <T, v1 (x) ... (x) vN> == <matricize(T, n) @ kron_complement(vs, n), vn>

hold for every mode n.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import reduce
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class DenseTensor:
    """An N-order real tensor with explicit shape metadata."""

    values: np.ndarray
    meta: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        arr = np.array(self.values, dtype=np.float64)
        if arr.ndim == 0:
            raise ValueError("a tensor needs at least one mode")
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor entries must be finite")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    @classmethod
    def from_flat(cls, shape: Sequence[int], flat: Sequence[float]) -> "DenseTensor":
        shape = tuple(int(d) for d in shape)
        flat = np.asarray(flat, dtype=np.float64)
        if any(d <= 0 for d in shape):
            raise ValueError(f"shape entries must be positive, got {shape}")
        if flat.size != int(np.prod(shape)):
            raise ValueError(f"{flat.size} values do not fill shape {shape}")
        return cls(flat.reshape(shape))

    @classmethod
    def zeros(cls, shape: Sequence[int]) -> "DenseTensor":
        return cls(np.zeros(tuple(shape)))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def order(self) -> int:
        return self.values.ndim

    @property
    def flat(self) -> np.ndarray:
        return self.values.reshape(-1)

    def __getitem__(self, index):
        return self.values[index]


@dataclass(frozen=True)
class SparseEntrySet:
    """A set of (index tuple, value) pairs over a fixed shape.

    ``indices`` is an ``(M, N)`` integer array, ``values`` has length M.
    Index tuples are unique and in range.
    """

    shape: tuple[int, ...]
    indices: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        shape = tuple(int(d) for d in self.shape)
        idx = np.asarray(self.indices, dtype=np.int64)
        vals = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if idx.size == 0:
            idx = idx.reshape(0, len(shape))
        if idx.ndim != 2 or idx.shape[1] != len(shape):
            raise ValueError(f"indices must have shape (M, {len(shape)}), got {idx.shape}")
        if idx.shape[0] != vals.shape[0]:
            raise ValueError("indices and values differ in length")
        if idx.size and (np.any(idx < 0) or np.any(idx >= np.array(shape))):
            bad = np.nonzero(np.any((idx < 0) | (idx >= np.array(shape)), axis=1))[0][0]
            raise ValueError(f"index {tuple(idx[bad])} out of range for shape {shape}")
        if len(np.unique(np.ravel_multi_index(idx.T, shape))) != len(idx):
            raise ValueError("duplicate index tuple in entry set")
        idx.setflags(write=False)
        vals.setflags(write=False)
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "values", vals)

    @classmethod
    def from_pairs(cls, shape, pairs) -> "SparseEntrySet":
        pairs = list(pairs)
        idx = [tuple(p[0]) for p in pairs]
        vals = [p[1] for p in pairs]
        return cls(tuple(shape), np.array(idx, dtype=np.int64).reshape(len(idx), len(shape)), vals)

    def __len__(self) -> int:
        return self.indices.shape[0]

    @property
    def linear_indices(self) -> np.ndarray:
        return np.ravel_multi_index(self.indices.T, self.shape)

    def with_values(self, values) -> "SparseEntrySet":
        return SparseEntrySet(self.shape, self.indices, values)


def outer_product(vectors: Sequence[Sequence[float]]) -> DenseTensor:
    """Outer product of one vector per mode."""
    if len(vectors) == 0:
        raise ValueError("outer_product needs at least one vector")
    vecs = [np.asarray(v, dtype=np.float64).reshape(-1) for v in vectors]
    if any(v.size == 0 for v in vecs):
        raise ValueError("outer_product vectors must be nonempty")
    out = reduce(np.multiply.outer, vecs)
    return DenseTensor(out)


def _as_array(t) -> np.ndarray:
    return t.values if isinstance(t, DenseTensor) else np.asarray(t, dtype=np.float64)


def inner_product(a: DenseTensor, b: DenseTensor) -> float:
    x, y = _as_array(a), _as_array(b)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    return float(np.dot(x.reshape(-1), y.reshape(-1)))


def frobenius_norm(t: DenseTensor) -> float:
    return float(np.sqrt(inner_product(t, t)))


def _check_mode(mode: int, order: int) -> int:
    if not (0 <= mode < order):
        raise ValueError(f"mode {mode} out of range for order {order}")
    return mode


def matricize(t: DenseTensor, mode: int) -> np.ndarray:
    """Mode-``mode`` unfolding, shape ``(d_mode, prod of the other dims)``.

    Columns enumerate the remaining indices with the last remaining mode
    varying fastest.
    """
    x = _as_array(t)
    _check_mode(mode, x.ndim)
    return np.moveaxis(x, mode, 0).reshape(x.shape[mode], -1)


def fold(matrix: np.ndarray, mode: int, shape: Sequence[int]) -> DenseTensor:
    """Inverse of :func:`matricize`."""
    shape = tuple(shape)
    _check_mode(mode, len(shape))
    rest = shape[:mode] + shape[mode + 1:]
    arr = np.asarray(matrix, dtype=np.float64).reshape((shape[mode],) + rest)
    return DenseTensor(np.moveaxis(arr, 0, mode))


def kron_complement(vectors: Sequence[Sequence[float]], skip_mode: int) -> np.ndarray:
    """Kronecker product of all vectors except ``vectors[skip_mode]``, left to right."""
    _check_mode(skip_mode, len(vectors))
    rest = [np.asarray(v, dtype=np.float64).reshape(-1) for i, v in enumerate(vectors) if i != skip_mode]
    return reduce(np.kron, rest, np.ones(1))


def scatter_to_dense(s: SparseEntrySet) -> DenseTensor:
    out = np.zeros(s.shape)
    if len(s):
        out[tuple(s.indices.T)] = s.values
    return DenseTensor(out)


def gather(t: DenseTensor, indices: np.ndarray) -> np.ndarray:
    """Entries of ``t`` at the rows of an ``(M, N)`` index array."""
    idx = np.asarray(indices, dtype=np.int64)
    return _as_array(t)[tuple(idx.T)]


def dense_to_sparse(t: DenseTensor) -> SparseEntrySet:
    """Full-coverage entry set listing every entry of ``t``."""
    x = _as_array(t)
    idx = np.array(np.unravel_index(np.arange(x.size), x.shape)).T
    return SparseEntrySet(x.shape, idx, x.reshape(-1))
