"""Overparameterized deep CP factorization.

Block r of the reconstruction is the outer product over modes n of

    b[r, n] = A[n][r, 0] @ A[n][r, 1] @ ... @ A[n][r, k_n - 1] @ w[n][r]

so the innermost matrix (highest index) touches the weight vector first.
With every depth at zero the model is the plain CP sum of outer products.

Parameters are stored per mode so that the R blocks can be processed as a
batch: ``w[n]`` has shape ``(R, d_n)`` and ``A[n]`` has shape
``(R, k_n, d_n, d_n)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from .tensor_core import DenseTensor

CHECKPOINT_MAGIC = "DEEPCP/1"


@dataclass(frozen=True)
class GaussianIID:
    """Every entry of w drawn from N(0, sigma_w^2), every entry of A from N(0, sigma_A^2)."""

    sigma_w: float
    sigma_A: float

    def __post_init__(self):
        _require_positive(sigma_w=self.sigma_w, sigma_A=self.sigma_A)


@dataclass(frozen=True)
class DiagonalBoosted:
    """Like :class:`GaussianIID` but matrix diagonals are set to ``diag_scale``."""

    sigma_w: float
    sigma_A: float
    diag_scale: float = 1.0

    def __post_init__(self):
        _require_positive(sigma_w=self.sigma_w, sigma_A=self.sigma_A, diag_scale=self.diag_scale)


@dataclass(frozen=True)
class BalancedRankOne:
    """Rank-one chain A_i = rho * z_{i-1} z_i^T and w = rho * (unit vector).

    Every parameter then has norm rho, so the unbalancedness is exactly zero,
    and A_i^T A_i = A_{i+1} A_{i+1}^T = rho^2 z_i z_i^T.
    """

    rho: float

    def __post_init__(self):
        _require_positive(rho=self.rho)


InitScheme = Union[GaussianIID, DiagonalBoosted, BalancedRankOne]


def _require_positive(**params):
    for name, value in params.items():
        if not (np.isfinite(value) and value > 0):
            raise ValueError(f"{name} must be a positive number, got {value!r}")


@dataclass
class DeepCPFactorization:
    dims: tuple[int, ...]
    depths: tuple[int, ...]
    w: list[np.ndarray]
    A: list[np.ndarray]

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.depths = tuple(int(k) for k in self.depths)
        if len(self.dims) != len(self.depths):
            raise ValueError("dims and depths must have one entry per mode")
        if any(k < 0 for k in self.depths):
            raise ValueError("depths must be nonnegative")
        R = self.w[0].shape[0]
        for n, (d, k) in enumerate(zip(self.dims, self.depths)):
            if self.w[n].shape != (R, d):
                raise ValueError(f"w[{n}] has shape {self.w[n].shape}, expected {(R, d)}")
            if self.A[n].shape != (R, k, d, d):
                raise ValueError(f"A[{n}] has shape {self.A[n].shape}, expected {(R, k, d, d)}")

    @property
    def order(self) -> int:
        return len(self.dims)

    @property
    def num_blocks(self) -> int:
        return self.w[0].shape[0]

    def copy(self) -> "DeepCPFactorization":
        return DeepCPFactorization(self.dims, self.depths,
                                   [x.copy() for x in self.w], [x.copy() for x in self.A])

    def astype(self, dtype) -> "DeepCPFactorization":
        """Copy with every parameter array converted to ``dtype``."""
        return DeepCPFactorization(self.dims, self.depths, [x.astype(dtype) for x in self.w],
                                   [x.astype(dtype) for x in self.A])

    def parameters(self):
        """Yield ``(kind, mode, array)`` for every parameter array, in storage order."""
        for n in range(self.order):
            yield "w", n, self.w[n]
        for n in range(self.order):
            yield "A", n, self.A[n]

    def num_parameters(self) -> int:
        return sum(arr.size for _, _, arr in self.parameters())

    def _check_block(self, r: int, n: int | None = None):
        if not (0 <= r < self.num_blocks):
            raise IndexError(f"block {r} out of range [0, {self.num_blocks})")
        if n is not None and not (0 <= n < self.order):
            raise IndexError(f"mode {n} out of range [0, {self.order})")


def init_model(scheme: InitScheme, dims: Sequence[int], num_blocks: int,
               depths: Sequence[int], seed: int) -> DeepCPFactorization:
    dims = tuple(int(d) for d in dims)
    depths = tuple(int(k) for k in depths)
    if num_blocks < 1:
        raise ValueError("num_blocks must be at least 1")
    if len(dims) != len(depths):
        raise ValueError("dims and depths must have one entry per mode")
    if any(d < 1 for d in dims) or any(k < 0 for k in depths):
        raise ValueError("dims must be positive and depths nonnegative")
    rng = np.random.default_rng(seed)
    R = num_blocks

    if isinstance(scheme, (GaussianIID, DiagonalBoosted)):
        w = [scheme.sigma_w * rng.standard_normal((R, d)) for d in dims]
        A = [scheme.sigma_A * rng.standard_normal((R, k, d, d)) for d, k in zip(dims, depths)]
        if isinstance(scheme, DiagonalBoosted):
            for a, d in zip(A, dims):
                a[..., np.arange(d), np.arange(d)] = scheme.diag_scale
        return DeepCPFactorization(dims, depths, w, A)

    if isinstance(scheme, BalancedRankOne):
        w, A = [], []
        for d, k in zip(dims, depths):
            z = _signed_unit_vectors(rng, (R, k + 1, d))
            A.append(scheme.rho * np.einsum("rip,riq->ripq", z[:, :-1], z[:, 1:]))
            w.append(scheme.rho * _signed_unit_vectors(rng, (R, d)))
        return DeepCPFactorization(dims, depths, w, A)

    raise TypeError(f"unknown init scheme {scheme!r}")


def _signed_unit_vectors(rng: np.random.Generator, shape) -> np.ndarray:
    """Uniform unit vectors along the last axis, first nonzero coordinate positive."""
    v = rng.standard_normal(shape)
    v /= np.linalg.norm(v, axis=-1, keepdims=True)
    first = np.take_along_axis(v, np.argmax(v != 0, axis=-1)[..., None], axis=-1)
    return v * np.where(first < 0, -1.0, 1.0)


def balance_norms(model: DeepCPFactorization) -> DeepCPFactorization:
    """Rescale every parameter of each block to the block's geometric-mean norm.

    Directions are kept; afterwards the unbalancedness is zero.
    """
    out = model.copy()
    R = model.num_blocks
    logs = np.zeros(R)
    count = 0
    for n in range(model.order):
        logs += np.log(np.linalg.norm(model.w[n], axis=1))
        count += 1
        for i in range(model.depths[n]):
            logs += np.log(np.linalg.norm(model.A[n][:, i], axis=(1, 2)))
            count += 1
    target = np.exp(logs / count)
    for n in range(model.order):
        out.w[n] *= (target / np.linalg.norm(model.w[n], axis=1))[:, None]
        for i in range(model.depths[n]):
            scale = target / np.linalg.norm(model.A[n][:, i], axis=(1, 2))
            out.A[n][:, i] *= scale[:, None, None]
    return out


def suffix_vectors(model: DeepCPFactorization, n: int) -> list[np.ndarray]:
    """``s[i] = A_i ... A_{k-1} w`` for i = 0..k (0-based), batched over blocks.

    ``s[k]`` is ``w[n]`` itself and ``s[0]`` is the mode vector.
    """
    k = model.depths[n]
    s = [None] * (k + 1)
    s[k] = model.w[n]
    for i in range(k - 1, -1, -1):
        s[i] = np.einsum("rpq,rq->rp", model.A[n][:, i], s[i + 1])
    return s


def mode_vectors(model: DeepCPFactorization) -> list[np.ndarray]:
    """Mode vectors b[n] of shape ``(R, d_n)`` for every mode."""
    return [suffix_vectors(model, n)[0] for n in range(model.order)]


def mode_vector(model: DeepCPFactorization, r: int, n: int) -> np.ndarray:
    model._check_block(r, n)
    v = model.w[n][r]
    for i in range(model.depths[n] - 1, -1, -1):
        v = model.A[n][r, i] @ v
    return v


def product_matrix(model: DeepCPFactorization, r: int, n: int) -> np.ndarray:
    """A_0 A_1 ... A_{k-1} for block r on mode n (identity when k = 0)."""
    model._check_block(r, n)
    out = np.eye(model.dims[n])
    for i in range(model.depths[n]):
        out = out @ model.A[n][r, i]
    return out


def reconstruct(model: DeepCPFactorization) -> DenseTensor:
    B = mode_vectors(model)
    out = B[0]
    for b in B[1:]:
        out = out[..., None] * b.reshape((b.shape[0],) + (1,) * (out.ndim - 1) + (b.shape[1],))
    return DenseTensor(out.sum(axis=0))


# Below this many (blocks x tensor entries) the dense products are used; they
# are BLAS matrix products and beat the entry-wise gathers by a wide margin.
DENSE_WORK_LIMIT = 20_000_000


def dense_is_cheap(num_blocks: int, dims: Sequence[int]) -> bool:
    return num_blocks * int(np.prod(dims)) <= DENSE_WORK_LIMIT


def khatri_rao(vecs: Sequence[np.ndarray]) -> np.ndarray:
    """Row-wise Kronecker product: ``(R, prod d)`` from a list of ``(R, d_m)`` arrays."""
    out = vecs[0]
    for v in vecs[1:]:
        out = (out[:, :, None] * v[:, None, :]).reshape(out.shape[0], -1)
    return out


def dense_values(dims: Sequence[int], mode_vecs: Sequence[np.ndarray]) -> np.ndarray:
    """sum_r (x)_n b[n][r] as a dense array, via one matrix product of two Khatri-Rao halves."""
    half = max(1, len(dims) // 2)
    left = khatri_rao(mode_vecs[:half])
    right = khatri_rao(mode_vecs[half:]) if half < len(dims) else np.ones((left.shape[0], 1), left.dtype)
    return (left.T @ right).reshape(tuple(dims))


def predict_entries(model: DeepCPFactorization, indices: np.ndarray,
                    mode_vecs: list[np.ndarray] | None = None) -> np.ndarray:
    """Reconstruction evaluated only at the rows of an ``(M, N)`` index array."""
    B = mode_vectors(model) if mode_vecs is None else mode_vecs
    idx = np.asarray(indices, dtype=np.int64)
    if dense_is_cheap(model.num_blocks, model.dims) and B[0].dtype == np.float64:
        return dense_values(model.dims, B)[tuple(idx.T)]
    prod = np.ones((model.num_blocks, idx.shape[0]), dtype=B[0].dtype)
    for n in range(model.order):
        prod *= B[n][:, idx[:, n]]
    return prod.sum(axis=0)


def shallow_block_norms(model: DeepCPFactorization) -> np.ndarray:
    """Norm of the vector-only block, prod_n ||w[n][r]||, for every r."""
    return np.prod([np.linalg.norm(w, axis=1) for w in model.w], axis=0)


def deep_block_norms(model: DeepCPFactorization,
                     mode_vecs: list[np.ndarray] | None = None) -> np.ndarray:
    """Norm of each reconstruction block, prod_n ||b[n][r]||."""
    B = mode_vectors(model) if mode_vecs is None else mode_vecs
    return np.prod([np.linalg.norm(b, axis=1) for b in B], axis=0)


def shallow_block_norm(model: DeepCPFactorization, r: int) -> float:
    model._check_block(r)
    return float(np.prod([np.linalg.norm(w[r]) for w in model.w]))


def deep_block_norm(model: DeepCPFactorization, r: int) -> float:
    model._check_block(r)
    return float(np.prod([np.linalg.norm(mode_vector(model, r, n)) for n in range(model.order)]))


def save_checkpoint(model: DeepCPFactorization, path) -> None:
    """Write header line, JSON metadata line, then raw little-endian float64 arrays."""
    meta = {"dims": list(model.dims), "depths": list(model.depths), "num_blocks": model.num_blocks}
    with open(path, "wb") as fh:
        fh.write((CHECKPOINT_MAGIC + "\n").encode())
        fh.write((json.dumps(meta) + "\n").encode())
        for _, _, arr in model.parameters():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> DeepCPFactorization:
    raw = Path(path).read_bytes()
    head, rest = raw.split(b"\n", 1)
    if head.decode() != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a {CHECKPOINT_MAGIC} checkpoint")
    meta_line, payload = rest.split(b"\n", 1)
    meta = json.loads(meta_line)
    dims, depths, R = tuple(meta["dims"]), tuple(meta["depths"]), meta["num_blocks"]
    shapes = [(R, d) for d in dims] + [(R, k, d, d) for d, k in zip(dims, depths)]
    arrays, offset = [], 0
    for shape in shapes:
        nbytes = 8 * int(np.prod(shape))
        if offset + nbytes > len(payload):
            raise ValueError(f"{path}: truncated checkpoint")
        arrays.append(np.frombuffer(payload, dtype="<f8", count=nbytes // 8, offset=offset)
                      .reshape(shape).astype(np.float64))
        offset += nbytes
    if offset != len(payload):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    N = len(dims)
    return DeepCPFactorization(dims, depths, arrays[:N], arrays[N:])
