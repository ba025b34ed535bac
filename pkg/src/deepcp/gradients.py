"""Closed-form gradients of the completion loss for the deep CP model.

Everything is computed over the observed entries only. For block r and mode
n the central object is the folded gradient vector

    g[n][r] = [grad L]_(n) @ kron_{n' != n} b[n'][r]

accumulated entry by entry: each observed entry adds its loss derivative
times prod_{n' != n} b[n'][r][i_{n'}] into coordinate i_n. From it

    dL/dw[n][r]  = (A_0 ... A_{k-1})^T g
    dL/dA_i      = (A_0 ... A_{i-1})^T g  (A_{i+1} ... A_{k-1} w)^T
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .cp_model import (DeepCPFactorization, dense_is_cheap, khatri_rao, mode_vector, mode_vectors,
                       predict_entries, suffix_vectors)
from .tensor_core import SparseEntrySet


@dataclass(frozen=True)
class EntryLoss:
    """Per-entry loss ell(z) on the residual z = W - A, with derivative."""

    name: str
    value: Callable[[np.ndarray], np.ndarray]
    derivative: Callable[[np.ndarray], np.ndarray]


SQUARE_LOSS = EntryLoss("square", lambda z: 0.5 * z * z, lambda z: z)


@dataclass
class GradientSet:
    g_w: list[np.ndarray]
    g_A: list[np.ndarray]

    def arrays(self):
        return list(self.g_w) + list(self.g_A)

    def scaled(self, c: float) -> "GradientSet":
        return GradientSet([c * g for g in self.g_w], [c * g for g in self.g_A])

    def flatten(self) -> np.ndarray:
        return np.concatenate([g.reshape(-1) for g in self.arrays()])


def observed_entries(data) -> SparseEntrySet:
    """Accept either a dataset (with ``.observed``) or an entry set."""
    return getattr(data, "observed", data)


def _check_shapes(model: DeepCPFactorization, entries: SparseEntrySet):
    if tuple(entries.shape) != tuple(model.dims):
        raise ValueError(f"data shape {entries.shape} does not match model dims {model.dims}")


def empirical_loss(model: DeepCPFactorization, entries: SparseEntrySet,
                   loss: EntryLoss = SQUARE_LOSS, mode_vecs=None) -> float:
    """(1/|entries|) * sum of ell(W - A) over the listed entries."""
    _check_shapes(model, entries)
    if len(entries) == 0:
        raise ValueError("cannot evaluate a loss over an empty entry set")
    resid = predict_entries(model, entries.indices, mode_vecs) - entries.values
    return float(np.mean(loss.value(resid)))


def loss_gradient_tensor(model: DeepCPFactorization, data, loss: EntryLoss = SQUARE_LOSS,
                         mode_vecs=None) -> SparseEntrySet:
    """Gradient of the loss w.r.t. the reconstruction, supported on the observed set."""
    obs = observed_entries(data)
    _check_shapes(model, obs)
    if len(obs) == 0:
        raise ValueError("observed set is empty")
    resid = predict_entries(model, obs.indices, mode_vecs) - obs.values
    return obs.with_values(loss.derivative(resid) / len(obs))


def folded_gradients(grad_tensor: SparseEntrySet, mode_vecs: list[np.ndarray]) -> list[np.ndarray]:
    """``g[n]`` of shape ``(R, d_n)`` for every mode, batched over blocks."""
    idx = grad_tensor.indices
    N = len(mode_vecs)
    R = mode_vecs[0].shape[0]
    if dense_is_cheap(R, grad_tensor.shape) and mode_vecs[0].dtype == np.float64:
        return _folded_dense(grad_tensor, mode_vecs)
    gathered = [mode_vecs[n][:, idx[:, n]] for n in range(N)]
    # prefix[n] = prod over modes < n; combined with a running suffix below
    dtype = np.result_type(grad_tensor.values, *mode_vecs)
    prefix = [np.ones((R, len(grad_tensor)), dtype=dtype)]
    for n in range(N - 1):
        prefix.append(prefix[-1] * gathered[n])
    out = [None] * N
    suffix = grad_tensor.values[None, :] * np.ones((R, 1), dtype=dtype)
    for n in range(N - 1, -1, -1):
        onehot = np.zeros((len(grad_tensor), mode_vecs[n].shape[1]), dtype=dtype)
        onehot[np.arange(len(grad_tensor)), idx[:, n]] = 1.0
        out[n] = (prefix[n] * suffix) @ onehot
        suffix = suffix * gathered[n]
    return out


def _folded_dense(grad_tensor: SparseEntrySet, mode_vecs: list[np.ndarray]) -> list[np.ndarray]:
    """Mode-n matricization of the dense gradient times the Khatri-Rao product of the other modes."""
    G = np.zeros(grad_tensor.shape)
    G[tuple(grad_tensor.indices.T)] = grad_tensor.values
    out = []
    for n in range(len(mode_vecs)):
        others = [mode_vecs[m] for m in range(len(mode_vecs)) if m != n]
        Gn = np.moveaxis(G, n, 0).reshape(G.shape[n], -1)
        out.append((Gn @ khatri_rao(others).T).T if others else G[None, :] * np.ones((mode_vecs[0].shape[0], 1)))
    return out


def _folded_single(model: DeepCPFactorization, grad_tensor: SparseEntrySet, r: int, n: int) -> np.ndarray:
    """One block's folded gradient, accumulated entry by entry."""
    b = [mode_vector(model, r, m) for m in range(model.order)]
    out = np.zeros(model.dims[n])
    for ix, g in zip(grad_tensor.indices, grad_tensor.values):
        coef = g
        for m in range(model.order):
            if m != n:
                coef *= b[m][ix[m]]
        out[ix[n]] += coef
    return out


def grad_w(model: DeepCPFactorization, grad_tensor: SparseEntrySet, r: int, n: int) -> np.ndarray:
    model._check_block(r, n)
    _check_shapes(model, grad_tensor)
    q = _folded_single(model, grad_tensor, r, n)
    for i in range(model.depths[n]):
        q = model.A[n][r, i].T @ q
    return q


def grad_A(model: DeepCPFactorization, grad_tensor: SparseEntrySet, r: int, n: int, i: int) -> np.ndarray:
    model._check_block(r, n)
    _check_shapes(model, grad_tensor)
    if not (0 <= i < model.depths[n]):
        raise ValueError(f"matrix index {i} out of range for depth {model.depths[n]} on mode {n}")
    left = _folded_single(model, grad_tensor, r, n)
    for j in range(i):
        left = model.A[n][r, j].T @ left
    right = model.w[n][r]
    for j in range(model.depths[n] - 1, i, -1):
        right = model.A[n][r, j] @ right
    return np.outer(left, right)


def gradient_from_tensor(model: DeepCPFactorization, grad_tensor: SparseEntrySet) -> GradientSet:
    """All parameter gradients for a given loss-gradient tensor, batched over blocks."""
    suffixes = [suffix_vectors(model, n) for n in range(model.order)]
    B = [s[0] for s in suffixes]
    folded = folded_gradients(grad_tensor, B)
    g_w, g_A = [], []
    for n in range(model.order):
        q = folded[n]
        gA = np.empty_like(model.A[n])
        for i in range(model.depths[n]):
            gA[:, i] = q[:, :, None] * suffixes[n][i + 1][:, None, :]
            q = np.einsum("rpq,rp->rq", model.A[n][:, i], q)
        g_w.append(q)
        g_A.append(gA)
    return GradientSet(g_w, g_A)


def full_gradient(model: DeepCPFactorization, data, loss: EntryLoss = SQUARE_LOSS) -> GradientSet:
    B = mode_vectors(model)
    return gradient_from_tensor(model, loss_gradient_tensor(model, data, loss, B))


def get_parameter(model: DeepCPFactorization, coord) -> float:
    kind, n, *rest = coord
    arr = model.w[n] if kind == "w" else model.A[n]
    return float(arr[tuple(rest)])


def finite_difference_gradient(model: DeepCPFactorization, data, coord, h: float = 1e-6,
                               loss: EntryLoss = SQUARE_LOSS, dtype=np.float64) -> float:
    """Central difference of the loss along one parameter coordinate.

    ``coord`` is ``("w", n, r, j)`` or ``("A", n, r, i, p, q)``. With
    ``dtype=np.longdouble`` the two loss evaluations run in extended
    precision, which pushes the rounding floor (about eps * L / h) well below
    the truncation error when the platform has 80-bit long doubles.
    """
    if not h > 0:
        raise ValueError("step h must be positive")
    obs = observed_entries(data)
    _check_shapes(model, obs)
    kind, n, *rest = coord
    vals = []
    for sign in (1, -1):
        w = [x.astype(dtype) for x in model.w]
        A = [x.astype(dtype) for x in model.A]
        arr = w[n] if kind == "w" else A[n]
        arr[tuple(rest)] += sign * dtype(h)
        vals.append(_loss_in(w, A, model.depths, obs, loss, dtype))
    return float((vals[0] - vals[1]) / (2 * dtype(h)))


def _loss_in(w, A, depths, obs: SparseEntrySet, loss: EntryLoss, dtype):
    """Mean entry loss with every intermediate kept in ``dtype``."""
    idx = obs.indices
    prod = np.ones((w[0].shape[0], len(obs)), dtype=dtype)
    for n, k in enumerate(depths):
        b = w[n]
        for i in range(k - 1, -1, -1):
            b = np.einsum("rpq,rq->rp", A[n][:, i], b)
        prod *= b[:, idx[:, n]]
    resid = prod.sum(axis=0) - obs.values.astype(dtype)
    return loss.value(resid).sum() / dtype(len(obs))


def all_coordinates(model: DeepCPFactorization):
    """Every scalar parameter coordinate, in the order of :meth:`GradientSet.flatten`."""
    for kind, n, arr in model.parameters():
        for rest in np.ndindex(arr.shape):
            yield (kind, n) + tuple(int(x) for x in rest)
