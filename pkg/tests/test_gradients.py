import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deepcp import cp_model
from deepcp.cp_model import GaussianIID, init_model, mode_vectors
from deepcp.data_io import CompletionDataset
from deepcp.gradients import (EntryLoss, all_coordinates, empirical_loss, finite_difference_gradient,
                              folded_gradients, full_gradient, grad_A, grad_w, loss_gradient_tensor)
from deepcp.tensor_core import SparseEntrySet
from deepcp.verify import random_dataset


def _rel(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


@settings(max_examples=15, deadline=None)
@given(st.lists(st.integers(2, 4), min_size=2, max_size=3), st.lists(st.integers(0, 2), min_size=3, max_size=3),
       st.integers(0, 10**6))
def test_gradient_matches_finite_differences(dims, depths, seed):
    depths = depths[:len(dims)]
    size = int(np.prod(dims))
    data = random_dataset(dims, max(1, size // 2), seed)
    model = init_model(GaussianIID(0.9, 0.6), dims, 2, depths, seed)
    g = full_gradient(model, data).flatten()
    for j, coord in enumerate(all_coordinates(model)):
        fd = finite_difference_gradient(model, data, coord, 1e-6, dtype=np.longdouble)
        assert _rel(g[j], fd) <= 1e-6, coord


def test_float64_finite_difference_is_close(small_data):
    model = init_model(GaussianIID(0.5, 0.5), small_data.shape, 2, (1, 0, 1), 0)
    g = full_gradient(model, small_data).flatten()
    fd = np.array([finite_difference_gradient(model, small_data, c) for c in all_coordinates(model)])
    assert np.max(np.abs(g - fd)) <= 1e-8


def test_per_block_gradients_match_batched():
    data = random_dataset((4, 3, 5), 20, 0)
    model = init_model(GaussianIID(1.0, 0.5), (4, 3, 5), 3, (2, 1, 0), 0)
    gt = loss_gradient_tensor(model, data)
    batched = full_gradient(model, data)
    for r in range(3):
        for n in range(3):
            assert np.allclose(grad_w(model, gt, r, n), batched.g_w[n][r], rtol=1e-12, atol=1e-15)
            for i in range(model.depths[n]):
                assert np.allclose(grad_A(model, gt, r, n, i), batched.g_A[n][r, i], rtol=1e-12, atol=1e-15)


def test_grad_A_rejects_missing_matrix():
    data = random_dataset((4, 3), 5, 0)
    model = init_model(GaussianIID(1.0, 0.5), (4, 3), 2, (1, 0), 0)
    gt = loss_gradient_tensor(model, data)
    with pytest.raises(ValueError):
        grad_A(model, gt, 0, 1, 0)
    with pytest.raises(ValueError):
        grad_A(model, gt, 0, 0, 1)


def test_dense_and_sparse_folded_gradients_agree(monkeypatch):
    data = random_dataset((4, 3, 5), 30, 2)
    model = init_model(GaussianIID(1.0, 0.5), (4, 3, 5), 3, (1, 2, 0), 2)
    B = mode_vectors(model)
    gt = loss_gradient_tensor(model, data, mode_vecs=B)
    dense = folded_gradients(gt, B)
    monkeypatch.setattr(cp_model, "DENSE_WORK_LIMIT", 0)
    sparse = folded_gradients(gt, B)
    for a, b in zip(dense, sparse):
        assert np.allclose(a, b, rtol=1e-12, atol=1e-16)


def test_loss_gradient_tensor_support_and_values(small_data):
    model = init_model(GaussianIID(0.5, 0.5), small_data.shape, 2, (0, 0, 0), 0)
    gt = loss_gradient_tensor(model, small_data)
    assert np.array_equal(gt.indices, small_data.observed.indices)
    resid = cp_model.predict_entries(model, gt.indices) - small_data.observed.values
    assert np.allclose(gt.values, resid / len(small_data.observed))


def test_held_out_values_do_not_affect_gradient(small_data):
    model = init_model(GaussianIID(0.5, 0.5), small_data.shape, 2, (1, 1, 1), 0)
    held = small_data.heldout
    changed = CompletionDataset(small_data.shape, small_data.observed, held.with_values(held.values + 100.0))
    assert np.array_equal(full_gradient(model, small_data).flatten(), full_gradient(model, changed).flatten())


def test_exact_fit_has_zero_gradient():
    model = init_model(GaussianIID(0.7, 0.7), (3, 3), 2, (1, 0), 0)
    W = cp_model.reconstruct(model)
    idx = np.array([[0, 0], [1, 2], [2, 1]])
    obs = SparseEntrySet((3, 3), idx, W.values[tuple(idx.T)])
    assert np.max(np.abs(full_gradient(model, obs).flatten())) <= 1e-15


def test_custom_entry_loss():
    absish = EntryLoss("pseudo_huber", lambda z: np.sqrt(1 + z * z) - 1, lambda z: z / np.sqrt(1 + z * z))
    data = random_dataset((3, 4), 6, 1)
    model = init_model(GaussianIID(1.0, 0.5), (3, 4), 2, (1, 1), 1)
    g = full_gradient(model, data, absish).flatten()
    for j, c in enumerate(all_coordinates(model)):
        fd = finite_difference_gradient(model, data, c, loss=absish, dtype=np.longdouble)
        assert _rel(g[j], fd) <= 1e-6


def test_shape_mismatch_and_empty_set():
    model = init_model(GaussianIID(1.0, 0.5), (3, 4), 2, (0, 0), 0)
    with pytest.raises(ValueError):
        empirical_loss(model, random_dataset((4, 3), 3, 0).observed)
    empty = SparseEntrySet((3, 4), np.zeros((0, 2), dtype=np.int64), np.zeros(0))
    with pytest.raises(ValueError):
        empirical_loss(model, empty)
    with pytest.raises(ValueError):
        finite_difference_gradient(model, random_dataset((3, 4), 3, 0), ("w", 0, 0, 0), h=0.0)
