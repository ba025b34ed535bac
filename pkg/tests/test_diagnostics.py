import math
import json

import numpy as np
import pytest

from deepcp.cp_model import BalancedRankOne, GaussianIID, balance_norms, init_model, product_matrix
from deepcp.diagnostics import (DiagnosticsRecord, UndefinedValueError, alignment_all, check_dynamics,
                                check_norm_bound, delta_all, delta_r, dynamics_exponent, effective_rank,
                                growth_ordering_holds, norm_bound_exponent, report_json, report_table,
                                shallow_step_rate, unbalancedness, zeta_all, zeta_r)
from deepcp.gradients import full_gradient, loss_gradient_tensor
from deepcp.tensor_core import DenseTensor, inner_product, outer_product, scatter_to_dense
from deepcp.verify import dynamics_run


@pytest.fixture
def model():
    return init_model(GaussianIID(0.5, 0.6), (4, 4, 4), 3, (1, 2, 0), 5)


def _naive_unbalancedness(m):
    worst = 0.0
    for r in range(m.num_blocks):
        sq = [float(np.sum(m.w[n][r] ** 2)) for n in range(m.order)]
        sq += [float(np.sum(m.A[n][r, i] ** 2)) for n in range(m.order) for i in range(m.depths[n])]
        worst = max(worst, max(sq) - min(sq))
    return worst


def test_unbalancedness_matches_pairwise_definition(model):
    assert unbalancedness(model) == pytest.approx(_naive_unbalancedness(model), rel=1e-14)
    assert unbalancedness(balance_norms(model)) < 1e-14
    assert unbalancedness(init_model(BalancedRankOne(0.3), (3, 4), 5, (2, 1), 0)) < 1e-15


def test_delta_and_alignment_match_dense_inner_products(model, small_data):
    gt = loss_gradient_tensor(model, small_data)
    neg_grad = DenseTensor(-scatter_to_dense(gt).values)
    deltas, aligns = delta_all(model, gt), alignment_all(model, gt)
    for r in range(model.num_blocks):
        unit_chain = []
        for n in range(model.order):
            v = model.w[n][r] / np.linalg.norm(model.w[n][r])
            for i in reversed(range(model.depths[n])):
                a = model.A[n][r, i]
                v = (a / np.linalg.norm(a)) @ v
            unit_chain.append(v)
        assert deltas[r] == pytest.approx(inner_product(neg_grad, outer_product(unit_chain)), rel=1e-10)
        b = [product_matrix(model, r, n) @ model.w[n][r] for n in range(model.order)]
        block = outer_product([x / np.linalg.norm(x) for x in b])
        assert aligns[r] == pytest.approx(inner_product(neg_grad, block), rel=1e-10)
    assert delta_r(model, gt, 1) == deltas[1]


def test_zeta_matches_explicit_svd(model):
    z = zeta_all(model)
    for r in range(model.num_blocks):
        expect = 1.0
        for n in range(model.order):
            k = model.depths[n]
            if k:
                _, _, vt = np.linalg.svd(model.A[n][r, k - 1])
                expect *= abs(vt[0] @ model.w[n][r]) / np.linalg.norm(model.w[n][r])
        assert z[r] == pytest.approx(expect, rel=1e-12)


def test_zero_factor_makes_delta_and_zeta_undefined(model, small_data):
    model.w[0][2] = 0.0
    gt = loss_gradient_tensor(model, small_data)
    assert delta_all(model, gt)[2] is None
    with pytest.raises(UndefinedValueError):
        delta_r(model, gt, 2)
    model.A[1][0] = 0.0
    with pytest.raises(UndefinedValueError):
        zeta_r(model, 0)


def test_exponents():
    assert dynamics_exponent(3, (1, 1, 1)) == pytest.approx(2 - 2 / 3 + 1)
    assert dynamics_exponent(4, (0, 0, 0, 0)) == 1.5
    assert norm_bound_exponent(3, (2, 1, 0)) == 2.0


def test_effective_rank_counts():
    m = init_model(GaussianIID(1.0, 1.0), (3, 3), 4, (0, 0), 0)
    for r, scale in enumerate([10.0, 3.0, 0.5, 0.0]):
        m.w[0][r] *= scale / np.linalg.norm(m.w[0][r]) / np.linalg.norm(m.w[1][r]) if scale else 0.0
    rep = effective_rank(m, 1.0)
    assert rep.effective_rank == 2
    assert (rep.n1, rep.n2) == (3, 3)
    assert rep.deep_profile[0] == pytest.approx(10.0)
    with pytest.raises(ValueError):
        effective_rank(m, 0.0)


def test_shallow_step_rate_matches_extended_precision_difference(model, small_data):
    g = full_gradient(model, small_data)
    eta = 1e-3
    rate = shallow_step_rate(model, g.g_w, eta)

    def s(ws):
        return np.prod([np.linalg.norm(w.astype(np.longdouble), axis=1) for w in ws], axis=0)

    stepped = [w.astype(np.longdouble) - np.longdouble(eta) * gw for w, gw in zip(model.w, g.g_w)]
    direct = (s(stepped) - s(model.w)) / np.longdouble(eta)
    assert np.allclose(rate, direct.astype(float), rtol=1e-8, atol=0)


def test_norm_bound_holds_when_balanced_and_skips_otherwise(model):
    res = check_norm_bound(balance_norms(model))
    assert res.passed and not res.params["skipped"]
    assert res.statistic <= 1.0 + 1e-12
    res = check_norm_bound(model)
    assert res.params["skipped"]


def test_norm_bound_is_tight_at_depth_zero():
    m = balance_norms(init_model(GaussianIID(0.5, 0.5), (4, 4, 4), 3, (0, 0, 0), 0))
    res = check_norm_bound(m)
    assert res.statistic == pytest.approx(1.0, abs=1e-12)


def test_dynamics_check_and_wrong_exponent_control():
    run = dynamics_run(1, eta=1e-4, steps=200)
    good = check_dynamics(run.traj, 0)
    assert good.passed, good.line()
    assert good.params["exponent"] == pytest.approx(2 - 2 / 3 + 1)
    run.traj.meta["depths"] = (2, 2, 2)  # exponent off by one
    bad = check_dynamics(run.traj, 0)
    assert not bad.passed
    assert bad.statistic > 0.5


def test_dynamics_check_requires_balanced_start(small_data):
    from deepcp.diagnostics import DiagnosticsHook
    from deepcp.trainer import TrainConfig, train

    m = init_model(GaussianIID(0.3, 0.3), (4, 4, 4), 2, (1, 1, 1), 0)
    traj = train(m, small_data, TrainConfig(1e-3, 3, 1), hook=DiagnosticsHook(step_eta=1e-3))
    with pytest.raises(ValueError, match="balanced"):
        check_dynamics(traj, 0)


def test_growth_ordering():
    rec = DiagnosticsRecord(0, 0.0, None, 0.0, np.array([2.0, 1.0, 0.5]), np.zeros(3),
                            [0.3, 0.3, -1.0], [None] * 3)
    assert growth_ordering_holds(rec, 3, (1, 1, 1))


def test_report_formats_handle_nan():
    from deepcp.diagnostics import CheckResult

    results = [CheckResult("a", True, 0.5, 1.0), CheckResult("b", False, math.nan, 1.0, {"x": np.float64(2)})]
    doc = json.loads(report_json(results))
    assert doc[1]["statistic"] is None and doc[1]["params"]["x"] == 2.0
    table = report_table(results)
    assert "FAIL" in table.splitlines()[2]
    assert results[0].line().startswith("[PASS] a")
