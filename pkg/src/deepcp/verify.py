"""Self-contained numerical checks of the gradients and of the gradient-flow theory.

Every check builds its own small instance, runs it, and returns
:class:`~deepcp.diagnostics.CheckResult` objects. ``run_suite`` drives the
whole set and is what ``deepcp verify`` calls.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .cp_model import BalancedRankOne, GaussianIID, balance_norms, init_model
from .data_io import CompletionDataset, generate_synthetic, split_observed
from .diagnostics import (CheckResult, DiagnosticsHook, DiagnosticsRecord, check_conservation,
                          check_dynamics, check_norm_bound_trajectory, check_singular_dynamics,
                          dynamics_exponent)
from .gradients import all_coordinates, finite_difference_gradient, full_gradient
from .tensor_core import DenseTensor, SparseEntrySet, kron_complement, matricize
from .trainer import TrainConfig, train

# A relative error needs a scale; gradients below this magnitude are compared absolutely.
GRADIENT_FLOOR = 1e-8


def random_dataset(dims: Sequence[int], num_observed: int, seed: int) -> CompletionDataset:
    """Standard normal values at ``num_observed`` distinct random positions, nothing held out."""
    rng = np.random.default_rng(seed)
    size = int(np.prod(dims))
    lin = np.sort(rng.choice(size, size=num_observed, replace=False))
    idx = np.array(np.unravel_index(lin, dims)).T
    obs = SparseEntrySet(tuple(dims), idx, rng.standard_normal(num_observed))
    held = SparseEntrySet(tuple(dims), np.zeros((0, len(dims)), dtype=np.int64), np.zeros(0))
    return CompletionDataset(tuple(dims), obs, held, {"generator": "random_dataset", "seed": seed})


def small_completion_problem(seed: int = 0, dims=(4, 4, 4), rank: int = 2,
                             fraction: float = 0.5) -> CompletionDataset:
    return split_observed(generate_synthetic(dims, rank, seed), fraction, seed)


def check_gradients(seed: int = 0, tolerance: float = 1e-6, h: float = 1e-6,
                    gradient_fn: Optional[Callable] = None) -> CheckResult:
    """Every analytic coordinate against a central difference.

    ``gradient_fn(model, data)`` replaces the analytic gradient; it exists so a
    deliberately broken gradient can be injected as a negative control.
    """
    t0 = time.perf_counter()
    dims, depths = (4, 3, 5), (2, 1, 0)
    data = random_dataset(dims, 20, seed)
    model = init_model(GaussianIID(1.0, 0.5), dims, 3, depths, seed)
    grads = (gradient_fn or full_gradient)(model, data).flatten()
    worst, worst_coord = 0.0, None
    for j, coord in enumerate(all_coordinates(model)):
        fd = finite_difference_gradient(model, data, coord, h, dtype=np.longdouble)
        err = abs(grads[j] - fd) / max(abs(grads[j]), abs(fd), GRADIENT_FLOOR)
        if err > worst:
            worst, worst_coord = err, coord
    return CheckResult("gradient_fd", worst <= tolerance, worst, tolerance,
                       params={"dims": dims, "depths": depths, "blocks": 3, "observed": 20, "h": h,
                               "oracle_precision": str(np.finfo(np.longdouble).eps)},
                       details={"coordinates": int(grads.size), "worst_coordinate": worst_coord,
                                "seconds": time.perf_counter() - t0})


def wrong_sign_gradient(model, data):
    """Negative control: the analytic gradient with one mode's w gradient negated."""
    g = full_gradient(model, data)
    g.g_w[0] = -g.g_w[0]
    return g


def check_matricization_identity(trials: int = 200, seed: int = 0, tolerance: float = 1e-12) -> CheckResult:
    """Mode-n matricization times the Kronecker product of the other vectors,
    against a direct contraction of the tensor with those vectors."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        order = int(rng.integers(2, 5))
        shape = tuple(int(rng.integers(1, 6 - j)) for j in range(order))
        t = DenseTensor(rng.standard_normal(shape))
        vecs = [rng.standard_normal(d) for d in shape]
        n = int(rng.integers(order))
        lhs = matricize(t, n) @ kron_complement(vecs, n)
        rhs = t.values
        # contract from the last axis down so remaining axis numbers stay valid
        for m in range(order - 1, -1, -1):
            if m != n:
                rhs = np.tensordot(rhs, vecs[m], axes=([m], [0]))
        scale = max(np.max(np.abs(rhs)), np.max(np.abs(lhs)), 1e-300)
        worst = max(worst, float(np.max(np.abs(lhs - rhs)) / scale))
    return CheckResult("matricization_identity", worst <= tolerance, worst, tolerance,
                       params={"trials": trials, "max_shape": (5, 4, 3, 2)})


# conservation ----------------------------------------------------------------

def conservation_run(eta: float, steps: int = 2000, seed: int = 0):
    data = small_completion_problem(seed)
    model = balance_norms(init_model(GaussianIID(0.5, 0.5), data.shape, 4, (1, 1, 1), seed))
    cfg = TrainConfig(learning_rate=eta, max_epochs=steps, log_every=max(1, steps // 200),
                      stop_train_loss=0.0, seed=seed)
    return train(model, data, cfg, DiagnosticsHook(track_blocks=range(4)))


def check_conservation_order(etas: Sequence[float] = (1e-3, 5e-4), steps: int = 2000,
                             min_ratio: float = 1.6, seed: int = 0) -> list[CheckResult]:
    """Drift of each squared-norm difference at successive step sizes.

    Gradient flow conserves every difference exactly; gradient descent drifts
    by O(eta) over a fixed number of steps, so halving eta must shrink each
    pair's drift by clearly more than the noise floor.
    """
    reports = [check_conservation(conservation_run(eta, steps, seed)) for eta in etas]
    out = []
    for (e1, r1), (e2, r2) in zip(zip(etas, reports), zip(etas[1:], reports[1:])):
        d1 = np.asarray(r1.details["pair_drift"])
        d2 = np.asarray(r2.details["pair_drift"])
        ratios = d1 / np.maximum(d2, 1e-300)
        worst = float(ratios.min())
        fam1, fam2 = r1.details["max_drift_by_family"], r2.details["max_drift_by_family"]
        out.append(CheckResult(f"conservation_order[{e1:g}->{e2:g}]", worst >= min_ratio, worst, min_ratio,
                               params={"steps": steps, "etas": [e1, e2]},
                               details={"drift_by_family": {f: [fam1[f], fam2[f]] for f in fam1},
                                        "median_ratio": float(np.median(ratios)),
                                        "pairs": int(ratios.size)}))
    return out


def conservation_table(etas: Sequence[float], steps: int = 2000, seed: int = 0) -> str:
    """Max drift per pair family for each step size, with the observed order."""
    rows = []
    prev = None
    for eta in etas:
        fam = check_conservation(conservation_run(eta, steps, seed)).details["max_drift_by_family"]
        order = ""
        if prev is not None:
            e0, f0 = prev
            ords = [np.log(f0[k] / fam[k]) / np.log(e0 / eta) for k in fam if fam[k] > 0 and f0[k] > 0]
            order = f"{min(ords):.2f}" if ords else ""
        rows.append((f"{eta:g}", *(f"{fam[k]:.3e}" for k in sorted(fam)), order))
        prev = (eta, fam)
    head = ("eta", *sorted(fam), "min observed order")
    widths = [max(len(r[j]) for r in rows + [head]) for j in range(len(head))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)) for r in [head] + rows)


# balanced rank-one dynamics --------------------------------------------------

@dataclass
class DynamicsRun:
    depth: int
    eta: float
    traj: object
    model: object


def dynamics_run(depth: int, eta: float = 1e-4, steps: int = 1500, rho: float = 0.2,
                 seed: int = 0) -> DynamicsRun:
    data = small_completion_problem(seed)
    N, R = len(data.shape), 4
    model = init_model(BalancedRankOne(rho), data.shape, R, (depth,) * N, seed)
    svd = [(n, r) for n in range(N) for r in range(R)] if depth else []
    hook = DiagnosticsHook(svd_blocks=svd, with_zeta=True, step_eta=eta)
    cfg = TrainConfig(learning_rate=eta, max_epochs=steps, log_every=1, stop_train_loss=0.0, seed=seed)
    traj = train(model, data, cfg, hook)
    return DynamicsRun(depth, eta, traj, model)


def check_dynamics_law(run: DynamicsRun, halved: Optional[DynamicsRun] = None,
                       tolerance: float = 0.05) -> CheckResult:
    """Median relative error of the block-norm rate law, worst block; optionally
    also requires the error to fall when eta is halved."""
    R = run.model.num_blocks
    results = [check_dynamics(run.traj, r, tolerance=tolerance) for r in range(R)]
    worst = max(res.statistic for res in results)
    passed = worst <= tolerance
    details = {"per_block": [res.statistic for res in results]}
    if halved is not None:
        worst_half = max(check_dynamics(halved.traj, r, tolerance=tolerance).statistic for r in range(R))
        details["halved_eta_error"] = worst_half
        details["decreases_with_eta"] = worst_half < worst
        passed = passed and worst_half < worst
    N = len(run.traj.meta["dims"])
    expo = dynamics_exponent(N, run.traj.meta["depths"])
    return CheckResult(f"dynamics[k={run.depth}]", passed, worst, tolerance,
                       params={"eta": run.eta, "exponent": expo, "expected_exponent": 2 - 2 / N + run.depth},
                       details=details)


def check_delta_identity(run: DynamicsRun, rank_tol: float = 1e-8, tolerance: float = 1e-8) -> CheckResult:
    """delta_r = alignment_r * zeta_r wherever every product matrix of block r is rank one."""
    recs = [r for r in run.traj.records if isinstance(r, DiagnosticsRecord)]
    N = len(run.traj.meta["dims"])
    worst, checked, skipped = 0.0, 0, 0
    for rec in recs:
        for r in range(len(rec.delta)):
            if rec.delta[r] is None or rec.zeta[r] is None or rec.alignment[r] is None:
                skipped += 1
                continue
            if run.depth:
                ratios = [rec.top_singular_values[(n, r)][1] / rec.top_singular_values[(n, r)][0]
                          for n in range(N)]
                if max(ratios) > rank_tol:
                    skipped += 1
                    continue
            gap = abs(rec.delta[r] - rec.alignment[r] * rec.zeta[r]) / (1 + abs(rec.delta[r]))
            worst = max(worst, gap)
            checked += 1
    passed = worst <= tolerance and checked > 0
    return CheckResult(f"delta_identity[k={run.depth}]", passed, worst, tolerance,
                       params={"rank_tol": rank_tol},
                       details={"checked": checked, "skipped_not_rank_one": skipped})


def check_rank_one(run: DynamicsRun, rank_tol: float = 1e-8) -> CheckResult:
    recs = [r for r in run.traj.records if isinstance(r, DiagnosticsRecord)]
    worst = 0.0
    for rec in recs:
        for s in rec.top_singular_values.values():
            worst = max(worst, float(s[1] / s[0]))
    return CheckResult(f"rank_one_preserved[k={run.depth}]", worst <= rank_tol, worst, rank_tol,
                       params={"records": len(recs)})


def check_singular_law(run: DynamicsRun, tolerance: float = 0.05) -> CheckResult:
    N = len(run.traj.meta["dims"])
    R = run.model.num_blocks
    stats = [check_singular_dynamics(run.traj, r, n, tolerance=tolerance).statistic
             for n in range(N) for r in range(R)]
    worst = max(stats)
    return CheckResult(f"singular_dynamics[k={run.depth}]", worst <= tolerance, worst, tolerance,
                       params={"eta": run.eta, "exponent": 2 * (1 - 1 / run.depth)},
                       details={"per_pair": stats})


def check_norm_bound_run(run: DynamicsRun, tolerance: float = 1e-3) -> CheckResult:
    res = check_norm_bound_trajectory(run.traj, tolerance=tolerance)
    res.name = f"norm_bound[k={run.depth}]"
    return res


# suite -----------------------------------------------------------------------

CHECKS = ("gradients", "identity", "conservation", "dynamics", "norm_bound", "singular")


def run_suite(only: Optional[Sequence[str]] = None, etas: Sequence[float] = (1e-3, 5e-4),
              gradient_fn: Optional[Callable] = None, dynamics_steps: int = 1500,
              log: Callable[[str], None] = lambda s: None) -> list[CheckResult]:
    selected = list(only) if only else list(CHECKS)
    unknown = set(selected) - set(CHECKS)
    if unknown:
        raise ValueError(f"unknown checks {sorted(unknown)}; choose from {', '.join(CHECKS)}")
    results: list[CheckResult] = []

    def add(res):
        for r in res if isinstance(res, list) else [res]:
            results.append(r)
            log(r.line())

    if "gradients" in selected:
        add(check_gradients(gradient_fn=gradient_fn))
    if "identity" in selected:
        add(check_matricization_identity())
    if "conservation" in selected:
        add(check_conservation_order(etas))
    if {"dynamics", "norm_bound", "singular"} & set(selected):
        runs = {k: dynamics_run(k, steps=dynamics_steps) for k in (0, 1, 2)}
        if "dynamics" in selected:
            for k, run in runs.items():
                add(check_dynamics_law(run, dynamics_run(k, eta=run.eta / 2, steps=2 * dynamics_steps)))
                add(check_delta_identity(run))
        if "norm_bound" in selected:
            for run in runs.values():
                add(check_norm_bound_run(run))
        if "singular" in selected:
            for k in (1, 2):
                add(check_singular_law(runs[k]))
            add(check_rank_one(runs[2]))
    return results
