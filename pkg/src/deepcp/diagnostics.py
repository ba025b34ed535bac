"""Theoretical quantities of the deep CP dynamics and checks against trajectories.

Notation in this module, for block r and mode n:

* shallow norm  s_r = prod_n ||w[n][r]||
* deep norm     prod_n ||b[n][r]||, b the mode vector
* delta_r       <-grad L, (x)_n (prod_i A_i/||A_i||) w/||w||>
* zeta_r        prod_n |<v_n, w[n][r]/||w[n][r]||>|, v_n the leading right
                singular vector of the last matrix of the chain on mode n
* epsilon       the largest gap between squared norms of any two parameters
                of the same block (the unbalancedness magnitude)

Under gradient flow from epsilon = 0:

    d s_r / dt = N * delta_r * s_r ** (2 - 2/N + sum(k)/N)
    deep norm <= s_r ** (1 + sum(k)/N)
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .cp_model import DeepCPFactorization, mode_vectors, suffix_vectors
from .gradients import SQUARE_LOSS, empirical_loss, folded_gradients, gradient_from_tensor
from .tensor_core import SparseEntrySet


class UndefinedValueError(ValueError):
    """A diagnostic is undefined for this block (a zero-norm factor)."""


@dataclass
class DiagnosticsRecord:
    epoch: int
    train_loss: float
    test_loss: Optional[float]
    epsilon: float
    shallow_norms: np.ndarray
    deep_norms: np.ndarray
    delta: list
    alignment: list
    zeta: Optional[list] = None
    top_singular_values: dict = field(default_factory=dict)
    beta: dict = field(default_factory=dict)
    chain_balance: dict = field(default_factory=dict)
    w_sq: Optional[np.ndarray] = None
    A_sq: Optional[list] = None
    step_rate: Optional[np.ndarray] = None


@dataclass
class EffectiveRankReport:
    threshold: float
    effective_rank: int
    n1: int
    n2: int
    deep_profile: list
    shallow_profile: list


@dataclass
class CheckResult:
    name: str
    passed: bool
    statistic: float
    tolerance: float
    params: dict = field(default_factory=dict)
    details: dict = field(default_factory=dict)

    def line(self) -> str:
        mark = "PASS" if self.passed else "FAIL"
        return f"[{mark}] {self.name}: statistic={self.statistic:.3e} tolerance={self.tolerance:.3e}"


def squared_norms(model: DeepCPFactorization) -> tuple[np.ndarray, list[np.ndarray]]:
    """Per-block squared norms: ``(R, N)`` for vectors, list of ``(R, k_n)`` for matrices."""
    w_sq = np.stack([np.sum(w * w, axis=1) for w in model.w], axis=1)
    A_sq = [np.sum(a * a, axis=(2, 3)) for a in model.A]
    return w_sq, A_sq


def unbalancedness(model: DeepCPFactorization) -> float:
    """Largest |sq norm gap| over vector-vector, matrix-matrix and vector-matrix pairs of a block."""
    w_sq, A_sq = squared_norms(model)
    allsq = np.concatenate([w_sq] + [a for a in A_sq if a.shape[1]], axis=1)
    return float(np.max(allsq.max(axis=1) - allsq.min(axis=1)))


def _normalizers(model: DeepCPFactorization) -> np.ndarray:
    """``(R, N)`` array of ||w|| * prod_i ||A_i|| per block and mode."""
    cols = []
    for n in range(model.order):
        c = np.linalg.norm(model.w[n], axis=1)
        for i in range(model.depths[n]):
            c = c * np.linalg.norm(model.A[n][:, i], axis=(1, 2))
        cols.append(c)
    return np.stack(cols, axis=1)


def _factor_norms_positive(model: DeepCPFactorization) -> np.ndarray:
    ok = np.ones(model.num_blocks, dtype=bool)
    for n in range(model.order):
        ok &= np.linalg.norm(model.w[n], axis=1) > 0
        for i in range(model.depths[n]):
            ok &= np.linalg.norm(model.A[n][:, i], axis=(1, 2)) > 0
    return ok


def _project(grad_tensor: SparseEntrySet, vecs: Sequence[np.ndarray]) -> np.ndarray:
    """<-grad, (x)_n vecs[n][r]> for every block r, summed over observed entries only."""
    idx = grad_tensor.indices
    prod = np.ones((vecs[0].shape[0], len(grad_tensor)), dtype=np.result_type(grad_tensor.values, *vecs))
    for n, v in enumerate(vecs):
        prod *= v[:, idx[:, n]]
    return -(prod @ grad_tensor.values)


def delta_all(model: DeepCPFactorization, grad_tensor: SparseEntrySet, mode_vecs=None) -> list:
    """delta_r for every block; ``None`` where a factor has zero norm."""
    B = mode_vectors(model) if mode_vecs is None else mode_vecs
    ok = _factor_norms_positive(model)
    norms = _normalizers(model)
    safe = np.where(norms > 0, norms, 1.0)
    vals = _project(grad_tensor, [B[n] / safe[:, n:n + 1] for n in range(model.order)])
    return [float(v) if good else None for v, good in zip(vals, ok)]


def delta_r(model: DeepCPFactorization, grad_tensor: SparseEntrySet, r: int) -> float:
    model._check_block(r)
    val = delta_all(model, grad_tensor)[r]
    if val is None:
        raise UndefinedValueError(f"delta undefined for block {r}: a factor has zero norm")
    return val


def alignment_all(model: DeepCPFactorization, grad_tensor: SparseEntrySet, mode_vecs=None) -> list:
    """<-grad L, deep block / ||deep block||> per block; ``None`` for zero blocks."""
    B = mode_vectors(model) if mode_vecs is None else mode_vecs
    bn = np.stack([np.linalg.norm(b, axis=1) for b in B], axis=1)
    ok = np.all(bn > 0, axis=1)
    safe = np.where(bn > 0, bn, 1.0)
    vals = _project(grad_tensor, [B[n] / safe[:, n:n + 1] for n in range(model.order)])
    return [float(v) if good else None for v, good in zip(vals, ok)]


def _leading_right_vectors(mats: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batched SVD leading right singular vectors and top-two singular values."""
    # LAPACK has no extended-precision routines; singular vectors are taken in float64
    _, s, vt = np.linalg.svd(np.asarray(mats, dtype=np.float64))
    return vt[:, 0, :], s


def zeta_all(model: DeepCPFactorization) -> list:
    R = model.num_blocks
    z = np.ones(R)
    ok = np.ones(R, dtype=bool)
    for n in range(model.order):
        k = model.depths[n]
        if k == 0:
            continue
        last = model.A[n][:, k - 1]
        v, s = _leading_right_vectors(last)
        wn = np.linalg.norm(model.w[n], axis=1)
        ok &= (s[:, 0] > 0) & (wn > 0)
        what = model.w[n] / np.where(wn > 0, wn, 1.0)[:, None]
        z *= np.abs(np.sum(v * what, axis=1))
    return [float(v) if good else None for v, good in zip(z, ok)]


def zeta_r(model: DeepCPFactorization, r: int) -> float:
    model._check_block(r)
    for n in range(model.order):
        if model.depths[n] and not np.any(product_matrix_of(model, r, n)):
            raise UndefinedValueError(f"zeta undefined for block {r}: zero product matrix on mode {n}")
    val = zeta_all(model)[r]
    if val is None:
        raise UndefinedValueError(f"zeta undefined for block {r}")
    return val


def product_matrix_of(model: DeepCPFactorization, r: int, n: int) -> np.ndarray:
    out = np.eye(model.dims[n])
    for i in range(model.depths[n]):
        out = out @ model.A[n][r, i]
    return out


def _fix_signs(u: np.ndarray, vt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Flip singular pairs so each right vector's first nonzero entry is positive."""
    u, vt = u.copy(), vt.copy()
    for l in range(vt.shape[0]):
        nz = np.flatnonzero(np.abs(vt[l]) > 1e-300)
        if nz.size and vt[l, nz[0]] < 0:
            vt[l] *= -1
            u[:, l] *= -1
    return u, vt


def product_matrix_svd(model: DeepCPFactorization, r: int, n: int):
    """``(singular values, U, V^T)`` of the product matrix on mode n of block r."""
    model._check_block(r, n)
    if model.depths[n] == 0:
        raise ValueError(f"mode {n} has depth 0: there is no product matrix")
    u, s, vt = np.linalg.svd(np.asarray(product_matrix_of(model, r, n), dtype=np.float64))
    u, vt = _fix_signs(u, vt)
    return s, u, vt


def effective_rank(model: DeepCPFactorization, threshold: float = 1.0,
                   zero_tol: float = 1e-6) -> EffectiveRankReport:
    if not threshold > 0:
        raise ValueError("threshold must be positive")
    from .cp_model import deep_block_norms, shallow_block_norms

    deep = deep_block_norms(model)
    shallow = shallow_block_norms(model)
    n1 = int(np.sum(deep > zero_tol * deep.max())) if deep.max() > 0 else 0
    n2 = int(np.sum(shallow > zero_tol * shallow.max())) if shallow.max() > 0 else 0
    return EffectiveRankReport(threshold, int(np.sum(deep > threshold)), n1, n2,
                               sorted(deep.tolist(), reverse=True),
                               sorted(shallow.tolist(), reverse=True))


def dynamics_exponent(order: int, depths: Sequence[int]) -> float:
    return 2.0 - 2.0 / order + sum(depths) / order


def norm_bound_exponent(order: int, depths: Sequence[int]) -> float:
    return 1.0 + sum(depths) / order


class DiagnosticsHook:
    """Trainer hook producing a :class:`DiagnosticsRecord` per logged epoch.

    ``track_blocks`` selects blocks whose per-parameter squared norms are
    stored (for conservation checks); ``svd_blocks`` lists ``(n, r)`` pairs
    whose product-matrix singular values, beta and chain balance are stored.
    With ``step_eta`` each record also holds the per-step rate of every
    shallow block norm under a gradient step of that size (see
    :func:`shallow_step_rate`).
    """

    def __init__(self, heldout: Optional[SparseEntrySet] = None, loss=SQUARE_LOSS,
                 track_blocks: Optional[Sequence[int]] = None,
                 svd_blocks: Sequence[tuple[int, int]] = (), with_zeta: bool = False,
                 step_eta: Optional[float] = None):
        self.heldout = heldout
        self.loss = loss
        self.track_blocks = None if track_blocks is None else list(track_blocks)
        self.svd_blocks = list(svd_blocks)
        self.with_zeta = with_zeta
        self.step_eta = step_eta

    def __call__(self, epoch: int, model: DeepCPFactorization, grad_tensor: SparseEntrySet,
                 current_loss: float) -> DiagnosticsRecord:
        suffixes = [suffix_vectors(model, n) for n in range(model.order)]
        B = [s[0] for s in suffixes]
        test = None
        if self.heldout is not None and len(self.heldout):
            test = empirical_loss(model, self.heldout, self.loss, B)
        rec = DiagnosticsRecord(
            epoch=epoch,
            train_loss=float(current_loss),
            test_loss=test,
            epsilon=unbalancedness(model),
            shallow_norms=np.prod([np.linalg.norm(w, axis=1) for w in model.w], axis=0),
            deep_norms=np.prod([np.linalg.norm(b, axis=1) for b in B], axis=0),
            delta=delta_all(model, grad_tensor, B),
            alignment=alignment_all(model, grad_tensor, B),
        )
        if self.with_zeta:
            rec.zeta = zeta_all(model)
        if self.step_eta is not None:
            rec.step_rate = shallow_step_rate(model, gradient_from_tensor(model, grad_tensor).g_w,
                                              self.step_eta)
        if self.track_blocks is not None:
            w_sq, A_sq = squared_norms(model)
            rec.w_sq = w_sq[self.track_blocks]
            rec.A_sq = [a[self.track_blocks] for a in A_sq]
        if self.svd_blocks:
            folded = folded_gradients(grad_tensor, B)
            for n, r in self.svd_blocks:
                s, u, vt = product_matrix_svd(model, r, n)
                rec.top_singular_values[(n, r)] = s[:2].copy()
                # beta_1 = <-grad, ... (x) u1 v1^T w (x) ...> = -(u1 . g)(v1 . w)
                rec.beta[(n, r)] = float(-(u[:, 0] @ folded[n][r]) * (vt[0] @ model.w[n][r]))
                rec.chain_balance[(n, r)] = _chain_balance(model, r, n)
        return rec


def shallow_step_rate(model: DeepCPFactorization, g_w: Sequence[np.ndarray], eta: float) -> np.ndarray:
    """(s(w - eta g) - s(w)) / eta for every block's shallow norm s = prod_n ||w_n||.

    Uses ||w - eta g||^2 = ||w||^2 (1 + x), x = (-2 eta <w, g> + eta^2 ||g||^2) / ||w||^2,
    through log1p/expm1, so the change is resolved far below the spacing of
    the floating point numbers that store s itself.
    """
    log_ratio = np.zeros(model.num_blocks)
    for w, g in zip(model.w, g_w):
        wsq = np.sum(w * w, axis=1)
        x = (-2 * eta * np.sum(w * g, axis=1) + eta ** 2 * np.sum(g * g, axis=1)) / wsq
        log_ratio += 0.5 * np.log1p(x)
    s = np.prod([np.linalg.norm(w, axis=1) for w in model.w], axis=0)
    return s * np.expm1(log_ratio) / eta


def _chain_balance(model: DeepCPFactorization, r: int, n: int) -> float:
    """max_i ||A_i^T A_i - A_{i+1} A_{i+1}^T||, relative to ||A_i||^2."""
    worst = 0.0
    for i in range(model.depths[n] - 1):
        a, b = model.A[n][r, i], model.A[n][r, i + 1]
        gap = np.linalg.norm(a.T @ a - b @ b.T)
        scale = max(np.linalg.norm(a) ** 2, 1e-300)
        worst = max(worst, gap / scale)
    return float(worst)


def _diag_records(traj) -> list:
    recs = [r for r in traj.records if isinstance(r, DiagnosticsRecord)]
    if not recs:
        raise ValueError("trajectory has no diagnostics records")
    return recs


def _eta(traj) -> float:
    return traj.config.learning_rate


def _require_dense(recs):
    epochs = np.array([r.epoch for r in recs])
    if len(epochs) < 3 or np.any(np.diff(epochs) != 1):
        raise ValueError("this check needs a densely logged trajectory (log_every=1, >= 3 records)")


def check_conservation(traj) -> CheckResult:
    """Drift of every squared-norm difference within each tracked block.

    Under gradient flow all of these differences are constant; under gradient
    descent they drift at a rate that vanishes with the step size.
    """
    recs = _diag_records(traj)
    if len(recs) < 2 or recs[0].w_sq is None:
        raise ValueError("conservation check needs >= 2 records with tracked squared norms")

    def stacked(rec):
        return np.concatenate([rec.w_sq] + [a for a in rec.A_sq if a.shape[1]], axis=1)

    base = stacked(recs[0])
    nw = recs[0].w_sq.shape[1]
    iu = np.triu_indices(base.shape[1], k=1)
    base_diff = base[:, iu[0]] - base[:, iu[1]]
    drift = np.zeros_like(base_diff)
    for rec in recs[1:]:
        cur = stacked(rec)
        drift = np.maximum(drift, np.abs(cur[:, iu[0]] - cur[:, iu[1]] - base_diff))
    kinds = np.where(iu[0] < nw, np.where(iu[1] < nw, "vector-vector", "vector-matrix"), "matrix-matrix")
    by_family = {fam: float(drift[:, kinds == fam].max()) if np.any(kinds == fam) else 0.0
                 for fam in ("matrix-matrix", "vector-vector", "vector-matrix")}
    stat = float(drift.max()) if drift.size else 0.0
    return CheckResult("conservation", True, stat, float("nan"),
                       params={"eta": _eta(traj), "epochs": recs[-1].epoch},
                       details={"max_drift_by_family": by_family, "pair_drift": drift.tolist()})


def check_dynamics(traj, r: int, floor: float = 1e-3, tolerance: float = 0.05,
                   balance_tol: float = 1e-12) -> CheckResult:
    """Compare the measured rate of the shallow block norm with the predicted rate.

    The measured rate is the recorded one-step rate when the trajectory has
    it, and otherwise a central difference of the logged norms (which needs
    ``log_every=1``).
    """
    recs = _diag_records(traj)
    stepwise = all(rec.step_rate is not None for rec in recs)
    if not stepwise:
        _require_dense(recs)
    if recs[0].epsilon > balance_tol:
        raise ValueError(f"dynamics check needs a balanced start (epsilon(0)={recs[0].epsilon:.3e} "
                         f"> {balance_tol:.0e}); the rate law only holds when all parameter norms agree")
    N = len(traj.meta["dims"])
    depths = traj.meta["depths"]
    p = dynamics_exponent(N, depths)
    eta = _eta(traj)
    s = np.array([rec.shallow_norms[r] for rec in recs])
    errs = []
    for t in range(0 if stepwise else 1, len(recs) if stepwise else len(recs) - 1):
        d = recs[t].delta[r]
        if d is None or s[t] < floor:
            continue
        if stepwise:
            measured = recs[t].step_rate[r]
        else:
            measured = (s[t + 1] - s[t - 1]) / (2 * eta)
        predicted = N * d * s[t] ** p
        errs.append(abs(measured - predicted) / max(abs(predicted), 1e-300))
    if not errs:
        raise ValueError(f"no usable epochs for block {r} (norm below floor {floor})")
    errs = np.array(errs)
    med = float(np.median(errs))
    return CheckResult(f"dynamics[r={r}]", med <= tolerance, med, tolerance,
                       params={"eta": eta, "exponent": p, "floor": floor, "order": N, "depths": list(depths)},
                       details={"max_rel_error": float(errs.max()), "epochs_used": int(errs.size),
                                "measurement": "one-step" if stepwise else "central difference"})


def check_norm_bound(model: DeepCPFactorization, tolerance: float = 1e-3,
                     balance_tol: float = 1e-10) -> CheckResult:
    """Deep norm <= shallow norm ** (1 + sum(k)/N) for every block of a balanced model."""
    from .cp_model import deep_block_norms, shallow_block_norms

    eps = unbalancedness(model)
    scale = max(float(np.max(squared_norms(model)[0])), 1e-300)
    if eps > balance_tol * scale:
        return CheckResult("norm_bound", True, float("nan"), tolerance,
                           params={"skipped": True, "epsilon": eps},
                           details={"reason": "inapplicable: parameters are not balanced"})
    ratios = _bound_ratios(deep_block_norms(model), shallow_block_norms(model),
                           norm_bound_exponent(model.order, model.depths))
    worst = float(np.nanmax(ratios))
    return CheckResult("norm_bound", worst <= 1 + tolerance, worst, 1 + tolerance,
                       params={"skipped": False, "epsilon": eps}, details={"ratios": ratios.tolist()})


def _bound_ratios(deep, shallow, expo):
    deep, shallow = np.asarray(deep, float), np.asarray(shallow, float)
    bound = shallow ** expo
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(bound > 0, deep / bound, np.where(deep > 0, np.inf, 0.0))


def check_norm_bound_trajectory(traj, tolerance: float = 1e-3, balance_tol: float = 1e-12) -> CheckResult:
    recs = _diag_records(traj)
    if recs[0].epsilon > balance_tol:
        return CheckResult("norm_bound_trajectory", True, float("nan"), 1 + tolerance,
                           params={"skipped": True, "epsilon0": recs[0].epsilon})
    N = len(traj.meta["dims"])
    expo = norm_bound_exponent(N, traj.meta["depths"])
    worst = max(float(np.nanmax(_bound_ratios(rec.deep_norms, rec.shallow_norms, expo))) for rec in recs)
    return CheckResult("norm_bound_trajectory", worst <= 1 + tolerance, worst, 1 + tolerance,
                       params={"skipped": False, "exponent": expo, "records": len(recs)})


def check_singular_dynamics(traj, r: int, n: int, tolerance: float = 0.05,
                            rank_tol: float = 1e-8, balance_tol: float = 1e-10) -> CheckResult:
    """Leading singular value of the product matrix versus k * sigma^(2(1 - 1/k)) * beta."""
    recs = _diag_records(traj)
    _require_dense(recs)
    key = (n, r)
    if key not in recs[0].top_singular_values:
        raise ValueError(f"trajectory did not record singular values for mode {n}, block {r}")
    if recs[0].chain_balance[key] > balance_tol:
        raise ValueError("singular-value dynamics need A_i^T A_i = A_{i+1} A_{i+1}^T at the start; "
                         f"residual is {recs[0].chain_balance[key]:.3e}")
    k = traj.meta["depths"][n]
    eta = _eta(traj)
    sig = np.array([rec.top_singular_values[key][0] for rec in recs])
    sig2 = np.array([rec.top_singular_values[key][1] if len(rec.top_singular_values[key]) > 1 else 0.0
                     for rec in recs])
    expo = 2.0 * (1.0 - 1.0 / k)
    errs = []
    for t in range(1, len(recs) - 1):
        measured = (sig[t + 1] - sig[t - 1]) / (2 * eta)
        predicted = k * sig[t] ** expo * recs[t].beta[key]
        errs.append(abs(measured - predicted) / max(abs(predicted), 1e-300))
    errs = np.array(errs)
    med = float(np.median(errs))
    rank_ratio = float(np.max(sig2 / np.maximum(sig, 1e-300)))
    return CheckResult(f"singular_dynamics[n={n},r={r}]", med <= tolerance, med, tolerance,
                       params={"eta": eta, "depth": k, "exponent": expo},
                       details={"max_rel_error": float(errs.max()), "max_sigma2_over_sigma1": rank_ratio,
                                "rank_one_preserved": rank_ratio <= rank_tol})


def growth_ordering_holds(record: DiagnosticsRecord, order: int, depths: Sequence[int]) -> bool:
    """Among blocks with positive delta: larger norm and no smaller delta => no slower predicted growth."""
    p = dynamics_exponent(order, depths)
    items = [(s, d) for s, d in zip(record.shallow_norms, record.delta) if d is not None and d > 0]
    for sa, da in items:
        for sb, db in items:
            if sa > sb and da >= db and order * da * sa ** p < order * db * sb ** p:
                return False
    return True


def report_json(results: Sequence[CheckResult]) -> str:
    def clean(x):
        if isinstance(x, float) and not np.isfinite(x):
            return None
        if isinstance(x, dict):
            return {str(k): clean(v) for k, v in x.items()}
        if isinstance(x, (list, tuple)):
            return [clean(v) for v in x]
        if isinstance(x, (np.floating, np.integer, np.bool_)):
            return clean(x.item())
        return x

    return json.dumps([clean(asdict(r)) for r in results], indent=2)


def report_table(results: Sequence[CheckResult]) -> str:
    rows = [("check", "result", "statistic", "tolerance")]
    for r in results:
        rows.append((r.name, "pass" if r.passed else "FAIL", f"{r.statistic:.4g}", f"{r.tolerance:.4g}"))
    widths = [max(len(row[j]) for row in rows) for j in range(4)]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(row, widths)) for row in rows)
