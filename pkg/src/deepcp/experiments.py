"""Single training runs and resumable grid sweeps.

A sweep writes one row per grid point to ``summary.csv``. Rows are appended
by the parent process only, as runs finish, so an interrupted sweep can be
restarted and will skip every run id already present.
"""

from __future__ import annotations

import csv
import itertools
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .cp_model import (BalancedRankOne, DiagonalBoosted, GaussianIID, init_model,
                       save_checkpoint)
from .data_io import CompletionDataset, load_dataset
from .diagnostics import DiagnosticsHook, effective_rank, unbalancedness
from .trainer import DIVERGED, TrainConfig, test_loss, train, write_trajectory_csv

log = logging.getLogger(__name__)

WORKERS_ENV = "DEEPCP_WORKERS"

SUMMARY_COLUMNS = [
    "run_id", "depth", "sigma_w", "sigma_A", "alpha", "seed", "init", "scale",
    "learning_rate", "epochs", "final_train_loss", "final_test_loss",
    "effective_rank", "n1", "n2", "epsilon_initial", "epsilon_final", "status",
]


@dataclass(frozen=True)
class InitSpec:
    """Init scheme as given on the command line.

    ``scale`` says how ``sigma_w``/``sigma_A`` are read: ``"std"`` uses them
    as standard deviations, ``"variance"`` takes their square roots first.
    A pair such as ``"variance,std"`` gives the reading of ``sigma_w`` and of
    ``sigma_A`` separately.
    """

    kind: str = "diagonal"
    sigma_w: float = 0.01
    sigma_A: float = 0.01
    alpha: float = 1.0
    rho: float = 0.2
    scale: str = "std"

    def __post_init__(self):
        if self.kind not in ("gaussian", "diagonal", "rank1"):
            raise ValueError(f"unknown init kind {self.kind!r}")
        parts = self.scale.split(",")
        if len(parts) not in (1, 2) or any(p not in ("std", "variance") for p in parts):
            raise ValueError(f"scale must be 'std', 'variance' or a pair like 'variance,std', got {self.scale!r}")

    @property
    def scales(self) -> tuple[str, str]:
        parts = self.scale.split(",")
        return parts[0], parts[-1]

    def stds(self) -> tuple[float, float]:
        """Standard deviations of the w and A entries."""
        return tuple(float(np.sqrt(v)) if how == "variance" else float(v)
                     for v, how in zip((self.sigma_w, self.sigma_A), self.scales))

    def scheme(self):
        std_w, std_A = self.stds()
        if self.kind == "gaussian":
            return GaussianIID(std_w, std_A)
        if self.kind == "diagonal":
            return DiagonalBoosted(std_w, std_A, self.alpha)
        return BalancedRankOne(self.rho)


@dataclass(frozen=True)
class RunSpec:
    dataset: str
    depths: tuple
    num_blocks: int = 100
    init: InitSpec = field(default_factory=InitSpec)
    config: TrainConfig = field(default_factory=TrainConfig)
    out_dir: Optional[str] = None
    rank_threshold: float = 1.0

    @property
    def run_id(self) -> str:
        return run_id_for(self.depths, self.init, self.config)


def run_id_for(depths, init: InitSpec, config: TrainConfig) -> str:
    d = "-".join(str(k) for k in depths) if len(set(depths)) > 1 else str(depths[0])
    if init.kind == "rank1":
        body = f"rho{init.rho:g}"
    else:
        body = f"sw{init.sigma_w:g}_sa{init.sigma_A:g}_a{init.alpha:g}"
    scale = "-".join(init.scales) if init.scales[0] != init.scales[1] else init.scales[0]
    return f"k{d}_{init.kind}_{body}_{scale}_lr{config.learning_rate:g}_e{config.max_epochs}_s{config.seed}"


def format_cell(x) -> str:
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


def execute(spec: RunSpec, dataset: Optional[CompletionDataset] = None) -> dict:
    """Train one model and return its summary row (also written to ``out_dir``)."""
    data = dataset if dataset is not None else load_dataset(spec.dataset)
    depths = tuple(spec.depths)
    if len(depths) == 1:
        depths = depths * len(data.shape)
    if len(depths) != len(data.shape):
        raise ValueError(f"depths {depths} do not match a tensor of order {len(data.shape)}")
    model = init_model(spec.init.scheme(), data.shape, spec.num_blocks, depths, spec.config.seed)
    eps0 = unbalancedness(model)
    hook = DiagnosticsHook(heldout=data.heldout if len(data.heldout) else None)
    traj = train(model, data, spec.config, hook=hook, init=spec.init)
    diverged = traj.status == DIVERGED
    rep = effective_rank(model, spec.rank_threshold) if not diverged else None
    row = {
        "run_id": spec.run_id,
        "depth": depths[0] if len(set(depths)) == 1 else "-".join(map(str, depths)),
        "sigma_w": spec.init.sigma_w,
        "sigma_A": spec.init.sigma_A,
        "alpha": spec.init.alpha,
        "seed": spec.config.seed,
        "init": spec.init.kind,
        "scale": spec.init.scale,
        "learning_rate": spec.config.learning_rate,
        "epochs": traj.final_epoch,
        "final_train_loss": traj.final.train_loss,
        "final_test_loss": (test_loss(model, data.heldout) if len(data.heldout) and not diverged
                            else float("nan")),
        "effective_rank": rep.effective_rank if rep else -1,
        "n1": rep.n1 if rep else -1,
        "n2": rep.n2 if rep else -1,
        "epsilon_initial": eps0,
        "epsilon_final": unbalancedness(model) if not diverged else float("nan"),
        "status": traj.status,
    }
    if spec.out_dir:
        out = Path(spec.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        if any(hasattr(r, "deep_norms") for r in traj.records):
            write_trajectory_csv(traj, out / "trajectory.csv")
        if not diverged:
            save_checkpoint(model, out / "model.ckpt")
        (out / "summary.json").write_text(json.dumps({k: _jsonable(v) for k, v in row.items()}, indent=2))
    return row


def _jsonable(v):
    if isinstance(v, (np.floating, float)):
        return None if not np.isfinite(v) else float(v)
    if isinstance(v, np.integer):
        return int(v)
    return v


@dataclass(frozen=True)
class SweepGrid:
    depths: Sequence[int]
    sigma_w: Sequence[float]
    sigma_A: Sequence[float]
    seeds: Sequence[int]
    alpha: Sequence[float] = (1.0,)
    kind: str = "diagonal"
    scale: str = "std"
    learning_rate: float = 1e-2
    lr_by_depth: dict = field(default_factory=dict)
    max_epochs: int = 10000
    log_every: int = 500
    num_blocks: int = 100

    def specs(self, dataset: str, out_dir: Optional[str] = None) -> list[RunSpec]:
        out = []
        for k, sw, sa, a, seed in itertools.product(self.depths, self.sigma_w, self.sigma_A,
                                                    self.alpha, self.seeds):
            init = InitSpec(self.kind, sw, sa, a, scale=self.scale)
            cfg = TrainConfig(learning_rate=self.lr_by_depth.get(k, self.learning_rate),
                              max_epochs=self.max_epochs, log_every=self.log_every, seed=seed)
            spec = RunSpec(dataset, (k,), self.num_blocks, init, cfg)
            if out_dir:
                spec = replace(spec, out_dir=str(Path(out_dir) / "runs" / spec.run_id))
            out.append(spec)
        return out


def equivalence_key(spec: RunSpec) -> tuple:
    """Runs with equal keys produce identical numbers.

    With every depth at zero there are no matrices, so sigma_A and alpha never
    touch the random stream or the model.
    """
    init = spec.init
    if all(k == 0 for k in spec.depths):
        init = replace(init, sigma_A=0.0, alpha=0.0)
    return (spec.depths, init, spec.config, spec.num_blocks)


def read_summary(path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        return []
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _append_row(path: Path, row: dict) -> None:
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SUMMARY_COLUMNS)
        if new:
            writer.writeheader()
        writer.writerow({k: format_cell(row[k]) for k in SUMMARY_COLUMNS})
        fh.flush()
        os.fsync(fh.fileno())


def _worker(spec: RunSpec) -> dict:
    try:
        return execute(spec)
    except Exception as exc:  # recorded per row; the sweep keeps going
        log.exception("run %s failed", spec.run_id)
        return {"run_id": spec.run_id, "error": f"{type(exc).__name__}: {exc}"}


def default_workers() -> int:
    env = os.environ.get(WORKERS_ENV)
    if env:
        n = int(env)
        if n < 1:
            raise ValueError(f"{WORKERS_ENV} must be a positive integer")
        return n
    return max(1, os.cpu_count() or 1)


def run_sweep(grid: SweepGrid, dataset: str, out_dir, workers: Optional[int] = None,
              progress=None) -> list[dict]:
    """Run every grid point not yet in ``out_dir/summary.csv``; return all rows."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary = out_dir / "summary.csv"
    done = {r["run_id"] for r in read_summary(summary)}
    specs = [s for s in grid.specs(dataset, str(out_dir)) if s.run_id not in done]

    groups: dict = {}
    for s in specs:
        groups.setdefault(equivalence_key(s), []).append(s)
    todo = [members[0] for members in groups.values()]
    workers = workers or default_workers()
    log.info("sweep: %d done, %d to run (%d distinct), %d workers",
             len(done), len(specs), len(todo), workers)

    def record(rep: RunSpec, row: dict):
        for s in groups[equivalence_key(rep)]:
            if "error" in row:
                full = {k: "" for k in SUMMARY_COLUMNS}
                full.update(run_id=s.run_id, depth=s.depths[0], sigma_w=s.init.sigma_w,
                            sigma_A=s.init.sigma_A, alpha=s.init.alpha, seed=s.config.seed,
                            init=s.init.kind, scale=s.init.scale,
                            learning_rate=s.config.learning_rate, status="error")
            else:
                full = dict(row, run_id=s.run_id, sigma_A=s.init.sigma_A, alpha=s.init.alpha)
            _append_row(summary, full)
            if progress:
                progress(full)

    if workers == 1:
        for s in todo:
            record(s, _worker(s))
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {pool.submit(_worker, s): s for s in todo}
            for fut in as_completed(futures):
                record(futures[fut], fut.result())
    return read_summary(summary)


def spec_to_dict(spec: RunSpec) -> dict:
    return {"dataset": spec.dataset, "depths": list(spec.depths), "num_blocks": spec.num_blocks,
            "init": asdict(spec.init), "config": asdict(spec.config), "out_dir": spec.out_dir}
