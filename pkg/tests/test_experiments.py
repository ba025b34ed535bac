import json

import numpy as np
import pytest

from deepcp.cp_model import load_checkpoint
from deepcp.data_io import generate_synthetic, save_dataset, split_observed
from deepcp.experiments import (SUMMARY_COLUMNS, InitSpec, RunSpec, SweepGrid, equivalence_key, execute,
                                read_summary, run_sweep)
from deepcp.report import best_loss_table, depth_rank_svg
from deepcp.trainer import TrainConfig, read_trajectory_csv


@pytest.fixture
def dataset_path(tmp_path):
    path = tmp_path / "ds.json"
    save_dataset(split_observed(generate_synthetic((4, 4, 3), 2, 1), 0.5, 1), path)
    return str(path)


def _grid(**kw):
    base = dict(depths=[0, 1], sigma_w=[0.3], sigma_A=[0.1, 0.2], seeds=[0, 1], kind="diagonal",
                learning_rate=0.05, max_epochs=30, log_every=10, num_blocks=5)
    base.update(kw)
    return SweepGrid(**base)


def test_init_spec_reading():
    assert InitSpec("gaussian", 0.04, 0.09, scale="variance").scheme().sigma_w == pytest.approx(0.2)
    assert InitSpec("gaussian", 0.04, 0.09).scheme().sigma_A == 0.09
    assert InitSpec("rank1", rho=0.3).scheme().rho == 0.3
    with pytest.raises(ValueError):
        InitSpec("uniform")
    with pytest.raises(ValueError):
        InitSpec(scale="log")
    with pytest.raises(ValueError):
        InitSpec(scale="std,variance,std")


def test_init_spec_scale_pair():
    scheme = InitSpec("diagonal", 0.04, 0.09, scale="variance,std").scheme()
    assert (scheme.sigma_w, scheme.sigma_A) == (pytest.approx(0.2), 0.09)
    assert InitSpec(scale="std,std").stds() == InitSpec(scale="std").stds()
    cfg = TrainConfig(0.1, 10, 5)
    ids = {RunSpec("d.json", (1,), 3, InitSpec(scale=s), cfg).run_id for s in ("std", "variance", "variance,std")}
    assert len(ids) == 3


def test_grid_arithmetic():
    g = SweepGrid(depths=range(6), sigma_w=[1, 2, 3], sigma_A=[1, 2, 3], seeds=range(5))
    specs = g.specs("d.json")
    assert len(specs) == 270
    assert len({s.run_id for s in specs}) == 270


def test_per_depth_learning_rate():
    specs = _grid(lr_by_depth={1: 0.01}).specs("d.json")
    assert {s.config.learning_rate for s in specs if s.depths == (1,)} == {0.01}
    assert {s.config.learning_rate for s in specs if s.depths == (0,)} == {0.05}


def test_depth_zero_runs_share_an_equivalence_class():
    specs = _grid().specs("d.json")
    keys = {equivalence_key(s) for s in specs}
    # depth 0: 2 seeds; depth 1: 2 sigma_A x 2 seeds
    assert len(keys) == 2 + 4


def test_execute_writes_outputs(tmp_path, dataset_path):
    spec = RunSpec(dataset_path, (1, 0, 1), 4, InitSpec("gaussian", 0.3, 0.3),
                   TrainConfig(0.05, 20, 5), out_dir=str(tmp_path / "run"))
    row = execute(spec)
    assert set(SUMMARY_COLUMNS) <= set(row)
    assert row["depth"] == "1-0-1" and row["status"] == "max_epochs"
    m = load_checkpoint(tmp_path / "run" / "model.ckpt")
    assert m.depths == (1, 0, 1)
    assert read_trajectory_csv(tmp_path / "run" / "trajectory.csv")["epoch"].tolist() == [0, 5, 10, 15, 20]
    saved = json.loads((tmp_path / "run" / "summary.json").read_text())
    assert saved["final_test_loss"] == row["final_test_loss"]


def test_execute_is_bitwise_repeatable(dataset_path):
    spec = RunSpec(dataset_path, (1,), 5, InitSpec("diagonal", 0.2, 0.1), TrainConfig(0.05, 40, 10, seed=3))
    a, b = execute(spec), execute(spec)
    for key in ("final_train_loss", "final_test_loss", "effective_rank", "epsilon_final"):
        assert a[key] == b[key]


def test_execute_rejects_depth_count(dataset_path):
    spec = RunSpec(dataset_path, (1, 1), 3, InitSpec(), TrainConfig(0.05, 2))
    with pytest.raises(ValueError, match="order"):
        execute(spec)


def test_diverged_run_is_a_row(dataset_path):
    spec = RunSpec(dataset_path, (2,), 4, InitSpec("gaussian", 1.0, 1.0), TrainConfig(80.0, 200))
    row = execute(spec)
    assert row["status"] == "diverged"
    assert np.isnan(row["final_test_loss"]) and row["effective_rank"] == -1


def test_resume_adds_no_duplicates(tmp_path, dataset_path):
    out = tmp_path / "sweep"
    grid = _grid()
    first = run_sweep(_grid(seeds=[0]), dataset_path, out, workers=1)
    assert len(first) == 4
    rows = run_sweep(grid, dataset_path, out, workers=1)
    assert len(rows) == 8
    assert len({r["run_id"] for r in rows}) == len(rows)
    again = run_sweep(grid, dataset_path, out, workers=1)
    assert again == rows


def test_pool_matches_serial(tmp_path, dataset_path):
    serial = run_sweep(_grid(), dataset_path, tmp_path / "a", workers=1)
    pooled = run_sweep(_grid(), dataset_path, tmp_path / "b", workers=2)
    key = lambda r: r["run_id"]  # noqa: E731
    assert sorted(serial, key=key) == sorted(pooled, key=key)


def test_failed_run_recorded_and_sweep_continues(tmp_path, dataset_path):
    bad = tmp_path / "missing.json"
    rows = run_sweep(_grid(depths=[1], sigma_A=[0.1], seeds=[0]), str(bad), tmp_path / "s", workers=1)
    assert [r["status"] for r in rows] == ["error"]


def test_summary_feeds_report(tmp_path, dataset_path):
    rows = run_sweep(_grid(), dataset_path, tmp_path / "s", workers=1)
    assert list(rows[0]) == SUMMARY_COLUMNS
    assert rows == read_summary(tmp_path / "s" / "summary.csv")
    assert depth_rank_svg(rows).startswith("<svg")
    table = best_loss_table({"50": rows})
    assert [line.split()[0] for line in table.splitlines()[2:]] == ["0", "1"]
