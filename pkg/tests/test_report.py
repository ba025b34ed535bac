import re

import numpy as np
import pytest

from deepcp.report import (ReportError, best_loss_table, block_norm_svg, depth_loss_svg, depth_rank_svg,
                           scatter_svg, usable_rows)


def _rows():
    rows = []
    for i, (depth, loss, rank) in enumerate([(0, 0.5, 40), (0, 0.02, 12), (1, 3e-4, 6), (1, 0.1, 9),
                                             (3, 1e-3, 5), (3, float("nan"), -1)]):
        rows.append({"run_id": f"r{i}", "depth": str(depth), "final_test_loss": repr(loss),
                     "effective_rank": str(rank), "status": "diverged" if rank < 0 else "max_epochs"})
    return rows


def test_usable_rows_drops_diverged_and_nan():
    rows = _rows()
    rows.append(dict(rows[0], run_id="x", status="error"))
    assert [r["run_id"] for r in usable_rows(rows)] == ["r0", "r1", "r2", "r3", "r4"]


def test_scatter_is_deterministic_per_seed():
    a = depth_rank_svg(_rows(), seed=3)
    assert a == depth_rank_svg(_rows(), seed=3)
    assert a != depth_rank_svg(_rows(), seed=4)
    assert a.count("<circle") == 5


def test_colorbar_prints_data_bounds():
    svg = depth_rank_svg(_rows())
    labels = re.findall(r">([0-9.e+-]+)</text>", svg)
    assert "0.5" in labels and "0.0003" in labels
    assert "test loss (log)" in svg


def test_log_axis_spans_decades():
    svg = depth_loss_svg(_rows())
    assert ">1e-04</text>" in svg and ">1e+00</text>" in svg


def test_empty_inputs_explain_themselves():
    with pytest.raises(ReportError, match="no usable rows"):
        depth_rank_svg([])
    with pytest.raises(ReportError, match="positive"):
        scatter_svg([0, 1], [0.0, -1.0], "t", "x", "y", ylog=True)
    with pytest.raises(ReportError):
        best_loss_table({})
    with pytest.raises(ReportError, match="no usable rows"):
        best_loss_table({"75": [dict(_rows()[-1])]})
    with pytest.raises(ReportError, match="block_norm_deep_"):
        block_norm_svg({"epoch": np.arange(3)})


def test_best_loss_table_layout():
    other = [dict(r, final_test_loss="1e-05") for r in _rows()[:2]]
    text = best_loss_table({"75": _rows(), "85": other})
    lines = text.splitlines()
    assert "effective rank" in lines[0]
    assert lines[1].split() == ["depth", "75", "85"]
    assert lines[2].split() == ["0", "2.000e-02", "(12)", "1.000e-05", "(40)"]
    assert lines[3].split() == ["1", "3.000e-04", "(6)", "-"]
    assert lines[4].split() == ["3", "1.000e-03", "(5)", "-"]


def test_block_norm_plot_one_line_per_block():
    traj = {"epoch": np.array([0.0, 10, 20]), "train_loss": np.ones(3),
            "block_norm_deep_4": np.array([0.1, 1.0, 2.0]), "block_norm_deep_7": np.array([0.1, 0.2, np.nan])}
    svg = block_norm_svg(traj)
    assert svg.count("<polyline") == 2
    assert "<title>4</title>" in svg
