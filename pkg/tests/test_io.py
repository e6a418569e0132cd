import json
import struct

import numpy as np
import pytest

from crf_lab import io
from crf_lab.flow import MonitorRow, Trajectory
from crf_lab.grid import GridSpec, TensorField
from crf_lab.samples import random_metric, random_tensor

GRID = GridSpec.cube(8)


@pytest.mark.parametrize("variance", ["", "dd", "uu", "udd", "uddd"])
def test_snapshot_round_trip(tmp_path, variance):
    t = random_tensor(GRID, 1, variance) if variance else TensorField(np.arange(512.0).reshape(GRID.shape), "", GRID)
    path = tmp_path / "t.crfl"
    io.write_snapshot(path, t)
    back = io.read_snapshot(path)
    assert back.variance == t.variance
    assert np.array_equal(back.data, t.data)


def test_snapshot_header_layout(tmp_path):
    t = random_tensor(GRID, 2, "udd")
    path = tmp_path / "t.crfl"
    io.write_snapshot(path, t)
    raw = path.read_bytes()
    assert raw[:4] == b"CRFL"
    assert struct.unpack_from("<5I", raw, 4) == (1, 3, 8, 2, 1)
    assert len(raw) == 24 + 8 * t.data.size
    assert np.array_equal(np.frombuffer(raw[24:], "<f8"), t.data.ravel())


def test_snapshot_errors(tmp_path):
    with pytest.raises(io.SnapshotError):
        io.write_snapshot(tmp_path / "x", random_tensor(GRID, 3, "du"))
    noncubic = GridSpec(3, (8, 8, 16), (1.0, 1.0, 1.0))
    with pytest.raises(io.SnapshotError):
        io.write_snapshot(tmp_path / "x", random_tensor(noncubic, 3, "d"))
    bad = tmp_path / "bad"
    bad.write_bytes(b"XXXX" + bytes(20))
    with pytest.raises(io.SnapshotError):
        io.read_snapshot(bad)
    short = tmp_path / "short"
    io.write_snapshot(short, random_tensor(GRID, 3, "d"))
    short.write_bytes(short.read_bytes()[:-8])
    with pytest.raises(io.SnapshotError):
        io.read_snapshot(short)


def test_trajectory_files(tmp_path):
    from crf_lab.flow import FlowState
    from crf_lab.grid import scalar_field

    g = random_metric(GRID, 4, 0.1)
    st = FlowState(g, scalar_field(np.zeros(GRID.shape), GRID), 0.0, -1.0)
    traj = Trajectory([st, st], "rk4", 0.1, [MonitorRow(0.0, 1.0, 0.0, 0.0, 0), MonitorRow(0.1, 1.0, 1e-9, 0.0, 1)])
    files = io.write_trajectory(tmp_path, traj, "run")
    assert len(files) == 5
    rows = io.read_csv(tmp_path / "run.csv")
    assert list(rows[0]) == list(io.TRAJECTORY_COLUMNS)
    assert float(rows[1]["drift_sup"]) == 1e-9
    assert np.array_equal(io.read_snapshot(files[0]).data, g.g)


def test_residual_csv_and_summary(tmp_path):
    io.write_residual_csv(tmp_path / "r.csv", [("x", 0.0, 1.5e-3, float("nan"))])
    rows = io.read_csv(tmp_path / "r.csv")
    assert list(rows[0]) == list(io.RESIDUAL_COLUMNS)
    assert rows[0]["order_est"] == "nan"
    io.write_summary_json(tmp_path / "s.json", {"x": {"max_residual": 1.0, "conv_order": float("nan")}})
    assert json.loads((tmp_path / "s.json").read_text()) == {"x": {"max_residual": 1.0, "conv_order": None}}
