"""Binary tensor snapshots, trajectory sidecars and report tables.

Snapshot layout (little-endian): magic b"CRFL", u32 version, u32 dim,
u32 per-axis resolution, u32 covariant count, u32 contravariant count,
then the float64 components in storage order (node-major, index-minor).
"""

from __future__ import annotations

import csv
import json
import math
import struct
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from crf_lab.flow import FlowState, MonitorRow, Trajectory
from crf_lab.grid import GridSpec, TensorField

MAGIC = b"CRFL"
VERSION = 1
_HEADER = struct.Struct("<4s5I")

TRAJECTORY_COLUMNS = ("t", "vol", "drift_sup", "p_l2", "steps_accepted")
RESIDUAL_COLUMNS = ("check", "t", "residual", "order_est")


class SnapshotError(ValueError):
    pass


def write_snapshot(path: str | Path, field: TensorField) -> None:
    grid = field.grid
    res = set(grid.resolution)
    if len(res) != 1:
        raise SnapshotError("the snapshot format stores one per-axis resolution; grid is not cubic")
    cov, contra = field.valence
    if field.variance != "u" * contra + "d" * cov:
        raise SnapshotError(f"variance {field.variance!r} is not contravariant-first")
    header = _HEADER.pack(MAGIC, VERSION, grid.dim, res.pop(), cov, contra)
    data = np.ascontiguousarray(field.data, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(data.tobytes())


def read_snapshot(path: str | Path, period: float = 1.0) -> TensorField:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise SnapshotError("file too short for a snapshot header")
    magic, version, dim, res, cov, contra = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise SnapshotError(f"bad magic {magic!r}")
    if version != VERSION:
        raise SnapshotError(f"unsupported snapshot version {version}")
    grid = GridSpec.cube(res, dim, period)
    shape = grid.shape + (dim,) * (cov + contra)
    count = int(np.prod(shape))
    body = raw[_HEADER.size :]
    if len(body) != 8 * count:
        raise SnapshotError(f"expected {count} components, found {len(body) // 8}")
    data = np.frombuffer(body, dtype="<f8").reshape(shape).astype(float)
    return TensorField(data, "u" * contra + "d" * cov, grid)


def _fmt(x) -> str:
    if isinstance(x, float):
        return repr(x) if math.isfinite(x) else "nan"
    return str(x)


def write_csv(path: str | Path, columns: Iterable[str], rows: Iterable[Iterable]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(columns))
        for row in rows:
            w.writerow([_fmt(x) for x in row])


def read_csv(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_monitor_csv(path: str | Path, monitors: Iterable[MonitorRow]) -> None:
    write_csv(
        path,
        TRAJECTORY_COLUMNS,
        ((m.t, m.vol, m.drift_sup, m.p_l2, m.steps_accepted) for m in monitors),
    )


def write_trajectory(directory: str | Path, traj: Trajectory, prefix: str = "traj") -> list[Path]:
    """One g and one p snapshot per stored state plus the monitor CSV sidecar."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for k, state in enumerate(traj.snapshots):
        for name, field in (("g", state.g.tensor()), ("p", state.p)):
            path = directory / f"{prefix}_{k:05d}_{name}.crfl"
            write_snapshot(path, field)
            written.append(path)
    sidecar = directory / f"{prefix}.csv"
    write_monitor_csv(sidecar, traj.monitors)
    written.append(sidecar)
    return written


def write_residual_csv(path: str | Path, rows: Iterable[tuple[str, float, float, float]]) -> None:
    write_csv(path, RESIDUAL_COLUMNS, rows)


def write_summary_json(path: str | Path, summary: Mapping[str, Mapping[str, float]]) -> None:
    """``{identity: {max_residual, conv_order}}`` with NaN written as null."""

    def clean(v):
        if isinstance(v, float) and not math.isfinite(v):
            return None
        return v

    body = {k: {kk: clean(vv) for kk, vv in v.items()} for k, v in summary.items()}
    Path(path).write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")


def state_fields(state: FlowState) -> tuple[TensorField, TensorField]:
    return state.g.tensor(), state.p
