import numpy as np
import pytest

from crf_lab.elliptic import yamabe_normalize
from crf_lab.errors import FlowError
from crf_lab.flow import (
    FlowSettings,
    FlowState,
    compute_V,
    constraint_drift,
    crf_rhs,
    einstein_stub,
    initial_state,
    run,
    step,
    trace_law_residual,
)
from crf_lab.grid import GridSpec, scalar_field
from crf_lab.samples import base_metric

S0 = -1.0
GRID = GridSpec.cube(16)


@pytest.fixture(scope="module")
def start():
    g, _ = yamabe_normalize(base_metric(GRID, 1, strength=0.5), S0)
    return initial_state(g, S0)


def test_rhs_is_minus_twice_V(start):
    V = compute_V(start.g, start.p, S0)
    assert np.array_equal(crf_rhs(start.g, start.p, S0).data, -2.0 * V.data)


def test_initial_state_satisfies_constraint(start):
    assert constraint_drift(start) <= 1e-7
    assert trace_law_residual(start) <= 1e-10


def test_einstein_stub_is_a_fixed_point():
    g = base_metric(GRID, 2, strength=0.5)
    settings = FlowSettings(ricci_hook=einstein_stub)
    init = initial_state(g, S0, settings)
    assert np.all(init.p.data == 0.0)
    traj = run(init, 0.0015, 5e-4, settings=settings)
    assert np.array_equal(traj.final.g.g, g.g)
    assert traj.monitors[-1].vol == traj.monitors[0].vol


def test_step_keeps_trace_law_and_input(start):
    before = start.g.g.copy()
    new, rep = step(start, 1e-3)
    assert np.array_equal(start.g.g, before)
    assert new.t == pytest.approx(1e-3)
    assert rep.trace_law <= 1e-10
    assert len(rep.pressure_iterations) == 4
    assert rep.drift < 1e-4


def test_step_rejects_dt_above_ceiling(start):
    with pytest.raises(FlowError):
        step(start, 1.0)
    with pytest.raises(ValueError):
        step(start, -1e-3)


def test_run_validates_output_times(start):
    with pytest.raises(ValueError):
        run(start, 0.002, 1e-3, outputs=[0.0015])
    with pytest.raises(ValueError):
        run(start, 0.002, 1e-3, outputs=[0.01])
    with pytest.raises(ValueError):
        run(start, 0.0025, 1e-3)


def test_run_stores_requested_snapshots(start):
    traj = run(start, 0.002, 1e-3, outputs=[0.0, 0.001, 0.002])
    assert traj.times == pytest.approx([0.0, 0.001, 0.002])
    assert traj.at(0.002).t == pytest.approx(0.002)
    assert [m.steps_accepted for m in traj.monitors] == [0, 1, 2]
    with pytest.raises(KeyError):
        traj.at(0.5)


def test_run_aborts_at_ceiling(start):
    traj = run(start, 0.003, 1e-3, settings=FlowSettings(constraint_ceiling=1e-12))
    assert traj.aborted is not None
    assert traj.final.t == pytest.approx(1e-3)


def test_standard_pressure_form_runs(start):
    settings = FlowSettings(pressure_form="standard", constraint_ceiling=1.0)
    new, rep = step(start, 1e-3, settings)
    assert rep.trace_law <= 1e-10
    with pytest.raises(ValueError):
        FlowSettings(pressure_form="other")


def test_dt_ceiling_scales_with_eigenvalue(start):
    settings = FlowSettings(cfl_coefficient=0.5)
    h = GRID.spacing[0]
    assert settings.dt_ceiling(start.g) == pytest.approx(0.5 * h * h * start.g.min_eigenvalue)


def test_flowstate_grid(start):
    state = FlowState(start.g, scalar_field(np.zeros(GRID.shape), GRID), 0.0, S0)
    assert state.grid == GRID
