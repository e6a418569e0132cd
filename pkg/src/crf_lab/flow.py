"""Time integration of Conformal Ricci Flow,

    dg/dt = -2 Ric + 2 (s0/n) g - 2 p g,   ((n-1) Delta + s0) p = -|Ric - (s0/n) g|^2,

by classical RK4 with a fresh pressure solve on every stage metric.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from crf_lab.elliptic import (
    LinePreconditioner,
    PRESSURE_MAX_ITER,
    PRESSURE_TOL,
    YAMABE_MAX_ITER,
    YAMABE_TOL,
    solve_compatible_pressure,
    solve_pressure,
    yamabe_normalize,
)
from crf_lab.errors import CRFError, FlowError
from crf_lab.geometry import clear_curvature, curvature
from crf_lab.grid import MetricField, TensorField, integrate, scalar_field

log = logging.getLogger(__name__)

RicciHook = Callable[[MetricField, float], TensorField]

# "compatible": the discrete scalar curvature is exactly stationary under the
# semi-discrete flow; "standard": the divergence-form operator L of elliptic.
PRESSURE_FORMS = ("compatible", "standard")


def einstein_stub(g: MetricField, s0: float) -> TensorField:
    """Stand-in curvature with Ric = (s0/n) g, making every metric a fixed point."""
    return g.tensor() * (s0 / g.dim)


@dataclass(frozen=True)
class FlowSettings:
    pressure_tol: float = PRESSURE_TOL
    pressure_max_iter: int = PRESSURE_MAX_ITER
    yamabe_tol: float = YAMABE_TOL
    yamabe_max_iter: int = YAMABE_MAX_ITER
    constraint_ceiling: float = 1e-4
    cfl_coefficient: float = 0.6
    reproject_every: int = 0
    pressure_form: str = "compatible"
    ricci_hook: RicciHook | None = None

    def __post_init__(self):
        if self.pressure_form not in PRESSURE_FORMS:
            raise ValueError(f"pressure_form must be one of {PRESSURE_FORMS}")

    def ricci(self, g: MetricField, s0: float) -> TensorField:
        return curvature(g).ricci if self.ricci_hook is None else self.ricci_hook(g, s0)

    def scalar(self, g: MetricField, s0: float) -> np.ndarray:
        if self.ricci_hook is None:
            return curvature(g).scalar_array
        ric = self.ricci_hook(g, s0)
        return np.einsum("...jk,...jk->...", g.inv, ric.data)

    def dt_ceiling(self, g: MetricField) -> float:
        """Largest admissible step, cfl * min spacing^2 * smallest metric eigenvalue."""
        h = min(g.grid.spacing)
        return self.cfl_coefficient * h * h * g.min_eigenvalue


DEFAULT_SETTINGS = FlowSettings()


class PressureSolver:
    """Pressure solves in the configured form, reusing one line preconditioner
    until GMRES needs more than ``rebuild_after`` iterations."""

    rebuild_after = 12

    def __init__(self, settings: FlowSettings = DEFAULT_SETTINGS):
        self.settings = settings
        self._pre: LinePreconditioner | None = None

    def __call__(self, g: MetricField, s0: float, x0: TensorField | None = None):
        st = self.settings
        if st.ricci_hook is not None or st.pressure_form == "standard":
            return solve_pressure(
                g, s0, st.pressure_tol, st.pressure_max_iter, x0=x0, ricci=_hook_ricci(g, s0, st)
            )
        if self._pre is None:
            self._pre = LinePreconditioner(g)
        p, rep = solve_compatible_pressure(g, s0, st.pressure_tol, st.pressure_max_iter, x0, self._pre)
        if rep.iterations > self.rebuild_after:
            self._pre = None
        return p, rep


@dataclass(frozen=True)
class FlowState:
    g: MetricField
    p: TensorField
    t: float
    s0: float

    @property
    def grid(self):
        return self.g.grid


def initial_state(
    g: MetricField, s0: float, settings: FlowSettings = DEFAULT_SETTINGS, t: float = 0.0
) -> FlowState:
    p, _ = PressureSolver(settings)(g, s0)
    return FlowState(g, p, t, s0)


def _hook_ricci(g: MetricField, s0: float, settings: FlowSettings) -> TensorField | None:
    return None if settings.ricci_hook is None else settings.ricci_hook(g, s0)


def compute_V(
    g: MetricField, p: TensorField, s0: float, ricci: TensorField | None = None
) -> TensorField:
    """V = Ric - (s0/n) g + p g."""
    ric = curvature(g).ricci if ricci is None else ricci
    gt = g.tensor()
    return ric - gt * (s0 / g.dim) + gt * p


def crf_rhs(
    g: MetricField, p: TensorField, s0: float, ricci: TensorField | None = None
) -> TensorField:
    """dg/dt = -2 Ric + 2 (s0/n) g - 2 p g  (= -2 V)."""
    return compute_V(g, p, s0, ricci) * -2.0


def constraint_drift(state: FlowState, settings: FlowSettings = DEFAULT_SETTINGS) -> float:
    return float(np.max(np.abs(settings.scalar(state.g, state.s0) - state.s0)))


def trace_law_residual(state: FlowState, settings: FlowSettings = DEFAULT_SETTINGS) -> float:
    """sup | 1/2 tr_g(dg/dt) + n p + (s - s0) |."""
    g, s0 = state.g, state.s0
    rate = crf_rhs(g, state.p, s0, _hook_ricci(g, s0, settings)).data
    half_trace = 0.5 * np.einsum("...ij,...ij->...", g.inv, rate)
    res = half_trace + g.dim * state.p.data + settings.scalar(g, s0) - s0
    return float(np.max(np.abs(res)))


@dataclass
class StepReport:
    pressure_iterations: list[int]
    trace_law: float
    drift: float


def step(
    state: FlowState,
    dt: float,
    settings: FlowSettings = DEFAULT_SETTINGS,
    solver: PressureSolver | None = None,
) -> tuple[FlowState, StepReport]:
    """One classical RK4 step with a pressure solve on every stage metric.

    Raises :class:`FlowError` when ``dt`` exceeds the stability ceiling, on
    pressure failure or on loss of positive definiteness; the input state is
    never modified.
    """
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    ceiling = settings.dt_ceiling(state.g)
    if dt > ceiling * (1 + 1e-12):
        raise FlowError(f"dt={dt:g} exceeds the stability ceiling {ceiling:g}", t=state.t)
    g0, s0, grid = state.g, state.s0, state.grid
    solver = PressureSolver(settings) if solver is None else solver
    iters = []

    def stage_pressure(g: MetricField, warm: TensorField) -> TensorField:
        p, rep = solver(g, s0, warm)
        iters.append(rep.iterations)
        return p

    def rate(g: MetricField, p: TensorField) -> np.ndarray:
        return crf_rhs(g, p, s0, _hook_ricci(g, s0, settings)).data

    try:
        k1 = rate(g0, state.p)
        g2 = MetricField(g0.g + 0.5 * dt * k1, grid)
        p2 = stage_pressure(g2, state.p)
        k2 = rate(g2, p2)
        g3 = MetricField(g0.g + 0.5 * dt * k2, grid)
        p3 = stage_pressure(g3, p2)
        k3 = rate(g3, p3)
        g4 = MetricField(g0.g + dt * k3, grid)
        p4 = stage_pressure(g4, p3)
        k4 = rate(g4, p4)
        g_new = MetricField(g0.g + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4), grid)
        p_new = stage_pressure(g_new, p4)
    except CRFError as exc:
        raise FlowError(f"step from t={state.t:g} failed: {exc}", t=state.t) from exc
    new = FlowState(g_new, p_new, state.t + dt, s0)
    report = StepReport(iters, trace_law_residual(new, settings), constraint_drift(new, settings))
    return new, report


def reproject(
    state: FlowState, settings: FlowSettings = DEFAULT_SETTINGS, solver: PressureSolver | None = None
) -> tuple[FlowState, float]:
    """Conformally restore s = s0; returns the new state and sup|g_new - g_old|."""
    drift = constraint_drift(state, settings)
    if drift > 1e-2:
        raise FlowError(f"drift {drift:.3e} is outside the reprojection basin", t=state.t, drift=drift)
    if drift <= settings.yamabe_tol:
        return state, 0.0
    try:
        g_new, _ = yamabe_normalize(state.g, state.s0, settings.yamabe_tol, settings.yamabe_max_iter)
        p_new, _ = (solver or PressureSolver(settings))(g_new, state.s0, state.p)
    except CRFError as exc:
        raise FlowError(f"reprojection failed: {exc}", t=state.t, drift=drift) from exc
    correction = float(np.max(np.abs(g_new.g - state.g.g)))
    return FlowState(g_new, p_new, state.t, state.s0), correction


# ---------------------------------------------------------------- runs


@dataclass
class MonitorRow:
    t: float
    vol: float
    drift_sup: float
    p_l2: float
    steps_accepted: int


@dataclass
class Trajectory:
    snapshots: list[FlowState]
    scheme: str
    dt: float
    monitors: list[MonitorRow] = field(default_factory=list)
    trace_law_max: float = 0.0
    aborted: str | None = None

    @property
    def times(self) -> list[float]:
        return [s.t for s in self.snapshots]

    @property
    def final(self) -> FlowState:
        return self.snapshots[-1]

    def at(self, t: float, tol: float = 1e-9) -> FlowState:
        for s in self.snapshots:
            if abs(s.t - t) <= tol:
                return s
        raise KeyError(f"no snapshot at t={t}")


def _monitor(state: FlowState, steps: int, settings: FlowSettings) -> MonitorRow:
    p2 = integrate(scalar_field(state.p.data**2, state.grid), state.g)
    return MonitorRow(state.t, state.g.volume(), constraint_drift(state, settings), math.sqrt(p2), steps)


def run(
    initial: FlowState,
    T: float,
    dt: float,
    outputs: Sequence[float] | None = None,
    settings: FlowSettings = DEFAULT_SETTINGS,
    scheme: str = "rk4",
) -> Trajectory:
    """Integrate from ``initial`` to ``initial.t + T``; snapshot at the requested output times.

    Output times are relative to the start and must be multiples of ``dt``.
    When the constraint drift exceeds ``settings.constraint_ceiling`` the run
    stops and the partial trajectory is returned with ``aborted`` set.
    """
    if T < 0:
        raise ValueError("T must be non-negative")
    nsteps = int(round(T / dt)) if T > 0 else 0
    if T > 0 and abs(nsteps * dt - T) > 1e-9 * max(1.0, T):
        raise ValueError(f"T={T} is not a multiple of dt={dt}")
    wanted = set()
    for t_out in outputs or ():
        if not -1e-12 <= t_out <= T + 1e-12:
            raise ValueError(f"output time {t_out} outside [0, {T}]")
        k = int(round(t_out / dt))
        if abs(k * dt - t_out) > 1e-9:
            raise ValueError(f"output time {t_out} is not on the dt={dt} lattice")
        wanted.add(k)
    traj = Trajectory([initial], scheme, dt, [_monitor(initial, 0, settings)])
    solver = PressureSolver(settings)
    state = initial
    t0 = initial.t
    for k in range(1, nsteps + 1):
        prev = state
        try:
            state, rep = step(state, dt, settings, solver)
        except FlowError as exc:
            exc.partial = traj
            raise
        state = FlowState(state.g, state.p, t0 + k * dt, state.s0)
        clear_curvature(prev.g)
        if settings.reproject_every and k % settings.reproject_every == 0:
            state, _ = reproject(state, settings, solver)
            rep.drift = constraint_drift(state, settings)
        traj.trace_law_max = max(traj.trace_law_max, rep.trace_law)
        if rep.drift > settings.constraint_ceiling:
            traj.aborted = f"constraint drift {rep.drift:.3e} exceeded ceiling at t={state.t:g}"
            traj.snapshots.append(state)
            traj.monitors.append(_monitor(state, k, settings))
            log.warning(traj.aborted)
            return traj
        if k in wanted or k == nsteps:
            traj.snapshots.append(state)
            traj.monitors.append(_monitor(state, k, settings))
    return traj
