"""Difference tensors between two flow solutions and the identities they obey.

For solutions (g, p) and (g~, p~) on one grid:

    h = g - g~,  A = Gamma - Gamma~,  S = Rm - Rm~ (valence (3,1)),  q = p - p~,
    U^a = g^{ab} nabla_b Rm~ - g~^{ab} nabla~_b Rm~.

Every "X * Y" shorthand is evaluated as the exact contraction it abbreviates,
so each identity is an equality whose residual is either rounding (the
identity is exact for the discrete pipeline) or truncation error of order 4.
Norms and the measure are those of the background metric g.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from crf_lab.elliptic import apply_L, h1_h2_norms, traceless_ricci_norm2
from crf_lab.flow import FlowState, Trajectory, compute_V, crf_rhs
from crf_lab.geometry import (
    covariant_derivative,
    curvature,
    divergence,
    gradient,
    laplace_beltrami,
    riemann_variation,
    tensor_laplacian,
)
from crf_lab.grid import (
    MetricField,
    ein,
    TensorField,
    integrate,
    norm_squared,
    scalar_field,
)

# E below this is treated as roundoff when there is no control run
ENERGY_FLOOR_MIN = 1e-24


def _sup(a: np.ndarray) -> float:
    return float(np.max(np.abs(a))) if a.size else 0.0


def ginv_difference_formula(g: MetricField, gt: MetricField) -> np.ndarray:
    """-g^{ik} g~^{jl} h_kl."""
    h = g.g - gt.g
    return -ein("...ik,...jl,...kl->...ij", g.inv, gt.inv, h)


def connection_difference(A: np.ndarray, t: TensorField) -> np.ndarray:
    """(nabla_a - nabla~_a) T, derivative slot first, for A^i_{ak} = Gamma - Gamma~.

    Each upper slot gains +A^i_{az} T^..z.., each lower slot -A^z_{ai} T_..z..
    """
    slots = "bcdefghijklm"[: t.rank]
    out = 0.0
    for s, kind in enumerate(t.variance):
        i = slots[s]
        src = slots[:s] + "z" + slots[s + 1 :]
        if kind == "u":
            out = out + np.einsum(f"...{i}az,...{src}->...a{slots}", A, t.data)
        else:
            out = out - np.einsum(f"...za{i},...{src}->...a{slots}", A, t.data)
    return out


@dataclass(frozen=True)
class DiffState:
    h: TensorField
    A: TensorField
    S: TensorField
    q: TensorField
    U: TensorField
    ginv_diff: TensorField
    t: float

    def sup_norms(self) -> dict[str, float]:
        return {k: getattr(self, k).sup_norm() for k in ("h", "A", "S", "q", "U", "ginv_diff")}


def _covariant_u(g: MetricField, gt: MetricField) -> TensorField:
    """U^a_{ijk}^l = g^{ab} nabla_b Rm~ - g~^{ab} nabla~_b Rm~, slots (a, l, i, j, k)."""
    rt = curvature(gt).riemann
    d_g = covariant_derivative(g, rt).data
    d_t = covariant_derivative(gt, rt).data
    u = np.einsum("...ab,...blijk->...alijk", g.inv, d_g) - np.einsum(
        "...ab,...blijk->...alijk", gt.inv, d_t
    )
    return TensorField(u, "uuddd", g.grid)


def diff_state(sol: FlowState, sol_t: FlowState, time_tol: float = 1e-12) -> DiffState:
    """All difference fields of two states at the same time."""
    if abs(sol.t - sol_t.t) > time_tol:
        raise ValueError(f"time mismatch: {sol.t} vs {sol_t.t}")
    if sol.grid != sol_t.grid:
        raise ValueError("states live on different grids")
    g, gt = sol.g, sol_t.g
    pk, pt = curvature(g), curvature(gt)
    grid = g.grid
    return DiffState(
        h=TensorField(g.g - gt.g, "dd", grid),
        A=TensorField(pk.gamma_array - pt.gamma_array, "udd", grid),
        S=TensorField(pk.riemann_array - pt.riemann_array, "uddd", grid),
        q=scalar_field(sol.p.data - sol_t.p.data, grid),
        U=_covariant_u(g, gt),
        ginv_diff=TensorField(g.inv - gt.inv, "uu", grid),
        t=sol.t,
    )


# ---------------------------------------------------------- static identities

ALGEBRAIC_IDENTITIES = ("ginv_difference",)
DIFFERENTIAL_IDENTITIES = (
    "connection_difference",
    "gradient_difference",
    "nabla_ginv_tilde",
    "nabla_h",
    "hessian_difference",
    "U_expansion",
    "U_divergence",
)


def lemma_residuals(
    g: MetricField, gt: MetricField, f: TensorField, X: TensorField
) -> dict[str, float]:
    """Sup-norm residual of each difference identity for a pair of metrics.

    ``f`` is a scalar test function and ``X`` a (1,1) test tensor.
    """
    if X.variance != "ud":
        raise ValueError("X must be a (1,1) tensor")
    grid = g.grid
    pk, pt = curvature(g), curvature(gt)
    A = pk.gamma_array - pt.gamma_array
    h = g.g - gt.g
    out = {}

    out["ginv_difference"] = _sup((g.inv - gt.inv) - ginv_difference_formula(g, gt))

    lhs = covariant_derivative(g, X).data - covariant_derivative(gt, X).data
    out["connection_difference"] = _sup(lhs - connection_difference(A, X))

    # gradient reading: (nabla - nabla~)^i f = (g^{ij} - g~^{ij}) d_j f
    grad_t = gradient(gt, f).data
    w = -ein("...ik,...kl,...l->...i", g.inv, h, grad_t)
    out["gradient_difference"] = _sup(gradient(g, f).data - gradient(gt, f).data - w)

    gti = gt.inverse_tensor()
    lhs = covariant_derivative(g, gti).data
    out["nabla_ginv_tilde"] = _sup(lhs - connection_difference(A, gti))

    # nabla h = -(nabla - nabla~) g~
    lhs = covariant_derivative(g, TensorField(h, "dd", grid)).data
    out["nabla_h"] = _sup(lhs + connection_difference(A, gt.tensor()))

    # nabla_a w^i, expanded by the product rule with nabla g^{-1} = 0
    w_field = TensorField(w, "u", grid)
    lhs = covariant_derivative(g, w_field).data  # [a, i]
    nab_h = -connection_difference(A, gt.tensor())  # [a, k, l]
    nab_grad = connection_difference(A, TensorField(grad_t, "u", grid)) + covariant_derivative(
        gt, TensorField(grad_t, "u", grid)
    ).data  # [a, l] = nabla_a (grad~ f)^l
    rhs = -ein("...ik,...akl,...l->...ai", g.inv, nab_h, grad_t) - ein(
        "...ik,...kl,...al->...ai", g.inv, h, nab_grad
    )
    out["hessian_difference"] = _sup(lhs - rhs)

    U = _covariant_u(g, gt)
    rt = pt.riemann
    d_t = covariant_derivative(gt, rt).data
    conn = connection_difference(A, rt)
    rhs = np.einsum("...ab,...blijk->...alijk", g.inv, conn) + np.einsum(
        "...ab,...blijk->...alijk", ginv_difference_formula(g, gt), d_t
    )
    out["U_expansion"] = _sup(U.data - rhs)

    r = pk.riemann
    W = np.einsum("...ab,...blijk->...alijk", g.inv, covariant_derivative(g, r).data) - np.einsum(
        "...ab,...blijk->...alijk", gt.inv, d_t
    )
    lhs = divergence(g, TensorField(W, "uuddd", grid)).data
    S = TensorField(pk.riemann_array - pt.riemann_array, "uddd", grid)
    rhs = divergence(g, U).data + tensor_laplacian(g, S).data
    out["U_divergence"] = _sup(lhs - rhs)
    return out


# ------------------------------------------------------- evolution equations


def riemann_rate(g: MetricField, p: TensorField, s0: float) -> np.ndarray:
    """Exact evolution of R^l_{ijk} under the flow, Laplacian form.

    dR = Delta R + g^{mr}(R_ir R^l_jmk + R_jr R^l_mik) + quadratic Riemann terms
         + Hessian-of-p terms + Rm.Ric terms + the (s0/n, p) terms, which vanish
           analytically by antisymmetry but are kept so the residual sees them.
    """
    n = g.dim
    pk = curvature(g)
    R, Ric, gi, gg = pk.riemann_array, pk.ricci_array, g.inv, g.g
    out = tensor_laplacian(g, pk.riemann).data.copy()
    out += ein("...mr,...ir,...ljmk->...lijk", gi, Ric, R)
    out += ein("...mr,...jr,...lmik->...lijk", gi, Ric, R)
    for sign, a, b in (
        (-1, "maij", "lmbk"),
        (-1, "maik", "ljbm"),
        (+1, "laim", "mjbk"),
        (-1, "maji", "lbmk"),
        (-1, "majk", "lbim"),
        (+1, "lajm", "mbik"),
    ):
        out += sign * ein(f"...ab,...{a},...{b}->...lijk", gi, R, R)
    H = covariant_derivative(g, covariant_derivative(g, p)).data
    out -= ein("...lm,...jm,...ik->...lijk", gi, gg, H)
    out += ein("...lm,...jk,...im->...lijk", gi, gg, H)
    out += ein("...lm,...im,...jk->...lijk", gi, gg, H)
    out -= ein("...lm,...ik,...jm->...lijk", gi, gg, H)
    out += ein("...lm,...rijk,...rm->...lijk", gi, R, Ric)
    out += ein("...lm,...rijm,...kr->...lijk", gi, R, Ric)
    pair = ein("...lm,...rijk,...rm->...lijk", gi, R, gg) + ein(
        "...lm,...rijm,...kr->...lijk", gi, R, gg
    )
    out += pair * (p.data[..., None, None, None, None] - s0 / n)
    return out


def christoffel_rate(g: MetricField, p: TensorField, s0: float) -> np.ndarray:
    """dGamma^k_ij = -g^{kl}(nabla_i V_jl + nabla_j V_il - nabla_l V_ij)."""
    V = compute_V(g, p, s0)
    dv = covariant_derivative(g, V).data  # [a, i, j]
    comb = np.einsum("...ijl->...lij", dv) + np.einsum("...jil->...lij", dv) - dv
    return -np.einsum("...kl,...lij->...kij", g.inv, comb)


def laplacian_difference_r5(g: MetricField, gt: MetricField) -> np.ndarray:
    """Delta R - Delta~ R~ assembled as nabla_a(W^a) + (nabla_a - nabla~_a) Y^a."""
    pk, pt = curvature(g), curvature(gt)
    A = pk.gamma_array - pt.gamma_array
    Y = np.einsum("...ab,...blijk->...alijk", gt.inv, covariant_derivative(gt, pt.riemann).data)
    W = np.einsum("...ab,...blijk->...alijk", g.inv, covariant_derivative(g, pk.riemann).data) - Y
    grid = g.grid
    div_w = divergence(g, TensorField(W, "uuddd", grid)).data
    conn = connection_difference(A, TensorField(Y, "uuddd", grid))  # [c, a, l, i, j, k]
    return div_w + np.einsum("...aalijk->...lijk", conn)


def laplacian_difference_direct(g: MetricField, gt: MetricField) -> np.ndarray:
    return tensor_laplacian(g, curvature(g).riemann).data - tensor_laplacian(gt, curvature(gt).riemann).data


def _bracket(traj: Trajectory, t: float, tol: float = 1e-9):
    times = traj.times
    for i, ti in enumerate(times):
        if abs(ti - t) <= tol:
            break
    else:
        raise ValueError(f"no snapshot at t={t}")
    if i == 0 or i == len(times) - 1:
        raise ValueError(f"t={t} is not interior to the trajectory")
    back, fwd = t - times[i - 1], times[i + 1] - t
    if abs(back - fwd) > tol:
        raise ValueError(f"snapshots around t={t} are not equally spaced")
    return traj.snapshots[i - 1], traj.snapshots[i], traj.snapshots[i + 1], back


def _pair_bracket(traj: Trajectory, traj_t: Trajectory, t: float):
    a = _bracket(traj, t)
    b = _bracket(traj_t, t)
    if abs(a[3] - b[3]) > 1e-12:
        raise ValueError("trajectories are sampled with different spacing")
    return a, b


def _centered(f, bracket) -> np.ndarray:
    prev, _, nxt, dt = bracket
    return (f(nxt) - f(prev)) / (2.0 * dt)


def h_rate(sol: FlowState, sol_t: FlowState) -> np.ndarray:
    """-2 S^k_kij + 2 (s0/n) h - 2 q g - 2 p~ h, with S^k_kij the Ricci difference."""
    n, s0 = sol.g.dim, sol.s0
    ric_diff = curvature(sol.g).ricci_array - curvature(sol_t.g).ricci_array
    h = sol.g.g - sol_t.g.g
    q = (sol.p.data - sol_t.p.data)[..., None, None]
    return -2.0 * ric_diff + 2.0 * (s0 / n) * h - 2.0 * q * sol.g.g - 2.0 * sol_t.p.data[..., None, None] * h


def h_evolution_residual(traj: Trajectory, traj_t: Trajectory, t: float) -> float:
    a, b = _pair_bracket(traj, traj_t, t)
    dh = _centered(lambda s: s.g.g, a) - _centered(lambda s: s.g.g, b)
    return _sup(dh - h_rate(a[1], b[1]))


def A_evolution_residual(traj: Trajectory, traj_t: Trajectory, t: float) -> float:
    a, b = _pair_bracket(traj, traj_t, t)

    def gamma(s):
        return curvature(s.g).gamma_array

    dA = _centered(gamma, a) - _centered(gamma, b)
    sol, sol_t = a[1], b[1]
    rhs = christoffel_rate(sol.g, sol.p, sol.s0) - christoffel_rate(sol_t.g, sol_t.p, sol_t.s0)
    return _sup(dA - rhs)


RIEMANN_RATE_FORMS = ("laplacian", "discrete")


def discrete_riemann_rate(g: MetricField, p: TensorField, s0: float) -> np.ndarray:
    """Exact rate of the discrete R^l_{ijk}: nabla_i dGamma^l_jk - nabla_j dGamma^l_ik."""
    dgamma = TensorField(christoffel_rate(g, p, s0), "udd", g.grid)
    return riemann_variation(g, dgamma).data


def S_evolution_residual(traj: Trajectory, traj_t: Trajectory, t: float, form: str = "laplacian") -> float:
    """Centered dS/dt minus the rate difference.

    ``form="laplacian"`` uses :func:`riemann_rate` (O(dt^2) + O(dx^4));
    ``form="discrete"`` uses the exact rate of the discrete pipeline (O(dt^2) only).
    """
    if form not in RIEMANN_RATE_FORMS:
        raise ValueError(f"form must be one of {RIEMANN_RATE_FORMS}")
    rate = riemann_rate if form == "laplacian" else discrete_riemann_rate
    a, b = _pair_bracket(traj, traj_t, t)

    def rm(s):
        return curvature(s.g).riemann_array

    dS = _centered(rm, a) - _centered(rm, b)
    sol, sol_t = a[1], b[1]
    rhs = rate(sol.g, sol.p, sol.s0) - rate(sol_t.g, sol_t.p, sol_t.s0)
    return _sup(dS - rhs)


def S_laplacian_crosscheck(g: MetricField, gt: MetricField) -> float:
    """Gap between the direct and the divergence-form assembly of Delta R - Delta~ R~."""
    return _sup(laplacian_difference_direct(g, gt) - laplacian_difference_r5(g, gt))


def q_source_residual(sol: FlowState, sol_t: FlowState) -> float:
    """(n-1)(Delta p - Delta~ p~) + s0 q + |Ric°|^2_g - |Ric~°|^2_g~."""
    n, s0 = sol.g.dim, sol.s0
    lap = laplace_beltrami(sol.g, sol.p).data - laplace_beltrami(sol_t.g, sol_t.p).data
    q = sol.p.data - sol_t.p.data
    src = traceless_ricci_norm2(sol.g, s0).data - traceless_ricci_norm2(sol_t.g, s0).data
    return _sup((n - 1) * lap + s0 * q + src)


# ------------------------------------------------------------------ energies


@dataclass
class EnergyReport:
    times: list[float]
    H: list[float]
    A_energy: list[float]
    S_energy: list[float]
    D: list[float]
    E: list[float]
    fitted_rate: float
    fit_quality: float
    floor: float
    intercept: float = float("nan")


def _integral(values: np.ndarray, g: MetricField) -> float:
    return integrate(scalar_field(values, g.grid), g)


def energy_terms(d: DiffState, g: MetricField) -> tuple[float, float, float, float]:
    """(H, A, S, D) of one difference state against the background g."""
    H = _integral(norm_squared(d.h, g), g)
    A = _integral(norm_squared(d.A, g), g)
    S = _integral(norm_squared(d.S, g), g)
    D = _integral(norm_squared(covariant_derivative(g, d.S), g), g)
    return H, A, S, D


def fit_log_rate(times: Sequence[float], E: Sequence[float], floor: float) -> tuple[float, float, float]:
    """Least-squares line through log E over samples above the floor: (slope, R^2, intercept)."""
    t = np.asarray(times, float)
    e = np.asarray(E, float)
    mask = e > floor
    if mask.sum() < 2:
        return float("nan"), float("nan"), float("nan")
    x, y = t[mask], np.log(e[mask])
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / ss_tot if ss_tot > 0 else 1.0
    return float(slope), r2, float(intercept)


def energies(
    diffs: Sequence[DiffState], metric_source: Trajectory, floor: float | None = None
) -> EnergyReport:
    """Energy series H, A, S, D, E of time-sorted difference states."""
    if not diffs:
        raise ValueError("energies needs at least one difference state")
    times = [d.t for d in diffs]
    if any(b <= a for a, b in zip(times, times[1:])):
        raise ValueError("difference states must be strictly time-sorted")
    cols = {k: [] for k in ("H", "A_energy", "S_energy", "D", "E")}
    for d in diffs:
        H, A, S, D = energy_terms(d, metric_source.at(d.t).g)
        cols["H"].append(H)
        cols["A_energy"].append(A)
        cols["S_energy"].append(S)
        cols["D"].append(D)
        cols["E"].append(H + A + S)
    floor = ENERGY_FLOOR_MIN if floor is None else max(ENERGY_FLOOR_MIN, floor)
    rate, quality, intercept = fit_log_rate(times, cols["E"], floor)
    return EnergyReport(times, fitted_rate=rate, fit_quality=quality, floor=floor, intercept=intercept, **cols)


@dataclass
class GronwallVerdict:
    applicable: bool  # E(0) above the floor
    ratio: float  # max E(t) / (E(0) e^{N t}) when applicable
    floor_ratio: float  # max E(t) / floor otherwise
    fitted_rate: float
    fit_quality: float


def gronwall_check(report: EnergyReport) -> GronwallVerdict:
    t = np.asarray(report.times, float)
    e = np.asarray(report.E, float)
    if not len(e):
        raise ValueError("empty energy report")
    if e[0] > report.floor and math.isfinite(report.fitted_rate):
        ratio = float(np.max(e / (e[0] * np.exp(report.fitted_rate * (t - t[0])))))
        return GronwallVerdict(True, ratio, float("nan"), report.fitted_rate, report.fit_quality)
    return GronwallVerdict(
        False, float("nan"), float(np.max(e) / report.floor), report.fitted_rate, report.fit_quality
    )


# ------------------------------------------------------------ bound monitors

MONITORS = (
    "h_rate_pointwise",
    "h_rate",
    "A_rate",
    "S_rate",
    "q_l2",
    "q_h1",
    "q_h2",
    "H_growth",
    "A_growth",
    "S_growth",
)


@dataclass
class MonitorTable:
    times: list[float]
    series: dict[str, list[float]] = field(default_factory=dict)

    def max(self, name: str) -> float:
        vals = [v for v in self.series[name] if math.isfinite(v)]
        return max(vals) if vals else float("nan")


def _l2(values: np.ndarray, g: MetricField) -> float:
    return math.sqrt(max(_integral(values, g), 0.0))


def _ratio(num: float, den: float, floor: float) -> float:
    return num / den if den > floor else float("nan")


def _state_monitors(sol: FlowState, sol_t: FlowState, d: DiffState, floor: float) -> dict[str, float]:
    g, s0 = sol.g, sol.s0
    grid = g.grid
    E = sum(energy_terms(d, g)[:3])
    if E <= floor:
        return {k: float("nan") for k in MONITORS[:7]}
    out = {}
    ht = crf_rhs(sol.g, sol.p, s0).data - crf_rhs(sol_t.g, sol_t.p, s0).data
    ht_f = TensorField(ht, "dd", grid)
    mag = {k: np.sqrt(np.maximum(norm_squared(getattr(d, k), g), 0.0)) for k in ("h", "A", "S")}
    mag["q"] = np.abs(d.q.data)
    # pointwise |dh/dt| bound: C read off over nodes with a meaningful denominator
    den = (abs(s0) + np.max(np.abs(sol_t.p.data))) * mag["h"] + mag["S"] + mag["q"]
    num = np.sqrt(np.maximum(norm_squared(ht_f, g), 0.0))
    mask = den > 1e-3 * np.max(den)
    out["h_rate_pointwise"] = float(np.max(num[mask] / den[mask]))
    norms = {k: _l2(v**2, g) for k, v in mag.items()}
    nab_S = _l2(norm_squared(covariant_derivative(g, d.S), g), g)
    nab_q = _l2(norm_squared(covariant_derivative(g, d.q), g), g)
    nabnab_q = _l2(norm_squared(covariant_derivative(g, covariant_derivative(g, d.q)), g), g)
    out["h_rate"] = _ratio(_l2(norm_squared(ht_f, g), g), norms["h"] + norms["S"] + norms["q"], 0.0)
    At = christoffel_rate(sol.g, sol.p, s0) - christoffel_rate(sol_t.g, sol_t.p, s0)
    out["A_rate"] = _ratio(
        _l2(norm_squared(TensorField(At, "udd", grid), g), g),
        norms["h"] + norms["A"] + nab_S + nab_q,
        0.0,
    )
    St = riemann_rate(sol.g, sol.p, s0) - riemann_rate(sol_t.g, sol_t.p, s0)
    defect = St - tensor_laplacian(g, d.S).data - divergence(g, d.U).data
    out["S_rate"] = _ratio(
        _l2(norm_squared(TensorField(defect, "uddd", grid), g), g),
        norms["h"] + norms["A"] + norms["S"] + norms["q"] + nabnab_q,
        0.0,
    )
    out["q_l2"] = norms["q"] ** 2 / E
    out["q_h1"] = nab_q**2 / E
    _, h2 = h1_h2_norms(g, d.q)
    out["q_h2"] = h2**2 / E
    return out


def bound_monitors(
    pairs: Sequence[tuple[FlowState, FlowState]],
    diffs: Sequence[DiffState] | None = None,
    report: EnergyReport | None = None,
) -> MonitorTable:
    """Ratio of each inequality's left side to its right side without the constant.

    The maximum of a series is the empirical constant.  Samples whose energy is
    at the floor are reported as NaN (not applicable).
    """
    floor = report.floor if report is not None else ENERGY_FLOOR_MIN
    if diffs is None:
        diffs = [diff_state(a, b) for a, b in pairs]
    table = MonitorTable([d.t for d in diffs], {k: [] for k in MONITORS})
    for (a, b), d in zip(pairs, diffs):
        for k, v in _state_monitors(a, b, d, floor).items():
            table.series[k].append(v)
    nan = [float("nan")] * len(diffs)
    if report is not None and len(report.times) >= 3:
        t = np.asarray(report.times)
        E = np.asarray(report.E)
        dH, dA, dS = (np.gradient(np.asarray(x), t) for x in (report.H, report.A_energy, report.S_energy))
        D = np.asarray(report.D)
        ok = E > floor
        table.series["H_growth"] = list(np.where(ok, dH / np.where(ok, E, 1), np.nan))
        table.series["A_growth"] = list(np.where(ok, (dA - D) / np.where(ok, E, 1), np.nan))
        table.series["S_growth"] = list(np.where(ok, (dS + D) / np.where(ok, E, 1), np.nan))
    else:
        for k in ("H_growth", "A_growth", "S_growth"):
            table.series[k] = nan
    return table


def ibp_for_q(sol: FlowState, sol_t: FlowState) -> tuple[float, float]:
    """Both sides of the integration-by-parts identity with f = q."""
    from crf_lab.elliptic import ibp_identity_check

    q = scalar_field(sol.p.data - sol_t.p.data, sol.grid)
    return ibp_identity_check(sol.g, sol.s0, q)


def lq_norm(sol: FlowState, sol_t: FlowState) -> float:
    q = scalar_field(sol.p.data - sol_t.p.data, sol.grid)
    return _l2(apply_L(sol.g, sol.s0, q).data ** 2, sol.g)
