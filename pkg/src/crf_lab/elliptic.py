"""Pressure equation ((n-1) Delta + s0) p = -|Ric - (s0/n) g|^2 and Yamabe normalization.

The divergence-form pressure and the Yamabe linearizations are solved
matrix-free by preconditioned conjugate gradients or GMRES, with the
constant-coefficient operator (mean inverse metric) inverted exactly in
Fourier space as preconditioner.  The flow uses the compatible pressure of
:func:`solve_compatible_pressure`, built from the exact variation of the
discrete scalar curvature and restricted to the Nyquist-free subspace.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from scipy.sparse.linalg import LinearOperator, gmres

from crf_lab.errors import GeometryError, NormalizationError, SolverError
from crf_lab.geometry import (
    conformal_variation_operator,
    curvature,
    laplace_beltrami,
    scalar_curvature,
    scalar_curvature_variation,
)
from crf_lab.grid import (
    GridSpec,
    MetricField,
    TensorField,
    cdot,
    csum,
    d1_symbol,
    integrate,
    partial_array,
    pointwise_inner,
    scalar_field,
)

log = logging.getLogger(__name__)

PRESSURE_TOL = 1e-10
PRESSURE_MAX_ITER = 500
YAMABE_TOL = 1e-7
YAMABE_MAX_ITER = 30


@dataclass
class EllipticSolveReport:
    iterations: int
    final_residual_l2: float
    tolerance: float
    converged: bool
    estimate_ratio: float | None = None
    history: list[float] = field(default_factory=list, repr=False)


def _require_negative(s0: float) -> None:
    if not s0 < 0:
        raise ValueError(f"s0 must be negative, got {s0}")


def apply_L(g: MetricField, s0: float, f: TensorField) -> TensorField:
    """((n-1) Delta_g + s0) f."""
    _require_negative(s0)
    lap = laplace_beltrami(g, f)
    return scalar_field((g.dim - 1) * lap.data + s0 * f.data, f.grid)


def traceless_ricci_norm2(g: MetricField, s0: float, ricci: TensorField | None = None) -> TensorField:
    """<Ric - (s0/n) g, Ric - (s0/n) g>_g."""
    ric = curvature(g).ricci if ricci is None else ricci
    t = ric - g.tensor() * (s0 / g.dim)
    return pointwise_inner(t, t, g)


def pressure_rhs(g: MetricField, s0: float, ricci: TensorField | None = None) -> TensorField:
    return -traceless_ricci_norm2(g, s0, ricci)


# ------------------------------------------------------------------- PCG


def _fourier_preconditioner(g: MetricField, diffusion: float, shift: float) -> Callable:
    """Exact inverse of -diffusion * gbar^{ab} D_a D_b + shift on the grid."""
    grid = g.grid
    sym = d1_symbol(grid)
    weights = g.sqrt_det / g.sqrt_det.mean()
    gbar = np.array(
        [[float(np.mean(weights * g.inv[..., a, b])) for b in range(grid.dim)] for a in range(grid.dim)]
    )
    symbol = np.full(grid.shape, float(shift))
    for a in range(grid.dim):
        for b in range(grid.dim):
            symbol = symbol + diffusion * gbar[a, b] * sym[a] * sym[b]
    inv_symbol = 1.0 / symbol
    root_w = np.sqrt(g.sqrt_det)

    def apply(r: np.ndarray) -> np.ndarray:
        z = np.fft.ifftn(np.fft.fftn(r / root_w) * inv_symbol).real
        return z / root_w

    return apply


def pcg(
    apply_op: Callable[[np.ndarray], np.ndarray],
    b: np.ndarray,
    precond: Callable[[np.ndarray], np.ndarray],
    norm: Callable[[np.ndarray], float],
    tol: float,
    max_iter: int,
    x0: np.ndarray | None = None,
) -> tuple[np.ndarray, EllipticSolveReport]:
    """Preconditioned CG for a symmetric positive operator (Euclidean pairing).

    ``norm`` measures residuals; iteration stops once norm(r) <= tol * norm(b).
    Every pairing is a correctly rounded sum, so trajectories are reproducible.
    """
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=float)
    target = tol * norm(b)
    r = b - apply_op(x)
    res = norm(r)
    history = [res]
    if res <= target:
        return x, EllipticSolveReport(0, _rel(res, norm(b)), tol, True, history=history)
    z = precond(r)
    d = z.copy()
    rz = cdot(r, z)
    for it in range(1, max_iter + 1):
        q = apply_op(d)
        dq = cdot(d, q)
        if dq <= 0:
            raise SolverError("operator is not positive definite", _report(it, res, b, norm, tol, False, history))
        alpha = rz / dq
        x += alpha * d
        if it % 25 == 0:
            r = b - apply_op(x)
        else:
            r -= alpha * q
        res = norm(r)
        history.append(res)
        if res <= target:
            r = b - apply_op(x)
            res = norm(r)
            if res <= target:
                return x, _report(it, res, b, norm, tol, True, history)
        z = precond(r)
        rz_new = cdot(r, z)
        d = z + (rz_new / rz) * d
        rz = rz_new
    return x, _report(max_iter, res, b, norm, tol, False, history)


def _rel(res: float, ref: float) -> float:
    return res / ref if ref > 0 else res


def _report(it, res, b, norm, tol, ok, history) -> EllipticSolveReport:
    return EllipticSolveReport(it, _rel(res, norm(b)), tol, ok, history=history)


def _weighted_norm(g: MetricField) -> Callable[[np.ndarray], float]:
    # residuals live in the weighted (W r) representation; undo one weight
    w = g.sqrt_det
    cell = g.grid.cell_volume

    def norm(r: np.ndarray) -> float:
        return math.sqrt(csum(r * r / w) * cell)

    return norm


def solve_L(
    g: MetricField,
    s0: float,
    rhs: TensorField,
    tol: float = PRESSURE_TOL,
    max_iter: int = PRESSURE_MAX_ITER,
    x0: TensorField | None = None,
    monitor: bool = False,
) -> tuple[TensorField, EllipticSolveReport]:
    """Solve ((n-1) Delta_g + s0) u = rhs.

    Raises :class:`SolverError` (carrying the report) when the relative
    L^2(dmu) residual does not reach ``tol`` within ``max_iter`` iterations.
    """
    _require_negative(s0)
    grid = g.grid
    if not np.any(rhs.data):
        u = scalar_field(np.zeros(grid.shape), grid)
        return u, EllipticSolveReport(0, 0.0, tol, True, estimate_ratio=None)
    w = g.sqrt_det

    def op(x: np.ndarray) -> np.ndarray:
        return -w * apply_L(g, s0, scalar_field(x, grid)).data

    pre = _fourier_preconditioner(g, g.dim - 1, -s0)
    start = None if x0 is None else x0.data
    x, report = pcg(op, -w * rhs.data, pre, _weighted_norm(g), tol, max_iter, start)
    u = scalar_field(x, grid)
    if monitor:
        report.estimate_ratio = elliptic_estimate_ratio(g, s0, u)
    if not report.converged:
        raise SolverError(
            f"pressure solve stalled at relative residual {report.final_residual_l2:.3e} "
            f"after {report.iterations} iterations",
            report,
        )
    return u, report


def solve_pressure(
    g: MetricField,
    s0: float,
    tol: float = PRESSURE_TOL,
    max_iter: int = PRESSURE_MAX_ITER,
    x0: TensorField | None = None,
    ricci: TensorField | None = None,
    monitor: bool = False,
) -> tuple[TensorField, EllipticSolveReport]:
    """Pressure p of the metric g.  ``ricci`` overrides the curvature pipeline."""
    return solve_L(g, s0, pressure_rhs(g, s0, ricci), tol, max_iter, x0, monitor)


# -------------------------------------------------------------- diagnostics


class LinePreconditioner:
    """Approximate inverse of v -> delta_s(v g) built from the transverse average of g.

    For a metric depending on the first coordinate only, the discrete operator
    commutes with shifts along the other axes, so its response to one point
    source per line position gives, after a transverse FFT, the exact dense
    line matrix for every transverse wavevector.  Those are inverted once and
    reused while the metric stays close to the one it was built from.
    """

    def __init__(self, g: MetricField):
        grid = g.grid
        self.grid = grid
        self.axes = tuple(range(1, grid.dim))
        n0 = grid.resolution[0]
        mean = g.g.mean(axis=self.axes, keepdims=True)
        g_avg = MetricField(np.broadcast_to(mean, g.g.shape).copy(), grid)
        op = conformal_variation_operator(g_avg)
        mats = np.zeros(grid.resolution[1:] + (n0, n0), dtype=complex)
        for j in range(n0):
            v = np.zeros(grid.shape)
            v[(j,) + (0,) * (grid.dim - 1)] = 1.0
            mats[..., :, j] = np.moveaxis(np.fft.fftn(op(v), axes=self.axes), 0, -1)
        try:
            self.inverse = np.linalg.inv(mats)
        except np.linalg.LinAlgError as exc:
            raise SolverError(f"line preconditioner is singular: {exc}") from exc

    def __call__(self, r: np.ndarray) -> np.ndarray:
        rh = np.moveaxis(np.fft.fftn(r.reshape(self.grid.shape), axes=self.axes), 0, -1)
        z = np.moveaxis((self.inverse @ rh[..., None])[..., 0], -1, 0)
        return np.fft.ifftn(z, axes=self.axes).real.ravel()


def nyquist_filter(grid: GridSpec) -> Callable[[np.ndarray], np.ndarray]:
    """Orthogonal projection removing every Fourier mode with some k_a = N_a / 2."""
    keep = np.ones(grid.shape)
    for a, r in enumerate(grid.resolution):
        if r % 2 == 0:
            idx = [slice(None)] * grid.dim
            idx[a] = r // 2
            keep[tuple(idx)] = 0.0

    def apply(v: np.ndarray) -> np.ndarray:
        return np.fft.ifftn(np.fft.fftn(v.reshape(grid.shape)) * keep).real.ravel()

    return apply


def solve_compatible_pressure(
    g: MetricField,
    s0: float,
    tol: float = PRESSURE_TOL,
    max_iter: int = PRESSURE_MAX_ITER,
    x0: TensorField | None = None,
    preconditioner: LinePreconditioner | None = None,
) -> tuple[TensorField, EllipticSolveReport]:
    """Pressure that keeps the discrete scalar curvature stationary under the flow.

    Solves delta_s(p g) = -delta_s(Ric - (s0/n) g), with delta_s the exact
    variation of the discrete scalar curvature, on the subspace of grid
    functions without Nyquist content (see below).  For s = s0 the continuum
    form of this equation is ((n-1) Delta + s0) p = -|Ric - (s0/n) g|^2;
    discretely it differs from :func:`solve_pressure` by O(h^4), but it makes
    s(g) a conserved quantity of the semi-discrete flow.  Solved matrix-free
    by GMRES with a :class:`LinePreconditioner` (built from ``g`` unless one
    is passed in); tolerance is relative to the Euclidean norm of the
    right-hand side.
    """
    _require_negative(s0)
    grid = g.grid
    n = g.dim
    source = curvature(g).ricci - g.tensor() * (s0 / n)
    rhs = -scalar_curvature_variation(g, source).data.ravel()
    b_norm = math.sqrt(cdot(rhs, rhs))
    if b_norm == 0.0:
        return scalar_field(np.zeros(grid.shape), grid), EllipticSolveReport(0, 0.0, tol, True)
    size = rhs.size
    variation = conformal_variation_operator(g)

    def matvec(v: np.ndarray) -> np.ndarray:
        return variation(v.reshape(grid.shape)).ravel()

    if preconditioner is None:
        preconditioner = LinePreconditioner(g)
    project = nyquist_filter(grid)
    op = LinearOperator((size, size), matvec=lambda v: project(matvec(project(v))), dtype=float)
    pre = LinearOperator((size, size), matvec=lambda r: project(preconditioner(project(r))), dtype=float)
    counter = [0]

    def count(_):
        counter[0] += 1

    b_proj = project(rhs)
    start = None if x0 is None else project(x0.data.ravel())
    x, _ = gmres(
        op, b_proj, x0=start, M=pre, rtol=tol, atol=0.0, restart=80,
        maxiter=max(1, max_iter // 80), callback=count, callback_type="pr_norm",
    )
    x = project(x)
    r = b_proj - project(matvec(x))
    rel = math.sqrt(cdot(r, r)) / b_norm
    report = EllipticSolveReport(counter[0], rel, tol, rel <= 10 * tol)
    if not report.converged or not np.all(np.isfinite(x)):
        raise SolverError(f"compatible pressure solve stalled at relative residual {rel:.3e}", report)
    return scalar_field(x.reshape(grid.shape), grid), report


def h1_h2_norms(g: MetricField, f: TensorField) -> tuple[float, float]:
    """Chart Sobolev norms with raw coordinate derivatives and the dmu measure."""
    grid = f.grid
    df = partial_array(f.data, grid)
    ddf = partial_array(df, grid)
    m0 = f.data**2
    m1 = np.sum(df**2, axis=-1)
    m2 = np.sum(ddf**2, axis=(-1, -2))
    h1 = integrate(scalar_field(m0 + m1, grid), g)
    h2 = integrate(scalar_field(m0 + m1 + m2, grid), g)
    return math.sqrt(h1), math.sqrt(h2)


def elliptic_estimate_ratio(g: MetricField, s0: float, f: TensorField) -> float:
    """|f|_{H^2} / (|L f|_{L^2} + |f|_{H^1})."""
    h1, h2 = h1_h2_norms(g, f)
    lf = apply_L(g, s0, f)
    l2 = math.sqrt(integrate(scalar_field(lf.data**2, f.grid), g))
    denom = l2 + h1
    return h2 / denom if denom > 0 else 0.0


def ibp_identity_check(g: MetricField, s0: float, f: TensorField) -> tuple[float, float]:
    """Both sides of int (L f) f dmu = s0 int f^2 dmu - (n-1) int |grad f|^2 dmu."""
    _require_negative(s0)
    grid = f.grid
    lhs = integrate(scalar_field(apply_L(g, s0, f).data * f.data, grid), g)
    df = partial_array(f.data, grid)
    grad2 = np.einsum("...a,...ab,...b->...", df, g.inv, df)
    rhs = s0 * integrate(scalar_field(f.data**2, grid), g) - (g.dim - 1) * integrate(
        scalar_field(grad2, grid), g
    )
    return lhs, rhs


def weighted_inner(g: MetricField, f: TensorField, h: TensorField) -> float:
    return integrate(scalar_field(f.data * h.data, f.grid), g)


def min_eigenvalue_estimate(
    g: MetricField, s0: float, iterations: int = 20, seed: int = 0
) -> float:
    """Smallest eigenvalue of -L by inverse power iteration (Rayleigh quotient)."""
    grid = g.grid
    rng = np.random.Generator(np.random.Philox(seed))
    v = scalar_field(1.0 + 0.1 * rng.standard_normal(grid.shape), grid)
    lam = float("nan")
    for _ in range(iterations):
        norm = math.sqrt(weighted_inner(g, v, v))
        v = v * (1.0 / norm)
        lv = apply_L(g, s0, v)
        lam = -weighted_inner(g, lv, v)
        v, _ = solve_L(g, s0, v, tol=1e-10)
        v = -v
    return lam


# ---------------------------------------------------------------- Yamabe


def _plain_fourier_inverse(g: MetricField, diffusion: float, shift: float) -> Callable:
    grid = g.grid
    sym = d1_symbol(grid)
    gbar = [[float(np.mean(g.inv[..., a, b])) for b in range(grid.dim)] for a in range(grid.dim)]
    symbol = np.full(grid.shape, float(shift))
    for a in range(grid.dim):
        for b in range(grid.dim):
            symbol = symbol + diffusion * gbar[a][b] * sym[a] * sym[b]
    inv_symbol = 1.0 / symbol

    def apply(r: np.ndarray) -> np.ndarray:
        return np.fft.ifftn(np.fft.fftn(r) * inv_symbol).real

    return apply


def yamabe_normalize(
    g_base: MetricField,
    s0: float,
    tol: float = YAMABE_TOL,
    max_iter: int = YAMABE_MAX_ITER,
    linear_tol: float = 1e-6,
) -> tuple[MetricField, EllipticSolveReport]:
    """Conformal rescaling u^{4/(n-2)} g_base with scalar curvature s0.

    Damped Newton on the residual s(u^{4/(n-2)} g_base) - s0 where s is the
    discrete curvature pipeline itself, so the returned metric meets the
    tolerance as measured by :func:`scalar_curvature`.  Each Newton system is
    solved by GMRES using the exact variation of the discrete scalar
    curvature, preconditioned by the constant-coefficient inverse of the
    continuum linearization

        u^{-alpha} (-c Delta_base + s_base - alpha s u^{alpha-1}),
        alpha = (n+2)/(n-2),  c = 4(n-1)/(n-2).

    Steps are damped by backtracking on the L^2 residual.  The report counts
    Newton iterations; ``final_residual_l2`` holds sup|s - s0|.
    """
    _require_negative(s0)
    n = g_base.dim
    if n < 3:
        raise ValueError("Yamabe normalization needs dim >= 3")
    grid = g_base.grid
    alpha = (n + 2) / (n - 2)
    c = 4.0 * (n - 1) / (n - 2)
    power = 4.0 / (n - 2)
    s_base = scalar_curvature(g_base).data
    total = integrate(scalar_field(s_base, grid), g_base)
    if total >= 0:
        raise NormalizationError(
            f"base metric has total scalar curvature {total:.3e} >= 0; "
            "its conformal class is not known to be negative"
        )
    s_mean = total / g_base.volume()
    u = np.full(grid.shape, float(np.clip((s_mean / s0) ** ((n - 2) / 4.0), 0.5, 2.0)))

    def evaluate(u_arr: np.ndarray) -> tuple[MetricField, np.ndarray]:
        gm = g_base.scaled(u_arr**power)
        return gm, scalar_curvature(gm).data

    def l2(r: np.ndarray) -> float:
        return math.sqrt(csum(r * r * g_base.sqrt_det) * grid.cell_volume)

    g_cur, s_cur = evaluate(u)
    sup = float(np.max(np.abs(s_cur - s0)))
    history = [sup]
    size = int(np.prod(grid.shape))
    for it in range(1, max_iter + 1):
        if sup <= tol:
            return g_cur, EllipticSolveReport(it - 1, sup, tol, True, history=history)
        g_now, u_now = g_cur, u

        def jvp(v: np.ndarray) -> np.ndarray:
            dg = g_now.tensor() * scalar_field(power * v.reshape(grid.shape) / u_now, grid)
            return scalar_curvature_variation(g_now, dg).data.ravel()

        potential = s_base - alpha * s_cur * u ** (alpha - 1.0)
        fourier = _plain_fourier_inverse(g_base, c, max(float(np.mean(potential)), 1e-3))
        u_alpha = u**alpha

        def precond(r: np.ndarray) -> np.ndarray:
            return fourier(u_alpha * r.reshape(grid.shape)).ravel()

        op = LinearOperator((size, size), matvec=jvp, dtype=float)
        pre = LinearOperator((size, size), matvec=precond, dtype=float)
        v, info = gmres(op, (s0 - s_cur).ravel(), M=pre, rtol=linear_tol, restart=60, maxiter=10)
        v = v.reshape(grid.shape)
        res0 = l2(s_cur - s0)
        step = 1.0
        while True:
            trial = u + step * v
            g_try = None
            if np.all(trial > 0):
                try:
                    g_try, s_try = evaluate(trial)
                except GeometryError:
                    g_try = None
            if g_try is not None and l2(s_try - s0) < res0:
                break
            step *= 0.5
            if step < 1e-4:
                raise NormalizationError(
                    f"Newton line search failed at iteration {it}",
                    EllipticSolveReport(it, sup, tol, False, history=history),
                )
        u, g_cur, s_cur = trial, g_try, s_try
        sup = float(np.max(np.abs(s_cur - s0)))
        history.append(sup)
        log.debug("yamabe it=%d gmres=%d step=%.3g sup|s-s0|=%.3e", it, info, step, sup)
    if sup <= tol:
        return g_cur, EllipticSolveReport(max_iter, sup, tol, True, history=history)
    raise NormalizationError(
        f"Newton did not reach sup|s - s0| <= {tol:g} in {max_iter} iterations (at {sup:.3e})",
        EllipticSolveReport(max_iter, sup, tol, False, history=history),
    )
