"""Levi-Civita connection and curvature of a metric on the periodic grid.

Index conventions: ``gamma[..., i, j, k]`` is Gamma^i_{jk}; ``riemann[..., l, i, j, k]``
is R^l_{ijk} with

    R^l_{ijk} = d_i Gamma^l_{jk} - d_j Gamma^l_{ik}
                + Gamma^l_{im} Gamma^m_{jk} - Gamma^l_{jm} Gamma^m_{ik},

so that Ric_{jk} = R^i_{ijk}.  Covariant derivatives put the new index first:
``(nabla T)[..., a, ...] = nabla_a T``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from crf_lab.grid import (
    _LETTERS,
    GridSpec,
    MetricField,
    TensorField,
    _d1,
    partial_array,
    scalar_field,
)


def christoffel_array(g: MetricField) -> np.ndarray:
    dg = partial_array(g.g, g.grid)  # dg[..., a, i, j] = d_a g_ij
    # Gamma_{l,jk} = 1/2 (d_j g_lk + d_k g_lj - d_l g_jk)
    first = 0.5 * (
        np.einsum("...jlk->...ljk", dg) + np.einsum("...klj->...ljk", dg) - dg
    )
    gamma = np.einsum("...il,...ljk->...ijk", g.inv, first)
    # exact symmetry in the lower pair
    return 0.5 * (gamma + np.swapaxes(gamma, -1, -2))


def riemann_array(gamma: np.ndarray, grid: GridSpec) -> np.ndarray:
    dgam = partial_array(gamma, grid)  # dgam[..., a, l, j, k] = d_a Gamma^l_jk
    r = np.einsum("...iljk->...lijk", dgam) - np.einsum("...jlik->...lijk", dgam)
    gg = np.einsum("...lim,...mjk->...lijk", gamma, gamma)
    r += gg - np.swapaxes(gg, -3, -2)
    return r


@dataclass(frozen=True, eq=False)
class CurvaturePack:
    """Connection and curvature of one metric.  Every quantity is computed once."""

    metric: MetricField

    @cached_property
    def gamma_array(self) -> np.ndarray:
        return christoffel_array(self.metric)

    @cached_property
    def riemann_array(self) -> np.ndarray:
        return riemann_array(self.gamma_array, self.metric.grid)

    @cached_property
    def ricci_raw_array(self) -> np.ndarray:
        return np.einsum("...iijk->...jk", self.riemann_array)

    @cached_property
    def ricci_array(self) -> np.ndarray:
        raw = self.ricci_raw_array
        return 0.5 * (raw + np.swapaxes(raw, -1, -2))

    @cached_property
    def scalar_array(self) -> np.ndarray:
        return np.einsum("...jk,...jk->...", self.metric.inv, self.ricci_array)

    @property
    def gamma(self) -> TensorField:
        return TensorField(self.gamma_array, "udd", self.metric.grid)

    @property
    def riemann(self) -> TensorField:
        return TensorField(self.riemann_array, "uddd", self.metric.grid)

    @property
    def ricci(self) -> TensorField:
        return TensorField(self.ricci_array, "dd", self.metric.grid)

    @property
    def scalar(self) -> TensorField:
        return scalar_field(self.scalar_array, self.metric.grid)

    def ricci_asymmetry(self) -> float:
        """Sup of the antisymmetric part of the raw contraction R^i_{ijk}."""
        raw = self.ricci_raw_array
        return float(np.max(np.abs(raw - np.swapaxes(raw, -1, -2))))


def curvature(g: MetricField) -> CurvaturePack:
    """The cached curvature pack of ``g`` (metrics are immutable)."""
    pack = getattr(g, "_curvature", None)
    if pack is None:
        pack = CurvaturePack(g)
        g._curvature = pack
    return pack


def clear_curvature(g: MetricField) -> None:
    """Release the cached curvature pack of ``g`` (recomputed on demand)."""
    if getattr(g, "_curvature", None) is not None:
        g._curvature = None


def christoffel(g: MetricField) -> TensorField:
    return curvature(g).gamma


def riemann(g: MetricField) -> TensorField:
    return curvature(g).riemann


def ricci(g: MetricField) -> TensorField:
    """Ricci tensor, the symmetric part of the contraction R^i_{ijk}."""
    return curvature(g).ricci


def scalar_curvature(g: MetricField) -> TensorField:
    return curvature(g).scalar


# ------------------------------------------------------- covariant calculus


def _connection_terms(t: np.ndarray, variance: str, gamma_a: np.ndarray) -> np.ndarray:
    """Sum of Christoffel corrections for nabla_a, given gamma_a[..., i, k] = Gamma^i_{ak}."""
    r = len(variance)
    nd = t.ndim - r
    out = np.zeros_like(t)
    up = np.swapaxes(gamma_a, -1, -2)
    for s, kind in enumerate(variance):
        # move slot s last, flatten the others: (*grid, R, z) @ (*grid, z, i)
        moved = np.moveaxis(t, nd + s, -1)
        rest = moved.shape[nd:-1]
        flat = moved.reshape(t.shape[:nd] + (-1, t.shape[nd + s]))
        if kind == "u":
            prod = flat @ up
        else:
            prod = -(flat @ gamma_a)
        out += np.moveaxis(prod.reshape(t.shape[:nd] + rest + (t.shape[nd + s],)), -1, nd + s)
    return out


def covariant_derivative_axis(
    g: MetricField, t: TensorField, a: int, gamma: np.ndarray | None = None
) -> np.ndarray:
    """Components of nabla_a T (no new slot)."""
    if gamma is None:
        gamma = curvature(g).gamma_array
    d = _d1(t.data, a, g.grid.spacing[a])
    if t.rank:
        d = d + _connection_terms(t.data, t.variance, gamma[..., :, a, :])
    return d


def covariant_derivative(
    g: MetricField, t: TensorField, gamma: np.ndarray | None = None
) -> TensorField:
    """nabla T with the derivative slot prepended (covariant)."""
    if not t.is_finite():
        raise ValueError("covariant_derivative received a non-finite field")
    if t.grid != g.grid:
        raise ValueError("field and metric live on different grids")
    n = g.dim
    parts = [covariant_derivative_axis(g, t, a, gamma) for a in range(n)]
    return TensorField(np.stack(parts, axis=n), "d" + t.variance, t.grid)


def gradient(g: MetricField, f: TensorField) -> TensorField:
    """Metric gradient g^{ij} d_j f as a vector field."""
    if f.rank:
        raise ValueError("gradient expects a scalar field")
    df = partial_array(f.data, f.grid)
    return TensorField(np.einsum("...ij,...j->...i", g.inv, df), "u", f.grid)


def laplace_beltrami(g: MetricField, f: TensorField) -> TensorField:
    """Delta_g f in divergence form, (1/sqrt g) d_a (sqrt g g^{ab} d_b f).

    Equal to g^{ab} nabla_a nabla_b f for smooth data; this discrete form is
    exactly self-adjoint for the dmu-weighted sum.
    """
    if f.rank:
        raise ValueError("laplace_beltrami expects a scalar field")
    grid = f.grid
    df = partial_array(f.data, grid)
    flux = g.sqrt_det[..., None] * np.einsum("...ab,...b->...a", g.inv, df)
    total = sum(_d1(flux[..., a], a, grid.spacing[a]) for a in range(grid.dim))
    return scalar_field(total / g.sqrt_det, grid)


def tensor_laplacian(g: MetricField, t: TensorField) -> TensorField:
    """Rough Laplacian g^{ab} nabla_a nabla_b T."""
    gamma = curvature(g).gamma_array
    dt = covariant_derivative(g, t, gamma)
    r = t.rank
    idx = _LETTERS[:r]
    out = np.zeros_like(t.data)
    for a in range(g.dim):
        dd = covariant_derivative_axis(g, dt, a, gamma)  # slots: b, idx...
        out += np.einsum(f"...Z,...Z{idx}->...{idx}", g.inv[..., a, :], dd)
    return t.like(out)


def divergence(g: MetricField, t: TensorField) -> TensorField:
    """nabla_a T^{a...}, contracting the derivative with the leading slot."""
    if not t.variance or t.variance[0] != "u":
        raise ValueError("divergence needs a leading contravariant slot")
    gamma = curvature(g).gamma_array
    out = None
    for a in range(g.dim):
        d = covariant_derivative_axis(g, t, a, gamma)
        part = np.take(d, a, axis=g.dim)
        out = part if out is None else out + part
    return TensorField(out, t.variance[1:], t.grid)


def hessian(g: MetricField, f: TensorField) -> TensorField:
    """nabla nabla f as a covariant 2-tensor."""
    return covariant_derivative(g, covariant_derivative(g, f))


def lowered_riemann(g: MetricField) -> TensorField:
    """R_{ijkm} = g_{ml} R^l_{ijk}."""
    r = curvature(g).riemann_array
    return TensorField(np.einsum("...ml,...lijk->...ijkm", g.g, r), "dddd", g.grid)


# ------------------------------------------------- exact discrete variations
#
# Riemann is bilinear in Gamma plus linear in its differences, so these
# first variations are exact for the discrete pipeline, not just consistent.


def bianchi_residuals(g: MetricField) -> tuple[float, float]:
    """Sup-norms of R^l_{ijk} + R^l_{jki} + R^l_{kij} and of g^{ab} nabla_a Ric_{bk} - d_k s / 2."""
    pk = curvature(g)
    R = pk.riemann_array
    first = R + np.einsum("...ljki->...lijk", R) + np.einsum("...lkij->...lijk", R)
    div_ric = np.einsum("...ab,...abk->...k", g.inv, covariant_derivative(g, pk.ricci).data)
    second = div_ric - 0.5 * partial_array(pk.scalar_array, g.grid)
    return float(np.max(np.abs(first))), float(np.max(np.abs(second)))


def christoffel_variation(g: MetricField, dg: TensorField) -> TensorField:
    """delta Gamma^l_{jk} = 1/2 g^{lm} (nabla_j dg_km + nabla_k dg_jm - nabla_m dg_jk)."""
    nab = covariant_derivative(g, dg).data  # [a, i, j] = nabla_a dg_ij
    first = 0.5 * (
        np.einsum("...jkm->...mjk", nab) + np.einsum("...kjm->...mjk", nab) - nab
    )
    return TensorField(np.einsum("...lm,...mjk->...ljk", g.inv, first), "udd", g.grid)


def riemann_variation(g: MetricField, dgamma: TensorField) -> TensorField:
    """delta R^l_{ijk} = nabla_i delta Gamma^l_{jk} - nabla_j delta Gamma^l_{ik}."""
    d = covariant_derivative(g, dgamma).data  # [a, l, j, k]
    out = np.einsum("...iljk->...lijk", d) - np.einsum("...jlik->...lijk", d)
    return TensorField(out, "uddd", g.grid)


def scalar_curvature_variation(g: MetricField, dg: TensorField) -> TensorField:
    """Directional derivative of the discrete scalar curvature along dg.

    Uses the contracted form delta Ric_jk = nabla_i dGamma^i_jk - nabla_j dGamma^i_ik,
    which equals the contraction of :func:`riemann_variation` up to rounding.
    """
    pack = curvature(g)
    gamma = pack.gamma_array
    dgam = christoffel_variation(g, dg)
    n = g.dim
    div = sum(np.take(covariant_derivative_axis(g, dgam, a, gamma), a, axis=n) for a in range(n))
    trace = TensorField(np.einsum("...iik->...k", dgam.data), "d", g.grid)
    dtrace = covariant_derivative(g, trace, gamma).data
    dric = div - dtrace
    dric = 0.5 * (dric + np.swapaxes(dric, -1, -2))
    dinv = -np.einsum("...ja,...ab,...bk->...jk", g.inv, dg.data, g.inv)
    ds = np.einsum("...jk,...jk->...", dinv, pack.ricci_array) + np.einsum(
        "...jk,...jk->...", g.inv, dric
    )
    return scalar_field(ds, g.grid)


def conformal_variation_operator(g: MetricField):
    """The linear map v -> delta_s(v g) with metric coefficients precomputed.

    Agrees with ``scalar_curvature_variation(g, v * g)`` up to rounding.
    """
    pack = curvature(g)
    gamma = pack.gamma_array
    grid = g.grid
    n = g.dim
    lead = grid.shape
    h = grid.spacing
    metric, ginv = g.g, g.inv
    dg = partial_array(metric, grid)
    trace_gamma = np.einsum("...iiz->...z", gamma)
    # g^{jk} Gamma^z_ij, arranged [i, z, k] to pair with dGamma^i_zk
    gz = np.einsum("...jk,...zij->...izk", ginv, gamma)
    gam_t = np.einsum("...jk,...zjk->...z", ginv, gamma)
    scalar = pack.scalar_array
    ginv_b = ginv[..., None, :, :]

    def apply(v: np.ndarray) -> np.ndarray:
        vg = v[..., None, None] * metric
        x = np.stack([_d1(vg, a, h[a]) for a in range(n)], axis=-3) - v[..., None, None, None] * dg
        first = 0.5 * (np.swapaxes(np.moveaxis(x, -1, -3), -1, -2) + np.moveaxis(x, -1, -3) - x)
        e = (ginv @ first.reshape(lead + (n, n * n))).reshape(lead + (n, n, n))
        div = _d1(e[..., 0, :, :], 0, h[0])
        for i in range(1, n):
            div = div + _d1(e[..., i, :, :], i, h[i])
        t = np.trace(e, axis1=-3, axis2=-2)
        dt = np.stack([_d1(t, a, h[a]) for a in range(n)], axis=-2)
        out = (ginv * (div - dt)).sum(axis=(-1, -2))
        out += (trace_gamma * (ginv_b * e).sum(axis=(-1, -2))).sum(axis=-1)
        out -= 2.0 * (gz * e).sum(axis=(-1, -2, -3))
        out += (gam_t * t).sum(axis=-1)
        return out - v * scalar

    return apply


def conformal_scalar_variation(g: MetricField, v: np.ndarray) -> np.ndarray:
    """Components of delta_s along v g."""
    return conformal_variation_operator(g)(v)
