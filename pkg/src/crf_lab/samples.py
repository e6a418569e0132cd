"""Seeded smooth test fields and the standard metrics used by the experiments."""

from __future__ import annotations

import itertools

import numpy as np

from crf_lab.grid import GridSpec, MetricField, TensorField, scalar_field

MAX_MODE = 3


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based generator; the stream depends only on the seed."""
    return np.random.Generator(np.random.Philox(seed))


def _phases(grid: GridSpec) -> list[np.ndarray]:
    return [2.0 * np.pi * x / p for x, p in zip(grid.coordinates(), grid.period)]


def smooth_array(
    grid: GridSpec,
    rng: np.random.Generator,
    amplitude: float = 1.0,
    max_mode: int = MAX_MODE,
    decay: float = 4.0,
) -> np.ndarray:
    """Band-limited trigonometric polynomial with zero mean and sup-norm ``amplitude``.

    Mode k carries weight (1 + |k|^2)^(-decay); |k_a| <= max_mode per axis.
    """
    phase = _phases(grid)
    out = np.zeros(grid.shape)
    for k in itertools.product(range(-max_mode, max_mode + 1), repeat=grid.dim):
        # one representative of each +-k pair, skip the mean
        if k <= tuple(-x for x in k):
            continue
        weight = (1.0 + sum(x * x for x in k)) ** (-decay)
        c, s = rng.standard_normal(2) * weight
        arg = sum(kk * ph for kk, ph in zip(k, phase))
        out = out + c * np.cos(arg) + s * np.sin(arg)
    peak = np.max(np.abs(out))
    return out * (amplitude / peak) if peak > 0 else out


def random_scalar(grid: GridSpec, seed: int, amplitude: float = 1.0, **kw) -> TensorField:
    return scalar_field(smooth_array(grid, make_rng(seed), amplitude, **kw), grid)


def random_tensor(grid: GridSpec, seed: int, variance: str, amplitude: float = 1.0, **kw) -> TensorField:
    rng = make_rng(seed)
    n = grid.dim
    comps = np.zeros(grid.shape + (n,) * len(variance))
    for idx in itertools.product(range(n), repeat=len(variance)):
        comps[(Ellipsis,) + idx] = smooth_array(grid, rng, amplitude, **kw)
    return TensorField(comps, variance, grid)


def random_symmetric(grid: GridSpec, seed: int, amplitude: float = 1.0, **kw) -> np.ndarray:
    """Symmetric 2-tensor components with independent smooth entries."""
    rng = make_rng(seed)
    n = grid.dim
    comps = np.zeros(grid.shape + (n, n))
    for i in range(n):
        for j in range(i, n):
            comps[..., i, j] = smooth_array(grid, rng, amplitude, **kw)
            comps[..., j, i] = comps[..., i, j]
    return comps


def random_metric(grid: GridSpec, seed: int, amplitude: float = 1e-2, **kw) -> MetricField:
    """delta + smooth symmetric perturbation of sup-norm ``amplitude`` per entry."""
    eye = np.eye(grid.dim)
    return MetricField(eye + random_symmetric(grid, seed, amplitude, **kw), grid)


def conformal_metric(grid: GridSpec, phi: np.ndarray) -> MetricField:
    """e^{2 phi} delta."""
    phi = np.broadcast_to(phi, grid.shape)
    return MetricField(np.exp(2.0 * phi)[..., None, None] * np.eye(grid.dim), grid)


def sine_profile(grid: GridSpec, amplitude: float, axis: int = 0, mode: int = 1) -> np.ndarray:
    return np.broadcast_to(amplitude * np.sin(mode * _phases(grid)[axis]), grid.shape).copy()


def warped_metric(grid: GridSpec, strength: float = 0.16) -> MetricField:
    """dx^2 + e^{2a} dy^2 + e^{-2a} dz^2 with a = strength * sin(2 pi x / P).

    Its scalar curvature is -2 a'(x)^2 <= 0 (for dim 3), so the total scalar
    curvature is negative and the conformal class carries a metric of constant
    negative scalar curvature.  Extra axes beyond the third stay flat.
    """
    a = sine_profile(grid, strength)
    comps = np.broadcast_to(np.eye(grid.dim), grid.shape + (grid.dim, grid.dim)).copy()
    comps[..., 1, 1] = np.exp(2.0 * a)
    comps[..., 2, 2] = np.exp(-2.0 * a)
    return MetricField(comps, grid)


def base_metric(
    grid: GridSpec,
    seed: int,
    strength: float = 0.16,
    noise: float = 0.01,
    perturbation: float = 0.0,
    perturbation_seed: int | None = None,
) -> MetricField:
    """Warped metric plus seeded smooth noise, optionally plus a twin perturbation."""
    w = warped_metric(grid, strength)
    comps = w.g + random_symmetric(grid, seed, noise)
    if perturbation:
        pseed = seed + 7919 if perturbation_seed is None else perturbation_seed
        comps = comps + random_symmetric(grid, pseed, perturbation)
    return MetricField(comps, grid)
