"""Periodic structured grids, tensor fields and the discrete calculus on them.

Fields store their components node-major: an array of shape
``(*resolution, *index_dims)``.  The ``variance`` string of a tensor names each
index slot in order, ``"u"`` for contravariant and ``"d"`` for covariant, so
``"uddd"`` is a Riemann tensor R^l_{ijk} and ``""`` is a scalar.
"""

from __future__ import annotations

import math
import string
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from crf_lab.errors import GeometryError

MIN_EIGENVALUE = 1e-10

# 4th-order central first-derivative stencil weights at offsets +1 and +2.
_W1 = 8.0 / 12.0
_W2 = -1.0 / 12.0


@dataclass(frozen=True)
class GridSpec:
    """Uniform periodic grid on the ``dim``-torus."""

    dim: int = 3
    resolution: tuple[int, ...] = (16, 16, 16)
    period: tuple[float, ...] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        res = tuple(int(r) for r in self.resolution)
        per = tuple(float(p) for p in self.period)
        object.__setattr__(self, "resolution", res)
        object.__setattr__(self, "period", per)
        if self.dim < 3:
            raise ValueError(f"dim must be >= 3, got {self.dim}")
        if len(res) != self.dim or len(per) != self.dim:
            raise ValueError("resolution and period need one entry per axis")
        if min(res) < 8:
            raise ValueError(f"resolution must be >= 8 per axis, got {res}")
        if min(per) <= 0:
            raise ValueError("period must be positive")

    @classmethod
    def cube(cls, resolution: int, dim: int = 3, period: float = 1.0) -> "GridSpec":
        return cls(dim, (resolution,) * dim, (period,) * dim)

    @property
    def spacing(self) -> tuple[float, ...]:
        return tuple(p / r for p, r in zip(self.period, self.resolution))

    @property
    def cell_volume(self) -> float:
        return math.prod(self.spacing)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.resolution

    def coordinates(self) -> list[np.ndarray]:
        """Node coordinates as broadcastable open-mesh arrays, one per axis."""
        axes = [np.arange(r) * h for r, h in zip(self.resolution, self.spacing)]
        return np.meshgrid(*axes, indexing="ij", sparse=True)


@dataclass(frozen=True)
class TensorField:
    data: np.ndarray
    variance: str
    grid: GridSpec

    def __post_init__(self):
        if set(self.variance) - {"u", "d"}:
            raise ValueError(f"bad variance string {self.variance!r}")
        expected = self.grid.shape + (self.grid.dim,) * len(self.variance)
        if self.data.shape != expected:
            raise ValueError(f"component array has shape {self.data.shape}, expected {expected}")

    @property
    def rank(self) -> int:
        return len(self.variance)

    @property
    def valence(self) -> tuple[int, int]:
        """(covariant count, contravariant count)."""
        return self.variance.count("d"), self.variance.count("u")

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.data)))

    def like(self, data: np.ndarray, variance: str | None = None) -> "TensorField":
        return TensorField(data, self.variance if variance is None else variance, self.grid)

    def __add__(self, other: "TensorField") -> "TensorField":
        _check_same_kind(self, other)
        return self.like(self.data + other.data)

    def __sub__(self, other: "TensorField") -> "TensorField":
        _check_same_kind(self, other)
        return self.like(self.data - other.data)

    def __neg__(self) -> "TensorField":
        return self.like(-self.data)

    def __mul__(self, c) -> "TensorField":
        if isinstance(c, TensorField):
            if c.rank != 0:
                raise ValueError("only scalar fields multiply tensors pointwise")
            c = c.data.reshape(c.data.shape + (1,) * self.rank)
        return self.like(self.data * c)

    __rmul__ = __mul__

    def sup_norm(self) -> float:
        """Largest absolute component over all nodes (chart norm)."""
        return float(np.max(np.abs(self.data))) if self.data.size else 0.0


def scalar_field(values: np.ndarray, grid: GridSpec) -> TensorField:
    values = np.asarray(values, dtype=float)
    return TensorField(np.broadcast_to(values, grid.shape).copy(), "", grid)


def _check_same_kind(a: TensorField, b: TensorField) -> None:
    if a.variance != b.variance:
        raise ValueError(f"variance mismatch: {a.variance!r} vs {b.variance!r}")
    if a.grid != b.grid:
        raise ValueError("fields live on different grids")


class MetricField:
    """Symmetric positive-definite covariant 2-tensor with cached inverse and density.

    The components are symmetrized on construction, so symmetry is exact.
    Construction fails with :class:`GeometryError` when the smallest eigenvalue
    at any node drops below ``MIN_EIGENVALUE``.
    """

    def __init__(self, components: np.ndarray, grid: GridSpec):
        n = grid.dim
        g = np.asarray(components, dtype=float)
        if g.shape != grid.shape + (n, n):
            raise ValueError(f"metric components have shape {g.shape}")
        if not np.all(np.isfinite(g)):
            raise GeometryError("metric has non-finite components")
        g = 0.5 * (g + np.swapaxes(g, -1, -2))
        eig = np.linalg.eigvalsh(g)
        self.min_eigenvalue = float(eig[..., 0].min())
        if self.min_eigenvalue < MIN_EIGENVALUE:
            raise GeometryError(
                f"metric is degenerate: smallest eigenvalue {self.min_eigenvalue:.3e}"
            )
        inv = np.linalg.inv(g)
        inv = 0.5 * (inv + np.swapaxes(inv, -1, -2))
        self.grid = grid
        self.g = g
        self.inv = inv
        self.sqrt_det = np.sqrt(np.linalg.det(g))
        g.setflags(write=False)
        inv.setflags(write=False)
        self.sqrt_det.setflags(write=False)

    @classmethod
    def flat(cls, grid: GridSpec, scale: float = 1.0) -> "MetricField":
        eye = np.broadcast_to(np.eye(grid.dim) * scale, grid.shape + (grid.dim, grid.dim))
        return cls(eye.copy(), grid)

    @property
    def dim(self) -> int:
        return self.grid.dim

    def tensor(self) -> TensorField:
        return TensorField(np.array(self.g), "dd", self.grid)

    def inverse_tensor(self) -> TensorField:
        return TensorField(np.array(self.inv), "uu", self.grid)

    def inverse_defect(self) -> float:
        """max |g^{ik} g_{kj} - delta^i_j| over all nodes."""
        prod = np.einsum("...ik,...kj->...ij", self.inv, self.g)
        return float(np.max(np.abs(prod - np.eye(self.dim))))

    def scaled(self, factor) -> "MetricField":
        factor = np.asarray(factor, dtype=float)
        if factor.ndim:
            factor = factor[..., None, None]
        return MetricField(self.g * factor, self.grid)

    def volume(self) -> float:
        return csum(self.sqrt_det) * self.grid.cell_volume


# ---------------------------------------------------------------- reductions


def csum(values: np.ndarray) -> float:
    """Correctly rounded sum, independent of memory layout and thread count."""
    return math.fsum(np.ravel(values).tolist())


def cdot(a: np.ndarray, b: np.ndarray) -> float:
    return csum(np.multiply(a, b))


# ------------------------------------------------------------- differencing


def _d1(values: np.ndarray, axis: int, h: float) -> np.ndarray:
    return (
        _W1 * (np.roll(values, -1, axis) - np.roll(values, 1, axis))
        + _W2 * (np.roll(values, -2, axis) - np.roll(values, 2, axis))
    ) / h


def fd_derivative(f: TensorField, axis: int) -> TensorField:
    """4th-order central difference along a periodic grid axis, componentwise."""
    if not 0 <= axis < f.grid.dim:
        raise ValueError(f"axis {axis} out of range for dim {f.grid.dim}")
    return f.like(_d1(f.data, axis, f.grid.spacing[axis]))


def partial_array(values: np.ndarray, grid: GridSpec) -> np.ndarray:
    """All first partials of a component array; derivative index goes first.

    Input shape ``(*grid, *idx)`` -> output ``(*grid, n, *idx)``.
    """
    parts = [_d1(values, a, grid.spacing[a]) for a in range(grid.dim)]
    return np.stack(parts, axis=grid.dim)


def d1_symbol(grid: GridSpec) -> list[np.ndarray]:
    """Real Fourier symbols of the first-derivative stencil, one per axis.

    The stencil is ``i * symbol(k)``; composition of two derivatives has
    symbol ``-symbol_a * symbol_b``.
    """
    out = []
    for a, (r, h) in enumerate(zip(grid.resolution, grid.spacing)):
        theta = 2.0 * np.pi * np.fft.fftfreq(r)
        sym = (2 * _W1 * np.sin(theta) + 2 * _W2 * np.sin(2 * theta)) / h
        shape = [1] * grid.dim
        shape[a] = r
        out.append(sym.reshape(shape))
    return out


# -------------------------------------------------------------- contraction

_LETTERS = string.ascii_letters


def contract(t: TensorField, slot_up: int, slot_down: int) -> TensorField:
    """Contract an upper slot against a lower slot (Einstein summation)."""
    v = t.variance
    for s in (slot_up, slot_down):
        if not 0 <= s < len(v):
            raise ValueError(f"slot {s} does not exist in variance {v!r}")
    if v[slot_up] != "u" or v[slot_down] != "d":
        raise ValueError(f"slots {slot_up},{slot_down} of {v!r} are not an up/down pair")
    letters = list(_LETTERS[: len(v)])
    letters[slot_down] = letters[slot_up]
    keep = [i for i in range(len(v)) if i not in (slot_up, slot_down)]
    out = "".join(letters[i] for i in keep)
    data = np.einsum(f"...{''.join(letters)}->...{out}", t.data)
    return TensorField(data, "".join(v[i] for i in keep), t.grid)


def ein(subscripts: str, *operands: np.ndarray) -> np.ndarray:
    """einsum with pairwise contraction order, for products of three or more factors."""
    return np.einsum(subscripts, *operands, optimize=True)


def pointwise_inner(t1: TensorField, t2: TensorField, g: MetricField) -> TensorField:
    """Full metric contraction <t1, t2>_g at every node, one slot at a time."""
    if t1.variance != t2.variance:
        raise ValueError(f"valence mismatch: {t1.variance!r} vs {t2.variance!r}")
    if t1.rank == 0:
        return scalar_field(t1.data * t2.data, t1.grid)
    moved = t2.data
    rank = t1.rank
    for s, slot in enumerate(t1.variance):
        m = g.g if slot == "u" else g.inv
        src = _LETTERS[:rank]
        dst = src[:s] + "Z" + src[s + 1 :]
        moved = np.einsum(f"...{src[s]}Z,...{dst}->...{src}", m, moved)
    axes = tuple(range(-rank, 0))
    return scalar_field(np.sum(t1.data * moved, axis=axes), t1.grid)


def norm_squared(t: TensorField, g: MetricField) -> np.ndarray:
    return pointwise_inner(t, t, g).data


def integrate(f: TensorField, g: MetricField) -> float:
    """Sum of f * sqrt(det g) * cell volume over all nodes."""
    if f.rank != 0:
        raise ValueError("integrate expects a scalar field")
    if f.grid != g.grid:
        raise ValueError("field and metric live on different grids")
    return csum(f.data * g.sqrt_det) * f.grid.cell_volume


def l2_norm(t: TensorField, g: MetricField) -> float:
    return math.sqrt(max(integrate(scalar_field(norm_squared(t, g), t.grid), g), 0.0))


def raise_index(t: TensorField, g: MetricField, slot: int) -> TensorField:
    if t.variance[slot] != "d":
        raise ValueError(f"slot {slot} of {t.variance!r} is not covariant")
    return _move_index(t, g.inv, slot, "u")


def lower_index(t: TensorField, g: MetricField, slot: int) -> TensorField:
    if t.variance[slot] != "u":
        raise ValueError(f"slot {slot} of {t.variance!r} is not contravariant")
    return _move_index(t, g.g, slot, "d")


def _move_index(t: TensorField, m: np.ndarray, slot: int, new: str) -> TensorField:
    r = t.rank
    src = _LETTERS[:r]
    z = "z"
    out = src[:slot] + z + src[slot + 1 :]
    data = np.einsum(f"...{z}{src[slot]},...{src}->...{out}", m, t.data)
    return TensorField(data, t.variance[:slot] + new + t.variance[slot + 1 :], t.grid)


def symmetrize(t: TensorField, slots: Sequence[int] = (0, 1)) -> TensorField:
    i, j = slots
    return t.like(0.5 * (t.data + np.swapaxes(t.data, t.grid.dim + i, t.grid.dim + j)))


def zeros(grid: GridSpec, variance: str) -> TensorField:
    return TensorField(np.zeros(grid.shape + (grid.dim,) * len(variance)), variance, grid)


def identity_tensor(grid: GridSpec) -> TensorField:
    """Kronecker delta as a (1,1) field."""
    n = grid.dim
    return TensorField(np.broadcast_to(np.eye(n), grid.shape + (n, n)).copy(), "ud", grid)
