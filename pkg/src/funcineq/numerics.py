"""Kernels, evaluation grids, midpoint quadrature, quantiles and seeded streams."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

KERNEL_KINDS = ("epanechnikov_half", "epanechnikov")


@dataclass(frozen=True)
class KernelSpec:
    """Compact-support symmetric kernel.

    ``epanechnikov_half`` is ``K(u) = 1.5 * (1 - (2u)^2)`` on ``|u| <= 1/2``;
    ``epanechnikov`` rescales the same shape to an arbitrary radius.
    """

    kind: str = "epanechnikov_half"
    support_radius: float = 0.5

    def __post_init__(self):
        if self.kind not in KERNEL_KINDS:
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if self.kind == "epanechnikov_half" and self.support_radius != 0.5:
            raise ValueError("epanechnikov_half has support radius 1/2")
        if not self.support_radius > 0:
            raise ValueError("support_radius must be positive")

    @property
    def peak(self) -> float:
        return 0.75 / self.support_radius


def kernel_eval(spec: KernelSpec, u):
    """Evaluate the kernel at ``u`` (scalar or array)."""
    r = spec.support_radius
    u = np.asarray(u, dtype=float)
    t = u / r
    out = np.where(np.abs(t) <= 1.0, (0.75 / r) * (1.0 - t * t), 0.0)
    return float(out) if out.ndim == 0 else out


def product_kernel(spec: KernelSpec, u):
    """Coordinatewise product kernel; the last axis of ``u`` indexes dimensions."""
    u = np.asarray(u, dtype=float)
    if u.ndim == 0:
        return kernel_eval(spec, u)
    out = np.prod(kernel_eval(spec, u), axis=-1)
    return float(out) if np.ndim(out) == 0 else out


class DegenerateCovariateError(ValueError):
    pass


def rule_of_thumb_bandwidth(x_values, factor: float = 2.0, exponent: float = -0.2) -> float:
    """``factor * s_X * n**exponent`` with ``s_X`` the (n-1)-denominator sd."""
    x = np.asarray(x_values, dtype=float).ravel()
    if x.size < 2:
        raise ValueError("need at least two covariate values")
    if not factor > 0:
        raise ValueError("factor must be positive")
    s = float(np.std(x, ddof=1))
    if s == 0.0:
        raise DegenerateCovariateError("covariate has zero sample standard deviation")
    return factor * s * x.size**exponent


def _midpoints(lo: float, hi: float, num: int) -> np.ndarray:
    if not hi > lo:
        raise ValueError(f"empty interval [{lo}, {hi}]")
    if num < 1:
        raise ValueError("need at least one grid point")
    step = (hi - lo) / num
    return lo + step * (np.arange(num) + 0.5)


@dataclass(frozen=True, eq=False)
class EvalGrid:
    """Product midpoint grid over a covariate box times an index set.

    Fields on the grid are arrays of shape ``(n_x, n_tau)`` where ``n_x`` is
    the number of covariate points (C order over ``x_axes``).
    """

    x_axes: tuple
    tau_axis: np.ndarray
    x_region: tuple
    tau_region: tuple | None = None
    x_points: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        axes = tuple(np.asarray(a, dtype=float) for a in self.x_axes)
        for a in axes:
            if a.ndim != 1 or a.size < 1:
                raise ValueError("each x axis must be a nonempty vector")
            if a.size > 1 and not np.all(np.diff(a) > 0):
                raise ValueError("x axes must be strictly increasing")
        object.__setattr__(self, "x_axes", axes)
        tau = np.atleast_1d(np.asarray(self.tau_axis, dtype=float))
        if tau.size > 1 and not np.all(np.diff(tau) > 0):
            raise ValueError("tau axis must be strictly increasing")
        object.__setattr__(self, "tau_axis", tau)
        mesh = np.meshgrid(*axes, indexing="ij")
        pts = np.stack([m.ravel() for m in mesh], axis=1)
        object.__setattr__(self, "x_points", pts)
        for (lo, hi), a in zip(self.x_region, axes):
            if a.min() < lo or a.max() > hi:
                raise ValueError("grid points outside the declared region")
        if self.cell_measure <= 0:
            raise ValueError("cell measure must be positive")

    @classmethod
    def midpoint(
        cls,
        x_region: Sequence[tuple[float, float]],
        nx: int | Sequence[int] = 101,
        tau=None,
        ntau: int = 17,
    ) -> "EvalGrid":
        """Cell-centre grid; ``tau`` is None, a fixed index value, or an interval."""
        x_region = tuple((float(lo), float(hi)) for lo, hi in x_region)
        if isinstance(nx, int):
            nx = [nx] * len(x_region)
        axes = tuple(_midpoints(lo, hi, k) for (lo, hi), k in zip(x_region, nx))
        if tau is None:
            return cls(axes, np.array([np.nan]), x_region, None)
        if np.ndim(tau) == 0:
            return cls(axes, np.array([float(tau)]), x_region, None)
        lo, hi = (float(t) for t in tau)
        return cls(axes, _midpoints(lo, hi, ntau), x_region, (lo, hi))

    @property
    def d(self) -> int:
        return len(self.x_axes)

    @property
    def n_x(self) -> int:
        return self.x_points.shape[0]

    @property
    def n_tau(self) -> int:
        return self.tau_axis.size

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_x, self.n_tau)

    @property
    def integrates_tau(self) -> bool:
        return self.tau_region is not None and self.n_tau > 1

    @property
    def cell_measure(self) -> float:
        m = 1.0
        for (lo, hi), a in zip(self.x_region, self.x_axes):
            m *= (hi - lo) / a.size
        if self.integrates_tau:
            lo, hi = self.tau_region
            m *= (hi - lo) / self.n_tau
        return m

    @property
    def total_measure(self) -> float:
        return self.cell_measure * self.n_x * (self.n_tau if self.integrates_tau else 1)

    def refined(self, factor: int = 2) -> "EvalGrid":
        """Same region with ``factor`` times as many cells per axis."""
        nx = [a.size * factor for a in self.x_axes]
        if self.integrates_tau:
            return EvalGrid.midpoint(self.x_region, nx, self.tau_region, self.n_tau * factor)
        tau = None if np.isnan(self.tau_axis[0]) else float(self.tau_axis[0])
        return EvalGrid.midpoint(self.x_region, nx, tau)


def riemann_integrate(values, grid: EvalGrid, mask=None) -> float:
    """Midpoint-rule integral of a grid field; masked-out cells contribute 0."""
    v = np.asarray(values, dtype=float)
    if v.shape != grid.shape:
        raise ValueError(f"field shape {v.shape} does not match grid {grid.shape}")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != grid.shape:
            raise ValueError(f"mask shape {mask.shape} does not match grid {grid.shape}")
        v = np.where(mask, v, 0.0)
    return float(v.sum() * grid.cell_measure)


# ceil(level * B) is guarded against level * B landing a rounding error above an integer
_QUANTILE_SLACK = 1e-10


def quantile_rank(level: float, size: int) -> int:
    k = int(math.ceil(level * size - _QUANTILE_SLACK))
    return min(max(k, 1), size)


def empirical_quantile(values, level: float) -> float:
    """Smallest v with #{values <= v} / B >= level (left-continuous inverse)."""
    x = np.asarray(values, dtype=float).ravel()
    if x.size == 0:
        raise ValueError("empirical_quantile of an empty sample")
    if not 0 < level <= 1:
        raise ValueError("level must lie in (0, 1]")
    k = quantile_rank(level, x.size)
    return float(np.partition(x, k - 1)[k - 1])


def weighted_quantile(values, probs, level: float) -> float:
    """Left-continuous quantile of a discrete law with atoms ``values``."""
    x = np.asarray(values, dtype=float).ravel()
    w = np.asarray(probs, dtype=float).ravel()
    order = np.argsort(x, kind="mergesort")
    cdf = np.cumsum(w[order]) / w.sum()
    k = int(np.searchsorted(cdf, level - _QUANTILE_SLACK, side="left"))
    return float(x[order][min(k, x.size - 1)])


@dataclass(frozen=True)
class RandomSource:
    """Counter-based (Philox) stream keyed by ``(seed, stream_id)``.

    ``generator(*path)`` derives independent child streams, so replication
    ``r`` can draw its data and its resamples from fixed sub-streams no matter
    which worker runs it.
    """

    seed: int
    stream_id: int = 0

    def __post_init__(self):
        if self.stream_id < 0:
            raise ValueError("stream_id must be nonnegative")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    def generator(self, *path: int) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed, spawn_key=(self.stream_id, *path))
        return np.random.Generator(np.random.Philox(ss))

    def child(self, stream_id: int) -> "RandomSource":
        return RandomSource(self.seed, stream_id)
