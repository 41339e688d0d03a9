"""Kernel mean and local polynomial quantile estimators on an evaluation grid."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

from . import _qr, _sums
from .numerics import EvalGrid, KernelSpec, product_kernel

DEFAULT_MASS_FLOOR = 5.0


class InsufficientDataError(ValueError):
    """Too few active observations to identify a local fit."""


@dataclass(frozen=True, eq=False)
class Sample:
    """Observations in long format.

    Each row is one outcome with its covariate vector.  ``cluster`` groups
    rows into resampling units (auctions contribute several bids); ``stratum``
    restricts resampling to within-stratum draws (one per period).
    """

    y: np.ndarray
    x: np.ndarray
    weight: np.ndarray | None = None
    group: np.ndarray | None = None
    cluster: np.ndarray | None = None
    stratum: np.ndarray | None = None
    n_units: int = field(init=False)

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).ravel()
        x = np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if x.ndim != 2 or x.shape[0] != y.size:
            raise ValueError("x must have one row per outcome")
        if y.size == 0:
            raise ValueError("empty sample")
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(x))):
            raise ValueError("sample contains non-finite values")
        w = np.ones(y.size) if self.weight is None else np.asarray(self.weight, dtype=float).ravel()
        if w.size != y.size:
            raise ValueError("weight length mismatch")
        if np.any(w < 0) or not np.any(w > 0):
            raise ValueError("weights must be nonnegative with at least one positive")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "weight", w)
        for name in ("group", "cluster", "stratum"):
            v = getattr(self, name)
            if v is not None:
                v = np.asarray(v).ravel()
                if v.size != y.size:
                    raise ValueError(f"{name} length mismatch")
                object.__setattr__(self, name, v)
        if self.cluster is None:
            object.__setattr__(self, "cluster", np.arange(y.size))
        else:
            _, inv = np.unique(self.cluster, return_inverse=True)
            object.__setattr__(self, "cluster", inv.astype(np.int64))
        object.__setattr__(self, "n_units", int(self.cluster.max()) + 1)

    @property
    def n_obs(self) -> int:
        return self.y.size

    @property
    def d(self) -> int:
        return self.x.shape[1]

    def subset(self, rows) -> "Sample":
        rows = np.asarray(rows)
        pick = lambda v: None if v is None else v[rows]
        return Sample(self.y[rows], self.x[rows], self.weight[rows], pick(self.group),
                      self.cluster[rows], pick(self.stratum))

    def with_y(self, y) -> "Sample":
        return Sample(y, self.x, self.weight, self.group, self.cluster, self.stratum)


@dataclass(frozen=True, eq=False)
class MeanField:
    v_hat: np.ndarray
    sigma_hat: np.ndarray
    effective_mass: np.ndarray
    usable: np.ndarray


@dataclass(frozen=True)
class QuantileFit:
    gamma_hat: np.ndarray
    q_hat: float
    objective: float
    nonunique: bool = False


@dataclass(frozen=True, eq=False)
class QuantileSurface:
    q_hat: np.ndarray
    objective: np.ndarray
    nonunique: np.ndarray
    effective_mass: np.ndarray
    usable: np.ndarray


def _kernel_matrix(sample: Sample, grid: EvalGrid, h: float, kernel: KernelSpec) -> np.ndarray:
    u = (sample.x[None, :, :] - grid.x_points[:, None, :]) / h
    return product_kernel(kernel, u)


def _check_bandwidth(h):
    if not np.all(np.asarray(h) > 0):
        raise ValueError("bandwidth must be positive")


def local_constant_mean(
    sample: Sample,
    grid: EvalGrid,
    h: float,
    kernel: KernelSpec = KernelSpec(),
    mass_floor: float = DEFAULT_MASS_FLOOR,
    weights=None,
) -> MeanField:
    """Kernel-weighted mean and its scale on the covariate grid.

    ``v = sum w Y K / (n h^d)`` and ``sigma^2 = sum w Y^2 K^2 / (n h^d)`` with
    ``n = sum w``.  ``weights`` multiplies the sample weights; a row of
    resampling multiplicities reproduces the estimator on a resample.  With
    a 2-d ``weights`` array the fields are returned for every row at once.

    Returns fields shaped ``(n_x,)`` (or ``(B, n_x)``).
    """
    _check_bandwidth(h)
    if grid.d != sample.d:
        raise ValueError("grid and sample covariate dimensions differ")
    K = _kernel_matrix(sample, grid, h, kernel)
    w = sample.weight if weights is None else np.asarray(weights, dtype=float) * sample.weight
    batched = w.ndim == 2
    W = np.ascontiguousarray(np.atleast_2d(w), dtype=float)
    m0, m1, m2 = _sums.kernel_moments(W, sample.y, np.ascontiguousarray(K))
    scale = h**sample.d
    n = W.sum(axis=1)[:, None]
    v = m1 / (n * scale)
    s2 = m2 / (n * scale)
    mass = m0 / (kernel.peak**sample.d * sample.weight.mean())
    sigma = np.sqrt(np.maximum(s2, 0.0))
    if not batched:
        v, sigma, mass = v[0], sigma[0], mass[0]
    return MeanField(v, sigma, mass, mass >= mass_floor)


def check_loss(u, tau: float):
    """``tau * u`` for u >= 0 and ``(tau - 1) * u`` otherwise."""
    if not 0 < tau < 1:
        raise ValueError("tau must lie in (0, 1)")
    u = np.asarray(u, dtype=float)
    out = np.where(u >= 0, tau * u, (tau - 1.0) * u)
    return float(out) if out.ndim == 0 else out


def multi_indices(d: int, r: int) -> list[tuple[int, ...]]:
    """Exponent vectors of total degree <= r, graded then lexicographic.

    Within one degree the order is descending lexicographic, so the linear
    terms come out as (z1, z2, ...).
    """
    if r < 0:
        raise ValueError("polynomial order must be nonnegative")
    out = []
    for deg in range(r + 1):
        level = [u for u in itertools.product(range(deg + 1), repeat=d) if sum(u) == deg]
        out.extend(sorted(level, reverse=True))
    return out


def polynomial_basis(z, r: int) -> np.ndarray:
    """Monomials ``z^u`` for every multi-index of degree <= r (constant first)."""
    z = np.atleast_1d(np.asarray(z, dtype=float))
    idx = np.array(multi_indices(z.shape[-1], r))
    return np.prod(z[..., None, :] ** idx, axis=-1)


def _lp_fit(C, y, w, tau):
    # min sum w[tau u+ + (1-tau) u-]  s.t.  C g + u+ - u- = y
    n, k = C.shape
    c = np.concatenate([np.zeros(k), tau * w, (1 - tau) * w])
    A = np.hstack([C, np.eye(n), -np.eye(n)])
    bounds = [(None, None)] * k + [(0, None)] * (2 * n)
    res = linprog(c, A_eq=A, b_eq=y, bounds=bounds, method="highs")
    if res.status != 0:
        raise RuntimeError(f"quantile LP failed: {res.message}")
    best = res.fun
    # lexicographic tie-break: minimise each coefficient in turn on the optimal face
    gamma = res.x[:k].copy()
    A_ub = [c]
    b_ub = [best + 1e-9 * (1.0 + abs(best))]
    fixed = []
    for j in range(k):
        cj = np.zeros(k + 2 * n)
        cj[j] = 1.0
        A_eq = A
        b_eq = y
        if fixed:
            rows = np.zeros((len(fixed), k + 2 * n))
            for r_, (jj, _) in enumerate(fixed):
                rows[r_, jj] = 1.0
            A_eq = np.vstack([A, rows])
            b_eq = np.concatenate([y, [v for _, v in fixed]])
        res_j = linprog(cj, A_ub=np.array(A_ub), b_ub=b_ub, A_eq=A_eq, b_eq=b_eq,
                        bounds=bounds, method="highs")
        if res_j.status != 0:
            break
        gamma = res_j.x[:k]
        fixed.append((j, gamma[j]))
    return _polish(C, y, w, tau, gamma)


def _polish(C, y, w, tau, gamma):
    # snap the interior-point-tolerance answer to the basic solution through
    # its k smallest-residual, linearly independent rows
    n, k = C.shape
    order = np.argsort(np.abs(y - C @ gamma), kind="mergesort")
    rows = []
    for i in order:
        trial = rows + [i]
        if np.linalg.matrix_rank(C[trial]) == len(trial):
            rows = trial
            if len(rows) == k:
                break
    if len(rows) < k:
        return gamma
    exact = np.linalg.solve(C[rows], y[rows])
    loss = lambda g: float(np.sum(w * check_loss(y - C @ g, tau)))
    before, after = loss(gamma), loss(exact)
    return exact if after <= before + 1e-9 * (1.0 + abs(before)) else gamma


def _lp_nonunique(C, y, w, tau, gamma, obj):
    # probe the face: does any coefficient move without raising the objective?
    n, k = C.shape
    c = np.concatenate([np.zeros(k), tau * w, (1 - tau) * w])
    A = np.hstack([C, np.eye(n), -np.eye(n)])
    bounds = [(None, None)] * k + [(0, None)] * (2 * n)
    cap = obj + 1e-9 * (1.0 + abs(obj))
    for j in range(k):
        cj = np.zeros(k + 2 * n)
        cj[j] = -1.0
        res = linprog(cj, A_ub=c[None, :], b_ub=[cap], A_eq=A, b_eq=y, bounds=bounds, method="highs")
        if res.status == 0 and -res.fun > gamma[j] + 1e-8 * (1 + abs(gamma[j])):
            return True
    return False


def _active(sample: Sample, x, h, kernel, group, weights):
    rows = np.ones(sample.n_obs, dtype=bool)
    if group is not None:
        if sample.group is None:
            raise ValueError("sample has no group labels")
        rows &= sample.group == group
    w = sample.weight if weights is None else sample.weight * np.asarray(weights, dtype=float)
    z = (sample.x - np.asarray(x, dtype=float)[None, :]) / h
    kw = product_kernel(kernel, z) * w
    keep = rows & (kw > 0)
    return z[keep], sample.y[keep], kw[keep]


def local_poly_quantile(
    sample: Sample,
    x,
    tau: float,
    h: float,
    r: int = 1,
    group=None,
    kernel: KernelSpec = KernelSpec(),
    weights=None,
) -> QuantileFit:
    """Order-r local polynomial tau-quantile at covariate point ``x``.

    Minimises ``sum w_i K((X_i - x)/h) l_tau(Y_i - g'c((X_i - x)/h))`` exactly,
    taking the lexicographically smallest ``g`` when the minimiser is not
    unique.  ``group`` keeps only rows with that label.
    """
    _check_bandwidth(h)
    if not 0 < tau < 1:
        raise ValueError("tau must lie in (0, 1)")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.size != sample.d:
        raise ValueError("evaluation point dimension differs from the sample")
    z, y, w = _active(sample, x, h, kernel, group, weights)
    k = len(multi_indices(sample.d, r))
    C = polynomial_basis(z, r) if z.size else np.empty((0, k))
    if y.size < k or np.linalg.matrix_rank(C) < k:
        raise InsufficientDataError(
            f"local design at x={x.tolist()} has {y.size} active observations for {k} coefficients"
        )
    if sample.d == 1 and r == 0:
        q, obj, nu = _qr.fit_intercept(y, w, tau)
        return QuantileFit(np.array([q]), float(q), float(obj), bool(nu))
    if sample.d == 1 and r == 1:
        a, b, obj, nu, _ = _qr.fit_line(z[:, 0].copy(), y, w, tau, 0.0)
        return QuantileFit(np.array([a, b]), float(a), float(obj), bool(nu))
    gamma = _lp_fit(C, y, w, tau)
    obj = float(np.sum(w * check_loss(y - C @ gamma, tau)))
    nu = _lp_nonunique(C, y, w, tau, gamma, obj)
    return QuantileFit(gamma, float(gamma[0]), obj, nu)


def quantile_surface(
    sample: Sample,
    grid: EvalGrid,
    h: float,
    r: int = 1,
    group=None,
    kernel: KernelSpec = KernelSpec(),
    mass_floor: float = DEFAULT_MASS_FLOOR,
    weights=None,
    strict: bool = True,
) -> QuantileSurface:
    """``local_poly_quantile`` at every (x, tau) grid point.

    Points whose kernel mass falls below ``mass_floor`` observation
    equivalents, or whose local design is rank deficient, are flagged
    unusable (NaN estimate) rather than raising.  An empty usable region
    raises unless ``strict`` is false (bootstrap resamples use that).
    """
    _check_bandwidth(h)
    if grid.d != sample.d:
        raise ValueError("grid and sample covariate dimensions differ")
    taus = grid.tau_axis
    if not np.all((taus > 0) & (taus < 1)):
        raise ValueError("quantile grid must lie inside (0, 1)")
    rows = np.ones(sample.n_obs, dtype=bool)
    if group is not None:
        if sample.group is None:
            raise ValueError("sample has no group labels")
        rows = sample.group == group
        if not rows.any():
            raise ValueError(f"group {group!r} is empty")
    w = sample.weight if weights is None else sample.weight * np.asarray(weights, dtype=float)
    w = np.where(rows, w, 0.0)
    unit = float(sample.weight[rows].mean())
    if sample.d == 1 and r in (0, 1):
        q, _, obj, nu, mass, usable = _qr.surface_1d(
            sample.x[:, 0], sample.y, w, grid.x_points[:, 0], taus, float(h),
            kernel.support_radius, kernel.peak, unit, float(mass_floor), r,
        )
    else:
        q, obj, nu, mass, usable = _generic_surface(sample, grid, h, r, kernel, w, unit, mass_floor)
    if strict and not usable.any():
        raise InsufficientDataError("no usable evaluation point for the quantile surface")
    return QuantileSurface(q, obj, nu, mass, usable)


def _generic_surface(sample, grid, h, r, kernel, w, unit, mass_floor):
    G, T = grid.shape
    q = np.full((G, T), np.nan)
    obj = np.full((G, T), np.nan)
    nu = np.zeros((G, T), dtype=bool)
    mass = np.zeros(G)
    usable = np.zeros(G, dtype=bool)
    sub = Sample(sample.y, sample.x, w)
    for g, x in enumerate(grid.x_points):
        kw = product_kernel(kernel, (sample.x - x) / h) * w
        mass[g] = kw.sum() / (kernel.peak**sample.d * unit)
        if mass[g] < mass_floor:
            continue
        try:
            for j, tau in enumerate(grid.tau_axis):
                fit = local_poly_quantile(sub, x, tau, h, r, None, kernel)
                q[g, j], obj[g, j], nu[g, j] = fit.q_hat, fit.objective, fit.nonunique
        except InsufficientDataError:
            q[g] = np.nan
            continue
        usable[g] = True
    return q, obj, nu, mass, usable
