"""Field builders for the mean, auction and quantile difference-in-differences tests."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.stats import norm

from .engine import Estimate, FieldBuilder, FieldStack, studentize
from .estimators import (
    DEFAULT_MASS_FLOOR,
    InsufficientDataError,
    Sample,
    local_constant_mean,
    quantile_surface,
)
from .numerics import EvalGrid, KernelSpec

MEDIAN_TOL = 1e-9


@dataclass(frozen=True)
class MeanInequalitySpec:
    """H0: E[Y - theta | X = x] <= 0 on ``x_region``."""

    theta: float = 0.0
    x_region: tuple | None = None

    def grid(self, nx: int = 101) -> EvalGrid:
        if self.x_region is None:
            raise ValueError("x_region is required to build a grid")
        return EvalGrid.midpoint(_as_box(self.x_region), nx)


@dataclass(frozen=True)
class AuctionSpec:
    bidder_counts: tuple = (2, 3)
    tau_range: tuple = (0.1, 0.9)
    n_tau: int = 20
    x_region: tuple | None = None
    x_quantiles: tuple = (0.1, 0.9)
    poly_order: int = 1
    b_lower_mode: str = "sample_min"
    b_lower: float | None = None
    normalize_covariate: bool = False

    def __post_init__(self):
        lo, hi = self.tau_range
        if not 0 < lo < hi < 1:
            raise ValueError("tau_range must lie strictly inside (0, 1)")
        if len(self.bidder_counts) != 2 or self.bidder_counts[0] == self.bidder_counts[1]:
            raise ValueError("bidder_counts must be two distinct labels")
        if self.b_lower_mode not in ("sample_min", "supplied"):
            raise ValueError("b_lower_mode must be 'sample_min' or 'supplied'")
        if self.b_lower_mode == "supplied" and self.b_lower is None:
            raise ValueError("b_lower_mode 'supplied' needs b_lower")


@dataclass(frozen=True)
class DiDSpec:
    period_t: object
    period_s: object
    tau_range: tuple = (0.1, 0.9)
    n_tau: int = 17
    x_region: tuple | None = None
    x_quantiles: tuple = (0.1, 0.9)
    poly_order: int = 1
    h_t: float | None = None
    h_s: float | None = None

    def __post_init__(self):
        lo, hi = self.tau_range
        if not 0 < lo < 0.5 < hi < 1:
            raise ValueError("tau_range must contain 0.5 and lie inside (0, 1)")


def _as_box(region) -> tuple:
    region = tuple(region)
    if len(region) == 2 and np.ndim(region[0]) == 0:
        return ((float(region[0]), float(region[1])),)
    return tuple((float(lo), float(hi)) for lo, hi in region)


def _quantile_box(x: np.ndarray, qs) -> tuple:
    lo = np.quantile(x, qs[0], axis=0)
    hi = np.quantile(x, qs[1], axis=0)
    return tuple((float(a), float(b)) for a, b in zip(lo, hi))


def median_index(grid: EvalGrid) -> int:
    hits = np.flatnonzero(np.abs(grid.tau_axis - 0.5) <= MEDIAN_TOL)
    if hits.size != 1:
        raise ValueError("the quantile grid must contain tau = 0.5")
    return int(hits[0])


# ------------------------------------------------------------------- mean test


@dataclass(frozen=True, eq=False)
class MeanFieldBuilder(FieldBuilder):
    """Studentized local constant mean of ``Y - theta`` (one inequality)."""

    sample: Sample
    grid: EvalGrid
    h: float
    theta: float = 0.0
    kernel: KernelSpec = KernelSpec()
    mass_floor: float = DEFAULT_MASS_FLOOR

    def __post_init__(self):
        if self.grid.n_tau != 1:
            raise ValueError("the mean test uses a grid over x only")

    @property
    def rate(self) -> float:
        return math.sqrt(self.sample.n_units * self.h**self.sample.d)

    def _shifted(self) -> Sample:
        return self.sample.with_y(self.sample.y - self.theta)

    def _wrap(self, mf) -> Estimate:
        G = self.grid.n_x
        return Estimate(
            v=mf.v_hat.reshape(1, G, 1),
            sigma=mf.sigma_hat.reshape(1, G, 1),
            usable=mf.usable.reshape(G, 1),
            rate=np.array([self.rate]),
        )

    def estimate(self, weights=None) -> Estimate:
        mf = local_constant_mean(self._shifted(), self.grid, self.h, self.kernel, self.mass_floor, weights)
        return self._wrap(mf)

    def estimate_batch(self, weights) -> list[Estimate]:
        weights = np.atleast_2d(weights)
        mf = local_constant_mean(self._shifted(), self.grid, self.h, self.kernel, self.mass_floor, weights)
        return [
            self._wrap(type(mf)(mf.v_hat[b], mf.sigma_hat[b], mf.effective_mass[b], mf.usable[b]))
            for b in range(weights.shape[0])
        ]

    def with_sample(self, sample: Sample) -> "MeanFieldBuilder":
        return replace(self, sample=sample)


def build_mean_fields(sample: Sample, spec: MeanInequalitySpec, grid: EvalGrid, h: float, **kw) -> FieldStack:
    return studentize(MeanFieldBuilder(sample, grid, h, spec.theta, **kw).estimate())


# ---------------------------------------------------------------- auction test


def normal_cdf_transform(x: np.ndarray) -> np.ndarray:
    """Studentize each covariate and map it through the standard normal CDF."""
    x = np.asarray(x, dtype=float)
    sd = x.std(axis=0, ddof=1)
    if np.any(sd == 0):
        raise ValueError("cannot normalise a constant covariate")
    return norm.cdf((x - x.mean(axis=0)) / sd)


def auction_level_covariates(sample: Sample) -> np.ndarray:
    """One covariate row per auction (the first bid row of each)."""
    _, first = np.unique(sample.cluster, return_index=True)
    return sample.x[first]


def prepare_auction_sample(sample: Sample, spec: AuctionSpec) -> Sample:
    if not spec.normalize_covariate:
        return sample
    xa = auction_level_covariates(sample)
    mu, sd = xa.mean(axis=0), xa.std(axis=0, ddof=1)
    if np.any(sd == 0):
        raise ValueError("cannot normalise a constant covariate")
    x = norm.cdf((sample.x - mu) / sd)
    return Sample(sample.y, x, sample.weight, sample.group, sample.cluster, sample.stratum)


def auction_grid(sample: Sample, spec: AuctionSpec, nx: int = 101) -> EvalGrid:
    box = _as_box(spec.x_region) if spec.x_region is not None else _quantile_box(
        auction_level_covariates(sample), spec.x_quantiles)
    return EvalGrid.midpoint(box, nx, spec.tau_range, spec.n_tau)


@dataclass(frozen=True, eq=False)
class AuctionFieldBuilder(FieldBuilder):
    """Bid-quantile inequalities for two bidder counts (k1 < k2).

    ``v1 = q_k1 - q_k2`` and ``v2 = b_lower - 2 q_k1 + q_k2`` with sigma = 1.
    """

    sample: Sample
    grid: EvalGrid
    h: float
    spec: AuctionSpec = AuctionSpec()
    kernel: KernelSpec = KernelSpec()
    mass_floor: float = DEFAULT_MASS_FLOOR

    def __post_init__(self):
        if self.sample.group is None:
            raise ValueError("auction sample needs bidder-count group labels")
        for k in self.spec.bidder_counts:
            if not np.any(self.sample.group == k):
                raise ValueError(f"no auctions with {k} bidders")

    @property
    def rate(self) -> float:
        return math.sqrt(self.sample.n_units * self.h**self.sample.d)

    def b_lower(self, weights=None) -> float:
        if self.spec.b_lower_mode == "supplied":
            return float(self.spec.b_lower)
        w = self.sample.weight if weights is None else self.sample.weight * weights
        return float(self.sample.y[w > 0].min())

    def estimate(self, weights=None) -> Estimate:
        k1, k2 = self.spec.bidder_counts
        strict = weights is None
        s1 = quantile_surface(self.sample, self.grid, self.h, self.spec.poly_order, k1,
                              self.kernel, self.mass_floor, weights, strict)
        s2 = quantile_surface(self.sample, self.grid, self.h, self.spec.poly_order, k2,
                              self.kernel, self.mass_floor, weights, strict)
        b = self.b_lower(weights)
        usable = np.broadcast_to((s1.usable & s2.usable)[:, None], self.grid.shape).copy()
        v = np.stack([s1.q_hat - s2.q_hat, b - 2.0 * s1.q_hat + s2.q_hat])
        v = np.where(usable, v, 0.0)
        diag = {"b_lower": b, "nonunique_fits": int(s1.nonunique.sum() + s2.nonunique.sum())}
        return Estimate(v, None, usable, np.full(2, self.rate), diag)

    def with_sample(self, sample: Sample) -> "AuctionFieldBuilder":
        return replace(self, sample=sample)


def build_auction_fields(sample: Sample, spec: AuctionSpec, grid: EvalGrid, h: float, **kw) -> FieldStack:
    return studentize(AuctionFieldBuilder(sample, grid, h, spec, **kw).estimate())


# -------------------------------------------------------------------- DiD test


def did_rate(n_t: float, h_t: float, n_s: float, h_s: float, d: int = 1) -> float:
    a = n_t * h_t**d
    b = n_s * h_s**d
    return math.sqrt(a * b / (a + b))


def did_grid(sample: Sample, spec: DiDSpec, nx: int = 101) -> EvalGrid:
    box = _as_box(spec.x_region) if spec.x_region is not None else _quantile_box(sample.x, spec.x_quantiles)
    return EvalGrid.midpoint(box, nx, spec.tau_range, spec.n_tau)


def two_period_sample(sample: Sample, spec: DiDSpec) -> Sample:
    """Rows of the two periods, stratified by period for resampling."""
    if sample.group is None:
        raise ValueError("DiD sample needs period labels")
    for p in (spec.period_t, spec.period_s):
        if not np.any(sample.group == p):
            raise ValueError(f"period {p!r} is missing from the data")
    rows = np.flatnonzero((sample.group == spec.period_t) | (sample.group == spec.period_s))
    sub = sample.subset(rows)
    return Sample(sub.y, sub.x, sub.weight, sub.group, sub.cluster, sub.group)


@dataclass(frozen=True, eq=False)
class DiDFieldBuilder(FieldBuilder):
    """``v = -Delta`` with Delta the median-centred quantile difference between periods."""

    sample: Sample
    grid: EvalGrid
    spec: DiDSpec
    h_t: float
    h_s: float
    kernel: KernelSpec = KernelSpec()
    mass_floor: float = DEFAULT_MASS_FLOOR
    counts: tuple = field(init=False)

    def __post_init__(self):
        med = median_index(self.grid)
        object.__setattr__(self, "_median", med)
        unit_period = np.empty(self.sample.n_units, dtype=self.sample.group.dtype)
        unit_period[self.sample.cluster] = self.sample.group
        n_t = int(np.sum(unit_period == self.spec.period_t))
        n_s = int(np.sum(unit_period == self.spec.period_s))
        if n_t == 0 or n_s == 0:
            raise ValueError("both periods must be present")
        object.__setattr__(self, "counts", (n_t, n_s))

    @property
    def rate(self) -> float:
        n_t, n_s = self.counts
        return did_rate(n_t, self.h_t, n_s, self.h_s, self.sample.d)

    @property
    def n_tuning(self) -> float:
        return 0.5 * (self.counts[0] + self.counts[1])

    @property
    def floor_bandwidth(self) -> float:
        return math.sqrt(self.h_t * self.h_s)

    def estimate(self, weights=None) -> Estimate:
        strict = weights is None
        r = self.spec.poly_order
        qt = quantile_surface(self.sample, self.grid, self.h_t, r, self.spec.period_t,
                              self.kernel, self.mass_floor, weights, strict)
        qs = quantile_surface(self.sample, self.grid, self.h_s, r, self.spec.period_s,
                              self.kernel, self.mass_floor, weights, strict)
        usable = np.broadcast_to((qt.usable & qs.usable)[:, None], self.grid.shape).copy()
        v = -did_delta(qt.q_hat, qs.q_hat, self._median)
        v = np.where(usable, v, 0.0)
        diag = {
            "n_t": self.counts[0],
            "n_s": self.counts[1],
            "nonunique_fits": int(qt.nonunique.sum() + qs.nonunique.sum()),
        }
        return Estimate(v[None], None, usable, np.array([self.rate]), diag)

    def with_sample(self, sample: Sample) -> "DiDFieldBuilder":
        return replace(self, sample=sample)


def did_delta(q_t: np.ndarray, q_s: np.ndarray, median_col: int) -> np.ndarray:
    """Quantile difference between periods minus its value at the median."""
    diff = q_t - q_s
    out = diff - diff[:, median_col:median_col + 1]
    out[:, median_col] = 0.0
    return out


def build_did_fields(sample: Sample, spec: DiDSpec, grid: EvalGrid, h_t: float, h_s: float, **kw) -> FieldStack:
    return studentize(DiDFieldBuilder(two_period_sample(sample, spec), grid, spec, h_t, h_s, **kw).estimate())
