"""One-sided L_p statistic, contact-set bootstrap and the test decision.

Index sets ``A`` are tuples of 0-based inequality indices.  Fields are
arrays shaped ``(J, n_x, n_tau)`` on an :class:`EvalGrid`.
"""

from __future__ import annotations

import itertools
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .estimators import Sample
from .numerics import EvalGrid, RandomSource, empirical_quantile, riemann_integrate, weighted_quantile

FORMS = ("max", "sum")


class EmptyRegionError(ValueError):
    """No usable evaluation point remains."""


@dataclass(frozen=True)
class TestSpec:
    """Tuning of the test.

    ``c_hat_pass`` is ``"same"`` (the resamples that give the critical value
    also give the contact-set threshold) or ``"separate"`` (an independent
    pass of ``n_boot`` resamples for the threshold).  ``c_hat_n`` fixes the
    threshold outright.
    """

    __test__ = False

    p: int = 1
    form: str = "sum"
    alpha: float = 0.05
    eta: float = 1e-3
    c_cs: float = 0.5
    n_boot: int = 200
    c_hat_pass: str = "same"
    c_hat_n: float | None = None

    def __post_init__(self):
        if not (isinstance(self.p, (int, np.integer)) and self.p >= 1):
            raise ValueError("p must be an integer >= 1")
        if self.form not in FORMS:
            raise ValueError(f"form must be one of {FORMS}")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if not self.eta >= 0:
            raise ValueError("eta must be nonnegative")
        if not self.c_cs >= 0:
            raise ValueError("c_cs must be nonnegative")
        if not (isinstance(self.n_boot, (int, np.integer)) and self.n_boot >= 1):
            raise ValueError("n_boot must be a positive integer")
        if self.c_hat_pass not in ("same", "separate"):
            raise ValueError("c_hat_pass must be 'same' or 'separate'")
        if self.c_hat_n is not None and not self.c_hat_n >= 0:
            raise ValueError("c_hat_n must be nonnegative")


@dataclass(frozen=True, eq=False)
class Estimate:
    """Raw estimator output: ``v`` and ``sigma`` (None means 1), rates per j."""

    v: np.ndarray
    sigma: np.ndarray | None
    usable: np.ndarray
    rate: np.ndarray
    diagnostics: dict = field(default_factory=dict)


@dataclass(frozen=True, eq=False)
class FieldStack:
    u: np.ndarray
    usable: np.ndarray

    @property
    def J(self) -> int:
        return self.u.shape[0]


@dataclass(frozen=True, eq=False)
class ContactSets:
    masks: dict
    c_hat_n: float

    def union(self) -> np.ndarray:
        return np.logical_or.reduce(list(self.masks.values()))


@dataclass(frozen=True, eq=False)
class BootstrapSummary:
    theta_star: np.ndarray
    theta_star_lfc: np.ndarray
    sup_stats: np.ndarray
    a_star: float
    c_alpha_star: float
    c_alpha_eta_star: float
    a_star_lfc: float
    c_alpha_lfc: float
    c_alpha_eta_lfc: float


@dataclass(frozen=True, eq=False)
class TestResult:
    __test__ = False

    theta_hat: float
    summary: BootstrapSummary
    contact: ContactSets
    reject: bool
    p_value: float
    reject_lfc: bool
    fields: FieldStack
    diagnostics: dict


class FieldBuilder:
    """Turns a sample (reweighted by resampling multiplicities) into fields.

    Subclasses set ``sample``, ``grid``, ``n_tuning`` (the sample size used by
    the threshold rule), ``floor_bandwidth`` and ``d`` (for the eta floor),
    and implement :meth:`estimate`.
    """

    sample: Sample
    grid: EvalGrid

    @property
    def n_tuning(self) -> float:
        return float(self.sample.n_units)

    @property
    def floor_bandwidth(self) -> float:
        return float(self.h)

    @property
    def d(self) -> int:
        return self.sample.d

    def estimate(self, weights=None) -> Estimate:
        raise NotImplementedError

    def estimate_batch(self, weights) -> list[Estimate]:
        return [self.estimate(w) for w in weights]

    def with_sample(self, sample: Sample) -> "FieldBuilder":
        raise NotImplementedError


# ---------------------------------------------------------------- functionals


def lambda_p(v, p: int, form: str):
    """``max_j [v_j]_+^p`` or ``sum_j [v_j]_+^p`` over the leading axis."""
    v = np.maximum(np.asarray(v, dtype=float), 0.0)
    if form == "max":
        out = np.max(v, axis=0) ** p
    elif form == "sum":
        out = np.sum(v**p, axis=0)
    else:
        raise ValueError(f"form must be one of {FORMS}")
    return float(out) if np.ndim(out) == 0 else out


def lambda_A_p(v, A, p: int, form: str):
    """``lambda_p`` with entries outside the index set ``A`` set to zero."""
    A = tuple(A)
    if not A:
        raise ValueError("index set must be nonempty")
    v = np.asarray(v, dtype=float)
    keep = np.zeros(v.shape[0], dtype=bool)
    keep[list(A)] = True
    censored = np.where(keep.reshape((-1,) + (1,) * (v.ndim - 1)), v, 0.0)
    return lambda_p(censored, p, form)


def studentize(est: Estimate) -> FieldStack:
    rate = est.rate.reshape(-1, 1, 1)
    if est.sigma is None:
        return FieldStack(rate * est.v, est.usable.copy())
    num = rate * est.v
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.where(est.sigma > 0, num / est.sigma, 0.0)
    return FieldStack(u, est.usable & np.all(np.isfinite(u), axis=0))


def compute_theta_hat(fields: FieldStack, grid: EvalGrid, spec: TestSpec) -> float:
    if not fields.usable.any():
        raise EmptyRegionError("no usable evaluation point")
    lam = lambda_p(np.where(fields.usable, fields.u, 0.0), spec.p, spec.form)
    return riemann_integrate(lam, grid, fields.usable)


# ------------------------------------------------------------------ resampling


def resample_indices(sample: Sample, gen: np.random.Generator, size: int) -> np.ndarray:
    """``size`` rows of unit indices drawn with replacement (within strata)."""
    n = sample.n_units
    if sample.stratum is None:
        return gen.integers(0, n, size=(size, n))
    unit_stratum = np.empty(n, dtype=sample.stratum.dtype)
    unit_stratum[sample.cluster] = sample.stratum
    out = np.empty((size, n), dtype=np.int64)
    pos = 0
    for s in np.unique(unit_stratum):
        units = np.flatnonzero(unit_stratum == s)
        out[:, pos:pos + units.size] = units[gen.integers(0, units.size, size=(size, units.size))]
        pos += units.size
    return out


def unit_counts(sample: Sample, indices: np.ndarray) -> np.ndarray:
    indices = np.atleast_2d(indices)
    return np.stack([np.bincount(row, minlength=sample.n_units) for row in indices])


def observation_weights(sample: Sample, indices: np.ndarray) -> np.ndarray:
    """Per-row multiplicities implied by resampled unit indices."""
    return unit_counts(sample, indices)[:, sample.cluster].astype(float)


def _as_generator(rng) -> np.random.Generator:
    if isinstance(rng, RandomSource):
        return rng.generator()
    return rng


def bootstrap_resample(sample: Sample, rng) -> Sample:
    """One nonparametric bootstrap sample (whole clusters, within strata)."""
    idx = resample_indices(sample, _as_generator(rng), 1)[0]
    return materialize(sample, idx)


def materialize(sample: Sample, unit_idx) -> Sample:
    rows_of = [np.flatnonzero(sample.cluster == u) for u in range(sample.n_units)]
    rows = np.concatenate([rows_of[u] for u in unit_idx])
    new_cluster = np.concatenate([np.full(rows_of[u].size, k) for k, u in enumerate(unit_idx)])
    pick = lambda v: None if v is None else v[rows]
    return Sample(sample.y[rows], sample.x[rows], sample.weight[rows], pick(sample.group),
                  new_cluster, pick(sample.stratum))


def bootstrap_field_stack(builder: FieldBuilder, base: Estimate, resample) -> FieldStack:
    """Centred, rescaled bootstrap fields ``r (v* - v) / sigma*``.

    ``resample`` is a resampled :class:`Sample` or a vector of per-row
    multiplicities for ``builder.sample``.
    """
    if isinstance(resample, Sample):
        star = builder.with_sample(resample).estimate()
    else:
        star = builder.estimate(resample)
    return _centre(base, star)


def _centre(base: Estimate, star: Estimate) -> FieldStack:
    rate = base.rate.reshape(-1, 1, 1)
    num = rate * (star.v - base.v)
    usable = base.usable & star.usable
    if star.sigma is None:
        s = num
    else:
        with np.errstate(divide="ignore", invalid="ignore"):
            s = np.where(star.sigma > 0, num / star.sigma, np.where(num == 0, 0.0, np.nan))
    usable = usable & np.all(np.isfinite(s), axis=0)
    return FieldStack(np.where(usable, s, 0.0), usable)


def sup_stat(s_star: FieldStack, n: float) -> float:
    floor = math.sqrt(math.log(n))
    if not s_star.usable.any():
        return floor
    return max(float(np.max(s_star.u[:, s_star.usable])), floor)


def compute_c_hat_n(sup_stats, n: float, c_cs: float) -> float:
    """``c_cs * log(log n) * q_{1 - 0.1/log n}(S*)``."""
    if not n > math.e:
        raise ValueError("threshold rule needs n > e")
    level = 1.0 - 0.1 / math.log(n)
    return c_cs * math.log(math.log(n)) * empirical_quantile(sup_stats, level)


def index_sets(J: int) -> list[tuple[int, ...]]:
    return [A for k in range(1, J + 1) for A in itertools.combinations(range(J), k)]


def estimate_contact_sets(fields: FieldStack, c_hat_n: float) -> ContactSets:
    """Masks where the inequalities in A are near binding and the rest slack."""
    if not c_hat_n >= 0:
        raise ValueError("contact-set threshold must be nonnegative")
    u = np.where(fields.usable, fields.u, np.nan)
    near = np.abs(u) <= c_hat_n
    slack = u < -c_hat_n
    masks = {}
    for A in index_sets(fields.J):
        inside = np.zeros(fields.J, dtype=bool)
        inside[list(A)] = True
        m = fields.usable.copy()
        for j in range(fields.J):
            m &= near[j] if inside[j] else slack[j]
        masks[A] = m
    return ContactSets(masks, float(c_hat_n))


def theta_star_contact(s_star: FieldStack, contact: ContactSets, grid: EvalGrid, spec: TestSpec) -> float:
    total = 0.0
    for A, mask in contact.masks.items():
        m = mask & s_star.usable
        if m.any():
            total += riemann_integrate(lambda_A_p(s_star.u, A, spec.p, spec.form), grid, m)
    return total


def theta_star_lfc(s_star: FieldStack, grid: EvalGrid, spec: TestSpec) -> float:
    return riemann_integrate(lambda_p(s_star.u, spec.p, spec.form), grid, s_star.usable)


def eta_floor(spec: TestSpec, h: float, d: int) -> float:
    return h ** (d / 2) * spec.eta


def critical_value(draws, spec: TestSpec, h: float, d: int) -> tuple[float, float, float]:
    """Returns ``(c_alpha, c_alpha_eta, a_star)`` from bootstrap draws."""
    draws = np.asarray(draws, dtype=float)
    a_star = float(draws.mean())
    c_alpha = empirical_quantile(draws, 1.0 - spec.alpha)
    return c_alpha, max(c_alpha, eta_floor(spec, h, d) + a_star), a_star


def p_value(theta_hat: float, draws, floor: float) -> float:
    draws = np.asarray(draws, dtype=float)
    if theta_hat <= floor:
        return 1.0
    return float(np.mean(draws >= theta_hat))


# --------------------------------------------------------------- orchestration


@dataclass(frozen=True, eq=False)
class BootstrapDraws:
    s_star: np.ndarray
    usable: np.ndarray
    sup_stats: np.ndarray

    def stack(self, b: int) -> FieldStack:
        return FieldStack(self.s_star[b], self.usable[b])


# Draws are always evaluated in these index-aligned blocks, so batched
# linear algebra sees the same shapes whatever the worker count.
BLOCK = 32


def _estimate_blocks(builder, blocks):
    return [builder.estimate_batch(b) for b in blocks]


def _estimate_all(builder: FieldBuilder, weights: np.ndarray, workers: int) -> list[Estimate]:
    blocks = [weights[i:i + BLOCK] for i in range(0, len(weights), BLOCK)]
    if workers <= 1 or len(blocks) < 2:
        parts = _estimate_blocks(builder, blocks)
    else:
        per = [blocks[k::workers] for k in range(min(workers, len(blocks)))]
        with ProcessPoolExecutor(len(per)) as pool:
            done = list(pool.map(_estimate_blocks, [builder] * len(per), per))
        parts = [None] * len(blocks)
        for k, chunk in enumerate(done):
            parts[k::len(per)] = chunk
    return [e for part in parts for e in part]


def draw_bootstrap(builder: FieldBuilder, base: Estimate, indices: np.ndarray, workers: int = 1) -> BootstrapDraws:
    weights = observation_weights(builder.sample, indices)
    stars = _estimate_all(builder, weights, workers)
    stacks = [_centre(base, st) for st in stars]
    s = np.stack([st.u for st in stacks])
    usable = np.stack([st.usable for st in stacks])
    sups = np.array([sup_stat(st, builder.n_tuning) for st in stacks])
    return BootstrapDraws(s, usable, sups)


def decide(
    theta_hat: float,
    fields: FieldStack,
    draws: BootstrapDraws,
    grid: EvalGrid,
    spec: TestSpec,
    n: float,
    h: float,
    d: int,
    threshold_sups=None,
) -> TestResult:
    """Contact sets, bootstrap statistics, critical values and the decision."""
    sups = draws.sup_stats if threshold_sups is None else threshold_sups
    c_hat = spec.c_hat_n if spec.c_hat_n is not None else compute_c_hat_n(sups, n, spec.c_cs)
    contact = estimate_contact_sets(fields, c_hat)
    B = draws.s_star.shape[0]
    th = np.empty(B)
    th_lfc = np.empty(B)
    for b in range(B):
        st = draws.stack(b)
        th[b] = theta_star_contact(st, contact, grid, spec)
        th_lfc[b] = theta_star_lfc(st, grid, spec)
    c_a, c_ae, a_star = critical_value(th, spec, h, d)
    c_l, c_le, a_l = critical_value(th_lfc, spec, h, d)
    floor = eta_floor(spec, h, d)
    summary = BootstrapSummary(th, th_lfc, np.asarray(sups), a_star, c_a, c_ae, a_l, c_l, c_le)
    diag = {
        "c_hat_n": c_hat,
        "n_tuning": n,
        "floor_bandwidth": h,
        "eta_floor": floor,
        "usable_points": int(fields.usable.sum()),
        "unusable_points": int((~fields.usable).sum()),
        "contact_points": {",".join(str(j + 1) for j in A): int(m.sum()) for A, m in contact.masks.items()},
        "p_value_lfc": p_value(theta_hat, th_lfc, floor + a_l),
    }
    return TestResult(
        theta_hat=theta_hat,
        summary=summary,
        contact=contact,
        reject=bool(theta_hat > c_ae),
        p_value=p_value(theta_hat, th, floor + a_star),
        reject_lfc=bool(theta_hat > c_le),
        fields=fields,
        diagnostics=diag,
    )


def run_test(builder: FieldBuilder, spec: TestSpec, rng: RandomSource, workers: int = 1) -> TestResult:
    """Full test: statistic, one bootstrap pass, threshold, decision.

    Resample ``b`` is row ``b`` of an index matrix drawn from ``rng``'s
    sub-stream 0, so results do not depend on ``workers``.
    """
    base = builder.estimate()
    fields = studentize(base)
    theta_hat = compute_theta_hat(fields, builder.grid, spec)
    idx = resample_indices(builder.sample, rng.generator(0), spec.n_boot)
    draws = draw_bootstrap(builder, base, idx, workers)
    threshold_sups = None
    if spec.c_hat_pass == "separate" and spec.c_hat_n is None:
        idx2 = resample_indices(builder.sample, rng.generator(1), spec.n_boot)
        threshold_sups = draw_bootstrap(builder, base, idx2, workers).sup_stats
    result = decide(theta_hat, fields, draws, builder.grid, spec, builder.n_tuning,
                    builder.floor_bandwidth, builder.d, threshold_sups)
    result.diagnostics.update(base.diagnostics)
    result.diagnostics["c_hat_pass"] = spec.c_hat_pass
    return result


@dataclass(frozen=True, eq=False)
class ExactBootstrap:
    a_star: float
    c_alpha: float
    c_hat_n: float
    theta_star: np.ndarray
    probs: np.ndarray

    @property
    def sd(self) -> float:
        return float(np.sqrt(np.sum(self.probs * (self.theta_star - self.a_star) ** 2)))

    @property
    def atoms(self) -> np.ndarray:
        return np.unique(self.theta_star)


def enumerate_bootstrap_exact(builder: FieldBuilder, spec: TestSpec) -> ExactBootstrap:
    """Exact bootstrap law by enumerating all n^n equiprobable resamples.

    The threshold is ``spec.c_hat_n`` when given, otherwise the rule applied
    to the exact law of S*.  ``c_hat_n`` is NaN when the rule is undefined
    (n <= e) and no threshold is supplied.
    """
    sample = builder.sample
    n = sample.n_units
    if n > 4:
        raise ValueError("exact enumeration is limited to n <= 4")
    if sample.stratum is not None and np.unique(sample.stratum).size > 1:
        raise ValueError("exact enumeration does not support strata")
    idx = np.array(list(itertools.product(range(n), repeat=n)), dtype=np.int64)
    probs = np.full(len(idx), float(n) ** (-n))
    base = builder.estimate()
    fields = studentize(base)
    draws = draw_bootstrap(builder, base, idx)
    if spec.c_hat_n is not None:
        c_hat = float(spec.c_hat_n)
    elif builder.n_tuning > math.e:
        level = 1.0 - 0.1 / math.log(builder.n_tuning)
        c_hat = spec.c_cs * math.log(math.log(builder.n_tuning)) * weighted_quantile(draws.sup_stats, probs, level)
    else:
        c_hat = float("nan")
    if math.isnan(c_hat):
        th = np.full(len(idx), np.nan)
        return ExactBootstrap(float("nan"), float("nan"), c_hat, th, probs)
    contact = estimate_contact_sets(fields, c_hat)
    th = np.array([theta_star_contact(draws.stack(b), contact, builder.grid, spec) for b in range(len(idx))])
    a_star = float(np.sum(probs * th))
    c_alpha = weighted_quantile(th, probs, 1.0 - spec.alpha)
    return ExactBootstrap(a_star, c_alpha, c_hat, th, probs)
