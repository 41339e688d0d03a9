"""Simulation designs and the coverage experiment harness.

Replication ``r`` draws its data from ``RandomSource(master_seed, r).generator(0)``
and its bootstrap indices from ``.generator(1, 0)``, so reports do not depend
on how replications are scheduled.  Normal variates come from numpy's
``Generator.standard_normal`` (ziggurat).
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import ndtri
from scipy.stats import norm

from .applications import AuctionFieldBuilder, AuctionSpec, MeanFieldBuilder, auction_grid
from .engine import TestSpec, compute_theta_hat, decide, draw_bootstrap, resample_indices, studentize
from .estimators import Sample
from .numerics import EvalGrid, RandomSource, rule_of_thumb_bandwidth

SHAPES = ("as1", "as2", "constant")
TEST_REGION = (-1.8, 1.8)
X_SUPPORT = (-2.0, 2.0)
TRUNCATION = 3.0
FCP_OFFSET = 0.02

# dgp number -> (shape, L)
DGPS = {1: ("as1", 1.0), 2: ("as1", 5.0), 3: ("as2", 1.0), 4: ("as2", 5.0)}


def f_as(shape: str, L: float, x):
    """Plateau-shaped regression functions; ``constant`` is ``f = L``."""
    x = np.asarray(x, dtype=float)
    if shape == "as1":
        out = L * norm.pdf(x**10)
    elif shape == "as2":
        out = L * np.maximum(norm.pdf((x - 1.5) ** 10), norm.pdf((x + 1.5) ** 10))
    elif shape == "constant":
        out = np.full_like(x, float(L))
    else:
        raise ValueError(f"unknown shape {shape!r}")
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class DgpSpec:
    shape: str = "as1"
    L: float = 1.0
    sigma: float = 1.0
    n: int = 250

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"shape must be one of {SHAPES}")
        if self.n < 1:
            raise ValueError("n must be positive")
        if self.shape != "constant" and not self.L > 0:
            raise ValueError("L must be positive")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")

    @classmethod
    def numbered(cls, k: int, n: int, sigma: float = 1.0) -> "DgpSpec":
        if k not in DGPS:
            raise ValueError(f"dgp must be one of {sorted(DGPS)}")
        shape, L = DGPS[k]
        return cls(shape, L, sigma, n)


def truncated_noise(draws, sigma: float = 1.0):
    return np.clip(sigma * np.asarray(draws, dtype=float), -TRUNCATION, TRUNCATION)


def sample_dgp(spec: DgpSpec, rng) -> Sample:
    """``Y = f(X) + U``, ``X ~ U[-2, 2]``, U a truncated normal.

    Normals come from the inverse CDF of uniforms, so a seed pins the sample
    independently of numpy's own normal sampler.  A uniform of exactly 0
    maps to -inf and is truncated like any other tail draw.
    """
    gen = rng.generator() if isinstance(rng, RandomSource) else rng
    x = gen.uniform(*X_SUPPORT, size=spec.n)
    with np.errstate(divide="ignore"):
        z = ndtri(gen.random(spec.n))
    u = truncated_noise(z, spec.sigma)
    return Sample(f_as(spec.shape, spec.L, x) + u, x)


def null_theta(spec: DgpSpec, mode: str = "cp", region=TEST_REGION) -> float:
    """Largest value of f on the test region, less the offset for ``fcp``."""
    if mode not in ("cp", "fcp"):
        raise ValueError("mode must be 'cp' or 'fcp'")
    lo, hi = region
    candidates = np.concatenate([np.linspace(lo, hi, 20001), [c for c in (0.0, 1.5, -1.5) if lo <= c <= hi]])
    top = float(np.max(f_as(spec.shape, spec.L, candidates)))
    return top - FCP_OFFSET if mode == "fcp" else top


@dataclass(frozen=True)
class ExperimentConfig:
    dgp: DgpSpec = DgpSpec()
    n_mc: int = 500
    n_boot: int = 200
    c_cs: tuple = (0.4, 0.5, 0.6)
    alpha: float = 0.05
    theta_mode: str = "cp"
    master_seed: int = 20240101
    p: int = 1
    form: str = "sum"
    eta: float = 1e-3
    nx: int = 101
    theta: float | None = None

    def __post_init__(self):
        if self.n_mc < 1:
            raise ValueError("n_mc must be positive")
        if self.theta_mode not in ("cp", "fcp"):
            raise ValueError("theta_mode must be 'cp' or 'fcp'")
        if not self.c_cs:
            raise ValueError("need at least one c_cs value")
        object.__setattr__(self, "c_cs", tuple(float(c) for c in self.c_cs))
        for c in self.c_cs:
            self.test_spec(c)

    def test_spec(self, c_cs: float) -> TestSpec:
        return TestSpec(self.p, self.form, self.alpha, self.eta, c_cs, self.n_boot)

    def null_value(self) -> float:
        return self.theta if self.theta is not None else null_theta(self.dgp, self.theta_mode)


@dataclass
class ExperimentReport:
    config: ExperimentConfig
    theta: float
    coverage: dict
    mc_se: dict
    reject: np.ndarray
    reject_lfc: np.ndarray
    theta_hat: np.ndarray
    c_hat_n: np.ndarray
    wall_clock: float = 0.0
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "config": _config_dict(self.config),
            "theta": self.theta,
            "coverage": {str(k): v for k, v in self.coverage.items()},
            "mc_se": {str(k): v for k, v in self.mc_se.items()},
            "lfc_coverage": float(1.0 - self.reject_lfc.mean()),
            "replications": [
                {
                    "index": r,
                    "theta_hat": float(self.theta_hat[r]),
                    "reject": {str(c): bool(self.reject[r, k]) for k, c in enumerate(self.config.c_cs)},
                    "c_hat_n": {str(c): float(self.c_hat_n[r, k]) for k, c in enumerate(self.config.c_cs)},
                    "reject_lfc": bool(self.reject_lfc[r]),
                }
                for r in range(self.reject.shape[0])
            ],
            "wall_clock_seconds": self.wall_clock,
        }


def _config_dict(cfg: ExperimentConfig) -> dict:
    d = asdict(cfg)
    d["c_cs"] = list(cfg.c_cs)
    return d


class ReplicationError(RuntimeError):
    pass


def _replicate(cfg: ExperimentConfig, theta: float, r: int):
    src = RandomSource(cfg.master_seed, r)
    sample = sample_dgp(cfg.dgp, src.generator(0))
    h = rule_of_thumb_bandwidth(sample.x[:, 0])
    grid = EvalGrid.midpoint([TEST_REGION], cfg.nx)
    builder = MeanFieldBuilder(sample, grid, h, theta)
    base = builder.estimate()
    fields = studentize(base)
    spec0 = cfg.test_spec(cfg.c_cs[0])
    theta_hat = compute_theta_hat(fields, grid, spec0)
    idx = resample_indices(sample, src.generator(1, 0), cfg.n_boot)
    draws = draw_bootstrap(builder, base, idx)
    rej, chat = [], []
    lfc = None
    for c in cfg.c_cs:
        res = decide(theta_hat, fields, draws, grid, cfg.test_spec(c), builder.n_tuning, h, 1)
        rej.append(res.reject)
        chat.append(res.diagnostics["c_hat_n"])
        lfc = res.reject_lfc
    return theta_hat, rej, chat, lfc


def _run_chunk(cfg: ExperimentConfig, theta: float, reps):
    out = []
    for r in reps:
        try:
            out.append(_replicate(cfg, theta, r))
        except Exception as exc:  # identify the failing stream, keep the cause
            raise ReplicationError(
                f"replication {r} failed (master_seed={cfg.master_seed}, stream_id={r}): {exc}"
            ) from exc
    return out


def _map_replications(fn, args, n: int, workers: int):
    if workers <= 1 or n < 2:
        return fn(*args, range(n))
    chunks = [list(c) for c in np.array_split(np.arange(n), min(workers, n))]
    with ProcessPoolExecutor(workers) as pool:
        parts = pool.map(fn, *[[a] * len(chunks) for a in args], chunks)
        return [x for part in parts for x in part]


def run_experiment(config: ExperimentConfig, workers: int = 1) -> ExperimentReport:
    """Coverage (non-rejection frequency) of the mean test for each ``c_cs``.

    All ``c_cs`` values share each replication's data and resamples.
    """
    t0 = time.perf_counter()
    theta = config.null_value()
    rows = _map_replications(_run_chunk, (config, theta), config.n_mc, workers)
    theta_hat = np.array([row[0] for row in rows])
    reject = np.array([row[1] for row in rows], dtype=bool)
    c_hat = np.array([row[2] for row in rows])
    reject_lfc = np.array([row[3] for row in rows], dtype=bool)
    coverage, se = {}, {}
    for k, c in enumerate(config.c_cs):
        rate = float(1.0 - reject[:, k].mean())
        coverage[c] = rate
        se[c] = math.sqrt(rate * (1.0 - rate) / config.n_mc)
    return ExperimentReport(config, theta, coverage, se, reject, reject_lfc, theta_hat, c_hat,
                            time.perf_counter() - t0)


# ------------------------------------------------------------- auction design


def sample_auction_dgp(n_auctions: int, rng, bidder_counts=(2, 3)) -> Sample:
    """First-price auctions with independent private values ``V ~ U[0, 1 + X]``.

    ``X ~ U[0, 1]`` and the bidder count is uniform over ``bidder_counts``.
    Equilibrium bids are ``(L - 1) / L * V``, so the bid-quantile
    inequalities hold with strict slack for tau > 0.
    """
    gen = rng.generator() if isinstance(rng, RandomSource) else rng
    x = gen.uniform(0.0, 1.0, size=n_auctions)
    L = gen.choice(np.asarray(bidder_counts), size=n_auctions)
    rows = np.repeat(np.arange(n_auctions), L)
    values = gen.uniform(0.0, 1.0, size=rows.size) * (1.0 + x[rows])
    bids = (L[rows] - 1) / L[rows] * values
    return Sample(bids, x[rows], group=L[rows], cluster=rows)


@dataclass(frozen=True)
class AuctionExperimentConfig:
    n_auctions: int = 200
    n_mc: int = 100
    n_boot: int = 200
    c_cs: float = 0.5
    alpha: float = 0.05
    nx: int = 21
    master_seed: int = 7
    spec: AuctionSpec = AuctionSpec()


def _auction_chunk(cfg: AuctionExperimentConfig, reps):
    out = []
    for r in reps:
        src = RandomSource(cfg.master_seed, r)
        sample = sample_auction_dgp(cfg.n_auctions, src.generator(0), cfg.spec.bidder_counts)
        h = rule_of_thumb_bandwidth(sample.x[np.unique(sample.cluster, return_index=True)[1], 0])
        grid = auction_grid(sample, cfg.spec, cfg.nx)
        builder = AuctionFieldBuilder(sample, grid, h, cfg.spec)
        base = builder.estimate()
        fields = studentize(base)
        spec = TestSpec(alpha=cfg.alpha, c_cs=cfg.c_cs, n_boot=cfg.n_boot)
        theta_hat = compute_theta_hat(fields, grid, spec)
        draws = draw_bootstrap(builder, base, resample_indices(sample, src.generator(1, 0), cfg.n_boot))
        res = decide(theta_hat, fields, draws, grid, spec, builder.n_tuning, h, 1)
        out.append((res.reject, res.p_value, theta_hat))
    return out


def run_auction_experiment(cfg: AuctionExperimentConfig, workers: int = 1) -> dict:
    t0 = time.perf_counter()
    rows = _map_replications(_auction_chunk, (cfg,), cfg.n_mc, workers)
    reject = np.array([r[0] for r in rows], dtype=bool)
    return {
        "rejection_rate": float(reject.mean()),
        "reject": reject,
        "p_values": np.array([r[1] for r in rows]),
        "theta_hat": np.array([r[2] for r in rows]),
        "wall_clock": time.perf_counter() - t0,
    }
