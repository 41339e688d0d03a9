import math

import numpy as np
import pytest

from funcineq.applications import (
    AuctionFieldBuilder,
    AuctionSpec,
    DiDFieldBuilder,
    DiDSpec,
    MeanInequalitySpec,
    auction_grid,
    build_auction_fields,
    build_did_fields,
    build_mean_fields,
    did_delta,
    did_grid,
    did_rate,
    median_index,
    normal_cdf_transform,
    prepare_auction_sample,
    two_period_sample,
)
from funcineq.engine import TestSpec, run_test
from funcineq.estimators import Sample, quantile_surface
from funcineq.montecarlo import sample_auction_dgp
from funcineq.numerics import EvalGrid, RandomSource

from oracles import naive_mean_point


# --------------------------------------------------------------------- mean


def test_mean_constant_outcome_at_theta():
    x = np.linspace(-1, 1, 40)
    g = EvalGrid.midpoint([(-0.8, 0.8)], 11)
    f = build_mean_fields(Sample(np.full(40, 0.3), x), MeanInequalitySpec(0.3), g, 0.5)
    assert f.J == 1
    assert np.all(f.u[:, f.usable] == 0)


def test_mean_shift_lowers_v(rng):
    x = rng.uniform(-1, 1, 60)
    y = rng.normal(size=60)
    g = EvalGrid.midpoint([(-0.8, 0.8)], 11)
    a = build_mean_fields(Sample(y, x), MeanInequalitySpec(0.0), g, 0.5)
    b = build_mean_fields(Sample(y, x), MeanInequalitySpec(0.2), g, 0.5)
    # same sign pattern can only move down
    assert np.all((b.u > 0) <= (a.u > 0))


def test_mean_two_point_hand_computation():
    y = np.array([1.5, -0.5])
    x = np.array([0.0, 0.2])
    g = EvalGrid((np.array([0.1]),), np.array([np.nan]), ((0.0, 0.2),))
    f = build_mean_fields(Sample(y, x), MeanInequalitySpec(0.25), g, 1.0, mass_floor=0)
    v, s2, _ = naive_mean_point(y - 0.25, x, [1, 1], 0.1, 1.0)
    assert f.u[0, 0, 0] == pytest.approx(math.sqrt(2) * v / math.sqrt(s2), rel=1e-12)


def test_mean_spec_grid():
    g = MeanInequalitySpec(0.0, (-1.8, 1.8)).grid(101)
    assert g.n_x == 101 and g.x_region == ((-1.8, 1.8),)
    with pytest.raises(ValueError):
        MeanInequalitySpec().grid()


# ------------------------------------------------------------------ auction


def auction_sample(seed=0, n=120):
    return sample_auction_dgp(n, np.random.default_rng(seed))


def test_auction_formulas_from_surfaces():
    s = auction_sample()
    spec = AuctionSpec(n_tau=4)
    g = auction_grid(s, spec, nx=5)
    h = 0.3
    f = build_auction_fields(s, spec, g, h)
    q2 = quantile_surface(s, g, h, 1, 2).q_hat
    q3 = quantile_surface(s, g, h, 1, 3).q_hat
    r = math.sqrt(s.n_units * h)
    b = s.y.min()
    ok = f.usable
    np.testing.assert_allclose(f.u[0][ok], (r * (q2 - q3))[ok], rtol=1e-14)
    np.testing.assert_allclose(f.u[1][ok], (r * (b - 2 * q2 + q3))[ok], rtol=1e-14)


def test_auction_point_example():
    q2, q3, b = 5.0, 7.0, 1.0
    assert (q2 - q3, b - 2 * q2 + q3) == (-2.0, -2.0)


def test_auction_sample_min_lower_bound():
    s = Sample([3.0, 1.0, 2.0, 5.0], [0.1, 0.1, 0.9, 0.9], group=[2, 2, 2, 2], cluster=[0, 0, 1, 1])
    s = Sample(np.r_[s.y, 4.0, 4.5, 6.0], np.r_[s.x[:, 0], 0.5, 0.5, 0.5], group=[2, 2, 2, 2, 3, 3, 3],
               cluster=[0, 0, 1, 1, 2, 2, 2])
    g = EvalGrid.midpoint([(0.2, 0.8)], 2, (0.2, 0.8), 2)
    b = AuctionFieldBuilder(s, g, 1.0, AuctionSpec(), mass_floor=0)
    assert b.b_lower() == 1.0
    sup = AuctionFieldBuilder(s, g, 1.0, AuctionSpec(b_lower_mode="supplied", b_lower=0.5), mass_floor=0)
    assert sup.b_lower() == 0.5


def test_auction_symmetric_groups_give_small_v1():
    rng = np.random.default_rng(3)
    n = 1000
    x = rng.uniform(0, 1, n)
    L = rng.choice([2, 3], n)
    rows = np.repeat(np.arange(n), L)
    bids = rng.uniform(0, 1, rows.size) * (1 + x[rows])  # same law for both counts
    s = Sample(bids, x[rows], group=L[rows], cluster=rows)
    spec = AuctionSpec(n_tau=5)
    g = auction_grid(s, spec, 7)
    f = build_auction_fields(s, spec, g, 0.3)
    h = 0.3
    v1 = f.u[0] / math.sqrt(n * h)
    # the equilibrium design has v1 = -tau (1 + x) / 6, about -0.13 on average
    assert np.abs(v1[f.usable]).max() < 0.2
    assert abs(v1[f.usable].mean()) < 0.03


def test_auction_group_swap():
    s = auction_sample(5, 150)
    spec = AuctionSpec(n_tau=4)
    g = auction_grid(s, spec, 5)
    a = build_auction_fields(s, spec, g, 0.35)
    b = build_auction_fields(s, AuctionSpec(bidder_counts=(3, 2), n_tau=4), g, 0.35)
    r = math.sqrt(s.n_units * 0.35)
    q2 = quantile_surface(s, g, 0.35, 1, 2).q_hat
    q3 = quantile_surface(s, g, 0.35, 1, 3).q_hat
    ok = a.usable
    np.testing.assert_array_equal(b.u[0][ok], -a.u[0][ok])
    np.testing.assert_allclose(b.u[1][ok], (r * (s.y.min() - 2 * q3 + q2))[ok], rtol=1e-14)


def test_auction_bid_shift_invariance():
    s = auction_sample(7, 150)
    spec = AuctionSpec(n_tau=4)
    g = auction_grid(s, spec, 5)
    a = build_auction_fields(s, spec, g, 0.35)
    shifted = Sample(s.y + 2.0, s.x, s.weight, s.group, s.cluster)
    b = build_auction_fields(shifted, spec, g, 0.35)
    np.testing.assert_allclose(b.u, a.u, atol=1e-9)


def test_auction_errors():
    s = Sample([1.0, 2.0], [0.0, 1.0], group=[2, 2])
    g = EvalGrid.midpoint([(0.2, 0.8)], 2, (0.2, 0.8), 2)
    with pytest.raises(ValueError, match="3 bidders"):
        AuctionFieldBuilder(s, g, 1.0)
    with pytest.raises(ValueError):
        AuctionSpec(tau_range=(0.0, 0.5))
    with pytest.raises(ValueError):
        AuctionSpec(b_lower_mode="supplied")


def test_auction_default_region_uses_covariate_deciles():
    s = auction_sample(1, 300)
    g = auction_grid(s, AuctionSpec(), 11)
    xa = s.x[np.unique(s.cluster, return_index=True)[1], 0]
    assert g.x_region[0] == pytest.approx((np.quantile(xa, 0.1), np.quantile(xa, 0.9)))
    assert g.n_tau == 20 and g.tau_region == (0.1, 0.9)


def test_covariate_normalisation():
    s = auction_sample(2, 100)
    t = prepare_auction_sample(s, AuctionSpec(normalize_covariate=True))
    assert np.all((t.x > 0) & (t.x < 1))
    assert np.array_equal(np.argsort(t.x[:, 0], kind="stable"), np.argsort(s.x[:, 0], kind="stable"))
    z = normal_cdf_transform(np.array([[-1.0], [0.0], [1.0]]))
    assert z[1, 0] == pytest.approx(0.5)


def test_auction_test_runs_and_resamples_whole_auctions():
    s = auction_sample(4, 100)
    spec = AuctionSpec(n_tau=4)
    g = auction_grid(s, spec, 5)
    b = AuctionFieldBuilder(s, g, 0.4, spec)
    res = run_test(b, TestSpec(n_boot=20), RandomSource(1))
    assert res.fields.J == 2
    assert len(res.contact.masks) == 3
    assert res.diagnostics["b_lower"] == s.y.min()


# ---------------------------------------------------------------------- DiD


def test_did_delta_example():
    qt = np.array([[1.0, 0.8]])
    qs = np.array([[0.5, 0.6]])
    d = did_delta(qt, qs, 1)
    assert d[0, 0] == pytest.approx(0.3)
    assert d[0, 1] == 0.0


def test_did_rate_example():
    assert did_rate(100, 1.0, 300, 1.0) == pytest.approx(math.sqrt(75))
    assert did_rate(200, 0.5, 600, 0.5) == pytest.approx(8.6603, abs=1e-4)


def did_sample(seed=0, n=200, shift=0.0):
    g = np.random.default_rng(seed)
    xs, ys, ps, ws = [], [], [], []
    for period, scale in (("1974", 1.0), ("1988", 1.0 + shift)):
        x = g.uniform(0, 1, n)
        xs.append(x)
        ys.append(x + scale * g.normal(size=n))
        ps.append(np.full(n, period))
        ws.append(g.uniform(0.5, 2.0, n))
    p = np.concatenate(ps)
    return Sample(np.concatenate(ys), np.concatenate(xs), np.concatenate(ws), group=p, stratum=p)


def test_did_median_row_zero():
    s = did_sample()
    spec = DiDSpec("1988", "1974")
    g = did_grid(s, spec, 7)
    f = build_did_fields(s, spec, g, 0.4, 0.4)
    med = median_index(g)
    assert np.all(f.u[0, :, med] == 0.0)
    assert g.tau_axis[med] == pytest.approx(0.5)


def test_did_matches_surfaces_and_rate():
    s = did_sample(1)
    spec = DiDSpec("1988", "1974", n_tau=5)
    g = did_grid(s, spec, 5)
    f = build_did_fields(s, spec, g, 0.3, 0.5)
    qt = quantile_surface(s, g, 0.3, 1, "1988").q_hat
    qs = quantile_surface(s, g, 0.5, 1, "1974").q_hat
    med = median_index(g)
    delta = (qt - qs) - (qt - qs)[:, [med]]
    r = did_rate(200, 0.3, 200, 0.5)
    ok = f.usable
    np.testing.assert_allclose(f.u[0][ok], (-r * delta)[ok], atol=1e-12)


def test_did_builder_tuning_quantities():
    s = two_period_sample(did_sample(2), DiDSpec("1988", "1974"))
    g = did_grid(s, DiDSpec("1988", "1974"), 5)
    b = DiDFieldBuilder(s, g, DiDSpec("1988", "1974"), 0.3, 0.48)
    assert b.n_tuning == 200
    assert b.floor_bandwidth == pytest.approx(math.sqrt(0.3 * 0.48))
    assert b.counts == (200, 200)


def test_did_weights_enter_the_fit():
    s = did_sample(3)
    spec = DiDSpec("1988", "1974", n_tau=5)
    g = did_grid(s, spec, 5)
    a = build_did_fields(s, spec, g, 0.4, 0.4)
    flat = Sample(s.y, s.x, None, s.group, None, s.stratum)
    b = build_did_fields(flat, spec, g, 0.4, 0.4)
    assert not np.allclose(a.u, b.u)


def test_did_errors():
    s = did_sample()
    with pytest.raises(ValueError, match="missing"):
        build_did_fields(s, DiDSpec("2000", "1974"), did_grid(s, DiDSpec("1988", "1974"), 5), 0.4, 0.4)
    with pytest.raises(ValueError):
        DiDSpec("a", "b", tau_range=(0.6, 0.9))
    g = EvalGrid.midpoint([(0.2, 0.8)], 3, (0.1, 0.9), 4)
    with pytest.raises(ValueError, match="0.5"):
        median_index(g)


def test_did_resampling_is_within_period():
    s = two_period_sample(did_sample(4, 60), DiDSpec("1988", "1974"))
    spec = DiDSpec("1988", "1974", n_tau=5)
    g = did_grid(s, spec, 5)
    res = run_test(DiDFieldBuilder(s, g, spec, 0.5, 0.5), TestSpec(n_boot=10), RandomSource(2))
    assert res.fields.J == 1
    assert res.diagnostics["n_t"] == 60 and res.diagnostics["n_s"] == 60
