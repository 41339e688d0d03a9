import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from funcineq.applications import MeanFieldBuilder, MeanInequalitySpec, build_mean_fields
from funcineq.engine import (
    ContactSets,
    EmptyRegionError,
    FieldStack,
    TestSpec,
    bootstrap_field_stack,
    bootstrap_resample,
    compute_c_hat_n,
    compute_theta_hat,
    critical_value,
    decide,
    draw_bootstrap,
    enumerate_bootstrap_exact,
    estimate_contact_sets,
    index_sets,
    lambda_A_p,
    lambda_p,
    materialize,
    observation_weights,
    resample_indices,
    run_test,
    studentize,
    sup_stat,
    theta_star_contact,
    theta_star_lfc,
)
from funcineq.estimators import Sample
from funcineq.numerics import EvalGrid, RandomSource

from oracles import naive_integral, naive_lambda, naive_mean_point

# entries near zero would underflow when raised to p
entries = st.one_of(st.just(0.0), st.floats(-10, 10).filter(lambda t: abs(t) > 1e-6))
vectors = st.lists(entries, min_size=1, max_size=5)


def stack(u, usable=None):
    u = np.asarray(u, dtype=float)
    return FieldStack(u, np.ones(u.shape[1:], bool) if usable is None else usable)


def mean_builder(y, x, theta=0.0, nx=21, h=None, mass_floor=5.0):
    s = Sample(y, x)
    g = EvalGrid.midpoint([(-0.8, 0.8)], nx)
    return MeanFieldBuilder(s, g, 0.8 if h is None else h, theta, mass_floor=mass_floor)


# ------------------------------------------------------------- functionals


@pytest.mark.parametrize("v, p, form, expected", [((2, -1), 1, "max", 2), ((1, 2), 2, "sum", 5),
                                                  ((0, 0), 1, "max", 0), ((0, 0), 3, "sum", 0)])
def test_lambda_examples(v, p, form, expected):
    assert lambda_p(np.array(v, float), p, form) == expected


@given(vectors, st.integers(1, 4), st.sampled_from(["max", "sum"]))
def test_lambda_properties(v, p, form):
    v = np.array(v)
    val = lambda_p(v, p, form)
    assert val == pytest.approx(naive_lambda(v, p, form))
    assert val >= 0
    assert (val == 0) == bool(np.all(v <= 0))
    bumped = v.copy()
    bumped[0] += 1.0
    assert lambda_p(bumped, p, form) >= val
    assert lambda_p(v, p, "max") <= lambda_p(v, p, "sum") + 1e-12


def test_lambda_A_examples():
    v = np.array([3.0, -4.0])
    assert lambda_A_p(v, (1,), 1, "sum") == 0
    assert lambda_A_p(v, (0,), 1, "max") == 3
    assert lambda_A_p(v, (0, 1), 2, "sum") == lambda_p(v, 2, "sum")
    with pytest.raises(ValueError):
        lambda_A_p(v, (), 1, "sum")


@given(vectors, st.integers(1, 3), st.sampled_from(["max", "sum"]), st.data())
def test_lambda_A_bounded_by_lambda(v, p, form, data):
    v = np.array(v)
    A = data.draw(st.sampled_from(index_sets(v.size)))
    assert lambda_A_p(v, A, p, form) <= lambda_p(v, p, form) + 1e-12


def test_lambda_rejects_bad_form():
    with pytest.raises(ValueError):
        lambda_p(np.ones(2), 1, "mean")


# --------------------------------------------------------------- statistic


def test_theta_hat_single_cell():
    g = EvalGrid.midpoint([(0.0, 1.0)], 2)
    assert g.cell_measure == 0.5
    f = FieldStack(np.array([[[2.0], [5.0]]]), np.array([[True], [False]]))
    assert compute_theta_hat(f, g, TestSpec(p=1)) == pytest.approx(1.0)


def test_theta_hat_nonpositive_field():
    g = EvalGrid.midpoint([(0.0, 1.0)], 5)
    assert compute_theta_hat(stack(-np.ones((1, 5, 1))), g, TestSpec()) == 0


def test_theta_hat_matches_double_loop(rng):
    g = EvalGrid.midpoint([(0.0, 1.0)], 9, (0.2, 0.8), 4)
    u = rng.normal(size=(2, 9, 4))
    usable = rng.uniform(size=(9, 4)) < 0.8
    for p in (1, 2):
        for form in ("max", "sum"):
            lam = np.zeros((9, 4))
            for i in range(9):
                for j in range(4):
                    lam[i, j] = naive_lambda(u[:, i, j], p, form)
            want = naive_integral(lam, g.cell_measure, usable)
            got = compute_theta_hat(FieldStack(u, usable), g, TestSpec(p=p, form=form))
            assert abs(got - want) < 1e-12


def test_theta_hat_empty_region():
    g = EvalGrid.midpoint([(0.0, 1.0)], 3)
    with pytest.raises(EmptyRegionError):
        compute_theta_hat(FieldStack(np.ones((1, 3, 1)), np.zeros((3, 1), bool)), g, TestSpec())


@given(st.integers(0, 2**32 - 1))
def test_theta_max_below_sum(seed):
    r = np.random.default_rng(seed)
    g = EvalGrid.midpoint([(0.0, 1.0)], 6)
    f = stack(r.normal(size=(3, 6, 1)))
    a = compute_theta_hat(f, g, TestSpec(form="max", p=2))
    b = compute_theta_hat(f, g, TestSpec(form="sum", p=2))
    assert 0 <= a <= b + 1e-12


def test_spec_validation():
    for bad in (dict(p=0), dict(alpha=1.5), dict(form="mean"), dict(eta=-1.0), dict(n_boot=0),
                dict(c_cs=-0.1), dict(c_hat_pass="both")):
        with pytest.raises(ValueError):
            TestSpec(**bad)


# -------------------------------------------------------------- resampling


def test_resample_single_row():
    s = Sample([4.0], [1.0])
    b = bootstrap_resample(s, RandomSource(1))
    assert b.y.tolist() == [4.0] and b.x.tolist() == [[1.0]]


def test_resample_identical_rows():
    s = Sample(np.full(5, 2.0), np.full(5, 0.5))
    b = bootstrap_resample(s, RandomSource(8))
    np.testing.assert_array_equal(b.y, s.y)
    np.testing.assert_array_equal(b.x, s.x)


def test_resample_reproducible(rng):
    s = Sample(rng.normal(size=30), rng.uniform(size=30))
    a = bootstrap_resample(s, RandomSource(5, 2))
    b = bootstrap_resample(s, RandomSource(5, 2))
    assert a.y.tobytes() == b.y.tobytes()
    assert a.n_obs == s.n_obs


def test_resample_keeps_clusters_and_strata(rng):
    cluster = np.repeat(np.arange(10), 3)
    stratum = np.repeat([0, 1], 15)
    s = Sample(np.arange(30.0), np.zeros(30), cluster=cluster, stratum=stratum)
    idx = resample_indices(s, rng, 50)
    unit_stratum = stratum[::3]
    for row in idx:
        assert np.sum(unit_stratum[row] == 0) == 5
    b = materialize(s, idx[0])
    for c in range(b.n_units):
        ys = b.y[b.cluster == c]
        assert ys.size == 3 and np.all(np.diff(ys) == 1) and ys[0] % 3 == 0


def test_multiplicity_weights_match_materialized(rng):
    y = rng.normal(size=25)
    x = rng.uniform(-1, 1, 25)
    b = mean_builder(y, x)
    base = b.estimate()
    idx = resample_indices(b.sample, rng, 3)
    w = observation_weights(b.sample, idx)
    for k in range(3):
        via_w = bootstrap_field_stack(b, base, w[k])
        via_s = bootstrap_field_stack(b, base, materialize(b.sample, idx[k]))
        np.testing.assert_allclose(via_w.u, via_s.u, atol=1e-12)
        np.testing.assert_array_equal(via_w.usable, via_s.usable)


def test_bootstrap_field_identity_resample(rng):
    b = mean_builder(rng.normal(size=40), rng.uniform(-1, 1, 40))
    s_star = bootstrap_field_stack(b, b.estimate(), b.sample)
    assert np.all(s_star.u == 0)


def test_bootstrap_field_hand_computed():
    y = np.array([1.0, -2.0, 0.5])
    x = np.array([0.0, 0.1, -0.2])
    b = mean_builder(y, x, nx=1, h=1.0, mass_floor=0)
    x0 = b.grid.x_points[0, 0]
    base = b.estimate()
    idx = np.array([0, 0, 2])
    s_star = bootstrap_field_stack(b, base, materialize(b.sample, idx))
    v, _, _ = naive_mean_point(y, x, np.ones(3), x0, 1.0)
    v_s, s2_s, _ = naive_mean_point(y[idx], x[idx], np.ones(3), x0, 1.0)
    assert s_star.u[0, 0, 0] == pytest.approx(math.sqrt(3) * (v_s - v) / math.sqrt(s2_s), rel=1e-12)


def test_bootstrap_field_scale_invariant(rng):
    y = rng.normal(size=50) + 0.3
    x = rng.uniform(-1, 1, 50)
    idx = resample_indices(Sample(y, x), rng, 1)[0]
    out = []
    for c in (1.0, 7.0):
        b = mean_builder(c * y, x)
        out.append(bootstrap_field_stack(b, b.estimate(), materialize(b.sample, idx)))
    np.testing.assert_allclose(out[0].u, out[1].u, atol=1e-12)


# ------------------------------------------------------- tuning and contact


def test_sup_stat_examples():
    assert sup_stat(stack(np.zeros((1, 4, 1))), 100) == pytest.approx(2.14597, abs=1e-5)
    u = np.zeros((2, 4, 1))
    u[1, 2, 0] = 5.0
    assert sup_stat(stack(u), 100) == 5.0
    masked = FieldStack(u, np.array([[True], [True], [False], [True]]))
    assert sup_stat(masked, 100) == pytest.approx(math.sqrt(math.log(100)))


def test_c_hat_examples():
    sups = np.full(10, 2.0)
    assert compute_c_hat_n(sups, 100, 0.5) == pytest.approx(0.5 * 1.527180 * 2.0, abs=1e-6)
    assert compute_c_hat_n(sups, 100, 0.0) == 0.0
    assert 1 - 0.1 / math.log(100) == pytest.approx(0.978284, abs=2e-6)
    with pytest.raises(ValueError):
        compute_c_hat_n(sups, 2, 0.5)


@given(st.lists(st.floats(-5, 50), min_size=1, max_size=30), st.integers(3, 10**6), st.floats(0, 2))
def test_c_hat_floor(raw, n, c_cs):
    floor = math.sqrt(math.log(n))
    sups = np.maximum(np.array(raw), floor)  # S* values are floored by construction
    assert compute_c_hat_n(sups, n, c_cs) >= c_cs * math.log(math.log(n)) * floor - 1e-12


@pytest.mark.parametrize("u, member", [((0.5, -2.0), (0,)), ((0.5, 0.5), (0, 1)), ((2.0, 0.5), None)])
def test_contact_examples(u, member):
    cs = estimate_contact_sets(stack(np.array(u).reshape(2, 1, 1)), 1.0)
    for A, m in cs.masks.items():
        assert bool(m[0, 0]) == (A == member)


@given(st.integers(0, 2**32 - 1), st.integers(1, 3), st.floats(0, 3))
def test_contact_disjoint_and_usable(seed, J, c):
    r = np.random.default_rng(seed)
    f = FieldStack(r.normal(scale=2, size=(J, 12, 3)), r.uniform(size=(12, 3)) < 0.7)
    cs = estimate_contact_sets(f, c)
    total = np.zeros((12, 3), int)
    for A, m in cs.masks.items():
        assert not np.any(m & ~f.usable)
        total += m
        for j in range(J):
            uj = f.u[j][m]
            assert np.all(np.abs(uj) <= c) if j in A else np.all(uj < -c)
    assert total.max() <= 1


def test_contact_rejects_negative():
    with pytest.raises(ValueError):
        estimate_contact_sets(stack(np.zeros((1, 2, 1))), -1.0)


def test_theta_star_contact_trivial_cases(rng):
    g = EvalGrid.midpoint([(0.0, 1.0)], 5)
    s = stack(rng.normal(size=(2, 5, 1)))
    empty = ContactSets({A: np.zeros((5, 1), bool) for A in index_sets(2)}, 1.0)
    assert theta_star_contact(s, empty, g, TestSpec()) == 0
    neg = stack(-np.abs(rng.normal(size=(2, 5, 1))))
    cs = estimate_contact_sets(stack(np.zeros((2, 5, 1))), 1.0)
    assert theta_star_contact(neg, cs, g, TestSpec()) == 0
    assert theta_star_lfc(neg, g, TestSpec()) == 0


def test_theta_star_contact_single_inequality(rng):
    g = EvalGrid.midpoint([(0.0, 1.0)], 11, (0.1, 0.9), 3)
    u = rng.normal(size=(1, 11, 3))
    s = rng.normal(size=(1, 11, 3))
    cs = estimate_contact_sets(stack(u), 0.8)
    want = naive_integral(np.maximum(s[0], 0) ** 2, g.cell_measure, np.abs(u[0]) <= 0.8)
    assert theta_star_contact(stack(s), cs, g, TestSpec(p=2)) == pytest.approx(want, abs=1e-12)
    full = estimate_contact_sets(stack(u), math.inf)
    assert theta_star_contact(stack(s), full, g, TestSpec(p=2)) == theta_star_lfc(stack(s), g, TestSpec(p=2))


@given(st.integers(0, 2**32 - 1), st.integers(1, 3), st.sampled_from(["max", "sum"]), st.integers(1, 2))
def test_lfc_dominates_contact_per_draw(seed, J, form, p):
    r = np.random.default_rng(seed)
    g = EvalGrid.midpoint([(0.0, 1.0)], 8, (0.2, 0.8), 2)
    usable = r.uniform(size=(8, 2)) < 0.9
    cs = estimate_contact_sets(FieldStack(r.normal(size=(J, 8, 2)), usable), r.uniform(0, 2))
    s = FieldStack(r.normal(size=(J, 8, 2)), usable & (r.uniform(size=(8, 2)) < 0.9))
    spec = TestSpec(p=p, form=form)
    assert theta_star_lfc(s, g, spec) >= theta_star_contact(s, cs, g, spec) - 1e-12


@pytest.mark.parametrize("draws, h, eta, want", [
    (None, 0.25, 1e-3, 0.8),
    (np.zeros(50), 0.25, 1e-3, 0.5e-3),
])
def test_critical_value_examples(draws, h, eta, want):
    if draws is None:
        # 0.95-quantile 0.8 with mean 0.3
        draws = np.concatenate([np.full(95, 0.3 - 0.5 * 5 / 95), np.full(5, 0.8)])
        draws[94] = 0.8
        draws[:94] = (0.3 * 100 - 6 * 0.8) / 94
    c_a, c_ae, a = critical_value(draws, TestSpec(eta=eta), h, 1)
    assert c_ae == pytest.approx(want)
    assert c_ae == max(c_a, h**0.5 * eta + a)


def test_critical_value_no_eta(rng):
    draws = rng.exponential(size=100)
    c_a, c_ae, a = critical_value(draws, TestSpec(eta=0.0), 0.3, 1)
    assert a <= c_a and c_ae == c_a


# ------------------------------------------------------------------ run_test


def test_deep_slack_never_rejects(rng):
    b = mean_builder(np.full(60, -10.0) + 0 * rng.normal(size=60), rng.uniform(-1, 1, 60))
    res = run_test(b, TestSpec(n_boot=50), RandomSource(3))
    assert res.theta_hat == 0 and not res.reject and res.p_value == 1.0


def test_clear_violation_rejects(rng):
    b = mean_builder(5 + rng.normal(size=200), rng.uniform(-1, 1, 200))
    res = run_test(b, TestSpec(n_boot=100), RandomSource(3))
    assert res.theta_hat > res.summary.theta_star.max()
    assert res.reject and res.p_value == 0.0


def test_summary_invariants(rng):
    b = mean_builder(rng.normal(size=120) - 0.1, rng.uniform(-1, 1, 120))
    res = run_test(b, TestSpec(n_boot=80), RandomSource(11))
    s = res.summary
    assert s.a_star == pytest.approx(s.theta_star.mean())
    assert s.c_alpha_eta_star == max(s.c_alpha_star, b.h**0.5 * 1e-3 + s.a_star)
    assert np.all(s.theta_star <= s.theta_star_lfc + 1e-12)
    assert res.reject == (res.theta_hat > s.c_alpha_eta_star)
    assert 0 <= res.p_value <= 1
    assert np.all(s.sup_stats >= math.sqrt(math.log(120)))


def test_run_test_reproducible_across_workers(rng):
    b = mean_builder(rng.normal(size=80), rng.uniform(-1, 1, 80))
    r1 = run_test(b, TestSpec(n_boot=40), RandomSource(4))
    r2 = run_test(b, TestSpec(n_boot=40), RandomSource(4))
    r3 = run_test(b, TestSpec(n_boot=40), RandomSource(4), workers=2)
    for r in (r2, r3):
        assert r.theta_hat == r1.theta_hat
        assert r.summary.theta_star.tobytes() == r1.summary.theta_star.tobytes()
        assert r.summary.sup_stats.tobytes() == r1.summary.sup_stats.tobytes()
        assert r.p_value == r1.p_value and r.reject == r1.reject


def test_separate_threshold_pass(rng):
    b = mean_builder(rng.normal(size=80), rng.uniform(-1, 1, 80))
    one = run_test(b, TestSpec(n_boot=40), RandomSource(4))
    two = run_test(b, TestSpec(n_boot=40, c_hat_pass="separate"), RandomSource(4))
    assert two.summary.theta_star_lfc.tobytes() == one.summary.theta_star_lfc.tobytes()
    assert two.diagnostics["c_hat_n"] != one.diagnostics["c_hat_n"]
    assert two.diagnostics["c_hat_pass"] == "separate"


def test_fixed_threshold_override(rng):
    b = mean_builder(rng.normal(size=80), rng.uniform(-1, 1, 80))
    res = run_test(b, TestSpec(n_boot=20, c_hat_n=1.25), RandomSource(4))
    assert res.contact.c_hat_n == 1.25


@pytest.mark.parametrize("c", [0.1, 7.0])
def test_pipeline_scale_invariance(rng, c):
    y = rng.normal(size=100) - 0.05
    x = rng.uniform(-1, 1, 100)
    spec = TestSpec(n_boot=60)
    ref = run_test(mean_builder(y, x), spec, RandomSource(9))
    out = run_test(mean_builder(c * y, x), spec, RandomSource(9))
    assert out.theta_hat == pytest.approx(ref.theta_hat, abs=1e-10)
    np.testing.assert_allclose(out.summary.theta_star, ref.summary.theta_star, atol=1e-10)
    assert out.contact.c_hat_n == pytest.approx(ref.contact.c_hat_n, abs=1e-10)
    assert out.reject == ref.reject


# --------------------------------------------------------- null-shift behaviour


def test_mean_estimate_decreasing_in_theta(rng):
    y = rng.normal(size=50)
    x = rng.uniform(-1, 1, 50)
    thetas = np.linspace(-1, 1, 9)
    v = np.array([mean_builder(y, x, t).estimate().v[0, :, 0] for t in thetas])
    assert np.all(np.diff(v, axis=0) <= 1e-15)


def test_zero_statistic_stays_zero_as_theta_grows(rng):
    y = rng.normal(size=50)
    x = rng.uniform(-1, 1, 50)
    g = EvalGrid.midpoint([(-0.8, 0.8)], 21)
    theta_hat = [compute_theta_hat(build_mean_fields(Sample(y, x), MeanInequalitySpec(t), g, 0.8), g, TestSpec())
                 for t in np.linspace(-2, 2, 41)]
    first_zero = next(k for k, v in enumerate(theta_hat) if v == 0)
    assert all(v == 0 for v in theta_hat[first_zero:])


def test_studentized_statistic_not_monotone_in_theta():
    # the ratio v/sigma is not monotone in the shift: both move with theta
    y = np.array([4.88243791, 1.65332451, 0.03658847])
    kern = np.array([0.06429943, 0.20390726, 1.43332475])
    x = np.sqrt((1 - kern / 1.5) / 4)
    g = EvalGrid((np.array([0.0]),), np.array([np.nan]), ((-1.0, 1.0),))
    vals = [compute_theta_hat(build_mean_fields(Sample(y, x), MeanInequalitySpec(t), g, 1.0, mass_floor=0), g,
                              TestSpec()) for t in (-4.95797714, -0.10744926)]
    assert vals[1] > vals[0] + 0.4


# ------------------------------------------------------------ exact oracle


def test_exact_enumeration_size():
    b = mean_builder(np.array([1.0, -1.0]), np.array([0.0, 0.1]), nx=1, h=1.0, mass_floor=0)
    ex = enumerate_bootstrap_exact(b, TestSpec(c_hat_n=1.0))
    assert ex.probs.size == 4 and np.all(ex.probs == 0.25)
    assert math.isnan(enumerate_bootstrap_exact(b, TestSpec()).c_hat_n)


def test_exact_enumeration_constant_outcome():
    b = mean_builder(np.full(3, 0.7), np.array([0.0, 0.1, 0.2]), nx=3, h=1.0, mass_floor=0)
    ex = enumerate_bootstrap_exact(b, TestSpec(c_hat_n=1.0))
    assert ex.a_star == 0 and ex.c_alpha == 0


def test_exact_enumeration_limits(rng):
    b = mean_builder(rng.normal(size=5), rng.uniform(-0.5, 0.5, 5), nx=1, h=1.0, mass_floor=0)
    with pytest.raises(ValueError):
        enumerate_bootstrap_exact(b, TestSpec(c_hat_n=1.0))


def test_decide_reuses_draws_across_thresholds(rng):
    b = mean_builder(rng.normal(size=100), rng.uniform(-1, 1, 100))
    base = b.estimate()
    fields = studentize(base)
    spec = TestSpec(n_boot=50)
    theta = compute_theta_hat(fields, b.grid, spec)
    draws = draw_bootstrap(b, base, resample_indices(b.sample, RandomSource(2).generator(0), 50))
    crit = [decide(theta, fields, draws, b.grid, TestSpec(c_cs=c, n_boot=50), b.n_tuning, b.h, 1)
            .summary.c_alpha_eta_star for c in (0.2, 0.4, 0.6, 0.8)]
    assert crit == sorted(crit)
