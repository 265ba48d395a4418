import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import linprog

from ftlp.core_math import DiagonalGaussian, InvalidArgument, ParamVector, kl_diag_gaussian
from ftlp.experiments import LINEAR, bayes_optimal_a, prop1_instance
from ftlp.model import gibbs_risk_mc
from ftlp.pac_bayes import (LAMBDA_P_NOTE, BoundConfig, BoundReport, MCConfig, dist_s_t_p,
                            gibbs_risk, h_delta_h_divergence, linear_bound, prop1_condition,
                            prop1_rhs, prop1_rhs_as_printed, prop2_remainder_table, prop3_check,
                            random_split, theorem1_bound, theorem2_expected_bound,
                            theorem3_bound, variation_divergence, wasserstein_1d)
from ftlp.synthetic_domains import GRID_A, DomainDataset, ToyEnvSpecA, gen_variant_a

MC = MCConfig(n_samples=40, dist_draws=5, dist_pairs=5, seed=0)


def posterior_at(params, variance):
    values = params.values if isinstance(params, ParamVector) else params
    return DiagonalGaussian(ParamVector(values, LINEAR.layout), variance)


def a_data(p_e, n, seed, env_id=0):
    return gen_variant_a(ToyEnvSpecA(p_e, n, seed, env_id=env_id))


# ------------------------------------------------------------------ linear bound

def test_linear_bound_vanishes():
    eps = 1e-12
    assert linear_bound(0.0, 0.0, BoundConfig(0.5, 1 - eps, 100)) < 1e-12


def test_linear_bound_arithmetic():
    value = linear_bound(0.1, 0.0, BoundConfig(0.5, 0.5, 100))
    assert value == pytest.approx(0.2 + math.log(2) / 50, abs=1e-15)
    assert value == pytest.approx(0.213863, abs=1e-6)


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 1), st.floats(0, 100), st.floats(1e-3, 10), st.floats(0.01, 0.99),
       st.floats(0.01, 0.99), st.integers(1, 10_000))
def test_linear_bound_increases_with_kl(emp, kl, extra, beta, sigma, m):
    cfg = BoundConfig(beta, sigma, m)
    assert linear_bound(emp, kl + extra, cfg) > linear_bound(emp, kl, cfg)


@pytest.mark.parametrize("kwargs", [{"beta": 0.0}, {"beta": 1.0}, {"sigma": 0.0},
                                    {"sigma": 1.0}, {"m": 0}])
def test_bound_config_open_intervals(kwargs):
    with pytest.raises(InvalidArgument):
        BoundConfig(**kwargs)


def test_linear_bound_rejects_bad_inputs():
    with pytest.raises(InvalidArgument):
        linear_bound(1.5, 0.0, BoundConfig())
    with pytest.raises(InvalidArgument):
        linear_bound(0.1, -1.0, BoundConfig())


def test_report_total_is_sum_and_flags_lambda_p():
    r = BoundReport(0.1, 2.0, 0.4, 0.05, 80, 0.3, "variation", "theorem1")
    assert r.total == r.empirical_term + r.kl_term + r.confidence_term + r.dist_term
    assert r.lambda_p_included is False and r.note == LAMBDA_P_NOTE
    assert r.empirical_term + r.kl_term + r.confidence_term == pytest.approx(
        linear_bound(0.1, 2.0, BoundConfig(0.4, 0.05, 80)), abs=1e-15)


# ------------------------------------------------------------------ single-prior and ensemble bounds

@pytest.fixture
def bound_instance():
    rng = np.random.default_rng(0)
    post = posterior_at(bayes_optimal_a().values + rng.standard_normal(6) * 0.3, 0.5)
    prior = posterior_at(np.zeros(6), 2.0)
    return post, prior, a_data(0.2, 100, 1), a_data(0.8, 300, 2)


def test_theorem1_recomposes_from_independent_terms(bound_instance):
    post, prior, source, target = bound_instance
    cfg = BoundConfig(0.5, 0.05, len(source))
    report = theorem1_bound(post, prior, LINEAR, source, target, cfg, "variation", MC)
    emp = gibbs_risk_mc(post, LINEAR, source, MC.n_samples, MC.seed)
    kl = kl_diag_gaussian(post, prior)
    dist = variation_divergence(source, target)
    denom = cfg.m * 2 * cfg.beta * (1 - cfg.beta)
    expected = emp / cfg.beta + kl / denom + math.log(1 / cfg.sigma) / denom + dist
    assert report.total == pytest.approx(expected, abs=1e-12)
    assert report.theorem == "theorem1"


def test_theorem1_prior_equal_to_posterior_has_zero_kl(bound_instance):
    post, _, source, target = bound_instance
    report = theorem1_bound(post, post, LINEAR, source, target, BoundConfig(m=len(source)),
                            "variation", MC)
    assert report.kl_term == 0.0


def test_theorem1_source_equals_target_generator():
    # exact support of variant A is finite, so large same-generator samples nearly coincide
    source, target = a_data(0.4, 20_000, 1), a_data(0.4, 20_000, 2)
    post = posterior_at(bayes_optimal_a(), 0.5)
    cfg = BoundConfig(0.5, 0.05, len(source))
    report = theorem1_bound(post, post, LINEAR, source, target, cfg, "variation", MC)
    assert report.dist_term < 0.05
    base = linear_bound(report.empirical_risk, 0.0, cfg)
    assert report.total == pytest.approx(base + report.dist_term, abs=1e-12)


def test_theorem1_m_must_match_source(bound_instance):
    post, prior, source, target = bound_instance
    with pytest.raises(InvalidArgument):
        theorem1_bound(post, prior, LINEAR, source, target, BoundConfig(m=7), "variation", MC)


def test_theorem3_singleton_equals_theorem1(bound_instance):
    post, prior, source, target = bound_instance
    cfg = BoundConfig(0.5, 0.05, len(source))
    t1 = theorem1_bound(post, prior, LINEAR, source, target, cfg, "variation", MC)
    t3 = theorem3_bound(post, [prior], LINEAR, source, target, cfg, "variation", MC)
    assert t3.to_dict() == t1.to_dict()


def test_theorem3_ensemble_of_posterior_has_zero_kl(bound_instance):
    post, _, source, target = bound_instance
    t3 = theorem3_bound(post, [post], LINEAR, source, target, BoundConfig(m=len(source)),
                        "variation", MC)
    assert t3.kl_term == 0.0


def test_theorem3_two_priors_average_kl(bound_instance):
    post, prior, source, target = bound_instance
    other = posterior_at(np.ones(6), 0.7)
    cfg = BoundConfig(0.5, 0.05, len(source))
    t3 = theorem3_bound(post, [prior, other], LINEAR, source, target, cfg, "variation", MC)
    mean_kl = 0.5 * (kl_diag_gaussian(post, prior) + kl_diag_gaussian(post, other))
    assert t3.kl == pytest.approx(mean_kl, abs=1e-12)
    assert t3.kl_term == pytest.approx(mean_kl / cfg.denominator, abs=1e-12)
    assert t3.theorem == "theorem3"


def test_theorem3_empty_ensemble(bound_instance):
    post, _, source, target = bound_instance
    with pytest.raises(InvalidArgument):
        theorem3_bound(post, [], LINEAR, source, target, BoundConfig(m=len(source)))


# ------------------------------------------------------------------ split-prior bound

def constant_rule(q):
    return lambda data, seed: q


def test_theorem2_constant_rule_has_zero_kl(bound_instance):
    post, _, source, target = bound_instance
    value, reports = theorem2_expected_bound(constant_rule(post), source, target, LINEAR,
                                             BoundConfig(m=len(source)), 0.3, 3, seed=1,
                                             mc=MC, return_reports=True)
    assert all(r.kl_term == 0.0 for r in reports)
    assert all(r.m == 70 for r in reports)
    assert value == pytest.approx(sum(r.total for r in reports) / 3, abs=1e-15)


def test_theorem2_is_deterministic(bound_instance):
    post, _, source, target = bound_instance
    args = (constant_rule(post), source, target, LINEAR, BoundConfig(m=len(source)), 0.5, 2)
    assert theorem2_expected_bound(*args, seed=4, mc=MC) == theorem2_expected_bound(*args, seed=4,
                                                                                    mc=MC)


def test_theorem2_small_split_approaches_theorem1(bound_instance):
    # one point in S^J: the prior is untrained and m shrinks by one
    post, prior, source, target = bound_instance
    value, (r,) = theorem2_expected_bound(constant_rule(post), source, target, LINEAR,
                                          BoundConfig(m=len(source)), 0.01, 1, seed=0, mc=MC,
                                          prior_rule=constant_rule(prior), return_reports=True)
    assert r.m == len(source) - 1
    t1 = theorem1_bound(post, prior, LINEAR, source, target, BoundConfig(m=len(source)),
                        "variation", MC)
    assert r.kl == t1.kl
    assert value == pytest.approx(t1.total, abs=0.05)


def test_theorem2_empty_split_rejected(bound_instance):
    post, _, source, target = bound_instance
    with pytest.raises(InvalidArgument):
        theorem2_expected_bound(constant_rule(post), source, target, LINEAR,
                                BoundConfig(m=len(source)), 0.001, 1)


# ------------------------------------------------------------------ variation divergence

def test_variation_identical_is_zero():
    a = a_data(0.3, 100, 0)
    assert variation_divergence(a, a) == 0.0


def test_variation_disjoint_is_two():
    a = DomainDataset(np.zeros((5, 2)), [0] * 5)
    b = DomainDataset(np.ones((7, 2)), [1] * 7)
    assert variation_divergence(a, b) == 2.0


def population_a(p_e):
    """Exact variant-A law as a {(x_inv, x_sup): prob} table."""
    law = {}
    for v in GRID_A:
        for w, pw in ((1.0, 1 - p_e), (0.0, p_e)):
            if pw > 0:
                key = (float(v), float(w * v))
                law[key] = law.get(key, 0.0) + pw / len(GRID_A)
    return law


def test_variation_variant_a_extremes_by_enumeration():
    pa, pb = population_a(0.0), population_a(1.0)
    support = set(pa) | set(pb)
    assert len(support) <= 12
    oracle = sum(abs(pa.get(s, 0.0) - pb.get(s, 0.0)) for s in support)
    assert oracle == pytest.approx(5 / 3, abs=1e-15)

    # datasets holding the law's exact proportions reproduce the enumeration
    def exact_sample(law, reps=60):
        rows = [k for k, p in law.items() for _ in range(round(p * reps * len(GRID_A)))]
        return DomainDataset(np.array(rows), (np.array(rows)[:, 0] > 0.5).astype(int))

    assert variation_divergence(exact_sample(pa), exact_sample(pb)) == pytest.approx(oracle,
                                                                                     abs=1e-12)
    big = variation_divergence(a_data(0.0, 50_000, 1), a_data(1.0, 50_000, 2))
    assert big == pytest.approx(oracle, abs=0.03)


def test_variation_binning_options():
    a, b = a_data(0.1, 200, 0), a_data(0.9, 200, 1)
    edges = [np.linspace(-0.1, 1.1, 7)] * 2
    assert variation_divergence(a, b, edges) == variation_divergence(a, b, edges)
    assert 0.0 <= variation_divergence(a, b, 4) <= 2.0
    with pytest.raises(InvalidArgument):
        variation_divergence(a, b, [np.linspace(0.2, 0.9, 3)] * 2)


# ------------------------------------------------------------------ H-delta-H divergence

NINE = np.array([[-c * np.cos(t), -c * np.sin(t), c * np.cos(t), c * np.sin(t), c * 0.4, -c * 0.4]
                 for t in np.linspace(0, np.pi, 3) for c in (1.0, 2.0, -1.0)])


def exhaustive_hdh(a, b, hypotheses):
    def preds(x, h):
        W, bias = h[:4].reshape(2, 2), h[4:]
        return np.argmax(x @ W.T + bias, axis=1)

    best = 0.0
    for h1, h2 in itertools.product(hypotheses, repeat=2):
        da = np.mean(preds(a.features, h1) != preds(a.features, h2))
        db = np.mean(preds(b.features, h1) != preds(b.features, h2))
        best = max(best, abs(da - db))
    return 2 * best


def test_hdh_matches_exhaustive_pairs():
    assert len(NINE) == 9
    a, b = a_data(0.1, 300, 3), a_data(0.9, 300, 4)
    assert h_delta_h_divergence(a, b, LINEAR, 1, hypotheses=NINE) == exhaustive_hdh(a, b, NINE)


def test_hdh_identical_samples_is_zero():
    a = a_data(0.5, 100, 5)
    assert h_delta_h_divergence(a, a, LINEAR, 50, seed=1) == 0.0


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 30))
def test_hdh_in_range_and_monotone_in_budget(seed, pairs):
    a, b = a_data(0.1, 40, seed), a_data(0.9, 40, seed + 1)
    small = h_delta_h_divergence(a, b, LINEAR, pairs, seed=seed)
    large = h_delta_h_divergence(a, b, LINEAR, pairs + 5, seed=seed)
    assert 0.0 <= small <= large <= 2.0


# ------------------------------------------------------------------ dist(S, T, P)

def test_dist_degenerate_posterior_is_zero():
    post = posterior_at(bayes_optimal_a(), 1e-12)
    a, b = a_data(0.1, 200, 0), a_data(0.9, 200, 1)
    assert dist_s_t_p(post, a, b, "h_delta_h", LINEAR, MC) == 0.0


def test_dist_variation_ignores_posterior():
    a, b = a_data(0.1, 200, 0), a_data(0.9, 200, 1)
    p1 = posterior_at(np.zeros(6), 1.0)
    p2 = posterior_at(np.ones(6), 3.0)
    assert dist_s_t_p(p1, a, b, "variation") == dist_s_t_p(p2, a, b, "variation")
    assert dist_s_t_p(None, a, b, "none") == 0.0


def test_dist_budget_doubling_within_two_standard_errors():
    a, b = a_data(0.1, 200, 0), a_data(0.9, 200, 1)
    post = posterior_at(bayes_optimal_a(2.0), 1.0)
    runs = lambda draws: np.array([  # noqa: E731
        dist_s_t_p(post, a, b, "h_delta_h", LINEAR, MCConfig(dist_draws=draws, dist_pairs=10,
                                                             seed=s)) for s in range(12)])
    base, doubled = runs(10), runs(20)
    se = math.sqrt(base.var(ddof=1) / len(base) + doubled.var(ddof=1) / len(doubled))
    assert abs(base.mean() - doubled.mean()) < 2 * se + 1e-12


def test_dist_unknown_kind():
    a = a_data(0.1, 10, 0)
    with pytest.raises(InvalidArgument):
        dist_s_t_p(None, a, a, "wasserstein")


# ------------------------------------------------------------------ split-prior condition

def test_prop1_rhs_is_exact_rearrangement():
    # Phi(m, KL0) - Phi(n, KLJ) >= 0  <=>  D_F <= rhs, after multiplying by 2 beta (1 - beta)
    rng = np.random.default_rng(0)
    for _ in range(200):
        beta, sigma = rng.uniform(0.05, 0.95), rng.uniform(0.01, 0.5)
        m = int(rng.integers(10, 500))
        n = int(rng.integers(1, m))
        rm, rn, dm, dn = rng.uniform(0, 1, 4)
        k0, kj = rng.uniform(0, 50, 2)
        phi = lambda r, k, d, s: r / beta + (k + math.log(1 / sigma)) / (  # noqa: E731
            s * 2 * beta * (1 - beta)) + d
        gap = phi(rn, kj, dn, n) - phi(rm, k0, dm, m)
        d_f = k0 / m - kj / n
        lhs_minus_rhs = d_f - prop1_rhs(rn - rm, dn - dm, beta, sigma, m, n)
        assert lhs_minus_rhs == pytest.approx(-2 * beta * (1 - beta) * gap, abs=1e-9)


def test_prop1_printed_form_differs():
    assert prop1_rhs(0.1, 0.2, 0.5, 0.05, 100, 50) != prop1_rhs_as_printed(0.1, 0.2, 0.5, 0.05,
                                                                           100, 50)


def split_half(data, rng):
    return random_split(data, 0.5, rng)


def test_prop1_identical_priors_collapse_to_normalisation_gap():
    q = posterior_at(bayes_optimal_a(), 1.0)
    p = posterior_at(bayes_optimal_a().values + 0.5, 0.5)
    kl = kl_diag_gaussian(p, q)
    report = prop1_condition([q], split_half, constant_rule(p), lambda s: a_data(0.2, 60, s),
                             a_data(0.9, 100, 9), LINEAR, BoundConfig(m=60), 2, seed=0, mc=MC,
                             prior_rule=constant_rule(q))
    assert report.d_f == pytest.approx(kl * (1 / 60 - 1 / 30), abs=1e-12)


def test_prop1_constant_classifier_has_zero_b_r():
    # weights zero, bias favouring class 0, on data whose labels are all 0
    flat = np.r_[np.zeros(4), 5.0, -5.0]
    p = posterior_at(flat, 1e-12)

    def sampler(seed):
        x = np.random.default_rng(seed).choice(GRID_A[:3], size=(40, 1))
        return DomainDataset(np.hstack([x, x]), np.zeros(40, dtype=int))

    report = prop1_condition([p], split_half, constant_rule(p), sampler, a_data(0.9, 50, 1),
                             LINEAR, BoundConfig(m=40), 2, seed=3, mc=MC)
    assert report.b_r == 0.0


def test_prop1_bayes_optimal_prior_satisfies_condition():
    report = prop1_instance(0)
    assert report.condition_holds
    assert report.phi_agrees
    assert (report.lhs_phi_split >= report.lhs_phi_pretrained) == report.condition_holds


def test_prop1_degenerate_split_rejected():
    q = posterior_at(np.zeros(6), 1.0)
    whole = lambda data, rng: (data, data.subset(np.arange(0)))  # noqa: E731
    with pytest.raises((InvalidArgument, ValueError)):
        prop1_condition([q], whole, constant_rule(q), lambda s: a_data(0.2, 20, s),
                        a_data(0.9, 20, 1), LINEAR, BoundConfig(m=20), 1)


# ------------------------------------------------------------------ KL Taylor remainder

def test_prop2_ratio_near_quarter():
    rows = prop2_remainder_table(30, seed=1)
    ratios = np.array([r["ratio"] for r in rows])
    assert np.all((ratios > 0.2) & (ratios < 0.3))


# ------------------------------------------------------------------ Wasserstein inequality

def lp_w1(a, b):
    """W1 between uniform empirical measures by an explicit transport LP."""
    na, nb = len(a), len(b)
    cost = np.abs(np.subtract.outer(a, b)).ravel()
    rows = []
    for i in range(na):
        r = np.zeros((na, nb))
        r[i, :] = 1
        rows.append(r.ravel())
    for j in range(nb):
        r = np.zeros((na, nb))
        r[:, j] = 1
        rows.append(r.ravel())
    rhs = np.r_[np.full(na, 1 / na), np.full(nb, 1 / nb)]
    res = linprog(cost, A_eq=np.array(rows), b_eq=rhs, bounds=(0, None), method="highs")
    assert res.success
    return res.fun


@pytest.mark.parametrize("sizes", [(50, 50), (17, 29), (1, 8)])
def test_wasserstein_matches_lp(sizes):
    rng = np.random.default_rng(sum(sizes))
    a, b = rng.normal(0, 1, sizes[0]), rng.normal(0.5, 2, sizes[1])
    assert wasserstein_1d(a, b) == pytest.approx(lp_w1(a, b), abs=1e-9)


def test_wasserstein_examples():
    a = np.random.default_rng(0).uniform(-3, 3, 40)
    assert wasserstein_1d(a, a) == 0.0
    assert wasserstein_1d(a, a + 1.75) == pytest.approx(1.75, abs=1e-12)
    with pytest.raises(InvalidArgument):
        wasserstein_1d([], [1.0])


def test_prop3_examples():
    d = np.random.default_rng(1).uniform(0, 1, 20)
    t = np.random.default_rng(2).uniform(0, 1, 30)
    lhs, rhs, holds = prop3_check(d, d, t)
    assert lhs == 0.0 and holds
    lhs, rhs, holds = prop3_check(d, d, d)
    assert lhs == 0.0 and rhs >= 0.0 and holds
    with pytest.raises(InvalidArgument):
        prop3_check([np.inf], d, t)


@settings(max_examples=200, deadline=None)
@given(*[st.lists(st.floats(-100, 100), min_size=1, max_size=30) for _ in range(3)])
def test_prop3_holds_on_random_triples(d1, d2, t):
    _, _, holds = prop3_check(d1, d2, t)
    assert holds


def test_gibbs_risk_wrapper_matches_model():
    post = posterior_at(bayes_optimal_a(), 0.3)
    data = a_data(0.5, 80, 3)
    assert gibbs_risk(post, LINEAR, data, MC) == gibbs_risk_mc(post, LINEAR, data,
                                                               MC.n_samples, MC.seed)
