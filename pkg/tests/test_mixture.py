import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad
from scipy.stats import norm

from conftest import random_params, random_state
from ctxrs.core import SamplingState, plug_in_variance, record_observation
from ctxrs.mixture import (MixtureParams, PosteriorState, bic_select, cell_tables, cluster_var_floor,
                           conditional_posterior, e_step, e_step_exact, e_step_meanfield,
                           enumerate_memberships, exact_cost, init_params, limit_em, log_evidence,
                           m_step, min_pair_size, run_em)
from ctxrs.problems import make_example1


def expanded_log_evidence(t, total, sumsq, pv, mu, s2):
    """Closed form with the bracket expanded (no cancellation safeguards)."""
    post_var = 1.0 / (t / pv + 1.0 / s2)
    post_mean = post_var * (total / pv + mu / s2)
    return (-0.5 * t * math.log(2 * math.pi * pv) + 0.5 * math.log(post_var / s2)
            + 0.5 * (post_mean**2 / post_var - sumsq / pv - mu**2 / s2))


def naive_memberships(state, pv, params):
    """Sum over every complete clustering with plain exponentials."""
    n, m = state.shape
    K, L = params.K, params.L
    logc = np.array([[[[expanded_log_evidence(state.counts[i, j], state.sums[i, j], state.sumsq[i, j],
                                               pv[i, j], params.mu[k, l], params.sigma2[k, l])
                        for l in range(L)] for k in range(K)] for j in range(m)] for i in range(n)])
    z = np.zeros((n, K))
    v = np.zeros((m, L))
    weights = []
    total = 0.0
    for ks in itertools.product(range(K), repeat=n):
        for ls in itertools.product(range(L), repeat=m):
            w = np.prod(params.tau[list(ks)]) * np.prod(params.omega[list(ls)])
            for i in range(n):
                for j in range(m):
                    w *= math.exp(logc[i, j, ks[i], ls[j]])
            weights.append(w)
            total += w
            for i in range(n):
                z[i, ks[i]] += w
            for j in range(m):
                v[j, ls[j]] += w
    return z / total, v / total, math.log(total), total / max(weights)


# Conditional posterior and evidence.

def test_conditional_posterior_examples():
    assert conditional_posterior(0, 0.0, 3.0, 1.5, 2.5) == (1.5, 2.5)
    mean, var = conditional_posterior(2, 10.0, 4.0, 0.0, 1.0)
    assert var == pytest.approx(2 / 3, abs=1e-15)
    assert mean == pytest.approx(5 / 3, abs=1e-15)
    t, ybar, pv = 1e6, 3.7, 2.0
    mean, var = conditional_posterior(t, t * ybar, pv, -20.0, 0.5)
    assert abs(mean - ybar) < 1e-3
    assert abs(var - pv / t) < 1e-3 * pv / t
    with pytest.raises(ValueError):
        conditional_posterior(1, 1.0, 0.0, 0.0, 1.0)
    with pytest.raises(ValueError):
        conditional_posterior(1, 1.0, 1.0, 0.0, -1.0)


def test_log_evidence_examples():
    assert log_evidence(0, 0.0, 0.0, 2.0, 5.0, 3.0) == 0.0
    assert log_evidence(1, 0.0, 0.0, 1.0, 0.0, 1.0) == pytest.approx(-0.5 * math.log(4 * math.pi), abs=1e-14)
    with pytest.raises(ValueError):
        log_evidence(1, 0.0, 0.0, 1.0, 0.0, 0.0)


@pytest.mark.parametrize("seed", range(6))
def test_log_evidence_matches_quadrature(seed):
    rng = np.random.default_rng(seed)
    t = int(rng.integers(1, 6))
    pv, mu, s2 = rng.uniform(0.5, 3.0), rng.normal(0, 2), rng.uniform(0.5, 4.0)
    y = rng.normal(mu, 2.0, size=t)

    def integrand(x):
        return np.prod(norm.pdf(y, x, math.sqrt(pv))) * norm.pdf(x, mu, math.sqrt(s2))

    value, _ = quad(integrand, -60, 60, points=[y.mean(), mu], limit=200)
    got = log_evidence(t, y.sum(), (y * y).sum(), pv, mu, s2)
    assert got == pytest.approx(math.log(value), abs=1e-8)


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 40), st.floats(-50, 50), st.floats(0.0, 20.0), st.floats(0.1, 10),
       st.floats(-30, 30), st.floats(0.1, 10))
def test_log_evidence_matches_expanded_form(t, ybar, spread, pv, mu, s2):
    total = t * ybar
    sumsq = t * ybar * ybar + (t - 1) * spread if t > 1 else t * ybar * ybar
    got = log_evidence(t, total, sumsq, pv, mu, s2)
    want = expanded_log_evidence(t, total, sumsq, pv, mu, s2)
    assert got == pytest.approx(want, rel=1e-9, abs=1e-8)


def test_cell_tables_match_broadcast_functions():
    state, pv = random_state(3, 4, 1)
    params = random_params(2, 3, 2)
    logc, cm, cv = cell_tables(state, pv, params)
    t, s, q = (a[:, :, None, None] for a in (state.counts, state.sums, state.sumsq))
    p = pv[:, :, None, None]
    mean, var = conditional_posterior(t, s, p, params.mu, params.sigma2)
    assert np.allclose(cm, mean, rtol=1e-13, atol=1e-13)
    assert np.allclose(cv, var, rtol=1e-13, atol=0)
    assert np.allclose(logc, log_evidence(t, s, q, p, params.mu, params.sigma2), rtol=1e-12, atol=1e-12)
    assert np.all(cv > 0)
    assert np.all(cv < params.sigma2)
    assert np.all(cv < (pv / state.counts)[:, :, None, None])


def test_evidence_direction_depends_on_plug_in_variance():
    rng = np.random.default_rng(0)
    for pv, expect_decrease in ((1.0, True), (0.01, False)):
        y = rng.normal(0.0, math.sqrt(pv), 400)
        vals = []
        for t in range(50, 401, 25):
            part = y[:t]
            vals.append(log_evidence(t, part.sum(), (part * part).sum(), pv, 0.0, 1.0))
        # Block increments remove the per-draw noise of single steps.
        diffs = np.diff(vals)
        assert np.all(diffs < 0) if expect_decrease else np.all(diffs > 0)


# E-step.

def test_single_cluster_memberships_are_one():
    state, pv = random_state(3, 3, 4)
    post = e_step_exact(state, pv, MixtureParams([1.0], [1.0], [[0.0]], [[5.0]]))
    assert np.all(post.z_hat == 1.0) and np.all(post.v_hat == 1.0)


@pytest.mark.parametrize("seed", range(10))
def test_exact_e_step_matches_naive_enumeration(seed):
    state, pv = random_state(2, 2, seed, scale=2.0)
    params = random_params(2, 2, 100 + seed, scale=2.0)
    post = e_step_exact(state, pv, params)
    z, v, ll, den = naive_memberships(state, pv, params)
    assert np.max(np.abs(post.z_hat - z)) < 1e-9
    assert np.max(np.abs(post.v_hat - v)) < 1e-9
    assert post.log_likelihood == pytest.approx(ll, abs=1e-9)
    assert post.denominator == pytest.approx(den, rel=1e-9)
    assert 1.0 <= post.denominator <= 2**2 * 2**2


@pytest.mark.parametrize("n,m,K,L", [(3, 2, 2, 3), (2, 3, 3, 2), (3, 3, 2, 2), (1, 4, 3, 2)])
def test_exact_e_step_both_enumeration_orders(n, m, K, L):
    state, pv = random_state(n, m, n * 10 + m, scale=2.0)
    params = random_params(K, L, K * 10 + L, scale=2.0)
    post = e_step_exact(state, pv, params)
    z, v, ll, den = naive_memberships(state, pv, params)
    assert np.max(np.abs(post.z_hat - z)) < 1e-9
    assert np.max(np.abs(post.v_hat - v)) < 1e-9
    assert post.log_likelihood == pytest.approx(ll, abs=1e-9)
    assert 1.0 <= post.denominator <= K**n * L**m * (1 + 1e-12)
    # Pairwise joint marginalises to the memberships.
    assert np.allclose(post.joint.sum(axis=3), np.broadcast_to(post.z_hat[:, None, :], (n, m, K)), atol=1e-12)
    assert np.allclose(post.joint.sum(axis=2), np.broadcast_to(post.v_hat[None, :, :], (n, m, L)), atol=1e-12)


def test_exact_e_step_symmetry():
    # Swapping design rows together with context columns maps the data onto itself.
    state = SamplingState.empty(2, 2)
    vals = {(0, 0): [1.0, 2.0], (1, 1): [1.0, 2.0], (0, 1): [8.0, 9.5], (1, 0): [8.0, 9.5]}
    for (i, j), ys in vals.items():
        for y in ys:
            record_observation(state, i, j, y)
    pv = plug_in_variance(state)
    params = MixtureParams([0.4, 0.6], [0.4, 0.6], [[1.0, 8.0], [9.0, 2.0]], [[1.0, 2.0], [2.0, 1.0]])
    post = e_step_exact(state, pv, params)
    assert np.allclose(post.z_hat[::-1], post.v_hat, atol=1e-12) or np.allclose(post.z_hat, post.v_hat[::-1], atol=1e-12)


def test_exact_e_step_budget_error():
    state, pv = random_state(4, 4, 0)
    with pytest.raises(ValueError, match="budget"):
        e_step_exact(state, pv, random_params(3, 3, 0), budget=10)
    assert exact_cost(4, 4, 3, 3) == min(4 * 3 * 4 * 3**4, 4 * 3 * 4 * 3**4)


def test_extreme_evidence_is_stable():
    state, pv = random_state(3, 3, 2, t_low=2000, t_high=3000, scale=50.0)
    post = e_step_exact(state, pv, random_params(2, 2, 5, scale=50.0))
    assert np.all(np.isfinite(post.z_hat)) and np.all(np.isfinite(post.v_hat))
    assert np.allclose(post.z_hat.sum(axis=1), 1.0, atol=1e-12)
    assert 1.0 <= post.denominator <= 2**3 * 2**3


def test_meanfield_single_cluster_and_separated_agreement():
    state, pv = random_state(3, 3, 1)
    post = e_step_meanfield(state, pv, MixtureParams([1.0], [1.0], [[0.0]], [[4.0]]))
    assert np.all(post.z_hat == 1.0) and np.all(post.v_hat == 1.0)
    # 4 x 4 data with two well-separated design and context groups.
    rng = np.random.default_rng(3)
    block = np.array([[0.0, 50.0], [100.0, 150.0]])
    rows, cols = np.array([0, 1, 0, 1]), np.array([1, 0, 0, 1])
    state = SamplingState.empty(4, 4)
    for i in range(4):
        for j in range(4):
            for y in block[rows[i], cols[j]] + rng.normal(0, 1, 5):
                record_observation(state, i, j, float(y))
    pv = plug_in_variance(state)
    params = MixtureParams([0.5, 0.5], [0.5, 0.5], block, np.ones((2, 2)))
    exact = e_step_exact(state, pv, params)
    mf = e_step_meanfield(state, pv, params)
    assert np.max(np.abs(exact.z_hat - mf.z_hat)) < 1e-6
    assert np.max(np.abs(exact.v_hat - mf.v_hat)) < 1e-6
    assert mf.backend == "meanfield" and mf.converged


def test_meanfield_permutation_equivariance():
    state, pv = random_state(4, 3, 8)
    params = random_params(2, 2, 9)
    perm = np.array([2, 0, 3, 1])
    permuted = SamplingState(state.counts[perm], state.sums[perm], state.sumsq[perm])
    a = e_step_meanfield(state, pv, params)
    b = e_step_meanfield(permuted, pv[perm], params)
    assert np.allclose(a.z_hat[perm], b.z_hat, atol=1e-7)


def test_e_step_dispatch():
    state, pv = random_state(3, 3, 0)
    params = random_params(2, 2, 1)
    assert e_step(state, pv, params).backend == "exact"
    assert e_step(state, pv, params, budget=1).backend == "meanfield"
    with pytest.raises(ValueError):
        e_step(state, pv, params, backend="magic")


# M-step.

def _posterior(z, v, cm, cv, params):
    return PosteriorState(np.asarray(z, float), np.asarray(v, float), cm, cv, params, 0.0, "meanfield")


def test_m_step_single_cluster_is_unweighted_mean():
    state, pv = random_state(3, 2, 5)
    params = MixtureParams([1.0], [1.0], [[0.0]], [[3.0]])
    post = e_step_exact(state, pv, params)
    new = m_step(post)
    assert new.tau.tolist() == [1.0] and new.omega.tolist() == [1.0]
    assert new.mu[0, 0] == pytest.approx(post.cond_mean[..., 0, 0].mean(), abs=1e-12)
    spread = post.cond_var[..., 0, 0] + (post.cond_mean[..., 0, 0] - new.mu[0, 0]) ** 2
    assert new.sigma2[0, 0] == pytest.approx(spread.mean(), rel=1e-12)


def test_m_step_hard_assignment_and_hand_weights():
    rng = np.random.default_rng(0)
    n, m, K, L = 2, 2, 2, 2
    cm = rng.normal(size=(n, m, K, L))
    cv = rng.uniform(0.1, 1.0, size=(n, m, K, L))
    params = random_params(K, L, 0)
    z = np.array([[1.0, 0.0], [0.0, 1.0]])
    v = np.array([[0.0, 1.0], [1.0, 0.0]])
    new = m_step(_posterior(z, v, cm, cv, params))
    assert new.mu[0, 1] == cm[0, 0, 0, 1]
    assert new.mu[1, 0] == cm[1, 1, 1, 0]
    half = np.full((2, 2), 0.5)
    new = m_step(_posterior(half, half, cm, cv, params))
    for k in range(K):
        for l in range(L):
            w = 0.25
            mu = sum(w * cm[i, j, k, l] for i in range(n) for j in range(m)) / (4 * w)
            s2 = sum(w * (cv[i, j, k, l] + (cm[i, j, k, l] - mu) ** 2) for i in range(n) for j in range(m)) / (4 * w)
            assert new.mu[k, l] == pytest.approx(mu, abs=1e-12)
            assert new.sigma2[k, l] == pytest.approx(s2, abs=1e-12)
    assert np.allclose(new.tau, [0.5, 0.5]) and np.allclose(new.omega, [0.5, 0.5])


def test_m_step_empty_pair_keeps_previous_values():
    cm = np.arange(8.0).reshape(2, 2, 2, 1)
    cv = np.ones((2, 2, 2, 1))
    params = MixtureParams([0.5, 0.5], [1.0], [[3.0], [-7.0]], [[1.0], [2.5]])
    new = m_step(_posterior([[1.0, 0.0], [1.0, 0.0]], [[1.0], [1.0]], cm, cv, params))
    assert new.mu[1, 0] == -7.0 and new.sigma2[1, 0] == 2.5
    assert new.tau.tolist() == [1.0, 0.0]


def test_m_step_respects_variance_floor():
    cm = np.zeros((2, 2, 1, 1))
    cv = np.full((2, 2, 1, 1), 1e-9)
    params = MixtureParams([1.0], [1.0], [[0.0]], [[1.0]])
    assert m_step(_posterior([[1.0], [1.0]], [[1.0], [1.0]], cm, cv, params), 1e-3).sigma2[0, 0] == 1e-3


def test_cluster_floor_scales_with_pooled_variance():
    state = SamplingState.empty(1, 2)
    for y in (0.0, 2.0):
        record_observation(state, 0, 0, y)
    for y in (4.0, 6.0):
        record_observation(state, 0, 1, y)
    pooled = np.var([0.0, 2.0, 4.0, 6.0], ddof=1)
    assert cluster_var_floor(state) == pytest.approx(1e-3 * pooled, rel=1e-12)
    assert cluster_var_floor(state, 1e-6) == pytest.approx(1e-6 * pooled, rel=1e-12)
    assert cluster_var_floor(SamplingState.empty(1, 1)) == 1e-12
    # Identical cells pull the fitted variance towards zero until the floor stops it.
    flat = SamplingState.empty(3, 3)
    for i, j in itertools.product(range(3), range(3)):
        for y in (9.0, 11.0):
            record_observation(flat, i, j, y)
    pv = plug_in_variance(flat)
    fits = {}
    for rel in (1e-3, 1e-6):
        init = MixtureParams([1.0], [1.0], [[10.0]], [[1.0]])
        fits[rel] = run_em(flat, pv, 1, 1, init, max_iter=2000, tol=0.0, floor_rel=rel)[0].sigma2[0, 0]
    assert fits[1e-3] == pytest.approx(cluster_var_floor(flat), rel=1e-12)
    assert fits[1e-6] < fits[1e-3]


# EM.

@pytest.mark.parametrize("seed", range(8))
def test_em_log_likelihood_nondecreasing(seed):
    state, pv = random_state(4, 4, seed)
    rng = np.random.default_rng(seed)
    trace = []
    run_em(state, pv, 2, 2, init_params(state, pv, 2, 2, rng), max_iter=200, tol=1e-10, trace=trace)
    assert len(trace) >= 2
    assert np.all(np.diff(trace) >= -1e-8)


def test_em_generic_loop_matches_fused_exact_loop():
    state, pv = random_state(3, 4, 2)
    init = init_params(state, pv, 2, 2, np.random.default_rng(0))
    t1, t2 = [], []
    a = run_em(state, pv, 2, 2, init, 50, 1e-9, trace=t1)
    from ctxrs import mixture
    post = mixture._em_loop(lambda p, prev: e_step_exact(state, pv, p), init, None, 50, 1e-9,
                            mixture.cluster_var_floor(state), t2)
    assert np.allclose(t1, t2, rtol=0, atol=1e-9)
    assert np.allclose(a[0].mu, post.params.mu, atol=1e-9)


def test_em_single_cluster_log_likelihood_is_sum_of_log_evidence():
    state, pv = random_state(3, 3, 6)
    init = MixtureParams([1.0], [1.0], [[0.0]], [[10.0]])
    params, post, ll = run_em(state, pv, 1, 1, init, max_iter=500, tol=1e-12)
    logc = log_evidence(state.counts, state.sums, state.sumsq, pv, params.mu[0, 0], params.sigma2[0, 0])
    assert ll == pytest.approx(logc.sum(), abs=1e-9)


def test_em_recovers_separated_clusters():
    rng = np.random.default_rng(7)
    mu_true = np.array([[0.0, 20.0], [40.0, 60.0]])
    rows = np.array([0, 1] * 10)
    cols = np.array([0, 1] * 10)
    state = SamplingState.empty(20, 20)
    for i in range(20):
        for j in range(20):
            cell = mu_true[rows[i], cols[j]] + rng.normal()
            for y in cell + rng.normal(0, 1, 10):
                record_observation(state, i, j, float(y))
    pv = plug_in_variance(state)
    best = None
    for _ in range(3):
        fit = run_em(state, pv, 2, 2, init_params(state, pv, 2, 2, rng))
        best = fit if best is None or fit[2] > best[2] else best
    est = best[0].mu
    matches = [np.max(np.abs(est[np.ix_(p, q)] - mu_true))
               for p in ([0, 1], [1, 0]) for q in ([0, 1], [1, 0])]
    assert min(matches) < 0.5


def test_em_label_permutation_equivariance():
    state, pv = random_state(3, 4, 11)
    init = init_params(state, pv, 2, 2, np.random.default_rng(1))
    a, pa, _ = run_em(state, pv, 2, 2, init, 30, 1e-9)
    b, pb, _ = run_em(state, pv, 2, 2, init.relabel([1, 0], [1, 0]), 30, 1e-9)
    assert np.allclose(a.mu[::-1, ::-1], b.mu, atol=1e-9)
    assert np.allclose(pa.z_hat[:, ::-1], pb.z_hat, atol=1e-9)
    assert np.allclose(pa.v_hat[:, ::-1], pb.v_hat, atol=1e-9)


def test_run_em_argument_errors():
    state, pv = random_state(2, 2, 0)
    init = random_params(1, 1, 0)
    with pytest.raises(ValueError):
        run_em(state, pv, 1, 1, init, max_iter=-1)
    with pytest.raises(ValueError):
        run_em(state, pv, 2, 1, init)


def test_params_invariants_and_round_trip():
    state, pv = random_state(4, 3, 3)
    params, post, _ = run_em(state, pv, 2, 2, init_params(state, pv, 2, 2, np.random.default_rng(2)))
    assert params.tau.sum() == pytest.approx(1.0, abs=1e-12)
    assert params.omega.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.allclose(post.z_hat.sum(axis=1), 1.0, atol=1e-9)
    assert np.allclose(post.v_hat.sum(axis=1), 1.0, atol=1e-9)
    again = MixtureParams.from_dict(params.to_dict())
    assert np.array_equal(again.mu, params.mu) and np.array_equal(again.sigma2, params.sigma2)
    assert set(post.to_dict()) == {"z_hat", "v_hat"}
    with pytest.raises(ValueError):
        MixtureParams([1.0], [1.0], [[0.0]], [[0.0]])


# Model selection.

def _example_state(problem, n0, seed):
    rng = np.random.default_rng(seed)
    state = SamplingState.empty(problem.n, problem.m)
    for i in range(problem.n):
        for j in range(problem.m):
            for y in problem.simulate(i, j, rng, size=n0):
                record_observation(state, i, j, float(y))
    return state, plug_in_variance(state)


def test_bic_single_cluster_selects_one_one():
    hits = 0
    seeds = range(20)
    for seed in seeds:
        problem = make_example1("one", seed)
        state, pv = _example_state(problem, 5, seed)
        K, L, _, _ = bic_select(state, pv, 2, 2, restarts=1, rng=np.random.default_rng(seed))
        hits += (K, L) == (1, 1)
    assert hits >= 0.9 * len(seeds)


def test_bic_multi_cluster_prefers_two_by_two():
    hits = 0
    seeds = range(10)
    for seed in seeds:
        problem = make_example1("multi", seed)
        state, pv = _example_state(problem, 5, seed)
        K, L, _, _ = bic_select(state, pv, 3, 3, restarts=2, rng=np.random.default_rng(seed))
        hits += (K, L) == (2, 2)
    assert hits > len(seeds) / 2


def test_bic_trivial_grid_and_singleton_guard():
    state, pv = random_state(3, 2, 0)
    K, L, params, post = bic_select(state, pv, 1, 1)
    assert (K, L) == (1, 1) and post.params is params
    K, L, _, post = bic_select(state, pv, 3, 2, restarts=2)
    assert (K, L) == (1, 1) or min_pair_size(post) >= 2
    with pytest.raises(ValueError):
        bic_select(state, pv, 0, 2)


# Infinite-sample limit.

def test_limit_em_single_cluster():
    y = np.random.default_rng(0).normal(size=(4, 3))
    params, z, v = limit_em(y, 1, 1)
    assert params.mu[0, 0] == pytest.approx(y.mean(), abs=1e-12)
    assert params.sigma2[0, 0] == pytest.approx(y.var(), rel=1e-9)


def test_limit_em_recovers_example_blocks():
    problem = make_example1("multi", 3)
    params, z, v = limit_em(problem.true_means, 2, 2, rng=np.random.default_rng(0))
    rows = np.argmax(z, axis=1)
    cols = np.argmax(v, axis=1)
    truth_rows = np.array([0] * 6 + [1] * 4)
    truth_cols = np.array([0] * 4 + [1] * 6)
    assert np.array_equal(rows, truth_rows) or np.array_equal(rows, 1 - truth_rows)
    assert np.array_equal(cols, truth_cols) or np.array_equal(cols, 1 - truth_cols)


def test_limit_em_agrees_with_large_sample_e_step():
    problem = make_example1("multi", 4)
    params, z_lim, v_lim = limit_em(problem.true_means, 2, 2, rng=np.random.default_rng(1))
    state, pv = _example_state(problem, 10_000, 4)
    post = e_step_exact(state, pv, params)
    assert np.max(np.abs(post.z_hat - z_lim)) <= 0.05
    assert np.max(np.abs(post.v_hat - v_lim)) <= 0.05


def test_enumerate_memberships_denominator_bound_property():
    rng = np.random.default_rng(0)
    for _ in range(20):
        n, m, K, L = rng.integers(1, 4, size=4)
        logc = rng.normal(0, 30, size=(n, m, K, L))
        z, v, ll, den, joint = enumerate_memberships(logc, np.log(rng.dirichlet(np.ones(K))),
                                                     np.log(rng.dirichlet(np.ones(L))))
        assert 1.0 <= den <= K**n * L**m * (1 + 1e-12)
        assert np.allclose(z.sum(axis=1), 1.0) and np.allclose(v.sum(axis=1), 1.0)
