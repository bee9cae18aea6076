"""Compiled inner loops for the posterior engine and the look-ahead scan."""

from __future__ import annotations

import math

import numpy as np
from numba import njit

LOG_2PI = math.log(2.0 * math.pi)
TINY = 1e-300


@njit(cache=True)
def cell_tables(counts, sums, sumsq, plug_var, mu, sigma2):
    """Log evidence, conditional means and conditional variances, each (n, m, K, L)."""
    n, m = counts.shape
    K, L = mu.shape
    logc = np.zeros((n, m, K, L))
    cm = np.empty((n, m, K, L))
    cv = np.empty((n, m, K, L))
    for i in range(n):
        for j in range(m):
            t = float(counts[i, j])
            s = sums[i, j]
            p = plug_var[i, j]
            resid = 0.0
            if t > 0:
                resid = max(sumsq[i, j] - s * s / t, 0.0)
            for k in range(K):
                for l in range(L):
                    prior = sigma2[k, l]
                    var = 1.0 / (t / p + 1.0 / prior)
                    cv[i, j, k, l] = var
                    cm[i, j, k, l] = var * (s / p + mu[k, l] / prior)
                    if t > 0:
                        gap = s - t * mu[k, l]
                        logc[i, j, k, l] = (-0.5 * t * (LOG_2PI + math.log(p)) - 0.5 * resid / p
                                            + 0.5 * math.log(var / prior)
                                            - 0.5 * gap * gap / (t * (p + t * prior)))
    return logc, cm, cv


@njit(cache=True)
def enumerate_context_labels(logc, log_tau, log_omega, want_joint):
    """Exact memberships by enumerating context labels; design labels factorise.

    Returns ``(z, v, joint, log_likelihood, denominator)``.
    """
    n, m, K, L = logc.shape
    lab = np.zeros(m, dtype=np.int64)
    a = np.empty((n, K))
    lse = np.empty(n)
    znum = np.zeros((n, K))
    vnum = np.zeros((m, L))
    jnum = np.zeros((n, m, K, L)) if want_joint else np.zeros((1, 1, 1, 1))
    shift = -np.inf
    best = -np.inf
    den = 0.0
    total = L**m
    for _ in range(total):
        prior = 0.0
        for j in range(m):
            prior += log_omega[lab[j]]
        sum_lse = 0.0
        sum_max = 0.0
        for i in range(n):
            amax = -np.inf
            for k in range(K):
                acc = log_tau[k]
                for j in range(m):
                    acc += logc[i, j, k, lab[j]]
                a[i, k] = acc
                if acc > amax:
                    amax = acc
            tot = 0.0
            for k in range(K):
                tot += math.exp(a[i, k] - amax)
            lse[i] = amax + math.log(tot)
            sum_lse += lse[i]
            sum_max += amax
        logw = prior + sum_lse
        if prior + sum_max > best:
            best = prior + sum_max
        if logw > -np.inf:
            if logw > shift:
                if shift > -np.inf:
                    scale = math.exp(shift - logw)
                    den *= scale
                    znum *= scale
                    vnum *= scale
                    if want_joint:
                        jnum *= scale
                shift = logw
            w = math.exp(logw - shift)
            den += w
            for j in range(m):
                vnum[j, lab[j]] += w
            for i in range(n):
                for k in range(K):
                    pz = w * math.exp(a[i, k] - lse[i])
                    znum[i, k] += pz
                    if want_joint:
                        for j in range(m):
                            jnum[i, j, k, lab[j]] += pz
        j = m - 1
        while j >= 0:
            lab[j] += 1
            if lab[j] < L:
                break
            lab[j] = 0
            j -= 1
    ll = shift + math.log(den)
    return znum / den, vnum / den, jnum / den, ll, math.exp(ll - best)


@njit(cache=True)
def exact_memberships(logc, log_tau, log_omega):
    """Exact memberships, enumerating whichever label space is cheaper.

    Returns ``(z, v, joint, log_likelihood, denominator)``.
    """
    n, m, K, L = logc.shape
    if m * L * n * K**n < n * K * m * L**m:
        flipped = np.ascontiguousarray(logc.transpose(1, 0, 3, 2))
        v, z, joint, ll, den = enumerate_context_labels(flipped, log_omega, log_tau, True)
        return z, v, np.ascontiguousarray(joint.transpose(1, 0, 3, 2)), ll, den
    return enumerate_context_labels(logc, log_tau, log_omega, True)


@njit(cache=True)
def _log_probs(p):
    out = np.empty(p.size)
    for a in range(p.size):
        out[a] = math.log(max(p[a], TINY))
    return out


@njit(cache=True)
def em_exact(counts, sums, sumsq, plug_var, tau, omega, mu, sigma2, max_iter, tol, floor):
    """Exact-backend EM loop from the given parameters.

    Mirrors the generic loop: evaluate the posterior, then up to ``max_iter``
    rounds of M-step and E-step, stopping once the log-likelihood gain drops
    below ``tol``.  Returns the final parameters, the posterior tables
    conditioned on them and the log-likelihood trace.
    """
    lls = np.empty(max_iter + 1)
    logc, cm, cv = cell_tables(counts, sums, sumsq, plug_var, mu, sigma2)
    z, v, joint, ll, den = exact_memberships(logc, _log_probs(tau), _log_probs(omega))
    lls[0] = ll
    used = 1
    for _ in range(max_iter):
        mu, sigma2 = weighted_moments(joint, cm, cv, mu, sigma2, floor)
        tau = normalized_column_means(z)
        omega = normalized_column_means(v)
        logc, cm, cv = cell_tables(counts, sums, sumsq, plug_var, mu, sigma2)
        z, v, joint, ll_new, den = exact_memberships(logc, _log_probs(tau), _log_probs(omega))
        gain = ll_new - ll
        ll = ll_new
        lls[used] = ll
        used += 1
        if gain < tol:
            break
    return tau, omega, mu, sigma2, z, v, joint, cm, cv, ll, den, lls[:used]


@njit(cache=True)
def weighted_moments(w, cm, cv, prev_mu, prev_sigma2, floor):
    """Cluster means and variances from pairwise weights; empty pairs keep their values."""
    n, m, K, L = cm.shape
    mu = np.empty((K, L))
    sigma2 = np.empty((K, L))
    for k in range(K):
        for l in range(L):
            ws = 0.0
            acc = 0.0
            for i in range(n):
                for j in range(m):
                    ws += w[i, j, k, l]
                    acc += w[i, j, k, l] * cm[i, j, k, l]
            if ws < 1e-12:
                mu[k, l] = prev_mu[k, l]
                sigma2[k, l] = max(prev_sigma2[k, l], floor)
                continue
            mean = acc / ws
            acc = 0.0
            for i in range(n):
                for j in range(m):
                    d = cm[i, j, k, l] - mean
                    acc += w[i, j, k, l] * (cv[i, j, k, l] + d * d)
            mu[k, l] = mean
            sigma2[k, l] = max(acc / ws, floor)
    return mu, sigma2


@njit(cache=True)
def normalized_column_means(x):
    """Column means of a row-stochastic matrix, renormalised to sum to one."""
    rows, cols = x.shape
    out = np.zeros(cols)
    for i in range(rows):
        for c in range(cols):
            out[c] += x[i, c]
    out /= out.sum()
    return out


@njit(cache=True)
def ranking(cond_mean, z, v):
    """MAP cluster labels and per-context design order by MAP posterior mean, best first.

    Ties keep the lower design index first.
    """
    n, m = cond_mean.shape[0], cond_mean.shape[1]
    k_star = np.empty(n, dtype=np.int64)
    l_star = np.empty(m, dtype=np.int64)
    for i in range(n):
        k_star[i] = np.argmax(z[i])
    for j in range(m):
        l_star[j] = np.argmax(v[j])
    order = np.empty((m, n), dtype=np.int64)
    score = np.empty(n)
    for j in range(m):
        for i in range(n):
            score[i] = cond_mean[i, j, k_star[i], l_star[j]]
            order[j, i] = i
        for i in range(1, n):
            cur = order[j, i]
            pos = i
            while pos > 0 and score[order[j, pos - 1]] < score[cur]:
                order[j, pos] = order[j, pos - 1]
                pos -= 1
            order[j, pos] = cur
    return order, k_star, l_star


@njit(cache=True)
def _argsort_small(vals, count, out):
    """Insertion sort of ``vals[:count]``, writing the permutation into ``out``."""
    for s in range(count):
        out[s] = s
    for s in range(1, count):
        e = out[s]
        key = vals[e]
        u = s - 1
        while u >= 0 and vals[out[u]] > key:
            out[u + 1] = out[u]
            u -= 1
        out[u + 1] = e


@njit(cache=True)
def _expected_min(x, p, xs, step, perm, local):
    A, K = x.shape
    N = A * K
    pos = 0
    for a in range(A):
        _argsort_small(x[a], K, local)
        tot = 0.0
        for k in range(K):
            tot += p[a, k]
        cum = 0.0
        before = 1.0
        for r in range(K):
            k = local[r]
            cum += p[a, k] / tot
            after = max(1.0 - cum, 0.0) if r < K - 1 else 0.0
            step[pos] = math.log(max(after, TINY)) - math.log(max(before, TINY))
            xs[pos] = x[a, k]
            before = after
            pos += 1
    if N <= 48:
        _argsort_small(xs, N, perm)
    else:
        perm[:N] = np.argsort(xs[:N])
    acc = 0.0
    prev = 0.0
    res = 0.0
    for s in range(N):
        e = perm[s]
        res += (xs[e] - prev) * math.exp(acc)
        acc += step[e]
        prev = xs[e]
    return res


@njit(cache=True)
def expected_min(x, p):
    """E[min_a X_a] for independent X_a taking x[a, k] with probability p[a, k]."""
    A, K = x.shape
    return _expected_min(x, p, np.empty(A * K), np.empty(A * K),
                         np.empty(A * K, dtype=np.int64), np.empty(K, dtype=np.int64))


@njit(cache=True)
def _look_var(cv, counts, plug_var, s2_new, i, j, k, l, r, q, kr, lq):
    if i == r and j == q:
        return 1.0 / ((counts[i, j] + 1.0) / plug_var[i, j] + 1.0 / s2_new[k, l])
    if k == kr and l == lq and r >= 0:
        return 1.0 / (counts[i, j] / plug_var[i, j] + 1.0 / s2_new[k, l])
    return cv[i, j, k, l]


@njit(cache=True)
def look_ahead(cm, cv, w, z, v, mu, sigma2, counts, plug_var, order, k_star, l_star,
               r, q, floor, want_v, want_w, exact_v):
    """V and W after one more sample of (r, q); ``r < 0`` evaluates the current state.

    With ``exact_v`` false the per-context expectation of the minimum is
    replaced by the minimum over challengers of the expected pairwise term.
    """
    n, m, K, L = cm.shape
    return _look_ahead(cm, cv, w, _pair_totals(w), z, v, mu, sigma2, counts, plug_var, order,
                       k_star, l_star, r, q, floor, want_v, want_w, exact_v,
                       np.empty(n * K), np.empty(n * K), np.empty(n * K, dtype=np.int64),
                       np.empty(K, dtype=np.int64))


@njit(cache=True)
def _pair_totals(w):
    n, m, K, L = w.shape
    out = np.zeros((K, L))
    for i in range(n):
        for j in range(m):
            for k in range(K):
                for l in range(L):
                    out[k, l] += w[i, j, k, l]
    return out


@njit(cache=True)
def _look_ahead(cm, cv, w, wsum, z, v, mu, sigma2, counts, plug_var, order, k_star, l_star,
                r, q, floor, want_v, want_w, exact_v, xs, step, perm, local):
    n, m, K, L = cm.shape
    s2_new = sigma2.copy()
    zr = np.empty(K)
    vq = np.empty(L)
    kr = -1
    lq = -1
    if r >= 0:
        kr = k_star[r]
        lq = l_star[q]
        t = float(counts[r, q])
        pv = plug_var[r, q]
        for k in range(K):
            for l in range(L):
                ws = max(wsum[k, l], TINY)
                shrunk = 1.0 / ((t + 1.0) / pv + 1.0 / sigma2[k, l])
                val = sigma2[k, l] - w[r, q, k, l] * (cv[r, q, k, l] - shrunk) / ws
                s2_new[k, l] = min(max(val, TINY), sigma2[k, l])
        best = -np.inf
        for k in range(K):
            d = cm[r, q, k, lq] - mu[k, lq]
            c = cv[r, q, k, lq]
            s = sigma2[k, lq]
            zr[k] = (math.log(z[r, k]) if z[r, k] > 0 else -np.inf) - d * d * c * c / (2.0 * pv * s * s)
            best = max(best, zr[k])
        tot = 0.0
        for k in range(K):
            zr[k] = math.exp(zr[k] - best)
            tot += zr[k]
        for k in range(K):
            zr[k] /= tot
        best = -np.inf
        for l in range(L):
            d = cm[r, q, kr, l] - mu[kr, l]
            c = cv[r, q, kr, l]
            s = sigma2[kr, l]
            vq[l] = (math.log(v[q, l]) if v[q, l] > 0 else -np.inf) - d * d * c * c / (2.0 * pv * s * s)
            best = max(best, vq[l])
        tot = 0.0
        for l in range(L):
            vq[l] = math.exp(vq[l] - best)
            tot += vq[l]
        for l in range(L):
            vq[l] /= tot
    A = n - 1
    x = np.empty((A, K))
    p = np.empty((A, K))
    value_v = np.inf
    value_w = np.inf
    pair = np.empty(A)
    for j in range(m):
        b = order[j, 0]
        ctx = 0.0
        for a in range(A):
            pair[a] = 0.0
        for kb in range(K):
            zb = zr[kb] if b == r else z[b, kb]
            for l in range(L):
                vj = vq[l] if j == q and r >= 0 else v[j, l]
                var_b = _look_var(cv, counts, plug_var, s2_new, b, j, kb, l, r, q, kr, lq)
                for a in range(A):
                    c = order[j, a + 1]
                    for ki in range(K):
                        d = cm[b, j, kb, l] - cm[c, j, ki, l]
                        den = var_b + _look_var(cv, counts, plug_var, s2_new, c, j, ki, l, r, q, kr, lq)
                        term = d * d / max(den, floor)
                        x[a, ki] = term
                        p[a, ki] = zr[ki] if c == r else z[c, ki]
                        if want_w and term < value_w:
                            value_w = term
                weight = zb * vj
                if want_v and weight > 0:
                    if exact_v:
                        ctx += weight * _expected_min(x, p, xs, step, perm, local)
                    else:
                        for a in range(A):
                            for ki in range(K):
                                pair[a] += weight * p[a, ki] * x[a, ki]
        if want_v:
            if not exact_v:
                ctx = np.inf
                for a in range(A):
                    ctx = min(ctx, pair[a])
            value_v = min(value_v, ctx)
    return value_v, value_w


@njit(cache=True)
def scan(cm, cv, w, z, v, mu, sigma2, counts, plug_var, order, k_star, l_star,
         floor, want_v, want_w, exact_v):
    """Look-ahead V and W for every candidate cell."""
    n, m = counts.shape
    K = cm.shape[2]
    vv = np.full((n, m), np.nan)
    ww = np.full((n, m), np.nan)
    wsum = _pair_totals(w)
    xs = np.empty(n * K)
    step = np.empty(n * K)
    perm = np.empty(n * K, dtype=np.int64)
    local = np.empty(K, dtype=np.int64)
    for r in range(n):
        for q in range(m):
            a, b = _look_ahead(cm, cv, w, wsum, z, v, mu, sigma2, counts, plug_var, order,
                               k_star, l_star, r, q, floor, want_v, want_w, exact_v,
                               xs, step, perm, local)
            vv[r, q] = a
            ww[r, q] = b
    return vv, ww


@njit(cache=True)
def chain_paths(cum, quality, absorbing, u):
    """Sum of ``quality`` over the states entered in each month, paths starting in state 0.

    One path per row of uniforms ``u``; the state reached by the month's
    transition is the one that accrues quality.
    """
    count, horizon = u.shape
    k = cum.shape[0]
    out = np.zeros(count)
    for c in range(count):
        s = 0
        acc = 0.0
        for h in range(horizon):
            if s == absorbing:
                break
            x = u[c, h]
            nxt = 0
            while nxt < k - 1 and cum[s, nxt] <= x:
                nxt += 1
            s = nxt
            acc += quality[s]
        out[c] = acc
    return out
