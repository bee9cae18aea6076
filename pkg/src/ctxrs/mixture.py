"""Gaussian-mixture prior over cell means, fitted by empirical-Bayes EM.

Designs fall into ``K`` clusters and contexts into ``L`` clusters.  Given the
cluster pair ``(k, l)`` of a cell, its unknown mean has a normal prior
``N(mu[k, l], sigma2[k, l])`` and observations are normal with a plug-in
variance, so every conditional quantity is conjugate.  Cluster memberships
are marginalised exactly by enumerating the smaller of the two label spaces,
or approximated by a mean-field factorisation when that is too large.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import xlogy
from sklearn.cluster import kmeans_plusplus

from . import _kernels as _k
from .core import SamplingState

LOG_2PI = np.log(2.0 * np.pi)
EXACT_BUDGET = 10**7
EM_TOL = 1e-6
EM_MAX_ITER = 200
# Cluster variances are floored at this fraction of the pooled sample variance.
CLUSTER_FLOOR_REL = 1e-3
_TINY = float(np.finfo(float).tiny)


@dataclass
class MixtureParams:
    tau: np.ndarray
    omega: np.ndarray
    mu: np.ndarray
    sigma2: np.ndarray

    def __post_init__(self):
        self.tau = np.asarray(self.tau, dtype=float)
        self.omega = np.asarray(self.omega, dtype=float)
        self.mu = np.asarray(self.mu, dtype=float).reshape(self.tau.size, self.omega.size)
        self.sigma2 = np.asarray(self.sigma2, dtype=float).reshape(self.mu.shape)
        if not self.sigma2.min() > 0:
            raise ValueError("cluster variances must be positive")

    @property
    def K(self) -> int:
        return self.tau.size

    @property
    def L(self) -> int:
        return self.omega.size

    def relabel(self, design_perm, context_perm) -> "MixtureParams":
        """Parameters with cluster ``k`` renamed ``design_perm[k]`` (same for contexts)."""
        dinv = np.argsort(design_perm)
        cinv = np.argsort(context_perm)
        return MixtureParams(
            self.tau[dinv], self.omega[cinv],
            self.mu[np.ix_(dinv, cinv)], self.sigma2[np.ix_(dinv, cinv)],
        )

    def to_dict(self) -> dict:
        return {
            "K": self.K,
            "L": self.L,
            "tau": self.tau.tolist(),
            "omega": self.omega.tolist(),
            "mu": self.mu.tolist(),
            "sigma2": self.sigma2.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MixtureParams":
        params = cls(data["tau"], data["omega"], data["mu"], data["sigma2"])
        if (params.K, params.L) != (data["K"], data["L"]):
            raise ValueError("declared cluster counts do not match the arrays")
        return params


@dataclass
class PosteriorState:
    """Cluster-membership posteriors and conditional cell posteriors.

    ``cond_mean[i, j, k, l]`` and ``cond_var[i, j, k, l]`` describe the
    posterior of cell (i, j) given that design ``i`` is in cluster ``k`` and
    context ``j`` in cluster ``l``.  ``joint`` holds the pairwise membership
    probabilities P(k_i = k, l_j = l) when the backend provides them.
    """

    z_hat: np.ndarray
    v_hat: np.ndarray
    cond_mean: np.ndarray
    cond_var: np.ndarray
    params: MixtureParams
    log_likelihood: float
    backend: str = "exact"
    denominator: float = float("nan")
    converged: bool = True
    joint: np.ndarray | None = None

    def pair_weights(self) -> np.ndarray:
        if self.joint is not None:
            return self.joint
        return self.z_hat[:, None, :, None] * self.v_hat[None, :, None, :]

    def map_clusters(self) -> tuple[np.ndarray, np.ndarray]:
        return np.argmax(self.z_hat, axis=1), np.argmax(self.v_hat, axis=1)

    def to_dict(self) -> dict:
        return {"z_hat": self.z_hat.tolist(), "v_hat": self.v_hat.tolist()}


def conditional_posterior(count, total, plug_var, prior_mean, prior_var):
    """Normal-normal update of a cell mean; arguments broadcast."""
    plug_var = np.asarray(plug_var, dtype=float)
    prior_var = np.asarray(prior_var, dtype=float)
    if np.any(plug_var <= 0) or np.any(prior_var <= 0):
        raise ValueError("variances must be positive")
    var = 1.0 / (count / plug_var + 1.0 / prior_var)
    mean = var * (total / plug_var + prior_mean / prior_var)
    return mean, var


def log_evidence(count, total, sumsq, plug_var, prior_mean, prior_var):
    """Log marginal density of a cell's observations with its mean integrated out.

    Written as the Gaussian likelihood of the residuals about the sample mean
    times the predictive density of the sample mean, which avoids cancelling
    large terms when counts are high.  Arguments broadcast.
    """
    count = np.asarray(count, dtype=float)
    total = np.asarray(total, dtype=float)
    plug_var = np.asarray(plug_var, dtype=float)
    prior_var = np.asarray(prior_var, dtype=float)
    if np.any(plug_var <= 0) or np.any(prior_var <= 0):
        raise ValueError("variances must be positive")
    safe = np.maximum(count, 1.0)
    resid = np.maximum(np.asarray(sumsq) - total * total / safe, 0.0)
    post_var = 1.0 / (count / plug_var + 1.0 / prior_var)
    gap2 = (total - count * prior_mean) ** 2 / (safe * (plug_var + count * prior_var))
    out = (-0.5 * count * (LOG_2PI + np.log(plug_var)) - 0.5 * resid / plug_var
           + 0.5 * np.log(post_var / prior_var) - 0.5 * gap2)
    return np.where(count > 0, out, 0.0)


def cell_tables(state: SamplingState, plug_var, params: MixtureParams):
    """Log evidence and conditional posterior tables, each of shape (n, m, K, L)."""
    return _k.cell_tables(state.counts, state.sums, state.sumsq,
                          np.asarray(plug_var, dtype=float), params.mu, params.sigma2)


def log_evidence_table(state: SamplingState, plug_var, params: MixtureParams) -> np.ndarray:
    return cell_tables(state, plug_var, params)[0]


def conditional_tables(state: SamplingState, plug_var, params: MixtureParams):
    _, cm, cv = cell_tables(state, plug_var, params)
    return cm, cv


def exact_cost(n: int, m: int, K: int, L: int) -> int:
    """Number of elementary terms of the cheaper exact enumeration."""
    return min(n * K * m * L**m, m * L * n * K**n)


def _safe_log(p):
    # Zero probabilities map to a large negative number instead of -inf.
    return np.log(np.maximum(p, 1e-300))


def enumerate_memberships(logc, log_tau, log_omega, with_joint: bool = True):
    """Exact membership posteriors from a log-evidence table.

    For every assignment of context labels the design labels factorise over
    designs, so the sum over design labels is a product of per-design
    log-sum-exps.  Roles are swapped when enumerating design labels is
    cheaper.  Weights are accumulated relative to a running maximum.

    Returns ``(z, v, log_likelihood, denominator, joint)`` where
    ``denominator`` is the sum over all complete clusterings of the joint
    weight divided by the largest one, so it lies in [1, K**n * L**m].
    """
    n, m, K, L = logc.shape
    if m * L * n * K**n < n * K * m * L**m:
        v, z, ll, den, joint = enumerate_memberships(
            logc.transpose(1, 0, 3, 2), log_omega, log_tau, with_joint)
        return z, v, ll, den, None if joint is None else joint.transpose(1, 0, 3, 2)
    z, v, joint, ll, den = _k.enumerate_context_labels(
        np.ascontiguousarray(logc), np.ascontiguousarray(log_tau),
        np.ascontiguousarray(log_omega), with_joint)
    return z, v, ll, den, joint if with_joint else None


def e_step_exact(state: SamplingState, plug_var, params: MixtureParams,
                 budget: int = EXACT_BUDGET, with_joint: bool = True) -> PosteriorState:
    n, m = state.shape
    if exact_cost(n, m, params.K, params.L) > budget:
        raise ValueError("exact enumeration exceeds the budget; use the mean-field backend")
    logc, cm, cv = cell_tables(state, plug_var, params)
    z, v, ll, den, joint = enumerate_memberships(
        logc, _safe_log(params.tau), _safe_log(params.omega), with_joint)
    return PosteriorState(z, v, cm, cv, params, ll, "exact", den, True, joint)


def _softmax_rows(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(shifted)
    return p / p.sum(axis=1, keepdims=True)


def meanfield_memberships(logc, log_tau, log_omega, z0=None, v0=None,
                          max_iter: int = 500, tol: float = 1e-8):
    """Coordinate-ascent factorised posterior ``q(k) q(l)``.

    Returns ``(z, v, elbo, converged)``.
    """
    n, m, K, L = logc.shape
    z = np.full((n, K), 1.0 / K) if z0 is None else z0.copy()
    v = np.full((m, L), 1.0 / L) if v0 is None else v0.copy()
    converged = False
    for _ in range(max_iter):
        z_new = _softmax_rows(log_tau + np.einsum("jl,ijkl->ik", v, logc))
        v_new = _softmax_rows(log_omega + np.einsum("ik,ijkl->jl", z_new, logc))
        change = max(np.abs(z_new - z).max(), np.abs(v_new - v).max())
        z, v = z_new, v_new
        if change < tol:
            converged = True
            break
    entropy = -xlogy(z, z).sum() - xlogy(v, v).sum()
    with np.errstate(invalid="ignore"):
        prior = np.nansum(z * log_tau) + np.nansum(v * log_omega)
    elbo = float(np.einsum("ik,jl,ijkl->", z, v, logc) + prior + entropy)
    return z, v, elbo, converged


def e_step_meanfield(state: SamplingState, plug_var, params: MixtureParams,
                     prev: PosteriorState | None = None, max_iter: int = 500,
                     tol: float = 1e-8) -> PosteriorState:
    """Mean-field E-step; ``log_likelihood`` holds the evidence lower bound."""
    logc, cm, cv = cell_tables(state, plug_var, params)
    z0 = v0 = None
    if prev is not None and prev.z_hat.shape[1] == params.K and prev.v_hat.shape[1] == params.L:
        z0, v0 = prev.z_hat, prev.v_hat
    z, v, elbo, ok = meanfield_memberships(
        logc, _safe_log(params.tau), _safe_log(params.omega), z0, v0, max_iter, tol)
    return PosteriorState(z, v, cm, cv, params, elbo, "meanfield", float("nan"), ok)


def e_step(state: SamplingState, plug_var, params: MixtureParams,
           prev: PosteriorState | None = None, budget: int = EXACT_BUDGET,
           backend: str = "auto") -> PosteriorState:
    """Dispatch to the exact backend when affordable, mean-field otherwise."""
    n, m = state.shape
    if backend == "auto":
        backend = "exact" if exact_cost(n, m, params.K, params.L) <= budget else "meanfield"
    if backend == "exact":
        return e_step_exact(state, plug_var, params, budget=max(budget, 1))
    if backend == "meanfield":
        return e_step_meanfield(state, plug_var, params, prev)
    raise ValueError(f"unknown E-step backend {backend!r}")


def m_step(posterior: PosteriorState, var_floor: float = 0.0) -> MixtureParams:
    """Maximise the expected complete-data log-likelihood.

    Cluster pairs are weighted by the pairwise membership probabilities
    (the product ``z v`` for the mean-field backend).  A cluster pair with
    no weight leaves the objective flat in its parameters, so it keeps its
    previous mean and variance.
    """
    w = np.ascontiguousarray(posterior.pair_weights())
    prev = posterior.params
    mu, sigma2 = _k.weighted_moments(w, posterior.cond_mean, posterior.cond_var,
                                     prev.mu, prev.sigma2, max(var_floor, _TINY))
    tau = _k.normalized_column_means(posterior.z_hat)
    omega = _k.normalized_column_means(posterior.v_hat)
    return MixtureParams(tau, omega, mu, sigma2)


def cluster_var_floor(state: SamplingState, rel: float = CLUSTER_FLOOR_REL) -> float:
    """Floor on cluster variances: ``rel`` times the pooled sample variance.

    Besides the numerical guard, the floor stops empirical-Bayes shrinkage
    from collapsing a small cluster whose spread is below the sampling
    noise, which would freeze its cells at a common posterior mean.
    """
    T = state.counts.sum()
    if T < 2:
        return 1e-12
    S = state.sums.sum()
    pooled = (state.sumsq.sum() - S * S / T) / (T - 1)
    return max(rel * pooled, 1e-12)


def _em_loop(posterior_of, params, prev, max_iter, tol, var_floor, trace):
    post = posterior_of(params, prev)
    if trace is not None:
        trace.append(post.log_likelihood)
    for _ in range(max_iter):
        new_params = m_step(post, var_floor)
        new_post = posterior_of(new_params, post)
        gain = new_post.log_likelihood - post.log_likelihood
        post = new_post
        if trace is not None:
            trace.append(post.log_likelihood)
        if gain < tol:
            break
    return post


def run_em(state: SamplingState, plug_var, K: int, L: int, init: MixtureParams,
           max_iter: int = EM_MAX_ITER, tol: float = EM_TOL, budget: int = EXACT_BUDGET,
           prev: PosteriorState | None = None, trace: list | None = None,
           backend: str = "auto", floor_rel: float = CLUSTER_FLOOR_REL):
    """Alternate E and M steps from ``init``.

    Stops once the log-likelihood gain drops below ``tol`` or after
    ``max_iter`` M-steps.  Returns ``(params, posterior, log_likelihood)``,
    where ``posterior`` is conditioned on ``params``.  Each evaluated
    log-likelihood is appended to ``trace`` when given.
    """
    if max_iter < 0:
        raise ValueError("max_iter must be nonnegative")
    if (init.K, init.L) != (K, L):
        raise ValueError("initial parameters have the wrong cluster counts")
    floor = cluster_var_floor(state, floor_rel)
    n, m = state.shape
    if backend == "auto":
        backend = "exact" if exact_cost(n, m, K, L) <= budget else "meanfield"
    if backend == "exact":
        if exact_cost(n, m, K, L) > max(budget, 1):
            raise ValueError("exact enumeration exceeds the budget; use the mean-field backend")
        tau, omega, mu, sigma2, z, v, joint, cm, cv, ll, den, lls = _k.em_exact(
            state.counts, state.sums, state.sumsq, np.asarray(plug_var, dtype=float),
            init.tau, init.omega, init.mu, init.sigma2, max_iter, tol,
            max(floor, _TINY))
        if trace is not None:
            trace.extend(lls.tolist())
        params = MixtureParams(tau, omega, mu, sigma2)
        post = PosteriorState(z, v, cm, cv, params, ll, "exact", den, True, joint)
        return params, post, ll

    def posterior_of(params, prev_post):
        return e_step(state, plug_var, params, prev_post, budget, backend)

    post = _em_loop(posterior_of, init, prev, max_iter, tol, floor, trace)
    return post.params, post, post.log_likelihood


def _kmeans_labels(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    if k == 1:
        return np.zeros(points.shape[0], dtype=int)
    centers, _ = kmeans_plusplus(points, k, random_state=int(rng.integers(2**31 - 1)))
    dist = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    return np.argmin(dist, axis=1)


def init_from_matrix(values: np.ndarray, noise: np.ndarray, K: int, L: int,
                     rng: np.random.Generator, var_floor: float = 1e-12) -> MixtureParams:
    """Block-average starting point from k-means++ seeded row/column groups.

    ``values`` holds one estimate per cell and ``noise`` its variance.
    """
    n, m = values.shape
    rows = _kmeans_labels(values, K, rng)
    cols = _kmeans_labels(values.T, L, rng)
    spread = max(float(values.var()), var_floor)
    mu = np.full((K, L), float(values.mean()))
    sigma2 = np.full((K, L), spread)
    for k in range(K):
        for l in range(L):
            block = values[np.ix_(rows == k, cols == l)]
            if block.size:
                mu[k, l] = block.mean()
                mean_noise = float(noise[np.ix_(rows == k, cols == l)].mean())
                sigma2[k, l] = max(float(block.var()) if block.size > 1 else spread,
                                   mean_noise, var_floor)
    tau = (np.bincount(rows, minlength=K) + 1.0) / (n + K)
    omega = (np.bincount(cols, minlength=L) + 1.0) / (m + L)
    return MixtureParams(tau, omega, mu, sigma2)


def init_params(state: SamplingState, plug_var, K: int, L: int,
                rng: np.random.Generator, floor_rel: float = CLUSTER_FLOOR_REL) -> MixtureParams:
    """Starting parameters seeded on flat-prior cell estimates (sample means)."""
    t = np.maximum(state.counts, 1)
    return init_from_matrix(state.sums / t, plug_var / t, K, L, rng,
                            cluster_var_floor(state, floor_rel))


def bic_score(log_likelihood: float, K: int, L: int, n: int, m: int) -> float:
    return 2.0 * log_likelihood - (2 * K * L + K + L) * np.log(n * m)


def fit_best(state: SamplingState, plug_var, K: int, L: int, restarts: int,
             rng: np.random.Generator, max_iter: int = EM_MAX_ITER, tol: float = EM_TOL,
             budget: int = EXACT_BUDGET, floor_rel: float = CLUSTER_FLOOR_REL):
    """Best-of-restarts EM fit for fixed cluster counts."""
    best = None
    tries = 1 if K == L == 1 else 1 + max(restarts, 0)
    for _ in range(tries):
        init = init_params(state, plug_var, K, L, rng, floor_rel)
        fit = run_em(state, plug_var, K, L, init, max_iter, tol, budget, floor_rel=floor_rel)
        if best is None or fit[2] > best[2]:
            best = fit
    return best


def min_pair_size(posterior: PosteriorState) -> int:
    """Fewest cells in any occupied cluster pair of the MAP clustering."""
    k, l = posterior.map_clusters()
    K, L = posterior.params.K, posterior.params.L
    sizes = np.outer(np.bincount(k, minlength=K), np.bincount(l, minlength=L))
    return int(sizes[sizes > 0].min())


def bic_select(state: SamplingState, plug_var, K_max: int = 4, L_max: int = 4,
               restarts: int = 5, rng: np.random.Generator | None = None,
               max_iter: int = EM_MAX_ITER, tol: float = EM_TOL, budget: int = EXACT_BUDGET,
               min_pair_cells: int = 2, floor_rel: float = CLUSTER_FLOOR_REL):
    """Pick cluster counts by BIC over ``1..K_max`` x ``1..L_max``.

    Counts larger than the number of designs (contexts) are skipped, and so
    are fits whose MAP clustering has an occupied cluster pair with fewer
    than ``min_pair_cells`` cells: the prior variance of a one-cell cluster
    has its likelihood maximum at zero.  ``K = L = 1`` is always admissible.
    Returns ``(K, L, params, posterior)``.
    """
    if K_max < 1 or L_max < 1:
        raise ValueError("K_max and L_max must be at least 1")
    rng = np.random.default_rng(0) if rng is None else rng
    n, m = state.shape
    best = None
    for K in range(1, min(K_max, n) + 1):
        for L in range(1, min(L_max, m) + 1):
            params, post, ll = fit_best(state, plug_var, K, L, restarts, rng, max_iter, tol, budget,
                                         floor_rel)
            if K * L > 1 and min_pair_size(post) < min_pair_cells:
                continue
            score = bic_score(ll, K, L, n, m)
            if best is None or score > best[0]:
                best = (score, K, L, params, post)
    return best[1], best[2], best[3], best[4]


def limit_posterior(true_means: np.ndarray, params: MixtureParams) -> PosteriorState:
    """Membership posterior when every cell mean is observed exactly."""
    y = np.asarray(true_means, dtype=float)[:, :, None, None]
    logc = -0.5 * (LOG_2PI + np.log(params.sigma2) + (y - params.mu) ** 2 / params.sigma2)
    z, v, ll, den, joint = enumerate_memberships(
        logc, _safe_log(params.tau), _safe_log(params.omega))
    cm = np.broadcast_to(y, logc.shape).copy()
    return PosteriorState(z, v, cm, np.zeros_like(cm), params, ll, "exact", den, True, joint)


def limit_em(true_means, K: int, L: int, init: MixtureParams | None = None,
             max_iter: int = EM_MAX_ITER, tol: float = EM_TOL,
             rng: np.random.Generator | None = None):
    """Classic mixture EM on exactly known cell means.

    Returns ``(params, z_hat, v_hat)``.
    """
    y = np.asarray(true_means, dtype=float)
    if init is None:
        rng = np.random.default_rng(0) if rng is None else rng
        init = init_from_matrix(y, np.zeros_like(y), K, L, rng)
    floor = max(1e-6 * float(y.var()), 1e-12)
    post = _em_loop(lambda p, _: limit_posterior(y, p), init, None, max_iter, tol, floor, None)
    return post.params, post.z_hat, post.v_hat
