"""Value-function approximation of the worst-context probability of correct selection.

For a context ``j`` with current leader ``b`` the approximate PCS of one
clustering is the smallest squared mean gap over summed posterior variances
between ``b`` and any challenger.  ``V`` averages this over the membership
posterior and takes the worst context; ``W`` takes the worst clustering
instead of the average.  One-step versions evaluate both after a
hypothetical extra sample with posterior means held fixed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels as _k
from .core import VAR_FLOOR, SamplingState
from .mixture import PosteriorState

APPROX_BUDGET = 10**6
_TINY = 1e-300
_NO_COUNTS = np.zeros((1, 1), dtype=np.int64)
_NO_VAR = np.ones((1, 1))


@dataclass
class RankingView:
    """Per-context design order under the MAP clusters.

    ``order[j]`` lists designs from best to worst in context ``j``.
    """

    order: np.ndarray
    k_star: np.ndarray
    l_star: np.ndarray

    @property
    def best(self) -> np.ndarray:
        return self.order[:, 0]


@dataclass
class OneStepView:
    """Look-ahead quantities after one more sample of cell (r, q)."""

    r: int
    q: int
    cond_var: np.ndarray
    sigma2: np.ndarray
    z_hat: np.ndarray
    v_hat: np.ndarray


def map_means(posterior: PosteriorState) -> np.ndarray:
    """Posterior mean of every cell under its MAP cluster pair, shape (n, m)."""
    k, l = posterior.map_clusters()
    n, m = k.size, l.size
    return posterior.cond_mean[np.arange(n)[:, None], np.arange(m)[None, :], k[:, None], l[None, :]]


def ranking_view(posterior: PosteriorState) -> RankingView:
    return RankingView(*_k.ranking(posterior.cond_mean, posterior.z_hat, posterior.v_hat))


def apcs(ranking: RankingView, posterior: PosteriorState, clustering, l: int, j: int,
         cond_var: np.ndarray | None = None, floor: float = VAR_FLOOR) -> float:
    """Approximate PCS of context ``j`` for design labels ``clustering`` and context label ``l``."""
    cm = posterior.cond_mean
    cv = posterior.cond_var if cond_var is None else cond_var
    ks = np.asarray(clustering)
    b = ranking.order[j, 0]
    ch = ranking.order[j, 1:]
    gap = cm[b, j, ks[b], l] - cm[ch, j, ks[ch], l]
    den = np.maximum(cv[b, j, ks[b], l] + cv[ch, j, ks[ch], l], floor)
    return float(np.min(gap**2 / den))


def _exact_affordable(posterior: PosteriorState, approx_budget: int) -> bool:
    """Whether the exact expectation fits the budget (terms per context)."""
    n = posterior.z_hat.shape[0]
    K, L = posterior.params.K, posterior.params.L
    return L * K * (n - 1) * K <= approx_budget


def _kernel_args(posterior: PosteriorState, counts, plug_var, ranking: RankingView):
    return (posterior.cond_mean, posterior.cond_var, np.ascontiguousarray(posterior.pair_weights()),
            posterior.z_hat, posterior.v_hat, posterior.params.mu, posterior.params.sigma2,
            counts, plug_var, ranking.order,
            ranking.k_star, ranking.l_star)


def expected_min(values, probs) -> float:
    """E[min_a X_a] for independent X_a taking ``values[a, k]`` with probability ``probs[a, k]``.

    Evaluated as the integral of the joint survival function over the sorted
    support points, so the cost is polynomial rather than exponential in the
    number of variables.
    """
    return float(_k.expected_min(np.asarray(values, dtype=float), np.asarray(probs, dtype=float)))


def value_v(posterior: PosteriorState, ranking: RankingView | None = None,
            approx_budget: int = APPROX_BUDGET, floor: float = VAR_FLOOR) -> float:
    """Worst-context expected APCS under the current posterior."""
    ranking = ranking_view(posterior) if ranking is None else ranking
    # Counts and plug-in variances only enter look-ahead terms, unused here.
    args = _kernel_args(posterior, _NO_COUNTS, _NO_VAR, ranking)
    val, _ = _k.look_ahead(*args, -1, -1, floor, True, False,
                           _exact_affordable(posterior, approx_budget))
    return float(val)


def _as_index(x):
    return np.atleast_1d(np.asarray(x, dtype=np.int64))


def one_step_variances_batch(posterior: PosteriorState, state: SamplingState, plug_var,
                             rs, qs, ranking: RankingView | None = None):
    """Look-ahead variances for candidate cells ``(rs[c], qs[c])``.

    Returns ``(cond_var, sigma2)`` with shapes (C, n, m, K, L) and (C, K, L).
    The cluster variance drops by the sampled cell's weighted variance
    reduction; the sampled cell then uses one more replication, cells in the
    sampled cell's MAP cluster pair use the new cluster variance, and all
    other cells keep their variances.
    """
    ranking = ranking_view(posterior) if ranking is None else ranking
    rs, qs = _as_index(rs), _as_index(qs)
    C = rs.size
    cv = posterior.cond_var
    s2 = posterior.params.sigma2
    t = state.counts.astype(float)
    w = posterior.pair_weights()
    wsum = np.maximum(w.sum(axis=(0, 1)), _TINY)
    pv_c = plug_var[rs, qs][:, None, None]
    t_c = t[rs, qs][:, None, None]
    shrunk = 1.0 / ((t_c + 1.0) / pv_c + 1.0 / s2)
    s2_new = s2 - w[rs, qs] * (cv[rs, qs] - shrunk) / wsum
    s2_new = np.minimum(np.maximum(s2_new, _TINY), s2)
    out = np.repeat(cv[None], C, axis=0)
    kr = ranking.k_star[rs]
    lq = ranking.l_star[qs]
    cc = np.arange(C)
    shared = s2_new[cc, kr, lq][:, None, None]
    out[cc, :, :, kr, lq] = 1.0 / (t[None] / plug_var[None] + 1.0 / shared)
    out[cc, rs, qs] = 1.0 / ((t_c + 1.0) / pv_c + 1.0 / s2_new)
    return out, s2_new


def one_step_membership_batch(posterior: PosteriorState, plug_var, rs, qs,
                              ranking: RankingView | None = None):
    """Look-ahead membership posteriors for candidate cells, shapes (C, n, K) and (C, m, L).

    Row ``r`` of ``z_hat`` is reweighted by how far the cell's conditional
    mean sits from each design cluster's mean (context cluster fixed at its
    MAP label), scaled by the squared shrinkage factor; row ``q`` of
    ``v_hat`` likewise with the design cluster fixed.
    """
    ranking = ranking_view(posterior) if ranking is None else ranking
    rs, qs = _as_index(rs), _as_index(qs)
    C = rs.size
    cc = np.arange(C)
    cm, cv = posterior.cond_mean[rs, qs], posterior.cond_var[rs, qs]  # (C, K, L)
    mu, s2 = posterior.params.mu, posterior.params.sigma2
    pv = plug_var[rs, qs][:, None]
    lq = ranking.l_star[qs]
    kr = ranking.k_star[rs]
    ez = -((cm[cc, :, lq] - mu[:, lq].T) ** 2) * cv[cc, :, lq] ** 2 / (2.0 * pv * s2[:, lq].T ** 2)
    ev = -((cm[cc, kr, :] - mu[kr]) ** 2) * cv[cc, kr, :] ** 2 / (2.0 * pv * s2[kr] ** 2)
    z = np.repeat(posterior.z_hat[None], C, axis=0)
    v = np.repeat(posterior.v_hat[None], C, axis=0)
    z[cc, rs] = _reweight(posterior.z_hat[rs], ez)
    v[cc, qs] = _reweight(posterior.v_hat[qs], ev)
    return z, v


def _reweight(prob, log_factor):
    with np.errstate(divide="ignore"):
        logits = np.log(prob) + log_factor
    logits -= logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    return w / w.sum(axis=1, keepdims=True)


def one_step_variances(posterior, state, plug_var, r: int, q: int):
    cv, s2 = one_step_variances_batch(posterior, state, plug_var, [r], [q])
    return cv[0], s2[0]


def one_step_membership(posterior, plug_var, r: int, q: int):
    z, v = one_step_membership_batch(posterior, plug_var, [r], [q])
    return z[0], v[0]


def one_step_view(posterior, state, plug_var, r: int, q: int) -> OneStepView:
    cv, s2 = one_step_variances(posterior, state, plug_var, r, q)
    z, v = one_step_membership(posterior, plug_var, r, q)
    return OneStepView(r, q, cv, s2, z, v)


def scan_candidates(posterior: PosteriorState, state: SamplingState, plug_var,
                    want_v: bool = True, want_w: bool = True,
                    approx_budget: int = APPROX_BUDGET, floor: float = VAR_FLOOR,
                    ranking: RankingView | None = None):
    """One-step V and W for every cell, each an (n, m) array (NaN when not requested)."""
    ranking = ranking_view(posterior) if ranking is None else ranking
    plug_var = np.asarray(plug_var, dtype=float)
    v, w = _k.scan(*_kernel_args(posterior, state.counts, plug_var, ranking), floor, want_v, want_w,
                   _exact_affordable(posterior, approx_budget))
    if not want_v:
        v[:] = np.nan
    if not want_w:
        w[:] = np.nan
    return v, w


def value_v_onestep(posterior, state, plug_var, r: int, q: int,
                    approx_budget: int = APPROX_BUDGET, floor: float = VAR_FLOOR) -> float:
    _check_cell(state, r, q)
    ranking = ranking_view(posterior)
    args = _kernel_args(posterior, state.counts, np.asarray(plug_var, dtype=float), ranking)
    val, _ = _k.look_ahead(*args, r, q, floor, True, False,
                           _exact_affordable(posterior, approx_budget))
    return float(val)


def value_w_onestep(posterior, state, plug_var, r: int, q: int,
                    floor: float = VAR_FLOOR) -> float:
    _check_cell(state, r, q)
    ranking = ranking_view(posterior)
    args = _kernel_args(posterior, state.counts, np.asarray(plug_var, dtype=float), ranking)
    _, val = _k.look_ahead(*args, r, q, floor, False, True, True)
    return float(val)


def _check_cell(state: SamplingState, r: int, q: int) -> None:
    n, m = state.shape
    if not (0 <= r < n and 0 <= q < m):
        raise IndexError(f"cell ({r}, {q}) outside a {n} x {m} problem")
