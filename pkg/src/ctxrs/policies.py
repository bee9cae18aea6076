"""Sequential sampling policies: DSCO and the EA, IZ, C-OCBA and SUCB baselines.

Every sequential policy starts with ``n0`` draws per cell and then asks
``next_allocation`` for one cell at a time.  ``streams(i, j)`` returns the
random generator of cell (i, j) for the current macro-replication.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .core import (VAR_FLOOR, SamplingState, plug_in_variance, record_observation,
                   refresh_plug_in, sample_means)
from .mixture import CLUSTER_FLOOR_REL, EM_MAX_ITER, EM_TOL, EXACT_BUDGET, bic_select, run_em
from .vfa import APPROX_BUDGET, map_means, ranking_view, scan_candidates, value_v

POLICIES = ("dsco", "ea", "iz", "cocba", "sucb")


@dataclass
class Allocation:
    i: int
    j: int
    rule: str = ""
    value: float = float("nan")

    @property
    def cell(self) -> tuple[int, int]:
        return self.i, self.j


def _argmax_cell(values: np.ndarray) -> tuple[int, int]:
    """Largest entry, lowest (i, j) in lexicographic order on ties."""
    flat = int(np.argmax(values))
    return divmod(flat, values.shape[1])


def _argmax_first(x: np.ndarray) -> np.ndarray:
    return np.argmax(x, axis=0)


class Policy:
    """Shared bookkeeping for sequential policies."""

    name = "policy"

    def __init__(self, n0: int = 5, var_floor: float = VAR_FLOOR):
        if n0 < 1:
            raise ValueError("n0 must be at least 1")
        self.n0 = n0
        self.var_floor = var_floor
        self.state: SamplingState | None = None
        self.plug_var: np.ndarray | None = None
        self.trace: list[tuple[int, int]] = []

    def initialize(self, problem, streams) -> None:
        n, m = problem.n, problem.m
        self.state = SamplingState.empty(n, m)
        for i in range(n):
            for j in range(m):
                for y in np.atleast_1d(problem.simulate(i, j, streams(i, j), size=self.n0)):
                    record_observation(self.state, i, j, float(y))
        if self.n0 >= 2:
            self.plug_var = plug_in_variance(self.state, self.var_floor)

    def next_allocation(self) -> Allocation:
        raise NotImplementedError

    def observe(self, i: int, j: int, y: float) -> None:
        record_observation(self.state, i, j, y)
        if self.plug_var is not None:
            refresh_plug_in(self.plug_var, self.state, i, j, self.var_floor)
        self.trace.append((i, j))

    def step(self, problem, streams) -> Allocation:
        alloc = self.next_allocation()
        y = problem.simulate(alloc.i, alloc.j, streams(alloc.i, alloc.j))
        self.observe(alloc.i, alloc.j, y)
        return alloc

    def select(self) -> np.ndarray:
        """Estimated best design per context: sample-mean argmax."""
        return _argmax_first(sample_means(self.state))

    def diagnostics(self) -> dict:
        return {}


class EqualAllocation(Policy):
    """Round-robin over cells in lexicographic order."""

    name = "ea"

    def next_allocation(self) -> Allocation:
        n, m = self.state.shape
        i, j = divmod(self.state.total % (n * m), m)
        return Allocation(i, j, "round-robin")


class COCBA(Policy):
    """Sequential balancing of the large-deviations optimality conditions.

    For every context the leader and the rate terms
    ``G_ij = gap^2 / (s_b^2 / t_b + s_i^2 / t_i)`` are computed from sample
    statistics.  In the context with the smallest rate, the leader is sampled
    if ``t_b^2 / s_b^2`` falls short of the challengers' ``sum t_i^2 / s_i^2``;
    otherwise the challenger with the smallest rate is sampled.
    """

    name = "cocba"

    def __init__(self, n0: int = 5, var_floor: float = VAR_FLOOR):
        if n0 < 2:
            raise ValueError("C-OCBA needs n0 >= 2 for sample variances")
        super().__init__(n0, var_floor)

    def next_allocation(self) -> Allocation:
        t = self.state.counts.astype(float)
        means = self.state.sums / t
        var = self.plug_var
        m = means.shape[1]
        cols = np.arange(m)
        best = _argmax_first(means)
        gap = means[best, cols] - means
        rate = gap**2 / (var[best, cols] / t[best, cols] + var / t)
        rate[best, cols] = np.inf
        per_context = rate.min(axis=0)
        j = int(np.argmin(per_context))
        b = best[j]
        lead = t[b, j] ** 2 / var[b, j]
        rivals = t[:, j] ** 2 / var[:, j]
        if lead < rivals.sum() - rivals[b]:
            return Allocation(int(b), j, "leader", float(per_context[j]))
        return Allocation(int(np.argmin(rate[:, j])), j, "challenger", float(per_context[j]))


class SUCB(Policy):
    """Linear-model UCB rule that samples the weakest design of the most promising context."""

    name = "sucb"

    def __init__(self, contexts: np.ndarray, gamma: float = 1.0, n0: int = 1,
                 var_floor: float = VAR_FLOOR):
        if gamma < 0:
            raise ValueError("gamma must be nonnegative")
        super().__init__(n0, var_floor)
        X = np.atleast_2d(np.asarray(contexts, dtype=float))
        if X.size == 0:
            raise ValueError("context matrix is empty")
        self.contexts = X
        self.gamma = gamma
        self.A = np.eye(X.shape[1]) + X.T @ X
        self.A_inv = np.linalg.inv(self.A)
        self.bonus = np.sqrt(np.einsum("jd,de,je->j", X, self.A_inv, X))

    def scores(self) -> np.ndarray:
        theta = sample_means(self.state) @ self.contexts @ self.A_inv
        return theta @ self.contexts.T + self.gamma * self.bonus

    def next_allocation(self) -> Allocation:
        score = self.scores()
        floor = score.min(axis=0)
        j = int(np.argmax(floor))
        return Allocation(int(np.argmin(score[:, j])), j, "ucb", float(floor[j]))


@dataclass
class DSCOConfig:
    n0: int = 5
    K_max: int = 4
    L_max: int = 4
    restarts: int = 5
    em_iters: int = 3
    full_em_every: int = 100
    em_tol: float = EM_TOL
    em_max_iter: int = EM_MAX_ITER
    exact_budget: int = EXACT_BUDGET
    approx_budget: int = APPROX_BUDGET
    var_floor: float = VAR_FLOOR
    cluster_floor_rel: float = CLUSTER_FLOOR_REL


@dataclass
class DSCOStats:
    v_rule: int = 0
    w_rule: int = 0
    w_exits: int = 0
    fallback_entries: int = 0
    records: list = field(default_factory=list)


class DSCO(Policy):
    """Allocate to the cell whose extra sample most raises the look-ahead value.

    When no cell raises ``V`` the policy switches to the ``W`` criterion and
    keeps using it until the chosen cell's look-ahead ``W`` exceeds the
    current ``V``.
    """

    name = "dsco"

    def __init__(self, config: DSCOConfig | None = None, rng: np.random.Generator | None = None,
                 dump_path: str | None = None):
        config = DSCOConfig() if config is None else config
        if config.n0 < 2:
            raise ValueError("DSCO needs n0 >= 2 for plug-in variances")
        super().__init__(config.n0, config.var_floor)
        self.config = config
        self.rng = np.random.default_rng(0) if rng is None else rng
        self.posterior = None
        self.K = self.L = None
        self.w_mode = False
        self.stats = DSCOStats()
        self._since_full = 0
        self._dump = None
        if dump_path is not None:
            self._dump_file = open(dump_path, "w", newline="")
            self._dump = csv.writer(self._dump_file)
            self._dump.writerow(["t", "r", "q", "V", "W"])

    def initialize(self, problem, streams) -> None:
        super().initialize(problem, streams)
        cfg = self.config
        self.K, self.L, _, self.posterior = bic_select(
            self.state, self.plug_var, cfg.K_max, cfg.L_max, cfg.restarts, self.rng,
            cfg.em_max_iter, cfg.em_tol, cfg.exact_budget, floor_rel=cfg.cluster_floor_rel)

    @property
    def params(self):
        return self.posterior.params

    def current_value(self, ranking=None) -> float:
        return value_v(self.posterior, ranking, self.config.approx_budget, self.var_floor)

    def next_allocation(self) -> Allocation:
        cfg = self.config
        ranking = ranking_view(self.posterior)
        v_now = self.current_value(ranking)
        if not self.w_mode:
            v_next, w_next = scan_candidates(self.posterior, self.state, self.plug_var,
                                             True, self._dump is not None,
                                             cfg.approx_budget, self.var_floor, ranking)
            self._write_dump(v_next, w_next)
            r, q = _argmax_cell(v_next)
            if v_next[r, q] > v_now:
                self.stats.v_rule += 1
                return Allocation(r, q, "V", float(v_next[r, q]))
            self.w_mode = True
            self.stats.fallback_entries += 1
        _, w_next = scan_candidates(self.posterior, self.state, self.plug_var, False, True,
                                    cfg.approx_budget, self.var_floor, ranking)
        r, q = _argmax_cell(w_next)
        self.stats.w_rule += 1
        if w_next[r, q] > v_now:
            self.w_mode = False
            self.stats.w_exits += 1
        return Allocation(r, q, "W", float(w_next[r, q]))

    def observe(self, i: int, j: int, y: float) -> None:
        super().observe(i, j, y)
        cfg = self.config
        self._since_full += 1
        full = self._since_full >= cfg.full_em_every
        if full:
            self._since_full = 0
        _, self.posterior, _ = run_em(
            self.state, self.plug_var, self.K, self.L, self.posterior.params,
            cfg.em_max_iter if full else cfg.em_iters, cfg.em_tol, cfg.exact_budget,
            prev=self.posterior, floor_rel=cfg.cluster_floor_rel)

    def select(self) -> np.ndarray:
        return _argmax_first(map_means(self.posterior))

    def diagnostics(self) -> dict:
        return {
            "K": self.K,
            "L": self.L,
            "v_rule": self.stats.v_rule,
            "w_rule": self.stats.w_rule,
            "w_exits": self.stats.w_exits,
        }

    def _write_dump(self, v_next, w_next) -> None:
        if self._dump is None:
            return
        t = self.state.total
        n, m = v_next.shape
        for r in range(n):
            for q in range(m):
                self._dump.writerow([t, r, q, repr(float(v_next[r, q])), repr(float(w_next[r, q]))])

    def close(self) -> None:
        if self._dump is not None:
            self._dump_file.close()
            self._dump = None


@dataclass
class IZResult:
    state: SamplingState
    stage1_var: np.ndarray
    extra: np.ndarray
    n0: int

    @property
    def total(self) -> int:
        return self.state.total

    def trace(self):
        """Allocation sequence: stage 1 round-robin, then stage 2 cell by cell."""
        n, m = self.extra.shape
        for _ in range(self.n0):
            for i in range(n):
                for j in range(m):
                    yield i, j
        for i in range(n):
            for j in range(m):
                for _ in range(int(self.extra[i, j])):
                    yield i, j

    def select(self) -> np.ndarray:
        return _argmax_first(sample_means(self.state))


def iz_extra_samples(stage1_var: np.ndarray, n0: int, h: float, delta: float) -> np.ndarray:
    """Second-stage counts ``max(ceil(h^2 S^2 / delta^2) - n0, 0)`` per cell."""
    if h <= 0 or delta <= 0:
        raise ValueError("h and delta must be positive")
    need = np.ceil(h * h * np.asarray(stage1_var) / (delta * delta))
    return np.maximum(need - n0, 0).astype(np.int64)


def iz_allocate(problem, streams, n0: int = 5, h: float = 2.583, delta: float = 0.1) -> IZResult:
    """Two-stage indifference-zone allocation.

    Stage 1 takes ``n0`` draws per cell and sample variances ``S^2`` (without
    a floor, so constant cells need no more draws); stage 2 tops each cell up
    to ``ceil(h^2 S^2 / delta^2)`` draws.
    """
    if n0 < 2:
        raise ValueError("IZ needs n0 >= 2 for sample variances")
    if h <= 0 or delta <= 0:
        raise ValueError("h and delta must be positive")
    n, m = problem.n, problem.m
    state = SamplingState.empty(n, m)
    for i in range(n):
        for j in range(m):
            for y in np.atleast_1d(problem.simulate(i, j, streams(i, j), size=n0)):
                record_observation(state, i, j, float(y))
    t = state.counts.astype(float)
    s2 = np.maximum((state.sumsq - state.sums**2 / t) / (t - 1.0), 0.0)
    extra = iz_extra_samples(s2, n0, h, delta)
    for i in range(n):
        for j in range(m):
            k = int(extra[i, j])
            if k:
                ys = np.asarray(problem.simulate(i, j, streams(i, j), size=k), dtype=float)
                state.counts[i, j] += k
                state.sums[i, j] += ys.sum()
                state.sumsq[i, j] += (ys * ys).sum()
    return IZResult(state, s2, extra, n0)


def final_selection(source, kind: str = "means") -> np.ndarray:
    """Selected design per context.

    ``source`` is a posterior (``kind="posterior"``: MAP-cluster posterior
    means) or an (n, m) array of estimates (``kind="means"``).
    """
    if kind == "posterior":
        return _argmax_first(map_means(source))
    if kind == "means":
        return _argmax_first(np.asarray(source, dtype=float))
    raise ValueError(f"unknown selection kind {kind!r}")


def make_policy(name: str, problem, *, n0: int = 5, gamma: float = 1.0,
                dsco_config: DSCOConfig | None = None, rng: np.random.Generator | None = None):
    """Sequential policy by name (IZ is run through :func:`iz_allocate`)."""
    if name == "dsco":
        cfg = DSCOConfig(n0=n0) if dsco_config is None else dsco_config
        return DSCO(cfg, rng)
    if name == "ea":
        return EqualAllocation(n0)
    if name == "cocba":
        return COCBA(n0)
    if name == "sucb":
        return SUCB(problem.contexts, gamma, n0)
    raise ValueError(f"unknown sequential policy {name!r}")
