"""Macro-replication runner, PCS estimation, optimal-ratio oracle and result files."""

from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import brentq

from .core import (TAG_INSTANCE, TAG_POLICY, CellStreams, ProblemInstance, derive_rng,
                   derive_seed_sequence)
from .mixture import CLUSTER_FLOOR_REL, EXACT_BUDGET
from .policies import DSCOConfig, iz_allocate, make_policy
from .problems import make_problem
from .vfa import APPROX_BUDGET

CSV_HEADER = ["policy", "problem", "seed", "budget", "context", "pcs", "pcs_se", "pcs_w"]


# Optimal ratios.

@dataclass
class OptimalRatios:
    ratios: np.ndarray
    total_residual: np.ndarray
    individual_residual: np.ndarray
    cross_residual: float
    converged: bool

    @property
    def max_residual(self) -> float:
        return float(max(self.total_residual.max(), self.individual_residual.max(),
                         self.cross_residual))


def rate_matrix(ratios, means, std) -> np.ndarray:
    """Pairwise rates ``G_ij`` of every challenger against its context's best; NaN at the best."""
    ratios = np.asarray(ratios, dtype=float)
    means = np.asarray(means, dtype=float)
    var = np.asarray(std, dtype=float) ** 2
    cols = np.arange(means.shape[1])
    best = np.argmax(means, axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        g = (means[best, cols] - means) ** 2 / (var[best, cols] / ratios[best, cols] + var / ratios)
    g[best, cols] = np.nan
    return g


def balance_residuals(ratios, means, std):
    """Relative residuals of the three balance conditions.

    Returns ``(total, individual, cross)``: per context, the relative gap
    between the leader's ``r^2 / sigma^2`` and the challengers' sum; per
    context, the relative spread of the challenger rates; and the relative
    spread of all challenger rates across contexts.
    """
    ratios = np.asarray(ratios, dtype=float)
    means = np.asarray(means, dtype=float)
    var = np.asarray(std, dtype=float) ** 2
    cols = np.arange(means.shape[1])
    best = np.argmax(means, axis=0)
    weight = ratios**2 / var
    lead = weight[best, cols]
    rivals = weight.sum(axis=0) - lead
    total = np.abs(lead - rivals) / np.maximum(np.maximum(lead, rivals), np.finfo(float).tiny)
    g = rate_matrix(ratios, means, std)
    hi, lo = np.nanmax(g, axis=0), np.nanmin(g, axis=0)
    individual = (hi - lo) / hi
    cross = float((np.nanmax(g) - np.nanmin(g)) / np.nanmax(g))
    return total, individual, cross


def _context_rates(gap2, var_b, var_c):
    """Leader ratio and challenger ratios of one context at unit common rate.

    With every challenger rate equal to one, challenger ``i`` needs
    ``r_i = var_i / (gap_i^2 - var_b / x)`` when the leader has ratio ``x``.
    The leader ratio then solves ``x^2 / var_b = sum r_i^2 / var_i``, whose
    left side increases and right side decreases in ``x``.
    """
    x_min = float(np.max(var_b / gap2))

    def challengers(x):
        return var_c / (gap2 - var_b / x)

    def excess(x):
        return x * x / var_b - float(np.sum(challengers(x) ** 2 / var_c))

    lo = x_min * (1.0 + 1e-12)
    while excess(lo) > 0:
        lo = x_min + (lo - x_min) * 1e-3
    hi = 2.0 * x_min
    while excess(hi) < 0:
        hi *= 2.0
    x = brentq(excess, lo, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=500)
    return x, challengers(x)


def optimal_ratio_oracle(problem, tol: float = 1e-8) -> OptimalRatios:
    """Large-deviations-optimal sampling ratios for known means and standard deviations.

    The balance conditions are homogeneous of degree one in the ratios, so
    the common challenger rate is fixed at one, each context is solved by a
    one-dimensional root search and the result is normalised to sum to one.
    """
    means = np.asarray(problem.true_means, dtype=float)
    std = np.asarray(problem.sampling_std, dtype=float)
    if np.any(std <= 0):
        raise ValueError("optimal ratios need positive sampling standard deviations")
    n, m = means.shape
    var = std**2
    best = np.argmax(means, axis=0)
    ratios = np.empty((n, m))
    for j in range(m):
        b = best[j]
        others = np.arange(n) != b
        gap2 = (means[b, j] - means[others, j]) ** 2
        x, rc = _context_rates(gap2, var[b, j], var[others, j])
        ratios[b, j] = x
        ratios[others, j] = rc
    ratios /= ratios.sum()
    total, individual, cross = balance_residuals(ratios, means, std)
    ok = bool(max(total.max(), individual.max(), cross) < tol)
    return OptimalRatios(ratios, total, individual, cross, ok)


# Experiments.

@dataclass
class ExperimentConfig:
    problem: str = "example1"
    case: str = "multi"
    policy: str = "dsco"
    checkpoints: list = field(default_factory=lambda: [1000])
    macro_reps: int = 100
    seed: int = 0
    workers: int = 1
    n0: int = 5
    K_max: int = 4
    L_max: int = 4
    delta: float = 0.1
    h: float = 2.583
    gamma: float = 1.0
    em_budget: int = EXACT_BUDGET
    approx_budget: int = APPROX_BUDGET
    cluster_floor: float = CLUSTER_FLOOR_REL
    redraw_instance: bool = False
    config_path: str | None = None
    instance: dict | None = None
    out: str | None = None

    def __post_init__(self):
        self.checkpoints = [int(c) for c in self.checkpoints]
        if self.policy != "iz":
            if not self.checkpoints:
                raise ValueError("at least one checkpoint is required")
            if any(b <= a for a, b in zip(self.checkpoints, self.checkpoints[1:])):
                raise ValueError("checkpoints must be strictly increasing")
        if self.macro_reps < 1:
            raise ValueError("macro_reps must be at least 1")
        if self.workers < 1:
            raise ValueError("workers must be at least 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class ExperimentRecord:
    """PCS estimates per checkpoint.

    ``pcs[c, j]`` is the fraction of replications selecting the true best in
    context ``j`` at checkpoint ``budgets[c]``; ``ratios[c]`` the mean
    fraction of samples spent on each cell.
    """

    policy: str
    problem: str
    seed: int
    macro_reps: int
    budgets: list
    pcs: np.ndarray
    pcs_se: np.ndarray
    ratios: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def pcs_w(self) -> np.ndarray:
        if self.pcs.size == 0:
            return np.zeros(0)
        return self.pcs.min(axis=1)

    def to_dict(self) -> dict:
        return {
            "policy": self.policy,
            "problem": self.problem,
            "seed": self.seed,
            "macro_reps": self.macro_reps,
            "budgets": list(self.budgets),
            "pcs": self.pcs.tolist(),
            "pcs_se": self.pcs_se.tolist(),
            "pcs_w": self.pcs_w.tolist(),
            "ratios": None if self.ratios is None else self.ratios.tolist(),
            "diagnostics": self.diagnostics,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentRecord":
        c = len(data["budgets"])
        pcs = np.asarray(data["pcs"], dtype=float).reshape(c, -1)
        se = np.asarray(data["pcs_se"], dtype=float).reshape(pcs.shape)
        ratios = None if data.get("ratios") is None else np.asarray(data["ratios"], dtype=float)
        return cls(data["policy"], data["problem"], int(data["seed"]), int(data["macro_reps"]),
                   [int(b) for b in data["budgets"]], pcs, se, ratios, data.get("diagnostics", {}))


def binomial_se(p, reps: int):
    return np.sqrt(np.asarray(p) * (1.0 - np.asarray(p)) / reps)


def instance_seed(root_seed: int, rep: int) -> int:
    """Seed of the instance drawn for replication ``rep`` in redraw mode."""
    return int(derive_seed_sequence(root_seed, TAG_INSTANCE, rep).generate_state(1)[0])


def build_problem(config: ExperimentConfig, rep: int | None = None):
    if config.instance is not None:
        return ProblemInstance.from_dict(config.instance)
    seed = config.seed if rep is None else instance_seed(config.seed, rep)
    return make_problem(config.problem, config.case, seed, config.config_path)


def _policy_for(config: ExperimentConfig, problem, rep: int):
    dsco = DSCOConfig(n0=config.n0, K_max=config.K_max, L_max=config.L_max,
                      exact_budget=config.em_budget, approx_budget=config.approx_budget,
                      cluster_floor_rel=config.cluster_floor)
    return make_policy(config.policy, problem, n0=config.n0, gamma=config.gamma, dsco_config=dsco,
                       rng=derive_rng(config.seed, TAG_POLICY, rep))


def run_replication(config: ExperimentConfig, rep: int, problem=None, policy_factory=None) -> dict:
    """One macro-replication: correctness per checkpoint and context, and sample fractions."""
    if problem is None or config.redraw_instance:
        problem = build_problem(config, rep if config.redraw_instance else None)
    best = problem.best_per_context
    streams = CellStreams(config.seed, rep)
    if config.policy == "iz" and policy_factory is None:
        result = iz_allocate(problem, streams, config.n0, config.h, config.delta)
        return {"correct": [(result.select() == best).tolist()],
                "ratios": [(result.state.counts / result.total).tolist()],
                "diag": {"total": result.total}}
    policy = (policy_factory or _policy_for)(config, problem, rep)
    policy.initialize(problem, streams)
    start = policy.state.total
    if config.checkpoints[0] < start:
        raise ValueError(f"first checkpoint {config.checkpoints[0]} is below the "
                         f"initial sample size {start}")
    correct, ratios = [], []
    for budget in config.checkpoints:
        while policy.state.total < budget:
            policy.step(problem, streams)
        correct.append((policy.select() == best).tolist())
        ratios.append((policy.state.counts / policy.state.total).tolist())
    diag = policy.diagnostics()
    close = getattr(policy, "close", None)
    if close is not None:
        close()
    return {"correct": correct, "ratios": ratios, "diag": diag}


def _worker(args):
    config, rep, problem = args
    return run_replication(config, rep, problem)


def _aggregate(config: ExperimentConfig, results: list[dict]) -> ExperimentRecord:
    reps = len(results)
    if reps == 0:
        return ExperimentRecord(config.policy, config.problem, config.seed, 0, [],
                                np.zeros((0, 0)), np.zeros((0, 0)), None, {})
    correct = np.array([r["correct"] for r in results], dtype=float)
    ratios = np.array([r["ratios"] for r in results], dtype=float)
    pcs = correct.mean(axis=0)
    diags = [r["diag"] for r in results]
    summary: dict = {}
    for key in sorted({k for d in diags for k in d}):
        values = [d[key] for d in diags if key in d]
        summary[key] = {"mean": float(np.mean(values)), "min": float(np.min(values)),
                        "max": float(np.max(values))}
    if config.policy == "iz":
        budgets = [int(round(summary["total"]["mean"]))]
    else:
        budgets = list(config.checkpoints)
    return ExperimentRecord(config.policy, config.problem, config.seed, reps, budgets,
                            pcs, binomial_se(pcs, reps), ratios.mean(axis=0), summary)


def worker_count(config: ExperimentConfig) -> int:
    env = os.environ.get("CTXRS_WORKERS")
    return max(int(env), 1) if env else config.workers


def run_experiment(config: ExperimentConfig, policy_factory=None) -> ExperimentRecord:
    """Run ``macro_reps`` independent replications and estimate PCS per checkpoint.

    Replications are independent given the root seed and are merged in
    replication order, so the record does not depend on the worker count.
    ``policy_factory(config, problem, rep)`` overrides the named policy
    (single-process only).  On interrupt the finished replications are
    written to ``config.out`` before re-raising.
    """
    problem = None if config.redraw_instance else build_problem(config)
    workers = worker_count(config)
    results: list[dict] = []
    try:
        if workers == 1 or policy_factory is not None:
            for rep in range(config.macro_reps):
                results.append(run_replication(config, rep, problem, policy_factory))
        else:
            jobs = [(config, rep, problem) for rep in range(config.macro_reps)]
            with ProcessPoolExecutor(max_workers=workers) as pool:
                for res in pool.map(_worker, jobs, chunksize=max(1, len(jobs) // (4 * workers))):
                    results.append(res)
    except KeyboardInterrupt:
        if config.out:
            write_results(_aggregate(config, results), config.out)
        raise
    record = _aggregate(config, results)
    if config.out:
        write_results(record, config.out)
    return record


# Result files.

def _fmt(x) -> str:
    return repr(float(x))


def json_path_for(path: str) -> str:
    root, _ = os.path.splitext(path)
    return root + ".json"


def write_results(record: ExperimentRecord, path: str, json_path: str | None = None) -> None:
    """Long-format CSV at ``path`` and a JSON mirror with all diagnostics next to it."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for c, budget in enumerate(record.budgets):
            head = [record.policy, record.problem, record.seed, budget]
            for j in range(record.pcs.shape[1]):
                writer.writerow(head + [j, _fmt(record.pcs[c, j]), _fmt(record.pcs_se[c, j]), ""])
            writer.writerow(head + ["all", "", "", _fmt(record.pcs_w[c])])
    json_path = json_path_for(path) if json_path is None else json_path
    if os.path.abspath(json_path) != os.path.abspath(path):
        with open(json_path, "w") as fh:
            json.dump(record.to_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")


def read_results(path: str) -> ExperimentRecord:
    """Inverse of :func:`write_results`; a ``.json`` path restores the full record.

    Reading the CSV restores the PCS tables; replication count, ratios and
    diagnostics are only stored in the JSON mirror and are taken from it
    when present.
    """
    if path.endswith(".json"):
        with open(path) as fh:
            return ExperimentRecord.from_dict(json.load(fh))
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != CSV_HEADER:
        raise ValueError(f"{path} does not have the expected header")
    budgets, pcs, se, meta = [], {}, {}, None
    for row in rows[1:]:
        policy, problem, seed, budget, context, p, s, w = row
        meta = (policy, problem, int(seed))
        budget = int(budget)
        if not budgets or budgets[-1] != budget:
            budgets.append(budget)
        if context == "all":
            continue
        pcs.setdefault(budget, []).append(float(p))
        se.setdefault(budget, []).append(float(s))
    mirror = json_path_for(path)
    extra = {}
    if os.path.exists(mirror):
        with open(mirror) as fh:
            extra = json.load(fh)
    if meta is None:
        meta = (extra.get("policy", ""), extra.get("problem", ""), int(extra.get("seed", 0)))
        return ExperimentRecord(*meta, int(extra.get("macro_reps", 0)), [], np.zeros((0, 0)),
                                np.zeros((0, 0)), None, extra.get("diagnostics", {}))
    pcs_arr = np.array([pcs[b] for b in budgets])
    se_arr = np.array([se[b] for b in budgets])
    ratios = None if extra.get("ratios") is None else np.asarray(extra["ratios"], dtype=float)
    return ExperimentRecord(*meta, int(extra.get("macro_reps", 0)), budgets, pcs_arr, se_arr,
                            ratios, extra.get("diagnostics", {}))


def validate_record(record: ExperimentRecord, tol: float = 0.0) -> list[str]:
    """Invariant violations of a record (an empty list when it is consistent)."""
    problems = []
    if any(b <= a for a, b in zip(record.budgets, record.budgets[1:])):
        problems.append("budgets are not strictly increasing")
    if record.pcs.shape[0] != len(record.budgets):
        problems.append("one PCS row per budget expected")
    if record.pcs.size:
        if np.any(record.pcs < 0) or np.any(record.pcs > 1):
            problems.append("PCS outside [0, 1]")
        if np.any(record.pcs_se < 0):
            problems.append("negative standard error")
        if record.macro_reps > 0:
            expect = binomial_se(record.pcs, record.macro_reps)
            if np.max(np.abs(expect - record.pcs_se)) > 1e-12:
                problems.append("standard errors do not match the binomial formula")
            hits = record.pcs * record.macro_reps
            if np.max(np.abs(hits - np.round(hits))) > 1e-6:
                problems.append("PCS is not a fraction of the replication count")
    if record.ratios is not None and record.ratios.size:
        sums = record.ratios.reshape(record.ratios.shape[0], -1).sum(axis=1)
        if np.max(np.abs(sums - 1.0)) > 1e-9:
            problems.append("sample fractions do not sum to one")
    return problems


def validate_file(path: str) -> list[str]:
    """Check a CSV (and its JSON mirror when present) for internal consistency."""
    problems = []
    record = read_results(path)
    problems += validate_record(record)
    if not path.endswith(".json"):
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        by_budget: dict = {}
        for row in rows:
            by_budget.setdefault(row["budget"], []).append(row)
        for budget, group in by_budget.items():
            values = [float(r["pcs"]) for r in group if r["context"] != "all"]
            worst = [float(r["pcs_w"]) for r in group if r["context"] == "all"]
            if len(worst) != 1:
                problems.append(f"budget {budget}: expected one worst-case row")
            elif not values or worst[0] != min(values):
                problems.append(f"budget {budget}: pcs_w is not the minimum over contexts")
    return problems


def pcs_at(record: ExperimentRecord, budget: int) -> float:
    """Worst-case PCS at one checkpoint."""
    return float(record.pcs_w[record.budgets.index(budget)])


def significant_gap(a: ExperimentRecord, b: ExperimentRecord, budget: int, margin: float = 0.0,
                    z: float = 3.0) -> bool:
    """Whether ``pcs_w(a) - pcs_w(b) >= margin`` with ``z`` standard errors to spare."""
    ia, ib = a.budgets.index(budget), b.budgets.index(budget)
    ja, jb = int(np.argmin(a.pcs[ia])), int(np.argmin(b.pcs[ib]))
    se = math.hypot(a.pcs_se[ia, ja], b.pcs_se[ib, jb])
    return bool(a.pcs_w[ia] - b.pcs_w[ib] - margin >= z * se)
