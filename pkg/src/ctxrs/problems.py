"""Benchmark problems: block-structured synthetic instances and a cancer-prevention Markov chain."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from . import _kernels as _k
from .core import TAG_INSTANCE, ProblemInstance, derive_rng

CASES = ("one", "multi")

# Synthetic layouts on the full-size grids.
EXAMPLE1 = {
    "one": dict(design_splits=(10,), context_splits=(10,), block_means=[[50.0]], block_sd=3.0,
                std_range=(8.0, 12.0), context_means=(5.0,), context_sd=1.0),
    "multi": dict(design_splits=(6, 4), context_splits=(4, 6), block_means=[[20.0, 60.0], [40.0, 80.0]],
                  block_sd=3.0, std_range=(8.0, 12.0), context_means=(4.0, 6.0), context_sd=1.0),
}
EXAMPLE2 = {
    "one": dict(design_splits=(30,), context_splits=(30,), block_means=[[50.0]], block_sd=15.0,
                std_range=(4.0, 6.0), context_means=(5.0,), context_sd=1.0),
    "multi": dict(design_splits=(10, 10, 10), context_splits=(10, 10, 10),
                  block_means=[[10.0, 40.0, 70.0], [20.0, 50.0, 80.0], [30.0, 60.0, 90.0]],
                  block_sd=1.5, std_range=(4.0, 6.0), context_means=(2.0, 5.0, 8.0), context_sd=1.0),
}


@dataclass
class SyntheticSpec:
    """Generating distributions of a block-structured instance.

    Designs are split into consecutive blocks of sizes ``design_splits`` and
    contexts likewise; the mean of every cell in block (a, b) is drawn from
    ``N(block_means[a][b], block_sd^2)``.  Sampling standard deviations are
    uniform on ``std_range`` and the one-dimensional context of every
    context in block ``b`` is drawn from ``N(context_means[b], context_sd^2)``.
    """

    design_splits: tuple
    context_splits: tuple
    block_means: list
    block_sd: float
    std_range: tuple
    context_means: tuple
    context_sd: float = 1.0
    seed: int = 0

    def __post_init__(self):
        self.design_splits = tuple(int(s) for s in self.design_splits)
        self.context_splits = tuple(int(s) for s in self.context_splits)
        means = np.asarray(self.block_means, dtype=float)
        if min(self.design_splits + self.context_splits) < 1:
            raise ValueError("every block needs at least one row and one column")
        if means.shape != (len(self.design_splits), len(self.context_splits)):
            raise ValueError("block_means must have one entry per (design block, context block)")
        if len(self.context_means) != len(self.context_splits):
            raise ValueError("need one context mean per context block")
        lo, hi = self.std_range
        if not 0 < lo <= hi:
            raise ValueError("std_range must satisfy 0 < low <= high")
        if self.block_sd < 0 or self.context_sd < 0:
            raise ValueError("standard deviations must be nonnegative")

    @property
    def n(self) -> int:
        return sum(self.design_splits)

    @property
    def m(self) -> int:
        return sum(self.context_splits)

    def design_labels(self) -> np.ndarray:
        return np.repeat(np.arange(len(self.design_splits)), self.design_splits)

    def context_labels(self) -> np.ndarray:
        return np.repeat(np.arange(len(self.context_splits)), self.context_splits)


def make_synthetic(spec: SyntheticSpec) -> ProblemInstance:
    """Draw an instance: means, then sampling standard deviations, then contexts."""
    rng = derive_rng(spec.seed, TAG_INSTANCE)
    rows, cols = spec.design_labels(), spec.context_labels()
    centre = np.asarray(spec.block_means, dtype=float)[np.ix_(rows, cols)]
    means = centre + spec.block_sd * rng.standard_normal(centre.shape)
    std = rng.uniform(*spec.std_range, size=centre.shape)
    contexts = np.asarray(spec.context_means, dtype=float)[cols] + spec.context_sd * rng.standard_normal(cols.size)
    return ProblemInstance(contexts[:, None], means, std)


def _scaled_splits(splits, size: int) -> tuple:
    """Block sizes proportional to ``splits`` summing to ``size``, each at least one."""
    splits = np.asarray(splits, dtype=float)
    if size < splits.size:
        raise ValueError(f"cannot fit {splits.size} blocks into {size} rows")
    out = np.maximum(np.round(splits / splits.sum() * size).astype(int), 1)
    while out.sum() > size:
        out[np.argmax(out)] -= 1
    while out.sum() < size:
        out[np.argmin(out)] += 1
    return tuple(int(s) for s in out)


def _example_spec(table: dict, case: str, seed: int, n: int | None, m: int | None) -> SyntheticSpec:
    if case not in table:
        raise ValueError(f"unknown case {case!r}; expected one of {CASES}")
    layout = dict(table[case])
    if n is not None:
        layout["design_splits"] = _scaled_splits(layout["design_splits"], n)
    if m is not None:
        layout["context_splits"] = _scaled_splits(layout["context_splits"], m)
    return SyntheticSpec(seed=seed, **layout)


def example1_spec(case: str = "multi", seed: int = 0, n: int | None = None,
                  m: int | None = None) -> SyntheticSpec:
    return _example_spec(EXAMPLE1, case, seed, n, m)


def example2_spec(case: str = "multi", seed: int = 0, n: int | None = None,
                  m: int | None = None) -> SyntheticSpec:
    return _example_spec(EXAMPLE2, case, seed, n, m)


def make_example1(case: str = "multi", seed: int = 0, n: int = 10, m: int = 10) -> ProblemInstance:
    """10 x 10 synthetic instance; other sizes rescale the block layout proportionally."""
    return make_synthetic(example1_spec(case, seed, n, m))


def make_example1_small(case: str = "multi", seed: int = 0) -> ProblemInstance:
    """6 designs x 4 contexts with the Example-1 generating distributions."""
    return make_example1(case, seed, 6, 4)


def make_example2(case: str = "multi", seed: int = 0, n: int = 30, m: int = 30) -> ProblemInstance:
    return make_synthetic(example2_spec(case, seed, n, m))


# Cancer prevention chain.

DRUGS = ("aspirin", "statin")
DOSE_RANGE = {"aspirin": (50.0, 150.0), "statin": (6.0, 18.0)}
PRESSURE_RANGE = (110.0, 150.0)
AGE_RANGE = (45.0, 80.0)
ASPIRIN_DOSES = 52.5 + 5.0 * np.arange(20)
STATIN_DOSES = np.round(6.2 + 0.6 * np.arange(20), 10)
GRID_AGES = np.linspace(45.0, 80.0, 10)
GRID_PRESSURES = np.linspace(110.0, 150.0, 6)
BETA_FLOOR = 1e-4
DEATH = 6
CANCER = 3


def drug_params(drug: str, a: float, b: float) -> tuple[float, float]:
    """Drug effect ``alpha`` and complication rate ``beta`` for dosage ``a`` (mg) and pressure ``b`` (mmHg)."""
    if drug not in DRUGS:
        raise ValueError(f"unknown drug {drug!r}")
    lo, hi = DOSE_RANGE[drug]
    if not lo <= a <= hi:
        raise ValueError(f"{drug} dosage {a} outside [{lo}, {hi}]")
    if not PRESSURE_RANGE[0] <= b <= PRESSURE_RANGE[1]:
        raise ValueError(f"pressure {b} outside {PRESSURE_RANGE}")
    if drug == "aspirin":
        alpha = 0.5 + (a - 75) * 0.003 - (b - 120) * 0.005
        beta = 0.025 + (a - 75) * 0.0005 - (b - 120) * 0.001
    else:
        alpha = 0.5 + (a - 9) * 0.0417 - (b - 120) * 0.0025
        beta = 0.04 + (a - 9) * 0.01 + (b - 120) * 0.001
    return alpha, beta


def mortality(x1: float) -> float:
    """Monthly all-cause death probability for starting age ``x1``."""
    if x1 >= 85:
        raise ValueError("starting age must be below 85")
    return 1.0 / (12.0 * (85.0 - x1))


def eligibility_factor(x1: float) -> float:
    """Fraction of cancer patients eligible for resection, without a range check."""
    return 1.0 - (x1 - 45.0) * 0.00225


def resection_eligibility(x1: float, lam: float) -> float:
    """Monthly probability of moving from cancer to surgery."""
    if not AGE_RANGE[0] <= x1 <= AGE_RANGE[1]:
        raise ValueError(f"starting age {x1} outside {AGE_RANGE}")
    return (1.0 - lam) * eligibility_factor(x1)


def default_horizon(x1: float) -> int:
    return int(round(12 * (100 - x1)))


def load_chain_config(path=None) -> dict:
    """Base matrix and quality weights from JSON (the bundled placeholder config by default)."""
    if path is None:
        text = resources.files("ctxrs").joinpath("data/cancer_chain.json").read_text()
    else:
        with open(path) as fh:
            text = fh.read()
    config = json.loads(text)
    base = np.asarray(config["base"], dtype=float)
    quality = np.asarray(config["quality"], dtype=float)
    k = len(config["states"])
    if base.shape != (k, k) or quality.shape != (k,):
        raise ValueError("base matrix and quality weights must match the state list")
    if np.any(base < 0) or np.max(np.abs(base.sum(axis=1) - 1.0)) > 1e-12:
        raise ValueError("base matrix must be row-stochastic")
    if k != 7 or base[DEATH, DEATH] != 1.0 or quality[DEATH] != 0.0:
        raise ValueError("expected seven states with death last, absorbing and of zero quality")
    return {"states": list(config["states"]), "base": base, "quality": quality,
            "notes": config.get("notes", "")}


@dataclass
class MarkovChainSpec:
    """Monthly chain for one (treatment, patient) pair.

    ``alpha`` scales the off-drug cancer rate for patients on the drug,
    ``beta`` is the complication rate, ``lam`` the all-cause death rate and
    ``eligibility`` the resection-eligible fraction of cancer patients.
    """

    base: np.ndarray
    quality: np.ndarray
    alpha: float
    beta: float
    lam: float
    eligibility: float
    horizon: int
    drug: str = ""
    dosage: float = float("nan")
    context: tuple = field(default=(float("nan"), float("nan")))

    def __post_init__(self):
        self.base = np.asarray(self.base, dtype=float)
        self.quality = np.asarray(self.quality, dtype=float)
        for name in ("alpha", "beta", "lam", "eligibility"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.horizon < 0:
            raise ValueError("horizon must be nonnegative")

    @classmethod
    def from_inputs(cls, drug: str, a: float, x1: float, x2: float, config: dict | None = None,
                    horizon: int | None = None) -> "MarkovChainSpec":
        """Chain for dosage ``a`` of ``drug``, starting age ``x1`` and pressure ``x2``.

        The linear complication-rate formula goes negative for low aspirin
        doses at high pressure, so ``beta`` is floored at ``BETA_FLOOR``.
        """
        config = load_chain_config() if config is None else config
        alpha, beta = drug_params(drug, a, x2)
        lam = mortality(x1)
        resection_eligibility(x1, lam)
        return cls(config["base"], config["quality"], float(np.clip(alpha, 0.0, 1.0)),
                   float(max(beta, BETA_FLOOR)), lam, eligibility_factor(x1),
                   default_horizon(x1) if horizon is None else horizon, drug, a, (x1, x2))


def build_transition_matrix(spec: MarkovChainSpec) -> np.ndarray:
    """Overlay the derived rates on the base matrix.

    Disease transitions are set first and then scaled into the ``1 - lam``
    mass left after all-cause death.
    """
    d = spec.base.copy()
    on_drug_cancer = spec.alpha * d[2, CANCER]
    d[0] = 0.0
    d[0, 1] = spec.beta
    d[0, CANCER] = on_drug_cancer
    d[0, 0] = 1.0 - spec.beta - on_drug_cancer
    d[CANCER] = 0.0
    d[CANCER, 4] = spec.eligibility
    d[CANCER, 5] = 1.0 - spec.eligibility
    if np.any(d < 0):
        raise ValueError("derived rates are inconsistent with the base matrix")
    p = (1.0 - spec.lam) * d
    p[:, DEATH] += spec.lam
    p[DEATH] = 0.0
    p[DEATH, DEATH] = 1.0
    p /= p.sum(axis=1, keepdims=True)
    return p


def qaly_simulate(spec: MarkovChainSpec, rng: np.random.Generator, horizon_cap: int | None = None,
                  size: int | None = None):
    """Quality-adjusted life years of simulated patients.

    Every month the chain makes one transition and the state it enters
    contributes its quality weight; the total is divided by 12.
    """
    horizon = spec.horizon if horizon_cap is None else horizon_cap
    cum = np.cumsum(build_transition_matrix(spec), axis=1)
    count = 1 if size is None else int(size)
    # One row of uniforms per patient; the death quality is zero, so stopping there is exact.
    u = rng.random((count, horizon))
    total = _k.chain_paths(cum, spec.quality, DEATH, u) / 12.0
    return float(total[0]) if size is None else total


def qaly_moments(spec: MarkovChainSpec, horizon_cap: int | None = None) -> tuple[float, float]:
    """Exact mean and variance of :func:`qaly_simulate` by backward recursion over the horizon."""
    mean, var = _moments(build_transition_matrix(spec)[None], spec.quality,
                         spec.horizon if horizon_cap is None else horizon_cap)
    return float(mean[0]), float(var[0])


def _moments(p, quality, horizon):
    """Mean and variance of the QALY total for a batch of chains started in state 1."""
    batch, k = p.shape[0], quality.size
    g = np.zeros((batch, k))
    g2 = np.zeros((batch, k))
    for _ in range(horizon):
        # Each month moves first and then accrues the quality of the new state.
        g2 = np.einsum("bst,bt->bs", p, quality**2 + 2.0 * quality * g + g2)
        g = np.einsum("bst,bt->bs", p, quality + g)
    mean = g[:, 0] / 12.0
    var = np.maximum(g2[:, 0] - g[:, 0] ** 2, 0.0) / 144.0
    return mean, var


def cancer_designs() -> list[tuple[str, float]]:
    return [("aspirin", float(a)) for a in ASPIRIN_DOSES] + [("statin", float(a)) for a in STATIN_DOSES]


def cancer_contexts() -> np.ndarray:
    """60 (age, pressure) pairs on a 10 x 6 grid, pressure varying fastest."""
    ages, pressures = np.meshgrid(GRID_AGES, GRID_PRESSURES, indexing="ij")
    return np.column_stack([ages.ravel(), pressures.ravel()])


class CancerProblem:
    """40 treatments x 60 patient profiles; observations are simulated QALYs.

    Ground-truth means and standard deviations are computed exactly from the
    chain, so ``instance`` is an ordinary :class:`ProblemInstance`.
    """

    def __init__(self, config: dict | None = None, horizon_cap: int | None = None):
        self.config = load_chain_config() if config is None else config
        self.designs = cancer_designs()
        self.contexts = cancer_contexts()
        self.specs = [[MarkovChainSpec.from_inputs(drug, a, x1, x2, self.config, horizon_cap)
                       for (x1, x2) in self.contexts] for (drug, a) in self.designs]
        n, m = len(self.designs), len(self.contexts)
        means = np.empty((n, m))
        var = np.empty((n, m))
        for j in range(m):
            column = [self.specs[i][j] for i in range(n)]
            p = np.stack([build_transition_matrix(s) for s in column])
            means[:, j], var[:, j] = _moments(p, self.config["quality"], column[0].horizon)
        self.instance = ProblemInstance(self.contexts, means, np.sqrt(var))

    @property
    def n(self) -> int:
        return self.instance.n

    @property
    def m(self) -> int:
        return self.instance.m

    @property
    def d(self) -> int:
        return self.instance.d

    @property
    def true_means(self) -> np.ndarray:
        return self.instance.true_means

    @property
    def sampling_std(self) -> np.ndarray:
        return self.instance.sampling_std

    @property
    def best_per_context(self) -> np.ndarray:
        return self.instance.best_per_context

    def simulate(self, i: int, j: int, rng: np.random.Generator, size=None):
        if not (0 <= i < self.n and 0 <= j < self.m):
            raise IndexError(f"cell ({i}, {j}) outside a {self.n} x {self.m} problem")
        return qaly_simulate(self.specs[i][j], rng, size=size)

    def monte_carlo_truth(self, i: int, j: int, reps: int, seed: int = 0) -> tuple[float, float]:
        """Monte Carlo mean and its standard error for one cell, for cross-checking."""
        rng = derive_rng(seed, TAG_INSTANCE, i, j)
        draws = self.simulate(i, j, rng, size=reps)
        return float(draws.mean()), float(draws.std(ddof=1) / np.sqrt(reps))

    def to_dict(self) -> dict:
        out = self.instance.to_dict()
        out["designs"] = [[drug, a] for drug, a in self.designs]
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1) + "\n"


def make_cancer_problem(config_path=None, seed: int = 0, horizon_cap: int | None = None) -> CancerProblem:
    """Cancer-prevention benchmark; ``seed`` is unused because the ground truth is exact."""
    return CancerProblem(load_chain_config(config_path), horizon_cap)


PROBLEMS = ("example1", "example1-small", "example2", "cancer")


def make_problem(name: str, case: str = "multi", seed: int = 0, config_path=None):
    if name == "example1":
        return make_example1(case, seed)
    if name == "example1-small":
        return make_example1_small(case, seed)
    if name == "example2":
        return make_example2(case, seed)
    if name == "cancer":
        return make_cancer_problem(config_path, seed)
    raise ValueError(f"unknown problem {name!r}; expected one of {PROBLEMS}")
