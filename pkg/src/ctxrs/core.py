"""Problem instances, sufficient-statistic bookkeeping and random streams."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

VAR_FLOOR = 1e-8

# Stream tags used when splitting the root seed.
TAG_SAMPLING = 0
TAG_POLICY = 1
TAG_INSTANCE = 2


@dataclass(frozen=True)
class ProblemInstance:
    """Ground truth for a contextual selection problem.

    ``true_means[i, j]`` is the mean payoff of design ``i`` under context ``j``
    and ``sampling_std[i, j]`` the standard deviation of one observation.
    """

    contexts: np.ndarray
    true_means: np.ndarray
    sampling_std: np.ndarray
    allow_zero_std: bool = field(default=False, compare=False)

    def __post_init__(self):
        contexts = np.atleast_2d(np.asarray(self.contexts, dtype=float))
        means = np.asarray(self.true_means, dtype=float)
        std = np.asarray(self.sampling_std, dtype=float)
        if means.ndim != 2 or std.shape != means.shape:
            raise ValueError("true_means and sampling_std must be matching n x m matrices")
        if contexts.shape[0] != means.shape[1]:
            raise ValueError("need one context vector per column of true_means")
        if means.shape[0] < 2:
            raise ValueError("at least two designs are required")
        if not np.all(np.isfinite(means)) or not np.all(np.isfinite(std)):
            raise ValueError("means and standard deviations must be finite")
        if self.allow_zero_std:
            if np.any(std < 0):
                raise ValueError("sampling_std must be nonnegative")
        elif np.any(std <= 0):
            raise ValueError("sampling_std must be strictly positive")
        top2 = np.sort(means, axis=0)[-2:]
        if np.any(top2[1] == top2[0]):
            raise ValueError("tied best designs in some context")
        object.__setattr__(self, "contexts", contexts)
        object.__setattr__(self, "true_means", means)
        object.__setattr__(self, "sampling_std", std)

    @property
    def n(self) -> int:
        return self.true_means.shape[0]

    @property
    def m(self) -> int:
        return self.true_means.shape[1]

    @property
    def d(self) -> int:
        return self.contexts.shape[1]

    @property
    def best_per_context(self) -> np.ndarray:
        return np.argmax(self.true_means, axis=0)

    def simulate(self, i: int, j: int, rng: np.random.Generator, size=None):
        """Draw observation(s) of design ``i`` under context ``j``."""
        _check_index(i, j, self.n, self.m)
        mean = self.true_means[i, j]
        std = self.sampling_std[i, j]
        if size is None:
            return float(mean + std * rng.standard_normal())
        return mean + std * rng.standard_normal(size)

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "m": self.m,
            "d": self.d,
            "contexts": self.contexts.tolist(),
            "true_means": self.true_means.tolist(),
            "sampling_std": self.sampling_std.tolist(),
        }

    def to_json(self) -> str:
        # json uses repr for floats, which round-trips exactly.
        return json.dumps(self.to_dict(), indent=1) + "\n"

    @classmethod
    def from_dict(cls, data: dict) -> "ProblemInstance":
        inst = cls(data["contexts"], data["true_means"], data["sampling_std"])
        if (inst.n, inst.m, inst.d) != (data["n"], data["m"], data["d"]):
            raise ValueError("declared dimensions do not match the arrays")
        return inst

    @classmethod
    def from_json(cls, text: str) -> "ProblemInstance":
        return cls.from_dict(json.loads(text))


def simulate(problem, i: int, j: int, rng: np.random.Generator) -> float:
    """One observation of cell (i, j) drawn from ``rng``."""
    return problem.simulate(i, j, rng)


@dataclass
class SamplingState:
    """Per-cell replication counts, sums and sums of squares."""

    counts: np.ndarray
    sums: np.ndarray
    sumsq: np.ndarray
    raw_log: list | None = None

    @classmethod
    def empty(cls, n: int, m: int, keep_raw: bool = False) -> "SamplingState":
        return cls(
            np.zeros((n, m), dtype=np.int64),
            np.zeros((n, m)),
            np.zeros((n, m)),
            [] if keep_raw else None,
        )

    @property
    def shape(self) -> tuple[int, int]:
        return self.counts.shape

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def copy(self) -> "SamplingState":
        raw = None if self.raw_log is None else list(self.raw_log)
        return SamplingState(self.counts.copy(), self.sums.copy(), self.sumsq.copy(), raw)


def record_observation(state: SamplingState, i: int, j: int, y: float) -> SamplingState:
    """Add observation ``y`` of cell (i, j) to ``state`` in place and return it."""
    _check_index(i, j, *state.shape)
    state.counts[i, j] += 1
    state.sums[i, j] += y
    state.sumsq[i, j] += y * y
    if state.raw_log is not None:
        state.raw_log.append((i, j, y))
    return state


def sample_mean(state: SamplingState, i: int, j: int) -> float:
    _check_index(i, j, *state.shape)
    t = state.counts[i, j]
    if t < 1:
        raise ValueError(f"cell ({i}, {j}) has no observations")
    return float(state.sums[i, j] / t)


def sample_means(state: SamplingState) -> np.ndarray:
    if np.any(state.counts < 1):
        raise ValueError("every cell needs at least one observation")
    return state.sums / state.counts


def cell_variance(count, total, sumsq, floor: float = VAR_FLOOR):
    """Unbiased sample variance from sufficient statistics, clamped at ``floor``."""
    count = np.asarray(count, dtype=float)
    centered = np.asarray(sumsq) - np.asarray(total) ** 2 / count
    return np.maximum(centered / (count - 1.0), floor)


def plug_in_variance(state: SamplingState, floor: float = VAR_FLOOR) -> np.ndarray:
    """Per-cell sample variances used in place of the unknown true variances."""
    if floor <= 0:
        raise ValueError("variance floor must be positive")
    if np.any(state.counts < 2):
        raise ValueError("plug-in variances need at least two observations per cell")
    return cell_variance(state.counts, state.sums, state.sumsq, floor)


def refresh_plug_in(plug_var: np.ndarray, state: SamplingState, i: int, j: int,
                    floor: float = VAR_FLOOR) -> None:
    """Recompute the plug-in variance of one cell in place."""
    t = float(state.counts[i, j])
    s = float(state.sums[i, j])
    plug_var[i, j] = max((float(state.sumsq[i, j]) - s * s / t) / (t - 1.0), floor)


def derive_seed_sequence(root_seed: int, *keys: int) -> np.random.SeedSequence:
    """Independent seed sequence for the stream identified by ``keys``.

    Streams are addressed by a tuple such as ``(TAG_SAMPLING, rep, i, j)`` and
    built with numpy's spawn-key mechanism, so distinct tuples give
    statistically independent generators regardless of creation order.
    """
    return np.random.SeedSequence(int(root_seed), spawn_key=tuple(int(k) for k in keys))


def derive_rng(root_seed: int, *keys: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed_sequence(root_seed, *keys)))


class CellStreams:
    """Lazily created per-cell generators for one macro-replication."""

    def __init__(self, root_seed: int, rep: int):
        self.root_seed = int(root_seed)
        self.rep = int(rep)
        self._streams: dict[tuple[int, int], np.random.Generator] = {}

    def __call__(self, i: int, j: int) -> np.random.Generator:
        key = (int(i), int(j))
        rng = self._streams.get(key)
        if rng is None:
            rng = derive_rng(self.root_seed, TAG_SAMPLING, self.rep, *key)
            self._streams[key] = rng
        return rng


def _check_index(i: int, j: int, n: int, m: int) -> None:
    if not (0 <= i < n and 0 <= j < m):
        raise IndexError(f"cell ({i}, {j}) outside a {n} x {m} problem")
