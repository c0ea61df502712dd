"""Synthetic data from mixtures of autoregressive processes on the log scale."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np

from .data import GapTimeDataset, from_log_gaps


@dataclass(frozen=True)
class Group:
    """``count`` subjects following

    Y_1 ~ N(intercept, initial_sd^2),
    Y_j ~ N(intercept + sum_l lags[l-1] * Y_{j-l}, innovation_sd^2),

    with lags beyond the available history dropped.
    """

    count: int
    lags: tuple[float, ...] = ()
    innovation_sd: float = 1.0
    initial_sd: float = 1.0
    intercept: float = 0.0

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("group count must be positive")
        if self.innovation_sd <= 0 or self.initial_sd <= 0:
            raise ValueError("standard deviations must be positive")
        object.__setattr__(self, "lags", tuple(float(v) for v in self.lags))


@dataclass(frozen=True)
class ScenarioSpec:
    groups: tuple[Group, ...]
    n_per_subject: int = 10
    seed: int = 0
    censor_rate: float = 0.0

    @property
    def N(self) -> int:
        return sum(g.count for g in self.groups)

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def scenario1(seed: int = 0) -> ScenarioSpec:
    """300 subjects: white noise, AR(2) with lags (1, .7), AR(3) with (1, .7, .4)."""
    return ScenarioSpec((
        Group(100, (), 1.2, 1.2),
        Group(100, (1.0, 0.7), 1.5, 1.5),
        Group(100, (1.0, 0.7, 0.4), 0.9, 0.9),
    ), 10, seed)


def scenario2(seed: int = 0) -> ScenarioSpec:
    """200 subjects: AR(2) with lags (.9, .7) and (-.9, -.7)."""
    return ScenarioSpec((
        Group(100, (0.9, 0.7), 0.9, 1.5),
        Group(100, (-0.9, -0.7), 1.5, 1.5),
    ), 10, seed)


SCENARIOS = {"1": scenario1, "2": scenario2}


def simulate_group(rng, group: Group, n: int) -> np.ndarray:
    Y = np.empty((group.count, n))
    Y[:, 0] = group.intercept + group.initial_sd * rng.standard_normal(group.count)
    for j in range(1, n):
        mean = np.full(group.count, group.intercept)
        for l, coef in enumerate(group.lags[:j], start=1):
            mean += coef * Y[:, j - l]
        Y[:, j] = mean + group.innovation_sd * rng.standard_normal(group.count)
    return Y


def generate_log_gaps(spec: ScenarioSpec):
    """Return (Y, group label) with Y of shape N x n_per_subject."""
    rng = np.random.default_rng(spec.seed)
    blocks, labels = [], []
    for k, g in enumerate(spec.groups):
        blocks.append(simulate_group(rng, g, spec.n_per_subject))
        labels.append(np.full(g.count, k))
    return np.vstack(blocks), np.concatenate(labels)


def generate(spec: ScenarioSpec) -> GapTimeDataset:
    """Dataset of ``spec.N`` subjects without covariates.

    With ``censor_rate > 0`` that fraction of subjects (chosen at random)
    has its last gap censored at a uniform fraction of its true value; this
    switch exists for tests only.
    """
    Y, _ = generate_log_gaps(spec)
    censored = np.zeros(spec.N, dtype=bool)
    rows = [y for y in Y]
    if spec.censor_rate > 0:
        rng = np.random.default_rng([spec.seed, 1])
        censored = rng.random(spec.N) < spec.censor_rate
        for i in np.flatnonzero(censored):
            w_last = np.exp(rows[i][-1])
            rows[i] = rows[i].copy()
            rows[i][-1] = np.log(w_last * rng.uniform(0.05, 1.0))
    return from_log_gaps(rows, censored=list(censored))
