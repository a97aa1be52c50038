"""Slack binary tournament, elitist survivor selection and best-individual pick.

Individuals are any objects with a ``fitness`` attribute holding a
:class:`FitnessRecord`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np


@dataclass(frozen=True)
class FitnessRecord:
    mse: float
    complexity: int

    def __post_init__(self):
        if not self.mse >= 0:
            raise ValueError(f"mse must be >= 0, got {self.mse}")
        if self.complexity < 0:
            raise ValueError(f"complexity must be >= 0, got {self.complexity}")


@dataclass(frozen=True)
class SelectionConfig:
    """Tournament thresholds.

    ``beta`` is an absolute parameter-count gap. When it is ``None`` the gap is
    ``beta_fraction`` times the mean complexity of the population being
    selected from, recomputed on every call.
    """

    alpha: float = 0.05
    beta: float | None = None
    beta_fraction: float = 0.05
    elitism_rate: float = 0.2

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.beta is not None and self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.beta_fraction < 0:
            raise ValueError("beta_fraction must be >= 0")
        if not 0 < self.elitism_rate < 1:
            raise ValueError("elitism_rate must lie in (0, 1)")

    def resolve_beta(self, population: Sequence[Any]) -> float:
        if self.beta is not None:
            return float(self.beta)
        return self.beta_fraction * float(np.mean([p.fitness.complexity for p in population]))


def _mse_ratio(m1: float, m2: float) -> float:
    if m1 == m2:
        return 0.0
    if m1 == 0 or math.isinf(m2):
        return math.inf
    return (m2 - m1) / m1


def slack_compare(a, b, alpha: float, beta: float):
    """Decide a two-way tournament.

    Returns ``(winner, branch)`` where branch is ``"mse"`` when the MSE gap
    ratio exceeds ``alpha``, ``"complexity"`` when the lower-MSE individual is
    beaten on parameter count by more than ``beta``, and ``"tie"`` otherwise.
    """
    i1, i2 = (a, b) if a.fitness.mse <= b.fitness.mse else (b, a)
    m1, m2 = i1.fitness.mse, i2.fitness.mse
    if _mse_ratio(m1, m2) > alpha:
        return i1, "mse"
    if i1.fitness.complexity - i2.fitness.complexity > beta:
        return i2, "complexity"
    return i1, "tie"


def tournament_index(population, alpha, beta, rng) -> int:
    i, j = rng.choice(len(population), size=2, replace=False)
    winner, _ = slack_compare(population[i], population[j], alpha, beta)
    return int(i) if winner is population[i] else int(j)


def slack_binary_tournament(population: Sequence[Any], scfg: SelectionConfig,
                            rng: np.random.Generator):
    if len(population) < 2:
        raise ValueError("tournament needs at least two individuals")
    beta = scfg.resolve_beta(population)
    return population[tournament_index(population, scfg.alpha, beta, rng)]


def _rank_key(pair):
    index, ind = pair
    return (ind.fitness.mse, ind.fitness.complexity, index)


def environmental_selection(parents: Sequence[Any], offspring: Sequence[Any], n: int,
                            scfg: SelectionConfig, rng: np.random.Generator) -> list:
    """Keep the top ``ceil(elitism_rate * n)`` by MSE, fill the rest by tournament.

    Tournament winners are drawn from the non-elite remainder without
    replacement, so no individual survives twice.
    """
    pool = list(parents) + list(offspring)
    if len(pool) < n:
        raise ValueError(f"pool of {len(pool)} cannot fill a population of {n}")
    n_elite = min(n, math.ceil(scfg.elitism_rate * n - 1e-9))
    ranked = sorted(enumerate(pool), key=_rank_key)
    elite_idx = {i for i, _ in ranked[:n_elite]}
    survivors = [ind for _, ind in ranked[:n_elite]]
    residual = [ind for i, ind in enumerate(pool) if i not in elite_idx]
    beta = scfg.resolve_beta(pool)
    while len(survivors) < n:
        if len(residual) == 1:
            survivors.append(residual.pop())
            break
        survivors.append(residual.pop(tournament_index(residual, scfg.alpha, beta, rng)))
    return survivors


def best_individual(population: Sequence[Any]):
    if not population:
        raise ValueError("empty population")
    return min(enumerate(population), key=_rank_key)[1]
