"""Variation operators over variable-length chromosomes.

Real genes (weight mean/std, and feature-map counts treated as reals then
rounded) use simulated binary crossover and bounded polynomial mutation.
Kernel sizes are categorical: crossover swaps them, mutation resamples them.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .genome import BlockGene, Chromosome, EncodingConfig, TailGene, random_block, random_chromosome
from .selection import SelectionConfig, tournament_index


@dataclass(frozen=True)
class VariationConfig:
    eta_c: float = 1.0
    eta_m: float = 1.0
    p_crossover: float = 0.9
    p_mutation: float = 0.2
    kernel_swap_prob: float = 0.5

    def __post_init__(self):
        for name in ("p_crossover", "p_mutation", "kernel_swap_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.eta_c <= 0 or self.eta_m <= 0:
            raise ValueError("distribution indices must be > 0")


def init_population(n: int, cfg: EncodingConfig, rng: np.random.Generator) -> list[Chromosome]:
    if n < 2:
        raise ValueError(f"population size must be >= 2, got {n}")
    return [random_chromosome(cfg, rng) for _ in range(n)]


# ---------------------------------------------------------------- SBX / PM


def sbx_spread(u: float, eta: float) -> float:
    if u <= 0.5:
        return (2.0 * u) ** (1.0 / (eta + 1.0))
    return (1.0 / (2.0 * (1.0 - u))) ** (1.0 / (eta + 1.0))


def sbx_children(x1: float, x2: float, eta: float, u: float) -> tuple[float, float]:
    """Unclamped SBX children for a given uniform draw ``u``."""
    beta = sbx_spread(u, eta)
    c1 = 0.5 * ((1.0 + beta) * x1 + (1.0 - beta) * x2)
    c2 = 0.5 * ((1.0 - beta) * x1 + (1.0 + beta) * x2)
    return c1, c2


def sbx_pair(x1: float, x2: float, eta_c: float, lo: float, hi: float,
             rng: np.random.Generator) -> tuple[float, float]:
    if lo > hi:
        raise ValueError(f"invalid bounds [{lo}, {hi}]")
    u = float(rng.random())
    if x1 == x2:
        # exact identity; the blend formula can drift by an ulp
        return min(max(x1, lo), hi), min(max(x2, lo), hi)
    c1, c2 = sbx_children(x1, x2, eta_c, u)
    return min(max(c1, lo), hi), min(max(c2, lo), hi)


def pm_delta(x: float, eta: float, lo: float, hi: float, u: float) -> float:
    """Normalised bounded polynomial-mutation step for a given draw ``u``."""
    span = hi - lo
    d1 = (x - lo) / span
    d2 = (hi - x) / span
    power = 1.0 / (eta + 1.0)
    if u < 0.5:
        val = 2.0 * u + (1.0 - 2.0 * u) * (1.0 - d1) ** (eta + 1.0)
        return val ** power - 1.0
    val = 2.0 * (1.0 - u) + 2.0 * (u - 0.5) * (1.0 - d2) ** (eta + 1.0)
    return 1.0 - val ** power


def polynomial_mutate(x: float, eta_m: float, lo: float, hi: float,
                      rng: np.random.Generator) -> float:
    if lo >= hi:
        raise ValueError(f"invalid bounds [{lo}, {hi}]")
    y = x + pm_delta(x, eta_m, lo, hi, float(rng.random())) * (hi - lo)
    return min(max(y, lo), hi)


def _round_maps(x: float, cfg: EncodingConfig) -> int:
    return int(min(max(round(x), cfg.f_min), cfg.f_max))


# ---------------------------------------------------------------- crossover


def _cross_blocks(a: BlockGene, b: BlockGene, vcfg: VariationConfig, ecfg: EncodingConfig, rng):
    fa, fb = sbx_pair(a.feature_maps, b.feature_maps, vcfg.eta_c, ecfg.f_min, ecfg.f_max, rng)
    ma, mb = sbx_pair(a.weight_mean, b.weight_mean, vcfg.eta_c, *ecfg.mean_range, rng)
    sa, sb = sbx_pair(a.weight_std, b.weight_std, vcfg.eta_c, *ecfg.std_range, rng)
    ka, kb = a.kernel_size, b.kernel_size
    if rng.random() < vcfg.kernel_swap_prob:
        ka, kb = kb, ka
    return (BlockGene(ka, _round_maps(fa, ecfg), ma, sa),
            BlockGene(kb, _round_maps(fb, ecfg), mb, sb))


def _cross_init_genes(a, b, vcfg, ecfg, rng):
    """SBX on weight mean/std only; used wherever a tail takes part."""
    ma, mb = sbx_pair(a.weight_mean, b.weight_mean, vcfg.eta_c, *ecfg.mean_range, rng)
    sa, sb = sbx_pair(a.weight_std, b.weight_std, vcfg.eta_c, *ecfg.std_range, rng)
    return replace(a, weight_mean=ma, weight_std=sa), replace(b, weight_mean=mb, weight_std=sb)


def crossover_chromosomes(p1: Chromosome, p2: Chromosome, vcfg: VariationConfig,
                          ecfg: EncodingConfig, rng: np.random.Generator) -> tuple[Chromosome, Chromosome]:
    """Block-aligned crossover; each child keeps its parent's length.

    Blocks pair up by position. With unequal lengths the shorter parent's
    tail pairs with the longer parent's block at the same position, and only
    the weight-init genes of that pair cross. Remaining blocks and the longer
    parent's tail pass through unchanged.
    """
    b1, b2 = list(p1.blocks), list(p2.blocks)
    t1, t2 = p1.tail, p2.tail
    n = min(len(b1), len(b2))
    for i in range(n):
        b1[i], b2[i] = _cross_blocks(b1[i], b2[i], vcfg, ecfg, rng)
    if len(b1) == len(b2):
        t1, t2 = _cross_init_genes(t1, t2, vcfg, ecfg, rng)
    elif len(b1) < len(b2):
        t1, b2[n] = _cross_init_genes(t1, b2[n], vcfg, ecfg, rng)
    else:
        b1[n], t2 = _cross_init_genes(b1[n], t2, vcfg, ecfg, rng)
    return Chromosome(tuple(b1), t1), Chromosome(tuple(b2), t2)


# ---------------------------------------------------------------- mutation


def _maybe_pm(x: float, bounds, p: float, eta: float, rng) -> float:
    if rng.random() < p and bounds[0] < bounds[1]:
        return polynomial_mutate(x, eta, bounds[0], bounds[1], rng)
    return x


def mutate_chromosome(c: Chromosome, vcfg: VariationConfig, ecfg: EncodingConfig,
                      rng: np.random.Generator) -> Chromosome:
    """Per-gene polynomial mutation followed by an add/remove/keep depth move."""
    p = 1.0 / (3 * len(c.blocks) + 2)
    blocks = []
    for b in c.blocks:
        kernel = b.kernel_size
        if rng.random() < p:
            kernel = int(rng.choice(ecfg.kernel_sizes))
        maps = b.feature_maps
        if rng.random() < p and ecfg.f_min < ecfg.f_max:
            maps = _round_maps(polynomial_mutate(float(maps), vcfg.eta_m, ecfg.f_min, ecfg.f_max, rng), ecfg)
        mean = _maybe_pm(b.weight_mean, ecfg.mean_range, p, vcfg.eta_m, rng)
        std = _maybe_pm(b.weight_std, ecfg.std_range, p, vcfg.eta_m, rng)
        blocks.append(BlockGene(kernel, maps, mean, std))
    tail = TailGene(_maybe_pm(c.tail.weight_mean, ecfg.mean_range, p, vcfg.eta_m, rng),
                    _maybe_pm(c.tail.weight_std, ecfg.std_range, p, vcfg.eta_m, rng))

    pos = int(rng.integers(len(blocks)))
    move = int(rng.integers(3))
    if move == 0 and len(blocks) < ecfg.n_max:
        blocks.insert(pos, random_block(ecfg, rng))
    elif move == 1 and len(blocks) > ecfg.n_min:
        del blocks[pos]
    return Chromosome(tuple(blocks), tail)


# ---------------------------------------------------------------- offspring


@dataclass(frozen=True)
class Offspring:
    chromosome: Chromosome
    parents: tuple[int, int]
    operator: str


def breed(population, count: int, vcfg: VariationConfig, ecfg: EncodingConfig,
          scfg: SelectionConfig, rng: np.random.Generator) -> list[Offspring]:
    """Offspring with lineage: parent indices into ``population`` and the operators applied."""
    if not population:
        raise ValueError("empty population")
    beta = scfg.resolve_beta(population)
    out: list[Offspring] = []
    while len(out) < count:
        i = tournament_index(population, scfg.alpha, beta, rng)
        j = tournament_index(population, scfg.alpha, beta, rng)
        c1, c2 = population[i].chromosome, population[j].chromosome
        crossed = rng.random() < vcfg.p_crossover
        if crossed:
            c1, c2 = crossover_chromosomes(c1, c2, vcfg, ecfg, rng)
        for child, parents in ((c1, (i, j)), (c2, (j, i))):
            ops = ["crossover"] if crossed else []
            if rng.random() < vcfg.p_mutation:
                child = mutate_chromosome(child, vcfg, ecfg, rng)
                ops.append("mutation")
            out.append(Offspring(child, parents, "+".join(ops) or "copy"))
    return out[:count]


def generate_offspring(population, count: int, vcfg: VariationConfig, ecfg: EncodingConfig,
                       scfg: SelectionConfig, rng: np.random.Generator) -> list[Chromosome]:
    return [o.chromosome for o in breed(population, count, vcfg, ecfg, scfg, rng)]
