"""Evolution loop, fitness evaluation, final training and whole-cube inference."""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .data import HsiCube, PatchSet
from .genome import Chromosome, EncodingConfig, build_network, encoding_to_dict, param_count
from .operators import VariationConfig, breed, init_population
from .selection import FitnessRecord, SelectionConfig, best_individual, environmental_selection
from .tensor import Adam, Network, mse_loss

log = logging.getLogger(__name__)

# stream tags for derive_seed
NOISE, SPLIT, EVOLVE, WEIGHTS, FINAL = range(5)


def derive_seed(seed: int, *keys: int) -> int:
    """Independent 63-bit seed for the stream addressed by ``(seed, *keys)``."""
    state = np.random.SeedSequence([int(seed), *map(int, keys)]).generate_state(2, np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1]))


def stream(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *keys))


@dataclass(frozen=True)
class EvolutionConfig:
    population_size: int = 30
    generations: int = 10
    encoding: EncodingConfig = field(default_factory=EncodingConfig)
    variation: VariationConfig = field(default_factory=VariationConfig)
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    eval_lr: float = 0.004
    eval_epochs: int = 1
    final_lr: float = 0.001
    batch_size: int = 100
    final_patience: int = 5
    final_max_epochs: int = 500
    holdout_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.population_size < 2:
            raise ValueError("population_size must be >= 2")
        if self.generations < 1:
            raise ValueError("generations must be >= 1")
        if self.eval_epochs < 1 or self.batch_size < 1:
            raise ValueError("eval_epochs and batch_size must be >= 1")
        if self.final_patience < 1 or self.final_max_epochs < 1:
            raise ValueError("final_patience and final_max_epochs must be >= 1")
        if not 0 < self.holdout_fraction < 1:
            raise ValueError("holdout_fraction must lie in (0, 1)")

    @classmethod
    def full(cls, **overrides) -> EvolutionConfig:
        return cls(**overrides)

    @classmethod
    def desk(cls, **overrides) -> EvolutionConfig:
        # small data: tiny batches and more epochs keep the Adam step count near full scale
        base = dict(population_size=8, generations=5, encoding=EncodingConfig.desk(), batch_size=4,
                    eval_epochs=40, final_lr=0.002, final_patience=150, final_max_epochs=2000)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoding"] = encoding_to_dict(self.encoding)
        return d


class TrainingDivergedError(RuntimeError):
    pass


# ---------------------------------------------------------------- training primitives


def train_epoch(net: Network, opt: Adam, x: np.ndarray, y: np.ndarray, batch_size: int,
                order: np.ndarray | None = None) -> float:
    """One pass of minibatch Adam; returns the element-weighted mean batch loss."""
    net.train()
    idx = np.arange(len(x)) if order is None else order
    total, count = 0.0, 0
    for start in range(0, len(idx), batch_size):
        b = idx[start:start + batch_size]
        net.zero_grad()
        out = net.forward(x[b])
        loss, grad = mse_loss(out, y[b])
        if not math.isfinite(loss):
            raise TrainingDivergedError(f"non-finite loss at batch starting {start}")
        net.backward(grad)
        opt.step()
        total += loss * grad.size
        count += grad.size
    return total / count


def evaluate_mse(net: Network, x: np.ndarray, y: np.ndarray, batch_size: int) -> float:
    """Eval-mode MSE over all elements of the set."""
    mode = net.mode
    net.eval()
    sq, count = 0.0, 0
    for start in range(0, len(x), batch_size):
        diff = net.forward(x[start:start + batch_size]) - y[start:start + batch_size]
        sq += float(np.sum(diff * diff))
        count += diff.size
    if mode == "train":
        net.train()
    return sq / count


def _arrays(data) -> tuple[np.ndarray, np.ndarray]:
    return data.nchw() if isinstance(data, PatchSet) else data


def evaluate_fitness(c: Chromosome, train_set, eval_set, cfg: EvolutionConfig,
                     weight_seed: int) -> FitnessRecord:
    """Short unshuffled training from gene-driven weights, scored on the eval set.

    A diverging individual scores ``mse = inf`` instead of raising.
    """
    xt, yt = _arrays(train_set)
    xe, ye = _arrays(eval_set)
    channels = xt.shape[1]
    complexity = param_count(c, channels, cfg.encoding)
    net = build_network(c, channels, cfg.encoding, np.random.default_rng(weight_seed))
    opt = Adam(net, lr=cfg.eval_lr)
    with np.errstate(all="ignore"):
        try:
            for _ in range(cfg.eval_epochs):
                train_epoch(net, opt, xt, yt, cfg.batch_size)
            mse = evaluate_mse(net, xe, ye, cfg.batch_size)
        except TrainingDivergedError:
            mse = math.inf
    if not math.isfinite(mse):
        mse = math.inf
    return FitnessRecord(mse, complexity)


# ---------------------------------------------------------------- evolution


@dataclass
class Individual:
    chromosome: Chromosome
    fitness: FitnessRecord
    uid: str
    weight_seed: int


@dataclass
class RunHistory:
    seed: int
    config: dict
    records: list[dict] = field(default_factory=list)
    generations: list[dict] = field(default_factory=list)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)

    def summary(self) -> dict:
        return {
            "seed": self.seed,
            "config": self.config,
            "generations": self.generations,
            "best_mse": [g["best_mse"] for g in self.generations],
            "evaluations": sum(not r["cache_hit"] for r in self.records),
            "cache_hits": sum(r["cache_hit"] for r in self.records),
        }


_WORKER: dict = {}


def _init_worker(xt, yt, xe, ye, cfg):
    _WORKER.update(xt=xt, yt=yt, xe=xe, ye=ye, cfg=cfg)


def _worker_eval(task):
    c, seed = task
    w = _WORKER
    return evaluate_fitness(c, (w["xt"], w["yt"]), (w["xe"], w["ye"]), w["cfg"], seed)


class _Evaluator:
    """Fitness evaluation with a digest-keyed cache and optional process pool."""

    def __init__(self, cfg, xt, yt, xe, ye, jobs: int):
        self.cfg = cfg
        self.data = (xt, yt, xe, ye)
        self.cache: dict[str, FitnessRecord] = {}
        self.pool = None
        if jobs > 1:
            self.pool = ProcessPoolExecutor(max_workers=jobs, initializer=_init_worker,
                                            initargs=(xt, yt, xe, ye, cfg))

    def close(self):
        if self.pool is not None:
            self.pool.shutdown()

    def run(self, chromosomes: list[Chromosome], seeds: list[int]) -> list[tuple[FitnessRecord, bool]]:
        todo, seen = [], set()
        for c, s in zip(chromosomes, seeds):
            d = c.digest()
            if d not in self.cache and d not in seen:
                seen.add(d)
                todo.append((c, s))
        if self.pool is None:
            xt, yt, xe, ye = self.data
            results = [evaluate_fitness(c, (xt, yt), (xe, ye), self.cfg, s) for c, s in todo]
        else:
            results = list(self.pool.map(_worker_eval, todo))
        fresh = set()
        for (c, _), rec in zip(todo, results):
            self.cache[c.digest()] = rec
            fresh.add(c.digest())
        out = []
        for c in chromosomes:
            d = c.digest()
            hit = d not in fresh
            fresh.discard(d)
            out.append((self.cache[d], hit))
        return out


def _record(gen, index, ind, digest, parents, operator, hit):
    return {
        "generation": gen,
        "index": index,
        "uid": ind.uid,
        "digest": digest,
        "genome": ind.chromosome.to_dict(),
        "mse": ind.fitness.mse,
        "complexity": ind.fitness.complexity,
        "parents": parents,
        "operator": operator,
        "cache_hit": hit,
        "weight_seed": ind.weight_seed,
    }


def _generation_summary(gen, population):
    mses = [p.fitness.mse for p in population]
    best = best_individual(population)
    return {
        "generation": gen,
        "best_mse": best.fitness.mse,
        "best_uid": best.uid,
        "best_complexity": best.fitness.complexity,
        "mean_mse": float(np.mean(mses)),
        "population": [p.uid for p in population],
    }


def evolve(cfg: EvolutionConfig, train_set, eval_set, rng: np.random.Generator | None = None,
           jobs: int = 1, progress: Callable[[dict], None] | None = None):
    """Generational GA: initial population, then breed / evaluate / survive per generation.

    Returns ``(history, best_chromosome)``. Weight initialisation of the
    individual at ``(generation, index)`` draws from its own stream, so the
    result does not depend on ``jobs``.
    """
    xt, yt = _arrays(train_set)
    xe, ye = _arrays(eval_set)
    if len(xt) == 0 or len(xe) == 0:
        raise ValueError("training and evaluation sets must be non-empty")
    rng = stream(cfg.seed, EVOLVE) if rng is None else rng
    history = RunHistory(seed=cfg.seed, config=cfg.to_dict())
    evaluator = _Evaluator(cfg, xt, yt, xe, ye, jobs)
    n = cfg.population_size
    try:
        chromosomes = init_population(n, cfg.encoding, rng)
        seeds = [derive_seed(cfg.seed, WEIGHTS, 0, i) for i in range(n)]
        population = []
        for i, ((rec, hit), c, s) in enumerate(zip(evaluator.run(chromosomes, seeds), chromosomes, seeds)):
            ind = Individual(c, rec, f"g0i{i}", s)
            population.append(ind)
            history.records.append(_record(0, i, ind, c.digest(), [], "init", hit))
        history.generations.append(_generation_summary(0, population))
        if progress:
            progress(history.generations[-1])

        for gen in range(1, cfg.generations + 1):
            kids = breed(population, n, cfg.variation, cfg.encoding, cfg.selection, rng)
            chromosomes = [k.chromosome for k in kids]
            seeds = [derive_seed(cfg.seed, WEIGHTS, gen, i) for i in range(len(kids))]
            offspring = []
            for i, (k, (rec, hit), s) in enumerate(zip(kids, evaluator.run(chromosomes, seeds), seeds)):
                ind = Individual(k.chromosome, rec, f"g{gen}i{i}", s)
                offspring.append(ind)
                parents = [population[p].uid for p in k.parents]
                history.records.append(_record(gen, i, ind, k.chromosome.digest(), parents,
                                               k.operator, hit))
            population = environmental_selection(population, offspring, n, cfg.selection, rng)
            history.generations.append(_generation_summary(gen, population))
            if progress:
                progress(history.generations[-1])
    finally:
        evaluator.close()
    return history, best_individual(population).chromosome


# ---------------------------------------------------------------- final training


@dataclass
class FinalTraining:
    network: Network
    curve: list[dict]
    best_epoch: int


def final_train(best: Chromosome, combined, cfg: EvolutionConfig,
                rng: np.random.Generator) -> FinalTraining:
    """Shuffled Adam training with early stopping on a held-out slice.

    Stops after ``final_patience`` consecutive epochs without a lower
    held-out MSE (or at ``final_max_epochs``) and restores the best epoch's
    parameters.
    """
    x, y = _arrays(combined)
    if len(x) < 2:
        raise ValueError("final training needs at least two patches")
    order = rng.permutation(len(x))
    n_hold = min(len(x) - 1, max(1, int(round(cfg.holdout_fraction * len(x)))))
    hold, fit = order[:n_hold], order[n_hold:]
    xh, yh, xf, yf = x[hold], y[hold], x[fit], y[fit]

    net = build_network(best, x.shape[1], cfg.encoding, np.random.default_rng(int(rng.integers(2**63))))
    opt = Adam(net, lr=cfg.final_lr)
    curve = []
    best_mse, best_epoch, best_state, stale = math.inf, 0, net.state_dict(), 0
    for epoch in range(1, cfg.final_max_epochs + 1):
        with np.errstate(over="ignore", invalid="ignore"):
            train_mse = train_epoch(net, opt, xf, yf, cfg.batch_size, rng.permutation(len(xf)))
            hold_mse = evaluate_mse(net, xh, yh, cfg.batch_size)
        if not math.isfinite(hold_mse):
            raise TrainingDivergedError(f"non-finite held-out MSE at epoch {epoch}")
        curve.append({"epoch": epoch, "train_mse": train_mse, "holdout_mse": hold_mse})
        log.debug("epoch %d train %.6g holdout %.6g", epoch, train_mse, hold_mse)
        if hold_mse < best_mse:
            best_mse, best_epoch, best_state, stale = hold_mse, epoch, net.state_dict(), 0
        else:
            stale += 1
            if stale >= cfg.final_patience:
                break
    net.load_state_dict(best_state)
    net.eval()
    return FinalTraining(net, curve, best_epoch)


# ---------------------------------------------------------------- inference


def _tile_starts(n: int, tile: int, step: int) -> list[int]:
    if n <= tile:
        return [0]
    starts = list(range(0, n - tile + 1, step))
    if starts[-1] != n - tile:
        starts.append(n - tile)
    return starts


def denoise_array(model: Network, x: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """Eval-mode forward over an NCHW batch, restoring the model's mode afterwards."""
    mode = model.mode
    model.eval()
    out = np.concatenate([model.forward(x[i:i + batch_size]) for i in range(0, len(x), batch_size)])
    if mode == "train":
        model.train()
    return out


def denoise_cube(model: Network, noisy: HsiCube, tile: int = 32, overlap: int = 8,
                 batch_size: int = 16) -> HsiCube:
    """Tile the cube, denoise every tile jointly over all bands, average overlaps."""
    h, w, c = noisy.shape
    if c != model.in_channels:
        raise ValueError(f"cube has {c} bands, model expects {model.in_channels}")
    if overlap < 0 or overlap >= tile:
        raise ValueError(f"need 0 <= overlap < tile, got overlap={overlap}, tile={tile}")
    th, tw = min(tile, h), min(tile, w)
    if min(th, tw) < model.max_kernel:
        raise ValueError(f"tile {th}x{tw} smaller than the largest kernel {model.max_kernel}")
    step = tile - overlap
    coords = [(r, q) for r in _tile_starts(h, th, step) for q in _tile_starts(w, tw, step)]
    chw = noisy.data.transpose(2, 0, 1).astype(np.float64)
    tiles = np.stack([chw[:, r:r + th, q:q + tw] for r, q in coords])
    outs = denoise_array(model, tiles, batch_size)
    acc = np.zeros((c, h, w))
    hits = np.zeros((h, w))
    for (r, q), o in zip(coords, outs):
        acc[:, r:r + th, q:q + tw] += o
        hits[r:r + th, q:q + tw] += 1
    return HsiCube((acc / hits).transpose(1, 2, 0), noisy.value_range)
