"""Genetic algorithm over architecture genomes under a parameter cap.

Selection is rank-based: each generation the population is sorted by fitness
(ties keep population order), the top ``parent_pool`` genomes form the parent
set, the best individual survives unchanged, and the rest of the next
generation is bred by uniform per-gene crossover followed by mutation.
Fitness values are cached per genome, so each distinct genome is scored once.
"""
from __future__ import annotations

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import proxies
from .archmodel import instantiate, random_batch
from .errors import CodecError, ConfigurationError, InputError
from .seeds import derive_seed
from .searchspace import SpaceSpec, decode, format_genome, genome_params, param_count, validate_genome

INIT_DRAWS = 10_000
REPAIR_ATTEMPTS = 20


@dataclass(frozen=True)
class GaConfig:
    population: int = 50
    generations: int = 40
    crossover_prob: float = 1.0
    mutation_prob: float = 0.1
    parent_pool: int = 10
    param_cap: Optional[int] = None  # None: use the space's cap
    fitness: str = "w_pca"
    seed: int = 0

    def __post_init__(self):
        if self.population < 2:
            raise InputError("population must be at least 2")
        if self.generations < 1 or self.parent_pool < 1:
            raise InputError("generations and parent_pool must be positive")
        for p in (self.crossover_prob, self.mutation_prob):
            if not 0.0 <= p <= 1.0:
                raise InputError(f"probability {p} outside [0, 1]")


@dataclass
class SearchReport:
    best_genome: tuple
    best_fitness: float
    best_per_generation: list
    fitness_trace: list  # best-ever fitness after each generation
    parent_sets: list  # parent pool per generation
    evaluated: list  # (genome, fitness, params) in first-evaluation order
    evaluations: int
    wall_time: float
    final_config: dict
    breakdown: dict
    seed: int

    def to_dict(self, include_timing=True) -> dict:
        d = {
            "best_genome": format_genome(self.best_genome),
            "best_fitness": self.best_fitness,
            "best_per_generation": [format_genome(g) for g in self.best_per_generation],
            "fitness_trace": self.fitness_trace,
            "evaluations": self.evaluations,
            "evaluated": [{"genome": format_genome(g), "fitness": f, "params": p} for g, f, p in self.evaluated],
            "final_config": self.final_config,
            "param_breakdown": self.breakdown,
            "seed": self.seed,
        }
        if include_timing:
            d["wall_time"] = self.wall_time
        return d


# ---------------------------------------------------------------- operators

def crossover(p1, p2, rng) -> tuple:
    """Uniform crossover: gene i comes from p1 when the draw is below 0.5."""
    if len(p1) != len(p2):
        raise CodecError(f"parents have different lengths ({len(p1)} vs {len(p2)})")
    return tuple(a if rng.random() < 0.5 else b for a, b in zip(p1, p2))


def mutate(genome, space: SpaceSpec, rng, prob: float = 0.1) -> tuple:
    """Replace each gene with probability ``prob`` by a different value in range."""
    k = space.genes_per_layer
    out = []
    for g in genome:
        if rng.random() < prob:
            new = int(rng.integers(0, k - 1))
            g = new + 1 if new >= g else new
        out.append(int(g))
    return tuple(out)


# ---------------------------------------------------------------- fitness

class ProxyFitness:
    """Picklable scorer: genome -> proxy value on a fixed batch.

    Each genome gets weights seeded by ``derive_seed(weight_seed, genome)``, so
    scores are independent of evaluation order.
    """

    def __init__(self, space: SpaceSpec, proxy: str = "w_pca", eta: float = proxies.DEFAULT_ETA,
                 weight_seed: int = 0, batch=None, batch_size: int = 128, seq_len: int = 128,
                 batch_seed: int = 0, method: str = "lapack"):
        if proxy not in proxies.PROXIES:
            raise InputError(f"unknown proxy {proxy!r}")
        self.space = space
        self.proxy = proxy
        self.eta = eta
        self.weight_seed = weight_seed
        self.method = method
        if batch is None and proxy != "params":
            batch = random_batch(space.vocab_size, batch_size, seq_len, batch_seed)
        self.batch = batch

    def __call__(self, genome) -> float:
        config = decode(genome, self.space)
        if self.proxy == "params":
            return float(param_count(config).total)
        model = instantiate(config, derive_seed(self.weight_seed, format_genome(genome)))
        return proxies.evaluate(self.proxy, model, self.batch, self.eta, self.method)


# ---------------------------------------------------------------- search

class _Evaluator:
    def __init__(self, scorer, jobs):
        self.scorer = scorer
        self.cache = {}
        self.order = []
        self.pool = ProcessPoolExecutor(jobs) if jobs > 1 else None

    def __call__(self, genomes):
        todo = list(dict.fromkeys(g for g in genomes if g not in self.cache))
        if self.pool is not None and len(todo) > 1:
            values = list(self.pool.map(self.scorer, todo))
        else:
            values = [self.scorer(g) for g in todo]
        for g, v in zip(todo, values):
            self.cache[g] = float(v)
            self.order.append(g)
        return [self.cache[g] for g in genomes]

    def close(self):
        if self.pool is not None:
            self.pool.shutdown()


def _initial_population(space, ga, rng, feasible):
    pop = []
    draws = 0
    while len(pop) < ga.population:
        g = tuple(int(x) for x in rng.integers(0, space.genes_per_layer, space.m))
        draws += 1
        if feasible(g):
            pop.append(g)
        elif not pop and draws >= INIT_DRAWS:
            raise ConfigurationError(f"no genome under the parameter cap in {INIT_DRAWS} random draws")
        if draws >= INIT_DRAWS * ga.population:
            raise ConfigurationError("feasible genomes too rare to fill the initial population")
    return pop


def _breed(pool, space, ga, rng, feasible):
    """One feasible child: crossover, then up to REPAIR_ATTEMPTS mutation redraws."""
    for _ in range(INIT_DRAWS):
        if len(pool) > 1:
            i, j = rng.choice(len(pool), size=2, replace=False)
        else:
            i = j = 0
        p1, p2 = pool[int(i)], pool[int(j)]
        base = crossover(p1, p2, rng) if rng.random() < ga.crossover_prob else p1
        for _ in range(REPAIR_ATTEMPTS):
            child = mutate(base, space, rng, ga.mutation_prob)
            if feasible(child):
                return child
    raise ConfigurationError("could not breed a feasible child")


def run(space: SpaceSpec, ga: GaConfig, scorer: Callable, jobs: int = 1) -> SearchReport:
    """Maximise ``scorer`` over genomes of ``space`` with param_count <= cap."""
    start = time.perf_counter()
    cap = ga.param_cap if ga.param_cap is not None else space.param_cap
    params_cache = {}

    def n_params(g):
        if g not in params_cache:
            params_cache[g] = genome_params(g, space)
        return params_cache[g]

    def feasible(g):
        return cap is None or n_params(g) <= cap

    rng = np.random.default_rng(ga.seed)
    evaluate = _Evaluator(scorer, jobs)
    try:
        population = _initial_population(space, ga, rng, feasible)
        best, best_fit = None, -np.inf
        best_per_gen, trace, parent_sets = [], [], []
        for gen in range(ga.generations):
            fits = evaluate(population)
            order = sorted(range(len(population)), key=lambda i: -fits[i])
            ranked = [population[i] for i in order]
            if fits[order[0]] > best_fit:
                best, best_fit = ranked[0], fits[order[0]]
            best_per_gen.append(ranked[0])
            trace.append(best_fit)
            pool = ranked[:ga.parent_pool]
            parent_sets.append(pool)
            if gen == ga.generations - 1:
                break
            nxt = [best]
            while len(nxt) < ga.population:
                nxt.append(_breed(pool, space, ga, rng, feasible))
            population = nxt
    finally:
        evaluate.close()

    for g in population:
        validate_genome(g, space)
    config = decode(best, space)
    return SearchReport(
        best_genome=best,
        best_fitness=best_fit,
        best_per_generation=best_per_gen,
        fitness_trace=trace,
        parent_sets=parent_sets,
        evaluated=[(g, evaluate.cache[g], n_params(g)) for g in evaluate.order],
        evaluations=len(evaluate.order),
        wall_time=time.perf_counter() - start,
        final_config=config.to_dict(),
        breakdown=param_count(config).to_dict(),
        seed=ga.seed,
    )
