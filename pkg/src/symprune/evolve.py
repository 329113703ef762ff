"""Steady-state genetic programming over metric trees, plus a random-search baseline.

One iteration: tournament-select two parents from the top-k of a random
sample, subtree crossover, p-gated node mutation, opposing-operation
simplification, resample if the child duplicates a parent (or any
member), score, append, evict the worst member.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .exprcore import (ARITY, BINARY_OPS, LEAVES, UNARY_OPS, Expr, depth, format_expr,
                       is_valid, node_count, preorder, random_tree, replace_at, subtree_at)
from .fitness import FitnessCache, FitnessScore, rank_key
from .simplify import OOSCatalog, canonical_key, oos_simplify

log = logging.getLogger(__name__)

__all__ = ["EvolveConfig", "Member", "Population", "SearchLogRecord", "SearchState",
           "SearchResult", "init_population", "tournament_select", "crossover", "mutate",
           "evolve_step", "run_evolution", "random_search", "iterations_to_threshold",
           "write_log", "read_log"]


@dataclass
class EvolveConfig:
    population_size: int = 50
    iterations: int = 300
    top_k: int = 10
    sample_ratio: float = 0.5
    mutation_prob: float = 0.5
    depth_min: int = 3
    depth_max: int = 5
    seed: int = 0
    resample_retry_limit: int = 32

    def __post_init__(self):
        pool = math.ceil(self.sample_ratio * self.population_size)
        if self.population_size < 1:
            raise ValueError("population_size must be >= 1")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if not 0 < self.sample_ratio <= 1:
            raise ValueError("sample_ratio must lie in (0, 1]")
        if not 1 <= self.top_k <= pool:
            raise ValueError(f"top_k must lie in [1, ceil(sample_ratio * population_size) = {pool}]")
        if not 0 <= self.mutation_prob <= 1:
            raise ValueError("mutation_prob must lie in [0, 1]")
        if not 1 <= self.depth_min <= self.depth_max:
            raise ValueError("need 1 <= depth_min <= depth_max")
        if self.resample_retry_limit < 1:
            raise ValueError("resample_retry_limit must be >= 1")


@dataclass
class Member:
    tree: Expr
    score: FitnessScore
    index: int
    key: str
    n_nodes: int = field(init=False)

    def __post_init__(self):
        self.n_nodes = node_count(self.tree)

    @property
    def rank(self):
        return rank_key(self.score, self.n_nodes, self.index)


@dataclass
class Population:
    members: list[Member]
    capacity: int
    waivers: int = 0

    def __len__(self):
        return len(self.members)

    def keys(self) -> set[str]:
        return {m.key for m in self.members}

    def best(self) -> Member:
        return min(self.members, key=lambda m: m.rank)

    def evict_worst(self) -> Member:
        # highest score goes; equal scores evict the newest
        worst = max(self.members, key=lambda m: (m.score.value, m.index))
        self.members.remove(worst)
        return worst


@dataclass
class SearchLogRecord:
    iter: int
    offspring_expr: str
    offspring_fitness: float
    best_expr: str
    best_fitness: float
    pop_size: int
    cache_hits: int
    elapsed_ms: int

    def to_json(self) -> str:
        d = asdict(self)
        for k in ("offspring_fitness", "best_fitness"):
            if not math.isfinite(d[k]):
                d[k] = None
        return json.dumps(d, allow_nan=False)


@dataclass
class SearchState:
    population: Population
    cache: FitnessCache
    catalog: OOSCatalog | None
    next_index: int
    iteration: int = 0
    started: float = field(default_factory=time.perf_counter)


@dataclass
class SearchResult:
    records: list[SearchLogRecord]
    best_expr: str
    best_fitness: float
    total_cache_hits: int
    wall_ms: int
    population: Population | None = None
    init_best: float = math.inf

    @property
    def summary(self) -> dict:
        best = self.best_fitness if math.isfinite(self.best_fitness) else None
        return {"summary": {"best_expr": self.best_expr, "best_fitness": best,
                            "total_cache_hits": self.total_cache_hits, "wall_ms": self.wall_ms}}


# ---------------------------------------------------------------------------
# operators
# ---------------------------------------------------------------------------

def init_population(config: EvolveConfig, fitness: Callable, rng: np.random.Generator,
                    catalog: OOSCatalog | None = None) -> Population:
    """Ramped half-and-half: even slots grow full trees, odd slots grow-method trees."""
    members: list[Member] = []
    keys: set[str] = set()
    waivers = 0
    for i in range(config.population_size):
        method = "full" if i % 2 == 0 else "grow"
        for _ in range(config.resample_retry_limit):
            tree = oos_simplify(random_tree(rng, config.depth_min, config.depth_max, method), catalog)
            key = canonical_key(tree, catalog)
            if key not in keys:
                break
        else:
            waivers += 1
            log.warning("population slot %d accepted a duplicate after %d draws",
                        i, config.resample_retry_limit)
        keys.add(key)
        members.append(Member(tree, fitness(tree), i, key))
    return Population(members, config.population_size, waivers)


def tournament_select(pop: Population, r: float, k: int, rng: np.random.Generator):
    """Sample ``ceil(r * |P|)`` members, keep the best ``k``, draw two parents with replacement."""
    n = len(pop.members)
    n_draw = min(n, max(1, math.ceil(r * n)))
    drawn = rng.choice(n, size=n_draw, replace=False)
    pool = sorted((pop.members[i] for i in drawn), key=lambda m: m.rank)[:min(k, n_draw)]
    a, b = rng.integers(len(pool), size=2)
    return pool[a].tree, pool[b].tree


def crossover(p1: Expr, p2: Expr, rng: np.random.Generator, retry_limit: int = 32) -> Expr:
    """Replace a uniformly chosen preorder node of ``p1`` by a chosen subtree of ``p2``.

    Offspring outside the search space are redrawn; after ``retry_limit``
    failures ``p1`` is returned unchanged.
    """
    paths1 = [p for p, _ in preorder(p1)]
    paths2 = [p for p, _ in preorder(p2)]
    for _ in range(retry_limit):
        i = int(rng.integers(len(paths1)))
        j = int(rng.integers(len(paths2)))
        child = replace_at(p1, paths1[i], subtree_at(p2, paths2[j]))
        if is_valid(child):
            return child
    return p1


def _mutate_node(t: Expr, under_unary: bool, rng) -> str:
    if t.is_leaf:
        choices = [leaf for leaf in LEAVES if leaf != t.op]
        op = choices[rng.integers(len(choices))]
        while under_unary and op == "X":
            op = choices[rng.integers(len(choices))]
        return op
    pool = UNARY_OPS if ARITY[t.op] == 1 else BINARY_OPS
    choices = [op for op in pool if op != t.op]
    return choices[rng.integers(len(choices))]


def _mutate_once(t: Expr, rate: float, under_unary: bool, rng) -> Expr:
    op = _mutate_node(t, under_unary, rng) if rng.random() < rate else t.op
    unary = len(t.children) == 1
    kids = tuple(_mutate_once(c, rate, unary, rng) for c in t.children)
    return Expr(op, kids)


def mutate(tree: Expr, p: float, rng: np.random.Generator, retry_limit: int = 32) -> Expr:
    """With probability ``p``, resample each node's op at rate ``1/node_count``.

    Ops keep their arity and leaves stay leaves, so the structure is
    unchanged.  A mutant outside the search space is redrawn; after
    ``retry_limit`` failures the input is returned.
    """
    if rng.random() >= p:
        return tree
    rate = 1.0 / node_count(tree)
    for _ in range(retry_limit):
        child = _mutate_once(tree, rate, False, rng)
        if is_valid(child):
            return child
    return tree


# ---------------------------------------------------------------------------
# search loops
# ---------------------------------------------------------------------------

def _elapsed_ms(state_started: float, record_timing: bool) -> int:
    return int((time.perf_counter() - state_started) * 1000) if record_timing else 0


def _fresh_tree(config: EvolveConfig, rng, catalog, taken: set[str]):
    for _ in range(config.resample_retry_limit):
        d = int(rng.integers(config.depth_min, config.depth_max + 1))
        tree = oos_simplify(random_tree(rng, d, d), catalog)
        key = canonical_key(tree, catalog)
        if key not in taken:
            return tree, key, False
    return tree, key, True


def evolve_step(state: SearchState, config: EvolveConfig, rng: np.random.Generator,
                record_timing: bool = False) -> SearchLogRecord:
    pop, catalog = state.population, state.catalog
    p1, p2 = tournament_select(pop, config.sample_ratio, config.top_k, rng)
    child = crossover(p1, p2, rng, config.resample_retry_limit)
    child = mutate(child, config.mutation_prob, rng, config.resample_retry_limit)
    child = oos_simplify(child, catalog)
    key = canonical_key(child, catalog)
    taken = pop.keys()
    if key in taken or key in (canonical_key(p1, catalog), canonical_key(p2, catalog)):
        child, key, waived = _fresh_tree(config, rng, catalog, taken)
        if waived:
            pop.waivers += 1
            log.warning("iteration %d admitted a duplicate offspring", state.iteration + 1)
    score = state.cache(child)
    pop.members.append(Member(child, score, state.next_index, key))
    state.next_index += 1
    pop.evict_worst()
    state.iteration += 1
    best = pop.best()
    return SearchLogRecord(
        iter=state.iteration,
        offspring_expr=format_expr(child),
        offspring_fitness=score.value,
        best_expr=format_expr(best.tree),
        best_fitness=best.score.value,
        pop_size=len(pop),
        cache_hits=state.cache.hits,
        elapsed_ms=_elapsed_ms(state.started, record_timing),
    )


def run_evolution(config: EvolveConfig, fitness: Callable, *, catalog: OOSCatalog | None = None,
                  log_path=None, record_timing: bool = False,
                  progress: Callable | None = None) -> SearchResult:
    """Run the full search.

    ``fitness`` maps a tree to a :class:`FitnessScore`; it is wrapped in a
    :class:`FitnessCache`.  Timings are written to the log only with
    ``record_timing`` so that logs are reproducible by default.
    """
    rng = np.random.default_rng(config.seed)
    cache = FitnessCache(fitness, catalog)
    started = time.perf_counter()
    pop = init_population(config, cache, rng, catalog)
    init_best = pop.best().score.value
    state = SearchState(pop, cache, catalog, next_index=len(pop), started=started)
    records = []
    for _ in range(config.iterations):
        rec = evolve_step(state, config, rng, record_timing)
        records.append(rec)
        if progress is not None:
            progress(rec)
    best = pop.best()
    result = SearchResult(records, format_expr(best.tree), best.score.value, cache.hits,
                          _elapsed_ms(started, record_timing), pop, init_best)
    if log_path is not None:
        write_log(log_path, result)
    return result


def random_search(config: EvolveConfig, fitness: Callable, *, catalog: OOSCatalog | None = None,
                  log_path=None, record_timing: bool = False,
                  progress: Callable | None = None) -> SearchResult:
    """Score one fresh random tree per iteration and track the best so far.

    Records share the evolution schema; ``pop_size`` is 0 since no
    population is kept.
    """
    rng = np.random.default_rng(config.seed)
    cache = FitnessCache(fitness, catalog)
    started = time.perf_counter()
    records = []
    best_tree, best_score, best_nodes = None, None, None
    for it in range(1, config.iterations + 1):
        method = "full" if it % 2 else "grow"
        tree = oos_simplify(random_tree(rng, config.depth_min, config.depth_max, method), catalog)
        score = cache(tree)
        n = node_count(tree)
        if best_score is None or (score.value, n) < (best_score.value, best_nodes):
            best_tree, best_score, best_nodes = tree, score, n
        rec = SearchLogRecord(it, format_expr(tree), score.value, format_expr(best_tree),
                              best_score.value, 0, cache.hits, _elapsed_ms(started, record_timing))
        records.append(rec)
        if progress is not None:
            progress(rec)
    result = SearchResult(records, format_expr(best_tree) if best_tree is not None else "",
                          best_score.value if best_score is not None else math.inf,
                          cache.hits, _elapsed_ms(started, record_timing))
    if log_path is not None:
        write_log(log_path, result)
    return result


def iterations_to_threshold(result: SearchResult, threshold: float):
    """First iteration whose best fitness is below ``threshold``; 0 if the
    initial population already was, ``None`` if never reached."""
    if result.init_best < threshold:
        return 0
    for rec in result.records:
        if rec.best_fitness < threshold:
            return rec.iter
    return None


def write_log(path, result: SearchResult) -> None:
    lines = [rec.to_json() for rec in result.records]
    lines.append(json.dumps(result.summary, allow_nan=False))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_log(path) -> tuple[list[dict], dict | None]:
    """Return ``(records, summary)``; null fitness values come back as ``inf``."""
    records, summary = [], None
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ValueError(f"log line {lineno} is not JSON: {exc}") from None
        if "summary" in obj:
            summary = obj["summary"]
            continue
        for k in ("offspring_fitness", "best_fitness"):
            if obj.get(k) is None:
                obj[k] = math.inf
        records.append(obj)
    return records, summary
