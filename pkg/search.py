"""
search.py - Latency-constrained architecture search over a trained supernet.

Three methods share one evaluation loop and one trace format: natural
gradient descent on the architecture distribution, uniform random sampling
and an evolutionary search. Rewards come from the supernet store's one-shot
estimate, or from the evaluator when no store is given. Only samples within
the latency budget can become the best architecture.
"""
from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from distribution import ArchDistribution, grad_log_prob, sample
from evaluator import Evaluator, LatencyTable, latency
from search_space import (
    STRIDE_11,
    STRIDE_21,
    STRIDE_22,
    Architecture,
    SpaceConfig,
    TransformerChoice,
    enumerate_architectures,
    random_architecture,
)
from supernet import SupernetStore, oneshot_eval

LOGGER = logging.getLogger(__name__)

METHODS = ("ngd", "ea", "random")
MAX_CHILD_RETRIES = 100

RewardFn = Callable[[Architecture], float]


class NoFeasibleArchitectureError(RuntimeError):
    """Raised when no sample of a search met the latency budget."""


@dataclass(frozen=True)
class SearchConfig:
    T: int = 50
    B: int = 16
    rho: float = 0.1
    r_max: float = math.inf
    damping: float = 1e-3
    baseline_subtract: bool = False
    normalize: bool = True
    zero_infeasible: bool = False
    seed: int = 0
    workers: int = 1
    pop: int = 16
    mut_rate: float = 0.1

    def __post_init__(self):
        if self.T < 1 or self.B < 1:
            raise ValueError("T and B must be at least 1")
        if not self.rho > 0:
            raise ValueError("rho must be positive")
        if self.damping < 0:
            raise ValueError("damping must be non-negative")
        if self.pop < 2 or not 0 <= self.mut_rate <= 1:
            raise ValueError("pop must be at least 2 and mut_rate in [0, 1]")
        if self.workers < 1:
            raise ValueError("workers must be at least 1")


@dataclass
class IterationRecord:
    iteration: int
    archs: List[Architecture]
    rewards: List[float]
    latencies: List[float]
    feasible: List[bool]
    best_arch: Optional[Architecture]
    best_perf: Optional[float]

    def to_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "archs": [a.canonical for a in self.archs],
            "rewards": self.rewards,
            "latencies": self.latencies,
            "feasible": self.feasible,
            "best_arch": self.best_arch.canonical if self.best_arch is not None else None,
            "best_perf": self.best_perf,
        }


@dataclass
class SearchTrace:
    method: str
    records: List[IterationRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def samples(self) -> Iterator[Tuple[Architecture, float, float, bool]]:
        """Every evaluated sample in evaluation order: (arch, reward, latency, feasible)."""
        for record in self.records:
            yield from zip(record.archs, record.rewards, record.latencies, record.feasible)

    def best_so_far(self) -> List[Optional[float]]:
        return [r.best_perf for r in self.records]

    def write_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for record in self.records:
                f.write(json.dumps(record.to_dict(), sort_keys=True) + "\n")


@dataclass
class SearchResult:
    best: Optional[Architecture]
    best_perf: Optional[float]
    best_latency: Optional[float]
    trace: SearchTrace
    distribution: Optional[ArchDistribution] = None

    @property
    def found(self) -> bool:
        return self.best is not None


def constrained_best(trace: SearchTrace) -> Tuple[Architecture, float]:
    """
    Feasible sample with the highest reward, ties to the earliest.

    Raises:
        NoFeasibleArchitectureError: if no sample of the trace was feasible.
    """
    best: Optional[Tuple[Architecture, float]] = None
    for arch, reward, _, feasible in trace.samples():
        if feasible and (best is None or reward > best[1]):
            best = (arch, reward)
    if best is None:
        raise NoFeasibleArchitectureError("no sample satisfied the latency budget")
    return best


def make_reward(store: Optional[SupernetStore], evaluator: Optional[Evaluator]) -> RewardFn:
    if store is not None:
        return lambda arch: oneshot_eval(store, arch)
    if evaluator is None:
        raise ValueError("a search needs a supernet store or an evaluator")
    return evaluator.evaluate


class _Scorer:
    """Evaluates batches, tracks the feasible best and appends trace records."""

    def __init__(self, method: str, reward: RewardFn, table: LatencyTable, config: SpaceConfig,
                 cfg: SearchConfig, pool: Optional[ThreadPoolExecutor]):
        self.reward = reward
        self.table = table
        self.config = config
        self.cfg = cfg
        self.pool = pool
        self.trace = SearchTrace(method)
        self.best: Optional[Architecture] = None
        self.best_perf = -math.inf
        self.best_latency: Optional[float] = None
        self.evaluated = 0

    def latency(self, arch: Architecture) -> float:
        return latency(arch, self.table, self.config)

    def feasible(self, arch: Architecture) -> bool:
        return self.latency(arch) <= self.cfg.r_max

    def score(self, archs: Sequence[Architecture]) -> Tuple[List[float], List[float], List[bool]]:
        if self.pool is not None:
            rewards = list(self.pool.map(self.reward, archs))
        else:
            rewards = [self.reward(a) for a in archs]
        latencies = [self.latency(a) for a in archs]
        feasible = [lat <= self.cfg.r_max for lat in latencies]
        for arch, reward, lat, ok in zip(archs, rewards, latencies, feasible):
            if ok and reward > self.best_perf:
                self.best, self.best_perf, self.best_latency = arch, reward, lat
        self.evaluated += len(archs)
        self.trace.records.append(IterationRecord(
            len(self.trace.records), list(archs), rewards, latencies, feasible,
            self.best, self.best_perf if self.best is not None else None,
        ))
        return rewards, latencies, feasible

    def result(self, distribution: Optional[ArchDistribution] = None) -> SearchResult:
        if self.best is None:
            LOGGER.warning("%s search: no architecture met r_max=%s ms", self.trace.method, self.cfg.r_max)
            return SearchResult(None, None, None, self.trace, distribution)
        LOGGER.info("%s search: best %s reward %.6f latency %.4f ms after %d evaluations",
                    self.trace.method, self.best.canonical, self.best_perf, self.best_latency, self.evaluated)
        return SearchResult(self.best, self.best_perf, self.best_latency, self.trace, distribution)


@contextmanager
def _worker_pool(workers: int) -> Iterator[Optional[ThreadPoolExecutor]]:
    if workers <= 1:
        yield None
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        yield pool


def ngd_step(dist: ArchDistribution, fisher: np.ndarray, grad: np.ndarray,
             rho: float, damping: float) -> ArchDistribution:
    """eta <- eta + rho (F + damping I)^-1 g, solved per decision block."""
    eta = dist.flat_eta().copy()
    for s in dist.block_slices():
        if s.stop == s.start:
            continue
        block = fisher[s, s] + damping * np.eye(s.stop - s.start)
        try:
            direction = np.linalg.solve(block, grad[s])
        except np.linalg.LinAlgError:
            direction = np.linalg.lstsq(block, grad[s], rcond=None)[0]
        eta[s] += rho * direction
    return dist.with_flat_eta(eta)


def standardize(rewards: np.ndarray) -> np.ndarray:
    """Batch rewards shifted to mean 0 and scaled to unit deviation; all zeros when they are constant."""
    centered = rewards - rewards.mean()
    scale = centered.std()
    if scale == 0:
        return np.zeros_like(centered)
    return centered / scale


def ngd_search(dist0: ArchDistribution, store: Optional[SupernetStore], evaluator: Optional[Evaluator],
               latency_table: LatencyTable, cfg: SearchConfig) -> SearchResult:
    """
    Natural-gradient search on the architecture distribution.

    Every iteration draws B architectures, keeps running averages of the
    score outer products (F) and of reward-weighted scores (g) over all of
    them, feasible or not, and moves the natural parameters along the damped
    natural gradient. With cfg.normalize the batch rewards are standardized
    first, so the step length does not depend on the scale of the reward
    gaps. Only feasible samples can become the best.
    """
    config = dist0.config
    rng = np.random.default_rng(cfg.seed)
    reward = make_reward(store, evaluator)
    dist = dist0
    with _worker_pool(cfg.workers) as pool:
        scorer = _Scorer("ngd", reward, latency_table, config, cfg, pool)
        for t in range(cfg.T):
            archs = [sample(dist, rng) for _ in range(cfg.B)]
            rewards, _, feasible = scorer.score(archs)
            used = np.array(rewards, dtype=float)
            if cfg.zero_infeasible:
                used = np.where(feasible, used, 0.0)
            if cfg.normalize:
                used = standardize(used)
            elif cfg.baseline_subtract:
                used = used - used.mean()

            fisher = np.zeros((dist.dim, dist.dim))
            grad = np.zeros(dist.dim)
            for j, (arch, r) in enumerate(zip(archs, used)):
                s = grad_log_prob(dist, arch)
                fisher = (j * fisher + np.outer(s, s)) / (j + 1)
                grad = (j * grad + r * s) / (j + 1)
            dist = ngd_step(dist, fisher, grad, cfg.rho, cfg.damping)
            LOGGER.debug("ngd iteration %d: mean reward %.6f, best %.6f", t, float(np.mean(rewards)), scorer.best_perf)
    return scorer.result(dist)


def random_search(config: SpaceConfig, store: Optional[SupernetStore], evaluator: Optional[Evaluator],
                  latency_table: LatencyTable, cfg: SearchConfig) -> SearchResult:
    """T batches of B uniform architectures."""
    rng = np.random.default_rng(cfg.seed)
    reward = make_reward(store, evaluator)
    with _worker_pool(cfg.workers) as pool:
        scorer = _Scorer("random", reward, latency_table, config, cfg, pool)
        for _ in range(cfg.T):
            scorer.score([random_architecture(config, rng) for _ in range(cfg.B)])
    return scorer.result()


def gene_cardinalities(config: SpaceConfig) -> List[int]:
    """Flat decision vector layout: operator per layer, position per stride slot, transformer bits."""
    return [len(config.op_choices)] * config.M + [config.M] * len(config.slot_multiset) + [2] * (4 * config.N)


def arch_to_genome(arch: Architecture, config: SpaceConfig) -> List[int]:
    genome = [config.op_choices.index(op) for op in arch.ops]
    for stride in (STRIDE_22, STRIDE_21):
        genome.extend(p for p, s in enumerate(arch.strides) if s == stride)
    for choice in arch.seq:
        genome.extend(int(b) for b in choice.bits)
    return genome


def genome_to_arch(genome: Sequence[int], config: SpaceConfig) -> Optional[Architecture]:
    """The architecture a genome stands for, or None when two stride slots share a position."""
    M = config.M
    slots = config.slot_multiset
    ops = tuple(config.op_choices[g] for g in genome[:M])
    positions = list(genome[M:M + len(slots)])
    if len(set(positions)) != len(positions):
        return None
    strides = [STRIDE_11] * M
    for stride, position in zip(slots, positions):
        strides[position] = stride
    bits = genome[M + len(slots):]
    seq = tuple(
        TransformerChoice.from_bits("".join(str(b) for b in bits[i:i + 4])) for i in range(0, len(bits), 4)
    )
    return Architecture(tuple(strides), ops, seq)


def _rank_key(item: Tuple[Architecture, float, bool]) -> Tuple[bool, float]:
    _, reward, feasible = item
    return feasible, reward


def evolutionary_search(config: SpaceConfig, store: Optional[SupernetStore], evaluator: Optional[Evaluator],
                        latency_table: LatencyTable, cfg: SearchConfig) -> SearchResult:
    """
    Evolutionary search with the same evaluation budget T*B as NGD.

    The first generation is pop uniform architectures. Each later generation
    breeds children from the top half of the population by single-point
    crossover on the flat decision vector and per-gene mutation at mut_rate.
    Children that collide or exceed r_max are redrawn up to MAX_CHILD_RETRIES
    times, after which the first parent is copied. Survivors are the best pop
    of parents and children, feasible ones first.
    """
    rng = np.random.default_rng(cfg.seed)
    reward = make_reward(store, evaluator)
    cards = gene_cardinalities(config)
    budget = cfg.T * cfg.B

    with _worker_pool(cfg.workers) as pool:
        scorer = _Scorer("ea", reward, latency_table, config, cfg, pool)

        first = [random_architecture(config, rng) for _ in range(min(cfg.pop, budget))]
        rewards, _, feasible = scorer.score(first)
        population = sorted(zip(first, rewards, feasible), key=_rank_key, reverse=True)

        while scorer.evaluated < budget:
            n_children = min(cfg.pop, budget - scorer.evaluated)
            parents = [item[0] for item in population[:max(2, len(population) // 2)]]
            children = [_breed(parents, cards, config, scorer, cfg, rng) for _ in range(n_children)]
            rewards, _, feasible = scorer.score(children)
            population = sorted(population + list(zip(children, rewards, feasible)),
                                key=_rank_key, reverse=True)[:cfg.pop]
    return scorer.result()


def _breed(parents: Sequence[Architecture], cards: Sequence[int], config: SpaceConfig,
           scorer: _Scorer, cfg: SearchConfig, rng: np.random.Generator) -> Architecture:
    for _ in range(MAX_CHILD_RETRIES):
        i, j = rng.choice(len(parents), size=2, replace=False)
        mother, father = arch_to_genome(parents[i], config), arch_to_genome(parents[j], config)
        cut = int(rng.integers(1, len(cards))) if len(cards) > 1 else 0
        genome = mother[:cut] + father[cut:]
        for g, card in enumerate(cards):
            if rng.random() < cfg.mut_rate:
                genome[g] = int(rng.integers(card))
        child = genome_to_arch(genome, config)
        if child is not None and scorer.feasible(child):
            return child
    return parents[int(i)]


def run_search(method: str, dist0: ArchDistribution, store: Optional[SupernetStore],
               evaluator: Optional[Evaluator], latency_table: LatencyTable, cfg: SearchConfig) -> SearchResult:
    if method == "ngd":
        return ngd_search(dist0, store, evaluator, latency_table, cfg)
    if method == "ea":
        return evolutionary_search(dist0.config, store, evaluator, latency_table, cfg)
    if method == "random":
        return random_search(dist0.config, store, evaluator, latency_table, cfg)
    raise ValueError(f"unknown search method {method!r}, expected one of {', '.join(METHODS)}")


def exhaustive_search(config: SpaceConfig, store: Optional[SupernetStore], evaluator: Optional[Evaluator],
                      latency_table: LatencyTable, r_max: float = math.inf,
                      cap: int = 100_000) -> Optional[Tuple[Architecture, float]]:
    """Feasible argmax of the reward over the whole space, ties to the first enumerated; None if nothing fits."""
    reward = make_reward(store, evaluator)
    best: Optional[Tuple[Architecture, float]] = None
    for arch in enumerate_architectures(config, cap):
        if latency(arch, latency_table, config) > r_max:
            continue
        r = reward(arch)
        if best is None or r > best[1]:
            best = (arch, r)
    return best
