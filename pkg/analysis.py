"""
analysis.py - Rank correlations and the experiment harnesses built on them.
"""
from __future__ import annotations

import csv
import heapq
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List, Mapping, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import kendalltau, pearsonr, spearmanr

from distribution import ArchDistribution
from evaluator import Evaluator, LatencyTable, SyntheticBenchmark
from search import SearchConfig, SearchResult, SearchTrace, exhaustive_search, run_search
from search_space import Architecture, SpaceConfig, random_architecture
from supernet import DEFAULT_LOOKUP_SAMPLES, SupernetStore, oneshot_eval, train_progressive

LOGGER = logging.getLogger(__name__)

DEFAULT_N_ARCHS = 70
TOP_K = 16
# pseudo-strategy: a store of random scores, the independence baseline
RANDOM_SCORES = "random_scores"


class UndefinedCorrelationError(ValueError):
    """Raised when a correlation is undefined, e.g. one axis is constant."""


@dataclass
class PairedScores:
    items: List[Tuple[float, float]] = field(default_factory=list)

    def __post_init__(self):
        self.items = [(float(a), float(b)) for a, b in self.items]
        if any(np.isnan(a) or np.isnan(b) for a, b in self.items):
            raise ValueError("paired scores must not contain NaN")

    @classmethod
    def from_arrays(cls, standalone: Sequence[float], oneshot: Sequence[float]) -> "PairedScores":
        if len(standalone) != len(oneshot):
            raise ValueError("standalone and oneshot scores differ in length")
        return cls(list(zip(standalone, oneshot)))

    @property
    def standalone(self) -> np.ndarray:
        return np.array([a for a, _ in self.items])

    @property
    def oneshot(self) -> np.ndarray:
        return np.array([b for _, b in self.items])

    def __len__(self) -> int:
        return len(self.items)


def _axes(pairs) -> Tuple[np.ndarray, np.ndarray]:
    if not isinstance(pairs, PairedScores):
        pairs = PairedScores(list(pairs))
    if len(pairs) < 2:
        raise UndefinedCorrelationError("a correlation needs at least two pairs")
    x, y = pairs.standalone, pairs.oneshot
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise UndefinedCorrelationError("one axis is constant")
    return x, y


def kendall_tau(pairs) -> float:
    """Kendall's tau-b, tie corrected."""
    x, y = _axes(pairs)
    return float(kendalltau(x, y)[0])


def spearman_rho(pairs) -> float:
    x, y = _axes(pairs)
    return float(spearmanr(x, y)[0])


def pearson_r(pairs) -> float:
    x, y = _axes(pairs)
    return float(pearsonr(x, y)[0])


class CorrelationRow(NamedTuple):
    strategy: str
    seed: int
    kendall: float
    spearman: float
    pearson: float


@dataclass
class CorrelationTable:
    rows: List[CorrelationRow] = field(default_factory=list)
    scatter: Dict[Tuple[str, int], PairedScores] = field(default_factory=dict)

    def mean(self, strategy: str, metric: str = "kendall") -> float:
        values = [getattr(r, metric) for r in self.rows if r.strategy == strategy]
        return float(np.mean(values))

    def strategies(self) -> List[str]:
        return list(dict.fromkeys(r.strategy for r in self.rows))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(CorrelationRow._fields)
            for row in self.rows:
                writer.writerow([row.strategy, row.seed, repr(row.kendall), repr(row.spearman), repr(row.pearson)])

    def write_scatter(self, directory) -> List[str]:
        written = []
        for (strategy, seed), pairs in self.scatter.items():
            path = f"{directory}/scatter_{strategy}_seed{seed}.csv"
            with open(path, "w", newline="", encoding="utf-8") as f:
                writer = csv.writer(f)
                writer.writerow(["standalone", "oneshot"])
                for a, b in pairs.items:
                    writer.writerow([repr(a), repr(b)])
            written.append(path)
        return written

    def print_summary(self) -> None:
        print("\n=== Ranking Correlation Summary ===")
        print(f"{'strategy':<14} {'kendall':>8} {'spearman':>9} {'pearson':>8}")
        for strategy in self.strategies():
            print(f"{strategy:<14} {self.mean(strategy, 'kendall'):8.4f} "
                  f"{self.mean(strategy, 'spearman'):9.4f} {self.mean(strategy, 'pearson'):8.4f}")


def _one_seed(config: SpaceConfig, strategies: Sequence[str], n_archs: int, T: int, seed: int, K: int,
              bench_options: Mapping, E: int) -> Tuple[List[CorrelationRow], Dict[Tuple[str, int], PairedScores]]:
    bench = SyntheticBenchmark(config, seed=seed, **bench_options)
    arch_seq, noise_seq, *strategy_seqs = np.random.SeedSequence(seed).spawn(2 + len(strategies))
    arch_rng = np.random.default_rng(arch_seq)
    archs = [random_architecture(config, arch_rng) for _ in range(n_archs)]
    noise_rng = np.random.default_rng(noise_seq)
    standalone = [bench.standalone_quality(a, noise_rng) for a in archs]

    rows, scatter = [], {}
    for strategy, seq in zip(strategies, strategy_seqs):
        rng = np.random.default_rng(seq)
        if strategy == RANDOM_SCORES:
            store = SupernetStore(config, K, "random_path").randomize(rng)
        else:
            store = train_progressive(strategy, SupernetStore(config, K, strategy), bench, T, rng, E=E)
        pairs = PairedScores.from_arrays(standalone, [oneshot_eval(store, a) for a in archs])
        row = CorrelationRow(strategy, seed, kendall_tau(pairs), spearman_rho(pairs), pearson_r(pairs))
        LOGGER.info("seed %d %s: kendall %.4f spearman %.4f pearson %.4f",
                    seed, strategy, row.kendall, row.spearman, row.pearson)
        rows.append(row)
        scatter[(strategy, seed)] = pairs
    return rows, scatter


def correlation_experiment(config: SpaceConfig, strategies: Sequence[str], n_archs: int = DEFAULT_N_ARCHS,
                           budget: int = 1000, seeds: Iterable[int] = range(5), K: int = 5,
                           bench_options: Optional[Mapping] = None, E: int = DEFAULT_LOOKUP_SAMPLES,
                           workers: int = 1) -> CorrelationTable:
    """
    Train one store per strategy and seed at matched budget and correlate its
    one-shot estimates with stand-alone qualities of the same sampled architectures.

    Args:
        config: search space.
        strategies: training strategies, optionally including RANDOM_SCORES.
        n_archs: architectures sampled per seed, shared by all strategies.
        budget: iterations per block (SPOS runs K times as many whole-path steps).
        seeds: one benchmark and one seed sequence per seed.
        K: supernet block count.
        bench_options: keyword arguments for SyntheticBenchmark.
        E: lookup candidates for best_path.
        workers: seeds run in parallel threads when above one.
    """
    bench_options = dict(bench_options or {})
    seeds = list(seeds)

    def run(seed: int):
        return _one_seed(config, strategies, n_archs, budget, seed, K, bench_options, E)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, seeds))
    else:
        results = [run(seed) for seed in seeds]

    table = CorrelationTable()
    for rows, scatter in results:
        table.rows.extend(rows)
        table.scatter.update(scatter)
    return table


class CurvePoint(NamedTuple):
    method: str
    seed: int
    iteration: int
    top_mean: float
    top_best: float
    top_worst: float


def convergence_curve(method: str, seed: int, trace: SearchTrace, top_k: int = TOP_K) -> List[CurvePoint]:
    """Per iteration, mean, best and worst of the top_k feasible rewards seen so far."""
    top: List[float] = []  # min-heap of the best top_k rewards
    points = []
    for record in trace.records:
        for reward, feasible in zip(record.rewards, record.feasible):
            if not feasible:
                continue
            if len(top) < top_k:
                heapq.heappush(top, reward)
            elif reward > top[0]:
                heapq.heapreplace(top, reward)
        if top:
            points.append(CurvePoint(method, seed, record.iteration, float(np.mean(top)), max(top), top[0]))
        else:
            nan = float("nan")
            points.append(CurvePoint(method, seed, record.iteration, nan, nan, nan))
    return points


def convergence_curves(traces: Mapping[str, Mapping[int, SearchTrace]], top_k: int = TOP_K) -> List[CurvePoint]:
    """Curves for {method: {seed: trace}}."""
    points = []
    for method, by_seed in traces.items():
        for seed, trace in by_seed.items():
            points.extend(convergence_curve(method, seed, trace, top_k))
    return points


def write_curves_csv(points: Sequence[CurvePoint], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(CurvePoint._fields)
        for p in points:
            writer.writerow([p.method, p.seed, p.iteration, repr(p.top_mean), repr(p.top_best), repr(p.top_worst)])


def final_aggregate(points: Sequence[CurvePoint], method: str) -> float:
    """Mean over seeds of the last top_mean of method."""
    last: Dict[int, float] = {}
    for p in points:
        if p.method == method:
            last[p.seed] = p.top_mean
    return float(np.mean(list(last.values())))


@dataclass
class ComparisonResult:
    optimum: Optional[Tuple[Architecture, float]]
    results: Dict[str, Dict[int, SearchResult]] = field(default_factory=dict)

    def succeeded(self, method: str, seed: int) -> bool:
        result = self.results[method][seed]
        return self.optimum is not None and result.found and result.best == self.optimum[0]

    def success_rate(self, method: str) -> float:
        seeds = list(self.results[method])
        return sum(self.succeeded(method, s) for s in seeds) / len(seeds)

    def traces(self) -> Dict[str, Dict[int, SearchTrace]]:
        return {m: {s: r.trace for s, r in by_seed.items()} for m, by_seed in self.results.items()}

    def print_summary(self) -> None:
        print("\n=== Search Comparison Summary ===")
        if self.optimum is None:
            print("No feasible architecture exists under the latency budget.")
        else:
            print(f"Optimum: {self.optimum[0].canonical} (reward {self.optimum[1]:.6f})")
        for method in self.results:
            print(f"{method:<8} success rate {self.success_rate(method) * 100:5.1f}%")


def search_comparison(dist0: ArchDistribution, store: Optional[SupernetStore], latency_table: LatencyTable,
                      methods: Sequence[str], seeds: Iterable[int], cfg: SearchConfig,
                      evaluator: Optional[Evaluator] = None, cap: int = 100_000) -> ComparisonResult:
    """
    Run every method once per seed at the same configuration and compare each
    result with the exhaustive feasible optimum of the same reward.
    """
    config = dist0.config
    comparison = ComparisonResult(exhaustive_search(config, store, evaluator, latency_table, cfg.r_max, cap))
    for method in methods:
        comparison.results[method] = {}
        for seed in seeds:
            result = run_search(method, dist0, store, evaluator, latency_table, replace(cfg, seed=seed))
            comparison.results[method][seed] = result
        LOGGER.info("%s: success rate %.2f", method, comparison.success_rate(method))
    return comparison
