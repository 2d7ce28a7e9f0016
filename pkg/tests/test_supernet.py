import itertools
from collections import Counter

import numpy as np
import pytest

from evaluator import EvaluatorError, SyntheticBenchmark
from search_space import (
    SpaceConfig,
    architecture_edges,
    count_paths,
    enumerate_stride_sequences,
    mesh_edges,
    random_architecture,
)
from supernet import (
    BlockPath,
    PartitionError,
    SupernetStore,
    TrainingAbortedError,
    UntrainedBlockError,
    best_prefix,
    block_stride_paths,
    build_lookup,
    oneshot_eval,
    partition,
    sample_block_path,
    sample_prefix,
    train_progressive,
    valid_k_choices,
)
from training_tracker import TrainingTracker


class FlakyEvaluator:
    """Delegates to a benchmark and fails on the n-th training step."""

    def __init__(self, bench: SyntheticBenchmark, fail_at: int):
        self.bench = bench
        self.fail_at = fail_at
        self.calls = 0

    def train_signal(self, edges, block, rng):
        self.calls += 1
        if self.calls == self.fail_at:
            raise EvaluatorError("evaluator went away")
        return self.bench.train_signal(edges, block, rng)

    def block_bias(self, block):
        return self.bench.block_bias(block)

    def evaluate(self, arch, rng=None):
        return self.bench.evaluate(arch, rng)


class SilentEvaluator:
    """Zero signal everywhere; only the visit counts of a run matter."""

    def train_signal(self, edges, block, rng):
        return np.zeros(len(edges))

    def block_bias(self, block):
        return 0.0

    def evaluate(self, arch, rng=None):
        return 0.0


class SnapshotEvaluator:
    """Copies the first block's scores when training moves on to the second block."""

    def __init__(self, bench: SyntheticBenchmark, store: SupernetStore):
        self.bench = bench
        self.store = store
        self.first_block = {e.id for e, _ in mesh_edges(store.config, store.partition.layers(1))}
        self.snapshot = None

    def train_signal(self, edges, block, rng):
        if block != 1 and self.snapshot is None:
            self.snapshot = {k: v for k, v in self.store.scores.items() if k in self.first_block}
        return self.bench.train_signal(edges, block, rng)

    def block_bias(self, block):
        return self.bench.block_bias(block)

    def evaluate(self, arch, rng=None):
        return self.bench.evaluate(arch, rng)


def test_partition_of_the_default_space(default_config: SpaceConfig):
    assert valid_k_choices(20) == [2, 3, 5, 6, 11, 21]
    part = partition(default_config, 5)
    assert list(part.layers(1)) == [1, 2, 3, 4, 5]
    assert list(part.layers(4)) == [16, 17, 18, 19, 20]
    assert list(part.layers(5)) == [21, 22, 23, 24]
    assert part.block_of_layer(6) == 2
    assert part.block_of_layer(22) == 5

    with pytest.raises(PartitionError) as err:
        partition(default_config, 4)
    assert err.value.valid_k == [2, 3, 5, 6, 11, 21]


def test_block_paths_chain_into_full_paths(toy_config: SpaceConfig):
    part = partition(toy_config, 3)
    (s1, e1), (s2, e2) = part.spatial_ranges
    first = block_stride_paths(toy_config, s1, e1)
    second = block_stride_paths(toy_config, s2, e2)
    assert all(entry == (0, 0) for entry, _ in first)
    exits = [BlockPath(s1, entry, strides).exit for entry, strides in first]
    chained = sum(1 for x in exits for entry, _ in second if entry == x)
    assert chained == count_paths(toy_config)


def test_sampled_prefix_reaches_the_block_entry(toy_config: SpaceConfig):
    part = partition(toy_config, 3)
    rng = np.random.default_rng(0)
    for _ in range(50):
        alpha = sample_block_path(part, 2, rng)
        prefix = sample_prefix(part, alpha, rng)
        assert prefix.exit == alpha.entry
        assert len(prefix.strides) == alpha.start


def test_update_starts_from_the_first_signal(toy_config: SpaceConfig):
    store = SupernetStore(toy_config, 3, "random_path", ema_rate=0.5)
    edge = architecture_edges(random_architecture(toy_config, np.random.default_rng(0)), toy_config)[0]
    store.update([edge], np.array([0.4]))
    assert store.score(edge) == pytest.approx(0.4)
    store.update([edge], np.array([0.0]))
    assert store.score(edge) == pytest.approx(0.2)
    store.update([edge], np.array([0.2]))
    assert store.score(edge) == pytest.approx(0.2)
    assert store.visit_count(edge) == 3


def test_untrained_store_cannot_estimate(toy_config: SpaceConfig):
    store = SupernetStore(toy_config, 3, "random_path")
    arch = random_architecture(toy_config, np.random.default_rng(0))
    with pytest.raises(UntrainedBlockError):
        oneshot_eval(store, arch)


def test_noiseless_training_recovers_edge_qualities(toy_store: SupernetStore, toy_bench: SyntheticBenchmark):
    config = toy_store.config
    assert toy_store.fully_trained
    assert set(toy_store.neck_bias) == {1, 2}
    rng = np.random.default_rng(1)
    for _ in range(20):
        arch = random_architecture(config, rng)
        edges = architecture_edges(arch, config)
        if all(toy_store.visit_count(e) for e in edges):
            expected = sum(toy_bench.edge_quality(e) for e in edges)
            assert toy_store.estimate(edges) == pytest.approx(expected)


def test_training_is_deterministic(toy_config: SpaceConfig):
    bench = SyntheticBenchmark(toy_config, seed=3)
    runs = [
        train_progressive("co_update", SupernetStore(toy_config, 3, "co_update"), bench, 40,
                          np.random.default_rng(9)).to_dict()
        for _ in range(2)
    ]
    assert runs[0] == runs[1]


def test_spos_trains_whole_architectures_without_neck(toy_config: SpaceConfig):
    bench = SyntheticBenchmark(toy_config, seed=0)
    store = train_progressive("spos", SupernetStore(toy_config, 3, "spos"), bench, 20, np.random.default_rng(0))
    assert store.fully_trained
    assert store.neck_bias == {}
    # every step touches one edge per layer
    assert sum(store.visits.values()) == 3 * 20 * (toy_config.M + toy_config.N)


def test_checkpoint_round_trip(toy_store: SupernetStore, tmp_path):
    path = tmp_path / "checkpoint.json"
    toy_store.save(path)
    loaded = SupernetStore.load(path)
    assert loaded.to_dict() == toy_store.to_dict()
    assert loaded.fully_trained


def test_best_path_builds_lookup_tables(toy_config: SpaceConfig, tmp_path):
    bench = SyntheticBenchmark(toy_config, seed=0, noise_sigma=0.0)
    store = train_progressive("best_path", SupernetStore(toy_config, 3, "best_path"), bench, 100,
                              np.random.default_rng(0))
    assert set(store.lookup) == {1, 2}
    assert all(store.lookup[k] for k in (1, 2))

    path = tmp_path / "checkpoint.json"
    store.save(path)
    assert SupernetStore.load(path).lookup == store.lookup


def test_greedy_prefix_equals_brute_force(toy_config: SpaceConfig):
    bench = SyntheticBenchmark(toy_config, seed=1, noise_sigma=0.0)
    store = train_progressive("best_path", SupernetStore(toy_config, 3, "best_path"), bench, 200,
                              np.random.default_rng(1))
    part = store.partition
    start, stop = part.spatial_ranges[1]
    rng = np.random.default_rng(2)
    for entry, strides in block_stride_paths(toy_config, start, stop):
        alpha = BlockPath(start, entry, strides, tuple(toy_config.op_choices[0] for _ in strides))
        greedy = best_prefix(store, alpha)
        assert greedy.exit == alpha.entry

        best = max(
            store.estimate(BlockPath(0, (0, 0), prefix, ops).edges(toy_config))
            for prefix in enumerate_stride_sequences(start, *alpha.entry)
            for ops in itertools.product(toy_config.op_choices, repeat=start)
        )
        assert store.estimate(greedy.edges(toy_config)) == pytest.approx(best)
    assert build_lookup(store, 1, 1000, rng) == store.lookup[1]


def test_aborted_training_resumes_identically(toy_config: SpaceConfig, tmp_path):
    bench = SyntheticBenchmark(toy_config, seed=2)
    reference = train_progressive("random_path", SupernetStore(toy_config, 3, "random_path"), bench, 30,
                                  np.random.default_rng(5))

    checkpoint = tmp_path / "checkpoint.json"
    tracker = TrainingTracker(tmp_path / "training_progress.json", 3, "random_path")
    store = SupernetStore(toy_config, 3, "random_path")
    with pytest.raises(TrainingAbortedError) as err:
        train_progressive("random_path", store, FlakyEvaluator(bench, fail_at=45), 30, np.random.default_rng(5),
                          tracker=tracker, checkpoint=checkpoint)
    assert err.value.store.aborted
    assert tracker.status(1) == "trained"
    assert tracker.status(2) == "failed"

    resumed = SupernetStore.load(checkpoint)
    assert resumed.aborted
    assert resumed.progress == {"block": 2, "iteration": 14}
    train_progressive("random_path", resumed, bench, 30, np.random.default_rng(123),
                      tracker=tracker, checkpoint=checkpoint)
    assert resumed.to_dict() == reference.to_dict()
    assert tracker.get_pending_blocks() == []


def test_co_update_removes_the_neck_bias_of_every_trained_block(toy_config: SpaceConfig,
                                                               toy_bench: SyntheticBenchmark):
    store = train_progressive("co_update", SupernetStore(toy_config, 3, "co_update"), toy_bench, 300,
                              np.random.default_rng(0))
    assert all(store.neck_bias.values())
    rng = np.random.default_rng(1)
    checked = 0
    for _ in range(50):
        edges = architecture_edges(random_architecture(toy_config, rng), toy_config)
        if all(store.visit_count(e) for e in edges):
            checked += 1
            assert store.estimate(edges) == pytest.approx(sum(toy_bench.edge_quality(e) for e in edges))
    assert checked


@pytest.mark.parametrize("strategy", ["random_path", "best_path"])
def test_trained_block_is_frozen_while_later_blocks_train(toy_config: SpaceConfig, strategy: str):
    store = SupernetStore(toy_config, 3, strategy)
    evaluator = SnapshotEvaluator(SyntheticBenchmark(toy_config, seed=4), store)
    train_progressive(strategy, store, evaluator, 60, np.random.default_rng(3))
    assert evaluator.snapshot
    assert {k: v for k, v in store.scores.items() if k in evaluator.first_block} == evaluator.snapshot


def test_sampled_prefixes_are_uniform(toy_config: SpaceConfig):
    part = partition(toy_config, 3)
    start, stop = part.spatial_ranges[1]
    entry, strides = next(p for p in block_stride_paths(toy_config, start, stop) if p[0] == (1, 1))
    alpha = BlockPath(start, entry, strides, tuple(toy_config.op_choices[0] for _ in strides))
    prefixes = list(enumerate_stride_sequences(start, *entry))
    assert len(prefixes) == 6

    rng = np.random.default_rng(0)
    draws = 100_000
    counts = Counter(sample_prefix(part, alpha, rng).strides for _ in range(draws))
    assert set(counts) == set(prefixes)
    for prefix in prefixes:
        assert counts[prefix] / draws == pytest.approx(1 / len(prefixes), abs=0.01)


@pytest.mark.slow
def test_progressive_training_spreads_visits_over_each_block(default_config: SpaceConfig):
    K, T = 5, 8000
    counts = {}
    for strategy in ("random_path", "spos"):
        store = train_progressive(strategy, SupernetStore(default_config, K, strategy), SilentEvaluator(), T,
                                  np.random.default_rng(0))
        counts[strategy] = [min(store.block_visit_counts(k)) for k in range(1, K)]
    for progressive, whole in zip(counts["random_path"], counts["spos"]):
        assert progressive >= whole
