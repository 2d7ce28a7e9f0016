"""
supernet.py - Block-partitioned supernet store and its training strategies.

The supernet is a mesh of edges (layer, input node, stride, operator) for the
spatial model plus one edge per transformer choice and layer. Shared weights
are stood in for by one quality score per edge, moved by an exponential
moving average toward the evaluator's training signal whenever a training
step uses the edge.

The spatial model is split into K-1 equal blocks and the sequential model is
block K. Progressive strategies train the blocks in order and freeze each one
afterwards; SPOS samples whole architectures for K*T steps.
"""
from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from evaluator import Evaluator, EvaluatorError, squash
from search_space import (
    ALL_TRANSFORMER_CHOICES,
    STRIDE_21,
    STRIDE_22,
    Architecture,
    ConvChoice,
    Edge,
    InvalidConfigError,
    SpaceConfig,
    StridePair,
    TransformerChoice,
    architecture_edges,
    count_sequences,
    enumerate_stride_sequences,
    mesh_edges,
    node_geometry,
    random_architecture,
    reachable_nodes,
    sample_stride_sequence,
    sequential_edges,
    spatial_edges,
)
from training_tracker import TrainingTracker

LOGGER = logging.getLogger(__name__)

STRATEGIES = ("random_path", "best_path", "co_update", "spos")
DEFAULT_EMA_RATE = 0.05
DEFAULT_LOOKUP_SAMPLES = 1000

Node = Tuple[int, int]


class PartitionError(InvalidConfigError):
    """Raised when M cannot be split into K-1 equal spatial blocks."""

    def __init__(self, M: int, K: int, valid_k: Sequence[int]):
        super().__init__(
            f"M={M} layers cannot be split into K-1={K - 1} equal blocks; valid K: "
            + ", ".join(str(k) for k in valid_k)
        )
        self.valid_k = list(valid_k)


class UntrainedBlockError(RuntimeError):
    """Raised when a one-shot estimate needs a block that has not been trained."""


class EmptyPrefixSetError(ValueError):
    """Raised when no prefix path reaches a block path's input geometry."""


class MissingLookupEntryError(ValueError):
    """Raised when a lookup table holds no path ending at the required geometry."""

    def __init__(self, block: int, geometry: Tuple[int, int]):
        super().__init__(f"lookup table of block {block} has no path ending at {geometry[0]}x{geometry[1]}")
        self.block = block
        self.geometry = geometry


class TrainingAbortedError(RuntimeError):
    """Raised when the evaluator fails mid-training; carries the partial store."""

    def __init__(self, store: "SupernetStore", message: str):
        super().__init__(f"supernet training aborted: {message}")
        self.store = store


def valid_k_choices(M: int) -> List[int]:
    return [d + 1 for d in range(1, M + 1) if M % d == 0]


@dataclass(frozen=True)
class BlockPartition:
    config: SpaceConfig
    K: int
    spatial_ranges: Tuple[Tuple[int, int], ...]  # 0-indexed [start, stop) layer ranges

    @property
    def sequential_block(self) -> int:
        return self.K

    def layers(self, k: int) -> range:
        """1-indexed layers of block k."""
        if k == self.K:
            return range(self.config.M + 1, self.config.M + self.config.N + 1)
        start, stop = self.spatial_ranges[k - 1]
        return range(start + 1, stop + 1)

    def block_of_layer(self, layer: int) -> int:
        if layer > self.config.M:
            return self.K
        size = self.config.M // (self.K - 1)
        return (layer - 1) // size + 1

    def block_of_start(self, start: int) -> int:
        """Block whose first 0-indexed layer is start."""
        if start >= self.config.M:
            return self.K
        return self.block_of_layer(start + 1)


def partition(config: SpaceConfig, K: int) -> BlockPartition:
    """
    Split the spatial model into K-1 equal blocks plus the sequential block.

    Raises:
        PartitionError: if K < 2 or M is not divisible by K-1.
    """
    if K < 2 or config.M % (K - 1):
        raise PartitionError(config.M, K, valid_k_choices(config.M))
    size = config.M // (K - 1)
    ranges = tuple((i * size, (i + 1) * size) for i in range(K - 1))
    return BlockPartition(config, K, ranges)


@dataclass(frozen=True)
class BlockPath:
    """
    A path through consecutive layers starting at 0-indexed layer start.

    entry is the (used22, used21) node the path starts from. Spatial paths
    carry strides and ops, the sequential block carries seq.
    """

    start: int
    entry: Node
    strides: Tuple[StridePair, ...] = ()
    ops: Tuple[ConvChoice, ...] = ()
    seq: Tuple[TransformerChoice, ...] = ()

    @property
    def exit(self) -> Node:
        return (
            self.entry[0] + sum(s == STRIDE_22 for s in self.strides),
            self.entry[1] + sum(s == STRIDE_21 for s in self.strides),
        )

    def edges(self, config: SpaceConfig) -> List[Edge]:
        out = spatial_edges(config, self.strides, self.ops, first_layer=self.start + 1,
                            start=node_geometry(config, *self.entry))
        if self.seq:
            out += sequential_edges(config, self.seq)
        return out

    @property
    def token(self) -> str:
        if self.seq:
            return "-".join(c.bits for c in self.seq)
        return "-".join(f"{op.token}{s.token}" for op, s in zip(self.ops, self.strides))

    def to_architecture(self) -> Architecture:
        return Architecture(self.strides, self.ops, self.seq)


_PATH_TOKEN = re.compile(r"(MB\dE\d)S(\d)(\d)")


def parse_block_path(start: int, entry: Sequence[int], token: str, sequential: bool) -> BlockPath:
    entry = (int(entry[0]), int(entry[1]))
    if not token:
        return BlockPath(start, entry)
    if sequential:
        return BlockPath(start, entry, seq=tuple(TransformerChoice.from_bits(t) for t in token.split("-")))
    strides, ops = [], []
    for part in token.split("-"):
        match = _PATH_TOKEN.fullmatch(part)
        if not match:
            raise InvalidConfigError(f"malformed block path token {part!r}")
        ops.append(ConvChoice.from_token(match.group(1)))
        strides.append(StridePair(int(match.group(2)), int(match.group(3))))
    return BlockPath(start, entry, tuple(strides), tuple(ops))


def concat(paths: Sequence[BlockPath]) -> BlockPath:
    """Join consecutive block paths; the first one fixes start and entry."""
    if not paths:
        return BlockPath(0, (0, 0))
    return BlockPath(
        paths[0].start,
        paths[0].entry,
        tuple(s for p in paths for s in p.strides),
        tuple(op for p in paths for op in p.ops),
        tuple(c for p in paths for c in p.seq),
    )


@lru_cache(maxsize=None)
def block_stride_paths(config: SpaceConfig, start: int, stop: int) -> Tuple[Tuple[Node, Tuple[StridePair, ...]], ...]:
    """
    Phi_k without operators: (entry node, strides) pairs of layers [start, stop).

    The entry is reachable from the input within the earlier layers and the
    exit can still reach the target within the remaining ones.
    """
    out = []
    for entry in reachable_nodes(config, start):
        for x22 in range(config.n22 - entry[0] + 1):
            for x21 in range(config.n21 - entry[1] + 1):
                rest22 = config.n22 - entry[0] - x22
                rest21 = config.n21 - entry[1] - x21
                if not count_sequences(config.M - stop, rest22, rest21):
                    continue
                for strides in enumerate_stride_sequences(stop - start, x22, x21):
                    out.append((entry, strides))
    return tuple(out)


def _uniform_ops(config: SpaceConfig, n: int, rng: np.random.Generator) -> Tuple[ConvChoice, ...]:
    return tuple(config.op_choices[i] for i in rng.integers(len(config.op_choices), size=n))


def sample_block_path(part: BlockPartition, k: int, rng: np.random.Generator) -> BlockPath:
    """Uniform draw of a path of block k from Phi_k, operators uniform."""
    config = part.config
    if k == part.K:
        seq = tuple(ALL_TRANSFORMER_CHOICES[i] for i in rng.integers(len(ALL_TRANSFORMER_CHOICES), size=config.N))
        return BlockPath(config.M, (config.n22, config.n21), seq=seq)
    start, stop = part.spatial_ranges[k - 1]
    paths = block_stride_paths(config, start, stop)
    entry, strides = paths[int(rng.integers(len(paths)))]
    return BlockPath(start, entry, strides, _uniform_ops(config, len(strides), rng))


def sample_prefix(part: BlockPartition, alpha: BlockPath, rng: np.random.Generator) -> BlockPath:
    """
    Uniform prefix over the layers before alpha whose output matches alpha's input.

    Raises:
        EmptyPrefixSetError: if no prefix reaches alpha's entry node.
    """
    config = part.config
    used22, used21 = alpha.entry
    if not count_sequences(alpha.start, used22, used21):
        h, w = node_geometry(config, used22, used21)
        raise EmptyPrefixSetError(f"no path over {alpha.start} layers reaches {h}x{w}")
    if alpha.start == 0:
        return BlockPath(0, (0, 0))
    strides = tuple(sample_stride_sequence(alpha.start, used22, used21, rng))
    return BlockPath(0, (0, 0), strides, _uniform_ops(config, alpha.start, rng))


@dataclass(frozen=True)
class LookupEntry:
    path: BlockPath
    perf: float


LookupTable = Dict[Tuple[int, int], LookupEntry]


class SupernetStore:
    def __init__(self, config: SpaceConfig, K: int, strategy: str, ema_rate: float = DEFAULT_EMA_RATE):
        if strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {strategy!r}, expected one of {', '.join(STRATEGIES)}")
        if not 0 < ema_rate <= 1:
            raise ValueError(f"ema_rate must be in (0, 1], got {ema_rate}")
        self.config = config
        self.partition = partition(config, K)
        self.K = K
        self.strategy = strategy
        self.ema_rate = ema_rate
        self.scores: Dict[str, float] = {}
        self.visits: Dict[str, int] = {}
        self.trained: List[bool] = [False] * K
        self.neck_bias: Dict[int, float] = {}
        self.offsets: Dict[str, float] = {}
        self.lookup: Dict[int, LookupTable] = {}
        self.progress = {"block": 1, "iteration": 0}
        self.rng_state: Optional[Dict] = None
        self.aborted = False

    def score(self, edge: Edge) -> float:
        return self.scores.get(edge.id, 0.0)

    def visit_count(self, edge: Edge) -> int:
        return self.visits.get(edge.id, 0)

    def block_of(self, edge: Edge) -> int:
        return self.partition.block_of_layer(edge.layer)

    def update(self, edges: Sequence[Edge], signals: np.ndarray, offset: float = 0.0) -> None:
        """
        Move each edge's score toward its signal: running mean for the first
        1/ema_rate visits, EMA after. offset is the neck bias the signals were
        measured under; each edge averages it at the same rate as its score.
        """
        for edge, signal in zip(edges, signals):
            visits = self.visits.get(edge.id, 0) + 1
            score = self.scores.get(edge.id, 0.0)
            rate = max(self.ema_rate, 1.0 / visits)
            self.scores[edge.id] = score + rate * (float(signal) - score)
            bias = self.offsets.get(edge.id, 0.0)
            self.offsets[edge.id] = bias + rate * (offset - bias)
            self.visits[edge.id] = visits

    def estimate(self, edges: Sequence[Edge]) -> float:
        """Raw quality estimate of edges with the neck bias each visited edge was trained under removed."""
        total = 0.0
        for edge in edges:
            if edge.id in self.scores:
                total += self.scores[edge.id] - self.offsets.get(edge.id, 0.0)
        return total

    def block_visit_counts(self, k: int) -> List[int]:
        """Visit count of every mesh edge of block k."""
        return [self.visit_count(e) for e, _ in mesh_edges(self.config, self.partition.layers(k))]

    def randomize(self, rng: np.random.Generator, scale: float = 0.1) -> "SupernetStore":
        """Replace every mesh score by noise and mark the store trained."""
        self.scores = {e.id: float(scale * rng.standard_normal()) for e, _ in mesh_edges(self.config)}
        self.visits = {edge_id: 1 for edge_id in self.scores}
        self.trained = [True] * self.K
        self.neck_bias = {}
        self.offsets = {}
        return self

    @property
    def fully_trained(self) -> bool:
        return all(self.trained)

    def to_dict(self) -> Dict:
        lookup = {
            str(k): {
                f"{h}x{w}": {
                    "start": entry.path.start,
                    "entry": list(entry.path.entry),
                    "path": entry.path.token,
                    "perf": entry.perf,
                }
                for (h, w), entry in table.items()
            }
            for k, table in self.lookup.items()
        }
        return {
            "config": self.config.to_dict(),
            "K": self.K,
            "strategy": self.strategy,
            "ema_rate": self.ema_rate,
            "scores": self.scores,
            "visits": self.visits,
            "trained": self.trained,
            "neck_bias": {str(k): v for k, v in self.neck_bias.items()},
            "offsets": self.offsets,
            "lookup": lookup,
            "progress": self.progress,
            "rng_state": self.rng_state,
            "aborted": self.aborted,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "SupernetStore":
        try:
            store = cls(SpaceConfig.from_dict(data["config"]), int(data["K"]), data["strategy"],
                        float(data["ema_rate"]))
            store.scores = {k: float(v) for k, v in data["scores"].items()}
            store.visits = {k: int(v) for k, v in data["visits"].items()}
            store.trained = [bool(t) for t in data["trained"]]
            store.neck_bias = {int(k): float(v) for k, v in data["neck_bias"].items()}
            store.offsets = {k: float(v) for k, v in data["offsets"].items()}
            for k, table in data["lookup"].items():
                store.lookup[int(k)] = {}
                for geometry, entry in table.items():
                    h, w = (int(x) for x in geometry.split("x"))
                    path = parse_block_path(entry["start"], entry["entry"], entry["path"], sequential=False)
                    store.lookup[int(k)][(h, w)] = LookupEntry(path, float(entry["perf"]))
            store.progress = {"block": int(data["progress"]["block"]), "iteration": int(data["progress"]["iteration"])}
            store.rng_state = data["rng_state"]
            store.aborted = bool(data["aborted"])
        except (KeyError, TypeError, ValueError) as e:
            if isinstance(e, InvalidConfigError):
                raise
            raise InvalidConfigError(f"malformed supernet checkpoint: {e}") from e
        if len(store.trained) != store.K:
            raise InvalidConfigError("checkpoint trained flags do not match K")
        return store

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, sort_keys=True)

    @classmethod
    def load(cls, path) -> "SupernetStore":
        try:
            with open(path, "r", encoding="utf-8") as f:
                data = json.load(f)
        except json.JSONDecodeError as e:
            raise InvalidConfigError(f"{path}: malformed checkpoint: {e}") from e
        except OSError as e:
            raise InvalidConfigError(f"{path}: cannot read checkpoint: {e}") from e
        return cls.from_dict(data)


def _best_ops(store: SupernetStore, start: int, entry: Node, strides: Sequence[StridePair]) -> Tuple[ConvChoice, ...]:
    """Operator with the best bias-corrected estimate per layer for a fixed stride path, ties to the first candidate."""
    config = store.config
    ops = []
    for i, stride in enumerate(strides):
        prefix_strides = list(strides[:i])
        used = BlockPath(start, entry, tuple(prefix_strides)).exit
        candidates = [
            (store.estimate(spatial_edges(config, [stride], [op], first_layer=start + i + 1,
                                          start=node_geometry(config, *used))), op)
            for op in config.op_choices
        ]
        best = candidates[0]
        for candidate in candidates[1:]:
            if candidate[0] > best[0]:
                best = candidate
        ops.append(best[1])
    return tuple(ops)


def build_lookup(store: SupernetStore, k: int, E: int, rng: np.random.Generator) -> LookupTable:
    """
    Best (path, perf) of trained block k per output geometry.

    Block paths are taken in enumeration order when Phi_k holds at most E of
    them, else E are drawn without replacement. perf is the store's own
    bias-corrected estimate of the path with its best operators, so no
    evaluator is consulted and none is taken.
    """
    part = store.partition
    if k >= part.K:
        raise ValueError("lookup tables are built for spatial blocks only")
    if not store.trained[k - 1]:
        raise UntrainedBlockError(f"block {k} must be trained before its lookup table is built")
    start, stop = part.spatial_ranges[k - 1]
    paths = block_stride_paths(store.config, start, stop)
    if len(paths) <= E:
        candidates = list(paths)
    else:
        candidates = [paths[i] for i in rng.choice(len(paths), size=E, replace=False)]

    table: LookupTable = {}
    for entry, strides in candidates:
        path = BlockPath(start, entry, strides, _best_ops(store, start, entry, strides))
        perf = store.estimate(path.edges(store.config))
        key = node_geometry(store.config, *path.exit)
        if key not in table or perf > table[key].perf:
            table[key] = LookupEntry(path, perf)
    store.lookup[k] = table
    LOGGER.debug("lookup table of block %d: %d resolutions from %d paths", k, len(table), len(candidates))
    return table


def best_prefix(store: SupernetStore, alpha: BlockPath) -> BlockPath:
    """
    Greedy backward walk through the lookup tables of the blocks before alpha.

    At every block the stored path ending at the input geometry of the path
    already chosen after it is taken.
    """
    config = store.config
    k = store.partition.block_of_start(alpha.start)
    chosen: List[BlockPath] = []
    need = alpha.entry
    for j in range(k - 1, 0, -1):
        key = node_geometry(config, *need)
        table = store.lookup.get(j, {})
        if key not in table:
            raise MissingLookupEntryError(j, key)
        chosen.append(table[key].path)
        need = table[key].path.entry
    return concat(list(reversed(chosen)))


def oneshot_eval(store: SupernetStore, arch: Architecture) -> float:
    """Quality estimate of arch with weights inherited from the store."""
    untrained = [k for k in range(1, store.K + 1) if not store.trained[k - 1]]
    if untrained:
        raise UntrainedBlockError(f"blocks {untrained} are not trained")
    return squash(store.estimate(architecture_edges(arch, store.config)))


def _checkpoint(store: SupernetStore, rng: np.random.Generator, path: Optional[Path]) -> None:
    store.rng_state = rng.bit_generator.state
    if path is not None:
        store.save(path)


def _train_block(store: SupernetStore, k: int, evaluator: Evaluator, T: int, first_iteration: int,
                 rng: np.random.Generator, E: int, checkpoint: Optional[Path], checkpoint_every: int) -> None:
    config = store.config
    part = store.partition
    neck = k if k < part.K else None
    store.neck_bias.pop(k, None)
    if neck is not None:
        store.neck_bias[k] = evaluator.block_bias(neck)

    for it in range(first_iteration, T):
        store.rng_state = rng.bit_generator.state
        alpha = sample_block_path(part, k, rng)
        if store.strategy == "best_path":
            prefix = best_prefix(store, alpha)
        else:
            prefix = sample_prefix(part, alpha, rng)
        edges = alpha.edges(config)
        if store.strategy == "co_update":
            edges = prefix.edges(config) + edges
        store.update(edges, evaluator.train_signal(edges, neck, rng), store.neck_bias.get(k, 0.0))
        store.progress = {"block": k, "iteration": it + 1}
        if checkpoint_every and (it + 1) % checkpoint_every == 0:
            _checkpoint(store, rng, checkpoint)
            LOGGER.debug("block %d: %d/%d iterations", k, it + 1, T)

    store.trained[k - 1] = True
    if store.strategy == "best_path" and k < part.K:
        build_lookup(store, k, E, rng)
    store.progress = {"block": k + 1, "iteration": 0}


def _train_spos(store: SupernetStore, evaluator: Evaluator, T: int, first_iteration: int,
                rng: np.random.Generator, checkpoint: Optional[Path], checkpoint_every: int) -> None:
    config = store.config
    total = store.K * T
    for it in range(first_iteration, total):
        store.rng_state = rng.bit_generator.state
        arch = random_architecture(config, rng)
        edges = architecture_edges(arch, config)
        store.update(edges, evaluator.train_signal(edges, None, rng))
        store.progress = {"block": 1, "iteration": it + 1}
        if checkpoint_every and (it + 1) % checkpoint_every == 0:
            _checkpoint(store, rng, checkpoint)
            LOGGER.debug("spos: %d/%d iterations", it + 1, total)
    store.trained = [True] * store.K
    store.progress = {"block": store.K + 1, "iteration": 0}


def train_progressive(strategy: str, store: SupernetStore, evaluator: Evaluator, T: int,
                      rng: np.random.Generator, E: int = DEFAULT_LOOKUP_SAMPLES,
                      tracker: Optional[TrainingTracker] = None, checkpoint: Optional[Path] = None,
                      checkpoint_every: int = 0) -> SupernetStore:
    """
    Train the store with one of the four strategies.

    random_path, best_path and co_update train blocks 1..K for T iterations
    each; spos runs K*T whole-architecture iterations. A store loaded from a
    checkpoint resumes at its recorded block and iteration with its saved
    generator state.

    Args:
        strategy: one of STRATEGIES, must match the store's.
        store: the store to train in place.
        evaluator: source of training signals and neck biases.
        T: iterations per block.
        rng: generator driving every draw; replaced by the checkpointed state on resume.
        E: candidate paths per lookup table (best_path).
        tracker: optional progress file updated on every block status change.
        checkpoint: path the store is saved to during and after training.
        checkpoint_every: iterations between intermediate checkpoints, 0 for none.

    Raises:
        TrainingAbortedError: if the evaluator fails; the store is flagged aborted.
    """
    if strategy != store.strategy:
        raise ValueError(f"store was created for {store.strategy!r}, not {strategy!r}")
    if T < 0:
        raise ValueError("T must be non-negative")
    resuming = store.progress != {"block": 1, "iteration": 0}
    if resuming and store.rng_state is not None:
        rng.bit_generator.state = store.rng_state
        LOGGER.info("resuming %s training at block %d, iteration %d",
                    strategy, store.progress["block"], store.progress["iteration"])
    store.aborted = False

    current = store.progress["block"]
    try:
        if strategy == "spos":
            if tracker:
                for k in range(1, store.K + 1):
                    tracker.mark_as_training(k)
            if current <= store.K:
                _train_spos(store, evaluator, T, store.progress["iteration"], rng, checkpoint, checkpoint_every)
            if tracker:
                for k in range(1, store.K + 1):
                    tracker.mark_as_trained(k, store.K * T)
            LOGGER.info("spos: trained %d whole-architecture iterations", store.K * T)
        else:
            for k in range(current, store.K + 1):
                current = k
                if tracker:
                    tracker.mark_as_training(k)
                first = store.progress["iteration"] if k == store.progress["block"] else 0
                _train_block(store, k, evaluator, T, first, rng, E, checkpoint, checkpoint_every)
                if tracker:
                    tracker.mark_as_trained(k, T)
                LOGGER.info("%s: trained block %d in %d iterations", strategy, k, T)
    except EvaluatorError as e:
        store.aborted = True
        if checkpoint is not None:
            store.save(checkpoint)
        if tracker:
            tracker.mark_as_failed(current, store.progress["iteration"], str(e))
        LOGGER.error("training aborted at block %d: %s", current, e)
        raise TrainingAbortedError(store, str(e)) from e

    _checkpoint(store, rng, checkpoint)
    return store
