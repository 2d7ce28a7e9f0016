"""
evaluator.py - Quality and latency oracles.

SyntheticBenchmark is a deterministic stand-in for training and validating
networks: every supernet edge has a fixed quality drawn from the seed, a full
architecture's quality is the squashed sum of its edge qualities plus small
terms coupling adjacent layers. LatencyTable prices every edge, and
ExternalEvaluator forwards the same questions to child processes.
"""
from __future__ import annotations

import csv
import hashlib
import logging
import math
import queue
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Protocol, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

from evaluator_connection import EvaluatorConnection, EvaluatorError, EvaluatorExitError
from search_space import (
    ALL_TRANSFORMER_CHOICES,
    O_S,
    Architecture,
    ConvChoice,
    Edge,
    SpaceConfig,
    StridePair,
    TransformerChoice,
    architecture_edges,
    mesh_edges,
)

LOGGER = logging.getLogger(__name__)

BLOCK_BIAS_RANGE = 0.1
# weight of the geometry-dependent part of a spatial edge quality
NODE_WEIGHT = 0.25
# weight of the per-choice part of a transformer edge quality, on top of its option effects
SEQ_CHOICE_WEIGHT = 0.25
# ms per k^2 * e * h_out * w_out * c_in unit of a convolution layer
CONV_UNIT_MS = 5e-9
# ms per h * w * c^2 unit of a transformer layer
SEQ_UNIT_MS = 2e-8


class MissingLatencyEntryError(KeyError):
    """Raised when a layer's (operator, geometry) is not priced by the latency table."""

    def __init__(self, key: Tuple[str, int, int, int]):
        super().__init__(f"no latency entry for op={key[0]} h={key[1]} w={key[2]} channels={key[3]}")
        self.key = key


class Evaluator(Protocol):
    def train_signal(self, edges: Sequence[Edge], block: Optional[int], rng: np.random.Generator) -> np.ndarray:
        ...

    def block_bias(self, block: Optional[int]) -> float:
        ...

    def evaluate(self, arch: Architecture, rng: Optional[np.random.Generator] = None) -> float:
        ...


def squash(raw: float) -> float:
    return float(expit(raw))


class SyntheticBenchmark:
    def __init__(self, config: SpaceConfig, seed: int = 0, noise_sigma: float = 0.05,
                 interaction_weight: float = 0.1, edge_scale: float = 0.1,
                 standalone_sigma: float = 0.01):
        """
        Args:
            config: search space the benchmark scores.
            seed: fixes every edge quality, pair term and block bias.
            noise_sigma: per-edge standard deviation of a one-edge training signal.
            interaction_weight: weight of the adjacent-layer coupling terms.
            edge_scale: scale of the per-edge qualities.
            standalone_sigma: noise of a model "trained from scratch".
        """
        self.config = config
        self.seed = seed
        self.noise_sigma = noise_sigma
        self.interaction_weight = interaction_weight
        self.edge_scale = edge_scale
        self.standalone_sigma = standalone_sigma
        self._cache: Dict[Tuple, float] = {}

    def _generator(self, *key) -> np.random.Generator:
        digest = hashlib.blake2b(repr((self.seed,) + key).encode("utf-8"), digest_size=8).digest()
        return np.random.default_rng(int.from_bytes(digest, "little"))

    def _normal(self, *key) -> float:
        if key not in self._cache:
            self._cache[key] = float(self._generator(*key).standard_normal())
        return self._cache[key]

    def edge_quality(self, edge: Edge) -> float:
        """
        Fixed quality of one supernet edge.

        A spatial edge adds an operator effect, a stride effect and a smaller
        term tied to its input geometry. A transformer edge adds one effect per
        option bit and a smaller term for the exact combination.
        """
        if edge.choice.startswith("T"):
            bits = edge.choice[1:]
            options = sum(self._normal("seq", edge.layer, i, bit) for i, bit in enumerate(bits))
            return self.edge_scale * (
                0.5 * options + SEQ_CHOICE_WEIGHT * self._normal("seq", edge.layer, edge.choice)
            )
        op, stride = edge.choice[:4], edge.choice[4:]
        return self.edge_scale * (
            self._normal("op", edge.layer, op)
            + self._normal("stride", edge.layer, stride)
            + NODE_WEIGHT * self._normal("node", edge.layer, edge.h, edge.w, edge.choice)
        )

    def pair_term(self, first: Edge, second: Edge) -> float:
        return self._normal("pair", first.layer, first.choice, second.choice)

    def raw_quality(self, edges: Sequence[Edge]) -> float:
        raw = sum(self.edge_quality(e) for e in edges)
        if self.interaction_weight:
            raw += self.interaction_weight * sum(self.pair_term(a, b) for a, b in zip(edges, edges[1:]))
        return raw

    def true_quality(self, arch: Architecture) -> float:
        return squash(self.raw_quality(architecture_edges(arch, self.config)))

    def block_bias(self, block: Optional[int]) -> float:
        """Additive offset of an auxiliary neck on block k; None means no neck."""
        if block is None:
            return 0.0
        return float(self._generator("bias", block).uniform(-BLOCK_BIAS_RANGE, BLOCK_BIAS_RANGE))

    def train_signal(self, edges: Sequence[Edge], block: Optional[int], rng: np.random.Generator) -> np.ndarray:
        """
        Per-edge training signal of one step over edges.

        Each entry is the edge's quality plus the block bias plus Gaussian noise.
        The edges of a step share one loss, so the noise deviation is
        noise_sigma times the number of edges trained together.
        """
        truth = np.array([self.edge_quality(e) for e in edges]) + self.block_bias(block)
        if self.noise_sigma == 0 or not len(edges):
            return truth
        sigma = self.noise_sigma * len(edges)
        return truth + rng.normal(0.0, sigma, size=len(edges))

    def standalone_quality(self, arch: Architecture, rng: np.random.Generator) -> float:
        return self.true_quality(arch) + float(rng.normal(0.0, self.standalone_sigma))

    def evaluate(self, arch: Architecture, rng: Optional[np.random.Generator] = None) -> float:
        if rng is None or self.standalone_sigma == 0:
            return self.true_quality(arch)
        return self.standalone_quality(arch, rng)

    def close(self) -> None:
        pass


def true_quality(bench: SyntheticBenchmark, arch: Architecture) -> float:
    return bench.true_quality(arch)


def train_signal(bench: SyntheticBenchmark, edges: Sequence[Edge], block: Optional[int],
                 rng: np.random.Generator) -> np.ndarray:
    return bench.train_signal(edges, block, rng)


LatencyKey = Tuple[str, int, int, int]


def latency_key(edge: Edge) -> LatencyKey:
    return edge.choice, edge.h, edge.w, edge.channels


@dataclass
class LatencyTable:
    entries: Dict[LatencyKey, float] = field(default_factory=dict)
    head_cost: float = 0.5

    def __post_init__(self):
        bad = [k for k, v in self.entries.items() if not v > 0]
        if bad or not self.head_cost > 0:
            raise ValueError(f"latency costs must be positive (offending keys: {bad[:3]})")

    def cost(self, edge: Edge) -> float:
        key = latency_key(edge)
        try:
            return self.entries[key]
        except KeyError:
            raise MissingLatencyEntryError(key) from None

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["op", "h", "w", "channels", "ms"])
            writer.writerow(["HEAD", 0, 0, 0, repr(float(self.head_cost))])
            for key in sorted(self.entries):
                writer.writerow([*key, repr(float(self.entries[key]))])

    @classmethod
    def from_csv(cls, path) -> "LatencyTable":
        entries: Dict[LatencyKey, float] = {}
        head_cost = None
        with open(path, "r", newline="", encoding="utf-8") as f:
            for row in csv.DictReader(f):
                if row["op"] == "HEAD":
                    head_cost = float(row["ms"])
                else:
                    entries[(row["op"], int(row["h"]), int(row["w"]), int(row["channels"]))] = float(row["ms"])
        if head_cost is None:
            raise ValueError(f"{path}: latency table has no HEAD row")
        return cls(entries, head_cost)


def path_latency(edges: Sequence[Edge], table: LatencyTable) -> float:
    return table.head_cost + sum(table.cost(e) for e in edges)


def latency(arch: Architecture, table: LatencyTable, config: SpaceConfig) -> float:
    """Modelled latency in milliseconds: the head plus every layer's table entry."""
    return path_latency(architecture_edges(arch, config), table)


def conv_cost(op: ConvChoice, stride: StridePair, h: int, w: int, channels: int) -> float:
    return CONV_UNIT_MS * op.kernel ** 2 * op.expansion * (h // stride.sh) * (w // stride.sw) * channels


def transformer_cost(choice: TransformerChoice, h: int, w: int, channels: int) -> float:
    factor = 1.0 + 0.05 * choice.residual_attention + 0.25 * choice.relative_embedding + 0.5 * choice.use_glu
    if choice.drop_scaling:
        factor *= 0.99
    return SEQ_UNIT_MS * h * w * channels ** 2 * factor


def synth_latency_table(config: SpaceConfig, seed: int = 0, head_cost: float = 0.5) -> LatencyTable:
    """
    Latency table over every edge of the supernet mesh.

    Costs follow kernel^2 x expansion x output size x channels; each operator
    kind gets one seeded jitter factor in [0.95, 1.05].
    """
    rng = np.random.default_rng(seed)
    spatial_kinds = sorted(f"{op.token}{s.token}" for op in config.op_choices for s in O_S)
    seq_kinds = [f"T{c.bits}" for c in ALL_TRANSFORMER_CHOICES]
    jitter = dict(zip(spatial_kinds + seq_kinds, rng.uniform(0.95, 1.05, size=len(spatial_kinds) + len(seq_kinds))))

    entries: Dict[LatencyKey, float] = {}
    for edge, choice in mesh_edges(config):
        if isinstance(choice, TransformerChoice):
            cost = transformer_cost(choice, edge.h, edge.w, edge.channels)
        else:
            stride, op = choice
            cost = conv_cost(op, stride, edge.h, edge.w, edge.channels)
        entries[latency_key(edge)] = float(cost * jitter[edge.choice])
    LOGGER.debug("synthesised latency table with %d entries", len(entries))
    return LatencyTable(entries, head_cost)


@dataclass(frozen=True)
class EvalRequest:
    mode: str
    arch: str
    seed: int
    block: Optional[int] = None

    def to_dict(self) -> Dict:
        payload = {"mode": self.mode, "arch": self.arch}
        if self.block is not None:
            payload["block"] = self.block
        payload["seed"] = self.seed
        return payload


@dataclass(frozen=True)
class EvalResponse:
    value: float
    ok: bool
    message: str = ""

    @classmethod
    def from_dict(cls, data: Dict) -> "EvalResponse":
        return cls(float(data.get("value", math.nan)), bool(data["ok"]), str(data.get("message", "")))


def external_evaluate(endpoint: EvaluatorConnection, request: EvalRequest) -> EvalResponse:
    return EvalResponse.from_dict(endpoint.request(request.to_dict()))


class ExternalEvaluator:
    """
    Evaluator backed by child processes speaking the line protocol.

    One child per worker; each call borrows an idle child for its request.
    Training steps send the trained edges as the arch field and spread the
    returned value evenly over them.
    """

    def __init__(self, command: Union[str, Sequence[str]], workers: int = 1,
                 timeout: float = 30.0, seed: int = 0):
        self.command = command
        self.seed = seed
        self._idle: "queue.Queue[EvaluatorConnection]" = queue.Queue()
        self._connections: List[EvaluatorConnection] = []
        try:
            for _ in range(max(1, workers)):
                connection = EvaluatorConnection(command, timeout)
                self._connections.append(connection)
                self._idle.put(connection)
        except EvaluatorError:
            self.close()
            raise

    @contextmanager
    def _borrow(self) -> Iterator[EvaluatorConnection]:
        """
        Lend an idle child. A child whose request failed in transport may still
        owe a late answer, so it is killed and replaced instead of returned.
        """
        if not self._connections:
            raise EvaluatorExitError("no evaluator process left", None)
        connection = self._idle.get()
        try:
            yield connection
        except EvaluatorError:
            self._replace(connection)
            raise
        self._idle.put(connection)

    def _replace(self, connection: EvaluatorConnection) -> None:
        connection.kill()
        self._connections.remove(connection)
        try:
            fresh = EvaluatorConnection(self.command, connection.timeout)
        except EvaluatorError as e:
            LOGGER.error("cannot restart evaluator: %s", e)
            return
        self._connections.append(fresh)
        self._idle.put(fresh)
        LOGGER.warning("replaced evaluator process after a failed request")

    def _ask(self, request: EvalRequest) -> float:
        with self._borrow() as connection:
            response = external_evaluate(connection, request)
        if not response.ok:
            raise EvaluatorError(f"evaluator rejected {request.arch}: {response.message}")
        return response.value

    def evaluate(self, arch: Architecture, rng: Optional[np.random.Generator] = None) -> float:
        seed = self.seed if rng is None else int(rng.integers(2 ** 31))
        return self._ask(EvalRequest("evaluate", arch.canonical, seed))

    def train_signal(self, edges: Sequence[Edge], block: Optional[int], rng: np.random.Generator) -> np.ndarray:
        if not len(edges):
            return np.zeros(0)
        request = EvalRequest("train_step", "-".join(e.id for e in edges), int(rng.integers(2 ** 31)), block)
        value = self._ask(request)
        return np.full(len(edges), value / len(edges))

    def block_bias(self, block: Optional[int]) -> float:
        return 0.0

    def close(self) -> None:
        for connection in self._connections:
            connection.close()
        self._connections.clear()

    def __enter__(self) -> "ExternalEvaluator":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
