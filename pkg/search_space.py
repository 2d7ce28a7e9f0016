"""
search_space.py - Architecture choices and the stride-constrained search space.

An architecture is a downsampling path (one stride per spatial layer), one
inverted-bottleneck convolution per spatial layer and four binary design
choices per transformer layer. This module validates, counts, encodes,
samples and enumerates them.

Layers are 0-indexed in code. Geometry lists carry one extra leading entry
(the stem output, or the raw input when there is no stem), so entry i is the
feature map after layer i in the 1-indexed numbering used in reports.
"""
from __future__ import annotations

import itertools
import json
import logging
import math
import re
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

LOGGER = logging.getLogger(__name__)

CONFIG_KEYS = ("M", "N", "input_h", "input_w", "target_h", "target_w", "base_channels", "has_stem")
OPTIONAL_CONFIG_KEYS = ("op_choices",)

_INT64_MAX = int(np.iinfo(np.int64).max)


class InvalidConfigError(ValueError):
    """Raised when a SpaceConfig (or the document it is loaded from) is unusable."""


class DecodeError(ValueError):
    """Raised when a canonical architecture string cannot be parsed."""

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at position {position})")
        self.position = position


class CardinalityExceededError(ValueError):
    """Raised when enumeration is refused because the space is too large."""

    def __init__(self, cardinality: int, cap: int):
        super().__init__(f"search space has {cardinality} architectures, cap is {cap}")
        self.cardinality = cardinality
        self.cap = cap


class InvalidArchitectureError(ValueError):
    """Raised when an operation needs a valid architecture and gets an invalid one."""

    def __init__(self, violations: Sequence["Violation"]):
        joined = "; ".join(f"{v.constraint}: {v.message}" for v in violations)
        super().__init__(f"invalid architecture: {joined}")
        self.violations = list(violations)


@dataclass(frozen=True)
class StridePair:
    sh: int
    sw: int

    def __post_init__(self):
        if (self.sh, self.sw) not in ((2, 2), (2, 1), (1, 1)):
            raise ValueError(f"stride ({self.sh},{self.sw}) is not a candidate stride")

    @property
    def token(self) -> str:
        return f"S{self.sh}{self.sw}"

    def __repr__(self) -> str:
        return f"({self.sh},{self.sw})"


STRIDE_22 = StridePair(2, 2)
STRIDE_21 = StridePair(2, 1)
STRIDE_11 = StridePair(1, 1)

# Iteration order of the candidate strides, also used by the backtracking count.
O_S: Tuple[StridePair, ...] = (STRIDE_22, STRIDE_21, STRIDE_11)


@dataclass(frozen=True)
class ConvChoice:
    """MBConv operator: kernel size and expansion factor."""

    kernel: int
    expansion: int

    def __post_init__(self):
        if self.kernel not in (3, 5) or self.expansion not in (1, 6):
            raise ValueError(f"MBConv(k:{self.kernel},e:{self.expansion}) is not a candidate operator")

    @property
    def token(self) -> str:
        return f"MB{self.kernel}E{self.expansion}"

    @classmethod
    def from_token(cls, token: str) -> "ConvChoice":
        match = re.fullmatch(r"MB(\d)E(\d)", token)
        if not match:
            raise ValueError(f"not an operator token: {token!r}")
        return cls(int(match.group(1)), int(match.group(2)))


ALL_CONV_CHOICES: Tuple[ConvChoice, ...] = tuple(
    ConvChoice(k, e) for k in (3, 5) for e in (1, 6)
)


@dataclass(frozen=True)
class TransformerChoice:
    """Four binary choices of a transformer layer; True selects the alternative."""

    residual_attention: bool = False
    relative_embedding: bool = False
    drop_scaling: bool = False
    use_glu: bool = False

    BIT_NAMES = ("residual_attention", "relative_embedding", "drop_scaling", "use_glu")

    @property
    def bits(self) -> str:
        return "".join("1" if getattr(self, name) else "0" for name in self.BIT_NAMES)

    @property
    def code(self) -> int:
        return int(self.bits, 2)

    @classmethod
    def from_bits(cls, bits: str) -> "TransformerChoice":
        if len(bits) != 4 or set(bits) - {"0", "1"}:
            raise ValueError(f"not a transformer token: {bits!r}")
        return cls(*(b == "1" for b in bits))


ALL_TRANSFORMER_CHOICES: Tuple[TransformerChoice, ...] = tuple(
    TransformerChoice(*flags) for flags in itertools.product((False, True), repeat=4)
)


class LayerGeometry(NamedTuple):
    h: int
    w: int
    channels: int


class Violation(NamedTuple):
    constraint: str
    message: str


class SpaceCardinality(NamedTuple):
    paths: int
    spatial: int
    sequential: int
    total: int


def _is_power_of_two(value: int) -> bool:
    return value >= 1 and (value & (value - 1)) == 0


@dataclass(frozen=True)
class SpaceConfig:
    """
    Search-space definition.

    Args:
        M: number of spatial (MBConv) layers.
        N: number of transformer layers.
        input_h, input_w: input image size in pixels.
        target_h, target_w: feature-map size the spatial model must reach.
        base_channels: channel count entering the first searched layer.
        has_stem: prepend the fixed (2,2) stem layer.
        op_choices: operator candidate set, all four MBConv variants by default.
    """

    M: int
    N: int
    input_h: int
    input_w: int
    target_h: int
    target_w: int
    base_channels: int
    has_stem: bool = False
    op_choices: Tuple[ConvChoice, ...] = ALL_CONV_CHOICES

    def __post_init__(self):
        for name in CONFIG_KEYS[:-1]:
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, int):
                raise InvalidConfigError(f"{name} must be an integer, got {value!r}")
        if not isinstance(self.has_stem, bool):
            raise InvalidConfigError(f"has_stem must be a boolean, got {self.has_stem!r}")
        if self.M < 1 or self.N < 0 or self.base_channels < 1:
            raise InvalidConfigError("M must be >= 1, N >= 0 and base_channels >= 1")
        if min(self.input_h, self.input_w, self.target_h, self.target_w) < 1:
            raise InvalidConfigError("geometry sizes must be positive")
        if not self.op_choices or len(set(self.op_choices)) != len(self.op_choices):
            raise InvalidConfigError("op_choices must be a non-empty set of distinct operators")

        for axis, size, target in (("h", self.input_h, self.target_h), ("w", self.input_w, self.target_w)):
            if size % target or not _is_power_of_two(size // target):
                raise InvalidConfigError(
                    f"input_{axis}/target_{axis} = {size}/{target} is not a power of two"
                )
        rh, rw = self.residual_factors
        if rh < 1 or rw < 1:
            raise InvalidConfigError("the stem reduces the input below the target size")
        if rh < rw:
            raise InvalidConfigError(
                f"height reduction {rh} must be at least the width reduction {rw}"
            )
        if self.M < self.n22 + self.n21:
            raise InvalidConfigError(
                f"M={self.M} layers cannot hold the {self.n22 + self.n21} required downsampling strides"
            )

    @property
    def residual_factors(self) -> Tuple[int, int]:
        """Downsampling factors (S^h, S^w) the searched layers must realise."""
        rh = self.input_h // self.target_h
        rw = self.input_w // self.target_w
        if self.has_stem:
            return rh // 2, rw // 2
        return rh, rw

    @property
    def n22(self) -> int:
        return int(math.log2(self.residual_factors[1]))

    @property
    def n21(self) -> int:
        rh, rw = self.residual_factors
        return int(math.log2(rh)) - int(math.log2(rw))

    @property
    def slot_multiset(self) -> List[StridePair]:
        return derive_slots(self)

    @property
    def entry_geometry(self) -> Tuple[int, int]:
        """Feature-map size entering the first searched layer."""
        if self.has_stem:
            return self.input_h // 2, self.input_w // 2
        return self.input_h, self.input_w

    @classmethod
    def from_dict(cls, data: Dict) -> "SpaceConfig":
        if not isinstance(data, dict):
            raise InvalidConfigError("space config must be a JSON object")
        missing = [k for k in CONFIG_KEYS if k not in data]
        unknown = [k for k in data if k not in CONFIG_KEYS and k not in OPTIONAL_CONFIG_KEYS]
        if missing:
            raise InvalidConfigError(f"missing config keys: {', '.join(missing)}")
        if unknown:
            raise InvalidConfigError(f"unknown config keys: {', '.join(unknown)}")
        kwargs = {k: data[k] for k in CONFIG_KEYS}
        if "op_choices" in data:
            try:
                kwargs["op_choices"] = tuple(ConvChoice.from_token(t) for t in data["op_choices"])
            except (TypeError, ValueError) as e:
                raise InvalidConfigError(f"bad op_choices: {e}") from e
        return cls(**kwargs)

    def to_dict(self) -> Dict:
        data = {k: getattr(self, k) for k in CONFIG_KEYS}
        if self.op_choices != ALL_CONV_CHOICES:
            data["op_choices"] = [op.token for op in self.op_choices]
        return data


def load_space_config(path) -> SpaceConfig:
    """Read a SpaceConfig JSON document, turning every parse problem into InvalidConfigError."""
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise InvalidConfigError(f"{path}: malformed JSON: {e}") from e
    except OSError as e:
        raise InvalidConfigError(f"{path}: cannot read config: {e}") from e
    config = SpaceConfig.from_dict(data)
    LOGGER.debug("loaded space config %s: %s", path, data)
    return config


@dataclass(frozen=True)
class Architecture:
    strides: Tuple[StridePair, ...]
    ops: Tuple[ConvChoice, ...]
    seq: Tuple[TransformerChoice, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "strides", tuple(self.strides))
        object.__setattr__(self, "ops", tuple(self.ops))
        object.__setattr__(self, "seq", tuple(self.seq))

    @property
    def canonical(self) -> str:
        return encode(self)

    def __str__(self) -> str:
        return encode(self)


def derive_slots(config: SpaceConfig) -> List[StridePair]:
    """Non-identity strides every valid path contains, (2,2) slots first."""
    return [STRIDE_22] * config.n22 + [STRIDE_21] * config.n21


def count_sequences(n_layers: int, n22: int, n21: int) -> int:
    """Number of stride sequences over n_layers holding exactly n22 (2,2) and n21 (2,1)."""
    if n22 < 0 or n21 < 0 or n_layers < 0 or n22 + n21 > n_layers:
        return 0
    return math.comb(n_layers, n22 + n21) * math.comb(n22 + n21, n22)


def count_paths_backtracking(config: SpaceConfig) -> int:
    """
    Count downsampling paths by recursive backtracking over feature-map sizes.

    Every candidate stride is tried at every layer; moves that shrink the map
    below the target are pruned, and a path counts when it lands exactly on
    the target after the last layer. Memoised on (h, w, layer).
    """
    entry_h, entry_w = config.entry_geometry

    @lru_cache(maxsize=None)
    def backtrack(h: int, w: int, layer: int) -> int:
        if layer == config.M:
            return 1 if (h == config.target_h and w == config.target_w) else 0
        n = 0
        for stride in O_S:
            next_h, next_w = h // stride.sh, w // stride.sw
            if next_h < config.target_h or next_w < config.target_w:
                continue
            n += backtrack(next_h, next_w, layer + 1)
        return n

    return backtrack(entry_h, entry_w, 0)


def count_paths(config: SpaceConfig, method: str = "dp") -> int:
    """
    Number of stride sequences of length M satisfying the product constraints.

    Args:
        config: the search space.
        method: "dp" (closed form, default) or "backtracking".
    """
    if method == "dp":
        return count_sequences(config.M, config.n22, config.n21)
    if method == "backtracking":
        return count_paths_backtracking(config)
    raise ValueError(f"unknown counting method {method!r}")


def space_cardinality(config: SpaceConfig) -> SpaceCardinality:
    paths = count_paths(config)
    spatial = paths * len(config.op_choices) ** config.M
    sequential = len(ALL_TRANSFORMER_CHOICES) ** config.N
    return SpaceCardinality(paths, spatial, sequential, spatial * sequential)


def validate(arch: Architecture, config: SpaceConfig) -> List[Violation]:
    """Return the violated constraints of arch; an empty list means the architecture is valid."""
    violations: List[Violation] = []
    if len(arch.strides) != config.M:
        violations.append(Violation("strides-length", f"expected {config.M} strides, got {len(arch.strides)}"))
    if len(arch.ops) != config.M:
        violations.append(Violation("ops-length", f"expected {config.M} operators, got {len(arch.ops)}"))
    if len(arch.seq) != config.N:
        violations.append(Violation("seq-length", f"expected {config.N} transformer layers, got {len(arch.seq)}"))

    for i, stride in enumerate(arch.strides):
        if not isinstance(stride, StridePair):
            violations.append(Violation("stride-choice", f"layer {i + 1}: {stride!r} is not a stride"))
    for i, op in enumerate(arch.ops):
        if op not in config.op_choices:
            violations.append(Violation("op-choice", f"layer {i + 1}: {op!r} is not a candidate operator"))
    for i, choice in enumerate(arch.seq):
        if not isinstance(choice, TransformerChoice):
            violations.append(Violation("seq-choice", f"layer {config.M + i + 1}: {choice!r} is not a transformer choice"))

    strides = [s for s in arch.strides if isinstance(s, StridePair)]
    rh, rw = config.residual_factors
    prod_h = math.prod(s.sh for s in strides)
    prod_w = math.prod(s.sw for s in strides)
    if prod_h != rh:
        violations.append(Violation("h-product", f"stride heights multiply to {prod_h}, need {rh}"))
    if prod_w != rw:
        violations.append(Violation("w-product", f"stride widths multiply to {prod_w}, need {rw}"))
    return violations


def channels_at(config: SpaceConfig, h: int) -> int:
    """
    Channel count of a feature map of height h.

    The first height reduction keeps base_channels, every later one doubles it.
    """
    entry_h = config.entry_geometry[0]
    return config.base_channels * max(1, entry_h // (2 * h))


def node_geometry(config: SpaceConfig, used22: int, used21: int) -> Tuple[int, int]:
    """Feature-map size after using the given numbers of (2,2) and (2,1) strides."""
    entry_h, entry_w = config.entry_geometry
    return entry_h >> (used22 + used21), entry_w >> used22


def walk_geometry(config: SpaceConfig, strides: Sequence[StridePair],
                  start: Optional[Tuple[int, int]] = None) -> List[LayerGeometry]:
    """Geometry before the first stride and after each one, for full or partial paths."""
    h, w = start if start is not None else config.entry_geometry
    out = [LayerGeometry(h, w, channels_at(config, h))]
    for stride in strides:
        h, w = h // stride.sh, w // stride.sw
        out.append(LayerGeometry(h, w, channels_at(config, h)))
    return out


def derive_geometry(arch: Architecture, config: SpaceConfig) -> List[LayerGeometry]:
    violations = validate(arch, config)
    if violations:
        raise InvalidArchitectureError(violations)
    return walk_geometry(config, arch.strides)


class Edge(NamedTuple):
    """
    One edge of the supernet mesh: a choice taken at a layer from a given input node.

    Spatial edges carry the input geometry and channel count, transformer
    edges carry the target geometry and final channel count.
    """

    layer: int  # 1-indexed over spatial then transformer layers
    h: int
    w: int
    channels: int
    choice: str

    @property
    def id(self) -> str:
        return f"{self.layer}@{self.h}x{self.w}:{self.choice}"


def spatial_edges(config: SpaceConfig, strides: Sequence[StridePair], ops: Sequence[ConvChoice],
                  first_layer: int = 1, start: Optional[Tuple[int, int]] = None) -> List[Edge]:
    geometry = walk_geometry(config, strides, start)
    return [
        Edge(first_layer + i, g.h, g.w, g.channels, f"{op.token}{stride.token}")
        for i, (g, stride, op) in enumerate(zip(geometry, strides, ops))
    ]


def sequential_edges(config: SpaceConfig, seq: Sequence[TransformerChoice],
                     first_layer: Optional[int] = None) -> List[Edge]:
    first_layer = config.M + 1 if first_layer is None else first_layer
    channels = channels_at(config, config.target_h)
    return [
        Edge(first_layer + i, config.target_h, config.target_w, channels, f"T{choice.bits}")
        for i, choice in enumerate(seq)
    ]


def architecture_edges(arch: Architecture, config: SpaceConfig) -> List[Edge]:
    return spatial_edges(config, arch.strides, arch.ops) + sequential_edges(config, arch.seq)


def reachable_nodes(config: SpaceConfig, layer: int) -> Iterator[Tuple[int, int]]:
    """(used22, used21) stride counts a valid path can hold before 0-indexed layer."""
    remaining = config.M - layer
    for used22 in range(config.n22 + 1):
        for used21 in range(config.n21 + 1):
            if used22 + used21 > layer:
                continue
            if (config.n22 - used22) + (config.n21 - used21) > remaining:
                continue
            yield used22, used21


def next_strides(config: SpaceConfig, layer: int, used22: int, used21: int) -> List[StridePair]:
    """Strides at 0-indexed layer from node (used22, used21) that keep the path completable."""
    out = []
    for stride in O_S:
        rest22 = config.n22 - used22 - (stride == STRIDE_22)
        rest21 = config.n21 - used21 - (stride == STRIDE_21)
        if count_sequences(config.M - layer - 1, rest22, rest21):
            out.append(stride)
    return out


def mesh_edges(config: SpaceConfig, layers: Optional[Iterable[int]] = None) -> Iterator[Tuple[Edge, object]]:
    """
    Every edge some valid architecture uses, with the choice it stands for.

    Spatial edges come with (stride, op), transformer edges with their
    TransformerChoice. layers restricts the output to those 1-indexed layers.
    """
    wanted = None if layers is None else set(layers)
    for layer in range(config.M):
        if wanted is not None and layer + 1 not in wanted:
            continue
        for used22, used21 in reachable_nodes(config, layer):
            h, w = node_geometry(config, used22, used21)
            channels = channels_at(config, h)
            for stride in next_strides(config, layer, used22, used21):
                for op in config.op_choices:
                    yield Edge(layer + 1, h, w, channels, f"{op.token}{stride.token}"), (stride, op)
    channels = channels_at(config, config.target_h)
    for i in range(config.N):
        if wanted is not None and config.M + i + 1 not in wanted:
            continue
        for choice in ALL_TRANSFORMER_CHOICES:
            yield Edge(config.M + i + 1, config.target_h, config.target_w, channels, f"T{choice.bits}"), choice


_SPATIAL_TOKEN = re.compile(r"MB(\d)E(\d)S(\d)(\d)")
_SEQ_TOKEN = re.compile(r"[01]{4}")


def encode(arch: Architecture) -> str:
    spatial = "-".join(f"{op.token}{stride.token}" for op, stride in zip(arch.ops, arch.strides))
    sequential = "-".join(choice.bits for choice in arch.seq)
    return f"{spatial}|{sequential}"


def decode(text: str, config: SpaceConfig) -> Architecture:
    """Parse a canonical architecture string; errors carry the character position."""
    if text.count("|") != 1:
        raise DecodeError("expected exactly one '|' separator", text.find("|") if "|" in text else len(text))
    spatial_part, seq_part = text.split("|")
    strides: List[StridePair] = []
    ops: List[ConvChoice] = []
    position = 0
    for token in spatial_part.split("-") if spatial_part else []:
        match = _SPATIAL_TOKEN.fullmatch(token)
        if not match:
            raise DecodeError(f"malformed spatial token {token!r}", position)
        try:
            op = ConvChoice(int(match.group(1)), int(match.group(2)))
            stride = StridePair(int(match.group(3)), int(match.group(4)))
        except ValueError as e:
            raise DecodeError(str(e), position) from e
        ops.append(op)
        strides.append(stride)
        position += len(token) + 1

    position = len(spatial_part) + 1
    seq: List[TransformerChoice] = []
    for token in seq_part.split("-") if seq_part else []:
        if not _SEQ_TOKEN.fullmatch(token):
            raise DecodeError(f"malformed transformer token {token!r}", position)
        seq.append(TransformerChoice.from_bits(token))
        position += len(token) + 1

    if len(strides) != config.M:
        raise DecodeError(f"expected {config.M} spatial tokens, got {len(strides)}", len(spatial_part))
    if len(seq) != config.N:
        raise DecodeError(f"expected {config.N} transformer tokens, got {len(seq)}", len(text))
    return Architecture(tuple(strides), tuple(ops), tuple(seq))


def _draw_below(total: int, rng: np.random.Generator) -> int:
    """Uniform integer in [0, total), exact while total fits in int64."""
    if total <= _INT64_MAX:
        return int(rng.integers(total))
    return int(rng.random() * total)


def sample_stride_sequence(n_layers: int, n22: int, n21: int,
                           rng: np.random.Generator) -> List[StridePair]:
    """
    Uniform draw among stride sequences with exactly n22 (2,2) and n21 (2,1) strides.

    Walks the layers choosing each stride with probability proportional to
    the number of completions that remain after it.
    """
    if count_sequences(n_layers, n22, n21) == 0:
        raise ValueError(f"no stride sequence over {n_layers} layers holds {n22}x(2,2) and {n21}x(2,1)")
    strides: List[StridePair] = []
    for layer in range(n_layers):
        remaining = n_layers - layer - 1
        ways = count_sequences(remaining + 1, n22, n21)
        ways22 = count_sequences(remaining, n22 - 1, n21)
        ways21 = count_sequences(remaining, n22, n21 - 1)
        u = _draw_below(ways, rng)
        if u < ways22:
            strides.append(STRIDE_22)
            n22 -= 1
        elif u < ways22 + ways21:
            strides.append(STRIDE_21)
            n21 -= 1
        else:
            strides.append(STRIDE_11)
    return strides


def uniform_path_sample(config: SpaceConfig, rng: np.random.Generator) -> List[StridePair]:
    return sample_stride_sequence(config.M, config.n22, config.n21, rng)


def random_architecture(config: SpaceConfig, rng: np.random.Generator) -> Architecture:
    """Uniform draw over the whole search space."""
    strides = uniform_path_sample(config, rng)
    ops = [config.op_choices[i] for i in rng.integers(len(config.op_choices), size=config.M)]
    seq = [ALL_TRANSFORMER_CHOICES[i] for i in rng.integers(len(ALL_TRANSFORMER_CHOICES), size=config.N)]
    return Architecture(tuple(strides), tuple(ops), tuple(seq))


def enumerate_stride_sequences(n_layers: int, n22: int, n21: int) -> Iterator[Tuple[StridePair, ...]]:
    """All stride sequences with the given stride counts, in O_S order."""
    if n_layers == 0:
        if n22 == 0 and n21 == 0:
            yield ()
        return
    for stride in O_S:
        rest22 = n22 - (stride == STRIDE_22)
        rest21 = n21 - (stride == STRIDE_21)
        if count_sequences(n_layers - 1, rest22, rest21) == 0:
            continue
        for tail in enumerate_stride_sequences(n_layers - 1, rest22, rest21):
            yield (stride,) + tail


def enumerate_paths(config: SpaceConfig) -> Iterator[Tuple[StridePair, ...]]:
    return enumerate_stride_sequences(config.M, config.n22, config.n21)


def enumerate_architectures(config: SpaceConfig, cap: int) -> Iterator[Architecture]:
    """
    Yield every architecture of the space exactly once.

    Raises:
        CardinalityExceededError: when the space holds more than cap architectures.
    """
    total = space_cardinality(config).total
    if total > cap:
        raise CardinalityExceededError(total, cap)
    return _enumerate(config)


def _enumerate(config: SpaceConfig) -> Iterator[Architecture]:
    for strides in enumerate_paths(config):
        for ops in itertools.product(config.op_choices, repeat=config.M):
            for seq in itertools.product(ALL_TRANSFORMER_CHOICES, repeat=config.N):
                yield Architecture(strides, ops, seq)
