"""
distribution.py - Factored exponential-family distribution over architectures.

Every decision is a categorical in natural parameters: for n_c categories
eta has n_c-1 entries, eta_j = log(p_j / p_last), and the sufficient
statistic T(y) is the one-hot of y with the last category dropped.

Decisions, and therefore every flat vector (gradients, Fisher, eta), come in
a fixed order: one operator decision per spatial layer, then one position
decision per non-identity stride slot ((2,2) slots first), then four binary
decisions per transformer layer in bit order.
"""
from __future__ import annotations

import itertools
import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Sequence, Tuple

import numpy as np
from scipy.linalg import block_diag
from scipy.special import logsumexp

from search_space import (
    STRIDE_11,
    STRIDE_21,
    STRIDE_22,
    Architecture,
    InvalidConfigError,
    SpaceConfig,
    TransformerChoice,
    enumerate_architectures,
    validate,
)

LOGGER = logging.getLogger(__name__)

MAX_SLOT_ATTEMPTS = 10_000


class DegenerateDistributionError(RuntimeError):
    """Raised when stride slots keep colliding and no architecture can be drawn."""


class ArchitectureMismatchError(ValueError):
    """Raised when an architecture does not belong to the distribution's search space."""


@dataclass(frozen=True, eq=False)
class CategoricalNat:
    eta: np.ndarray

    def __post_init__(self):
        eta = np.array(self.eta, dtype=float).reshape(-1)
        if not np.all(np.isfinite(eta)):
            raise ValueError("natural parameters must be finite")
        eta.setflags(write=False)
        object.__setattr__(self, "eta", eta)

    @classmethod
    def uniform(cls, n_c: int) -> "CategoricalNat":
        return cls(np.zeros(n_c - 1))

    @property
    def n_c(self) -> int:
        return self.eta.size + 1

    def log_normalizer(self) -> float:
        """phi(eta) = log(1 + sum exp(eta))."""
        return float(logsumexp(np.append(self.eta, 0.0)))

    def probs(self) -> np.ndarray:
        # softmax over (eta, 0) with the max subtracted
        logits = np.append(self.eta, 0.0)
        z = np.exp(logits - logits.max())
        return z / z.sum()

    def log_probs(self) -> np.ndarray:
        return np.append(self.eta, 0.0) - self.log_normalizer()

    def sufficient(self, category: int) -> np.ndarray:
        t = np.zeros(self.eta.size)
        if category < self.eta.size:
            t[category] = 1.0
        return t

    def fisher(self) -> np.ndarray:
        p = self.probs()[:-1]
        return np.diag(p) - np.outer(p, p)

    def draw(self, rng: np.random.Generator) -> int:
        cdf = np.cumsum(self.probs())
        return int(min(np.searchsorted(cdf, rng.random(), side="right"), self.n_c - 1))


def probs(d: CategoricalNat) -> np.ndarray:
    return d.probs()


SEQ_BIT_NAMES = TransformerChoice.BIT_NAMES


@dataclass(frozen=True, eq=False)
class ArchDistribution:
    config: SpaceConfig
    op_decisions: Tuple[CategoricalNat, ...]
    slot_decisions: Tuple[CategoricalNat, ...]
    seq_decisions: Tuple[Tuple[CategoricalNat, ...], ...]
    slot_types: Tuple = field(init=False)

    def __post_init__(self):
        config = self.config
        object.__setattr__(self, "op_decisions", tuple(self.op_decisions))
        object.__setattr__(self, "slot_decisions", tuple(self.slot_decisions))
        object.__setattr__(self, "seq_decisions", tuple(tuple(layer) for layer in self.seq_decisions))
        object.__setattr__(self, "slot_types", tuple(config.slot_multiset))

        if len(self.op_decisions) != config.M or any(d.n_c != len(config.op_choices) for d in self.op_decisions):
            raise InvalidConfigError(f"expected {config.M} operator decisions over {len(config.op_choices)} choices")
        if len(self.slot_decisions) != len(self.slot_types) or any(d.n_c != config.M for d in self.slot_decisions):
            raise InvalidConfigError(f"expected {len(self.slot_types)} slot decisions over {config.M} positions")
        if len(self.seq_decisions) != config.N or any(
            len(layer) != 4 or any(d.n_c != 2 for d in layer) for layer in self.seq_decisions
        ):
            raise InvalidConfigError(f"expected {config.N} transformer layers of four binary decisions")

    @classmethod
    def uniform(cls, config: SpaceConfig) -> "ArchDistribution":
        return cls(
            config,
            tuple(CategoricalNat.uniform(len(config.op_choices)) for _ in range(config.M)),
            tuple(CategoricalNat.uniform(config.M) for _ in config.slot_multiset),
            tuple(tuple(CategoricalNat.uniform(2) for _ in SEQ_BIT_NAMES) for _ in range(config.N)),
        )

    @property
    def decisions(self) -> List[Tuple[str, CategoricalNat]]:
        """(decision id, categorical) pairs in flat-vector order."""
        out = [(f"op/{i + 1}", d) for i, d in enumerate(self.op_decisions)]
        counters = {STRIDE_22: 0, STRIDE_21: 0}
        for stride, d in zip(self.slot_types, self.slot_decisions):
            counters[stride] += 1
            prefix = "slot22" if stride == STRIDE_22 else "slot21"
            out.append((f"{prefix}/{counters[stride]}", d))
        for i, layer in enumerate(self.seq_decisions):
            out.extend((f"seq/{i + 1}/{name}", d) for name, d in zip(SEQ_BIT_NAMES, layer))
        return out

    @property
    def dim(self) -> int:
        return sum(d.eta.size for _, d in self.decisions)

    def block_slices(self) -> List[slice]:
        slices, start = [], 0
        for _, d in self.decisions:
            slices.append(slice(start, start + d.eta.size))
            start += d.eta.size
        return slices

    def flat_eta(self) -> np.ndarray:
        return np.concatenate([d.eta for _, d in self.decisions] or [np.zeros(0)])

    def with_flat_eta(self, eta: np.ndarray) -> "ArchDistribution":
        eta = np.asarray(eta, dtype=float)
        if eta.shape != (self.dim,):
            raise ValueError(f"expected a vector of {self.dim} natural parameters, got shape {eta.shape}")
        cats = [CategoricalNat(eta[s]) for s in self.block_slices()]
        n_ops, n_slots = len(self.op_decisions), len(self.slot_decisions)
        seq = cats[n_ops + n_slots:]
        return ArchDistribution(
            self.config,
            tuple(cats[:n_ops]),
            tuple(cats[n_ops:n_ops + n_slots]),
            tuple(tuple(seq[i:i + 4]) for i in range(0, len(seq), 4)),
        )

    def to_dict(self) -> Dict[str, List[float]]:
        return {decision_id: [float(x) for x in d.eta] for decision_id, d in self.decisions}

    @classmethod
    def from_dict(cls, config: SpaceConfig, data: Dict[str, Sequence[float]]) -> "ArchDistribution":
        template = cls.uniform(config)
        expected = [decision_id for decision_id, _ in template.decisions]
        if sorted(data) != sorted(expected):
            raise InvalidConfigError("distribution state does not match the search space decisions")
        return template.with_flat_eta(np.concatenate([np.asarray(data[k], dtype=float) for k in expected]))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)

    @classmethod
    def load(cls, config: SpaceConfig, path) -> "ArchDistribution":
        try:
            with open(path, "r", encoding="utf-8") as f:
                data = json.load(f)
        except json.JSONDecodeError as e:
            raise InvalidConfigError(f"{path}: malformed distribution state: {e}") from e
        return cls.from_dict(config, data)


def sample(dist: ArchDistribution, rng: np.random.Generator,
           max_attempts: int = MAX_SLOT_ATTEMPTS) -> Architecture:
    """
    Draw an architecture; colliding stride positions are rejected and redrawn.

    Raises:
        DegenerateDistributionError: no collision-free slot placement in max_attempts draws.
    """
    config = dist.config
    ops = tuple(config.op_choices[d.draw(rng)] for d in dist.op_decisions)
    seq = tuple(
        TransformerChoice(*(d.draw(rng) == 1 for d in layer)) for layer in dist.seq_decisions
    )
    for _ in range(max_attempts):
        positions = [d.draw(rng) for d in dist.slot_decisions]
        if len(set(positions)) == len(positions):
            strides = [STRIDE_11] * config.M
            for stride, position in zip(dist.slot_types, positions):
                strides[position] = stride
            return Architecture(tuple(strides), ops, seq)
    raise DegenerateDistributionError(
        f"stride slots collided in all {max_attempts} attempts"
    )


def _check(dist: ArchDistribution, arch: Architecture) -> None:
    violations = validate(arch, dist.config)
    if violations:
        raise ArchitectureMismatchError(
            "architecture does not belong to this search space: "
            + "; ".join(v.message for v in violations)
        )


def _slot_assignments(dist: ArchDistribution, arch: Architecture):
    """
    Per stride type, the slot indices and the positions the architecture uses.

    Yields (slot indices, log-weights of each assignment, assignments) where an
    assignment maps the type's slots, in order, to a permutation of its positions.
    """
    for stride in (STRIDE_22, STRIDE_21):
        slots = [i for i, t in enumerate(dist.slot_types) if t == stride]
        if not slots:
            continue
        positions = [p for p, s in enumerate(arch.strides) if s == stride]
        assignments = list(itertools.permutations(positions))
        log_weights = np.array([
            sum(dist.slot_decisions[i].log_probs()[p] for i, p in zip(slots, perm))
            for perm in assignments
        ])
        yield slots, log_weights, assignments


def log_prob(dist: ArchDistribution, arch: Architecture) -> float:
    """Unnormalised pre-rejection log-probability of arch."""
    _check(dist, arch)
    config = dist.config
    total = 0.0
    for d, op in zip(dist.op_decisions, arch.ops):
        total += d.log_probs()[config.op_choices.index(op)]
    for layer, choice in zip(dist.seq_decisions, arch.seq):
        for d, name in zip(layer, SEQ_BIT_NAMES):
            total += d.log_probs()[int(getattr(choice, name))]
    for _, log_weights, _ in _slot_assignments(dist, arch):
        total += float(logsumexp(log_weights))
    return float(total)


def grad_log_prob(dist: ArchDistribution, arch: Architecture) -> np.ndarray:
    """Gradient of log_prob with respect to the flat natural parameters."""
    _check(dist, arch)
    config = dist.config
    parts: List[np.ndarray] = []
    for d, op in zip(dist.op_decisions, arch.ops):
        parts.append(d.sufficient(config.op_choices.index(op)) - d.probs()[:-1])

    slot_parts = [np.zeros(d.eta.size) for d in dist.slot_decisions]
    for slots, log_weights, assignments in _slot_assignments(dist, arch):
        weights = np.exp(log_weights - logsumexp(log_weights))
        for weight, perm in zip(weights, assignments):
            for i, p in zip(slots, perm):
                slot_parts[i] += weight * dist.slot_decisions[i].sufficient(p)
    for i, d in enumerate(dist.slot_decisions):
        slot_parts[i] -= d.probs()[:-1]
    parts.extend(slot_parts)

    for layer, choice in zip(dist.seq_decisions, arch.seq):
        for d, name in zip(layer, SEQ_BIT_NAMES):
            parts.append(d.sufficient(int(getattr(choice, name))) - d.probs()[:-1])
    return np.concatenate(parts) if parts else np.zeros(0)


def fisher_blocks(dist: ArchDistribution) -> List[np.ndarray]:
    return [d.fisher() for _, d in dist.decisions]


def fisher_analytic(dist: ArchDistribution) -> np.ndarray:
    """Block-diagonal Fisher matrix, one diag(p) - p p^T block per decision."""
    blocks = [b for b in fisher_blocks(dist) if b.size]
    if not blocks:
        return np.zeros((0, 0))
    return block_diag(*blocks)


def fisher_empirical(dist: ArchDistribution, samples: Iterable[Architecture]) -> np.ndarray:
    """Running average of score outer products, F <- (j F + g g^T) / (j + 1)."""
    fisher = np.zeros((dist.dim, dist.dim))
    j = 0
    for arch in samples:
        g = grad_log_prob(dist, arch)
        fisher = (j * fisher + np.outer(g, g)) / (j + 1)
        j += 1
    if j == 0:
        raise ValueError("fisher_empirical needs at least one sample")
    return fisher


def exact_fisher_and_gradient(dist: ArchDistribution, reward: Callable[[Architecture], float],
                              cap: int = 100_000) -> Tuple[np.ndarray, np.ndarray, float]:
    """
    Exact F, g = E[reward * score] and E[reward] by enumerating a small space.

    Weights are the normalised sampling probabilities, so slot rejection is
    accounted for exactly.
    """
    archs = list(enumerate_architectures(dist.config, cap))
    log_weights = np.array([log_prob(dist, a) for a in archs])
    weights = np.exp(log_weights - logsumexp(log_weights))
    fisher = np.zeros((dist.dim, dist.dim))
    grad = np.zeros(dist.dim)
    expected = 0.0
    for weight, arch in zip(weights, archs):
        g = grad_log_prob(dist, arch)
        r = reward(arch)
        fisher += weight * np.outer(g, g)
        grad += weight * r * g
        expected += weight * r
    return fisher, grad, float(expected)
