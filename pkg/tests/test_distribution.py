import math
from collections import Counter

import numpy as np
import pytest
from scipy.stats import chisquare

from distribution import (
    ArchDistribution,
    ArchitectureMismatchError,
    CategoricalNat,
    DegenerateDistributionError,
    SEQ_BIT_NAMES,
    exact_fisher_and_gradient,
    fisher_analytic,
    fisher_empirical,
    grad_log_prob,
    log_prob,
    probs,
    sample,
)
from search_space import SpaceConfig, enumerate_architectures, enumerate_paths, random_architecture, validate


def random_distribution(config: SpaceConfig, rng: np.random.Generator, scale: float = 1.0) -> ArchDistribution:
    uniform = ArchDistribution.uniform(config)
    return uniform.with_flat_eta(scale * rng.standard_normal(uniform.dim))


def test_categorical_probs_are_stable():
    d = CategoricalNat(np.array([1000.0, -1000.0, 0.0]))
    p = probs(d)
    assert np.all(np.isfinite(p))
    assert p.sum() == pytest.approx(1.0)
    assert p[0] == pytest.approx(1.0)
    assert d.log_normalizer() == pytest.approx(1000.0)


def test_categorical_uniform_and_sufficient_statistic():
    d = CategoricalNat.uniform(4)
    assert np.allclose(d.probs(), 0.25)
    assert np.array_equal(d.sufficient(1), [0.0, 1.0, 0.0])
    assert np.array_equal(d.sufficient(3), [0.0, 0.0, 0.0])
    with pytest.raises(ValueError):
        CategoricalNat(np.array([np.nan]))


def test_uniform_mass_is_the_collision_free_probability(toy_m3_config: SpaceConfig):
    dist = ArchDistribution.uniform(toy_m3_config)
    total = sum(math.exp(log_prob(dist, a)) for a in enumerate_architectures(toy_m3_config, 100_000))
    # two slots over three positions: 6 of the 9 placements do not collide
    assert total == pytest.approx(6 / 9)


def test_grad_log_prob_matches_finite_differences(toy_config: SpaceConfig, toy_m3_config: SpaceConfig):
    rng = np.random.default_rng(0)
    h = 1e-5
    for case in range(100):
        config = toy_config if case % 2 else toy_m3_config
        dist = random_distribution(config, rng)
        arch = random_architecture(config, rng)
        eta = dist.flat_eta()
        numeric = np.empty(dist.dim)
        for i in range(dist.dim):
            step = np.zeros(dist.dim)
            step[i] = h
            numeric[i] = (log_prob(dist.with_flat_eta(eta + step), arch)
                          - log_prob(dist.with_flat_eta(eta - step), arch)) / (2 * h)
        assert np.allclose(grad_log_prob(dist, arch), numeric, atol=1e-6)


def test_empirical_fisher_and_score_mean(flat_config: SpaceConfig):
    rng = np.random.default_rng(0)
    dist = random_distribution(flat_config, rng, scale=0.5)
    n = 100_000
    archs = [sample(dist, rng) for _ in range(n)]
    empirical = fisher_empirical(dist, archs)
    analytic = fisher_analytic(dist)
    assert np.linalg.norm(empirical - analytic) / np.linalg.norm(analytic) < 0.05

    scores = np.array([grad_log_prob(dist, a) for a in archs])
    standard_error = scores.std(axis=0) / math.sqrt(n)
    assert np.all(np.abs(scores.mean(axis=0)) <= 3 * standard_error)


def test_exact_fisher_matches_analytic_without_slots(flat_config: SpaceConfig):
    dist = random_distribution(flat_config, np.random.default_rng(2))
    fisher, grad, expected = exact_fisher_and_gradient(dist, lambda a: 1.0)
    assert np.allclose(fisher, fisher_analytic(dist), atol=1e-10)
    # a constant reward has zero gradient
    assert np.allclose(grad, 0.0, atol=1e-10)
    assert expected == pytest.approx(1.0)


def test_samples_are_valid(toy_config: SpaceConfig):
    rng = np.random.default_rng(4)
    dist = random_distribution(toy_config, rng)
    for _ in range(200):
        assert validate(sample(dist, rng), toy_config) == []


@pytest.mark.slow
def test_sampled_paths_are_uniform_and_marginals_match(toy_m3_config: SpaceConfig):
    rng = np.random.default_rng(6)
    n = 100_000
    uniform = ArchDistribution.uniform(toy_m3_config)
    counts = Counter(sample(uniform, rng).strides for _ in range(n))
    paths = list(enumerate_paths(toy_m3_config))
    assert set(counts) == set(paths) and len(paths) == 6
    assert all(abs(counts[p] / n - 1 / 6) <= 0.02 for p in paths)
    assert chisquare([counts[p] for p in paths]).pvalue > 0.01

    dist = random_distribution(toy_m3_config, rng)
    archs = [sample(dist, rng) for _ in range(n)]
    choices = toy_m3_config.op_choices
    for i, d in enumerate(dist.op_decisions):
        drawn = np.bincount([choices.index(a.ops[i]) for a in archs], minlength=d.n_c) / n
        assert np.all(np.abs(drawn - d.probs()) <= 0.01)
    for j, layer in enumerate(dist.seq_decisions):
        for d, name in zip(layer, SEQ_BIT_NAMES):
            drawn = sum(getattr(a.seq[j], name) for a in archs) / n
            assert abs(drawn - d.probs()[1]) <= 0.01


def test_colliding_slots_raise(toy_m3_config: SpaceConfig):
    dist = ArchDistribution.uniform(toy_m3_config)
    eta = dist.flat_eta()
    for s, (decision_id, _) in zip(dist.block_slices(), dist.decisions):
        if decision_id.startswith("slot"):
            eta[s] = [50.0, -50.0]
    with pytest.raises(DegenerateDistributionError):
        sample(dist.with_flat_eta(eta), np.random.default_rng(0), max_attempts=10)


def test_foreign_architecture_is_rejected(toy_config: SpaceConfig, toy_m3_config: SpaceConfig):
    arch = random_architecture(toy_config, np.random.default_rng(0))
    dist = ArchDistribution.uniform(toy_m3_config)
    with pytest.raises(ArchitectureMismatchError):
        log_prob(dist, arch)
    with pytest.raises(ArchitectureMismatchError):
        grad_log_prob(dist, arch)


def test_state_file(toy_config: SpaceConfig, tmp_path):
    dist = random_distribution(toy_config, np.random.default_rng(5))
    ids = [decision_id for decision_id, _ in dist.decisions]
    assert ids[0] == "op/1"
    assert "slot22/1" in ids and "slot21/1" in ids
    assert ids[-1] == "seq/1/use_glu"

    path = tmp_path / "distribution.json"
    dist.save(path)
    loaded = ArchDistribution.load(toy_config, path)
    assert np.array_equal(loaded.flat_eta(), dist.flat_eta())
