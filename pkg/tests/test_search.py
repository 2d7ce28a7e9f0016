import numpy as np
import pytest

from analysis import convergence_curves, final_aggregate, search_comparison
from distribution import ArchDistribution, CategoricalNat, exact_fisher_and_gradient, log_prob
from evaluator import SyntheticBenchmark, latency, synth_latency_table
from search import (
    IterationRecord,
    NoFeasibleArchitectureError,
    SearchConfig,
    SearchTrace,
    arch_to_genome,
    constrained_best,
    evolutionary_search,
    exhaustive_search,
    genome_to_arch,
    gene_cardinalities,
    ngd_search,
    ngd_step,
    random_search,
    run_search,
    standardize,
)
from search_space import SpaceConfig, enumerate_architectures, random_architecture, validate

SEEDS = range(20)
TOY_SEARCH = SearchConfig(T=50, B=16)


def record(iteration, archs, rewards, feasible):
    return IterationRecord(iteration, archs, rewards, [1.0] * len(archs), feasible, None, None)


def test_config_validation():
    for bad in ({"T": 0}, {"B": 0}, {"rho": 0.0}, {"damping": -1.0}, {"pop": 1}, {"mut_rate": 2.0}):
        with pytest.raises(ValueError):
            SearchConfig(**bad)


def test_natural_gradient_is_the_mean_parameter_gradient():
    rng = np.random.default_rng(0)
    for n_c in (2, 3, 5, 8):
        d = CategoricalNat(rng.standard_normal(n_c - 1))
        rewards = rng.standard_normal(n_c)
        p = d.probs()
        grad = sum(p[c] * rewards[c] * (d.sufficient(c) - p[:-1]) for c in range(n_c))
        natural = np.linalg.solve(d.fisher(), grad)
        assert np.allclose(natural, rewards[:-1] - rewards[-1], atol=1e-8)


def test_exact_ngd_never_decreases_the_expected_reward():
    config = SpaceConfig(M=1, N=0, input_h=2, input_w=2, target_h=2, target_w=2, base_channels=8)
    values = {op: v for op, v in zip(config.op_choices, (0.2, 0.9, 0.5, 0.4))}

    def reward(arch):
        return values[arch.ops[0]]

    dist = ArchDistribution.uniform(config)
    history = []
    for _ in range(100):
        fisher, grad, expected = exact_fisher_and_gradient(dist, reward)
        history.append(expected)
        dist = ngd_step(dist, fisher, grad, rho=0.01, damping=0.0)
    assert all(b >= a - 1e-12 for a, b in zip(history, history[1:]))
    assert history[-1] > history[0]


def test_batch_rewards_are_standardized():
    used = standardize(np.array([0.71, 0.72, 0.74, 0.73]))
    assert used.mean() == pytest.approx(0.0, abs=1e-12)
    assert used.std() == pytest.approx(1.0)
    assert list(np.argsort(used)) == [0, 1, 3, 2]
    assert np.array_equal(standardize(np.full(3, 0.5)), np.zeros(3))


def test_standardized_rewards_move_toward_the_toy_optimum(toy_config, toy_store, toy_table, toy_optimum):
    dist0 = ArchDistribution.uniform(toy_config)
    standardized = ngd_search(dist0, toy_store, None, toy_table, SearchConfig(seed=0))
    raw = ngd_search(dist0, toy_store, None, toy_table, SearchConfig(seed=0, normalize=False))
    best = toy_optimum[0]
    # reward gaps of about 1e-2 barely move the raw step
    assert log_prob(standardized.distribution, best) > log_prob(raw.distribution, best) + 3.0
    assert log_prob(standardized.distribution, best) > log_prob(dist0, best) + 3.0


def test_constrained_best_ties_and_infeasibility(toy_config: SpaceConfig):
    rng = np.random.default_rng(0)
    a, b, c = (random_architecture(toy_config, rng) for _ in range(3))
    trace = SearchTrace("random", [record(0, [a, b], [0.5, 0.7], [True, False]),
                                   record(1, [c], [0.5], [True])])
    assert constrained_best(trace) == (a, 0.5)

    with pytest.raises(NoFeasibleArchitectureError):
        constrained_best(SearchTrace("random", [record(0, [b], [0.7], [False])]))


def test_single_sample_on_a_single_architecture_space(one_arch_config: SpaceConfig):
    only = next(iter(enumerate_architectures(one_arch_config, 10)))
    bench = SyntheticBenchmark(one_arch_config, seed=0)
    table = synth_latency_table(one_arch_config)
    result = random_search(one_arch_config, None, bench, table, SearchConfig(T=1, B=1))
    assert result.best == only
    assert len(result.trace) == 1
    assert result.trace.records[0].feasible == [True]


def test_unreachable_budget_is_not_found(toy_config, toy_store, toy_table):
    dist0 = ArchDistribution.uniform(toy_config)
    for method in ("ngd", "ea", "random"):
        result = run_search(method, dist0, toy_store, None, toy_table, SearchConfig(T=3, B=4, r_max=0.0))
        assert not result.found
        assert len(result.trace) > 0
        with pytest.raises(NoFeasibleArchitectureError):
            constrained_best(result.trace)


def test_trace_invariants_under_a_budget(toy_config, toy_store, toy_optimum):
    # toy layers cost microseconds, so the head must not dominate the budget
    table = synth_latency_table(toy_config, seed=0, head_cost=1e-4)
    r_max = 2 / 3 * latency(toy_optimum[0], table, toy_config)
    dist0 = ArchDistribution.uniform(toy_config)
    cfg = SearchConfig(T=20, B=8, r_max=r_max, seed=3)
    constrained = exhaustive_search(toy_config, toy_store, None, table, r_max)
    for method in ("ngd", "ea", "random"):
        result = run_search(method, dist0, toy_store, None, table, cfg)
        perfs = [p for p in result.trace.best_so_far() if p is not None]
        assert perfs == sorted(perfs)
        for rec in result.trace.records:
            if rec.best_arch is not None:
                assert latency(rec.best_arch, table, toy_config) <= r_max
        if constrained is None:
            assert not result.found
        elif result.found:
            assert validate(result.best, toy_config) == []
            assert result.best_latency <= r_max
            assert (result.best, result.best_perf) == constrained_best(result.trace)
            assert result.best_perf <= constrained[1]


def test_search_is_deterministic_and_parallel_safe(toy_config, toy_store, toy_table, tmp_path):
    dist0 = ArchDistribution.uniform(toy_config)
    cfg = SearchConfig(T=5, B=8, seed=11)
    one = ngd_search(dist0, toy_store, None, toy_table, cfg)
    two = ngd_search(dist0, toy_store, None, toy_table, SearchConfig(T=5, B=8, seed=11, workers=3))
    assert [r.to_dict() for r in one.trace.records] == [r.to_dict() for r in two.trace.records]
    assert np.array_equal(one.distribution.flat_eta(), two.distribution.flat_eta())

    paths = [tmp_path / "a.jsonl", tmp_path / "b.jsonl"]
    one.trace.write_jsonl(paths[0])
    two.trace.write_jsonl(paths[1])
    assert paths[0].read_bytes() == paths[1].read_bytes()
    assert len(paths[0].read_text(encoding="utf-8").splitlines()) == 5


def test_genome_round_trip(toy_config: SpaceConfig):
    rng = np.random.default_rng(0)
    cards = gene_cardinalities(toy_config)
    assert cards == [2] * 6 + [6, 6] + [2] * 4
    for _ in range(20):
        arch = random_architecture(toy_config, rng)
        genome = arch_to_genome(arch, toy_config)
        assert all(0 <= g < c for g, c in zip(genome, cards))
        assert genome_to_arch(genome, toy_config) == arch
    genome[6] = genome[7]
    assert genome_to_arch(genome, toy_config) is None


def test_evolution_spends_the_same_budget(toy_config, toy_store, toy_table):
    cfg = SearchConfig(T=7, B=5, pop=6, seed=2)
    result = evolutionary_search(toy_config, toy_store, None, toy_table, cfg)
    assert sum(len(r.archs) for r in result.trace.records) == 35


@pytest.mark.slow
def test_search_methods_on_the_toy_space(toy_config, toy_store, toy_table, toy_optimum):
    comparison = search_comparison(ArchDistribution.uniform(toy_config), toy_store, toy_table,
                                   ("ngd", "ea", "random"), SEEDS, TOY_SEARCH)
    assert comparison.optimum == toy_optimum
    assert comparison.success_rate("ngd") >= 0.9
    ea, rnd = comparison.results["ea"], comparison.results["random"]
    assert sum(ea[s].best_perf >= rnd[s].best_perf for s in SEEDS) >= 15

    points = convergence_curves(comparison.traces())
    assert final_aggregate(points, "ngd") >= max(final_aggregate(points, "ea"), final_aggregate(points, "random"))
    assert all(r.best_perf <= toy_optimum[1] for by_seed in comparison.results.values() for r in by_seed.values())
