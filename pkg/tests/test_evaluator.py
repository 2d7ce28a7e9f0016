import sys
from pathlib import Path

import numpy as np
import pytest

from evaluator import (
    BLOCK_BIAS_RANGE,
    EvalRequest,
    EvaluatorError,
    ExternalEvaluator,
    LatencyTable,
    MissingLatencyEntryError,
    SyntheticBenchmark,
    latency,
    synth_latency_table,
)
from evaluator_connection import (
    EvaluatorConnection,
    EvaluatorExitError,
    EvaluatorTimeoutError,
    ProtocolError,
    parse_response,
)
from search_space import SpaceConfig, architecture_edges, random_architecture
from tests.echo_evaluator import value_of

ECHO = Path(__file__).resolve().parent / "echo_evaluator.py"


def echo_command(mode: str = "ok", *extra: str):
    return [sys.executable, str(ECHO), mode, *extra]


def test_benchmark_is_a_function_of_its_seed(toy_config: SpaceConfig):
    arch = random_architecture(toy_config, np.random.default_rng(0))
    a, b = SyntheticBenchmark(toy_config, seed=4), SyntheticBenchmark(toy_config, seed=4)
    assert a.true_quality(arch) == b.true_quality(arch)
    assert 0.0 < a.true_quality(arch) < 1.0
    assert SyntheticBenchmark(toy_config, seed=5).true_quality(arch) != a.true_quality(arch)


def test_block_bias(toy_config: SpaceConfig):
    bench = SyntheticBenchmark(toy_config, seed=0)
    assert bench.block_bias(None) == 0.0
    assert all(abs(bench.block_bias(k)) <= BLOCK_BIAS_RANGE for k in range(1, 10))


def test_training_noise_grows_with_the_edges_in_a_step(toy_config: SpaceConfig):
    bench = SyntheticBenchmark(toy_config, seed=0, noise_sigma=0.1)
    edges = architecture_edges(random_architecture(toy_config, np.random.default_rng(0)), toy_config)
    truth = np.array([bench.edge_quality(e) for e in edges])
    rng = np.random.default_rng(1)
    one = np.array([bench.train_signal(edges[:1], None, rng)[0] - truth[0] for _ in range(4000)])
    all_edges = np.array([bench.train_signal(edges, None, rng)[0] - truth[0] for _ in range(4000)])
    assert one.std() == pytest.approx(0.1, rel=0.1)
    assert all_edges.std() == pytest.approx(0.1 * len(edges), rel=0.1)

    quiet = SyntheticBenchmark(toy_config, seed=0, noise_sigma=0.0)
    assert np.array_equal(quiet.train_signal(edges, None, rng), truth)


def test_latency_table_covers_the_mesh(toy_config: SpaceConfig):
    table = synth_latency_table(toy_config, seed=0)
    rng = np.random.default_rng(2)
    for _ in range(20):
        arch = random_architecture(toy_config, rng)
        assert latency(arch, table, toy_config) > table.head_cost

    empty = LatencyTable({}, head_cost=0.5)
    with pytest.raises(MissingLatencyEntryError) as err:
        latency(arch, empty, toy_config)
    assert err.value.key[0].startswith("MB")

    with pytest.raises(ValueError):
        LatencyTable({("MB3E1S11", 2, 2, 8): 0.0})


def test_latency_table_csv(toy_config: SpaceConfig, tmp_path):
    table = synth_latency_table(toy_config, seed=1, head_cost=0.3)
    path = tmp_path / "latency.csv"
    table.to_csv(path)
    assert LatencyTable.from_csv(path) == table


def test_iam_latency_is_in_the_millisecond_range():
    from tests.test_search_space import iam_architecture
    from tests.conftest import load_config

    config = load_config("iam")
    ms = latency(iam_architecture(), synth_latency_table(config), config)
    assert 1.0 <= ms <= 6.0


def test_request_field_order():
    request = EvalRequest("train_step", "1@8x8:MB3E1S22", 7, block=2)
    assert list(request.to_dict()) == ["mode", "arch", "block", "seed"]
    assert list(EvalRequest("evaluate", "x", 1).to_dict()) == ["mode", "arch", "seed"]


def test_parse_response():
    assert parse_response('{"ok": true, "value": 0.5}')["value"] == 0.5
    assert parse_response('{"ok": false, "message": "busy"}')["ok"] is False
    for line in ("nope", '{"value": 1}', '{"ok": true}', '{"ok": true, "value": "high"}', "[1]"):
        with pytest.raises(ProtocolError):
            parse_response(line)


def test_external_evaluator_round_trip(toy_config: SpaceConfig):
    arch = random_architecture(toy_config, np.random.default_rng(0))
    edges = architecture_edges(arch, toy_config)
    with ExternalEvaluator(echo_command(), workers=2, timeout=10) as evaluator:
        first = evaluator.evaluate(arch)
        assert 0.0 <= first < 1.0
        assert evaluator.evaluate(arch) == first
        signals = evaluator.train_signal(edges, 1, np.random.default_rng(0))
        assert len(signals) == len(edges)
        assert np.allclose(signals, signals[0])


def test_pipelined_requests():
    with EvaluatorConnection(echo_command(), timeout=10) as connection:
        responses = connection.request_many(
            [{"mode": "evaluate", "arch": str(i), "seed": 0} for i in range(100)]
        )
    assert [r["value"] for r in responses] == [value_of({"arch": str(i)}) for i in range(100)]


@pytest.mark.parametrize("mode, error", [
    ("garbage", ProtocolError),
    ("crash", EvaluatorExitError),
    ("silent", EvaluatorTimeoutError),
    ("reject", EvaluatorError),
])
def test_misbehaving_evaluators(toy_config: SpaceConfig, mode: str, error):
    arch = random_architecture(toy_config, np.random.default_rng(0))
    with ExternalEvaluator(echo_command(mode), timeout=1) as evaluator:
        with pytest.raises(error):
            evaluator.evaluate(arch)


def test_missing_evaluator_program():
    with pytest.raises(EvaluatorExitError):
        ExternalEvaluator(["/nonexistent/evaluator-binary"])


def test_timed_out_evaluator_is_replaced(toy_config: SpaceConfig, tmp_path):
    rng = np.random.default_rng(0)
    late, next_arch = random_architecture(toy_config, rng), random_architecture(toy_config, rng)
    assert late.canonical != next_arch.canonical
    with ExternalEvaluator(echo_command("slow", str(tmp_path / "slept")), timeout=1.0) as evaluator:
        with pytest.raises(EvaluatorTimeoutError):
            evaluator.evaluate(late)
        # the late answer to the first request must not be read as this one's
        assert evaluator.evaluate(next_arch) == value_of({"arch": next_arch.canonical})
