"""
main.py - Command-line entry point of the latency-aware architecture search engine.

Usage:
    python main.py count --config configs/default.json
    python main.py train --config configs/toy.json --strategy random_path --k 3 --iters 300 --out runs/toy
    python main.py search --checkpoint runs/toy/checkpoint.json --method ngd --r-max-ms 2.5 --out runs/toy
    python main.py correlate --config configs/default.json --strategies random_path,spos --seeds 0-4 --out runs/corr
    python main.py bench --plan bench.yaml --out runs/bench
    python main.py rerun --manifest runs/toy/manifest.json --out runs/toy-again

Run defaults come from var.ini; command-line flags override them.
Exit codes: 0 success, 1 rerun artifacts differ, 2 configuration error,
3 no feasible architecture, 4 evaluator or protocol error, 5 search
distribution collapsed.
"""
import argparse
import configparser
import json
import logging
import math
import sys
from contextlib import closing
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import yaml

from analysis import (
    DEFAULT_N_ARCHS,
    RANDOM_SCORES,
    convergence_curves,
    correlation_experiment,
    final_aggregate,
    search_comparison,
    write_curves_csv,
)
from distribution import ArchDistribution, DegenerateDistributionError
from distribution import ArchDistribution
from evaluator import (
    EvaluatorError,
    ExternalEvaluator,
    LatencyTable,
    MissingLatencyEntryError,
    SyntheticBenchmark,
    latency,
    synth_latency_table,
)
from run_manifest import MANIFEST_NAME, RunManifest, compare_artifacts
from search import METHODS, NoFeasibleArchitectureError, SearchConfig, exhaustive_search, run_search
from search_space import CardinalityExceededError, InvalidConfigError, load_space_config, space_cardinality
from supernet import STRATEGIES, SupernetStore, TrainingAbortedError, UntrainedBlockError, train_progressive
from training_tracker import TrainingTracker

LOGGER = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_MISMATCH = 1
EXIT_CONFIG = 2
EXIT_INFEASIBLE = 3
EXIT_EVALUATOR = 4
EXIT_RUNTIME = 5

DEFAULTS = {
    "run": {"seed": "0", "workers": "1", "out": "runs"},
    "train": {"k": "5", "t": "1000", "e": "1000", "ema_rate": "0.05", "checkpoint_every": "100"},
    "search": {"rho": "0.1", "batch": "16", "iters": "50", "damping": "0.001", "pop": "16", "mut_rate": "0.1"},
    "benchmark": {"noise_sigma": "0.05", "interaction_weight": "0.1", "edge_scale": "0.1"},
    "evaluator": {"timeout": "30"},
}


@dataclass(frozen=True)
class Settings:
    seed: int
    workers: int
    out: str
    K: int
    T: int
    E: int
    ema_rate: float
    checkpoint_every: int
    rho: float
    batch: int
    iters: int
    damping: float
    pop: int
    mut_rate: float
    noise_sigma: float
    interaction_weight: float
    edge_scale: float
    timeout: float


def read_vars(path="var.ini") -> Settings:
    """
    Read run defaults from an INI file.

    A missing file leaves the built-in defaults in place.

    Raises:
        InvalidConfigError: if the file is present but malformed.
    """
    config = configparser.ConfigParser()
    config.read_dict(DEFAULTS)
    try:
        config.read(path, encoding="utf-8")
        return Settings(
            seed=config.getint("run", "seed"),
            workers=config.getint("run", "workers"),
            out=config.get("run", "out"),
            K=config.getint("train", "k"),
            T=config.getint("train", "t"),
            E=config.getint("train", "e"),
            ema_rate=config.getfloat("train", "ema_rate"),
            checkpoint_every=config.getint("train", "checkpoint_every"),
            rho=config.getfloat("search", "rho"),
            batch=config.getint("search", "batch"),
            iters=config.getint("search", "iters"),
            damping=config.getfloat("search", "damping"),
            pop=config.getint("search", "pop"),
            mut_rate=config.getfloat("search", "mut_rate"),
            noise_sigma=config.getfloat("benchmark", "noise_sigma"),
            interaction_weight=config.getfloat("benchmark", "interaction_weight"),
            edge_scale=config.getfloat("benchmark", "edge_scale"),
            timeout=config.getfloat("evaluator", "timeout"),
        )
    except (configparser.Error, ValueError) as e:
        raise InvalidConfigError(f"{path}: {e}") from e


def parse_seeds(text: str) -> List[int]:
    """'0-4' or '0,2,7' or '3'."""
    try:
        if "-" in text:
            first, last = (int(x) for x in text.split("-", 1))
            return list(range(first, last + 1))
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid seed list {text!r}") from None


def parse_list(text: str) -> List[str]:
    return [x.strip() for x in text.split(",") if x.strip()]


def make_evaluator(choice: str, config, settings: Settings, seed: int, workers: int = 1):
    """'synthetic' or 'external:<command>'."""
    if choice == "synthetic":
        return SyntheticBenchmark(config, seed=seed, noise_sigma=settings.noise_sigma,
                                  interaction_weight=settings.interaction_weight, edge_scale=settings.edge_scale)
    if choice.startswith("external:") and choice[len("external:"):].strip():
        return ExternalEvaluator(choice[len("external:"):], workers=workers, timeout=settings.timeout, seed=seed)
    raise InvalidConfigError(f"unknown evaluator {choice!r}, expected 'synthetic' or 'external:<cmd>'")


def load_latency_table(path: Optional[str], config, seed: int) -> LatencyTable:
    if path is None:
        return synth_latency_table(config, seed=seed)
    try:
        return LatencyTable.from_csv(path)
    except (OSError, KeyError, ValueError) as e:
        raise InvalidConfigError(f"{path}: cannot read latency table: {e}") from e


def _json_number(value: float) -> Optional[float]:
    return None if value is None or math.isinf(value) else value


def cmd_count(args, settings: Settings, manifest: RunManifest, out: Path) -> int:
    config = load_space_config(args.config)
    manifest.config_paths.append(args.config)
    c = space_cardinality(config)
    print(f"paths:      {c.paths}")
    print(f"spatial:    {c.spatial} (~{c.spatial:.1e})")
    print(f"sequential: {c.sequential}")
    print(f"total:      {c.total} (~{c.total:.1e})")

    counts = out / "counts.json"
    with open(counts, "w", encoding="utf-8") as f:
        json.dump(c._asdict(), f, indent=2, sort_keys=True)
    manifest.add_artifact("counts", counts)
    return EXIT_OK


def cmd_train(args, settings: Settings, manifest: RunManifest, out: Path) -> int:
    config = load_space_config(args.config)
    manifest.config_paths.append(args.config)
    manifest.seeds.append(args.seed)
    checkpoint = out / "checkpoint.json"
    progress = out / "training_progress.json"

    if args.resume and checkpoint.exists():
        store = SupernetStore.load(checkpoint)
        if store.strategy != args.strategy or store.K != args.k:
            raise InvalidConfigError(
                f"{checkpoint} holds a {store.strategy} store with K={store.K}, not {args.strategy} with K={args.k}")
    else:
        store = SupernetStore(config, args.k, args.strategy, args.ema_rate)
        if progress.exists():
            progress.unlink()

    tracker = TrainingTracker(progress, args.k, args.strategy)
    rng = np.random.default_rng(args.seed)
    evaluator = make_evaluator(args.evaluator, config, settings, args.seed, args.workers)
    try:
        with closing(evaluator):
            train_progressive(args.strategy, store, evaluator, args.iters, rng, E=args.lookup_samples,
                              tracker=tracker, checkpoint=checkpoint, checkpoint_every=args.checkpoint_every)
    finally:
        manifest.add_output("progress", progress)
        tracker.print_summary()
        tracker.print_failed_list()
        if checkpoint.exists():
            manifest.add_artifact("checkpoint", checkpoint)

    print(f"Checkpoint: {checkpoint}")
    return EXIT_OK


def cmd_search(args, settings: Settings, manifest: RunManifest, out: Path) -> int:
    if args.checkpoint is None and args.config is None:
        raise InvalidConfigError("search needs --checkpoint or --config")
    store = None
    if args.checkpoint is not None:
        store = SupernetStore.load(args.checkpoint)
        manifest.config_paths.append(args.checkpoint)
        if not store.fully_trained:
            untrained = [k for k, done in enumerate(store.trained, start=1) if not done]
            raise UntrainedBlockError(f"{args.checkpoint}: blocks {untrained} are not trained")
        config = store.config
    else:
        config = load_space_config(args.config)
        manifest.config_paths.append(args.config)
    manifest.seeds.append(args.seed)

    table = load_latency_table(args.latency_table, config, args.latency_seed)
    dist0 = ArchDistribution.uniform(config)
    if args.init_distribution:
        dist0 = ArchDistribution.load(config, args.init_distribution)
    cfg = SearchConfig(T=args.iters, B=args.batch, rho=args.rho, r_max=args.r_max_ms, damping=args.damping,
                       baseline_subtract=args.baseline_subtract, normalize=not args.no_normalize,
                       zero_infeasible=args.zero_infeasible, seed=args.seed, workers=args.workers,
                       pop=args.pop, mut_rate=args.mut_rate)

    evaluator = None if store is not None else make_evaluator(args.evaluator, config, settings, args.seed,
                                                              args.workers)
    try:
        result = run_search(args.method, dist0, store, evaluator, table, cfg)
    finally:
        if evaluator is not None:
            evaluator.close()

    trace = out / "trace.jsonl"
    result.trace.write_jsonl(trace)
    manifest.add_artifact("trace", trace)
    if result.distribution is not None:
        dist_path = out / "distribution.json"
        result.distribution.save(dist_path)
        manifest.add_artifact("distribution", dist_path)

    if not result.found:
        raise NoFeasibleArchitectureError(f"no feasible architecture under r_max={args.r_max_ms} ms")

    summary = {
        "method": args.method,
        "seed": args.seed,
        "r_max_ms": _json_number(args.r_max_ms),
        "arch": result.best.canonical,
        "latency_ms": result.best_latency,
        "score": result.best_perf,
        "evaluations": sum(len(r.archs) for r in result.trace.records),
    }
    result_path = out / "result.json"
    with open(result_path, "w", encoding="utf-8") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
    manifest.add_artifact("result", result_path)

    print(f"Architecture: {result.best.canonical}")
    print(f"Latency:      {result.best_latency:.4f} ms")
    print(f"Score:        {result.best_perf:.6f}")
    return EXIT_OK


def cmd_correlate(args, settings: Settings, manifest: RunManifest, out: Path) -> int:
    config = load_space_config(args.config)
    manifest.config_paths.append(args.config)
    manifest.seeds.extend(args.seeds)
    unknown = [s for s in args.strategies if s not in STRATEGIES + (RANDOM_SCORES,)]
    if unknown:
        raise InvalidConfigError(f"unknown strategies {unknown}")

    bench_options = {"noise_sigma": settings.noise_sigma, "interaction_weight": settings.interaction_weight,
                     "edge_scale": settings.edge_scale}
    table = correlation_experiment(config, args.strategies, n_archs=args.n_archs, budget=args.iters,
                                   seeds=args.seeds, K=args.k, bench_options=bench_options,
                                   E=args.lookup_samples, workers=args.workers)

    csv_path = out / "correlations.csv"
    table.write_csv(csv_path)
    manifest.add_artifact("correlations", csv_path)
    scatter_dir = out / "scatter"
    scatter_dir.mkdir(exist_ok=True)
    for path in table.write_scatter(scatter_dir):
        manifest.add_artifact(Path(path).stem, path)
    table.print_summary()
    return EXIT_OK


BENCH_REQUIRED = ("name", "config", "methods", "seeds")


def load_bench_plan(path) -> List[Dict]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            plan = yaml.safe_load(f)
    except (OSError, yaml.YAMLError) as e:
        raise InvalidConfigError(f"{path}: cannot read bench plan: {e}") from e
    experiments = plan.get("experiments") if isinstance(plan, dict) else None
    if not isinstance(experiments, list) or not experiments:
        raise InvalidConfigError(f"{path}: plan needs a non-empty 'experiments' list")
    for exp in experiments:
        missing = [k for k in BENCH_REQUIRED if not isinstance(exp, dict) or k not in exp]
        if missing:
            raise InvalidConfigError(f"{path}: experiment is missing {missing}")
        unknown = [m for m in exp["methods"] if m not in METHODS]
        if unknown:
            raise InvalidConfigError(f"{path}: experiment {exp['name']} names unknown methods {unknown}")
    return experiments


def _seed_list(value) -> List[int]:
    return parse_seeds(value) if isinstance(value, str) else [int(s) for s in value]


def run_bench_experiment(exp: Dict, settings: Settings, out: Path, manifest: RunManifest, workers: int = 1) -> None:
    name = exp["name"]
    config = load_space_config(exp["config"])
    manifest.config_paths.append(exp["config"])
    seeds = _seed_list(exp["seeds"])
    manifest.seeds.extend(seeds)
    bench_seed = int(exp.get("bench_seed", 0))

    bench = SyntheticBenchmark(config, seed=bench_seed,
                               noise_sigma=float(exp.get("noise_sigma", settings.noise_sigma)),
                               interaction_weight=settings.interaction_weight, edge_scale=settings.edge_scale)
    strategy = exp.get("strategy", "random_path")
    store = SupernetStore(config, int(exp.get("K", settings.K)), strategy, settings.ema_rate)
    train_progressive(strategy, store, bench, int(exp.get("train_iters", settings.T)),
                      np.random.default_rng(bench_seed), E=settings.E)
    table = synth_latency_table(config, seed=bench_seed, head_cost=float(exp.get("head_cost_ms", 0.5)))

    r_max = float(exp.get("r_max_ms", math.inf))
    if "r_max_fraction" in exp:
        unconstrained = exhaustive_search(config, store, None, table)
        r_max = float(exp["r_max_fraction"]) * latency(unconstrained[0], table, config)
    cfg = SearchConfig(T=int(exp.get("iters", settings.iters)), B=int(exp.get("batch", settings.batch)),
                       rho=float(exp.get("rho", settings.rho)), r_max=r_max, damping=settings.damping,
                       baseline_subtract=bool(exp.get("baseline_subtract", False)),
                       normalize=bool(exp.get("normalize", True)),
                       workers=workers, pop=int(exp.get("pop", settings.pop)),
                       mut_rate=float(exp.get("mut_rate", settings.mut_rate)))

    comparison = search_comparison(ArchDistribution.uniform(config), store, table, exp["methods"], seeds, cfg)
    points = convergence_curves(comparison.traces())
    curves = out / f"curves_{name}.csv"
    write_curves_csv(points, curves)
    manifest.add_artifact(f"curves_{name}", curves)

    summary = {
        "name": name,
        "r_max_ms": _json_number(r_max),
        "optimum": None if comparison.optimum is None else comparison.optimum[0].canonical,
        "optimum_score": None if comparison.optimum is None else comparison.optimum[1],
        "methods": {
            m: {"success_rate": comparison.success_rate(m), "final_aggregate": final_aggregate(points, m)}
            for m in exp["methods"]
        },
    }
    summary_path = out / f"bench_{name}.json"
    with open(summary_path, "w", encoding="utf-8") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
    manifest.add_artifact(f"bench_{name}", summary_path)

    print(f"\n=== Experiment {name} ===")
    comparison.print_summary()


def cmd_bench(args, settings: Settings, manifest: RunManifest, out: Path) -> int:
    experiments = load_bench_plan(args.plan)
    manifest.config_paths.append(args.plan)
    for exp in experiments:
        try:
            run_bench_experiment(exp, settings, out, manifest, args.workers)
        except CardinalityExceededError as e:
            raise InvalidConfigError(f"experiment {exp['name']}: space too large for the exhaustive optimum: {e}") \
                from e
    return EXIT_OK


def _with_out(argv: Sequence[str], out: str) -> List[str]:
    rewritten, skip = [], False
    for token in argv:
        if skip:
            skip = False
            continue
        if token == "--out":
            skip = True
            continue
        if token.startswith("--out="):
            continue
        rewritten.append(token)
    return rewritten + ["--out", out]


def cmd_rerun(args) -> int:
    """Replay a manifest's command into a new directory and compare artifact hashes."""
    try:
        original = RunManifest.load(args.manifest)
    except (OSError, ValueError, TypeError) as e:
        print(f"Error: cannot read manifest {args.manifest}: {e}", file=sys.stderr)
        return EXIT_CONFIG

    code = main(_with_out(original.argv, args.out))
    if code != original.exit_code:
        print(f"Rerun exited with {code}, original exited with {original.exit_code}")
        return code if code != EXIT_OK else EXIT_MISMATCH

    rerun = RunManifest.load(Path(args.out) / MANIFEST_NAME)
    differing = compare_artifacts(original, rerun)
    if differing:
        print(f"\n=== Artifacts Differ ({len(differing)} total) ===")
        for name in differing:
            print(f"  {name}")
        return EXIT_MISMATCH
    print(f"\n=== Rerun Reproduced {len(original.artifacts)} Artifacts Bit-Identically ===")
    return EXIT_OK


def build_parser(settings: Settings) -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Latency-aware one-shot architecture search.")
    parser.add_argument("--settings", default="var.ini", help="INI file with run defaults")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, evaluator: bool = True):
        p.add_argument("--seed", type=int, default=settings.seed)
        p.add_argument("--workers", type=int, default=settings.workers)
        p.add_argument("--out", default=settings.out)
        if evaluator:
            p.add_argument("--evaluator", default="synthetic", help="synthetic or external:<cmd>")

    p = sub.add_parser("count", help="count downsampling paths and space cardinalities")
    p.add_argument("--config", required=True)
    common(p, evaluator=False)
    p.set_defaults(func=cmd_count)

    p = sub.add_parser("train", help="train a supernet store")
    p.add_argument("--config", required=True)
    p.add_argument("--strategy", choices=STRATEGIES, default="random_path")
    p.add_argument("--k", type=int, default=settings.K, help="number of supernet blocks")
    p.add_argument("--iters", type=int, default=settings.T, help="iterations per block")
    p.add_argument("--lookup-samples", type=int, default=settings.E)
    p.add_argument("--ema-rate", type=float, default=settings.ema_rate)
    p.add_argument("--checkpoint-every", type=int, default=settings.checkpoint_every)
    p.add_argument("--resume", action="store_true", help="continue from <out>/checkpoint.json")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("search", help="search a trained store under a latency budget")
    p.add_argument("--checkpoint")
    p.add_argument("--config", help="search with the evaluator directly when no checkpoint is given")
    p.add_argument("--method", choices=METHODS, default="ngd")
    p.add_argument("--r-max-ms", type=float, default=math.inf)
    p.add_argument("--batch", type=int, default=settings.batch)
    p.add_argument("--iters", type=int, default=settings.iters)
    p.add_argument("--rho", type=float, default=settings.rho)
    p.add_argument("--damping", type=float, default=settings.damping)
    p.add_argument("--pop", type=int, default=settings.pop)
    p.add_argument("--mut-rate", type=float, default=settings.mut_rate)
    p.add_argument("--baseline-subtract", action="store_true")
    p.add_argument("--no-normalize", action="store_true", help="feed NGD the raw batch rewards")
    p.add_argument("--zero-infeasible", action="store_true")
    p.add_argument("--latency-table", help="CSV latency table; synthesised from the config when omitted")
    p.add_argument("--latency-seed", type=int, default=0)
    p.add_argument("--init-distribution", help="distribution JSON to start NGD from")
    common(p)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("correlate", help="rank correlation of one-shot and stand-alone scores")
    p.add_argument("--config", required=True)
    p.add_argument("--strategies", type=parse_list, default=list(STRATEGIES))
    p.add_argument("--seeds", type=parse_seeds, default=list(range(5)))
    p.add_argument("--k", type=int, default=settings.K)
    p.add_argument("--iters", type=int, default=settings.T, help="iterations per block")
    p.add_argument("--n-archs", type=int, default=DEFAULT_N_ARCHS)
    p.add_argument("--lookup-samples", type=int, default=settings.E)
    common(p, evaluator=False)
    p.set_defaults(func=cmd_correlate)

    p = sub.add_parser("bench", help="compare search methods against the exhaustive optimum")
    p.add_argument("--plan", default="bench.yaml")
    common(p, evaluator=False)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("rerun", help="replay a manifest and check its artifacts reproduce")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=None)
    return parser


def _settings_path(argv: Sequence[str]) -> str:
    for i, token in enumerate(argv):
        if token == "--settings" and i + 1 < len(argv):
            return argv[i + 1]
        if token.startswith("--settings="):
            return token.split("=", 1)[1]
    return "var.ini"


def _attach_log_file(out: Path, command: str) -> logging.FileHandler:
    logs_dir = out / "logs"
    logs_dir.mkdir(parents=True, exist_ok=True)
    timestamp = datetime.now().strftime("%Y%m%d_%H%M%S")
    handler = logging.FileHandler(logs_dir / f"{command}_{timestamp}.log", encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    logging.getLogger().addHandler(handler)
    return handler


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")

    try:
        settings = read_vars(_settings_path(argv))
    except InvalidConfigError as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_CONFIG

    args = build_parser(settings).parse_args(argv)
    if args.command == "rerun":
        return cmd_rerun(args)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(args.command, argv)
    handler = _attach_log_file(out, args.command)
    manifest.add_output("log", handler.baseFilename)

    try:
        code = args.func(args, settings, manifest, out)
    except (InvalidConfigError, UntrainedBlockError, MissingLatencyEntryError, ValueError) as e:
        LOGGER.error("configuration error: %s", e)
        print(f"Error: {e}", file=sys.stderr)
        code = EXIT_CONFIG
    except NoFeasibleArchitectureError as e:
        LOGGER.error("%s", e)
        print("Error: no feasible architecture", file=sys.stderr)
        code = EXIT_INFEASIBLE
    except (EvaluatorError, TrainingAbortedError) as e:
        LOGGER.error("evaluator error: %s", e)
        print(f"Error: evaluator failed: {e}", file=sys.stderr)
        code = EXIT_EVALUATOR
    except DegenerateDistributionError as e:
        LOGGER.error("%s", e)
        print(f"Error: search distribution collapsed: {e}", file=sys.stderr)
        code = EXIT_RUNTIME
    finally:
        logging.getLogger().removeHandler(handler)
        handler.close()

    manifest.finish(code)
    manifest.write(out)
    return code


if __name__ == "__main__":
    raise SystemExit(main())
