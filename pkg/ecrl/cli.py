"""
Command-line interface for ecrl.

Commands:
- train: run (or resume) a training run
- bench: goal benchmark and consecutive test of a checkpoint
- failure-demo: trajectory dumps of the tipping and drift failure cases
- inspect-checkpoint: print what a checkpoint holds
- compare: estimator/policy gap table over benchmark reports
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from ecrl import __version__
from ecrl.config import ConfigManager, apply_overrides
from ecrl.constants import ECRL_LOG_LEVEL, ECRL_OUTPUT_ROOT, ECRL_WORKERS, LOG_FORMAT
from ecrl.errors import EcrlError
from ecrl.models import MODES, OBJECT_NAMES, PRESETS

logger = logging.getLogger("ecrl")


def setup_logging(verbose: bool = False) -> None:
    """Configure root logging once for a CLI process."""
    level = logging.DEBUG if verbose else getattr(logging, ECRL_LOG_LEVEL, logging.INFO)
    logging.basicConfig(
        level=level,
        format=LOG_FORMAT,
        handlers=[logging.StreamHandler(sys.stdout)],
        force=True,
    )


def _workers(args) -> int:
    return args.workers if getattr(args, "workers", None) else ECRL_WORKERS


def _fail(e: BaseException) -> int:
    print(f"❌ Error: {e}", file=sys.stderr)
    return 1


# =============================================================================
# TRAIN COMMAND
# =============================================================================

def build_train_config(args):
    """Embedded preset < config file < command-line flags."""
    config = ConfigManager(args.config, preset=args.preset).config
    return apply_overrides(
        config,
        {
            "trainer.mode": args.mode,
            "object.name": args.object,
            "trainer.seed": args.seed,
            "trainer.iterations": args.iterations,
            "trainer.init_from": args.init_from,
            "trainer.finetune_from": args.finetune_from,
        },
    )


def cmd_train(args):
    """Train a policy and estimator."""
    from ecrl.trainer import TrainingRun

    try:
        config = build_train_config(args)
        out_root = Path(args.out) if args.out else Path(ECRL_OUTPUT_ROOT)

        print("=" * 60)
        print("🚀 ecrl training")
        print("=" * 60)
        print(f"   Mode:       {config.trainer.mode}")
        print(f"   Object:     {config.object.name}")
        print(f"   Seed:       {config.trainer.seed}")
        print(f"   Iterations: {config.trainer.iterations}")
        print(f"   Envs:       {config.trainer.n_envs}")

        with TrainingRun(config, out_root, resume=args.resume, n_workers=_workers(args)) as run:
            print(f"\n📁 Run directory: {run.run_dir}")
            latest = run.run()

        print(f"\n✅ Training complete: {latest}")
        return 0

    except KeyboardInterrupt:
        print("\n\nInterrupted")
        return 1
    except (EcrlError, OSError) as e:
        return _fail(e)


# =============================================================================
# BENCH COMMAND
# =============================================================================

def cmd_bench(args):
    """Benchmark a checkpoint on all 24 goals."""
    from ecrl.bench import check_bench_mode, run_benchmark, run_consecutive, write_consecutive, write_report
    from ecrl.trainer import load_agent, resolve_checkpoint

    try:
        agent = load_agent(resolve_checkpoint(Path(args.checkpoint)))
        mode = args.mode or agent.mode
        check_bench_mode(agent.mode, mode)
        out_dir = Path(args.out) if args.out else Path(ECRL_OUTPUT_ROOT) / "bench"
        workers = _workers(args)

        print(f"📊 Benchmarking {agent.config.object.name} ({agent.mode} checkpoint, evaluated as {mode})")
        report = run_benchmark(agent.policy, agent.estimator, agent.config, mode, args.trials, workers)
        paths = write_report(report, out_dir, agent.config.bench.min_quantile_samples)

        print(f"\n   Trials:          {report.total_trials}")
        print(f"   Success rate B:  {report.success_rate:.1f}%")
        print(f"   Estimator error: {report.estimator_error_mean:.3f} ± {report.estimator_error_std:.3f} rad")
        if report.faulted_trials:
            print(f"   ⚠️  Faulted trials: {report.faulted_trials}")
        for name, path in paths.items():
            print(f"   ✅ {name}: {path}")

        if args.consecutive:
            consecutive = run_consecutive(
                agent.policy, agent.estimator, agent.config, mode, n_trials=args.consecutive, n_workers=workers
            )
            path = write_consecutive(consecutive, out_dir)
            print(f"\n   Consecutive successes: {consecutive.counts_text()} (median {consecutive.median:g})")
            print(f"   ✅ consecutive: {path}")
        return 0

    except KeyboardInterrupt:
        print("\n\nInterrupted")
        return 1
    except (EcrlError, OSError) as e:
        return _fail(e)


# =============================================================================
# FAILURE-DEMO COMMAND
# =============================================================================

def cmd_failure_demo(args):
    """Dump trajectories of a failure case."""
    from ecrl.bench import failure_demo
    from ecrl.trainer import load_agent, resolve_checkpoint

    try:
        agent = load_agent(resolve_checkpoint(Path(args.checkpoint)))
        out_dir = Path(args.out) if args.out else Path(ECRL_OUTPUT_ROOT) / "failure-demo"
        result = failure_demo(
            agent.policy,
            agent.estimator,
            agent.config,
            agent.mode,
            args.case,
            out_dir,
            seed=args.seed,
            repeats=args.repeats,
        )
        print(f"✅ {result.case} trajectories: {result.path}")
        for key, value in result.summary.items():
            print(f"   {key}: {value:.4f}")
        return 0

    except (EcrlError, OSError, ValueError) as e:
        return _fail(e)


# =============================================================================
# INSPECT-CHECKPOINT COMMAND
# =============================================================================

def cmd_inspect_checkpoint(args):
    """Print format version, run identity and parameter shapes of a checkpoint."""
    from ecrl.nncore import load_checkpoint
    from ecrl.trainer import resolve_checkpoint

    try:
        path = resolve_checkpoint(Path(args.checkpoint))
        _, meta = load_checkpoint(path)
    except (EcrlError, OSError) as e:
        return _fail(e)

    print(f"📦 {path}")
    print(f"   Format version: {meta.get('format_version')}")
    print(f"   Package:        {meta.get('version')}")
    print(f"   Mode:           {meta.get('mode')}")
    print(f"   Object:         {meta.get('object')}")
    print(f"   Iteration:      {meta.get('iteration')}")
    print(f"   Rho:            {meta.get('rho')}")
    print(f"   Config hash:    {meta.get('config_hash')}")
    print("\n   Parameters:")
    for name, shape in sorted(meta.get("shapes", {}).items()):
        if name.startswith(("policy.", "value.", "estimator.")):
            print(f"     {name}: {tuple(shape)}")
    return 0


# =============================================================================
# COMPARE COMMAND
# =============================================================================

def cmd_compare(args):
    """Gap analysis over benchmark report files."""
    from ecrl.bench import gap_analysis, load_report, write_comparison

    try:
        reports = [load_report(Path(p)) for p in args.reports]
    except (EcrlError, OSError, ValueError) as e:
        return _fail(e)

    analysis = gap_analysis(reports)
    out_dir = Path(args.out) if args.out else Path(ECRL_OUTPUT_ROOT) / "compare"
    paths = write_comparison(analysis, out_dir)

    for obj, entry in sorted(analysis.items()):
        print(f"\n📊 {obj}")
        for mode, values in sorted(entry["modes"].items()):
            print(f"   {mode:<9} B={values['success_rate']:5.1f}%  error={values['estimator_error_mean']:.3f} rad")
        for gap in ("estimator_gap", "policy_gap"):
            value = entry[gap]
            print(f"   {gap}: {'n/a' if value is None else f'{value:+.1f} pp'}")
    for name, path in paths.items():
        print(f"   ✅ {name}: {path}")
    return 0


# =============================================================================
# MAIN
# =============================================================================

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ecrl",
        description="Estimator-coupled reinforcement learning for blind in-hand reorientation",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Train
  ecrl train --mode ecrl --object cube --seed 1
  ecrl train --mode naive --iterations 2 --out runs/smoke
  ecrl train --mode estimada --init-from runs/cube-naive-.../checkpoints/latest.npz

  # Evaluate
  ecrl bench runs/cube-ecrl-... --trials 10 --consecutive 10
  ecrl bench runs/cube-naive-... --mode oracle
  ecrl failure-demo runs/cube-naive-... --case tipping --seed 0
  ecrl inspect-checkpoint runs/cube-ecrl-...
  ecrl compare runs/bench/*-benchmark.json
        """,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--verbose", "-v", action="store_true", help="Debug logging")

    subparsers = parser.add_subparsers(dest="command", help="Available commands")

    # Train command
    train_parser = subparsers.add_parser("train", help="Train policy and estimator")
    train_parser.add_argument("--config", type=Path, default=None, help="JSON config file")
    train_parser.add_argument("--preset", choices=list(PRESETS), default="desk", help="Embedded defaults")
    train_parser.add_argument("--mode", choices=list(MODES), help="Training mode")
    train_parser.add_argument("--object", choices=list(OBJECT_NAMES), help="Object to reorient")
    train_parser.add_argument("--seed", type=int, help="Run seed")
    train_parser.add_argument("--iterations", type=int, help="Total iterations")
    train_parser.add_argument("--out", help=f"Output root (default: $ECRL_OUTPUT_ROOT or {ECRL_OUTPUT_ROOT})")
    train_parser.add_argument("--resume", action="store_true", help="Continue an existing run")
    train_parser.add_argument("--init-from", help="Naive/oracle checkpoint to freeze (estimada)")
    train_parser.add_argument("--finetune-from", help="Checkpoint to finetune with wrench kicks")
    train_parser.add_argument("--workers", type=int, help="Simulator threads")
    train_parser.set_defaults(func=cmd_train)

    # Bench command
    bench_parser = subparsers.add_parser("bench", help="Benchmark a checkpoint")
    bench_parser.add_argument("checkpoint", help="Checkpoint file or run directory")
    bench_parser.add_argument("--mode", choices=list(MODES), help="Evaluation mode (default: checkpoint mode)")
    bench_parser.add_argument("--trials", type=int, help="Trials per goal")
    bench_parser.add_argument("--consecutive", type=int, default=0, help="Also run N consecutive trials")
    bench_parser.add_argument("--out", help="Output directory")
    bench_parser.add_argument("--workers", type=int, help="Simulator threads")
    bench_parser.set_defaults(func=cmd_bench)

    # Failure-demo command
    demo_parser = subparsers.add_parser("failure-demo", help="Reproduce a failure case")
    demo_parser.add_argument("checkpoint", help="Naive or oracle checkpoint file or run directory")
    demo_parser.add_argument("--case", choices=["tipping", "drift"], required=True, help="Failure case")
    demo_parser.add_argument("--seed", type=int, default=0, help="Demo seed")
    demo_parser.add_argument("--repeats", type=int, default=20, help="Repeat trajectories")
    demo_parser.add_argument("--out", help="Output directory")
    demo_parser.set_defaults(func=cmd_failure_demo)

    # Inspect-checkpoint command
    inspect_parser = subparsers.add_parser("inspect-checkpoint", help="Show checkpoint contents")
    inspect_parser.add_argument("checkpoint", help="Checkpoint file or run directory")
    inspect_parser.set_defaults(func=cmd_inspect_checkpoint)

    # Compare command
    compare_parser = subparsers.add_parser("compare", help="Estimator and policy gaps over reports")
    compare_parser.add_argument("reports", nargs="+", help="Benchmark report JSON files")
    compare_parser.add_argument("--out", help="Output directory")
    compare_parser.set_defaults(func=cmd_compare)

    return parser


def main(argv: Optional[List[str]] = None):
    """CLI entry point."""
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.verbose)

    if hasattr(args, "func"):
        return args.func(args)
    else:
        parser.print_help()
        return 1


if __name__ == "__main__":
    sys.exit(main())
