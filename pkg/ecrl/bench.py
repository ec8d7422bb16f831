"""
Evaluation harness.

- run_benchmark: every goal of the octahedral group, n_trials each, one goal
  interval per trial; success is the simulator's own end-of-interval check.
- run_consecutive: goals keep coming until the first miss (or the cap).
- final_angle_distribution: box-plot quantiles of the final goal angles.
- gap_analysis: splits the loss of a naive deployment into the part a better
  estimator recovers and the part only a robust policy recovers.
- failure_demo: trajectory dumps of the two failure cases of a policy that
  was trained on the true state (tipping fan-out, height drift).

The evaluation never ends a trial on estimator divergence. Domain
randomization is resampled per trial from streams keyed by the evaluation
seed, which training never uses.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from ecrl.config import apply_overrides
from ecrl.env import SystemState, TactilePivot, TrajectoryRecorder, sample_goal
from ecrl.errors import CheckpointModeMismatch, InsufficientSamplesError
from ecrl.estimator import Estimator, init_estimate, truth_estimate
from ecrl.file_utils import AtomicFileWriter, write_csv
from ecrl.manifold import Estimate, geodesic_distance
from ecrl.models import BenchmarkReport, ConsecutiveReport, ExperimentConfig, GoalResult
from ecrl.policy import ActorCritic, build_policy_input

logger = logging.getLogger(__name__)

N_GOALS = 24
QUANTILES = (5, 25, 50, 75, 95)
FAILURE_CASES = ("tipping", "drift")
DEMO_SECONDS = 20.0
DEMO_REPEATS = 20

# Benchmark modes a checkpoint of a given training mode can serve.
BENCH_MODES = {
    "naive": ("naive", "oracle"),
    "oracle": ("naive", "oracle"),
    "ecrl": ("ecrl",),
    "estimada": ("estimada",),
}

PER_GOAL_COLUMNS = ["goal_index", "success_rate", "mode", "object"]
FINAL_ANGLE_COLUMNS = ["goal_index", "trial", "final_angle", "mode", "object"]
COMPARISON_COLUMNS = ["object", "mode", "success_rate", "estimator_error_mean", "estimator_error_std"]
GAP_COLUMNS = ["object", "estimator_gap", "policy_gap"]


def check_bench_mode(checkpoint_mode: str, bench_mode: str) -> None:
    allowed = BENCH_MODES.get(checkpoint_mode, ())
    if bench_mode not in allowed:
        raise CheckpointModeMismatch(
            f"a '{checkpoint_mode}' checkpoint cannot be benchmarked as '{bench_mode}' "
            f"(valid: {', '.join(allowed) or 'none'})"
        )


def evaluation_config(config: ExperimentConfig, episode_timeout: bool = True) -> ExperimentConfig:
    """The training config without wrench kicks (and optionally without episode timeout)."""
    overrides: Dict[str, Any] = {"randomization.wrench_enabled": False}
    config = apply_overrides(config, overrides)
    if not episode_timeout:
        config = config.model_copy(deep=True)
        config.env.max_episode_seconds = None
    return config


# =============================================================================
# CLOSED-LOOP STEPPING
# =============================================================================

def _policy_action(
    policy: ActorCritic, obs: np.ndarray, fed: Estimate, goal: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """Deterministic action; rows with a non-finite output act zero and are reported."""
    inputs = policy.normalizer.normalize(build_policy_input(obs, fed, goal))
    result = policy.act(inputs, deterministic=True, check=False)
    ok = np.all(np.isfinite(result.action), axis=-1)
    return np.where(ok[:, None], result.action, 0.0), ok


def _advance_estimate(
    estimator: Estimator, obs: np.ndarray, action: np.ndarray, carry: Estimate, state: SystemState
) -> Tuple[Estimate, np.ndarray]:
    """One estimator step; non-finite rows restart from the true grasp and are reported."""
    prediction = estimator.predict(obs, action, carry, check=False)
    ok = prediction.is_finite()
    if not np.all(ok):
        prediction.put(~ok, init_estimate(state.take(~ok), estimator.latent_dim))
    return prediction, ok


def _fed(mode: str, state: SystemState, carry: Estimate) -> Estimate:
    """Oracle evaluation feeds the true state; every other mode the estimate."""
    if mode == "oracle":
        return truth_estimate(state, carry.latent)
    return carry


# =============================================================================
# GOAL BENCHMARK
# =============================================================================

def _benchmark_batch(
    policy: ActorCritic,
    estimator: Estimator,
    config: ExperimentConfig,
    mode: str,
    trial_ids: np.ndarray,
    n_trials: int,
    n_workers: int,
) -> BenchmarkReport:
    goal_index = trial_ids // n_trials
    env = TactilePivot(
        config, len(trial_ids), config.bench.eval_seed, env_offset=int(trial_ids[0]), n_workers=n_workers
    )
    env.pin_goals(goal_index)
    state, obs = env.reset()
    targets = env.goals[goal_index]
    carry = init_estimate(state, estimator.latent_dim)
    failed = np.zeros(len(trial_ids), dtype=bool)
    faulted = np.zeros(len(trial_ids), dtype=bool)
    error_sum = error_sq_sum = 0.0
    error_count = 0
    success = np.zeros(len(trial_ids), dtype=bool)

    steps = config.env.goal_steps
    for step in range(steps):
        action, ok_policy = _policy_action(policy, obs, _fed(mode, state, carry), targets)
        state, obs, _, flags = env.step(action)
        carry, ok_estimator = _advance_estimate(estimator, obs, action, carry, state)
        faulted |= ~ok_policy | ~ok_estimator | flags.fault

        active = ~failed & ~faulted
        errors = geodesic_distance(carry.rot, state.rot)[active]
        error_sum += float(errors.sum())
        error_sq_sum += float(np.sum(errors * errors))
        error_count += int(errors.size)

        failed |= flags.dropped | flags.fault
        if step == steps - 1:
            success = flags.goal_success & ~failed & ~faulted

    final_angles = env.angle_to_goal(state.rot, targets)
    report = BenchmarkReport.empty(mode, config.object.name, n_trials, N_GOALS)
    for g in np.unique(goal_index):
        rows = goal_index == g
        kept = rows & ~faulted
        report.goals[int(g)] = GoalResult(
            goal_index=int(g),
            trials=int(rows.sum()),
            successes=int(success[rows].sum()),
            final_angles=sorted(float(a) for a in final_angles[kept]),
        )
    for row in np.flatnonzero(faulted):
        logger.warning(f"[goal {int(goal_index[row])}] trial {int(trial_ids[row])} faulted, counted as failed")
    report.estimator_error_sum = error_sum
    report.estimator_error_sq_sum = error_sq_sum
    report.estimator_error_count = error_count
    report.faulted_trials = int(faulted.sum())
    return report


def run_benchmark(
    policy: ActorCritic,
    estimator: Estimator,
    config: ExperimentConfig,
    mode: str,
    n_trials: Optional[int] = None,
    n_workers: int = 1,
) -> BenchmarkReport:
    """
    24 x n_trials rollouts of one goal interval each, deterministic policy.

    Trials are simulated in batches of bench.batch_size; each trial owns the
    random streams of its global index, so the report does not depend on
    the batch size.
    """
    n_trials = n_trials or config.bench.n_trials
    config = evaluation_config(config)
    total = N_GOALS * n_trials
    batch = config.bench.batch_size
    report = BenchmarkReport.empty(mode, config.object.name, n_trials, N_GOALS)
    for start in range(0, total, batch):
        trial_ids = np.arange(start, min(start + batch, total))
        report = report.merge(
            _benchmark_batch(policy, estimator, config, mode, trial_ids, n_trials, n_workers)
        )
        logger.info(f"Benchmark {mode}: {min(start + batch, total)}/{total} trials")
    logger.info(
        f"Benchmark {mode} on {config.object.name}: B={report.success_rate:.1f}% "
        f"estimator error={report.estimator_error_mean:.3f} rad"
    )
    return report


# =============================================================================
# CONSECUTIVE REORIENTATIONS
# =============================================================================

def run_consecutive(
    policy: ActorCritic,
    estimator: Estimator,
    config: ExperimentConfig,
    mode: str,
    n_trials: Optional[int] = None,
    cap: Optional[int] = None,
    n_workers: int = 1,
) -> ConsecutiveReport:
    """
    Count goals reached in a row without ever grounding the estimate again.

    A trial ends at its first missed goal, a drop, a fault or after `cap`
    successes. The simulator draws the next goal after every success.
    """
    n_trials = n_trials or config.bench.consecutive_trials
    cap = cap or config.bench.consecutive_cap
    config = evaluation_config(config, episode_timeout=False)
    env = TactilePivot(config, n_trials, config.bench.eval_seed + 1, n_workers=n_workers)
    state, obs = env.reset()
    carry = init_estimate(state, estimator.latent_dim)
    counts = np.zeros(n_trials, dtype=np.int64)
    running = np.ones(n_trials, dtype=bool)

    while np.any(running):
        action, ok_policy = _policy_action(policy, obs, _fed(mode, state, carry), state.goal)
        state, obs, _, flags = env.step(np.where(running[:, None], action, 0.0))
        carry, ok_estimator = _advance_estimate(estimator, obs, action, carry, state)
        counts += running & flags.goal_success
        stop = flags.goal_timeout | flags.dropped | flags.fault | ~ok_policy | ~ok_estimator | (counts >= cap)
        running &= ~stop

    report = ConsecutiveReport(mode=mode, object=config.object.name, cap=cap, counts=counts.tolist())
    logger.info(f"Consecutive {mode}: counts {report.counts_text()} median {report.median}")
    return report


# =============================================================================
# DISTRIBUTIONS AND COMPARISONS
# =============================================================================

def final_angle_distribution(
    samples: Any, min_samples: int = 20, quantiles: Sequence[int] = QUANTILES
) -> Dict[int, float]:
    """
    Linear-interpolation quantiles of final goal angles.

    Args:
        samples: A BenchmarkReport or a sequence of angles

    Raises:
        InsufficientSamplesError: fewer than min_samples values
    """
    values = np.asarray(samples.final_angles() if isinstance(samples, BenchmarkReport) else samples, dtype=float)
    if values.size < min_samples:
        raise InsufficientSamplesError(f"{values.size} samples, at least {min_samples} needed for quantiles")
    return {int(q): float(v) for q, v in zip(quantiles, np.percentile(values, quantiles))}


def gap_analysis(reports: Sequence[BenchmarkReport]) -> Dict[str, Dict[str, Any]]:
    """
    Per object: success rate and estimator error per mode, plus

        estimator gap = B(estimada) - B(naive)
        policy gap    = B(ecrl) - B(estimada)

    A gap is None when one of its modes is missing.
    """
    by_object: Dict[str, Dict[str, Any]] = {}
    for report in reports:
        entry = by_object.setdefault(report.object, {"modes": {}})
        entry["modes"][report.mode] = {
            "success_rate": report.success_rate,
            "estimator_error_mean": report.estimator_error_mean,
            "estimator_error_std": report.estimator_error_std,
        }
    for entry in by_object.values():
        b = {mode: values["success_rate"] for mode, values in entry["modes"].items()}
        entry["estimator_gap"] = b["estimada"] - b["naive"] if {"estimada", "naive"} <= b.keys() else None
        entry["policy_gap"] = b["ecrl"] - b["estimada"] if {"ecrl", "estimada"} <= b.keys() else None
    return by_object


# =============================================================================
# OUTPUT FILES
# =============================================================================

def report_prefix(report: Any) -> str:
    return f"{report.object}-{report.mode}"


def write_report(report: BenchmarkReport, out_dir: Path, min_samples: int = 20) -> Dict[str, Path]:
    """Write the JSON report, the per-goal CSV and the final-angle CSV."""
    out_dir = Path(out_dir)
    prefix = report_prefix(report)
    try:
        quantiles: Optional[Dict[int, float]] = final_angle_distribution(report, min_samples)
    except InsufficientSamplesError as e:
        logger.warning(f"No final-angle quantiles: {e}")
        quantiles = None

    paths = {
        "report": out_dir / f"{prefix}-benchmark.json",
        "per_goal": out_dir / f"{prefix}-per_goal.csv",
        "final_angles": out_dir / f"{prefix}-final_angles.csv",
    }
    AtomicFileWriter.write_json(
        paths["report"],
        {
            "summary": report.summary(),
            "final_angle_quantiles": quantiles,
            "report": report.model_dump(mode="json"),
        },
    )
    write_csv(
        paths["per_goal"],
        PER_GOAL_COLUMNS,
        [
            {"goal_index": g.goal_index, "success_rate": g.success_rate, "mode": report.mode, "object": report.object}
            for g in report.goals
        ],
    )
    write_csv(
        paths["final_angles"],
        FINAL_ANGLE_COLUMNS,
        [
            {"goal_index": g.goal_index, "trial": i, "final_angle": a, "mode": report.mode, "object": report.object}
            for g in report.goals
            for i, a in enumerate(g.final_angles)
        ],
    )
    return paths


def write_consecutive(report: ConsecutiveReport, out_dir: Path) -> Path:
    path = Path(out_dir) / f"{report_prefix(report)}-consecutive.json"
    AtomicFileWriter.write_json(
        path,
        {
            "mode": report.mode,
            "object": report.object,
            "cap": report.cap,
            "counts": report.counts,
            "counts_text": report.counts_text(),
            "median": report.median,
        },
    )
    return path


def load_report(path: Path) -> BenchmarkReport:
    data = AtomicFileWriter.read_json(Path(path))
    if not isinstance(data, dict) or "report" not in data:
        raise ValueError(f"{path} is not a benchmark report")
    return BenchmarkReport.model_validate(data["report"])


def write_comparison(analysis: Dict[str, Dict[str, Any]], out_dir: Path) -> Dict[str, Path]:
    out_dir = Path(out_dir)
    paths = {
        "json": out_dir / "comparison.json",
        "modes": out_dir / "comparison.csv",
        "gaps": out_dir / "gaps.csv",
    }
    AtomicFileWriter.write_json(paths["json"], analysis)
    write_csv(
        paths["modes"],
        COMPARISON_COLUMNS,
        [
            {"object": obj, "mode": mode, **values}
            for obj, entry in sorted(analysis.items())
            for mode, values in sorted(entry["modes"].items())
        ],
    )
    write_csv(
        paths["gaps"],
        GAP_COLUMNS,
        [
            {
                "object": obj,
                "estimator_gap": "" if entry["estimator_gap"] is None else entry["estimator_gap"],
                "policy_gap": "" if entry["policy_gap"] is None else entry["policy_gap"],
            }
            for obj, entry in sorted(analysis.items())
        ],
    )
    return paths


# =============================================================================
# FAILURE DEMONSTRATIONS
# =============================================================================

@dataclass
class FailureDemoResult:
    case: str
    path: Path
    summary: Dict[str, float]


def _next_goals(rng: np.random.Generator, current: np.ndarray) -> np.ndarray:
    return np.array([sample_goal(rng, int(g)) for g in current], dtype=np.int64)


def _tipping_demo(
    policy: ActorCritic, estimator: Estimator, config: ExperimentConfig, seed: int, steps: int, repeats: int
) -> Tuple[TrajectoryRecorder, Dict[str, float]]:
    """
    Record one closed-loop rotation sequence, then replay its actions open
    loop from the same grasp in `repeats` environments with their own noise.
    """
    goal_rng = np.random.default_rng(np.random.SeedSequence([seed, 11]))
    reference = TactilePivot(config, 1, seed)
    state, obs = reference.reset()
    start = state.copy()
    carry = init_estimate(state, estimator.latent_dim)
    actions: List[np.ndarray] = []
    goals: List[int] = []
    recorder = TrajectoryRecorder(config.env.control_dt)

    for step in range(steps):
        goal_index = int(state.goal_index[0])
        goals.append(goal_index)
        action, _ = _policy_action(policy, obs, carry, state.goal)
        actions.append(action[0].copy())
        state, obs, rewards, flags = reference.step(action)
        carry, _ = _advance_estimate(estimator, obs, action, carry, state)
        angles = geodesic_distance(state.rot, reference.goals[[goal_index]])
        recorder.record([0], step + 1, state, rewards, flags, angles, carry.x)
        if flags.goal_timeout[0]:
            reference.set_goal([0], _next_goals(goal_rng, state.goal_index))

    repeat_env = TactilePivot(config, repeats, seed, env_offset=1)
    repeat_env.reset()
    repeat_env.state.put(np.arange(repeats), start.take(np.zeros(repeats, dtype=np.int64)))
    alive = np.ones(repeats, dtype=bool)
    final = np.zeros(repeats)
    for step, (action, goal_index) in enumerate(zip(actions, goals)):
        state, _, rewards, flags = repeat_env.step(np.tile(action, (repeats, 1)))
        target = np.tile(repeat_env.goals[goal_index], (repeats, 1))
        angles = geodesic_distance(state.rot, target)
        recorder.record(np.arange(1, repeats + 1), step + 1, state, rewards, flags, angles, active=alive)
        final = np.where(alive, angles, final)
        alive &= ~flags.dropped

    summary = {
        "final_angle_min": float(final.min()),
        "final_angle_max": float(final.max()),
        "final_angle_spread": float(final.max() - final.min()),
        "final_angle_std": float(final.std()),
    }
    return recorder, summary


def _drift_demo(
    policy: ActorCritic, estimator: Estimator, config: ExperimentConfig, seed: int, steps: int, repeats: int
) -> Tuple[TrajectoryRecorder, Dict[str, float]]:
    """Closed-loop runs on estimates, recording true and estimated height."""
    goal_rng = np.random.default_rng(np.random.SeedSequence([seed, 12]))
    env = TactilePivot(config, repeats, seed)
    state, obs = env.reset()
    carry = init_estimate(state, estimator.latent_dim)
    recorder = TrajectoryRecorder(config.env.control_dt)
    alive = np.ones(repeats, dtype=bool)
    first_gap = last_gap = np.zeros(repeats)

    for step in range(steps):
        action, _ = _policy_action(policy, obs, carry, state.goal)
        state, obs, rewards, flags = env.step(action)
        carry, _ = _advance_estimate(estimator, obs, action, carry, state)
        angles = env.angle_to_goal(state.rot, state.goal)
        recorder.record(np.arange(repeats), step + 1, state, rewards, flags, angles, carry.x, active=alive)
        gap = np.abs(carry.x[:, 2] - state.x[:, 2])
        if step == 0:
            first_gap = gap
        last_gap = np.where(alive, gap, last_gap)
        alive &= ~flags.dropped
        timed_out = np.flatnonzero(flags.goal_timeout)
        if timed_out.size:
            env.set_goal(timed_out, _next_goals(goal_rng, state.goal_index[timed_out]))

    summary = {
        "height_error_start": float(first_gap.mean()),
        "height_error_end": float(last_gap.mean()),
        "dropped": float((~alive).sum()),
    }
    return recorder, summary


def failure_demo(
    policy: ActorCritic,
    estimator: Estimator,
    config: ExperimentConfig,
    checkpoint_mode: str,
    case: str,
    out_dir: Path,
    seed: int = 0,
    repeats: int = DEMO_REPEATS,
    seconds: float = DEMO_SECONDS,
) -> FailureDemoResult:
    """
    Trajectory CSV of a failure case of a policy trained on the true state.

    Raises:
        CheckpointModeMismatch: the checkpoint is not a naive or oracle run
        ValueError: unknown case
    """
    if checkpoint_mode not in BENCH_MODES["naive"]:
        raise CheckpointModeMismatch(
            f"failure demos need a naive or oracle checkpoint, got a '{checkpoint_mode}' run"
        )
    if case not in FAILURE_CASES:
        raise ValueError(f"unknown case '{case}' (valid: {', '.join(FAILURE_CASES)})")
    config = evaluation_config(config, episode_timeout=False)
    steps = int(round(seconds / config.env.control_dt))
    if case == "tipping":
        recorder, summary = _tipping_demo(policy, estimator, config, seed, steps, repeats)
    else:
        recorder, summary = _drift_demo(policy, estimator, config, seed, steps, repeats)
    path = recorder.write(Path(out_dir) / f"{config.object.name}-{case}-seed{seed}.csv")
    AtomicFileWriter.write_json(path.with_suffix(".json"), {"case": case, "seed": seed, **summary})
    return FailureDemoResult(case=case, path=path, summary=summary)
