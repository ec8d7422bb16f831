"""
Estimator-coupled training loop.

One iteration collects a rollout segment from every environment, trains the
estimator on it with truncated BPTT, updates the policy with PPO and lowers
the probability rho of feeding the policy the true state. The four training
modes differ only in what the policy is fed and which updates run:

    ecrl      estimate or truth (per-segment coin, rho annealed), both updates
    naive     always truth; estimator trained passively on the rollouts
    oracle    same as naive (the label changes what the benchmark feeds)
    estimada  always the estimate; policy frozen, estimator trained

A run lives in {out}/{object}-{mode}-{config hash}-seed{seed}/ with a
manifest, a config snapshot, two metrics CSVs and periodic checkpoints that
restore the run exactly (environment state, random streams, optimizer
moments and the estimator carry included).
"""

import logging
import subprocess
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np

from ecrl import __version__, nncore
from ecrl.config import apply_overrides, config_hash
from ecrl.constants import (
    CHECKPOINT_DIR,
    CONFIG_SNAPSHOT_FILE,
    ECRL_OUTPUT_ROOT,
    ESTIMATOR_METRICS_FILE,
    LATEST_CHECKPOINT,
    MANIFEST_FILE,
    RUN_LOCK_FILE,
    TRAINING_METRICS_FILE,
)
from ecrl.env import (
    SystemState,
    TactilePivot,
    check_termination,
    rng_state_from_json,
    rng_state_to_json,
)
from ecrl.errors import (
    CheckpointError,
    CheckpointModeMismatch,
    ConfigError,
    EstimatorFault,
    PolicyFault,
    RunCollisionError,
    SimulationFault,
    TrainingError,
)
from ecrl.estimator import Estimator, init_estimate, truth_estimate
from ecrl.file_utils import AtomicFileWriter, CsvLog, FileLock, read_csv, write_csv
from ecrl.manifold import Estimate, geodesic_distance
from ecrl.models import ExperimentConfig, RunManifest
from ecrl.policy import ActorCritic, PpoMetrics, build_policy_input, ppo_batch_from_rollout, ppo_update

logger = logging.getLogger(__name__)

TRAINING_COLUMNS = [
    "iteration",
    "rho",
    "reward_mean",
    "episode_length_mean",
    "episodes_completed",
    "success_rate",
    "policy_loss",
    "value_loss",
    "entropy",
    "approx_kl",
    "clip_fraction",
    "lr",
    "ppo_early_stop",
    "ppo_rejected_steps",
    "truth_fed_fraction",
    "truth_fed_outside_start",
    "faulted_steps",
    "est_error_mean",
]

ESTIMATOR_COLUMNS = [
    "iteration",
    "rmse_pos",
    "rmse_rot",
    "rmse_vel",
    "loss_before",
    "loss_after",
    "grad_steps",
    "clipped_steps",
    "rejected_steps",
]

# Training modes whose policy estimada may freeze.
FROZEN_POLICY_SOURCES = ("naive", "oracle")


def rho_schedule(iteration: int, rho0: float, rho_delta: float, mode: str) -> float:
    """Probability of feeding the true state in iteration `iteration` (0-based)."""
    if mode in ("naive", "oracle"):
        return 1.0
    if mode == "estimada":
        return 0.0
    return max(rho0 - iteration * rho_delta, 0.0)


def resolve_config(config: ExperimentConfig) -> ExperimentConfig:
    """Apply implications of trainer flags (finetuning enables wrench kicks)."""
    t = config.trainer
    if t.mode == "estimada" and not t.init_from:
        raise ConfigError("trainer.init_from", "estimada needs a naive or oracle checkpoint to freeze")
    if t.finetune_from and not config.randomization.wrench_enabled:
        config = apply_overrides(config, {"randomization.wrench_enabled": True})
    return config


def run_name(config: ExperimentConfig) -> str:
    t = config.trainer
    return f"{config.object.name}-{t.mode}-{config_hash(config)}-seed{t.seed}"


def version_string() -> str:
    """Package version, plus `git describe` of the source tree when available."""
    try:
        result = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=Path(__file__).parent,
            check=True,
            capture_output=True,
            text=True,
            timeout=5,
        )
        return f"{__version__}+{result.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        return __version__


# =============================================================================
# ROLLOUT BUFFER
# =============================================================================

@dataclass
class RolloutBuffer:
    """
    One rollout segment, time-major (T, N).

    est_* is the estimate fed to the policy at step t (the true state where
    the coin chose it), truth_* the true state before step t and next_* the
    true state after it. valid is false for faulted steps.
    """

    policy_inputs: np.ndarray
    raw_actions: np.ndarray
    actions: np.ndarray
    means: np.ndarray
    log_std: np.ndarray
    gaussian_logprob: np.ndarray
    values: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    valid: np.ndarray
    starts: np.ndarray
    truth_fed: np.ndarray
    success: np.ndarray
    goal_timeout: np.ndarray
    goal_index: np.ndarray
    est_error: np.ndarray
    est_x: np.ndarray
    est_rot: np.ndarray
    est_v: np.ndarray
    est_w: np.ndarray
    est_latent: np.ndarray
    truth_x: np.ndarray
    truth_rot: np.ndarray
    truth_v: np.ndarray
    truth_w: np.ndarray
    next_obs: np.ndarray
    next_x: np.ndarray
    next_rot: np.ndarray
    next_v: np.ndarray
    next_w: np.ndarray

    @classmethod
    def allocate(
        cls, length: int, n_envs: int, obs_dim: int, input_dim: int, n_dof: int, latent_dim: int
    ) -> "RolloutBuffer":
        def z(*shape, dtype=np.float64):
            return np.zeros((length, n_envs) + shape, dtype=dtype)

        return cls(
            policy_inputs=z(input_dim),
            raw_actions=z(n_dof),
            actions=z(n_dof),
            means=z(n_dof),
            log_std=np.zeros(n_dof),
            gaussian_logprob=z(),
            values=np.zeros((length + 1, n_envs)),
            rewards=z(),
            dones=z(dtype=bool),
            valid=z(dtype=bool),
            starts=z(dtype=bool),
            truth_fed=z(dtype=bool),
            success=z(dtype=bool),
            goal_timeout=z(dtype=bool),
            goal_index=z(dtype=np.int64),
            est_error=z(),
            est_x=z(3),
            est_rot=z(4),
            est_v=z(3),
            est_w=z(3),
            est_latent=z(latent_dim),
            truth_x=z(3),
            truth_rot=z(4),
            truth_v=z(3),
            truth_w=z(3),
            next_obs=z(obs_dim),
            next_x=z(3),
            next_rot=z(4),
            next_v=z(3),
            next_w=z(3),
        )

    @property
    def length(self) -> int:
        return self.rewards.shape[0]

    @property
    def n_transitions(self) -> int:
        return int(self.valid.sum())

    def store_estimate(self, t: int, fed: Estimate) -> None:
        self.est_x[t], self.est_rot[t], self.est_v[t] = fed.x, fed.rot, fed.v
        self.est_w[t], self.est_latent[t] = fed.w, fed.latent

    def store_truth(self, t: int, state: SystemState) -> None:
        self.truth_x[t], self.truth_rot[t] = state.x, state.rot
        self.truth_v[t], self.truth_w[t] = state.v, state.w

    def store_next(self, t: int, state: SystemState, obs: np.ndarray) -> None:
        self.next_obs[t] = obs
        self.next_x[t], self.next_rot[t] = state.x, state.rot
        self.next_v[t], self.next_w[t] = state.v, state.w


@dataclass
class RolloutStats:
    episodes_completed: int = 0
    episode_length_sum: int = 0
    faulted_steps: int = 0


@dataclass
class IterationMetrics:
    iteration: int
    rho: float
    reward_mean: float
    episode_length_mean: float
    episodes_completed: int
    success_rate: float
    ppo: PpoMetrics
    truth_fed_fraction: float
    truth_fed_outside_start: int
    faulted_steps: int
    est_error_mean: float
    estimator: Optional[Dict[str, Any]] = None

    def training_row(self) -> Dict[str, Any]:
        return {
            "iteration": self.iteration,
            "rho": self.rho,
            "reward_mean": self.reward_mean,
            "episode_length_mean": self.episode_length_mean,
            "episodes_completed": self.episodes_completed,
            "success_rate": self.success_rate,
            "policy_loss": self.ppo.policy_loss,
            "value_loss": self.ppo.value_loss,
            "entropy": self.ppo.entropy,
            "approx_kl": self.ppo.approx_kl,
            "clip_fraction": self.ppo.clip_fraction,
            "lr": self.ppo.lr,
            "ppo_early_stop": self.ppo.early_stopped,
            "ppo_rejected_steps": self.ppo.rejected_steps,
            "truth_fed_fraction": self.truth_fed_fraction,
            "truth_fed_outside_start": self.truth_fed_outside_start,
            "faulted_steps": self.faulted_steps,
            "est_error_mean": self.est_error_mean,
        }

    def estimator_row(self) -> Optional[Dict[str, Any]]:
        if self.estimator is None:
            return None
        row = {column: self.estimator.get(column) for column in ESTIMATOR_COLUMNS}
        row["iteration"] = self.iteration
        return row


def _safe_mean(values: np.ndarray) -> float:
    return float(np.mean(values)) if values.size else float("nan")


# =============================================================================
# TRAINER
# =============================================================================

class Trainer:
    """
    Owns the policy, the estimator, the vectorized simulator and everything
    that must survive between iterations (estimator carry, episode starts,
    random streams). Has no notion of files except through checkpoint().
    """

    def __init__(self, config: ExperimentConfig, n_workers: Optional[int] = None):
        """
        Args:
            config: Resolved experiment configuration (see resolve_config)
            n_workers: Simulator threads; defaults to trainer.n_workers
        """
        config = resolve_config(config)
        self.config = config
        self.settings = config.trainer
        self.mode = self.settings.mode
        self.latent_dim = config.estimator.latent_dim
        seed = self.settings.seed

        net_rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
        self.policy = ActorCritic(config, net_rng)
        self.estimator = Estimator(config, net_rng)
        self.rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))

        workers = n_workers if n_workers is not None else self.settings.n_workers
        self.env = TactilePivot(config, self.settings.n_envs, seed, n_workers=workers)
        divergence = self.settings.divergence_termination
        self.divergence = self.settings.uses_estimate if divergence is None else divergence

        self.iteration = 0
        self.env.reset()
        self.carry = init_estimate(self.env.state, self.latent_dim)
        self.starts = np.ones(self.settings.n_envs, dtype=bool)
        self.episode_return = np.zeros(self.settings.n_envs)
        self.episode_length = np.zeros(self.settings.n_envs, dtype=np.int64)
        self._last_stats = RolloutStats()

        if self.mode == "estimada":
            self._load_frozen_policy(Path(self.settings.init_from))
        if self.settings.finetune_from:
            self._load_weights(Path(self.settings.finetune_from))

    @property
    def rho(self) -> float:
        s = self.settings
        return rho_schedule(self.iteration, s.rho0, s.rho_delta, self.mode)

    @property
    def policy_frozen(self) -> bool:
        return self.mode == "estimada"

    # ------------------------------------------------------------------
    # Initialization from other runs
    # ------------------------------------------------------------------

    def _load_frozen_policy(self, path: Path) -> None:
        arrays, meta = nncore.load_checkpoint(path)
        if meta.get("mode") not in FROZEN_POLICY_SOURCES:
            raise CheckpointModeMismatch(
                f"estimada freezes a naive or oracle policy, {path} holds a '{meta.get('mode')}' run"
            )
        self.policy.load_state_dict(arrays, with_optimizer=False)
        self.estimator.load_state_dict(arrays, with_optimizer=False)
        self.policy.normalizer.frozen = True
        logger.info(f"Froze policy from {path} (iteration {meta.get('iteration')})")

    def _load_weights(self, path: Path) -> None:
        arrays, meta = nncore.load_checkpoint(path)
        self.policy.load_state_dict(arrays, with_optimizer=False)
        self.estimator.load_state_dict(arrays, with_optimizer=False)
        logger.info(f"Finetuning from {path} ({meta.get('mode')}, iteration {meta.get('iteration')})")

    # ------------------------------------------------------------------
    # Rollouts
    # ------------------------------------------------------------------

    def _fed_estimate(self, state: SystemState, coin: np.ndarray) -> tuple:
        """Estimate shown to the policy and the rows that received the true state."""
        truth = truth_estimate(state, self.carry.latent)
        if not self.settings.uses_estimate:
            return truth, np.ones(len(state), dtype=bool)
        fed_truth = coin & ~self.starts
        return self.carry.select(fed_truth, truth), fed_truth

    def collect_rollout(self, rho: Optional[float] = None) -> RolloutBuffer:
        """
        Run every environment for rollout_length control steps.

        Environments that finish an episode are reset in place and their
        estimate restarts from the known grasp; the segment keeps going.
        """
        rho = self.rho if rho is None else rho
        env, policy = self.env, self.policy
        n, length = self.settings.n_envs, self.settings.rollout_length
        buffer = RolloutBuffer.allocate(
            length, n, self.config.env.obs_dim, policy.input_dim, self.config.env.n_dof, self.latent_dim
        )
        buffer.log_std = policy.head.clamped_log_std().data.copy()
        stats = RolloutStats()
        coin = self.rng.random(n) < rho

        for t in range(length):
            state, obs = env.state, env.last_obs
            fed, truth_fed = self._fed_estimate(state, coin)
            raw_input = build_policy_input(obs, fed, state.goal)
            policy.normalizer.update(raw_input)
            inputs = policy.normalizer.normalize(raw_input)
            result = policy.act(inputs, self.rng)

            buffer.policy_inputs[t] = inputs
            buffer.raw_actions[t] = result.raw_action
            buffer.actions[t] = result.action
            buffer.means[t] = result.mean
            buffer.gaussian_logprob[t] = result.gaussian_logprob
            buffer.values[t] = result.value
            buffer.starts[t] = self.starts
            buffer.truth_fed[t] = truth_fed
            buffer.goal_index[t] = state.goal_index
            buffer.store_estimate(t, fed)
            buffer.store_truth(t, state)
            if self.settings.uses_estimate:
                buffer.est_error[t] = geodesic_distance(self.carry.rot, state.rot)

            state, obs, rewards, flags = env.step(result.action)
            if self.settings.uses_estimate:
                prediction = self.estimator.predict(obs, result.action, fed)
                flags.estimator_divergence = check_termination(
                    state, prediction, self.config.env, mode="train", divergence=self.divergence
                ).estimator_divergence
                self.carry = prediction
            else:
                self.carry = fed

            done = flags.done
            buffer.store_next(t, state, obs)
            buffer.rewards[t] = rewards
            buffer.dones[t] = done
            buffer.valid[t] = ~flags.fault
            buffer.success[t] = flags.goal_success
            buffer.goal_timeout[t] = flags.goal_timeout
            stats.faulted_steps += int(flags.fault.sum())

            self.episode_return += rewards
            self.episode_length += 1
            ended = np.flatnonzero(done)
            stats.episodes_completed += ended.size
            stats.episode_length_sum += int(self.episode_length[ended].sum())
            self.episode_return[ended] = 0.0
            self.episode_length[ended] = 0
            if ended.size:
                env.reset(ended)
                self.carry.put(ended, init_estimate(env.state.take(ended), self.latent_dim))
            self.starts = done.copy()

        fed, _ = self._fed_estimate(env.state, coin)
        bootstrap = build_policy_input(env.last_obs, fed, env.state.goal)
        buffer.values[length] = policy.value(policy.normalizer.normalize(bootstrap))
        self._last_stats = stats
        return buffer

    # ------------------------------------------------------------------
    # Iteration
    # ------------------------------------------------------------------

    def train_iteration(self) -> IterationMetrics:
        """Collect, update estimator, update policy (unless frozen), advance rho."""
        iteration = self.iteration
        rho = self.rho
        try:
            buffer = self.collect_rollout(rho)
        except (SimulationFault, EstimatorFault, PolicyFault) as e:
            raise TrainingError(iteration, f"rollout failed: {e}", e) from e

        estimator_metrics = self.estimator.train_epoch(buffer, rng=self.rng)

        ppo_metrics = PpoMetrics(lr=self.policy.lr)
        if not self.policy_frozen:
            batch = ppo_batch_from_rollout(buffer, self.policy, self.config.ppo)
            ppo_metrics = ppo_update(self.policy, batch, self.config.ppo, self.rng)
            if not all(np.all(np.isfinite(p.data)) for p in self.policy.parameters()):
                raise TrainingError(iteration, "policy parameters became non-finite")

        stats = self._last_stats
        valid = buffer.valid
        decided = buffer.success.sum() + buffer.goal_timeout.sum()
        measured = valid & ~buffer.starts
        metrics = IterationMetrics(
            iteration=iteration,
            rho=rho,
            reward_mean=_safe_mean(buffer.rewards[valid]),
            episode_length_mean=(
                stats.episode_length_sum / stats.episodes_completed if stats.episodes_completed else float("nan")
            ),
            episodes_completed=stats.episodes_completed,
            success_rate=float(buffer.success.sum() / decided) if decided else float("nan"),
            ppo=ppo_metrics,
            truth_fed_fraction=float(buffer.truth_fed.mean()),
            truth_fed_outside_start=int(np.sum(buffer.truth_fed & ~buffer.starts)),
            faulted_steps=stats.faulted_steps,
            est_error_mean=(
                _safe_mean(buffer.est_error[measured]) if self.settings.uses_estimate else float("nan")
            ),
            estimator=estimator_metrics.as_row(),
        )
        self.iteration += 1
        logger.info(
            f"[iter {iteration}] rho={rho:.3f} reward={metrics.reward_mean:.2f} "
            f"success={metrics.success_rate:.3f} episodes={metrics.episodes_completed} "
            f"est_loss={estimator_metrics.loss_after:.4f} kl={ppo_metrics.approx_kl:.4f} lr={ppo_metrics.lr:.2e}"
        )
        return metrics

    # ------------------------------------------------------------------
    # Checkpointing
    # ------------------------------------------------------------------

    def state_dict(self):
        arrays: Dict[str, np.ndarray] = {}
        arrays.update(self.policy.state_dict())
        arrays.update(self.estimator.state_dict())
        env_arrays, env_meta = self.env.state_dict()
        arrays.update(env_arrays)
        for name in ("x", "rot", "v", "w", "latent"):
            arrays[f"carry.{name}"] = getattr(self.carry, name)
        arrays["trainer.starts"] = self.starts
        arrays["trainer.episode_return"] = self.episode_return
        arrays["trainer.episode_length"] = self.episode_length
        meta = {
            "mode": self.mode,
            "object": self.config.object.name,
            "iteration": self.iteration,
            "rho": self.rho,
            "config": self.config.model_dump(mode="json"),
            "config_hash": config_hash(self.config),
            "version": __version__,
            "trainer_rng": rng_state_to_json(self.rng.bit_generator.state),
            "normalizer_frozen": self.policy.normalizer.frozen,
            "env": env_meta,
        }
        return arrays, meta

    def checkpoint(self, path: Path) -> Path:
        arrays, meta = self.state_dict()
        nncore.save_checkpoint(path, arrays, meta)
        logger.info(f"[iter {self.iteration}] checkpoint written to {path}")
        return Path(path)

    def restore(self, path: Path) -> None:
        """
        Restore everything checkpoint() wrote; the next iteration continues
        exactly as the uninterrupted run would have.

        Raises:
            CheckpointError: missing/corrupt file, or a checkpoint of another run
        """
        arrays, meta = nncore.load_checkpoint(path)
        if meta.get("config_hash") != config_hash(self.config):
            raise CheckpointError(f"{path} was written by a run with a different configuration")
        self.policy.load_state_dict(arrays)
        self.estimator.load_state_dict(arrays)
        self.policy.normalizer.frozen = bool(meta.get("normalizer_frozen", False))
        self.env.load_state_dict(arrays, meta["env"])
        self.carry = Estimate(
            x=np.array(arrays["carry.x"]),
            rot=np.array(arrays["carry.rot"]),
            v=np.array(arrays["carry.v"]),
            w=np.array(arrays["carry.w"]),
            latent=np.array(arrays["carry.latent"]),
        )
        self.starts = np.array(arrays["trainer.starts"], dtype=bool)
        self.episode_return = np.array(arrays["trainer.episode_return"])
        self.episode_length = np.array(arrays["trainer.episode_length"], dtype=np.int64)
        self.rng.bit_generator.state = rng_state_from_json(meta["trainer_rng"])
        self.iteration = int(meta["iteration"])


# =============================================================================
# LOADING TRAINED AGENTS
# =============================================================================

@dataclass
class LoadedAgent:
    config: ExperimentConfig
    policy: ActorCritic
    estimator: Estimator
    meta: Dict[str, Any]

    @property
    def mode(self) -> str:
        return self.meta["mode"]


def load_agent(path: Path) -> LoadedAgent:
    """Rebuild policy (with frozen normalizer) and estimator from a checkpoint."""
    arrays, meta = nncore.load_checkpoint(path)
    try:
        config = ExperimentConfig.model_validate(meta["config"])
    except (KeyError, ValueError) as e:
        raise CheckpointError(f"{path} holds no readable config: {e}") from e
    rng = np.random.default_rng(0)
    policy = ActorCritic(config, rng)
    estimator = Estimator(config, rng)
    policy.load_state_dict(arrays)
    estimator.load_state_dict(arrays)
    policy.normalizer.frozen = True
    return LoadedAgent(config=config, policy=policy, estimator=estimator, meta=meta)


def resolve_checkpoint(path: Path) -> Path:
    """Accept a checkpoint file or a run directory (its latest checkpoint)."""
    path = Path(path)
    if path.is_dir():
        path = path / CHECKPOINT_DIR / LATEST_CHECKPOINT
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    return path


# =============================================================================
# RUN DIRECTORY
# =============================================================================

def _truncate_log(filepath: Path, columns: List[str], iteration: int) -> None:
    """Drop rows logged after the checkpoint a resumed run restarts from."""
    if not filepath.exists():
        return
    rows = [row for row in read_csv(filepath) if int(row["iteration"]) < iteration]
    write_csv(filepath, columns, rows)


class TrainingRun:
    """
    A training run bound to its run directory.

    Usage:
        with TrainingRun(config, out_root) as run:
            run.run()
    """

    def __init__(
        self,
        config: ExperimentConfig,
        out_root: Optional[Path] = None,
        resume: bool = False,
        n_workers: Optional[int] = None,
    ):
        self.config = resolve_config(config)
        self.out_root = Path(out_root or ECRL_OUTPUT_ROOT)
        self.resume = resume
        self.n_workers = n_workers
        self.run_dir = self.out_root / run_name(self.config)
        self.checkpoint_dir = self.run_dir / CHECKPOINT_DIR
        self.lock = FileLock(self.run_dir / RUN_LOCK_FILE)
        self.trainer: Optional[Trainer] = None
        self.training_log: Optional[CsvLog] = None
        self.estimator_log: Optional[CsvLog] = None

    def __enter__(self) -> "TrainingRun":
        self.start()
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        self.close()
        return False

    def start(self) -> Path:
        """
        Claim the run directory and write the manifest, or restore the latest
        checkpoint when resuming.

        Raises:
            RunCollisionError: the run exists and resume was not requested, or
                another process holds it
        """
        manifest_path = self.run_dir / MANIFEST_FILE
        if manifest_path.exists() and not self.resume:
            raise RunCollisionError(f"{self.run_dir} already holds a run (use --resume to continue it)")
        self.run_dir.mkdir(parents=True, exist_ok=True)
        if not self.lock.acquire(timeout=0):
            raise RunCollisionError(f"{self.run_dir} is in use by another process")

        try:
            self.trainer = Trainer(self.config, self.n_workers)
            latest = self.checkpoint_dir / LATEST_CHECKPOINT
            if self.resume and latest.exists():
                self.trainer.restore(latest)
                _truncate_log(self.run_dir / TRAINING_METRICS_FILE, TRAINING_COLUMNS, self.trainer.iteration)
                _truncate_log(self.run_dir / ESTIMATOR_METRICS_FILE, ESTIMATOR_COLUMNS, self.trainer.iteration)
                logger.info(f"Resumed {self.run_dir.name} at iteration {self.trainer.iteration}")
            elif not manifest_path.exists():
                self._write_manifest(manifest_path)
                logger.info(f"Started run {self.run_dir.name}")
            else:
                logger.info(f"Run {self.run_dir.name} has no checkpoint yet, starting over")
            self.training_log = CsvLog(self.run_dir / TRAINING_METRICS_FILE, TRAINING_COLUMNS)
            self.estimator_log = CsvLog(self.run_dir / ESTIMATOR_METRICS_FILE, ESTIMATOR_COLUMNS)
        except BaseException:
            self.lock.release()
            raise
        return self.run_dir

    def _write_manifest(self, manifest_path: Path) -> None:
        t = self.config.trainer
        snapshot = self.config.model_dump(mode="json")
        manifest = RunManifest(
            config=snapshot,
            config_hash=config_hash(self.config),
            seed=t.seed,
            mode=t.mode,
            object=self.config.object.name,
            version=version_string(),
            outputs={
                "config": CONFIG_SNAPSHOT_FILE,
                "training_metrics": TRAINING_METRICS_FILE,
                "estimator_metrics": ESTIMATOR_METRICS_FILE,
                "checkpoints": CHECKPOINT_DIR,
            },
        )
        AtomicFileWriter.write_json(self.run_dir / CONFIG_SNAPSHOT_FILE, snapshot)
        AtomicFileWriter.write_json(manifest_path, manifest.model_dump(mode="json"))

    def run(self, iterations: Optional[int] = None) -> Path:
        """Train until `iterations` in total have completed; returns the latest checkpoint."""
        if self.trainer is None:
            self.start()
        trainer = self.trainer
        total = self.config.trainer.iterations if iterations is None else iterations
        interval = self.config.trainer.checkpoint_interval
        latest = self.checkpoint_dir / LATEST_CHECKPOINT

        while trainer.iteration < total:
            started = time.perf_counter()
            try:
                metrics = trainer.train_iteration()
            except TrainingError as e:
                logger.error(f"Run {self.run_dir.name} aborted: {type(e.cause or e).__name__}: {e}")
                raise
            self.training_log.append(metrics.training_row())
            row = metrics.estimator_row()
            if row is not None:
                self.estimator_log.append(row)
            logger.debug(f"[iter {metrics.iteration}] took {time.perf_counter() - started:.2f}s")
            if trainer.iteration % interval == 0 or trainer.iteration == total:
                self._save(trainer, latest)

        if not latest.exists():
            self._save(trainer, latest)
        return latest

    def _save(self, trainer: Trainer, latest: Path) -> None:
        numbered = self.checkpoint_dir / f"iter_{trainer.iteration:06d}.npz"
        trainer.checkpoint(numbered)
        trainer.checkpoint(latest)

    def close(self) -> None:
        self.lock.release()
