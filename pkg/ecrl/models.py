"""
Configuration and report models for ecrl.

One ExperimentConfig fully determines a run. Every section mirrors a module:
env, randomization, object, network, estimator, ppo, trainer, bench.
"""

import math
from datetime import datetime
from typing import Any, Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, model_validator

Mode = Literal["ecrl", "naive", "estimada", "oracle"]
MODES: Tuple[str, ...] = ("ecrl", "naive", "estimada", "oracle")
ObjectName = Literal["cube", "cuboid", "L", "apple"]
OBJECT_NAMES: Tuple[str, ...] = ("cube", "cuboid", "L", "apple")


class RewardSettings(BaseModel):
    """Reward coefficients."""

    lambda_theta: float = Field(default=1000.0, description="Weight of the clipped angle decrease")
    lambda_x_outer: float = Field(default=0.1, description="Outer weight of the position penalty")
    lambda_x: float = Field(default=50.0, description="Inner weight of the position penalty")
    lambda_q: float = Field(default=2000.0, description="Weight of the joint deviation penalty")
    theta_clip: float = Field(default=0.1, gt=0, description="Clip of the per-step angle decrease (rad)")
    x_clip: float = Field(default=0.3, gt=0, description="Clip of the position deviation (m)")


class EnvSettings(BaseModel):
    """TactilePivot dynamics, observation and episode settings."""

    control_hz: float = Field(default=10.0, gt=0, description="Policy query rate")
    substeps: int = Field(default=6, ge=1, description="Simulation substeps (and stacked frames) per control step")
    n_dof: int = Field(default=12, description="Joint count: 4 fingers x 3 joints")
    joint_limit: float = Field(default=1.2, gt=0, description="Symmetric joint limit (rad)")
    filter_alpha: float = Field(default=0.3, gt=0, le=1, description="Low-pass factor on joint targets")
    max_joint_step: float = Field(default=0.05, gt=0, description="Per-substep joint rate limit (rad)")
    contact_compliance: float = Field(
        default=0.1, ge=0, lt=1, description="Fraction of commanded penetration realized by a closing joint"
    )
    engagement_width: float = Field(default=0.05, gt=0, description="Sigmoid width of finger engagement (rad)")
    contact_angle: float = Field(default=0.3, description="Closing-joint contact angle at the nominal pose (rad)")
    grasp_press: float = Field(default=0.5, description="Nominal closing command beyond contact (rad)")
    position_sensitivity: float = Field(
        default=10.0, description="Contact-angle change per metre of object displacement (rad/m)"
    )
    support_sensitivity: float = Field(
        default=10.0, description="Contact-angle change per metre of object support change (rad/m)"
    )
    vertical_attenuation: float = Field(
        default=0.1, ge=0, description="Attenuation of the x3 channel in contact angles"
    )
    contact_tilt_deg: float = Field(default=30.0, description="Downward tilt of the contact directions")
    rotation_gain: float = Field(default=2.0, description="Angular velocity per unit tangential residual")
    centering_gain: float = Field(default=0.5, description="Lateral velocity per unit penetration imbalance")
    tip_noise: float = Field(default=0.5, ge=0, description="Nominal tipping noise scale (rad/s)")
    vertical_drift: float = Field(default=0.02, ge=0, description="x3 random-walk scale per unit angular speed (m)")
    drop_speed: float = Field(default=0.5, ge=0, description="Fall speed with fewer than 2 engaged fingers (m/s)")
    vertical_reach: float = Field(default=0.02, gt=0, description="x3 offset at which fingertips lose reach (m)")
    reach_width: float = Field(default=0.005, gt=0, description="Sigmoid width of the reach factor (m)")
    goal_seconds: float = Field(default=5.0, gt=0, description="Goal interval T_g (s)")
    max_episode_seconds: Optional[float] = Field(default=20.0, description="Episode timeout T_max (s); null disables")
    success_threshold: float = Field(default=0.4, gt=0, description="Goal success angle (rad)")
    drop_distance: float = Field(default=0.1, gt=0, description="Drop distance from the origin (m)")
    divergence_threshold: float = Field(
        default=math.pi / 4, gt=0, description="Estimator error ending a training episode (rad)"
    )
    success_metric: Literal["absolute", "symmetry_quotient"] = Field(
        default="absolute", description="Count success against the sampled goal or modulo object symmetry"
    )
    n_grasps: int = Field(default=16, ge=1, description="Size of the initial grasp set")
    grasp_seed: int = Field(default=0, description="Seed of the initial grasp set")
    grasp_position_jitter: float = Field(default=0.0005, ge=0, description="Grasp position jitter (m)")
    grasp_rotation_jitter: float = Field(default=0.01, ge=0, description="Grasp rotation jitter (rad)")
    reward: RewardSettings = Field(default_factory=RewardSettings)

    @property
    def control_dt(self) -> float:
        return 1.0 / self.control_hz

    @property
    def substep_dt(self) -> float:
        return 1.0 / (self.control_hz * self.substeps)

    @property
    def goal_steps(self) -> int:
        return int(round(self.goal_seconds * self.control_hz))

    @property
    def max_episode_steps(self) -> Optional[int]:
        if self.max_episode_seconds is None:
            return None
        return int(round(self.max_episode_seconds * self.control_hz))

    @property
    def obs_dim(self) -> int:
        return self.substeps * 2 * self.n_dof


class DomainRandomizationSettings(BaseModel):
    """Ranges sampled once per environment instance."""

    enabled: bool = Field(default=True, description="Sample the ranges below; nominal values otherwise")
    tip_noise_scale: Tuple[float, float] = Field(default=(0.5, 1.5), description="Multiplier on tip_noise")
    obs_noise: Tuple[float, float] = Field(default=(0.0, 0.01), description="Observation noise std range (rad)")
    obs_bias: float = Field(default=0.005, ge=0, description="Half-width of the uniform observation bias (rad)")
    size_scale: Tuple[float, float] = Field(default=(0.9, 1.1), description="Object half-extent scale")
    mass_scale: Tuple[float, float] = Field(default=(0.8, 1.2), description="Object mass scale (scales tipping)")
    gain_jitter: float = Field(default=0.1, ge=0, lt=1, description="Relative control gain jitter")
    wrench_enabled: bool = Field(default=False, description="Random angular-velocity kicks")
    wrench_probability: float = Field(default=0.01, ge=0, le=1, description="Kick probability per control step")
    wrench_max: float = Field(default=1.0, ge=0, description="Maximum kick magnitude (rad/s)")

    @classmethod
    def noiseless(cls) -> "DomainRandomizationSettings":
        return cls(enabled=False)


_OBJECT_PRESETS: Dict[str, Dict[str, Any]] = {
    "cube": {
        "shape": "box",
        "half_extents": (0.04, 0.04, 0.04),
        "com_offset": (0.0, 0.0, 0.0),
        "tipping_susceptibility": 1.0,
        "drift_susceptibility": 1.0,
    },
    "cuboid": {
        "shape": "box",
        "half_extents": (0.04, 0.04, 0.025),
        "com_offset": (0.0, 0.0, 0.0),
        "tipping_susceptibility": 1.2,
        "drift_susceptibility": 1.0,
    },
    "L": {
        "shape": "box",
        "half_extents": (0.05, 0.04, 0.03),
        "com_offset": (0.01, 0.01, 0.0),
        "tipping_susceptibility": 1.5,
        "drift_susceptibility": 1.2,
    },
    "apple": {
        "shape": "ellipsoid",
        "half_extents": (0.04, 0.04, 0.037),
        "com_offset": (0.0, 0.0, -0.003),
        "tipping_susceptibility": 1.0,
        "drift_susceptibility": 2.0,
    },
}


class ObjectSpec(BaseModel):
    """
    Object parameter bundle.

    Giving only a name fills the remaining fields from the preset of that name.
    The symmetry group is derived from shape and centre of mass unless listed
    explicitly as octahedral goal indices.
    """

    model_config = ConfigDict(populate_by_name=True)

    name: ObjectName = Field(default="cube", description="Object preset name")
    shape: Literal["box", "ellipsoid"] = Field(default="box", description="Support-function family")
    half_extents: Tuple[float, float, float] = Field(default=(0.04, 0.04, 0.04), description="Half extents (m)")
    com_offset: Tuple[float, float, float] = Field(default=(0.0, 0.0, 0.0), description="Centre-of-mass offset (m)")
    tipping_susceptibility: float = Field(default=1.0, ge=0, description="Scale on tipping noise")
    drift_susceptibility: float = Field(default=1.0, ge=0, description="Scale on the x3 random walk")
    symmetry: Optional[List[int]] = Field(default=None, description="Octahedral indices mapping the shape to itself")

    @model_validator(mode="before")
    @classmethod
    def _fill_from_preset(cls, data: Any) -> Any:
        if isinstance(data, dict):
            preset = _OBJECT_PRESETS.get(data.get("name", "cube"))
            if preset is not None:
                return {**preset, **data}
        return data

    @classmethod
    def preset(cls, name: str) -> "ObjectSpec":
        return cls(name=name)

    def symmetry_indices(self) -> List[int]:
        if self.symmetry is not None:
            return sorted(set(self.symmetry))
        from ecrl.manifold import octahedral_group, quat_to_matrix

        extents = [float(e) for e in self.half_extents]
        offset = [float(o) for o in self.com_offset]
        indices = []
        for i, q in enumerate(octahedral_group()):
            m = quat_to_matrix(q)
            mapped_extents = abs(m) @ extents
            mapped_offset = m @ offset
            if max(abs(a - b) for a, b in zip(mapped_extents, extents)) < 1e-9 and max(
                abs(a - b) for a, b in zip(mapped_offset, offset)
            ) < 1e-9:
                indices.append(i)
        return indices


class NetworkSettings(BaseModel):
    """Hidden widths (full scale) and the scale factor applied to them."""

    policy_hidden: List[int] = Field(default=[512, 512, 256, 128], description="Policy and value hidden widths")
    estimator_hidden: List[int] = Field(default=[512, 512, 512, 512], description="Estimator hidden widths")
    width_scale: float = Field(default=0.25, gt=0, description="Factor applied to every width")
    activation: Literal["elu", "tanh"] = Field(default="elu", description="Hidden activation")
    init_log_std: float = Field(default=math.log(0.6), description="Initial Gaussian log std")
    log_std_bounds: Tuple[float, float] = Field(default=(-5.0, 1.0), description="Clamp on log std")
    policy_output_gain: float = Field(default=0.01, gt=0, description="Init gain of the policy mean layer")
    value_output_gain: float = Field(default=1.0, gt=0, description="Init gain of the value layer")
    estimator_output_gain: float = Field(default=0.01, gt=0, description="Init gain of the estimator output")


class EstimatorSettings(BaseModel):
    """Recursive estimator and its truncated-BPTT training."""

    latent_dim: int = Field(default=32, ge=0, description="Latent dimensions d_l")
    learning_rate: float = Field(default=5e-4, gt=0, description="Adam learning rate")
    minibatch_sequences: int = Field(default=64, ge=1, description="Sequences per minibatch")
    data_reuse: int = Field(default=2, ge=0, description="Passes k over the rollout")
    weight_position: float = Field(default=1.0, ge=0, description="Loss weight on position (1/m)")
    weight_rotation: float = Field(default=1.0, ge=0, description="Loss weight on rotation (1/rad)")
    weight_linear_velocity: float = Field(default=0.1, ge=0, description="Loss weight on linear velocity")
    weight_angular_velocity: float = Field(default=0.1, ge=0, description="Loss weight on angular velocity")
    position_scale: float = Field(default=0.01, gt=0, description="Metres per network unit for x and dx")
    velocity_scale: float = Field(default=0.01, gt=0, description="m/s per network unit for v and dv")
    grad_explode_threshold: float = Field(default=100.0, gt=0, description="Norm that triggers clipping")
    grad_clip_norm: float = Field(default=10.0, gt=0, description="Norm gradients are clipped to")
    sequence_start: Literal["stored", "ground_truth"] = Field(
        default="stored", description="Start of each training sequence"
    )


class PpoSettings(BaseModel):
    """Clipped-surrogate updates, GAE and the KL-adaptive learning rate."""

    clip: float = Field(default=0.2, gt=0, description="Surrogate and value clip epsilon")
    entropy_coef: float = Field(default=1e-3, ge=0, description="Entropy bonus weight")
    value_coef: float = Field(default=0.5, ge=0, description="Value loss weight")
    gamma: float = Field(default=0.99, ge=0, le=1, description="Discount")
    tau: float = Field(default=0.95, ge=0, le=1, description="GAE mixing parameter")
    minibatch_size: int = Field(default=2 ** 12, ge=1, description="Transitions per minibatch")
    epochs: int = Field(default=4, ge=1, description="Passes over the rollout per update")
    learning_rate: float = Field(default=3e-4, gt=0, description="Initial learning rate")
    kl_target: float = Field(default=0.016, gt=0, description="Target approximate KL")
    lr_factor: float = Field(default=1.5, gt=1, description="Multiplicative LR adaptation factor")
    lr_min: float = Field(default=1e-6, gt=0, description="Learning-rate floor")
    lr_max: float = Field(default=1e-2, gt=0, description="Learning-rate ceiling")
    early_stop_kl_factor: float = Field(default=10.0, gt=1, description="Stop an update past this multiple of kl_target")
    max_grad_norm: float = Field(default=1.0, gt=0, description="Gradient norm clip")
    normalize_advantage: bool = Field(default=True, description="Normalize advantages per minibatch")
    clip_value: bool = Field(default=True, description="Clip value updates with the same epsilon")
    reward_scale: float = Field(default=0.01, gt=0, description="Scale on rewards used for learning")


class TrainerSettings(BaseModel):
    """Run-level settings."""

    mode: Mode = Field(default="ecrl", description="Training mode")
    n_envs: int = Field(default=256, ge=1, description="Parallel environments")
    rollout_length: int = Field(default=32, ge=2, description="Rollout length T")
    rho0: float = Field(default=1.0, ge=0, le=1, description="Initial ground-truth probability")
    rho_delta: float = Field(default=1e-3, ge=0, description="Per-iteration decrease of rho")
    iterations: int = Field(default=2000, ge=0, description="Total iterations")
    seed: int = Field(default=1, description="Run seed")
    checkpoint_interval: int = Field(default=50, ge=1, description="Iterations between checkpoints")
    n_workers: int = Field(default=1, ge=1, description="Environment stepping workers")
    init_from: Optional[str] = Field(default=None, description="Checkpoint providing a frozen policy (estimada)")
    finetune_from: Optional[str] = Field(
        default=None, description="Checkpoint to continue training from, with wrench kicks enabled"
    )
    divergence_termination: Optional[bool] = Field(
        default=None, description="End episodes on estimator divergence; default on for ecrl and estimada"
    )

    @property
    def uses_estimate(self) -> bool:
        return self.mode in ("ecrl", "estimada")


class BenchSettings(BaseModel):
    """Benchmark protocol."""

    n_trials: int = Field(default=50, ge=1, description="Trials per goal")
    consecutive_trials: int = Field(default=10, ge=1, description="Trials of the consecutive test")
    consecutive_cap: int = Field(default=100, ge=1, description="Stop a consecutive trial after this many successes")
    eval_seed: int = Field(default=1_000_003, description="Seed of evaluation randomization, disjoint from training")
    batch_size: int = Field(default=1200, ge=1, description="Trials simulated per vectorized batch")
    min_quantile_samples: int = Field(default=20, ge=1, description="Samples required for quantiles")


class ExperimentConfig(BaseModel):
    """Complete, self-contained run configuration."""

    model_config = ConfigDict(populate_by_name=True)

    version: str = "1.0"
    env: EnvSettings = Field(default_factory=EnvSettings)
    randomization: DomainRandomizationSettings = Field(default_factory=DomainRandomizationSettings)
    object: ObjectSpec = Field(default_factory=ObjectSpec)
    network: NetworkSettings = Field(default_factory=NetworkSettings)
    estimator: EstimatorSettings = Field(default_factory=EstimatorSettings)
    ppo: PpoSettings = Field(default_factory=PpoSettings)
    trainer: TrainerSettings = Field(default_factory=TrainerSettings)
    bench: BenchSettings = Field(default_factory=BenchSettings)

    @model_validator(mode="after")
    def _check_consistency(self) -> "ExperimentConfig":
        if self.ppo.lr_min > self.ppo.lr_max:
            raise ValueError("ppo.lr_min must not exceed ppo.lr_max")
        if self.env.n_dof != 12:
            raise ValueError("env.n_dof must be 12 (4 fingers x 3 joints)")
        return self

    @classmethod
    def desk(cls) -> "ExperimentConfig":
        return cls()

    @classmethod
    def full(cls) -> "ExperimentConfig":
        """Full-scale sizes."""
        return cls(
            network=NetworkSettings(width_scale=1.0),
            estimator=EstimatorSettings(minibatch_sequences=2 ** 10),
            ppo=PpoSettings(minibatch_size=2 ** 15),
            trainer=TrainerSettings(n_envs=4096),
        )


PRESETS = {"desk": ExperimentConfig.desk, "full": ExperimentConfig.full}


# =============================================================================
# RUN AND REPORT RECORDS
# =============================================================================

class RunManifest(BaseModel):
    """Written once before the first training step of a run."""

    config: Dict[str, Any] = Field(description="Full config snapshot")
    config_hash: str = Field(description="Hash of the canonical config dump")
    seed: int
    mode: Mode
    object: str
    version: str = Field(description="Package version and source revision")
    started_at: str = Field(default_factory=lambda: datetime.now().isoformat())
    outputs: Dict[str, str] = Field(default_factory=dict, description="Output paths relative to the run directory")


class GoalResult(BaseModel):
    """Aggregate over the trials of one goal index."""

    goal_index: int
    trials: int = 0
    successes: int = 0
    final_angles: List[float] = Field(default_factory=list)

    @property
    def success_rate(self) -> float:
        return self.successes / self.trials if self.trials else 0.0


class BenchmarkReport(BaseModel):
    """Goal benchmark result; merge() is associative and order-independent."""

    mode: Mode
    object: str
    n_trials: int
    goals: List[GoalResult] = Field(default_factory=list)
    estimator_error_sum: float = 0.0
    estimator_error_sq_sum: float = 0.0
    estimator_error_count: int = 0
    faulted_trials: int = 0
    error_averaging: str = "per-step mean over all evaluation steps"

    @classmethod
    def empty(cls, mode: str, object_name: str, n_trials: int, n_goals: int = 24) -> "BenchmarkReport":
        return cls(
            mode=mode,
            object=object_name,
            n_trials=n_trials,
            goals=[GoalResult(goal_index=i) for i in range(n_goals)],
        )

    def merge(self, other: "BenchmarkReport") -> "BenchmarkReport":
        if (self.mode, self.object, len(self.goals)) != (other.mode, other.object, len(other.goals)):
            raise ValueError("cannot merge reports of different mode, object or goal count")
        goals = [
            GoalResult(
                goal_index=a.goal_index,
                trials=a.trials + b.trials,
                successes=a.successes + b.successes,
                final_angles=sorted(a.final_angles + b.final_angles),
            )
            for a, b in zip(self.goals, other.goals)
        ]
        return BenchmarkReport(
            mode=self.mode,
            object=self.object,
            n_trials=self.n_trials,
            goals=goals,
            estimator_error_sum=self.estimator_error_sum + other.estimator_error_sum,
            estimator_error_sq_sum=self.estimator_error_sq_sum + other.estimator_error_sq_sum,
            estimator_error_count=self.estimator_error_count + other.estimator_error_count,
            faulted_trials=self.faulted_trials + other.faulted_trials,
        )

    @property
    def total_trials(self) -> int:
        return sum(g.trials for g in self.goals)

    @property
    def success_rate(self) -> float:
        """Overall B in percent."""
        total = self.total_trials
        return 100.0 * sum(g.successes for g in self.goals) / total if total else 0.0

    @property
    def estimator_error_mean(self) -> float:
        if self.estimator_error_count == 0:
            return float("nan")
        return self.estimator_error_sum / self.estimator_error_count

    @property
    def estimator_error_std(self) -> float:
        n = self.estimator_error_count
        if n == 0:
            return float("nan")
        mean = self.estimator_error_sum / n
        return math.sqrt(max(self.estimator_error_sq_sum / n - mean * mean, 0.0))

    def final_angles(self) -> List[float]:
        return sorted(a for g in self.goals for a in g.final_angles)

    def summary(self) -> Dict[str, Any]:
        return {
            "mode": self.mode,
            "object": self.object,
            "n_trials": self.n_trials,
            "total_trials": self.total_trials,
            "success_rate": self.success_rate,
            "estimator_error_mean": self.estimator_error_mean,
            "estimator_error_std": self.estimator_error_std,
            "faulted_trials": self.faulted_trials,
            "per_goal_success": [g.success_rate for g in self.goals],
        }


class ConsecutiveReport(BaseModel):
    """Consecutive reorientation counts."""

    mode: Mode
    object: str
    cap: int
    counts: List[int] = Field(default_factory=list)

    @property
    def median(self) -> float:
        if not self.counts:
            return 0.0
        ordered = sorted(self.counts)
        mid = len(ordered) // 2
        if len(ordered) % 2:
            return float(ordered[mid])
        return 0.5 * (ordered[mid - 1] + ordered[mid])

    def counts_text(self) -> str:
        return "[" + ", ".join(str(c) for c in self.counts) + "]"
