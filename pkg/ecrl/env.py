"""
TactilePivot: a vectorized, partially observable blind-reorientation simulator.

Four fingers of three joints each hold an object. Joint 0 of every finger
closes onto the object and saturates against it at a contact angle that
depends strongly on the lateral object position, weakly on its height and
on the object's support in the finger direction. Joints 1 and 2 drive the
fingertip along the object surface; their tracking residual rotates the
object through every engaged fingertip. The policy only sees joint
positions and control errors.

With fewer than three engaged fingers the object tips randomly, with fewer
than two it falls. The object's height random-walks with its angular speed
and is nearly invisible in the observation.

Every environment owns two counter-based generators (one for randomization,
one for stepping) keyed by (seed, env id). Each control step consumes a
fixed-size block from the stepping generator whatever the state, so a batch
of environments evolves exactly as the same environments stepped one by one.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from ecrl.errors import SimulationFault
from ecrl.file_utils import write_csv
from ecrl.manifold import (
    IDENTITY,
    geodesic_distance,
    octahedral_group,
    quat_compose,
    quat_exp,
    quat_to_matrix,
    symmetry_distance,
)
from ecrl.models import (
    DomainRandomizationSettings,
    EnvSettings,
    ExperimentConfig,
    ObjectSpec,
    RewardSettings,
)

logger = logging.getLogger(__name__)

N_FINGERS = 4
CLOSE = np.arange(N_FINGERS) * 3
TANGENT_H = CLOSE + 1
TANGENT_V = CLOSE + 2

_UNIFORMS_PER_STEP = 3  # wrench event, wrench magnitude, goal draw
_UNIFORMS_PER_RESET = 2  # grasp choice, goal draw


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def contact_directions(tilt_deg: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Unit contact directions c_i and the tangential frames (t_h, t_v).

    Fingers sit at 90 degree increments about x3, tilted downward.
    """
    tilt = np.deg2rad(tilt_deg)
    azimuth = np.arange(N_FINGERS) * (np.pi / 2.0)
    c = np.stack(
        [np.cos(azimuth) * np.cos(tilt), np.sin(azimuth) * np.cos(tilt), np.full(N_FINGERS, -np.sin(tilt))],
        axis=-1,
    )
    t_h = np.cross(np.array([0.0, 0.0, 1.0]), c)
    t_h /= np.linalg.norm(t_h, axis=-1, keepdims=True)
    t_v = np.cross(c, t_h)
    return c, t_h, t_v


def nominal_command(settings: EnvSettings) -> np.ndarray:
    """Joint command that holds the nominal grasp; actions are offsets from it."""
    q = np.zeros(settings.n_dof)
    q[CLOSE] = settings.contact_angle + settings.grasp_press
    return q


# =============================================================================
# STATE TYPES
# =============================================================================

@dataclass
class SystemState:
    """Ground-truth state of N environments; leading axis is the env index."""

    x: np.ndarray
    rot: np.ndarray
    v: np.ndarray
    w: np.ndarray
    q: np.ndarray
    q_d_filt: np.ndarray
    q_d: np.ndarray
    goal: np.ndarray
    goal_index: np.ndarray
    t_in_goal: np.ndarray
    episode_t: np.ndarray
    theta_prev: np.ndarray

    @classmethod
    def empty(cls, n: int, n_dof: int = 12) -> "SystemState":
        rot = np.zeros((n, 4))
        rot[:, 0] = 1.0
        return cls(
            x=np.zeros((n, 3)),
            rot=rot,
            v=np.zeros((n, 3)),
            w=np.zeros((n, 3)),
            q=np.zeros((n, n_dof)),
            q_d_filt=np.zeros((n, n_dof)),
            q_d=np.zeros((n, n_dof)),
            goal=rot.copy(),
            goal_index=np.zeros(n, dtype=np.int64),
            t_in_goal=np.zeros(n, dtype=np.int64),
            episode_t=np.zeros(n, dtype=np.int64),
            theta_prev=np.zeros(n),
        )

    def __len__(self) -> int:
        return self.x.shape[0]

    def copy(self) -> "SystemState":
        return SystemState(**{f.name: getattr(self, f.name).copy() for f in fields(self)})

    def take(self, index: Any) -> "SystemState":
        return SystemState(**{f.name: getattr(self, f.name)[index].copy() for f in fields(self)})

    def put(self, index: Any, other: "SystemState") -> None:
        for f in fields(self):
            getattr(self, f.name)[index] = getattr(other, f.name)

    def is_finite(self) -> np.ndarray:
        ok = np.ones(len(self), dtype=bool)
        for name in ("x", "rot", "v", "w", "q", "q_d_filt"):
            ok &= np.all(np.isfinite(getattr(self, name)), axis=-1)
        return ok

    def to_arrays(self, prefix: str) -> Dict[str, np.ndarray]:
        return {f"{prefix}.{f.name}": getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_arrays(cls, arrays: Dict[str, np.ndarray], prefix: str) -> "SystemState":
        return cls(**{f.name: np.array(arrays[f"{prefix}.{f.name}"]) for f in fields(cls)})


@dataclass
class DomainRandomization:
    """Per-environment parameters, sampled once per environment instance."""

    tip_scale: np.ndarray
    obs_noise: np.ndarray
    obs_bias: np.ndarray
    size_scale: np.ndarray
    mass_scale: np.ndarray
    gain: np.ndarray
    wrench_enabled: bool
    wrench_probability: float
    wrench_max: float

    @classmethod
    def sample(
        cls, settings: DomainRandomizationSettings, generators: Sequence[np.random.Generator], n_dof: int = 12
    ) -> "DomainRandomization":
        n = len(generators)
        if not settings.enabled:
            return cls.nominal(n, n_dof, settings)
        draws = np.stack([g.random(5 + 2 * n_dof) for g in generators])

        def _span(column: int, bounds: Tuple[float, float]) -> np.ndarray:
            low, high = bounds
            return low + (high - low) * draws[:, column]

        return cls(
            tip_scale=_span(0, settings.tip_noise_scale),
            obs_noise=_span(1, settings.obs_noise),
            size_scale=_span(2, settings.size_scale),
            mass_scale=_span(3, settings.mass_scale),
            gain=_span(4, (1.0 - settings.gain_jitter, 1.0 + settings.gain_jitter)),
            obs_bias=settings.obs_bias * (2.0 * draws[:, 5:] - 1.0),
            wrench_enabled=settings.wrench_enabled,
            wrench_probability=settings.wrench_probability,
            wrench_max=settings.wrench_max,
        )

    @classmethod
    def nominal(
        cls, n: int, n_dof: int = 12, settings: Optional[DomainRandomizationSettings] = None
    ) -> "DomainRandomization":
        """Every parameter at its nominal value; wrench kicks follow settings (off by default)."""
        settings = settings or DomainRandomizationSettings.noiseless()
        return cls(
            tip_scale=np.ones(n),
            obs_noise=np.zeros(n),
            obs_bias=np.zeros((n, 2 * n_dof)),
            size_scale=np.ones(n),
            mass_scale=np.ones(n),
            gain=np.ones(n),
            wrench_enabled=settings.wrench_enabled,
            wrench_probability=settings.wrench_probability,
            wrench_max=settings.wrench_max,
        )

    def take(self, index: Any) -> "DomainRandomization":
        return DomainRandomization(
            tip_scale=self.tip_scale[index],
            obs_noise=self.obs_noise[index],
            obs_bias=self.obs_bias[index],
            size_scale=self.size_scale[index],
            mass_scale=self.mass_scale[index],
            gain=self.gain[index],
            wrench_enabled=self.wrench_enabled,
            wrench_probability=self.wrench_probability,
            wrench_max=self.wrench_max,
        )


@dataclass
class TerminationFlags:
    """Per-environment termination flags of one control step."""

    dropped: np.ndarray
    goal_timeout: np.ndarray
    goal_success: np.ndarray
    episode_timeout: np.ndarray
    estimator_divergence: np.ndarray
    fault: np.ndarray

    @classmethod
    def none(cls, n: int) -> "TerminationFlags":
        return cls(**{f.name: np.zeros(n, dtype=bool) for f in fields(cls)})

    @property
    def done(self) -> np.ndarray:
        return (
            self.dropped
            | self.goal_timeout
            | self.episode_timeout
            | self.estimator_divergence
            | self.fault
        )

    def take(self, index: Any) -> "TerminationFlags":
        return TerminationFlags(**{f.name: getattr(self, f.name)[index] for f in fields(self)})

    def as_row(self, env_id: int) -> Dict[str, bool]:
        return {f.name: bool(getattr(self, f.name)[env_id]) for f in fields(self)}


# =============================================================================
# PURE FUNCTIONS
# =============================================================================

def sample_goal(rng: np.random.Generator, current_goal: Optional[int] = None) -> int:
    """Uniform goal index over the octahedral group, never the current one."""
    if current_goal is None:
        return int(rng.integers(24))
    index = int(rng.integers(23))
    return index + 1 if index >= current_goal else index


def _goal_from_uniform(u: np.ndarray, current: Optional[np.ndarray]) -> np.ndarray:
    if current is None:
        return np.minimum((u * 24).astype(np.int64), 23)
    index = np.minimum((u * 23).astype(np.int64), 22)
    return np.where(index >= current, index + 1, index)


def goal_angle(rot: np.ndarray, goal: np.ndarray, symmetries: Optional[np.ndarray] = None) -> np.ndarray:
    """d(R, R_g), optionally modulo the object's symmetry group."""
    if symmetries is None:
        return geodesic_distance(rot, goal)
    return symmetry_distance(goal, rot, symmetries)


def compute_reward(
    theta_prev: np.ndarray,
    theta: np.ndarray,
    x: np.ndarray,
    q: np.ndarray,
    x_ref: np.ndarray,
    q_ref: np.ndarray,
    settings: RewardSettings,
) -> np.ndarray:
    """
    r = l_th * min(theta_prev - theta, th_clip)
        - l_x' * (l_x * min(|x - x_ref|, x_clip))^4
        - l_q * mean((q - q_ref)^4)
    """
    rotation = settings.lambda_theta * np.minimum(theta_prev - theta, settings.theta_clip)
    offset = np.minimum(np.linalg.norm(x - x_ref, axis=-1), settings.x_clip)
    position = settings.lambda_x_outer * (settings.lambda_x * offset) ** 4
    joints = settings.lambda_q * np.mean((q - q_ref) ** 4, axis=-1)
    return rotation - position - joints


def reward(
    state_prev: SystemState,
    state: SystemState,
    goal: np.ndarray,
    x_ref: np.ndarray,
    q_ref: np.ndarray,
    settings: RewardSettings,
    symmetries: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Reward of the transition state_prev -> state under goal."""
    return compute_reward(
        goal_angle(state_prev.rot, goal, symmetries),
        goal_angle(state.rot, goal, symmetries),
        state.x,
        state.q,
        x_ref,
        q_ref,
        settings,
    )


def check_termination(
    state: SystemState,
    estimate: Optional[Any],
    settings: EnvSettings,
    mode: str = "train",
    divergence: bool = True,
    symmetries: Optional[np.ndarray] = None,
) -> TerminationFlags:
    """
    Flags after a control step. Goal success is judged only at the end of
    each goal interval; estimator divergence only in train mode.
    """
    n = len(state)
    theta = goal_angle(state.rot, state.goal, symmetries)
    interval_end = state.t_in_goal >= settings.goal_steps
    success = interval_end & (theta < settings.success_threshold)
    flags = TerminationFlags.none(n)
    flags.goal_success = success
    flags.goal_timeout = interval_end & ~success
    flags.dropped = np.linalg.norm(state.x, axis=-1) > settings.drop_distance
    max_steps = settings.max_episode_steps
    if max_steps is not None:
        flags.episode_timeout = state.episode_t >= max_steps
    if mode == "train" and divergence and estimate is not None:
        flags.estimator_divergence = (
            geodesic_distance(np.asarray(estimate.rot), state.rot) > settings.divergence_threshold
        )
    return flags


def make_grasp_set(settings: EnvSettings, obj: ObjectSpec) -> Tuple[np.ndarray, np.ndarray]:
    """
    Initial grasp poses: index 0 is the nominal pose, the rest are jittered.

    The nominal pose centres the object's geometry between the fingers, so
    its position equals the centre-of-mass offset.
    """
    rng = np.random.default_rng(np.random.SeedSequence([settings.grasp_seed, 7]))
    nominal_x = np.asarray(obj.com_offset, dtype=np.float64)
    positions = np.tile(nominal_x, (settings.n_grasps, 1))
    rotations = np.tile(IDENTITY, (settings.n_grasps, 1))
    for k in range(1, settings.n_grasps):
        positions[k] += settings.grasp_position_jitter * rng.uniform(-1.0, 1.0, 3)
        rotations[k] = quat_exp(settings.grasp_rotation_jitter * rng.uniform(-1.0, 1.0, 3))
    return positions, rotations


# =============================================================================
# SIMULATOR
# =============================================================================

class TactilePivot:
    """
    N independent TactilePivot environments stepped together.

    Environments never reset themselves: callers reset the rows whose
    flags say done.
    """

    def __init__(
        self,
        config: ExperimentConfig,
        n_envs: int,
        seed: int,
        env_offset: int = 0,
        n_workers: int = 1,
        strict: bool = False,
    ):
        """
        Args:
            config: Experiment configuration (env, randomization and object sections are used)
            n_envs: Number of environments
            seed: Seed of every per-environment stream
            env_offset: Global id of the first environment
            n_workers: Threads used to step disjoint environment slices
            strict: Raise SimulationFault on non-finite state instead of flagging it
        """
        self.config = config
        self.settings = config.env
        self.object = config.object
        self.n_envs = n_envs
        self.seed = seed
        self.env_offset = env_offset
        self.n_workers = max(1, n_workers)
        self.strict = strict

        s = self.settings
        self.substeps = s.substeps
        self.dt = s.substep_dt
        self.contact, self.tangent_h, self.tangent_v = contact_directions(s.contact_tilt_deg)
        self.half_extents = np.asarray(self.object.half_extents, dtype=np.float64)
        self.com = np.asarray(self.object.com_offset, dtype=np.float64)
        self.attenuation = np.array([1.0, 1.0, s.vertical_attenuation])
        self.support_ref = self._support(np.tile(IDENTITY, (1, 1)), np.ones(1))[0]
        self.q_nominal = nominal_command(s)

        self.goals = octahedral_group()
        self.symmetries = self.goals[self.object.symmetry_indices()]
        self.metric_symmetries = self.symmetries if s.success_metric == "symmetry_quotient" else None

        self.grasp_x, self.grasp_rot = make_grasp_set(s, self.object)
        self.x_ref = self.grasp_x.mean(axis=0)
        nominal_q = self._steady_joints(self.grasp_x, self.grasp_rot, np.ones(len(self.grasp_x)))
        self.q_ref = nominal_q.mean(axis=0)

        self.normals_per_step = self.substeps * (2 * s.n_dof + 3 + 1) + 3
        self.step_rngs = [self._generator(env_offset + i, 0) for i in range(n_envs)]
        self.dr = DomainRandomization.sample(
            config.randomization, [self._generator(env_offset + i, 1) for i in range(n_envs)], s.n_dof
        )
        self.state = SystemState.empty(n_envs, s.n_dof)
        self.last_obs = np.zeros((n_envs, s.obs_dim))
        self.goal_override: Optional[np.ndarray] = None

    def _generator(self, env_id: int, stream: int) -> np.random.Generator:
        return np.random.Generator(np.random.Philox(np.random.SeedSequence([self.seed, env_id, stream])))

    # ------------------------------------------------------------------
    # Contact geometry
    # ------------------------------------------------------------------

    def _support(self, rot: np.ndarray, scale: np.ndarray) -> np.ndarray:
        """Support of the object surface in each contact direction, relative to the centre of mass."""
        m = quat_to_matrix(rot)
        body_dirs = np.einsum("nji,fj->nfi", m, self.contact)
        if self.object.shape == "ellipsoid":
            extent = np.sqrt(np.sum((body_dirs * self.half_extents) ** 2, axis=-1))
        else:
            extent = np.sum(np.abs(body_dirs) * self.half_extents, axis=-1)
        com_world = np.einsum("nij,j->ni", m, self.com)
        return scale[:, None] * extent - com_world @ self.contact.T

    def contact_angles(self, x: np.ndarray, rot: np.ndarray, scale: np.ndarray) -> np.ndarray:
        s = self.settings
        support = self._support(rot, scale) - self.support_ref
        lateral = (x * self.attenuation) @ self.contact.T
        return s.contact_angle - s.support_sensitivity * support - s.position_sensitivity * lateral

    def _steady_joints(self, x: np.ndarray, rot: np.ndarray, scale: np.ndarray) -> np.ndarray:
        """Joint positions that hold still under the nominal command."""
        theta_c = self.contact_angles(x, rot, scale)
        q = np.tile(self.q_nominal, (x.shape[0], 1))
        q[:, CLOSE] = theta_c + self.settings.contact_compliance * (q[:, CLOSE] - theta_c)
        return q

    def angle_to_goal(self, rot: np.ndarray, goal: np.ndarray) -> np.ndarray:
        return goal_angle(rot, goal, self.metric_symmetries)

    # ------------------------------------------------------------------
    # Reset and goals
    # ------------------------------------------------------------------

    def reset(self, env_ids: Optional[Sequence[int]] = None) -> Tuple[SystemState, np.ndarray]:
        """
        Reset the given environments (all when None) to a grasp from the
        initial-grasp set with a fresh goal.
        """
        ids = np.arange(self.n_envs) if env_ids is None else np.asarray(env_ids, dtype=np.int64)
        if ids.size == 0:
            return self.state, self.last_obs
        frame_normals = self.substeps * 2 * self.settings.n_dof
        uniforms = np.stack([self.step_rngs[i].random(_UNIFORMS_PER_RESET) for i in ids])
        normals = np.stack([self.step_rngs[i].standard_normal(frame_normals) for i in ids])

        grasp = np.minimum((uniforms[:, 0] * len(self.grasp_x)).astype(np.int64), len(self.grasp_x) - 1)
        dr = self.dr.take(ids)
        x = self.grasp_x[grasp].copy()
        rot = self.grasp_rot[grasp].copy()
        q = self._steady_joints(x, rot, dr.size_scale)
        goal_index = _goal_from_uniform(uniforms[:, 1], None)
        if self.goal_override is not None:
            goal_index = self.goal_override[ids].copy()

        fresh = SystemState.empty(ids.size, self.settings.n_dof)
        fresh.x, fresh.rot, fresh.q = x, rot, q
        fresh.q_d_filt = q.copy()
        fresh.q_d = np.tile(self.q_nominal, (ids.size, 1))
        fresh.goal_index = goal_index
        fresh.goal = self.goals[goal_index]
        fresh.theta_prev = self.angle_to_goal(rot, fresh.goal)
        self.state.put(ids, fresh)

        frame = np.concatenate([q, q - fresh.q_d], axis=-1)
        frames = np.repeat(frame[:, None, :], self.substeps, axis=1)
        self.last_obs[ids] = self._observe(frames, normals.reshape(frames.shape), dr)
        return self.state, self.last_obs

    def set_goal(self, env_ids: Sequence[int], goal_index: Any) -> None:
        """Set externally scheduled goals and restart their goal intervals."""
        ids = np.asarray(env_ids, dtype=np.int64)
        index = np.broadcast_to(np.asarray(goal_index, dtype=np.int64), ids.shape)
        self.state.goal_index[ids] = index
        self.state.goal[ids] = self.goals[index]
        self.state.t_in_goal[ids] = 0
        self.state.theta_prev[ids] = self.angle_to_goal(self.state.rot[ids], self.state.goal[ids])

    def pin_goals(self, goal_index: Optional[np.ndarray]) -> None:
        """Make resets use these goal indices instead of sampling (None restores sampling)."""
        self.goal_override = None if goal_index is None else np.asarray(goal_index, dtype=np.int64)

    # ------------------------------------------------------------------
    # Stepping
    # ------------------------------------------------------------------

    def command(self, action: np.ndarray) -> np.ndarray:
        limit = self.settings.joint_limit
        return np.clip(self.q_nominal + np.clip(action, -limit, limit), -limit, limit)

    def step(self, action: np.ndarray) -> Tuple[SystemState, np.ndarray, np.ndarray, TerminationFlags]:
        """
        Advance every environment by one control step.

        Returns:
            (state, observation, reward, flags); state and observation are the
            simulator's live arrays.
        """
        action = np.asarray(action, dtype=np.float64)
        if action.shape != (self.n_envs, self.settings.n_dof):
            raise ValueError(f"action shape {action.shape}, expected {(self.n_envs, self.settings.n_dof)}")
        bad = np.flatnonzero(~np.all(np.isfinite(action), axis=-1))
        if bad.size:
            raise SimulationFault(bad + self.env_offset, "non-finite action")
        q_d = self.command(action)
        rewards = np.zeros(self.n_envs)
        flags = TerminationFlags.none(self.n_envs)

        chunks = [c for c in np.array_split(np.arange(self.n_envs), self.n_workers) if c.size]
        if len(chunks) == 1:
            self._step_slice(chunks[0], q_d, rewards, flags)
        else:
            with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
                list(pool.map(lambda c: self._step_slice(c, q_d, rewards, flags), chunks))

        faulted = np.flatnonzero(flags.fault)
        if faulted.size:
            if self.strict:
                raise SimulationFault(faulted + self.env_offset)
            for i in faulted:
                logger.warning(f"[env {int(i) + self.env_offset}] non-finite state, flagged for reset")
        return self.state, self.last_obs, rewards, flags

    def _draw_step_block(self, ids: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        normals = np.stack([self.step_rngs[i].standard_normal(self.normals_per_step) for i in ids])
        uniforms = np.stack([self.step_rngs[i].random(_UNIFORMS_PER_STEP) for i in ids])
        return normals, uniforms

    def _step_slice(self, ids: np.ndarray, q_d: np.ndarray, rewards: np.ndarray, flags: TerminationFlags) -> None:
        normals, uniforms = self._draw_step_block(ids)
        before = self.state.take(ids)
        dr = self.dr.take(ids)
        after, frames = self._advance(before, q_d[ids], normals, uniforms, dr, noisy=True)
        after.episode_t = before.episode_t + 1
        after.t_in_goal = before.t_in_goal + 1

        ok = after.is_finite()
        if not np.all(ok):
            after.put(~ok, before.take(~ok))
            frames[~ok] = 0.0

        local = check_termination(after, None, self.settings, mode="eval", symmetries=self.metric_symmetries)
        local.fault = ~ok
        theta = self.angle_to_goal(after.rot, after.goal)
        r = compute_reward(after.theta_prev, theta, after.x, after.q, self.x_ref, self.q_ref, self.settings.reward)
        after.theta_prev = theta

        success = np.flatnonzero(local.goal_success)
        if success.size:
            new_index = _goal_from_uniform(uniforms[success, 2], after.goal_index[success])
            after.goal_index[success] = new_index
            after.goal[success] = self.goals[new_index]
            after.t_in_goal[success] = 0
            after.theta_prev[success] = self.angle_to_goal(after.rot[success], after.goal[success])

        obs = self._observe(frames, normals[:, : frames[0].size].reshape(frames.shape), dr)
        obs[~ok] = 0.0
        self.state.put(ids, after)
        self.last_obs[ids] = obs
        rewards[ids] = np.where(ok, r, 0.0)
        for f in fields(flags):
            getattr(flags, f.name)[ids] = getattr(local, f.name)

    def _advance(
        self,
        state: SystemState,
        q_d: np.ndarray,
        normals: np.ndarray,
        uniforms: np.ndarray,
        dr: DomainRandomization,
        noisy: bool,
    ) -> Tuple[SystemState, np.ndarray]:
        """Integrate the substeps of one control step for a slice of environments."""
        s = self.settings
        n = len(state)
        dt = self.dt
        n_frame = 2 * s.n_dof
        tip_offset = self.substeps * n_frame
        walk_offset = tip_offset + 3 * self.substeps
        kick_offset = walk_offset + self.substeps

        x, rot = state.x.copy(), state.rot.copy()
        q, q_filt = state.q.copy(), state.q_d_filt.copy()
        v, w = np.zeros((n, 3)), np.zeros((n, 3))

        kick = np.zeros((n, 3))
        if noisy and dr.wrench_enabled:
            event = uniforms[:, 0] < dr.wrench_probability
            direction = normals[:, kick_offset : kick_offset + 3]
            direction = direction / np.maximum(np.linalg.norm(direction, axis=-1, keepdims=True), 1e-12)
            kick = np.where(event[:, None], direction * (uniforms[:, 1] * dr.wrench_max)[:, None], 0.0)

        tip_sigma = s.tip_noise * dr.tip_scale * dr.mass_scale * self.object.tipping_susceptibility
        walk_sigma = s.vertical_drift * self.object.drift_susceptibility
        frames = np.empty((n, self.substeps, n_frame))

        for k in range(self.substeps):
            q_filt = q_filt + s.filter_alpha * (q_d - q_filt)
            theta_c = self.contact_angles(x, rot, dr.size_scale)
            target = q_filt.copy()
            closing = target[:, CLOSE]
            target[:, CLOSE] = np.where(
                closing > theta_c, theta_c + s.contact_compliance * (closing - theta_c), closing
            )
            q = np.clip(
                q + np.clip(target - q, -s.max_joint_step, s.max_joint_step), -s.joint_limit, s.joint_limit
            )

            penetration = q[:, CLOSE] - theta_c
            reach = _sigmoid((s.vertical_reach - np.abs(x[:, 2])) / s.reach_width)
            g = _sigmoid(penetration / s.engagement_width) * reach[:, None]
            engaged = np.sum(g > 0.5, axis=-1)

            residual = q_d - q
            push = (
                residual[:, TANGENT_H, None] * self.tangent_h + residual[:, TANGENT_V, None] * self.tangent_v
            )
            w = s.rotation_gain * dr.gain[:, None] * np.sum(g[..., None] * np.cross(self.contact, push), axis=1)
            if noisy:
                tipping = (engaged < 3)[:, None]
                tip = normals[:, tip_offset + 3 * k : tip_offset + 3 * k + 3]
                w = w + np.where(tipping, tip_sigma[:, None] * tip, 0.0)
            w = w + kick

            weight = np.maximum(g.sum(axis=-1, keepdims=True), 1e-9)
            mean_pen = np.sum(g * penetration, axis=-1, keepdims=True) / weight
            v = np.zeros((n, 3))
            v[:, :2] = s.centering_gain * np.sum(
                (g * (penetration - mean_pen))[..., None] * (-self.contact[:, :2]), axis=1
            )
            v[:, 2] = np.where(engaged < 2, -s.drop_speed, 0.0)
            if noisy:
                dz = walk_sigma * np.linalg.norm(w, axis=-1) * dt * normals[:, walk_offset + k]
                v[:, 2] += dz / dt

            x = x + v * dt
            rot = quat_compose(quat_exp(w * dt), rot)
            frames[:, k, : s.n_dof] = q
            frames[:, k, s.n_dof :] = q - q_d

        after = state.copy()
        after.x, after.rot, after.v, after.w = x, rot, v, w
        after.q, after.q_d_filt, after.q_d = q, q_filt, q_d.copy()
        return after, frames

    def _observe(self, frames: np.ndarray, normals: np.ndarray, dr: DomainRandomization) -> np.ndarray:
        noisy = frames + dr.obs_noise[:, None, None] * normals + dr.obs_bias[:, None, :]
        return noisy.reshape(frames.shape[0], -1)

    def observe_noise_free(self, state: SystemState, action: np.ndarray) -> np.ndarray:
        """Observation after one control step from state with every noise source off."""
        n = len(state)
        q_d = self.command(np.broadcast_to(action, (n, self.settings.n_dof)))
        dr = DomainRandomization.nominal(n, self.settings.n_dof)
        zeros_n = np.zeros((n, self.normals_per_step))
        ones_u = np.ones((n, _UNIFORMS_PER_STEP))
        _, frames = self._advance(state, q_d, zeros_n, ones_u, dr, noisy=False)
        return frames.reshape(n, -1)

    # ------------------------------------------------------------------
    # Checkpointing
    # ------------------------------------------------------------------

    def state_dict(self) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
        """Arrays and JSON-able meta that restore the simulator exactly."""
        arrays = self.state.to_arrays("env.state")
        arrays["env.last_obs"] = self.last_obs
        rng_states = [rng_state_to_json(g.bit_generator.state) for g in self.step_rngs]
        return arrays, {"env_rng": rng_states, "env_offset": self.env_offset, "n_envs": self.n_envs}

    def load_state_dict(self, arrays: Dict[str, np.ndarray], meta: Dict[str, Any]) -> None:
        if int(meta["n_envs"]) != self.n_envs:
            raise ValueError(f"checkpoint holds {meta['n_envs']} environments, simulator has {self.n_envs}")
        self.state = SystemState.from_arrays(arrays, "env.state")
        self.last_obs = np.array(arrays["env.last_obs"])
        for g, saved in zip(self.step_rngs, meta["env_rng"]):
            g.bit_generator.state = rng_state_from_json(saved)


def rng_state_to_json(value: Any) -> Any:
    if isinstance(value, dict):
        return {k: rng_state_to_json(v) for k, v in value.items()}
    if isinstance(value, np.ndarray):
        return {"__ndarray__": [int(v) for v in value.ravel()], "dtype": str(value.dtype)}
    if isinstance(value, np.integer):
        return int(value)
    return value


def rng_state_from_json(value: Any) -> Any:
    if isinstance(value, dict):
        if "__ndarray__" in value:
            return np.array(value["__ndarray__"], dtype=value["dtype"])
        return {k: rng_state_from_json(v) for k, v in value.items()}
    return value


# =============================================================================
# TRAJECTORY DUMPS
# =============================================================================

TRAJECTORY_COLUMNS = [
    "run",
    "t",
    "x1",
    "x2",
    "x3",
    "x3_est",
    "qw",
    "qx",
    "qy",
    "qz",
    "goal_index",
    "angle_to_goal",
    "reward",
    "dropped",
    "goal_timeout",
    "goal_success",
    "episode_timeout",
]


class TrajectoryRecorder:
    """Collects one CSV row per control step and environment."""

    def __init__(self, dt: float):
        self.dt = dt
        self.rows: List[Dict[str, Any]] = []

    def record(
        self,
        run_ids: Sequence[int],
        step: int,
        state: SystemState,
        rewards: np.ndarray,
        flags: TerminationFlags,
        angles: np.ndarray,
        estimate_x: Optional[np.ndarray] = None,
        active: Optional[np.ndarray] = None,
    ) -> None:
        for row, run in enumerate(run_ids):
            if active is not None and not active[row]:
                continue
            self.rows.append(
                {
                    "run": int(run),
                    "t": step * self.dt,
                    "x1": state.x[row, 0],
                    "x2": state.x[row, 1],
                    "x3": state.x[row, 2],
                    "x3_est": "" if estimate_x is None else estimate_x[row, 2],
                    "qw": state.rot[row, 0],
                    "qx": state.rot[row, 1],
                    "qy": state.rot[row, 2],
                    "qz": state.rot[row, 3],
                    "goal_index": int(state.goal_index[row]),
                    "angle_to_goal": angles[row],
                    "reward": rewards[row],
                    "dropped": flags.dropped[row],
                    "goal_timeout": flags.goal_timeout[row],
                    "goal_success": flags.goal_success[row],
                    "episode_timeout": flags.episode_timeout[row],
                }
            )

    def write(self, filepath: Path) -> Path:
        write_csv(filepath, TRAJECTORY_COLUMNS, self.rows)
        logger.info(f"Wrote {len(self.rows)} trajectory rows to {filepath}")
        return Path(filepath)
