"""
Goal-conditioned Gaussian policy and value function trained with PPO.

Both networks consume the same input: the stacked observation, the
estimated position, the estimated rotation relative to the goal (6d), and
the estimated velocities, normalized by running statistics. Actions are
sampled in an unbounded space and squashed by tanh onto the joint range.
"""

import hashlib
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from ecrl import nncore
from ecrl.errors import PolicyFault
from ecrl.manifold import Estimate, relative_rotation, rotation_to_6d
from ecrl.models import ExperimentConfig, PpoSettings
from ecrl.nncore import Adam, DenseSkipNet, GaussianHead, GradTape, Tensor

logger = logging.getLogger(__name__)

_LOG2 = float(np.log(2.0))
_NORMALIZER_CLIP = 5.0


def policy_input_dim(obs_dim: int) -> int:
    return obs_dim + 3 + 6 + 3 + 3


def build_policy_input(obs: np.ndarray, estimate: Estimate, goal: np.ndarray) -> np.ndarray:
    """z (+) x_hat (+) 6d(R_g^-1 R_hat) (+) v_hat (+) w_hat; never the absolute goal."""
    return np.concatenate(
        [
            np.asarray(obs, dtype=np.float64),
            estimate.x,
            rotation_to_6d(relative_rotation(goal, estimate.rot)),
            estimate.v,
            estimate.w,
        ],
        axis=-1,
    )


class RunningMeanStd:
    """Streaming mean/variance with a single writer; frozen at evaluation."""

    def __init__(self, dim: int, epsilon: float = 1e-4):
        self.mean = np.zeros(dim)
        self.var = np.ones(dim)
        self.count = epsilon
        self.frozen = False

    def update(self, batch: np.ndarray) -> None:
        if self.frozen:
            return
        batch = np.asarray(batch, dtype=np.float64).reshape(-1, self.mean.shape[0])
        batch_mean = batch.mean(axis=0)
        batch_var = batch.var(axis=0)
        n = batch.shape[0]
        delta = batch_mean - self.mean
        total = self.count + n
        self.mean = self.mean + delta * n / total
        m2 = self.var * self.count + batch_var * n + delta * delta * self.count * n / total
        self.var = m2 / total
        self.count = total

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return np.clip((x - self.mean) / np.sqrt(self.var + 1e-8), -_NORMALIZER_CLIP, _NORMALIZER_CLIP)

    def state_dict(self, prefix: str = "normalizer") -> Dict[str, np.ndarray]:
        return {
            f"{prefix}.mean": self.mean,
            f"{prefix}.var": self.var,
            f"{prefix}.count": np.asarray(self.count),
        }

    def load_state_dict(self, arrays: Dict[str, np.ndarray], prefix: str = "normalizer") -> None:
        self.mean = np.array(arrays[f"{prefix}.mean"], dtype=np.float64)
        self.var = np.array(arrays[f"{prefix}.var"], dtype=np.float64)
        self.count = float(arrays[f"{prefix}.count"])


def _log_one_minus_tanh_sq(x: np.ndarray) -> np.ndarray:
    """log(1 - tanh(x)^2), stable for large |x|."""
    return 2.0 * (_LOG2 - x - np.logaddexp(0.0, -2.0 * x))


@dataclass
class ActResult:
    action: np.ndarray
    raw_action: np.ndarray
    mean: np.ndarray
    logprob: np.ndarray
    gaussian_logprob: np.ndarray
    value: np.ndarray


class ActorCritic:
    """Policy mean network, state-independent log std, separate value network."""

    def __init__(
        self,
        config: ExperimentConfig,
        rng: np.random.Generator,
        input_dim: Optional[int] = None,
        action_dim: Optional[int] = None,
        hidden: Optional[Sequence[int]] = None,
    ):
        net = config.network
        self.settings = config.ppo
        self.action_dim = config.env.n_dof if action_dim is None else action_dim
        self.action_limit = config.env.joint_limit
        self.input_dim = policy_input_dim(config.env.obs_dim) if input_dim is None else input_dim
        widths = list(hidden) if hidden is not None else nncore.scaled_widths(net.policy_hidden, net.width_scale)
        self.actor = DenseSkipNet(
            self.input_dim, widths, self.action_dim, rng,
            activation=net.activation, output_gain=net.policy_output_gain, name="policy",
        )
        self.critic = DenseSkipNet(
            self.input_dim, widths, 1, rng,
            activation=net.activation, output_gain=net.value_output_gain, name="value",
        )
        self.head = GaussianHead(
            self.action_dim, init_std=float(np.exp(net.init_log_std)),
            log_std_bounds=tuple(net.log_std_bounds), name="policy",
        )
        self.normalizer = RunningMeanStd(self.input_dim)
        self.lr = self.settings.learning_rate
        self.optimizer = Adam(self.parameters(), self.lr, name="policy")

    def parameters(self) -> List[Tensor]:
        return self.actor.parameters() + self.head.parameters() + self.critic.parameters()

    def squash(self, raw: np.ndarray) -> np.ndarray:
        return self.action_limit * np.tanh(raw)

    def act(self, inputs: np.ndarray, rng: Optional[np.random.Generator] = None,
            deterministic: bool = False, check: bool = True) -> ActResult:
        """
        Sample (or take the mean of) the policy on normalized inputs.

        logprob includes the tanh change of variables; gaussian_logprob is
        the density of raw_action under the unsquashed Gaussian.
        """
        mean = self.actor(inputs).data
        value = self.critic(inputs).data[..., 0]
        if deterministic:
            raw = mean.copy()
            gaussian = nncore.logprob(self.head, mean, raw).data
        else:
            if rng is None:
                raise ValueError("stochastic act needs an rng")
            raw, gaussian = nncore.sample_and_logprob(self.head, mean, rng)
        correction = np.sum(np.log(self.action_limit) + _log_one_minus_tanh_sq(raw), axis=-1)
        result = ActResult(
            action=self.squash(raw),
            raw_action=raw,
            mean=mean,
            logprob=gaussian - correction,
            gaussian_logprob=gaussian,
            value=value,
        )
        if check:
            bad = np.flatnonzero(~(np.all(np.isfinite(result.action), axis=-1) & np.isfinite(value)))
            if bad.size:
                raise PolicyFault(f"non-finite policy output for rows {bad.tolist()}")
        return result

    def value(self, inputs: np.ndarray) -> np.ndarray:
        return self.critic(inputs).data[..., 0]

    def state_dict(self) -> Dict[str, np.ndarray]:
        arrays = nncore.named_parameters(self.parameters())
        arrays.update(self.normalizer.state_dict())
        arrays.update(self.optimizer.state_dict("policy_opt"))
        arrays["policy_lr"] = np.asarray(self.lr)
        return arrays

    def load_state_dict(self, arrays: Dict[str, np.ndarray], with_optimizer: bool = True) -> None:
        nncore.load_parameters(self.parameters(), arrays)
        self.normalizer.load_state_dict(arrays)
        if with_optimizer and "policy_opt.t" in arrays:
            self.optimizer.load_state_dict(arrays, "policy_opt")
            self.lr = float(arrays["policy_lr"])

    def parameter_digest(self) -> str:
        digest = hashlib.sha256()
        for p in self.actor.parameters() + self.head.parameters():
            digest.update(np.ascontiguousarray(p.data).tobytes())
        return digest.hexdigest()


# =============================================================================
# ADVANTAGES AND LEARNING RATE
# =============================================================================

def gae(rewards: np.ndarray, values: np.ndarray, dones: np.ndarray, gamma: float, tau: float):
    """
    Generalized advantage estimation over a time-major rollout.

    Args:
        rewards: (T, ...) rewards
        values: (T + 1, ...) value estimates; values[T] bootstraps the tail
        dones: (T, ...) episode ended after step t (zeroes the bootstrap)

    Returns:
        (advantages, returns), both (T, ...)
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    advantages = np.zeros_like(rewards)
    last = np.zeros_like(rewards[0])
    for t in reversed(range(rewards.shape[0])):
        nonterminal = 1.0 - dones[t]
        delta = rewards[t] + gamma * values[t + 1] * nonterminal - values[t]
        last = delta + gamma * tau * nonterminal * last
        advantages[t] = last
    return advantages, advantages + values[:-1]


def adapt_lr(current_lr: float, approx_kl: float, settings: PpoSettings) -> float:
    if approx_kl > 2.0 * settings.kl_target:
        current_lr = current_lr / settings.lr_factor
    elif approx_kl < 0.5 * settings.kl_target:
        current_lr = current_lr * settings.lr_factor
    return float(min(max(current_lr, settings.lr_min), settings.lr_max))


# =============================================================================
# PPO UPDATE
# =============================================================================

@dataclass
class PpoBatch:
    """Flattened on-policy samples of one rollout."""

    inputs: np.ndarray
    raw_actions: np.ndarray
    old_logprob: np.ndarray
    old_mean: np.ndarray
    old_log_std: np.ndarray
    old_values: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def take(self, index: np.ndarray) -> "PpoBatch":
        return PpoBatch(
            inputs=self.inputs[index],
            raw_actions=self.raw_actions[index],
            old_logprob=self.old_logprob[index],
            old_mean=self.old_mean[index],
            old_log_std=self.old_log_std,
            old_values=self.old_values[index],
            advantages=self.advantages[index],
            returns=self.returns[index],
        )


@dataclass
class PpoMetrics:
    policy_loss: float = 0.0
    value_loss: float = 0.0
    entropy: float = 0.0
    approx_kl: float = 0.0
    clip_fraction: float = 0.0
    lr: float = 0.0
    early_stopped: bool = False
    grad_steps: int = 0
    rejected_steps: int = 0
    history: List[float] = field(default_factory=list)


def gaussian_kl(old_mean: np.ndarray, old_log_std: np.ndarray, mean: np.ndarray, log_std: np.ndarray) -> float:
    """Mean over rows of KL(old || new) for diagonal Gaussians."""
    old_var = np.exp(2.0 * old_log_std)
    var = np.exp(2.0 * log_std)
    per_dim = log_std - old_log_std + (old_var + (old_mean - mean) ** 2) / (2.0 * var) - 0.5
    return float(np.mean(np.sum(per_dim, axis=-1)))


def ppo_loss(policy: ActorCritic, batch: PpoBatch, settings: PpoSettings):
    """
    Clipped surrogate + clipped value loss - entropy bonus on one minibatch.

    Returns:
        (loss Tensor, stats dict, new policy mean as ndarray)
    """
    advantages = batch.advantages
    if settings.normalize_advantage and advantages.size > 1:
        advantages = (advantages - advantages.mean()) / (advantages.std() + 1e-8)

    mean = policy.actor(batch.inputs)
    logp = nncore.logprob(policy.head, mean, batch.raw_actions)
    ratio = nncore.exp(logp - batch.old_logprob)
    clipped_ratio = nncore.clip(ratio, 1.0 - settings.clip, 1.0 + settings.clip)
    surrogate = -nncore.minimum(ratio * advantages, clipped_ratio * advantages).mean()

    values = policy.critic(batch.inputs)[..., 0]
    value_error = (values - batch.returns) ** 2
    if settings.clip_value:
        moved = batch.old_values + nncore.clip(values - batch.old_values, -settings.clip, settings.clip)
        value_loss = nncore.maximum(value_error, (moved - batch.returns) ** 2).mean()
    else:
        value_loss = value_error.mean()

    ent = nncore.entropy(policy.head)
    total = surrogate + value_loss * settings.value_coef - ent * settings.entropy_coef
    stats = {
        "policy_loss": float(surrogate.data),
        "value_loss": float(value_loss.data),
        "entropy": float(ent.data),
        "clip_fraction": float(np.mean(np.abs(ratio.data - 1.0) > settings.clip)),
    }
    return total, stats, mean.data


def ppo_update(policy: ActorCritic, batch: PpoBatch, settings: PpoSettings, rng: np.random.Generator) -> PpoMetrics:
    """
    Several epochs of shuffled minibatch updates on one rollout.

    The learning rate adapts after every minibatch from the analytic KL
    between the rollout policy and the current one; the update stops early
    once that KL exceeds early_stop_kl_factor * kl_target.
    """
    n = len(batch)
    metrics = PpoMetrics(lr=policy.lr)
    if n == 0:
        return metrics
    size = min(settings.minibatch_size, n)
    n_minibatches = max(1, n // size)
    sums = {"policy_loss": 0.0, "value_loss": 0.0, "entropy": 0.0, "clip_fraction": 0.0, "approx_kl": 0.0}

    for _ in range(settings.epochs):
        order = rng.permutation(n)
        for index in np.array_split(order, n_minibatches):
            minibatch = batch.take(index)
            policy.optimizer.zero_grad()
            with GradTape() as tape:
                total, stats, new_mean = ppo_loss(policy, minibatch, settings)
            kl = gaussian_kl(
                minibatch.old_mean, minibatch.old_log_std, new_mean, policy.head.clamped_log_std().data
            )
            metrics.history.append(kl)
            if kl > settings.early_stop_kl_factor * settings.kl_target:
                metrics.early_stopped = True
                logger.warning(
                    f"[ppo] approx KL {kl:.4f} exceeds {settings.early_stop_kl_factor:g}x target, stopping update"
                )
                break
            policy.lr = adapt_lr(policy.lr, kl, settings)
            params = policy.parameters()
            nncore.backward(tape, total, params)
            nncore.clip_grad_norm(params, settings.max_grad_norm)
            if not nncore.opt_step(policy.optimizer, nncore.parameter_grads(params), policy.lr):
                metrics.rejected_steps += 1
                continue
            policy.head.project()
            metrics.grad_steps += 1
            for key in ("policy_loss", "value_loss", "entropy", "clip_fraction"):
                sums[key] += stats[key]
            sums["approx_kl"] += kl
        if metrics.early_stopped:
            break

    policy.optimizer.zero_grad()
    steps = max(metrics.grad_steps, 1)
    metrics.policy_loss = sums["policy_loss"] / steps
    metrics.value_loss = sums["value_loss"] / steps
    metrics.entropy = sums["entropy"] / steps
    metrics.clip_fraction = sums["clip_fraction"] / steps
    metrics.approx_kl = sums["approx_kl"] / steps
    metrics.lr = policy.lr
    return metrics


def ppo_batch_from_rollout(buffer: Any, policy: ActorCritic, settings: PpoSettings) -> PpoBatch:
    """GAE on scaled rewards, then flatten the valid (T, N) samples."""
    rewards = buffer.rewards * settings.reward_scale
    dones = buffer.dones | ~buffer.valid
    advantages, returns = gae(rewards, buffer.values, dones, settings.gamma, settings.tau)
    valid = buffer.valid.reshape(-1)
    flat = lambda a: a.reshape((-1,) + a.shape[2:])[valid]  # noqa: E731
    return PpoBatch(
        inputs=flat(buffer.policy_inputs),
        raw_actions=flat(buffer.raw_actions),
        old_logprob=flat(buffer.gaussian_logprob),
        old_mean=flat(buffer.means),
        old_log_std=buffer.log_std,
        old_values=flat(buffer.values[:-1]),
        advantages=flat(advantages),
        returns=flat(returns),
    )
