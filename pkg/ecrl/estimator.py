"""
Recursive on-manifold state estimator.

    s_hat_t = f(z_t, u_{t-1}, s_hat_{t-1}) = s_hat_{t-1} [+] net(z_t, u_{t-1}, s_hat_{t-1})

The network sees the stacked observation, the previous command and the
previous estimate (rotation as 6d columns) and emits a state increment that
is applied with boxplus. The latent part is updated in tanh space so it
stays bounded however long the recursion runs.

Training unrolls the recursion over rollout sequences and backpropagates
through the whole sequence (truncated at the sequence start).
"""

import logging
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from ecrl import nncore
from ecrl.errors import EstimatorFault
from ecrl.manifold import (
    Estimate,
    StateIncrement,
    boxplus_t,
    canonicalize,
    geodesic_distance,
    geodesic_sq_t,
    rotation_to_6d_t,
)
from ecrl.models import EstimatorSettings, ExperimentConfig
from ecrl.nncore import Adam, DenseSkipNet, GradTape, Tensor, lift

logger = logging.getLogger(__name__)

_LATENT_BOUND = 1.0 - 1e-6
_LOSS_EPS = 1e-12


def input_dim(obs_dim: int, action_dim: int, latent_dim: int) -> int:
    return obs_dim + action_dim + 3 + 6 + 3 + 3 + latent_dim


def init_estimate(state: Any, latent_dim: int) -> Estimate:
    """Estimate of a known state: pose copied, velocities and latent zero."""
    x = np.array(state.x, dtype=np.float64, copy=True)
    n = x.shape[0]
    return Estimate(
        x=x,
        rot=canonicalize(np.array(state.rot, dtype=np.float64, copy=True)),
        v=np.zeros((n, 3)),
        w=np.zeros((n, 3)),
        latent=np.zeros((n, latent_dim)),
    )


def truth_estimate(state: Any, latent: np.ndarray) -> Estimate:
    """Ground-truth state in estimate form, keeping the given latent."""
    return Estimate(
        x=np.array(state.x, dtype=np.float64, copy=True),
        rot=canonicalize(np.array(state.rot, dtype=np.float64, copy=True)),
        v=np.array(state.v, dtype=np.float64, copy=True),
        w=np.array(state.w, dtype=np.float64, copy=True),
        latent=np.array(latent, dtype=np.float64, copy=True),
    )


@dataclass
class LossBreakdown:
    total: float
    rmse_pos: float
    rmse_rot: float
    rmse_vel: float
    rmse_ang_vel: float


def loss(pred: Estimate, truth: Any, settings: EstimatorSettings, mask: Optional[np.ndarray] = None) -> LossBreakdown:
    """
    Weighted rmse between an estimate and the true state.

    Each component is a root mean square over all (masked) rows; rotation
    uses the geodesic angle.
    """
    weights = np.ones(np.shape(pred.x)[:-1]) if mask is None else np.asarray(mask, dtype=np.float64)
    count = max(float(weights.sum()), 1.0)

    def _rms(sq: np.ndarray) -> float:
        return float(np.sqrt(np.sum(weights * sq) / count))

    rmse_pos = _rms(np.sum((np.asarray(pred.x) - truth.x) ** 2, axis=-1))
    rmse_rot = _rms(geodesic_distance(np.asarray(pred.rot), truth.rot) ** 2)
    rmse_vel = _rms(np.sum((np.asarray(pred.v) - truth.v) ** 2, axis=-1))
    rmse_ang_vel = _rms(np.sum((np.asarray(pred.w) - truth.w) ** 2, axis=-1))
    total = (
        settings.weight_position * rmse_pos
        + settings.weight_rotation * rmse_rot
        + settings.weight_linear_velocity * rmse_vel
        + settings.weight_angular_velocity * rmse_ang_vel
    )
    return LossBreakdown(total, rmse_pos, rmse_rot, rmse_vel, rmse_ang_vel)


@dataclass
class EstimatorBatch:
    """
    Sequences for truncated BPTT, time-major (T, B).

    At index t the estimator consumes obs[t] and action[t] and is scored
    against the true state truth_*[t]. Where start[t] is set the carried
    estimate is replaced by stored[t] (episode start); stored[0] is the
    detached sequence start.
    """

    obs: np.ndarray
    action: np.ndarray
    stored: Estimate
    start: np.ndarray
    truth_x: np.ndarray
    truth_rot: np.ndarray
    truth_v: np.ndarray
    truth_w: np.ndarray
    mask: np.ndarray

    @property
    def length(self) -> int:
        return self.obs.shape[0]

    @property
    def n_sequences(self) -> int:
        return self.obs.shape[1]

    @classmethod
    def from_buffer(cls, buffer: Any, sequence_start: str = "stored") -> "EstimatorBatch":
        stored = Estimate(
            x=buffer.est_x.copy(),
            rot=buffer.est_rot.copy(),
            v=buffer.est_v.copy(),
            w=buffer.est_w.copy(),
            latent=buffer.est_latent.copy(),
        )
        if sequence_start == "ground_truth":
            stored.x[0] = buffer.truth_x[0]
            stored.rot[0] = buffer.truth_rot[0]
            stored.v[0] = buffer.truth_v[0]
            stored.w[0] = buffer.truth_w[0]
            stored.latent[0] = 0.0
        return cls(
            obs=buffer.next_obs,
            action=buffer.actions,
            stored=stored,
            start=buffer.starts,
            truth_x=buffer.next_x,
            truth_rot=buffer.next_rot,
            truth_v=buffer.next_v,
            truth_w=buffer.next_w,
            mask=buffer.valid.astype(np.float64),
        )

    def select(self, columns: np.ndarray) -> "EstimatorBatch":
        return EstimatorBatch(
            obs=self.obs[:, columns],
            action=self.action[:, columns],
            stored=Estimate(
                x=self.stored.x[:, columns],
                rot=self.stored.rot[:, columns],
                v=self.stored.v[:, columns],
                w=self.stored.w[:, columns],
                latent=self.stored.latent[:, columns],
            ),
            start=self.start[:, columns],
            truth_x=self.truth_x[:, columns],
            truth_rot=self.truth_rot[:, columns],
            truth_v=self.truth_v[:, columns],
            truth_w=self.truth_w[:, columns],
            mask=self.mask[:, columns],
        )


@dataclass
class EstimatorTrainMetrics:
    grad_steps: int
    clipped_steps: int
    rejected_steps: int
    loss_before: float
    loss_after: float
    loss_mean: float
    rmse_pos: float
    rmse_rot: float
    rmse_vel: float

    def as_row(self) -> Dict[str, Any]:
        return dict(self.__dict__)


class Estimator:
    """
    f_phi with its optimizer.

    predict() is read-only on the weights and may be called from several
    threads; train_epoch() needs exclusive access.
    """

    def __init__(
        self,
        config: ExperimentConfig,
        rng: np.random.Generator,
        hidden: Optional[Sequence[int]] = None,
    ):
        self.settings = config.estimator
        self.latent_dim = config.estimator.latent_dim
        self.obs_dim = config.env.obs_dim
        self.action_dim = config.env.n_dof
        widths = (
            list(hidden)
            if hidden is not None
            else nncore.scaled_widths(config.network.estimator_hidden, config.network.width_scale)
        )
        self.net = DenseSkipNet(
            input_dim(self.obs_dim, self.action_dim, self.latent_dim),
            widths,
            12 + self.latent_dim,
            rng,
            activation=config.network.activation,
            output_gain=config.network.estimator_output_gain,
            name="estimator",
        )
        self.optimizer = Adam(self.net.parameters(), self.settings.learning_rate, name="estimator")

    def parameters(self) -> List[Tensor]:
        return self.net.parameters()

    # ------------------------------------------------------------------
    # Recursion
    # ------------------------------------------------------------------

    def _features(self, z: Any, u: Any, prev: Estimate) -> Tensor:
        s = self.settings
        return nncore.concat(
            [
                lift(z),
                lift(u),
                lift(prev.x) * (1.0 / s.position_scale),
                rotation_to_6d_t(lift(prev.rot)),
                lift(prev.v) * (1.0 / s.velocity_scale),
                lift(prev.w),
                lift(prev.latent),
            ],
            axis=-1,
        )

    def step(self, z: Any, u: Any, prev: Estimate) -> Estimate:
        """One recursion step on Tensors; differentiable when a tape is active."""
        s = self.settings
        out = self.net(self._features(z, u, prev))
        increment = StateIncrement(
            dx=out[..., 0:3] * s.position_scale,
            dr=out[..., 3:6],
            dv=out[..., 6:9] * s.velocity_scale,
            dw=out[..., 9:12],
            dl=lift(np.zeros(np.shape(lift(prev.latent).data))),
        )
        nxt = boxplus_t(prev, increment)
        latent = nncore.clip(lift(prev.latent), -_LATENT_BOUND, _LATENT_BOUND)
        nxt.latent = nncore.tanh(nncore.atanh(latent) + out[..., 12:])
        return nxt

    def predict(self, z: np.ndarray, u_prev: np.ndarray, prev: Estimate, check: bool = True) -> Estimate:
        """
        s_hat_t from (z_t, u_{t-1}, s_hat_{t-1}); never reads ground truth.

        Raises:
            EstimatorFault: non-finite output (when check is set)
        """
        nxt = self.step(z, u_prev, prev)
        result = Estimate(
            x=nxt.x.data,
            rot=canonicalize(nxt.rot.data),
            v=nxt.v.data,
            w=nxt.w.data,
            latent=nxt.latent.data,
        )
        if check:
            for field in ("x", "rot", "v", "w", "latent"):
                bad = np.flatnonzero(~np.all(np.isfinite(getattr(result, field)), axis=-1))
                if bad.size:
                    raise EstimatorFault(bad, field)
        return result

    # ------------------------------------------------------------------
    # Training
    # ------------------------------------------------------------------

    def sequence_loss(self, batch: EstimatorBatch) -> Tensor:
        """Differentiable weighted rmse over an unrolled batch (record under a tape)."""
        s = self.settings
        carry = Estimate(
            x=batch.stored.x[0], rot=batch.stored.rot[0], v=batch.stored.v[0],
            w=batch.stored.w[0], latent=batch.stored.latent[0],
        )
        sq_pos: List[Tensor] = []
        sq_rot: List[Tensor] = []
        sq_vel: List[Tensor] = []
        sq_ang: List[Tensor] = []
        for t in range(batch.length):
            if t > 0:
                restart = batch.start[t]
                if np.any(restart):
                    carry = Estimate(
                        x=nncore.where(restart[:, None], batch.stored.x[t], carry.x),
                        rot=nncore.where(restart[:, None], batch.stored.rot[t], carry.rot),
                        v=nncore.where(restart[:, None], batch.stored.v[t], carry.v),
                        w=nncore.where(restart[:, None], batch.stored.w[t], carry.w),
                        latent=nncore.where(restart[:, None], batch.stored.latent[t], carry.latent),
                    )
            carry = self.step(batch.obs[t], batch.action[t], carry)
            m = batch.mask[t]
            dx = carry.x - batch.truth_x[t]
            dv = carry.v - batch.truth_v[t]
            dw = carry.w - batch.truth_w[t]
            sq_pos.append(((dx * dx).sum(axis=-1) * m).sum())
            sq_rot.append((geodesic_sq_t(carry.rot, batch.truth_rot[t]) * m).sum())
            sq_vel.append(((dv * dv).sum(axis=-1) * m).sum())
            sq_ang.append(((dw * dw).sum(axis=-1) * m).sum())

        count = max(float(batch.mask.sum()), 1.0)

        def _rms(terms: List[Tensor]) -> Tensor:
            return nncore.sqrt(nncore.stack(terms, axis=0).sum() * (1.0 / count) + _LOSS_EPS)

        return (
            _rms(sq_pos) * s.weight_position
            + _rms(sq_rot) * s.weight_rotation
            + _rms(sq_vel) * s.weight_linear_velocity
            + _rms(sq_ang) * s.weight_angular_velocity
        )

    def evaluate(self, batch: EstimatorBatch) -> LossBreakdown:
        """Open-loop unroll without a tape; rmse breakdown over the batch."""
        carry = Estimate(
            x=batch.stored.x[0], rot=batch.stored.rot[0], v=batch.stored.v[0],
            w=batch.stored.w[0], latent=batch.stored.latent[0],
        )
        preds = []
        for t in range(batch.length):
            if t > 0 and np.any(batch.start[t]):
                carry = carry.select(batch.start[t], batch.stored.take((t,)))
            carry = self.predict(batch.obs[t], batch.action[t], carry, check=False)
            preds.append(carry)

        stacked = Estimate(
            x=np.stack([p.x for p in preds]),
            rot=np.stack([p.rot for p in preds]),
            v=np.stack([p.v for p in preds]),
            w=np.stack([p.w for p in preds]),
            latent=np.stack([p.latent for p in preds]),
        )
        truth = Estimate(batch.truth_x, batch.truth_rot, batch.truth_v, batch.truth_w, None)
        return loss(stacked, truth, self.settings, batch.mask)

    def train_epoch(
        self,
        buffer: Any,
        k: Optional[int] = None,
        b: Optional[int] = None,
        rng: Optional[np.random.Generator] = None,
    ) -> EstimatorTrainMetrics:
        """
        Exactly k * b truncated-BPTT gradient steps over the buffer's sequences.

        Args:
            buffer: Rollout buffer (or an EstimatorBatch)
            k: Data reuse (passes); defaults to settings.data_reuse
            b: Minibatches per pass; defaults to n_sequences // minibatch_sequences
            rng: Shuffles sequences between passes
        """
        s = self.settings
        batch = buffer if isinstance(buffer, EstimatorBatch) else EstimatorBatch.from_buffer(buffer, s.sequence_start)
        k = s.data_reuse if k is None else k
        n = batch.n_sequences
        b = max(1, n // s.minibatch_sequences) if b is None else max(1, b)
        rng = rng or np.random.default_rng(0)

        before = self.evaluate(batch)
        steps = clipped = rejected = 0
        losses: List[float] = []
        for _ in range(k):
            order = rng.permutation(n)
            if 0 < n < b:
                # more minibatches than sequences: cycle the shuffled order
                order = np.resize(order, b)
            for columns in np.array_split(order, b):
                minibatch = batch.select(np.sort(columns))
                self.optimizer.zero_grad()
                with GradTape() as tape:
                    value = self.sequence_loss(minibatch)
                params = self.parameters()
                grads = nncore.backward(tape, value, params)
                norm = nncore.global_grad_norm(params)
                if np.isfinite(norm) and norm > s.grad_explode_threshold:
                    nncore.clip_grad_norm(params, s.grad_clip_norm)
                    grads = nncore.parameter_grads(params)
                    clipped += 1
                    logger.warning(f"[estimator] gradient norm {norm:.1f} clipped to {s.grad_clip_norm}")
                if not nncore.opt_step(self.optimizer, grads):
                    rejected += 1
                steps += 1
                losses.append(float(value.data))
        self.optimizer.zero_grad()
        after = self.evaluate(batch) if steps else before

        return EstimatorTrainMetrics(
            grad_steps=steps,
            clipped_steps=clipped,
            rejected_steps=rejected,
            loss_before=before.total,
            loss_after=after.total,
            loss_mean=float(np.mean(losses)) if losses else before.total,
            rmse_pos=after.rmse_pos,
            rmse_rot=after.rmse_rot,
            rmse_vel=after.rmse_vel,
        )

    # ------------------------------------------------------------------
    # Checkpointing
    # ------------------------------------------------------------------

    def state_dict(self) -> Dict[str, np.ndarray]:
        arrays = nncore.named_parameters(self.parameters())
        arrays.update(self.optimizer.state_dict("estimator_opt"))
        return arrays

    def load_state_dict(self, arrays: Dict[str, np.ndarray], with_optimizer: bool = True) -> None:
        nncore.load_parameters(self.parameters(), arrays)
        if with_optimizer and "estimator_opt.t" in arrays:
            self.optimizer.load_state_dict(arrays, "estimator_opt")
