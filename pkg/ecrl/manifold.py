"""
Rotation and on-manifold arithmetic.

Quaternions are numpy arrays in (w, x, y, z) order, optionally batched along
leading axes. Canonical form has w >= 0; when w == 0 the first nonzero
vector component is made non-negative. Every function here is pure.

The state increment convention is a left increment: R' = exp(dr) * R.

The second half of the module holds differentiable counterparts on
nncore.Tensor used when the estimator is unrolled for training.
"""

from dataclasses import dataclass, fields, replace
from functools import lru_cache
from typing import Any, List, Sequence

import numpy as np

from ecrl import nncore
from ecrl.nncore import Tensor, record_op, accumulate, lift

SMALL_ANGLE = 1e-6
_TIE_EPS = 1e-12
IDENTITY = np.array([1.0, 0.0, 0.0, 0.0])


def normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def canonicalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    w = q[..., 0]
    sign = np.where(w < -_TIE_EPS, -1.0, 1.0)
    tie = np.abs(w) <= _TIE_EPS
    if np.any(tie):
        vec = q[..., 1:]
        first = np.argmax(np.abs(vec) > _TIE_EPS, axis=-1)
        lead = np.take_along_axis(vec, first[..., None], axis=-1)[..., 0]
        sign = np.where(tie & (lead < 0.0), -1.0, sign)
    return q * sign[..., None]


def _hamilton(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=np.float64), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=np.float64), -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_compose(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Rotation a after rotation b (matrix product R_a R_b)."""
    return canonicalize(normalize(_hamilton(a, b)))


def quat_inverse(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return canonicalize(q * np.array([1.0, -1.0, -1.0, -1.0]))


def quat_exp(t: np.ndarray) -> np.ndarray:
    """Axis-angle vector to unit quaternion."""
    t = np.asarray(t, dtype=np.float64)
    angle = np.linalg.norm(t, axis=-1)
    small = angle < SMALL_ANGLE
    safe = np.where(small, 1.0, angle)
    angle_sq = angle * angle
    w = np.where(small, 1.0 - angle_sq / 8.0, np.cos(0.5 * angle))
    k = np.where(small, 0.5 - angle_sq / 48.0, np.sin(0.5 * angle) / safe)
    q = np.concatenate([w[..., None], k[..., None] * t], axis=-1)
    return canonicalize(normalize(q))


def quat_log(q: np.ndarray) -> np.ndarray:
    """Unit quaternion to axis-angle vector with norm in [0, pi]."""
    q = canonicalize(np.asarray(q, dtype=np.float64))
    w = q[..., 0]
    vec = q[..., 1:]
    s = np.linalg.norm(vec, axis=-1)
    small = s < SMALL_ANGLE
    safe_s = np.where(small, 1.0, s)
    safe_w = np.where(small, w, 1.0)
    ratio_sq = (s / safe_w) ** 2
    scale = np.where(small, (2.0 / safe_w) * (1.0 - ratio_sq / 3.0), 2.0 * np.arctan2(s, w) / safe_s)
    return scale[..., None] * vec


def quat_from_axis_angle(axis: Sequence[float], angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    return quat_exp(axis / np.linalg.norm(axis) * angle)


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = np.moveaxis(normalize(q), -1, 0)
    return np.stack(
        [
            np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], axis=-1),
            np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], axis=-1),
            np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], axis=-1),
        ],
        axis=-2,
    )


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    return np.einsum("...ij,...j->...i", quat_to_matrix(q), np.asarray(v, dtype=np.float64))


def geodesic_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Minimal rotation angle between a and b, in [0, pi]."""
    conj = np.asarray(a, dtype=np.float64) * np.array([1.0, -1.0, -1.0, -1.0])
    rel = _hamilton(conj, b)
    return 2.0 * np.arctan2(np.linalg.norm(rel[..., 1:], axis=-1), np.abs(rel[..., 0]))


def symmetry_distance(a: np.ndarray, b: np.ndarray, symmetries: np.ndarray) -> np.ndarray:
    """Smallest geodesic distance between a and b composed with any symmetry element."""
    b = np.asarray(b, dtype=np.float64)
    candidates = _hamilton(b[..., None, :], symmetries)
    return np.min(geodesic_distance(np.asarray(a)[..., None, :], candidates), axis=-1)


def relative_rotation(goal: np.ndarray, current: np.ndarray) -> np.ndarray:
    """goal^-1 * current."""
    return quat_compose(quat_inverse(goal), current)


def rotation_to_6d(q: np.ndarray) -> np.ndarray:
    """First two columns of the rotation matrix, column-major: (c0, c1)."""
    m = quat_to_matrix(q)
    return np.concatenate([m[..., :, 0], m[..., :, 1]], axis=-1)


# =============================================================================
# OCTAHEDRAL GROUP
# =============================================================================

@lru_cache(maxsize=1)
def _octahedral_table() -> np.ndarray:
    generators = [quat_from_axis_angle(axis, np.pi / 2) for axis in np.eye(3)]
    elements: List[np.ndarray] = [canonicalize(IDENTITY.copy())]
    frontier = list(elements)
    while frontier:
        discovered = []
        for element in frontier:
            for generator in generators:
                candidate = quat_compose(generator, element)
                if not any(np.max(np.abs(candidate - e)) < 1e-6 for e in elements):
                    elements.append(candidate)
                    discovered.append(candidate)
        frontier = discovered
    keys = [tuple(np.round(e, 9)) for e in elements]
    order = sorted(range(len(elements)), key=lambda i: keys[i])
    table = np.stack([np.round(elements[i], 15) for i in order])
    table.setflags(write=False)
    return table


def octahedral_group() -> np.ndarray:
    """The 24 rotations mapping a cube onto itself, shape (24, 4), fixed order."""
    return _octahedral_table().copy()


def goal_index_of(q: np.ndarray, tol: float = 1e-6) -> int:
    distances = geodesic_distance(_octahedral_table(), np.asarray(q, dtype=np.float64))
    index = int(np.argmin(distances))
    if distances[index] > tol:
        raise ValueError("rotation is not an element of the octahedral group")
    return index


def identity_goal_index() -> int:
    return goal_index_of(IDENTITY)


# =============================================================================
# STATE VALUE TYPES
# =============================================================================

@dataclass
class StateIncrement:
    """Tangent increment (dx, dr, dv, dw, dl); arrays may carry batch axes."""

    dx: Any
    dr: Any
    dv: Any
    dw: Any
    dl: Any

    @classmethod
    def from_vector(cls, vector: Any) -> "StateIncrement":
        return cls(
            dx=vector[..., 0:3],
            dr=vector[..., 3:6],
            dv=vector[..., 6:9],
            dw=vector[..., 9:12],
            dl=vector[..., 12:],
        )

    @property
    def dim(self) -> int:
        return 12 + int(np.shape(self.dl)[-1])


@dataclass
class Estimate:
    """
    Estimated state (x, rot, v, w) plus latent vector.

    Fields are numpy arrays for inference or Tensors inside an unrolled
    training sequence; leading axes are batch axes.
    """

    x: Any
    rot: Any
    v: Any
    w: Any
    latent: Any

    @classmethod
    def zeros(cls, batch: int, latent_dim: int) -> "Estimate":
        rot = np.zeros((batch, 4))
        rot[:, 0] = 1.0
        return cls(
            x=np.zeros((batch, 3)),
            rot=rot,
            v=np.zeros((batch, 3)),
            w=np.zeros((batch, 3)),
            latent=np.zeros((batch, latent_dim)),
        )

    def copy(self) -> "Estimate":
        return Estimate(**{f.name: np.array(getattr(self, f.name), copy=True) for f in fields(self)})

    def take(self, index: Any) -> "Estimate":
        return Estimate(**{f.name: getattr(self, f.name)[index] for f in fields(self)})

    def put(self, index: Any, other: "Estimate") -> None:
        for f in fields(self):
            getattr(self, f.name)[index] = getattr(other, f.name)

    def select(self, mask: np.ndarray, other: "Estimate") -> "Estimate":
        """Rows of other where mask is set, rows of self elsewhere."""
        mask = np.asarray(mask, dtype=bool)
        return Estimate(
            **{
                f.name: np.where(mask[:, None], getattr(other, f.name), getattr(self, f.name))
                for f in fields(self)
            }
        )

    def is_finite(self) -> np.ndarray:
        ok = np.ones(np.shape(self.x)[0], dtype=bool)
        for f in fields(self):
            ok &= np.all(np.isfinite(getattr(self, f.name)), axis=-1)
        return ok


def boxplus(s: Estimate, delta: StateIncrement) -> Estimate:
    """Apply a tangent increment: translation-like fields add, rotation left-multiplies."""
    return replace(
        s,
        x=s.x + delta.dx,
        rot=canonicalize(normalize(_hamilton(quat_exp(delta.dr), s.rot))),
        v=s.v + delta.dv,
        w=s.w + delta.dw,
        latent=s.latent + delta.dl,
    )


# =============================================================================
# DIFFERENTIABLE COUNTERPARTS
# =============================================================================

_SERIES_BELOW = 1e-2


def _half_angle_terms(angle_sq: Tensor) -> Any:
    """cos(a/2) and sin(a/2)/a as functions of a^2, smooth at zero."""
    s = angle_sq.data
    a = np.sqrt(s)
    small = a < _SERIES_BELOW
    safe_a = np.where(small, 1.0, a)
    cos_half = np.cos(0.5 * a)
    sinc = np.where(small, 0.5 - s / 48.0 + s * s / 3840.0, np.sin(0.5 * a) / safe_a)
    d_sinc = np.where(
        small,
        -1.0 / 48.0 + s / 1920.0,
        (0.5 * safe_a * np.cos(0.5 * safe_a) - np.sin(0.5 * safe_a)) / (2.0 * safe_a ** 3),
    )
    w = record_op(cos_half, (angle_sq,), lambda g: accumulate(angle_sq, g * (-0.25) * sinc))
    k = record_op(sinc, (angle_sq,), lambda g: accumulate(angle_sq, g * d_sinc))
    return w, k


def hamilton_t(a: Tensor, b: Tensor) -> Tensor:
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return nncore.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def normalize_t(q: Tensor) -> Tensor:
    return q / nncore.sqrt((q * q).sum(axis=-1, keepdims=True))


def quat_exp_t(t: Tensor) -> Tensor:
    t = lift(t)
    w, k = _half_angle_terms((t * t).sum(axis=-1, keepdims=True))
    return nncore.concat([w, k * t], axis=-1)


def rotation_to_6d_t(q: Tensor) -> Tensor:
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    return nncore.stack(
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y + w * z),
            2.0 * (x * z - w * y),
            2.0 * (x * y - w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z + w * x),
        ],
        axis=-1,
    )


def geodesic_sq_t(a: Tensor, b: Any) -> Tensor:
    """Squared geodesic angle, differentiable in a, smooth at zero distance."""
    conj = lift(a) * np.array([1.0, -1.0, -1.0, -1.0])
    rel = hamilton_t(conj, lift(b))
    c = rel[..., 0]
    s_sq = (rel[..., 1:] * rel[..., 1:]).sum(axis=-1)
    return _angle_sq(c, s_sq)


def _angle_sq(c: Tensor, s_sq: Tensor) -> Tensor:
    c_abs = np.abs(c.data)
    sign = np.where(c.data < 0.0, -1.0, 1.0)
    s = np.sqrt(s_sq.data)
    angle = 2.0 * np.arctan2(s, c_abs)
    denom = s_sq.data + c_abs * c_abs
    small = s < _SERIES_BELOW * np.maximum(c_abs, _SERIES_BELOW)
    safe_s = np.where(small, 1.0, s)
    safe_c = np.where(c_abs > 0.0, c_abs, 1.0)
    # ratio = angle / s; d(angle^2)/d(s^2) = 2 * ratio * |c| / (s^2 + c^2)
    ratio = np.where(small, (2.0 / safe_c) * (1.0 - s_sq.data / (3.0 * safe_c * safe_c)), angle / safe_s)
    d_s_sq = 2.0 * ratio * c_abs / denom
    d_c = -4.0 * angle * s / denom * sign

    def _backward(g):
        accumulate(c, g * d_c)
        accumulate(s_sq, g * d_s_sq)

    return record_op(angle * angle, (c, s_sq), _backward)


def boxplus_t(s: Estimate, delta: StateIncrement) -> Estimate:
    """Differentiable boxplus on Tensor fields."""
    return Estimate(
        x=lift(s.x) + delta.dx,
        rot=normalize_t(hamilton_t(quat_exp_t(delta.dr), lift(s.rot))),
        v=lift(s.v) + delta.dv,
        w=lift(s.w) + delta.dw,
        latent=lift(s.latent) + delta.dl,
    )
