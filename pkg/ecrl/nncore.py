"""
Minimal reverse-mode differentiation on numpy arrays.

A Tensor wraps an array. While a GradTape is active, every operation whose
inputs require gradients records a backward closure on the tape; the tape
replays them in reverse creation order, so each node is visited once.
Outside a tape the same operations simply compute values, which is how
rollouts evaluate the networks.

Also here: dense-skip MLPs, the diagonal Gaussian head, Adam, gradient
clipping and the checkpoint container shared by policy and estimator.
"""

import json
import logging
import threading
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from ecrl.errors import CheckpointError, ConfigError
from ecrl.file_utils import AtomicFileWriter

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1
_LOG_2PI = float(np.log(2.0 * np.pi))

ArrayLike = Union[np.ndarray, float, int, "Tensor"]


# =============================================================================
# TAPE
# =============================================================================

_tape_state = threading.local()


def _active_tape() -> Optional["GradTape"]:
    stack = getattr(_tape_state, "stack", None)
    return stack[-1] if stack else None


class GradTape:
    """
    Records the operation graph of one forward pass (or one unrolled sequence).

    Usage:
        with GradTape() as tape:
            loss = net(x).sum()
        tape.backward(loss)
    """

    def __init__(self):
        self._nodes: List["Tensor"] = []

    def __enter__(self) -> "GradTape":
        if not hasattr(_tape_state, "stack"):
            _tape_state.stack = []
        _tape_state.stack.append(self)
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        _tape_state.stack.pop()
        return False

    def __len__(self) -> int:
        return len(self._nodes)

    def record(self, node: "Tensor") -> None:
        self._nodes.append(node)

    def backward(self, output: "Tensor", output_grad: Optional[np.ndarray] = None) -> None:
        """
        Accumulate d(output)/d(leaf) into every leaf's .grad.

        Intermediate gradients are cleared first, so a tape can be replayed;
        leaf gradients keep accumulating until zero_grad.
        """
        if output_grad is None:
            output_grad = np.ones_like(output.data)
        if not output.requires_grad:
            return
        for node in self._nodes:
            node.grad = None
        accumulate(output, np.asarray(output_grad, dtype=np.float64))
        for node in reversed(self._nodes):
            if node.grad is not None and node._backward is not None:
                node._backward(node.grad)


def backward(
    tape: GradTape,
    output: "Tensor",
    params: Sequence["Tensor"],
    output_grad: Optional[np.ndarray] = None,
) -> List[np.ndarray]:
    """Run the tape backward and return one gradient per parameter (zeros if untouched)."""
    tape.backward(output, output_grad)
    return parameter_grads(params)


def parameter_grads(params: Sequence["Tensor"]) -> List[np.ndarray]:
    return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]


# =============================================================================
# TENSOR
# =============================================================================

def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _is_basic_index(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (int, np.integer, slice)) or p is Ellipsis or p is None for p in parts)


def accumulate(tensor: "Tensor", grad: np.ndarray) -> None:
    """Add grad into tensor.grad, reducing broadcast dimensions."""
    if not tensor.requires_grad:
        return
    grad = _unbroadcast(np.asarray(grad, dtype=np.float64), tensor.data.shape)
    if tensor.grad is None:
        tensor.grad = np.array(grad, dtype=np.float64, copy=True)
    else:
        tensor.grad = tensor.grad + grad


def record_op(data: np.ndarray, parents: Tuple["Tensor", ...], backward_fn: Callable) -> "Tensor":
    """Create the output of an operation, recording it when a tape is active."""
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
        tape.record(out)
    return out


def lift(value: ArrayLike) -> "Tensor":
    return value if isinstance(value, Tensor) else Tensor(value)


class Tensor:
    """numpy array with an optional gradient slot."""

    __array_priority__ = 100

    def __init__(self, data: Any, requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self.grad: Optional[np.ndarray] = None
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{label})"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    # Arithmetic

    def __add__(self, other: ArrayLike) -> "Tensor":
        other = lift(other)

        def _backward(g):
            accumulate(self, g)
            accumulate(other, g)

        return record_op(self.data + other.data, (self, other), _backward)

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        return record_op(-self.data, (self,), lambda g: accumulate(self, -g))

    def __sub__(self, other: ArrayLike) -> "Tensor":
        other = lift(other)

        def _backward(g):
            accumulate(self, g)
            accumulate(other, -g)

        return record_op(self.data - other.data, (self, other), _backward)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return lift(other) - self

    def __mul__(self, other: ArrayLike) -> "Tensor":
        other = lift(other)

        def _backward(g):
            accumulate(self, g * other.data)
            accumulate(other, g * self.data)

        return record_op(self.data * other.data, (self, other), _backward)

    __rmul__ = __mul__

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        other = lift(other)

        def _backward(g):
            accumulate(self, g / other.data)
            accumulate(other, -g * self.data / (other.data * other.data))

        return record_op(self.data / other.data, (self, other), _backward)

    def __rtruediv__(self, other: ArrayLike) -> "Tensor":
        return lift(other) / self

    def __pow__(self, exponent: float) -> "Tensor":
        exponent = float(exponent)
        return record_op(
            self.data ** exponent,
            (self,),
            lambda g: accumulate(self, g * exponent * self.data ** (exponent - 1.0)),
        )

    def __matmul__(self, other: ArrayLike) -> "Tensor":
        other = lift(other)
        if other.ndim != 2:
            raise ConfigError("", f"matmul expects a 2-d right operand, got shape {other.shape}")
        if self.shape[-1] != other.shape[0]:
            raise ConfigError(
                "", f"dimension mismatch: input has {self.shape[-1]} features, layer expects {other.shape[0]}"
            )

        def _backward(g):
            accumulate(self, g @ other.data.T)
            flat_in = self.data.reshape(-1, self.shape[-1])
            flat_g = g.reshape(-1, g.shape[-1])
            accumulate(other, flat_in.T @ flat_g)

        return record_op(self.data @ other.data, (self, other), _backward)

    # Shape

    def __getitem__(self, index) -> "Tensor":
        basic = _is_basic_index(index)

        def _backward(g):
            full = np.zeros_like(self.data)
            if basic:
                full[index] += g
            else:
                np.add.at(full, index, g)
            accumulate(self, full)

        return record_op(self.data[index], (self,), _backward)

    def reshape(self, *shape) -> "Tensor":
        original = self.data.shape
        return record_op(
            self.data.reshape(*shape), (self,), lambda g: accumulate(self, g.reshape(original))
        )

    def sum(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        original = self.data.shape

        def _backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            accumulate(self, np.broadcast_to(g, original))

        return record_op(self.data.sum(axis=axis, keepdims=keepdims), (self,), _backward)

    def mean(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        count = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)


# =============================================================================
# FUNCTIONS
# =============================================================================

def concat(tensors: Sequence[ArrayLike], axis: int = -1) -> Tensor:
    parts = [lift(t) for t in tensors]
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def _backward(g):
        for part, piece in zip(parts, np.split(g, splits, axis=axis)):
            accumulate(part, piece)

    return record_op(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), _backward)


def stack(tensors: Sequence[ArrayLike], axis: int = -1) -> Tensor:
    parts = [lift(t) for t in tensors]

    def _backward(g):
        pieces = np.moveaxis(g, axis, 0)
        for part, piece in zip(parts, pieces):
            accumulate(part, piece)

    return record_op(np.stack([p.data for p in parts], axis=axis), tuple(parts), _backward)


def where(condition: np.ndarray, a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = lift(a), lift(b)
    cond = np.asarray(condition, dtype=bool)

    def _backward(g):
        accumulate(a, np.where(cond, g, 0.0))
        accumulate(b, np.where(cond, 0.0, g))

    return record_op(np.where(cond, a.data, b.data), (a, b), _backward)


def elu(x: ArrayLike) -> Tensor:
    x = lift(x)
    negative = np.expm1(np.minimum(x.data, 0.0))
    out = np.where(x.data > 0.0, x.data, negative)
    slope = np.where(x.data > 0.0, 1.0, negative + 1.0)
    return record_op(out, (x,), lambda g: accumulate(x, g * slope))


def tanh(x: ArrayLike) -> Tensor:
    x = lift(x)
    out = np.tanh(x.data)
    return record_op(out, (x,), lambda g: accumulate(x, g * (1.0 - out * out)))


def atanh(x: ArrayLike) -> Tensor:
    x = lift(x)
    return record_op(
        np.arctanh(x.data), (x,), lambda g: accumulate(x, g / (1.0 - x.data * x.data))
    )


def exp(x: ArrayLike) -> Tensor:
    x = lift(x)
    out = np.exp(x.data)
    return record_op(out, (x,), lambda g: accumulate(x, g * out))


def log(x: ArrayLike) -> Tensor:
    x = lift(x)
    return record_op(np.log(x.data), (x,), lambda g: accumulate(x, g / x.data))


def sqrt(x: ArrayLike) -> Tensor:
    x = lift(x)
    out = np.sqrt(x.data)
    return record_op(out, (x,), lambda g: accumulate(x, g * 0.5 / out))


def identity(x: ArrayLike) -> Tensor:
    return lift(x)


def minimum(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = lift(a), lift(b)
    take_a = a.data <= b.data

    def _backward(g):
        accumulate(a, np.where(take_a, g, 0.0))
        accumulate(b, np.where(take_a, 0.0, g))

    return record_op(np.minimum(a.data, b.data), (a, b), _backward)


def maximum(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = lift(a), lift(b)
    take_a = a.data >= b.data

    def _backward(g):
        accumulate(a, np.where(take_a, g, 0.0))
        accumulate(b, np.where(take_a, 0.0, g))

    return record_op(np.maximum(a.data, b.data), (a, b), _backward)


def clip(x: ArrayLike, low: float, high: float) -> Tensor:
    """Clamp; the gradient is zero wherever the clamp is active."""
    x = lift(x)
    inside = (x.data >= low) & (x.data <= high)
    return record_op(np.clip(x.data, low, high), (x,), lambda g: accumulate(x, g * inside))


ACTIVATIONS: Dict[str, Callable[[ArrayLike], Tensor]] = {
    "elu": elu,
    "tanh": tanh,
    "identity": identity,
}


# =============================================================================
# LAYERS
# =============================================================================

def orthogonal_init(shape: Tuple[int, int], gain: float, rng: np.random.Generator) -> np.ndarray:
    rows, cols = shape
    flat = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(flat)
    q = q * np.where(np.diag(r) < 0.0, -1.0, 1.0)
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


class Linear:
    """Affine map x @ W + b with W of shape (in, out)."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, gain: float, name: str):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.weight = Tensor(orthogonal_init((in_dim, out_dim), gain, rng), True, f"{name}.weight")
        self.bias = Tensor(np.zeros(out_dim), True, f"{name}.bias")

    def __call__(self, x: ArrayLike) -> Tensor:
        return lift(x) @ self.weight + self.bias

    def parameters(self) -> List[Tensor]:
        return [self.weight, self.bias]


class DenseSkipNet:
    """
    MLP whose hidden layers each see concat(previous output, raw input).

    The first hidden layer sees the raw input alone; the output layer sees the
    last hidden layer. With no hidden layers the net is a single affine map.
    """

    def __init__(
        self,
        in_dim: int,
        hidden: Sequence[int],
        out_dim: int,
        rng: np.random.Generator,
        activation: str = "elu",
        hidden_gain: float = float(np.sqrt(2.0)),
        output_gain: float = 1.0,
        name: str = "net",
    ):
        if activation not in ACTIVATIONS:
            raise ConfigError("network.activation", f"unknown activation '{activation}'")
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.hidden = list(hidden)
        self.activation = activation
        self.name = name
        self.hidden_layers: List[Linear] = []
        for i, width in enumerate(self.hidden):
            layer_in = in_dim if i == 0 else self.hidden[i - 1] + in_dim
            self.hidden_layers.append(Linear(layer_in, width, rng, hidden_gain, f"{name}.hidden{i}"))
        last = self.hidden[-1] if self.hidden else in_dim
        self.output_layer = Linear(last, out_dim, rng, output_gain, f"{name}.out")

    def __call__(self, x: ArrayLike) -> Tensor:
        return self.forward(x)

    def forward(self, x: ArrayLike) -> Tensor:
        output, _ = self._run(x)
        return output

    def preactivations(self, x: ArrayLike) -> List[np.ndarray]:
        """Hidden-layer pre-activations, for probing the skip wiring."""
        _, pre = self._run(x)
        return [p.data for p in pre]

    def _run(self, x: ArrayLike) -> Tuple[Tensor, List[Tensor]]:
        x = lift(x)
        if x.shape[-1] != self.in_dim:
            raise ConfigError(
                f"network.{self.name}",
                f"dimension mismatch: got input width {x.shape[-1]}, expected {self.in_dim}",
            )
        act = ACTIVATIONS[self.activation]
        h = x
        pre: List[Tensor] = []
        for i, layer in enumerate(self.hidden_layers):
            z = layer(x if i == 0 else concat([h, x]))
            pre.append(z)
            h = act(z)
        return self.output_layer(h), pre

    def parameters(self) -> List[Tensor]:
        params: List[Tensor] = []
        for layer in self.hidden_layers:
            params.extend(layer.parameters())
        params.extend(self.output_layer.parameters())
        return params

    def num_parameters(self) -> int:
        return parameter_count(self.in_dim, self.hidden, self.out_dim)


def parameter_count(in_dim: int, hidden: Sequence[int], out_dim: int) -> int:
    total = 0
    for i, width in enumerate(hidden):
        layer_in = in_dim if i == 0 else hidden[i - 1] + in_dim
        total += layer_in * width + width
    last = hidden[-1] if hidden else in_dim
    return total + last * out_dim + out_dim


def scaled_widths(widths: Sequence[int], factor: float) -> List[int]:
    return [max(1, int(round(w * factor))) for w in widths]


# =============================================================================
# GAUSSIAN HEAD
# =============================================================================

class GaussianHead:
    """State-independent log standard deviations for a diagonal Gaussian."""

    def __init__(
        self,
        action_dim: int,
        init_std: float = 0.6,
        log_std_bounds: Tuple[float, float] = (-5.0, 1.0),
        name: str = "head",
    ):
        self.action_dim = action_dim
        self.log_std_bounds = log_std_bounds
        self.log_std = Tensor(np.full(action_dim, np.log(init_std)), True, f"{name}.log_std")

    def clamped_log_std(self) -> Tensor:
        low, high = self.log_std_bounds
        return clip(self.log_std, low, high)

    def project(self) -> None:
        """Keep the stored parameter inside its bounds after an optimizer step."""
        low, high = self.log_std_bounds
        np.clip(self.log_std.data, low, high, out=self.log_std.data)

    def parameters(self) -> List[Tensor]:
        return [self.log_std]


def logprob(head: GaussianHead, mean: ArrayLike, action: ArrayLike) -> Tensor:
    """Diagonal-Gaussian log density, summed over the last axis."""
    log_std = head.clamped_log_std()
    z = (lift(action) - mean) / exp(log_std)
    per_dim = z * z * (-0.5) - log_std - 0.5 * _LOG_2PI
    return per_dim.sum(axis=-1)


def entropy(head: GaussianHead) -> Tensor:
    return (head.clamped_log_std() + 0.5 + 0.5 * _LOG_2PI).sum()


def sample_and_logprob(
    head: GaussianHead, mean: np.ndarray, rng: np.random.Generator
) -> Tuple[np.ndarray, np.ndarray]:
    mean = np.asarray(mean, dtype=np.float64)
    std = np.exp(head.clamped_log_std().data)
    action = mean + std * rng.standard_normal(mean.shape)
    return action, logprob(head, mean, action).data


# =============================================================================
# OPTIMIZER
# =============================================================================

class Adam:
    """Adaptive-moment optimizer; single writer over its parameters."""

    def __init__(
        self,
        params: Iterable[Tensor],
        lr: float,
        betas: Tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        name: str = "adam",
    ):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.name = name
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.rejected_steps = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: Optional[float] = None) -> bool:
        """
        Apply one update from the parameters' accumulated gradients.

        Returns:
            False (and leaves everything untouched) if any gradient is non-finite.
        """
        lr = self.lr if lr is None else lr
        grads = parameter_grads(self.params)
        bad = [p.name for p, g in zip(self.params, grads) if not np.all(np.isfinite(g))]
        if bad:
            self.rejected_steps += 1
            logger.warning(f"[{self.name}] rejected step: non-finite gradient in {bad}")
            return False

        beta1, beta2 = self.betas
        self.t += 1
        correction1 = 1.0 - beta1 ** self.t
        correction2 = 1.0 - beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= beta1
            m += (1.0 - beta1) * g
            v *= beta2
            v += (1.0 - beta2) * g * g
            p.data -= lr * (m / correction1) / (np.sqrt(v / correction2) + self.eps)
        return True

    def state_dict(self, prefix: str) -> Dict[str, np.ndarray]:
        state = {f"{prefix}.t": np.asarray(self.t)}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            state[f"{prefix}.m.{i}"] = m
            state[f"{prefix}.v.{i}"] = v
        return state

    def load_state_dict(self, arrays: Dict[str, np.ndarray], prefix: str) -> None:
        self.t = int(arrays[f"{prefix}.t"])
        for i in range(len(self.params)):
            self.m[i] = np.array(arrays[f"{prefix}.m.{i}"], dtype=np.float64)
            self.v[i] = np.array(arrays[f"{prefix}.v.{i}"], dtype=np.float64)


def opt_step(optimizer: Adam, grads: Sequence[np.ndarray], lr: Optional[float] = None) -> bool:
    """
    Apply one Adam step to the optimizer's parameters with the given gradients.

    grads pairs with optimizer.params in order. Returns False when the step is
    rejected for a non-finite gradient.
    """
    if len(grads) != len(optimizer.params):
        raise ValueError(f"expected {len(optimizer.params)} gradients, got {len(grads)}")
    for p, g in zip(optimizer.params, grads):
        p.grad = np.asarray(g, dtype=np.float64)
    return optimizer.step(lr)


def global_grad_norm(params: Sequence[Tensor]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    return float(np.sqrt(total))


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Rescale gradients in place to norm max_norm if they exceed it; returns the original norm."""
    norm = global_grad_norm(params)
    if np.isfinite(norm) and norm > max_norm:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


# =============================================================================
# CHECKPOINT CONTAINER
# =============================================================================

def named_parameters(params: Sequence[Tensor]) -> Dict[str, np.ndarray]:
    return {p.name: p.data for p in params}


def load_parameters(params: Sequence[Tensor], arrays: Dict[str, np.ndarray]) -> None:
    for p in params:
        if p.name not in arrays:
            raise CheckpointError(f"checkpoint lacks parameter '{p.name}'")
        value = np.asarray(arrays[p.name], dtype=np.float64)
        if value.shape != p.data.shape:
            raise CheckpointError(
                f"shape mismatch for '{p.name}': checkpoint {value.shape}, model {p.data.shape}"
            )
        p.data = value.copy()


def save_checkpoint(path: Path, arrays: Dict[str, np.ndarray], meta: Dict[str, Any]) -> None:
    """Write named arrays plus a JSON meta entry into one NPZ file, atomically."""
    meta = dict(meta)
    meta["format_version"] = CHECKPOINT_FORMAT_VERSION
    meta["shapes"] = {name: list(np.shape(a)) for name, a in arrays.items()}
    payload = dict(arrays)
    payload["__meta__"] = np.array(json.dumps(meta, sort_keys=True))
    AtomicFileWriter.write_npz(path, payload)


def load_checkpoint(path: Path) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as data:
            arrays = {name: np.array(data[name]) for name in data.files}
    except (OSError, ValueError) as e:
        raise CheckpointError(f"corrupt checkpoint {path}: {e}") from e
    if "__meta__" not in arrays:
        raise CheckpointError(f"corrupt checkpoint {path}: missing meta entry")
    try:
        meta = json.loads(str(arrays.pop("__meta__")))
    except json.JSONDecodeError as e:
        raise CheckpointError(f"corrupt checkpoint {path}: unreadable meta entry") from e
    version = meta.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint format version {version} is not supported (expected {CHECKPOINT_FORMAT_VERSION})"
        )
    return arrays, meta
