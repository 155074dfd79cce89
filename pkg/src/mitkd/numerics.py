"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations executed while a :class:`Tape` is active record a backward rule
whenever one of their inputs requires a gradient. :func:`backward` replays the
records of a tape in reverse execution order and populates ``grad`` on every
tensor that requires one. Tapes are thread-local, so independent runs may
execute on separate threads.
"""

from __future__ import annotations

import contextlib
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from mitkd import ContractError, DegenerateRowError, DimensionError

DTYPE = np.float64

KL_EPSILON = 1e-12
LAYER_NORM_EPSILON = 1e-5
WARMUP_FRACTION = 0.10
DEFAULT_WEIGHT_DECAY = 0.01

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_K = 0.044715

_ACTIVE = threading.local()

BackwardRule = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class Tensor:
    """Dense float64 array with an optional gradient."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        """Return the value of a single-element tensor."""
        if self.data.size != 1:
            raise ContractError(
                f"item() needs a single element, got shape {self.shape}"
            )
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """Return a constant view on the same data."""
        return Tensor(self.data, requires_grad=False, name=self.name)

    def zero_grad(self) -> None:
        self.grad = None

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"


@dataclass
class _Record:
    output: Tensor
    inputs: Tuple[Tensor, ...]
    rule: BackwardRule


class Tape:
    """Ordered record of executed operations.

    Use as a context manager; operations executed inside the ``with`` block are
    recorded on this tape.
    """

    def __init__(self):
        self.records: List[_Record] = []

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc_info):
        _stack().pop()

    def __len__(self):
        return len(self.records)


def _stack() -> List[Optional[Tape]]:
    if not hasattr(_ACTIVE, "stack"):
        _ACTIVE.stack = []
    return _ACTIVE.stack


def active_tape() -> Optional[Tape]:
    """Return the innermost tape of the current thread, if any."""
    stack = _stack()
    return stack[-1] if stack else None


@contextlib.contextmanager
def no_tape():
    """Execute the enclosed operations without recording them."""
    stack = _stack()
    stack.append(None)
    try:
        yield
    finally:
        stack.pop()


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _emit(data: np.ndarray, inputs: Tuple[Tensor, ...], rule: BackwardRule) -> Tensor:
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.records.append(_Record(out, inputs, rule))
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, what: str) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as err:
        raise DimensionError(f"cannot {what} shapes {a.shape} and {b.shape}") from err


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate gradients of ``loss`` on every tensor recorded on ``tape``.

    Leaf tensors (parameters) accumulate into an existing ``grad``; call
    :func:`zero_grad` between optimizer steps.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    produced = {id(record.output) for record in tape.records}
    if id(loss) not in produced:
        raise ContractError("loss was not produced through the given tape")

    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: Dict[int, Tensor] = {}
    for record in reversed(tape.records):
        grad_out = grads.pop(id(record.output), None)
        if grad_out is None:
            continue
        record.output.grad = grad_out
        for tensor, grad in zip(record.inputs, record.rule(grad_out)):
            if grad is None or not tensor.requires_grad:
                continue
            key = id(tensor)
            if key not in produced:
                leaves[key] = tensor
            grads[key] = grads[key] + grad if key in grads else grad

    for key, tensor in leaves.items():
        grad = grads[key]
        tensor.grad = grad.copy() if tensor.grad is None else tensor.grad + grad


def zero_grad(params: Mapping[str, Tensor]) -> None:
    for param in params.values():
        param.grad = None


# --------------------------------------------------------------------------
# Elementwise and structural operations


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "add")

    def rule(grad):
        return _unbroadcast(grad, a.shape), _unbroadcast(grad, b.shape)

    return _emit(a.data + b.data, (a, b), rule)


def mul(a, b) -> Tensor:
    """Elementwise product."""
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "multiply")

    def rule(grad):
        return (
            _unbroadcast(grad * b.data, a.shape),
            _unbroadcast(grad * a.data, b.shape),
        )

    return _emit(a.data * b.data, (a, b), rule)


def scale(x: Tensor, factor: float) -> Tensor:
    x = _as_tensor(x)
    factor = float(factor)
    return _emit(x.data * factor, (x,), lambda grad: (grad * factor,))


def tensor_sum(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    return _emit(np.asarray(x.data.sum()), (x,), lambda grad: (np.full(x.shape, grad),))


def tensor_mean(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    count = x.size
    return _emit(
        np.asarray(x.data.mean()), (x,), lambda grad: (np.full(x.shape, grad / count),)
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` is either a plain matrix shared by every leading index of ``a`` or a
    stack with exactly the leading shape of ``a``.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}")
    shared = b.ndim == 2
    if not shared and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}")

    def rule(grad):
        grad_a = np.matmul(grad, np.swapaxes(b.data, -1, -2))
        if shared:
            rows = a.data.reshape(-1, a.shape[-1])
            grad_b = rows.T @ grad.reshape(-1, grad.shape[-1])
        else:
            grad_b = np.matmul(np.swapaxes(a.data, -1, -2), grad)
        return grad_a, grad_b

    return _emit(np.matmul(a.data, b.data), (a, b), rule)


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    """Permute axes; without ``axes`` the last two axes are swapped."""
    x = _as_tensor(x)
    if axes is None:
        axes = list(range(x.ndim))
        axes[-2], axes[-1] = axes[-1], axes[-2]
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"axes {axes} are no permutation for shape {x.shape}")
    inverse = tuple(np.argsort(axes))
    return _emit(
        np.transpose(x.data, axes), (x,), lambda grad: (np.transpose(grad, inverse),)
    )


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    try:
        data = x.data.reshape(tuple(shape))
    except ValueError as err:
        raise DimensionError(f"cannot reshape {x.shape} to {tuple(shape)}") from err
    return _emit(data, (x,), lambda grad: (grad.reshape(x.shape),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(_as_tensor(t) for t in tensors)
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as err:
        shapes = [t.shape for t in tensors]
        raise DimensionError(f"cannot concatenate shapes {shapes}") from err
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def rule(grad):
        return tuple(np.split(grad, bounds, axis=axis))

    return _emit(data, tensors, rule)


def split(x: Tensor, sections: int, axis: int = -1) -> List[Tensor]:
    """Split into ``sections`` equal parts along ``axis``."""
    x = _as_tensor(x)
    width = x.shape[axis]
    if sections < 1 or width % sections:
        raise DimensionError(f"cannot split axis of size {width} into {sections} parts")
    step = width // sections
    pieces = []
    for index in range(sections):
        selector = [slice(None)] * x.ndim
        selector[axis] = slice(index * step, (index + 1) * step)
        selector = tuple(selector)

        def rule(grad, selector=selector):
            full = np.zeros_like(x.data)
            full[selector] = grad
            return (full,)

        pieces.append(_emit(x.data[selector], (x,), rule))
    return pieces


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows of a ``[rows × width]`` table; output is ``ids.shape + [width]``."""
    table = _as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise DimensionError(f"embedding table must be 2-d, got shape {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        bad = ids[(ids < 0) | (ids >= table.shape[0])][0]
        raise IndexError(
            f"id {int(bad)} out of range for table with {table.shape[0]} rows"
        )

    def rule(grad):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), grad.reshape(-1, table.shape[1]))
        return (full,)

    return _emit(table.data[ids], (table,), rule)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = _as_tensor(x)
    inner = _GELU_C * (x.data + _GELU_K * x.data**3)
    tanh = np.tanh(inner)

    def rule(grad):
        d_inner = _GELU_C * (1.0 + 3.0 * _GELU_K * x.data**2)
        local = 0.5 * (1.0 + tanh) + 0.5 * x.data * (1.0 - tanh**2) * d_inner
        return (grad * local,)

    return _emit(0.5 * x.data * (1.0 + tanh), (x,), rule)


def dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator]) -> Tensor:
    """Inverted dropout; identity when ``rng`` is None or ``rate`` is 0."""
    if rng is None or rate <= 0.0:
        return x
    if rate >= 1.0:
        raise ContractError(f"dropout rate must be below 1, got {rate!r}")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _emit(x.data * keep, (x,), lambda grad: (grad * keep,))


# --------------------------------------------------------------------------
# Normalisations and losses


def _broadcast_mask(mask, shape: Tuple[int, ...]) -> np.ndarray:
    try:
        return np.broadcast_to(np.asarray(mask, dtype=bool), shape)
    except ValueError as err:
        raise DimensionError(
            f"mask of shape {np.shape(mask)} does not fit tensor shape {shape}"
        ) from err


def softmax_rows(x: Tensor, mask=None) -> Tensor:
    """Softmax over the last axis; masked entries are exactly zero."""
    x = _as_tensor(x)
    logits = x.data
    if mask is not None:
        keep = _broadcast_mask(mask, logits.shape)
        if not keep.any(axis=-1).all():
            raise DegenerateRowError("softmax row without any unmasked entry")
        logits = np.where(keep, logits, -np.inf)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=-1, keepdims=True)

    def rule(grad):
        return (probs * (grad - (grad * probs).sum(axis=-1, keepdims=True)),)

    return _emit(probs, (x,), rule)


def kl_divergence_rows(p: Tensor, q: Tensor, mask=None, row_mask=None) -> Tensor:
    """Mean over rows of ``sum_i p_i (log p_i - log q_i)``.

    ``p`` is the constant (teacher) side. ``mask`` excludes entries, ``row_mask``
    (shape of all but the last axis) excludes whole rows from the mean. ``q`` is
    floored at :data:`KL_EPSILON` before the logarithm.
    """
    p, q = _as_tensor(p), _as_tensor(q)
    if p.requires_grad:
        raise ContractError("the reference distribution p must be constant")
    if p.shape != q.shape:
        raise DimensionError(f"cannot compare shapes {p.shape} and {q.shape}")
    keep = (
        np.ones(p.shape, dtype=bool) if mask is None else _broadcast_mask(mask, p.shape)
    )
    rows = (
        np.ones(p.shape[:-1], dtype=bool)
        if row_mask is None
        else _broadcast_mask(row_mask, p.shape[:-1])
    )
    n_rows = int(rows.sum())
    if n_rows == 0:
        raise ContractError("kl_divergence_rows needs at least one unmasked row")

    active = keep & rows[..., None] & (p.data > 0.0)
    q_floor = np.maximum(q.data, KL_EPSILON)
    log_p = np.log(np.where(active, p.data, 1.0))
    terms = np.where(active, p.data * (log_p - np.log(q_floor)), 0.0)

    def rule(grad):
        live = active & (q.data > KL_EPSILON)
        grad_q = np.where(live, -p.data / q_floor, 0.0) * (grad / n_rows)
        return None, grad_q

    return _emit(np.asarray(terms.sum() / n_rows), (p, q), rule)


def layer_norm(
    x: Tensor, gain: Tensor, bias: Tensor, epsilon: float = LAYER_NORM_EPSILON
) -> Tensor:
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    width = x.shape[-1]
    if width < 2:
        raise ContractError(f"layer_norm needs a width of at least 2, got {width}")
    if gain.shape != (width,) or bias.shape != (width,):
        raise DimensionError(
            f"gain {gain.shape} and bias {bias.shape} must have shape ({width},)"
        )
    centered = x.data - x.data.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered**2).mean(axis=-1, keepdims=True) + epsilon)
    normed = centered * inv_std

    def rule(grad):
        lead = tuple(range(grad.ndim - 1))
        grad_gain = (grad * normed).sum(axis=lead)
        grad_bias = grad.sum(axis=lead)
        g_hat = grad * gain.data
        grad_x = inv_std * (
            g_hat
            - g_hat.mean(axis=-1, keepdims=True)
            - normed * (g_hat * normed).mean(axis=-1, keepdims=True)
        )
        return grad_x, grad_gain, grad_bias

    return _emit(normed * gain.data + bias.data, (x, gain, bias), rule)


def cross_entropy_loss(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of ``[n × classes]`` logits (or one row and one label)."""
    logits = _as_tensor(logits)
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    single = logits.ndim == 1
    rows = logits.data.reshape(1, -1) if single else logits.data
    if rows.ndim != 2 or rows.shape[0] != labels.shape[0]:
        raise DimensionError(
            f"cannot match logits {logits.shape} with labels {labels.shape}"
        )
    if labels.min() < 0 or labels.max() >= rows.shape[1]:
        raise ContractError(f"labels must lie in [0, {rows.shape[1]})")
    shifted = rows - rows.max(axis=-1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    log_probs = shifted - log_norm
    picked = np.arange(rows.shape[0])
    value = -log_probs[picked, labels].mean()

    def rule(grad):
        delta = np.exp(log_probs)
        delta[picked, labels] -= 1.0
        delta *= grad / rows.shape[0]
        return (delta.reshape(logits.shape),)

    return _emit(np.asarray(value), (logits,), rule)


# --------------------------------------------------------------------------
# Optimisation


@dataclass
class AdamState:
    """Adam moments and hyper-parameters, keyed by parameter name."""

    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = DEFAULT_WEIGHT_DECAY
    step: int = 0
    first_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    learning_rate: Optional[float] = None,
) -> AdamState:
    """Update ``params`` in place with bias-corrected Adam.

    Only parameters present in ``grads`` move. Weight decay is decoupled from
    the moment estimates and scaled by the learning rate.
    """
    lr = state.learning_rate if learning_rate is None else float(learning_rate)
    if lr < 0.0:
        raise ContractError(f"learning rate must not be negative, got {lr!r}")
    state.step += 1
    correction1 = 1.0 - state.beta1**state.step
    correction2 = 1.0 - state.beta2**state.step
    for name, grad in grads.items():
        param = params[name]
        if grad.shape != param.shape:
            raise DimensionError(
                f"gradient {grad.shape} does not match parameter {name} {param.shape}"
            )
        first = state.first_moment.get(name)
        second = state.second_moment.get(name)
        if first is None:
            first = np.zeros_like(param.data)
            second = np.zeros_like(param.data)
        first = state.beta1 * first + (1.0 - state.beta1) * grad
        second = state.beta2 * second + (1.0 - state.beta2) * grad * grad
        state.first_moment[name] = first
        state.second_moment[name] = second
        update = (first / correction1) / (np.sqrt(second / correction2) + state.epsilon)
        param.data -= lr * (update + state.weight_decay * param.data)
    return state


def lr_schedule(step: float, total_steps: int, peak_lr: float) -> float:
    """Linear warm-up over the first 10% of steps, then linear decay to zero."""
    if total_steps <= 0:
        raise ContractError(f"total_steps must be positive, got {total_steps!r}")
    if not 0 <= step <= total_steps:
        raise ContractError(f"step {step!r} outside [0, {total_steps}]")
    warmup = WARMUP_FRACTION * total_steps
    if step < warmup:
        return peak_lr * step / warmup
    return peak_lr * (total_steps - step) / (total_steps - warmup)

