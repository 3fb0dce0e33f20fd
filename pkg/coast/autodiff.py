"""
Autodiff core — a small define-by-run reverse-mode engine over float64 numpy
arrays, sized for the handful of ops the recovery network needs, plus Adam.
"""
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from coast.errors import ContractError, DimensionError, NumericalError

DTYPE = np.float64
MAX_AXES = 4


class Tensor:
    """One node of the computation graph."""

    __slots__ = ("value", "grad", "parents", "backward_rule", "requires_grad", "name")

    def __init__(
        self,
        value,
        parents: tuple["Tensor", ...] = (),
        backward_rule: Callable[[np.ndarray], tuple] | None = None,
        requires_grad: bool = False,
        name: str = "",
    ):
        self.value = np.asarray(value, dtype=DTYPE)
        if self.value.ndim > MAX_AXES:
            raise DimensionError(f"at most {MAX_AXES} axes supported, got shape {self.value.shape}")
        if not is_grad_enabled():
            parents, backward_rule = (), None
        self.parents = parents
        self.backward_rule = backward_rule
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        # interior nodes receive their grad during backward()
        self.grad = np.zeros_like(self.value) if self.requires_grad and backward_rule is None else None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"


# ─── Grad mode ────────────────────────────────────────────────────────────────

_grad_mode = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_grad_mode, "enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Build no graph inside the block: results keep no parents and no grad buffers."""
    previous = is_grad_enabled()
    _grad_mode.enabled = False
    try:
        yield
    finally:
        _grad_mode.enabled = previous


def parameter(value, name: str = "") -> Tensor:
    """A trainable leaf. The array is copied so callers can't alias it."""
    return Tensor(np.array(value, dtype=DTYPE), requires_grad=True, name=name)


def constant(value) -> Tensor:
    return Tensor(value)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(value, parents, rule) -> Tensor:
    return Tensor(value, parents=tuple(parents), backward_rule=rule)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ─── Elementwise / affine ops ─────────────────────────────────────────────────

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("add", a, b)
    return _node(a.value + b.value, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("sub", a, b)
    return _node(a.value - b.value, (a, b), lambda g: (g, -g))


def relu(x) -> Tensor:
    x = _as_tensor(x)
    mask = x.value > 0
    return _node(np.where(mask, x.value, 0.0), (x,), lambda g: (g * mask,))


def scale(x, s) -> Tensor:
    """x times a one-element tensor `s` (a learnable step size, say)."""
    x, s = _as_tensor(x), _as_tensor(s)
    if s.value.size != 1:
        raise DimensionError(f"scale: expected a single-element factor, got shape {s.shape}")
    factor = s.value.reshape(())

    def rule(g):
        return g * factor, np.sum(g * x.value).reshape(s.shape)

    return _node(x.value * factor, (x, s), rule)


def channel_scale(x, s) -> Tensor:
    """Multiply channel c of a B×C×H×W tensor by s[c]."""
    x, s = _as_tensor(x), _as_tensor(s)
    if x.value.ndim != 4 or s.shape != (x.shape[1],):
        raise DimensionError(f"channel_scale: cannot scale {x.shape} by {s.shape}")
    factors = s.value[None, :, None, None]

    def rule(g):
        return g * factors, np.sum(g * x.value, axis=(0, 2, 3))

    return _node(x.value * factors, (x, s), rule)


def fc(z, weight, bias) -> Tensor:
    """weight @ z + bias for a length-K input and a C×K weight."""
    z, weight, bias = _as_tensor(z), _as_tensor(weight), _as_tensor(bias)
    if z.value.ndim != 1 or weight.value.ndim != 2 or weight.shape[1] != z.shape[0]:
        raise DimensionError(f"fc: weight {weight.shape} does not accept input {z.shape}")
    if bias.shape != (weight.shape[0],):
        raise DimensionError(f"fc: bias {bias.shape} does not match weight {weight.shape}")

    def rule(g):
        return weight.value.T @ g, np.outer(g, z.value), g

    return _node(weight.value @ z.value + bias.value, (z, weight, bias), rule)


def matmul(x, a: np.ndarray) -> Tensor:
    """x @ a for a batch x (B×K) and a constant matrix a (K×N)."""
    x = _as_tensor(x)
    a = np.asarray(a, dtype=DTYPE)
    if x.value.ndim != 2 or a.ndim != 2 or x.shape[1] != a.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {x.shape} by {a.shape}")
    return _node(x.value @ a, (x,), lambda g: (g @ a.T,))


def reshape(x, shape: tuple[int, ...]) -> Tensor:
    x = _as_tensor(x)
    original = x.shape
    try:
        out = x.value.reshape(shape)
    except ValueError as e:
        raise DimensionError(f"reshape: {e}") from None
    return _node(out, (x,), lambda g: (g.reshape(original),))


def rearrange(x, forward: Callable[[np.ndarray], np.ndarray], inverse: Callable[[np.ndarray], np.ndarray]) -> Tensor:
    """A pure re-indexing of x; `inverse` must undo `forward` exactly."""
    x = _as_tensor(x)
    return _node(forward(x.value), (x,), lambda g: (inverse(g),))


def mse(a, b) -> Tensor:
    """Mean of squared differences over all elements; a 0-d tensor."""
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("mse", a, b)
    diff = a.value - b.value
    n = diff.size

    def rule(g):
        ga = g * 2.0 * diff / n
        return ga, -ga

    return _node(np.mean(diff * diff), (a, b), rule)


# ─── Convolution ──────────────────────────────────────────────────────────────

def _correlate3x3(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Zero-padded, stride-1 3×3 cross-correlation: B×Cin×H×W, Cout×Cin×3×3 -> B×Cout×H×W."""
    padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    windows = sliding_window_view(padded, (3, 3), axis=(2, 3))  # B×Cin×H×W×3×3
    out = np.tensordot(windows, w, axes=([1, 4, 5], [1, 2, 3]))  # B×H×W×Cout
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv2d(x, weight, bias) -> Tensor:
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    if x.value.ndim != 4:
        raise DimensionError(f"conv2d: input must be B×C×H×W, got {x.shape}")
    if weight.value.ndim != 4 or weight.shape[2:] != (3, 3):
        raise DimensionError(f"conv2d: weight must be Cout×Cin×3×3, got {weight.shape}")
    if weight.shape[1] != x.shape[1]:
        raise DimensionError(f"conv2d: input has {x.shape[1]} channels, weight expects {weight.shape[1]}")
    if bias.shape != (weight.shape[0],):
        raise DimensionError(f"conv2d: bias {bias.shape} does not match {weight.shape[0]} output channels")

    out = _correlate3x3(x.value, weight.value) + bias.value[None, :, None, None]

    def rule(g):
        gx = None
        if x.requires_grad:
            flipped = weight.value.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1]
            gx = _correlate3x3(g, flipped)
        gw = gb = None
        if weight.requires_grad or bias.requires_grad:
            padded = np.pad(x.value, ((0, 0), (0, 0), (1, 1), (1, 1)))
            windows = sliding_window_view(padded, (3, 3), axis=(2, 3))
            gw = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    return _node(out, (x, weight, bias), rule)


# ─── Backward pass ────────────────────────────────────────────────────────────

def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """
    Propagate d(loss)/d(node) through the graph that produced `loss`.
    Leaves accumulate into .grad; interior nodes get their grad overwritten.
    """
    if loss.value.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    for node in reversed(_topological_order(loss)):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node.backward_rule is None:
            node.grad += g
            continue
        node.grad = g
        for parent, pg in zip(node.parents, node.backward_rule(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pending[key] + pg if key in pending else pg


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = np.zeros_like(p.value)


# ─── Adam ─────────────────────────────────────────────────────────────────────

@dataclass
class AdamState:
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def fresh(cls, params: Sequence[Tensor], learning_rate: float) -> "AdamState":
        if learning_rate < 0:
            raise ContractError(f"learning rate must be non-negative, got {learning_rate}")
        return cls(
            learning_rate=learning_rate,
            m=[np.zeros_like(p.value) for p in params],
            v=[np.zeros_like(p.value) for p in params],
        )


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray] | None, state: AdamState) -> AdamState:
    """One bias-corrected Adam update, in place. `grads=None` reads each param's .grad."""
    if grads is None:
        grads = [p.grad for p in params]
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise ContractError("adam_step: params, grads and optimizer state disagree in length")
    for i, (p, g) in enumerate(zip(params, grads)):
        if g.shape != p.shape or state.m[i].shape != p.shape:
            raise DimensionError(f"adam_step: gradient {g.shape} does not match parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            label = p.name or f"#{i}"
            raise NumericalError(f"non-finite gradient for parameter {label}", parameter=label)

    state.step += 1
    t = state.step
    lr, b1, b2, eps = state.learning_rate, state.beta1, state.beta2, state.epsilon
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * (g * g)
        m_hat = state.m[i] / (1.0 - b1 ** t)
        v_hat = state.v[i] / (1.0 - b2 ** t)
        p.value = p.value - lr * m_hat / (np.sqrt(v_hat) + eps)
    return state
