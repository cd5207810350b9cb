"""
Tensors with reverse-mode automatic differentiation.

Every primitive the embedding network and the losses need lives here:
conv2d (3x3, stride 1, padding 1), ceil-mode 2x2 max pooling, ReLU,
batch normalization, fully connected layers and the handful of elementwise
and reduction ops the losses are written in.

Operations are recorded on the active ``Tape`` (``with Tape() as tape:``)
when at least one input requires gradients. Without an active tape nothing
is recorded, which is how evaluation-mode forwards run.

Convolution uses im2col followed by one ``numpy.tensordot`` contraction over
(input channel, kernel row, kernel column). That contraction order is the
summation order for both the forward output and the weight gradient.
"""
import logging
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import ContractError, DegenerateBatchError, NumericError, ShapeError

logger = logging.getLogger(__name__)

BN_EPSILON = 1e-5
BN_MOMENTUM = 0.1

ArrayLike = Union[np.ndarray, float, int, Sequence]
BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

_FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """
    An N-dimensional float buffer (C order) with an optional gradient.

    ``data`` is a numpy array of dtype float32 or float64; ``grad`` is either
    None or an array of identical shape.
    """

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data: ArrayLike, requires_grad: bool = False,
                 name: Optional[str] = None, dtype=None):
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype.type in _FLOAT_DTYPES:
                dtype = data.dtype
            elif isinstance(data, Tensor):
                dtype = data.data.dtype
            else:
                dtype = np.float32
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.ascontiguousarray(data, dtype=dtype)
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

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    # Operator sugar over the module-level primitives.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, index):
        return take_rows(self, index)

    def sum(self, axis: Optional[int] = None) -> "Tensor":
        return tsum(self, axis)

    def mean(self) -> "Tensor":
        return mean(self)


@dataclass
class Node:
    """One recorded primitive: output = op(inputs), plus its backward closure."""
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: BackwardFn


@dataclass
class Tape:
    """
    Ordered record of primitives. Nodes are appended as ops execute, so each
    node's inputs were produced by earlier nodes (or are leaves).
    """
    nodes: List[Node] = field(default_factory=list)

    def record(self, op: str, inputs: Tuple[Tensor, ...], output: Tensor, backward_fn: BackwardFn) -> None:
        self.nodes.append(Node(op, inputs, output, backward_fn))

    def reset(self) -> None:
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _tape_stack().pop()


_local = threading.local()


def _tape_stack() -> List[Optional[Tape]]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = []
        _local.stack = stack
    return stack


def active_tape() -> Optional[Tape]:
    stack = _tape_stack()
    return stack[-1] if stack else None


@contextmanager
def no_tape():
    """Run a block with recording suspended, even inside an outer Tape."""
    stack = _tape_stack()
    stack.append(None)
    try:
        yield
    finally:
        stack.pop()


def as_tensor(value, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(value), dtype=dtype)


def _emit(op: str, out_data: np.ndarray, inputs: Tuple[Tensor, ...], backward_fn: BackwardFn) -> Tensor:
    if not np.all(np.isfinite(out_data)):
        raise NumericError(f"non-finite values produced by {op}")
    requires_grad = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=requires_grad)
    tape = active_tape()
    if tape is not None and requires_grad:
        tape.record(op, inputs, out, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Elementwise and reduction primitives
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit("add", a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _emit("sub", a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _emit("mul", a.data * b.data, (a, b), backward)


def square(x: Tensor) -> Tensor:
    def backward(g):
        return (2.0 * x.data * g,)

    return _emit("square", x.data * x.data, (x,), backward)


def tsum(x: Tensor, axis: Optional[int] = None) -> Tensor:
    """Sum over one axis, or over everything when axis is None."""
    if axis is None:
        out = np.asarray(x.data.sum(), dtype=x.dtype)

        def backward(g):
            return (np.broadcast_to(g, x.shape).astype(x.dtype),)
    else:
        axis = axis % x.ndim
        out = x.data.sum(axis=axis)

        def backward(g):
            return (np.broadcast_to(np.expand_dims(g, axis), x.shape).astype(x.dtype),)

    return _emit("sum", out, (x,), backward)


def mean(x: Tensor) -> Tensor:
    count = x.size
    out = np.asarray(x.data.sum() / count, dtype=x.dtype)

    def backward(g):
        return (np.full(x.shape, g / count, dtype=x.dtype),)

    return _emit("mean", out, (x,), backward)


def reshape(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    original = x.shape

    def backward(g):
        return (g.reshape(original),)

    return _emit("reshape", x.data.reshape(shape), (x,), backward)


def flatten(x: Tensor) -> Tensor:
    """Collapse every axis after the batch axis."""
    return reshape(x, (x.shape[0], -1))


def take_rows(x: Tensor, index) -> Tensor:
    """Index along the leading axis (int or slice)."""
    if not isinstance(index, (int, np.integer, slice)):
        raise ContractError(f"only int or slice indexing on the leading axis is supported, got {index!r}")

    def backward(g):
        full = np.zeros(x.shape, dtype=x.dtype)
        full[index] = g
        return (full,)

    return _emit("take_rows", x.data[index].copy(), (x,), backward)


def concat_rows(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate along the leading axis."""
    tensors = tuple(tensors)
    if not tensors:
        raise ContractError("concat_rows needs at least one tensor")
    bounds = np.cumsum([0] + [t.shape[0] for t in tensors])

    def backward(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(tensors)))

    return _emit("concat_rows", np.concatenate([t.data for t in tensors], axis=0), tensors, backward)


def relu(x: Tensor) -> Tensor:
    """max(0, x); the subgradient at exactly 0 is 0."""
    mask = x.data > 0

    def backward(g):
        return (g * mask,)

    return _emit("relu", np.where(mask, x.data, 0).astype(x.dtype), (x,), backward)


def sigmoid_bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Elementwise binary cross-entropy of sigmoid(logits) against 0/1 targets."""
    z = logits.data
    y = np.asarray(targets, dtype=logits.dtype).reshape(z.shape)
    out = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))

    def backward(g):
        prob = 1.0 / (1.0 + np.exp(-z))
        return (g * (prob - y),)

    return _emit("sigmoid_bce", out.astype(logits.dtype), (logits,), backward)


# ---------------------------------------------------------------------------
# Layer primitives
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, weight: Tensor, bias: Tensor, padding: int = 1) -> Tensor:
    """3x3 convolution, stride 1, zero padding 1: [N,C,H,W] -> [N,K,H,W]."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects [N,C,H,W] input, got {x.shape}")
    if weight.ndim != 4 or weight.shape[2:] != (3, 3):
        raise ShapeError(f"conv2d expects [K,C,3,3] weights, got {weight.shape}")
    if padding != 1:
        raise ShapeError(f"conv2d supports padding 1 only, got {padding}")
    n, c, h, w = x.shape
    k = weight.shape[0]
    if weight.shape[1] != c:
        raise ShapeError(f"conv2d channel mismatch: input has {c}, weight expects {weight.shape[1]}")
    if bias.shape != (k,):
        raise ShapeError(f"conv2d bias must have shape ({k},), got {bias.shape}")

    padded = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    # windows[n, c, i, j, di, dj] = padded[n, c, i + di, j + dj]
    windows = sliding_window_view(padded, (3, 3), axis=(2, 3))
    out = np.tensordot(windows, weight.data, axes=([1, 4, 5], [1, 2, 3]))
    out = out.transpose(0, 3, 1, 2) + bias.data[None, :, None, None]

    def backward(g):
        grad_bias = g.sum(axis=(0, 2, 3))
        grad_weight = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))
        cols = np.tensordot(g, weight.data, axes=([1], [0]))  # [N,H,W,C,3,3]
        grad_padded = np.zeros(padded.shape, dtype=x.dtype)
        for di in range(3):
            for dj in range(3):
                grad_padded[:, :, di:di + h, dj:dj + w] += cols[:, :, :, :, di, dj].transpose(0, 3, 1, 2)
        return grad_padded[:, :, 1:-1, 1:-1], grad_weight, grad_bias

    return _emit("conv2d", np.ascontiguousarray(out, dtype=x.dtype), (x, weight, bias), backward)


def pooled_extent(extent: int) -> int:
    """Spatial extent after one ceil-mode 2x2/stride-2 pool."""
    return (extent + 1) // 2


def maxpool2d_ceil(x: Tensor) -> Tensor:
    """
    2x2 max pooling with stride 2 and ceil rounding. Windows hanging over the
    right/bottom edge pool over the elements they do cover. The gradient goes
    to the first (row-major) maximum of each window.
    """
    if x.ndim != 4 or min(x.shape[2:]) < 1:
        raise ShapeError(f"maxpool2d_ceil expects [N,C,H,W] with H, W >= 1, got {x.shape}")
    n, c, h, w = x.shape
    ho, wo = pooled_extent(h), pooled_extent(w)
    padded = np.full((n, c, 2 * ho, 2 * wo), -np.inf, dtype=x.dtype)
    padded[:, :, :h, :w] = x.data
    windows = padded.reshape(n, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, 4)
    argmax = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, argmax[..., None], axis=-1)[..., 0]

    def backward(g):
        grad_windows = np.zeros((n, c, ho, wo, 4), dtype=x.dtype)
        np.put_along_axis(grad_windows, argmax[..., None], g[..., None], axis=-1)
        grad = grad_windows.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * ho, 2 * wo)
        return (np.ascontiguousarray(grad[:, :, :h, :w]),)

    return _emit("maxpool2d_ceil", np.ascontiguousarray(out), (x,), backward)


@dataclass
class BatchNormState:
    """Running statistics of one batch-normalization layer."""
    running_mean: np.ndarray
    running_var: np.ndarray

    @classmethod
    def for_channels(cls, channels: int, dtype=np.float32) -> "BatchNormState":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, mode: str = "train",
              momentum: float = BN_MOMENTUM, eps: float = BN_EPSILON) -> Tensor:
    """
    Per-channel batch normalization over [N, C, ...].

    Train mode normalizes with the batch mean and (biased) variance and moves
    the running statistics toward them; the running variance is updated with
    the unbiased estimate. Eval mode normalizes with the running statistics.
    """
    if x.ndim < 2:
        raise ShapeError(f"batchnorm expects [N, C, ...], got {x.shape}")
    channels = x.shape[1]
    if gamma.shape != (channels,) or beta.shape != (channels,):
        raise ShapeError(f"batchnorm gamma/beta must have shape ({channels},)")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, channels) + (1,) * (x.ndim - 2)

    if mode == "train":
        if x.shape[0] < 2:
            raise DegenerateBatchError("train-mode batch normalization needs a batch of at least 2")
        count = x.size // channels
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu.reshape(bshape)) * inv_std.reshape(bshape)
        unbiased = var * (count / max(count - 1, 1))
        state.running_mean[...] = (1 - momentum) * state.running_mean + momentum * mu
        state.running_var[...] = (1 - momentum) * state.running_var + momentum * unbiased

        def backward(g):
            grad_gamma = (g * xhat).sum(axis=axes)
            grad_beta = g.sum(axis=axes)
            dxhat = g * gamma.data.reshape(bshape)
            grad_x = (inv_std.reshape(bshape) / count) * (
                count * dxhat
                - dxhat.sum(axis=axes).reshape(bshape)
                - xhat * (dxhat * xhat).sum(axis=axes).reshape(bshape)
            )
            return grad_x.astype(x.dtype), grad_gamma, grad_beta
    elif mode == "eval":
        inv_std = 1.0 / np.sqrt(state.running_var + eps)
        xhat = (x.data - state.running_mean.reshape(bshape)) * inv_std.reshape(bshape)

        def backward(g):
            grad_x = g * (gamma.data * inv_std).reshape(bshape)
            return grad_x.astype(x.dtype), (g * xhat).sum(axis=axes), g.sum(axis=axes)
    else:
        raise ContractError(f"batchnorm mode must be 'train' or 'eval', got {mode!r}")

    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)
    return _emit("batchnorm", out.astype(x.dtype), (x, gamma, beta), backward)


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map [N,D] @ [D,E] + [E]."""
    if x.ndim != 2 or weight.ndim != 2:
        raise ShapeError(f"fully_connected expects [N,D] and [D,E], got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[0]:
        raise ShapeError(f"fully_connected dimension mismatch: {x.shape[1]} vs {weight.shape[0]}")
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"fully_connected bias must have shape ({weight.shape[1]},), got {bias.shape}")

    def backward(g):
        return g @ weight.data.T, x.data.T @ g, g.sum(axis=0)

    return _emit("fully_connected", x.data @ weight.data + bias.data, (x, weight, bias), backward)


# ---------------------------------------------------------------------------
# Backward pass and gradient checking
# ---------------------------------------------------------------------------

def backward(loss: Tensor, tape: Tape) -> List[Tensor]:
    """
    Propagate d(loss)/d(.) through the tape into every leaf that requires
    gradients. Leaf ``grad`` buffers accumulate, so calling this twice without
    zeroing doubles them. Returns the leaves that received a gradient.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: Dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    seen: Dict[int, Tensor] = {id(loss): loss}

    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for tensor, grad in zip(node.inputs, node.backward(g)):
            if grad is None or not tensor.requires_grad:
                continue
            if not np.all(np.isfinite(grad)):
                raise NumericError(f"non-finite gradient flowing out of {node.op}", parameter=tensor.name)
            key = id(tensor)
            seen[key] = tensor
            grads[key] = grads[key] + grad if key in grads else grad

    leaves = []
    for key, grad in grads.items():
        tensor = seen[key]
        if not tensor.requires_grad:
            continue
        grad = np.asarray(grad, dtype=tensor.dtype).reshape(tensor.shape)
        tensor.grad = grad.copy() if tensor.grad is None else tensor.grad + grad
        leaves.append(tensor)
    return leaves


def grad_check(build_loss: Callable[[], Tensor], parameters: Union[Mapping[str, Tensor], Sequence[Tensor]],
               step: float = 1e-4, floor: float = 1e-8) -> float:
    """
    Compare autodiff gradients with central finite differences.

    ``build_loss`` must rebuild the scalar loss from the current parameter
    values and be deterministic. Each scalar entry scores
    |autodiff - fd| / max(|autodiff|, |fd|, floor); the maximum over every
    entry of every parameter is returned.
    """
    if isinstance(parameters, Mapping):
        named = dict(parameters)
    else:
        named = {p.name or f"param{i}": p for i, p in enumerate(parameters)}

    def evaluate() -> float:
        with no_tape():
            value = build_loss().item()
        if not np.isfinite(value):
            raise NumericError("grad_check loss is not finite")
        return value

    for p in named.values():
        p.zero_grad()
    with Tape() as tape:
        loss = build_loss()
    if not np.isfinite(loss.data).all():
        raise NumericError("grad_check loss is not finite")
    backward(loss, tape)

    worst = 0.0
    for name, p in named.items():
        analytic = np.zeros(p.shape) if p.grad is None else p.grad.astype(np.float64)
        numeric = np.zeros(p.shape)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + step
            upper = evaluate()
            flat[i] = original - step
            lower = evaluate()
            flat[i] = original
            numeric.reshape(-1)[i] = (upper - lower) / (2 * step)
        scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
        error = float(np.max(np.abs(analytic - numeric) / scale)) if p.size else 0.0
        logger.debug(f"grad_check {name}: max relative error {error:.3e}")
        worst = max(worst, error)
    return worst
