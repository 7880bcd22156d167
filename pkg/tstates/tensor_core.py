"""
Transformational States Tensor Core
Value-semantic arrays with reverse-mode gradients

Operations build a graph only inside an active Tape. Convolutions use
im2col with a fixed channel-major, kernel-row, kernel-column column order so
repeated evaluation of the same graph is bitwise reproducible.
"""

import threading
from contextlib import contextmanager
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from tstates.errors import DomainError, ShapeError


LEAKY_SLOPE = 0.2
BN_EPSILON = 1e-3
BN_MOMENTUM = 0.99

DEFAULT_DTYPE = np.float32

ArrayLike = Union[np.ndarray, float, int, Sequence]
BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class Mode(Enum):
    TRAIN = "train"
    EVAL = "eval"


class ActivationKind(Enum):
    LEAKY_RELU = "leaky_relu"
    TANH = "tanh"
    SIGMOID = "sigmoid"


_tape_local = threading.local()


def _active_tape() -> Optional["Tape"]:
    stack = getattr(_tape_local, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    """
    N-dimensional array node.

    Activations use N×C×H×W, convolution kernels F×C×Kh×Kw, transposed
    convolution kernels C×F×Kh×Kw.
    """

    __slots__ = ("data", "requires_grad", "name", "decay", "_parents", "_backward", "__weakref__")

    def __init__(self, data: ArrayLike, requires_grad: bool = False,
                 name: Optional[str] = None, dtype=None):
        if isinstance(data, np.generic) and dtype is None:
            data = np.asarray(data)
        if isinstance(data, np.ndarray) and dtype is None:
            array = data if data.dtype in (np.float32, np.float64) else data.astype(DEFAULT_DTYPE)
        else:
            array = np.asarray(data, dtype=dtype or DEFAULT_DTYPE)
        if not array.flags.c_contiguous:
            array = array.copy(order="C")
        self.data: np.ndarray = array
        self.requires_grad = requires_grad
        self.name = name
        self.decay = False
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[BackwardFn] = None

    @property
    def dims(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def is_finite(self) -> bool:
        """Validity scan: no NaN or Inf anywhere"""
        return bool(np.isfinite(self.data).all())

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        label = f" name={self.name}" if self.name else ""
        return f"Tensor(dims={self.dims}, dtype={self.data.dtype}{label})"

    # Arithmetic

    def __add__(self, other) -> "Tensor":
        return add(self, other)

    def __radd__(self, other) -> "Tensor":
        return add(other, self)

    def __sub__(self, other) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other) -> "Tensor":
        return mul(other, self)

    def __neg__(self) -> "Tensor":
        return mul(self, -1.0)

    def log(self) -> "Tensor":
        return log(self)

    def clip(self, low: float, high: float) -> "Tensor":
        return clip(self, low, high)

    def square(self) -> "Tensor":
        return mul(self, self)

    def mean(self) -> "Tensor":
        return mean(self)

    def sum(self) -> "Tensor":
        return sum_all(self)


class Tape:
    """
    Records differentiable operations in execution order.

    Execution order is a topological order of the graph, so reversing it
    visits every node after all of its consumers. A tape belongs to the
    thread that entered it.
    """

    def __init__(self):
        self._nodes: List[Tensor] = []

    def __enter__(self) -> "Tape":
        stack = getattr(_tape_local, "stack", None)
        if stack is None:
            stack = []
            _tape_local.stack = stack
        stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _tape_local.stack.pop()

    def record(self, node: Tensor) -> None:
        self._nodes.append(node)

    @property
    def nodes(self) -> List[Tensor]:
        return list(self._nodes)

    def __len__(self) -> int:
        return len(self._nodes)


class Gradients:
    """Gradient lookup by tensor; disconnected tensors get zeros"""

    def __init__(self, entries: Dict[int, Tuple[Tensor, np.ndarray]]):
        self._entries = entries

    def __getitem__(self, tensor: Tensor) -> np.ndarray:
        entry = self._entries.get(id(tensor))
        if entry is None or entry[0] is not tensor:
            return np.zeros_like(tensor.data)
        return entry[1]

    def __contains__(self, tensor: Tensor) -> bool:
        entry = self._entries.get(id(tensor))
        return entry is not None and entry[0] is tensor

    def __len__(self) -> int:
        return len(self._entries)


def backward(tape: Tape, loss: Tensor) -> Gradients:
    """
    Reverse-mode sweep over the tape.

    Args:
        tape: Tape the loss was computed under
        loss: Scalar result node

    Returns:
        Gradients for every tensor that requires gradients and is reachable
        from the loss
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got dims {loss.dims}")

    pending: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: Dict[int, Tuple[Tensor, np.ndarray]] = {}

    if loss._backward is None:
        if loss.requires_grad:
            leaves[id(loss)] = (loss, pending[id(loss)])
        return Gradients(leaves)

    for node in reversed(tape._nodes):
        grad = pending.pop(id(node), None)
        if grad is None:
            continue
        parent_grads = node._backward(grad)
        for parent, parent_grad in zip(node._parents, parent_grads):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            if parent._backward is None:
                if key in leaves:
                    leaves[key] = (parent, leaves[key][1] + parent_grad)
                else:
                    leaves[key] = (parent, parent_grad)
            elif key in pending:
                pending[key] = pending[key] + parent_grad
            else:
                pending[key] = parent_grad

    return Gradients(leaves)


def _as_tensor(value, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else DEFAULT_DTYPE
    return Tensor(np.asarray(value, dtype=dtype))


def _result(data: np.ndarray, parents: Tuple[Tensor, ...], backward_fn: BackwardFn) -> Tensor:
    tape = _active_tape()
    out = Tensor(np.asarray(data))
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
        tape.record(out)
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def tensor(data: ArrayLike, dtype=None, requires_grad: bool = False,
           name: Optional[str] = None) -> Tensor:
    return Tensor(np.array(data, dtype=dtype or DEFAULT_DTYPE), requires_grad=requires_grad, name=name)


def zeros(dims: Sequence[int], dtype=None) -> Tensor:
    return Tensor(np.zeros(tuple(dims), dtype=dtype or DEFAULT_DTYPE))


def zeros_like(x: Tensor) -> Tensor:
    return Tensor(np.zeros_like(x.data))


# Elementwise arithmetic

def add(a, b) -> Tensor:
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)

    def _backward(grad):
        return _unbroadcast(grad, a.dims), _unbroadcast(grad, b.dims)

    return _result(a.data + b.data, (a, b), _backward)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)

    def _backward(grad):
        return _unbroadcast(grad, a.dims), _unbroadcast(-grad, b.dims)

    return _result(a.data - b.data, (a, b), _backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)

    def _backward(grad):
        return _unbroadcast(grad * b.data, a.dims), _unbroadcast(grad * a.data, b.dims)

    return _result(a.data * b.data, (a, b), _backward)


def log(x: Tensor) -> Tensor:
    def _backward(grad):
        return (grad / x.data,)

    return _result(np.log(x.data), (x,), _backward)


def clip(x: Tensor, low: float, high: float) -> Tensor:
    inside = (x.data >= low) & (x.data <= high)

    def _backward(grad):
        return (grad * inside,)

    return _result(np.clip(x.data, low, high), (x,), _backward)


def sum_all(x: Tensor) -> Tensor:
    def _backward(grad):
        return (np.broadcast_to(grad, x.dims).copy(),)

    return _result(np.asarray(x.data.sum(), dtype=x.dtype), (x,), _backward)


def mean(x: Tensor) -> Tensor:
    count = x.size

    def _backward(grad):
        return (np.full(x.dims, grad / count, dtype=x.dtype),)

    return _result(np.asarray(x.data.mean(), dtype=x.dtype), (x,), _backward)


# Activations

_kink_local = threading.local()


@contextmanager
def record_kinks() -> Iterator[List[np.ndarray]]:
    """Collect the sign pattern of every leaky_relu input evaluated inside the block"""
    patterns: List[np.ndarray] = []
    previous = getattr(_kink_local, "patterns", None)
    _kink_local.patterns = patterns
    try:
        yield patterns
    finally:
        _kink_local.patterns = previous


def leaky_relu(x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    positive = x.data > 0
    patterns = getattr(_kink_local, "patterns", None)
    if patterns is not None:
        patterns.append(positive)
    scale = np.where(positive, 1.0, slope).astype(x.dtype)

    def _backward(grad):
        return (grad * scale,)

    return _result(x.data * scale, (x,), _backward)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def _backward(grad):
        return (grad * (1.0 - out * out),)

    return _result(out, (x,), _backward)


def sigmoid(x: Tensor) -> Tensor:
    out = (0.5 * (1.0 + np.tanh(0.5 * x.data))).astype(x.dtype)

    def _backward(grad):
        return (grad * out * (1.0 - out),)

    return _result(out, (x,), _backward)


_ACTIVATIONS = {
    ActivationKind.LEAKY_RELU: leaky_relu,
    ActivationKind.TANH: tanh,
    ActivationKind.SIGMOID: sigmoid,
}


def activation(x: Tensor, kind: Union[ActivationKind, str]) -> Tensor:
    """Apply leaky_relu, tanh or sigmoid elementwise"""
    return _ACTIVATIONS[ActivationKind(kind)](x)


def dropout(x: Tensor, rate: float, mode: Mode, rng: Optional[np.random.Generator]) -> Tensor:
    """
    Inverted dropout.

    Train mode zeroes each element with probability `rate` and scales the
    survivors by 1/(1-rate); eval mode returns the input unchanged.
    """
    if not 0.0 <= rate < 1.0:
        raise DomainError(f"dropout rate must lie in [0, 1), got {rate}")
    if Mode(mode) is Mode.EVAL or rate == 0.0:
        return x
    if rng is None:
        raise DomainError("train-mode dropout needs a random generator")

    mask = (rng.random(x.dims) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)

    def _backward(grad):
        return (grad * mask,)

    return _result(x.data * mask, (x,), _backward)


# Channel plumbing

def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ShapeError(f"concat_channels expects N×C×H×W tensors, got {a.dims} and {b.dims}")
    if (a.dims[0], a.dims[2], a.dims[3]) != (b.dims[0], b.dims[2], b.dims[3]):
        raise ShapeError(f"concat_channels needs matching N,H,W, got {a.dims} and {b.dims}")
    split = a.dims[1]

    def _backward(grad):
        return grad[:, :split], grad[:, split:]

    return _result(np.concatenate([a.data, b.data.astype(a.dtype)], axis=1), (a, b), _backward)


def channel_slice(x: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start <= stop <= x.dims[1]:
        raise ShapeError(f"channel range [{start}, {stop}) outside {x.dims[1]} channels")

    def _backward(grad):
        full = np.zeros_like(x.data)
        full[:, start:stop] = grad
        return (full,)

    return _result(x.data[:, start:stop].copy(), (x,), _backward)


def split_channels(x: Tensor, at: int) -> Tuple[Tensor, Tensor]:
    return channel_slice(x, 0, at), channel_slice(x, at, x.dims[1])


# Convolution

@dataclass(frozen=True)
class ConvSpec:
    """Kernel size, stride and filter count; padding follows same_padding"""
    kernel: Tuple[int, int]
    stride: int
    filters: int

    def __post_init__(self):
        if self.stride not in (1, 2):
            raise DomainError(f"stride must be 1 or 2, got {self.stride}")
        if self.kernel[0] < 1 or self.kernel[1] < 1 or self.filters < 1:
            raise DomainError(f"invalid convolution spec {self}")


def same_padding(size: int, kernel: int, stride: int) -> Tuple[int, int]:
    """
    SAME-halving padding for one spatial axis.

    A stride-2 4×4 convolution pads (1, 1) so 64 becomes 32; a stride-1 4×4
    convolution pads (1, 2) so the size is preserved.
    """
    out = size // stride
    total = max((out - 1) * stride + kernel - size, 0)
    return total // 2, total - total // 2


def _im2col(padded: np.ndarray, kh: int, kw: int, stride: int,
            out_h: int, out_w: int) -> np.ndarray:
    n, c = padded.shape[:2]
    cols = np.empty((n, c, kh, kw, out_h, out_w), dtype=padded.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = padded[:, :, i:i + stride * out_h:stride, j:j + stride * out_w:stride]
    return cols.reshape(n, c * kh * kw, out_h * out_w)


def _col2im(cols: np.ndarray, padded_shape: Tuple[int, ...], kh: int, kw: int,
            stride: int, out_h: int, out_w: int) -> np.ndarray:
    n, c = padded_shape[:2]
    cols = cols.reshape(n, c, kh, kw, out_h, out_w)
    padded = np.zeros(padded_shape, dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            padded[:, :, i:i + stride * out_h:stride, j:j + stride * out_w:stride] += cols[:, :, i, j]
    return padded


def _pad_box(h: int, w: int, kh: int, kw: int, stride: int) -> Tuple[Tuple[int, int], Tuple[int, int]]:
    return same_padding(h, kh, stride), same_padding(w, kw, stride)


def _correlate(x: np.ndarray, w: np.ndarray, stride: int) -> Tuple[np.ndarray, np.ndarray]:
    """Strided SAME correlation of x (N×C×H×W) with w (F×C×Kh×Kw); returns output and columns"""
    n, _, h, wd = x.shape
    f, _, kh, kw = w.shape
    (pt, pb), (pl, pr) = _pad_box(h, wd, kh, kw, stride)
    padded = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    out_h, out_w = h // stride, wd // stride
    cols = _im2col(padded, kh, kw, stride, out_h, out_w)
    out = np.matmul(w.reshape(f, -1), cols)
    return out.reshape(n, f, out_h, out_w), cols


def _correlate_adjoint(y: np.ndarray, w: np.ndarray, stride: int,
                       out_hw: Tuple[int, int]) -> np.ndarray:
    """Adjoint of _correlate with respect to its input: y (N×F×h×w) -> N×C×H×W"""
    n, f, h, wd = y.shape
    _, c, kh, kw = w.shape
    out_h, out_w = out_hw
    (pt, pb), (pl, pr) = _pad_box(out_h, out_w, kh, kw, stride)
    padded_shape = (n, c, out_h + pt + pb, out_w + pl + pr)
    cols = np.matmul(w.reshape(f, -1).T, y.reshape(n, f, h * wd))
    padded = _col2im(cols, padded_shape, kh, kw, stride, h, wd)
    return padded[:, :, pt:pt + out_h, pl:pl + out_w]


def _kernel_grad(dy: np.ndarray, cols: np.ndarray, kernel_dims: Tuple[int, ...]) -> np.ndarray:
    n, f = dy.shape[:2]
    grad = np.matmul(dy.reshape(n, f, -1), cols.transpose(0, 2, 1)).sum(axis=0)
    return grad.reshape(kernel_dims)


def _check_conv(x: Tensor, kernel: Tensor, bias: Optional[Tensor], spec: ConvSpec,
                in_axis: int, out_axis: int) -> None:
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError(f"convolution expects 4-d input and kernel, got {x.dims} and {kernel.dims}")
    if x.size == 0:
        raise DomainError(f"convolution input is empty: {x.dims}")
    if kernel.dims[in_axis] != x.dims[1]:
        raise ShapeError(f"input has {x.dims[1]} channels, kernel {kernel.dims} expects {kernel.dims[in_axis]}")
    if tuple(kernel.dims[2:]) != tuple(spec.kernel) or kernel.dims[out_axis] != spec.filters:
        raise ShapeError(f"kernel {kernel.dims} does not match {spec}")
    if bias is not None and bias.dims != (spec.filters,):
        raise ShapeError(f"bias {bias.dims} does not match {spec.filters} filters")


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor], spec: ConvSpec) -> Tensor:
    """
    SAME-padded strided convolution.

    Args:
        x: Input N×C×H×W
        kernel: Kernel F×C×Kh×Kw
        bias: Bias of length F, or None
        spec: Kernel size, stride and filter count

    Returns:
        Output N×F×(H/stride)×(W/stride)
    """
    _check_conv(x, kernel, bias, spec, in_axis=1, out_axis=0)
    if x.dims[2] % spec.stride or x.dims[3] % spec.stride:
        raise ShapeError(f"spatial dims {x.dims[2:]} not divisible by stride {spec.stride}")

    out, cols = _correlate(x.data, kernel.data, spec.stride)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)
    in_hw = (x.dims[2], x.dims[3])

    def _backward(grad):
        dx = _correlate_adjoint(grad, kernel.data, spec.stride, in_hw) if x.requires_grad else None
        dk = _kernel_grad(grad, cols, kernel.dims) if kernel.requires_grad else None
        db = grad.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        return dx, dk, db

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _result(out, parents, _backward)


def conv2d_transposed(x: Tensor, kernel: Tensor, bias: Optional[Tensor], spec: ConvSpec) -> Tensor:
    """
    Transposed convolution, the adjoint of conv2d with the same kernel.

    Args:
        x: Input N×C×H×W
        kernel: Kernel C×F×Kh×Kw (the conv2d kernel it is the adjoint of)
        bias: Bias of length F, or None
        spec: Kernel size, stride and filter count

    Returns:
        Output N×F×(stride·H)×(stride·W)
    """
    _check_conv(x, kernel, bias, spec, in_axis=0, out_axis=1)

    out_hw = (x.dims[2] * spec.stride, x.dims[3] * spec.stride)
    out = _correlate_adjoint(x.data, kernel.data, spec.stride, out_hw)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)

    def _backward(grad):
        dx, cols = _correlate(grad, kernel.data, spec.stride)
        dk = _kernel_grad(x.data, cols, kernel.dims) if kernel.requires_grad else None
        db = grad.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        return (dx if x.requires_grad else None), dk, db

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _result(np.ascontiguousarray(out), parents, _backward)


# Batch normalization

@dataclass
class BatchNormState:
    """Running statistics of one batch-norm layer"""
    running_mean: np.ndarray
    running_var: np.ndarray

    @classmethod
    def fresh(cls, channels: int, dtype=None) -> "BatchNormState":
        dtype = dtype or DEFAULT_DTYPE
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, mode: Mode, state: BatchNormState,
               momentum: float = BN_MOMENTUM, eps: float = BN_EPSILON) -> Tensor:
    """
    Per-channel normalization over N, H and W.

    Train mode uses batch statistics and folds them into the running
    statistics; eval mode uses the running statistics.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"batch_norm expects N×C×H×W, got {x.dims}")
    channels = x.dims[1]
    if gamma.dims != (channels,) or beta.dims != (channels,):
        raise ShapeError(f"batch_norm parameters {gamma.dims}/{beta.dims} do not match {channels} channels")

    shape = (1, channels, 1, 1)
    g = gamma.data.reshape(shape)

    if Mode(mode) is Mode.TRAIN:
        count = x.dims[0] * x.dims[2] * x.dims[3]
        if count < 2:
            raise DomainError(f"train-mode batch_norm needs at least 2 values per channel, got {count}")
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
        xhat = (x.data - mu.reshape(shape)) * inv_std.reshape(shape)

        state.running_mean[...] = momentum * state.running_mean + (1.0 - momentum) * mu
        state.running_var[...] = momentum * state.running_var + (1.0 - momentum) * var

        def _backward(grad):
            dxhat = grad * g
            dx = (inv_std.reshape(shape) / count) * (
                count * dxhat
                - dxhat.sum(axis=(0, 2, 3), keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            )
            return dx, (grad * xhat).sum(axis=(0, 2, 3)), grad.sum(axis=(0, 2, 3))
    else:
        inv_std = (1.0 / np.sqrt(state.running_var + eps)).astype(x.dtype)
        xhat = (x.data - state.running_mean.reshape(shape)) * inv_std.reshape(shape)

        def _backward(grad):
            dx = grad * g * inv_std.reshape(shape)
            return dx, (grad * xhat).sum(axis=(0, 2, 3)), grad.sum(axis=(0, 2, 3))

    out = xhat * g + beta.data.reshape(shape)
    return _result(out.astype(x.dtype), (x, gamma, beta), _backward)


def parameters_finite(tensors: Iterable[Tensor]) -> bool:
    return all(t.is_finite() for t in tensors)


def keyed_rng(*keys: int) -> np.random.Generator:
    """Counter-based generator whose stream is a pure function of the keys"""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(k) for k in keys])))
