"""
Dense tensors with reverse-mode differentiation.

Only what the separation and clue networks need: elementwise arithmetic with
numpy broadcasting, matmul/affine maps, 1-D (transposed) convolutions,
framing/overlap-add, softmax, layer norm, attention, and a finite-difference
gradient checker. Every op checks its output for non-finite values.

Also home of the named parameter store and the checkpoint file format.
"""

import hashlib
import json
import math
import os
import struct
from typing import Any, Callable, Dict, Iterable, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

from errors import ConfigError, DimensionError, FormatError, InputError, NumericError

DTYPE = np.float64
LAYER_NORM_EPS = 1e-5
# central differences of an identically-zero gradient land around 1e-10
GRAD_CHECK_ATOL = 1e-7


def set_precision(name: str):
    """Switch the working dtype ("float64" default, "float32" optional)."""
    global DTYPE
    dtypes = {"float64": np.float64, "float32": np.float32}
    if name not in dtypes:
        raise ConfigError(f"Unknown precision '{name}'")
    DTYPE = dtypes[name]


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """An n-d array plus the tape entry that produced it."""

    def __init__(self, data, requires_grad: bool = False,
                 parents: Tuple["Tensor", ...] = (), backward_fn: Optional[Callable] = None,
                 op: str = "leaf"):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents = parents
        self._backward = backward_fn
        self._op = op

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def _accumulate(self, grad: np.ndarray):
        if not self.requires_grad:
            return
        grad = _unbroadcast(grad, self.shape)
        if self.grad is None:
            self.grad = np.array(grad, dtype=DTYPE)
        else:
            self.grad = self.grad + grad

    def backward(self, grad: Optional[np.ndarray] = None):
        """Propagate gradients from this tensor to every leaf that needs one."""
        if not self.requires_grad:
            raise NumericError("backward() called on a tensor that does not require grad")
        if grad is None:
            if self.size != 1:
                raise DimensionError("backward() without a seed gradient needs a scalar output")
            grad = np.ones(self.shape, dtype=DTYPE)

        # iterative topological sort; graphs are deep enough to hit the recursion limit
        order: List[Tensor] = []
        visited = set()
        stack: List[Tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))

        self._accumulate(np.asarray(grad, dtype=DTYPE))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar
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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


class Parameter(Tensor):
    """A trainable leaf tensor with a stable name."""

    def __init__(self, data, name: str):
        super().__init__(np.array(data, dtype=DTYPE), requires_grad=True, op="param")
        self.name = name
        self.grad = np.zeros_like(self.data)

    @property
    def value(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter(name={self.name!r}, shape={self.shape})"


TensorLike = Union[Tensor, np.ndarray, float, int, Sequence]


def as_tensor(value: TensorLike) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def constant(value: TensorLike) -> Tensor:
    """A tensor that never receives gradient."""
    return Tensor(value)


def _make(data: np.ndarray, parents: Tuple[Tensor, ...], backward_fn: Callable, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"Non-finite values produced by '{op}'")
    requires_grad = any(p.requires_grad for p in parents)
    if not requires_grad:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, parents=parents, backward_fn=backward_fn, op=op)


# elementwise arithmetic

def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        a._accumulate(g)
        b._accumulate(g)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        a._accumulate(g)
        b._accumulate(-g)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            b._accumulate(g * a.data)

    return _make(a.data * b.data, (a, b), backward, "mul")


def div(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(g / b.data)
        if b.requires_grad:
            b._accumulate(-g * a.data / (b.data ** 2))

    return _make(out, (a, b), backward, "div")


def log(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)

    def backward(g):
        a._accumulate(g / a.data)

    return _make(out, (a,), backward, "log")


# shape ops

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError as e:
        raise DimensionError(f"Cannot reshape {a.shape} to {tuple(shape)}") from e

    def backward(g):
        a._accumulate(g.reshape(a.shape))

    return _make(out, (a,), backward, "reshape")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        a._accumulate(g.transpose(inverse))

    return _make(a.data.transpose(axes), (a,), backward, "transpose")


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def getitem(a: Tensor, index) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        full = np.zeros(a.shape, dtype=DTYPE)
        np.add.at(full, index, g)
        a._accumulate(full)

    return _make(a.data[index], (a,), backward, "getitem")


def pad_last(a: Tensor, before: int, after: int) -> Tensor:
    """Zero-pad the last axis."""
    a = as_tensor(a)
    widths = [(0, 0)] * (a.ndim - 1) + [(before, after)]
    n = a.shape[-1]

    def backward(g):
        a._accumulate(g[..., before:before + n])

    return _make(np.pad(a.data, widths), (a,), backward, "pad")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise DimensionError(f"Cannot concatenate shapes {[t.shape for t in tensors]}") from e

    def backward(g):
        offsets = np.cumsum([0] + sizes)
        for t, start, stop in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                index = [slice(None)] * g.ndim
                index[axis] = slice(int(start), int(stop))
                t._accumulate(g[tuple(index)])

    return _make(out, tuple(tensors), backward, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise DimensionError(f"Cannot stack shapes {[t.shape for t in tensors]}") from e

    def backward(g):
        for i, t in enumerate(tensors):
            if t.requires_grad:
                t._accumulate(np.take(g, i, axis=axis))

    return _make(out, tuple(tensors), backward, "stack")


# reductions

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.shape))
            return
        expanded = g if keepdims else np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(expanded, a.shape))

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul needs operands with at least two axes")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            b._accumulate(np.swapaxes(a.data, -1, -2) @ g)

    return _make(a.data @ b.data, (a, b), backward, "matmul")


def affine(input: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """out = weight . input + bias over the last axis, broadcast over leading axes."""
    x = as_tensor(input)
    if weight.ndim != 2:
        raise DimensionError(f"affine weight must be 2-D, got {weight.shape}")
    if x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"affine expects last axis {weight.shape[1]}, got {x.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise DimensionError(f"affine bias shape {bias.shape} does not match {weight.shape[0]}")

    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g @ weight.data)
        g2 = g.reshape(-1, weight.shape[0])
        if weight.requires_grad:
            weight._accumulate(g2.T @ x.data.reshape(-1, weight.shape[1]))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g2.sum(axis=0))

    return _make(out, parents, backward, "affine")


# nonlinearities

def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        a._accumulate(g * (a.data > 0))

    return _make(np.maximum(a.data, 0.0), (a,), backward, "relu")


def sigmoid(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = expit(a.data)

    def backward(g):
        a._accumulate(g * out * (1.0 - out))

    return _make(out, (a,), backward, "sigmoid")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        a._accumulate(out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return _make(out, (a,), backward, "softmax")


def layer_norm(a: Tensor, axis: int = -1, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize to zero mean and unit variance along ``axis`` (no affine)."""
    a = as_tensor(a)
    mu = a.data.mean(axis=axis, keepdims=True)
    centered = a.data - mu
    var = (centered ** 2).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out = centered * inv

    def backward(g):
        g_mean = g.mean(axis=axis, keepdims=True)
        gy_mean = (g * out).mean(axis=axis, keepdims=True)
        a._accumulate(inv * (g - g_mean - out * gy_mean))

    return _make(out, (a,), backward, "layer_norm")


def elementwise(kind: str, input: Tensor, axis: Optional[int] = None) -> Tensor:
    """Dispatch to relu | sigmoid | softmax | layer_norm."""
    if kind == "relu":
        return relu(input)
    if kind == "sigmoid":
        return sigmoid(input)
    if kind in ("softmax", "layer_norm"):
        if axis is None:
            raise InputError(f"{kind} needs an axis")
        return softmax(input, axis) if kind == "softmax" else layer_norm(input, axis)
    raise InputError(f"Unknown elementwise kind '{kind}'")


# convolutions

def conv1d(input: Tensor, kernel: Tensor, stride: int = 1) -> Tensor:
    """Valid 1-D convolution. input [..., F_in, T], kernel [F_out, F_in, K]."""
    x = as_tensor(input)
    if kernel.ndim != 3:
        raise DimensionError(f"conv1d kernel must be [F_out, F_in, K], got {kernel.shape}")
    if stride < 1:
        raise InputError("conv1d stride must be >= 1")
    f_out, f_in, k_size = kernel.shape
    if x.ndim < 2 or x.shape[-2] != f_in:
        raise DimensionError(f"conv1d expects {f_in} input channels, got shape {x.shape}")
    length = x.shape[-1]
    if length < k_size:
        raise DimensionError(f"conv1d input length {length} is shorter than kernel {k_size}")

    t_out = (length - k_size) // stride + 1
    span = stride * (t_out - 1) + 1
    out = np.zeros(x.shape[:-2] + (f_out, t_out), dtype=DTYPE)
    for k in range(k_size):
        out += kernel.data[:, :, k] @ x.data[..., :, k:k + span:stride]

    def backward(g):
        if kernel.requires_grad:
            gk = np.zeros(kernel.shape, dtype=DTYPE)
            g_flat = g.reshape(-1, f_out, t_out)
            for k in range(k_size):
                x_k = x.data[..., :, k:k + span:stride].reshape(-1, f_in, t_out)
                gk[:, :, k] = np.einsum("bot,bit->oi", g_flat, x_k)
            kernel._accumulate(gk)
        if x.requires_grad:
            gx = np.zeros(x.shape, dtype=DTYPE)
            for k in range(k_size):
                gx[..., :, k:k + span:stride] += kernel.data[:, :, k].T @ g
            x._accumulate(gx)

    return _make(out, (x, kernel), backward, "conv1d")


def conv_transpose1d(input: Tensor, kernel: Tensor, stride: int = 1,
                     paired_kernel_size: Optional[int] = None,
                     paired_stride: Optional[int] = None) -> Tensor:
    """Transposed 1-D convolution. input [..., F_in, T'], kernel [F_in, F_out, K].

    When the paired encoder's kernel size and stride are given they must match.
    """
    x = as_tensor(input)
    if kernel.ndim != 3:
        raise DimensionError(f"conv_transpose1d kernel must be [F_in, F_out, K], got {kernel.shape}")
    f_in, f_out, k_size = kernel.shape
    if paired_kernel_size is not None and paired_kernel_size != k_size:
        raise ConfigError(f"Decoder kernel size {k_size} does not mirror encoder kernel size {paired_kernel_size}")
    if paired_stride is not None and paired_stride != stride:
        raise ConfigError(f"Decoder stride {stride} does not mirror encoder stride {paired_stride}")
    if stride < 1:
        raise InputError("conv_transpose1d stride must be >= 1")
    if x.ndim < 2 or x.shape[-2] != f_in:
        raise DimensionError(f"conv_transpose1d expects {f_in} input channels, got shape {x.shape}")

    t_in = x.shape[-1]
    span = stride * (t_in - 1) + 1
    length = (t_in - 1) * stride + k_size
    out = np.zeros(x.shape[:-2] + (f_out, length), dtype=DTYPE)
    for k in range(k_size):
        out[..., :, k:k + span:stride] += kernel.data[:, :, k].T @ x.data

    def backward(g):
        if x.requires_grad:
            gx = np.zeros(x.shape, dtype=DTYPE)
            for k in range(k_size):
                gx += kernel.data[:, :, k] @ g[..., :, k:k + span:stride]
            x._accumulate(gx)
        if kernel.requires_grad:
            gk = np.zeros(kernel.shape, dtype=DTYPE)
            x_flat = x.data.reshape(-1, f_in, t_in)
            for k in range(k_size):
                g_k = g[..., :, k:k + span:stride].reshape(-1, f_out, t_in)
                gk[:, :, k] = np.einsum("bit,bot->io", x_flat, g_k)
            kernel._accumulate(gk)

    return _make(out, (x, kernel), backward, "conv_transpose1d")


# framing

def frame(a: Tensor, size: int, hop: int, n_frames: int) -> Tensor:
    """Cut the last axis into ``n_frames`` frames: [..., T] -> [..., size, n_frames]."""
    a = as_tensor(a)
    needed = hop * (n_frames - 1) + size
    if a.shape[-1] < needed:
        raise DimensionError(f"frame needs length {needed}, got {a.shape[-1]}")
    span = hop * (n_frames - 1) + 1
    out = np.stack([a.data[..., c:c + span:hop] for c in range(size)], axis=-2)

    def backward(g):
        full = np.zeros(a.shape, dtype=DTYPE)
        for c in range(size):
            full[..., c:c + span:hop] += g[..., c, :]
        a._accumulate(full)

    return _make(out, (a,), backward, "frame")


def overlap_add(a: Tensor, hop: int, length: int) -> Tensor:
    """Adjoint of ``frame``: [..., size, n_frames] -> [..., length] (plain sum)."""
    a = as_tensor(a)
    size, n_frames = a.shape[-2], a.shape[-1]
    span = hop * (n_frames - 1) + 1
    if length < hop * (n_frames - 1) + size:
        raise DimensionError(f"overlap_add output length {length} too short")
    out = np.zeros(a.shape[:-2] + (length,), dtype=DTYPE)
    for c in range(size):
        out[..., c:c + span:hop] += a.data[..., c, :]

    def backward(g):
        a._accumulate(np.stack([g[..., c:c + span:hop] for c in range(size)], axis=-2))

    return _make(out, (a,), backward, "overlap_add")


# attention

ATTENTION_KEYS = ("q.weight", "q.bias", "k.weight", "k.bias", "v.weight", "v.bias", "out.weight", "out.bias")


def _split_heads(x: Tensor, heads: int) -> Tensor:
    lead = x.shape[:-2]
    seq, dim = x.shape[-2], x.shape[-1]
    n = len(lead)
    x = reshape(x, lead + (seq, heads, dim // heads))
    return transpose(x, tuple(range(n)) + (n + 1, n, n + 2))


def _merge_heads(x: Tensor) -> Tensor:
    lead = x.shape[:-3]
    heads, seq, head_dim = x.shape[-3], x.shape[-2], x.shape[-1]
    n = len(lead)
    x = transpose(x, tuple(range(n)) + (n + 1, n, n + 2))
    return reshape(x, lead + (seq, heads * head_dim))


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, heads: int,
                         params: Mapping[str, Tensor]) -> Tensor:
    """Scaled dot-product attention over axis -2 of [..., T, D] inputs (no causal mask)."""
    dim = q.shape[-1]
    if heads < 1 or dim % heads:
        raise ConfigError(f"Model dimension {dim} is not divisible by {heads} heads")
    missing = [key for key in ATTENTION_KEYS if key not in params]
    if missing:
        raise ConfigError(f"Attention parameters missing: {', '.join(missing)}")

    qh = _split_heads(affine(q, params["q.weight"], params["q.bias"]), heads)
    kh = _split_heads(affine(k, params["k.weight"], params["k.bias"]), heads)
    vh = _split_heads(affine(v, params["v.weight"], params["v.bias"]), heads)

    scores = mul(matmul(qh, swap_last(kh)), 1.0 / math.sqrt(dim // heads))
    weights = softmax(scores, axis=-1)
    context = _merge_heads(matmul(weights, vh))
    return affine(context, params["out.weight"], params["out.bias"])


# gradient checking

def grad_check_report(fn: Callable[[], Tensor], inputs: Iterable[Tensor], h: float = 1e-5,
                      max_entries: Optional[int] = None, seed: int = 0,
                      atol: float = GRAD_CHECK_ATOL) -> Dict[str, float]:
    """Compare reverse-mode gradients with central differences.

    ``fn`` rebuilds the computation from the current values of ``inputs``;
    non-scalar outputs are sum-reduced. The error per input is
    ||analytic - numeric|| / max(||analytic||, ||numeric||) over the sampled
    entries. When both norms are below ``atol`` the gradient is zero up to
    finite-difference roundoff and the error is reported as 0.

    Returns:
        Mapping of input label to relative error.
    """
    inputs = list(inputs)
    rng = np.random.default_rng(seed)

    for t in inputs:
        t.grad = np.zeros_like(t.data) if isinstance(t, Parameter) else None
        t.requires_grad = True

    def scalar(out: Tensor) -> Tensor:
        return out if out.size == 1 else tsum(out)

    out = scalar(fn())
    out.backward()

    report = {}
    for i, t in enumerate(inputs):
        label = getattr(t, "name", None) or f"input{i}"
        analytic_full = t.grad if t.grad is not None else np.zeros_like(t.data)
        if not np.all(np.isfinite(analytic_full)):
            raise NumericError(f"Non-finite analytic gradient for {label}")

        if max_entries is None or max_entries >= t.size:
            indices = np.arange(t.size)
        else:
            indices = rng.choice(t.size, size=max_entries, replace=False)

        numeric = np.empty(len(indices), dtype=DTYPE)
        flat = t.data.reshape(-1)
        for j, idx in enumerate(indices):
            original = flat[idx]
            flat[idx] = original + h
            f_plus = scalar(fn()).item()
            flat[idx] = original - h
            f_minus = scalar(fn()).item()
            flat[idx] = original
            numeric[j] = (f_plus - f_minus) / (2.0 * h)
        if not np.all(np.isfinite(numeric)):
            raise NumericError(f"Non-finite numeric gradient for {label}")

        analytic = analytic_full.reshape(-1)[indices]
        scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
        report[label] = 0.0 if scale < atol else float(np.linalg.norm(analytic - numeric) / scale)
    return report


def grad_check(fn: Callable[[], Tensor], inputs: Iterable[Tensor], h: float = 1e-5,
               max_entries: Optional[int] = None, seed: int = 0, atol: float = GRAD_CHECK_ATOL) -> float:
    """Maximum relative error over ``inputs`` (see ``grad_check_report``)."""
    report = grad_check_report(fn, inputs, h=h, max_entries=max_entries, seed=seed, atol=atol)
    return max(report.values()) if report else 0.0


# parameters

def stable_key(name: str) -> int:
    return int.from_bytes(hashlib.sha256(name.encode("utf-8")).digest()[:8], "little")


class ParameterSet:
    """Named, ordered collection of parameters.

    Initial values depend only on (seed, name, shape), never on creation
    order, so differently wired models built from one seed share every
    parameter they have in common.
    """

    def __init__(self, seed: int = 0):
        self.seed = seed
        self._params: Dict[str, Parameter] = {}

    def create(self, name: str, shape: Sequence[int], init: str = "uniform",
               fan_in: Optional[int] = None) -> Parameter:
        if name in self._params:
            raise ConfigError(f"Parameter '{name}' is defined twice")
        shape = tuple(int(s) for s in shape)
        rng = np.random.default_rng([self.seed, stable_key(name)])
        if init == "uniform":
            fan_in = fan_in or shape[-1]
            bound = math.sqrt(1.0 / fan_in)
            value = rng.uniform(-bound, bound, size=shape)
        elif init == "zeros":
            value = np.zeros(shape)
        elif init == "ones":
            value = np.ones(shape)
        else:
            raise ConfigError(f"Unknown initializer '{init}'")
        param = Parameter(value, name)
        self._params[name] = param
        return param

    def group(self, prefix: str) -> Dict[str, Parameter]:
        """Parameters under ``prefix.``, keyed by the remainder of their name."""
        start = prefix + "."
        return {name[len(start):]: p for name, p in self._params.items() if name.startswith(start)}

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[Parameter]:
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> List[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def num_elements(self) -> int:
        return int(sum(p.size for p in self._params.values()))

    def zero_grad(self):
        for p in self._params.values():
            p.zero_grad()

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self._params.items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray], strict: bool = True):
        missing = [name for name in self._params if name not in state]
        if missing and strict:
            raise ConfigError(f"Checkpoint is missing parameters: {', '.join(missing[:5])}")
        for name, p in self._params.items():
            if name not in state:
                continue
            value = np.asarray(state[name], dtype=DTYPE)
            if value.shape != p.shape:
                raise ConfigError(f"Parameter '{name}' has shape {p.shape}, checkpoint has {value.shape}")
            p.data[...] = value


# checkpoint file

CHECKPOINT_MAGIC = b"STSECKPT"
CHECKPOINT_VERSION = 1


def save_checkpoint(path: str, tensors: Mapping[str, np.ndarray], header: Mapping[str, Any]):
    """Write named fp64 tables behind a JSON header.

    Layout: magic, uint32 version, uint32 header length (little-endian),
    UTF-8 JSON header, then each table as little-endian float64 in the order
    listed in ``header["tensors"]``.
    """
    entries = []
    blobs = []
    offset = 0
    for name, value in tensors.items():
        array = np.ascontiguousarray(value, dtype="<f8")
        entries.append({"name": name, "shape": list(array.shape), "offset": offset, "count": int(array.size)})
        blobs.append(array.tobytes())
        offset += array.nbytes

    full_header = dict(header)
    full_header.update({"version": CHECKPOINT_VERSION, "byte_order": "little",
                        "dtype": "float64", "tensors": entries})
    header_bytes = json.dumps(full_header, sort_keys=True).encode("utf-8")

    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    tmp_path = path + ".tmp"
    with open(tmp_path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(header_bytes)))
        f.write(header_bytes)
        for blob in blobs:
            f.write(blob)
    os.replace(tmp_path, path)


def load_checkpoint(path: str) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    """Read a checkpoint written by ``save_checkpoint``."""
    if not os.path.isfile(path):
        raise ConfigError(f"Checkpoint not found: {path}")
    with open(path, "rb") as f:
        raw = f.read()

    if raw[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint file (bad magic)")
    pos = len(CHECKPOINT_MAGIC)
    version, header_len = struct.unpack("<II", raw[pos:pos + 8])
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    pos += 8
    header = json.loads(raw[pos:pos + header_len].decode("utf-8"))
    data_start = pos + header_len

    tensors = {}
    for entry in header["tensors"]:
        start = data_start + entry["offset"]
        array = np.frombuffer(raw, dtype="<f8", count=entry["count"], offset=start)
        tensors[entry["name"]] = array.reshape(entry["shape"]).astype(DTYPE)
    return tensors, header
