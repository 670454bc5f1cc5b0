"""Reverse-mode automatic differentiation over dense float tensors.

The layer set is exactly what a small encoder-decoder segmentation network
needs: 2-D convolution, transposed convolution, ReLU, elementwise add/mul,
bilinear resize, softmax cross-entropy, and plain SGD. Forward ops record a
tape of closures; ``backward`` walks it once and frees it, which is all the
memory management batch-1 training requires.

float32 is the working precision. Every op preserves float64 inputs so
gradient checks can run in a tighter debug precision.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .interp import bilinear_matrix


class ShapeError(ValueError):
    """Operand shapes are incompatible; the message names both operands."""


class GraphError(RuntimeError):
    """Autodiff state violation: bad backward call or missing gradient."""


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable tape recording inside the block (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """N-dimensional value-plus-gradient array.

    ``grad`` is allocated lazily on first accumulation and holds the same
    shape and dtype as ``data``. Tensors produced by ops carry a backward
    closure until the surrounding graph is consumed by ``backward``.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "_released")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = np.float32
        self.data = np.asarray(data, dtype=dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable[[np.ndarray], None] | None = None
        self._released = False

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: tuple["Tensor", ...],
                 backward_fn: Callable[[np.ndarray], None]) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        out._released = False
        if _grad_enabled and out.requires_grad:
            out._parents = parents
            out._backward_fn = backward_fn
        else:
            out._parents = ()
            out._backward_fn = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dims(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _check_same_dtype(op: str, *tensors: Tensor) -> None:
    dtypes = {t.dtype for t in tensors}
    if len(dtypes) > 1:
        raise ShapeError(f"{op}: mixed dtypes {sorted(str(d) for d in dtypes)}")


# ---------------------------------------------------------------------------
# primitives


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Strided zero-padded cross-correlation of [N,C,H,W] with [K,C,kh,kw].

    Output is [N,K,H',W'] with H' = floor((H + 2*pad - kh)/stride) + 1.
    """
    if x.ndim != 4 or w.ndim != 4 or b.ndim != 1:
        raise ShapeError(f"conv2d: expected 4-D input, 4-D weights, 1-D bias, "
                         f"got input {x.shape}, weights {w.shape}, bias {b.shape}")
    if stride < 1 or pad < 0:
        raise ValueError(f"conv2d: stride must be >= 1 and pad >= 0, got {stride}, {pad}")
    n, c, h, wd = x.shape
    k, cw, kh, kw = w.shape
    if cw != c:
        raise ShapeError(f"conv2d: weights expect {cw} input channels, input has {c} "
                         f"(input {x.shape}, weights {w.shape})")
    if b.shape[0] != k:
        raise ShapeError(f"conv2d: bias length {b.shape[0]} does not match {k} filters "
                         f"(weights {w.shape}, bias {b.shape})")
    if kh > h + 2 * pad or kw > wd + 2 * pad:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input "
                         f"{h + 2 * pad}x{wd + 2 * pad} (input {x.shape}, weights {w.shape})")
    _check_same_dtype("conv2d", x, w, b)

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.tensordot(win, w.data, axes=([1, 4, 5], [1, 2, 3]))  # N,H',W',K
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    out += b.data.reshape(1, -1, 1, 1)
    ho, wo = out.shape[2], out.shape[3]

    def backward_fn(g: np.ndarray) -> None:
        if w.requires_grad:
            _accum(w, np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3])))
        if b.requires_grad:
            _accum(b, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    t = np.tensordot(g, w.data[:, :, i, j], axes=([1], [0]))  # N,H',W',C
                    gxp[:, :, i:i + (ho - 1) * stride + 1:stride,
                            j:j + (wo - 1) * stride + 1:stride] += t.transpose(0, 3, 1, 2)
            _accum(x, gxp[:, :, pad:pad + h, pad:pad + wd] if pad else gxp)

    return Tensor._from_op(out, (x, w, b), backward_fn)


def conv2d_transpose(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Transposed convolution of [N,C,H,W] with [C,K,kh,kw] weights.

    Output is [N,K,H'',W''] with H'' = (H-1)*stride - 2*pad + kh. With shared
    weights and zero bias this is the exact linear adjoint of ``conv2d``.
    """
    if x.ndim != 4 or w.ndim != 4 or b.ndim != 1:
        raise ShapeError(f"conv2d_transpose: expected 4-D input, 4-D weights, 1-D bias, "
                         f"got input {x.shape}, weights {w.shape}, bias {b.shape}")
    if stride < 1 or pad < 0:
        raise ValueError(f"conv2d_transpose: stride must be >= 1 and pad >= 0, got {stride}, {pad}")
    n, c, h, wd = x.shape
    cw, k, kh, kw = w.shape
    if cw != c:
        raise ShapeError(f"conv2d_transpose: weights expect {cw} input channels, input has {c} "
                         f"(input {x.shape}, weights {w.shape})")
    if b.shape[0] != k:
        raise ShapeError(f"conv2d_transpose: bias length {b.shape[0]} does not match {k} filters "
                         f"(weights {w.shape}, bias {b.shape})")
    hf, wf = (h - 1) * stride + kh, (wd - 1) * stride + kw
    if hf - 2 * pad < 1 or wf - 2 * pad < 1:
        raise ShapeError(f"conv2d_transpose: padding {pad} consumes the whole {hf}x{wf} output "
                         f"(input {x.shape}, weights {w.shape})")
    _check_same_dtype("conv2d_transpose", x, w, b)

    # accumulate the overlapping scatter in float64: one rounding per output
    # element instead of kh*kw, which the float32 gradient checks rely on
    out_full = np.zeros((n, k, hf, wf), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            t = np.tensordot(x.data, w.data[:, :, i, j], axes=([1], [0]))  # N,H,W,K
            out_full[:, :, i:i + (h - 1) * stride + 1:stride,
                         j:j + (wd - 1) * stride + 1:stride] += t.transpose(0, 3, 1, 2)
    out = out_full[:, :, pad:hf - pad, pad:wf - pad].astype(x.dtype)
    out += b.data.reshape(1, -1, 1, 1)

    def backward_fn(g: np.ndarray) -> None:
        g_full = np.zeros((n, k, hf, wf), dtype=g.dtype)
        g_full[:, :, pad:hf - pad, pad:wf - pad] = g
        win = sliding_window_view(g_full, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
        if x.requires_grad:
            _accum(x, np.tensordot(win, w.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2))
        if w.requires_grad:
            _accum(w, np.tensordot(x.data, win, axes=([0, 2, 3], [0, 2, 3])))
        if b.requires_grad:
            _accum(b, g.sum(axis=(0, 2, 3)))

    return Tensor._from_op(out, (x, w, b), backward_fn)


def relu(x: Tensor) -> Tensor:
    """max(0, x); the subgradient at 0 is taken as 0."""
    out = np.maximum(x.data, 0)

    def backward_fn(g: np.ndarray) -> None:
        if x.requires_grad:
            _accum(x, g * (x.data > 0))

    return Tensor._from_op(out, (x,), backward_fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of two same-shape tensors (residual connections)."""
    if a.shape != b.shape:
        raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")
    _check_same_dtype("add", a, b)
    out = a.data + b.data

    def backward_fn(g: np.ndarray) -> None:
        if a.requires_grad:
            _accum(a, g)
        if b.requires_grad:
            _accum(b, g)

    return Tensor._from_op(out, (a, b), backward_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of two same-shape tensors."""
    if a.shape != b.shape:
        raise ShapeError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    _check_same_dtype("mul", a, b)
    out = a.data * b.data

    def backward_fn(g: np.ndarray) -> None:
        if a.requires_grad:
            _accum(a, g * b.data)
        if b.requires_grad:
            _accum(b, g * a.data)

    return Tensor._from_op(out, (a, b), backward_fn)


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize of [N,C,H,W] to [N,C,out_h,out_w] (half-pixel, edge-clamped)."""
    if x.ndim != 4:
        raise ShapeError(f"bilinear_resize: expected 4-D input, got {x.shape}")
    ry = bilinear_matrix(x.shape[2], out_h, x.dtype)
    rx = bilinear_matrix(x.shape[3], out_w, x.dtype)
    t = np.tensordot(x.data, ry, axes=([2], [1]))      # N,C,W,H'
    out = np.tensordot(t, rx, axes=([2], [1]))         # N,C,H',W'

    def backward_fn(g: np.ndarray) -> None:
        if x.requires_grad:
            gt = np.tensordot(g, ry, axes=([2], [0]))  # N,C,W',H
            _accum(x, np.tensordot(gt, rx, axes=([2], [0])))

    return Tensor._from_op(out, (x,), backward_fn)


def tensor_sum(x: Tensor) -> Tensor:
    """Sum of all elements as a scalar tensor."""
    out = np.asarray(x.data.sum(), dtype=x.dtype)

    def backward_fn(g: np.ndarray) -> None:
        if x.requires_grad:
            _accum(x, np.broadcast_to(g, x.shape))

    return Tensor._from_op(out, (x,), backward_fn)


def softmax_cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean over all N*H*W pixels of -log softmax(logits)[target].

    ``targets`` is an integer class-index map [N,H,W]; stabilized by
    max-subtraction before the exponential.
    """
    if logits.ndim != 4:
        raise ShapeError(f"softmax_cross_entropy: expected 4-D logits, got {logits.shape}")
    targets = np.asarray(targets)
    if not np.issubdtype(targets.dtype, np.integer):
        raise ValueError(f"softmax_cross_entropy: targets must be integers, got {targets.dtype}")
    n, k, h, w = logits.shape
    if targets.shape != (n, h, w):
        raise ShapeError(f"softmax_cross_entropy: targets {targets.shape} do not match "
                         f"logits {logits.shape} (expected {(n, h, w)})")
    if targets.size and (targets.min() < 0 or targets.max() >= k):
        raise ValueError(f"softmax_cross_entropy: class indices must lie in [0, {k}), "
                         f"got range [{targets.min()}, {targets.max()}]")

    z = logits.data
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    s = e.sum(axis=1, keepdims=True)
    logp = (z - m) - np.log(s)
    picked = np.take_along_axis(logp, targets[:, None], axis=1)[:, 0]
    loss = np.asarray(-picked.mean(dtype=np.float64), dtype=z.dtype)
    npix = n * h * w

    def backward_fn(g: np.ndarray) -> None:
        if logits.requires_grad:
            grad = e / s
            picked_p = np.take_along_axis(grad, targets[:, None], axis=1)
            np.put_along_axis(grad, targets[:, None], picked_p - 1.0, axis=1)
            grad *= g / npix
            _accum(logits, grad)

    return Tensor._from_op(loss, (logits,), backward_fn)


# ---------------------------------------------------------------------------
# backward pass


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            stack.append((p, False))
    return order  # parents precede children


def backward(loss: Tensor) -> None:
    """Run reverse-mode accumulation from a scalar loss and free the tape.

    Gradients accumulate into ``.grad`` of every reachable tensor with
    ``requires_grad``. A second call on the same graph raises ``GraphError``.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward requires a scalar loss, got shape {loss.shape}")
    if loss._released:
        raise GraphError("backward already consumed this graph; run a new forward pass")
    if loss._backward_fn is None:
        raise GraphError("loss has no recorded computation (leaf tensor or no_grad forward)")

    order = _toposort(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward_fn is not None and node.grad is not None:
            node._backward_fn(node.grad)
    for node in order:
        node._parents = ()
        node._backward_fn = None
    loss._released = True


# ---------------------------------------------------------------------------
# parameters and SGD


class ParamSet:
    """Named map of trainable tensors with deterministic lexicographic order."""

    def __init__(self) -> None:
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, tensor: Tensor) -> None:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        if not tensor.requires_grad:
            raise ValueError(f"parameter {name!r} must require gradients")
        self._params[name] = tensor

    def names(self) -> list[str]:
        return sorted(self._params)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        for name in self.names():
            yield name, self._params[name]

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def __iter__(self) -> Iterator[str]:
        return iter(self.names())


@dataclass(frozen=True)
class SgdConfig:
    """Plain SGD hyperparameters; defaults follow the training protocol."""

    learning_rate: float = 0.0005
    epochs: int = 200
    batch_size: int = 1

    def __post_init__(self) -> None:
        # zero learning rate / zero epochs are allowed so no-op runs stay testable
        if not np.isfinite(self.learning_rate) or self.learning_rate < 0:
            raise ValueError(f"learning_rate must be finite and >= 0, got {self.learning_rate}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")


def sgd_step(params: ParamSet, cfg: SgdConfig) -> ParamSet:
    """Apply w <- w - lr * grad to every parameter and clear the gradients.

    Raises ``GraphError`` before touching anything if any gradient is missing,
    so a failed step never leaves the parameters half-updated.
    """
    missing = [name for name, t in params.items() if t.grad is None]
    if missing:
        raise GraphError(f"sgd_step: missing gradients for {missing}")
    for _, t in params.items():
        t.data -= cfg.learning_rate * t.grad
        t.grad = None
    return params
