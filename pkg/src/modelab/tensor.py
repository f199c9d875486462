"""Dense float64 tensors with reverse-mode automatic differentiation.

The graph is dynamic: every op records a closure that scatters the output
gradient back to its parents, and ``backward`` replays those closures in
reverse topological order. Only the operations needed by the recurrent
cells are provided; there is deliberately no broadcasting between tensors.
"""

from __future__ import annotations

import math
import struct
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "FormatError",
    "GraphError",
    "tensor",
    "parameter",
    "no_grad",
    "add",
    "sub",
    "neg",
    "hadamard",
    "scale",
    "sigmoid",
    "tanh",
    "tabs",
    "tsum",
    "conv2d",
    "layer_norm",
    "concat0",
    "slice_channels",
    "repeat_channels",
    "backward",
    "grad_check",
    "zero_grad",
    "write_tensor",
    "read_tensor",
    "save_tensor",
    "load_tensor",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class FormatError(ValueError):
    """Raised on malformed serialized tensor data."""


class GraphError(RuntimeError):
    """Raised on invalid use of the differentiation graph."""


_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / metrics)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """A dense float64 array, optionally linked into a differentiation graph.

    ``data`` is treated as immutable once the tensor participates in a graph;
    ``grad`` is the only mutable buffer and is lazily allocated.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_done")

    def __init__(self, data, requires_grad=False, _parents=()):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward: Callable[[], None] | None = None
        self._done = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        """Copy of the underlying array, detached from the graph."""
        return np.array(self.data)

    def detach(self):
        return Tensor(np.array(self.data))

    def _ensure_grad(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        return self.grad

    def __repr__(self):
        tag = "param" if self.requires_grad and not self._parents else "tensor"
        return f"<{tag} shape={tuple(self.shape)}>"


def tensor(data):
    """Constant leaf (no gradient tracking)."""
    return Tensor(data)


def parameter(data):
    """Trainable leaf: receives an accumulated gradient after backward."""
    return Tensor(data, requires_grad=True)


def _node(data, parents):
    track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if track:
        return Tensor(data, requires_grad=True, _parents=tuple(parents)), True
    return Tensor(data), False


def _check_same_shape(a, b, op):
    if a.data.shape != b.data.shape:
        raise ShapeError(
            f"{op}: operand shapes differ: {tuple(a.data.shape)} vs {tuple(b.data.shape)}"
        )


# ---------------------------------------------------------------------------
# elementwise ops


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; shapes must match exactly."""
    _check_same_shape(a, b, "add")
    out, track = _node(a.data + b.data, (a, b))
    if track:

        def _bw():
            if a.requires_grad:
                a._ensure_grad()
                a.grad += out.grad
            if b.requires_grad:
                b._ensure_grad()
                b.grad += out.grad

        out._backward = _bw
    return out


def neg(a: Tensor) -> Tensor:
    out, track = _node(-a.data, (a,))
    if track:

        def _bw():
            a._ensure_grad()
            a.grad -= out.grad

        out._backward = _bw
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise difference; shapes must match exactly."""
    _check_same_shape(a, b, "sub")
    out, track = _node(a.data - b.data, (a, b))
    if track:

        def _bw():
            if a.requires_grad:
                a._ensure_grad()
                a.grad += out.grad
            if b.requires_grad:
                b._ensure_grad()
                b.grad -= out.grad

        out._backward = _bw
    return out


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; no broadcasting."""
    _check_same_shape(a, b, "hadamard")
    out, track = _node(a.data * b.data, (a, b))
    if track:

        def _bw():
            if a.requires_grad:
                a._ensure_grad()
                a.grad += b.data * out.grad
            if b.requires_grad:
                b._ensure_grad()
                b.grad += a.data * out.grad

        out._backward = _bw
    return out


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar constant."""
    c = float(c)
    out, track = _node(a.data * c, (a,))
    if track:

        def _bw():
            a._ensure_grad()
            a.grad += c * out.grad

        out._backward = _bw
    return out


def _sigmoid(x):
    # exp(-|x|) never overflows; saturates to exactly 0.0/1.0 in float64
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0, z) / (1.0 + z)


def sigmoid(a: Tensor) -> Tensor:
    """Logistic function, numerically stable at large |x|."""
    y = _sigmoid(a.data)
    out, track = _node(y, (a,))
    if track:

        def _bw():
            a._ensure_grad()
            a.grad += y * (1.0 - y) * out.grad

        out._backward = _bw
    return out


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    out, track = _node(y, (a,))
    if track:

        def _bw():
            a._ensure_grad()
            a.grad += (1.0 - y * y) * out.grad

        out._backward = _bw
    return out


def tabs(a: Tensor) -> Tensor:
    """Elementwise absolute value; subgradient 0 at 0."""
    out, track = _node(np.abs(a.data), (a,))
    if track:
        sgn = np.sign(a.data)

        def _bw():
            a._ensure_grad()
            a.grad += sgn * out.grad

        out._backward = _bw
    return out


def tsum(a: Tensor) -> Tensor:
    """Sum of all elements; the usual root of a loss graph."""
    out, track = _node(a.data.sum(), (a,))
    if track:

        def _bw():
            a._ensure_grad()
            a.grad += out.grad

        out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# structural ops


def concat0(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along axis 0 (used to fuse gate kernels into one conv)."""
    if not parts:
        raise ShapeError("concat0: empty input list")
    out, track = _node(np.concatenate([p.data for p in parts], axis=0), tuple(parts))
    if track:
        sizes = [p.data.shape[0] for p in parts]

        def _bw():
            off = 0
            for p, n in zip(parts, sizes):
                if p.requires_grad:
                    p._ensure_grad()
                    p.grad += out.grad[off : off + n]
                off += n

        out._backward = _bw
    return out


def slice_channels(a: Tensor, start: int, stop: int) -> Tensor:
    """Slice along the channel axis of a (B, C, H, W) tensor."""
    if a.data.ndim != 4:
        raise ShapeError(f"slice_channels: expected 4-d tensor, got shape {tuple(a.shape)}")
    out, track = _node(a.data[:, start:stop], (a,))
    if track:

        def _bw():
            a._ensure_grad()
            a.grad[:, start:stop] += out.grad

        out._backward = _bw
    return out


def repeat_channels(a: Tensor, reps: int) -> Tensor:
    """Expand a single-channel map (B, 1, H, W) to (B, reps, H, W)."""
    if a.data.ndim != 4 or a.data.shape[1] != 1:
        raise ShapeError(
            f"repeat_channels: expected (B, 1, H, W) tensor, got shape {tuple(a.shape)}"
        )
    out, track = _node(np.repeat(a.data, reps, axis=1), (a,))
    if track:

        def _bw():
            a._ensure_grad()
            a.grad += out.grad.sum(axis=1, keepdims=True)

        out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# convolution


def _same_pad(x, p):
    if p == 0:
        return x
    b, c, h, w = x.shape
    xp = np.zeros((b, c, h + 2 * p, w + 2 * p), dtype=x.dtype)
    xp[:, :, p : p + h, p : p + w] = x
    return xp


def _windows(xp, k, out_h, out_w):
    # overlapping k x k patch view; no copy until tensordot reshapes it
    b, c = xp.shape[:2]
    sb, sc, sh, sw = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp, (b, c, out_h, out_w, k, k), (sb, sc, sh, sw, sh, sw), writeable=False
    )


def _conv_same(x, w):
    # x (B,Ci,H,W) cross-correlated with w (Co,Ci,k,k), stride 1, zero padding
    k = w.shape[2]
    h, wd = x.shape[2], x.shape[3]
    win = _windows(_same_pad(x, (k - 1) // 2), k, h, wd)
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Shape-preserving 2-d cross-correlation, stride 1, odd kernel.

    Input (B, Ci, H, W), weight (Co, Ci, k, k), optional bias (Co,).
    Zero padding of (k-1)/2 on each side keeps the spatial dims.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d: input must be 4-d (B,Ci,H,W), got shape {tuple(x.shape)}")
    if weight.data.ndim != 4:
        raise ShapeError(
            f"conv2d: weight must be 4-d (Co,Ci,k,k), got shape {tuple(weight.shape)}"
        )
    co, ci, k, k2 = weight.data.shape
    if k != k2:
        raise ShapeError(f"conv2d: kernel must be square, got {k}x{k2}")
    if k % 2 == 0:
        raise ShapeError(f"conv2d: kernel size must be odd, got {k}")
    if x.data.shape[1] != ci:
        raise ShapeError(
            f"conv2d: channel mismatch: input shape {tuple(x.shape)} has "
            f"{x.data.shape[1]} channels, weight shape {tuple(weight.shape)} expects {ci}"
        )
    if bias is not None and bias.data.shape != (co,):
        raise ShapeError(
            f"conv2d: bias shape {tuple(bias.shape)} does not match {co} output channels"
        )

    y = _conv_same(x.data, weight.data)
    if bias is not None:
        y += bias.data[None, :, None, None]

    parents = (x, weight) if bias is None else (x, weight, bias)
    out, track = _node(y, parents)
    if track:
        p = (k - 1) // 2
        h, wd = x.data.shape[2], x.data.shape[3]

        def _bw():
            g = out.grad
            if bias is not None and bias.requires_grad:
                bias._ensure_grad()
                bias.grad += g.sum(axis=(0, 2, 3))
            if weight.requires_grad:
                win = _windows(_same_pad(x.data, p), k, h, wd)
                weight._ensure_grad()
                weight.grad += np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
            if x.requires_grad:
                wt = np.ascontiguousarray(
                    weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
                )
                x._ensure_grad()
                x.grad += _conv_same(g, wt)

        out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# layer normalization


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-sample normalization over (C, H, W), then per-channel affine."""
    if x.data.ndim != 4:
        raise ShapeError(f"layer_norm: expected (B,C,H,W) input, got shape {tuple(x.shape)}")
    c = x.data.shape[1]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError(
            f"layer_norm: gamma/beta shapes {tuple(gamma.shape)}/{tuple(beta.shape)} "
            f"do not match {c} channels"
        )
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")

    axes = (1, 2, 3)
    mu = x.data.mean(axis=axes, keepdims=True)
    var = x.data.var(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    y = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    out, track = _node(y, (x, gamma, beta))
    if track:

        def _bw():
            g = out.grad
            if beta.requires_grad:
                beta._ensure_grad()
                beta.grad += g.sum(axis=(0, 2, 3))
            if gamma.requires_grad:
                gamma._ensure_grad()
                gamma.grad += (g * xhat).sum(axis=(0, 2, 3))
            if x.requires_grad:
                gg = g * gamma.data[None, :, None, None]
                m1 = gg.mean(axis=axes, keepdims=True)
                m2 = (gg * xhat).mean(axis=axes, keepdims=True)
                x._ensure_grad()
                x.grad += inv * (gg - m1 - xhat * m2)

        out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# backward pass


def _topo_order(root: Tensor) -> list[Tensor]:
    # iterative DFS: rollout graphs exceed the default recursion limit
    order: list[Tensor] = []
    seen = set()
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into every trainable leaf's grad.

    ``root`` must be a scalar. A second call on the same root is rejected;
    repeated backward passes over *different* graphs add into leaf grads,
    which is what gradient accumulation and fan-out both rely on.
    """
    if root.data.size != 1:
        raise GraphError(f"backward: root must be scalar, got shape {tuple(root.shape)}")
    if root._done:
        raise GraphError("backward: graph already consumed; rebuild the forward pass")
    root._done = True
    if not root.requires_grad:
        raise GraphError("backward: root is not connected to any trainable leaf")
    root._ensure_grad()
    root.grad += 1.0
    for node in reversed(_topo_order(root)):
        if node._backward is not None:
            node._backward()


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-4) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must be scalar-valued and deterministic. Error per coordinate is
    |analytic - numeric| / max(1, |numeric|).
    """
    if not x.requires_grad:
        raise GraphError("grad_check: x must be a trainable leaf")
    x.data = np.ascontiguousarray(x.data)  # the probe below mutates through a view
    x.grad = None
    backward(f(x))
    if x.grad is None:
        raise GraphError("grad_check: f does not depend on x")
    analytic = x.grad.copy()

    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x).data)
        flat[i] = orig - h
        fm = float(f(x).data)
        flat[i] = orig
        nflat[i] = (fp - fm) / (2.0 * h)

    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))
    return float(err.max())


# ---------------------------------------------------------------------------
# serialization: "MDTN" container, little-endian

_TENSOR_MAGIC = b"MDTN"
_TENSOR_VERSION = 1


def _read_exact(f, n, what):
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated tensor data while reading {what}")
    return buf


def write_tensor(f, t) -> None:
    """Write a tensor (or array) to a binary stream in the MDTN format."""
    data = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
    f.write(_TENSOR_MAGIC)
    f.write(struct.pack("<II", _TENSOR_VERSION, data.ndim))
    for d in data.shape:
        f.write(struct.pack("<I", d))
    f.write(np.ascontiguousarray(data, dtype="<f8").tobytes())


def read_tensor(f) -> np.ndarray:
    """Read one MDTN record; raises FormatError on any corruption."""
    magic = _read_exact(f, 4, "magic")
    if magic != _TENSOR_MAGIC:
        raise FormatError(f"bad tensor magic {magic!r}, expected {_TENSOR_MAGIC!r}")
    version, ndim = struct.unpack("<II", _read_exact(f, 8, "header"))
    if version != _TENSOR_VERSION:
        raise FormatError(f"unsupported tensor format version {version}")
    dims = struct.unpack("<" + "I" * ndim, _read_exact(f, 4 * ndim, "dims"))
    count = math.prod(dims) if dims else 1
    raw = _read_exact(f, 8 * count, "payload")
    return np.frombuffer(raw, dtype="<f8").reshape(dims).astype(np.float64)


def save_tensor(path, t) -> None:
    with open(path, "wb") as f:
        write_tensor(f, t)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        arr = read_tensor(f)
        if f.read(1):
            raise FormatError("trailing bytes after tensor payload")
    return arr
